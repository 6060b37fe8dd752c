use ndarray::{concatenate, s, Array4, Axis};

use super::{Layer, Mode, Param, Real};

#[derive(Default)]
pub struct Sequential<T> {
    layers: Vec<Box<dyn Layer<T>>>,
}

impl<T: Real> Sequential<T> {
    pub fn new() -> Self {
        Self { layers: Vec::new() }
    }

    pub fn push(mut self, layer: impl Layer<T> + 'static) -> Self {
        self.layers.push(Box::new(layer));
        self
    }

    pub fn push_boxed(&mut self, layer: Box<dyn Layer<T>>) {
        self.layers.push(layer);
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

impl<T: Real> Layer<T> for Sequential<T> {
    fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Array4<T> {
        let mut h = x.clone();
        for l in &mut self.layers {
            h = l.forward(&h, mode);
        }
        h
    }

    fn backward(&mut self, grad: &Array4<T>) -> Array4<T> {
        let mut g = grad.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g);
        }
        g
    }

    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        for l in &self.layers {
            l.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for l in &mut self.layers {
            l.visit_mut(f);
        }
    }

    fn name(&self) -> &'static str {
        "sequential"
    }
}

/// `relu(body(x) + shortcut(x))`; the shortcut is the identity when `None`.
pub struct Residual<T> {
    body: Sequential<T>,
    shortcut: Option<Sequential<T>>,
    mask: Option<Array4<bool>>,
}

impl<T: Real> Residual<T> {
    pub fn new(body: Sequential<T>, shortcut: Option<Sequential<T>>) -> Self {
        Self { body, shortcut, mask: None }
    }
}

impl<T: Real> Layer<T> for Residual<T> {
    fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Array4<T> {
        let mut y = self.body.forward(x, mode);
        match &mut self.shortcut {
            Some(sc) => y += &sc.forward(x, mode),
            None => y += x,
        }
        self.mask = Some(y.mapv(|v| v > T::zero()));
        y.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
        y
    }

    fn backward(&mut self, grad: &Array4<T>) -> Array4<T> {
        let mask = self.mask.as_ref().expect("residual backward before forward");
        let mut g = grad.clone();
        g.zip_mut_with(mask, |g, &m| {
            if !m {
                *g = T::zero();
            }
        });
        let mut dx = self.body.backward(&g);
        match &mut self.shortcut {
            Some(sc) => dx += &sc.backward(&g),
            None => dx += &g,
        }
        dx
    }

    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.body.visit(f);
        if let Some(sc) = &self.shortcut {
            sc.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.body.visit_mut(f);
        if let Some(sc) = &mut self.shortcut {
            sc.visit_mut(f);
        }
    }

    fn name(&self) -> &'static str {
        "residual"
    }
}

/// Densely connected block: each unit sees the channel concatenation of the
/// block input and every earlier unit's output, and the block emits the full
/// concatenation.
pub struct DenseBlock<T> {
    units: Vec<Sequential<T>>,
    growth: usize,
}

impl<T: Real> DenseBlock<T> {
    pub fn new(units: Vec<Sequential<T>>, growth: usize) -> Self {
        Self { units, growth }
    }
}

impl<T: Real> Layer<T> for DenseBlock<T> {
    fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Array4<T> {
        let mut feats = x.clone();
        for u in &mut self.units {
            let out = u.forward(&feats, mode);
            feats = concatenate(Axis(1), &[feats.view(), out.view()]).expect("concat");
        }
        feats
    }

    fn backward(&mut self, grad: &Array4<T>) -> Array4<T> {
        let mut g = grad.clone();
        for u in self.units.iter_mut().rev() {
            let c = g.dim().1 - self.growth;
            let g_out = g.slice(s![.., c.., .., ..]).to_owned();
            let mut g_prev = g.slice(s![.., ..c, .., ..]).to_owned();
            g_prev += &u.backward(&g_out);
            g = g_prev;
        }
        g
    }

    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        for u in &self.units {
            u.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for u in &mut self.units {
            u.visit_mut(f);
        }
    }

    fn name(&self) -> &'static str {
        "dense_block"
    }
}
