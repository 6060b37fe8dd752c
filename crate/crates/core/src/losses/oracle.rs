//! Straight-line scalar reference implementations of the losses, for
//! equivalence tests. Inputs are flat slices in C×H×W order.

pub fn magnitude(cam: &[f64], e: &[f64], q: f64) -> f64 {
    let mut i = 0.0;
    for &c in cam {
        i += c;
    }
    i /= cam.len() as f64;
    let n = 1.0 - i;
    let mut n0 = 0.0;
    for &v in e {
        n0 += v.abs();
    }
    n0 /= e.len() as f64;
    ((n * n + n0 * n0 + q) / (2.0 * n * n0 + q)).ln()
}

pub fn spatial(cam: &[f64], e: &[f64], h: usize, w: usize, signed: bool) -> f64 {
    let hw = h * w;
    let channels = e.len() / hw;
    let mut max = cam[0];
    for &c in cam {
        if c > max {
            max = c;
        }
    }
    let mut z = 0.0;
    for &c in cam {
        z += (c - max).exp();
    }
    let mut loss = 0.0;
    for p in 0..hw {
        let v = (cam[p] - max).exp() / z;
        let mut m = 0.0;
        for k in 0..channels {
            let x = e[k * hw + p];
            m += if signed { x } else { x.abs() };
        }
        loss += v * m / channels as f64;
    }
    loss
}
