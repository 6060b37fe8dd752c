//! Criterion benchmarks for the machine-jnd kernels; see `benches/`.
