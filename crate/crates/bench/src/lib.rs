//! Criterion benchmarks for the detector kernels and training step; see `benches/`.
