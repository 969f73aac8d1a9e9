//! Criterion benchmarks for the tcsfm kernels live in `benches/`.
