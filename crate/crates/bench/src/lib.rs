//! Criterion benchmarks for the `dual-aae` kernels; see `benches/`.
