//! Benchmarks for the numeric kernels, metrics and model passes; see `benches/`.
