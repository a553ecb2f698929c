//! Criterion benchmarks for the embedding kernels; see `benches/`.
