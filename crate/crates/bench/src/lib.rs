//! Criterion benchmarks for the symseg kernels and training loop; see `benches/`.
