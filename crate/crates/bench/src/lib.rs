//! Criterion benchmarks for the filter steps and a training batch; see `benches/`.
