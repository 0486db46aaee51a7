//! Criterion benchmarks for `relab-core`; see `benches/`.
