//! Criterion benchmarks for the hot paths of `s4c-core`; see `benches/`.
