//! Criterion benchmarks for the hot paths of `promptforge`; see `benches/`.
