//! Criterion benchmarks for crossloc-core; see `benches/`.
