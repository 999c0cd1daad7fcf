//! Criterion benchmarks for the solver and storage evaluation; see `benches/`.
