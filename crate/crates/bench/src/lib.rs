//! Criterion benchmarks for the simulator, policy and trainer; see `benches/`.
