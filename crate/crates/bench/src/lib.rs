//! Criterion benchmarks for the rewardlab kernels; see `benches/`.
