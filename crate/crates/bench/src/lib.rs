//! Criterion benchmarks for tape kernels, RBM sampling and training steps;
//! see `benches/`.
