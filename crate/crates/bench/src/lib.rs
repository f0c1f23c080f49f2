//! Criterion benchmarks for the hpgan kernels and training step live in
//! `benches/`; this library is intentionally empty.
