//! Criterion benchmarks for the matching, forward and training-step kernels
//! live under `benches/`; run them with `cargo bench -p odlab-bench`.
