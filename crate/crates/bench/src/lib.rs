//! Criterion benchmarks for the compute kernels, candidate operations and a small
//! evaluation network. Run with `cargo bench -p emonas-bench`.
