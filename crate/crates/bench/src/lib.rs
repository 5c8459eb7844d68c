//! Benchmarks for the hot paths: convolution, wavelet packets, generator
//! forward and one full training iteration. Run with `cargo bench -p a3gan-bench`.
