//! Benchmark-only crate; see `benches/hotpath.rs`.
