//! Benchmark-only crate; the targets live in benches/hot_paths.rs.
