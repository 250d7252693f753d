//! Benchmarks for the Grove layer; see `benches/`.
