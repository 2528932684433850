//! Criterion benchmarks for the cascade; see `benches/cascade.rs`.
