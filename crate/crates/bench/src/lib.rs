//! Criterion benchmarks for geostyle-core live in `benches/`.
