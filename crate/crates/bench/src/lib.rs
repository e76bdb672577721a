//! Criterion benchmarks for the loss, metric and attention kernels.
