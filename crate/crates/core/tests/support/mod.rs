//! Brute-force reference implementations shared by integration tests.
#![allow(dead_code)]

pub mod metric_oracle;
