//! Holds the `acceptance` test binary. It lives in its own package so that a
//! failing criterion does not stop the other crates' tests from running
//! under `cargo test --workspace`.
