//! End-to-end acceptance checks for the simulator. They live in
//! `tests/acceptance.rs`; this package sorts last so they run after the
//! other suites.
