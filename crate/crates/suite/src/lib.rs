//! Holds the end-to-end acceptance target; see `tests/acceptance.rs`.
