//! Acceptance scenarios live in `tests/acceptance.rs`; run them with
//! `cargo test -p comverse-acceptance --test acceptance`.
