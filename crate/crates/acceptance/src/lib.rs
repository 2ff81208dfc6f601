//! Release acceptance checks. Everything lives in `tests/acceptance.rs`;
//! run it with `cargo test -p keyfield-acceptance --test acceptance`.
