//! Pipeline orchestration for the `fsf` binary.
