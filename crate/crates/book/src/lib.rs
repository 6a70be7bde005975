//! mdbook cannot run snippets that depend on workspace crates, so every
//! chapter is included here as module documentation and its code blocks run
//! as doc-tests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/batch-norm.md")]
pub mod batch_norm {}
#[doc = include_str!("../../../book/src/federated-rounds.md")]
pub mod federated_rounds {}
#[doc = include_str!("../../../book/src/silo-statistics.md")]
pub mod silo_statistics {}
#[doc = include_str!("../../../book/src/adabn.md")]
pub mod adabn {}
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}
#[doc = include_str!("../../../book/src/gradient-checks.md")]
pub mod gradient_checks {}
#[doc = include_str!("../../../book/src/file-formats.md")]
pub mod file_formats {}
#[doc = include_str!("../../../book/src/configuration.md")]
pub mod configuration {}
#[doc = include_str!("../../../book/src/report.md")]
pub mod report {}
