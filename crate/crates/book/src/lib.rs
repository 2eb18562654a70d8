//! Guide chapters, compiled so their code samples run as doctests. One
//! module per chapter, so a failing sample points at its file.

#[doc = include_str!("../../../book/src/intro.md")]
pub mod intro {}
#[doc = include_str!("../../../book/src/ontology.md")]
pub mod ontology {}
#[doc = include_str!("../../../book/src/pipeline.md")]
pub mod pipeline {}
#[doc = include_str!("../../../book/src/validator.md")]
pub mod validator {}
#[doc = include_str!("../../../book/src/sql.md")]
pub mod sql {}
#[doc = include_str!("../../../book/src/llm.md")]
pub mod llm {}
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}
#[doc = include_str!("../../../book/src/server.md")]
pub mod server {}
