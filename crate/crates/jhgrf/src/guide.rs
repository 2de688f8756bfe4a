//! The user guide, compiled from `book/src/` so every example is a doctest.
//!
//! Each submodule's documentation is one chapter of the mdbook under
//! `book/`; including the markdown here means `cargo test --doc` builds and
//! runs every code block in the guide, so the prose can never drift from
//! the API it describes. Read it rendered (`mdbook build book`) or right
//! here in rustdoc.

#[doc = include_str!("../../../book/src/index.md")]
pub mod overview {}

#[doc = include_str!("../../../book/src/tensors.md")]
pub mod the_tape {}

#[doc = include_str!("../../../book/src/data.md")]
pub mod data_pipeline {}

#[doc = include_str!("../../../book/src/structure.md")]
pub mod structure_learning {}

#[doc = include_str!("../../../book/src/hypergraph.md")]
pub mod hypergraph_attention {}

#[doc = include_str!("../../../book/src/transformer.md")]
pub mod dual_axis_transformer {}

#[doc = include_str!("../../../book/src/model.md")]
pub mod the_model {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/uncertainty.md")]
pub mod uncertainty {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod batch_interface {}
