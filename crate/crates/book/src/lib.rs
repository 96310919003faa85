//! Compiles the guide's code blocks as doc-tests, so every snippet in
//! `book/` builds and runs against the current library.

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/data.md")]
pub mod data {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/per-example.md")]
pub mod per_example {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/reward-kernels.md")]
pub mod reward_kernels {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/taylor.md")]
pub mod taylor {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/group-selection.md")]
pub mod group_selection {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/verification.md")]
pub mod verification {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/reproducibility.md")]
pub mod reproducibility {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
