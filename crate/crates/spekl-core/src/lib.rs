//! Laboratory for toy operating-system kernels under classic and speculative
//! execution.
//!
//! The crate models a small imperative kernel language with an explicit,
//! user/kernel-partitioned address space. Systems pair an initial store with
//! a syscall map and per-syscall capability sets; an instrumented semantics
//! flags any kernel access outside the running syscall's capabilities.
//! Layout randomization places kernel objects in uniformly chosen slots, and
//! a directive-driven speculative semantics exposes branch, store-to-load and
//! call-target prediction to an attacker language with poison/observe
//! primitives. Three fence-insertion passes harden systems against the
//! speculative attacker, and bounded checkers decide the safety and
//! non-interference properties at desk scale.

pub mod analysis;
pub mod attacker;
pub mod buffer;
pub mod casestudy;
pub mod classic;
pub mod lang;
pub mod layout;
pub mod specsem;
pub mod transform;

pub use analysis::{ExplorationBudget, Trace, Verdict};
pub use classic::{Mode, Outcome, RegisterMap};
pub use lang::{Cmd, Expr, Instr, System, Value};
pub use layout::{Layout, LayoutDistribution};
pub use specsem::{Directive, SpecStack};
pub use transform::Transformation;
