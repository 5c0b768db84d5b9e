//! Desk-scale laboratory for outcome-guided logit steering in on-policy
//! self-distillation of autoregressive sequence models.
//!
//! The crate trains a tiny decoder-only transformer on synthetic verifiable
//! reasoning tasks. The student samples its own rollouts, a frozen copy of
//! the base model serves as a privileged teacher, and the teacher's logits
//! are steered by contrasting guidance pools built from verified-correct and
//! incorrect rollouts. Baseline objectives (OPSD, GRPO-lite, SFT) and the
//! published ablations share the same substrate.

pub mod diagnostics;
pub mod error;
pub mod guidance;
pub mod losses;
pub mod rollout;
pub mod seqmodel;
pub mod tape;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
