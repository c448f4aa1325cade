//! Student-teacher multi-task pretraining on heterogeneous label spaces.
//!
//! A small tape-based autodiff core ([`tensor`]) supports a two-branch model
//! ([`nn`]) trained by cyclic or concurrent multi-task pretraining with an
//! epoch-wise EMA teacher and a projector consistency loss ([`pretrain`]).
//! The evaluation battery covers linear probing, few-shot and fine-tuning
//! transfer ([`eval`]), a subgroup-exclusive fold bias audit ([`bias`]), and
//! trial statistics ([`stats`]). The [`cli`] module exposes the whole
//! pipeline as `ark` subcommands driven by one strict JSON config.

pub mod bias;
pub mod cli;
pub mod data;
pub mod eval;
pub mod losses;
pub mod nn;
pub mod pretrain;
pub mod stats;
pub mod tensor;
