//! Staged few-shot fine-tuning laboratory for a miniature cascaded
//! set-prediction detector.

pub mod boxes;
pub mod detector;
pub mod diffcore;
pub mod ensemble;
pub mod eval;
pub mod pipeline;
pub mod schedule;
pub mod seeds;
pub mod synthdata;
