//! Minimal abductive explanations for feed-forward ReLU classifiers.

pub mod bounds;
pub mod cli;
pub mod encode;
pub mod explain;
pub mod lp;
pub mod milp;
pub mod model;
pub mod oracle;
pub mod par;
pub mod report;
pub mod slice;
pub mod synth;
