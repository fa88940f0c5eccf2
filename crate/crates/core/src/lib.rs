//! Risk-aware direct preference optimization on tabular n-gram policies.
//!
//! The crate is organized bottom-up:
//!
//! * [`diff`]: a small reverse-mode tape over `f64` vectors;
//! * [`risk`]: CVaR and entropic risk aggregation of finite distributions;
//! * [`policy`]: tabular k-gram softmax policies;
//! * [`losses`]: DPO, TDPO and their risk-aware generalizations;
//! * [`oracle`]: exact token-level MDP tables and numeric identity checks;
//! * [`datagen`]: synthetic preference tasks with a known reward;
//! * [`train`]: optimizers, the training loop and evaluation;
//! * [`cli`]: the `radpo` command line.

pub mod cli;
pub mod config;
pub mod datagen;
pub mod diff;
pub mod losses;
pub mod oracle;
pub mod policy;
pub mod risk;
pub mod train;

pub use diff::{GradVector, Graph, NodeRef};
pub use losses::{LossConfig, LossKind, PreferencePair};
pub use policy::{TabularPolicy, TokenId, VocabSpec};
pub use risk::{Categorical, RiskKind, RiskMeasureSpec};
