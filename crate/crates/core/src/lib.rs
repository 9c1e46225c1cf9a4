//! Reward-guided refinement and exploration of the initial noise of a
//! one-step generator.
//!
//! The crate is organised bottom-up:
//!
//! * [`autodiff`] records vector primitives on a tape and runs reverse-mode
//!   sweeps back to the noise leaf.
//! * [`generator`] holds the frozen toy generators mapping noise to a [`Scene`].
//! * [`rewards`] scores scenes against a [`PromptSpec`] and sums the weighted
//!   scores into a composite.
//! * [`optimizer`] performs clipped multi-backward gradient ascent on the noise
//!   with a chi-norm regularizer and best-iterate tracking.
//! * [`explorer`] runs best-of-N selection over seeded candidates.
//! * [`metric_selection`] ranks reward metrics by their rank correlation with
//!   human scores and picks a reward set.
//! * [`harness`] wires everything into experiments, reports and the CLI.

pub mod autodiff;
pub mod error;
pub mod explorer;
pub mod generator;
pub mod harness;
pub mod metric_selection;
pub mod optimizer;
pub mod rewards;

pub use error::{Error, Result};
pub use generator::{Generator, GeneratorParams, NoiseVector, PromptSpec, Scene};
pub use rewards::{RewardBreakdown, RewardKind, RewardSpec};
