//! Experiment orchestration: configuration, synthetic prompt suites, variant
//! benchmarks, the rugged-landscape scenario, gradient audits and the CLI.

mod bench;
pub mod cli;
mod gradcheck;
mod rugged;

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::norm;
use crate::error::{Error, Result};
use crate::explorer::{ExplorationConfig, Mode};
use crate::generator::{
    Category, Generator, GeneratorParams, PromptObject, PromptSpec, Relation, RelationKind,
};
use crate::optimizer::OptimizerConfig;
use crate::rewards::RewardSpec;

pub use bench::{run_bench, run_bench_with, BenchCell, BenchReport, BenchRow};
pub use gradcheck::{run_gradcheck, GradcheckConfig, GradcheckReport, TermError};
pub use rugged::{
    build_landscape, run_rugged_scenario, validate_landscape, RuggedConfig, RuggedReport,
    RuggedTrial,
};

/// Prompts per category.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub color: usize,
    pub spatial: usize,
    pub numeracy: usize,
    pub complex: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            color: 25,
            spatial: 25,
            numeracy: 25,
            complex: 25,
        }
    }
}

impl SuiteConfig {
    pub fn uniform(per_category: usize) -> Self {
        SuiteConfig {
            color: per_category,
            spatial: per_category,
            numeracy: per_category,
            complex: per_category,
        }
    }

    pub fn count(&self, c: Category) -> usize {
        match c {
            Category::Color => self.color,
            Category::Spatial => self.spatial,
            Category::Numeracy => self.numeracy,
            Category::Complex => self.complex,
        }
    }

    pub fn total(&self) -> usize {
        Category::ALL.iter().map(|&c| self.count(c)).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dim: usize,
    pub slots: usize,
    pub embed_dim: usize,
    pub generator_seed: u64,
    pub eta: f64,
    pub tau: f64,
    pub gamma: f64,
    pub iters: usize,
    pub candidates: usize,
    pub mode: Mode,
    pub master_seed: u64,
    /// Weights and bandwidths of each reward.
    pub rewards: Vec<RewardSpec>,
    pub suite: SuiteConfig,
    pub rugged: RuggedConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dim: 64,
            slots: 4,
            embed_dim: 16,
            generator_seed: 0,
            eta: 1.0,
            tau: 0.01,
            gamma: 0.01,
            iters: 50,
            candidates: 5,
            mode: Mode::Carinox,
            master_seed: 0,
            rewards: RewardSpec::default_set(),
            suite: SuiteConfig::default(),
            rugged: RuggedConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer().validate()?;
        if self.candidates == 0 {
            return Err(Error::Config("candidates must be at least 1".into()));
        }
        if self.rewards.is_empty() {
            return Err(Error::Config("at least one reward is required".into()));
        }
        for r in &self.rewards {
            r.validate()?;
        }
        if self.dim < 2 || self.slots < 1 || self.embed_dim < 2 {
            return Err(Error::Config(format!(
                "sizes need dim ≥ 2, slots ≥ 1, embed_dim ≥ 2 (got {}, {}, {})",
                self.dim, self.slots, self.embed_dim
            )));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            eta: self.eta,
            iters: self.iters,
            tau: self.tau,
            gamma: self.gamma,
        }
    }

    pub fn exploration(&self, mode: Mode, master_seed: u64) -> ExplorationConfig {
        ExplorationConfig {
            candidates: self.candidates,
            master_seed,
            mode,
            optimizer: self.optimizer(),
        }
    }

    pub fn generator(&self) -> Result<Generator> {
        Ok(Generator::Slots(GeneratorParams::init(
            self.generator_seed,
            self.dim,
            self.slots,
            self.embed_dim,
        )?))
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Master seed for prompt `index`; leaves room for 2²⁰ candidates per prompt.
pub fn prompt_seed(master_seed: u64, index: usize) -> u64 {
    master_seed.wrapping_add((index as u64) << 20)
}

fn random_color(rng: &mut ChaCha8Rng) -> PromptObject {
    PromptObject {
        target_color: [rng.random(), rng.random(), rng.random()],
    }
}

fn random_relation(rng: &mut ChaCha8Rng) -> Relation {
    let kind = if rng.random_bool(0.5) {
        RelationKind::LeftOf
    } else {
        RelationKind::Above
    };
    Relation {
        subject: 0,
        object: 1,
        kind,
    }
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// One random prompt of `category`.
pub fn random_prompt(
    rng: &mut ChaCha8Rng,
    category: Category,
    slots: usize,
    embed_dim: usize,
) -> PromptSpec {
    let (objects, relation, count_target) = match category {
        Category::Color => {
            let n = rng.random_range(1..=2);
            let objs: Vec<_> = (0..n).map(|_| random_color(rng)).collect();
            (objs, None, n.min(slots))
        }
        Category::Spatial => {
            let objs = vec![random_color(rng), random_color(rng)];
            (objs, Some(random_relation(rng)), 2.min(slots))
        }
        Category::Numeracy => (vec![random_color(rng)], None, rng.random_range(0..=slots)),
        Category::Complex => {
            let objs = vec![random_color(rng), random_color(rng)];
            let rel = random_relation(rng);
            (objs, Some(rel), rng.random_range(0..=slots))
        }
    };
    PromptSpec {
        objects,
        relation,
        count_target,
        target_embedding: random_unit(rng, embed_dim),
        category,
    }
}

/// Deterministic suite: categories in fixed order, `suite.count(c)` prompts each.
pub fn generate_prompt_suite(
    suite: &SuiteConfig,
    master_seed: u64,
    slots: usize,
    embed_dim: usize,
) -> Vec<PromptSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    // Stream 0 of the same seed feeds candidate 0; keep the suite apart.
    rng.set_stream(1);
    Category::ALL
        .iter()
        .flat_map(|&c| std::iter::repeat_n(c, suite.count(c)))
        .map(|c| random_prompt(&mut rng, c, slots, embed_dim))
        .collect()
}
