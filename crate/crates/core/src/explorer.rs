//! Best-of-N exploration over seeded noise candidates.
//!
//! Candidate `i` is drawn from a ChaCha8 stream seeded with
//! `master_seed + i` (wrapping), so the pool for `N` is always a prefix of
//! the pool for any larger `N`. Each candidate is refined by [`optimize`]
//! and the winner is the candidate with the highest best-tracked composite
//! total. Ties go to the lowest index.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{Generator, NoiseVector, PromptSpec, Scene};
use crate::optimizer::{optimize, ClipAudit, OptimizationTrace, OptimizerConfig};
use crate::rewards::RewardSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// One candidate, no refinement.
    Baseline,
    /// Best-of-N without refinement.
    Carinx,
    /// One candidate, refined.
    Carino,
    /// Best-of-N over refined candidates.
    Carinox,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Baseline, Mode::Carinx, Mode::Carino, Mode::Carinox];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Carinx => "carinx",
            Mode::Carino => "carino",
            Mode::Carinox => "carinox",
        }
    }

    /// Effective `(candidates, iterations)` for this mode.
    pub fn effective(self, candidates: usize, iters: usize) -> (usize, usize) {
        match self {
            Mode::Baseline => (1, 0),
            Mode::Carinx => (candidates, 0),
            Mode::Carino => (1, iters),
            Mode::Carinox => (candidates, iters),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplorationConfig {
    pub candidates: usize,
    pub master_seed: u64,
    pub mode: Mode,
    pub optimizer: OptimizerConfig,
}

impl Default for ExplorationConfig {
    fn default() -> Self {
        ExplorationConfig {
            candidates: 5,
            master_seed: 0,
            mode: Mode::Carinox,
            optimizer: OptimizerConfig::default(),
        }
    }
}

/// Seed of candidate `index` under `master_seed`.
pub fn child_seed(master_seed: u64, index: usize) -> u64 {
    master_seed.wrapping_add(index as u64)
}

pub fn sample_candidates(n: usize, d: usize, master_seed: u64) -> Vec<NoiseVector> {
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(child_seed(master_seed, i));
            NoiseVector::sample(&mut rng, d)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSummary {
    pub initial_total: f64,
    pub best_total: f64,
    pub best_iteration: usize,
}

impl From<&OptimizationTrace> for CandidateSummary {
    fn from(t: &OptimizationTrace) -> Self {
        CandidateSummary {
            initial_total: t.initial_total(),
            best_total: t.best_total,
            best_iteration: t.best_iteration,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplorationResult {
    pub mode: Mode,
    pub winner_index: usize,
    pub winner_total: f64,
    pub winner_noise: NoiseVector,
    pub winner_scene: Scene,
    pub per_candidate: Vec<CandidateSummary>,
    pub clip_audit: ClipAudit,
}

impl ExplorationResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `candidate,initial_total,best_total,best_iteration`
    pub fn candidates_csv(&self) -> String {
        let mut out = String::from("candidate,initial_total,best_total,best_iteration\n");
        for (i, c) in self.per_candidate.iter().enumerate() {
            out.push_str(&format!(
                "{i},{},{},{}\n",
                c.initial_total, c.best_total, c.best_iteration
            ));
        }
        out
    }
}

/// Index of the largest value; the first one wins ties.
pub fn select_winner(totals: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &t) in totals.iter().enumerate() {
        if best.is_none_or(|(_, b)| t > b) {
            best = Some((i, t));
        }
    }
    best.map(|(i, _)| i)
}

/// Runs every candidate through `optimize` and keeps the best.
pub fn explore(
    prompt: &PromptSpec,
    generator: &Generator,
    specs: &[RewardSpec],
    config: &ExplorationConfig,
) -> Result<ExplorationResult> {
    let starts = {
        let (n, _) = config
            .mode
            .effective(config.candidates, config.optimizer.iters);
        if n == 0 {
            return Err(Error::Config(
                "exploration needs at least one candidate".into(),
            ));
        }
        sample_candidates(n, generator.dim(), config.master_seed)
    };
    explore_from(&starts, prompt, generator, specs, config)
}

/// Like [`explore`] but with explicit starting points. The mode still
/// decides the iteration count; the candidate count is `starts.len()`.
pub fn explore_from(
    starts: &[NoiseVector],
    prompt: &PromptSpec,
    generator: &Generator,
    specs: &[RewardSpec],
    config: &ExplorationConfig,
) -> Result<ExplorationResult> {
    if starts.is_empty() {
        return Err(Error::Config(
            "exploration needs at least one candidate".into(),
        ));
    }
    let (_, iters) = config.mode.effective(starts.len(), config.optimizer.iters);
    let opt = OptimizerConfig {
        iters,
        ..config.optimizer.clone()
    };
    // Index-ordered collection keeps the reduction independent of scheduling.
    let traces: Vec<OptimizationTrace> = starts
        .par_iter()
        .enumerate()
        .map(|(i, eps)| {
            optimize(eps, generator, prompt, specs, &opt).map_err(|e| Error::Candidate {
                candidate: i,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;

    let totals: Vec<f64> = traces.iter().map(|t| t.best_total).collect();
    let winner = select_winner(&totals).expect("non-empty candidate list");
    let mut audit = ClipAudit::default();
    for t in &traces {
        audit.merge(&t.clip_audit);
    }
    let per_candidate = traces.iter().map(CandidateSummary::from).collect();
    let best = &traces[winner];
    Ok(ExplorationResult {
        mode: config.mode,
        winner_index: winner,
        winner_total: best.best_total,
        winner_noise: best.best_noise.clone(),
        winner_scene: best.best_scene.clone(),
        per_candidate,
        clip_audit: audit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{Category, GeneratorParams, PromptObject, Relation, RelationKind};

    fn setup() -> (Generator, PromptSpec) {
        let gen = Generator::Slots(GeneratorParams::init(0, 16, 3, 4).unwrap());
        let prompt = PromptSpec {
            objects: vec![
                PromptObject {
                    target_color: [0.9, 0.1, 0.1],
                },
                PromptObject {
                    target_color: [0.1, 0.2, 0.9],
                },
            ],
            relation: Some(Relation {
                subject: 0,
                object: 1,
                kind: RelationKind::LeftOf,
            }),
            count_target: 2,
            target_embedding: vec![0.5, 0.5, 0.5, 0.5],
            category: Category::Complex,
        };
        (gen, prompt)
    }

    fn run(mode: Mode, candidates: usize, seed: u64) -> ExplorationResult {
        let (gen, prompt) = setup();
        let cfg = ExplorationConfig {
            candidates,
            master_seed: seed,
            mode,
            optimizer: OptimizerConfig {
                iters: 15,
                ..OptimizerConfig::default()
            },
        };
        explore(&prompt, &gen, &RewardSpec::default_set(), &cfg).unwrap()
    }

    #[test]
    fn candidate_sampling_is_deterministic_and_prefix_stable() {
        let a = sample_candidates(5, 8, 42);
        assert_eq!(a, sample_candidates(5, 8, 42));
        assert_ne!(a[0], a[1]);
        assert_eq!(sample_candidates(1, 8, 42).len(), 1);
        assert_eq!(&sample_candidates(8, 8, 42)[..5], &a[..]);
        assert_eq!(sample_candidates(1, 8, 43)[0], a[1]);
    }

    #[test]
    fn first_maximum_wins() {
        assert_eq!(select_winner(&[0.2, 0.9, 0.9, 0.1, 0.3]), Some(1));
        assert_eq!(select_winner(&[]), None);
    }

    #[test]
    fn tie_break_through_explore_from() {
        // T = 0 with the identity generator and a quadratic reward lets us
        // place exact totals: −‖ε − 0‖² for each start.
        let gen = Generator::Identity { d: 2 };
        let prompt = setup().1;
        let specs = vec![RewardSpec::new(crate::rewards::RewardKind::Quadratic {
            target: vec![0.0, 0.0],
        })];
        let starts: Vec<NoiseVector> = [2.0, 0.5, 0.5, 3.0, 1.0]
            .iter()
            .map(|&r| NoiseVector(vec![r, 0.0]))
            .collect();
        let cfg = ExplorationConfig {
            mode: Mode::Carinx,
            ..ExplorationConfig::default()
        };
        let res = explore_from(&starts, &prompt, &gen, &specs, &cfg).unwrap();
        assert_eq!(res.winner_index, 1);
        assert_eq!(res.winner_total, -0.25);
    }

    #[test]
    fn modes_set_effective_counts() {
        assert_eq!(Mode::Baseline.effective(5, 50), (1, 0));
        assert_eq!(Mode::Carinx.effective(5, 50), (5, 0));
        assert_eq!(Mode::Carino.effective(5, 50), (1, 50));
        assert_eq!(Mode::Carinox.effective(5, 50), (5, 50));
        assert_eq!("carinox".parse::<Mode>().unwrap(), Mode::Carinox);
        assert!("bogus".parse::<Mode>().is_err());
    }

    #[test]
    fn variant_dominance_holds() {
        for seed in [0, 7, 99] {
            let base = run(Mode::Baseline, 4, seed).winner_total;
            let x = run(Mode::Carinx, 4, seed).winner_total;
            let o = run(Mode::Carino, 4, seed).winner_total;
            let ox = run(Mode::Carinox, 4, seed).winner_total;
            assert!(ox >= x && ox >= o);
            assert!(x >= base && o >= base);
        }
    }

    #[test]
    fn winner_total_grows_with_candidates() {
        let mut last = f64::NEG_INFINITY;
        for n in [1, 2, 3, 5] {
            let w = run(Mode::Carinox, n, 3).winner_total;
            assert!(w >= last);
            last = w;
        }
    }

    #[test]
    fn result_reports_candidates() {
        let res = run(Mode::Carinox, 3, 5);
        assert_eq!(res.per_candidate.len(), 3);
        let best = res
            .per_candidate
            .iter()
            .map(|c| c.best_total)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(res.winner_total, best);
        let csv = res.candidates_csv();
        assert_eq!(csv.lines().count(), 4);
        let back: ExplorationResult = serde_json::from_str(&res.to_json().unwrap()).unwrap();
        assert_eq!(back.winner_index, res.winner_index);
    }

    #[test]
    fn candidate_errors_are_tagged() {
        let (gen, prompt) = setup();
        let starts = vec![NoiseVector(vec![0.5; 16]), NoiseVector(vec![0.0; 16])];
        let cfg = ExplorationConfig {
            mode: Mode::Carinox,
            ..ExplorationConfig::default()
        };
        let err =
            explore_from(&starts, &prompt, &gen, &RewardSpec::default_set(), &cfg).unwrap_err();
        assert!(matches!(err, Error::Candidate { candidate: 1, .. }));
    }
}
