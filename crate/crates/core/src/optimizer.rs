//! Clipped multi-backward gradient ascent on the initial noise.
//!
//! One step generates the scene once, runs a separate backward sweep for every
//! weighted reward, clips each gradient to `tau`, adds the clipped gradient of
//! the chi-norm regularizer `γ·K(ε)` once, and moves the noise by `eta` times
//! the sum. [`optimize`] repeats this `iters` times and keeps the best iterate
//! by composite reward, including the starting point.

use serde::{Deserialize, Serialize};

use crate::autodiff::{dot, norm, Tape};
use crate::error::{Error, Result};
use crate::generator::{Generator, NoiseVector, PromptSpec, Scene};
use crate::rewards::{RewardBreakdown, RewardSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub eta: f64,
    pub iters: usize,
    pub tau: f64,
    pub gamma: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            eta: 1.0,
            iters: 50,
            tau: 0.01,
            gamma: 0.01,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!(
                "eta must be positive, got {}",
                self.eta
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!(
                "gamma must be non-negative, got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// Rescales `g` onto the ball of radius `tau` when it lies outside.
pub fn clip_gradient(g: &[f64], tau: f64) -> Vec<f64> {
    let n = norm(g);
    if n <= tau {
        g.to_vec()
    } else {
        let s = tau / n;
        g.iter().map(|v| v * s).collect()
    }
}

/// `K(ε) = (d−1)·ln‖ε‖ − ‖ε‖²/2`, the log density of the norm of a
/// d-dimensional standard normal up to a constant.
pub fn regularizer_value(eps: &[f64]) -> Result<f64> {
    let n = norm(eps);
    if n == 0.0 {
        return Err(Error::Singularity("chi-norm regularizer at ε = 0".into()));
    }
    Ok((eps.len() as f64 - 1.0) * n.ln() - n * n / 2.0)
}

/// `∇K(ε) = ((d−1)/‖ε‖² − 1)·ε`.
pub fn regularizer_grad(eps: &[f64]) -> Result<Vec<f64>> {
    let sq = dot(eps, eps);
    if sq == 0.0 {
        return Err(Error::Singularity(
            "chi-norm regularizer gradient at ε = 0".into(),
        ));
    }
    let c = (eps.len() as f64 - 1.0) / sq - 1.0;
    Ok(eps.iter().map(|v| c * v).collect())
}

/// Norm statistics of one gradient term before and after clipping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub term: String,
    pub raw_norm: f64,
    pub clipped_norm: f64,
    /// Cosine between raw and clipped gradient; `None` for a zero gradient.
    pub cosine: Option<f64>,
}

impl ClipRecord {
    fn new(term: &str, raw: &[f64], clipped: &[f64]) -> Self {
        let raw_norm = norm(raw);
        let clipped_norm = norm(clipped);
        let cosine = (raw_norm > 0.0 && clipped_norm > 0.0)
            .then(|| dot(raw, clipped) / (raw_norm * clipped_norm));
        ClipRecord {
            term: term.to_string(),
            raw_norm,
            clipped_norm,
            cosine,
        }
    }
}

/// Running summary of every clipped gradient term seen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipAudit {
    pub terms: u64,
    pub clipped: u64,
    /// Largest `‖clipped‖ / τ`.
    pub max_norm_ratio: f64,
    /// Largest `|1 − cos(raw, clipped)|` over nonzero terms.
    pub max_cosine_deviation: f64,
}

impl Default for ClipAudit {
    fn default() -> Self {
        ClipAudit {
            terms: 0,
            clipped: 0,
            max_norm_ratio: 0.0,
            max_cosine_deviation: 0.0,
        }
    }
}

impl ClipAudit {
    pub fn record(&mut self, rec: &ClipRecord, tau: f64) {
        self.terms += 1;
        if rec.raw_norm > tau {
            self.clipped += 1;
        }
        self.max_norm_ratio = self.max_norm_ratio.max(rec.clipped_norm / tau);
        if let Some(c) = rec.cosine {
            self.max_cosine_deviation = self.max_cosine_deviation.max((1.0 - c).abs());
        }
    }

    pub fn merge(&mut self, other: &ClipAudit) {
        self.terms += other.terms;
        self.clipped += other.clipped;
        self.max_norm_ratio = self.max_norm_ratio.max(other.max_norm_ratio);
        self.max_cosine_deviation = self.max_cosine_deviation.max(other.max_cosine_deviation);
    }
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub next: NoiseVector,
    /// Scores of the scene decoded from the input noise.
    pub breakdown: RewardBreakdown,
    pub scene: Scene,
    pub clips: Vec<ClipRecord>,
    /// The aggregated update direction before scaling by `eta`.
    pub direction: Vec<f64>,
}

pub const REGULARIZER_TERM: &str = "regularizer";

/// Scores the scene decoded from `eps` without differentiating.
pub fn evaluate(
    eps: &NoiseVector,
    generator: &Generator,
    prompt: &PromptSpec,
    specs: &[RewardSpec],
) -> Result<(RewardBreakdown, Scene)> {
    let mut tape = Tape::new();
    let leaf = tape.leaf(eps.0.clone());
    let graph = generator.generate(&mut tape, leaf)?;
    let mut scores = Vec::with_capacity(specs.len());
    for spec in specs {
        if let Some(node) = spec.record(&mut tape, &graph, prompt)? {
            scores.push((spec.name(), spec.weight, tape.scalar(node)));
        }
    }
    Ok((RewardBreakdown::from_scores(scores), graph.scene(&tape)))
}

/// One clipped multi-backward ascent step.
pub fn step(
    eps: &NoiseVector,
    generator: &Generator,
    prompt: &PromptSpec,
    specs: &[RewardSpec],
    config: &OptimizerConfig,
) -> Result<StepOutput> {
    let mut tape = Tape::new();
    let leaf = tape.leaf(eps.0.clone());
    let graph = generator.generate(&mut tape, leaf)?;

    let mut recorded = Vec::with_capacity(specs.len());
    for spec in specs {
        if let Some(node) = spec.record(&mut tape, &graph, prompt)? {
            recorded.push((spec, node));
        }
    }

    let d = eps.dim();
    let mut direction = vec![0.0; d];
    let mut clips = Vec::with_capacity(recorded.len() + 1);
    let mut accumulate = |term: &str, raw: Vec<f64>| -> Result<()> {
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("gradient of {term} is not finite")));
        }
        let clipped = clip_gradient(&raw, config.tau);
        clips.push(ClipRecord::new(term, &raw, &clipped));
        for (acc, c) in direction.iter_mut().zip(&clipped) {
            *acc += c;
        }
        Ok(())
    };

    for &(spec, node) in &recorded {
        if spec.weight == 0.0 {
            continue;
        }
        let g = tape.backward(node, leaf)?;
        accumulate(
            spec.name(),
            g.into_iter().map(|v| spec.weight * v).collect(),
        )?;
    }
    if config.gamma > 0.0 {
        let g = regularizer_grad(&eps.0)?;
        accumulate(
            REGULARIZER_TERM,
            g.into_iter().map(|v| config.gamma * v).collect(),
        )?;
    }

    let next = eps
        .0
        .iter()
        .zip(&direction)
        .map(|(e, g)| e + config.eta * g)
        .collect();
    let breakdown = RewardBreakdown::from_scores(
        recorded
            .iter()
            .map(|&(spec, node)| (spec.name(), spec.weight, tape.scalar(node))),
    );
    Ok(StepOutput {
        next: NoiseVector(next),
        breakdown,
        scene: graph.scene(&tape),
        clips,
        direction,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub breakdown: RewardBreakdown,
    pub noise_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizationTrace {
    pub per_iteration: Vec<IterationRecord>,
    pub best_iteration: usize,
    pub best_noise: NoiseVector,
    pub best_scene: Scene,
    pub best_total: f64,
    pub clip_audit: ClipAudit,
}

impl OptimizationTrace {
    pub fn initial_total(&self) -> f64 {
        self.per_iteration[0].breakdown.total
    }

    /// `iteration,reward_<name>...,total,noise_norm`
    pub fn to_csv(&self) -> String {
        let names: Vec<&str> = self
            .per_iteration
            .first()
            .map(|r| {
                r.breakdown
                    .per_reward
                    .iter()
                    .map(|(n, _)| n.as_str())
                    .collect()
            })
            .unwrap_or_default();
        let mut out = String::from("iteration");
        for n in &names {
            out.push_str(",reward_");
            out.push_str(n);
        }
        out.push_str(",total,noise_norm\n");
        for rec in &self.per_iteration {
            out.push_str(&rec.iteration.to_string());
            for (_, s) in &rec.breakdown.per_reward {
                out.push(',');
                out.push_str(&s.to_string());
            }
            out.push_str(&format!(",{},{}\n", rec.breakdown.total, rec.noise_norm));
        }
        out
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "best_iteration": self.best_iteration,
            "best_total": self.best_total,
        })
    }
}

/// Runs `config.iters` ascent steps from `eps0`, recording every iterate.
pub fn optimize(
    eps0: &NoiseVector,
    generator: &Generator,
    prompt: &PromptSpec,
    specs: &[RewardSpec],
    config: &OptimizerConfig,
) -> Result<OptimizationTrace> {
    config.validate()?;
    for spec in specs {
        spec.validate()?;
    }
    let tag = |iteration: usize| {
        move |e: Error| Error::Iteration {
            iteration,
            source: Box::new(e),
        }
    };

    let mut per_iteration = Vec::with_capacity(config.iters + 1);
    let mut audit = ClipAudit::default();
    let mut eps = eps0.clone();
    let mut best: Option<(usize, f64, NoiseVector, Scene)> = None;

    for t in 0..=config.iters {
        let (breakdown, scene, next) = if t < config.iters {
            let out = step(&eps, generator, prompt, specs, config).map_err(tag(t))?;
            for c in &out.clips {
                audit.record(c, config.tau);
            }
            (out.breakdown, out.scene, Some(out.next))
        } else {
            let (b, s) = evaluate(&eps, generator, prompt, specs).map_err(tag(t))?;
            (b, s, None)
        };
        let total = breakdown.total;
        if !total.is_finite() {
            return Err(tag(t)(Error::Numeric(
                "composite reward is not finite".into(),
            )));
        }
        if best.as_ref().is_none_or(|b| total > b.1) {
            best = Some((t, total, eps.clone(), scene));
        }
        per_iteration.push(IterationRecord {
            iteration: t,
            breakdown,
            noise_norm: eps.norm(),
        });
        if let Some(n) = next {
            eps = n;
        }
    }

    let (best_iteration, best_total, best_noise, best_scene) =
        best.expect("at least one iteration is evaluated");
    Ok(OptimizationTrace {
        per_iteration,
        best_iteration,
        best_noise,
        best_scene,
        best_total,
        clip_audit: audit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_gradient;
    use crate::generator::{Category, GeneratorParams, PromptObject};
    use crate::rewards::RewardKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn plain_prompt(d: usize) -> PromptSpec {
        let mut emb = vec![0.0; d];
        emb[0] = 1.0;
        PromptSpec {
            objects: vec![PromptObject {
                target_color: [0.8, 0.2, 0.1],
            }],
            relation: None,
            count_target: 1,
            target_embedding: emb,
            category: Category::Color,
        }
    }

    fn quadratic(target: Vec<f64>) -> Vec<RewardSpec> {
        vec![RewardSpec::new(RewardKind::Quadratic { target })]
    }

    #[test]
    fn clip_examples() {
        let c = clip_gradient(&[0.3, 0.4], 0.01);
        assert!((c[0] - 0.006).abs() < 1e-15 && (c[1] - 0.008).abs() < 1e-15);
        assert_eq!(clip_gradient(&[0.003, 0.004], 0.01), vec![0.003, 0.004]);
        assert_eq!(clip_gradient(&[0.0, 0.0], 0.01), vec![0.0, 0.0]);
    }

    #[test]
    fn regularizer_value_examples() {
        assert_eq!(regularizer_value(&[1.0, 0.0]).unwrap(), -0.5);
        let r3 = 3f64.sqrt();
        let v = regularizer_value(&[r3, 0.0, 0.0, 0.0]).unwrap();
        let expected = 1.5 * 3f64.ln() - 1.5;
        assert!((v - expected).abs() < 1e-14);
        assert!((v - 0.147918).abs() < 1e-6);
        assert!(matches!(
            regularizer_value(&[0.0, 0.0]),
            Err(Error::Singularity(_))
        ));
    }

    #[test]
    fn regularizer_peaks_at_sqrt_d_minus_one() {
        let k = |r: f64| regularizer_value(&[r, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let peak = 2.0; // √(5 − 1)
        assert!(k(peak) > k(peak - 1e-3) && k(peak) > k(peak + 1e-3));
    }

    #[test]
    fn regularizer_grad_examples() {
        assert_eq!(
            regularizer_grad(&[1.0, 1.0, 1.0, 0.0]).unwrap(),
            vec![0.0; 4]
        );
        assert_eq!(regularizer_grad(&[2.0, 0.0]).unwrap(), vec![-1.5, 0.0]);
        assert!(matches!(
            regularizer_grad(&[0.0; 3]),
            Err(Error::Singularity(_))
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let eps = NoiseVector::sample(&mut rng, 8);
            let g = regularizer_grad(&eps.0).unwrap();
            let fd = finite_diff_gradient(regularizer_value, &eps.0, 1e-5).unwrap();
            for (a, b) in g.iter().zip(&fd) {
                assert!((a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1e-2));
            }
        }
    }

    #[test]
    fn one_step_hand_simulation() {
        let gen = Generator::Identity { d: 2 };
        let cfg = OptimizerConfig {
            eta: 1.0,
            iters: 1,
            tau: 0.01,
            gamma: 0.0,
        };
        let out = step(
            &NoiseVector(vec![0.0, 0.0]),
            &gen,
            &plain_prompt(2),
            &quadratic(vec![1.0, 0.0]),
            &cfg,
        )
        .unwrap();
        assert_eq!(out.next.0, vec![0.01, 0.0]);
        assert_eq!(out.breakdown.total, -1.0);
        assert_eq!(out.clips[0].raw_norm, 2.0);
    }

    #[test]
    fn zero_weights_and_gamma_do_not_move() {
        let gen = Generator::Slots(GeneratorParams::init(0, 16, 3, 4).unwrap());
        let specs: Vec<_> = RewardSpec::default_set()
            .into_iter()
            .map(|s| s.with_weight(0.0))
            .collect();
        let cfg = OptimizerConfig {
            gamma: 0.0,
            ..OptimizerConfig::default()
        };
        let eps = NoiseVector::sample(&mut ChaCha8Rng::seed_from_u64(4), 16);
        let out = step(&eps, &gen, &plain_prompt(4), &specs, &cfg).unwrap();
        assert_eq!(out.next, eps);
        assert_eq!(out.breakdown.total, 0.0);
    }

    #[test]
    fn step_length_is_bounded_by_clipping() {
        let gen = Generator::Slots(GeneratorParams::init(2, 16, 3, 4).unwrap());
        let specs = RewardSpec::default_set();
        let cfg = OptimizerConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let eps = NoiseVector::sample(&mut rng, 16);
            let out = step(&eps, &gen, &plain_prompt(4), &specs, &cfg).unwrap();
            let moved: Vec<f64> = out.next.0.iter().zip(&eps.0).map(|(a, b)| a - b).collect();
            // attribute, count, embedding and the regularizer (no relation).
            let terms = out.clips.len() as f64;
            assert_eq!(terms, 4.0);
            assert!(norm(&moved) <= cfg.eta * cfg.tau * terms * (1.0 + 1e-12));
            for c in &out.clips {
                assert!(c.clipped_norm <= cfg.tau * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn zero_iterations_keeps_the_start() {
        let gen = Generator::Identity { d: 2 };
        let cfg = OptimizerConfig {
            iters: 0,
            ..OptimizerConfig::default()
        };
        let eps = NoiseVector(vec![0.3, -0.2]);
        let tr = optimize(
            &eps,
            &gen,
            &plain_prompt(2),
            &quadratic(vec![1.0, 1.0]),
            &cfg,
        )
        .unwrap();
        assert_eq!(tr.per_iteration.len(), 1);
        assert_eq!(tr.best_iteration, 0);
        assert_eq!(tr.best_noise, eps);
    }

    #[test]
    fn trace_has_iters_plus_one_entries_and_tracks_max() {
        let gen = Generator::Slots(GeneratorParams::init(0, 16, 3, 4).unwrap());
        let eps = NoiseVector::sample(&mut ChaCha8Rng::seed_from_u64(6), 16);
        let cfg = OptimizerConfig {
            iters: 12,
            ..OptimizerConfig::default()
        };
        let tr = optimize(
            &eps,
            &gen,
            &plain_prompt(4),
            &RewardSpec::default_set(),
            &cfg,
        )
        .unwrap();
        assert_eq!(tr.per_iteration.len(), 13);
        let max = tr
            .per_iteration
            .iter()
            .map(|r| r.breakdown.total)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(tr.best_total, max);
        assert_eq!(tr.per_iteration[tr.best_iteration].breakdown.total, max);
        assert!(tr.best_total >= tr.initial_total());
        // Deterministic.
        let again = optimize(
            &eps,
            &gen,
            &plain_prompt(4),
            &RewardSpec::default_set(),
            &cfg,
        )
        .unwrap();
        assert_eq!(tr, again);
        let csv = tr.to_csv();
        assert!(csv.starts_with(
            "iteration,reward_attribute,reward_count,reward_embedding,total,noise_norm\n"
        ));
        assert_eq!(csv.lines().count(), 14);
    }

    #[test]
    fn best_total_grows_with_iterations() {
        let gen = Generator::Slots(GeneratorParams::init(1, 16, 3, 4).unwrap());
        let eps = NoiseVector::sample(&mut ChaCha8Rng::seed_from_u64(10), 16);
        let mut last = f64::NEG_INFINITY;
        for iters in [0, 1, 5, 20, 40] {
            let cfg = OptimizerConfig {
                iters,
                ..OptimizerConfig::default()
            };
            let tr = optimize(
                &eps,
                &gen,
                &plain_prompt(4),
                &RewardSpec::default_set(),
                &cfg,
            )
            .unwrap();
            assert!(tr.best_total >= last);
            last = tr.best_total;
        }
    }

    #[test]
    fn ties_keep_the_earliest_iterate() {
        // All weights zero: every iterate totals 0, and the start wins.
        let gen = Generator::Identity { d: 2 };
        let cfg = OptimizerConfig {
            iters: 5,
            ..OptimizerConfig::default()
        };
        let specs = vec![RewardSpec::new(RewardKind::Quadratic {
            target: vec![1.0, 1.0],
        })
        .with_weight(0.0)];
        let tr = optimize(
            &NoiseVector(vec![0.5, 0.5]),
            &gen,
            &plain_prompt(2),
            &specs,
            &cfg,
        )
        .unwrap();
        assert_eq!(tr.best_iteration, 0);
    }

    #[test]
    fn singular_start_is_reported_with_iteration() {
        let gen = Generator::Identity { d: 2 };
        let err = optimize(
            &NoiseVector(vec![0.0, 0.0]),
            &gen,
            &plain_prompt(2),
            &quadratic(vec![1.0, 0.0]),
            &OptimizerConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Iteration { iteration: 0, .. }));
        assert!(matches!(err.root(), Error::Singularity(_)));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let bad = OptimizerConfig {
            tau: 0.0,
            ..OptimizerConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}
