//! A rugged landscape where refinement alone gets trapped and sampling alone
//! rarely lands in the one good basin.
//!
//! The landscape lives in the first two latent coordinates: one global bump
//! of height 1 and a ring of lower bumps around it, all at least four widths
//! apart. With clipped steps a run of `T` iterations travels at most
//! `T·η·τ·(terms)`, far less than the distance between basins.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::ExperimentConfig;
use crate::autodiff::norm;
use crate::error::{Error, Result};
use crate::explorer::{explore, explore_from, sample_candidates, ExplorationConfig, Mode};
use crate::generator::{Category, Generator, NoiseVector, PromptSpec};
use crate::rewards::{rugged_reward, Bump, RewardKind, RewardSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuggedConfig {
    pub dim: usize,
    pub trials: usize,
    pub width: f64,
    pub local_bumps: usize,
    pub local_height: f64,
    pub global_center: [f64; 2],
    /// Distance of the local bumps from the global one.
    pub ring_radius: f64,
    /// Standard deviation of the perturbation around a local center for the
    /// adversarial start.
    pub adversarial_jitter: f64,
    pub success_threshold: f64,
    pub temperature: f64,
    pub oracle_samples: usize,
}

impl Default for RuggedConfig {
    fn default() -> Self {
        RuggedConfig {
            dim: 2,
            trials: 200,
            width: 1.0,
            local_bumps: 5,
            local_height: 0.6,
            global_center: [1.0, 0.0],
            ring_radius: 4.5,
            adversarial_jitter: 0.05,
            success_threshold: 0.9,
            temperature: 50.0,
            oracle_samples: 200_000,
        }
    }
}

/// Global bump first, then the ring.
pub fn build_landscape(cfg: &RuggedConfig) -> Result<Vec<Bump>> {
    if cfg.dim < 2 {
        return Err(Error::Config("rugged landscape needs dim ≥ 2".into()));
    }
    let embed = |x: f64, y: f64| {
        let mut c = vec![0.0; cfg.dim];
        c[0] = x;
        c[1] = y;
        c
    };
    let [gx, gy] = cfg.global_center;
    let mut bumps = vec![Bump {
        center: embed(gx, gy),
        height: 1.0,
        width: cfg.width,
    }];
    for j in 0..cfg.local_bumps {
        let a = std::f64::consts::TAU * j as f64 / cfg.local_bumps as f64 + 0.5;
        bumps.push(Bump {
            center: embed(
                gx + cfg.ring_radius * a.cos(),
                gy + cfg.ring_radius * a.sin(),
            ),
            height: cfg.local_height,
            width: cfg.width,
        });
    }
    validate_landscape(&bumps)?;
    Ok(bumps)
}

/// One bump of height 1, at least five of height ≤ 0.6, centers at least
/// four (largest) widths apart.
pub fn validate_landscape(bumps: &[Bump]) -> Result<()> {
    let global = bumps.iter().filter(|b| b.height == 1.0).count();
    if global != 1 {
        return Err(Error::Config(format!(
            "landscape needs exactly one bump of height 1, found {global}"
        )));
    }
    let locals: Vec<&Bump> = bumps.iter().filter(|b| b.height != 1.0).collect();
    if locals.len() < 5 {
        return Err(Error::Config(format!(
            "landscape needs at least 5 local bumps, found {}",
            locals.len()
        )));
    }
    if let Some(b) = locals.iter().find(|b| !(b.height > 0.0 && b.height <= 0.6)) {
        return Err(Error::Config(format!(
            "local bump height {} outside (0, 0.6]",
            b.height
        )));
    }
    let max_width = bumps.iter().map(|b| b.width).fold(0.0, f64::max);
    if bumps.iter().any(|b| b.width.is_nan() || b.width <= 0.0) {
        return Err(Error::Config("bump widths must be positive".into()));
    }
    for (i, a) in bumps.iter().enumerate() {
        for b in &bumps[i + 1..] {
            if a.center.len() != b.center.len() {
                return Err(Error::Config("bump centers differ in dimension".into()));
            }
            let d: Vec<f64> = a.center.iter().zip(&b.center).map(|(x, y)| x - y).collect();
            if norm(&d) < 4.0 * max_width {
                return Err(Error::Config(format!(
                    "bump centers {:.3} apart, need at least {:.3}",
                    norm(&d),
                    4.0 * max_width
                )));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuggedTrial {
    pub master_seed: u64,
    pub carino_adversarial: f64,
    pub carino: f64,
    pub carinx: f64,
    pub carinox: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuggedReport {
    pub trials: usize,
    pub candidates: usize,
    pub iters: usize,
    pub success_threshold: f64,
    pub carino_adversarial_rate: f64,
    pub carino_rate: f64,
    pub carinx_rate: f64,
    pub carinox_rate: f64,
    /// Monte-Carlo fraction of single prior draws already above threshold.
    pub basin_mass: f64,
    /// `1 − (1 − basin_mass)^N`.
    pub predicted_carinx_rate: f64,
    pub per_trial: Vec<RuggedTrial>,
    pub config_hash: String,
}

impl RuggedReport {
    pub fn trials_csv(&self) -> String {
        let mut out = String::from("trial,master_seed,carino_adversarial,carino,carinx,carinox\n");
        for (i, t) in self.per_trial.iter().enumerate() {
            out.push_str(&format!(
                "{i},{},{},{},{},{}\n",
                t.master_seed, t.carino_adversarial, t.carino, t.carinx, t.carinox
            ));
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut summary = serde_json::to_value(self)?;
        if let Some(obj) = summary.as_object_mut() {
            obj.remove("per_trial");
        }
        for (name, body) in [
            ("rugged_trials.csv", self.trials_csv()),
            (
                "rugged_report.json",
                serde_json::to_string_pretty(&summary)?,
            ),
        ] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Seed spacing between trials; each trial uses `candidates` consecutive seeds.
const TRIAL_STRIDE: u64 = 1 << 16;

pub fn run_rugged_scenario(
    config: &ExperimentConfig,
    landscape: &RuggedConfig,
) -> Result<RuggedReport> {
    config.optimizer().validate()?;
    if landscape.trials == 0 {
        return Err(Error::Config(
            "rugged scenario needs at least one trial".into(),
        ));
    }
    let bumps = build_landscape(landscape)?;
    let specs = vec![RewardSpec::new(RewardKind::Rugged {
        bumps: bumps.clone(),
        temperature: landscape.temperature,
    })];
    let generator = Generator::Identity { d: landscape.dim };
    // The prompt is unused by the rugged reward.
    let mut emb = vec![0.0; landscape.dim];
    emb[0] = 1.0;
    let prompt = PromptSpec {
        objects: Vec::new(),
        relation: None,
        count_target: 0,
        target_embedding: emb,
        category: Category::Complex,
    };
    let threshold = landscape.success_threshold;
    let locals = &bumps[1..];

    let mut per_trial = Vec::with_capacity(landscape.trials);
    for t in 0..landscape.trials {
        let seed = config.master_seed.wrapping_add(t as u64 * TRIAL_STRIDE);
        let run = |mode: Mode| -> Result<f64> {
            let cfg = ExplorationConfig {
                candidates: config.candidates,
                master_seed: seed,
                mode,
                optimizer: config.optimizer(),
            };
            Ok(explore(&prompt, &generator, &specs, &cfg)?.winner_total)
        };
        let carino = run(Mode::Carino)?;
        let carinx = run(Mode::Carinx)?;
        let carinox = run(Mode::Carinox)?;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        let center = &locals[t % locals.len()].center;
        let start = NoiseVector(
            center
                .iter()
                .map(|c| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    c + landscape.adversarial_jitter * z
                })
                .collect(),
        );
        let cfg = ExplorationConfig {
            candidates: 1,
            master_seed: seed,
            mode: Mode::Carino,
            optimizer: config.optimizer(),
        };
        let adversarial = explore_from(&[start], &prompt, &generator, &specs, &cfg)?.winner_total;

        per_trial.push(RuggedTrial {
            master_seed: seed,
            carino_adversarial: adversarial,
            carino,
            carinx,
            carinox,
        });
    }

    let rate = |f: fn(&RuggedTrial) -> f64| {
        per_trial.iter().filter(|t| f(t) >= threshold).count() as f64 / per_trial.len() as f64
    };

    let basin_mass = if landscape.oracle_samples == 0 {
        0.0
    } else {
        let draws = sample_candidates(
            1,
            landscape.dim * landscape.oracle_samples,
            config.master_seed ^ 0x5eed,
        );
        let mut hits = 0usize;
        for chunk in draws[0].0.chunks(landscape.dim) {
            if rugged_reward(chunk, &bumps, landscape.temperature)? >= threshold {
                hits += 1;
            }
        }
        hits as f64 / landscape.oracle_samples as f64
    };

    Ok(RuggedReport {
        trials: landscape.trials,
        candidates: config.candidates,
        iters: config.iters,
        success_threshold: threshold,
        carino_adversarial_rate: rate(|t| t.carino_adversarial),
        carino_rate: rate(|t| t.carino),
        carinx_rate: rate(|t| t.carinx),
        carinox_rate: rate(|t| t.carinox),
        basin_mass,
        predicted_carinx_rate: 1.0 - (1.0 - basin_mass).powi(config.candidates as i32),
        per_trial,
        config_hash: config.hash(),
    })
}
