//! Central finite-difference audit of every reward gradient through the
//! generator, and of the regularizer gradient.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{random_prompt, ExperimentConfig};
use crate::autodiff::{finite_diff_gradient, max_scaled_error, Tape};
use crate::error::{Error, Result};
use crate::generator::{Category, Generator, NoiseVector, PromptSpec};
use crate::optimizer::{regularizer_grad, regularizer_value, REGULARIZER_TERM};
use crate::rewards::RewardSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub pairs: usize,
    pub h: f64,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            pairs: 100,
            h: 1e-5,
            rtol: 1e-5,
            atol: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermError {
    pub term: String,
    pub checks: usize,
    /// Largest `|a−b| / max(|a|, |b|, atol/rtol)` over all components.
    pub max_scaled_error: f64,
    /// Largest `|a−b|` over all components.
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub pairs: usize,
    pub h: f64,
    pub rtol: f64,
    pub atol: f64,
    pub terms: Vec<TermError>,
    pub max_scaled_error: f64,
    /// Every component within `rtol` relative or `atol` absolute.
    pub passed: bool,
    pub config_hash: String,
}

impl GradcheckReport {
    /// `term,checks,max_scaled_error,max_abs_error`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("term,checks,max_scaled_error,max_abs_error\n");
        for t in &self.terms {
            out.push_str(&format!(
                "{},{},{},{}\n",
                t.term, t.checks, t.max_scaled_error, t.max_abs_error
            ));
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [
            ("gradcheck.csv", self.to_csv()),
            ("gradcheck_report.json", serde_json::to_string_pretty(self)?),
        ] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

fn reward_value(
    x: &[f64],
    generator: &Generator,
    spec: &RewardSpec,
    prompt: &PromptSpec,
) -> Result<f64> {
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.to_vec());
    let graph = generator.generate(&mut tape, leaf)?;
    let node = spec
        .record(&mut tape, &graph, prompt)?
        .ok_or_else(|| Error::Contract(format!("{} does not apply to prompt", spec.name())))?;
    Ok(tape.scalar(node))
}

fn reward_grad(
    x: &[f64],
    generator: &Generator,
    spec: &RewardSpec,
    prompt: &PromptSpec,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.to_vec());
    let graph = generator.generate(&mut tape, leaf)?;
    let node = spec
        .record(&mut tape, &graph, prompt)?
        .ok_or_else(|| Error::Contract(format!("{} does not apply to prompt", spec.name())))?;
    tape.backward(node, leaf)
}

/// Checks `config.gradcheck.pairs` random (ε, prompt) pairs. Prompts cycle
/// through the categories so every reward is exercised.
pub fn run_gradcheck(config: &ExperimentConfig, seed: u64) -> Result<GradcheckReport> {
    config.validate()?;
    let gc = &config.gradcheck;
    if !(gc.h > 0.0 && gc.rtol > 0.0 && gc.atol > 0.0) {
        return Err(Error::Config(
            "gradcheck h, rtol and atol must be positive".into(),
        ));
    }
    let generator = config.generator()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut terms: BTreeMap<String, TermError> = BTreeMap::new();
    let mut record = |term: &str, analytic: &[f64], numeric: &[f64]| {
        let e = terms.entry(term.to_string()).or_insert_with(|| TermError {
            term: term.to_string(),
            checks: 0,
            max_scaled_error: 0.0,
            max_abs_error: 0.0,
        });
        e.checks += 1;
        e.max_scaled_error = e
            .max_scaled_error
            .max(max_scaled_error(analytic, numeric, gc.rtol, gc.atol));
        let abs = analytic
            .iter()
            .zip(numeric)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        e.max_abs_error = e.max_abs_error.max(abs);
    };

    for i in 0..gc.pairs {
        let category = Category::ALL[i % Category::ALL.len()];
        let prompt = random_prompt(&mut rng, category, config.slots, config.embed_dim);
        let eps = NoiseVector::sample(&mut rng, config.dim);
        for spec in &config.rewards {
            if !spec.applies_to(&prompt) {
                continue;
            }
            let analytic = reward_grad(&eps.0, &generator, spec, &prompt)?;
            let numeric =
                finite_diff_gradient(|x| reward_value(x, &generator, spec, &prompt), &eps.0, gc.h)?;
            record(spec.name(), &analytic, &numeric);
        }
        let analytic = regularizer_grad(&eps.0)?;
        let numeric = finite_diff_gradient(regularizer_value, &eps.0, gc.h)?;
        record(REGULARIZER_TERM, &analytic, &numeric);
    }

    let terms: Vec<TermError> = terms.into_values().collect();
    let max = terms.iter().map(|t| t.max_scaled_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        pairs: gc.pairs,
        h: gc.h,
        rtol: gc.rtol,
        atol: gc.atol,
        passed: max <= gc.rtol,
        max_scaled_error: max,
        terms,
        config_hash: config.hash(),
    })
}
