use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{generate_prompt_suite, prompt_seed, ExperimentConfig};
use crate::error::{Error, Result};
use crate::explorer::{explore, Mode};
use crate::generator::{Category, PromptSpec};
use crate::optimizer::ClipAudit;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub variant: Mode,
    pub category: Category,
    pub mean_composite: f64,
    pub std: f64,
    pub n_prompts: usize,
}

/// Outcome of one (prompt, variant) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchCell {
    pub prompt: usize,
    pub category: Category,
    pub variant: Mode,
    pub winner_index: usize,
    pub winner_total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub cells: Vec<BenchCell>,
    pub config_hash: String,
    pub wall_time_secs: f64,
    pub clip_audit: ClipAudit,
}

impl BenchReport {
    /// `variant,category,mean_composite,std,n_prompts`
    pub fn rows_csv(&self) -> String {
        let mut out = String::from("variant,category,mean_composite,std,n_prompts\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.variant,
                r.category.as_str(),
                r.mean_composite,
                r.std,
                r.n_prompts
            ));
        }
        out
    }

    /// `prompt,category,variant,winner_index,winner_total`
    pub fn cells_csv(&self) -> String {
        let mut out = String::from("prompt,category,variant,winner_index,winner_total\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                c.prompt,
                c.category.as_str(),
                c.variant,
                c.winner_index,
                c.winner_total
            ));
        }
        out
    }

    pub fn row(&self, variant: Mode, category: Category) -> Option<&BenchRow> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.category == category)
    }

    /// Writes `bench.csv`, `bench_cells.csv` and `bench_report.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(&serde_json::json!({
            "config_hash": self.config_hash,
            "wall_time_secs": self.wall_time_secs,
            "clip_audit": self.clip_audit,
            "rows": self.rows,
        }))?;
        for (name, body) in [
            ("bench.csv", self.rows_csv()),
            ("bench_cells.csv", self.cells_csv()),
            ("bench_report.json", json),
        ] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs every variant on the suite generated from `config`.
pub fn run_bench(config: &ExperimentConfig) -> Result<BenchReport> {
    let prompts = generate_prompt_suite(
        &config.suite,
        config.master_seed,
        config.slots,
        config.embed_dim,
    );
    run_bench_with(config, &prompts, &Mode::ALL)
}

/// Runs `variants` on `prompts`. Prompt `i` explores from
/// `prompt_seed(master_seed, i)` under every variant, so candidate pools
/// line up across variants.
pub fn run_bench_with(
    config: &ExperimentConfig,
    prompts: &[PromptSpec],
    variants: &[Mode],
) -> Result<BenchReport> {
    config.validate()?;
    let started = Instant::now();
    let generator = config.generator()?;
    for p in prompts {
        p.validate(config.slots, config.embed_dim)?;
    }

    let results: Vec<Vec<(BenchCell, ClipAudit)>> = prompts
        .par_iter()
        .enumerate()
        .map(|(i, prompt)| {
            let seed = prompt_seed(config.master_seed, i);
            variants
                .iter()
                .map(|&variant| {
                    let res = explore(
                        prompt,
                        &generator,
                        &config.rewards,
                        &config.exploration(variant, seed),
                    )
                    .map_err(|e| Error::Cell {
                        prompt: i,
                        variant: variant.to_string(),
                        source: Box::new(e),
                    })?;
                    let cell = BenchCell {
                        prompt: i,
                        category: prompt.category,
                        variant,
                        winner_index: res.winner_index,
                        winner_total: res.winner_total,
                    };
                    Ok((cell, res.clip_audit))
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let mut audit = ClipAudit::default();
    let mut cells = Vec::with_capacity(prompts.len() * variants.len());
    for (cell, a) in results.into_iter().flatten() {
        audit.merge(&a);
        cells.push(cell);
    }

    let mut groups: BTreeMap<(Mode, Category), Vec<f64>> = BTreeMap::new();
    for c in &cells {
        groups
            .entry((c.variant, c.category))
            .or_default()
            .push(c.winner_total);
    }
    let rows = groups
        .into_iter()
        .map(|((variant, category), totals)| {
            let (mean, std) = mean_std(&totals);
            BenchRow {
                variant,
                category,
                mean_composite: mean,
                std,
                n_prompts: totals.len(),
            }
        })
        .collect();

    Ok(BenchReport {
        rows,
        cells,
        config_hash: config.hash(),
        wall_time_secs: started.elapsed().as_secs_f64(),
        clip_audit: audit,
    })
}
