use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{random_prompt, run_bench, run_gradcheck, run_rugged_scenario, ExperimentConfig};
use crate::error::{Error, Result};
use crate::explorer::{explore, sample_candidates};
use crate::generator::Category;
use crate::metric_selection::{
    correlation_table, load_score_table, select_reward_set, top3_frequency, write_reports,
    CorrelationMethod, CorrelationTable,
};
use crate::optimizer::optimize;

#[derive(Parser, Debug)]
#[command(
    name = "noisealign",
    version,
    about = "Reward-guided initial-noise optimization and exploration"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// JSON experiment config; for `select-rewards`, the input CSV.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for reports.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Refine a single seed and emit its trace.
    Optimize(PromptArgs),
    /// Sample, refine and select for one prompt.
    Explore(PromptArgs),
    /// Compare all variants on the synthetic suite.
    Bench,
    /// Rank metrics by top-3 frequency and pick a reward set.
    SelectRewards(SelectArgs),
    /// Trapped-basin scenario on a rugged landscape.
    Rugged,
    /// Finite-difference audit of every gradient.
    Gradcheck,
}

#[derive(Args, Debug)]
struct PromptArgs {
    #[arg(long, value_enum, default_value_t = CategoryArg::Complex)]
    category: CategoryArg,
}

#[derive(Args, Debug)]
struct SelectArgs {
    #[arg(long, default_value_t = 4)]
    k: usize,
    /// Correlation used when the input holds raw scores.
    #[arg(long, value_enum, default_value_t = MethodArg::Spearman)]
    method: MethodArg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CategoryArg {
    Color,
    Spatial,
    Numeracy,
    Complex,
}

impl From<CategoryArg> for Category {
    fn from(c: CategoryArg) -> Self {
        match c {
            CategoryArg::Color => Category::Color,
            CategoryArg::Spatial => Category::Spatial,
            CategoryArg::Numeracy => Category::Numeracy,
            CategoryArg::Complex => Category::Complex,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    Spearman,
    Kendall,
}

impl From<MethodArg> for CorrelationMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Spearman => CorrelationMethod::Spearman,
            MethodArg::Kendall => CorrelationMethod::Kendall,
        }
    }
}

/// Parses `argv` (program name first) and runs the subcommand. Returns 0 on
/// success, 2 on a usage error and 1 on any other failure.
pub fn cli_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load_config(g: &GlobalArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.master_seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_file(dir: &Path, name: &str, body: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join(name);
    fs::write(&p, body).map_err(|e| Error::io(&p, e))
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Optimize(args) => {
            let cfg = load_config(g)?;
            let generator = cfg.generator()?;
            let prompt = single_prompt(&cfg, args.category.into());
            let eps0 = sample_candidates(1, cfg.dim, cfg.master_seed).remove(0);
            let trace = optimize(&eps0, &generator, &prompt, &cfg.rewards, &cfg.optimizer())?;
            println!(
                "initial {:.6} best {:.6} at iteration {}",
                trace.initial_total(),
                trace.best_total,
                trace.best_iteration
            );
            if let Some(dir) = &g.out {
                write_file(dir, "trace.csv", &trace.to_csv())?;
                let mut summary = trace.summary_json();
                summary["config_hash"] = cfg.hash().into();
                write_file(
                    dir,
                    "trace_summary.json",
                    &serde_json::to_string_pretty(&summary)?,
                )?;
            }
        }
        Command::Explore(args) => {
            let cfg = load_config(g)?;
            let generator = cfg.generator()?;
            let prompt = single_prompt(&cfg, args.category.into());
            let res = explore(
                &prompt,
                &generator,
                &cfg.rewards,
                &cfg.exploration(cfg.mode, cfg.master_seed),
            )?;
            println!(
                "{}: winner {} total {:.6}",
                res.mode, res.winner_index, res.winner_total
            );
            if let Some(dir) = &g.out {
                write_file(dir, "exploration.json", &res.to_json()?)?;
                write_file(dir, "candidates.csv", &res.candidates_csv())?;
            }
        }
        Command::Bench => {
            let cfg = load_config(g)?;
            let report = run_bench(&cfg)?;
            print!("{}", report.rows_csv());
            if let Some(dir) = &g.out {
                report.write(dir)?;
            }
        }
        Command::SelectRewards(args) => {
            let path = g
                .config
                .as_ref()
                .ok_or_else(|| Error::Config("select-rewards needs --config <csv>".into()))?;
            let table = load_correlations(path, args.method.into())?;
            let report = top3_frequency(&table, &table.metrics);
            let selected = select_reward_set(&report, args.k)?;
            print!("{}", report.totals_csv());
            println!("selected: {}", selected.join(", "));
            if let Some(dir) = &g.out {
                write_reports(&table, &report, dir)?;
                write_file(dir, "selected.txt", &(selected.join("\n") + "\n"))?;
            }
        }
        Command::Rugged => {
            let cfg = load_config(g)?;
            let report = run_rugged_scenario(&cfg, &cfg.rugged)?;
            println!(
                "success rates over {} trials: carino(adversarial) {:.3} carino {:.3} carinx {:.3} carinox {:.3}; basin-mass prediction {:.3}",
                report.trials,
                report.carino_adversarial_rate,
                report.carino_rate,
                report.carinx_rate,
                report.carinox_rate,
                report.predicted_carinx_rate
            );
            if let Some(dir) = &g.out {
                report.write(dir)?;
            }
        }
        Command::Gradcheck => {
            let cfg = load_config(g)?;
            let report = run_gradcheck(&cfg, cfg.master_seed)?;
            print!("{}", report.to_csv());
            println!("max scaled error {:.3e}", report.max_scaled_error);
            if let Some(dir) = &g.out {
                report.write(dir)?;
            }
            if !report.passed {
                return Err(Error::Numeric(format!(
                    "gradient audit failed: max scaled error {:.3e} > {:.1e}",
                    report.max_scaled_error, report.rtol
                )));
            }
        }
    }
    Ok(())
}

fn single_prompt(cfg: &ExperimentConfig, category: Category) -> crate::generator::PromptSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.master_seed);
    rng.set_stream(1);
    random_prompt(&mut rng, category, cfg.slots, cfg.embed_dim)
}

/// Accepts either a `category,metric,value` correlation file or a raw score
/// table (`item_id,category,human,<metrics>...`).
fn load_correlations(path: &Path, method: CorrelationMethod) -> Result<CorrelationTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header = text.lines().next().unwrap_or("").trim();
    if header.starts_with("category") {
        CorrelationTable::load(path, method)
    } else {
        Ok(correlation_table(&load_score_table(path)?, method))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(cli_dispatch(["noisealign", "frobnicate"]), 2);
        assert_eq!(cli_dispatch(["noisealign", "bench", "--bogus"]), 2);
        assert_eq!(cli_dispatch(["noisealign"]), 2);
    }

    #[test]
    fn runtime_errors_exit_one() {
        assert_eq!(
            cli_dispatch([
                "noisealign",
                "bench",
                "--config",
                "/nonexistent/config.json"
            ]),
            1
        );
        assert_eq!(cli_dispatch(["noisealign", "select-rewards"]), 1);
    }

    #[test]
    fn empty_bench_succeeds() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("cfg.json");
        fs::write(
            &cfg,
            r#"{"suite": {"color": 0, "spatial": 0, "numeracy": 0, "complex": 0}}"#,
        )
        .unwrap();
        let out = dir.path().join("out");
        let code = cli_dispatch([
            "noisealign".as_ref(),
            "bench".as_ref(),
            "--config".as_ref(),
            cfg.as_os_str(),
            "--out".as_ref(),
            out.as_os_str(),
        ]);
        assert_eq!(code, 0);
        let csv = fs::read_to_string(out.join("bench.csv")).unwrap();
        assert_eq!(csv, "variant,category,mean_composite,std,n_prompts\n");
    }
}
