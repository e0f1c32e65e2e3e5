use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use swarmcert::allocator::dp_allocate;
use swarmcert::baselines::PolicyId;
use swarmcert::harness::{
    brute_force_p1, calibrate_model, random_instance, run_experiment, summary_csv, write_outputs, SafeInstance,
};
use swarmcert::sim::Setup;
use swarmcert::twin::ConfidenceModel;
use swarmcert::{Config, Error, Result};

#[derive(Parser)]
#[command(name = "swarmcert", about = "Certified slot allocation for UAV swarm control loops")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct Campaign {
    #[command(flatten)]
    common: Common,
    /// Single evaluation seed.
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Half-open seed range `A..B`.
    #[arg(long)]
    seeds: Option<String>,
    /// Calibrated model from `calibrate`; recalibrated when omitted.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Probe the calibration seeds and fit the confidence model.
    Calibrate(Common),
    /// Solve the LKF and export the envelope tables.
    Certify(Common),
    /// Run one policy.
    Run {
        #[command(flatten)]
        campaign: Campaign,
        #[arg(long, default_value = "safe")]
        policy: String,
    },
    /// Run every policy on matched seeds.
    Compare(Campaign),
    /// Check the DP against exhaustive search on random instances.
    Oracle {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let bad = || Error::Config(format!("seed range `{text}` is not A..B"));
    let (a, b) = text.split_once("..").ok_or_else(bad)?;
    let a: u64 = a.trim().parse().map_err(|_| bad())?;
    let b: u64 = b.trim().parse().map_err(|_| bad())?;
    if a >= b {
        return Err(bad());
    }
    Ok((a..b).collect())
}

fn seeds(c: &Campaign, config: &Config) -> Result<Vec<u64>> {
    let list = match (c.seed, &c.seeds) {
        (Some(s), _) => vec![s],
        (None, Some(r)) => parse_seeds(r)?,
        (None, None) => (config.seeds.evaluation[0]..config.seeds.evaluation[1]).collect(),
    };
    for [lo, hi] in [config.seeds.calibration, config.seeds.holdout] {
        if let Some(s) = list.iter().find(|s| (lo..hi).contains(*s)) {
            return Err(Error::Config(format!("evaluation seed {s} overlaps the calibration or hold-out seeds")));
        }
    }
    Ok(list)
}

fn model(c: &Campaign, setup: &Setup) -> Result<ConfidenceModel> {
    match &c.model {
        Some(p) => ConfidenceModel::from_json(&fs::read_to_string(p)?),
        None => Ok(calibrate_model(setup)?.1),
    }
}

fn campaign(c: &Campaign, policies: &[PolicyId]) -> Result<()> {
    let config = load_config(c.common.config.as_deref())?;
    let seeds = seeds(c, &config)?;
    let setup = Setup::new(config)?;
    let model = model(c, &setup)?;
    let exp = run_experiment(&setup, &model, policies, &seeds)?;
    let summary = write_outputs(&c.common.out, &exp)?;
    print!("{}", summary_csv(&summary));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Calibrate(common) => {
            let setup = Setup::new(load_config(common.config.as_deref())?)?;
            let (log, model) = calibrate_model(&setup)?;
            fs::create_dir_all(&common.out)?;
            let mut lines = String::new();
            for r in &log {
                lines.push_str(&serde_json::to_string(r).map_err(|e| Error::Parse(e.to_string()))?);
                lines.push('\n');
            }
            fs::write(common.out.join("calibration.jsonl"), lines)?;
            fs::write(common.out.join("model.json"), model.to_json())?;
            println!(
                "records {} classes {} chains {} snr quantile {:.3} dB",
                log.len(),
                model.classes.len(),
                model.chains.len(),
                model.snr_quantile_db
            );
        }
        Command::Certify(common) => {
            let setup = Setup::new(load_config(common.config.as_deref())?)?;
            let export = setup.certifier.export()?;
            fs::create_dir_all(&common.out)?;
            let text = serde_json::to_string_pretty(&export).map_err(|e| Error::Parse(e.to_string()))?;
            fs::write(common.out.join("tables.json"), text)?;
            let (res, lmin) = setup.certifier.lkf.residuals();
            println!("alpha_hold {} residual {res:e} lambda_min {lmin:e}", setup.certifier.alpha_hold);
        }
        Command::Run { campaign: c, policy } => campaign(&c, &[policy.parse()?])?,
        Command::Compare(c) => campaign(&c, &PolicyId::ALL)?,
        Command::Oracle { common, seed, trials } => {
            let setup = Setup::new(load_config(common.config.as_deref())?)?;
            let params = setup.params();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut mismatches = 0;
            for _ in 0..trials {
                let n = rng.gen_range(1..=5);
                let budget = rng.gen_range(1..=12);
                let inst = random_instance(&mut rng, &setup, n, budget, 6)?;
                let safe = SafeInstance::build(&inst, &setup.certifier, &params)?;
                let oracle = brute_force_p1(&safe.oracle_loops(), budget)?;
                if dp_allocate(&safe.choices(true), budget).value != oracle.utility {
                    mismatches += 1;
                }
            }
            println!("instances {trials} mismatches {mismatches}");
            if mismatches > 0 {
                return Err(Error::Infeasible(format!("{mismatches} oracle mismatches")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
