use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use phylotrait::runner::{self, Inputs, RunConfig, SampleLog, SamplerKind, SimulateConfig};
use phylotrait::Error;

#[derive(Parser)]
#[command(name = "phylotrait", version, about = "Multivariate Brownian trait inference on a fixed phylogeny")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Sampler {
    Analytic,
    Baseline,
}

impl From<Sampler> for SamplerKind {
    fn from(s: Sampler) -> Self {
        match s {
            Sampler::Analytic => SamplerKind::Analytic,
            Sampler::Baseline => SamplerKind::Baseline,
        }
    }
}

#[derive(Args)]
struct DataArgs {
    /// Newick tree file; overrides the config.
    #[arg(long)]
    tree: Option<PathBuf>,
    /// CSV trait table (first column taxon); overrides the config.
    #[arg(long)]
    traits: Option<PathBuf>,
    /// TOML run config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Token marking a missing cell in the trait table.
    #[arg(long)]
    missing_token: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Observed-data log-likelihood at the config's fixed parameters.
    Loglik {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Run MCMC and write a tab-separated sample log.
    Run {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        sampler: Option<Sampler>,
        /// Independent chains run concurrently, one log each.
        #[arg(long, default_value_t = 1)]
        chains: usize,
    },
    /// Simulate a tree and trait table from a TOML simulation config.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Fixed tree instead of a random one.
        #[arg(long)]
        tree: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for tree.nwk, traits.csv and complete.csv.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "NA")]
        missing_token: String,
    },
    /// Check the linear-time algorithms against dense algebra.
    Verify {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        instances: usize,
    },
    /// Compare sampler efficiency on shared data.
    Benchmark {
        #[arg(long)]
        tree: Option<PathBuf>,
        #[arg(long)]
        traits: Option<PathBuf>,
        /// Repeat for several configs.
        #[arg(long = "config", required = true)]
        configs: Vec<PathBuf>,
        /// Expand each config into one run per sampler.
        #[arg(long = "sampler", value_enum)]
        samplers: Vec<Sampler>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        missing_token: Option<String>,
    },
    /// Recompute the posterior summary from a sample log.
    Summarize { log: PathBuf },
}

fn load_config(path: Option<&Path>) -> phylotrait::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn apply(cfg: &mut RunConfig, data: &DataArgs) {
    if let Some(t) = &data.tree {
        cfg.tree = Some(t.clone());
    }
    if let Some(t) = &data.traits {
        cfg.traits = Some(t.clone());
    }
    if let Some(s) = data.seed {
        cfg.seed = s;
    }
    if let Some(m) = &data.missing_token {
        cfg.missing_token = m.clone();
    }
}

fn execute(cmd: Command) -> phylotrait::Result<ExitCode> {
    match cmd {
        Command::Loglik { data } => {
            let mut cfg = load_config(data.config.as_deref())?;
            apply(&mut cfg, &data);
            let inputs = Inputs::load(&cfg)?;
            println!("{}", runner::evaluate_loglik(&cfg, &inputs)?);
        }
        Command::Run { data, out, sampler, chains } => {
            let mut cfg = load_config(data.config.as_deref())?;
            apply(&mut cfg, &data);
            if let Some(o) = out {
                cfg.output = Some(o);
            }
            if let Some(s) = sampler {
                cfg.sampler = s.into();
            }
            let inputs = Inputs::load(&cfg)?;
            let outcomes = runner::run_chains(&cfg, &inputs, chains)?;
            for o in &outcomes {
                eprintln!("wrote {} ({} samples)", o.path.display(), o.summary.n_samples);
            }
            if outcomes.len() == 1 {
                print!("{}", outcomes[0].summary.to_block());
            } else {
                println!("parameter\trhat");
                for (name, r) in runner::rhat_table(&outcomes)? {
                    println!("{name}\t{r}");
                }
            }
        }
        Command::Simulate { config, tree, seed, out, missing_token } => {
            let mut cfg = SimulateConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let tree = tree.as_deref().map(runner::read_tree_file).transpose()?;
            let sim = runner::simulate_dataset(&cfg, tree)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
            let tree_path = out.join("tree.nwk");
            std::fs::write(&tree_path, sim.tree.to_newick() + "\n")
                .map_err(|e| Error::Io { path: tree_path.clone(), source: e })?;
            sim.data.write_csv_file(&out.join("traits.csv"), &missing_token)?;
            sim.complete.write_csv_file(&out.join("complete.csv"), &missing_token)?;
            eprintln!("wrote {} tips x {} traits to {}", sim.data.n_taxa(), sim.data.n_traits(), out.display());
        }
        Command::Verify { seed, instances } => {
            let checks = runner::verify(seed, instances)?;
            let mut ok = true;
            for c in &checks {
                println!("{} {} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                ok &= c.passed;
            }
            if !ok {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Benchmark { tree, traits, configs, samplers, seed, missing_token } => {
            let data = DataArgs { tree, traits, config: None, seed, missing_token };
            let mut runs = Vec::new();
            for path in &configs {
                let mut cfg = RunConfig::load(path)?;
                apply(&mut cfg, &data);
                let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                if samplers.is_empty() {
                    runs.push((format!("{stem}:{}", cfg.sampler.name()), cfg));
                } else {
                    for s in &samplers {
                        let c = RunConfig { sampler: (*s).into(), ..cfg.clone() };
                        runs.push((format!("{stem}:{}", c.sampler.name()), c));
                    }
                }
            }
            let inputs = Inputs::load(&runs[0].1)?;
            for (label, cfg) in &runs[1..] {
                if Inputs::load(cfg)? != inputs {
                    return Err(Error::Config(format!("{label}: benchmark configs must share data")));
                }
            }
            let table = runner::benchmark(&runs, &inputs)?;
            for w in &table.warnings {
                eprintln!("warning: {w}");
            }
            print!("{}", table.render());
        }
        Command::Summarize { log } => {
            let parsed = SampleLog::read_file(&log)?;
            print!("{}", runner::summarize(&parsed)?.to_block());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
