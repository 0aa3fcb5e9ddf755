//! Batch orchestration: TOML run configs, tab-separated sample logs with a
//! trailing summary block, multi-chain runs and sampler benchmarks.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diagnostics;
use crate::error::{Error, Result};
use crate::gibbs::{baseline_tipwise_sampler, mcmc_step, BaselineSampler, McmcState, Priors, Schedule, WishartPrior};
use crate::heritability::{heritability_matrix, tree_moments, TreeMoments};
use crate::likelihood::{log_likelihood, DiffusionModel, LinkKind, TipLink};
use crate::linalg;
use crate::traits::{read_trait_csv_file, TraitMatrix, Transform};
use crate::tree::{parse_newick, Phylogeny};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const HPD_MASS: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    #[default]
    Analytic,
    Baseline,
}

impl SamplerKind {
    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::Analytic => "analytic",
            SamplerKind::Baseline => "baseline",
        }
    }
}

fn link_name(link: LinkKind) -> &'static str {
    match link {
        LinkKind::Degenerate => "degenerate",
        LinkKind::Residual => "residual",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RootConfig {
    /// Defaults to zeros.
    pub mean: Option<Vec<f64>>,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
}

fn default_kappa() -> f64 {
    0.01
}

impl Default for RootConfig {
    fn default() -> Self {
        RootConfig { mean: None, kappa: default_kappa() }
    }
}

/// Wishart priors in the rate parameterization. Missing entries fall back to
/// the identity rate with q + 1 degrees of freedom.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub sigma_rate: Option<Vec<Vec<f64>>>,
    pub sigma_df: Option<f64>,
    pub gamma_rate: Option<Vec<Vec<f64>>>,
    pub gamma_df: Option<f64>,
}

/// Fixed parameter values for `loglik`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterConfig {
    pub sigma: Option<Vec<Vec<f64>>>,
    pub gamma: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub tree: Option<PathBuf>,
    pub traits: Option<PathBuf>,
    pub output: Option<PathBuf>,
    #[serde(default = "default_link")]
    pub link: LinkKind,
    #[serde(default)]
    pub sampler: SamplerKind,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default = "default_iterations")]
    pub iterations: u64,
    /// Fraction of the chain discarded before recording.
    #[serde(default = "default_burn_in")]
    pub burn_in: f64,
    #[serde(default = "default_thin")]
    pub thin: u64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_missing_token")]
    pub missing_token: String,
    #[serde(default)]
    pub standardize: bool,
    /// Per-trait transforms keyed by column name; unlisted traits are left as is.
    #[serde(default)]
    pub transforms: BTreeMap<String, Transform>,
    /// Adds an `elapsed` column. Off by default so that logs are reproducible.
    #[serde(default)]
    pub timing: bool,
    #[serde(default)]
    pub root: RootConfig,
    #[serde(default)]
    pub priors: PriorConfig,
    #[serde(default)]
    pub parameters: ParameterConfig,
}

fn default_link() -> LinkKind {
    LinkKind::Residual
}
fn default_iterations() -> u64 {
    10_000
}
fn default_burn_in() -> f64 {
    0.1
}
fn default_thin() -> u64 {
    1
}
fn default_seed() -> u64 {
    1
}
fn default_missing_token() -> String {
    "NA".into()
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            tree: None,
            traits: None,
            output: None,
            link: default_link(),
            sampler: SamplerKind::default(),
            schedule: Schedule::default(),
            iterations: default_iterations(),
            burn_in: default_burn_in(),
            thin: default_thin(),
            seed: default_seed(),
            missing_token: default_missing_token(),
            standardize: false,
            transforms: BTreeMap::new(),
            timing: false,
            root: RootConfig::default(),
            priors: PriorConfig::default(),
            parameters: ParameterConfig::default(),
        }
    }
}

fn config_err(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("field `{field}`: {msg}"))
}

fn matrix_from_rows(field: &str, rows: &[Vec<f64>], q: usize) -> Result<DMatrix<f64>> {
    if rows.len() != q || rows.iter().any(|r| r.len() != q) {
        return Err(config_err(field, format!("expected a {q}x{q} matrix")));
    }
    let m = DMatrix::from_fn(q, q, |i, j| rows[i][j]);
    linalg::validate_spd(&m, field).map_err(|_| config_err(field, "matrix is not symmetric positive definite"))
}

impl RunConfig {
    /// Parses TOML; syntax and type errors carry the line and column.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. Relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg =
            Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), strip_config(e))))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.tree, &mut cfg.traits, &mut cfg.output].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Checks that do not need the data.
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(config_err("iterations", "must be positive"));
        }
        if !(self.burn_in >= 0.0 && self.burn_in < 1.0) {
            return Err(config_err("burn_in", "must lie in [0, 1)"));
        }
        if self.thin == 0 {
            return Err(config_err("thin", "must be at least 1"));
        }
        if self.n_recorded() == 0 {
            return Err(config_err("burn_in", "leaves no iterations to record"));
        }
        if !(self.root.kappa > 0.0 && self.root.kappa.is_finite()) {
            return Err(config_err("root.kappa", "must be positive"));
        }
        for (field, df) in [("priors.sigma_df", self.priors.sigma_df), ("priors.gamma_df", self.priors.gamma_df)] {
            if let Some(df) = df {
                if !df.is_finite() {
                    return Err(config_err(field, "must be finite"));
                }
            }
        }
        Ok(())
    }

    pub fn burn_in_iterations(&self) -> u64 {
        (self.burn_in * self.iterations as f64).floor() as u64
    }

    /// Whether sweep `it` (1-based) is written to the log.
    pub fn records(&self, it: u64) -> bool {
        let b = self.burn_in_iterations();
        it > b && (it - b) % self.thin == 0
    }

    pub fn n_recorded(&self) -> u64 {
        (self.iterations - self.burn_in_iterations()) / self.thin
    }

    pub fn root_mean(&self, q: usize) -> Result<DVector<f64>> {
        match &self.root.mean {
            None => Ok(DVector::zeros(q)),
            Some(m) if m.len() == q => Ok(DVector::from_column_slice(m)),
            Some(m) => Err(config_err("root.mean", format!("has {} entries for {q} traits", m.len()))),
        }
    }

    pub fn priors(&self, q: usize) -> Result<Priors> {
        let p = &self.priors;
        let wishart = |rate: &Option<Vec<Vec<f64>>>, df: Option<f64>, name: &str| -> Result<WishartPrior> {
            let rate = match rate {
                Some(r) => matrix_from_rows(&format!("priors.{name}_rate"), r, q)?,
                None => DMatrix::identity(q, q),
            };
            WishartPrior::new(rate, df.unwrap_or(q as f64 + 1.0))
                .map_err(|e| config_err(&format!("priors.{name}_df"), e))
        };
        Ok(Priors { sigma: wishart(&p.sigma_rate, p.sigma_df, "sigma")?, gamma: wishart(&p.gamma_rate, p.gamma_df, "gamma")? })
    }

    /// Model and link for fixed-parameter evaluation; identity where unset.
    pub fn fixed_parameters(&self, q: usize) -> Result<(DiffusionModel, TipLink)> {
        let sigma = match &self.parameters.sigma {
            Some(r) => matrix_from_rows("parameters.sigma", r, q)?,
            None => DMatrix::identity(q, q),
        };
        let model = DiffusionModel::new(sigma, self.root_mean(q)?, self.root.kappa)?;
        let link = match self.link {
            LinkKind::Degenerate => TipLink::Degenerate,
            LinkKind::Residual => TipLink::residual(match &self.parameters.gamma {
                Some(r) => matrix_from_rows("parameters.gamma", r, q)?,
                None => DMatrix::identity(q, q),
            })?,
        };
        Ok((model, link))
    }

    /// SHA-256 of the effective config minus the output path, written into
    /// every log.
    pub fn digest(&self) -> String {
        let text = toml::to_string(&RunConfig { output: None, ..self.clone() }).expect("config serializes");
        let mut out = String::with_capacity(64);
        for b in Sha256::digest(text.as_bytes()).iter() {
            let _ = write!(out, "{b:02x}");
        }
        out
    }

    pub fn transform_specs(&self, tm: &TraitMatrix) -> Result<Vec<Transform>> {
        if let Some(name) = self.transforms.keys().find(|k| !tm.trait_names().contains(k)) {
            return Err(config_err(&format!("transforms.{name}"), "no such trait column"));
        }
        Ok(tm.trait_names().iter().map(|n| self.transforms.get(n).copied().unwrap_or_default()).collect())
    }
}

fn strip_config(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

pub fn read_tree_file(path: &Path) -> Result<Phylogeny> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_newick(text.trim())
}

/// Tree and trait table after alignment and transforms.
#[derive(Debug, Clone, PartialEq)]
pub struct Inputs {
    pub tree: Phylogeny,
    pub data: TraitMatrix,
}

impl Inputs {
    pub fn prepare(tree: Phylogeny, raw: TraitMatrix, cfg: &RunConfig) -> Result<Self> {
        tree.check_positive_branches()?;
        let aligned = raw.align_to(&tree)?;
        let specs = cfg.transform_specs(&aligned)?;
        let data = aligned.transform(&specs, cfg.standardize)?;
        Ok(Inputs { tree, data })
    }

    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let tree_path = cfg.tree.as_deref().ok_or_else(|| config_err("tree", "no tree file given"))?;
        let traits_path = cfg.traits.as_deref().ok_or_else(|| config_err("traits", "no trait table given"))?;
        let tree = read_tree_file(tree_path)?;
        let raw = read_trait_csv_file(traits_path, &cfg.missing_token)?;
        Self::prepare(tree, raw, cfg)
    }
}

/// Column names: a function of the trait count and link only, plus `elapsed`
/// when timing is on.
pub fn log_columns(q: usize, link: LinkKind, timing: bool) -> Vec<String> {
    let mut cols = vec!["iteration".to_string(), "loglik".to_string()];
    let upper = |prefix: &str, diag: bool| -> Vec<String> {
        let mut v = Vec::new();
        for j in 0..q {
            for k in j..q {
                if diag || k > j {
                    v.push(format!("{prefix}.{}.{}", j + 1, k + 1));
                }
            }
        }
        v
    };
    cols.extend(upper("sigma", true));
    cols.extend(upper("cor", false));
    if link == LinkKind::Residual {
        cols.extend(upper("gamma", true));
        cols.extend(upper("h", true));
    }
    if timing {
        cols.push("elapsed".into());
    }
    cols
}

/// Recorded parameter values in `log_columns` order, without iteration,
/// log-likelihood or elapsed time.
pub fn parameter_row(state: &McmcState, moments: &TreeMoments) -> Result<Vec<f64>> {
    let sigma = state.sigma();
    let q = sigma.nrows();
    let mut row = Vec::new();
    for j in 0..q {
        for k in j..q {
            row.push(sigma[(j, k)]);
        }
    }
    for j in 0..q {
        for k in j + 1..q {
            row.push(sigma[(j, k)] / (sigma[(j, j)] * sigma[(k, k)]).sqrt());
        }
    }
    if let Some(gamma) = state.gamma() {
        for j in 0..q {
            for k in j..q {
                row.push(gamma[(j, k)]);
            }
        }
        let v = linalg::spd_inverse(gamma, "gamma")?;
        let h = heritability_matrix(moments, sigma, &v)?;
        for j in 0..q {
            for k in j..q {
                row.push(h[(j, k)]);
            }
        }
    }
    Ok(row)
}

/// In-memory copy of a sample log.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleLog {
    pub metadata: Vec<(String, String)>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl SampleLog {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let c = self.columns.iter().position(|n| n == name)?;
        Some(self.rows.iter().map(|r| r[c]).collect())
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Parses a log written by `run_chain`; summary lines are ignored.
    pub fn read<R: Read>(reader: R) -> Result<Self> {
        let mut metadata = Vec::new();
        let mut columns: Option<Vec<String>> = None;
        let mut rows = Vec::new();
        let mut in_summary = false;
        for (lineno, line) in BufReader::new(reader).lines().enumerate() {
            let line = line.map_err(|e| Error::io("<log>", e))?;
            if let Some(rest) = line.strip_prefix("# ") {
                if rest == "summary" {
                    in_summary = true;
                }
                if !in_summary && columns.is_none() {
                    if let Some((k, v)) = rest.split_once('\t') {
                        metadata.push((k.to_string(), v.to_string()));
                    }
                }
                continue;
            }
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            match &columns {
                None => columns = Some(fields.iter().map(|s| s.to_string()).collect()),
                Some(cols) => {
                    if fields.len() != cols.len() {
                        return Err(Error::RaggedRow { row: lineno + 1, expected: cols.len(), found: fields.len() });
                    }
                    let row = fields
                        .iter()
                        .zip(cols)
                        .map(|(f, c)| {
                            f.parse::<f64>().map_err(|_| Error::NonNumeric {
                                row: lineno + 1,
                                column: c.clone(),
                                value: f.to_string(),
                            })
                        })
                        .collect::<Result<Vec<f64>>>()?;
                    rows.push(row);
                }
            }
        }
        let columns = columns.ok_or_else(|| Error::Config("log has no header line".into()))?;
        Ok(SampleLog { metadata, columns, rows })
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSummary {
    pub name: String,
    pub mean: f64,
    pub hpd_lower: f64,
    pub hpd_upper: f64,
    /// Posterior probability of the majority sign.
    pub sign_probability: f64,
    /// None below the minimum series length.
    pub ess: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub n_samples: usize,
    pub parameters: Vec<ParameterSummary>,
}

impl Summary {
    pub fn get(&self, name: &str) -> Option<&ParameterSummary> {
        self.parameters.iter().find(|p| p.name == name)
    }

    /// '#'-prefixed block appended to logs.
    pub fn to_block(&self) -> String {
        let mut s = String::from("# summary\n");
        let _ = writeln!(s, "# samples\t{}", self.n_samples);
        s.push_str("# parameter\tmean\thpd95_lower\thpd95_upper\tsign_probability\tess\n");
        for p in &self.parameters {
            let ess = p.ess.map(|e| e.to_string()).unwrap_or_else(|| "NA".into());
            let _ = writeln!(
                s,
                "# {}\t{}\t{}\t{}\t{}\t{}",
                p.name, p.mean, p.hpd_lower, p.hpd_upper, p.sign_probability, ess
            );
        }
        s
    }
}

fn is_summarized(column: &str) -> bool {
    column != "iteration" && column != "elapsed"
}

/// Posterior summaries of every recorded quantity. Recomputing this from a
/// log file reproduces the in-memory result because values are written in
/// shortest round-trip form.
pub fn summarize(log: &SampleLog) -> Result<Summary> {
    if log.rows.is_empty() {
        return Err(Error::TooShortSeries(0));
    }
    let mut parameters = Vec::new();
    for (c, name) in log.columns.iter().enumerate() {
        if !is_summarized(name) {
            continue;
        }
        let x: Vec<f64> = log.rows.iter().map(|r| r[c]).collect();
        let (hpd_lower, hpd_upper) = diagnostics::hpd_interval(&x, HPD_MASS)?;
        parameters.push(ParameterSummary {
            name: name.clone(),
            mean: diagnostics::mean(&x),
            hpd_lower,
            hpd_upper,
            sign_probability: diagnostics::sign_probability(&x),
            ess: diagnostics::ess(&x).ok(),
        });
    }
    Ok(Summary { n_samples: log.rows.len(), parameters })
}

/// One chain's sampler and its state.
pub struct Chain {
    pub state: McmcState,
    baseline: Option<BaselineSampler>,
    priors: Priors,
    schedule: Schedule,
}

impl Chain {
    pub fn new(cfg: &RunConfig, inputs: &Inputs, stream: u64) -> Result<Self> {
        let q = inputs.data.n_traits();
        let priors = cfg.priors(q)?;
        let state = McmcState::seeded(
            &inputs.tree,
            &inputs.data,
            cfg.root_mean(q)?,
            cfg.root.kappa,
            cfg.link,
            cfg.seed,
            stream,
        )?;
        let baseline = match cfg.sampler {
            SamplerKind::Analytic => None,
            SamplerKind::Baseline => Some(BaselineSampler::new(&inputs.tree, cfg.root.kappa)?),
        };
        Ok(Chain { state, baseline, priors, schedule: cfg.schedule })
    }

    /// One sweep. Excludes the log-likelihood, which the baseline does not need.
    pub fn step(&mut self, inputs: &Inputs) -> Result<()> {
        match &self.baseline {
            None => mcmc_step(&mut self.state, &inputs.tree, &inputs.data, &self.priors, self.schedule),
            Some(b) => baseline_tipwise_sampler(&mut self.state, b, &inputs.tree, &inputs.data, &self.priors),
        }
    }
}

fn write_metadata<W: Write>(w: &mut W, meta: &[(String, String)]) -> std::io::Result<()> {
    writeln!(w, "# phylotrait {VERSION}")?;
    for (k, v) in meta {
        writeln!(w, "# {k}\t{v}")?;
    }
    Ok(())
}

/// Runs one chain and streams its log to `sink`.
pub fn run_chain<W: Write>(cfg: &RunConfig, inputs: &Inputs, stream: u64, sink: W) -> Result<(SampleLog, Summary)> {
    cfg.validate()?;
    let q = inputs.data.n_traits();
    let moments = tree_moments(&inputs.tree);
    let columns = log_columns(q, cfg.link, cfg.timing);
    let metadata: Vec<(String, String)> = vec![
        ("seed".into(), cfg.seed.to_string()),
        ("stream".into(), stream.to_string()),
        ("config_sha256".into(), cfg.digest()),
        ("sampler".into(), cfg.sampler.name().into()),
        ("link".into(), link_name(cfg.link).into()),
        ("taxa".into(), inputs.data.n_taxa().to_string()),
        ("traits".into(), inputs.data.trait_names().join(",")),
        ("iterations".into(), cfg.iterations.to_string()),
        ("burn_in".into(), cfg.burn_in_iterations().to_string()),
        ("thin".into(), cfg.thin.to_string()),
    ];
    let io = |e| Error::io("<log>", e);
    let mut w = BufWriter::new(sink);
    write_metadata(&mut w, &metadata).map_err(io)?;
    writeln!(w, "{}", columns.join("\t")).map_err(io)?;

    let mut chain = Chain::new(cfg, inputs, stream)?;
    let mut rows = Vec::with_capacity(cfg.n_recorded() as usize);
    let start = Instant::now();
    let mut line = String::new();
    for it in 1..=cfg.iterations {
        chain.step(inputs)?;
        if !cfg.records(it) {
            continue;
        }
        let elapsed = start.elapsed().as_secs_f64();
        let loglik = chain.state.log_likelihood(&inputs.tree, &inputs.data)?;
        let mut row = vec![it as f64, loglik];
        row.extend(parameter_row(&chain.state, &moments)?);
        if cfg.timing {
            row.push(elapsed);
        }
        line.clear();
        let _ = write!(line, "{it}");
        for v in &row[1..] {
            let _ = write!(line, "\t{v}");
        }
        writeln!(w, "{line}").map_err(io)?;
        rows.push(row);
    }
    let log = SampleLog { metadata, columns, rows };
    let summary = summarize(&log)?;
    w.write_all(summary.to_block().as_bytes()).map_err(io)?;
    w.flush().map_err(io)?;
    Ok((log, summary))
}

/// Log path of chain `c` out of `k`: the configured path for a single chain,
/// `<stem>.chain<c>.<ext>` otherwise.
pub fn chain_path(out: &Path, c: usize, k: usize) -> PathBuf {
    if k == 1 {
        return out.to_path_buf();
    }
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match out.extension() {
        Some(ext) => format!("{stem}.chain{c}.{}", ext.to_string_lossy()),
        None => format!("{stem}.chain{c}"),
    };
    out.with_file_name(name)
}

#[derive(Debug, Clone)]
pub struct ChainOutcome {
    pub path: PathBuf,
    pub log: SampleLog,
    pub summary: Summary,
}

/// Runs `k` chains concurrently. Chain c uses the configured seed on RNG
/// stream c and writes its own log.
pub fn run_chains(cfg: &RunConfig, inputs: &Inputs, k: usize) -> Result<Vec<ChainOutcome>> {
    if k == 0 {
        return Err(config_err("chains", "must be at least 1"));
    }
    let out = cfg.output.as_deref().ok_or_else(|| config_err("output", "no output path given"))?;
    let results: Vec<Result<ChainOutcome>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..k)
            .map(|c| {
                let path = chain_path(out, c, k);
                s.spawn(move || -> Result<ChainOutcome> {
                    let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                    let (log, summary) = run_chain(cfg, inputs, c as u64, f)?;
                    Ok(ChainOutcome { path, log, summary })
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("chain thread panicked")).collect()
    });
    results.into_iter().collect()
}

/// R-hat per summarized column across chains.
pub fn rhat_table(outcomes: &[ChainOutcome]) -> Result<Vec<(String, f64)>> {
    let first = &outcomes.first().ok_or_else(|| config_err("chains", "no chains"))?.log;
    let mut out = Vec::new();
    for name in first.columns.iter().filter(|c| is_summarized(c)) {
        let chains: Vec<Vec<f64>> = outcomes.iter().map(|o| o.log.column(name).unwrap_or_default()).collect();
        out.push((name.clone(), diagnostics::gelman_rubin(&chains)?));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub label: String,
    pub samples: usize,
    pub seconds: f64,
    pub min_ess_per_hour: f64,
    pub median_ess_per_hour: f64,
    pub min_ess_per_sample: f64,
    pub median_ess_per_sample: f64,
    pub samples_per_hour: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchTable {
    pub rows: Vec<BenchRow>,
    pub warnings: Vec<String>,
}

pub fn median(x: &[f64]) -> f64 {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Times the sweeps of one config and computes ESS over every recorded
/// parameter column. Parameter extraction and burn-in bookkeeping are outside
/// the timed section.
pub fn bench_one(cfg: &RunConfig, inputs: &Inputs, label: &str) -> Result<BenchRow> {
    cfg.validate()?;
    let moments = tree_moments(&inputs.tree);
    let mut chain = Chain::new(cfg, inputs, 0)?;
    let mut series: Vec<Vec<f64>> = Vec::new();
    let mut seconds = 0.0;
    for it in 1..=cfg.iterations {
        let t0 = Instant::now();
        chain.step(inputs)?;
        seconds += t0.elapsed().as_secs_f64();
        if cfg.records(it) {
            let row = parameter_row(&chain.state, &moments)?;
            if series.is_empty() {
                series = vec![Vec::with_capacity(cfg.n_recorded() as usize); row.len()];
            }
            for (s, v) in series.iter_mut().zip(row) {
                s.push(v);
            }
        }
    }
    let samples = series.first().map_or(0, Vec::len);
    let ess = series.iter().map(|s| diagnostics::ess(s)).collect::<Result<Vec<f64>>>()?;
    let hours = seconds / 3600.0;
    let min_ess = ess.iter().copied().fold(f64::INFINITY, f64::min);
    let med_ess = median(&ess);
    Ok(BenchRow {
        label: label.to_string(),
        samples,
        seconds,
        min_ess_per_hour: min_ess / hours,
        median_ess_per_hour: med_ess / hours,
        min_ess_per_sample: min_ess / samples as f64,
        median_ess_per_sample: med_ess / samples as f64,
        samples_per_hour: samples as f64 / hours,
    })
}

/// Benchmarks configs on shared data; ratios are taken against the first row.
pub fn benchmark(configs: &[(String, RunConfig)], inputs: &Inputs) -> Result<BenchTable> {
    if configs.is_empty() {
        return Err(config_err("config", "benchmark needs at least one config"));
    }
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for (label, cfg) in configs {
        let row = bench_one(cfg, inputs, label)?;
        if row.seconds < 1.0 {
            warnings.push(format!(
                "{label}: run took {:.3} s; wall-clock resolution may dominate the rates",
                row.seconds
            ));
        }
        rows.push(row);
    }
    Ok(BenchTable { rows, warnings })
}

impl BenchTable {
    /// Ratio rows `first / other` for each later row.
    pub fn ratios(&self) -> Vec<BenchRow> {
        let Some(first) = self.rows.first() else {
            return Vec::new();
        };
        self.rows[1..]
            .iter()
            .map(|r| BenchRow {
                label: format!("{}/{}", first.label, r.label),
                samples: 0,
                seconds: first.seconds / r.seconds,
                min_ess_per_hour: first.min_ess_per_hour / r.min_ess_per_hour,
                median_ess_per_hour: first.median_ess_per_hour / r.median_ess_per_hour,
                min_ess_per_sample: first.min_ess_per_sample / r.min_ess_per_sample,
                median_ess_per_sample: first.median_ess_per_sample / r.median_ess_per_sample,
                samples_per_hour: first.samples_per_hour / r.samples_per_hour,
            })
            .collect()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<24} {:>14} {:>14} {:>12} {:>12} {:>14}",
            "method", "min ESS/h", "median ESS/h", "min ESS/smp", "med ESS/smp", "samples/h"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<24} {:>14.1} {:>14.1} {:>12.4} {:>12.4} {:>14.1}",
                r.label,
                r.min_ess_per_hour,
                r.median_ess_per_hour,
                r.min_ess_per_sample,
                r.median_ess_per_sample,
                r.samples_per_hour
            );
        }
        for r in self.ratios() {
            let _ = writeln!(
                s,
                "{:<24} {:>13.2}x {:>13.2}x {:>11.2}x {:>11.2}x {:>13.2}x",
                format!("speed-up {}", r.label),
                r.min_ess_per_hour,
                r.median_ess_per_hour,
                r.min_ess_per_sample,
                r.median_ess_per_sample,
                r.samples_per_hour
            );
        }
        s
    }
}

/// Log-likelihood at the config's fixed parameters.
pub fn evaluate_loglik(cfg: &RunConfig, inputs: &Inputs) -> Result<f64> {
    let (model, link) = cfg.fixed_parameters(inputs.data.n_traits())?;
    log_likelihood(&inputs.tree, &inputs.data, &model, &link)
}

/// Settings for `simulate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    #[serde(default = "default_sim_tips")]
    pub n_tips: usize,
    pub sigma: Vec<Vec<f64>>,
    /// Residual variance V = Γ⁻¹; omitted means the degenerate link.
    pub residual_variance: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub root: RootConfig,
    /// Per-cell missing-at-random probability.
    #[serde(default)]
    pub missing: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub trait_names: Option<Vec<String>>,
}

fn default_sim_tips() -> usize {
    50
}

impl SimulateConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), strip_config(e))))
    }
}

pub struct SimulatedFiles {
    pub tree: Phylogeny,
    pub data: TraitMatrix,
    pub complete: TraitMatrix,
}

/// Simulates a dataset; `tree` replaces the random tree when given.
pub fn simulate_dataset(cfg: &SimulateConfig, tree: Option<Phylogeny>) -> Result<SimulatedFiles> {
    use crate::simulation::{apply_mar_mask, simulate_on, random_tree};
    let q = cfg.sigma.len();
    if q == 0 {
        return Err(config_err("sigma", "must be non-empty"));
    }
    let sigma = matrix_from_rows("sigma", &cfg.sigma, q)?;
    let root_mean = match &cfg.root.mean {
        None => DVector::zeros(q),
        Some(m) if m.len() == q => DVector::from_column_slice(m),
        Some(_) => return Err(config_err("root.mean", "length differs from the trait count")),
    };
    let model = DiffusionModel::new(sigma, root_mean, cfg.root.kappa)?;
    let link = match &cfg.residual_variance {
        None => TipLink::Degenerate,
        Some(v) => {
            let v = matrix_from_rows("residual_variance", v, q)?;
            TipLink::residual(linalg::spd_inverse(&v, "residual_variance")?)?
        }
    };
    let names = match &cfg.trait_names {
        Some(n) if n.len() == q => n.clone(),
        Some(_) => return Err(config_err("trait_names", "length differs from the trait count")),
        None => (1..=q).map(|j| format!("trait{j}")).collect(),
    };
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let tree = match tree {
        Some(t) => t,
        None => random_tree(cfg.n_tips, &mut rng)?,
    };
    let (complete, _) = simulate_on(&tree, &model, &link, &names, &mut rng)?;
    let data = apply_mar_mask(&complete, &vec![cfg.missing; q], cfg.seed.wrapping_add(1))?;
    Ok(SimulatedFiles { tree, data, complete })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Fast self-check: the linear-time likelihood, gram and tree moments against
/// dense algebra on random instances.
pub fn verify(seed: u64, instances: usize) -> Result<Vec<Check>> {
    use crate::oracle::{matrix_normal_loglik, oracle_dense_gram, oracle_dense_loglik};
    use crate::simulation::random_tree;
    use rand::Rng;

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut worst_lik = 0.0f64;
    let mut worst_mn = 0.0f64;
    let mut worst_gram = 0.0f64;
    let mut worst_moments = 0.0f64;
    let mut empty_ok = true;
    for _ in 0..instances {
        let n = rng.random_range(2..=16);
        let q = rng.random_range(1..=4);
        let tree = random_tree(n, &mut rng)?;
        let kappa = rng.random_range(0.1..2.0);
        let a = DMatrix::from_fn(q, q, |_, _| rng.random_range(-1.0..1.0));
        let sigma = &a * a.transpose() + DMatrix::identity(q, q) * 0.5;
        let mu = DVector::from_fn(q, |_, _| rng.random_range(-1.0..1.0));
        let model = DiffusionModel::new(sigma, mu, kappa)?;
        let b = DMatrix::from_fn(q, q, |_, _| rng.random_range(-1.0..1.0));
        let gamma = &b * b.transpose() + DMatrix::identity(q, q);
        let names: Vec<String> = (0..q).map(|j| format!("x{j}")).collect();
        let (complete, _) = crate::simulation::simulate_on(&tree, &model, &TipLink::Degenerate, &names, &mut rng)?;
        let rate = rng.random_range(0.0..0.9);
        let masked = crate::simulation::apply_mar_mask(&complete, &vec![rate; q], rng.random())?;
        for link in [TipLink::Degenerate, TipLink::residual(gamma.clone())?] {
            let fast = log_likelihood(&tree, &masked, &model, &link)?;
            let dense = oracle_dense_loglik(&tree, &masked, &model, &link)?;
            worst_lik = worst_lik.max((fast - dense).abs() / (1.0 + dense.abs()));
            let empty = complete.with_mask(vec![false; n * q])?;
            empty_ok &= log_likelihood(&tree, &empty, &model, &link)? == 0.0;
        }
        let fast = log_likelihood(&tree, &complete, &model, &TipLink::Degenerate)?;
        let mn = matrix_normal_loglik(&tree, &complete, &model)?;
        worst_mn = worst_mn.max((fast - mn).abs() / (1.0 + mn.abs()));
        let g = crate::gibbs::tree_weighted_gram(&tree, kappa, complete.values())?;
        let gd = oracle_dense_gram(&tree, kappa, complete.values())?;
        worst_gram = worst_gram.max((g - &gd).abs().max() / (1.0 + gd.abs().max()));
        let m = tree_moments(&tree);
        let psi = crate::tree::build_psi(&tree, kappa).psi;
        worst_moments = worst_moments.max((m.trace_psi - psi.trace()).abs()).max((m.total_sum - psi.sum()).abs());
    }
    let h = {
        let tree = parse_newick("((A:1,B:1):2,C:3);")?;
        let one = DMatrix::identity(1, 1);
        heritability_matrix(&tree_moments(&tree), &one, &one)?[(0, 0)]
    };
    let check = |name: &str, passed: bool, detail: String| Check { name: name.into(), passed, detail };
    Ok(vec![
        check("likelihood vs dense", worst_lik < 1e-8, format!("max rel err {worst_lik:.3e}")),
        check("matrix-normal closed form", worst_mn < 1e-10, format!("max rel err {worst_mn:.3e}")),
        check("all-missing likelihood is 0", empty_ok, String::new()),
        check("tree-weighted gram vs dense", worst_gram < 1e-10, format!("max rel err {worst_gram:.3e}")),
        check("tree moments vs dense", worst_moments < 1e-10, format!("max abs err {worst_moments:.3e}")),
        check("heritability example 0.7", (h - 0.7).abs() < 1e-12, format!("h = {h}")),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulation::{apply_mar_mask, random_tree, simulate_on};

    fn inputs(n: usize, q: usize, link: &TipLink, seed: u64) -> Inputs {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let tree = random_tree(n, &mut rng).unwrap();
        let model = DiffusionModel::new(DMatrix::identity(q, q), DVector::zeros(q), 1.0).unwrap();
        let names: Vec<String> = (0..q).map(|j| format!("x{j}")).collect();
        let (data, _) = simulate_on(&tree, &model, link, &names, &mut rng).unwrap();
        let data = apply_mar_mask(&data, &vec![0.3; q], seed).unwrap();
        Inputs { tree, data }
    }

    #[test]
    fn config_defaults_and_errors() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg.burn_in, 0.1);
        assert_eq!(cfg.thin, 1);
        assert_eq!(cfg.link, LinkKind::Residual);
        let e = RunConfig::from_toml_str("thin = 0").unwrap_err().to_string();
        assert!(e.contains("thin"), "{e}");
        let e = RunConfig::from_toml_str("iterations = 10\nburn_in = 0.9\nthin = 2").unwrap_err().to_string();
        assert!(e.contains("burn_in"), "{e}");
        let e = RunConfig::from_toml_str("seed = 1\nbogus = 2").unwrap_err().to_string();
        assert!(e.contains("line 2"), "{e}");
        let cfg = RunConfig::from_toml_str("[priors]\nsigma_rate = [[1.0, 2.0], [2.0, 1.0]]").unwrap();
        let e = cfg.priors(2).unwrap_err().to_string();
        assert!(e.contains("priors.sigma_rate"), "{e}");
    }

    #[test]
    fn recording_schedule() {
        let cfg = RunConfig { iterations: 100, burn_in: 0.1, thin: 3, ..Default::default() };
        let recorded: Vec<u64> = (1..=100).filter(|&i| cfg.records(i)).collect();
        assert_eq!(recorded.len() as u64, cfg.n_recorded());
        assert_eq!(recorded[0], 13);
    }

    #[test]
    fn schema_depends_on_q_and_link() {
        let c = log_columns(3, LinkKind::Degenerate, false);
        assert_eq!(c.len(), 2 + 6 + 3);
        let c = log_columns(3, LinkKind::Residual, false);
        assert_eq!(c.len(), 2 + 6 + 3 + 6 + 6);
        assert_eq!(c[2], "sigma.1.1");
    }

    #[test]
    fn log_round_trip_and_determinism() {
        let link = TipLink::residual(DMatrix::identity(2, 2)).unwrap();
        let inp = inputs(12, 2, &link, 5);
        let cfg = RunConfig { iterations: 60, ..Default::default() };
        let mut a = Vec::new();
        let (log, summary) = run_chain(&cfg, &inp, 0, &mut a).unwrap();
        let mut b = Vec::new();
        run_chain(&cfg, &inp, 0, &mut b).unwrap();
        assert_eq!(a, b);
        let back = SampleLog::read(&a[..]).unwrap();
        assert_eq!(back.columns, log.columns);
        assert_eq!(back.rows, log.rows);
        assert_eq!(summarize(&back).unwrap(), summary);
        let mut c = Vec::new();
        run_chain(&cfg, &inp, 1, &mut c).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn baseline_shares_schema() {
        let inp = inputs(10, 2, &TipLink::Degenerate, 2);
        let cfg = RunConfig { iterations: 30, link: LinkKind::Degenerate, timing: true, ..Default::default() };
        let (a, _) = run_chain(&cfg, &inp, 0, std::io::sink()).unwrap();
        let cfg = RunConfig { sampler: SamplerKind::Baseline, ..cfg };
        let (b, _) = run_chain(&cfg, &inp, 0, std::io::sink()).unwrap();
        assert_eq!(a.columns, b.columns);
        assert_eq!(a.columns.last().unwrap(), "elapsed");
    }

    #[test]
    fn chain_paths() {
        assert_eq!(chain_path(Path::new("out/x.tsv"), 0, 1), PathBuf::from("out/x.tsv"));
        assert_eq!(chain_path(Path::new("out/x.tsv"), 2, 3), PathBuf::from("out/x.chain2.tsv"));
    }

    #[test]
    fn single_config_table_has_no_ratios() {
        let inp = inputs(8, 2, &TipLink::Degenerate, 3);
        let cfg = RunConfig { iterations: 50, link: LinkKind::Degenerate, ..Default::default() };
        let t = benchmark(&[("a".into(), cfg)], &inp).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert!(t.ratios().is_empty());
        assert_eq!(t.warnings.len(), 1);
    }

    #[test]
    fn verify_suite_passes() {
        assert!(verify(1, 10).unwrap().iter().all(|c| c.passed));
    }
}
