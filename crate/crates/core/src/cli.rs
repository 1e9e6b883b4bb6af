//! Experiment configuration and the `run`, `compare` and `kernel` commands.
//!
//! A configuration is a flat `key = value` text file. Presets fill in every
//! field, a config file overrides the preset, command-line flags override
//! both. The resolved configuration is written back as `manifest.txt`, which
//! can be passed to `--config` to repeat a run byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{rank, Matrix, DEFAULT_RANK_TOL};
use crate::metrics::{ecdf, ks_distance, summary, write_ecdf_csv};
use crate::network::{forward, sample_prior_params, Activation, Architecture, DataSet};
use crate::posterior::{sample_posterior_deep, sample_posterior_shallow, RejectionConfig, RejectionStats, ReplicaReuse};
use crate::random::{RngStream, VarianceModel, DEFAULT_POISSON_EPS};
use crate::wide_limit::{
    build_chain, sample_limit_posterior, sample_limit_prior, LimitModel, MixtureWeighting,
    DEFAULT_CHAIN_ATTEMPTS, DEFAULT_LIMIT_MC,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Model1,
    Model2,
    Custom,
}

impl Preset {
    pub fn name(&self) -> &'static str {
        match self {
            Preset::Model1 => "model1",
            Preset::Model2 => "model2",
            Preset::Custom => "custom",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "model1" => Some(Preset::Model1),
            "model2" => Some(Preset::Model2),
            "custom" => Some(Preset::Custom),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    Prior,
    Posterior,
    LimitPrior,
    LimitPosterior,
}

impl SamplerKind {
    pub fn name(&self) -> &'static str {
        match self {
            SamplerKind::Prior => "prior",
            SamplerKind::Posterior => "posterior",
            SamplerKind::LimitPrior => "limit-prior",
            SamplerKind::LimitPosterior => "limit-posterior",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "prior" => Some(SamplerKind::Prior),
            "posterior" => Some(SamplerKind::Posterior),
            "limit-prior" => Some(SamplerKind::LimitPrior),
            "limit-posterior" => Some(SamplerKind::LimitPosterior),
            _ => None,
        }
    }

    pub fn is_limit(&self) -> bool {
        matches!(self, SamplerKind::LimitPrior | SamplerKind::LimitPosterior)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PosteriorMethod {
    /// Closed form for one hidden layer, layered rejection otherwise.
    Auto,
    Shallow,
    Deep,
}

impl PosteriorMethod {
    pub fn name(&self) -> &'static str {
        match self {
            PosteriorMethod::Auto => "auto",
            PosteriorMethod::Shallow => "shallow",
            PosteriorMethod::Deep => "deep",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "auto" => Some(PosteriorMethod::Auto),
            "shallow" => Some(PosteriorMethod::Shallow),
            "deep" => Some(PosteriorMethod::Deep),
            _ => None,
        }
    }
}

/// Fully resolved experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub preset: Preset,
    /// `n₀, …, n_{L+1}`.
    pub widths: Vec<usize>,
    pub c_b: f64,
    pub c_w: f64,
    pub activation: String,
    /// One entry per hidden layer.
    pub variance_models: Vec<VarianceModel>,
    /// `None` uses the preset inputs and targets.
    pub data: Option<PathBuf>,
    pub sampler: SamplerKind,
    pub method: PosteriorMethod,
    pub weighting: MixtureWeighting,
    pub samples: usize,
    pub seed: u64,
    pub mc_n: usize,
    pub delta: f64,
    pub max_proposals: u64,
    pub replica_reuse: ReplicaReuse,
    pub limit_mc: usize,
    pub poisson_eps: f64,
    pub max_chain_attempts: u64,
    pub out: PathBuf,
}

const KEYS: &[&str] = &[
    "preset",
    "widths",
    "depth",
    "width",
    "c_b",
    "c_w",
    "activation",
    "variance_models",
    "data",
    "sampler",
    "method",
    "weighting",
    "samples",
    "seed",
    "mc_n",
    "delta",
    "max_proposals",
    "replica_reuse",
    "limit_mc",
    "poisson_eps",
    "max_chain_attempts",
    "out",
    "version",
];

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        let (widths, models) = match preset {
            Preset::Model1 => (vec![4, 4, 4, 1], vec![VarianceModel::Model1; 2]),
            Preset::Model2 => (vec![4, 2, 1], vec![VarianceModel::Model2]),
            Preset::Custom => (vec![1, 1, 1], vec![VarianceModel::Fixed]),
        };
        let rc = RejectionConfig::default();
        Self {
            preset,
            widths,
            c_b: 1.0,
            c_w: 1.0,
            activation: "relu".into(),
            variance_models: models,
            data: None,
            sampler: SamplerKind::Posterior,
            method: PosteriorMethod::Auto,
            weighting: rc.weighting,
            samples: 2000,
            seed: 1,
            mc_n: rc.n_replicas,
            delta: rc.delta,
            max_proposals: rc.max_proposals,
            replica_reuse: rc.replica_reuse,
            limit_mc: DEFAULT_LIMIT_MC,
            poisson_eps: DEFAULT_POISSON_EPS,
            max_chain_attempts: DEFAULT_CHAIN_ATTEMPTS,
            out: PathBuf::from("out"),
        }
    }

    pub fn depth(&self) -> usize {
        self.widths.len() - 2
    }

    /// Applies `key = value` settings in order. `preset` resets every field,
    /// so it should come first.
    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        let mut depth: Option<usize> = None;
        let mut width: Option<usize> = None;
        for (key, value) in pairs {
            let v = value.trim();
            match key.as_str() {
                "preset" => {
                    let p = Preset::parse(v).ok_or_else(|| bad(key, v))?;
                    *self = Self::preset(p);
                }
                "widths" => {
                    self.widths = v
                        .split(',')
                        .map(|s| s.trim().parse::<usize>().map_err(|_| bad(key, v)))
                        .collect::<Result<_>>()?;
                    if self.widths.len() < 3 {
                        return Err(Error::invalid(key, "need at least three widths"));
                    }
                    let depth = self.widths.len() - 2;
                    self.resize_models(depth);
                }
                "depth" => depth = Some(parse(key, v)?),
                "width" => width = Some(parse(key, v)?),
                "c_b" => self.c_b = parse(key, v)?,
                "c_w" => self.c_w = parse(key, v)?,
                "activation" => {
                    Activation::parse(v).ok_or_else(|| bad(key, v))?;
                    self.activation = v.to_string();
                }
                "variance_models" => {
                    self.variance_models = v
                        .split(',')
                        .map(|s| VarianceModel::parse(s.trim()).ok_or_else(|| bad(key, v)))
                        .collect::<Result<_>>()?;
                }
                "data" => self.data = if v.is_empty() || v == "preset" { None } else { Some(PathBuf::from(v)) },
                "sampler" => self.sampler = SamplerKind::parse(v).ok_or_else(|| bad(key, v))?,
                "method" => self.method = PosteriorMethod::parse(v).ok_or_else(|| bad(key, v))?,
                "weighting" => self.weighting = MixtureWeighting::parse(v).ok_or_else(|| bad(key, v))?,
                "samples" => self.samples = parse(key, v)?,
                "seed" => self.seed = parse(key, v)?,
                "mc_n" => self.mc_n = parse(key, v)?,
                "delta" => self.delta = parse(key, v)?,
                "max_proposals" => self.max_proposals = parse(key, v)?,
                "replica_reuse" => self.replica_reuse = ReplicaReuse::parse(v).ok_or_else(|| bad(key, v))?,
                "limit_mc" => self.limit_mc = parse(key, v)?,
                "poisson_eps" => self.poisson_eps = parse(key, v)?,
                "max_chain_attempts" => self.max_chain_attempts = parse(key, v)?,
                "out" => self.out = PathBuf::from(v),
                "version" => {}
                other => return Err(Error::invalid(other, "unknown key")),
            }
        }
        if let Some(depth) = depth {
            if depth == 0 {
                return Err(Error::invalid("depth", "must be >= 1"));
            }
            let hidden = width.unwrap_or(self.widths[1]);
            let (n0, n_out) = (self.widths[0], *self.widths.last().unwrap());
            self.widths = std::iter::once(n0)
                .chain(std::iter::repeat(hidden).take(depth))
                .chain(std::iter::once(n_out))
                .collect();
            self.resize_models(depth);
        }
        if let Some(width) = width {
            let l = self.widths.len();
            for w in &mut self.widths[1..l - 1] {
                *w = width;
            }
        }
        Ok(())
    }

    fn resize_models(&mut self, depth: usize) {
        let fill = self.variance_models.last().copied().unwrap_or_default();
        self.variance_models.resize(depth, fill);
    }

    /// Parses a flat `key = value` file; `#` starts a comment.
    pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid("config", format!("line {}: expected key = value", no + 1)))?;
            let k = k.trim().to_string();
            if !KEYS.contains(&k.as_str()) {
                return Err(Error::invalid(k, "unknown key"));
            }
            out.push((k, v.trim().to_string()));
        }
        // a preset line resets everything, so apply it first
        out.sort_by_key(|(k, _)| k != "preset");
        Ok(out)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::preset(Preset::Model1);
        cfg.apply(&Self::parse_pairs(text)?)?;
        Ok(cfg)
    }

    /// Manifest text: every field except the output directory, one per line,
    /// in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let join = |v: Vec<String>| v.join(",");
        let _ = writeln!(s, "preset = {}", self.preset.name());
        let _ = writeln!(s, "widths = {}", join(self.widths.iter().map(|w| w.to_string()).collect()));
        let _ = writeln!(s, "c_b = {:?}", self.c_b);
        let _ = writeln!(s, "c_w = {:?}", self.c_w);
        let _ = writeln!(s, "activation = {}", self.activation);
        let _ = writeln!(
            s,
            "variance_models = {}",
            join(self.variance_models.iter().map(|m| m.name().to_string()).collect())
        );
        let data = self.data.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "preset".into());
        let _ = writeln!(s, "data = {data}");
        let _ = writeln!(s, "sampler = {}", self.sampler.name());
        let _ = writeln!(s, "method = {}", self.method.name());
        let _ = writeln!(s, "weighting = {}", self.weighting.name());
        let _ = writeln!(s, "samples = {}", self.samples);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "mc_n = {}", self.mc_n);
        let _ = writeln!(s, "delta = {:?}", self.delta);
        let _ = writeln!(s, "max_proposals = {}", self.max_proposals);
        let _ = writeln!(s, "replica_reuse = {}", self.replica_reuse.name());
        let _ = writeln!(s, "limit_mc = {}", self.limit_mc);
        let _ = writeln!(s, "poisson_eps = {:?}", self.poisson_eps);
        let _ = writeln!(s, "max_chain_attempts = {}", self.max_chain_attempts);
        let _ = writeln!(s, "version = {}", env!("CARGO_PKG_VERSION"));
        s
    }

    pub fn architecture(&self) -> Result<Architecture> {
        let act = Activation::parse(&self.activation).ok_or_else(|| bad("activation", &self.activation))?;
        Architecture::new(self.widths.clone(), self.c_b, self.c_w, act, self.variance_models.clone())
    }

    pub fn rejection(&self) -> Result<RejectionConfig> {
        RejectionConfig {
            n_replicas: self.mc_n,
            delta: self.delta,
            max_proposals: self.max_proposals,
            replica_reuse: self.replica_reuse,
            weighting: self.weighting,
        }
        .validated()
    }

    pub fn limit_model(&self, arch: &Architecture) -> Result<LimitModel> {
        if !(self.poisson_eps > 0.0) {
            return Err(Error::invalid("poisson_eps", "must be > 0"));
        }
        LimitModel::from_architecture(arch, self.limit_mc, self.poisson_eps)
    }

    /// Inputs and targets: the preset data or the CSV at `data`.
    pub fn dataset(&self) -> Result<DataSet> {
        match &self.data {
            Some(path) => DataSet::from_csv(path),
            None => match self.preset {
                Preset::Model1 | Preset::Model2 => preset_dataset(),
                Preset::Custom => Err(Error::invalid("data", "the custom preset needs a data file")),
            },
        }
    }

    /// Checks every field and the data against the architecture.
    pub fn validate(&self) -> Result<(Architecture, DataSet)> {
        let arch = self.architecture()?;
        let data = self.dataset()?;
        if data.x.nrows() != arch.n_in() {
            return Err(Error::invalid(
                "widths",
                format!("n_0 = {} but the data has {} input columns", arch.n_in(), data.x.nrows()),
            ));
        }
        if data.y.nrows() != arch.n_out() {
            return Err(Error::invalid(
                "widths",
                format!("n_out = {} but the data has {} target columns", arch.n_out(), data.y.nrows()),
            ));
        }
        if self.samples == 0 {
            return Err(Error::invalid("samples", "must be >= 1"));
        }
        self.rejection()?;
        if self.sampler.is_limit() {
            self.limit_model(&arch)?;
            if rank(&data.x, DEFAULT_RANK_TOL) != data.len() {
                return Err(Error::invalid("data", "limit sampling needs linearly independent inputs"));
            }
        }
        if self.sampler == SamplerKind::Posterior && self.method == PosteriorMethod::Shallow && arch.depth() != 1 {
            return Err(Error::invalid("method", "shallow sampling needs depth 1"));
        }
        Ok((arch, data))
    }
}

fn bad(key: &str, value: &str) -> Error {
    Error::invalid(key, format!("unrecognized value '{value}'"))
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value))
}

/// `x(i) = e_i ∈ ℝ⁴` for `i = 1, 2, 3` and `y(i) = ‖x(i)‖²/10 + 5`.
pub fn preset_dataset() -> Result<DataSet> {
    let x = Matrix::identity(4, 3);
    let y = Matrix::from_fn(1, 3, |_, i| 0.1 * x.column(i).norm_squared() + 5.0);
    DataSet::new(x, y)
}

/// Outputs of a batch: `samples[s]` is the `n_out × d` draw of sample `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub samples: Vec<Matrix>,
    pub stats: RejectionStats,
}

/// Draws sample `index` on stream `index` of the seed.
pub fn draw_one(
    cfg: &ExperimentConfig,
    arch: &Architecture,
    data: &DataSet,
    index: usize,
) -> Result<(Matrix, RejectionStats)> {
    let mut rng = RngStream::new(cfg.seed, index as u64);
    match cfg.sampler {
        SamplerKind::Prior => {
            let p = sample_prior_params(&mut rng, arch);
            let z = forward(&p, &data.x, arch.activation())?;
            Ok((z.last().unwrap().clone(), RejectionStats::default()))
        }
        SamplerKind::Posterior => {
            let shallow = match cfg.method {
                PosteriorMethod::Auto => arch.depth() == 1,
                PosteriorMethod::Shallow => true,
                PosteriorMethod::Deep => false,
            };
            if shallow {
                sample_posterior_shallow(&mut rng, arch, &data.x, &data.y, cfg.weighting, cfg.max_proposals)
            } else {
                sample_posterior_deep(&mut rng, arch, &data.x, &data.y, &cfg.rejection()?)
            }
        }
        SamplerKind::LimitPrior => {
            let model = cfg.limit_model(arch)?;
            Ok((sample_limit_prior(&mut rng, &data.x, &model)?, RejectionStats::default()))
        }
        SamplerKind::LimitPosterior => {
            let model = cfg.limit_model(arch)?;
            let draw = sample_limit_posterior(&mut rng, &data.x, &data.y, &model, cfg.weighting, cfg.max_chain_attempts)?;
            let mut stats = RejectionStats::default();
            // chain realizations are reported as layer 0
            stats.layers.push(crate::posterior::LayerStats {
                proposals: draw.attempts,
                acceptances: 1,
                ..Default::default()
            });
            Ok((draw.sample, stats))
        }
    }
}

pub fn thread_pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::invalid("threads", "must be >= 1"));
        }
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::invalid("threads", e.to_string()))
}

/// Runs the whole batch in parallel. Results are ordered by sample index and
/// do not depend on the number of threads.
pub fn generate(cfg: &ExperimentConfig, threads: Option<usize>) -> Result<Batch> {
    let (arch, data) = cfg.validate()?;
    let pool = thread_pool(threads)?;
    let results: Vec<Result<(Matrix, RejectionStats)>> =
        pool.install(|| (0..cfg.samples).into_par_iter().map(|i| draw_one(cfg, &arch, &data, i)).collect());
    let mut samples = Vec::with_capacity(cfg.samples);
    let mut stats = RejectionStats::default();
    for r in results {
        let (z, s) = r?;
        samples.push(z);
        stats.merge(&s);
    }
    Ok(Batch { samples, stats })
}

fn fmt_f(v: f64) -> String {
    format!("{v:?}")
}

pub fn write_samples_csv(path: &Path, samples: &[Matrix]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["sample_index", "output_row", "input_index", "value"])?;
    for (s, m) in samples.iter().enumerate() {
        for r in 0..m.nrows() {
            for i in 0..m.ncols() {
                w.write_record([s.to_string(), (r + 1).to_string(), (i + 1).to_string(), fmt_f(m[(r, i)])])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Marginals of a samples file keyed by `(output_row, input_index)`.
pub fn read_samples_csv(path: &Path) -> Result<BTreeMap<(usize, usize), Vec<f64>>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let expect = ["sample_index", "output_row", "input_index", "value"];
    if headers.iter().collect::<Vec<_>>() != expect {
        return Err(Error::invalid("samples", format!("{}: unexpected header", path.display())));
    }
    let mut out: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for rec in r.records() {
        let rec = rec?;
        let field = |k: usize| rec.get(k).unwrap_or("").trim().to_string();
        let row: usize = parse("output_row", &field(1))?;
        let input: usize = parse("input_index", &field(2))?;
        let value: f64 = parse("value", &field(3))?;
        out.entry((row, input)).or_default().push(value);
    }
    if out.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(out)
}

fn write_stats_csv(path: &Path, stats: &RejectionStats, sampler: SamplerKind) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["layer", "proposals", "acceptances", "acceptance_rate", "mean_acceptance_prob"])?;
    for (k, s) in stats.layers.iter().enumerate() {
        let layer = if sampler == SamplerKind::LimitPosterior { k } else { k + 1 };
        if s.proposals == 0 {
            continue;
        }
        w.write_record([
            layer.to_string(),
            s.proposals.to_string(),
            s.acceptances.to_string(),
            fmt_f(s.acceptance_rate()),
            fmt_f(s.mean_acceptance_prob()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `run`: samples a batch and writes `samples.csv`, `stats.csv`, one
/// `ecdf_r{row}_i{input}.csv` per marginal and `manifest.txt` into `out`.
pub fn run(cfg: &ExperimentConfig, threads: Option<usize>) -> Result<Batch> {
    let start = std::time::Instant::now();
    let batch = generate(cfg, threads)?;
    fs::create_dir_all(&cfg.out)?;
    write_samples_csv(&cfg.out.join("samples.csv"), &batch.samples)?;
    write_stats_csv(&cfg.out.join("stats.csv"), &batch.stats, cfg.sampler)?;
    let (rows, cols) = batch.samples[0].shape();
    for r in 0..rows {
        for i in 0..cols {
            let values: Vec<f64> = batch.samples.iter().map(|m| m[(r, i)]).collect();
            write_ecdf_csv(&cfg.out.join(format!("ecdf_r{}_i{}.csv", r + 1, i + 1)), &ecdf(&values)?)?;
        }
    }
    fs::write(cfg.out.join("manifest.txt"), cfg.to_text())?;
    eprintln!(
        "{} samples ({}) written to {} in {:.2?}",
        cfg.samples,
        cfg.sampler.name(),
        cfg.out.display(),
        start.elapsed()
    );
    Ok(batch)
}

fn samples_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("samples.csv")
    } else {
        p.to_path_buf()
    }
}

/// One row per marginal of the KS report.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub output_row: usize,
    pub input_index: usize,
    pub ks: f64,
    pub n_a: usize,
    pub n_b: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    pub var_a: f64,
    pub var_b: f64,
    pub median_a: f64,
    pub median_b: f64,
}

/// `compare`: per-marginal KS distances between two sample files (or run
/// directories), written to `report`.
pub fn compare(a: &Path, b: &Path, report: &Path) -> Result<Vec<CompareRow>> {
    let ma = read_samples_csv(&samples_path(a))?;
    let mb = read_samples_csv(&samples_path(b))?;
    if ma.keys().collect::<Vec<_>>() != mb.keys().collect::<Vec<_>>() {
        return Err(Error::invalid("compare", "batches have different output dimensions"));
    }
    let mut rows = Vec::new();
    for ((r, i), va) in &ma {
        let vb = &mb[&(*r, *i)];
        let (sa, sb) = (summary(va)?, summary(vb)?);
        rows.push(CompareRow {
            output_row: *r,
            input_index: *i,
            ks: ks_distance(va, vb)?,
            n_a: va.len(),
            n_b: vb.len(),
            mean_a: sa.mean,
            mean_b: sb.mean,
            var_a: sa.variance,
            var_b: sb.variance,
            median_a: sa.quantiles[4],
            median_b: sb.quantiles[4],
        });
    }
    if let Some(parent) = report.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut w = csv::Writer::from_path(report)?;
    w.write_record([
        "output_row", "input_index", "ks", "n_a", "n_b", "mean_a", "mean_b", "var_a", "var_b", "median_a", "median_b",
    ])?;
    for c in &rows {
        w.write_record([
            c.output_row.to_string(),
            c.input_index.to_string(),
            fmt_f(c.ks),
            c.n_a.to_string(),
            c.n_b.to_string(),
            fmt_f(c.mean_a),
            fmt_f(c.mean_b),
            fmt_f(c.var_a),
            fmt_f(c.var_b),
            fmt_f(c.median_a),
            fmt_f(c.median_b),
        ])?;
    }
    w.flush()?;
    Ok(rows)
}

/// `kernel`: one realization of the kernel chain (stream 0 of the seed),
/// written as `kernel.csv` with columns `layer, i, j, value, mc_stderr`.
pub fn kernel(cfg: &ExperimentConfig) -> Result<crate::wide_limit::KernelChain> {
    let arch = cfg.architecture()?;
    let data = cfg.dataset()?;
    if data.x.nrows() != arch.n_in() {
        return Err(Error::invalid("widths", "n_0 does not match the data"));
    }
    let model = cfg.limit_model(&arch)?;
    let chain = build_chain(&mut RngStream::new(cfg.seed, 0), &data.x, &model)?;
    fs::create_dir_all(&cfg.out)?;
    let mut w = csv::Writer::from_path(cfg.out.join("kernel.csv"))?;
    w.write_record(["layer", "i", "j", "value", "mc_stderr"])?;
    for (k, (m, se)) in chain.kernels.iter().zip(&chain.stderr).enumerate() {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                w.write_record([
                    (k + 1).to_string(),
                    (i + 1).to_string(),
                    (j + 1).to_string(),
                    fmt_f(m[(i, j)]),
                    fmt_f(se[(i, j)]),
                ])?;
            }
        }
    }
    w.flush()?;
    fs::write(cfg.out.join("manifest.txt"), cfg.to_text())?;
    Ok(chain)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model1_preset_fields() {
        let c = ExperimentConfig::preset(Preset::Model1);
        assert_eq!(c.widths, vec![4, 4, 4, 1]);
        assert_eq!((c.c_b, c.c_w), (1.0, 1.0));
        assert_eq!(c.depth(), 2);
        assert_eq!(c.activation, "relu");
        assert_eq!(c.variance_models, vec![VarianceModel::Model1; 2]);
        assert_eq!((c.mc_n, c.delta), (100, 0.99));
        let d = preset_dataset().unwrap();
        assert_eq!(d.x, Matrix::identity(4, 3));
        assert_eq!(d.y, Matrix::from_element(1, 3, 5.1));
    }

    #[test]
    fn model2_preset_fields() {
        let c = ExperimentConfig::preset(Preset::Model2);
        assert_eq!(c.widths, vec![4, 2, 1]);
        assert_eq!((c.c_b, c.c_w), (1.0, 1.0));
        assert_eq!(c.variance_models, vec![VarianceModel::Model2]);
    }

    #[test]
    fn width_and_depth_overrides() {
        let mut c = ExperimentConfig::preset(Preset::Model1);
        c.apply(&[("width".into(), "16".into())]).unwrap();
        assert_eq!(c.widths, vec![4, 16, 16, 1]);
        c.apply(&[("depth".into(), "3".into())]).unwrap();
        assert_eq!(c.widths, vec![4, 16, 16, 16, 1]);
        assert_eq!(c.variance_models.len(), 3);
        assert!(c.apply(&[("depth".into(), "0".into())]).is_err());
        assert!(c.apply(&[("nonsense".into(), "1".into())]).is_err());
        assert!(c.apply(&[("sampler".into(), "mcmc".into())]).is_err());
    }

    #[test]
    fn manifest_roundtrip() {
        let mut c = ExperimentConfig::preset(Preset::Model2);
        c.apply(&[
            ("width".into(), "8".into()),
            ("seed".into(), "99".into()),
            ("delta".into(), "0.999".into()),
            ("weighting".into(), "prior".into()),
        ])
        .unwrap();
        let text = c.to_text();
        assert_eq!(ExperimentConfig::from_text(&text).unwrap(), c);
        assert_eq!(ExperimentConfig::from_text(&text).unwrap().to_text(), text);
    }

    #[test]
    fn validation_messages_name_the_field() {
        let mut c = ExperimentConfig::preset(Preset::Model1);
        c.delta = 1.5;
        match c.validate() {
            Err(Error::Invalid { field, .. }) => assert_eq!(field, "delta"),
            other => panic!("{other:?}"),
        }
        let c = ExperimentConfig::preset(Preset::Custom);
        assert!(matches!(c.validate(), Err(Error::Invalid { field, .. }) if field == "data"));
    }
}
