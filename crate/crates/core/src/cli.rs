//! Experiment configuration, subcommand dispatch and output artifacts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::constants::{compute_ledger, ConstantLedger, KernelBounds, RecurrentComparability};
use crate::error::{ensure, Error, Result};
use crate::geometry::{
    audit_doubling, audit_scale, AuditReport, DoublingExponents, GrowthExponents, ScaleFunction, VolumeKind,
    VolumeProfile,
};
use crate::hitting_bounds::{hitting_audit, measure_kernel_bounds, EuclideanModel, HittingRegime};
use crate::integral_tests::classify_with_tail;
use crate::rate::{LowerRateCandidate, Mode, RateFunction};
use crate::report::{Cell, Csv};
use crate::simulate::{estimate_q_multi, CrossingEstimate, Detection, EngineOptions, ProcessSpec, SimulationPlan};
use crate::subordination::{envelope_ratio_audit, log_grid, DiffusionKernel, StableSubordinator};

/// Environment variable holding the default output directory.
pub const OUTPUT_DIR_ENV: &str = "ESCAPE_RATE_OUTPUT_DIR";
pub const DEFAULT_OUTPUT_DIR: &str = "escape-rate-output";

/// Experiment file; every section is optional and checked only when a
/// subcommand needs it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub volume: Option<VolumeDecl>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<ScaleDecl>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<RateDecl>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub process: Option<ProcessSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<PlanDecl>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel_bounds: Option<KernelBoundsDecl>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparability: Option<RecurrentComparability>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub engine: Option<EngineDecl>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeDecl {
    /// `power_global`, `two_regime` or `weighted`.
    pub kind: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exponents: Option<DoublingExponents>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleDecl {
    pub beta1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub growth: Option<GrowthExponents>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateDecl {
    /// `power`, `log_power`, `exp_power`, `exp_log_power` or `tabulated`.
    pub family: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<(f64, f64)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_min: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanDecl {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_start: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_paths: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub antithetic: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineDecl {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection: Option<Detection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub substep: Option<f64>,
}

/// `kernel_bounds = "measure"` or `kernel_bounds = { l1 = .., l2 = .. }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KernelBoundsDecl {
    Keyword(String),
    Declared(KernelBounds),
}

fn param(params: &BTreeMap<String, f64>, allowed: &[&str], what: &str) -> Result<Vec<Option<f64>>> {
    if let Some(k) = params.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(Error::Config(format!(
            "unknown {what} parameter '{k}' (allowed: {})",
            allowed.join(", ")
        )));
    }
    Ok(allowed.iter().map(|a| params.get(*a).copied()).collect())
}

fn required(v: Option<f64>, name: &str) -> Result<f64> {
    v.ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))
}

impl VolumeDecl {
    pub fn resolve(&self) -> Result<VolumeProfile> {
        let p = &self.params;
        let profile = match self.kind.as_str() {
            "power_global" => {
                let v = param(p, &["d", "prefactor"], "volume")?;
                VolumeProfile::power_global(required(v[0], "d")?, v[1].unwrap_or(1.0))?
            }
            "two_regime" => {
                let v = param(p, &["alpha1", "alpha2", "prefactor"], "volume")?;
                VolumeProfile::two_regime(required(v[0], "alpha1")?, required(v[1], "alpha2")?, v[2].unwrap_or(1.0))?
            }
            "weighted" => {
                let v = param(p, &["d", "alpha"], "volume")?;
                VolumeProfile::weighted(required(v[0], "d")?, required(v[1], "alpha")?)?
            }
            other => return Err(Error::Config(format!("unknown volume kind '{other}'"))),
        };
        match self.exponents {
            Some(e) => profile.with_exponents(e),
            None => Ok(profile),
        }
    }
}

impl ScaleDecl {
    pub fn resolve(&self) -> Result<ScaleFunction> {
        let s = ScaleFunction::new(self.beta1, self.beta2.unwrap_or(self.beta1))?;
        match self.growth {
            Some(g) => s.with_growth(g),
            None => Ok(s),
        }
    }
}

impl RateDecl {
    pub fn resolve(&self) -> Result<RateFunction> {
        let p = &self.params;
        ensure(self.points.is_none() || self.family == "tabulated", || {
            Error::Config("'points' is only allowed for the tabulated family".into())
        })?;
        let rf = match self.family.as_str() {
            "power" => RateFunction::power(required(param(p, &["q"], "rate")?[0], "q")?)?,
            "log_power" => RateFunction::log_power(required(param(p, &["q"], "rate")?[0], "q")?)?,
            "exp_power" => RateFunction::exp_power(required(param(p, &["p"], "rate")?[0], "p")?)?,
            "exp_log_power" => RateFunction::exp_log_power(required(param(p, &["eps"], "rate")?[0], "eps")?)?,
            "tabulated" => {
                param(p, &[], "rate")?;
                let pts = self.points.clone().ok_or_else(|| Error::Config("tabulated rate needs 'points'".into()))?;
                RateFunction::tabulated(pts)?
            }
            other => return Err(Error::Config(format!("unknown rate family '{other}'"))),
        };
        match self.t_min {
            Some(t) => rf.with_t_min(t),
            None => Ok(rf),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    fn section<'a, T>(v: &'a Option<T>, name: &str) -> Result<&'a T> {
        v.as_ref().ok_or_else(|| Error::Config(format!("missing [{name}] section")))
    }

    pub fn profile(&self) -> Result<VolumeProfile> {
        Self::section(&self.volume, "volume")?.resolve()
    }

    pub fn scale_function(&self) -> Result<ScaleFunction> {
        Self::section(&self.scale, "scale")?.resolve()
    }

    pub fn rate_function(&self) -> Result<RateFunction> {
        Self::section(&self.rate, "rate")?.resolve()
    }

    pub fn process_spec(&self) -> Result<ProcessSpec> {
        let p = *Self::section(&self.process, "process")?;
        p.validate()?;
        Ok(p)
    }

    pub fn engine_options(&self) -> EngineOptions {
        let d = EngineOptions::default();
        let e = self.engine.clone().unwrap_or_default();
        EngineOptions {
            workers: e.workers.unwrap_or(d.workers),
            detection: e.detection.unwrap_or(d.detection),
            substep: e.substep.unwrap_or(d.substep),
        }
    }

    /// Kernel bounds as declared, measured for `[process]`, or `None` when absent.
    pub fn kernel_bounds(&self) -> Result<Option<KernelBounds>> {
        match &self.kernel_bounds {
            None => Ok(None),
            Some(KernelBoundsDecl::Declared(kb)) => KernelBounds::new(kb.l1, kb.l2).map(Some),
            Some(KernelBoundsDecl::Keyword(k)) if k == "measure" => {
                measure_kernel_bounds(&self.process_spec()?).map(Some)
            }
            Some(KernelBoundsDecl::Keyword(k)) => {
                Err(Error::Config(format!("kernel_bounds must be \"measure\" or {{ l1, l2 }}, got \"{k}\"")))
            }
        }
    }

    /// Ledger from `[volume]`, `[scale]`, `kernel_bounds` and `[comparability]`.
    pub fn ledger(&self) -> Result<Option<ConstantLedger>> {
        let Some(kb) = self.kernel_bounds()? else {
            return Ok(None);
        };
        let profile = self.profile()?;
        let scale = self.scale_function()?;
        compute_ledger(&profile.exponents, &scale, &kb, self.comparability.as_ref()).map(Some)
    }

    /// Simulation plan with defaults `t_max = 100 max(starts)`, ratio 1.02,
    /// `10^5` paths and seed 0.
    pub fn simulation_plan(&self, starts: &[f64]) -> Result<SimulationPlan> {
        let p = self.plan.clone().unwrap_or_default();
        let t_start = match p.t_start {
            Some(t) => t,
            None => starts
                .iter()
                .copied()
                .reduce(f64::min)
                .ok_or_else(|| Error::Config("missing plan.t_start".into()))?,
        };
        let t_last = starts.iter().copied().fold(t_start, f64::max);
        let plan = SimulationPlan {
            t_start,
            t_max: p.t_max.unwrap_or(100.0 * t_last),
            grid_ratio: p.grid_ratio.unwrap_or(1.02),
            n_paths: p.n_paths.unwrap_or(100_000),
            seed: p.seed.unwrap_or(0),
            antithetic: p.antithetic.unwrap_or(false),
        };
        plan.validate()?;
        Ok(plan)
    }

    /// Reject a `[scale]` or power `[volume]` that disagrees with the process.
    fn check_process_consistency(&self, spec: &ProcessSpec) -> Result<()> {
        if let Some(s) = &self.scale {
            let s = s.resolve()?;
            ensure(s.beta1 == spec.alpha && s.beta2 == spec.alpha, || {
                Error::Validation(format!(
                    "scale exponents ({}, {}) inconsistent with process alpha = {}",
                    s.beta1, s.beta2, spec.alpha
                ))
            })?;
        }
        if let Some(v) = &self.volume {
            if let VolumeKind::PowerGlobal { d, .. } = v.resolve()?.kind {
                ensure(d == spec.dim as f64, || {
                    Error::Validation(format!("volume exponent {d} inconsistent with process dim = {}", spec.dim))
                })?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(name = "escape-rate", version, about = "Decay rates of bottom-crossing probabilities of symmetric jump processes")]
pub struct Cli {
    /// Experiment file (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `output_dir` and the environment default.
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Constant ledger as text, JSON and CSV.
    Constants,
    /// Tail integral and zero-one verdict for the configured candidate.
    Classify {
        /// `transient` or `critical`; overrides `mode`.
        #[arg(long)]
        mode: Option<Mode>,
    },
    /// Subordinated Gaussian kernel against the heat-kernel envelope.
    KernelVerify {
        #[arg(long)]
        gamma: f64,
        #[arg(long)]
        dim: usize,
        /// CSV of `t,r` pairs; defaults to a 20 x 20 log grid on `[0.01, 100]^2`.
        #[arg(long)]
        grid_file: Option<PathBuf>,
    },
    /// Monte Carlo estimate of the crossing probability after `t_start`.
    Estimate(SimFlags),
    /// Estimates at several start times from one set of paths.
    Sweep {
        #[command(flatten)]
        sim: SimFlags,
        #[arg(long, value_delimiter = ',', required = true)]
        t_list: Vec<f64>,
    },
    /// Random windows checked against the hitting-probability bounds.
    HittingAudit {
        #[arg(long)]
        regime: HittingRegime,
        #[arg(long, default_value_t = 50)]
        n_queries: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20_000)]
        n_paths: usize,
    },
    /// Sampled doubling and scale inequality audits.
    AuditGeometry {
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct SimFlags {
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub t_start: Option<f64>,
    #[arg(long)]
    pub t_max: Option<f64>,
    #[arg(long)]
    pub grid_ratio: Option<f64>,
    #[arg(long)]
    pub n_paths: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub rate_family: Option<String>,
    /// Comma-separated `name=value` pairs, e.g. `q=0.25`.
    #[arg(long)]
    pub rate_params: Option<String>,
    #[arg(long)]
    pub substep: Option<f64>,
    #[arg(long)]
    pub workers: Option<usize>,
}

impl SimFlags {
    fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        if self.alpha.is_some() || self.dim.is_some() {
            let cur = cfg.process;
            let alpha = self.alpha.or(cur.map(|p| p.alpha));
            let dim = self.dim.or(cur.map(|p| p.dim));
            match (alpha, dim) {
                (Some(alpha), Some(dim)) => cfg.process = Some(ProcessSpec { alpha, dim }),
                _ => return Err(Error::Config("both --alpha and --dim are needed without [process]".into())),
            }
        }
        let plan = cfg.plan.get_or_insert_with(PlanDecl::default);
        plan.t_start = self.t_start.or(plan.t_start);
        plan.t_max = self.t_max.or(plan.t_max);
        plan.grid_ratio = self.grid_ratio.or(plan.grid_ratio);
        plan.n_paths = self.n_paths.or(plan.n_paths);
        plan.seed = self.seed.or(plan.seed);
        if self.rate_family.is_some() || self.rate_params.is_some() {
            let params = match &self.rate_params {
                Some(s) => parse_params(s)?,
                None => BTreeMap::new(),
            };
            let rate = match (&self.rate_family, cfg.rate.take()) {
                (Some(f), _) => RateDecl {
                    family: f.clone(),
                    params,
                    points: None,
                    t_min: None,
                },
                (None, Some(mut r)) => {
                    r.params.extend(params);
                    r
                }
                (None, None) => return Err(Error::Config("--rate-params needs --rate-family or [rate]".into())),
            };
            cfg.rate = Some(rate);
        }
        if self.substep.is_some() || self.workers.is_some() {
            let e = cfg.engine.get_or_insert_with(EngineDecl::default);
            e.substep = self.substep.or(e.substep);
            e.workers = self.workers.or(e.workers);
        }
        Ok(())
    }
}

/// Parse `a=1,b=2.5` into a map.
pub fn parse_params(s: &str) -> Result<BTreeMap<String, f64>> {
    s.split(',')
        .filter(|kv| !kv.trim().is_empty())
        .map(|kv| {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected name=value, got '{kv}'")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("not a number in '{kv}'")))?;
            Ok((k.trim().to_string(), v))
        })
        .collect()
}

/// Read `t,r` pairs, skipping blank lines, `#` comments and a header line.
pub fn read_grid(text: &str) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed = match fields.as_slice() {
            [t, r] => t.parse::<f64>().ok().zip(r.parse::<f64>().ok()),
            _ => None,
        };
        match parsed {
            Some(p) => out.push(p),
            None if out.is_empty() && i == 0 => {}
            None => return Err(Error::Config(format!("grid line {}: expected 't,r', got '{line}'", i + 1))),
        }
    }
    ensure(!out.is_empty(), || Error::Config("grid file has no points".into()))?;
    Ok(out)
}

/// Files produced by one subcommand, keyed by file name.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub files: Vec<(String, String)>,
    /// Short human-readable summary for stdout.
    pub summary: String,
}

impl Outcome {
    pub fn write(&self, dir: &Path, subcommand: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io(format!("cannot create {}: {e}", dir.display())))?;
        for (name, body) in &self.files {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::Io(format!("cannot write {}: {e}", p.display())))?;
        }
        let ts = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let meta = json!({
            "subcommand": subcommand,
            "timestamp_unix": ts,
            "version": env!("CARGO_PKG_VERSION"),
        });
        let p = dir.join("metadata.json");
        std::fs::write(&p, pretty(&meta)).map_err(|e| Error::Io(format!("cannot write {}: {e}", p.display())))
    }
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("JSON values always serialize");
    s.push('\n');
    s
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("engine types always serialize")
}

fn summary_json(name: &str, cfg: &ExperimentConfig, ledger: Option<&ConstantLedger>, result: Value) -> String {
    pretty(&json!({
        "subcommand": name,
        "config": to_value(cfg),
        "ledger": ledger.map(to_value),
        "result": result,
    }))
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Constants => "constants",
            Command::Classify { .. } => "classify",
            Command::KernelVerify { .. } => "kernel-verify",
            Command::Estimate(_) => "estimate",
            Command::Sweep { .. } => "sweep",
            Command::HittingAudit { .. } => "hitting-audit",
            Command::AuditGeometry { .. } => "audit-geometry",
        }
    }

    /// File stem of the JSON and CSV artifacts.
    fn stem(&self) -> &'static str {
        match self {
            Command::Constants => "constants",
            Command::Classify { .. } => "classify",
            Command::KernelVerify { .. } => "kernel_verify",
            Command::Estimate(_) => "estimate",
            Command::Sweep { .. } => "sweep",
            Command::HittingAudit { .. } => "hitting_audit",
            Command::AuditGeometry { .. } => "audit_geometry",
        }
    }
}

/// Directory precedence: flag, config `output_dir`, environment, default.
pub fn resolve_output_dir(flag: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone())
        .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
}

/// Run one subcommand; `cfg` is updated in place with flag overrides.
pub fn run(cmd: &Command, cfg: &mut ExperimentConfig) -> Result<Outcome> {
    let stem = cmd.stem();
    let mut files = Vec::new();
    let summary;
    match cmd {
        Command::Constants => {
            let ledger = cfg
                .ledger()?
                .ok_or_else(|| Error::Config("kernel_bounds must be declared or set to \"measure\"".into()))?;
            let mut csv = Csv::new(&["name", "value"]);
            for (n, v) in ledger.entries() {
                csv.row(&[Cell::S(n.into()), Cell::F(v)]);
            }
            summary = ledger.to_text();
            files.push((format!("{stem}.json"), summary_json(cmd.name(), cfg, Some(&ledger), to_value(&ledger))));
            files.push((format!("{stem}.csv"), csv.finish()));
            files.push((format!("{stem}.txt"), summary.clone()));
        }
        Command::Classify { mode } => {
            if let Some(m) = mode {
                cfg.mode = Some(*m);
            }
            let mode = cfg.mode.ok_or_else(|| Error::Config("missing mode (transient or critical)".into()))?;
            let profile = cfg.profile()?;
            let scale = cfg.scale_function()?;
            let cand = LowerRateCandidate::new(cfg.rate_function()?, scale);
            let (tail, verdict) = classify_with_tail(&profile, &scale, &cand, mode, &[0.0])?;
            let ledger = cfg.ledger()?;
            let mut result = to_value(&tail);
            result["verdict"] = to_value(&verdict);
            result["t_min"] = to_value(&cand.t_min());
            let mut csv = Csv::new(&["t_min", "value", "classification", "method", "truncation_error_bound", "verdict"]);
            csv.row(&[
                Cell::F(cand.t_min()),
                Cell::F(tail.value),
                Cell::S(format!("{:?}", tail.classification)),
                Cell::S(format!("{:?}", tail.method)),
                Cell::F(tail.truncation_error_bound),
                Cell::S(format!("{verdict:?}")),
            ]);
            summary = format!("{:?} ({:?}), value {:e}\n", tail.classification, verdict, tail.value);
            files.push((format!("{stem}.json"), summary_json(cmd.name(), cfg, ledger.as_ref(), result)));
            files.push((format!("{stem}.csv"), csv.finish()));
        }
        Command::KernelVerify { gamma, dim, grid_file } => {
            let sub = StableSubordinator::new(*gamma)?;
            ensure(*dim >= 1, || Error::Validation("dimension must be >= 1".into()))?;
            if let Some(s) = &cfg.scale {
                let s = s.resolve()?;
                ensure(s.beta1 == 2.0 * gamma && s.beta2 == 2.0 * gamma, || {
                    Error::Validation(format!(
                        "scale exponents ({}, {}) inconsistent with 2 gamma = {}",
                        s.beta1,
                        s.beta2,
                        2.0 * gamma
                    ))
                })?;
            }
            let grid = match grid_file {
                Some(p) => read_grid(
                    &std::fs::read_to_string(p)
                        .map_err(|e| Error::Io(format!("cannot read grid {}: {e}", p.display())))?,
                )?,
                None => log_grid(20, (0.01, 100.0), (0.01, 100.0)),
            };
            let profile = VolumeProfile::power_global(*dim as f64, 1.0)?;
            let scale = ScaleFunction::single(2.0 * gamma)?;
            let audit = envelope_ratio_audit(&sub, &DiffusionKernel::GaussianEuclidean { d: *dim }, &profile, &scale, &grid)?;
            let mut csv = Csv::new(&["t", "r", "q", "envelope", "ratio"]);
            for row in &audit.rows {
                csv.row(&[Cell::F(row.t), Cell::F(row.r), Cell::F(row.q), Cell::F(row.envelope), Cell::F(row.ratio)]);
            }
            let ledger = cfg.ledger()?;
            let result = json!({
                "gamma": gamma,
                "dim": dim,
                "points": audit.rows.len(),
                "min_ratio": audit.min_ratio,
                "max_ratio": audit.max_ratio,
                "spread": audit.spread,
            });
            summary = format!(
                "ratio in [{:e}, {:e}], spread {:e} over {} points\n",
                audit.min_ratio,
                audit.max_ratio,
                audit.spread,
                audit.rows.len()
            );
            files.push((format!("{stem}.json"), summary_json(cmd.name(), cfg, ledger.as_ref(), result)));
            files.push((format!("{stem}.csv"), csv.finish()));
        }
        Command::Estimate(flags) | Command::Sweep { sim: flags, .. } => {
            flags.apply(cfg)?;
            let spec = cfg.process_spec()?;
            cfg.check_process_consistency(&spec)?;
            let starts = match cmd {
                Command::Sweep { t_list, .. } => t_list.clone(),
                _ => vec![cfg
                    .plan
                    .as_ref()
                    .and_then(|p| p.t_start)
                    .ok_or_else(|| Error::Config("missing plan.t_start".into()))?],
            };
            let plan = cfg.simulation_plan(&starts)?;
            let cand = LowerRateCandidate::new(cfg.rate_function()?, ScaleFunction::single(spec.alpha)?);
            let opts = cfg.engine_options();
            let est = estimate_q_multi(&spec, &cand, &plan, &starts, &opts)?;
            let model = EuclideanModel::new(spec)?;
            let result = match cmd {
                Command::Sweep { .. } => to_value(&est),
                _ => to_value(&est[0]),
            };
            summary = est
                .iter()
                .map(|e| format!("t={:e} q_hat={:e} ci=[{:e}, {:e}] truncation={:e}\n", e.t_start, e.q_hat, e.ci_low, e.ci_high, e.truncation_bound))
                .collect();
            files.push((format!("{stem}.json"), summary_json(cmd.name(), cfg, Some(&model.ledger), result)));
            files.push((format!("{stem}.csv"), estimates_csv(&est)));
        }
        Command::HittingAudit {
            regime,
            n_queries,
            seed,
            n_paths,
        } => {
            let audit = hitting_audit(*regime, *n_queries, *seed, *n_paths, &cfg.engine_options())?;
            let mut csv = Csv::new(&["a", "b", "c", "r", "lower", "mc", "sigma", "upper", "upper_clamped", "pass"]);
            for row in &audit.rows {
                let q = row.query;
                csv.row(&[
                    Cell::F(q.a),
                    Cell::F(q.b),
                    Cell::F(q.c),
                    Cell::F(q.r),
                    Cell::F(row.lower),
                    Cell::F(row.mc),
                    Cell::F(row.sigma),
                    Cell::F(row.upper),
                    Cell::S(row.upper_clamped.to_string()),
                    Cell::S(row.pass.to_string()),
                ]);
            }
            let result = json!({
                "regime": audit.regime,
                "n_queries": n_queries,
                "seed": seed,
                "n_paths": n_paths,
                "passed": audit.passed,
                "total": audit.total,
            });
            summary = format!("{:?}: {}/{} windows within bounds\n", audit.regime, audit.passed, audit.total);
            files.push((format!("{stem}.json"), summary_json(cmd.name(), cfg, Some(&audit.ledger), result)));
            files.push((format!("{stem}.csv"), csv.finish()));
        }
        Command::AuditGeometry { samples, seed } => {
            let mut reports: Vec<(&str, AuditReport)> = Vec::new();
            if cfg.volume.is_some() {
                reports.push(("doubling", audit_doubling(&cfg.profile()?, *samples, *seed)?));
            }
            if cfg.scale.is_some() {
                reports.push(("scale", audit_scale(&cfg.scale_function()?, *samples, *seed)?));
            }
            ensure(!reports.is_empty(), || Error::Config("audit-geometry needs [volume] or [scale]".into()))?;
            let mut csv = Csv::new(&["audit", "passed", "samples", "min_lower_margin", "max_upper_margin", "violations"]);
            let mut text = String::new();
            for (name, r) in &reports {
                let mut push = |label: String, r: &AuditReport| {
                    csv.row(&[
                        Cell::S(label.clone()),
                        Cell::S(r.passed.to_string()),
                        Cell::I(r.samples as i64),
                        Cell::F(r.min_lower_margin),
                        Cell::F(r.max_upper_margin),
                        Cell::I(r.violations as i64),
                    ]);
                    text.push_str(&format!(
                        "{label}: {} ({} samples, {} violations)\n",
                        if r.passed { "PASS" } else { "FAIL" },
                        r.samples,
                        r.violations
                    ));
                };
                push(name.to_string(), r);
                if let Some(inv) = &r.inverse {
                    push(format!("{name}_inverse"), inv);
                }
            }
            let result: serde_json::Map<String, Value> =
                reports.iter().map(|(n, r)| (n.to_string(), to_value(r))).collect();
            let ledger = cfg.ledger()?;
            summary = text;
            files.push((format!("{stem}.json"), summary_json(cmd.name(), cfg, ledger.as_ref(), Value::Object(result))));
            files.push((format!("{stem}.csv"), csv.finish()));
        }
    }
    Ok(Outcome { files, summary })
}

fn estimates_csv(est: &[CrossingEstimate]) -> String {
    let mut csv = Csv::new(&[
        "t_start",
        "t_horizon",
        "q_hat",
        "ci_low",
        "ci_high",
        "truncation_bound",
        "truncation_unbounded",
        "n_paths",
        "n_hits",
    ]);
    for e in est {
        csv.row(&[
            Cell::F(e.t_start),
            Cell::F(e.t_horizon),
            Cell::F(e.q_hat),
            Cell::F(e.ci_low),
            Cell::F(e.ci_high),
            Cell::F(e.truncation_bound),
            Cell::S(e.truncation_unbounded.to_string()),
            Cell::I(e.n_paths as i64),
            Cell::I(e.n_hits as i64),
        ]);
    }
    csv.finish()
}

/// Process exit status: 3 for inconclusive results, 1 for I/O failures and
/// 2 for every other precondition, regime or configuration error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Inconclusive(_) => 3,
        Error::Io(_) => 1,
        _ => 2,
    }
}

/// Load the config, run the subcommand and write its artifacts.
pub fn execute(cli: &Cli) -> Result<Outcome> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let out = run(&cli.command, &mut cfg)?;
    let dir = resolve_output_dir(cli.output_dir.as_deref(), &cfg);
    out.write(&dir, cli.command.name())?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const ALL_ONES: &str = r#"
kernel_bounds = { l1 = 1.0, l2 = 1.0 }
[volume]
kind = "power_global"
params = { d = 2.0 }
[scale]
beta1 = 1.0
growth = { c3 = 1.0, c4 = 1.0, d3 = 1.0, d4 = 1.0 }
"#;

    #[test]
    fn all_ones_ledger() {
        let mut cfg = ExperimentConfig::from_toml(ALL_ONES).unwrap();
        let out = run(&Command::Constants, &mut cfg).unwrap();
        let json: Value = serde_json::from_str(&out.files[0].1).unwrap();
        assert_eq!(json["ledger"]["k1"], 4.0);
        assert_eq!(json["config"]["volume"]["kind"], "power_global");
        assert!(out.files[1].1.starts_with("name,value\n"));
    }

    #[test]
    fn strict_keys() {
        assert!(matches!(ExperimentConfig::from_toml("colour = 1"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml("[plan]\nt_strat = 1.0"), Err(Error::Config(_))));
        let cfg = ExperimentConfig::from_toml("[volume]\nkind = \"power_global\"\nparams = { d = 3.0, e = 1.0 }").unwrap();
        assert!(matches!(cfg.profile(), Err(Error::Config(_))));
        let cfg = ExperimentConfig::from_toml("[rate]\nfamily = \"power\"\nparams = { p = 1.0 }").unwrap();
        assert!(matches!(cfg.rate_function(), Err(Error::Config(_))));
        let cfg = ExperimentConfig::from_toml("kernel_bounds = \"guess\"").unwrap();
        assert!(matches!(cfg.kernel_bounds(), Err(Error::Config(_))));
    }

    #[test]
    fn transient_regime_is_named() {
        let text = r#"
mode = "transient"
[volume]
kind = "power_global"
params = { d = 1.0 }
[scale]
beta1 = 2.0
[rate]
family = "power"
params = { q = 0.5 }
"#;
        let mut cfg = ExperimentConfig::from_toml(text).unwrap();
        match run(&Command::Classify { mode: None }, &mut cfg) {
            Err(e @ Error::Regime(_)) => {
                assert!(e.to_string().contains("d1 > d4"));
                assert_eq!(exit_code(&e), 2);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn flag_overrides_fill_the_config() {
        let mut cfg = ExperimentConfig::default();
        let flags = SimFlags {
            alpha: Some(2.0),
            dim: Some(3),
            t_start: Some(4.0),
            n_paths: Some(10),
            rate_family: Some("power".into()),
            rate_params: Some("q=0.25".into()),
            ..Default::default()
        };
        flags.apply(&mut cfg).unwrap();
        assert_eq!(cfg.process, Some(ProcessSpec { alpha: 2.0, dim: 3 }));
        assert_eq!(cfg.rate_function().unwrap(), RateFunction::power(0.25).unwrap());
        let plan = cfg.simulation_plan(&[4.0]).unwrap();
        assert_eq!((plan.t_start, plan.t_max, plan.n_paths), (4.0, 400.0, 10));
    }

    #[test]
    fn inconsistent_scale_is_rejected() {
        let mut cfg = ExperimentConfig::from_toml("[scale]\nbeta1 = 1.0").unwrap();
        cfg.process = Some(ProcessSpec { alpha: 2.0, dim: 3 });
        assert!(matches!(cfg.check_process_consistency(&ProcessSpec { alpha: 2.0, dim: 3 }), Err(Error::Validation(_))));
        let cmd = Command::KernelVerify { gamma: 0.75, dim: 1, grid_file: None };
        assert!(matches!(run(&cmd, &mut cfg), Err(Error::Validation(_))));
    }

    #[test]
    fn grid_parsing() {
        assert_eq!(read_grid("t,r\n1,2\n# c\n\n3.5, 4\n").unwrap(), vec![(1.0, 2.0), (3.5, 4.0)]);
        assert!(read_grid("1,2\nx,y\n").is_err());
        assert!(read_grid("t,r\n").is_err());
        assert_eq!(parse_params("q=0.25, p = 2").unwrap().get("p"), Some(&2.0));
        assert!(parse_params("q").is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Inconclusive("x".into())), 3);
        assert_eq!(exit_code(&Error::Io("x".into())), 1);
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Domain("x".into())), 2);
    }
}
