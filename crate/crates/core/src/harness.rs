//! Config-driven experiment runner: parses a TOML experiment description,
//! runs the seeded replications and writes CSV and JSON artifacts.
//!
//! Every output file is written to a temporary name and renamed into place.
//! CSV and `summary.json` depend only on the config and seed; wall-clock and
//! thread information goes to `runtime.json`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::diffusion::{pairing_experiment, DriftChoice, ModelConfig, PairingConfig};
use crate::error::{Error, Result};
use crate::gig::{gig_experiment, GigBounds, GigExperimentConfig};
use crate::limitfield::{simulate_limit, GammaSource, LimitFieldSpec, LinearPenalty, PowerPenalty, PreMap};
use crate::localsets::{build_finite_t, hausdorff_gap, is_cone, LocalSet, RateSchedule, ThetaSpace};
use crate::mixedmodel::{selection_experiment, CovariateLaw, LmmBoxes, LmmTruth, PenaltyGrid, SelectionConfig};
use crate::seed::rng_for;
use crate::stats::{column, zero_fraction, RepFailure};

/// Environment variable that overrides the configured thread count.
pub const THREADS_ENV: &str = "BOUNDLIM_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub reps: usize,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    pub experiment: Experiment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Experiment {
    Gig(GigSection),
    DiffusionPairing(PairingSection),
    LmmSelection(SelectionSection),
    LimitOnly(LimitOnlySection),
    SetGeometry(GeometrySection),
}

impl Experiment {
    pub fn kind(&self) -> &'static str {
        match self {
            Experiment::Gig(_) => "gig",
            Experiment::DiffusionPairing(_) => "diffusion-pairing",
            Experiment::LmmSelection(_) => "lmm-selection",
            Experiment::LimitOnly(_) => "limit-only",
            Experiment::SetGeometry(_) => "set-geometry",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GigSection {
    pub lambda_star: f64,
    pub gamma_star: f64,
    #[serde(default)]
    pub bounds: GigBounds,
    pub n_grid: Vec<usize>,
    #[serde(default = "gig_limit_draws")]
    pub limit_draws: usize,
}

fn gig_limit_draws() -> usize {
    10_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairingSection {
    pub model: ModelConfig,
    pub n_grid: Vec<usize>,
    #[serde(default = "euler_refine")]
    pub euler_refine: usize,
    #[serde(default = "pairing_limit_draws")]
    pub limit_draws: usize,
    #[serde(default = "least_squares")]
    pub drift: DriftChoice,
}

fn euler_refine() -> usize {
    10
}

fn pairing_limit_draws() -> usize {
    2000
}

fn least_squares() -> DriftChoice {
    DriftChoice::LeastSquares
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionSection {
    #[serde(default)]
    pub truth: LmmTruth,
    pub penalty: PenaltyGrid,
    pub n_grid: Vec<usize>,
    #[serde(default)]
    pub covariates: CovariateLaw,
    #[serde(default)]
    pub boxes: LmmBoxes,
    #[serde(default = "gamma_mc")]
    pub gamma_mc: usize,
    #[serde(default = "pairing_limit_draws")]
    pub limit_draws: usize,
}

fn gamma_mc() -> usize {
    200_000
}

/// A user-supplied limit field; `reps` is the number of draws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitOnlySection {
    pub dim: usize,
    #[serde(default = "identity_map")]
    pub pre_map: PreMap,
    /// rows of a fixed Γ
    pub gamma: Vec<Vec<f64>>,
    #[serde(default)]
    pub linear: Vec<LinearPenalty>,
    #[serde(default)]
    pub power: Vec<PowerPenalty>,
    pub domain: LocalSet,
}

fn identity_map() -> PreMap {
    PreMap::Identity
}

/// Directed gaps from U_T to a limit set U (and back) along a T grid;
/// `reps` is the number of sample points per gap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySection {
    pub theta_star: Vec<f64>,
    pub rate: RateSchedule,
    pub space: ThetaSpace,
    pub limit: LocalSet,
    pub t_grid: Vec<f64>,
    pub radii: Vec<f64>,
}

fn cfg_err(path: &str, msg: impl Into<String>) -> Error {
    Error::config(path, msg)
}

fn check_grid(path: &str, grid: &[usize]) -> Result<()> {
    if grid.is_empty() {
        return Err(cfg_err(path, "must not be empty"));
    }
    if grid.iter().any(|&n| n < 10) {
        return Err(cfg_err(path, "sample sizes must be at least 10"));
    }
    Ok(())
}

fn nested(path: &str, e: Error) -> Error {
    match e {
        Error::Config { .. } => e,
        other => cfg_err(path, other.to_string()),
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| cfg_err("<config>", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(cfg_err("reps", "must be at least 1"));
        }
        if self.threads == Some(0) {
            return Err(cfg_err("threads", "must be at least 1"));
        }
        match &self.experiment {
            Experiment::Gig(g) => {
                check_grid("experiment.n_grid", &g.n_grid)?;
                if !(g.gamma_star > 0.0) {
                    return Err(cfg_err("experiment.gamma_star", "must be positive"));
                }
                g.bounds.validate().map_err(|e| nested("experiment.bounds", e))?;
                let b = &g.bounds;
                if !(g.lambda_star >= b.lambda_lo && g.lambda_star <= b.lambda_hi) {
                    return Err(cfg_err("experiment.lambda_star", "outside the λ bounds"));
                }
                if !(g.gamma_star >= b.gamma_lo && g.gamma_star <= b.gamma_hi) {
                    return Err(cfg_err("experiment.gamma_star", "outside the γ bounds"));
                }
                if g.limit_draws == 0 {
                    return Err(cfg_err("experiment.limit_draws", "must be at least 1"));
                }
            }
            Experiment::DiffusionPairing(p) => {
                check_grid("experiment.n_grid", &p.n_grid)?;
                p.model.build().map_err(|e| nested("experiment.model", e))?;
                if p.euler_refine == 0 {
                    return Err(cfg_err("experiment.euler_refine", "must be at least 1"));
                }
                if p.limit_draws == 0 {
                    return Err(cfg_err("experiment.limit_draws", "must be at least 1"));
                }
            }
            Experiment::LmmSelection(s) => {
                check_grid("experiment.n_grid", &s.n_grid)?;
                s.truth.theta().map_err(|e| nested("experiment.truth", e))?;
                if !(s.truth.d11 > 0.0) {
                    return Err(cfg_err("experiment.truth.d11", "must be positive"));
                }
                let cfg = self.selection_config(s);
                if cfg.penalties().is_empty() {
                    return Err(cfg_err("experiment.penalty", "q_grid and r_grid must be non-empty"));
                }
                for p in cfg.penalties() {
                    p.validate().map_err(|e| nested("experiment.penalty", e))?;
                }
                s.boxes.validate().map_err(|e| nested("experiment.boxes", e))?;
                if s.gamma_mc < 10 || s.limit_draws == 0 {
                    return Err(cfg_err(
                        "experiment.gamma_mc",
                        "gamma_mc ≥ 10 and limit_draws ≥ 1 required",
                    ));
                }
            }
            Experiment::LimitOnly(l) => {
                limit_spec(l)?;
            }
            Experiment::SetGeometry(g) => {
                if g.t_grid.is_empty() || g.t_grid.iter().any(|t| !(*t >= 1.0)) {
                    return Err(cfg_err(
                        "experiment.t_grid",
                        "values must be ≥ 1 and the grid non-empty",
                    ));
                }
                if g.radii.is_empty() || g.radii.iter().any(|r| !(*r > 0.0)) {
                    return Err(cfg_err(
                        "experiment.radii",
                        "values must be positive and the list non-empty",
                    ));
                }
                if !g.limit.is_limit_kind() {
                    return Err(cfg_err("experiment.limit", "must be a limit set"));
                }
                g.limit.validate().map_err(|e| nested("experiment.limit", e))?;
                build_finite_t(&g.theta_star, &g.rate, g.t_grid[0], &g.space)
                    .map_err(|e| nested("experiment.space", e))?;
                if g.limit.dim() != g.theta_star.len() {
                    return Err(cfg_err("experiment.limit", "dimension differs from theta_star"));
                }
            }
        }
        Ok(())
    }

    fn selection_config(&self, s: &SelectionSection) -> SelectionConfig {
        SelectionConfig {
            truth: s.truth,
            penalty: s.penalty.clone(),
            n_grid: s.n_grid.clone(),
            reps: self.reps,
            seed: self.seed,
            covariates: s.covariates,
            boxes: s.boxes,
            gamma_mc: s.gamma_mc,
            limit_draws: s.limit_draws,
        }
    }
}

fn limit_spec(l: &LimitOnlySection) -> Result<LimitFieldSpec> {
    let p = l.dim;
    if l.gamma.len() != p || l.gamma.iter().any(|r| r.len() != p) {
        return Err(cfg_err("experiment.gamma", format!("must be a {p}×{p} matrix")));
    }
    let g = DMatrix::from_fn(p, p, |i, j| l.gamma[i][j]);
    LimitFieldSpec::new(
        p,
        l.pre_map.clone(),
        GammaSource::Fixed(g),
        l.linear.clone(),
        l.power.clone(),
        l.domain.clone(),
    )
    .map_err(|e| nested("experiment", e))
}

/// Thread count: explicit request, then the environment variable, then the
/// config, then rayon's default.
pub fn resolve_threads(requested: Option<usize>, config: Option<usize>) -> Result<Option<usize>> {
    if let Some(t) = requested {
        if t == 0 {
            return Err(cfg_err("threads", "must be at least 1"));
        }
        return Ok(Some(t));
    }
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let t: usize = v
            .trim()
            .parse()
            .map_err(|_| cfg_err(THREADS_ENV, format!("not a thread count: {v:?}")))?;
        if t == 0 {
            return Err(cfg_err(THREADS_ENV, "must be at least 1"));
        }
        return Ok(Some(t));
    }
    Ok(config)
}

/// A CSV table held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(name: &str, header: &[&str]) -> Self {
        Self {
            name: name.into(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }
}

/// Shortest round-trip decimal form; NaN becomes NA.
pub fn fmt_num(x: f64) -> String {
    if x.is_nan() {
        "NA".into()
    } else {
        format!("{x}")
    }
}

fn num_json(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        Value::Null
    }
}

/// A failed replication together with the cell it belonged to.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellFailure {
    pub cell: String,
    pub rep: usize,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct McSummary {
    pub kind: String,
    pub seed: u64,
    pub reps: usize,
    pub tables: Vec<Table>,
    /// deterministic statistics written to summary.json
    pub stats: Value,
    pub failures: Vec<CellFailure>,
}

impl McSummary {
    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn summary_json(&self) -> Value {
        json!({
            "kind": self.kind,
            "seed": self.seed,
            "reps": self.reps,
            "failures": self.failures.len(),
            "files": self.tables.iter().map(|t| format!("{}.csv", t.name)).collect::<Vec<_>>(),
            "stats": self.stats,
        })
    }
}

fn push_failures(out: &mut Vec<CellFailure>, cell: String, fs: &[RepFailure]) {
    out.extend(fs.iter().map(|f| CellFailure {
        cell: cell.clone(),
        rep: f.rep,
        message: f.message.clone(),
    }));
}

fn coord_header(prefix: &[&str], name: &str, p: usize) -> Vec<String> {
    let mut h: Vec<String> = prefix.iter().map(|s| s.to_string()).collect();
    h.extend((1..=p).map(|j| format!("{name}{j}")));
    h
}

/// Exact-zero frequency of D̂22 (and of D̂12 = D̂22 = 0) for one (q, r, n)
/// group, with the binomial standard error.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SelectionFreq {
    pub q: f64,
    pub r: f64,
    pub n: usize,
    pub reps: usize,
    pub zero_freq_d22: f64,
    pub se_d22: f64,
    pub zero_freq_joint: f64,
    pub se_joint: f64,
}

/// One fitted replication reduced to its exact-zero flags.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelectionFit {
    pub q: f64,
    pub r: f64,
    pub n: usize,
    pub d22_zero: bool,
    pub joint_zero: bool,
}

/// Group fits by (q, r, n) in order of first appearance.
pub fn summarize_selection(fits: &[SelectionFit]) -> Vec<SelectionFreq> {
    let mut keys: Vec<(f64, f64, usize)> = Vec::new();
    for f in fits {
        let k = (f.q, f.r, f.n);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let prop = |k: usize, m: usize| {
        let p = k as f64 / m as f64;
        (p, (p * (1.0 - p) / m as f64).sqrt())
    };
    keys.into_iter()
        .map(|(q, r, n)| {
            let g: Vec<&SelectionFit> = fits.iter().filter(|f| (f.q, f.r, f.n) == (q, r, n)).collect();
            let m = g.len();
            let (p22, se22) = prop(g.iter().filter(|f| f.d22_zero).count(), m);
            let (pj, sej) = prop(g.iter().filter(|f| f.joint_zero).count(), m);
            SelectionFreq {
                q,
                r,
                n,
                reps: m,
                zero_freq_d22: p22,
                se_d22: se22,
                zero_freq_joint: pj,
                se_joint: sej,
            }
        })
        .collect()
}

/// Run the experiment on the current rayon pool.
pub fn run(cfg: &ExperimentConfig) -> Result<McSummary> {
    cfg.validate()?;
    let mut failures = Vec::new();
    let mut tables = Vec::new();
    let stats = match &cfg.experiment {
        Experiment::Gig(g) => {
            let s = gig_experiment(&GigExperimentConfig {
                lambda_star: g.lambda_star,
                gamma_star: g.gamma_star,
                bounds: g.bounds,
                n_grid: g.n_grid.clone(),
                reps: cfg.reps,
                limit_draws: g.limit_draws,
                seed: cfg.seed,
            })?;
            let mut samples = Table::new("samples", &[]);
            samples.header = coord_header(&["source", "n", "rep"], "u", 3);
            let mut cells = Table::new(
                "cells",
                &[
                    "n",
                    "reps",
                    "failures",
                    "ks_u1",
                    "ks_u2",
                    "ks_u3",
                    "zero_fraction_u2",
                    "limit_zero_fraction_u2",
                ],
            );
            let mut cell_json = Vec::new();
            for c in &s.cells {
                for (rep, row) in c.reps.iter().zip(&c.rows) {
                    let mut r = vec!["estimator".into(), c.n.to_string(), rep.to_string()];
                    r.extend(row.iter().map(|x| fmt_num(*x)));
                    samples.rows.push(r);
                }
                let mut r = vec![c.n.to_string(), c.rows.len().to_string(), c.failures.len().to_string()];
                r.extend(c.ks.iter().map(|x| fmt_num(*x)));
                r.push(fmt_num(c.zero_fraction));
                r.push(fmt_num(s.limit_zero_fraction));
                cells.rows.push(r);
                cell_json.push(json!({
                    "n": c.n,
                    "reps": c.rows.len(),
                    "ks": c.ks.iter().map(|x| num_json(*x)).collect::<Vec<_>>(),
                    "zero_fraction_u2": num_json(c.zero_fraction),
                }));
                push_failures(&mut failures, format!("n={}", c.n), &c.failures);
            }
            for (i, row) in s.limit_rows.iter().enumerate() {
                let mut r = vec!["limit".into(), "NA".into(), i.to_string()];
                r.extend(row.iter().map(|x| fmt_num(*x)));
                samples.rows.push(r);
            }
            tables.push(cells);
            tables.push(samples);
            json!({ "cells": cell_json, "limit_zero_fraction_u2": num_json(s.limit_zero_fraction) })
        }
        Experiment::DiffusionPairing(p) => {
            let s = pairing_experiment(&PairingConfig {
                model: p.model.clone(),
                n_grid: p.n_grid.clone(),
                euler_refine: p.euler_refine,
                reps: cfg.reps,
                limit_draws: p.limit_draws,
                drift: p.drift.clone(),
                seed: cfg.seed,
            })?;
            let dim = s.limit_rows.first().map_or(0, |r| r.len());
            let mut samples = Table::new("samples", &[]);
            samples.header = coord_header(&["source", "n", "rep"], "u", dim);
            let mut pairs = Table::new("pairs", &["n", "rep", "gap", "min_eig"]);
            let mut ks_head = vec!["n", "reps", "failures", "median_gap", "p90_gap"]
                .into_iter()
                .map(String::from)
                .collect::<Vec<_>>();
            ks_head.extend((1..=dim).map(|j| format!("ks_u{j}")));
            let mut cells = Table::new("cells", &[]);
            cells.header = ks_head;
            let mut cell_json = Vec::new();
            for c in &s.cells {
                for row in &c.rows {
                    for (src, v) in [("estimator", &row.u_hat), ("paired", &row.v_hat)] {
                        let mut r = vec![src.to_string(), c.n.to_string(), row.rep.to_string()];
                        r.extend(v.iter().map(|x| fmt_num(*x)));
                        samples.rows.push(r);
                    }
                    pairs.rows.push(vec![
                        c.n.to_string(),
                        row.rep.to_string(),
                        fmt_num(row.gap),
                        fmt_num(row.min_eig),
                    ]);
                }
                let mut r = vec![
                    c.n.to_string(),
                    c.rows.len().to_string(),
                    c.failures.len().to_string(),
                    fmt_num(c.median_gap),
                    fmt_num(c.p90_gap),
                ];
                r.extend(c.ks.iter().map(|x| fmt_num(*x)));
                cells.rows.push(r);
                cell_json.push(json!({
                    "n": c.n,
                    "reps": c.rows.len(),
                    "median_gap": num_json(c.median_gap),
                    "p90_gap": num_json(c.p90_gap),
                    "ks": c.ks.iter().map(|x| num_json(*x)).collect::<Vec<_>>(),
                }));
                push_failures(&mut failures, format!("n={}", c.n), &c.failures);
            }
            for (i, row) in s.limit_rows.iter().enumerate() {
                let mut r = vec!["limit".into(), "NA".into(), i.to_string()];
                r.extend(row.iter().map(|x| fmt_num(*x)));
                samples.rows.push(r);
            }
            tables.push(cells);
            tables.push(pairs);
            tables.push(samples);
            json!({ "cells": cell_json })
        }
        Experiment::LmmSelection(sec) => {
            let s = selection_experiment(&cfg.selection_config(sec))?;
            let mut fits = Vec::new();
            let mut samples = Table::new("samples", &[]);
            samples.header = coord_header(&["source", "q", "r", "n", "rep"], "u", 5);
            let mut ks = Table::new("ks", &["q", "r", "n", "ks_u1", "ks_u2", "ks_u3", "ks_u4", "ks_u5"]);
            let mut violations = 0;
            for c in &s.cells {
                for (rep, row) in c.reps.iter().zip(&c.rows) {
                    let mut r = vec![
                        "estimator".into(),
                        fmt_num(c.q),
                        fmt_num(c.r),
                        c.n.to_string(),
                        rep.to_string(),
                    ];
                    r.extend(row.iter().map(|x| fmt_num(*x)));
                    samples.rows.push(r);
                    fits.push(SelectionFit {
                        q: c.q,
                        r: c.r,
                        n: c.n,
                        d22_zero: row[4] == 0.0,
                        joint_zero: row[4] == 0.0 && row[3] == 0.0,
                    });
                }
                let mut r = vec![fmt_num(c.q), fmt_num(c.r), c.n.to_string()];
                r.extend(c.ks.iter().map(|x| fmt_num(*x)));
                ks.rows.push(r);
                violations += c.joint_violations;
                push_failures(&mut failures, format!("q={},r={},n={}", c.q, c.r, c.n), &c.failures);
            }
            for l in &s.limits {
                for (i, row) in l.rows.iter().enumerate() {
                    let mut r = vec!["limit".into(), fmt_num(l.q), fmt_num(l.r), "NA".into(), i.to_string()];
                    r.extend(row.iter().map(|x| fmt_num(*x)));
                    samples.rows.push(r);
                }
            }
            let freqs = summarize_selection(&fits);
            let mut table = Table::new(
                "selection_table",
                &[
                    "q",
                    "r",
                    "n",
                    "zero_freq_D22",
                    "zero_freq_joint",
                    "reps",
                    "se_D22",
                    "se_joint",
                ],
            );
            for f in &freqs {
                table.rows.push(vec![
                    fmt_num(f.q),
                    fmt_num(f.r),
                    f.n.to_string(),
                    fmt_num(f.zero_freq_d22),
                    fmt_num(f.zero_freq_joint),
                    f.reps.to_string(),
                    fmt_num(f.se_d22),
                    fmt_num(f.se_joint),
                ]);
            }
            tables.push(table);
            tables.push(ks);
            tables.push(samples);
            let limit_zero: Vec<Value> = s
                .limits
                .iter()
                .map(|l| {
                    json!({
                        "q": l.q,
                        "r": l.r,
                        "zero_fraction_u4": num_json(zero_fraction(&column(&l.rows, 3))),
                        "zero_fraction_u5": num_json(zero_fraction(&column(&l.rows, 4))),
                    })
                })
                .collect();
            json!({
                "selection": serde_json::to_value(&freqs)?,
                "joint_violations": violations,
                "limit": limit_zero,
            })
        }
        Experiment::LimitOnly(l) => {
            let spec = limit_spec(l)?;
            let s = simulate_limit(&spec, cfg.reps, cfg.seed)?;
            let mut samples = Table::new("samples", &[]);
            samples.header = coord_header(&["source", "rep"], "u", l.dim);
            samples.header.push("log_field".into());
            for (i, (row, v)) in s.rows.iter().zip(&s.values).enumerate() {
                let mut r = vec!["limit".into(), i.to_string()];
                r.extend(row.iter().map(|x| fmt_num(*x)));
                r.push(fmt_num(*v));
                samples.rows.push(r);
            }
            tables.push(samples);
            let zf: Vec<Value> = (0..l.dim)
                .map(|j| num_json(zero_fraction(&column(&s.rows, j))))
                .collect();
            json!({ "draws": s.rows.len(), "zero_fraction": zf })
        }
        Experiment::SetGeometry(g) => {
            let mut gaps = Table::new("gaps", &["t", "radius", "gap", "reverse_gap"]);
            let mut gap_json = Vec::new();
            for (j, &radius) in g.radii.iter().enumerate() {
                let mut seq = Vec::new();
                let mut rev = Vec::new();
                for (i, &t) in g.t_grid.iter().enumerate() {
                    let set_t = build_finite_t(&g.theta_star, &g.rate, t, &g.space)?;
                    let mut rng = rng_for(cfg.seed, "geometry", (j * g.t_grid.len() + i) as u64);
                    let gap = hausdorff_gap(&set_t, &g.limit, radius, cfg.reps, &mut rng)?;
                    let back = hausdorff_gap(&g.limit, &set_t, radius, cfg.reps, &mut rng)?;
                    gaps.rows
                        .push(vec![fmt_num(t), fmt_num(radius), fmt_num(gap), fmt_num(back)]);
                    seq.push(gap);
                    rev.push(back);
                }
                let nonincreasing = seq.windows(2).all(|w| w[1] <= w[0]);
                gap_json.push(json!({
                    "radius": radius,
                    "gaps": seq,
                    "nonincreasing": nonincreasing,
                    "reverse_gaps": rev,
                }));
            }
            let cone = is_cone(&g.limit, cfg.reps, &mut rng_for(cfg.seed, "geometry/cone", 0));
            tables.push(gaps);
            json!({ "radii": gap_json, "is_cone": cone })
        }
    };
    let mut manifest = Table::new("failures", &["cell", "rep", "message"]);
    for f in &failures {
        manifest
            .rows
            .push(vec![f.cell.clone(), f.rep.to_string(), f.message.clone()]);
    }
    tables.push(manifest);
    Ok(McSummary {
        kind: cfg.experiment.kind().into(),
        seed: cfg.seed,
        reps: cfg.reps,
        tables,
        stats,
        failures,
    })
}

/// Run on a dedicated pool of `threads` workers (rayon's default when None).
pub fn run_with_threads(cfg: &ExperimentConfig, threads: Option<usize>) -> Result<McSummary> {
    match threads {
        None => run(cfg),
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| cfg_err("threads", e.to_string()))?;
            pool.install(|| run(cfg))
        }
    }
}

/// Write `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::domain(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn table_csv(t: &Table) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&t.header)?;
    for r in &t.rows {
        w.write_record(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Write every table as `<name>.csv`, plus `summary.json` and, when given,
/// `runtime.json`.
pub fn write_outputs(summary: &McSummary, dir: &Path, runtime: Option<&Value>) -> Result<()> {
    fs::create_dir_all(dir)?;
    for t in &summary.tables {
        write_atomic(&dir.join(format!("{}.csv", t.name)), &table_csv(t)?)?;
    }
    let mut js = serde_json::to_vec_pretty(&summary.summary_json())?;
    js.push(b'\n');
    write_atomic(&dir.join("summary.json"), &js)?;
    if let Some(rt) = runtime {
        let mut js = serde_json::to_vec_pretty(rt)?;
        js.push(b'\n');
        write_atomic(&dir.join("runtime.json"), &js)?;
    }
    Ok(())
}

/// Run, time and write. Returns the summary; callers decide what failures
/// mean for their exit status.
pub fn run_to_dir(cfg: &ExperimentConfig, dir: &Path, threads: Option<usize>) -> Result<McSummary> {
    let start = Instant::now();
    let summary = run_with_threads(cfg, threads)?;
    let runtime = json!({
        "elapsed_seconds": start.elapsed().as_secs_f64(),
        "threads": threads.unwrap_or_else(rayon::current_num_threads),
    });
    write_outputs(&summary, dir, Some(&runtime))?;
    Ok(summary)
}

/// Read `summary.json` from an output directory and render a plain-text
/// table of its statistics.
pub fn report(dir: &Path) -> Result<(Value, String)> {
    let text = fs::read_to_string(dir.join("summary.json"))?;
    let v: Value = serde_json::from_str(&text)?;
    let mut out = String::new();
    out.push_str(&format!(
        "kind: {}  seed: {}  reps: {}  failures: {}\n",
        v["kind"].as_str().unwrap_or("?"),
        v["seed"],
        v["reps"],
        v["failures"]
    ));
    render(&v["stats"], "", &mut out);
    Ok((v, out))
}

fn render(v: &Value, prefix: &str, out: &mut String) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                render(x, &key, out);
            }
        }
        Value::Array(a) if a.iter().all(|x| x.is_number() || x.is_null() || x.is_boolean()) => {
            let items: Vec<String> = a.iter().map(scalar).collect();
            out.push_str(&format!("{prefix:<40} [{}]\n", items.join(", ")));
        }
        Value::Array(a) => {
            for (i, x) in a.iter().enumerate() {
                render(x, &format!("{prefix}[{i}]"), out);
            }
        }
        other => out.push_str(&format!("{prefix:<40} {}\n", scalar(other))),
    }
}

fn scalar(v: &Value) -> String {
    match v {
        Value::Null => "NA".into(),
        Value::Number(n) => match n.as_f64() {
            Some(x) if n.is_f64() => format!("{x:.4}"),
            _ => n.to_string(),
        },
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}
