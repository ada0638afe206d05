//! Configuration files, validation and the `run`, `sweep`, `analyze` and
//! `regions` commands.
//!
//! Config files are line oriented: `[section]` headers, `key = value` pairs,
//! `#` comments. Values are numbers, bare words, lists `[a, b]` or row-major
//! matrices `[[a, b], [c, d]]`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::analysis::{check_stability, mse_bound, EtaConvention, PlantConstants};
use crate::channel::estimate_pitilde_stats;
use crate::energy::ArrivalModel;
use crate::error::{Error, Result};
use crate::limiter::{LimiterParams, RangeCoefficient};
use crate::numerics::RMat;
use crate::plant::{design_gain_ce, GainSign, PlantModel};
use crate::precoder::Policy;
use crate::sim::{
    decision_region_scan, run_monte_carlo, sweep, write_trace_csv, RegionConfig, RunResult, SimConfig, SweepAxis,
    SweepRow, DEFAULT_DIVERGENCE_GUARD,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;

#[derive(Debug, Clone, PartialEq)]
enum Value {
    Scalar(String),
    List(Vec<Value>),
}

impl Value {
    fn describe(&self) -> String {
        match self {
            Value::Scalar(s) => s.clone(),
            Value::List(_) => "a list".into(),
        }
    }
}

fn parse_value(text: &str) -> std::result::Result<Value, String> {
    let chars: Vec<char> = text.chars().collect();
    let mut pos = 0;
    let v = parse_value_at(&chars, &mut pos)?;
    skip_ws(&chars, &mut pos);
    if pos != chars.len() {
        return Err(format!("trailing characters after value: '{}'", chars[pos..].iter().collect::<String>()));
    }
    Ok(v)
}

fn skip_ws(c: &[char], pos: &mut usize) {
    while *pos < c.len() && c[*pos].is_whitespace() {
        *pos += 1;
    }
}

fn parse_value_at(c: &[char], pos: &mut usize) -> std::result::Result<Value, String> {
    skip_ws(c, pos);
    if *pos < c.len() && c[*pos] == '[' {
        *pos += 1;
        let mut items = Vec::new();
        skip_ws(c, pos);
        if *pos < c.len() && c[*pos] == ']' {
            *pos += 1;
            return Ok(Value::List(items));
        }
        loop {
            items.push(parse_value_at(c, pos)?);
            skip_ws(c, pos);
            match c.get(*pos) {
                Some(',') => *pos += 1,
                Some(']') => {
                    *pos += 1;
                    return Ok(Value::List(items));
                }
                _ => return Err("expected ',' or ']' in list".into()),
            }
        }
    }
    let start = *pos;
    while *pos < c.len() && !matches!(c[*pos], ',' | ']' | '[') && !c[*pos].is_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err("empty value".into());
    }
    Ok(Value::Scalar(c[start..*pos].iter().collect()))
}

struct Entry {
    value: Value,
    line: usize,
    used: bool,
}

/// Parsed but untyped key-value pairs, with typed accessors that collect
/// every violation instead of stopping at the first.
struct Raw {
    entries: BTreeMap<(String, String), Entry>,
    errors: Vec<String>,
}

impl Raw {
    fn parse(text: &str) -> Self {
        let mut entries = BTreeMap::new();
        let mut errors = Vec::new();
        let mut section = String::new();
        for (idx, raw_line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw_line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                if let Some(name) = rest.strip_suffix(']').filter(|n| !n.contains('[')) {
                    section = name.trim().to_string();
                    continue;
                }
            }
            let Some((key, value)) = line.split_once('=') else {
                errors.push(format!("line {line_no}: expected 'key = value'"));
                continue;
            };
            let key = key.trim().to_string();
            match parse_value(value.trim()) {
                Ok(v) => match entries.entry((section.clone(), key.clone())) {
                    std::collections::btree_map::Entry::Occupied(_) => {
                        errors.push(format!("line {line_no}: duplicate key {section}.{key}"))
                    }
                    std::collections::btree_map::Entry::Vacant(slot) => {
                        slot.insert(Entry { value: v, line: line_no, used: false });
                    }
                },
                Err(e) => errors.push(format!("line {line_no}: {section}.{key}: {e}")),
            }
        }
        Self { entries, errors }
    }

    fn take(&mut self, section: &str, key: &str) -> Option<(Value, usize)> {
        self.entries.get_mut(&(section.to_string(), key.to_string())).map(|e| {
            e.used = true;
            (e.value.clone(), e.line)
        })
    }

    fn has(&self, section: &str, key: &str) -> bool {
        self.entries.contains_key(&(section.to_string(), key.to_string()))
    }

    fn err(&mut self, msg: String) {
        self.errors.push(msg);
    }

    fn scalar_str(&mut self, section: &str, key: &str) -> Option<(String, usize)> {
        match self.take(section, key) {
            Some((Value::Scalar(s), line)) => Some((s, line)),
            Some((v, line)) => {
                self.err(format!("line {line}: {section}.{key}: expected a scalar, got {}", v.describe()));
                None
            }
            None => None,
        }
    }

    fn opt_f64(&mut self, section: &str, key: &str) -> Option<f64> {
        let (s, line) = self.scalar_str(section, key)?;
        match s.parse::<f64>() {
            Ok(v) if v.is_finite() => Some(v),
            _ => {
                self.err(format!("line {line}: {section}.{key}: '{s}' is not a finite number"));
                None
            }
        }
    }

    fn f64_or(&mut self, section: &str, key: &str, default: f64) -> f64 {
        if self.has(section, key) {
            self.opt_f64(section, key).unwrap_or(f64::NAN)
        } else {
            default
        }
    }

    fn req_f64(&mut self, section: &str, key: &str) -> f64 {
        if !self.has(section, key) {
            self.err(format!("missing field {section}.{key}"));
            return f64::NAN;
        }
        self.opt_f64(section, key).unwrap_or(f64::NAN)
    }

    fn usize_field(&mut self, section: &str, key: &str, default: Option<usize>) -> usize {
        if !self.has(section, key) {
            return match default {
                Some(d) => d,
                None => {
                    self.err(format!("missing field {section}.{key}"));
                    0
                }
            };
        }
        let Some((s, line)) = self.scalar_str(section, key) else { return 0 };
        match s.parse::<usize>() {
            Ok(v) => v,
            Err(_) => {
                self.err(format!("line {line}: {section}.{key}: '{s}' is not a non-negative integer"));
                0
            }
        }
    }

    fn u64_field(&mut self, section: &str, key: &str, default: u64) -> u64 {
        if !self.has(section, key) {
            return default;
        }
        let Some((s, line)) = self.scalar_str(section, key) else { return default };
        s.parse::<u64>().unwrap_or_else(|_| {
            self.err(format!("line {line}: {section}.{key}: '{s}' is not a non-negative integer"));
            default
        })
    }

    fn word(&mut self, section: &str, key: &str, default: &str) -> String {
        self.scalar_str(section, key).map(|(s, _)| s).unwrap_or_else(|| default.to_string())
    }

    fn list_f64(&mut self, section: &str, key: &str) -> Option<Vec<f64>> {
        let (v, line) = self.take(section, key)?;
        let Value::List(items) = v else {
            self.err(format!("line {line}: {section}.{key}: expected a list"));
            return None;
        };
        let mut out = Vec::with_capacity(items.len());
        for it in items {
            match it {
                Value::Scalar(s) => match s.parse::<f64>() {
                    Ok(x) if x.is_finite() => out.push(x),
                    _ => {
                        self.err(format!("line {line}: {section}.{key}: '{s}' is not a finite number"));
                        return None;
                    }
                },
                Value::List(_) => {
                    self.err(format!("line {line}: {section}.{key}: nested list where a number was expected"));
                    return None;
                }
            }
        }
        Some(out)
    }

    fn list_words(&mut self, section: &str, key: &str) -> Option<Vec<String>> {
        let (v, line) = self.take(section, key)?;
        match v {
            Value::List(items) => {
                let mut out = Vec::new();
                for it in items {
                    match it {
                        Value::Scalar(s) => out.push(s),
                        Value::List(_) => {
                            self.err(format!("line {line}: {section}.{key}: expected a list of names"));
                            return None;
                        }
                    }
                }
                Some(out)
            }
            Value::Scalar(s) => Some(vec![s]),
        }
    }

    fn matrix(&mut self, section: &str, key: &str) -> Option<RMat> {
        let (v, line) = self.take(section, key)?;
        let Value::List(rows) = v else {
            self.err(format!("line {line}: {section}.{key}: expected a matrix [[..], ..]"));
            return None;
        };
        let mut data: Vec<Vec<f64>> = Vec::new();
        for row in rows {
            let Value::List(cells) = row else {
                self.err(format!("line {line}: {section}.{key}: every row must be a bracketed list"));
                return None;
            };
            let mut r = Vec::new();
            for c in cells {
                match c {
                    Value::Scalar(s) => match s.parse::<f64>() {
                        Ok(x) if x.is_finite() => r.push(x),
                        _ => {
                            self.err(format!("line {line}: {section}.{key}: '{s}' is not a finite number"));
                            return None;
                        }
                    },
                    Value::List(_) => {
                        self.err(format!("line {line}: {section}.{key}: too many nesting levels"));
                        return None;
                    }
                }
            }
            data.push(r);
        }
        let nrows = data.len();
        let ncols = data.first().map_or(0, Vec::len);
        if nrows == 0 || ncols == 0 || data.iter().any(|r| r.len() != ncols) {
            self.err(format!("line {line}: {section}.{key}: rows must be non-empty and of equal length"));
            return None;
        }
        Some(RMat::from_fn(nrows, ncols, |i, j| data[i][j]))
    }

    fn req_matrix(&mut self, section: &str, key: &str) -> Option<RMat> {
        if !self.has(section, key) {
            self.err(format!("missing field {section}.{key}"));
            return None;
        }
        self.matrix(section, key)
    }

    fn finish_unknown(&mut self) {
        let unknown: Vec<String> = self
            .entries
            .iter()
            .filter(|(_, e)| !e.used)
            .map(|((s, k), e)| format!("line {}: unknown key {s}.{k}", e.line))
            .collect();
        self.errors.extend(unknown);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GainSpec {
    Explicit(RMat),
    Dare { p: RMat, r: RMat, sign: GainSign },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub policies: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisSpec {
    pub xi_grid: usize,
    pub pitilde_samples: usize,
    /// `None` drops the period factor from `eta`.
    pub eta_period: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionSpec {
    pub a: RMat,
    pub b: RMat,
    pub w: RMat,
    pub psi: RMat,
    pub eps: f64,
    pub m: f64,
    pub range_coefficient: RangeCoefficient,
    pub theta: f64,
    pub tau: f64,
    pub energies: Vec<f64>,
    pub h1: f64,
    pub sigma1: f64,
    pub grid: usize,
    pub h2_max: f64,
    pub sigma2_max: f64,
}

impl Default for RegionSpec {
    fn default() -> Self {
        let d = |a: f64, b: f64| RMat::from_row_slice(2, 2, &[a, 0.0, 0.0, b]);
        Self {
            a: d(1.6, 1.1),
            b: d(1.0, 1.0),
            w: d(1.0, 1.0),
            psi: d(0.5, 0.5),
            eps: 0.1,
            m: 1.0,
            range_coefficient: RangeCoefficient::Feedback,
            theta: 36.0,
            tau: 1.0,
            energies: vec![12.0, 20.0],
            h1: 4.0,
            sigma1: 70.0,
            grid: 50,
            h2_max: 8.0,
            sigma2_max: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub a: RMat,
    pub b: RMat,
    pub w: RMat,
    pub gain: GainSpec,
    pub eps: f64,
    pub m: f64,
    pub range_coefficient: RangeCoefficient,
    pub ns: usize,
    pub nc: usize,
    pub k: usize,
    pub arrival: ArrivalModel,
    pub theta: f64,
    pub e0: Option<f64>,
    pub tau: f64,
    pub paths: usize,
    pub slots: usize,
    pub seed: u64,
    pub divergence_guard: f64,
    pub divergence_warn_fraction: f64,
    pub policy: String,
    pub period: usize,
    pub sweep: SweepSpec,
    pub analysis: AnalysisSpec,
    pub regions: RegionSpec,
}

fn coefficient_name(c: RangeCoefficient) -> &'static str {
    match c {
        RangeCoefficient::ClosedLoop => "closed_loop",
        RangeCoefficient::Feedback => "feedback",
    }
}

fn parse_coefficient(raw: &mut Raw, section: &str) -> RangeCoefficient {
    match raw.word(section, "range_coefficient", "closed_loop").as_str() {
        "closed_loop" => RangeCoefficient::ClosedLoop,
        "feedback" => RangeCoefficient::Feedback,
        other => {
            raw.err(format!("{section}.range_coefficient: '{other}' is not closed_loop or feedback"));
            RangeCoefficient::ClosedLoop
        }
    }
}

const POLICY_NAMES: [&str; 7] = ["proposed", "baseline1", "baseline2", "baseline3", "baseline4", "baseline5", "silent"];

impl ExperimentConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut raw = Raw::parse(text);

        let a = raw.req_matrix("plant", "A");
        let b = raw.req_matrix("plant", "B");
        let w = raw.req_matrix("plant", "W");
        let gain = if raw.has("plant", "Psi") {
            raw.matrix("plant", "Psi").map(GainSpec::Explicit)
        } else if raw.has("plant", "P") || raw.has("plant", "R") {
            let p = raw.req_matrix("plant", "P");
            let r = raw.req_matrix("plant", "R");
            let sign = match raw.word("plant", "gain_sign", "standard").as_str() {
                "standard" => GainSign::Standard,
                "as_written" => GainSign::AsWritten,
                other => {
                    raw.err(format!("plant.gain_sign: '{other}' is not standard or as_written"));
                    GainSign::Standard
                }
            };
            match (p, r) {
                (Some(p), Some(r)) => Some(GainSpec::Dare { p, r, sign }),
                _ => None,
            }
        } else {
            raw.err("missing field plant.Psi (or plant.P and plant.R)".into());
            None
        };

        let eps = raw.req_f64("limiter", "eps");
        let m = raw.f64_or("limiter", "M", 1.0);
        let range_coefficient = parse_coefficient(&mut raw, "limiter");

        let ns = raw.usize_field("channel", "Ns", None);
        let nc = raw.usize_field("channel", "Nc", None);
        let k = raw.usize_field("channel", "K", None);

        let arrival = match raw.word("energy", "arrival", "poisson").as_str() {
            "poisson" => ArrivalModel::Poisson { mean: raw.req_f64("energy", "mean_alpha") },
            "deterministic" => ArrivalModel::Deterministic { value: raw.req_f64("energy", "mean_alpha") },
            "empirical" => {
                if !raw.has("energy", "values") {
                    raw.err("missing field energy.values for empirical arrivals".into());
                }
                ArrivalModel::Empirical { values: raw.list_f64("energy", "values").unwrap_or_default() }
            }
            other => {
                raw.err(format!("energy.arrival: '{other}' is not poisson, deterministic or empirical"));
                ArrivalModel::Deterministic { value: 0.0 }
            }
        };
        let theta = raw.req_f64("energy", "theta");
        let e0 = if raw.has("energy", "E0") { raw.opt_f64("energy", "E0") } else { None };

        let tau = raw.req_f64("sim", "tau");
        let paths = raw.usize_field("sim", "paths", Some(200));
        let slots = raw.usize_field("sim", "slots", Some(300));
        let seed = raw.u64_field("sim", "seed", 0);
        let divergence_guard = raw.f64_or("sim", "divergence_guard", DEFAULT_DIVERGENCE_GUARD);
        let divergence_warn_fraction = raw.f64_or("sim", "divergence_warn_fraction", 0.0);

        let policy = raw.word("policy", "name", "proposed");
        let period = raw.usize_field("policy", "period", Some(3));

        let axis = match raw.word("sweep", "axis", "theta").as_str() {
            "theta" => SweepAxis::Theta,
            "mean_alpha" => SweepAxis::MeanAlpha,
            other => {
                raw.err(format!("sweep.axis: '{other}' is not theta or mean_alpha"));
                SweepAxis::Theta
            }
        };
        let sweep_values = raw.list_f64("sweep", "values").unwrap_or_else(|| vec![theta]);
        let policies = raw.list_words("sweep", "policies").unwrap_or_else(|| vec![policy.clone()]);

        let xi_grid = raw.usize_field("analysis", "xi_grid", Some(200));
        let pitilde_samples = raw.usize_field("analysis", "pitilde_samples", Some(20_000));
        let eta_period = match raw.word("analysis", "eta_period", "none").as_str() {
            "none" => None,
            s => match s.parse::<f64>() {
                Ok(v) if v > 0.0 && v.is_finite() => Some(v),
                _ => {
                    raw.err(format!("analysis.eta_period: '{s}' is not 'none' or a positive number"));
                    None
                }
            },
        };

        let d = RegionSpec::default();
        let regions = RegionSpec {
            a: raw.matrix("regions", "A").unwrap_or(d.a),
            b: raw.matrix("regions", "B").unwrap_or(d.b),
            w: raw.matrix("regions", "W").unwrap_or(d.w),
            psi: raw.matrix("regions", "Psi").unwrap_or(d.psi),
            eps: raw.f64_or("regions", "eps", d.eps),
            m: raw.f64_or("regions", "M", d.m),
            range_coefficient: if raw.has("regions", "range_coefficient") {
                parse_coefficient(&mut raw, "regions")
            } else {
                d.range_coefficient
            },
            theta: raw.f64_or("regions", "theta", d.theta),
            tau: raw.f64_or("regions", "tau", d.tau),
            energies: raw.list_f64("regions", "E").unwrap_or(d.energies),
            h1: raw.f64_or("regions", "h1", d.h1),
            sigma1: raw.f64_or("regions", "sigma1", d.sigma1),
            grid: raw.usize_field("regions", "grid", Some(d.grid)),
            h2_max: raw.f64_or("regions", "h2_max", d.h2_max),
            sigma2_max: raw.f64_or("regions", "sigma2_max", d.sigma2_max),
        };

        raw.finish_unknown();
        let mut errors = std::mem::take(&mut raw.errors);
        let (Some(a), Some(b), Some(w), Some(gain)) = (a, b, w, gain) else {
            return Err(Error::Config(errors));
        };
        let cfg = Self {
            a,
            b,
            w,
            gain,
            eps,
            m,
            range_coefficient,
            ns,
            nc,
            k,
            arrival,
            theta,
            e0,
            tau,
            paths,
            slots,
            seed,
            divergence_guard,
            divergence_warn_fraction,
            policy,
            period,
            sweep: SweepSpec { axis, values: sweep_values, policies },
            analysis: AnalysisSpec { xi_grid, pitilde_samples, eta_period },
            regions,
        };
        errors.extend(cfg.violations());
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn parse_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse_str(&text)
    }

    /// Every semantic problem with an otherwise well-formed config.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let kx = self.a.nrows();
        if !self.a.is_square() {
            v.push(format!("plant.A must be square, got {}x{}", self.a.nrows(), self.a.ncols()));
        }
        if self.b.nrows() != kx {
            v.push(format!("plant.B has {} rows, expected {kx}", self.b.nrows()));
        }
        if self.w.shape() != (kx, kx) {
            v.push(format!("plant.W is {}x{}, expected {kx}x{kx}", self.w.nrows(), self.w.ncols()));
        }
        let d = self.b.ncols();
        match &self.gain {
            GainSpec::Explicit(psi) if psi.shape() != (d, kx) => {
                v.push(format!("plant.Psi is {}x{}, expected {d}x{kx}", psi.nrows(), psi.ncols()))
            }
            GainSpec::Dare { p, r, .. } => {
                if p.shape() != (kx, kx) {
                    v.push(format!("plant.P must be {kx}x{kx}"));
                }
                if r.shape() != (d, d) {
                    v.push(format!("plant.R must be {d}x{d}"));
                }
            }
            _ => {}
        }
        if !(self.eps > 0.0 && self.eps < 1.0) {
            v.push(format!("limiter.eps = {} must lie in (0, 1)", self.eps));
        }
        if !(self.m > 0.0) {
            v.push(format!("limiter.M = {} must be positive", self.m));
        }
        if self.k != kx && self.a.is_square() {
            v.push(format!("channel.K = {} must equal the state dimension {kx}", self.k));
        }
        if self.k == 0 || self.k > self.ns.min(self.nc) {
            v.push(format!("channel.K = {} must satisfy 1 <= K <= min(Ns = {}, Nc = {})", self.k, self.ns, self.nc));
        }
        if let Err(e) = self.arrival.validate() {
            v.push(format!("energy: {e}"));
        }
        if !(self.theta > 0.0) {
            v.push(format!("energy.theta = {} must be positive", self.theta));
        }
        if let Some(e0) = self.e0 {
            if !(0.0..=self.theta).contains(&e0) {
                v.push(format!("energy.E0 = {e0} must lie in [0, theta]"));
            }
        }
        if !(self.tau > 0.0) {
            v.push(format!("sim.tau = {} must be positive", self.tau));
        }
        if self.paths == 0 || self.slots == 0 {
            v.push("sim.paths and sim.slots must be positive".into());
        }
        if !(self.divergence_guard > 0.0) {
            v.push("sim.divergence_guard must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.divergence_warn_fraction) {
            v.push("sim.divergence_warn_fraction must lie in [0, 1]".into());
        }
        if !POLICY_NAMES.contains(&self.policy.as_str()) {
            v.push(format!("policy.name: unknown policy '{}'", self.policy));
        }
        if self.period == 0 {
            v.push("policy.period must be at least 1".into());
        }
        for p in &self.sweep.policies {
            if !POLICY_NAMES.contains(&p.as_str()) {
                v.push(format!("sweep.policies: unknown policy '{p}'"));
            }
        }
        if self.sweep.values.is_empty() || self.sweep.values.windows(2).any(|w| w[1] < w[0]) {
            v.push("sweep.values must be a non-empty ascending list".into());
        }
        if self.sweep.values.iter().any(|x| !(*x > 0.0)) {
            v.push("sweep.values must be positive".into());
        }
        if self.analysis.xi_grid == 0 || self.analysis.pitilde_samples == 0 {
            v.push("analysis.xi_grid and analysis.pitilde_samples must be positive".into());
        }
        let r = &self.regions;
        if r.a.shape() != (2, 2) || r.b.shape() != (2, 2) || r.w.shape() != (2, 2) || r.psi.shape() != (2, 2) {
            v.push("regions: A, B, W and Psi must be 2x2".into());
        }
        if !(r.eps > 0.0 && r.eps < 1.0) {
            v.push(format!("regions.eps = {} must lie in (0, 1)", r.eps));
        }
        if r.grid == 0 || !(r.h2_max > 0.0) || !(r.sigma2_max > 0.0) || !(r.h1 > 0.0) || !(r.sigma1 > 0.0) {
            v.push("regions: grid, h1, sigma1, h2_max and sigma2_max must be positive".into());
        }
        if r.energies.iter().any(|e| !(*e >= 0.0 && *e <= r.theta)) {
            v.push("regions.E values must lie in [0, regions.theta]".into());
        }
        v
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[plant]");
        let _ = writeln!(s, "A = {}", fmt_matrix(&self.a));
        let _ = writeln!(s, "B = {}", fmt_matrix(&self.b));
        let _ = writeln!(s, "W = {}", fmt_matrix(&self.w));
        match &self.gain {
            GainSpec::Explicit(psi) => {
                let _ = writeln!(s, "Psi = {}", fmt_matrix(psi));
            }
            GainSpec::Dare { p, r, sign } => {
                let _ = writeln!(s, "P = {}", fmt_matrix(p));
                let _ = writeln!(s, "R = {}", fmt_matrix(r));
                let name = match sign {
                    GainSign::Standard => "standard",
                    GainSign::AsWritten => "as_written",
                };
                let _ = writeln!(s, "gain_sign = {name}");
            }
        }
        let _ = writeln!(s, "\n[limiter]\neps = {}\nM = {}", self.eps, self.m);
        let _ = writeln!(s, "range_coefficient = {}", coefficient_name(self.range_coefficient));
        let _ = writeln!(s, "\n[channel]\nNs = {}\nNc = {}\nK = {}", self.ns, self.nc, self.k);
        let _ = writeln!(s, "\n[energy]");
        match &self.arrival {
            ArrivalModel::Poisson { mean } => {
                let _ = writeln!(s, "arrival = poisson\nmean_alpha = {mean}");
            }
            ArrivalModel::Deterministic { value } => {
                let _ = writeln!(s, "arrival = deterministic\nmean_alpha = {value}");
            }
            ArrivalModel::Empirical { values } => {
                let _ = writeln!(s, "arrival = empirical\nvalues = {}", fmt_list(values));
            }
        }
        let _ = writeln!(s, "theta = {}", self.theta);
        if let Some(e0) = self.e0 {
            let _ = writeln!(s, "E0 = {e0}");
        }
        let _ = writeln!(
            s,
            "\n[sim]\ntau = {}\npaths = {}\nslots = {}\nseed = {}\ndivergence_guard = {}\ndivergence_warn_fraction = {}",
            self.tau, self.paths, self.slots, self.seed, self.divergence_guard, self.divergence_warn_fraction
        );
        let _ = writeln!(s, "\n[policy]\nname = {}\nperiod = {}", self.policy, self.period);
        let _ = writeln!(
            s,
            "\n[sweep]\naxis = {}\nvalues = {}\npolicies = [{}]",
            self.sweep.axis.name(),
            fmt_list(&self.sweep.values),
            self.sweep.policies.join(", ")
        );
        let eta = self.analysis.eta_period.map_or("none".to_string(), |t| t.to_string());
        let _ = writeln!(
            s,
            "\n[analysis]\nxi_grid = {}\npitilde_samples = {}\neta_period = {eta}",
            self.analysis.xi_grid, self.analysis.pitilde_samples
        );
        let r = &self.regions;
        let _ = writeln!(s, "\n[regions]");
        let _ = writeln!(
            s,
            "A = {}\nB = {}\nW = {}\nPsi = {}",
            fmt_matrix(&r.a),
            fmt_matrix(&r.b),
            fmt_matrix(&r.w),
            fmt_matrix(&r.psi)
        );
        let _ =
            writeln!(s, "eps = {}\nM = {}\nrange_coefficient = {}", r.eps, r.m, coefficient_name(r.range_coefficient));
        let _ = writeln!(s, "theta = {}\ntau = {}\nE = {}", r.theta, r.tau, fmt_list(&r.energies));
        let _ = writeln!(
            s,
            "h1 = {}\nsigma1 = {}\ngrid = {}\nh2_max = {}\nsigma2_max = {}",
            r.h1, r.sigma1, r.grid, r.h2_max, r.sigma2_max
        );
        s
    }

    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.to_config_string().as_bytes()))
    }

    pub fn header_line(&self) -> String {
        format!("# config_sha256={} seed={}", self.sha256(), self.seed)
    }

    pub fn plant(&self) -> Result<PlantModel> {
        let psi = match &self.gain {
            GainSpec::Explicit(psi) => psi.clone(),
            GainSpec::Dare { p, r, sign } => design_gain_ce(&self.a, &self.b, p, r, *sign)?,
        };
        PlantModel::new(self.a.clone(), self.b.clone(), self.w.clone(), psi)
    }

    pub fn sim_config(&self) -> Result<SimConfig> {
        let model = self.plant()?;
        let limiter = LimiterParams::new(&model, self.m, self.eps, self.range_coefficient)?;
        Ok(SimConfig {
            model,
            limiter,
            nc: self.nc,
            ns: self.ns,
            arrival: self.arrival.clone(),
            theta: self.theta,
            e0: self.e0,
            tau: self.tau,
            divergence_guard: self.divergence_guard,
        })
    }

    pub fn policy_named(&self, name: &str) -> Result<Policy> {
        Policy::from_name(name, self.period, self.arrival.mean())
            .ok_or_else(|| Error::Config(vec![format!("unknown policy '{name}'")]))
    }

    pub fn region_config(&self) -> Result<RegionConfig> {
        let r = &self.regions;
        let model = PlantModel::new(r.a.clone(), r.b.clone(), r.w.clone(), r.psi.clone())?;
        let limiter = LimiterParams::new(&model, r.m, r.eps, r.range_coefficient)?;
        Ok(RegionConfig { model, limiter, theta: r.theta, tau: r.tau })
    }
}

fn fmt_list(v: &[f64]) -> String {
    format!("[{}]", v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", "))
}

fn fmt_matrix(m: &RMat) -> String {
    let rows: Vec<String> =
        (0..m.nrows()).map(|i| fmt_list(&(0..m.ncols()).map(|j| m[(i, j)]).collect::<Vec<_>>())).collect();
    format!("[{}]", rows.join(", "))
}

#[derive(Debug, Parser)]
#[command(name = "ncs-sim", about = "Energy-harvesting MIMO networked control simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct CommonArgs {
    /// Experiment config file.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[arg(long)]
    pub paths: Option<usize>,
    #[arg(long)]
    pub slots: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// proposed, baseline1..baseline5 or silent.
    #[arg(long)]
    pub policy: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Monte Carlo run of one policy: run.csv and trace.csv.
    Run {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Policy sweep over theta or the mean arrival: sweep.csv.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Stability condition and MSE bound: stability_report.txt.
    Analyze {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Activation regions of the decoupled two-subsystem example: regions.csv.
    Regions {
        #[command(flatten)]
        common: CommonArgs,
    },
}

/// Loads the config and applies command-line overrides.
pub fn load(common: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::parse_file(&common.config)?;
    if let Some(p) = common.paths {
        cfg.paths = p;
    }
    if let Some(s) = common.slots {
        cfg.slots = s;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(p) = &common.policy {
        cfg.policy = p.clone();
    }
    let v = cfg.violations();
    if v.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Config(v))
    }
}

fn write_output(dir: &Path, name: &str, header: &str, body: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, format!("{header}\n{body}"))?;
    Ok(path)
}

fn divergence_exit(cfg: &ExperimentConfig, results: &[&RunResult]) -> i32 {
    let worst = results.iter().map(|r| r.divergent_fraction()).fold(0.0, f64::max);
    if worst > cfg.divergence_warn_fraction {
        EXIT_DIVERGENCE
    } else {
        EXIT_OK
    }
}

pub fn cmd_run(cfg: &ExperimentConfig, out: &Path) -> Result<i32> {
    let sim = cfg.sim_config()?;
    let policy = cfg.policy_named(&cfg.policy)?;
    let r = run_monte_carlo(&sim, &policy, cfg.paths, cfg.slots, cfg.seed, true)?;
    let header = cfg.header_line();
    write_output(out, "run.csv", &header, &format!("{}\n{}\n", RunResult::CSV_HEADER, r.csv_row()))?;
    let mut trace = Vec::new();
    if let Some(t) = r.paths.first().and_then(|p| p.traces.as_ref()) {
        write_trace_csv(&mut trace, t)?;
    }
    write_output(out, "trace.csv", &header, &String::from_utf8_lossy(&trace))?;
    Ok(divergence_exit(cfg, &[&r]))
}

pub fn cmd_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<i32> {
    let sim = cfg.sim_config()?;
    let policies = cfg.sweep.policies.iter().map(|n| cfg.policy_named(n)).collect::<Result<Vec<_>>>()?;
    let rows = sweep(&sim, &policies, cfg.sweep.axis, &cfg.sweep.values, cfg.paths, cfg.slots, cfg.seed)?;
    let mut body = SweepRow::csv_header();
    body.push('\n');
    for row in &rows {
        body.push_str(&row.csv_row());
        body.push('\n');
    }
    write_output(out, "sweep.csv", &cfg.header_line(), &body)?;
    Ok(divergence_exit(cfg, &rows.iter().map(|r| &r.result).collect::<Vec<_>>()))
}

/// Stream id reserved for the channel statistics so they never share draws
/// with a simulated path.
const STATS_STREAM: u64 = u64::MAX;

#[derive(Debug)]
pub struct AnalyzeOutcome {
    pub report: crate::analysis::StabilityReport,
    pub bound: Result<crate::analysis::MseBoundReport>,
    pub zero_arrival_mass: f64,
    pub run: RunResult,
    pub text: String,
}

/// Stability report plus a proposed-policy run to compare against the bound.
pub fn analyze(cfg: &ExperimentConfig) -> Result<AnalyzeOutcome> {
    let sim = cfg.sim_config()?;
    let constants = PlantConstants::new(&sim.model, &sim.limiter, cfg.tau);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(STATS_STREAM);
    let stats = estimate_pitilde_stats(&mut rng, cfg.nc, cfg.ns, cfg.k, cfg.analysis.pitilde_samples)?;
    let inv = cfg.arrival.inverse_mean();
    let grid = stats.quantile_grid(cfg.analysis.xi_grid);
    let report = check_stability(&constants, &stats, inv.value, cfg.theta, cfg.arrival.mean(), &grid)?;
    let convention = cfg.analysis.eta_period.map_or(EtaConvention::WithoutPeriod, EtaConvention::WithPeriod);
    let bound = mse_bound(&report, convention);
    let run = run_monte_carlo(&sim, &Policy::Proposed, cfg.paths, cfg.slots, cfg.seed, false)?;

    let mut text = report.to_text();
    let _ = writeln!(text, "Pr(alpha = 0): {:.6e}", inv.zero_mass);
    let _ = writeln!(text, "pitilde samples: {} ({} degenerate draws)", stats.len(), stats.degenerate_draws());
    match &bound {
        Ok(b) => {
            let _ = writeln!(text, "eta: {:.6e}", b.eta);
            let _ = writeln!(text, "mse_bound: {:.6e}", b.bound);
        }
        Err(Error::BoundUndefined(eta)) => {
            let _ = writeln!(text, "eta: {eta:.6e}");
            let _ = writeln!(text, "mse_bound: undefined");
        }
        Err(e) => return Err(Error::Numerical(e.to_string())),
    }
    let _ = writeln!(text, "simulated paths: {} x {} slots (proposed)", run.n_paths, run.n_slots);
    let _ = writeln!(text, "divergent paths: {}", run.divergent_paths);
    let _ = writeln!(text, "mean trace sigma: {:.6e} +/- {:.3e}", run.mean_tr_sigma.mean, run.mean_tr_sigma.ci);
    let below = bound.as_ref().map(|b| run.mean_tr_sigma.hi() < b.bound).unwrap_or(false);
    let _ = writeln!(text, "trace sigma below bound: {below}");
    Ok(AnalyzeOutcome { report, bound, zero_arrival_mass: inv.zero_mass, run, text })
}

pub fn cmd_analyze(cfg: &ExperimentConfig, out: &Path) -> Result<i32> {
    let outcome = analyze(cfg)?;
    write_output(out, "stability_report.txt", &cfg.header_line(), &outcome.text)?;
    Ok(divergence_exit(cfg, &[&outcome.run]))
}

pub fn cmd_regions(cfg: &ExperimentConfig, out: &Path) -> Result<i32> {
    let rc = cfg.region_config()?;
    let r = &cfg.regions;
    let mut body = Vec::new();
    for (i, &e) in r.energies.iter().enumerate() {
        let map = decision_region_scan(&rc, e, r.h1, r.sigma1, r.grid, r.h2_max, r.sigma2_max)?;
        map.write_csv(&mut body, i == 0)?;
    }
    write_output(out, "regions.csv", &cfg.header_line(), &String::from_utf8_lossy(&body))?;
    Ok(EXIT_OK)
}

/// Entry point shared by the binary and the tests; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    type Handler = fn(&ExperimentConfig, &Path) -> Result<i32>;
    let (common, cmd): (&CommonArgs, Handler) = match &cli.command {
        Command::Run { common } => (common, cmd_run),
        Command::Sweep { common } => (common, cmd_sweep),
        Command::Analyze { common } => (common, cmd_analyze),
        Command::Regions { common } => (common, cmd_regions),
    };
    let cfg = match load(common) {
        Ok(c) => c,
        Err(e @ (Error::Config(_) | Error::Io(_))) => {
            eprintln!("{}: {e}", common.config.display());
            return EXIT_USAGE;
        }
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_FAILURE;
        }
    };
    match cmd(&cfg, &common.out) {
        Ok(code) => {
            if code == EXIT_DIVERGENCE {
                eprintln!("warning: divergent path fraction exceeds sim.divergence_warn_fraction");
            }
            code
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}
