//! Experiment configs, dispatch and result files.
//!
//! A config is a flat list of `key=value` lines. Top-level keys are `kind`,
//! `name`, `master_seed` and `out_dir`; everything else lives in a dotted
//! section (`dart.lambda=50`). Only the sections used by the chosen kind are
//! accepted, so every key in a resolved config influences the run.
//!
//! Lists are comma separated (`prop1.sigma0s=0.01,0.1,0.2`), optional values
//! accept `none`, and `#` starts a comment line.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::analysis::{
    loss_barrier, pca_trajectory, BarrierProfile, TrajectoryProjection, run_balance, run_corollary, run_prop1, run_prop2, run_prop3, BalanceConfig,
    CorollaryConfig, NoiseFlowConfig, Prop1Config,
};
use crate::error::{Error, Result};
use crate::mlpbench::{
    barrier_study, default_corruptions, flatness, make_task, run_mt_vs_dart, BenchConfig, FlatnessConfig,
    MlpModel, TaskConfig,
};
use crate::orchestrator::{branch_seed, cosine_lr, dart_train, erm_train, RunRecord, SgdOptions, TrainConfig};
use crate::patchnet::{dataset_loss, forward, init_model, load_model, read_params, write_params, PatchModel};
use crate::patchworld::{
    apply_augmentation, make_feature_bank, sample_dataset, split_for_branches, PatchDataset, PatchSample,
};
use crate::seed::{derive_seed, RngPolicy};
use crate::table::{write_summary, Cell, Table};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Prop1,
    Corollary,
    Prop2,
    Prop3,
    Balance,
    Barrier,
    Flatness,
    Trajectory,
    Dart,
    Erm,
    Mtbench,
}

impl Kind {
    pub const ALL: [Kind; 11] = [
        Kind::Prop1,
        Kind::Corollary,
        Kind::Prop2,
        Kind::Prop3,
        Kind::Balance,
        Kind::Barrier,
        Kind::Flatness,
        Kind::Trajectory,
        Kind::Dart,
        Kind::Erm,
        Kind::Mtbench,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Kind::Prop1 => "prop1",
            Kind::Corollary => "corollary",
            Kind::Prop2 => "prop2",
            Kind::Prop3 => "prop3",
            Kind::Balance => "balance",
            Kind::Barrier => "barrier",
            Kind::Flatness => "flatness",
            Kind::Trajectory => "trajectory",
            Kind::Dart => "dart",
            Kind::Erm => "erm",
            Kind::Mtbench => "mtbench",
        }
    }

    /// Config sections read by this kind.
    pub fn sections(self) -> &'static [&'static str] {
        match self {
            Kind::Prop1 => &["prop1"],
            Kind::Corollary => &["corollary"],
            Kind::Prop2 => &["prop2"],
            Kind::Prop3 => &["prop3"],
            Kind::Balance => &["balance"],
            Kind::Barrier => &["task", "bench", "barrier"],
            Kind::Flatness => &["task", "bench", "flatness"],
            Kind::Mtbench => &["task", "bench"],
            Kind::Trajectory | Kind::Dart | Kind::Erm => &["data", "dart"],
        }
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Kind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Kind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Kind::ALL.iter().map(|k| k.name()).collect();
            Error::config("kind", format!("unknown kind `{s}`; expected one of {}", names.join(" | ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop2Params {
    #[serde(flatten)]
    pub flow: NoiseFlowConfig,
    pub ms: Vec<usize>,
}

impl Default for Prop2Params {
    fn default() -> Self {
        Self {
            flow: NoiseFlowConfig::default(),
            ms: vec![1, 2, 4, 8],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop3Params {
    #[serde(flatten)]
    pub flow: NoiseFlowConfig,
    pub m: usize,
    /// `None`: 1.1× the time all features of the averaged model cross.
    pub aggregate_at: Option<f64>,
}

impl Default for Prop3Params {
    fn default() -> Self {
        Self {
            flow: NoiseFlowConfig {
                seeds: 10,
                ..NoiseFlowConfig::default()
            },
            m: 4,
            aggregate_at: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarrierParams {
    pub divergence_epochs: Vec<usize>,
}

impl Default for BarrierParams {
    fn default() -> Self {
        Self {
            divergence_epochs: vec![10, 50, 200],
        }
    }
}

/// Patch data and model for the `dart`, `erm` and `trajectory` kinds.
/// Branch `b` trains on the base set shifted by `T_b` (`T_0` = identity).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchDataConfig {
    pub q: f64,
    pub k: usize,
    pub d: usize,
    pub n: usize,
    pub sigma: f64,
    /// Empty means uniform.
    pub rho: Vec<f64>,
    pub channels: usize,
    pub sigma0: f64,
    /// Branches see disjoint splits of the base set.
    pub split: bool,
    pub test_n: usize,
}

impl Default for PatchDataConfig {
    fn default() -> Self {
        Self {
            q: 3.0,
            k: 4,
            d: 4096,
            n: 64,
            sigma: 1.0,
            rho: Vec::new(),
            channels: 8,
            sigma0: 0.05,
            split: true,
            test_n: 256,
        }
    }
}

impl PatchDataConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.q >= 3.0) {
            return Err(Error::config("data.q", "need q >= 3"));
        }
        if self.k == 0 || self.k > self.d {
            return Err(Error::config("data.k", "need 1 <= K <= d"));
        }
        if self.n == 0 || self.test_n == 0 || self.channels == 0 {
            return Err(Error::config("data.n", "n, test_n and channels must be >= 1"));
        }
        if !(self.sigma >= 0.0) || !(self.sigma0 >= 0.0) {
            return Err(Error::config("data.sigma", "sigma and sigma0 must be >= 0"));
        }
        if !self.rho.is_empty() {
            if self.rho.len() != self.k {
                return Err(Error::config("data.rho", format!("need K={} entries", self.k)));
            }
            if (self.rho.iter().sum::<f64>() - 1.0).abs() > 1e-9 || self.rho.iter().any(|r| !(*r >= 0.0)) {
                return Err(Error::config("data.rho", "need nonnegative entries summing to 1"));
            }
        }
        Ok(())
    }

    pub fn rho(&self) -> Vec<f64> {
        if self.rho.is_empty() {
            vec![1.0 / self.k as f64; self.k]
        } else {
            self.rho.clone()
        }
    }

    /// Base training set and an independent test set.
    pub fn datasets(&self, master_seed: u64) -> Result<(PatchDataset, PatchDataset)> {
        let policy = RngPolicy::new(master_seed);
        let bank = make_feature_bank(self.k, self.d)?;
        let rho = self.rho();
        let train = sample_dataset(&bank, self.n, &rho, self.sigma, policy.seed("data"))?;
        let test = sample_dataset(&bank, self.test_n, &rho, self.sigma, policy.seed("test"))?;
        Ok((train, test))
    }

    pub fn branch_sets(&self, base: &PatchDataset, branches: usize, master_seed: u64) -> Result<Vec<PatchDataset>> {
        let blocks = if self.split {
            split_for_branches(base, branches, master_seed)?.blocks
        } else {
            vec![base.clone(); branches]
        };
        blocks
            .iter()
            .enumerate()
            .map(|(b, ds)| match b % self.k {
                0 => Ok(ds.clone()),
                s => apply_augmentation(ds, s),
            })
            .collect()
    }

    pub fn init(&self, master_seed: u64) -> Result<PatchModel> {
        init_model(self.channels, self.d, self.q, self.sigma0, derive_seed(master_seed, "init"))
    }
}

pub fn patch_accuracy(model: &PatchModel, ds: &PatchDataset) -> f64 {
    let correct = ds
        .samples
        .iter()
        .filter(|s| forward(model, s).map(|f| f * s.y() > 0.0).unwrap_or(false))
        .count();
    correct as f64 / ds.n().max(1) as f64
}

// ------------------------------------------------------------------ schema

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueType {
    Bool,
    Int,
    Float,
    Text,
    IntList,
    FloatList,
    OptFloat,
}

impl ValueType {
    fn infer(v: &Value) -> ValueType {
        match v {
            Value::Bool(_) => ValueType::Bool,
            Value::Number(n) if n.is_u64() => ValueType::Int,
            Value::Number(_) => ValueType::Float,
            Value::Array(a) if a.first().is_some_and(|x| x.is_u64()) => ValueType::IntList,
            Value::Array(_) => ValueType::FloatList,
            Value::Null => ValueType::OptFloat,
            _ => ValueType::Text,
        }
    }

    fn describe(self) -> &'static str {
        match self {
            ValueType::Bool => "true|false",
            ValueType::Int => "a nonnegative integer",
            ValueType::Float => "a number",
            ValueType::Text => "text",
            ValueType::IntList => "a comma-separated list of nonnegative integers",
            ValueType::FloatList => "a comma-separated list of numbers",
            ValueType::OptFloat => "a number or `none`",
        }
    }

    fn parse(self, raw: &str) -> Option<Value> {
        let float = |s: &str| s.trim().parse::<f64>().ok().map(json_f64);
        let int = |s: &str| s.trim().parse::<u64>().ok().map(Value::from);
        let list = |f: &dyn Fn(&str) -> Option<Value>| -> Option<Value> {
            if raw.trim().is_empty() {
                return Some(Value::Array(Vec::new()));
            }
            raw.split(',').map(f).collect::<Option<Vec<_>>>().map(Value::Array)
        };
        match self {
            ValueType::Bool => raw.parse::<bool>().ok().map(Value::Bool),
            ValueType::Int => int(raw),
            ValueType::Float => float(raw),
            ValueType::Text => Some(Value::String(raw.to_string())),
            ValueType::IntList => list(&int),
            ValueType::FloatList => list(&float),
            ValueType::OptFloat if raw == "none" => Some(Value::Null),
            ValueType::OptFloat => float(raw),
        }
    }
}

fn json_f64(x: f64) -> Value {
    serde_json::Number::from_f64(x).map(Value::Number).unwrap_or(Value::Null)
}

fn render(v: &Value) -> String {
    match v {
        Value::Null => "none".into(),
        Value::String(s) => s.clone(),
        Value::Number(n) => match n.as_u64() {
            Some(u) => u.to_string(),
            None => format!("{:?}", n.as_f64().unwrap_or(f64::NAN)),
        },
        Value::Array(a) => a.iter().map(render).collect::<Vec<_>>().join(","),
        other => other.to_string(),
    }
}

struct SectionDef {
    name: &'static str,
    defaults: fn() -> Value,
    check: fn(Value) -> std::result::Result<(), String>,
    /// Fields filled from top-level keys instead of the section.
    fixed: &'static [&'static str],
    /// Types that cannot be read off an empty default.
    types: &'static [(&'static str, ValueType)],
}

fn defaults_of<T: Default + Serialize>() -> Value {
    serde_json::to_value(T::default()).unwrap_or(Value::Null)
}

fn check_as<T: DeserializeOwned>(v: Value) -> std::result::Result<(), String> {
    serde_json::from_value::<T>(v).map(|_| ()).map_err(|e| e.to_string())
}

macro_rules! section {
    ($name:literal, $t:ty, $fixed:expr) => {
        section!($name, $t, $fixed, &[])
    };
    ($name:literal, $t:ty, $fixed:expr, $types:expr) => {
        SectionDef {
            name: $name,
            defaults: defaults_of::<$t>,
            check: check_as::<$t>,
            fixed: $fixed,
            types: $types,
        }
    };
}

const SECTIONS: &[SectionDef] = &[
    section!("prop1", Prop1Config, &["master_seed"]),
    section!("corollary", CorollaryConfig, &["master_seed"]),
    section!("prop2", Prop2Params, &["master_seed"], &[("dt", ValueType::OptFloat)]),
    section!("prop3", Prop3Params, &["master_seed"], &[("dt", ValueType::OptFloat)]),
    section!("balance", BalanceConfig, &["master_seed"]),
    section!("task", TaskConfig, &[]),
    section!("bench", BenchConfig, &["master_seed"], &[("ema_decay", ValueType::OptFloat)]),
    section!("barrier", BarrierParams, &[]),
    section!("flatness", FlatnessConfig, &["seed"]),
    section!("data", PatchDataConfig, &[], &[("rho", ValueType::FloatList)]),
    section!(
        "dart",
        TrainConfig,
        &["master_seed", "branch_specs"],
        &[("checkpoint_epochs", ValueType::IntList), ("ema_decay", ValueType::OptFloat)]
    ),
];

fn section_def(name: &str) -> &'static SectionDef {
    SECTIONS.iter().find(|s| s.name == name).expect("known section")
}

/// One configurable key with its type and default.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemaEntry {
    pub key: String,
    pub ty: ValueType,
    pub default: Value,
}

const TOP_LEVEL: [&str; 4] = ["kind", "name", "master_seed", "out_dir"];

/// Keys accepted for `kind`, top-level keys first.
pub fn schema(kind: Kind) -> Vec<SchemaEntry> {
    let mut out = vec![
        SchemaEntry {
            key: "kind".into(),
            ty: ValueType::Text,
            default: Value::String(kind.name().into()),
        },
        SchemaEntry {
            key: "name".into(),
            ty: ValueType::Text,
            default: Value::String(kind.name().into()),
        },
        SchemaEntry {
            key: "master_seed".into(),
            ty: ValueType::Int,
            default: Value::from(0u64),
        },
        SchemaEntry {
            key: "out_dir".into(),
            ty: ValueType::Text,
            default: Value::String("results".into()),
        },
    ];
    for name in kind.sections() {
        let def = section_def(name);
        let Value::Object(fields) = (def.defaults)() else {
            continue;
        };
        for (field, default) in fields {
            if def.fixed.contains(&field.as_str()) {
                continue;
            }
            let ty = def
                .types
                .iter()
                .find(|(f, _)| *f == field)
                .map(|(_, t)| *t)
                .unwrap_or_else(|| ValueType::infer(&default));
            out.push(SchemaEntry {
                key: format!("{name}.{field}"),
                ty,
                default,
            });
        }
    }
    out
}

// ------------------------------------------------------------------ config

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub kind: Kind,
    pub name: String,
    pub master_seed: u64,
    pub out_dir: PathBuf,
    /// Resolved section keys.
    values: BTreeMap<String, Value>,
}

/// `key=value` pairs from config text, in order.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("line {}: expected key=value, got `{line}`", i + 1)))?;
        let k = k.trim().to_string();
        if out.iter().any(|(seen, _)| *seen == k) {
            return Err(Error::config(k, format!("duplicate key on line {}", i + 1)));
        }
        out.push((k, v.trim().to_string()));
    }
    Ok(out)
}

fn split_flag(flag: &str) -> Result<(String, String)> {
    flag.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| Error::Parse(format!("expected key=value, got `{flag}`")))
}

/// Resolves `defaults < file < flags`. `flags` are `key=value` strings.
pub fn parse_config(path: Option<&Path>, flags: &[String]) -> Result<ExperimentConfig> {
    let file = match path {
        Some(p) => parse_pairs(&std::fs::read_to_string(p)?)?,
        None => Vec::new(),
    };
    let flags = flags.iter().map(|f| split_flag(f)).collect::<Result<Vec<_>>>()?;
    resolve(&file, &flags)
}

pub fn parse_config_str(text: &str, flags: &[String]) -> Result<ExperimentConfig> {
    let flags = flags.iter().map(|f| split_flag(f)).collect::<Result<Vec<_>>>()?;
    resolve(&parse_pairs(text)?, &flags)
}

fn resolve(file: &[(String, String)], flags: &[(String, String)]) -> Result<ExperimentConfig> {
    let mut raw: BTreeMap<&str, &str> = BTreeMap::new();
    for (k, v) in file.iter().chain(flags) {
        raw.insert(k, v);
    }
    let kind: Kind = raw
        .get("kind")
        .ok_or_else(|| Error::config("kind", "missing; set kind=<experiment>"))?
        .parse()?;
    let schema = schema(kind);
    for key in raw.keys() {
        if !schema.iter().any(|e| e.key == *key) {
            let hint = match key.split_once('.') {
                Some((sec, _)) if SECTIONS.iter().any(|s| s.name == sec) => {
                    format!("section `{sec}` is not used by kind {kind}")
                }
                _ => "unknown key".to_string(),
            };
            return Err(Error::config(*key, hint));
        }
    }
    let mut resolved: BTreeMap<String, Value> = BTreeMap::new();
    for e in &schema {
        let v = match raw.get(e.key.as_str()) {
            Some(r) => e.ty.parse(r).ok_or_else(|| {
                Error::config(e.key.clone(), format!("expected {}, got `{r}`", e.ty.describe()))
            })?,
            None => e.default.clone(),
        };
        resolved.insert(e.key.clone(), v);
    }
    let text = |k: &str| resolved[k].as_str().unwrap_or_default().to_string();
    let name = text("name");
    if name.is_empty() || name.contains(['/', '\\']) {
        return Err(Error::config("name", "must be a nonempty file stem"));
    }
    let cfg = ExperimentConfig {
        kind,
        name,
        master_seed: resolved["master_seed"].as_u64().unwrap_or_default(),
        out_dir: PathBuf::from(text("out_dir")),
        values: resolved.into_iter().filter(|(k, _)| !TOP_LEVEL.contains(&k.as_str())).collect(),
    };
    for sec in kind.sections() {
        let def = section_def(sec);
        for (key, v) in cfg.values.iter().filter(|(k, _)| k.starts_with(&format!("{sec}."))) {
            let mut obj = (def.defaults)();
            let field = &key[sec.len() + 1..];
            obj[field] = v.clone();
            (def.check)(obj).map_err(|msg| Error::config(key.clone(), msg))?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Rewrites a library constraint error so its key names the config key.
fn scoped(err: Error, section: &str) -> Error {
    match err {
        Error::Config { key, msg } => {
            let field = key.rsplit('.').next().unwrap_or(&key).to_string();
            let known = (section_def(section).defaults)().get(&field).is_some();
            let key = if known { format!("{section}.{field}") } else { key };
            Error::Config { key, msg }
        }
        other => other,
    }
}

fn check_flow(section: &str, dt: Option<f64>, horizon: f64) -> Result<()> {
    if let Some(dt) = dt {
        if !(dt > 0.0) {
            return Err(Error::config(format!("{section}.dt"), "must be > 0"));
        }
    }
    if !(horizon > 0.0) {
        return Err(Error::config(format!("{section}.horizon"), "must be > 0"));
    }
    Ok(())
}

impl ExperimentConfig {
    /// Typed view of `section` with top-level values filled in.
    pub fn section<T: DeserializeOwned>(&self, section: &str) -> Result<T> {
        let def = section_def(section);
        let mut obj = (def.defaults)();
        let prefix = format!("{section}.");
        for (k, v) in self.values.iter().filter(|(k, _)| k.starts_with(&prefix)) {
            obj[&k[prefix.len()..]] = v.clone();
        }
        if obj.get("master_seed").is_some() {
            obj["master_seed"] = Value::from(self.master_seed);
        }
        if obj.get("seed").is_some() {
            obj["seed"] = Value::from(derive_seed(self.master_seed, section));
        }
        serde_json::from_value(obj).map_err(|e| Error::config(section, e.to_string()))
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.values.get(key)
    }

    /// Every resolved key, top-level first, as JSON.
    pub fn echo(&self) -> Value {
        let mut m = serde_json::Map::new();
        m.insert("kind".into(), json!(self.kind.name()));
        m.insert("name".into(), json!(self.name));
        m.insert("master_seed".into(), json!(self.master_seed));
        m.insert("out_dir".into(), json!(self.out_dir.to_string_lossy()));
        for (k, v) in &self.values {
            m.insert(k.clone(), v.clone());
        }
        Value::Object(m)
    }

    /// Resolved config in the flat file format; parses back to `self`.
    pub fn to_flat(&self) -> String {
        let mut s = format!(
            "kind={}\nname={}\nmaster_seed={}\nout_dir={}\n",
            self.kind,
            self.name,
            self.master_seed,
            self.out_dir.to_string_lossy()
        );
        for (k, v) in &self.values {
            s.push_str(&format!("{k}={}\n", render(v)));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            Kind::Prop1 => {
                let c: Prop1Config = self.section("prop1")?;
                c.validate().map_err(|e| scoped(e, "prop1"))?;
                check_flow("prop1", c.dt, c.horizon)
            }
            Kind::Corollary => {
                let c: CorollaryConfig = self.section("corollary")?;
                c.validate().map_err(|e| scoped(e, "corollary"))?;
                check_flow("corollary", c.dt, c.horizon)
            }
            Kind::Prop2 => {
                let c: Prop2Params = self.section("prop2")?;
                c.flow.validate().map_err(|e| scoped(e, "prop2"))?;
                if c.ms.len() < 3 || c.ms.contains(&0) {
                    return Err(Error::config("prop2.ms", "need at least 3 branch counts >= 1"));
                }
                check_flow("prop2", c.flow.dt, c.flow.horizon)
            }
            Kind::Prop3 => {
                let c: Prop3Params = self.section("prop3")?;
                c.flow.validate().map_err(|e| scoped(e, "prop3"))?;
                if c.m == 0 {
                    return Err(Error::config("prop3.m", "need m >= 1"));
                }
                if let Some(t) = c.aggregate_at {
                    if !(t >= 0.0) {
                        return Err(Error::config("prop3.aggregate_at", "must be >= 0"));
                    }
                }
                check_flow("prop3", c.flow.dt, c.flow.horizon)
            }
            Kind::Balance => {
                let c: BalanceConfig = self.section("balance")?;
                c.validate().map_err(|e| scoped(e, "balance"))?;
                check_flow("balance", c.dt, c.horizon)
            }
            Kind::Barrier | Kind::Flatness | Kind::Mtbench => {
                let task: TaskConfig = self.section("task")?;
                task.validate().map_err(|e| scoped(e, "task"))?;
                let bench: BenchConfig = self.section("bench")?;
                validate_bench(&bench, &task)?;
                if self.kind == Kind::Barrier {
                    let b: BarrierParams = self.section("barrier")?;
                    if b.divergence_epochs.is_empty() {
                        return Err(Error::config("barrier.divergence_epochs", "need at least one budget"));
                    }
                }
                if self.kind == Kind::Flatness {
                    let f: FlatnessConfig = self.section("flatness")?;
                    if !(f.worst_radius >= 0.0) || !(f.average_radius >= 0.0) || !(f.noise_std >= 0.0) {
                        return Err(Error::config("flatness.worst_radius", "radii and noise_std must be >= 0"));
                    }
                    if f.probes == 0 || f.samples == 0 {
                        return Err(Error::config("flatness.samples", "probes and samples must be >= 1"));
                    }
                }
                Ok(())
            }
            Kind::Trajectory | Kind::Dart | Kind::Erm => {
                let data: PatchDataConfig = self.section("data")?;
                data.validate()?;
                let train: TrainConfig = self.section("dart")?;
                train.validate().map_err(|e| scoped(e, "dart"))?;
                if data.split && train.branches > data.n {
                    return Err(Error::config("data.split", "more branches than samples"));
                }
                Ok(())
            }
        }
    }
}

fn validate_bench(b: &BenchConfig, task: &TaskConfig) -> Result<()> {
    let tc = TrainConfig {
        epochs: b.epochs,
        warmup_epochs: b.warmup_epochs,
        branches: b.identical_branches,
        lambda: b.lambda,
        lr_max: b.lr_max,
        batch_size: b.batch_size,
        ema_decay: b.ema_decay,
        momentum: b.momentum,
        weight_decay: b.weight_decay,
        ..TrainConfig::default()
    };
    tc.validate().map_err(|e| match e {
        Error::Config { key, msg } if key == "dart.branches" => Error::config("bench.identical_branches", msg),
        e => scoped(e, "bench"),
    })?;
    if b.hidden == 0 {
        return Err(Error::config("bench.hidden", "need hidden >= 1"));
    }
    if b.identical_index >= task.blocks {
        return Err(Error::config(
            "bench.identical_index",
            format!("need index < {} corruptions", task.blocks),
        ));
    }
    Ok(())
}

// ------------------------------------------------------------------ dispatch

/// Files written by a run and its headline result.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub files: Vec<PathBuf>,
    /// Pass/fail against the expectation, for experiments that have one.
    pub pass: Option<bool>,
    pub summary: Value,
}

struct Writer<'a> {
    dir: &'a Path,
    files: Vec<PathBuf>,
}

impl Writer<'_> {
    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.files.push(p.clone());
        p
    }

    fn table(&mut self, name: &str, t: &Table) -> Result<()> {
        let cols: Vec<&str> = t.columns.iter().map(String::as_str).collect();
        let p = self.path(name);
        crate::table::write_csv(t, &cols, &p)
    }

    fn json(&mut self, name: &str, v: &Value) -> Result<()> {
        let p = self.path(name);
        write_summary(v, &p)
    }

    fn record(&mut self, name: &str, r: &RunRecord) -> Result<()> {
        let p = self.path(name);
        r.write_csv(&p)
    }

    fn params(&mut self, name: &str, model: &PatchModel, params: &[f64]) -> Result<()> {
        let p = self.path(name);
        write_params(&p, model.c, model.d, model.q, params)
    }
}

fn with_context(e: Error, kind: Kind) -> Error {
    match e {
        Error::Config { .. } => e,
        Error::Undefined(m) => Error::Undefined(format!("{kind}: {m}")),
        Error::Domain(m) => Error::Domain(format!("{kind}: {m}")),
        Error::Shape(m) => Error::Shape(format!("{kind}: {m}")),
        Error::Divergence { last_stable_t, msg } => Error::Divergence {
            last_stable_t,
            msg: format!("{kind}: {msg}"),
        },
        other => other,
    }
}

/// Runs the experiment and writes its artifacts under `out_dir`. Every run
/// writes `summary.json` with the resolved config under `"config"`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut w = Writer {
        dir: &cfg.out_dir,
        files: Vec::new(),
    };
    let (results, pass) = dispatch(cfg, &mut w).map_err(|e| with_context(e, cfg.kind))?;
    let summary = json!({
        "kind": cfg.kind.name(),
        "name": cfg.name,
        "pass": pass,
        "results": results,
        "config": cfg.echo(),
    });
    w.json("summary.json", &summary)?;
    Ok(RunOutcome {
        files: w.files,
        pass,
        summary,
    })
}

fn dispatch(cfg: &ExperimentConfig, w: &mut Writer<'_>) -> Result<(Value, Option<bool>)> {
    let csv = format!("{}.csv", cfg.name);
    let js = format!("{}.json", cfg.name);
    match cfg.kind {
        Kind::Prop1 => {
            let c: Prop1Config = cfg.section("prop1")?;
            let r = run_prop1(&c)?;
            let s = r.summary(&c);
            w.table(&csv, &r.table())?;
            w.json(&js, &s)?;
            Ok((s, Some(r.pass())))
        }
        Kind::Corollary => {
            let c: CorollaryConfig = cfg.section("corollary")?;
            let r = run_corollary(&c)?;
            let s = r.summary(&c);
            w.table(&csv, &r.table())?;
            w.json(&js, &s)?;
            Ok((s, Some(r.pass())))
        }
        Kind::Prop2 => {
            let c: Prop2Params = cfg.section("prop2")?;
            let r = run_prop2(&c.flow, &c.ms)?;
            let s = r.summary(&c.flow, &c.ms);
            w.table(&csv, &r.table())?;
            w.json(&js, &s)?;
            Ok((s, Some(r.pass())))
        }
        Kind::Prop3 => {
            let c: Prop3Params = cfg.section("prop3")?;
            let r = run_prop3(&c.flow, c.m, c.aggregate_at)?;
            let s = r.summary(&c.flow, c.m);
            w.table(&csv, &r.table())?;
            w.json(&js, &s)?;
            Ok((s, Some(r.pass())))
        }
        Kind::Balance => {
            let c: BalanceConfig = cfg.section("balance")?;
            let r = run_balance(&c)?;
            let s = json!({
                "horizon": r.horizon,
                "ratios": r.seeds.iter().map(|s| s.ratio).collect::<Vec<_>>(),
                "union_times": r.seeds.iter().map(|s| s.union_times.clone()).collect::<Vec<_>>(),
                "pass": r.pass(),
            });
            w.table(&csv, &r.table())?;
            w.json(&js, &s)?;
            Ok((s, Some(r.pass())))
        }
        Kind::Barrier => {
            let (task, bench) = bench_inputs(cfg)?;
            let b: BarrierParams = cfg.section("barrier")?;
            let study = barrier_study(&task, &bench, &b.divergence_epochs)?;
            let mut t = Table::new(&["divergence_epochs", "shared_excess", "independent_excess"]);
            for (d, s) in study.divergence_epochs.iter().zip(&study.shared) {
                t.push(vec![Cell::Int(*d as i64), Cell::Float(*s), Cell::Float(study.independent)]);
            }
            let monotone = study.shared.windows(2).all(|p| p[1] >= p[0]);
            let below = study.shared.iter().all(|s| *s < study.independent);
            let s = json!({
                "divergence_epochs": study.divergence_epochs,
                "shared_excess": study.shared,
                "independent_excess": study.independent,
                "shared_below_independent": below,
                "nondecreasing": monotone,
            });
            w.table(&csv, &t)?;
            w.json(&js, &s)?;
            Ok((s, Some(below && monotone)))
        }
        Kind::Flatness => {
            let (task, bench) = bench_inputs(cfg)?;
            let f: FlatnessConfig = cfg.section("flatness")?;
            let table = run_mt_vs_dart(&task, &default_corruptions(&task), &bench)?;
            if let Some(msg) = &table.aborted {
                return Err(Error::Divergence {
                    last_stable_t: f64::NAN,
                    msg: msg.clone(),
                });
            }
            let model = MlpModel::init(task.dim(), bench.hidden, 0)?;
            let mut t = Table::new(&["arm", "worst_case", "average", "train_loss"]);
            let mut reports = serde_json::Map::new();
            for arm in ["dart:identical", "erm:identical"] {
                let a = table.arm(arm).ok_or_else(|| Error::Undefined(format!("missing arm {arm}")))?;
                let r = flatness(&model, &a.params, &task.train, &f)?;
                t.push(vec![
                    Cell::Text(arm.into()),
                    Cell::Float(r.worst_case),
                    Cell::Float(r.average),
                    Cell::Float(r.train_loss),
                ]);
                reports.insert(arm.into(), serde_json::to_value(r)?);
            }
            let (d, e) = (&reports["dart:identical"], &reports["erm:identical"]);
            let pass = d["worst_case"].as_f64() < e["worst_case"].as_f64()
                && d["average"].as_f64() < e["average"].as_f64();
            let s = json!({ "arms": reports, "dart_flatter": pass });
            w.table(&csv, &t)?;
            w.json(&js, &s)?;
            Ok((s, Some(pass)))
        }
        Kind::Mtbench => {
            let (task, bench) = bench_inputs(cfg)?;
            let corruptions = default_corruptions(&task);
            let table = run_mt_vs_dart(&task, &corruptions, &bench)?;
            w.table("crosstable.csv", &table.table())?;
            for a in &table.arms {
                w.record(&format!("run-{}.csv", a.name.replace(':', "-")), &a.record)?;
            }
            let complete = table.aborted.is_none();
            let mixed = table.mean_corrupted("mixed");
            let experts: Vec<Option<f64>> = (0..corruptions.len()).map(|i| table.expert_off_diagonal(i)).collect();
            let mixed_wins = complete && experts.iter().all(|e| matches!((mixed, e), (Some(m), Some(e)) if m > *e));
            let clean = |arm: &str| table.arm(arm).map(|a| a.accuracy[0]);
            let dart_ge_erm = matches!(
                (clean("dart:identical"), clean("erm:identical")),
                (Some(d), Some(e)) if d >= e
            );
            let s = json!({
                "corruptions": table.corruptions,
                "arms": table.arms.iter().map(|a| json!({"name": a.name, "accuracy": a.accuracy})).collect::<Vec<_>>(),
                "mixed_mean_corrupted": mixed,
                "expert_off_diagonal": experts,
                "mixed_beats_experts": mixed_wins,
                "dart_ge_erm_ema": dart_ge_erm,
                "aborted": table.aborted,
            });
            Ok((s, Some(mixed_wins && dart_ge_erm)))
        }
        Kind::Dart | Kind::Erm | Kind::Trajectory => patch_training(cfg, w),
    }
}

fn bench_inputs(cfg: &ExperimentConfig) -> Result<(crate::mlpbench::SyntheticTask, BenchConfig)> {
    let tc: TaskConfig = cfg.section("task")?;
    let bench: BenchConfig = cfg.section("bench")?;
    Ok((make_task(&tc, derive_seed(cfg.master_seed, "task"))?, bench))
}

fn patch_training(cfg: &ExperimentConfig, w: &mut Writer<'_>) -> Result<(Value, Option<bool>)> {
    let data: PatchDataConfig = cfg.section("data")?;
    let mut train: TrainConfig = cfg.section("dart")?;
    let (base, test) = data.datasets(cfg.master_seed)?;
    let init = data.init(cfg.master_seed)?;
    let eval = |m: &PatchModel| patch_accuracy(m, &test);
    let (params, record) = match cfg.kind {
        Kind::Erm => {
            let mut model = init.clone();
            let sets = data.branch_sets(&base, train.branches, cfg.master_seed)?;
            let mixed: Vec<PatchSample> = sets.iter().flat_map(|s| s.samples.iter().cloned()).collect();
            let total = train.epochs;
            let record = erm_train(
                &mut model,
                &mixed,
                1..=total,
                &|e| cosine_lr(e, total, train.lr_max),
                &SgdOptions::from(&train),
                branch_seed(cfg.master_seed, 0),
                train.ema_decay,
                Some(&eval),
            )?;
            (model.w, record)
        }
        _ => {
            if cfg.kind == Kind::Trajectory {
                train.checkpoint_on_aggregate = true;
                if train.warmup_epochs > 0 && !train.checkpoint_epochs.contains(&train.warmup_epochs) {
                    train.checkpoint_epochs.push(train.warmup_epochs);
                }
            }
            let sets = data.branch_sets(&base, train.branches, cfg.master_seed)?;
            let refs: Vec<&[PatchSample]> = sets.iter().map(|s| s.samples.as_slice()).collect();
            dart_train(init.clone(), &refs, &train, Some(&eval))?
        }
    };
    w.record("run.csv", &record)?;
    w.params("final.params", &init, &params)?;
    if !record.checkpoints.is_empty() {
        std::fs::create_dir_all(w.dir.join("checkpoints"))?;
    }
    for (epoch, p) in &record.checkpoints {
        w.params(&format!("checkpoints/epoch-{epoch:05}.params"), &init, p)?;
    }
    let mut final_model = init.clone();
    final_model.w = params.clone();
    let mut results = json!({
        "final_test_accuracy": patch_accuracy(&final_model, &test),
        "final_train_loss": record.rows.last().map(|r| r.loss),
        "aggregation_epochs": record.aggregation_epochs(),
        "checkpoint_epochs": record.checkpoints.iter().map(|c| c.0).collect::<Vec<_>>(),
        "aborted": record.aborted,
    });
    if let Some(ema) = &record.ema_params {
        final_model.w = ema.clone();
        results["ema_test_accuracy"] = json!(patch_accuracy(&final_model, &test));
    }
    if cfg.kind == Kind::Trajectory {
        let mut points = vec![("epoch:0".to_string(), init.w.clone())];
        points.extend(record.checkpoints.iter().map(|(e, p)| (format!("epoch:{e}"), p.clone())));
        if record.checkpoints.last().map(|c| c.0) != Some(train.epochs) {
            points.push((format!("epoch:{}", train.epochs), params.clone()));
        }
        let proj = pca_trajectory(&points)?;
        w.table("trajectory.csv", &proj.table())?;
        results["explained"] = json!(proj.explained);
    }
    Ok((results, None))
}

/// Config for the data behind checkpoint commands; a file without `kind`
/// is read as a `dart` config.
pub fn parse_data_config(path: &Path, flags: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut pairs = parse_pairs(&text)?;
    if !pairs.iter().any(|(k, _)| k == "kind") {
        pairs.insert(0, ("kind".into(), "dart".into()));
    }
    let flags = flags.iter().map(|f| split_flag(f)).collect::<Result<Vec<_>>>()?;
    resolve(&pairs, &flags)
}

/// Training-loss barrier between two patch-model checkpoints, on the
/// training set `cfg` generates.
pub fn checkpoint_barrier(a: &Path, b: &Path, cfg: &ExperimentConfig, grid: usize) -> Result<BarrierProfile> {
    if !cfg.kind.sections().contains(&"data") {
        return Err(Error::config("kind", format!("kind {} has no data section", cfg.kind)));
    }
    let data: PatchDataConfig = cfg.section("data")?;
    let (ma, mb) = (load_model(a)?, load_model(b)?);
    if (ma.c, ma.d) != (mb.c, mb.d) || ma.q != mb.q {
        return Err(Error::Shape(format!(
            "checkpoints differ: {}x{} q={} vs {}x{} q={}",
            ma.c, ma.d, ma.q, mb.c, mb.d, mb.q
        )));
    }
    if ma.d != data.d {
        return Err(Error::Shape(format!("checkpoint d={} but data.d={}", ma.d, data.d)));
    }
    let (train, _) = data.datasets(cfg.master_seed)?;
    let loss = |p: &[f64]| -> Result<f64> {
        let mut m = ma.clone();
        m.w.copy_from_slice(p);
        dataset_loss(&m, &train)
    };
    loss_barrier(&ma.w, &mb.w, &loss, grid)
}

/// PCA of every `*.params` file in `dir`, ids being file stems in name order.
pub fn trajectory_from_dir(dir: &Path) -> Result<TrajectoryProjection> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "params"))
        .collect();
    files.sort();
    let points = files
        .iter()
        .map(|p| {
            let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((id, read_params(p)?.data))
        })
        .collect::<Result<Vec<_>>>()?;
    pca_trajectory(&points)
}

pub fn barrier_table(profile: &BarrierProfile) -> Table {
    let mut t = Table::new(&["alpha", "loss"]);
    for (a, l) in profile.alphas.iter().zip(&profile.losses) {
        t.push(vec![Cell::Float(*a), Cell::Float(*l)]);
    }
    t
}

/// Writes the resolved config next to the artifacts.
pub fn write_resolved(cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    std::fs::write(path, cfg.to_flat())?;
    Ok(())
}
