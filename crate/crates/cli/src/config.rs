//! Run configuration: a TOML file, `--set` overrides, then validation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use dqtrade::agent::TrainConfig;
use dqtrade::backtest::WalkForwardPlan;
use dqtrade::env::CostModel;
use dqtrade::features::FeatureConfig;
use dqtrade::sim::{GbmParams, ProcessParams, Regime, RegimeModel, SimSource, VgParams};
use dqtrade::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulator: Option<SimulatorConfig>,
    #[serde(default)]
    pub features: FeatureConfig,
    #[serde(default)]
    pub costs: CostModel,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub backtest: WalkForwardPlan,
    #[serde(default)]
    pub study: StudyConfig,
    /// Written into manifests; ignored when a manifest is loaded back.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: default_out(),
            data: None,
            simulator: None,
            features: FeatureConfig::default(),
            costs: CostModel::default(),
            train: TrainConfig::default(),
            backtest: WalkForwardPlan::default(),
            study: StudyConfig::default(),
            provenance: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "default_target")]
    pub target: String,
    /// Symbol to CSV file.
    pub files: BTreeMap<String, PathBuf>,
}

fn default_target() -> String {
    "ES".into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProcessKind {
    Gbm,
    Vg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegimeChoice {
    Up,
    No,
    Down,
    Switch,
}

impl RegimeChoice {
    pub fn name(self) -> &'static str {
        match self {
            RegimeChoice::Up => "up",
            RegimeChoice::No => "no",
            RegimeChoice::Down => "down",
            RegimeChoice::Switch => "switch",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulatorConfig {
    pub process: ProcessKind,
    pub regime: RegimeChoice,
    pub n_paths: usize,
    pub years: usize,
    /// Full process specification; replaces `process` and `regime` when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source: Option<SimSource>,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        SimulatorConfig { process: ProcessKind::Vg, regime: RegimeChoice::Switch, n_paths: 1, years: 5, source: None }
    }
}

/// Built-in parameters for a process family and regime.
pub fn builtin_source(process: ProcessKind, regime: RegimeChoice) -> SimSource {
    let single = |r: Regime| match process {
        ProcessKind::Gbm => ProcessParams::Gbm(GbmParams::for_regime(r)),
        ProcessKind::Vg => ProcessParams::Vg(VgParams::for_regime(r)),
    };
    match regime {
        RegimeChoice::Up => SimSource::Single { params: single(Regime::Up) },
        RegimeChoice::No => SimSource::Single { params: single(Regime::No) },
        RegimeChoice::Down => SimSource::Single { params: single(Regime::Down) },
        RegimeChoice::Switch => SimSource::Switching {
            model: match process {
                ProcessKind::Gbm => RegimeModel::gbm_default(),
                ProcessKind::Vg => RegimeModel::vg_default(),
            },
        },
    }
}

impl SimulatorConfig {
    pub fn resolved_source(&self) -> SimSource {
        self.source.unwrap_or_else(|| builtin_source(self.process, self.regime))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudyConfig {
    pub regimes: Vec<RegimeChoice>,
    pub n_paths: Vec<usize>,
    pub n_eval: usize,
    pub years: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            regimes: vec![RegimeChoice::Up, RegimeChoice::No, RegimeChoice::Down, RegimeChoice::Switch],
            n_paths: vec![1, 50, 90],
            n_eval: 100,
            years: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub command: String,
    pub version: String,
    /// Seeds of individually seeded items (simulated paths, segments).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub seeds: BTreeMap<String, u64>,
}

/// Values given on the command line, applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    /// `dotted.key=value` assignments; values use TOML syntax, bare words are strings.
    pub set: Vec<String>,
}

fn parse_value(text: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {text}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(text.into())),
        Err(_) => toml::Value::String(text.into()),
    }
}

fn assign(table: &mut toml::Table, key: &str, value: toml::Value) -> anyhow::Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).with_context(|| format!("empty key in --set {key}"))?;
    let mut node = table;
    for part in parts {
        let entry = node.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry.as_table_mut().with_context(|| format!("--set {key}: '{part}' is not a table"))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

/// Load `path` (or start empty), apply overrides, deserialize and validate.
pub fn load(path: Option<&Path>, overrides: &Overrides) -> anyhow::Result<RunConfig> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<toml::Table>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    table.remove("provenance");
    for item in &overrides.set {
        let (key, value) = item.split_once('=').ok_or_else(|| Error::Config(format!("--set expects key=value, got {item:?}")))?;
        assign(&mut table, key.trim(), parse_value(value.trim()))?;
    }
    if let Some(seed) = overrides.seed {
        assign(&mut table, "seed", toml::Value::Integer(seed as i64))?;
        assign(&mut table, "train.seed", toml::Value::Integer(seed as i64))?;
    } else if let Some(seed) = table.get("seed").cloned() {
        let has_train_seed = table.get("train").and_then(|t| t.get("seed")).is_some();
        if !has_train_seed {
            assign(&mut table, "train.seed", seed)?;
        }
    }
    if let Some(out) = &overrides.out {
        assign(&mut table, "out", toml::Value::String(out.to_string_lossy().into_owned()))?;
    }
    let config: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

impl RunConfig {
    pub fn validate(&self) -> dqtrade::Result<()> {
        // TOML integers are signed 64-bit.
        for (key, seed) in [("seed", self.seed), ("train.seed", self.train.seed)] {
            if seed > i64::MAX as u64 {
                return Err(Error::Config(format!("{key} = {seed} does not fit in a TOML integer")));
            }
        }
        self.features.validate()?;
        self.costs.validate()?;
        self.train.validate()?;
        self.backtest.validate()?;
        if let Some(data) = &self.data {
            if data.files.is_empty() {
                return Err(Error::Config("data.files is empty".into()));
            }
            if !data.files.contains_key(&data.target) {
                return Err(Error::Config(format!("data.target {} has no entry in data.files", data.target)));
            }
            for (symbol, file) in &data.files {
                if !file.is_file() {
                    return Err(Error::Config(format!("data.files.{symbol}: {} does not exist", file.display())));
                }
            }
        }
        if let Some(sim) = &self.simulator {
            if sim.n_paths == 0 || sim.years == 0 {
                return Err(Error::Config("simulator.n_paths and simulator.years must be positive".into()));
            }
            sim.resolved_source().validate()?;
        }
        if self.study.n_eval < 2 || self.study.years == 0 || self.study.n_paths.contains(&0) {
            return Err(Error::Config("study needs n_eval >= 2, years >= 1 and positive path counts".into()));
        }
        Ok(())
    }

    /// The run's single price source.
    pub fn source(&self) -> dqtrade::Result<Source<'_>> {
        match (&self.data, &self.simulator) {
            (Some(d), None) => Ok(Source::Data(d)),
            (None, Some(s)) => Ok(Source::Simulator(s)),
            (Some(_), Some(_)) => Err(Error::Config("configure either [data] or [simulator], not both".into())),
            (None, None) => Err(Error::Config("no price source: add a [data] or [simulator] section".into())),
        }
    }

    pub fn simulator(&self) -> dqtrade::Result<&SimulatorConfig> {
        self.simulator.as_ref().ok_or_else(|| Error::Config("this command needs a [simulator] section".into()))
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

pub enum Source<'a> {
    Data(&'a DataConfig),
    Simulator(&'a SimulatorConfig),
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn defaults_carry_table_values() {
        let c = load(None, &Overrides::default()).unwrap();
        assert_eq!(c.train.gamma, 0.94);
        assert_eq!(c.train.buffer_size, 30_000);
        assert_eq!(c.backtest.train_window, 1260);
        let SimSource::Switching { model } = builtin_source(ProcessKind::Vg, RegimeChoice::Switch) else { panic!() };
        assert_eq!(model.self_probs, [0.95, 0.90, 0.95]);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let f = write("seed = 1\n[train]\ngama = 0.9\n");
        let err = load(Some(f.path()), &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("gama"), "{err}");
        let f = write("sed = 1\n");
        assert!(load(Some(f.path()), &Overrides::default()).is_err());
    }

    #[test]
    fn precedence_flag_over_file_over_default() {
        let f = write("seed = 3\nout = \"a\"\n[train]\nbatch_size = 64\n");
        let c = load(Some(f.path()), &Overrides::default()).unwrap();
        assert_eq!((c.seed, c.train.seed, c.train.batch_size), (3, 3, 64));
        assert_eq!(c.train.learning_rate, 0.001);
        let o = Overrides { seed: Some(9), out: Some("b".into()), set: vec!["train.batch_size=32".into(), "simulator.regime=down".into()] };
        let c = load(Some(f.path()), &o).unwrap();
        assert_eq!((c.seed, c.train.seed, c.train.batch_size), (9, 9, 32));
        assert_eq!(c.out, PathBuf::from("b"));
        assert_eq!(c.simulator.unwrap().regime, RegimeChoice::Down);
    }

    #[test]
    fn manifest_round_trip() {
        let o = Overrides { set: vec!["simulator.process=\"gbm\"".into(), "train.total_timesteps=10".into()], ..Overrides::default() };
        let mut c = load(None, &o).unwrap();
        c.provenance = Some(Provenance { command: "simulate".into(), version: "x".into(), seeds: BTreeMap::from([("path_000".into(), 5)]) });
        let f = write(&c.to_toml().unwrap());
        let back = load(Some(f.path()), &Overrides::default()).unwrap();
        assert_eq!(back, RunConfig { provenance: None, ..c });
    }

    #[test]
    fn seeds_must_fit_toml_integers() {
        let o = Overrides { seed: Some(u64::MAX), ..Overrides::default() };
        assert!(load(None, &o).is_err());
        let o = Overrides { seed: Some(i64::MAX as u64), ..Overrides::default() };
        assert!(load(None, &o).is_ok());
    }

    #[test]
    fn missing_files_and_double_sources() {
        let f = write("[data]\nfiles = { ES = \"/nonexistent/es.csv\" }\n");
        assert!(load(Some(f.path()), &Overrides::default()).is_err());
        let c = RunConfig { simulator: Some(SimulatorConfig::default()), ..RunConfig::default() };
        assert!(c.source().is_ok());
        assert!(RunConfig::default().source().is_err());
    }
}
