//! Experiment configuration, single runs and method x seed sweeps.
//!
//! A run directory `<out>/<method>/seed_<s>/` holds `config.json` (the fully
//! resolved run configuration), `report.json`, and per trained model a
//! checkpoint and a JSONL training log (`checkpoint.bin`/`train_log.jsonl`,
//! or `*_fold<d>` variants under the domain-shift protocol).

pub mod report;
pub mod svg;

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::evaluation::{
    check_protocol, collect_logits, invariance_acc, invariance_kl, metrics_from_samples, LogRegSettings, LogitSample,
    Protocol, RunReport,
};
use crate::network::NetworkConfig;
use crate::par;
use crate::sampling::SamplerStrategy;
use crate::synthdata::load_dataset;
use crate::synthdata::{generate, leave_one_domain_out, Dataset, DatasetSpec, DatasetSplits};
use crate::training::{PrototypeUse, TrainConfig, TrainState, Trainer};

pub const CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Erm,
    /// ERM on group-balanced batches.
    ErmGroupBalanced,
    Tally,
    TallyNone,
    TallyCOnly,
    TallyDOnly,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Erm,
        Method::ErmGroupBalanced,
        Method::Tally,
        Method::TallyNone,
        Method::TallyCOnly,
        Method::TallyDOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Erm => "erm",
            Method::ErmGroupBalanced => "erm_group_balanced",
            Method::Tally => "tally",
            Method::TallyNone => "tally_none",
            Method::TallyCOnly => "tally_c_only",
            Method::TallyDOnly => "tally_d_only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }

    pub fn is_erm(self) -> bool {
        matches!(self, Method::Erm | Method::ErmGroupBalanced)
    }

    /// The training configuration this method runs with.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let with = |prototypes| TrainConfig {
            prototypes,
            ..base.clone()
        };
        match self {
            Method::Erm => base.as_erm(),
            Method::ErmGroupBalanced => TrainConfig {
                erm_sampler: SamplerStrategy::GroupBalanced,
                ..base.as_erm()
            },
            Method::Tally => with(PrototypeUse::Full),
            Method::TallyNone => with(PrototypeUse::None),
            Method::TallyCOnly => with(PrototypeUse::ClassOnly),
            Method::TallyDOnly => with(PrototypeUse::DomainOnly),
        }
    }
}

/// Where the data comes from: an inline generator spec or a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Spec(DatasetSpec),
    Dir(PathBuf),
}

impl DatasetSource {
    pub fn load(&self) -> Result<DatasetSplits> {
        match self {
            DatasetSource::Spec(spec) => generate(spec),
            DatasetSource::Dir(dir) => load_dataset(dir),
        }
    }
}

/// Architecture choices that do not depend on the dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSettings {
    pub hidden_channels: usize,
    /// Conv blocks before the augmentation layer.
    pub conv_blocks_before_r: usize,
    pub conv_blocks_after_r: usize,
}

impl Default for NetworkSettings {
    fn default() -> Self {
        NetworkSettings {
            hidden_channels: 8,
            conv_blocks_before_r: 1,
            conv_blocks_after_r: 1,
        }
    }
}

impl NetworkSettings {
    pub fn for_dataset(&self, spec: &DatasetSpec) -> NetworkConfig {
        NetworkConfig {
            in_channels: spec.channels,
            hidden_channels: self.hidden_channels,
            conv_blocks_before_r: self.conv_blocks_before_r,
            conv_blocks_after_r: self.conv_blocks_after_r,
            num_classes: spec.num_classes,
            image_side: spec.image_side,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "config_version")]
    pub format_version: u32,
    pub dataset: DatasetSource,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub network: NetworkSettings,
    #[serde(default = "default_protocol")]
    pub protocol: Protocol,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn config_version() -> u32 {
    CONFIG_FORMAT_VERSION
}

fn default_method() -> Method {
    Method::Tally
}

fn default_protocol() -> Protocol {
    Protocol::Subpopulation
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl ExperimentConfig {
    pub fn new(dataset: DatasetSource) -> Self {
        ExperimentConfig {
            format_version: CONFIG_FORMAT_VERSION,
            dataset,
            method: default_method(),
            train: TrainConfig::default(),
            network: NetworkSettings::default(),
            protocol: default_protocol(),
            seeds: default_seeds(),
            output_dir: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != CONFIG_FORMAT_VERSION {
            return Err(Error::Version {
                expected: CONFIG_FORMAT_VERSION,
                found: self.format_version,
            });
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::Config("seed list contains duplicates".into()));
        }
        self.validate_method(self.method)?;
        if let DatasetSource::Spec(spec) = &self.dataset {
            spec.validate().map_err(|e| Error::Config(e.to_string()))?;
            self.network.for_dataset(spec).validate()?;
        }
        Ok(())
    }

    /// Method-specific checks on top of the shared training config.
    pub fn validate_method(&self, method: Method) -> Result<()> {
        let train = method.apply(&self.train);
        train.validate()?;
        if !method.is_erm() && self.train.warm_start_epochs >= self.train.epochs {
            return Err(Error::Config(format!(
                "method {} needs warm_start_epochs < epochs (got {} >= {})",
                method.name(),
                self.train.warm_start_epochs,
                self.train.epochs
            )));
        }
        if method.is_erm() && self.train.erm_sampler == SamplerStrategy::Selective {
            return Err(Error::Config("selective sampling draws pairs and cannot drive ERM batches".into()));
        }
        Ok(())
    }

    /// The complete configuration of one (method, seed) run.
    pub fn resolve(&self, method: Method, seed: u64, dataset: &DatasetSpec) -> Result<RunConfig> {
        self.validate_method(method)?;
        let network = self.network.for_dataset(dataset);
        network.validate()?;
        Ok(RunConfig {
            format_version: CONFIG_FORMAT_VERSION,
            method,
            protocol: self.protocol,
            seed,
            dataset: dataset.clone(),
            network,
            train: TrainConfig {
                seed,
                ..method.apply(&self.train)
            },
        })
    }
}

/// Everything that determines one run's result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub format_version: u32,
    pub method: Method,
    pub protocol: Protocol,
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub network: NetworkConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("run configs always serialize")
    }
}

pub fn run_dir(root: &Path, method: Method, seed: u64) -> PathBuf {
    root.join(method.name()).join(format!("seed_{seed}"))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn log_lines(state: &TrainState) -> Result<String> {
    let mut out = String::new();
    for entry in &state.log {
        out.push_str(&serde_json::to_string(entry)?);
        out.push('\n');
    }
    Ok(out)
}

fn train_one(run: &RunConfig, train: &Dataset, val: &Dataset, out: Option<(&Path, &str)>) -> Result<TrainState> {
    let val = (!val.is_empty()).then_some(val);
    let mut trainer = Trainer::new(train, val, run.network.clone(), run.train.clone())?;
    trainer.run()?;
    let state = trainer.into_state();
    if let Some((dir, suffix)) = out {
        checkpoint::save(&state, &dir.join(format!("checkpoint{suffix}.bin")))?;
        write(&dir.join(format!("train_log{suffix}.jsonl")), log_lines(&state)?.as_bytes())?;
    }
    Ok(state)
}

/// Train and evaluate one (method, seed) cell. With `out`, the run's
/// artifacts are written there.
pub fn run_cell(splits: &DatasetSplits, run: &RunConfig, out: Option<&Path>) -> Result<RunReport> {
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write(&dir.join("config.json"), (serde_json::to_string_pretty(run)? + "\n").as_bytes())?;
    }
    let spec = &splits.spec;
    let train_counts = splits.train.class_totals();
    info!("run {} seed {} ({})", run.method.name(), run.seed, run.protocol);
    let report = match run.protocol {
        Protocol::Subpopulation => {
            check_protocol(&splits.test, Protocol::Subpopulation)?;
            let state = train_one(run, &splits.train, &splits.val, out.map(|d| (d, "")))?;
            let samples = collect_logits(&state.network, &splits.test)?;
            let metrics = metrics_from_samples(&samples, spec.num_classes, spec.num_domains, &train_counts)?;
            let i_acc = invariance_acc(&samples, spec.num_domains, &LogRegSettings::default())
                .map_err(|e| warn!("I_acc not computed: {e}"))
                .ok();
            let i_kl = invariance_kl(&samples, spec.num_classes, spec.num_domains)
                .map_err(|e| warn!("I_kl not computed: {e}"))
                .ok()
                .map(|r| r.value);
            RunReport::new(run.method.name(), run.protocol, run.seed, run.to_value(), metrics, i_acc, i_kl)
        }
        Protocol::DomainShift => {
            let mut pooled: Vec<LogitSample> = Vec::new();
            for held in 0..spec.num_domains {
                let fold = leave_one_domain_out(splits, held)?;
                check_protocol(&fold.test, Protocol::DomainShift)?;
                let suffix = format!("_fold{held}");
                let state = train_one(run, &fold.train, &fold.val, out.map(|d| (d, suffix.as_str())))?;
                pooled.extend(collect_logits(&state.network, &fold.test)?);
            }
            let metrics = metrics_from_samples(&pooled, spec.num_classes, spec.num_domains, &train_counts)?;
            RunReport::new(run.method.name(), run.protocol, run.seed, run.to_value(), metrics, None, None)
        }
    };
    if let Some(dir) = out {
        write(&dir.join("report.json"), report.to_json()?.as_bytes())?;
    }
    Ok(report)
}

/// Run every (method, seed) cell; cells are independent and run in
/// parallel. Reports come back in grid order (methods outer, seeds inner).
pub fn sweep(cfg: &ExperimentConfig, methods: &[Method], out: Option<&Path>) -> Result<Vec<RunReport>> {
    cfg.validate()?;
    if methods.is_empty() {
        return Err(Error::Config("no methods to run".into()));
    }
    for m in methods {
        cfg.validate_method(*m)?;
    }
    let splits = cfg.dataset.load()?;
    let mut cells = Vec::new();
    for m in methods {
        for s in &cfg.seeds {
            cells.push(cfg.resolve(*m, *s, &splits.spec)?);
        }
    }
    par::map_slice(&cells, |run| {
        let dir = out.map(|root| run_dir(root, run.method, run.seed));
        run_cell(&splits, run, dir.as_deref())
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ExperimentConfig {
        let spec = DatasetSpec {
            head_count: 8,
            image_side: 6,
            channels: 2,
            imbalance_ratio: 4.0,
            val_per_cell: 1,
            test_per_cell: 6,
            ..DatasetSpec::new(3, 2)
        };
        let mut cfg = ExperimentConfig::new(DatasetSource::Spec(spec));
        cfg.train = TrainConfig {
            batch_size: 4,
            epochs: 2,
            steps_per_epoch: 2,
            warm_start_epochs: 1,
            ..TrainConfig::default()
        };
        cfg.network.hidden_channels = 3;
        cfg.seeds = vec![0, 1];
        cfg
    }

    #[test]
    fn methods_round_trip_names() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.name()).unwrap(), m);
        }
        assert!(Method::parse("bogus").is_err());
    }

    #[test]
    fn config_json_round_trip_and_defaults() {
        let cfg = tiny_config();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
        let minimal = r#"{"dataset": {"spec": {"num_classes": 3, "num_domains": 2}}}"#;
        let parsed = ExperimentConfig::from_json(minimal).unwrap();
        assert_eq!(parsed.train, TrainConfig::default());
        assert!(ExperimentConfig::from_json(r#"{"dataset": {"spec": {"num_classes": 3, "num_domains": 2}}, "bogus": 1}"#).is_err());
    }

    #[test]
    fn invalid_combinations_are_config_errors() {
        let mut cfg = tiny_config();
        cfg.seeds.clear();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = tiny_config();
        cfg.train.warm_start_epochs = cfg.train.epochs;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.method = Method::Erm;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn sweep_writes_grid() {
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let reports = sweep(&cfg, &[Method::Erm, Method::Tally], Some(dir.path())).unwrap();
        assert_eq!(reports.len(), 4);
        for m in ["erm", "tally"] {
            for s in [0, 1] {
                let d = dir.path().join(m).join(format!("seed_{s}"));
                for f in ["config.json", "report.json", "checkpoint.bin", "train_log.jsonl"] {
                    assert!(d.join(f).exists(), "{}", d.join(f).display());
                }
            }
        }
    }

    #[test]
    fn domain_shift_reports_every_fold() {
        let mut cfg = tiny_config();
        cfg.protocol = Protocol::DomainShift;
        cfg.seeds = vec![0];
        let r = sweep(&cfg, &[Method::Tally], None).unwrap();
        assert!(r[0].metrics.per_domain_accuracy.iter().all(Option::is_some));
        assert!(r[0].invariance_acc.is_none());
    }
}
