//! Experiment configuration and the train / eval / compare / sweep drivers
//! behind the `ibcnn` command line.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{read_dataset, synth_blobs, BlobParams, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{mean_std, EvalReport};
use crate::network::{paper_preset, small_preset, HeadKind, LayerSpec, NetworkSpec, TrainConfig};
use crate::train::{IterationReport, Model};

/// Decision layer variants compared by the drivers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadName {
    /// Sigmoid cross-entropy on an inner-product layer.
    Cnn,
    /// Per-batch boosting.
    Bcnn,
    /// Incremental boosting with the mixed strong/weak loss.
    Ibcnn,
    /// Incremental boosting with the strong loss only (beta = 1).
    IbcnnS,
}

impl HeadName {
    pub const ALL: [HeadName; 4] = [HeadName::Cnn, HeadName::Bcnn, HeadName::Ibcnn, HeadName::IbcnnS];

    pub fn kind(self) -> HeadKind {
        match self {
            HeadName::Cnn => HeadKind::SigmoidCe,
            HeadName::Bcnn => HeadKind::Boost,
            HeadName::Ibcnn | HeadName::IbcnnS => HeadKind::IncrementalBoost,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            HeadName::Cnn => "cnn",
            HeadName::Bcnn => "bcnn",
            HeadName::Ibcnn => "ibcnn",
            HeadName::IbcnnS => "ibcnn-s",
        }
    }
}

impl fmt::Display for HeadName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HeadName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HeadName::ALL
            .into_iter()
            .find(|h| h.as_str() == s)
            .ok_or_else(|| Error::Config {
                field: "head".into(),
                reason: format!("unknown head `{s}` (expected cnn, bcnn, ibcnn or ibcnn-s)"),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Paper,
    Small,
    Inline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub preset: Preset,
    /// Overrides the width K of the terminal affine layer.
    pub fc_width: Option<usize>,
    /// Layer stack for `preset = "inline"`.
    pub layers: Vec<LayerSpec>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            preset: Preset::Small,
            fc_width: None,
            layers: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetSource {
    Synth,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    /// Seed of the synthetic training split (the test split uses seed + 1).
    /// Defaults to the experiment seed.
    pub seed: Option<u64>,
    pub n_train: usize,
    pub n_test: usize,
    pub positive_rate: f64,
    pub shape: [usize; 3],
    pub amplitude: f64,
    pub noise_sigma: f64,
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            source: DatasetSource::Synth,
            seed: None,
            n_train: 2000,
            n_test: 500,
            positive_rate: 0.5,
            shape: [1, 32, 32],
            amplitude: 2.0,
            noise_sigma: 1.0,
            train_path: None,
            test_path: None,
        }
    }
}

impl DatasetConfig {
    pub fn blob_params(&self, train: bool) -> BlobParams {
        let seed = self.seed.unwrap_or(0);
        BlobParams {
            seed: if train { seed } else { seed.wrapping_add(1) },
            n: if train { self.n_train } else { self.n_test },
            positive_rate: self.positive_rate,
            shape: self.shape,
            amplitude: self.amplitude,
            noise_sigma: self.noise_sigma,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepParam {
    EtaC,
    FcWidth,
    LearningRate,
    Beta,
}

impl SweepParam {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepParam::EtaC => "eta-c",
            SweepParam::FcWidth => "fc-width",
            SweepParam::LearningRate => "learning-rate",
            SweepParam::Beta => "beta",
        }
    }

    /// Grid used when none is configured.
    pub fn default_grid(self) -> Vec<f64> {
        match self {
            SweepParam::EtaC => vec![0.5, 1.0, 2.0, 4.0, 8.0, 16.0],
            SweepParam::FcWidth => vec![64.0, 128.0, 256.0, 512.0, 1024.0, 2048.0],
            SweepParam::LearningRate => vec![1e-3, 3e-3, 1e-2, 3e-2, 0.1, 0.3],
            SweepParam::Beta => vec![0.0, 0.25, 0.5, 0.75, 1.0],
        }
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [SweepParam::EtaC, SweepParam::FcWidth, SweepParam::LearningRate, SweepParam::Beta]
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config {
                field: "sweep.param".into(),
                reason: format!("unknown parameter `{s}` (expected eta-c, fc-width, learning-rate or beta)"),
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub param: SweepParam,
    /// Empty means the parameter's default grid.
    pub grid: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            param: SweepParam::EtaC,
            grid: Vec::new(),
        }
    }
}

/// Everything needed to reproduce a run. Parsed from TOML; every field has a
/// default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub head: HeadName,
    /// Heads trained by `compare` and `sweep`.
    pub heads: Vec<HeadName>,
    pub repeats: usize,
    pub out: PathBuf,
    pub network: NetworkConfig,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 7,
            head: HeadName::Ibcnn,
            heads: vec![HeadName::Cnn, HeadName::Bcnn, HeadName::Ibcnn],
            repeats: 5,
            out: PathBuf::from("runs"),
            network: NetworkConfig::default(),
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

fn config_err(field: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        reason: reason.into(),
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| config_err("config", e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path).map_err(Error::file(path))?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err("config", e.to_string()))
    }

    /// Sets one dotted field (`train.epochs`, `dataset.amplitude`, ...) from
    /// a TOML literal or bare string.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut doc: toml::Table = toml::from_str(&self.to_toml()?).map_err(|e| config_err(key, e.to_string()))?;
        let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        let parts: Vec<&str> = key.split('.').collect();
        let (last, path) = parts.split_last().ok_or_else(|| config_err(key, "empty key"))?;
        let mut table = &mut doc;
        for p in path {
            table = table
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| config_err(key, format!("`{p}` is not a table")))?;
        }
        table.insert(last.to_string(), parsed);
        *self = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| config_err(key, e.to_string()))?;
        Ok(())
    }

    /// Fills derived defaults and validates. The result fully determines a run.
    pub fn resolve(mut self) -> Result<Self> {
        if self.dataset.seed.is_none() {
            self.dataset.seed = Some(self.seed);
        }
        self.train.seed = self.seed;
        if self.sweep.grid.is_empty() {
            self.sweep.grid = self.sweep.param.default_grid();
        }
        self.train.validate()?;
        if self.heads.is_empty() {
            return Err(config_err("heads", "at least one head is required"));
        }
        if self.repeats == 0 {
            return Err(config_err("repeats", "must be at least 1"));
        }
        for &v in &self.sweep.grid {
            let ok = match self.sweep.param {
                SweepParam::FcWidth => v >= 1.0 && v.fract() == 0.0,
                SweepParam::EtaC => v > 0.0 && v.is_finite(),
                SweepParam::LearningRate => v > 0.0 && v.is_finite(),
                SweepParam::Beta => (0.0..=1.0).contains(&v),
            };
            if !ok {
                return Err(config_err("sweep.grid", format!("{v} is not valid for {}", self.sweep.param.as_str())));
            }
        }
        if let Some(0) = self.network.fc_width {
            return Err(config_err("network.fc_width", "must be positive"));
        }
        match self.dataset.source {
            DatasetSource::Synth => {
                let d = &self.dataset;
                if !(d.positive_rate > 0.0 && d.positive_rate < 1.0) {
                    return Err(config_err("dataset.positive_rate", "must lie in (0, 1)"));
                }
                if d.n_train < 2 || d.n_test < 2 {
                    return Err(config_err("dataset.n_train", "both splits need at least 2 samples"));
                }
            }
            DatasetSource::File => {
                if self.dataset.train_path.is_none() {
                    return Err(config_err("dataset.train_path", "required when source = \"file\""));
                }
                if self.dataset.test_path.is_none() {
                    return Err(config_err("dataset.test_path", "required when source = \"file\""));
                }
            }
        }
        self.network_spec(self.head)?;
        Ok(self)
    }

    /// Short digest of the configuration, ignoring the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        let text = c.to_toml().unwrap_or_default();
        let digest = Sha256::digest(text.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn input_shape(&self) -> Result<[usize; 3]> {
        match self.dataset.source {
            DatasetSource::Synth => Ok(self.dataset.shape),
            DatasetSource::File => {
                let path = self.dataset.train_path.as_ref().ok_or_else(|| config_err("dataset.train_path", "missing"))?;
                Ok(read_dataset(path)?.image_shape())
            }
        }
    }

    pub fn network_spec(&self, head: HeadName) -> Result<NetworkSpec> {
        let shape = self.input_shape()?;
        let spec = match self.network.preset {
            Preset::Paper => paper_preset(shape)?,
            Preset::Small => small_preset(shape)?,
            Preset::Inline => {
                let spec = NetworkSpec {
                    input_shape: shape,
                    layers: self.network.layers.clone(),
                    head: head.kind(),
                };
                spec.shape_chain()?;
                spec
            }
        };
        let spec = match self.network.fc_width {
            Some(k) => spec.with_feature_dim(k),
            None => spec,
        };
        Ok(spec.with_head(head.kind()))
    }

    pub fn train_config(&self, head: HeadName, seed: u64) -> TrainConfig {
        let mut t = self.train.clone();
        t.seed = seed;
        if head == HeadName::IbcnnS {
            t.beta = 1.0;
        }
        t
    }

    /// Training and test splits.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        match self.dataset.source {
            DatasetSource::Synth => Ok((
                synth_blobs(&self.dataset.blob_params(true))?,
                synth_blobs(&self.dataset.blob_params(false))?,
            )),
            DatasetSource::File => {
                let train = self.dataset.train_path.as_ref().ok_or_else(|| config_err("dataset.train_path", "missing"))?;
                let test = self.dataset.test_path.as_ref().ok_or_else(|| config_err("dataset.test_path", "missing"))?;
                Ok((read_dataset(train)?, read_dataset(test)?))
            }
        }
    }
}

/// Trains one head from scratch.
pub fn train_model(
    cfg: &ExperimentConfig,
    head: HeadName,
    seed: u64,
    train: &Dataset,
    on_iteration: impl FnMut(&IterationReport),
) -> Result<(Model, Vec<IterationReport>)> {
    let spec = cfg.network_spec(head)?;
    let mut model = Model::new(&spec, cfg.train_config(head, seed))?;
    let reports = model.fit(train, on_iteration)?;
    Ok((model, reports))
}

pub fn evaluate(model: &Model, data: &Dataset) -> Result<EvalReport> {
    if data.image_shape() != model.network.spec().input_shape {
        return Err(Error::Eval(format!(
            "dataset images {:?} do not match network input {:?}",
            data.image_shape(),
            model.network.spec().input_shape
        )));
    }
    let scores = model.scores(data.images())?;
    EvalReport::from_scores(&scores, data.labels())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const TRAIN_LOG_HEADER: [&str; 12] = [
    "config_hash",
    "seed",
    "head",
    "iteration",
    "epoch",
    "t",
    "loss",
    "strong_loss",
    "weak_loss",
    "active",
    "skipped",
    "selected",
];

fn log_row(hash: &str, seed: u64, head: HeadName, r: &IterationReport) -> Vec<String> {
    let selected = r
        .selected
        .iter()
        .map(|(j, a)| format!("{j}:{a}"))
        .collect::<Vec<_>>()
        .join(";");
    vec![
        hash.to_string(),
        seed.to_string(),
        head.to_string(),
        r.iteration.to_string(),
        r.epoch.to_string(),
        r.t.to_string(),
        r.loss.to_string(),
        opt(r.strong_loss),
        opt(r.weak_loss),
        r.active.to_string(),
        r.skipped.to_string(),
        selected,
    ]
}

pub struct TrainOutcome {
    pub model: Model,
    pub reports: Vec<IterationReport>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

/// Trains `cfg.head` and writes `checkpoint.ibck`, `train_log.csv` and
/// `config.toml` into `cfg.out`.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("config.toml"), cfg.to_toml()?)?;
    let (train, _) = cfg.load_data()?;
    let hash = cfg.hash();
    let log_path = cfg.out.join("train_log.csv");
    let mut log = csv::Writer::from_path(&log_path)?;
    log.write_record(TRAIN_LOG_HEADER)?;
    let mut write_err = None;
    let result = train_model(cfg, cfg.head, cfg.seed, &train, |r| {
        if write_err.is_none() {
            if let Err(e) = log.write_record(log_row(&hash, cfg.seed, cfg.head, r)) {
                write_err = Some(e);
            }
        }
    });
    log.flush()?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    let (model, reports) = result?;
    let checkpoint = cfg.out.join("checkpoint.ibck");
    save_checkpoint(&checkpoint, &model)?;
    Ok(TrainOutcome {
        model,
        reports,
        checkpoint,
        log: log_path,
    })
}

/// Scores `data` with a saved model; writes `eval.csv` into `out` if given.
pub fn cmd_eval(checkpoint: &Path, data: &Dataset, out: Option<&Path>) -> Result<EvalReport> {
    let model = load_checkpoint(checkpoint)?;
    let report = evaluate(&model, data)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("eval.csv"))?;
        let record = report.to_record();
        w.write_record(record.iter().map(|(k, _)| *k))?;
        w.write_record(record.iter().map(|(_, v)| v.as_str()))?;
        w.flush()?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub head: HeadName,
    pub repeat: usize,
    pub seed: u64,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadSummary {
    pub head: HeadName,
    pub runs: Vec<RunResult>,
    pub f1_mean: f64,
    pub f1_std: f64,
    pub two_afc_mean: f64,
    pub two_afc_std: f64,
}

impl HeadSummary {
    fn from_runs(head: HeadName, runs: Vec<RunResult>) -> Self {
        let f1s: Vec<f64> = runs.iter().map(|r| r.report.f1).collect();
        let afcs: Vec<f64> = runs.iter().map(|r| r.report.two_afc).collect();
        let (f1_mean, f1_std) = mean_std(&f1s);
        let (two_afc_mean, two_afc_std) = mean_std(&afcs);
        HeadSummary {
            head,
            runs,
            f1_mean,
            f1_std,
            two_afc_mean,
            two_afc_std,
        }
    }
}

/// Trains and evaluates one head `repeats` times with seeds `seed + i`.
pub fn run_head(cfg: &ExperimentConfig, head: HeadName, train: &Dataset, test: &Dataset) -> Result<HeadSummary> {
    let mut runs = Vec::with_capacity(cfg.repeats);
    for repeat in 0..cfg.repeats {
        let seed = cfg.seed.wrapping_add(repeat as u64);
        let (model, _) = train_model(cfg, head, seed, train, |_| {})?;
        runs.push(RunResult {
            head,
            repeat,
            seed,
            report: evaluate(&model, test)?,
        });
    }
    Ok(HeadSummary::from_runs(head, runs))
}

pub const COMPARE_HEADER: [&str; 13] = [
    "config_hash",
    "seed",
    "head",
    "row",
    "repeat",
    "f1",
    "two_afc",
    "accuracy",
    "f1_mean",
    "f1_std",
    "two_afc_mean",
    "two_afc_std",
    "runs",
];

/// Every head on identical data; writes `compare.csv` with one row per run
/// followed by one aggregate row per head.
pub fn cmd_compare(cfg: &ExperimentConfig) -> Result<Vec<HeadSummary>> {
    let (train, test) = cfg.load_data()?;
    let mut summaries = Vec::with_capacity(cfg.heads.len());
    for &head in &cfg.heads {
        let s = run_head(cfg, head, &train, &test).map_err(|e| Error::Eval(format!("head {head} failed: {e}")))?;
        summaries.push(s);
    }
    fs::create_dir_all(&cfg.out)?;
    let hash = cfg.hash();
    let mut w = csv::Writer::from_path(cfg.out.join("compare.csv"))?;
    w.write_record(COMPARE_HEADER)?;
    for s in &summaries {
        for r in &s.runs {
            w.write_record([
                hash.clone(),
                r.seed.to_string(),
                s.head.to_string(),
                "run".into(),
                r.repeat.to_string(),
                r.report.f1.to_string(),
                r.report.two_afc.to_string(),
                r.report.accuracy.to_string(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
            ])?;
        }
        w.write_record([
            hash.clone(),
            cfg.seed.to_string(),
            s.head.to_string(),
            "aggregate".into(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            s.f1_mean.to_string(),
            s.f1_std.to_string(),
            s.two_afc_mean.to_string(),
            s.two_afc_std.to_string(),
            s.runs.len().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(summaries)
}

/// Grid values as written to `sweep.csv`: integers plainly, others in the
/// shortest round-tripping form.
pub fn format_value(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v:?}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub head: HeadName,
    pub config_hash: String,
    pub outcome: std::result::Result<HeadSummary, String>,
}

/// Config with the swept parameter set to `value`.
pub fn sweep_point(cfg: &ExperimentConfig, value: f64) -> ExperimentConfig {
    let mut c = cfg.clone();
    match cfg.sweep.param {
        SweepParam::EtaC => c.train.eta_c = value,
        SweepParam::FcWidth => c.network.fc_width = Some(value as usize),
        SweepParam::LearningRate => c.train.learning_rate = value,
        SweepParam::Beta => c.train.beta = value,
    }
    c
}

pub const SWEEP_HEADER: [&str; 11] = [
    "config_hash",
    "seed",
    "param",
    "value",
    "head",
    "status",
    "f1_mean",
    "f1_std",
    "two_afc_mean",
    "two_afc_std",
    "error",
];

/// One compare per grid point, in grid order; writes `sweep.csv`. Failed
/// points become `failed` rows instead of aborting the sweep.
pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    let (train, test) = cfg.load_data()?;
    let mut rows = Vec::new();
    for &value in &cfg.sweep.grid {
        let point = sweep_point(cfg, value);
        let hash = point.hash();
        for &head in &cfg.heads {
            let outcome = run_head(&point, head, &train, &test).map_err(|e| e.to_string());
            rows.push(SweepRow {
                value,
                head,
                config_hash: hash.clone(),
                outcome,
            });
        }
    }
    fs::create_dir_all(&cfg.out)?;
    let mut w = csv::Writer::from_path(cfg.out.join("sweep.csv"))?;
    w.write_record(SWEEP_HEADER)?;
    for r in &rows {
        let mut rec = vec![
            r.config_hash.clone(),
            cfg.seed.to_string(),
            cfg.sweep.param.as_str().to_string(),
            format_value(r.value),
            r.head.to_string(),
        ];
        match &r.outcome {
            Ok(s) => rec.extend([
                "ok".to_string(),
                s.f1_mean.to_string(),
                s.f1_std.to_string(),
                s.two_afc_mean.to_string(),
                s.two_afc_std.to_string(),
                String::new(),
            ]),
            Err(e) => rec.extend([
                "failed".to_string(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                e.clone(),
            ]),
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_values_format() {
        assert_eq!(format_value(1024.0), "1024");
        assert_eq!(format_value(0.5), "0.5");
        assert_eq!(format_value(3e-4), "0.0003");
        assert_eq!(format_value(1e300), "1e300");
    }

    #[test]
    fn defaults_resolve() {
        let c = ExperimentConfig::default().resolve().unwrap();
        assert_eq!(c.train.batch_size, 100);
        assert_eq!(c.train.momentum, 0.9);
        assert_eq!(c.repeats, 5);
        assert_eq!(c.dataset.seed, Some(7));
        assert_eq!(c.sweep.grid, vec![0.5, 1.0, 2.0, 4.0, 8.0, 16.0]);
    }

    #[test]
    fn toml_round_trip_and_hash_ignores_out() {
        let c = ExperimentConfig::default().resolve().unwrap();
        let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        let mut moved = c.clone();
        moved.out = PathBuf::from("elsewhere");
        assert_eq!(moved.hash(), c.hash());
        let mut other = c.clone();
        other.train.beta = 0.25;
        assert_ne!(other.hash(), c.hash());
    }

    #[test]
    fn set_overrides_nested_fields() {
        let mut c = ExperimentConfig::default();
        c.set("train.epochs", "3").unwrap();
        c.set("dataset.amplitude", "1.25").unwrap();
        c.set("head", "ibcnn-s").unwrap();
        c.set("network.preset", "paper").unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.dataset.amplitude, 1.25);
        assert_eq!(c.head, HeadName::IbcnnS);
        assert_eq!(c.network.preset, Preset::Paper);
        assert!(matches!(c.set("train.nope", "1"), Err(Error::Config { .. })));
    }

    #[test]
    fn invalid_fields_are_named() {
        let mut c = ExperimentConfig::default();
        c.repeats = 0;
        assert!(matches!(c.resolve(), Err(Error::Config { field, .. }) if field == "repeats"));
        let mut c = ExperimentConfig::default();
        c.train.beta = 2.0;
        assert!(matches!(c.resolve(), Err(Error::Config { field, .. }) if field == "beta"));
    }

    #[test]
    fn ibcnn_s_forces_beta_one() {
        let c = ExperimentConfig::default().resolve().unwrap();
        assert_eq!(c.train_config(HeadName::IbcnnS, 3).beta, 1.0);
        assert_eq!(c.train_config(HeadName::Ibcnn, 3).beta, c.train.beta);
        assert_eq!(c.network_spec(HeadName::IbcnnS).unwrap(), c.network_spec(HeadName::Ibcnn).unwrap());
    }

    #[test]
    fn sweep_grids_match_studied_ranges() {
        let g = SweepParam::EtaC.default_grid();
        assert_eq!((g[0], *g.last().unwrap()), (0.5, 16.0));
        assert_eq!(
            SweepParam::FcWidth.default_grid(),
            vec![64.0, 128.0, 256.0, 512.0, 1024.0, 2048.0]
        );        assert_eq!("beta".parse::<SweepParam>().unwrap(), SweepParam::Beta);
        let mut c = ExperimentConfig::default();
        c.sweep.param = SweepParam::Beta;
        c.sweep.grid = vec![0.5, 1.5];
        assert!(matches!(c.resolve(), Err(Error::Config { field, .. }) if field == "sweep.grid"));
    }
}
