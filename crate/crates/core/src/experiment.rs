//! Experiment configuration, command orchestration and report emission.
//!
//! Every command writes into one output directory:
//!
//! * `config.resolved.toml` - the configuration with all defaults filled in
//! * `summary.json` - metrics and checks, derived only from the CSV files
//! * `manifest.json` - file hashes, versions and wall time
//! * command-specific CSV series (see `docs/output-format.md`)

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::{info, warn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{encode_image, load_mnist_4x4, ImageDataset, Split};
use crate::device::{
    bl_relative_error, bl_residual_volts, build_bl_lut, solve_bl_drop_exact, BlDropLut,
    DeviceParams,
};
use crate::error::{Error, Result};
use crate::extraction::{
    delta_w_analysis, extract_weights_hwa_with, extract_weights_ideal, fit_metrics,
    generate_wem_stimuli, histogram, pair_time_unit, predict_with, rescale_to_saturation, rng_for,
    ExtractionModel, FitMode, MeasurementBatch, OptimizerConfig, PairCase, StimulusConfig,
    SyntheticChip, WemMethod,
};
use crate::timeslot::{PulseVector, SlotOptions};
use crate::training::{
    ablation_variants, all_logits, decision_margin, predict_labels,
    retrain_hwa, train_baseline, Activation, HwaContext, Mlp, Mode, NetworkSpec, OptimizerSpec,
    Quadrant, TrainingHistory,
};
use crate::vmm::{BlSource, HwaFlags, QuantizerSpec};

/// Version of the summary, manifest and CSV column contracts.
pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable naming the MNIST directory.
pub const DATA_DIR_ENV: &str = "TDVMM_DATA_DIR";

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantizerConfig {
    /// DAC resolution of network layer inputs; 0 drives continuous pulses.
    pub input_bits: u32,
    /// ADC resolution of network layer outputs; 0 reads analog values.
    pub output_bits: u32,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            input_bits: 5,
            output_bits: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LutConfig {
    pub points: usize,
    /// Lowest tabulated current (A); the top follows the array's largest cell.
    pub i_min: f64,
    /// Random currents compared against the exact solver by `lut-check`.
    pub check_samples: usize,
}

impl Default for LutConfig {
    fn default() -> Self {
        Self {
            points: crate::device::DEFAULT_LUT_POINTS,
            i_min: crate::device::DEFAULT_LUT_I_MIN,
            check_samples: 10_000,
        }
    }
}

impl LutConfig {
    fn rebuild(&self, params: &DeviceParams, like: &BlDropLut) -> Result<BlDropLut> {
        build_bl_lut(params, self.i_min, like.i_max(), self.points)
    }
}

/// Synthetic silicon standing in for a measured chip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChipConfig {
    /// Standard deviation of programmed threshold voltages (V).
    pub vth_spread: f64,
    pub vth_shift: f64,
    /// Output noise sigma as a fraction of `v_sat`.
    pub noise_fraction: f64,
}

impl Default for ChipConfig {
    fn default() -> Self {
        Self {
            vth_spread: 0.04,
            vth_shift: 0.0,
            noise_fraction: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeltaWConfig {
    pub pulse_code: u32,
    /// Seconds per code; unset picks half the output span for the largest pair.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time_unit: Option<f64>,
    pub bins: usize,
}

impl Default for DeltaWConfig {
    fn default() -> Self {
        Self {
            pulse_code: 16,
            time_unit: None,
            bins: 40,
        }
    }
}

/// Stimuli used to score an extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestSource {
    /// Held-out MNIST test images.
    #[default]
    Mnist,
    /// A fresh uniform random batch.
    Wem3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractionConfig {
    pub methods: Vec<WemMethod>,
    pub models: Vec<ExtractionModel>,
    /// Number of chips, seeded `seed, seed + 1, ...`.
    pub seeds: usize,
    pub stimuli: StimulusConfig,
    /// Output quantile of each batch placed at saturation.
    pub saturation_quantile: f64,
    pub test_source: TestSource,
    pub test_count: usize,
    pub fit: FitMode,
    pub optimizer: OptimizerConfig,
    /// Measured batch to extract from instead of synthetic chips.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub measurements: Option<PathBuf>,
    /// Batch used for scoring; defaults to `measurements`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_measurements: Option<PathBuf>,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            methods: vec![WemMethod::Wem3, WemMethod::Wem4],
            models: ExtractionModel::ALL.to_vec(),
            seeds: 5,
            stimuli: StimulusConfig::default(),
            saturation_quantile: 0.997,
            test_source: TestSource::Mnist,
            test_count: 512,
            fit: FitMode::ThroughOrigin,
            optimizer: OptimizerConfig::default(),
            measurements: None,
            test_measurements: None,
        }
    }
}

/// Network description; quantizer resolution comes from `[quantizer]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub layers: Vec<usize>,
    pub activation: Activation,
    pub layer_flags: Vec<HwaFlags>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_scale: Option<f64>,
    pub max_cell_current: f64,
    pub output_headroom: f64,
    pub output_quantile: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let s = NetworkSpec::default();
        Self {
            layers: s.layers,
            activation: s.activation,
            layer_flags: s.layer_flags,
            weight_scale: s.weight_scale,
            max_cell_current: s.max_cell_current,
            output_headroom: s.output_headroom,
            output_quantile: s.output_quantile,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub retrain_epochs: usize,
    pub optimizer: OptimizerSpec,
    pub retrain_optimizer: OptimizerSpec,
    /// Training images used to fix the analog operating point.
    pub calibration_samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
    pub margin_bins: usize,
    /// Start from these weights instead of training a baseline.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_weights: Option<PathBuf>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            retrain_epochs: 1,
            optimizer: OptimizerSpec::default(),
            retrain_optimizer: OptimizerSpec::default(),
            calibration_samples: 256,
            train_limit: None,
            test_limit: None,
            margin_bins: 50,
            initial_weights: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Reject unknown keys (default). When false they are dropped with a warning.
    pub strict: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    pub device: DeviceParams,
    pub quantizer: QuantizerConfig,
    pub slots: SlotOptions,
    pub lut: LutConfig,
    pub chip: ChipConfig,
    pub deltaw: DeltaWConfig,
    pub extraction: ExtractionConfig,
    pub network: NetworkConfig,
    pub training: TrainingConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            strict: true,
            out_dir: None,
            data_dir: None,
            device: DeviceParams::default(),
            quantizer: QuantizerConfig::default(),
            slots: SlotOptions::default(),
            lut: LutConfig::default(),
            chip: ChipConfig::default(),
            deltaw: DeltaWConfig::default(),
            extraction: ExtractionConfig::default(),
            network: NetworkConfig::default(),
            training: TrainingConfig::default(),
        }
    }
}

fn bad(key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    pub fn network_spec(&self) -> NetworkSpec {
        let bits = |b: u32| (b > 0).then_some(b);
        NetworkSpec {
            layers: self.network.layers.clone(),
            activation: self.network.activation,
            input_bits: bits(self.quantizer.input_bits),
            output_bits: bits(self.quantizer.output_bits),
            layer_flags: self.network.layer_flags.clone(),
            weight_scale: self.network.weight_scale,
            max_cell_current: self.network.max_cell_current,
            output_headroom: self.network.output_headroom,
            output_quantile: self.network.output_quantile,
        }
    }

    pub fn noise_sigma(&self) -> f64 {
        self.chip.noise_fraction * self.device.v_sat
    }

    pub fn validate(&self) -> Result<()> {
        self.device.validate()?;
        self.network_spec().validate(&self.device).map_err(|e| match e {
            Error::Config { key, message } => {
                let key = key.replace("network.input_bits", "quantizer.input_bits");
                bad(&key.replace("network.output_bits", "quantizer.output_bits"), message)
            }
            other => other,
        })?;
        if let Some(s) = self.slots.min_step {
            if !(s > 0.0 && s.is_finite()) {
                return Err(bad("slots.min_step", "must be > 0"));
            }
        }
        if self.slots.max_slots == 0 {
            return Err(bad("slots.max_slots", "must be > 0"));
        }
        if self.lut.points < 2 {
            return Err(bad("lut.points", "need at least 2 points"));
        }
        if !(self.lut.i_min > 0.0 && self.lut.i_min.is_finite()) {
            return Err(bad("lut.i_min", "must be > 0"));
        }
        if self.lut.check_samples == 0 {
            return Err(bad("lut.check_samples", "must be > 0"));
        }
        if !(self.chip.vth_spread >= 0.0 && self.chip.vth_spread.is_finite()) {
            return Err(bad("chip.vth_spread", "must be >= 0"));
        }
        if !self.chip.vth_shift.is_finite() {
            return Err(bad("chip.vth_shift", "must be finite"));
        }
        if !(self.chip.noise_fraction >= 0.0 && self.chip.noise_fraction.is_finite()) {
            return Err(bad("chip.noise_fraction", "must be >= 0"));
        }
        let x = &self.extraction;
        if x.stimuli.input_bits == 0 || x.stimuli.input_bits > 16 {
            return Err(bad("extraction.stimuli.input_bits", "must lie in 1..=16"));
        }
        if self.deltaw.pulse_code == 0 || self.deltaw.pulse_code >= 1 << x.stimuli.input_bits {
            return Err(bad("deltaw.pulse_code", "must be a non-zero DAC code"));
        }
        if let Some(t) = self.deltaw.time_unit {
            if !(t > 0.0 && t.is_finite()) {
                return Err(bad("deltaw.time_unit", "must be > 0"));
            }
        }
        if self.deltaw.bins == 0 {
            return Err(bad("deltaw.bins", "must be > 0"));
        }
        if x.methods.is_empty() {
            return Err(bad("extraction.methods", "list at least one method"));
        }
        if x.models.is_empty() {
            return Err(bad("extraction.models", "list at least one model"));
        }
        if x.seeds == 0 {
            return Err(bad("extraction.seeds", "must be > 0"));
        }
        if x.stimuli.count == 0 || x.stimuli.ramp_steps == 0 {
            return Err(bad("extraction.stimuli", "count and ramp_steps must be > 0"));
        }
        if !(x.stimuli.time_unit > 0.0 && x.stimuli.time_unit.is_finite()) {
            return Err(bad("extraction.stimuli.time_unit", "must be > 0"));
        }
        if !(x.saturation_quantile > 0.0 && x.saturation_quantile <= 1.0) {
            return Err(bad("extraction.saturation_quantile", "must lie in (0, 1]"));
        }
        if x.test_count == 0 {
            return Err(bad("extraction.test_count", "must be > 0"));
        }
        if x.optimizer.max_iter == 0 || !(x.optimizer.rel_tol >= 0.0) {
            return Err(bad("extraction.optimizer", "need max_iter > 0 and rel_tol >= 0"));
        }
        if x.test_measurements.is_some() && x.measurements.is_none() {
            return Err(bad("extraction.test_measurements", "requires extraction.measurements"));
        }
        let t = &self.training;
        for (key, o) in [("optimizer", &t.optimizer), ("retrain_optimizer", &t.retrain_optimizer)] {
            if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) {
                return Err(bad(&format!("training.{key}.learning_rate"), "must be > 0"));
            }
            if !(0.0..1.0).contains(&o.momentum) {
                return Err(bad(&format!("training.{key}.momentum"), "must lie in [0, 1)"));
            }
            if o.batch_size == 0 {
                return Err(bad(&format!("training.{key}.batch_size"), "must be > 0"));
            }
        }
        if t.retrain_epochs == 0 {
            return Err(bad("training.retrain_epochs", "must be > 0"));
        }
        if t.calibration_samples == 0 {
            return Err(bad("training.calibration_samples", "must be > 0"));
        }
        if t.margin_bins == 0 {
            return Err(bad("training.margin_bins", "must be > 0"));
        }
        if t.train_limit == Some(0) || t.test_limit == Some(0) {
            return Err(bad("training", "train_limit and test_limit must be > 0"));
        }
        Ok(())
    }

    /// The resolved configuration as TOML; loading it yields `self` again.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable")
    }

    /// Dataset root: `data_dir`, then `$TDVMM_DATA_DIR`, then `data/mnist`.
    pub fn resolve_data_dir(&self) -> PathBuf {
        if let Some(d) = &self.data_dir {
            return d.clone();
        }
        match std::env::var_os(DATA_DIR_ENV) {
            Some(d) if !d.is_empty() => PathBuf::from(d),
            _ => PathBuf::from("data/mnist"),
        }
    }

    /// Every key the schema knows, with optional fields filled in.
    fn schema() -> toml::Value {
        let mut c = Self {
            out_dir: Some(PathBuf::new()),
            data_dir: Some(PathBuf::new()),
            ..Self::default()
        };
        c.slots.min_step = Some(1.0);
        c.deltaw.time_unit = Some(1.0);
        c.extraction.measurements = Some(PathBuf::new());
        c.extraction.test_measurements = Some(PathBuf::new());
        c.network.weight_scale = Some(1.0);
        c.training.train_limit = Some(1);
        c.training.test_limit = Some(1);
        c.training.initial_weights = Some(PathBuf::new());
        toml::Value::try_from(c).expect("config is always representable")
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |p| p + 1) + 1;
    (line, col)
}

/// Removes keys absent from `schema`, returning their dotted paths.
fn prune_unknown(value: &mut toml::Value, schema: &toml::Value, prefix: &str, dropped: &mut Vec<String>) {
    match (value, schema) {
        (toml::Value::Table(t), toml::Value::Table(s)) => {
            let keys: Vec<String> = t.keys().cloned().collect();
            for k in keys {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match s.get(&k) {
                    Some(sub) => prune_unknown(t.get_mut(&k).expect("present"), sub, &path, dropped),
                    None => {
                        t.remove(&k);
                        dropped.push(path);
                    }
                }
            }
        }
        (toml::Value::Array(a), toml::Value::Array(s)) => {
            if let Some(first) = s.first() {
                for (i, v) in a.iter_mut().enumerate() {
                    prune_unknown(v, first, &format!("{prefix}[{i}]"), dropped);
                }
            }
        }
        _ => {}
    }
}

/// Parses and validates a configuration; `origin` labels diagnostics.
pub fn config_from_str(text: &str, origin: &str) -> Result<ExperimentConfig> {
    let located = |e: toml::de::Error| {
        let at = match e.span() {
            Some(span) => {
                let (l, c) = line_col(text, span.start);
                format!("{origin}:{l}:{c}")
            }
            None => origin.to_string(),
        };
        bad(&at, e.message().trim().to_string())
    };
    let table: toml::Table = toml::from_str(text).map_err(located)?;
    let strict = match table.get("strict") {
        None => true,
        Some(toml::Value::Boolean(b)) => *b,
        Some(_) => return Err(bad(&format!("{origin}: strict"), "must be a boolean")),
    };
    let cfg: ExperimentConfig = if strict {
        toml::from_str(text).map_err(located)?
    } else {
        let mut value = toml::Value::Table(table);
        let mut dropped = Vec::new();
        prune_unknown(&mut value, &ExperimentConfig::schema(), "", &mut dropped);
        for key in &dropped {
            warn!("{origin}: ignoring unknown key `{key}`");
        }
        value
            .try_into()
            .map_err(|e: toml::de::Error| bad(origin, e.message().trim().to_string()))?
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn config_load(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    config_from_str(&text, &path.display().to_string())
}

// ---------------------------------------------------------------------------
// Commands

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Deltaw,
    Extract,
    Train,
    Retrain,
    Ablate,
    DmReport,
    LutCheck,
}

impl Command {
    pub const ALL: [Command; 7] = [
        Command::Deltaw,
        Command::Extract,
        Command::Train,
        Command::Retrain,
        Command::Ablate,
        Command::DmReport,
        Command::LutCheck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Deltaw => "deltaw",
            Command::Extract => "extract",
            Command::Train => "train",
            Command::Retrain => "retrain",
            Command::Ablate => "ablate",
            Command::DmReport => "dm-report",
            Command::LutCheck => "lut-check",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::arg(format!("unknown command `{s}`")))
    }
}

/// Flat metric map; `None` marks a value with no finite representation.
pub type Metrics = BTreeMap<String, Option<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub command: Command,
    pub seed: u64,
    pub metrics: Metrics,
    pub checks: BTreeMap<String, bool>,
}

impl Summary {
    pub fn passed(&self) -> bool {
        self.checks.values().all(|&ok| ok)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub tool: String,
    pub version: String,
    pub command: Command,
    pub seed: u64,
    pub config_sha256: String,
    pub files: Vec<FileEntry>,
    pub wall_time_s: f64,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex(Sha256::digest(bytes).as_slice())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_path_buf(),
            offset,
            message: format!("{other:?}"),
        },
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn metric(m: &Metrics, key: &str) -> Option<f64> {
    m.get(key).copied().flatten()
}

// --- deltaw ---------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaWRow {
    pub case: String,
    pub row_a: usize,
    pub row_b: usize,
    pub column: usize,
    /// Amps.
    pub delta_w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistRow {
    pub series: String,
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

fn deltaw_metrics(rows: &[DeltaWRow]) -> Metrics {
    let mut m = Metrics::new();
    for case in PairCase::ALL {
        let v: Vec<f64> = rows.iter().filter(|r| r.case == case.name()).map(|r| r.delta_w).collect();
        if !v.is_empty() {
            m.insert(format!("delta_w.mean.{}", case.name()), finite(mean(&v)));
            m.insert(format!("delta_w.count.{}", case.name()), Some(v.len() as f64));
        }
    }
    if let (Some(a), Some(c)) = (metric(&m, "delta_w.mean.A"), metric(&m, "delta_w.mean.C")) {
        m.insert("delta_w.ratio_a_c".into(), finite(a / c));
    }
    m
}

fn deltaw_checks(m: &Metrics) -> BTreeMap<String, bool> {
    let mut c = BTreeMap::new();
    if let (Some(a), Some(b), Some(cc)) = (
        metric(m, "delta_w.mean.A"),
        metric(m, "delta_w.mean.B"),
        metric(m, "delta_w.mean.C"),
    ) {
        c.insert("case_order".into(), cc > b && b > a);
        c.insert("case_a_negligible".into(), a.abs() < 0.01 * cc);
    }
    c
}

fn shared_histograms(series: &[(&str, Vec<f64>)], bins: usize) -> Vec<HistRow> {
    let all = series.iter().flat_map(|(_, v)| v.iter().copied());
    let lo = all.clone().fold(f64::INFINITY, f64::min);
    let hi = all.fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() {
        return Vec::new();
    }
    let hi = if hi > lo { hi } else { lo + lo.abs().max(1e-30) * 1e-9 };
    series
        .iter()
        .flat_map(|(name, v)| {
            histogram(v, lo, hi, bins).into_iter().map(move |b| HistRow {
                series: name.to_string(),
                lo: b.lo,
                hi: b.hi,
                count: b.count,
            })
        })
        .collect()
}

fn draw_chip(cfg: &ExperimentConfig, seed: u64, noise_sigma: f64) -> Result<SyntheticChip> {
    let mut chip =
        SyntheticChip::draw(&cfg.device, cfg.chip.vth_spread, cfg.chip.vth_shift, noise_sigma, seed)?;
    chip.lut = cfg.lut.rebuild(&cfg.device, &chip.lut)?;
    chip.slots = cfg.slots.clone();
    Ok(chip)
}

fn run_deltaw(cfg: &ExperimentConfig, out: &Path) -> Result<Metrics> {
    let chip = draw_chip(cfg, cfg.seed, 0.0)?;
    let code = cfg.deltaw.pulse_code;
    let tu = match cfg.deltaw.time_unit {
        Some(t) => t,
        None => pair_time_unit(&chip.weights, &cfg.device, code)?,
    };
    chip.weights.save(&out.join("weights_truth.txt"))?;
    let mut rows = Vec::new();
    for case in PairCase::ALL {
        let rep = delta_w_analysis(&chip.weights, &cfg.device, BlSource::Lut(&chip.lut), HwaFlags::FULL, case, code, tu)?;
        rows.extend(rep.samples.iter().map(|s| DeltaWRow {
            case: case.name().into(),
            row_a: s.row_a,
            row_b: s.row_b,
            column: s.column,
            delta_w: s.delta_w,
        }));
    }
    let series: Vec<(&str, Vec<f64>)> = PairCase::ALL
        .iter()
        .map(|c| (c.name(), rows.iter().filter(|r| r.case == c.name()).map(|r| r.delta_w).collect()))
        .collect();
    write_csv(&out.join("deltaw_samples.csv"), &rows)?;
    write_csv(&out.join("deltaw_histogram.csv"), &shared_histograms(&series, cfg.deltaw.bins))?;
    let mut m = deltaw_metrics(&rows);
    m.insert("delta_w.time_unit".into(), Some(tu));
    Ok(m)
}

// --- extract --------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub seed: u64,
    pub method: String,
    pub model: String,
    pub sample: usize,
    pub column: usize,
    pub predicted: f64,
    pub measured: f64,
    /// False where the measurement sits at saturation and is left out of the fit.
    pub used: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SerRow {
    pub seed: u64,
    pub method: String,
    pub model: String,
    pub alpha_vmm: f64,
    /// Empty when the residual vanishes.
    pub ser: Option<f64>,
    pub residual_rms: f64,
    pub intercept: f64,
    pub points: usize,
    pub fit_loss: f64,
    pub iterations: usize,
    pub clamped: usize,
}

type SweepKey = (u64, String, String);

/// Slope, SER, residual rms, intercept and point count of one sweep entry.
type ScatterFit = (f64, Option<f64>, f64, f64, usize);

fn ser_from_scatter(rows: &[ScatterRow], fit: FitMode) -> Result<BTreeMap<SweepKey, ScatterFit>> {
    let mut groups: BTreeMap<SweepKey, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.used) {
        let g = groups.entry((r.seed, r.method.clone(), r.model.clone())).or_default();
        g.0.push(r.predicted);
        g.1.push(r.measured);
    }
    groups
        .into_iter()
        .map(|(k, (p, meas))| {
            let f = fit_metrics(&p, &meas, fit)?;
            Ok((k, (f.alpha_vmm, finite(f.ser), f.residual_rms, f.intercept, p.len())))
        })
        .collect()
}

fn extract_metrics(rows: &[SerRow]) -> Metrics {
    let mut m = Metrics::new();
    // (method, model) -> (finite SERs, slopes, any exact fit)
    type Group = (Vec<f64>, Vec<f64>, bool);
    let mut groups: BTreeMap<(String, String), Group> = BTreeMap::new();
    for r in rows {
        m.insert(format!("ser.{}.{}.seed{}", r.method, r.model, r.seed), r.ser);
        m.insert(format!("alpha.{}.{}.seed{}", r.method, r.model, r.seed), finite(r.alpha_vmm));
        let g = groups.entry((r.method.clone(), r.model.clone())).or_default();
        match r.ser {
            Some(s) => g.0.push(s),
            None => g.2 = true,
        }
        g.1.push(r.alpha_vmm);
    }
    for ((method, model), (sers, alphas, exact)) in &groups {
        let s = if *exact { None } else { finite(mean(sers)) };
        m.insert(format!("ser_mean.{method}.{model}"), s);
        m.insert(format!("alpha_mean.{method}.{model}"), finite(mean(alphas)));
    }
    let methods: std::collections::BTreeSet<&String> = groups.keys().map(|k| &k.0).collect();
    for method in methods {
        if let (Some(f), Some(i)) = (
            metric(&m, &format!("ser_mean.{method}.full")),
            metric(&m, &format!("ser_mean.{method}.ideal")),
        ) {
            m.insert(format!("ser_ratio.{method}.full_over_ideal"), finite(f / i));
        }
    }
    m
}

/// Full beats both single-mechanism models, each of which beats ideal.
fn ser_ordered(get: impl Fn(&str) -> Option<f64>) -> Option<bool> {
    let (i, b, x, f) = (get("ideal")?, get("bl-only")?, get("xt-only")?, get("full")?);
    Some(f > x && x > i && f > b && b > i)
}

fn extract_checks(m: &Metrics) -> BTreeMap<String, bool> {
    let mut c = BTreeMap::new();
    let mut methods = std::collections::BTreeSet::new();
    let mut seeds = std::collections::BTreeSet::new();
    for k in m.keys() {
        if let Some(rest) = k.strip_prefix("ser.") {
            let parts: Vec<&str> = rest.splitn(3, '.').collect();
            if parts.len() == 3 {
                methods.insert(parts[0].to_string());
                seeds.insert(parts[2].to_string());
            }
        }
    }
    for method in &methods {
        if let Some(ok) = ser_ordered(|model| metric(m, &format!("ser_mean.{method}.{model}"))) {
            c.insert(format!("ser_order_mean.{method}"), ok);
        }
        let per_seed: Option<Vec<bool>> = seeds
            .iter()
            .map(|s| ser_ordered(|model| metric(m, &format!("ser.{method}.{model}.{s}"))))
            .collect();
        if let Some(v) = per_seed {
            c.insert(format!("ser_order_every_seed.{method}"), v.iter().all(|&x| x));
        }
        if let Some(r) = metric(m, &format!("ser_ratio.{method}.full_over_ideal")) {
            c.insert(format!("ser_ratio.{method}"), r >= 1.3);
        }
    }
    c
}

/// Picks `count` distinct test images and encodes them as DAC pulses.
fn mnist_test_inputs(
    test: &ImageDataset,
    stim: &StimulusConfig,
    count: usize,
    seed: u64,
) -> Result<Vec<PulseVector>> {
    if test.len() < count {
        return Err(Error::State(format!(
            "test split has {} images, {} requested",
            test.len(),
            count
        )));
    }
    let q = QuantizerSpec::new(stim.input_bits, 1.0)?;
    let mut rng = rng_for(seed, 9);
    rand::seq::index::sample(&mut rng, test.len(), count)
        .into_iter()
        .map(|k| encode_image(&test.images[k], &q, stim.time_unit))
        .collect()
}

struct Scored {
    ser: SerRow,
    scatter: Vec<ScatterRow>,
}

#[allow(clippy::too_many_arguments)]
fn score_model(
    cfg: &ExperimentConfig,
    batch: &MeasurementBatch,
    test: &MeasurementBatch,
    lut: &BlDropLut,
    model: ExtractionModel,
    seed: u64,
    method: &str,
    out: &Path,
) -> Result<Scored> {
    let p = &cfg.device;
    let r = extract_weights_hwa_with(batch, model, p, lut, &cfg.extraction.optimizer, &cfg.slots)?;
    r.weights
        .save(&out.join(format!("weights/seed{seed}_{method}_{}.txt", model.name())))?;
    let pred = predict_with(&test.inputs, &r.weights, p, lut, model, &cfg.slots)?;
    let mut scatter = Vec::with_capacity(pred.len() * p.cols);
    for (sample, (yp, ym)) in pred.iter().zip(&test.outputs).enumerate() {
        for (column, (&predicted, &measured)) in yp.iter().zip(ym).enumerate() {
            scatter.push(ScatterRow {
                seed,
                method: method.into(),
                model: model.name().into(),
                sample,
                column,
                predicted,
                measured,
                used: measured < p.v_sat,
            });
        }
    }
    let fits = ser_from_scatter(&scatter, cfg.extraction.fit)?;
    let (alpha_vmm, ser, residual_rms, intercept, points) = *fits
        .values()
        .next()
        .ok_or_else(|| Error::Metric("every test output is saturated".into()))?;
    info!("seed {seed} {method} {}: SER {:?}, alpha {alpha_vmm:.4}", model.name(), ser);
    Ok(Scored {
        ser: SerRow {
            seed,
            method: method.into(),
            model: model.name().into(),
            alpha_vmm,
            ser,
            residual_rms,
            intercept,
            points,
            fit_loss: r.fit_loss,
            iterations: r.iterations,
            clamped: r.clamped,
        },
        scatter,
    })
}

fn run_extract(cfg: &ExperimentConfig, out: &Path) -> Result<Metrics> {
    let x = &cfg.extraction;
    let p = &cfg.device;
    let mut sers = Vec::new();
    let mut scatter = Vec::new();
    for sub in ["weights", "measurements"] {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    if let Some(path) = &x.measurements {
        let batch = MeasurementBatch::load(path)?;
        batch.validate_for(p)?;
        let test = match &x.test_measurements {
            Some(t) => MeasurementBatch::load(t)?,
            None => batch.clone(),
        };
        test.validate_for(p)?;
        let init = extract_weights_ideal(&batch, p)?;
        let top = init.weights.max_current().max(f64::MIN_POSITIVE);
        let lut = BlDropLut::covering_with(p, 2.0 * top, cfg.lut.i_min, cfg.lut.points)?;
        let method = batch.provenance.generator.clone();
        for &model in &x.models {
            let s = score_model(cfg, &batch, &test, &lut, model, cfg.seed, &method, out)?;
            sers.push(s.ser);
            scatter.extend(s.scatter);
        }
    } else {
        let dir = cfg.resolve_data_dir();
        let train = if x.methods.contains(&WemMethod::Wem4) {
            Some(load_mnist_4x4(&dir, Split::Train)?)
        } else {
            None
        };
        let test_images = match x.test_source {
            TestSource::Mnist => Some(load_mnist_4x4(&dir, Split::Test)?),
            TestSource::Wem3 => None,
        };
        for seed in cfg.seed..cfg.seed + x.seeds as u64 {
            let chip = draw_chip(cfg, seed, cfg.noise_sigma())?;
            chip.weights.save(&out.join(format!("weights/seed{seed}_truth.txt")))?;
            let raw_test = match &test_images {
                Some(ds) => mnist_test_inputs(ds, &x.stimuli, x.test_count, seed)?,
                None => {
                    let s = StimulusConfig { count: x.test_count, ..x.stimuli.clone() };
                    generate_wem_stimuli(WemMethod::Wem3, &s, p.rows, seed ^ 0x7e57, None)?
                }
            };
            let (tx, _) = rescale_to_saturation(&raw_test, &chip.weights, p, x.saturation_quantile)?;
            let test = chip.measure(&tx, "test", seed + 100)?;
            test.save(&out.join(format!("measurements/seed{seed}_test.csv")))?;
            for &method in &x.methods {
                let raw = generate_wem_stimuli(method, &x.stimuli, p.rows, seed, train.as_ref())?;
                let (inputs, _) = rescale_to_saturation(&raw, &chip.weights, p, x.saturation_quantile)?;
                let batch = chip.measure(&inputs, method.name(), seed)?;
                batch.save(&out.join(format!("measurements/seed{seed}_{}.csv", method.name())))?;
                for &model in &x.models {
                    let s = score_model(cfg, &batch, &test, &chip.lut, model, seed, method.name(), out)?;
                    sers.push(s.ser);
                    scatter.extend(s.scatter);
                }
            }
        }
    }
    write_csv(&out.join("ser.csv"), &sers)?;
    write_csv(&out.join("scatter.csv"), &scatter)?;
    Ok(extract_metrics(&sers))
}

// --- training family ------------------------------------------------------

/// Per-sample predicted classes, one column per model.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTable {
    pub labels: Vec<u8>,
    pub series: Vec<(String, Vec<usize>)>,
}

impl PredictionTable {
    fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        let mut head = vec!["sample".to_string(), "label".to_string()];
        head.extend(self.series.iter().map(|(n, _)| n.clone()));
        w.write_record(&head).map_err(|e| csv_err(path, e))?;
        for (k, y) in self.labels.iter().enumerate() {
            let mut rec = vec![k.to_string(), y.to_string()];
            rec.extend(self.series.iter().map(|(_, v)| v[k].to_string()));
            w.write_record(&rec).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let head = r.headers().map_err(|e| csv_err(path, e))?.clone();
        let names: Vec<String> = head.iter().skip(2).map(String::from).collect();
        let mut labels = Vec::new();
        let mut cols = vec![Vec::new(); names.len()];
        for rec in r.records() {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            let field = |i: usize| -> Result<usize> {
                rec.get(i).and_then(|s| s.parse().ok()).ok_or_else(|| Error::Format {
                    path: path.to_path_buf(),
                    offset: rec.position().map_or(0, |p| p.byte()),
                    message: format!("field {i} is not a class index"),
                })
            };
            labels.push(field(1)? as u8);
            for (c, col) in cols.iter_mut().enumerate() {
                col.push(field(c + 2)?);
            }
        }
        Ok(Self {
            labels,
            series: names.into_iter().zip(cols).collect(),
        })
    }

    fn accuracies(&self) -> Metrics {
        let n = self.labels.len().max(1) as f64;
        self.series
            .iter()
            .map(|(name, v)| {
                let ok = v.iter().zip(&self.labels).filter(|(p, &y)| **p == y as usize).count();
                (format!("accuracy.{name}"), Some(ok as f64 / n))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub phase: String,
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
}

fn history_rows(phase: &str, h: &TrainingHistory) -> Vec<HistoryRow> {
    h.epochs
        .iter()
        .map(|e| HistoryRow {
            phase: phase.into(),
            epoch: e.epoch,
            mean_loss: e.mean_loss,
            train_accuracy: e.train_accuracy,
        })
        .collect()
}

struct TrainData {
    train: ImageDataset,
    test: ImageDataset,
}

fn load_training_data(cfg: &ExperimentConfig) -> Result<TrainData> {
    let dir = cfg.resolve_data_dir();
    let mut train = load_mnist_4x4(&dir, Split::Train)?;
    let mut test = load_mnist_4x4(&dir, Split::Test)?;
    if let Some(n) = cfg.training.train_limit {
        train = train.take(n);
    }
    if let Some(n) = cfg.training.test_limit {
        test = test.take(n);
    }
    Ok(TrainData { train, test })
}

/// Baseline weights (trained or loaded) and the frozen analog operating point.
fn baseline(
    cfg: &ExperimentConfig,
    spec: &NetworkSpec,
    data: &TrainData,
    out: &Path,
    history: &mut Vec<HistoryRow>,
) -> Result<(Mlp, HwaContext)> {
    let w = match &cfg.training.initial_weights {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let w = Mlp::from_json(&text)?;
            w.check(spec)?;
            w
        }
        None => {
            let (w, h) = train_baseline(spec, &data.train, cfg.training.epochs, &cfg.training.optimizer, cfg.seed)?;
            history.extend(history_rows("baseline", &h));
            w
        }
    };
    write_text(&out.join("model_baseline.json"), &w.to_json())?;
    let n = cfg.training.calibration_samples.min(data.train.len());
    let mut ctx = HwaContext::calibrate(spec, &w, &cfg.device, &data.train.images[..n])?;
    ctx.lut = cfg.lut.rebuild(&cfg.device, &ctx.lut)?;
    ctx.slots = cfg.slots.clone();
    write_text(
        &out.join("calibration.json"),
        &serde_json::to_string_pretty(&ctx.layers).expect("plain data"),
    )?;
    Ok((w, ctx))
}

fn retrain(
    cfg: &ExperimentConfig,
    spec: &NetworkSpec,
    ctx: &HwaContext,
    data: &TrainData,
    w: &Mlp,
    out: &Path,
    history: &mut Vec<HistoryRow>,
) -> Result<Mlp> {
    let t = &cfg.training;
    let (w2, h) = retrain_hwa(spec, ctx, &data.train, w, t.retrain_epochs, &t.retrain_optimizer, cfg.seed)?;
    history.extend(history_rows("retrain", &h));
    write_text(&out.join("model_retrained.json"), &w2.to_json())?;
    Ok(w2)
}

fn train_checks(m: &Metrics, after: Option<&str>) -> BTreeMap<String, bool> {
    let mut c = BTreeMap::new();
    let q = metric(m, "accuracy.quantized");
    let before = metric(m, "accuracy.hwa").or(metric(m, "accuracy.hwa_before"));
    if let (Some(q), Some(h)) = (q, before) {
        c.insert("hwa_drop_positive".into(), q - h > 0.0);
    }
    if let (Some(q), Some(a)) = (q, after.and_then(|k| metric(m, k))) {
        c.insert("retrain_within_1pp".into(), q - a <= 0.01);
    }
    c
}

fn run_train(cfg: &ExperimentConfig, out: &Path, with_retrain: bool) -> Result<Metrics> {
    let spec = cfg.network_spec();
    let data = load_training_data(cfg)?;
    let mut history = Vec::new();
    let (w, ctx) = baseline(cfg, &spec, &data, out, &mut history)?;
    let test = &data.test;
    let mut series = vec![
        ("float".to_string(), predict_labels(&spec, &w, Mode::Float, None, test)?),
        ("quantized".to_string(), predict_labels(&spec, &w, Mode::Quantized, Some(&ctx), test)?),
    ];
    for (name, flags) in [("bl_only", HwaFlags::BL_ONLY), ("xt_only", HwaFlags::XT_ONLY)] {
        let s = spec.with_flags(flags);
        series.push((name.into(), predict_labels(&s, &w, Mode::Hwa, Some(&ctx), test)?));
    }
    let hwa = predict_labels(&spec, &w, Mode::Hwa, Some(&ctx), test)?;
    if with_retrain {
        series.push(("hwa_before".into(), hwa));
        let w2 = retrain(cfg, &spec, &ctx, &data, &w, out, &mut history)?;
        series.push(("hwa_after".into(), predict_labels(&spec, &w2, Mode::Hwa, Some(&ctx), test)?));
    } else {
        series.push(("hwa".into(), hwa));
    }
    write_csv(&out.join("history.csv"), &history)?;
    let table = PredictionTable {
        labels: test.labels.clone(),
        series,
    };
    table.write(&out.join("predictions.csv"))?;
    Ok(table.accuracies())
}

fn ablate_metrics(m: &Metrics) -> Metrics {
    let mut out = m.clone();
    if let Some(base) = metric(m, "accuracy.quantized") {
        for (k, v) in m {
            if let (Some(label), Some(v)) = (k.strip_prefix("accuracy.ablate_"), v) {
                out.insert(format!("degradation.{label}"), Some(base - v));
            }
        }
    }
    out
}

fn ablate_checks(m: &Metrics) -> BTreeMap<String, bool> {
    let mut c = BTreeMap::new();
    if let (Some(q), Some(none)) = (metric(m, "accuracy.quantized"), metric(m, "accuracy.ablate_none")) {
        c.insert("none_equals_quantized".into(), q == none);
    }
    if let Some(all) = metric(m, "degradation.all") {
        let singles: Vec<f64> = m
            .iter()
            .filter(|(k, _)| k.starts_with("degradation.layer"))
            .filter_map(|(_, v)| *v)
            .collect();
        c.insert("all_dominates_single".into(), singles.iter().all(|&s| all >= s));
    }
    c
}

fn run_ablate(cfg: &ExperimentConfig, out: &Path) -> Result<Metrics> {
    let spec = cfg.network_spec();
    let data = load_training_data(cfg)?;
    let mut history = Vec::new();
    let (w, ctx) = baseline(cfg, &spec, &data, out, &mut history)?;
    write_csv(&out.join("history.csv"), &history)?;
    let test = &data.test;
    let mut series = vec![(
        "quantized".to_string(),
        predict_labels(&spec, &w, Mode::Quantized, Some(&ctx), test)?,
    )];
    for (label, layers, s) in ablation_variants(&spec) {
        info!("ablation {label}: layers {layers:?}");
        series.push((format!("ablate_{label}"), predict_labels(&s, &w, Mode::Hwa, Some(&ctx), test)?));
    }
    let table = PredictionTable {
        labels: test.labels.clone(),
        series,
    };
    table.write(&out.join("predictions.csv"))?;
    Ok(ablate_metrics(&table.accuracies()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginRow {
    pub sample: usize,
    pub label: u8,
    pub float: f64,
    pub hwa_before: f64,
    pub hwa_after: f64,
    pub pred_float: usize,
    pub pred_before: usize,
    pub pred_after: usize,
}

fn quadrant_name(q: Quadrant) -> &'static str {
    match q {
        Quadrant::I => "i",
        Quadrant::II => "ii",
        Quadrant::III => "iii",
        Quadrant::IV => "iv",
    }
}

fn margin_metrics(rows: &[MarginRow]) -> Metrics {
    let mut m = Metrics::new();
    for phase in ["before", "after"] {
        for q in ["i", "ii", "iii", "iv"] {
            m.insert(format!("quadrant.{phase}.{q}"), Some(0.0));
        }
    }
    let mut mismatches = 0usize;
    for r in rows {
        for (phase, b) in [("before", r.hwa_before), ("after", r.hwa_after)] {
            let key = format!("quadrant.{phase}.{}", quadrant_name(Quadrant::of(r.float, b)));
            *m.get_mut(&key).expect("initialized").get_or_insert(0.0) += 1.0;
        }
        let y = r.label as usize;
        for (margin, pred) in [(r.float, r.pred_float), (r.hwa_before, r.pred_before), (r.hwa_after, r.pred_after)] {
            if (margin > 0.0) != (pred == y) {
                mismatches += 1;
            }
        }
    }
    m.insert("margin_sign_mismatches".into(), Some(mismatches as f64));
    for (name, f) in [
        ("float", (|r: &MarginRow| r.float) as fn(&MarginRow) -> f64),
        ("hwa_before", |r| r.hwa_before),
        ("hwa_after", |r| r.hwa_after),
    ] {
        let v: Vec<f64> = rows.iter().map(f).collect();
        m.insert(format!("margin_mean.{name}"), finite(mean(&v)));
    }
    m
}

fn margin_checks(m: &Metrics) -> BTreeMap<String, bool> {
    let mut c = BTreeMap::new();
    if let Some(n) = metric(m, "margin_sign_mismatches") {
        c.insert("margin_sign_consistent".into(), n == 0.0);
    }
    if let (Some(b), Some(a)) = (metric(m, "quadrant.before.iv"), metric(m, "quadrant.after.iv")) {
        c.insert("quadrant_iv_decreased".into(), a < b);
    }
    c
}

fn run_dm_report(cfg: &ExperimentConfig, out: &Path) -> Result<Metrics> {
    let spec = cfg.network_spec();
    let data = load_training_data(cfg)?;
    let mut history = Vec::new();
    let (w, ctx) = baseline(cfg, &spec, &data, out, &mut history)?;
    let w2 = retrain(cfg, &spec, &ctx, &data, &w, out, &mut history)?;
    write_csv(&out.join("history.csv"), &history)?;
    let test = &data.test;
    let zf = all_logits(&spec, &w, Mode::Float, None, test)?;
    let zb = all_logits(&spec, &w, Mode::Hwa, Some(&ctx), test)?;
    let za = all_logits(&spec, &w2, Mode::Hwa, Some(&ctx), test)?;
    let rows: Vec<MarginRow> = (0..test.len())
        .map(|k| {
            let y = test.labels[k] as usize;
            MarginRow {
                sample: k,
                label: test.labels[k],
                float: decision_margin(&zf[k], y),
                hwa_before: decision_margin(&zb[k], y),
                hwa_after: decision_margin(&za[k], y),
                pred_float: crate::training::classify(&zf[k], y),
                pred_before: crate::training::classify(&zb[k], y),
                pred_after: crate::training::classify(&za[k], y),
            }
        })
        .collect();
    let series = [
        ("float", rows.iter().map(|r| r.float).collect()),
        ("hwa_before", rows.iter().map(|r| r.hwa_before).collect()),
        ("hwa_after", rows.iter().map(|r| r.hwa_after).collect()),
    ];
    write_csv(&out.join("margins.csv"), &rows)?;
    write_csv(&out.join("margin_histogram.csv"), &shared_histograms(&series, cfg.training.margin_bins))?;
    Ok(margin_metrics(&rows))
}

// --- lut-check ------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LutRow {
    pub i_ref: f64,
    pub dv_lut: f64,
    pub dv_exact: f64,
    pub effective_lut: f64,
    pub effective_exact: f64,
    pub rel_error: f64,
    /// Exact-solver residual (V).
    pub residual: f64,
}

fn lut_metrics(rows: &[LutRow]) -> Metrics {
    let max = |f: fn(&LutRow) -> f64| rows.iter().map(f).fold(0.0f64, |m, v| m.max(v.abs()));
    let mut m = Metrics::new();
    m.insert("lut.max_rel_error".into(), finite(max(|r| r.rel_error)));
    m.insert("lut.mean_rel_error".into(), finite(mean(&rows.iter().map(|r| r.rel_error).collect::<Vec<_>>())));
    m.insert("lut.max_residual_v".into(), finite(max(|r| r.residual)));
    m.insert("lut.samples".into(), Some(rows.len() as f64));
    m
}

fn lut_checks(m: &Metrics) -> BTreeMap<String, bool> {
    let mut c = BTreeMap::new();
    if let Some(e) = metric(m, "lut.max_rel_error") {
        c.insert("lut_fidelity".into(), e < 1e-3);
    }
    if let Some(r) = metric(m, "lut.max_residual_v") {
        c.insert("exact_residual".into(), r < 1e-12);
    }
    c
}

fn run_lut_check(cfg: &ExperimentConfig, out: &Path) -> Result<Metrics> {
    use rand::Rng;
    let p = &cfg.device;
    let lut = BlDropLut::covering_with(p, 4.0 * cfg.network.max_cell_current, cfg.lut.i_min, cfg.lut.points)?;
    let (lo, hi) = (lut.i_min().ln(), lut.i_max().ln());
    let mut rng = rng_for(cfg.seed, 20);
    let currents: Vec<f64> = (0..cfg.lut.check_samples)
        .map(|_| rng.random_range(lo..=hi).exp().min(lut.i_max()))
        .collect();
    let rows = currents
        .into_iter()
        .map(|i| {
            let dv_lut = lut.lookup(i)?;
            let dv_exact = solve_bl_drop_exact(i, p)?;
            let effective_lut = i * (1.0 + bl_relative_error(dv_lut, p)?);
            let effective_exact = i * (1.0 + bl_relative_error(dv_exact, p)?);
            Ok(LutRow {
                i_ref: i,
                dv_lut,
                dv_exact,
                effective_lut,
                effective_exact,
                rel_error: ((effective_lut - effective_exact) / effective_exact).abs(),
                residual: bl_residual_volts(dv_exact, i, p).abs(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_csv(&out.join("lut_samples.csv"), &rows)?;
    Ok(lut_metrics(&rows))
}

// --- orchestration --------------------------------------------------------

fn checks_for(command: Command, m: &Metrics) -> BTreeMap<String, bool> {
    match command {
        Command::Deltaw => deltaw_checks(m),
        Command::Extract => extract_checks(m),
        Command::Train => train_checks(m, None),
        Command::Retrain => train_checks(m, Some("accuracy.hwa_after")),
        Command::Ablate => ablate_checks(m),
        Command::DmReport => margin_checks(m),
        Command::LutCheck => lut_checks(m),
    }
}

/// Recomputes a run's metrics from the CSV files it emitted.
pub fn recompute_metrics(command: Command, dir: &Path, fit: FitMode) -> Result<Metrics> {
    Ok(match command {
        Command::Deltaw => {
            let mut m = deltaw_metrics(&read_csv(&dir.join("deltaw_samples.csv"))?);
            // Not a function of the samples; carried over from the summary.
            m.remove("delta_w.time_unit");
            m
        }
        Command::Extract => {
            let sers: Vec<SerRow> = read_csv(&dir.join("ser.csv"))?;
            let scatter: Vec<ScatterRow> = read_csv(&dir.join("scatter.csv"))?;
            let fits = ser_from_scatter(&scatter, fit)?;
            for r in &sers {
                let key = (r.seed, r.method.clone(), r.model.clone());
                let Some(&(alpha, ser, ..)) = fits.get(&key) else {
                    return Err(Error::Check(format!("no scatter rows for {key:?}")));
                };
                if !close(Some(alpha), Some(r.alpha_vmm)) || !close(ser, r.ser) {
                    return Err(Error::Check(format!(
                        "ser.csv row {key:?} disagrees with scatter.csv (alpha {alpha} vs {}, SER {ser:?} vs {:?})",
                        r.alpha_vmm, r.ser
                    )));
                }
            }
            extract_metrics(&sers)
        }
        Command::Train | Command::Retrain => PredictionTable::read(&dir.join("predictions.csv"))?.accuracies(),
        Command::Ablate => ablate_metrics(&PredictionTable::read(&dir.join("predictions.csv"))?.accuracies()),
        Command::DmReport => margin_metrics(&read_csv(&dir.join("margins.csv"))?),
        Command::LutCheck => lut_metrics(&read_csv(&dir.join("lut_samples.csv"))?),
    })
}

fn close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(a), Some(b)) => a == b || (a - b).abs() <= 1e-12 * a.abs().max(b.abs()),
        (None, None) => true,
        _ => false,
    }
}

/// Compares summary metrics against values recomputed from the CSV files.
fn verify_metrics(summary: &Metrics, recomputed: &Metrics, dir: &Path) -> Result<()> {
    for (k, v) in recomputed {
        match summary.get(k) {
            Some(s) if close(*s, *v) => {}
            Some(s) => {
                return Err(Error::Check(format!(
                    "{}: metric `{k}` is {s:?} in summary.json but {v:?} from the CSV files",
                    dir.display()
                )))
            }
            None => {
                return Err(Error::Check(format!(
                    "{}: metric `{k}` missing from summary.json",
                    dir.display()
                )))
            }
        }
    }
    Ok(())
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<FileEntry>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(dir, e))?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
            continue;
        }
        let rel = path.strip_prefix(root).expect("under root").to_string_lossy().replace('\\', "/");
        if rel == "manifest.json" || rel == "error.json" {
            continue;
        }
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        out.push(FileEntry {
            path: rel,
            bytes: bytes.len() as u64,
            sha256: sha256_hex(&bytes),
        });
    }
    Ok(())
}

/// Runs one command and writes its artifacts into `out`.
pub fn run_experiment(cfg: &ExperimentConfig, command: Command, out: &Path) -> Result<Summary> {
    cfg.validate()?;
    let start = Instant::now();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let _ = std::fs::remove_file(out.join("error.json"));
    let echo = cfg.to_toml();
    write_text(&out.join("config.resolved.toml"), &echo)?;
    info!("{command}: seed {}, output {}", cfg.seed, out.display());
    let metrics = match command {
        Command::Deltaw => run_deltaw(cfg, out)?,
        Command::Extract => run_extract(cfg, out)?,
        Command::Train => run_train(cfg, out, false)?,
        Command::Retrain => run_train(cfg, out, true)?,
        Command::Ablate => run_ablate(cfg, out)?,
        Command::DmReport => run_dm_report(cfg, out)?,
        Command::LutCheck => run_lut_check(cfg, out)?,
    };
    verify_metrics(&metrics, &recompute_metrics(command, out, cfg.extraction.fit)?, out)?;
    let summary = Summary {
        schema_version: SCHEMA_VERSION,
        command,
        seed: cfg.seed,
        checks: checks_for(command, &metrics),
        metrics,
    };
    write_text(
        &out.join("summary.json"),
        &serde_json::to_string_pretty(&summary).expect("plain data"),
    )?;
    let mut files = Vec::new();
    collect_files(out, out, &mut files)?;
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command,
        seed: cfg.seed,
        config_sha256: sha256_hex(echo.as_bytes()),
        files,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    write_text(
        &out.join("manifest.json"),
        &serde_json::to_string_pretty(&manifest).expect("plain data"),
    )?;
    for (name, ok) in &summary.checks {
        if !ok {
            warn!("{command}: check `{name}` failed");
        }
    }
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct ErrorReport {
    pub schema_version: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub command: Option<Command>,
    pub kind: String,
    pub exit_code: i32,
    pub message: String,
}

impl ErrorReport {
    pub fn new(command: Option<Command>, err: &Error) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            command,
            kind: err.kind().into(),
            exit_code: err.exit_code(),
            message: err.to_string(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data")
    }
}

// ---------------------------------------------------------------------------
// Report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRun {
    pub run: String,
    pub command: Command,
    pub seed: u64,
    pub config_sha256: String,
    pub metrics: Metrics,
    pub checks: BTreeMap<String, bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub runs: Vec<ReportRun>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub command: Command,
    pub seed: u64,
    pub run: String,
    pub metric: String,
    pub value: Option<f64>,
}

/// Plot-ready series concatenated across runs by the report.
const PLOT_FILES: [&str; 5] = [
    "deltaw_histogram.csv",
    "ser.csv",
    "scatter.csv",
    "margin_histogram.csv",
    "predictions.csv",
];

fn find_runs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut runs = Vec::new();
    for p in inputs {
        if p.join("manifest.json").is_file() {
            runs.push(p.clone());
            continue;
        }
        let mut found: Vec<PathBuf> = std::fs::read_dir(p)
            .map_err(|e| Error::io(p, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|d| d.join("manifest.json").is_file())
            .collect();
        if found.is_empty() {
            return Err(Error::Merge(format!("{}: no run manifests found", p.display())));
        }
        found.sort();
        runs.extend(found);
    }
    Ok(runs)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        offset: 0,
        message: format!("line {} column {}: {e}", e.line(), e.column()),
    })
}

fn check_schema(path: &Path) -> Result<()> {
    let v: serde_json::Value = read_json(path)?;
    match v.get("schema_version").and_then(|s| s.as_u64()) {
        Some(s) if s == SCHEMA_VERSION as u64 => Ok(()),
        other => Err(Error::Merge(format!(
            "{}: schema version {other:?}, this build reads {SCHEMA_VERSION}",
            path.display()
        ))),
    }
}

/// Appends `src` to the merged CSV with a leading `run` column.
fn merge_csv(src: &Path, run: &str, writer: &mut Option<csv::Writer<std::fs::File>>, dst: &Path, header: &mut Option<csv::StringRecord>) -> Result<()> {
    let mut r = csv::Reader::from_path(src).map_err(|e| csv_err(src, e))?;
    let head = r.headers().map_err(|e| csv_err(src, e))?.clone();
    match header {
        Some(h) if *h != head => {
            return Err(Error::Merge(format!("{}: columns differ from earlier runs", src.display())))
        }
        Some(_) => {}
        None => {
            let mut w = csv::Writer::from_path(dst).map_err(|e| csv_err(dst, e))?;
            let mut rec = csv::StringRecord::from(vec!["run"]);
            rec.extend(head.iter());
            w.write_record(&rec).map_err(|e| csv_err(dst, e))?;
            *writer = Some(w);
            *header = Some(head);
        }
    }
    let w = writer.as_mut().expect("created with header");
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(src, e))?;
        let mut out = csv::StringRecord::from(vec![run]);
        out.extend(rec.iter());
        w.write_record(&out).map_err(|e| csv_err(dst, e))?;
    }
    Ok(())
}

/// Merges run directories into `out/report.json`, `out/comparison.csv` and
/// concatenated plot series, after re-deriving every run's metrics.
pub fn export_report(inputs: &[PathBuf], out: &Path) -> Result<Report> {
    let dirs = find_runs(inputs)?;
    let mut runs = Vec::with_capacity(dirs.len());
    for dir in &dirs {
        check_schema(&dir.join("manifest.json"))?;
        check_schema(&dir.join("summary.json"))?;
        let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
        let summary: Summary = read_json(&dir.join("summary.json"))?;
        let cfg_path = dir.join("config.resolved.toml");
        let cfg = config_load(&cfg_path)?;
        let echo = std::fs::read(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        if sha256_hex(&echo) != manifest.config_sha256 {
            return Err(Error::Check(format!("{}: config hash differs from manifest", dir.display())));
        }
        let recomputed = recompute_metrics(summary.command, dir, cfg.extraction.fit)?;
        verify_metrics(&summary.metrics, &recomputed, dir)?;
        if checks_for(summary.command, &summary.metrics) != summary.checks {
            return Err(Error::Check(format!("{}: checks do not follow from metrics", dir.display())));
        }
        runs.push((dir.clone(), ReportRun {
            run: dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned()),
            command: summary.command,
            seed: summary.seed,
            config_sha256: manifest.config_sha256,
            metrics: summary.metrics,
            checks: summary.checks,
        }));
    }
    runs.sort_by(|(_, a), (_, b)| (a.command, a.seed, &a.run).cmp(&(b.command, b.seed, &b.run)));
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (dirs, runs): (Vec<PathBuf>, Vec<ReportRun>) = runs.into_iter().unzip();
    let report = Report {
        schema_version: SCHEMA_VERSION,
        runs,
    };
    let rows: Vec<ComparisonRow> = report
        .runs
        .iter()
        .flat_map(|r| {
            r.metrics.iter().map(|(metric, value)| ComparisonRow {
                command: r.command,
                seed: r.seed,
                run: r.run.clone(),
                metric: metric.clone(),
                value: *value,
            })
        })
        .collect();
    write_csv(&out.join("comparison.csv"), &rows)?;
    for name in PLOT_FILES {
        let mut by_cmd: BTreeMap<Command, (Option<csv::Writer<std::fs::File>>, Option<csv::StringRecord>)> = BTreeMap::new();
        for (r, dir) in report.runs.iter().zip(&dirs) {
            let src = dir.join(name);
            if !src.is_file() {
                continue;
            }
            let stem = name.trim_end_matches(".csv");
            let dst = if stem.starts_with(r.command.name()) {
                out.join(name)
            } else {
                out.join(format!("{}_{stem}.csv", r.command))
            };
            let (w, h) = by_cmd.entry(r.command).or_default();
            merge_csv(&src, &r.run, w, &dst, h)?;
        }
        for (_, (w, _)) in by_cmd {
            if let Some(mut w) = w {
                w.flush().map_err(|e| Error::io(out, e))?;
            }
        }
    }
    write_text(
        &out.join("report.json"),
        &serde_json::to_string_pretty(&report).expect("plain data"),
    )?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        let c = config_from_str("", "mem").unwrap();
        assert_eq!(c, ExperimentConfig::default());
    }

    #[test]
    fn echo_round_trips() {
        let mut c = ExperimentConfig::default();
        c.deltaw.time_unit = Some(3.5e-7);
        c.training.train_limit = Some(100);
        c.slots.min_step = Some(1e-9);
        c.extraction.methods = vec![WemMethod::Wem1, WemMethod::Wem2];
        let back = config_from_str(&c.to_toml(), "echo").unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_toml(), c.to_toml());
    }

    #[test]
    fn eta_below_one_names_the_key() {
        let e = config_from_str("[device]\neta = 0.5\n", "mem").unwrap_err();
        match e {
            Error::Config { key, .. } => assert_eq!(key, "device.eta"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_key_reports_line_and_column() {
        let text = "seed = 1\n[device]\neta = 1.2\nk_xt_clsoe = 0.7\n";
        let e = config_from_str(text, "c.toml").unwrap_err();
        let Error::Config { key, message } = e else { panic!() };
        assert_eq!(key, "c.toml:4:1");
        assert!(message.contains("k_xt_clsoe"), "{message}");
    }

    #[test]
    fn lenient_mode_drops_unknown_keys() {
        let text = "strict = false\nbogus = 3\n[device]\neta = 1.2\ntypo = 1\n[[network.layer_flags]]\ncrosstalk = true\nbl_drop = false\nextra = 1\n[[network.layer_flags]]\n";
        let c = config_from_str(text, "mem").unwrap();
        assert_eq!(c.device.eta, 1.2);
        assert!(!c.strict);
        assert_eq!(c.network.layer_flags[0], HwaFlags::XT_ONLY);
        assert_eq!(c.network.layer_flags[1], HwaFlags::NONE);
    }

    #[test]
    fn syntax_errors_are_located() {
        let e = config_from_str("seed = 1\nseed = = 2\n", "x").unwrap_err();
        let Error::Config { key, .. } = e else { panic!() };
        assert!(key.starts_with("x:2:"), "{key}");
    }

    #[test]
    fn zero_bits_turn_quantizers_off() {
        let c = config_from_str("[quantizer]\ninput_bits = 0\noutput_bits = 4\n", "m").unwrap();
        let s = c.network_spec();
        assert_eq!(s.input_bits, None);
        assert_eq!(s.output_bits, Some(4));
    }

    #[test]
    fn command_names_parse() {
        for c in Command::ALL {
            assert_eq!(c.name().parse::<Command>().unwrap(), c);
        }
        assert!("nope".parse::<Command>().is_err());
    }

    #[test]
    fn ser_ordering_needs_both_chains() {
        let vals = |i, b, x, f| {
            move |m: &str| match m {
                "ideal" => Some(i),
                "bl-only" => Some(b),
                "xt-only" => Some(x),
                _ => Some(f),
            }
        };
        assert_eq!(ser_ordered(vals(1.0, 2.0, 3.0, 4.0)), Some(true));
        assert_eq!(ser_ordered(vals(1.0, 0.5, 3.0, 4.0)), Some(false));
        assert_eq!(ser_ordered(vals(1.0, 2.0, 4.0, 3.0)), Some(false));
    }

    #[test]
    fn margin_metrics_count_quadrants() {
        let row = |float: f64, before: f64, after: f64| MarginRow {
            sample: 0,
            label: 1,
            float,
            hwa_before: before,
            hwa_after: after,
            pred_float: if float > 0.0 { 1 } else { 0 },
            pred_before: if before > 0.0 { 1 } else { 0 },
            pred_after: if after > 0.0 { 1 } else { 0 },
        };
        let m = margin_metrics(&[row(1.0, -1.0, 1.0), row(1.0, 1.0, 1.0), row(-1.0, 1.0, -1.0)]);
        assert_eq!(metric(&m, "quadrant.before.iv"), Some(1.0));
        assert_eq!(metric(&m, "quadrant.after.iv"), Some(0.0));
        assert_eq!(metric(&m, "quadrant.before.ii"), Some(1.0));
        assert_eq!(metric(&m, "quadrant.after.iii"), Some(1.0));
        assert_eq!(metric(&m, "margin_sign_mismatches"), Some(0.0));
        let c = margin_checks(&m);
        assert!(c["quadrant_iv_decreased"] && c["margin_sign_consistent"]);
    }

    #[test]
    fn ablation_checks() {
        let mut m = Metrics::new();
        for (k, v) in [("quantized", 0.7), ("ablate_none", 0.7), ("ablate_layer1", 0.65), ("ablate_layer2", 0.68), ("ablate_all", 0.6)] {
            m.insert(format!("accuracy.{k}"), Some(v));
        }
        let m = ablate_metrics(&m);
        assert_eq!(metric(&m, "degradation.none"), Some(0.0));
        let c = ablate_checks(&m);
        assert!(c["none_equals_quantized"] && c["all_dominates_single"]);
    }
}
