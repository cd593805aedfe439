//! Weight extraction: stimulus generation (WEM1-4), a synthetic "silicon"
//! measurement source, regression under the ideal or hardware-aware forward
//! model, and the slope / signal-to-error metrics used to compare them.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SVD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{encode_image, ImageDataset};
use crate::device::{cell_current_from_vth, BlDropLut, DeviceParams, PairKind};
use crate::error::{Error, Result};
use crate::timeslot::{plan_slots, PulseVector, SlotOptions};
use crate::vmm::{
    bl_effective, hwa_unsaturated, ideal_unsaturated, saturate, slot_gains, BlSource, HwaFlags,
    QuantizerSpec, SlotGains, WeightMatrix,
};

/// Seeded generator for an independent stream of a run.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WemMethod {
    /// One wordline at a time, ramped.
    Wem1,
    /// All wordlines but one, ramped together.
    Wem2,
    /// Uniform random codes.
    Wem3,
    /// Low-resolution MNIST images.
    Wem4,
}

impl WemMethod {
    pub fn name(self) -> &'static str {
        match self {
            WemMethod::Wem1 => "wem1",
            WemMethod::Wem2 => "wem2",
            WemMethod::Wem3 => "wem3",
            WemMethod::Wem4 => "wem4",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StimulusConfig {
    /// Vectors drawn for WEM3 / WEM4.
    pub count: usize,
    /// Ramp length for WEM1 / WEM2.
    pub ramp_steps: usize,
    pub input_bits: u32,
    /// Seconds per DAC code before rescaling.
    pub time_unit: f64,
}

impl Default for StimulusConfig {
    fn default() -> Self {
        Self {
            count: 512,
            ramp_steps: 31,
            input_bits: 5,
            time_unit: 1e-6,
        }
    }
}

impl StimulusConfig {
    fn max_code(&self) -> u32 {
        (1u32 << self.input_bits) - 1
    }

    /// Ramp codes `ceil(k * max / L)` for `k = 1..=L`.
    fn ramp(&self) -> Vec<u32> {
        let top = self.max_code() as usize;
        (1..=self.ramp_steps)
            .map(|k| (k * top).div_ceil(self.ramp_steps) as u32)
            .collect()
    }
}

pub fn generate_wem_stimuli(
    method: WemMethod,
    cfg: &StimulusConfig,
    rows: usize,
    seed: u64,
    dataset: Option<&ImageDataset>,
) -> Result<Vec<PulseVector>> {
    if cfg.input_bits == 0 || cfg.input_bits > 16 {
        return Err(Error::arg("input_bits must lie in 1..=16"));
    }
    let u = cfg.time_unit;
    match method {
        WemMethod::Wem1 => {
            let mut out = Vec::with_capacity(rows * cfg.ramp_steps);
            for i in 0..rows {
                for c in cfg.ramp() {
                    let mut codes = vec![0; rows];
                    codes[i] = c;
                    out.push(PulseVector::from_codes(codes, u)?);
                }
            }
            Ok(out)
        }
        WemMethod::Wem2 => {
            let mut out = Vec::with_capacity(rows * cfg.ramp_steps);
            for skip in 0..rows {
                for c in cfg.ramp() {
                    let mut codes = vec![c; rows];
                    codes[skip] = 0;
                    out.push(PulseVector::from_codes(codes, u)?);
                }
            }
            Ok(out)
        }
        WemMethod::Wem3 => {
            let mut rng = rng_for(seed, 3);
            let top = cfg.max_code();
            (0..cfg.count)
                .map(|_| {
                    PulseVector::from_codes((0..rows).map(|_| rng.random_range(0..=top)).collect(), u)
                })
                .collect()
        }
        WemMethod::Wem4 => {
            let ds = dataset
                .ok_or_else(|| Error::State("WEM4 needs a loaded low-resolution dataset".into()))?;
            if ds.pixels() != rows {
                return Err(Error::arg(format!(
                    "dataset images have {} pixels, array has {rows} rows",
                    ds.pixels()
                )));
            }
            if ds.is_empty() {
                return Err(Error::State("WEM4 dataset is empty".into()));
            }
            let q = QuantizerSpec::new(cfg.input_bits, 1.0)?;
            let mut rng = rng_for(seed, 4);
            let picks = rand::seq::index::sample(&mut rng, ds.len(), cfg.count.min(ds.len()));
            picks
                .into_iter()
                .map(|k| encode_image(&ds.images[k], &q, u))
                .collect()
        }
    }
}

/// Stretches every input's time unit by one common factor so that the given
/// quantile of ideal-model outputs lands exactly at saturation.
pub fn rescale_to_saturation(
    inputs: &[PulseVector],
    weights: &WeightMatrix,
    params: &DeviceParams,
    quantile: f64,
) -> Result<(Vec<PulseVector>, f64)> {
    if !(quantile > 0.0 && quantile <= 1.0) {
        return Err(Error::arg("quantile must lie in (0, 1]"));
    }
    let mut all = Vec::with_capacity(inputs.len() * weights.cols());
    for x in inputs {
        all.extend(ideal_unsaturated(x, weights, params)?);
    }
    if all.is_empty() {
        return Err(Error::arg("no outputs to rescale"));
    }
    all.sort_by(f64::total_cmp);
    let k = ((quantile * all.len() as f64).ceil() as usize).clamp(1, all.len()) - 1;
    let q = all[k];
    if !(q > 0.0) {
        return Err(Error::arg("stimuli produce no output; cannot rescale"));
    }
    let factor = params.v_sat / q;
    let scaled = inputs
        .iter()
        .map(|x| x.rescaled(factor))
        .collect::<Result<Vec<_>>>()?;
    Ok((scaled, factor))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    pub seed: u64,
    pub noise_sigma: f64,
}

/// Input vectors with the per-column outputs measured for them.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementBatch {
    pub inputs: Vec<PulseVector>,
    pub outputs: Vec<Vec<f64>>,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct BatchFile {
    format: String,
    version: u32,
    provenance: Provenance,
    samples: Vec<SampleRecord>,
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    id: usize,
    input: PulseVector,
    outputs: Vec<f64>,
}

const BATCH_FORMAT: &str = "tdvmm-measurements";
const BATCH_VERSION: u32 = 1;

impl MeasurementBatch {
    pub fn new(
        inputs: Vec<PulseVector>,
        outputs: Vec<Vec<f64>>,
        provenance: Provenance,
    ) -> Result<Self> {
        let b = Self {
            inputs,
            outputs,
            provenance,
        };
        b.check_shape()?;
        Ok(b)
    }

    fn check_shape(&self) -> Result<()> {
        if self.inputs.len() != self.outputs.len() {
            return Err(Error::arg(format!(
                "{} inputs but {} outputs",
                self.inputs.len(),
                self.outputs.len()
            )));
        }
        let (Some(x0), Some(y0)) = (self.inputs.first(), self.outputs.first()) else {
            return Ok(());
        };
        if self.inputs.iter().any(|x| x.len() != x0.len())
            || self.outputs.iter().any(|y| y.len() != y0.len())
        {
            return Err(Error::arg("ragged measurement batch"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.inputs.first().map_or(0, PulseVector::len)
    }

    pub fn cols(&self) -> usize {
        self.outputs.first().map_or(0, Vec::len)
    }

    /// Checks the batch against a device: shapes and the `[0, v_sat]` span.
    pub fn validate_for(&self, params: &DeviceParams) -> Result<()> {
        self.check_shape()?;
        if self.rows() != params.rows {
            return Err(Error::arg(format!(
                "batch drives {} rows, device has {}",
                self.rows(),
                params.rows
            )));
        }
        for (s, y) in self.outputs.iter().enumerate() {
            if let Some(v) = y.iter().find(|v| !(**v >= 0.0 && **v <= params.v_sat)) {
                return Err(Error::arg(format!(
                    "sample {s}: output {v} outside [0, {}]",
                    params.v_sat
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let file = BatchFile {
            format: BATCH_FORMAT.into(),
            version: BATCH_VERSION,
            provenance: self.provenance.clone(),
            samples: self
                .inputs
                .iter()
                .zip(&self.outputs)
                .enumerate()
                .map(|(id, (x, y))| SampleRecord {
                    id,
                    input: x.clone(),
                    outputs: y.clone(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("batch serializes")
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let fail = |offset: u64, message: String| Error::Format {
            path: origin.to_path_buf(),
            offset,
            message,
        };
        let file: BatchFile =
            serde_json::from_str(text).map_err(|e| fail(e.column() as u64, e.to_string()))?;
        if file.format != BATCH_FORMAT || file.version != BATCH_VERSION {
            return Err(fail(
                0,
                format!("unsupported batch format {} v{}", file.format, file.version),
            ));
        }
        let mut inputs = Vec::with_capacity(file.samples.len());
        let mut outputs = Vec::with_capacity(file.samples.len());
        for s in file.samples {
            s.input
                .validate()
                .map_err(|e| fail(0, format!("sample {}: {e}", s.id)))?;
            inputs.push(s.input);
            outputs.push(s.outputs);
        }
        Self::new(inputs, outputs, file.provenance).map_err(|e| fail(0, e.to_string()))
    }

    /// CSV form: a `# provenance` JSON comment, a header row, then
    /// `sample_id, t_0..t_{R-1} (s), v_0..v_{C-1} (V)` per sample.
    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "# provenance: {}\n",
            serde_json::to_string(&self.provenance).expect("provenance serializes")
        );
        s.push_str("sample_id");
        for i in 0..self.rows() {
            s.push_str(&format!(",t_{i}"));
        }
        for j in 0..self.cols() {
            s.push_str(&format!(",v_{j}"));
        }
        s.push('\n');
        for (k, (x, y)) in self.inputs.iter().zip(&self.outputs).enumerate() {
            s.push_str(&k.to_string());
            for v in x.durations().iter().chain(y) {
                s.push_str(&format!(",{v:e}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str, origin: &Path) -> Result<Self> {
        let fail = |line: usize, message: String| Error::Format {
            path: origin.to_path_buf(),
            offset: line as u64,
            message: format!("line {}: {message}", line + 1),
        };
        let mut provenance = Provenance {
            generator: "csv".into(),
            seed: 0,
            noise_sigma: 0.0,
        };
        let mut header: Option<(usize, usize)> = None;
        let mut inputs = Vec::new();
        let mut outputs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(json) = rest.trim().strip_prefix("provenance:") {
                    provenance = serde_json::from_str(json.trim())
                        .map_err(|e| fail(n, format!("bad provenance: {e}")))?;
                }
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            match header {
                None => {
                    let rows = fields.iter().filter(|f| f.starts_with("t_")).count();
                    let cols = fields.iter().filter(|f| f.starts_with("v_")).count();
                    if fields.first() != Some(&"sample_id") || rows + cols + 1 != fields.len() {
                        return Err(fail(n, "expected header sample_id,t_*,v_*".into()));
                    }
                    header = Some((rows, cols));
                }
                Some((rows, cols)) => {
                    if fields.len() != rows + cols + 1 {
                        return Err(fail(n, format!("expected {} fields", rows + cols + 1)));
                    }
                    let vals = fields[1..]
                        .iter()
                        .map(|f| f.parse::<f64>().map_err(|e| fail(n, format!("`{f}`: {e}"))))
                        .collect::<Result<Vec<_>>>()?;
                    inputs.push(
                        PulseVector::from_durations(vals[..rows].to_vec())
                            .map_err(|e| fail(n, e.to_string()))?,
                    );
                    outputs.push(vals[rows..].to_vec());
                }
            }
        }
        Self::new(inputs, outputs, provenance).map_err(|e| fail(0, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => self.to_csv(),
            _ => self.to_json(),
        };
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Self::from_csv(&text, path),
            _ => Self::from_json(&text, path),
        }
    }
}

/// Ground-truth array standing in for measured silicon: log-normal cell
/// currents, full hardware-aware response, additive Gaussian output noise.
#[derive(Debug, Clone)]
pub struct SyntheticChip {
    pub params: DeviceParams,
    pub weights: WeightMatrix,
    pub lut: BlDropLut,
    pub noise_sigma: f64,
    pub slots: SlotOptions,
}

impl SyntheticChip {
    /// Threshold voltages drawn around `k V_REF + shift` with std `vth_spread`.
    pub fn draw(
        params: &DeviceParams,
        vth_spread: f64,
        vth_shift: f64,
        noise_sigma: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(vth_spread >= 0.0) {
            return Err(Error::arg("vth_spread must be >= 0"));
        }
        let normal = Normal::new(params.k_coupl * params.v_ref + vth_shift, vth_spread)
            .map_err(|e| Error::arg(e.to_string()))?;
        let mut rng = rng_for(seed, 1);
        let m = DMatrix::from_fn(params.rows, params.cols, |_, _| {
            cell_current_from_vth(normal.sample(&mut rng), params)
        });
        Self::from_weights(params, WeightMatrix::new(m)?, noise_sigma)
    }

    pub fn from_weights(params: &DeviceParams, weights: WeightMatrix, noise_sigma: f64) -> Result<Self> {
        let lut = BlDropLut::covering(params, weights.max_current())?;
        Ok(Self {
            params: params.clone(),
            weights,
            lut,
            noise_sigma,
            slots: SlotOptions::default(),
        })
    }

    pub fn respond(&self, input: &PulseVector) -> Result<Vec<f64>> {
        crate::vmm::vmm_hwa_with(
            input,
            &self.weights,
            &self.params,
            BlSource::Lut(&self.lut),
            HwaFlags::FULL,
            &self.slots,
        )
    }

    pub fn measure(&self, inputs: &[PulseVector], generator: &str, seed: u64) -> Result<MeasurementBatch> {
        let clean = inputs
            .par_iter()
            .map(|x| self.respond(x))
            .collect::<Result<Vec<_>>>()?;
        let mut rng = rng_for(seed, 2);
        let noise = if self.noise_sigma > 0.0 {
            Some(Normal::new(0.0, self.noise_sigma).map_err(|e| Error::arg(e.to_string()))?)
        } else {
            None
        };
        let outputs = clean
            .into_iter()
            .map(|y| {
                y.into_iter()
                    .map(|v| match &noise {
                        Some(n) => saturate(v + n.sample(&mut rng), &self.params),
                        None => v,
                    })
                    .collect()
            })
            .collect();
        MeasurementBatch::new(
            inputs.to_vec(),
            outputs,
            Provenance {
                generator: generator.into(),
                seed,
                noise_sigma: self.noise_sigma,
            },
        )
    }
}

/// Forward model used for regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExtractionModel {
    #[serde(rename = "ideal")]
    Ideal,
    #[serde(rename = "bl-only")]
    BlOnly,
    #[serde(rename = "xt-only")]
    XtOnly,
    #[serde(rename = "full")]
    Full,
}

impl ExtractionModel {
    pub const ALL: [ExtractionModel; 4] = [
        ExtractionModel::Ideal,
        ExtractionModel::BlOnly,
        ExtractionModel::XtOnly,
        ExtractionModel::Full,
    ];

    pub fn flags(self) -> HwaFlags {
        match self {
            ExtractionModel::Ideal => HwaFlags::NONE,
            ExtractionModel::BlOnly => HwaFlags::BL_ONLY,
            ExtractionModel::XtOnly => HwaFlags::XT_ONLY,
            ExtractionModel::Full => HwaFlags::FULL,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ExtractionModel::Ideal => "ideal",
            ExtractionModel::BlOnly => "bl-only",
            ExtractionModel::XtOnly => "xt-only",
            ExtractionModel::Full => "full",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExtractionResult {
    pub weights: WeightMatrix,
    pub model: ExtractionModel,
    /// Sum of squared output residuals (V^2) before clamping to >= 0.
    pub fit_loss: f64,
    pub iterations: usize,
    /// Cells whose regression value was negative and was clamped to 0.
    pub clamped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub max_iter: usize,
    /// Stop once the relative loss improvement falls below this.
    pub rel_tol: f64,
    /// Window over which a loss increase counts as divergence (fixed-step mode).
    pub patience: usize,
    /// Backtracking line search; when off, the full step is always taken.
    pub line_search: bool,
    pub max_halvings: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iter: 300,
            rel_tol: 1e-8,
            patience: 5,
            line_search: true,
            max_halvings: 30,
        }
    }
}

/// Per-column least-squares system over the non-saturated samples.
struct ColumnSystem {
    samples: Vec<usize>,
    target: DVector<f64>,
    svd: SVD<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

fn column_system(batch: &MeasurementBatch, params: &DeviceParams, j: usize) -> Result<ColumnSystem> {
    let rows = batch.rows();
    let samples: Vec<usize> = (0..batch.len())
        .filter(|&s| batch.outputs[s][j] < params.v_sat)
        .collect();
    let design = DMatrix::from_fn(samples.len(), rows, |r, i| {
        batch.inputs[samples[r]].durations()[i] / params.c_fb
    });
    let uncovered: Vec<usize> = (0..rows)
        .filter(|&i| design.column(i).iter().all(|&v| v == 0.0))
        .collect();
    if !uncovered.is_empty() {
        return Err(Error::Extraction(format!(
            "column {j}: rows {uncovered:?} are never driven by a non-saturated sample"
        )));
    }
    if samples.len() < rows {
        return Err(Error::Extraction(format!(
            "column {j}: {} usable samples for {rows} unknowns",
            samples.len()
        )));
    }
    let target = DVector::from_iterator(samples.len(), samples.iter().map(|&s| batch.outputs[s][j]));
    let svd = SVD::new(design, true, true);
    let (smax, smin) = svd
        .singular_values
        .iter()
        .fold((0.0f64, f64::INFINITY), |(a, b), &s| (a.max(s), b.min(s)));
    if !(smin > 1e-10 * smax) {
        return Err(Error::Extraction(format!(
            "column {j}: durations matrix is rank deficient (condition {:e}); rows are collinear",
            smax / smin
        )));
    }
    Ok(ColumnSystem {
        samples,
        target,
        svd,
    })
}

impl ColumnSystem {
    fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.svd.solve(rhs, 0.0).expect("SVD computed with U and V")
    }
}

pub fn extract_weights_ideal(batch: &MeasurementBatch, params: &DeviceParams) -> Result<ExtractionResult> {
    batch.validate_for(params)?;
    let cols = batch.cols();
    let per_col = (0..cols)
        .into_par_iter()
        .map(|j| {
            let sys = column_system(batch, params, j)?;
            let w = sys.solve(&sys.target);
            let pred = reconstruct(&sys, batch, params, &w);
            let loss = (&pred - &sys.target).norm_squared();
            Ok((w, loss))
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = batch.rows();
    let mut m = DMatrix::zeros(rows, cols);
    let mut loss = 0.0;
    let mut clamped = 0;
    for (j, (w, l)) in per_col.into_iter().enumerate() {
        loss += l;
        for i in 0..rows {
            if w[i] < 0.0 {
                clamped += 1;
            }
            m[(i, j)] = w[i].max(0.0);
        }
    }
    if clamped > 0 {
        log::warn!("ideal extraction clamped {clamped} negative weights to zero");
    }
    Ok(ExtractionResult {
        weights: WeightMatrix::new(m)?,
        model: ExtractionModel::Ideal,
        fit_loss: loss,
        iterations: 1,
        clamped,
    })
}

fn reconstruct(
    sys: &ColumnSystem,
    batch: &MeasurementBatch,
    params: &DeviceParams,
    w: &DVector<f64>,
) -> DVector<f64> {
    DVector::from_iterator(
        sys.samples.len(),
        sys.samples.iter().map(|&s| {
            let t = batch.inputs[s].durations();
            t.iter().zip(w.iter()).map(|(a, b)| a * b).sum::<f64>() / params.c_fb
        }),
    )
}

/// Column-level hardware-aware forward on precomputed slot gains.
fn column_forward(
    slots: &[SlotGains],
    w: &DVector<f64>,
    params: &DeviceParams,
    bl: Option<&BlDropLut>,
    column: usize,
) -> Result<f64> {
    let mut q = 0.0;
    for s in slots {
        let mut i_ref = 0.0;
        for (g, wi) in s.gains.iter().zip(w.iter()) {
            if *g != 0.0 {
                i_ref += g * wi;
            }
        }
        let eff = match bl {
            Some(lut) => bl_effective(i_ref, params, BlSource::Lut(lut), column)?,
            None => i_ref,
        };
        q += eff * s.duration;
    }
    Ok(q / params.c_fb)
}

pub fn extract_weights_hwa(
    batch: &MeasurementBatch,
    model: ExtractionModel,
    params: &DeviceParams,
    lut: &BlDropLut,
    opts: &OptimizerConfig,
) -> Result<ExtractionResult> {
    extract_weights_hwa_with(batch, model, params, lut, opts, &SlotOptions::default())
}

pub fn extract_weights_hwa_with(
    batch: &MeasurementBatch,
    model: ExtractionModel,
    params: &DeviceParams,
    lut: &BlDropLut,
    opts: &OptimizerConfig,
    slot_opts: &SlotOptions,
) -> Result<ExtractionResult> {
    let init = extract_weights_ideal(batch, params)?;
    let flags = model.flags();
    if !flags.any() {
        return Ok(init);
    }
    if flags.bl_drop && !lut.built_for(params) {
        return Err(Error::State(
            "bit-line LUT was built for different device parameters".into(),
        ));
    }
    let slots = batch
        .inputs
        .iter()
        .map(|x| Ok(slot_gains(&plan_slots(x, slot_opts)?, params, flags.crosstalk)))
        .collect::<Result<Vec<_>>>()?;
    let bl = flags.bl_drop.then_some(lut);
    let cols = batch.cols();
    let fits = (0..cols)
        .into_par_iter()
        .map(|j| {
            let sys = column_system(batch, params, j)?;
            let w0 = DVector::from_iterator(batch.rows(), init.weights.currents().column(j).iter().copied());
            fit_column(&sys, &slots, w0, params, bl, j, opts)
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = batch.rows();
    let mut m = DMatrix::zeros(rows, cols);
    let mut loss = 0.0;
    let mut iterations = 0;
    for (j, (w, l, it)) in fits.into_iter().enumerate() {
        loss += l;
        iterations = iterations.max(it);
        for i in 0..rows {
            m[(i, j)] = w[i];
        }
    }
    Ok(ExtractionResult {
        weights: WeightMatrix::new(m)?,
        model,
        fit_loss: loss,
        iterations,
        clamped: init.clamped,
    })
}

/// Projected descent along the ideal-model direction: each step solves the
/// linear (ideal) least-squares problem for the current residual, which is
/// the ideal-model gradient preconditioned by its own normal matrix.
fn fit_column(
    sys: &ColumnSystem,
    slots: &[Vec<SlotGains>],
    mut w: DVector<f64>,
    params: &DeviceParams,
    bl: Option<&BlDropLut>,
    column: usize,
    opts: &OptimizerConfig,
) -> Result<(DVector<f64>, f64, usize)> {
    let residual = |w: &DVector<f64>| -> Result<DVector<f64>> {
        let mut r = DVector::zeros(sys.samples.len());
        for (k, &s) in sys.samples.iter().enumerate() {
            r[k] = column_forward(&slots[s], w, params, bl, column)? - sys.target[k];
        }
        Ok(r)
    };
    let mut r = residual(&w)?;
    let mut loss = r.norm_squared();
    let mut history = vec![loss];
    let mut iterations = 0;
    while iterations < opts.max_iter && loss > 0.0 {
        iterations += 1;
        let dir = -sys.solve(&r);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let cand = (&w + step * &dir).map(|v| v.max(0.0));
            let rc = residual(&cand)?;
            let lc = rc.norm_squared();
            if !lc.is_finite() {
                return Err(Error::Extraction(format!(
                    "column {column}: loss became non-finite at iteration {iterations}; trace {history:?}"
                )));
            }
            if !opts.line_search || lc < loss {
                accepted = Some((cand, rc, lc));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, rc, lc)) = accepted else {
            break;
        };
        let improvement = (loss - lc) / loss;
        let moved = (&cand - &w).norm();
        w = cand;
        r = rc;
        loss = lc;
        history.push(loss);
        // Round-off floor: further steps only shuffle the last bits.
        if moved <= 1e-12 * w.norm() {
            break;
        }
        if !opts.line_search && history.len() > opts.patience {
            let window = &history[history.len() - 1 - opts.patience..];
            if window.windows(2).all(|p| p[1] > p[0]) {
                return Err(Error::Extraction(format!(
                    "column {column}: loss increased over {} iterations; trace {history:?}",
                    opts.patience
                )));
            }
        }
        if improvement.abs() < opts.rel_tol {
            break;
        }
    }
    Ok((w, loss, iterations))
}

/// Model prediction (saturated) for every input.
pub fn predict(
    inputs: &[PulseVector],
    weights: &WeightMatrix,
    params: &DeviceParams,
    lut: &BlDropLut,
    model: ExtractionModel,
) -> Result<Vec<Vec<f64>>> {
    predict_with(inputs, weights, params, lut, model, &SlotOptions::default())
}

pub fn predict_with(
    inputs: &[PulseVector],
    weights: &WeightMatrix,
    params: &DeviceParams,
    lut: &BlDropLut,
    model: ExtractionModel,
    slot_opts: &SlotOptions,
) -> Result<Vec<Vec<f64>>> {
    inputs
        .par_iter()
        .map(|x| {
            Ok(hwa_unsaturated(x, weights, params, BlSource::Lut(lut), model.flags(), slot_opts)?
                .into_iter()
                .map(|v| saturate(v, params))
                .collect())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitMode {
    #[default]
    ThroughOrigin,
    Affine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitMetrics {
    pub alpha_vmm: f64,
    /// `f64::INFINITY` when the residual vanishes.
    #[serde(with = "ser_sentinel")]
    pub ser: f64,
    pub residual_rms: f64,
    pub intercept: f64,
}

impl FitMetrics {
    pub fn is_exact(&self) -> bool {
        self.ser.is_infinite()
    }
}

mod ser_sentinel {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Value(f64),
        Word(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            Repr::Word("exact".into()).serialize(s)
        } else {
            Repr::Value(*v).serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Value(v) => Ok(v),
            Repr::Word(w) if w == "exact" => Ok(f64::INFINITY),
            Repr::Word(w) => Err(serde::de::Error::custom(format!("bad SER `{w}`"))),
        }
    }
}

fn rms(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x * x, n + 1));
    (s / n.max(1) as f64).sqrt()
}

/// Slope of predicted vs. measured outputs and the signal-to-error ratio
/// after removing that slope.
pub fn fit_slope_ser(predicted: &[f64], measured: &[f64]) -> Result<FitMetrics> {
    fit_metrics(predicted, measured, FitMode::ThroughOrigin)
}

pub fn fit_metrics(predicted: &[f64], measured: &[f64], mode: FitMode) -> Result<FitMetrics> {
    if predicted.len() != measured.len() || predicted.is_empty() {
        return Err(Error::Metric(format!(
            "need equal non-empty series, got {} and {}",
            predicted.len(),
            measured.len()
        )));
    }
    let (slope, intercept) = match mode {
        FitMode::ThroughOrigin => {
            let mm: f64 = measured.iter().map(|m| m * m).sum();
            if mm == 0.0 {
                return Err(Error::Metric("measured outputs are all zero".into()));
            }
            let pm: f64 = predicted.iter().zip(measured).map(|(p, m)| p * m).sum();
            (pm / mm, 0.0)
        }
        FitMode::Affine => {
            let n = measured.len() as f64;
            let mx = measured.iter().sum::<f64>() / n;
            let my = predicted.iter().sum::<f64>() / n;
            let sxx: f64 = measured.iter().map(|m| (m - mx) * (m - mx)).sum();
            if sxx == 0.0 {
                return Err(Error::Metric("measured outputs are constant".into()));
            }
            let sxy: f64 = predicted
                .iter()
                .zip(measured)
                .map(|(p, m)| (p - my) * (m - mx))
                .sum();
            let b = sxy / sxx;
            (b, my - b * mx)
        }
    };
    let signal = rms(predicted.iter().copied());
    let err = rms(
        predicted
            .iter()
            .zip(measured)
            .map(|(p, m)| p - (slope * m + intercept)),
    );
    let ser = if err <= 1e-15 * signal { f64::INFINITY } else { signal / err };
    Ok(FitMetrics {
        alpha_vmm: slope,
        ser,
        residual_rms: err,
        intercept,
    })
}

/// Which pairs of wordlines are driven together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PairCase {
    /// Two lines with one skipped in between.
    A,
    /// Consecutive lines that are far apart in the layout.
    B,
    /// Consecutive lines that are adjacent in the layout.
    C,
}

impl PairCase {
    pub const ALL: [PairCase; 3] = [PairCase::A, PairCase::B, PairCase::C];

    pub fn pairs(self, params: &DeviceParams) -> Vec<(usize, usize)> {
        let n = params.rows;
        match self {
            PairCase::A => (0..n.saturating_sub(2)).map(|i| (i, i + 2)).collect(),
            PairCase::B | PairCase::C => {
                let want = if self == PairCase::B { PairKind::Far } else { PairKind::Close };
                (0..n.saturating_sub(1))
                    .filter(|&i| params.pair_kind(i) == want)
                    .map(|i| (i, i + 1))
                    .collect()
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PairCase::A => "A",
            PairCase::B => "B",
            PairCase::C => "C",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaWSample {
    pub row_a: usize,
    pub row_b: usize,
    pub column: usize,
    /// Sum of the single-activation weights minus the joint weight (A).
    pub delta_w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaWReport {
    pub case: PairCase,
    pub samples: Vec<DeltaWSample>,
}

impl DeltaWReport {
    pub fn mean(&self) -> f64 {
        self.samples.iter().map(|s| s.delta_w).sum::<f64>() / self.samples.len().max(1) as f64
    }

    pub fn values(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.delta_w).collect()
    }
}

/// Effective weight of a set of rows pulsed together for `code` time units,
/// `dV C / t` per column.
fn joint_weight(
    weights: &WeightMatrix,
    params: &DeviceParams,
    bl: BlSource<'_>,
    flags: HwaFlags,
    rows: &[usize],
    code: u32,
    time_unit: f64,
) -> Result<Vec<f64>> {
    let mut codes = vec![0; params.rows];
    for &r in rows {
        codes[r] = code;
    }
    let x = PulseVector::from_codes(codes, time_unit)?;
    let t = code as f64 * time_unit;
    let out = crate::vmm::vmm_hwa_with(&x, weights, params, bl, flags, &SlotOptions::default())?;
    if let Some(j) = out.iter().position(|&v| v >= params.v_sat) {
        return Err(Error::arg(format!(
            "column {j} saturates during pair activation; shorten the pulse"
        )));
    }
    Ok(out.into_iter().map(|v| v * params.c_fb / t).collect())
}

/// Time unit for which two of the largest cells pulsed together for `code`
/// units reach half the output span under the ideal model.
pub fn pair_time_unit(weights: &WeightMatrix, params: &DeviceParams, code: u32) -> Result<f64> {
    let top = weights.max_current();
    if !(top > 0.0) || code == 0 {
        return Err(Error::arg("need a positive cell current and pulse code"));
    }
    Ok(0.5 * params.v_sat * params.c_fb / (2.0 * top * code as f64))
}

/// Single- vs. joint-activation weight deficit for every pair of a layout case.
pub fn delta_w_analysis(
    weights: &WeightMatrix,
    params: &DeviceParams,
    bl: BlSource<'_>,
    flags: HwaFlags,
    case: PairCase,
    code: u32,
    time_unit: f64,
) -> Result<DeltaWReport> {
    if code == 0 {
        return Err(Error::arg("pulse code must be > 0"));
    }
    let singles = (0..params.rows)
        .map(|i| joint_weight(weights, params, bl, flags, &[i], code, time_unit))
        .collect::<Result<Vec<_>>>()?;
    let mut samples = Vec::new();
    for (a, b) in case.pairs(params) {
        let joint = joint_weight(weights, params, bl, flags, &[a, b], code, time_unit)?;
        for (j, w_ab) in joint.iter().enumerate() {
            samples.push(DeltaWSample {
                row_a: a,
                row_b: b,
                column: j,
                delta_w: singles[a][j] + singles[b][j] - w_ab,
            });
        }
    }
    Ok(DeltaWReport { case, samples })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Equal-width histogram over `[lo, hi]`; values outside are clamped into
/// the end bins.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<HistogramBin> {
    let bins = bins.max(1);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for &v in values {
        let k = ((v - lo) / width).floor();
        let k = if k.is_nan() { 0 } else { (k.max(0.0) as usize).min(bins - 1) };
        counts[k] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(k, count)| HistogramBin {
            lo: lo + width * k as f64,
            hi: lo + width * (k + 1) as f64,
            count,
        })
        .collect()
}

/// Histogram spanning the data range.
pub fn auto_histogram(values: &[f64], bins: usize) -> Vec<HistogramBin> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() {
        return Vec::new();
    }
    let hi = if hi > lo { hi } else { lo + 1e-30_f64.max(lo.abs() * 1e-9) };
    histogram(values, lo, hi, bins)
}
