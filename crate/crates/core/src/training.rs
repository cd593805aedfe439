//! The chip-matched MLP: float, quantized and hardware-aware forward passes,
//! SGD training, hardware-aware retraining with a straight-through backward,
//! and the accuracy / decision-margin / ablation analyses.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::ImageDataset;
use crate::device::{BlDropLut, DeviceParams};
use crate::error::{Error, Result};
use crate::extraction::{histogram, rng_for, HistogramBin};
use crate::timeslot::{PulseVector, SlotOptions};
use crate::vmm::{
    differential_readout, hwa_unsaturated, map_signed_weights, saturate, BlSource, HwaFlags,
    QuantMode, QuantizerSpec, WeightMatrix,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }

    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => (pre > 0.0) as u8 as f64,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Float,
    Quantized,
    Hwa,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Float => "float",
            Mode::Quantized => "quantized",
            Mode::Hwa => "hwa",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSpec {
    /// Widths from input to output, e.g. `[16, 16, 10]`.
    pub layers: Vec<usize>,
    pub activation: Activation,
    /// Pulse-code resolution; `None` drives continuous pulse widths.
    pub input_bits: Option<u32>,
    /// ADC resolution over `[0, v_sat]`; `None` reads the analog value.
    pub output_bits: Option<u32>,
    /// Mechanisms applied to each layer in hwa mode.
    pub layer_flags: Vec<HwaFlags>,
    /// Amps per unit weight. `None`: the largest |w| of each layer maps to
    /// `max_cell_current` at calibration.
    pub weight_scale: Option<f64>,
    pub max_cell_current: f64,
    /// Calibration-batch output (at `output_quantile`) as a fraction of `v_sat`.
    pub output_headroom: f64,
    /// Quantile of single-bank outputs placed at the headroom level; 1 = max.
    pub output_quantile: f64,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            layers: vec![16, 16, 10],
            activation: Activation::Relu,
            input_bits: Some(5),
            output_bits: Some(5),
            layer_flags: vec![HwaFlags::FULL; 2],
            weight_scale: None,
            max_cell_current: 1e-8,
            output_headroom: 1.0,
            output_quantile: 0.99,
        }
    }
}

impl NetworkSpec {
    pub fn depth(&self) -> usize {
        self.layers.len().saturating_sub(1)
    }

    pub fn validate(&self, params: &DeviceParams) -> Result<()> {
        let bad = |key: &str, message: String| Error::Config {
            key: format!("network.{key}"),
            message,
        };
        if self.layers.len() < 2 || self.layers.contains(&0) {
            return Err(bad("layers", "need at least two non-zero widths".into()));
        }
        for (l, w) in self.layers.windows(2).enumerate() {
            if w[0] > params.rows {
                return Err(bad(
                    "layers",
                    format!("layer {l} has {} inputs, array has {} rows", w[0], params.rows),
                ));
            }
            // One physical array per sign.
            if w[1] > params.cols {
                return Err(bad(
                    "layers",
                    format!("layer {l} has {} outputs, array has {} columns", w[1], params.cols),
                ));
            }
        }
        if self.layer_flags.len() != self.depth() {
            return Err(bad(
                "layer_flags",
                format!("{} entries for {} layers", self.layer_flags.len(), self.depth()),
            ));
        }
        for (key, bits) in [("input_bits", self.input_bits), ("output_bits", self.output_bits)] {
            if let Some(b) = bits {
                if !(1..=24).contains(&b) {
                    return Err(bad(key, format!("{b} outside 1..=24")));
                }
            }
        }
        if let Some(s) = self.weight_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(bad("weight_scale", "must be > 0".into()));
            }
        }
        if !(self.max_cell_current > 0.0) {
            return Err(bad("max_cell_current", "must be > 0".into()));
        }
        if !(self.output_headroom > 0.0 && self.output_headroom <= 1.0) {
            return Err(bad("output_headroom", "must lie in (0, 1]".into()));
        }
        if !(self.output_quantile > 0.0 && self.output_quantile <= 1.0) {
            return Err(bad("output_quantile", "must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Same network with every layer's mechanisms set to `flags`.
    pub fn with_flags(&self, flags: HwaFlags) -> Self {
        Self {
            layer_flags: vec![flags; self.depth()],
            ..self.clone()
        }
    }
}

/// Bias-free weights; layer `l` is stored `inputs x outputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<DMatrix<f64>>,
}

#[derive(Serialize, Deserialize)]
struct MlpFile {
    layers: Vec<LayerFile>,
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    inputs: usize,
    outputs: usize,
    /// Row-major.
    weights: Vec<f64>,
}

impl Mlp {
    /// Glorot-uniform initialization.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Self {
        let mut rng = rng_for(seed, 10);
        let layers = spec
            .layers
            .windows(2)
            .map(|w| {
                let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
                DMatrix::from_fn(w[0], w[1], |_, _| rng.random_range(-limit..limit))
            })
            .collect();
        Self { layers }
    }

    pub fn check(&self, spec: &NetworkSpec) -> Result<()> {
        let shapes: Vec<(usize, usize)> = spec.layers.windows(2).map(|w| (w[0], w[1])).collect();
        let have: Vec<(usize, usize)> = self.layers.iter().map(|m| m.shape()).collect();
        if shapes != have {
            return Err(Error::arg(format!("weights have shapes {have:?}, network expects {shapes:?}")));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let file = MlpFile {
            layers: self
                .layers
                .iter()
                .map(|m| LayerFile {
                    inputs: m.nrows(),
                    outputs: m.ncols(),
                    weights: m.transpose().iter().copied().collect(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("weights serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: MlpFile = serde_json::from_str(text).map_err(|e| Error::arg(e.to_string()))?;
        let layers = file
            .layers
            .into_iter()
            .map(|l| {
                if l.weights.len() != l.inputs * l.outputs {
                    return Err(Error::arg("layer weight count does not match its shape"));
                }
                Ok(DMatrix::from_row_slice(l.inputs, l.outputs, &l.weights))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }
}

/// Frozen per-layer operating point of the analog pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerCalibration {
    /// Activation value mapped to the top of the input range.
    pub input_full_scale: f64,
    /// Amps per unit weight.
    pub weight_scale: f64,
    /// Pulse seconds per unit activation.
    pub time_per_unit: f64,
}

/// Everything the analog forward needs besides the weights.
#[derive(Debug, Clone)]
pub struct HwaContext {
    pub params: DeviceParams,
    pub lut: BlDropLut,
    pub layers: Vec<LayerCalibration>,
    pub slots: SlotOptions,
}

impl HwaContext {
    /// Fixes input ranges, weight scales and pulse timing from a float pass
    /// over a calibration batch; the bit-line LUT gets 4x current headroom.
    pub fn calibrate(
        spec: &NetworkSpec,
        weights: &Mlp,
        params: &DeviceParams,
        batch: &[Vec<f64>],
    ) -> Result<Self> {
        spec.validate(params)?;
        weights.check(spec)?;
        if batch.is_empty() {
            return Err(Error::arg("calibration batch is empty"));
        }
        let traces: Vec<Trace> = batch
            .iter()
            .map(|x| float_trace(spec, weights, x))
            .collect::<Result<_>>()?;
        let mut layers = Vec::with_capacity(spec.depth());
        let mut top_cell = 0.0f64;
        for (l, w) in weights.layers.iter().enumerate() {
            let fs = traces
                .iter()
                .flat_map(|t| t.inputs[l].iter())
                .fold(0.0f64, |m, v| m.max(v.abs()));
            let fs = if fs > 0.0 { fs } else { 1.0 };
            let wmax = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let scale = match spec.weight_scale {
                Some(s) => s,
                None if wmax > 0.0 => spec.max_cell_current / wmax,
                None => return Err(Error::arg(format!("layer {l} weights are all zero"))),
            };
            top_cell = top_cell.max(wmax * scale);
            // Single-bank charge per unit time over the batch.
            let mut banks = Vec::with_capacity(traces.len() * 2 * w.ncols());
            for t in &traces {
                for j in 0..w.ncols() {
                    let (mut pos, mut neg) = (0.0, 0.0);
                    for (i, a) in t.inputs[l].iter().enumerate() {
                        let v = a * w[(i, j)];
                        if w[(i, j)] >= 0.0 {
                            pos += v;
                        } else {
                            neg -= v;
                        }
                    }
                    banks.push(pos);
                    banks.push(neg);
                }
            }
            banks.sort_by(f64::total_cmp);
            let k = ((spec.output_quantile * banks.len() as f64).ceil() as usize).clamp(1, banks.len()) - 1;
            let peak = if banks[k] > 0.0 { banks[k] } else { fs };
            let time_per_unit = spec.output_headroom * params.v_sat * params.c_fb / (peak * scale);
            layers.push(LayerCalibration {
                input_full_scale: fs,
                weight_scale: scale,
                time_per_unit,
            });
        }
        let lut = BlDropLut::covering(params, 4.0 * top_cell)?;
        Ok(Self {
            params: params.clone(),
            lut,
            layers,
            slots: SlotOptions::default(),
        })
    }
}

/// Activations seen by each layer and its pre-activation outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub inputs: Vec<Vec<f64>>,
    pub pre: Vec<Vec<f64>>,
}

impl Trace {
    pub fn logits(&self) -> &[f64] {
        self.pre.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

fn check_input(spec: &NetworkSpec, x: &[f64]) -> Result<()> {
    if x.len() != spec.layers[0] {
        return Err(Error::arg(format!(
            "input has {} values, network expects {}",
            x.len(),
            spec.layers[0]
        )));
    }
    Ok(())
}

fn float_layer(a: &[f64], w: &DMatrix<f64>) -> Vec<f64> {
    (0..w.ncols())
        .map(|j| a.iter().enumerate().map(|(i, v)| v * w[(i, j)]).sum())
        .collect()
}

fn float_trace(spec: &NetworkSpec, weights: &Mlp, x: &[f64]) -> Result<Trace> {
    check_input(spec, x)?;
    let mut inputs = Vec::with_capacity(spec.depth());
    let mut pre = Vec::with_capacity(spec.depth());
    let mut a = x.to_vec();
    for (l, w) in weights.layers.iter().enumerate() {
        let z = float_layer(&a, w);
        inputs.push(std::mem::take(&mut a));
        if l + 1 < spec.depth() {
            a = z.iter().map(|&v| spec.activation.apply(v)).collect();
        }
        pre.push(z);
    }
    Ok(Trace { inputs, pre })
}

/// Network weights mapped onto the arrays under a frozen calibration.
#[derive(Debug, Clone)]
pub struct AnalogNetwork<'a> {
    spec: &'a NetworkSpec,
    ctx: &'a HwaContext,
    weights: Vec<DMatrix<f64>>,
    matrices: Vec<WeightMatrix>,
    flags: Vec<HwaFlags>,
}

impl<'a> AnalogNetwork<'a> {
    pub fn new(spec: &'a NetworkSpec, ctx: &'a HwaContext, weights: &Mlp, mode: Mode) -> Result<Self> {
        weights.check(spec)?;
        if ctx.layers.len() != spec.depth() {
            return Err(Error::State("calibration does not match the network depth".into()));
        }
        let matrices = weights
            .layers
            .iter()
            .zip(&ctx.layers)
            .map(|(w, c)| map_signed_weights(w, c.weight_scale))
            .collect::<Result<Vec<_>>>()?;
        let flags = match mode {
            Mode::Hwa => spec.layer_flags.clone(),
            Mode::Quantized => vec![HwaFlags::NONE; spec.depth()],
            Mode::Float => return Err(Error::arg("float mode has no analog network")),
        };
        Ok(Self {
            spec,
            ctx,
            weights: weights.layers.clone(),
            matrices,
            flags,
        })
    }

    /// One layer through pulse encoding, the array and the readout.
    /// Returns the activation the array actually saw and the layer output.
    pub fn layer(&self, l: usize, a: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if !self.flags[l].any() && self.spec.input_bits.is_none() && self.spec.output_bits.is_none() {
            // Nothing analog left to model: the plain (unclipped) linear layer.
            return Ok((a.to_vec(), float_layer(a, &self.weights[l])));
        }
        let cal = &self.ctx.layers[l];
        let params = &self.ctx.params;
        let m = &self.matrices[l];
        let (seen, pulses) = match self.spec.input_bits {
            Some(bits) => {
                let q = QuantizerSpec::new(bits, cal.input_full_scale)?;
                let codes: Vec<u32> = a.iter().map(|&v| q.code(v)).collect();
                let seen = codes.iter().map(|&c| q.dequantize(c, QuantMode::Input)).collect();
                (seen, PulseVector::from_codes(codes, q.step() * cal.time_per_unit)?)
            }
            None => {
                let seen: Vec<f64> = a.iter().map(|&v| v.clamp(0.0, cal.input_full_scale)).collect();
                let t = seen.iter().map(|v| v * cal.time_per_unit).collect();
                (seen, PulseVector::from_durations(t)?)
            }
        };
        let pulses = pad_rows(pulses, params.rows)?;
        let m = pad_matrix(m, params.rows)?;
        let raw = hwa_unsaturated(
            &pulses,
            &m,
            params,
            BlSource::Lut(&self.ctx.lut),
            self.flags[l],
            &self.ctx.slots,
        )?;
        let read: Vec<f64> = match self.spec.output_bits {
            Some(bits) => {
                let q = QuantizerSpec::new(bits, params.v_sat)?;
                raw.iter()
                    .map(|&v| q.dequantize(q.code(saturate(v, params)), QuantMode::Output))
                    .collect()
            }
            None => raw.iter().map(|&v| saturate(v, params)).collect(),
        };
        let diff = differential_readout(&read, m.pairing())?;
        let k = params.c_fb / (cal.weight_scale * cal.time_per_unit);
        Ok((seen, diff.into_iter().map(|d| d * k).collect()))
    }

    pub fn trace(&self, x: &[f64]) -> Result<Trace> {
        check_input(self.spec, x)?;
        let depth = self.spec.depth();
        let mut inputs = Vec::with_capacity(depth);
        let mut pre = Vec::with_capacity(depth);
        let mut a = x.to_vec();
        for l in 0..depth {
            let (seen, z) = self.layer(l, &a)?;
            inputs.push(seen);
            if l + 1 < depth {
                a = z.iter().map(|&v| self.spec.activation.apply(v)).collect();
            }
            pre.push(z);
        }
        Ok(Trace { inputs, pre })
    }
}

/// Arrays are always driven on every wordline; unused rows get zero pulses.
fn pad_rows(p: PulseVector, rows: usize) -> Result<PulseVector> {
    if p.len() == rows {
        return Ok(p);
    }
    match (p.codes(), p.time_unit()) {
        (Some(c), Some(u)) => {
            let mut codes = c.to_vec();
            codes.resize(rows, 0);
            PulseVector::from_codes(codes, u)
        }
        _ => {
            let mut t = p.durations().to_vec();
            t.resize(rows, 0.0);
            PulseVector::from_durations(t)
        }
    }
}

fn pad_matrix(m: &WeightMatrix, rows: usize) -> Result<std::borrow::Cow<'_, WeightMatrix>> {
    if m.rows() == rows {
        return Ok(std::borrow::Cow::Borrowed(m));
    }
    let mut c = DMatrix::zeros(rows, m.cols());
    c.view_mut((0, 0), (m.rows(), m.cols())).copy_from(m.currents());
    let mut w = WeightMatrix::new(c)?;
    if let Some(p) = m.pairing() {
        w = w.with_pairing(p.to_vec())?;
    }
    Ok(std::borrow::Cow::Owned(w))
}

/// Runs a forward pass in any mode; `ctx` is required for quantized and hwa.
pub fn forward_trace(
    spec: &NetworkSpec,
    weights: &Mlp,
    mode: Mode,
    ctx: Option<&HwaContext>,
    x: &[f64],
) -> Result<Trace> {
    match mode {
        Mode::Float => float_trace(spec, weights, x),
        _ => {
            let ctx = ctx.ok_or_else(|| Error::State(format!("{} mode needs a calibration", mode.name())))?;
            AnalogNetwork::new(spec, ctx, weights, mode)?.trace(x)
        }
    }
}

pub fn forward_network(
    spec: &NetworkSpec,
    weights: &Mlp,
    mode: Mode,
    ctx: Option<&HwaContext>,
    x: &[f64],
) -> Result<Vec<f64>> {
    Ok(forward_trace(spec, weights, mode, ctx, x)?.pre.pop().unwrap_or_default())
}

fn traces_for(
    spec: &NetworkSpec,
    weights: &Mlp,
    mode: Mode,
    ctx: Option<&HwaContext>,
    xs: &[&[f64]],
) -> Result<Vec<Trace>> {
    match mode {
        Mode::Float => xs.iter().map(|x| float_trace(spec, weights, x)).collect(),
        _ => {
            let ctx = ctx.ok_or_else(|| Error::State(format!("{} mode needs a calibration", mode.name())))?;
            let net = AnalogNetwork::new(spec, ctx, weights, mode)?;
            xs.par_iter().map(|x| net.trace(x)).collect()
        }
    }
}

/// Correct-class logit minus the best competing logit.
pub fn decision_margin(logits: &[f64], label: usize) -> f64 {
    let rival = logits
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != label)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    logits[label] - rival
}

/// Predicted class; a tie with the true class counts against it.
pub fn classify(logits: &[f64], label: usize) -> usize {
    if decision_margin(logits, label) > 0.0 {
        return label;
    }
    let mut best = None;
    for (k, &v) in logits.iter().enumerate() {
        if k != label && best.is_none_or(|(_, b)| v > b) {
            best = Some((k, v));
        }
    }
    best.map_or(label, |(k, _)| k)
}

fn softmax_ce(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + m - logits[label];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

/// Cross-entropy gradient of the float pipeline at the activations recorded
/// in `trace`. Fed an analog trace this is the straight-through surrogate.
pub fn backward(spec: &NetworkSpec, weights: &Mlp, trace: &Trace, label: usize) -> (f64, Vec<DMatrix<f64>>) {
    let (loss, mut delta) = softmax_ce(trace.logits(), label);
    let depth = spec.depth();
    let mut grads: Vec<DMatrix<f64>> = weights.layers.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect();
    for l in (0..depth).rev() {
        let a = &trace.inputs[l];
        let w = &weights.layers[l];
        for (i, ai) in a.iter().enumerate() {
            for (j, dj) in delta.iter().enumerate() {
                grads[l][(i, j)] = ai * dj;
            }
        }
        if l > 0 {
            let pre = &trace.pre[l - 1];
            delta = (0..w.nrows())
                .map(|i| {
                    let back: f64 = delta.iter().enumerate().map(|(j, d)| d * w[(i, j)]).sum();
                    back * spec.activation.derivative(pre[i])
                })
                .collect();
        }
    }
    (loss, grads)
}

/// Mean cross-entropy of the float pipeline.
pub fn float_loss(spec: &NetworkSpec, weights: &Mlp, xs: &[Vec<f64>], labels: &[u8]) -> Result<f64> {
    let mut total = 0.0;
    for (x, &y) in xs.iter().zip(labels) {
        let t = float_trace(spec, weights, x)?;
        total += softmax_ce(t.logits(), y as usize).0;
    }
    Ok(total / xs.len().max(1) as f64)
}

/// Mean surrogate gradient over a minibatch for the given forward mode.
pub fn batch_gradient(
    spec: &NetworkSpec,
    weights: &Mlp,
    mode: Mode,
    ctx: Option<&HwaContext>,
    xs: &[&[f64]],
    labels: &[u8],
) -> Result<(f64, Vec<DMatrix<f64>>)> {
    let traces = traces_for(spec, weights, mode, ctx, xs)?;
    let mut grads: Vec<DMatrix<f64>> = weights.layers.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect();
    let mut loss = 0.0;
    for (t, &y) in traces.iter().zip(labels) {
        let (l, g) = backward(spec, weights, t, y as usize);
        loss += l;
        for (acc, gi) in grads.iter_mut().zip(g) {
            *acc += gi;
        }
    }
    let n = xs.len().max(1) as f64;
    for g in &mut grads {
        *g /= n;
    }
    Ok((loss / n, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSpec {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    /// Minibatch losses in update order.
    pub step_losses: Vec<f64>,
}

struct Sgd {
    velocity: Vec<DMatrix<f64>>,
    opts: OptimizerSpec,
}

impl Sgd {
    fn new(weights: &Mlp, opts: &OptimizerSpec) -> Result<Self> {
        if !(opts.learning_rate > 0.0) || !(0.0..1.0).contains(&opts.momentum) || opts.batch_size == 0 {
            return Err(Error::Config {
                key: "optimizer".into(),
                message: "need learning_rate > 0, momentum in [0, 1), batch_size > 0".into(),
            });
        }
        Ok(Self {
            velocity: weights.layers.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
            opts: opts.clone(),
        })
    }

    fn step(&mut self, weights: &mut Mlp, grads: &[DMatrix<f64>]) {
        for ((w, v), g) in weights.layers.iter_mut().zip(&mut self.velocity).zip(grads) {
            *v *= self.opts.momentum;
            *v -= g * self.opts.learning_rate;
            *w += &*v;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_epochs(
    spec: &NetworkSpec,
    weights: &mut Mlp,
    mode: Mode,
    ctx: Option<&HwaContext>,
    data: &ImageDataset,
    epochs: usize,
    opts: &OptimizerSpec,
    seed: u64,
    stream: u64,
) -> Result<TrainingHistory> {
    if data.is_empty() {
        return Err(Error::arg("training set is empty"));
    }
    weights.check(spec)?;
    let mut sgd = Sgd::new(weights, opts)?;
    let mut rng = rng_for(seed, stream);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = TrainingHistory::default();
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(opts.batch_size) {
            let xs: Vec<&[f64]> = chunk.iter().map(|&k| data.images[k].as_slice()).collect();
            let ys: Vec<u8> = chunk.iter().map(|&k| data.labels[k]).collect();
            let traces = traces_for(spec, weights, mode, ctx, &xs)?;
            let mut grads: Vec<DMatrix<f64>> =
                weights.layers.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect();
            let mut batch_loss = 0.0;
            for (t, &y) in traces.iter().zip(&ys) {
                let (l, g) = backward(spec, weights, t, y as usize);
                batch_loss += l;
                correct += (decision_margin(t.logits(), y as usize) > 0.0) as usize;
                for (acc, gi) in grads.iter_mut().zip(g) {
                    *acc += gi;
                }
            }
            let n = chunk.len() as f64;
            for g in &mut grads {
                *g /= n;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Numeric {
                    message: format!("training loss diverged in epoch {epoch}"),
                    residual: batch_loss,
                });
            }
            sgd.step(weights, &grads);
            history.step_losses.push(batch_loss / n);
            loss_sum += batch_loss;
        }
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / data.len() as f64,
            train_accuracy: correct as f64 / data.len() as f64,
        };
        log::info!(
            "{} epoch {epoch}: loss {:.4}, train accuracy {:.4}",
            mode.name(),
            record.mean_loss,
            record.train_accuracy
        );
        history.epochs.push(record);
    }
    Ok(history)
}

/// Float-pipeline SGD from a seeded initialization.
pub fn train_baseline(
    spec: &NetworkSpec,
    data: &ImageDataset,
    epochs: usize,
    opts: &OptimizerSpec,
    seed: u64,
) -> Result<(Mlp, TrainingHistory)> {
    let mut weights = Mlp::init(spec, seed);
    let history = run_epochs(spec, &mut weights, Mode::Float, None, data, epochs, opts, seed, 11)?;
    Ok((weights, history))
}

/// Continues training with the analog forward and the float backward.
pub fn retrain_hwa(
    spec: &NetworkSpec,
    ctx: &HwaContext,
    data: &ImageDataset,
    initial: &Mlp,
    epochs: usize,
    opts: &OptimizerSpec,
    seed: u64,
) -> Result<(Mlp, TrainingHistory)> {
    if epochs == 0 {
        return Err(Error::arg("retraining needs at least one epoch"));
    }
    let mut weights = initial.clone();
    let history = run_epochs(spec, &mut weights, Mode::Hwa, Some(ctx), data, epochs, opts, seed, 12)?;
    Ok((weights, history))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub mode: Mode,
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

pub fn evaluate_accuracy(
    spec: &NetworkSpec,
    weights: &Mlp,
    mode: Mode,
    ctx: Option<&HwaContext>,
    data: &ImageDataset,
) -> Result<AccuracyReport> {
    if data.is_empty() {
        return Err(Error::arg("evaluation split is empty"));
    }
    let classes = *spec.layers.last().expect("validated");
    let logits = all_logits(spec, weights, mode, ctx, data)?;
    let mut confusion = vec![vec![0usize; classes]; classes];
    let mut correct = 0;
    for (z, &y) in logits.iter().zip(&data.labels) {
        let y = y as usize;
        if y >= classes {
            return Err(Error::arg(format!("label {y} outside {classes} classes")));
        }
        let p = classify(z, y);
        correct += (p == y) as usize;
        confusion[y][p] += 1;
    }
    Ok(AccuracyReport {
        mode,
        accuracy: correct as f64 / data.len() as f64,
        correct,
        total: data.len(),
        confusion,
    })
}

/// Predicted class per sample (ties resolved against the true label).
pub fn predict_labels(
    spec: &NetworkSpec,
    weights: &Mlp,
    mode: Mode,
    ctx: Option<&HwaContext>,
    data: &ImageDataset,
) -> Result<Vec<usize>> {
    Ok(all_logits(spec, weights, mode, ctx, data)?
        .iter()
        .zip(&data.labels)
        .map(|(z, &y)| classify(z, y as usize))
        .collect())
}

pub fn all_logits(
    spec: &NetworkSpec,
    weights: &Mlp,
    mode: Mode,
    ctx: Option<&HwaContext>,
    data: &ImageDataset,
) -> Result<Vec<Vec<f64>>> {
    let xs: Vec<&[f64]> = data.images.iter().map(Vec::as_slice).collect();
    Ok(traces_for(spec, weights, mode, ctx, &xs)?
        .into_iter()
        .map(|mut t| t.pre.pop().unwrap_or_default())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Quadrant {
    I,
    II,
    III,
    IV,
}

impl Quadrant {
    /// A on the horizontal axis, B on the vertical; zero counts as negative.
    pub fn of(a: f64, b: f64) -> Self {
        match (a > 0.0, b > 0.0) {
            (true, true) => Quadrant::I,
            (false, true) => Quadrant::II,
            (false, false) => Quadrant::III,
            (true, false) => Quadrant::IV,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecisionMarginRecord {
    pub sample: usize,
    pub label: u8,
    pub margin_a: f64,
    pub margin_b: f64,
    pub quadrant: Quadrant,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuadrantCounts {
    pub i: usize,
    pub ii: usize,
    pub iii: usize,
    pub iv: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginReport {
    pub records: Vec<DecisionMarginRecord>,
    pub counts: QuadrantCounts,
    pub histogram_a: Vec<HistogramBin>,
    pub histogram_b: Vec<HistogramBin>,
}

/// One side of a margin comparison.
#[derive(Debug, Clone, Copy)]
pub struct ModelView<'a> {
    pub weights: &'a Mlp,
    pub mode: Mode,
    pub ctx: Option<&'a HwaContext>,
}

pub fn decision_margin_report(
    spec: &NetworkSpec,
    a: ModelView<'_>,
    b: ModelView<'_>,
    data: &ImageDataset,
    bins: usize,
) -> Result<MarginReport> {
    let za = all_logits(spec, a.weights, a.mode, a.ctx, data)?;
    let zb = all_logits(spec, b.weights, b.mode, b.ctx, data)?;
    let mut counts = QuadrantCounts::default();
    let records: Vec<DecisionMarginRecord> = za
        .iter()
        .zip(&zb)
        .zip(&data.labels)
        .enumerate()
        .map(|(sample, ((la, lb), &label))| {
            let margin_a = decision_margin(la, label as usize);
            let margin_b = decision_margin(lb, label as usize);
            let quadrant = Quadrant::of(margin_a, margin_b);
            match quadrant {
                Quadrant::I => counts.i += 1,
                Quadrant::II => counts.ii += 1,
                Quadrant::III => counts.iii += 1,
                Quadrant::IV => counts.iv += 1,
            }
            DecisionMarginRecord {
                sample,
                label,
                margin_a,
                margin_b,
                quadrant,
            }
        })
        .collect();
    let ma: Vec<f64> = records.iter().map(|r| r.margin_a).collect();
    let mb: Vec<f64> = records.iter().map(|r| r.margin_b).collect();
    // Shared bins so the two distributions overlay.
    let lo = ma.iter().chain(&mb).copied().fold(f64::INFINITY, f64::min);
    let hi = ma.iter().chain(&mb).copied().fold(f64::NEG_INFINITY, f64::max);
    let (histogram_a, histogram_b) = if lo.is_finite() && hi > lo {
        (histogram(&ma, lo, hi, bins), histogram(&mb, lo, hi, bins))
    } else {
        (Vec::new(), Vec::new())
    };
    Ok(MarginReport {
        records,
        counts,
        histogram_a,
        histogram_b,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// Layers (0-based) running with hardware distortion.
    pub layers: Vec<usize>,
    pub label: String,
    pub accuracy: f64,
    /// Quantized-baseline accuracy minus this row's accuracy.
    pub degradation: f64,
}

/// The ablation rows: label, distorted layers, and the network with every
/// other layer's mechanisms switched off.
pub fn ablation_variants(spec: &NetworkSpec) -> Vec<(String, Vec<usize>, NetworkSpec)> {
    let depth = spec.depth();
    let mut sets: Vec<(String, Vec<usize>)> = vec![("none".into(), vec![])];
    for l in 0..depth {
        sets.push((format!("layer{}", l + 1), vec![l]));
    }
    sets.push(("all".into(), (0..depth).collect()));
    sets.into_iter()
        .map(|(label, layers)| {
            let mut s = spec.clone();
            for (l, f) in s.layer_flags.iter_mut().enumerate() {
                if !layers.contains(&l) {
                    *f = HwaFlags::NONE;
                }
            }
            (label, layers, s)
        })
        .collect()
}

/// Accuracy with the spec's mechanisms enabled on no layer, each single
/// layer, and all layers.
pub fn layer_ablation(
    spec: &NetworkSpec,
    weights: &Mlp,
    ctx: &HwaContext,
    data: &ImageDataset,
) -> Result<Vec<AblationRow>> {
    let sets = ablation_variants(spec);
    let mut rows = Vec::with_capacity(sets.len());
    let mut base = None;
    for (label, layers, s) in sets {
        let acc = evaluate_accuracy(&s, weights, Mode::Hwa, Some(ctx), data)?.accuracy;
        let b = *base.get_or_insert(acc);
        rows.push(AblationRow {
            layers,
            label,
            accuracy: acc,
            degradation: b - acc,
        });
    }
    Ok(rows)
}
