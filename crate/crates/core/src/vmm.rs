//! Ideal and hardware-aware forward pipelines of the time-domain VMM, plus the
//! I/O quantizer and the differential mapping of signed weights.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::device::{
    crosstalk_into, relative_error_unchecked, solve_bl_drop_exact, BlDropLut, DeviceParams,
};
use crate::error::{Error, Result};
use crate::timeslot::{plan_slots, PulseVector, SlotOptions, TimeSlotPlan};

/// Which distortion mechanisms the forward model applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HwaFlags {
    pub crosstalk: bool,
    pub bl_drop: bool,
}

impl HwaFlags {
    pub const NONE: HwaFlags = HwaFlags {
        crosstalk: false,
        bl_drop: false,
    };
    pub const XT_ONLY: HwaFlags = HwaFlags {
        crosstalk: true,
        bl_drop: false,
    };
    pub const BL_ONLY: HwaFlags = HwaFlags {
        crosstalk: false,
        bl_drop: true,
    };
    pub const FULL: HwaFlags = HwaFlags {
        crosstalk: true,
        bl_drop: true,
    };

    pub fn any(self) -> bool {
        self.crosstalk || self.bl_drop
    }
}

/// How the bit-line drop of a column is obtained.
#[derive(Debug, Clone, Copy)]
pub enum BlSource<'a> {
    Lut(&'a BlDropLut),
    /// Root-find every column current; used by oracles.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnPair {
    pub pos: usize,
    pub neg: usize,
}

/// Cell currents (A) at nominal `V_REF`, rows = wordlines, cols = bitlines.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    currents: DMatrix<f64>,
    pairing: Option<Vec<ColumnPair>>,
}

impl WeightMatrix {
    pub fn new(currents: DMatrix<f64>) -> Result<Self> {
        if let Some(bad) = currents.iter().find(|c| !(**c >= 0.0) || !c.is_finite()) {
            return Err(Error::arg(format!("cell current {bad:e} must be finite and >= 0")));
        }
        Ok(Self {
            currents,
            pairing: None,
        })
    }

    pub fn uniform(rows: usize, cols: usize, current: f64) -> Self {
        Self {
            currents: DMatrix::from_element(rows, cols, current),
            pairing: None,
        }
    }

    pub fn with_pairing(mut self, pairing: Vec<ColumnPair>) -> Result<Self> {
        if 2 * pairing.len() != self.cols() {
            return Err(Error::arg(format!(
                "{} pairs need {} physical columns, matrix has {}",
                pairing.len(),
                2 * pairing.len(),
                self.cols()
            )));
        }
        let mut seen = vec![false; self.cols()];
        for p in &pairing {
            for c in [p.pos, p.neg] {
                if c >= self.cols() || seen[c] {
                    return Err(Error::arg(format!("pairing reuses or overflows column {c}")));
                }
                seen[c] = true;
            }
        }
        self.pairing = Some(pairing);
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.currents.nrows()
    }

    pub fn cols(&self) -> usize {
        self.currents.ncols()
    }

    #[inline]
    pub fn current(&self, row: usize, col: usize) -> f64 {
        self.currents[(row, col)]
    }

    pub fn set_current(&mut self, row: usize, col: usize, value: f64) -> Result<()> {
        if !(value >= 0.0) || !value.is_finite() {
            return Err(Error::arg(format!("cell current {value:e} must be finite and >= 0")));
        }
        self.currents[(row, col)] = value;
        Ok(())
    }

    pub fn currents(&self) -> &DMatrix<f64> {
        &self.currents
    }

    pub fn pairing(&self) -> Option<&[ColumnPair]> {
        self.pairing.as_deref()
    }

    pub fn max_current(&self) -> f64 {
        self.currents.iter().copied().fold(0.0, f64::max)
    }

    /// Largest possible column current (all rows active, no distortion).
    pub fn max_column_current(&self) -> f64 {
        self.currents
            .column_iter()
            .map(|c| c.sum())
            .fold(0.0, f64::max)
    }

    /// Serializes to the versioned `tdvmm-weights` text format (see README).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "tdvmm-weights,1");
        let _ = writeln!(s, "shape,{},{}", self.rows(), self.cols());
        let _ = writeln!(s, "units,amps");
        match &self.pairing {
            Some(p) => {
                let _ = writeln!(s, "pairs,{}", p.len());
                for (j, pair) in p.iter().enumerate() {
                    let _ = writeln!(s, "pair,{j},{},{}", pair.pos, pair.neg);
                }
            }
            None => {
                let _ = writeln!(s, "pairs,0");
            }
        }
        for i in 0..self.rows() {
            let _ = write!(s, "row,{i}");
            for j in 0..self.cols() {
                let _ = write!(s, ",{:e}", self.current(i, j));
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let mut offset = 0u64;
        let fail = |offset: u64, message: String| Error::Format {
            path: origin.to_path_buf(),
            offset,
            message,
        };
        let mut lines = text.lines().map(|l| {
            let at = offset;
            offset += l.len() as u64 + 1;
            (at, l.split(',').map(str::trim).collect::<Vec<_>>())
        });
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| fail(text.len() as u64, format!("missing {what} line")))
        };
        let parse_usize = |at: u64, s: &str| {
            s.parse::<usize>()
                .map_err(|e| fail(at, format!("bad integer `{s}`: {e}")))
        };

        let (at, head) = next("header")?;
        if head != ["tdvmm-weights", "1"] {
            return Err(fail(at, "expected `tdvmm-weights,1` header".into()));
        }
        let (at, shape) = next("shape")?;
        if shape.len() != 3 || shape[0] != "shape" {
            return Err(fail(at, "expected `shape,<rows>,<cols>`".into()));
        }
        let rows = parse_usize(at, shape[1])?;
        let cols = parse_usize(at, shape[2])?;
        let (at, units) = next("units")?;
        if units != ["units", "amps"] {
            return Err(fail(at, "expected `units,amps`".into()));
        }
        let (at, pairs) = next("pairs")?;
        if pairs.len() != 2 || pairs[0] != "pairs" {
            return Err(fail(at, "expected `pairs,<count>`".into()));
        }
        let n_pairs = parse_usize(at, pairs[1])?;
        let mut pairing = Vec::with_capacity(n_pairs);
        for j in 0..n_pairs {
            let (at, f) = next("pair")?;
            if f.len() != 4 || f[0] != "pair" || parse_usize(at, f[1])? != j {
                return Err(fail(at, format!("expected `pair,{j},<pos>,<neg>`")));
            }
            pairing.push(ColumnPair {
                pos: parse_usize(at, f[2])?,
                neg: parse_usize(at, f[3])?,
            });
        }
        let mut m = DMatrix::zeros(rows, cols);
        for i in 0..rows {
            let (at, f) = next("row")?;
            if f.len() != cols + 2 || f[0] != "row" || parse_usize(at, f[1])? != i {
                return Err(fail(at, format!("expected `row,{i}` with {cols} values")));
            }
            for j in 0..cols {
                m[(i, j)] = f[j + 2]
                    .parse::<f64>()
                    .map_err(|e| fail(at, format!("bad current `{}`: {e}", f[j + 2])))?;
            }
        }
        let w = WeightMatrix::new(m).map_err(|e| fail(0, e.to_string()))?;
        if n_pairs > 0 {
            w.with_pairing(pairing).map_err(|e| fail(0, e.to_string()))
        } else {
            Ok(w)
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }
}

/// Clips an accumulated output to the amplifier span `[0, v_sat]`.
#[inline]
pub fn saturate(v: f64, params: &DeviceParams) -> f64 {
    v.clamp(0.0, params.v_sat)
}

fn check_dims(input: &PulseVector, weights: &WeightMatrix, params: &DeviceParams) -> Result<()> {
    if input.len() != weights.rows() {
        return Err(Error::arg(format!(
            "input has {} rows, weight matrix {}",
            input.len(),
            weights.rows()
        )));
    }
    if weights.rows() != params.rows {
        return Err(Error::arg(format!(
            "weight matrix has {} rows, device {}",
            weights.rows(),
            params.rows
        )));
    }
    Ok(())
}

/// `(1/C) sum_i I_ij t_i` before saturation.
pub fn ideal_unsaturated(
    input: &PulseVector,
    weights: &WeightMatrix,
    params: &DeviceParams,
) -> Result<Vec<f64>> {
    check_dims(input, weights, params)?;
    let t = input.durations();
    Ok((0..weights.cols())
        .map(|j| {
            let q: f64 = t
                .iter()
                .enumerate()
                .map(|(i, &ti)| weights.current(i, j) * ti)
                .sum();
            q / params.c_fb
        })
        .collect())
}

pub fn vmm_ideal(
    input: &PulseVector,
    weights: &WeightMatrix,
    params: &DeviceParams,
) -> Result<Vec<f64>> {
    Ok(ideal_unsaturated(input, weights, params)?
        .into_iter()
        .map(|v| saturate(v, params))
        .collect())
}

/// One time slot as seen by a column: its width and the per-row gain applied
/// to the stored current (crosstalk factor when active, 0 when inactive).
#[derive(Debug, Clone, PartialEq)]
pub struct SlotGains {
    pub duration: f64,
    pub gains: Vec<f64>,
}

/// Per-slot row gains of a planned input.
pub fn slot_gains(plan: &TimeSlotPlan, params: &DeviceParams, crosstalk: bool) -> Vec<SlotGains> {
    let rows = params.rows;
    let mut alpha = vec![1.0; rows];
    plan.durations()
        .iter()
        .zip(plan.activation())
        .map(|(&duration, act)| {
            if crosstalk {
                crosstalk_into(act, params, &mut alpha);
            }
            let gains = act
                .iter()
                .zip(&alpha)
                .map(|(&a, &g)| match (a, crosstalk) {
                    (false, _) => 0.0,
                    (true, true) => g,
                    (true, false) => 1.0,
                })
                .collect();
            SlotGains { duration, gains }
        })
        .collect()
}

/// Column current after the bit-line drop, `I (1 + eps_r(dV_BL(I)))`.
#[inline]
pub(crate) fn bl_effective(
    i_ref: f64,
    params: &DeviceParams,
    bl: BlSource<'_>,
    column: usize,
) -> Result<f64> {
    let dv = match bl {
        BlSource::Lut(lut) => lut.lookup_raw(i_ref).ok_or(Error::Range {
            column: Some(column),
            current: i_ref,
            max: lut.i_max(),
        })?,
        BlSource::Exact => solve_bl_drop_exact(i_ref, params)?,
    };
    Ok(i_ref * (1.0 + relative_error_unchecked(dv, params)))
}

/// Slot-engine accumulation: unsaturated per-column output for the given
/// slot gains.
pub fn accumulate_slots(
    slots: &[SlotGains],
    weights: &WeightMatrix,
    params: &DeviceParams,
    bl: Option<BlSource<'_>>,
) -> Result<Vec<f64>> {
    if let Some(BlSource::Lut(lut)) = bl {
        if !lut.built_for(params) {
            return Err(Error::State(
                "bit-line LUT was built for different device parameters".into(),
            ));
        }
    }
    let rows = weights.rows();
    let mut out = Vec::with_capacity(weights.cols());
    for (j, col) in weights.currents().column_iter().enumerate() {
        let mut q = 0.0;
        for s in slots {
            let mut i_ref = 0.0;
            for i in 0..rows {
                let g = s.gains[i];
                if g != 0.0 {
                    i_ref += g * col[i];
                }
            }
            let eff = match bl {
                Some(src) => bl_effective(i_ref, params, src, j)?,
                None => i_ref,
            };
            q += eff * s.duration;
        }
        out.push(q / params.c_fb);
    }
    Ok(out)
}

/// Unsaturated slot-engine output for any flag combination.
pub fn slot_engine_unsaturated(
    plan: &TimeSlotPlan,
    weights: &WeightMatrix,
    params: &DeviceParams,
    bl: BlSource<'_>,
    flags: HwaFlags,
) -> Result<Vec<f64>> {
    let slots = slot_gains(plan, params, flags.crosstalk);
    accumulate_slots(&slots, weights, params, flags.bl_drop.then_some(bl))
}

/// Hardware-aware output before saturation. With no mechanism enabled this
/// is exactly [`ideal_unsaturated`].
pub fn hwa_unsaturated(
    input: &PulseVector,
    weights: &WeightMatrix,
    params: &DeviceParams,
    bl: BlSource<'_>,
    flags: HwaFlags,
    opts: &SlotOptions,
) -> Result<Vec<f64>> {
    check_dims(input, weights, params)?;
    if !flags.any() {
        return ideal_unsaturated(input, weights, params);
    }
    let plan = plan_slots(input, opts)?;
    slot_engine_unsaturated(&plan, weights, params, bl, flags)
}

/// Hardware-aware forward: crosstalk and bit-line drop per time slot,
/// accumulated over slots and clipped to the amplifier span.
pub fn vmm_hwa(
    input: &PulseVector,
    weights: &WeightMatrix,
    params: &DeviceParams,
    lut: &BlDropLut,
    flags: HwaFlags,
) -> Result<Vec<f64>> {
    vmm_hwa_with(
        input,
        weights,
        params,
        BlSource::Lut(lut),
        flags,
        &SlotOptions::default(),
    )
}

pub fn vmm_hwa_with(
    input: &PulseVector,
    weights: &WeightMatrix,
    params: &DeviceParams,
    bl: BlSource<'_>,
    flags: HwaFlags,
    opts: &SlotOptions,
) -> Result<Vec<f64>> {
    Ok(hwa_unsaturated(input, weights, params, bl, flags, opts)?
        .into_iter()
        .map(|v| saturate(v, params))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizerSpec {
    pub bits: u32,
    pub full_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantMode {
    /// Pulse codes: dequantized to `code * step`, so zero stays zero.
    Input,
    /// ADC readout: dequantized to the bin centre `(code + 0.5) * step`.
    Output,
}

impl QuantizerSpec {
    pub fn new(bits: u32, full_scale: f64) -> Result<Self> {
        let q = Self { bits, full_scale };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=30).contains(&self.bits) {
            return Err(Error::arg(format!("quantizer bits {} outside 1..=30", self.bits)));
        }
        if !(self.full_scale > 0.0 && self.full_scale.is_finite()) {
            return Err(Error::arg("quantizer full scale must be > 0"));
        }
        Ok(())
    }

    pub fn levels(&self) -> u32 {
        1 << self.bits
    }

    pub fn step(&self) -> f64 {
        self.full_scale / self.levels() as f64
    }

    #[inline]
    pub fn code(&self, value: f64) -> u32 {
        let top = self.levels() - 1;
        let c = (value / self.step()).floor();
        if c.is_nan() || c <= 0.0 {
            0
        } else if c >= top as f64 {
            top
        } else {
            c as u32
        }
    }

    #[inline]
    pub fn dequantize(&self, code: u32, mode: QuantMode) -> f64 {
        match mode {
            QuantMode::Input => code as f64 * self.step(),
            QuantMode::Output => (code as f64 + 0.5) * self.step(),
        }
    }
}

/// Uniform mid-rise quantization with clipping at both ends.
pub fn quantize_uniform(
    values: &[f64],
    spec: &QuantizerSpec,
    mode: QuantMode,
) -> (Vec<u32>, Vec<f64>) {
    let codes: Vec<u32> = values.iter().map(|&v| spec.code(v)).collect();
    let deq = codes.iter().map(|&c| spec.dequantize(c, mode)).collect();
    (codes, deq)
}

/// Maps a signed logical matrix (rows = wordlines) onto two physical column
/// banks: logical column `j` drives physical `j` (positive part) and
/// `L + j` (negative part).
pub fn map_signed_weights(signed: &DMatrix<f64>, scale: f64) -> Result<WeightMatrix> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::arg(format!("weight scale {scale:e} must be > 0")));
    }
    let (rows, cols) = signed.shape();
    let mut m = DMatrix::zeros(rows, 2 * cols);
    for j in 0..cols {
        for i in 0..rows {
            let w = signed[(i, j)];
            if !w.is_finite() {
                return Err(Error::arg(format!("weight ({i},{j}) is not finite")));
            }
            if w >= 0.0 {
                m[(i, j)] = w * scale;
            } else {
                m[(i, cols + j)] = -w * scale;
            }
        }
    }
    let pairing = (0..cols)
        .map(|j| ColumnPair {
            pos: j,
            neg: cols + j,
        })
        .collect();
    WeightMatrix::new(m)?.with_pairing(pairing)
}

pub fn differential_readout(outputs: &[f64], pairing: Option<&[ColumnPair]>) -> Result<Vec<f64>> {
    let pairing =
        pairing.ok_or_else(|| Error::State("weight matrix carries no differential pairing".into()))?;
    pairing
        .iter()
        .map(|p| {
            let pos = outputs.get(p.pos);
            let neg = outputs.get(p.neg);
            match (pos, neg) {
                (Some(a), Some(b)) => Ok(a - b),
                _ => Err(Error::arg(format!(
                    "pair ({}, {}) outside {} outputs",
                    p.pos,
                    p.neg,
                    outputs.len()
                ))),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::PairKind;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const U: f64 = 1e-6;

    fn params() -> DeviceParams {
        DeviceParams::default()
    }

    fn random_weights(rng: &mut ChaCha8Rng) -> WeightMatrix {
        WeightMatrix::new(DMatrix::from_fn(16, 16, |_, _| rng.random_range(0.1e-9..3e-9)))
            .unwrap()
    }

    fn random_codes(rng: &mut ChaCha8Rng) -> PulseVector {
        PulseVector::from_codes((0..16).map(|_| rng.random_range(0..32)).collect(), U).unwrap()
    }

    fn lut_for(w: &WeightMatrix) -> BlDropLut {
        BlDropLut::covering(&params(), w.max_current()).unwrap()
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let w = WeightMatrix::uniform(16, 16, 1e-9);
        assert!(vmm_ideal(&PulseVector::zeros(16), &w, &params())
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn one_nanoamp_for_one_microsecond_is_one_millivolt() {
        let mut w = WeightMatrix::uniform(16, 16, 0.0);
        w.set_current(2, 5, 1e-9).unwrap();
        let mut d = vec![0.0; 16];
        d[2] = 1e-6;
        let out = vmm_ideal(&PulseVector::from_durations(d).unwrap(), &w, &params()).unwrap();
        assert_relative_eq!(out[5], 1e-3, max_relative = 1e-12);
        assert!(out.iter().enumerate().all(|(j, &v)| j == 5 || v == 0.0));
    }

    #[test]
    fn ideal_matches_dense_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = random_weights(&mut rng);
        let x = random_codes(&mut rng);
        let t = nalgebra::DVector::from_column_slice(x.durations());
        let dense = w.currents().transpose() * t / params().c_fb;
        let out = ideal_unsaturated(&x, &w, &params()).unwrap();
        for (a, b) in out.iter().zip(dense.iter()) {
            assert_relative_eq!(*a, *b, max_relative = 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let w = WeightMatrix::uniform(16, 16, 1e-9);
        assert!(vmm_ideal(&PulseVector::zeros(8), &w, &params()).is_err());
    }

    #[test]
    fn disabled_mechanisms_are_bit_exact_ideal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = random_weights(&mut rng);
        let lut = lut_for(&w);
        for _ in 0..50 {
            let x = random_codes(&mut rng);
            assert_eq!(
                vmm_hwa(&x, &w, &params(), &lut, HwaFlags::NONE).unwrap(),
                vmm_ideal(&x, &w, &params()).unwrap()
            );
        }
    }

    #[test]
    fn single_row_sees_no_crosstalk() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = random_weights(&mut rng);
        let lut = lut_for(&w);
        let mut codes = vec![0; 16];
        codes[9] = 20;
        let x = PulseVector::from_codes(codes, U).unwrap();
        let hwa = vmm_hwa(&x, &w, &params(), &lut, HwaFlags::XT_ONLY).unwrap();
        let ideal = vmm_ideal(&x, &w, &params()).unwrap();
        for (a, b) in hwa.iter().zip(&ideal) {
            assert_relative_eq!(*a, *b, max_relative = 1e-14);
        }
    }

    #[test]
    fn close_pair_scales_output_by_alpha() {
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random_weights(&mut rng);
        let lut = lut_for(&w);
        let mut codes = vec![0; 16];
        codes[1] = 12; // WL2
        codes[2] = 12; // WL3
        assert_eq!(p.pair_kind(1), PairKind::Close);
        let x = PulseVector::from_codes(codes, U).unwrap();
        let alpha = (p.v_ref * (p.k_coupl - p.k_xt_close) / (p.eta * p.v_thermal)).exp();
        let hwa = vmm_hwa(&x, &w, &p, &lut, HwaFlags::XT_ONLY).unwrap();
        let ideal = vmm_ideal(&x, &w, &p).unwrap();
        for (a, b) in hwa.iter().zip(&ideal) {
            assert_relative_eq!(*a, alpha * b, max_relative = 1e-13);
        }
    }

    #[test]
    fn lut_overflow_names_column() {
        let p = params();
        let mut w = WeightMatrix::uniform(16, 16, 1e-9);
        let lut = build_small_lut(&p);
        w.set_current(0, 7, 1e-5).unwrap();
        let x = PulseVector::from_codes(vec![3; 16], U).unwrap();
        match vmm_hwa(&x, &w, &p, &lut, HwaFlags::BL_ONLY) {
            Err(Error::Range { column, .. }) => assert_eq!(column, Some(7)),
            other => panic!("expected range error, got {other:?}"),
        }
    }

    fn build_small_lut(p: &DeviceParams) -> BlDropLut {
        crate::device::build_bl_lut(p, 1e-12, 1e-6, 32).unwrap()
    }

    #[test]
    fn lut_for_other_params_rejected() {
        let p = params();
        let lut = build_small_lut(&p);
        let mut q = p.clone();
        q.g_m *= 2.0;
        let w = WeightMatrix::uniform(16, 16, 1e-9);
        let x = PulseVector::from_codes(vec![3; 16], U).unwrap();
        assert!(matches!(
            vmm_hwa(&x, &w, &q, &lut, HwaFlags::FULL),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn quantizer_examples() {
        let q = QuantizerSpec::new(5, 32.0 * U).unwrap();
        let (c, d) = quantize_uniform(&[0.0, 7.9 * U, 40.0 * U, -1.0], &q, QuantMode::Input);
        assert_eq!(c, vec![0, 7, 31, 0]);
        assert_eq!(d[0], 0.0);
        assert_relative_eq!(d[1], 7.0 * U, max_relative = 1e-15);
        let (_, out) = quantize_uniform(&[0.0], &q, QuantMode::Output);
        assert_relative_eq!(out[0], 0.5 * U, max_relative = 1e-15);
        let unit = QuantizerSpec::new(5, 1.0).unwrap();
        assert_eq!(unit.code(1.0), 31);
        assert!(QuantizerSpec::new(0, 1.0).is_err());
        assert!(QuantizerSpec::new(5, 0.0).is_err());
    }

    #[test]
    fn signed_mapping_examples() {
        let z = map_signed_weights(&DMatrix::zeros(4, 3), 1e-9).unwrap();
        assert_eq!(z.cols(), 6);
        assert!(z.currents().iter().all(|&c| c == 0.0));
        let one = map_signed_weights(&DMatrix::from_element(1, 1, 1.0), 1e-9).unwrap();
        assert_eq!((one.current(0, 0), one.current(0, 1)), (1e-9, 0.0));
        let neg = map_signed_weights(&DMatrix::from_element(1, 1, -2.0), 1e-9).unwrap();
        assert_eq!((neg.current(0, 0), neg.current(0, 1)), (0.0, 2e-9));
        assert!(map_signed_weights(&DMatrix::zeros(2, 2), 0.0).is_err());
    }

    #[test]
    fn differential_readout_examples() {
        let pairs = [ColumnPair { pos: 0, neg: 1 }];
        assert_eq!(differential_readout(&[2e-3, 2e-3], Some(&pairs)).unwrap(), vec![0.0]);
        let v = differential_readout(&[3e-3, 1e-3], Some(&pairs)).unwrap();
        assert_relative_eq!(v[0], 2e-3, max_relative = 1e-15);
        assert!(matches!(differential_readout(&[1.0, 1.0], None), Err(Error::State(_))));
    }

    #[test]
    fn signed_round_trip_matches_dense_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = params();
        let scale = 1e-9;
        let signed = DMatrix::from_fn(16, 8, |_, _| rng.random_range(-1.0..1.0));
        let w = map_signed_weights(&signed, scale).unwrap();
        for _ in 0..20 {
            let x = random_codes(&mut rng);
            let out = ideal_unsaturated(&x, &w, &p).unwrap();
            let logical = differential_readout(&out, w.pairing()).unwrap();
            let t = nalgebra::DVector::from_column_slice(x.durations());
            let dense = signed.transpose() * t * (scale / p.c_fb);
            for (a, b) in logical.iter().zip(dense.iter()) {
                let tol = 1e-12 * dense.amax().max(f64::MIN_POSITIVE);
                assert!((a - b).abs() <= tol, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn weight_file_rejects_garbage() {
        let path = Path::new("mem");
        assert!(matches!(
            WeightMatrix::from_text("nope", path),
            Err(Error::Format { .. })
        ));
        assert!(WeightMatrix::from_text("tdvmm-weights,1\nshape,2,2\nunits,amps\npairs,0\nrow,0,1e-9,1e-9\n", path).is_err());
    }

    proptest! {
        #[test]
        fn weight_file_round_trips(vals in proptest::collection::vec(0.0f64..1e-6, 16 * 8), paired in any::<bool>()) {
            let m = DMatrix::from_vec(16, 8, vals);
            let mut w = WeightMatrix::new(m).unwrap();
            if paired {
                w = w.with_pairing((0..4).map(|j| ColumnPair { pos: j, neg: 4 + j }).collect()).unwrap();
            }
            let back = WeightMatrix::from_text(&w.to_text(), Path::new("mem")).unwrap();
            prop_assert_eq!(back, w);
        }

        #[test]
        fn hwa_never_exceeds_ideal(seed in any::<u64>(), xt in any::<bool>(), bl in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = random_weights(&mut rng);
            let lut = lut_for(&w);
            let x = random_codes(&mut rng);
            let p = params();
            let flags = HwaFlags { crosstalk: xt, bl_drop: bl };
            let hwa = hwa_unsaturated(&x, &w, &p, BlSource::Lut(&lut), flags, &SlotOptions::default()).unwrap();
            let ideal = ideal_unsaturated(&x, &w, &p).unwrap();
            for (a, b) in hwa.iter().zip(&ideal) {
                prop_assert!(*a <= *b * (1.0 + 1e-12));
            }
        }

        #[test]
        fn concurrent_activation_loses_charge(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = random_weights(&mut rng);
            let lut = lut_for(&w);
            let p = params();
            let x = random_codes(&mut rng);
            let opts = SlotOptions::default();
            let joint = hwa_unsaturated(&x, &w, &p, BlSource::Lut(&lut), HwaFlags::FULL, &opts).unwrap();
            let mut singles = vec![0.0; 16];
            for (i, &c) in x.codes().unwrap().iter().enumerate() {
                let mut codes = vec![0; 16];
                codes[i] = c;
                let xi = PulseVector::from_codes(codes, U).unwrap();
                let yi = hwa_unsaturated(&xi, &w, &p, BlSource::Lut(&lut), HwaFlags::FULL, &opts).unwrap();
                for (s, v) in singles.iter_mut().zip(yi) { *s += v; }
            }
            for (j, s) in joint.iter().zip(&singles) {
                prop_assert!(*j <= *s * (1.0 + 1e-12));
            }
        }

        #[test]
        fn ideal_is_linear(seed in any::<u64>(), k in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = random_weights(&mut rng);
            let p = params();
            let a = random_codes(&mut rng);
            let b = random_codes(&mut rng);
            let sum = PulseVector::from_durations(a.durations().iter().zip(b.durations()).map(|(x, y)| x + y).collect()).unwrap();
            let ya = ideal_unsaturated(&a, &w, &p).unwrap();
            let yb = ideal_unsaturated(&b, &w, &p).unwrap();
            let ys = ideal_unsaturated(&sum, &w, &p).unwrap();
            let yk = ideal_unsaturated(&a.rescaled(k).unwrap(), &w, &p).unwrap();
            for j in 0..16 {
                prop_assert!((ys[j] - ya[j] - yb[j]).abs() <= 1e-12 * ys[j].abs().max(1e-30));
                prop_assert!((yk[j] - k * ya[j]).abs() <= 1e-12 * yk[j].abs().max(1e-30));
            }
        }
    }
}
