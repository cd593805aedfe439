//! Decomposition of pulse-width inputs into adaptive time slots.
//!
//! All pulses start together at t = 0 and each wordline releases at its own
//! pulse width, so the active set only shrinks over time. A slot spans the
//! interval between two consecutive distinct pulse widths; inside a slot the
//! active set, and hence every distortion, is constant.

use serde::{Deserialize, Serialize};

use crate::device::{crosstalk_into, solve_bl_drop_exact, relative_error_unchecked, DeviceParams};
use crate::error::{Error, Result};
use crate::vmm::{saturate, HwaFlags, WeightMatrix};

/// One input sample: a pulse width per wordline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulseVector {
    durations: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dac_codes: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    time_unit: Option<f64>,
}

impl PulseVector {
    pub fn from_durations(durations: Vec<f64>) -> Result<Self> {
        if let Some((i, d)) = durations
            .iter()
            .enumerate()
            .find(|(_, d)| !(**d >= 0.0) || !d.is_finite())
        {
            return Err(Error::arg(format!("row {i}: pulse width {d:e} must be >= 0")));
        }
        Ok(Self {
            durations,
            dac_codes: None,
            time_unit: None,
        })
    }

    pub fn from_codes(codes: Vec<u32>, time_unit: f64) -> Result<Self> {
        if !(time_unit > 0.0 && time_unit.is_finite()) {
            return Err(Error::arg(format!("time unit {time_unit:e} must be > 0")));
        }
        let durations = codes.iter().map(|&c| c as f64 * time_unit).collect();
        Ok(Self {
            durations,
            dac_codes: Some(codes),
            time_unit: Some(time_unit),
        })
    }

    pub fn zeros(rows: usize) -> Self {
        Self {
            durations: vec![0.0; rows],
            dac_codes: None,
            time_unit: None,
        }
    }

    pub fn durations(&self) -> &[f64] {
        &self.durations
    }

    pub fn codes(&self) -> Option<&[u32]> {
        self.dac_codes.as_deref()
    }

    pub fn time_unit(&self) -> Option<f64> {
        self.time_unit
    }

    pub fn len(&self) -> usize {
        self.durations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.durations.is_empty()
    }

    /// Same codes driven with a time unit stretched by `factor`.
    pub fn rescaled(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(Error::arg(format!("rescale factor {factor:e} must be > 0")));
        }
        match (&self.dac_codes, self.time_unit) {
            (Some(codes), Some(u)) => Self::from_codes(codes.clone(), u * factor),
            _ => Self::from_durations(self.durations.iter().map(|d| d * factor).collect()),
        }
    }

    /// Checks the internal consistency of a deserialized vector.
    pub fn validate(&self) -> Result<()> {
        Self::from_durations(self.durations.clone())?;
        if let (Some(codes), Some(u)) = (&self.dac_codes, self.time_unit) {
            if codes.len() != self.durations.len() {
                return Err(Error::arg("code and duration counts differ"));
            }
            for (c, d) in codes.iter().zip(&self.durations) {
                if (*c as f64 * u - d).abs() > 1e-12 * d.abs().max(u) {
                    return Err(Error::arg("durations do not equal codes x time unit"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlotOptions {
    /// Finest representable time step; defaults to the input time unit when
    /// the pulses come from DAC codes.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_step: Option<f64>,
    /// Upper bound on slots per sample.
    pub max_slots: usize,
}

impl Default for SlotOptions {
    fn default() -> Self {
        Self {
            min_step: None,
            max_slots: 4096,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSlotPlan {
    boundaries: Vec<f64>,
    durations: Vec<f64>,
    activation: Vec<Vec<bool>>,
    /// Whole time units per slot when planned from integer codes.
    unit_counts: Option<Vec<u64>>,
}

impl TimeSlotPlan {
    pub fn len(&self) -> usize {
        self.durations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.durations.is_empty()
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub fn durations(&self) -> &[f64] {
        &self.durations
    }

    pub fn activation(&self) -> &[Vec<bool>] {
        &self.activation
    }

    pub fn unit_counts(&self) -> Option<&[u64]> {
        self.unit_counts.as_deref()
    }

    /// Total active time of every row, summed over slots.
    pub fn active_time(&self, rows: usize) -> Vec<f64> {
        let mut t = vec![0.0; rows];
        for (d, act) in self.durations.iter().zip(&self.activation) {
            for (ti, &a) in t.iter_mut().zip(act) {
                if a {
                    *ti += d;
                }
            }
        }
        t
    }

    /// Total active time in whole time units (integer-code plans only).
    pub fn active_units(&self, rows: usize) -> Option<Vec<u64>> {
        let counts = self.unit_counts.as_ref()?;
        let mut t = vec![0u64; rows];
        for (c, act) in counts.iter().zip(&self.activation) {
            for (ti, &a) in t.iter_mut().zip(act) {
                if a {
                    *ti += c;
                }
            }
        }
        Some(t)
    }
}

/// Merges sorted distinct levels closer than `min_gap`, keeping the larger.
fn merge_levels<T: Copy>(levels: &[T], gap: impl Fn(T, T) -> f64, min_gap: f64) -> Vec<T> {
    let mut kept: Vec<T> = Vec::with_capacity(levels.len());
    for &v in levels {
        match kept.last_mut() {
            Some(last) if gap(*last, v) < min_gap => *last = v,
            _ => kept.push(v),
        }
    }
    kept
}

pub fn plan_slots(input: &PulseVector, opts: &SlotOptions) -> Result<TimeSlotPlan> {
    let rows = input.len();
    if let Some(step) = opts.min_step {
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::arg(format!("min_step {step:e} must be > 0")));
        }
    }
    for (i, d) in input.durations.iter().enumerate() {
        if !(*d >= 0.0) {
            return Err(Error::arg(format!("row {i}: negative pulse width {d:e}")));
        }
    }

    let plan = match (&input.dac_codes, input.time_unit) {
        (Some(codes), Some(unit)) => {
            let mut levels: Vec<u32> = codes.iter().copied().filter(|&c| c > 0).collect();
            levels.sort_unstable();
            levels.dedup();
            // Relative slack keeps exactly-one-unit gaps from merging.
            let min_gap = opts.min_step.unwrap_or(unit) * (1.0 - 1e-9);
            let kept = merge_levels(&levels, |a, b| (b - a) as f64 * unit, min_gap);
            let slot_of = |c: u32| kept.partition_point(|&k| k < c);
            let mut counts = Vec::with_capacity(kept.len());
            let mut prev = 0u32;
            for &k in &kept {
                counts.push((k - prev) as u64);
                prev = k;
            }
            let activation = (0..kept.len())
                .map(|s| codes.iter().map(|&c| c > 0 && slot_of(c) >= s).collect())
                .collect();
            TimeSlotPlan {
                boundaries: kept.iter().map(|&k| k as f64 * unit).collect(),
                durations: counts.iter().map(|&n| n as f64 * unit).collect(),
                activation,
                unit_counts: Some(counts),
            }
        }
        _ => {
            let mut levels: Vec<f64> = input
                .durations
                .iter()
                .copied()
                .filter(|&d| d > 0.0)
                .collect();
            levels.sort_by(f64::total_cmp);
            levels.dedup();
            let kept = match opts.min_step {
                Some(step) => merge_levels(&levels, |a, b| b - a, step),
                None => levels,
            };
            let slot_of = |d: f64| kept.partition_point(|&k| k < d);
            let mut durations = Vec::with_capacity(kept.len());
            let mut prev = 0.0;
            for &k in &kept {
                durations.push(k - prev);
                prev = k;
            }
            let activation = (0..kept.len())
                .map(|s| {
                    input
                        .durations
                        .iter()
                        .map(|&d| d > 0.0 && slot_of(d) >= s)
                        .collect()
                })
                .collect();
            TimeSlotPlan {
                boundaries: kept,
                durations,
                activation,
                unit_counts: None,
            }
        }
    };
    if plan.len() > opts.max_slots {
        return Err(Error::arg(format!(
            "plan needs {} slots, cap is {}",
            plan.len(),
            opts.max_slots
        )));
    }
    debug_assert!(plan.activation.iter().all(|a| a.len() == rows));
    Ok(plan)
}

/// Step-by-step reference simulation of one VMM operation.
///
/// Activation, crosstalk and the exact bit-line solution are recomputed at
/// every step of width `step`; no slot structure and no LUT are involved.
pub fn fixed_step_oracle(
    input: &PulseVector,
    weights: &WeightMatrix,
    params: &DeviceParams,
    step: f64,
    flags: HwaFlags,
) -> Result<Vec<f64>> {
    if !(step > 0.0) {
        return Err(Error::arg("step must be > 0"));
    }
    if input.len() != weights.rows() || params.rows != weights.rows() {
        return Err(Error::arg(format!(
            "input has {} rows, weights {}, params {}",
            input.len(),
            weights.rows(),
            params.rows
        )));
    }
    let mut n_steps = 0usize;
    for (i, &d) in input.durations.iter().enumerate() {
        let q = d / step;
        let n = q.round();
        if (q - n).abs() > 1e-9 * n.max(1.0) {
            return Err(Error::arg(format!(
                "row {i}: pulse width {d:e} is not a multiple of step {step:e}"
            )));
        }
        n_steps = n_steps.max(n as usize);
    }
    let rows = weights.rows();
    let cols = weights.cols();
    let mut charge = vec![0.0; cols];
    let mut act = vec![false; rows];
    let mut alpha = vec![1.0; rows];
    for k in 0..n_steps {
        let t_mid = (k as f64 + 0.5) * step;
        for (a, &d) in act.iter_mut().zip(&input.durations) {
            *a = d > t_mid;
        }
        if flags.crosstalk {
            crosstalk_into(&act, params, &mut alpha);
        }
        for (j, q) in charge.iter_mut().enumerate() {
            let mut i_ref = 0.0;
            for i in 0..rows {
                if act[i] {
                    let g = if flags.crosstalk { alpha[i] } else { 1.0 };
                    i_ref += g * weights.current(i, j);
                }
            }
            let eff = if flags.bl_drop {
                let dv = solve_bl_drop_exact(i_ref, params)?;
                i_ref * (1.0 + relative_error_unchecked(dv, params))
            } else {
                i_ref
            };
            *q += eff * step;
        }
    }
    Ok(charge
        .into_iter()
        .map(|q| saturate(q / params.c_fb, params))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const U: f64 = 1e-6;

    #[test]
    fn all_zero_input_has_no_slots() {
        let plan = plan_slots(&PulseVector::zeros(16), &SlotOptions::default()).unwrap();
        assert!(plan.is_empty());
    }

    #[test]
    fn unique_levels_become_boundaries() {
        let input = PulseVector::from_codes(vec![3, 1, 3, 0], U).unwrap();
        let plan = plan_slots(&input, &SlotOptions::default()).unwrap();
        assert_eq!(plan.unit_counts().unwrap(), &[1, 2]);
        assert_eq!(plan.boundaries(), &[1.0 * U, 3.0 * U]);
        assert_eq!(plan.activation()[0], vec![true, true, true, false]);
        assert_eq!(plan.activation()[1], vec![true, false, true, false]);
        assert_eq!(plan.active_units(4).unwrap(), vec![3, 1, 3, 0]);
    }

    #[test]
    fn negative_duration_rejected() {
        assert!(PulseVector::from_durations(vec![1e-6, -1e-9]).is_err());
    }

    #[test]
    fn close_levels_merge_to_the_larger() {
        let input = PulseVector::from_durations(vec![1.0e-6, 1.05e-6, 3e-6]).unwrap();
        let opts = SlotOptions {
            min_step: Some(0.1e-6),
            ..Default::default()
        };
        let plan = plan_slots(&input, &opts).unwrap();
        assert_eq!(plan.boundaries(), &[1.05e-6, 3e-6]);
        assert_eq!(plan.activation()[0], vec![true, true, true]);
        assert_eq!(plan.activation()[1], vec![false, false, true]);
    }

    #[test]
    fn coarse_min_step_merges_codes() {
        let input = PulseVector::from_codes(vec![1, 2, 5, 6], U).unwrap();
        let opts = SlotOptions {
            min_step: Some(2.0 * U),
            ..Default::default()
        };
        let plan = plan_slots(&input, &opts).unwrap();
        assert_eq!(plan.unit_counts().unwrap(), &[2, 4]);
    }

    #[test]
    fn slot_cap_enforced() {
        let input = PulseVector::from_codes((1..=16).collect(), U).unwrap();
        let opts = SlotOptions {
            min_step: None,
            max_slots: 8,
        };
        assert!(plan_slots(&input, &opts).is_err());
    }

    #[test]
    fn oracle_rejects_non_dividing_step() {
        let input = PulseVector::from_durations(vec![1.5e-6; 16]).unwrap();
        let w = WeightMatrix::uniform(16, 16, 1e-9);
        let p = DeviceParams::default();
        assert!(fixed_step_oracle(&input, &w, &p, 1e-6, HwaFlags::NONE).is_err());
    }

    #[test]
    fn oracle_zero_input() {
        let w = WeightMatrix::uniform(16, 16, 1e-9);
        let p = DeviceParams::default();
        let out =
            fixed_step_oracle(&PulseVector::zeros(16), &w, &p, U, HwaFlags::FULL).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn oracle_single_row_is_eq1_term() {
        let p = DeviceParams::default();
        let mut w = WeightMatrix::uniform(16, 16, 0.0);
        for j in 0..16 {
            w.set_current(3, j, (j as f64 + 1.0) * 1e-9).unwrap();
        }
        let mut codes = vec![0; 16];
        codes[3] = 7;
        let input = PulseVector::from_codes(codes, U).unwrap();
        let out = fixed_step_oracle(&input, &w, &p, U, HwaFlags::NONE).unwrap();
        for (j, v) in out.iter().enumerate() {
            let expect = (j as f64 + 1.0) * 1e-9 * 7.0 * U / p.c_fb;
            assert!(((v - expect) / expect).abs() < 1e-12);
        }
    }

    fn codes_strategy() -> impl Strategy<Value = Vec<u32>> {
        proptest::collection::vec(0u32..32, 16)
    }

    proptest! {
        #[test]
        fn time_accounting_is_exact(codes in codes_strategy()) {
            let input = PulseVector::from_codes(codes.clone(), U).unwrap();
            let plan = plan_slots(&input, &SlotOptions::default()).unwrap();
            let units = plan.active_units(16).unwrap();
            let expect: Vec<u64> = codes.iter().map(|&c| c as u64).collect();
            prop_assert_eq!(units, expect);
            let distinct = {
                let mut c: Vec<_> = codes.iter().filter(|&&c| c > 0).collect();
                c.sort(); c.dedup(); c.len()
            };
            prop_assert!(plan.len() <= distinct);
            prop_assert!(plan.durations().iter().all(|&d| d > 0.0));
        }

        #[test]
        fn activation_sets_are_nested(codes in codes_strategy()) {
            let plan = plan_slots(&PulseVector::from_codes(codes, U).unwrap(), &SlotOptions::default()).unwrap();
            for w in plan.activation().windows(2) {
                for (later, earlier) in w[1].iter().zip(&w[0]) {
                    prop_assert!(!later || *earlier);
                }
            }
        }

        #[test]
        fn planning_is_permutation_equivariant(codes in codes_strategy(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut perm: Vec<usize> = (0..16).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let permuted: Vec<u32> = perm.iter().map(|&k| codes[k]).collect();
            let a = plan_slots(&PulseVector::from_codes(codes, U).unwrap(), &SlotOptions::default()).unwrap();
            let b = plan_slots(&PulseVector::from_codes(permuted, U).unwrap(), &SlotOptions::default()).unwrap();
            prop_assert_eq!(a.boundaries(), b.boundaries());
            for (sa, sb) in a.activation().iter().zip(b.activation()) {
                let expect: Vec<bool> = perm.iter().map(|&k| sa[k]).collect();
                prop_assert_eq!(&expect, sb);
            }
        }
    }
}
