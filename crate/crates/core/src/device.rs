//! Physical constants of the floating-gate array and its charge amplifiers, and
//! the two distortion mechanisms that act on a column during a time slot:
//! capacitive crosstalk between adjacent wordlines and bit-line voltage drop
//! caused by the finite amplifier transconductance.

use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parity of the 1-based index of the lower wordline in a pair that is
/// physically adjacent in the layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairParity {
    Even,
    Odd,
}

/// Layout class of two consecutive wordlines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairKind {
    /// Consecutive lines drawn next to each other.
    Close,
    /// Consecutive in index but separated in the layout.
    Far,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeviceParams {
    /// Subthreshold slope factor.
    pub eta: f64,
    /// Thermal voltage (V).
    pub v_thermal: f64,
    /// Nominal drain-to-floating-gate coupling factor.
    pub k_coupl: f64,
    /// Coupling factor when the physically close neighbour is active.
    pub k_xt_close: f64,
    /// Coupling factor when the physically far neighbour is active.
    pub k_xt_far: f64,
    pub close_pair_parity: PairParity,
    /// OTA transconductance (S).
    pub g_m: f64,
    /// Integration capacitor (F).
    pub c_fb: f64,
    /// Bit-line reference voltage (V).
    pub v_ref: f64,
    /// Specific current (A).
    pub i_0: f64,
    /// Output saturation span (V).
    pub v_sat: f64,
    pub rows: usize,
    pub cols: usize,
}

impl Default for DeviceParams {
    fn default() -> Self {
        Self {
            eta: 1.3,
            v_thermal: 0.02585,
            k_coupl: 0.6,
            k_xt_close: 0.6858,
            k_xt_far: 0.6215,
            close_pair_parity: PairParity::Even,
            g_m: 14e-6,
            c_fb: 1e-12,
            v_ref: 0.2,
            i_0: 1e-9,
            v_sat: 1.0,
            rows: 16,
            cols: 16,
        }
    }
}

impl DeviceParams {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config {
                    key: format!("device.{key}"),
                    message: msg.to_string(),
                })
            }
        };
        check(self.eta.is_finite() && self.eta >= 1.0, "eta", "must be >= 1")?;
        check(self.v_thermal > 0.0, "v_thermal", "must be > 0")?;
        check(
            self.k_coupl > 0.0 && self.k_coupl < 1.0,
            "k_coupl",
            "must lie in (0, 1)",
        )?;
        check(
            self.k_xt_close > 0.0 && self.k_xt_close < 1.0,
            "k_xt_close",
            "must lie in (0, 1)",
        )?;
        check(
            self.k_xt_far > 0.0 && self.k_xt_far < 1.0,
            "k_xt_far",
            "must lie in (0, 1)",
        )?;
        check(self.g_m > 0.0, "g_m", "must be > 0")?;
        check(self.c_fb > 0.0, "c_fb", "must be > 0")?;
        check(self.v_ref > 0.0, "v_ref", "must be > 0")?;
        check(self.i_0 > 0.0, "i_0", "must be > 0")?;
        check(self.v_sat > 0.0, "v_sat", "must be > 0")?;
        check(self.rows > 0, "rows", "must be > 0")?;
        check(self.cols > 0, "cols", "must be > 0")?;
        // Worst case is a cell with both neighbours active, one of each kind.
        for (key, exp) in [
            ("k_xt_close", 2.0 * self.xt_exponent(PairKind::Close)),
            ("k_xt_far", 2.0 * self.xt_exponent(PairKind::Far)),
            (
                "k_xt_close",
                self.xt_exponent(PairKind::Close) + self.xt_exponent(PairKind::Far),
            ),
        ] {
            check(
                exp <= 0.0 && exp.exp() > 0.0,
                key,
                "crosstalk must attenuate (requires k_xt >= k_coupl)",
            )?;
        }
        Ok(())
    }

    /// eta * V_T, the subthreshold voltage scale.
    pub fn slope_voltage(&self) -> f64 {
        self.eta * self.v_thermal
    }

    /// Layout class of the pair (lower, lower + 1), `lower` being a 0-based row.
    pub fn pair_kind(&self, lower: usize) -> PairKind {
        let one_based_even = (lower + 1).is_multiple_of(2);
        let close = match self.close_pair_parity {
            PairParity::Even => one_based_even,
            PairParity::Odd => !one_based_even,
        };
        if close {
            PairKind::Close
        } else {
            PairKind::Far
        }
    }

    /// Exponent contributed by one active neighbour of the given kind.
    pub fn xt_exponent(&self, kind: PairKind) -> f64 {
        let k_xt = match kind {
            PairKind::Close => self.k_xt_close,
            PairKind::Far => self.k_xt_far,
        };
        self.v_ref * (self.k_coupl - k_xt) / self.slope_voltage()
    }

    /// Attenuation of a cell whose only active neighbour is of the given kind.
    pub fn pair_alpha(&self, kind: PairKind) -> f64 {
        self.xt_exponent(kind).exp()
    }

    /// Stable fingerprint of the parameters the bit-line solver depends on.
    pub fn bl_fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for v in [self.k_coupl, self.eta, self.v_thermal, self.g_m] {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }

    fn bl_exponent_scale(&self) -> f64 {
        self.k_coupl / self.slope_voltage()
    }
}

/// Per-row crosstalk attenuation for one activation pattern.
pub fn crosstalk_factors(act: &[bool], params: &DeviceParams) -> Result<Vec<f64>> {
    if act.len() != params.rows {
        return Err(Error::arg(format!(
            "activation has {} rows, array has {}",
            act.len(),
            params.rows
        )));
    }
    let mut out = vec![1.0; act.len()];
    crosstalk_into(act, params, &mut out);
    Ok(out)
}

pub(crate) fn crosstalk_into(act: &[bool], params: &DeviceParams, out: &mut [f64]) {
    let close = params.xt_exponent(PairKind::Close);
    let far = params.xt_exponent(PairKind::Far);
    let exponent_of = |lower: usize| match params.pair_kind(lower) {
        PairKind::Close => close,
        PairKind::Far => far,
    };
    let n = act.len();
    for i in 0..n {
        if !act[i] {
            out[i] = 1.0;
            continue;
        }
        let mut e = 0.0;
        if i > 0 && act[i - 1] {
            e += exponent_of(i - 1);
        }
        if i + 1 < n && act[i + 1] {
            e += exponent_of(i);
        }
        out[i] = if e == 0.0 { 1.0 } else { e.exp() };
    }
}

/// Residual of the bit-line equation expressed in volts:
/// `dv + (I/G_m) exp(k dv / (eta V_T))`.
pub fn bl_residual_volts(dv: f64, i_ref: f64, params: &DeviceParams) -> f64 {
    dv + (i_ref / params.g_m) * (params.bl_exponent_scale() * dv).exp()
}

const BL_TOL: f64 = 1e-12;
const BISECTION_STEPS: usize = 40;
const NEWTON_CAP: usize = 60;

/// Root of `-G_m dv = I exp(k dv / (eta V_T))` with `dv <= 0`.
pub fn solve_bl_drop_exact(i_ref: f64, params: &DeviceParams) -> Result<f64> {
    if !(i_ref >= 0.0) || !i_ref.is_finite() {
        return Err(Error::arg(format!("reference current {i_ref:e} must be >= 0")));
    }
    if i_ref == 0.0 {
        return Ok(0.0);
    }
    let a = params.bl_exponent_scale();
    let g = params.g_m;
    // f is strictly increasing; f(0) = I > 0 and f(-I/G_m) <= 0.
    let f = |x: f64| g * x + i_ref * (a * x).exp();
    let mut lo = -i_ref / g;
    let mut hi = 0.0;
    if f(lo) >= 0.0 {
        return Ok(lo);
    }
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..NEWTON_CAP {
        let e = (a * x).exp();
        let fx = g * x + i_ref * e;
        let dfx = g + a * i_ref * e;
        let mut next = x - fx / dfx;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if fx > 0.0 {
            hi = hi.min(x);
        } else {
            lo = lo.max(x);
        }
        let step = (next - x).abs();
        x = next;
        if step <= 1e-16 + 1e-15 * x.abs() {
            break;
        }
    }
    let residual = bl_residual_volts(x, i_ref, params);
    if residual.abs() > BL_TOL || !x.is_finite() {
        return Err(Error::Numeric {
            message: format!("bit-line solver did not converge for I_REF = {i_ref:e} A"),
            residual,
        });
    }
    Ok(x)
}

/// Relative current error of a cell integrating under bit-line drop `dv`.
pub fn bl_relative_error(dv: f64, params: &DeviceParams) -> Result<f64> {
    if dv > 0.0 || dv.is_nan() {
        return Err(Error::arg(format!("bit-line drop {dv:e} V must be <= 0")));
    }
    Ok(relative_error_unchecked(dv, params))
}

#[inline]
pub(crate) fn relative_error_unchecked(dv: f64, params: &DeviceParams) -> f64 {
    (params.bl_exponent_scale() * dv).exp_m1()
}

/// Subthreshold cell current at nominal `V_REF` for threshold voltage `v_th`.
pub fn cell_current_from_vth(v_th: f64, params: &DeviceParams) -> f64 {
    params.i_0 * ((params.k_coupl * params.v_ref - v_th) / params.slope_voltage()).exp()
}

/// Precomputed bit-line drop over log-spaced reference currents.
#[derive(Debug, Clone)]
pub struct BlDropLut {
    currents: Vec<f64>,
    log_currents: Vec<f64>,
    drops: Vec<f64>,
    inv_log_step: f64,
    g_m: f64,
    fingerprint: u64,
}

pub const DEFAULT_LUT_POINTS: usize = 256;
pub const DEFAULT_LUT_I_MIN: f64 = 1e-12;

pub fn build_bl_lut(
    params: &DeviceParams,
    i_min: f64,
    i_max: f64,
    n_points: usize,
) -> Result<BlDropLut> {
    if !(i_min > 0.0 && i_max > i_min && i_max.is_finite()) {
        return Err(Error::arg(format!(
            "LUT bounds must satisfy 0 < i_min < i_max (got {i_min:e}, {i_max:e})"
        )));
    }
    if n_points < 2 {
        return Err(Error::arg("LUT needs at least 2 points"));
    }
    let (l0, l1) = (i_min.ln(), i_max.ln());
    let step = (l1 - l0) / (n_points - 1) as f64;
    let mut currents = Vec::with_capacity(n_points);
    let mut log_currents = Vec::with_capacity(n_points);
    for k in 0..n_points {
        let i = if k == 0 {
            i_min
        } else if k == n_points - 1 {
            i_max
        } else {
            (l0 + step * k as f64).exp()
        };
        currents.push(i);
        log_currents.push(i.ln());
    }
    let drops = currents
        .iter()
        .map(|&i| solve_bl_drop_exact(i, params))
        .collect::<Result<Vec<_>>>()?;
    Ok(BlDropLut {
        currents,
        log_currents,
        drops,
        inv_log_step: 1.0 / step,
        g_m: params.g_m,
        fingerprint: params.bl_fingerprint(),
    })
}

impl BlDropLut {
    /// LUT spanning 1 pA to 16x the largest cell current times the row count.
    pub fn covering(params: &DeviceParams, max_cell_current: f64) -> Result<BlDropLut> {
        Self::covering_with(params, max_cell_current, DEFAULT_LUT_I_MIN, DEFAULT_LUT_POINTS)
    }

    pub fn covering_with(
        params: &DeviceParams,
        max_cell_current: f64,
        i_min: f64,
        n_points: usize,
    ) -> Result<BlDropLut> {
        let top = 16.0 * max_cell_current * params.rows as f64;
        build_bl_lut(params, i_min, top.max(i_min * 2.0), n_points)
    }

    pub fn i_min(&self) -> f64 {
        self.currents[0]
    }

    pub fn i_max(&self) -> f64 {
        *self.currents.last().expect("LUT has >= 2 points")
    }

    pub fn len(&self) -> usize {
        self.currents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.currents.is_empty()
    }

    pub fn nodes(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.currents.iter().copied().zip(self.drops.iter().copied())
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn built_for(&self, params: &DeviceParams) -> bool {
        self.fingerprint == params.bl_fingerprint()
    }

    /// Bit-line drop for `i_ref`, linearly interpolated in (ln I, dV).
    pub fn lookup(&self, i_ref: f64) -> Result<f64> {
        if !(i_ref >= 0.0) {
            return Err(Error::arg(format!("reference current {i_ref:e} must be >= 0")));
        }
        self.lookup_raw(i_ref).ok_or(Error::Range {
            column: None,
            current: i_ref,
            max: self.i_max(),
        })
    }

    #[inline]
    pub(crate) fn lookup_raw(&self, i_ref: f64) -> Option<f64> {
        let n = self.currents.len();
        if i_ref > self.currents[n - 1] {
            return None;
        }
        if i_ref <= 0.0 {
            return Some(0.0);
        }
        if i_ref < self.currents[0] {
            // Linear limit: the exponential factor tends to 1 as I -> 0.
            return Some(-i_ref / self.g_m);
        }
        let li = i_ref.ln();
        let mut k = (((li - self.log_currents[0]) * self.inv_log_step).floor() as isize)
            .clamp(0, n as isize - 2) as usize;
        while k > 0 && self.currents[k] > i_ref {
            k -= 1;
        }
        while k + 2 < n && self.currents[k + 1] <= i_ref {
            k += 1;
        }
        if self.currents[k] == i_ref {
            return Some(self.drops[k]);
        }
        if self.currents[k + 1] == i_ref {
            return Some(self.drops[k + 1]);
        }
        let t = (li - self.log_currents[k]) / (self.log_currents[k + 1] - self.log_currents[k]);
        Some(self.drops[k] + t * (self.drops[k + 1] - self.drops[k]))
    }
}

/// Convenience wrapper matching [`BlDropLut::lookup`].
pub fn bl_drop_lookup(lut: &BlDropLut, i_ref: f64) -> Result<f64> {
    lut.lookup(i_ref)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn p() -> DeviceParams {
        DeviceParams::default()
    }

    #[test]
    fn defaults_validate() {
        p().validate().unwrap();
    }

    #[test]
    fn eta_below_one_rejected() {
        let mut q = p();
        q.eta = 0.5;
        assert!(matches!(q.validate(), Err(Error::Config { .. })));
    }

    #[test]
    fn amplifying_crosstalk_rejected() {
        let mut q = p();
        q.k_xt_far = 0.55;
        assert!(q.validate().is_err());
    }

    #[test]
    fn single_active_row_is_unattenuated() {
        let mut act = vec![false; 16];
        act[5] = true;
        let a = crosstalk_factors(&act, &p()).unwrap();
        assert!(a.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn nominal_coupling_everywhere_gives_unit_alpha() {
        let mut q = p();
        q.k_xt_close = q.k_coupl;
        q.k_xt_far = q.k_coupl;
        let act: Vec<bool> = (0..16).map(|i| i % 3 != 0).collect();
        assert!(crosstalk_factors(&act, &q).unwrap().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn close_pair_alpha_matches_scalar_evaluation() {
        let mut q = p();
        // V_REF (k0 - k_close) / (eta V_T) = -0.1
        q.k_xt_close = q.k_coupl + 0.1 * q.eta * q.v_thermal / q.v_ref;
        let mut act = vec![false; 16];
        act[1] = true; // WL2
        act[2] = true; // WL3
        let a = crosstalk_factors(&act, &q).unwrap();
        assert_eq!(q.pair_kind(1), PairKind::Close);
        assert_relative_eq!(a[1], 0.904_837_418_035_959_6, max_relative = 1e-12);
        assert_relative_eq!(a[2], 0.904_837_418_035_959_6, max_relative = 1e-12);
    }

    #[test]
    fn skipping_one_line_has_no_crosstalk() {
        let mut act = vec![false; 16];
        act[4] = true;
        act[6] = true;
        let a = crosstalk_factors(&act, &p()).unwrap();
        assert_eq!(a[4], 1.0);
        assert_eq!(a[6], 1.0);
    }

    #[test]
    fn both_neighbours_compose_multiplicatively() {
        let q = p();
        let mut act = vec![false; 16];
        act[3] = true;
        act[4] = true;
        act[5] = true;
        let both = crosstalk_factors(&act, &q).unwrap()[4];
        let lower = q.pair_alpha(q.pair_kind(3));
        let upper = q.pair_alpha(q.pair_kind(4));
        assert_relative_eq!(both, lower * upper, max_relative = 1e-15);
    }

    #[test]
    fn close_pairs_attenuate_more_than_far_pairs() {
        let q = p();
        let close = q.pair_alpha(PairKind::Close);
        let far = q.pair_alpha(PairKind::Far);
        assert!(close < far && far < 1.0);
    }

    #[test]
    fn activation_length_checked() {
        assert!(crosstalk_factors(&[true; 3], &p()).is_err());
    }

    #[test]
    fn zero_current_gives_zero_drop() {
        assert_eq!(solve_bl_drop_exact(0.0, &p()).unwrap(), 0.0);
    }

    #[test]
    fn negative_current_rejected() {
        assert!(solve_bl_drop_exact(-1e-9, &p()).is_err());
    }

    #[test]
    fn vanishing_coupling_gives_linear_drop() {
        let mut q = p();
        q.k_coupl = 1e-12;
        let i = 3e-7;
        assert_relative_eq!(
            solve_bl_drop_exact(i, &q).unwrap(),
            -i / q.g_m,
            max_relative = 1e-9
        );
    }

    /// Brute-force sign-change scan over 10^6 points of [-I/G_m, 0].
    fn grid_scan_root(i_ref: f64, q: &DeviceParams) -> (f64, f64) {
        let a = q.k_coupl / (q.eta * q.v_thermal);
        let f = |x: f64| q.g_m * x + i_ref * (a * x).exp();
        let lo = -i_ref / q.g_m;
        let n = 1_000_000;
        let h = -lo / n as f64;
        let mut prev = f(lo);
        for k in 1..=n {
            let x = lo + h * k as f64;
            let fx = f(x);
            if prev <= 0.0 && fx > 0.0 {
                return (x - h, x);
            }
            prev = fx;
        }
        panic!("no sign change");
    }

    #[test]
    fn exact_solver_agrees_with_grid_scan() {
        let q = p();
        let i = 1e-6;
        let root = solve_bl_drop_exact(i, &q).unwrap();
        let (lo, hi) = grid_scan_root(i, &q);
        assert!(root >= lo && root <= hi, "{root} not in [{lo}, {hi}]");
        assert!(bl_residual_volts(root, i, &q).abs() < 1e-12);
    }

    #[test]
    fn relative_error_examples() {
        let q = p();
        assert_eq!(bl_relative_error(0.0, &q).unwrap(), 0.0);
        let dv = -std::f64::consts::LN_2 * q.eta * q.v_thermal / q.k_coupl;
        assert_relative_eq!(bl_relative_error(dv, &q).unwrap(), -0.5, max_relative = 1e-12);
        assert!(bl_relative_error(1e-3, &q).is_err());
        let mut z = q.clone();
        z.k_coupl = 0.0;
        assert_eq!(bl_relative_error(-0.3, &z).unwrap(), 0.0);
    }

    #[test]
    fn cell_current_examples() {
        let q = p();
        assert_relative_eq!(
            cell_current_from_vth(q.k_coupl * q.v_ref, &q),
            q.i_0,
            max_relative = 1e-15
        );
        let base = cell_current_from_vth(0.1, &q);
        let shifted = cell_current_from_vth(0.1 + q.eta * q.v_thermal * 10f64.ln(), &q);
        assert_relative_eq!(shifted, base / 10.0, max_relative = 1e-12);
        // 1 nA * exp((0.12 - 0.05) / 0.033605)
        let direct = 1e-9 * ((0.6 * 0.2 - 0.05) / (1.3 * 0.02585_f64)).exp();
        assert_relative_eq!(cell_current_from_vth(0.05, &q), direct, max_relative = 1e-14);
    }

    #[test]
    fn two_point_lut_holds_endpoints() {
        let q = p();
        let lut = build_bl_lut(&q, 1e-10, 1e-6, 2).unwrap();
        assert_eq!(lut.len(), 2);
        assert_eq!(lut.lookup(1e-10).unwrap(), solve_bl_drop_exact(1e-10, &q).unwrap());
        assert_eq!(lut.lookup(1e-6).unwrap(), solve_bl_drop_exact(1e-6, &q).unwrap());
    }

    #[test]
    fn lut_bounds_checked() {
        let q = p();
        assert!(build_bl_lut(&q, 0.0, 1e-6, 10).is_err());
        assert!(build_bl_lut(&q, 1e-6, 1e-7, 10).is_err());
        assert!(build_bl_lut(&q, 1e-9, 1e-6, 1).is_err());
    }

    #[test]
    fn lut_nodes_reproduce_solver_exactly() {
        let q = p();
        let lut = build_bl_lut(&q, 1e-12, 1e-5, 64).unwrap();
        for (i, dv) in lut.nodes() {
            assert_eq!(lut.lookup(i).unwrap(), dv);
            assert_eq!(dv, solve_bl_drop_exact(i, &q).unwrap());
        }
    }

    #[test]
    fn lut_zero_and_overflow() {
        let q = p();
        let lut = build_bl_lut(&q, 1e-12, 1e-6, 32).unwrap();
        assert_eq!(lut.lookup(0.0).unwrap(), 0.0);
        assert!(matches!(lut.lookup(2e-6), Err(Error::Range { .. })));
    }

    #[test]
    fn lut_geometric_midpoint_is_accurate() {
        let q = p();
        let lut = BlDropLut::covering(&q, 20e-9).unwrap();
        let nodes: Vec<_> = lut.nodes().collect();
        for w in nodes.windows(2).step_by(17) {
            let mid = (w[0].0 * w[1].0).sqrt();
            let exact = solve_bl_drop_exact(mid, &q).unwrap();
            let approx = lut.lookup(mid).unwrap();
            assert!(((approx - exact) / exact).abs() < 1e-3);
        }
    }

    #[test]
    fn lut_below_range_uses_linear_limit() {
        let q = p();
        let lut = build_bl_lut(&q, 1e-9, 1e-6, 16).unwrap();
        assert_eq!(lut.lookup(1e-10).unwrap(), -1e-10 / q.g_m);
    }

    proptest! {
        #[test]
        fn drop_and_error_non_increasing(a in 1e-12f64..1e-5, b in 1e-12f64..1e-5) {
            let q = p();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let dlo = solve_bl_drop_exact(lo, &q).unwrap();
            let dhi = solve_bl_drop_exact(hi, &q).unwrap();
            prop_assert!(dhi <= dlo);
            prop_assert!(dlo <= 0.0);
            let elo = bl_relative_error(dlo, &q).unwrap();
            let ehi = bl_relative_error(dhi, &q).unwrap();
            prop_assert!(ehi <= elo);
            prop_assert!(ehi > -1.0 && elo <= 0.0);
        }

        #[test]
        fn alpha_in_unit_interval(bits in proptest::collection::vec(any::<bool>(), 16)) {
            for a in crosstalk_factors(&bits, &p()).unwrap() {
                prop_assert!(a > 0.0 && a <= 1.0);
            }
        }
    }
}
