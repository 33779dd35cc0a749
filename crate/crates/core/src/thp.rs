//! Tomlinson-Harashima precoding and the UL-to-DL duality transforms.
//!
//! The DL mirrors the UL chain: subcarrier `l` transmits `f_1,l^H`-filtered
//! modulo outputs `v_l`, and the receiver applies a single positive tap
//! `f_2,k` followed by the modulo. Both transforms reuse the UL filters:
//! `f_1 = gamma f_2^UL`, `f_2 = 1 / gamma`, `b^DL = b^UL`. The Sum-MSE
//! transform uses one `gamma` for all subcarriers; the SC-MSE transform solves
//! a tridiagonal system for one `gamma_k` per subcarrier.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::equalizer::{feedback_sign, ff_output, slot_orientation, stack, write_filter_csv, UlFilterSet};
use crate::error::{Error, Result};
use crate::matrices::{Dims, SubchannelMatrixSet};
use crate::oqam::{is_real_slot, slot_phase, RealSymbolStream};

/// Reduces `x` into `[-tau/2, tau/2)`. Values already in range are returned
/// unchanged.
pub fn wrap(x: f64, tau: f64) -> f64 {
    let half = 0.5 * tau;
    if (-half..half).contains(&x) {
        return x;
    }
    let mut r = x - (x / tau + 0.5).floor() * tau;
    if r >= half {
        r -= tau;
    } else if r < -half {
        r += tau;
    }
    r
}

/// OQAM modulo of slot `n` on subcarrier `l`: the real part is reduced when
/// `l + n` is odd, the imaginary part otherwise. The other component passes
/// through unchanged.
pub fn oqam_modulo(x: Complex64, l: usize, n: i64, tau: f64) -> Complex64 {
    if is_real_slot(l, n) {
        Complex64::new(wrap(x.re, tau), x.im)
    } else {
        Complex64::new(x.re, wrap(x.im, tau))
    }
}

/// DL filters of one subcarrier.
#[derive(Debug, Clone, PartialEq)]
pub struct DlFilter {
    pub k: usize,
    /// Transmit filter `f_1`, applied as `f_1^H`-filtering of the phased `v`.
    pub f1: Vec<Complex64>,
    pub b: Vec<f64>,
    /// Receive scalar `f_2 = 1 / gamma`.
    pub f2: f64,
    pub gamma: f64,
    pub mse_analytic: f64,
}

impl DlFilter {
    pub fn f1_stacked(&self) -> DVector<f64> {
        stack(&self.f1)
    }
}

/// Which duality transform produced a [`DlFilterSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Duality {
    SumMse,
    SubcarrierMse,
}

/// DL filters of all used subcarriers.
#[derive(Debug, Clone, PartialEq)]
pub struct DlFilterSet {
    pub first_subcarrier: usize,
    pub dims: Dims,
    pub duality: Duality,
    /// Modulo constant; `None` for a linear precoder without modulo.
    pub tau: Option<f64>,
    /// Variance of the real precoder outputs `v'`.
    pub sigma_v2: f64,
    pub filters: Vec<DlFilter>,
}

impl DlFilterSet {
    /// `sum_k ||f_1,k||^2`.
    pub fn transmit_power(&self) -> f64 {
        self.filters
            .iter()
            .map(|f| f.f1.iter().map(|z| z.norm_sqr()).sum::<f64>())
            .sum()
    }

    /// `true` when the transmit power exceeds `M_u (1 + 1e-9)`.
    pub fn exceeds_power_budget(&self) -> bool {
        let mu = self.filters.len() as f64;
        self.transmit_power() > mu * (1.0 + 1e-9)
    }

    pub fn mean_mse(&self) -> f64 {
        self.filters.iter().map(|f| f.mse_analytic).sum::<f64>() / self.filters.len() as f64
    }

    /// Same layout as the UL filter CSV; the header carries the scaling.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let gammas: Vec<String> = self.filters.iter().map(|f| format!("{:.17e}", f.gamma)).collect();
        let header = format!(
            "# dl {:?} nu={} tau={} gamma={}",
            self.duality,
            self.dims.nu,
            self.tau.map_or("none".to_string(), |t| format!("{t:.17e}")),
            gammas.join(";")
        );
        let rows = self.filters.iter().map(|f| (f.k, f.f1.as_slice(), f.b.as_slice()));
        write_filter_csv(path, &header, rows)
    }
}

/// `||H^T f||^2`.
fn quad(h: &DMatrix<f64>, f: &DVector<f64>) -> f64 {
    (h.transpose() * f).norm_squared()
}

/// `r^T r - 2 f^T H_kk r`.
fn target_terms(s: &SubchannelMatrixSet, f: &DVector<f64>, b: &[f64]) -> f64 {
    let r = s.dims.target(b);
    let rr: f64 = r.iter().map(|v| v * v).sum();
    let r_win = DVector::from_column_slice(&r[..s.dims.window()]);
    rr - 2.0 * f.dot(&(&s.hbar_own * r_win))
}

/// Per-subcarrier terms shared by both transforms.
struct DualityTerms {
    /// `f_k^T (sigma_x^2 sum_{l != k} H H^T + sigma_eta^2/2 Gamma Gamma^T) f_k`
    ul_neighbour_noise: Vec<f64>,
    /// `f_k^T H_kk H_kk^T f_k`
    own: Vec<f64>,
    /// `f_{k-1}^T H_{k-1,k} H_{k-1,k}^T f_{k-1}`
    from_lower: Vec<f64>,
    /// `f_{k+1}^T H_{k+1,k} H_{k+1,k}^T f_{k+1}`
    from_upper: Vec<f64>,
    /// `r^T r - 2 f_k^T H_kk r`
    target: Vec<f64>,
}

fn check_band(ul: &UlFilterSet, sets: &[SubchannelMatrixSet]) -> Result<()> {
    if sets.is_empty() || ul.filters.len() != sets.len() {
        return Err(Error::Dimension(format!(
            "{} filters for {} matrix sets",
            ul.filters.len(),
            sets.len()
        )));
    }
    for (i, (f, s)) in ul.filters.iter().zip(sets).enumerate() {
        if f.k != s.k || (i > 0 && s.k != sets[i - 1].k + 1) {
            return Err(Error::Dimension("filters and matrix sets are not aligned".into()));
        }
    }
    Ok(())
}

fn duality_terms(ul: &UlFilterSet, sets: &[SubchannelMatrixSet], noise_var: f64) -> DualityTerms {
    let fs: Vec<DVector<f64>> = ul.filters.iter().map(|f| f.f2_stacked()).collect();
    let n = sets.len();
    let mut t = DualityTerms {
        ul_neighbour_noise: Vec::with_capacity(n),
        own: Vec::with_capacity(n),
        from_lower: Vec::with_capacity(n),
        from_upper: Vec::with_capacity(n),
        target: Vec::with_capacity(n),
    };
    for (i, s) in sets.iter().enumerate() {
        let f = &fs[i];
        let sx2 = s.sigma_x2;
        t.ul_neighbour_noise.push(
            sx2 * (quad(&s.hbar_lower, f) + quad(&s.hbar_upper, f))
                + noise_var / 2.0 * f.dot(&(&s.gamma_gram * f)),
        );
        t.own.push(quad(&s.hbar_own, f));
        t.from_lower.push(if i > 0 { quad(&s.hbar_lower, &fs[i - 1]) } else { 0.0 });
        t.from_upper.push(if i + 1 < n { quad(&s.hbar_upper, &fs[i + 1]) } else { 0.0 });
        t.target.push(target_terms(s, f, &ul.filters[i].b));
    }
    t
}

/// DL MSE of subcarrier index `idx` (position within the band):
/// `f_2^2 (sigma_v^2 sum_l f_1,l^T H_{l,k} H_{l,k}^T f_1,l + sigma_eta^2/2 ||h_p||^2)
///  + sigma_v^2 (s^T s - 2 f_2 f_1,k^T H_kk s)`.
pub fn dl_mse(
    sets: &[SubchannelMatrixSet],
    dl: &DlFilterSet,
    idx: usize,
    noise_var: f64,
    hp_energy: f64,
) -> f64 {
    let s = &sets[idx];
    let f = &dl.filters[idx];
    let f1 = f.f1_stacked();
    let mut interference = quad(&s.hbar_own, &f1);
    if idx > 0 {
        interference += quad(&s.hbar_lower, &dl.filters[idx - 1].f1_stacked());
    }
    if idx + 1 < dl.filters.len() {
        interference += quad(&s.hbar_upper, &dl.filters[idx + 1].f1_stacked());
    }
    let sv2 = dl.sigma_v2;
    let sv = s.dims.target(&f.b);
    let ss: f64 = sv.iter().map(|v| v * v).sum();
    let s_win = DVector::from_column_slice(&sv[..s.dims.window()]);
    let cross = f1.dot(&(&s.hbar_own * s_win));
    f.f2 * f.f2 * (sv2 * interference + noise_var / 2.0 * hp_energy) + sv2 * (ss - 2.0 * f.f2 * cross)
}

fn scaled_set(
    ul: &UlFilterSet,
    duality: Duality,
    tau: Option<f64>,
    sigma_v2: f64,
    gammas: &[f64],
) -> DlFilterSet {
    let filters = ul
        .filters
        .iter()
        .zip(gammas)
        .map(|(f, &g)| DlFilter {
            k: f.k,
            f1: f.f2.iter().map(|z| z * g).collect(),
            b: f.b.clone(),
            f2: 1.0 / g,
            gamma: g,
            mse_analytic: f64::NAN,
        })
        .collect();
    DlFilterSet {
        first_subcarrier: ul.first_subcarrier,
        dims: ul.dims,
        duality,
        tau,
        sigma_v2,
        filters,
    }
}

fn fill_mse(sets: &[SubchannelMatrixSet], dl: &mut DlFilterSet, noise_var: f64, hp_energy: f64) {
    let mses: Vec<f64> = (0..sets.len()).map(|i| dl_mse(sets, dl, i, noise_var, hp_energy)).collect();
    for (f, m) in dl.filters.iter_mut().zip(mses) {
        f.mse_analytic = m;
    }
}

/// Parameters shared by both duality transforms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualityParams {
    /// Noise variance `sigma_eta^2` per complex sample.
    pub noise_var: f64,
    /// `||h_p||_2^2`.
    pub hp_energy: f64,
    /// Modulo constant of a THP; `None` for a linear precoder.
    pub tau: Option<f64>,
}

impl DualityParams {
    /// `sigma_v^2 = tau^2 / 12` with a modulo, `sigma_x^2` without one.
    pub fn sigma_v2(&self, sigma_x2: f64) -> f64 {
        self.tau.map_or(sigma_x2, |t| t * t / 12.0)
    }
}

/// Sum-MSE transform: one `gamma` with
/// `gamma^2 = M_u (sigma_eta^2/2) ||h_p||^2 / delta`.
pub fn sum_mse_duality(
    ul: &UlFilterSet,
    sets: &[SubchannelMatrixSet],
    params: DualityParams,
) -> Result<DlFilterSet> {
    check_band(ul, sets)?;
    let sx2 = sets[0].sigma_x2;
    let sv2 = params.sigma_v2(sx2);
    let t = duality_terms(ul, sets, params.noise_var);
    let mut delta = 0.0;
    for i in 0..sets.len() {
        delta += t.ul_neighbour_noise[i] + sx2 * t.own[i]
            - sv2 * (t.own[i] + t.from_lower[i] + t.from_upper[i])
            + (sx2 - sv2) * t.target[i];
    }
    let mu = sets.len() as f64;
    let gamma2 = mu * params.noise_var / 2.0 * params.hp_energy / delta;
    if !(delta > 0.0) || !(gamma2 > 0.0) || !gamma2.is_finite() {
        return Err(Error::DualityInfeasible(format!(
            "sum-MSE scaling: delta = {delta:e}, gamma^2 = {gamma2:e}"
        )));
    }
    let g = gamma2.sqrt();
    let mut dl = scaled_set(ul, Duality::SumMse, params.tau, sv2, &vec![g; sets.len()]);
    fill_mse(sets, &mut dl, params.noise_var, params.hp_energy);
    Ok(dl)
}

/// Tridiagonal matrix stored by diagonals.
#[derive(Debug, Clone, PartialEq)]
pub struct Tridiagonal {
    /// `lower[i] = T[i, i-1]` (`lower[0]` unused).
    pub lower: Vec<f64>,
    pub diag: Vec<f64>,
    /// `upper[i] = T[i, i+1]` (last entry unused).
    pub upper: Vec<f64>,
}

impl Tridiagonal {
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.diag.len();
        DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                self.diag[i]
            } else if j + 1 == i {
                self.lower[i]
            } else if i + 1 == j {
                self.upper[i]
            } else {
                0.0
            }
        })
    }

    /// Thomas algorithm.
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let n = self.diag.len();
        if rhs.len() != n || n == 0 {
            return Err(Error::Dimension("tridiagonal system size".into()));
        }
        let scale = self.diag.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let mut c = vec![0.0; n];
        let mut d = vec![0.0; n];
        let mut piv = self.diag[0];
        if piv.abs() <= 1e-14 * scale {
            return Err(Error::DualityInfeasible("singular scaling system".into()));
        }
        c[0] = if n > 1 { self.upper[0] / piv } else { 0.0 };
        d[0] = rhs[0] / piv;
        for i in 1..n {
            piv = self.diag[i] - self.lower[i] * c[i - 1];
            if piv.abs() <= 1e-14 * scale || !piv.is_finite() {
                return Err(Error::DualityInfeasible("singular scaling system".into()));
            }
            c[i] = if i + 1 < n { self.upper[i] / piv } else { 0.0 };
            d[i] = (rhs[i] - self.lower[i] * d[i - 1]) / piv;
        }
        for i in (0..n - 1).rev() {
            d[i] -= c[i] * d[i + 1];
        }
        Ok(d)
    }
}

/// Scaling system `T gamma^2 = (sigma_eta^2/2) ||h_p||^2 1` of the SC-MSE
/// transform, obtained by equating DL and UL MSE on every subcarrier.
pub fn sc_mse_system(
    ul: &UlFilterSet,
    sets: &[SubchannelMatrixSet],
    params: DualityParams,
) -> Result<(Tridiagonal, Vec<f64>)> {
    check_band(ul, sets)?;
    let sx2 = sets[0].sigma_x2;
    let sv2 = params.sigma_v2(sx2);
    let t = duality_terms(ul, sets, params.noise_var);
    let n = sets.len();
    let diag = (0..n)
        .map(|i| (sx2 - sv2) * (t.own[i] + t.target[i]) + t.ul_neighbour_noise[i])
        .collect();
    let lower = (0..n).map(|i| -sv2 * t.from_lower[i]).collect();
    let upper = (0..n).map(|i| -sv2 * t.from_upper[i]).collect();
    let rhs = vec![params.noise_var / 2.0 * params.hp_energy; n];
    Ok((Tridiagonal { lower, diag, upper }, rhs))
}

/// SC-MSE transform: one `gamma_k` per subcarrier.
pub fn sc_mse_duality(
    ul: &UlFilterSet,
    sets: &[SubchannelMatrixSet],
    params: DualityParams,
) -> Result<DlFilterSet> {
    let (t, rhs) = sc_mse_system(ul, sets, params)?;
    let g2 = t.solve(&rhs)?;
    if let Some((i, v)) = g2.iter().enumerate().find(|(_, v)| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::DualityInfeasible(format!(
            "gamma_k^2 = {v:e} on subcarrier {}",
            sets[i].k
        )));
    }
    let gammas: Vec<f64> = g2.iter().map(|v| v.sqrt()).collect();
    let sv2 = params.sigma_v2(sets[0].sigma_x2);
    let mut dl = scaled_set(ul, Duality::SubcarrierMse, params.tau, sv2, &gammas);
    fill_mse(sets, &mut dl, params.noise_var, params.hp_energy);
    Ok(dl)
}

/// Output of [`thp_precode`].
#[derive(Debug, Clone, PartialEq)]
pub struct ThpOutput {
    /// Modulo outputs `v'_l[n]`.
    pub v: RealSymbolStream,
    /// Effective data `x'_l[n] + a_l[n]` seen by the receiver.
    pub targets: RealSymbolStream,
    /// Per-subcarrier complex transmit sequences `t_l[n]`, length `len + L_f - 1`.
    pub transmit: Vec<Vec<Complex64>>,
}

/// Runs the feedback loop and the transmit filter of every subcarrier.
///
/// `v'[m] = M(x'[m] - sum_i c_i b_i v'[m-1-i])` where `c_i` follows the
/// orientation of the receive slot `m + nu`.
pub fn thp_precode(streams: &RealSymbolStream, dl: &DlFilterSet) -> Result<ThpOutput> {
    if streams.rows() != dl.filters.len() || streams.first_subcarrier != dl.first_subcarrier {
        return Err(Error::Dimension("stream and DL filter set are not aligned".into()));
    }
    let len = streams.len();
    let first = streams.first_subcarrier;
    let mut v = RealSymbolStream::zeros(first, streams.rows(), len);
    let mut targets = RealSymbolStream::zeros(first, streams.rows(), len);
    let mut transmit = Vec::with_capacity(streams.rows());
    for (row, f) in dl.filters.iter().enumerate() {
        let k = first + row;
        let x = &streams.values[row];
        let vr = &mut v.values[row];
        for m in 0..len {
            let real = is_real_slot(k, (m + dl.dims.nu) as i64);
            let fb: f64 = f
                .b
                .iter()
                .enumerate()
                .filter(|(i, _)| m > *i)
                .map(|(i, b)| b * feedback_sign(real, i) * vr[m - 1 - i])
                .sum();
            let pre = x[m] - fb;
            vr[m] = match dl.tau {
                Some(tau) => wrap(pre, tau),
                None => pre,
            };
            targets.values[row][m] = vr[m] + fb;
        }
        let phased: Vec<Complex64> = vr
            .iter()
            .enumerate()
            .map(|(n, &x)| slot_phase(k, n as i64) * x)
            .collect();
        let out_len = len + f.f1.len().saturating_sub(1);
        transmit.push((0..out_len).map(|n| ff_output(&f.f1, &phased, n as i64)).collect());
    }
    Ok(ThpOutput {
        v,
        targets,
        transmit,
    })
}

/// Output of [`dl_receive`].
#[derive(Debug, Clone, PartialEq)]
pub struct DlReceiveOutput {
    /// `f_2`-scaled receive values before the modulo.
    pub pre_modulo: RealSymbolStream,
    /// Estimates of `x'` after the modulo.
    pub estimates: RealSymbolStream,
}

/// Scalar equalization and receive modulo; estimates `x'_k[m]` from
/// `y_k[m + nu]` for `m = 0..len`.
pub fn dl_receive(received: &[Vec<Complex64>], dl: &DlFilterSet, len: usize) -> Result<DlReceiveOutput> {
    if received.len() != dl.filters.len() {
        return Err(Error::Dimension("received sequences and DL filters differ".into()));
    }
    let first = dl.first_subcarrier;
    let nu = dl.dims.nu;
    let mut pre = RealSymbolStream::zeros(first, received.len(), len);
    let mut est = RealSymbolStream::zeros(first, received.len(), len);
    for (row, (y, f)) in received.iter().zip(&dl.filters).enumerate() {
        let k = first + row;
        for m in 0..len {
            let n = m + nu;
            let (real, sign) = slot_orientation(k, n as i64, nu);
            let z = y.get(n).copied().unwrap_or_default() * f.f2;
            let u = sign * if real { z.re } else { z.im };
            pre.values[row][m] = u;
            est.values[row][m] = match dl.tau {
                Some(tau) => wrap(u, tau),
                None => u,
            };
        }
    }
    Ok(DlReceiveOutput {
        pre_modulo: pre,
        estimates: est,
    })
}
