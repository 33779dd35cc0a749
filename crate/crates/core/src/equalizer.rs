//! MMSE decision-feedback equalizer per subcarrier.
//!
//! The equalized half-symbol is `x_hat = w^T (A x_1 + B x_2 + Xi eta_bar)` with
//! `w = [f_bar; b]`. The MMSE solution solves
//! `(A Psi A^T + sigma_x^2 B B^T + sigma_eta^2/2 Xi Xi^T) w = A Psi e_{nu+1}`
//! through a Cholesky factorization. A linear equalizer is the `L_b = 0` case.
//!
//! At run time the design, which is computed for receive slots with `k + n`
//! odd, is reused on the other parity: there the imaginary part of `f^H y` is
//! taken and alternate window positions change sign, which leaves every
//! second-order statistic unchanged.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::RangeInclusive;
use std::path::Path;

use nalgebra::DVector;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::matrices::{Dims, SubchannelMatrixSet};
use crate::oqam::{is_real_slot, Qam, RealSymbolStream};

/// UL filters of one subcarrier. The transmit scalar `f_1` is fixed to one.
#[derive(Debug, Clone, PartialEq)]
pub struct UlFilter {
    pub k: usize,
    /// Feed-forward filter `f_2`, applied as `f_2^H y`.
    pub f2: Vec<Complex64>,
    /// Real part of the feedback filter.
    pub b: Vec<f64>,
    pub nu: usize,
    pub mse_analytic: f64,
}

impl UlFilter {
    pub fn f1(&self) -> f64 {
        1.0
    }

    /// `f_bar = [Re f_2; Im f_2]`.
    pub fn f2_stacked(&self) -> DVector<f64> {
        stack(&self.f2)
    }

    /// `w = [f_bar; b]`.
    pub fn w(&self) -> DVector<f64> {
        let f = self.f2_stacked();
        DVector::from_iterator(f.len() + self.b.len(), f.iter().copied().chain(self.b.iter().copied()))
    }
}

pub(crate) fn stack(f: &[Complex64]) -> DVector<f64> {
    DVector::from_iterator(2 * f.len(), f.iter().map(|z| z.re).chain(f.iter().map(|z| z.im)))
}

pub(crate) fn unstack(f: &[f64]) -> Vec<Complex64> {
    let l = f.len() / 2;
    (0..l).map(|i| Complex64::new(f[i], f[l + i])).collect()
}

/// UL filters of all used subcarriers (contiguous, in order).
#[derive(Debug, Clone, PartialEq)]
pub struct UlFilterSet {
    pub first_subcarrier: usize,
    pub dims: Dims,
    pub filters: Vec<UlFilter>,
}

impl UlFilterSet {
    /// Designs every subcarrier of `sets`.
    pub fn design(sets: &[SubchannelMatrixSet], noise_var: f64) -> Result<Self> {
        let first = sets
            .first()
            .ok_or_else(|| Error::Dimension("no subcarriers".into()))?;
        let filters = sets
            .iter()
            .map(|s| design_dfe(s, noise_var))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            first_subcarrier: first.k,
            dims: first.dims,
            filters,
        })
    }

    pub fn mean_mse(&self) -> f64 {
        self.filters.iter().map(|f| f.mse_analytic).sum::<f64>() / self.filters.len() as f64
    }

    /// Rows `k,tap,re,im`; taps `0..L_f` are the feed-forward filter and taps
    /// `L_f..L_f+L_b` the (real) feedback filter.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let rows = self.filters.iter().map(|f| (f.k, f.f2.as_slice(), f.b.as_slice()));
        write_filter_csv(path, &format!("# ul nu={}", self.dims.nu), rows)
    }
}

pub(crate) fn write_filter_csv<'a>(
    path: &Path,
    header: &str,
    rows: impl Iterator<Item = (usize, &'a [Complex64], &'a [f64])>,
) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let io = |e| Error::io(path, e);
    writeln!(w, "{header}").map_err(io)?;
    writeln!(w, "k,tap,re,im").map_err(io)?;
    for (k, ff, fb) in rows {
        for (i, z) in ff.iter().enumerate() {
            writeln!(w, "{k},{i},{:.17e},{:.17e}", z.re, z.im).map_err(io)?;
        }
        for (i, v) in fb.iter().enumerate() {
            writeln!(w, "{k},{},{v:.17e},0", ff.len() + i).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Solves the MMSE normal equations of one subcarrier.
pub fn solve_mmse(s: &SubchannelMatrixSet, noise_var: f64) -> Result<DVector<f64>> {
    let m = s.system_matrix(noise_var);
    let rhs = s.cross_vector();
    let chol = m.cholesky().ok_or(Error::Singular { k: s.k })?;
    Ok(chol.solve(&rhs))
}

/// MMSE DFE of one subcarrier.
pub fn design_dfe(s: &SubchannelMatrixSet, noise_var: f64) -> Result<UlFilter> {
    let w = solve_mmse(s, noise_var)?;
    let f = 2 * s.dims.l_f;
    let f_bar = w.rows(0, f).into_owned();
    let b: Vec<f64> = w.rows(f, s.dims.l_b).iter().copied().collect();
    let mse = ul_mse(s, &f_bar, &b, noise_var);
    Ok(UlFilter {
        k: s.k,
        f2: unstack(f_bar.as_slice()),
        b,
        nu: s.dims.nu,
        mse_analytic: mse,
    })
}

/// Linear MMSE equalizer; `s` must have been assembled with `L_b = 0`.
pub fn design_linear(s: &SubchannelMatrixSet, noise_var: f64) -> Result<UlFilter> {
    if s.dims.l_b != 0 {
        return Err(Error::Dimension(format!(
            "linear equalizer needs L_b = 0, got {}",
            s.dims.l_b
        )));
    }
    design_dfe(s, noise_var)
}

/// UL MSE from the filter form:
/// `f^T (sigma_x^2 sum_l H H^T + sigma_eta^2/2 Gamma Gamma^T) f
///  + sigma_x^2 (r^T r - 2 f^T H_kk r)`.
pub fn ul_mse(s: &SubchannelMatrixSet, f_bar: &DVector<f64>, b: &[f64], noise_var: f64) -> f64 {
    let sx2 = s.sigma_x2;
    let gram = (s.own_gram() + s.neighbour_gram()) * sx2 + &s.gamma_gram * (noise_var / 2.0);
    let r = s.dims.target(b);
    let rr: f64 = r.iter().map(|v| v * v).sum();
    let r_win = DVector::from_column_slice(&r[..s.dims.window()]);
    let cross = f_bar.dot(&(&s.hbar_own * r_win));
    f_bar.dot(&(gram * f_bar)) + sx2 * (rr - 2.0 * cross)
}

/// UL MSE from the stacked form `w^T M w - 2 w^T A Psi e + sigma_x^2`.
pub fn ul_mse_quadratic(s: &SubchannelMatrixSet, w: &DVector<f64>, noise_var: f64) -> f64 {
    let m = s.system_matrix(noise_var);
    w.dot(&(&m * w)) - 2.0 * w.dot(&s.cross_vector()) + s.psi[(s.dims.nu, s.dims.nu)]
}

/// `||M w - A Psi e|| / ||A Psi e||`.
pub fn normal_equation_residual(s: &SubchannelMatrixSet, w: &DVector<f64>, noise_var: f64) -> f64 {
    let rhs = s.cross_vector();
    (s.system_matrix(noise_var) * w - &rhs).norm() / rhs.norm()
}

/// Latency with the smallest cost over `range`; ties go to the smaller latency.
pub fn select_latency<F>(range: RangeInclusive<usize>, mut cost: F) -> Result<(usize, f64)>
where
    F: FnMut(usize) -> Result<f64>,
{
    let mut best: Option<(usize, f64)> = None;
    for nu in range {
        let c = cost(nu)?;
        if best.is_none_or(|(_, b)| c < b) {
            best = Some((nu, c));
        }
    }
    best.ok_or(Error::EmptyLatencyRange)
}

/// Where the feedback filter takes its past half-symbols from.
#[derive(Debug, Clone, Copy)]
pub enum FeedbackMode<'a> {
    /// Transmitted half-symbols (correct past decisions).
    Genie(&'a RealSymbolStream),
    /// Sliced estimates.
    Decision,
}

/// Output of [`dfe_run`]: pre-decision estimates and hard decisions.
#[derive(Debug, Clone, PartialEq)]
pub struct DfeOutput {
    pub estimates: RealSymbolStream,
    pub decisions: RealSymbolStream,
}

/// Orientation of the design on receive slot `n` of subcarrier `k`:
/// `(take real part, sign of the target)`. Feedback tap `i` is multiplied by
/// [`feedback_sign`].
#[inline]
pub(crate) fn slot_orientation(k: usize, n: i64, nu: usize) -> (bool, f64) {
    if is_real_slot(k, n) {
        (true, 1.0)
    } else {
        (false, if nu % 2 == 0 { 1.0 } else { -1.0 })
    }
}

#[inline]
pub(crate) fn feedback_sign(real_slot: bool, tap: usize) -> f64 {
    if real_slot || tap % 2 == 1 {
        1.0
    } else {
        -1.0
    }
}

/// Applies `f^H` to the window `[y[n], ..., y[n - L_f + 1]]`.
#[inline]
pub(crate) fn ff_output(f: &[Complex64], y: &[Complex64], n: i64) -> Complex64 {
    let mut acc = Complex64::new(0.0, 0.0);
    for (i, c) in f.iter().enumerate() {
        let t = n - i as i64;
        if t >= 0 {
            if let Some(v) = y.get(t as usize) {
                acc += c.conj() * v;
            }
        }
    }
    acc
}

/// Runs the per-subcarrier DFE over analysis-bank outputs.
///
/// `received[i]` belongs to subcarrier `filters.first_subcarrier + i`;
/// `len` half-symbols `x'_k[m]`, `m = 0..len`, are estimated from
/// `y_k[m + nu]`.
pub fn dfe_run(
    received: &[Vec<Complex64>],
    filters: &UlFilterSet,
    qam: Qam,
    mode: FeedbackMode<'_>,
    len: usize,
) -> Result<DfeOutput> {
    if received.len() != filters.filters.len() {
        return Err(Error::Dimension(format!(
            "{} received sequences for {} filters",
            received.len(),
            filters.filters.len()
        )));
    }
    if let FeedbackMode::Genie(truth) = mode {
        if truth.rows() != received.len() || truth.len() < len {
            return Err(Error::Dimension("genie reference does not cover the run".into()));
        }
    }
    let first = filters.first_subcarrier;
    let mut est = RealSymbolStream::zeros(first, received.len(), len);
    let mut dec = RealSymbolStream::zeros(first, received.len(), len);
    for (row, (y, filt)) in received.iter().zip(&filters.filters).enumerate() {
        let k = first + row;
        let nu = filt.nu;
        for m in 0..len {
            let n = (m + nu) as i64;
            let (real, sign) = slot_orientation(k, n, nu);
            let z = ff_output(&filt.f2, y, n);
            let u = if real { z.re } else { z.im };
            let mut x = sign * u;
            for (i, &b) in filt.b.iter().enumerate() {
                if m > i {
                    let past = match mode {
                        FeedbackMode::Genie(t) => t.values[row][m - 1 - i],
                        FeedbackMode::Decision => dec.values[row][m - 1 - i],
                    };
                    x -= b * feedback_sign(real, i) * past;
                }
            }
            est.values[row][m] = x;
            dec.values[row][m] = qam.slice_axis(x);
        }
    }
    Ok(DfeOutput {
        estimates: est,
        decisions: dec,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrices::{assemble, SubchannelResponses};
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn rand_c(rng: &mut ChaCha8Rng, n: usize) -> Vec<Complex64> {
        (0..n)
            .map(|_| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    fn random_set(rng: &mut ChaCha8Rng, l_f: usize, l_b: usize, n: usize, nu: usize) -> SubchannelMatrixSet {
        let resp = SubchannelResponses {
            k: 6,
            own: rand_c(rng, n),
            lower: Some(rand_c(rng, n).into_iter().map(|z| z * 0.2).collect()),
            upper: Some(rand_c(rng, n).into_iter().map(|z| z * 0.2).collect()),
            noise_filter: rand_c(rng, 9),
            step: 4,
        };
        assemble(&resp, Dims::new(l_f, l_b, n, nu).unwrap(), 0.5).unwrap()
    }

    #[test]
    fn scalar_wiener() {
        let g = 0.8;
        let resp = SubchannelResponses {
            k: 1,
            own: vec![c(g, 0.0)],
            lower: None,
            upper: None,
            noise_filter: vec![c(1.0, 0.0)],
            step: 1,
        };
        let s = assemble(&resp, Dims::new(1, 0, 1, 0).unwrap(), 0.5).unwrap();
        let nv = 0.3;
        let f = design_dfe(&s, nv).unwrap();
        let expect = 0.5 * g / (0.5 * g * g + nv / 2.0);
        assert!((f.f2[0].re - expect).abs() < 1e-14);
        assert!(f.f2[0].im.abs() < 1e-14);
        // MSE = sigma_x^2 - sigma_x^4 g^2 / (sigma_x^2 g^2 + sigma^2/2)
        let mse = 0.5 - 0.25 * g * g / (0.5 * g * g + nv / 2.0);
        assert!((f.mse_analytic - mse).abs() < 1e-14);
    }

    #[test]
    fn normal_equations_and_both_mse_forms_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let l_f = rng.random_range(1..6);
            let l_b = rng.random_range(0..5);
            let n = rng.random_range(1..7);
            let nu = rng.random_range(0..=(n + l_f - 2));
            let s = random_set(&mut rng, l_f, l_b, n, nu);
            let nv = rng.random_range(0.01..1.0);
            let w = solve_mmse(&s, nv).unwrap();
            assert!(normal_equation_residual(&s, &w, nv) < 1e-8);
            let f = design_dfe(&s, nv).unwrap();
            let q = ul_mse_quadratic(&s, &w, nv);
            assert!((f.mse_analytic - q).abs() < 1e-10 * q.max(1.0), "{} {}", f.mse_analytic, q);
            assert!(f.mse_analytic >= 0.0);
        }
    }

    #[test]
    fn mmse_beats_perturbations() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = random_set(&mut rng, 4, 3, 5, 4);
        let nv = 0.1;
        let w = solve_mmse(&s, nv).unwrap();
        let best = ul_mse_quadratic(&s, &w, nv);
        for _ in 0..100 {
            let d = DMatrix::from_fn(w.len(), 1, |_, _| rng.random_range(-0.05..0.05));
            let wp = &w + d.column(0);
            let fp = wp.rows(0, 8).into_owned();
            let bp: Vec<f64> = wp.rows(8, 3).iter().copied().collect();
            assert!(ul_mse(&s, &fp, &bp, nv) >= best - 1e-12);
        }
    }

    #[test]
    fn zero_filters_give_signal_power() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_set(&mut rng, 3, 2, 4, 2);
        let f = DVector::zeros(6);
        assert!((ul_mse(&s, &f, &[0.0, 0.0], 0.2) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn large_noise_shrinks_the_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = random_set(&mut rng, 3, 0, 4, 2);
        let a = design_dfe(&s, 1.0).unwrap().f2_stacked().norm();
        let b = design_dfe(&s, 1e4).unwrap().f2_stacked().norm();
        let c = design_dfe(&s, 1e8).unwrap().f2_stacked().norm();
        assert!(b < a && c < b * 1e-3);
    }

    #[test]
    fn linear_is_dfe_without_feedback() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random_set(&mut rng, 9, 0, 5, 6);
        assert_eq!(design_linear(&s, 0.1).unwrap(), design_dfe(&s, 0.1).unwrap());
        let s = random_set(&mut rng, 3, 2, 5, 3);
        assert!(design_linear(&s, 0.1).is_err());
    }

    #[test]
    fn singular_system_is_reported() {
        let resp = SubchannelResponses {
            k: 2,
            own: vec![c(0.0, 0.0); 3],
            lower: None,
            upper: None,
            noise_filter: vec![c(1.0, 0.0)],
            step: 1,
        };
        let s = assemble(&resp, Dims::new(2, 0, 3, 1).unwrap(), 0.5).unwrap();
        assert!(matches!(design_dfe(&s, 0.0), Err(Error::Singular { k: 2 })));
    }

    #[test]
    fn latency_selection() {
        assert_eq!(select_latency(3..=3, |_| Ok(5.0)).unwrap(), (3, 5.0));
        assert!(matches!(select_latency(3..=2, |_| Ok(0.0)), Err(Error::EmptyLatencyRange)));
        let costs = [4.0, 2.0, 1.0, 1.0, 3.0];
        let (nu, c) = select_latency(0..=4, |nu| Ok(costs[nu])).unwrap();
        assert_eq!((nu, c), (2, 1.0));
    }

    #[test]
    fn latency_sweep_on_symmetric_channel_lands_mid_window() {
        // symmetric real channel, no ICI
        let g: Vec<Complex64> = [0.2, 0.5, 1.0, 0.5, 0.2].iter().map(|&v| c(v, 0.0)).collect();
        let resp = SubchannelResponses {
            k: 1,
            own: g,
            lower: None,
            upper: None,
            noise_filter: vec![c(1.0, 0.0)],
            step: 1,
        };
        let (l_f, n) = (7, 5);
        let (nu, _) = select_latency(0..=(n + l_f - 2), |nu| {
            let s = assemble(&resp, Dims::new(l_f, 0, n, nu)?, 0.5)?;
            Ok(design_dfe(&s, 0.05)?.mse_analytic)
        })
        .unwrap();
        let mid = (n + l_f - 2) as f64 / 2.0;
        assert!((nu as f64 - mid).abs() <= 1.0, "nu = {nu}, mid = {mid}");
    }

    #[test]
    fn feedback_sign_pattern() {
        assert_eq!(feedback_sign(true, 0), 1.0);
        assert_eq!(feedback_sign(false, 0), -1.0);
        assert_eq!(feedback_sign(false, 1), 1.0);
        assert_eq!(slot_orientation(1, 0, 3), (true, 1.0));
        assert_eq!(slot_orientation(1, 1, 3), (false, -1.0));
    }

    #[test]
    fn without_feedback_the_run_is_plain_filtering() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let qam = Qam::new(16).unwrap();
        let y = vec![rand_c(&mut rng, 40)];
        let f = UlFilter {
            k: 3,
            f2: rand_c(&mut rng, 3),
            b: vec![],
            nu: 2,
            mse_analytic: 0.0,
        };
        let set = UlFilterSet {
            first_subcarrier: 3,
            dims: Dims::new(3, 0, 4, 2).unwrap(),
            filters: vec![f.clone()],
        };
        let out = dfe_run(&y, &set, qam, FeedbackMode::Decision, 30).unwrap();
        for m in 0..30 {
            let n = m + 2;
            let z: Complex64 = (0..3).filter(|&i| n >= i).map(|i| f.f2[i].conj() * y[0][n - i]).sum();
            let expect = if is_real_slot(3, n as i64) { z.re } else { z.im };
            assert!((out.estimates.values[0][m] - expect).abs() < 1e-12);
        }
    }
}
