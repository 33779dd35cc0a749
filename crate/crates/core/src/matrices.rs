//! Real-valued stacked system matrices of one subcarrier.
//!
//! Conventions used throughout:
//!
//! * Windows are ordered newest first: `[x[n], x[n-1], ..., x[n-W+1]]`.
//! * A length-`N` response `g` becomes the `L_f x (N + L_f - 1)` matrix with
//!   `H[i, i + j] = g[j]`, so `H x` is the window `[y[n], ..., y[n-L_f+1]]`.
//! * Designs are computed for a receive time `n` with `k + n` odd. Phase
//!   matrices `J` of neighbouring subcarriers follow their own parity.
//! * A stacked filter `f_bar = [Re f; Im f]` produces the real output
//!   `Re(f^H y) = f_bar^T [Re y; Im y]`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::oqam::slot_phase;

/// Filter lengths and latency of one design.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    /// Feed-forward length `L_f`.
    pub l_f: usize,
    /// Feedback length `L_b`.
    pub l_b: usize,
    /// Length `N` of the total subchannel responses.
    pub n: usize,
    /// Latency `nu` in half-symbols.
    pub nu: usize,
}

impl Dims {
    pub fn new(l_f: usize, l_b: usize, n: usize, nu: usize) -> Result<Self> {
        if l_f == 0 || n == 0 {
            return Err(Error::Dimension(format!("L_f = {l_f} and N = {n} must be >= 1")));
        }
        let d = Self { l_f, l_b, n, nu };
        if nu > d.max_latency() {
            return Err(Error::LatencyOutOfRange {
                nu,
                max: d.max_latency(),
            });
        }
        Ok(d)
    }

    /// Input window length `N + L_f - 1`.
    pub fn window(&self) -> usize {
        self.n + self.l_f - 1
    }

    pub fn max_latency(&self) -> usize {
        self.n + self.l_f - 2
    }

    /// `L = L_f + N - nu - 2`: window positions after the target.
    pub fn tail(&self) -> usize {
        self.window() - 1 - self.nu
    }

    /// Length of `w = [f_bar; b]`.
    pub fn w_len(&self) -> usize {
        2 * self.l_f + self.l_b
    }

    /// Target vector `r = [0_nu, 1, b, 0_{L - L_b}]`, padded so that it covers
    /// both the input window and the feedback taps.
    pub fn target(&self, b: &[f64]) -> Vec<f64> {
        let len = self.window().max(self.nu + 1 + self.l_b);
        let mut r = vec![0.0; len];
        r[self.nu] = 1.0;
        r[self.nu + 1..self.nu + 1 + b.len()].copy_from_slice(b);
        r
    }
}

/// Transposed convolution matrix of `g` with `rows` rows.
pub fn convolution_matrix(g: &[Complex64], rows: usize) -> Result<DMatrix<Complex64>> {
    if g.is_empty() || rows == 0 {
        return Err(Error::Dimension("empty response or zero rows".into()));
    }
    let cols = g.len() + rows - 1;
    let mut h = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for (j, &v) in g.iter().enumerate() {
            h[(i, i + j)] = v;
        }
    }
    Ok(h)
}

/// `[Re(H J); Im(H J)]` where column `i` of `J` carries the phase of slot
/// `n - i` on subcarrier `k`.
pub fn realify(h: &DMatrix<Complex64>, k: usize, n: i64) -> DMatrix<f64> {
    let (rows, cols) = h.shape();
    let mut out = DMatrix::zeros(2 * rows, cols);
    for j in 0..cols {
        let ph = slot_phase(k, n - j as i64);
        for i in 0..rows {
            let z = h[(i, j)] * ph;
            out[(i, j)] = z.re;
            out[(rows + i, j)] = z.im;
        }
    }
    out
}

/// Matrix mapping the newest-first noise window at the sample rate onto the
/// `rows` most recent analysis outputs: `H[i, i step + r] = h_k[r]`.
pub fn noise_matrix(filter: &[Complex64], rows: usize, step: usize) -> Result<DMatrix<Complex64>> {
    if filter.is_empty() || rows == 0 || step == 0 {
        return Err(Error::Dimension("empty noise filter".into()));
    }
    let cols = (rows - 1) * step + filter.len();
    let mut h = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for (r, &v) in filter.iter().enumerate() {
            h[(i, i * step + r)] = v;
        }
    }
    Ok(h)
}

/// `Gamma = [[Re H, -Im H], [Im H, Re H]]`.
pub fn build_gamma(h: &DMatrix<Complex64>) -> DMatrix<f64> {
    let (rows, cols) = h.shape();
    let mut g = DMatrix::zeros(2 * rows, 2 * cols);
    for i in 0..rows {
        for j in 0..cols {
            let z = h[(i, j)];
            g[(i, j)] = z.re;
            g[(i, cols + j)] = -z.im;
            g[(rows + i, j)] = z.im;
            g[(rows + i, cols + j)] = z.re;
        }
    }
    g
}

/// Overlap between the input window and the feedback window, shape
/// `(N + L_f - 1) x L_b`: entry `(nu + 1 + j, j)` is one wherever it falls
/// inside the window. Covers the `L > L_b`, `L = L_b` and `L < L_b` cases.
pub fn upsilon(d: &Dims) -> DMatrix<f64> {
    let mut u = DMatrix::zeros(d.window(), d.l_b);
    for j in 0..d.l_b.min(d.tail()) {
        u[(d.nu + 1 + j, j)] = 1.0;
    }
    u
}

/// Covariance `Psi` of `x_1 = [x'[n] window; x'[n - nu - 1] window]`.
pub fn psi(d: &Dims, sigma_x2: f64) -> DMatrix<f64> {
    let w = d.window();
    let mut p = DMatrix::identity(w + d.l_b, w + d.l_b);
    let u = upsilon(d);
    p.view_mut((0, w), (w, d.l_b)).copy_from(&u);
    p.view_mut((w, 0), (d.l_b, w)).copy_from(&u.transpose());
    p * sigma_x2
}

/// Everything needed to build the matrices of subcarrier `k`.
#[derive(Debug, Clone)]
pub struct SubchannelResponses {
    /// Absolute subcarrier index.
    pub k: usize,
    /// `h_{k,k}`.
    pub own: Vec<Complex64>,
    /// `h_{k-1,k}`; `None` when `k - 1` carries no signal.
    pub lower: Option<Vec<Complex64>>,
    /// `h_{k+1,k}`; `None` when `k + 1` carries no signal.
    pub upper: Option<Vec<Complex64>>,
    /// Receive filter `h_k` at the sample rate.
    pub noise_filter: Vec<Complex64>,
    /// Decimation factor `M/2` of the analysis bank.
    pub step: usize,
}

/// Design time index with `k + n` odd.
pub fn design_time(k: usize) -> i64 {
    if k % 2 == 0 {
        1
    } else {
        0
    }
}

/// Stacked matrices of one subcarrier.
#[derive(Debug, Clone)]
pub struct SubchannelMatrixSet {
    pub k: usize,
    pub dims: Dims,
    pub sigma_x2: f64,
    /// `H_bar'_{k,k}`, `2 L_f x (N + L_f - 1)`.
    pub hbar_own: DMatrix<f64>,
    /// `H_bar'_{k-1,k}` (zeros at a guard edge).
    pub hbar_lower: DMatrix<f64>,
    /// `H_bar'_{k+1,k}` (zeros at a guard edge).
    pub hbar_upper: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    /// `Gamma Gamma^T`.
    pub gamma_gram: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub xi: DMatrix<f64>,
    pub psi: DMatrix<f64>,
}

impl SubchannelMatrixSet {
    /// `sum_l H_bar'_{l,k} H_bar'_{l,k}^T` split into own and neighbour parts.
    pub fn own_gram(&self) -> DMatrix<f64> {
        &self.hbar_own * self.hbar_own.transpose()
    }

    pub fn neighbour_gram(&self) -> DMatrix<f64> {
        &self.hbar_lower * self.hbar_lower.transpose() + &self.hbar_upper * self.hbar_upper.transpose()
    }

    /// `A Psi A^T + sigma_x^2 B B^T + (sigma_eta^2 / 2) Xi Xi^T`.
    pub fn system_matrix(&self, noise_var: f64) -> DMatrix<f64> {
        let mut s = &self.a * &self.psi * self.a.transpose();
        s += &self.b * self.b.transpose() * self.sigma_x2;
        let f = 2 * self.dims.l_f;
        let mut noise = s.view_mut((0, 0), (f, f));
        noise += &self.gamma_gram * (noise_var / 2.0);
        s
    }

    /// `A Psi e_{nu+1}`.
    pub fn cross_vector(&self) -> nalgebra::DVector<f64> {
        (&self.a * self.psi.column(self.dims.nu)).into_owned()
    }
}

/// Builds the matrix set of subcarrier `resp.k`.
pub fn assemble(resp: &SubchannelResponses, dims: Dims, sigma_x2: f64) -> Result<SubchannelMatrixSet> {
    let d = Dims::new(dims.l_f, dims.l_b, dims.n, dims.nu)?;
    for g in std::iter::once(&resp.own).chain(resp.lower.iter()).chain(resp.upper.iter()) {
        if g.len() != d.n {
            return Err(Error::Dimension(format!(
                "response length {} does not match N = {}",
                g.len(),
                d.n
            )));
        }
    }
    let k = resp.k;
    let n0 = design_time(k);
    let (f, w, lb) = (2 * d.l_f, d.window(), d.l_b);

    let hbar_own = realify(&convolution_matrix(&resp.own, d.l_f)?, k, n0);
    let neighbour = |g: &Option<Vec<Complex64>>, l: usize| -> Result<DMatrix<f64>> {
        match g {
            Some(g) => Ok(realify(&convolution_matrix(g, d.l_f)?, l, n0)),
            None => Ok(DMatrix::zeros(f, w)),
        }
    };
    let hbar_lower = neighbour(&resp.lower, k.wrapping_sub(1))?;
    let hbar_upper = neighbour(&resp.upper, k + 1)?;

    let gamma = build_gamma(&noise_matrix(&resp.noise_filter, d.l_f, resp.step)?);
    let gamma_gram = &gamma * gamma.transpose();

    let mut a = DMatrix::zeros(f + lb, w + lb);
    a.view_mut((0, 0), (f, w)).copy_from(&hbar_own);
    for j in 0..lb {
        a[(f + j, w + j)] = -1.0;
    }
    let mut b = DMatrix::zeros(f + lb, 2 * w);
    b.view_mut((0, 0), (f, w)).copy_from(&hbar_lower);
    b.view_mut((0, w), (f, w)).copy_from(&hbar_upper);
    let mut xi = DMatrix::zeros(f + lb, gamma.ncols());
    xi.view_mut((0, 0), (f, gamma.ncols())).copy_from(&gamma);

    Ok(SubchannelMatrixSet {
        k,
        dims: d,
        sigma_x2,
        hbar_own,
        hbar_lower,
        hbar_upper,
        gamma,
        gamma_gram,
        a,
        b,
        xi,
        psi: psi(&d, sigma_x2),
    })
}

/// Comma-separated dump, one matrix row per line.
pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:.17e}", m[(i, j)])).collect();
        writeln!(w, "{}", row.join(",")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
