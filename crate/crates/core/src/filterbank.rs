//! Prototype design and the exponentially modulated synthesis/analysis banks.
//!
//! Subcarrier `k` uses `h_k[r] = h_p[r] exp(j 2 pi k (r - (L_p - 1)/2) / M)`.
//! Half-symbols enter the synthesis bank at rate `2/T` (upsampling by `M/2`)
//! and the analysis bank filters with `h_k` and decimates by `M/2`. Because
//! `h_p` is symmetric and the modulation is centred, `h_k` is its own matched
//! filter.
//!
//! The `*_direct` functions are the reference semantics; [`FilterBank`]
//! implements the same maps with one length-`M` FFT per half-symbol.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::oqam::{slot_phase, RealSymbolStream};

/// Root-raised-cosine impulse response at `t` symbol periods.
pub fn rrc(t: f64, rolloff: f64) -> f64 {
    let b = rolloff;
    if t == 0.0 {
        return 1.0 - b + 4.0 * b / PI;
    }
    if ((4.0 * b * t).abs() - 1.0).abs() < 1e-12 {
        let a = PI / (4.0 * b);
        return b / 2f64.sqrt() * ((1.0 + 2.0 / PI) * a.sin() + (1.0 - 2.0 / PI) * a.cos());
    }
    let num = (PI * t * (1.0 - b)).sin() + 4.0 * b * t * (PI * t * (1.0 + b)).cos();
    num / (PI * t * (1.0 - (4.0 * b * t).powi(2)))
}

/// Symmetric lowpass prototype `h_p` of length `K M + 1` with unit energy.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeFilter {
    coefficients: Vec<f64>,
    m: usize,
    overlap: usize,
}

impl PrototypeFilter {
    /// Truncated root-raised-cosine with symbol spacing `m` samples.
    pub fn design(m: usize, overlap: usize, rolloff: f64) -> Result<Self> {
        if m < 2 || !m.is_power_of_two() {
            return Err(Error::InvalidFilterBank(format!(
                "M = {m} must be a power of two >= 2"
            )));
        }
        if overlap == 0 {
            return Err(Error::InvalidFilterBank("K must be >= 1".into()));
        }
        if !(rolloff > 0.0 && rolloff <= 1.0) {
            return Err(Error::InvalidFilterBank(format!(
                "roll-off {rolloff} outside (0, 1]"
            )));
        }
        let len = overlap * m + 1;
        let center = (len - 1) / 2;
        let mut h: Vec<f64> = (0..len)
            .map(|r| rrc((r as f64 - center as f64) / m as f64, rolloff))
            .collect();
        // mirror so the symmetry is exact in floating point
        for r in 0..center {
            h[len - 1 - r] = h[r];
        }
        let norm = h.iter().map(|x| x * x).sum::<f64>().sqrt();
        h.iter_mut().for_each(|x| *x /= norm);
        Ok(Self {
            coefficients: h,
            m,
            overlap,
        })
    }

    /// Wraps arbitrary coefficients; `len` must equal `overlap * m + 1`.
    pub fn from_coefficients(coefficients: Vec<f64>, m: usize, overlap: usize) -> Result<Self> {
        if coefficients.len() != overlap * m + 1 || m < 2 || m % 2 != 0 {
            return Err(Error::InvalidFilterBank(format!(
                "{} taps do not match K M + 1 = {}",
                coefficients.len(),
                overlap * m + 1
            )));
        }
        Ok(Self {
            coefficients,
            m,
            overlap,
        })
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn len(&self) -> usize {
        self.coefficients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coefficients.is_empty()
    }

    /// Number of subcarriers `M`.
    pub fn m(&self) -> usize {
        self.m
    }

    /// Overlapping factor `K`.
    pub fn overlap(&self) -> usize {
        self.overlap
    }

    /// Up/downsampling factor between the sample rate and the half-symbol rate.
    pub fn step(&self) -> usize {
        self.m / 2
    }

    /// `||h_p||_2^2`.
    pub fn energy(&self) -> f64 {
        self.coefficients.iter().map(|x| x * x).sum()
    }

    /// One coefficient per line.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        for c in &self.coefficients {
            writeln!(w, "{c:.17e}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// `exp(j 2 pi k (r - c) / M)` with the exponent reduced exactly modulo `M`.
fn modulation(k: usize, r: usize, center: usize, m: usize) -> Complex64 {
    let e = (k as i64 * (r as i64 - center as i64)).rem_euclid(m as i64);
    Complex64::from_polar(1.0, 2.0 * PI * e as f64 / m as f64)
}

/// Subcarrier filter `h_k`.
pub fn modulated_filter(p: &PrototypeFilter, k: usize) -> Result<Vec<Complex64>> {
    if k >= p.m {
        return Err(Error::SubcarrierOutOfRange { k, m: p.m });
    }
    let center = (p.len() - 1) / 2;
    Ok(p.coefficients
        .iter()
        .enumerate()
        .map(|(r, &h)| modulation(k, r, center, p.m) * h)
        .collect())
}

/// Complex baseband samples at rate `M / T`.
#[derive(Debug, Clone, PartialEq)]
pub struct BasebandSignal {
    pub samples: Vec<Complex64>,
}

impl BasebandSignal {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.samples.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

fn synth_len(p: &PrototypeFilter, half_symbols: usize) -> usize {
    if half_symbols == 0 {
        0
    } else {
        (half_symbols - 1) * p.step() + p.len()
    }
}

/// Number of analysis outputs for a signal of `len` samples (full convolution,
/// decimated from sample 0).
pub fn analysis_len(p: &PrototypeFilter, len: usize) -> usize {
    if len == 0 {
        0
    } else {
        (len + p.len() - 2) / p.step() + 1
    }
}

fn input_len(inputs: &[Vec<Complex64>]) -> usize {
    inputs.iter().map(Vec::len).max().unwrap_or(0)
}

/// Phased complex input `x_k[n] = J x'_k[n]` for every row of a stream.
pub fn phased_inputs(streams: &RealSymbolStream) -> Vec<Vec<Complex64>> {
    streams
        .values
        .iter()
        .enumerate()
        .map(|(row, v)| {
            let k = streams.subcarrier(row);
            v.iter()
                .enumerate()
                .map(|(n, &x)| slot_phase(k, n as i64) * x)
                .collect()
        })
        .collect()
}

/// Direct-form synthesis of complex per-subcarrier sequences. Row `i` of
/// `inputs` drives subcarrier `first + i`.
pub fn synthesize_direct(
    p: &PrototypeFilter,
    first: usize,
    inputs: &[Vec<Complex64>],
) -> Result<BasebandSignal> {
    check_rows(p, first, inputs.len())?;
    let step = p.step();
    let mut out = vec![Complex64::new(0.0, 0.0); synth_len(p, input_len(inputs))];
    for (row, seq) in inputs.iter().enumerate() {
        let h = modulated_filter(p, first + row)?;
        for (n, &x) in seq.iter().enumerate() {
            if x == Complex64::new(0.0, 0.0) {
                continue;
            }
            let base = n * step;
            for (r, &c) in h.iter().enumerate() {
                out[base + r] += x * c;
            }
        }
    }
    Ok(BasebandSignal { samples: out })
}

/// Direct-form analysis: `y_k[n] = sum_r s[r] h_k[n M/2 - r]` for every `k` in
/// `subcarriers`.
pub fn analyze_direct(
    p: &PrototypeFilter,
    signal: &BasebandSignal,
    subcarriers: Range<usize>,
) -> Result<Vec<Vec<Complex64>>> {
    check_rows(p, subcarriers.start, subcarriers.len())?;
    let step = p.step();
    let nout = analysis_len(p, signal.len());
    let s = &signal.samples;
    subcarriers
        .map(|k| {
            let h = modulated_filter(p, k)?;
            Ok((0..nout)
                .map(|n| {
                    let t = n * step;
                    let lo = t.saturating_sub(h.len() - 1);
                    let hi = t.min(s.len() - 1);
                    (lo..=hi).map(|r| s[r] * h[t - r]).sum()
                })
                .collect())
        })
        .collect()
}

fn check_rows(p: &PrototypeFilter, first: usize, rows: usize) -> Result<()> {
    if first + rows > p.m {
        return Err(Error::SubcarrierOutOfRange {
            k: first + rows.max(1) - 1,
            m: p.m,
        });
    }
    Ok(())
}

/// Synthesis of real half-symbol streams (phases applied internally).
pub fn sfb_synthesize(streams: &RealSymbolStream, p: &PrototypeFilter) -> Result<BasebandSignal> {
    FilterBank::new(p.clone()).synthesize(streams.first_subcarrier, &phased_inputs(streams))
}

/// Analysis of the subcarriers in `used`.
pub fn afb_analyze(
    signal: &BasebandSignal,
    p: &PrototypeFilter,
    used: Range<usize>,
) -> Result<Vec<Vec<Complex64>>> {
    FilterBank::new(p.clone()).analyze(signal, used)
}

/// FFT-based synthesis/analysis bank.
///
/// Synthesis: `t[r] = sum_n h_p[r - n M/2] X_n[(r - n M/2 - c) mod M]` with
/// `X_n` the unnormalised inverse DFT of the inputs at time `n`. Analysis folds
/// the windowed signal modulo `M` and evaluates the same inverse DFT.
#[derive(Clone)]
pub struct FilterBank {
    proto: PrototypeFilter,
    ifft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for FilterBank {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FilterBank").field("proto", &self.proto).finish()
    }
}

impl FilterBank {
    pub fn new(proto: PrototypeFilter) -> Self {
        let ifft = FftPlanner::new().plan_fft_inverse(proto.m);
        Self { proto, ifft }
    }

    pub fn prototype(&self) -> &PrototypeFilter {
        &self.proto
    }

    pub fn synthesize(&self, first: usize, inputs: &[Vec<Complex64>]) -> Result<BasebandSignal> {
        let p = &self.proto;
        check_rows(p, first, inputs.len())?;
        let (m, step, lp) = (p.m, p.step(), p.len());
        let center = (lp - 1) / 2;
        let nsym = input_len(inputs);
        let mut out = vec![Complex64::new(0.0, 0.0); synth_len(p, nsym)];
        let mut buf = vec![Complex64::new(0.0, 0.0); m];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.ifft.get_inplace_scratch_len()];
        for n in 0..nsym {
            buf.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
            let mut any = false;
            for (row, seq) in inputs.iter().enumerate() {
                if let Some(&x) = seq.get(n) {
                    buf[first + row] = x;
                    any |= x != Complex64::new(0.0, 0.0);
                }
            }
            if !any {
                continue;
            }
            self.ifft.process_with_scratch(&mut buf, &mut scratch);
            let base = n * step;
            // (r - c) mod M for r = 0
            let mut q = (m - center % m) % m;
            for (r, &h) in p.coefficients.iter().enumerate() {
                out[base + r] += buf[q] * h;
                q += 1;
                if q == m {
                    q = 0;
                }
            }
        }
        Ok(BasebandSignal { samples: out })
    }

    pub fn analyze(&self, signal: &BasebandSignal, used: Range<usize>) -> Result<Vec<Vec<Complex64>>> {
        let p = &self.proto;
        check_rows(p, used.start, used.len())?;
        let (m, step, lp) = (p.m, p.step(), p.len());
        let center = (lp - 1) / 2;
        let nout = analysis_len(p, signal.len());
        let s = &signal.samples;
        let derot: Vec<Complex64> = used.clone().map(|k| modulation(k, 0, center, m)).collect();
        let mut out = vec![Vec::with_capacity(nout); used.len()];
        let mut buf = vec![Complex64::new(0.0, 0.0); m];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.ifft.get_inplace_scratch_len()];
        for n in 0..nout {
            buf.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
            let t = n * step;
            // q ranges over filter taps with 0 <= t - q < len(s)
            let q_lo = t.saturating_sub(s.len() - 1);
            let q_hi = t.min(lp - 1);
            for q in q_lo..=q_hi {
                buf[q % m] += s[t - q] * p.coefficients[q];
            }
            self.ifft.process_with_scratch(&mut buf, &mut scratch);
            for (i, k) in used.clone().enumerate() {
                out[i].push(buf[k] * derot[i]);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_inputs(rng: &mut ChaCha8Rng, rows: usize, len: usize) -> Vec<Vec<Complex64>> {
        (0..rows)
            .map(|_| {
                (0..len)
                    .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                    .collect()
            })
            .collect()
    }

    fn max_diff(a: &[Complex64], b: &[Complex64]) -> f64 {
        assert_eq!(a.len(), b.len());
        a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
    }

    #[test]
    fn prototype_shape() {
        let p = PrototypeFilter::design(256, 4, 1.0).unwrap();
        assert_eq!(p.len(), 1025);
        let h = p.coefficients();
        for r in 0..h.len() {
            assert_eq!(h[r], h[h.len() - 1 - r]);
        }
        let peak = h.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(peak, h[512]);
        assert!((p.energy() - 1.0).abs() < 1e-12);
        assert!(h.iter().sum::<f64>() > 0.0);
    }

    #[test]
    fn rrc_singular_point_is_continuous() {
        let at = rrc(0.25, 1.0);
        let near = rrc(0.25 + 1e-7, 1.0);
        assert!((at - near).abs() < 1e-5);
        assert!((at - 1.0).abs() < 1e-12);
    }

    #[test]
    fn design_rejects_bad_parameters() {
        assert!(PrototypeFilter::design(48, 4, 1.0).is_err());
        assert!(PrototypeFilter::design(64, 0, 1.0).is_err());
        assert!(PrototypeFilter::design(64, 4, 0.0).is_err());
        assert!(PrototypeFilter::design(64, 4, 1.5).is_err());
    }

    #[test]
    fn modulated_filter_properties() {
        let p = PrototypeFilter::design(32, 4, 1.0).unwrap();
        let h0 = modulated_filter(&p, 0).unwrap();
        for (a, &b) in h0.iter().zip(p.coefficients()) {
            assert_eq!(*a, Complex64::new(b, 0.0));
        }
        let hk = modulated_filter(&p, 16).unwrap();
        let c = (p.len() - 1) / 2;
        assert_eq!(hk[c], Complex64::new(p.coefficients()[c], 0.0));
        for k in 0..32 {
            let h = modulated_filter(&p, k).unwrap();
            let e: f64 = h.iter().map(|z| z.norm_sqr()).sum();
            assert!((e - p.energy()).abs() < 1e-12);
            for (z, &a) in h.iter().zip(p.coefficients()) {
                assert!((z.norm() - a.abs()).abs() < 1e-14);
            }
        }
        assert!(matches!(
            modulated_filter(&p, 32),
            Err(Error::SubcarrierOutOfRange { .. })
        ));
    }

    #[test]
    fn single_impulse_synthesizes_the_subcarrier_filter() {
        let p = PrototypeFilter::design(16, 4, 1.0).unwrap();
        let mut inputs = vec![vec![Complex64::new(0.0, 0.0); 3]; 4];
        inputs[2][1] = Complex64::new(1.0, 0.0);
        let fb = FilterBank::new(p.clone());
        let t = fb.synthesize(3, &inputs).unwrap();
        let h = modulated_filter(&p, 5).unwrap();
        for (r, z) in t.samples.iter().enumerate() {
            let expect = if (8..8 + h.len()).contains(&r) {
                h[r - 8]
            } else {
                Complex64::new(0.0, 0.0)
            };
            assert!((z - expect).norm() < 1e-12);
        }
    }

    #[test]
    fn zero_in_zero_out() {
        let p = PrototypeFilter::design(16, 4, 1.0).unwrap();
        let fb = FilterBank::new(p.clone());
        let inputs = vec![vec![Complex64::new(0.0, 0.0); 5]; 16];
        let t = fb.synthesize(0, &inputs).unwrap();
        assert!(t.samples.iter().all(|z| z.norm() == 0.0));
        let y = fb.analyze(&t, 0..16).unwrap();
        assert!(y.iter().flatten().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn fast_paths_match_direct_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for m in [16usize, 32, 64] {
            let p = PrototypeFilter::design(m, 4, 1.0).unwrap();
            let fb = FilterBank::new(p.clone());
            let first = m / 8;
            let rows = m - m / 4;
            let inputs = random_inputs(&mut rng, rows, 12);
            let a = synthesize_direct(&p, first, &inputs).unwrap();
            let b = fb.synthesize(first, &inputs).unwrap();
            assert!(max_diff(&a.samples, &b.samples) < 1e-10);
            let ya = analyze_direct(&p, &a, first..first + rows).unwrap();
            let yb = fb.analyze(&a, first..first + rows).unwrap();
            for (u, v) in ya.iter().zip(&yb) {
                assert!(max_diff(u, v) < 1e-10);
            }
        }
    }

    #[test]
    fn analysis_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = PrototypeFilter::design(16, 4, 1.0).unwrap();
        let fb = FilterBank::new(p);
        let s1 = random_inputs(&mut rng, 1, 300).remove(0);
        let s2 = random_inputs(&mut rng, 1, 300).remove(0);
        let (a, b) = (Complex64::new(0.3, -1.2), Complex64::new(2.0, 0.5));
        let mix = BasebandSignal {
            samples: s1.iter().zip(&s2).map(|(x, y)| a * x + b * y).collect(),
        };
        let y1 = fb.analyze(&BasebandSignal { samples: s1 }, 0..16).unwrap();
        let y2 = fb.analyze(&BasebandSignal { samples: s2 }, 0..16).unwrap();
        let ym = fb.analyze(&mix, 0..16).unwrap();
        for k in 0..16 {
            for n in 0..ym[k].len() {
                assert!((ym[k][n] - (a * y1[k][n] + b * y2[k][n])).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn csv_dump_has_one_line_per_tap() {
        let p = PrototypeFilter::design(16, 4, 1.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hp.csv");
        p.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let vals: Vec<f64> = text.lines().map(|l| l.parse().unwrap()).collect();
        assert_eq!(vals, p.coefficients());
    }
}
