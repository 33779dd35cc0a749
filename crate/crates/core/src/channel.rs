//! Multipath channels, AWGN and the total per-subcarrier responses `h_{l,k}[n]`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::filterbank::{modulated_filter, BasebandSignal, PrototypeFilter};

/// Tapped-delay-line power profile.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerDelayProfile {
    /// Tap delays in seconds.
    pub delays_s: Vec<f64>,
    /// Relative tap powers in dB.
    pub powers_db: Vec<f64>,
}

impl PowerDelayProfile {
    /// COST 207 bad-urban 6-tap reference profile.
    pub fn bad_urban() -> Self {
        Self {
            delays_s: vec![0.0, 0.4e-6, 1.0e-6, 1.6e-6, 5.0e-6, 6.6e-6],
            powers_db: vec![-3.0, 0.0, -3.0, -5.0, -2.0, -4.0],
        }
    }

    /// A single unit tap at delay zero.
    pub fn flat() -> Self {
        Self {
            delays_s: vec![0.0],
            powers_db: vec![0.0],
        }
    }

    /// Sample index of every tap at rate `fs`.
    pub fn tap_indices(&self, fs: f64) -> Vec<usize> {
        self.delays_s.iter().map(|d| (d * fs).round() as usize).collect()
    }
}

/// One channel impulse response `h_ch` with unit energy.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub taps: Vec<Complex64>,
    pub sample_rate: f64,
}

impl ChannelRealization {
    pub fn identity(sample_rate: f64) -> Self {
        Self {
            taps: vec![Complex64::new(1.0, 0.0)],
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.taps.iter().map(|z| z.norm_sqr()).sum()
    }

    /// `index,re,im` rows with a header line.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        let io = |e| Error::io(path, e);
        writeln!(w, "# sample_rate_hz={}", self.sample_rate).map_err(io)?;
        writeln!(w, "index,re,im").map_err(io)?;
        for (i, z) in self.taps.iter().enumerate() {
            writeln!(w, "{i},{:.17e},{:.17e}", z.re, z.im).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut sample_rate = f64::NAN;
        let mut taps = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let line = line.trim();
            if let Some(rest) = line.strip_prefix("# sample_rate_hz=") {
                sample_rate = rest
                    .parse()
                    .map_err(|_| Error::InvalidChannel(format!("bad sample rate {rest:?}")))?;
                continue;
            }
            if line.is_empty() || line.starts_with('#') || line.starts_with("index") {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::InvalidChannel(format!("bad row {line:?}")))
            };
            if cols.len() != 3 {
                return Err(Error::InvalidChannel(format!("bad row {line:?}")));
            }
            let idx = parse(cols[0])? as usize;
            if idx != taps.len() {
                return Err(Error::InvalidChannel(format!("row {idx} out of order")));
            }
            taps.push(Complex64::new(parse(cols[1])?, parse(cols[2])?));
        }
        Ok(Self { taps, sample_rate })
    }
}

/// Draws a unit-energy Rayleigh realization of `profile` on a grid of `len`
/// samples at rate `fs`. Taps that round onto the same sample add up.
pub fn generate_channel<R: Rng + ?Sized>(
    rng: &mut R,
    profile: &PowerDelayProfile,
    fs: f64,
    len: usize,
) -> Result<ChannelRealization> {
    if len == 0 {
        return Err(Error::InvalidChannel("L_ch must be >= 1".into()));
    }
    if profile.delays_s.len() != profile.powers_db.len() || profile.delays_s.is_empty() {
        return Err(Error::InvalidChannel("profile needs matching delays and powers".into()));
    }
    let mut taps = vec![Complex64::new(0.0, 0.0); len];
    for (&delay, &p_db) in profile.delays_s.iter().zip(&profile.powers_db) {
        let idx = (delay * fs).round();
        if delay < 0.0 || idx >= len as f64 {
            return Err(Error::DelayOutOfRange {
                delay_s: delay,
                len,
                fs,
            });
        }
        let amp = (10f64.powf(p_db / 10.0) / 2.0).sqrt();
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        taps[idx as usize] += Complex64::new(re, im) * amp;
    }
    let energy: f64 = taps.iter().map(|z| z.norm_sqr()).sum();
    let norm = energy.sqrt();
    taps.iter_mut().for_each(|z| *z /= norm);
    Ok(ChannelRealization {
        taps,
        sample_rate: fs,
    })
}

/// [`generate_channel`] with the bad-urban profile.
pub fn generate_bu_channel<R: Rng + ?Sized>(rng: &mut R, fs: f64, len: usize) -> Result<ChannelRealization> {
    generate_channel(rng, &PowerDelayProfile::bad_urban(), fs, len)
}

/// Full linear convolution.
pub fn convolve(a: &[Complex64], b: &[Complex64]) -> Vec<Complex64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let mut out = vec![Complex64::new(0.0, 0.0); a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        if x == Complex64::new(0.0, 0.0) {
            continue;
        }
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

/// Circular complex Gaussian sample with variance `var`.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, var: f64) -> Complex64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re * s, im * s)
}

/// Convolves with the channel (full length) and adds `CN(0, noise_var)` noise.
pub fn apply_channel<R: Rng + ?Sized>(
    signal: &BasebandSignal,
    channel: &ChannelRealization,
    noise_var: f64,
    rng: &mut R,
) -> BasebandSignal {
    let mut samples = convolve(&signal.samples, &channel.taps);
    if noise_var > 0.0 {
        samples
            .iter_mut()
            .for_each(|z| *z += complex_gaussian(rng, noise_var));
    }
    BasebandSignal { samples }
}

/// `N = ceil((2 (L_p - 1) + L_ch) / (M/2))`.
pub fn response_len(p: &PrototypeFilter, channel_len: usize) -> usize {
    (2 * (p.len() - 1) + channel_len).div_ceil(p.step())
}

/// Total response `h_{l,k}[n] = (h_l * h_ch * h_k)[n M/2]` of length `N`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubchannelResponse {
    pub l: usize,
    pub k: usize,
    pub g: Vec<Complex64>,
}

/// Computes `h_{l,k}` for adjacent subcarriers (`|l - k| <= 1`).
pub fn total_subchannel_response(
    p: &PrototypeFilter,
    l: usize,
    k: usize,
    channel: &ChannelRealization,
) -> Result<SubchannelResponse> {
    if l.abs_diff(k) > 1 {
        return Err(Error::NotAdjacent { l, k });
    }
    let hl = modulated_filter(p, l)?;
    let hk = modulated_filter(p, k)?;
    let tx = convolve(&hl, &channel.taps);
    let n = response_len(p, channel.len());
    let step = p.step();
    let g = (0..n)
        .map(|i| {
            let t = i * step;
            let lo = t.saturating_sub(hk.len() - 1);
            let hi = t.min(tx.len() - 1);
            if lo > hi {
                return Complex64::new(0.0, 0.0);
            }
            (lo..=hi).map(|r| tx[r] * hk[t - r]).sum()
        })
        .collect();
    Ok(SubchannelResponse { l, k, g })
}
