//! Square QAM constellations and OQAM staggering.
//!
//! Every complex QAM symbol `d_k[m]` is split into two real half-symbols that
//! occupy time slots `n = 2m` and `n = 2m + 1` of subcarrier `k`. Which of the
//! two carries the real part (`alpha`) is fixed by the parity of `k + n`:
//! odd parity carries `alpha`, even parity carries `beta`. The imaginary unit
//! of the `beta` slot is not stored in the real stream; it is re-applied by
//! [`apply_phase`] when the stream enters the filter bank.
//!
//! Subcarrier indices are always absolute indices in the `M`-point bank, so a
//! guard band in front of the used subcarriers shifts the parity pattern.

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Returns `true` when slot `n` of subcarrier `k` carries a purely real value
/// (the `alpha` slot), i.e. when `k + n` is odd.
#[inline]
pub fn is_real_slot(k: usize, n: i64) -> bool {
    (k as i64 + n).rem_euclid(2) == 1
}

/// Phase factor of slot `n` on subcarrier `k`: `1` for odd `k + n`, `j` otherwise.
#[inline]
pub fn slot_phase(k: usize, n: i64) -> Complex64 {
    if is_real_slot(k, n) {
        Complex64::new(1.0, 0.0)
    } else {
        Complex64::new(0.0, 1.0)
    }
}

/// Gray-mapped square QAM with unit average symbol energy.
///
/// Each axis is an independent Gray-coded PAM. The first half of the bits of
/// a symbol select the in-phase level, the second half the quadrature level.
/// Level index 0 is the most negative amplitude and carries the all-zero bit
/// pattern.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Qam {
    order: usize,
    side: usize,
    bits_per_axis: usize,
    scale: f64,
}

impl Qam {
    pub fn new(order: usize) -> Result<Self> {
        let bits_per_axis = match order {
            4 => 1,
            16 => 2,
            64 => 3,
            _ => return Err(Error::UnsupportedOrder(order)),
        };
        let side = 1usize << bits_per_axis;
        // average energy of the unscaled odd-integer grid is 2 (Q - 1) / 3
        let scale = (1.5 / (order as f64 - 1.0)).sqrt();
        Ok(Self {
            order,
            side,
            bits_per_axis,
            scale,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn bits_per_symbol(&self) -> usize {
        2 * self.bits_per_axis
    }

    /// Number of PAM levels per axis.
    pub fn side(&self) -> usize {
        self.side
    }

    /// Half the distance between neighbouring PAM levels.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Average energy of one complex symbol.
    pub fn symbol_energy(&self) -> f64 {
        1.0
    }

    /// Variance of each real half-symbol (`sigma_x^2` in the real-valued model).
    pub fn half_symbol_variance(&self) -> f64 {
        0.5
    }

    /// THP modulo constant: the width of the PAM alphabet including half a
    /// level spacing on either side, `tau = 2 * side * scale`. Gives `8/sqrt(10)`
    /// for 16-QAM.
    pub fn modulo_constant(&self) -> f64 {
        2.0 * self.side as f64 * self.scale
    }

    /// Amplitude of PAM level `index` (0 is the most negative).
    pub fn level(&self, index: usize) -> f64 {
        self.scale * (2.0 * index as f64 - (self.side as f64 - 1.0))
    }

    pub fn levels(&self) -> Vec<f64> {
        (0..self.side).map(|i| self.level(i)).collect()
    }

    fn axis_from_bits(&self, bits: &[u8]) -> f64 {
        let gray = bits.iter().fold(0usize, |acc, &b| (acc << 1) | (b & 1) as usize);
        self.level(gray_to_binary(gray))
    }

    fn axis_to_bits(&self, index: usize, out: &mut Vec<u8>) {
        let gray = index ^ (index >> 1);
        for shift in (0..self.bits_per_axis).rev() {
            out.push(((gray >> shift) & 1) as u8);
        }
    }

    /// Maps a bit sequence onto symbols.
    pub fn modulate(&self, bits: &[u8]) -> Result<Vec<Complex64>> {
        let per = self.bits_per_symbol();
        if bits.len() % per != 0 {
            return Err(Error::BitCount {
                bits: bits.len(),
                per_symbol: per,
            });
        }
        Ok(bits
            .chunks_exact(per)
            .map(|c| {
                let (i, q) = c.split_at(self.bits_per_axis);
                Complex64::new(self.axis_from_bits(i), self.axis_from_bits(q))
            })
            .collect())
    }

    /// Hard-decision demapping; every symbol is sliced first.
    pub fn demodulate(&self, symbols: &[Complex64]) -> Vec<u8> {
        let mut out = Vec::with_capacity(symbols.len() * self.bits_per_symbol());
        for z in symbols {
            self.axis_to_bits(self.axis_index(z.re), &mut out);
            self.axis_to_bits(self.axis_index(z.im), &mut out);
        }
        out
    }

    /// Index of the nearest PAM level.
    ///
    /// Values within `1e-12` (in units of `scale`) of a decision boundary are
    /// ties and resolve to the level with the smaller Gray code.
    pub fn axis_index(&self, x: f64) -> usize {
        let last = self.side - 1;
        // levels sit at odd integers in units of `scale`
        let u = x / self.scale + last as f64;
        if !u.is_finite() {
            return if u > 0.0 { last } else { 0 };
        }
        let pos = (u / 2.0).clamp(0.0, last as f64);
        let lower = pos.floor() as usize;
        if lower >= last {
            return last;
        }
        let frac = pos - lower as f64;
        if (frac - 0.5).abs() * 2.0 < 1e-12 {
            let upper = lower + 1;
            if lower ^ (lower >> 1) < upper ^ (upper >> 1) {
                lower
            } else {
                upper
            }
        } else if frac < 0.5 {
            lower
        } else {
            lower + 1
        }
    }

    /// Nearest PAM amplitude of a real half-symbol.
    pub fn slice_axis(&self, x: f64) -> f64 {
        self.level(self.axis_index(x))
    }

    /// Nearest constellation point.
    pub fn slice(&self, z: Complex64) -> Complex64 {
        Complex64::new(self.slice_axis(z.re), self.slice_axis(z.im))
    }
}

fn gray_to_binary(mut g: usize) -> usize {
    let mut b = g;
    while g > 0 {
        g >>= 1;
        b ^= g;
    }
    b
}

/// Complex QAM symbols, one row per used subcarrier and one column per symbol slot.
#[derive(Debug, Clone, PartialEq)]
pub struct QamGrid {
    pub qam: Qam,
    pub symbols: Vec<Vec<Complex64>>,
}

impl QamGrid {
    /// Fills `rows` subcarriers from `bits`, row-major (all symbols of the
    /// first subcarrier first).
    pub fn from_bits(qam: Qam, bits: &[u8], rows: usize) -> Result<Self> {
        let per_row = rows * qam.bits_per_symbol();
        if rows == 0 || bits.len() % per_row != 0 {
            return Err(Error::BitCount {
                bits: bits.len(),
                per_symbol: per_row.max(1),
            });
        }
        let flat = qam.modulate(bits)?;
        let cols = flat.len() / rows;
        let symbols = flat.chunks_exact(cols).map(|c| c.to_vec()).collect();
        Ok(Self { qam, symbols })
    }

    pub fn zeros(qam: Qam, rows: usize, cols: usize) -> Self {
        Self {
            qam,
            symbols: vec![vec![Complex64::new(0.0, 0.0); cols]; rows],
        }
    }

    pub fn rows(&self) -> usize {
        self.symbols.len()
    }

    pub fn cols(&self) -> usize {
        self.symbols.first().map_or(0, Vec::len)
    }

    pub fn to_bits(&self) -> Vec<u8> {
        self.symbols
            .iter()
            .flat_map(|row| self.qam.demodulate(row))
            .collect()
    }

    pub fn mean_power(&self) -> f64 {
        let n = (self.rows() * self.cols()).max(1) as f64;
        self.symbols.iter().flatten().map(|z| z.norm_sqr()).sum::<f64>() / n
    }
}

/// Real half-symbol streams `x'_k[n]`, one row per used subcarrier.
///
/// Row `i` belongs to absolute subcarrier `first_subcarrier + i`; time index
/// `n = 0` is even.
#[derive(Debug, Clone, PartialEq)]
pub struct RealSymbolStream {
    pub first_subcarrier: usize,
    pub values: Vec<Vec<f64>>,
}

impl RealSymbolStream {
    pub fn zeros(first_subcarrier: usize, rows: usize, len: usize) -> Self {
        Self {
            first_subcarrier,
            values: vec![vec![0.0; len]; rows],
        }
    }

    pub fn rows(&self) -> usize {
        self.values.len()
    }

    pub fn len(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Absolute subcarrier index of row `row`.
    pub fn subcarrier(&self, row: usize) -> usize {
        self.first_subcarrier + row
    }
}

/// OQAM staggering: doubles the rate and splits every symbol into its real
/// and imaginary half-symbol.
pub fn oqam_stagger(grid: &QamGrid, first_subcarrier: usize) -> RealSymbolStream {
    let values = grid
        .symbols
        .iter()
        .enumerate()
        .map(|(row, syms)| {
            let k = first_subcarrier + row;
            let mut out = Vec::with_capacity(2 * syms.len());
            for (m, d) in syms.iter().enumerate() {
                if is_real_slot(k, 2 * m as i64) {
                    out.extend([d.re, d.im]);
                } else {
                    out.extend([d.im, d.re]);
                }
            }
            out
        })
        .collect();
    RealSymbolStream {
        first_subcarrier,
        values,
    }
}

/// Inverse of [`oqam_stagger`].
pub fn oqam_destagger(stream: &RealSymbolStream, qam: Qam) -> Result<QamGrid> {
    if stream.len() % 2 != 0 {
        return Err(Error::OddStreamLength(stream.len()));
    }
    let symbols = stream
        .values
        .iter()
        .enumerate()
        .map(|(row, v)| {
            let k = stream.subcarrier(row);
            v.chunks_exact(2)
                .enumerate()
                .map(|(m, pair)| {
                    if is_real_slot(k, 2 * m as i64) {
                        Complex64::new(pair[0], pair[1])
                    } else {
                        Complex64::new(pair[1], pair[0])
                    }
                })
                .collect()
        })
        .collect();
    Ok(QamGrid { qam, symbols })
}

/// Applies `J_{k,n}` to a window `[x'[n], x'[n-1], ...]`: element `i` is
/// multiplied by `1` when `k + n - i` is odd and by `j` otherwise.
pub fn apply_phase(segment: &[f64], k: usize, n: i64) -> Vec<Complex64> {
    segment
        .iter()
        .enumerate()
        .map(|(i, &x)| slot_phase(k, n - i as i64) * x)
        .collect()
}

/// Inverse of [`apply_phase`]: multiplies by the conjugate phase and keeps the
/// real part.
pub fn remove_phase(segment: &[Complex64], k: usize, n: i64) -> Vec<f64> {
    segment
        .iter()
        .enumerate()
        .map(|(i, &z)| (slot_phase(k, n - i as i64).conj() * z).re)
        .collect()
}

/// Hard decisions on a complex estimate grid.
pub fn slice(estimates: &[Vec<Complex64>], qam: Qam) -> QamGrid {
    QamGrid {
        qam,
        symbols: estimates
            .iter()
            .map(|row| row.iter().map(|&z| qam.slice(z)).collect())
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn qam16() -> Qam {
        Qam::new(16).unwrap()
    }

    #[test]
    fn zero_bits_map_to_most_negative_corner() {
        let s = qam16().modulate(&[0, 0, 0, 0]).unwrap();
        let a = 3.0 / 10f64.sqrt();
        assert!((s[0] - Complex64::new(-a, -a)).norm() < 1e-15);
    }

    #[test]
    fn rejects_bad_order_and_bit_count() {
        assert!(matches!(Qam::new(8), Err(Error::UnsupportedOrder(8))));
        assert!(matches!(Qam::new(32), Err(Error::UnsupportedOrder(32))));
        assert!(matches!(
            qam16().modulate(&[0, 1, 1]),
            Err(Error::BitCount { .. })
        ));
    }

    #[test]
    fn neighbouring_levels_differ_in_one_bit() {
        for order in [4, 16, 64] {
            let q = Qam::new(order).unwrap();
            let mut prev: Option<Vec<u8>> = None;
            for i in 0..q.side() {
                let mut bits = Vec::new();
                q.axis_to_bits(i, &mut bits);
                if let Some(p) = prev {
                    let d = p.iter().zip(&bits).filter(|(a, b)| a != b).count();
                    assert_eq!(d, 1);
                }
                prev = Some(bits);
            }
        }
    }

    #[test]
    fn empirical_power_is_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bits: Vec<u8> = (0..1_000_000).map(|_| rng.random_range(0..2)).collect();
        let s = qam16().modulate(&bits).unwrap();
        let p = s.iter().map(|z| z.norm_sqr()).sum::<f64>() / s.len() as f64;
        assert!((p - 1.0).abs() < 0.01, "power {p}");
        let half = s.iter().map(|z| z.re * z.re).sum::<f64>() / s.len() as f64;
        assert!((half - qam16().half_symbol_variance()).abs() < 0.005);
    }

    #[test]
    fn tau_for_16qam() {
        assert!((qam16().modulo_constant() - 8.0 / 10f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn slicing_and_ties() {
        let q = qam16();
        for &l in &q.levels() {
            assert_eq!(q.slice_axis(l), l);
            assert_eq!(q.slice_axis(l + 1e-6), l);
        }
        let lv = q.levels();
        // gray codes per level index: 00, 01, 11, 10
        assert_eq!(q.slice_axis(0.5 * (lv[0] + lv[1])), lv[0]);
        assert_eq!(q.slice_axis(0.5 * (lv[1] + lv[2])), lv[1]);
        assert_eq!(q.slice_axis(0.5 * (lv[2] + lv[3])), lv[3]);
        assert_eq!(q.slice_axis(100.0), lv[3]);
        assert_eq!(q.slice_axis(-100.0), lv[0]);
    }

    #[test]
    fn stagger_places_real_part_in_alpha_slot() {
        let q = qam16();
        let grid = QamGrid {
            qam: q,
            symbols: vec![vec![Complex64::new(3.0, 1.0)]],
        };
        // k = 1, n = 0: k + n odd
        let s = oqam_stagger(&grid, 1);
        assert_eq!(s.values[0], vec![3.0, 1.0]);
        // k = 2, n = 0: even, so beta comes first
        let s = oqam_stagger(&grid, 2);
        assert_eq!(s.values[0], vec![1.0, 3.0]);
        let back = oqam_destagger(&s, q).unwrap();
        assert_eq!(back, grid);
    }

    #[test]
    fn zero_grid_round_trip() {
        let g = QamGrid::zeros(qam16(), 3, 5);
        let s = oqam_stagger(&g, 7);
        assert!(s.values.iter().flatten().all(|&v| v == 0.0));
        assert_eq!(oqam_destagger(&s, qam16()).unwrap(), g);
    }

    #[test]
    fn destagger_rejects_odd_length() {
        let s = RealSymbolStream {
            first_subcarrier: 0,
            values: vec![vec![0.0; 3]],
        };
        assert!(matches!(
            oqam_destagger(&s, qam16()),
            Err(Error::OddStreamLength(3))
        ));
    }

    #[test]
    fn phase_patterns() {
        let odd = apply_phase(&[2.0, 5.0], 1, 0);
        assert_eq!(odd, vec![Complex64::new(2.0, 0.0), Complex64::new(0.0, 5.0)]);
        let even = apply_phase(&[2.0, 5.0], 1, 1);
        assert_eq!(even, vec![Complex64::new(0.0, 2.0), Complex64::new(5.0, 0.0)]);
    }

    #[test]
    fn stream_power_matches_half_symbol_variance() {
        let q = qam16();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bits: Vec<u8> = (0..1_000_000).map(|_| rng.random_range(0..2)).collect();
        let g = QamGrid::from_bits(q, &bits, 10).unwrap();
        let s = oqam_stagger(&g, 0);
        let n = (s.rows() * s.len()) as f64;
        let p = s.values.iter().flatten().map(|v| v * v).sum::<f64>() / n;
        assert!((p - 0.5).abs() < 0.005, "{p}");
    }

    proptest! {
        #[test]
        fn bits_round_trip(order in prop::sample::select(vec![4usize, 16, 64]),
                           seed in any::<u64>(), nsym in 1usize..40) {
            let q = Qam::new(order).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bits: Vec<u8> = (0..nsym * q.bits_per_symbol()).map(|_| rng.random_range(0..2)).collect();
            prop_assert_eq!(q.demodulate(&q.modulate(&bits).unwrap()), bits);
        }

        #[test]
        fn stagger_round_trip(first in 0usize..5, rows in 1usize..4, cols in 1usize..6, seed in any::<u64>()) {
            let q = qam16();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bits: Vec<u8> = (0..rows * cols * 4).map(|_| rng.random_range(0..2)).collect();
            let g = QamGrid::from_bits(q, &bits, rows).unwrap();
            let s = oqam_stagger(&g, first);
            for (row, v) in s.values.iter().enumerate() {
                let k = first + row;
                for (n, &x) in v.iter().enumerate() {
                    let d = g.symbols[row][n / 2];
                    let expect = if is_real_slot(k, n as i64) { d.re } else { d.im };
                    prop_assert_eq!(x, expect);
                }
            }
            prop_assert_eq!(oqam_destagger(&s, q).unwrap(), g);
        }

        #[test]
        fn phase_is_norm_preserving_bijection(v in prop::collection::vec(-10.0f64..10.0, 1..12),
                                               k in 0usize..64, n in -20i64..20) {
            let z = apply_phase(&v, k, n);
            let a: f64 = v.iter().map(|x| x * x).sum();
            let b: f64 = z.iter().map(|x| x.norm_sqr()).sum();
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
            prop_assert_eq!(remove_phase(&z, k, n), v);
        }
    }
}
