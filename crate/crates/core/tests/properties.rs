use fbmc_thp::config::{Design, Latency, Profile, SimConfig};
use fbmc_thp::oqam::{oqam_destagger, oqam_stagger, Qam, QamGrid};
use fbmc_thp::sim::Simulator;
use fbmc_thp::thp::{oqam_modulo, wrap, Duality, Tridiagonal};
use fbmc_thp::Error;
use num_complex::Complex64;
use proptest::prelude::*;

const TAU: f64 = 2.529_822_128_134_703_5;

proptest! {
    #[test]
    fn wrap_lands_in_range_and_is_idempotent(x in -1e6f64..1e6) {
        let w = wrap(x, TAU);
        prop_assert!((-TAU / 2.0..TAU / 2.0).contains(&w));
        prop_assert_eq!(wrap(w, TAU), w);
        // congruent to the input modulo tau
        let k = ((x - w) / TAU).round();
        prop_assert!((x - w - k * TAU).abs() <= 1e-9 * x.abs().max(1.0));
    }

    #[test]
    fn wrap_is_tau_periodic(x in -TAU / 2.0..TAU / 2.0, k in -50i32..50) {
        let shifted = x + f64::from(k) * TAU;
        prop_assert!((wrap(shifted, TAU) - x).abs() < 1e-12);
    }

    #[test]
    fn modulo_touches_only_the_active_component(
        re in -20.0f64..20.0, im in -20.0f64..20.0, l in 0usize..512, n in -1000i64..1000
    ) {
        let z = oqam_modulo(Complex64::new(re, im), l, n, TAU);
        if (l as i64 + n).rem_euclid(2) == 1 {
            prop_assert_eq!(z.im, im);
            prop_assert_eq!(z.re, wrap(re, TAU));
        } else {
            prop_assert_eq!(z.re, re);
            prop_assert_eq!(z.im, wrap(im, TAU));
        }
    }

    #[test]
    fn stagger_round_trip(
        order in prop::sample::select(vec![4usize, 16, 64]),
        rows in 1usize..12, cols in 1usize..20, first in 0usize..9, seed in any::<u64>()
    ) {
        let qam = Qam::new(order).unwrap();
        let mut s = seed;
        let bits: Vec<u8> = (0..rows * cols * qam.bits_per_symbol())
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 63) as u8
            })
            .collect();
        let grid = QamGrid::from_bits(qam, &bits, rows).unwrap();
        prop_assert_eq!(grid.to_bits(), bits);
        let stream = oqam_stagger(&grid, first);
        prop_assert_eq!(stream.len(), 2 * cols);
        let back = oqam_destagger(&stream, qam).unwrap();
        prop_assert_eq!(back.symbols, grid.symbols);
    }

    #[test]
    fn thomas_solver_matches_dense(
        n in 1usize..24,
        vals in prop::collection::vec(-1.0f64..1.0, 3 * 24 + 24)
    ) {
        // stored by diagonals, one slot per row; the corner slots are unused
        let lower: Vec<f64> = vals[..n].to_vec();
        let upper: Vec<f64> = vals[24..24 + n].to_vec();
        // diagonally dominant, hence non-singular and stable without pivoting
        let diag: Vec<f64> = (0..n).map(|i| 3.0 + vals[48 + i]).collect();
        let rhs: Vec<f64> = vals[72..72 + n].to_vec();
        let t = Tridiagonal { lower, diag, upper };
        let x = t.solve(&rhs).unwrap();
        let dense = t.to_dense().lu().solve(&nalgebra::DVector::from_vec(rhs)).unwrap();
        for (a, b) in x.iter().zip(dense.iter()) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn config_echo_round_trips(
        seed in any::<u64>(), b in 1usize..5000, ch in 1usize..300, nu in prop::option::of(0usize..20),
        lo in -5i32..10, hi in 10i32..40, flat in any::<bool>()
    ) {
        let cfg = SimConfig {
            seed,
            block_len: b,
            channels: ch,
            nu: nu.map_or(Latency::Auto, Latency::Fixed),
            ebn0_db: vec![f64::from(lo), f64::from(lo) + 0.25, f64::from(hi)],
            profile: if flat { Profile::Flat } else { Profile::BadUrban },
            designs: vec![Design::ThpSc, Design::DfeUl],
            ..SimConfig::default()
        };
        let text = cfg.echo().join("\n");
        prop_assert_eq!(SimConfig::parse(&text).unwrap(), cfg);
    }
}

fn duality_sim(seed: u64) -> Simulator {
    Simulator::new(SimConfig {
        m: 32,
        m_u: 24,
        l_f: 5,
        l_b: 3,
        l_lin: 6,
        sample_rate: 1.92e6,
        l_ch: 14,
        channels: 4,
        seed,
        ..SimConfig::default()
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Linear transforms always exist; a THP transform either preserves the
    /// MSE or reports that no positive scaling exists.
    #[test]
    fn duality_preserves_mse_on_random_channels(seed in any::<u64>(), ch in 0usize..4, ebn0 in 0.0f64..30.0) {
        let sim = duality_sim(seed);
        let ctx = sim.channel_context(ch).unwrap();
        let nv = sim.noise_variance(ebn0);
        for (dl_design, ul_design) in [
            (Design::ThpSum, Design::DfeUl),
            (Design::ThpSc, Design::DfeUl),
            (Design::LinearDlSum, Design::LinearUl),
            (Design::LinearDlSc, Design::LinearUl),
        ] {
            let ul = sim.design_ul(&ctx, ul_design, nv).unwrap();
            let dl = match sim.design_dl(&ctx, dl_design, nv) {
                Ok(dl) => dl,
                Err(Error::DualityInfeasible(_)) if !dl_design.is_linear() => continue,
                Err(e) => return Err(TestCaseError::fail(format!("{dl_design}: {e}"))),
            };
            let ul_sum: f64 = ul.filters.iter().map(|f| f.mse_analytic).sum();
            let dl_sum: f64 = dl.filters.iter().map(|f| f.mse_analytic).sum();
            prop_assert!((ul_sum - dl_sum).abs() < 1e-9, "{dl_design}: {ul_sum} vs {dl_sum}");
            if dl_design.duality() == Some(Duality::SubcarrierMse) {
                for (u, d) in ul.filters.iter().zip(&dl.filters) {
                    prop_assert!((u.mse_analytic - d.mse_analytic).abs() < 1e-9);
                    prop_assert!(d.gamma > 0.0);
                }
            }
        }
    }
}
