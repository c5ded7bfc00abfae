//! Configuration, channel statistics, STAR-RIS coefficients and sampling.

mod config;
mod gain;
mod link;
mod realization;
mod scenario;
mod stats;
mod theta;

pub use config::{coupled_count, regime_of, Regime, SystemConfig};
pub use gain::{
    expected_channel_energy, expected_direct_gain, expected_panel_gain, normalize_direct_gain,
};
pub use link::Link;
pub use realization::{check_theta, sample_realization, sample_with, ChannelRealization};
pub use scenario::{generate_stats, upa_shape, upa_steering, ScenarioParams};
pub use stats::{augment_rows, ChannelStats};
pub use theta::{ThetaState, FEASIBILITY_TOL};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{adj, complex_gaussian, eye, fro, trace, zeros, CMat};
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_stats(seed: u64) -> (SystemConfig, ChannelStats, ThetaState) {
        let cfg = SystemConfig::new(4, [3, 3], vec![4, 2]);
        let stats = generate_stats(&cfg, &ScenarioParams::default(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let theta = ThetaState::random(cfg.panels.clone(), &mut rng);
        (cfg, stats, theta)
    }

    fn random_psd(n: usize, seed: u64) -> CMat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = complex_gaussian(n, n, 1.0, &mut rng);
        a.dot(&adj(&a))
    }

    #[test]
    fn zero_profiles_give_deterministic_channels() {
        let (_, mut stats, theta) = small_stats(1);
        for l in stats
            .bs_ris
            .iter_mut()
            .chain(stats.direct.iter_mut())
            .chain(stats.ris_user.iter_mut().flatten())
        {
            l.profile.fill(0.0);
        }
        let a = sample_realization(&stats, &theta, 5).unwrap();
        assert_eq!(a.bs_ris[0], stats.bs_ris[0].los);
        assert_eq!(a.direct[1], stats.direct[1].los);
        let b = sample_realization(&stats, &theta, 6).unwrap();
        assert_eq!(a.h, b.h);
    }

    #[test]
    fn no_panels_leaves_direct_link() {
        let (_, stats, theta) = small_stats(2);
        let stats = stats.truncated(0);
        let theta = theta.truncated(0);
        let r = sample_realization(&stats, &theta, 3).unwrap();
        assert_eq!(r.h[0], r.direct[0]);
        assert_eq!(r.h[1], r.direct[1]);
    }

    #[test]
    fn realization_is_reproducible_and_consistent() {
        let (_, stats, theta) = small_stats(3);
        let a = sample_realization(&stats, &theta, 17).unwrap();
        let b = sample_realization(&stats, &theta, 17).unwrap();
        assert_eq!(a, b);
        assert!(a.assembly_defect(&theta) < 1e-12);
    }

    #[test]
    fn mismatched_theta_is_rejected() {
        let (_, stats, _) = small_stats(4);
        let theta = ThetaState::uniform_split(vec![4, 3]);
        assert!(sample_realization(&stats, &theta, 0).is_err());
    }

    #[test]
    fn operator_trivial_cases() {
        let (_, mut stats, _) = small_stats(5);
        let r = &mut stats.ris_user[0][0];
        r.profile = Array2::ones((3, 4));
        r.left = eye(3);
        r.right = eye(4);
        let out = stats.eta(1, 0, &eye(3)).unwrap();
        assert!(fro(&(out - eye(4).mapv(|v| v * 0.75))) < 1e-14);
        assert!(fro(&stats.eta(1, 0, &zeros(3, 3)).unwrap()) == 0.0);
        let f = &mut stats.bs_ris[1];
        f.profile = Array2::ones((2, 4));
        f.left = eye(2);
        f.right = eye(4);
        let out = stats.zeta(2, &eye(2)).unwrap();
        assert!(fro(&(out - eye(4).mapv(|v| v * 0.5))) < 1e-14);
        assert!(fro(&stats.zeta_tilde(2, &zeros(4, 4)).unwrap()) == 0.0);
    }

    #[test]
    fn operators_reject_non_hermitian_input() {
        let (_, stats, _) = small_stats(6);
        let mut c = eye(3);
        c[[0, 1]] = crate::linalg::C64::new(1.0, 0.0);
        assert!(matches!(
            stats.eta(0, 0, &c),
            Err(crate::Error::Contract(_))
        ));
    }

    #[test]
    fn zeta_matches_sample_average() {
        let cfg = SystemConfig::new(4, [3, 3], vec![3]);
        let stats = generate_stats(&cfg, &ScenarioParams::default(), 8).unwrap();
        let d = random_psd(3, 9);
        let f = &stats.bs_ris[0];
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 100_000;
        let mut acc = zeros(4, 4);
        for _ in 0..n {
            let w = f.sample_scatter(&mut rng);
            acc += &adj(&w).dot(&d).dot(&w);
        }
        acc.mapv_inplace(|v| v / n as f64);
        let exact = stats.zeta(1, &d).unwrap();
        assert!(fro(&(&acc - &exact)) / fro(&exact) < 0.01);
    }

    #[test]
    fn normalization_equalizes_gains() {
        let (_, stats, theta) = small_stats(11);
        let out = normalize_direct_gain(&stats, &theta).unwrap();
        for i in 0..2 {
            let target = (0..2)
                .map(|k| expected_panel_gain(&out, &theta, k, i))
                .sum::<f64>()
                / 2.0;
            assert!((expected_direct_gain(&out, i) - target).abs() < 1e-10 * target);
        }
        let again = normalize_direct_gain(&out, &theta).unwrap();
        for i in 0..2 {
            assert!(fro(&(&again.direct[i].los - &out.direct[i].los)) < 1e-12);
        }
    }

    #[test]
    fn normalization_scales_amplitude_by_square_root() {
        let (_, stats, theta) = small_stats(12);
        let base = normalize_direct_gain(&stats, &theta).unwrap();
        let mut weak = base.clone();
        for d in &mut weak.direct {
            d.scale_amplitude(0.5);
        }
        let out = normalize_direct_gain(&weak, &theta).unwrap();
        for i in 0..2 {
            let ratio = out.direct[i].los[[0, 0]] / weak.direct[i].los[[0, 0]];
            assert!((ratio.re - 2.0).abs() < 1e-10 && ratio.im.abs() < 1e-10);
        }
    }

    #[test]
    fn normalization_without_panels_is_degenerate() {
        let (_, stats, theta) = small_stats(13);
        let r = normalize_direct_gain(&stats.truncated(0), &theta.truncated(0));
        assert!(matches!(r, Err(crate::Error::Degenerate(_))));
    }

    #[test]
    fn expected_energy_matches_samples() {
        let (_, stats, theta) = small_stats(14);
        let n = 20_000;
        let mut acc = [0.0; 2];
        for s in 0..n {
            let r = sample_realization(&stats, &theta, s).unwrap();
            for i in 0..2 {
                acc[i] += trace(&r.h[i].dot(&adj(&r.h[i]))).re;
            }
        }
        for i in 0..2 {
            let e = expected_channel_energy(&stats, &theta, i);
            assert!((acc[i] / n as f64 - e).abs() / e < 0.02, "user {i}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn operators_preserve_positivity(seed in any::<u64>()) {
            let (_, stats, _) = small_stats(seed % 1000);
            let c = random_psd(3, seed);
            for out in [stats.eta(0, 1, &c).unwrap(), stats.eta(2, 0, &c).unwrap()] {
                prop_assert!(crate::linalg::hermitian_defect(&out) < 1e-12);
                let ev = ndarray_linalg::EigValsh::eigvalsh(&out, ndarray_linalg::UPLO::Lower).unwrap();
                prop_assert!(ev.iter().all(|&x| x > -1e-10));
            }
        }

        #[test]
        fn adjoint_pairing_holds(seed in any::<u64>()) {
            let (_, stats, _) = small_stats(seed % 1000);
            let c = random_psd(3, seed);
            let d = random_psd(4, seed ^ 0x55);
            let lhs = crate::linalg::trace_prod(&stats.eta_tilde(1, 1, &d).unwrap(), &c);
            let rhs = crate::linalg::trace_prod(&d, &stats.eta(1, 1, &c).unwrap());
            prop_assert!((lhs - rhs).norm() < 1e-10 * lhs.norm().max(1.0));
            let e = random_psd(4, seed ^ 0xaa);
            let f = random_psd(4, seed ^ 0x33);
            let lhs = crate::linalg::trace_prod(&stats.zeta_tilde(1, &e).unwrap(), &f);
            let rhs = crate::linalg::trace_prod(&e, &stats.zeta(1, &f).unwrap());
            prop_assert!((lhs - rhs).norm() < 1e-10 * lhs.norm().max(1.0));
        }
    }
}
