use difflab_core::metrics::{js_pmf, kl_pmf_counts, w1_1d, w1_sliced_2d, Histogram};
use difflab_core::oracle::{kl_exact, leading_l, leading_l_exact, OracleSpec, TABLE_EPS_GRID};
use difflab_core::score_match::WeightScheme;
use difflab_core::{Binning, Gaussian1D, GaussianMixture, ScheduleParams, ScoreModel};
use proptest::prelude::*;

fn schedule() -> impl Strategy<Value = ScheduleParams> {
    (0.05f64..5.0, 0.0f64..25.0, 0.2f64..5.0).prop_map(|(b0, db, t)| ScheduleParams::new(b0, b0 + db, t).unwrap())
}

fn pmf(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, n).prop_filter_map("all zero", |w| {
        let s: f64 = w.iter().sum();
        (s > 0.0).then(|| w.iter().map(|v| v / s).collect())
    })
}

fn fd_check(m: &dyn ScoreModel, t: f64, x: &[f64]) -> Result<(), TestCaseError> {
    let mut s = vec![0.0; x.len()];
    m.score(t, x, &mut s);
    for j in 0..x.len() {
        let h = 1e-5 * (1.0 + x[j].abs());
        let (mut xp, mut xm) = (x.to_vec(), x.to_vec());
        xp[j] += h;
        xm[j] -= h;
        let fd = (m.log_density(t, &xp).unwrap() - m.log_density(t, &xm).unwrap()) / (2.0 * h);
        let scale = s[j].abs().max(1.0);
        prop_assert!((fd - s[j]).abs() <= 1e-5 * scale, "t={} x={:?} fd={} score={}", t, x, fd, s[j]);
    }
    Ok(())
}

proptest! {
    #[test]
    fn variance_is_preserved_and_monotone(p in schedule()) {
        let mut prev: Option<(f64, f64)> = None;
        for k in 0..100 {
            let t = p.t_end * k as f64 / 99.0;
            let (mu, w) = (p.mean_scale(t).unwrap(), p.varpi(t).unwrap());
            prop_assert!((mu * mu + w * w - 1.0).abs() <= 1e-12);
            if let Some((m0, w0)) = prev {
                // varpi saturates at 1 in floating point once the integrated beta is large
                prop_assert!(mu < m0 && (w > w0 || 1.0 - w < 1e-15), "t={}", t);
            }
            prev = Some((mu, w));
        }
    }

    #[test]
    fn gaussian_score_is_the_log_density_gradient(
        s0 in 0.1f64..3.0, t in 0.0f64..4.0, x in -5.0f64..5.0,
    ) {
        fd_check(&Gaussian1D::new(s0, 4.0).unwrap(), t, &[x])?;
    }

    #[test]
    fn mixture_score_is_the_log_density_gradient(
        p in schedule(), frac in 0.0f64..1.0, x in -4.0f64..4.0, y in -4.0f64..4.0,
    ) {
        let t = frac * p.t_end;
        fd_check(&GaussianMixture::two_mode_1d(p), t, &[x])?;
        fd_check(&GaussianMixture::four_mode_2d(p), t, &[x, y])?;
    }

    #[test]
    fn divergences_are_bounded(p in pmf(12), q in pmf(12)) {
        let js = js_pmf(&p, &q);
        prop_assert!((0.0..=std::f64::consts::LN_2).contains(&js));
        prop_assert!(js_pmf(&p, &p).abs() < 1e-15);
        let counts: Vec<u64> = q.iter().map(|v| (v * 1000.0).round() as u64).collect();
        prop_assert!(kl_pmf_counts(&p, &counts) >= 0.0);
    }

    #[test]
    fn kl_of_a_histogram_with_itself_is_zero(xs in prop::collection::vec(-3.0f64..3.0, 20..200)) {
        let b = Binning::from_reference(&xs, 1, 10).unwrap();
        let h = Histogram::from_samples(&b, &xs).unwrap();
        prop_assert!(kl_pmf_counts(&h.pmf(), &h.counts).abs() < 1e-12);
    }

    #[test]
    fn w1_is_a_metric(
        a in prop::collection::vec(-5.0f64..5.0, 1..60),
        b in prop::collection::vec(-5.0f64..5.0, 1..60),
        c in prop::collection::vec(-5.0f64..5.0, 1..60),
    ) {
        let (ab, bc, ac) = (w1_1d(&a, &b).unwrap(), w1_1d(&b, &c).unwrap(), w1_1d(&a, &c).unwrap());
        prop_assert!(ab >= 0.0 && w1_1d(&a, &a).unwrap() == 0.0);
        prop_assert!((ab - w1_1d(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(ac <= ab + bc + 1e-12);
    }

    #[test]
    fn sliced_w1_is_a_metric(
        a in prop::collection::vec(-5.0f64..5.0, 2..60),
        b in prop::collection::vec(-5.0f64..5.0, 2..60),
        c in prop::collection::vec(-5.0f64..5.0, 2..60),
    ) {
        let trim = |v: &Vec<f64>| v[..v.len() / 2 * 2].to_vec();
        let (a, b, c) = (trim(&a), trim(&b), trim(&c));
        let w = |x: &[f64], y: &[f64]| w1_sliced_2d(x, y, 32, 3).unwrap();
        prop_assert!(w(&a, &a) == 0.0);
        prop_assert!(w(&a, &c) <= w(&a, &b) + w(&b, &c) + 1e-12);
    }

    #[test]
    fn exact_score_gives_zero_kl(s0 in 0.1f64..3.0, hsq in 0.0f64..25.0, case in 1u8..=5) {
        let spec = OracleSpec::unit_case(s0, 2.0, hsq, case, 0.0).unwrap();
        prop_assert!(kl_exact(&spec).unwrap() < 1e-8);
    }

    #[test]
    fn kl_is_quadratic_in_small_epsilon(s0 in 0.2f64..2.0, hsq in 0.0f64..20.0, case in 1u8..=5) {
        let spec = OracleSpec::unit_case(s0, 2.0, hsq, case, 0.0).unwrap();
        let l = leading_l_exact(&spec).unwrap();
        prop_assume!(l > 1e-8);
        let eps = 1e-3;
        let ratio = kl_exact(&spec.with_epsilon(eps)).unwrap() / (eps * eps * l);
        prop_assert!((ratio - 1.0).abs() < 0.05, "ratio {}", ratio);
    }

    #[test]
    fn weight_ratios_are_monotone(p in schedule(), a in 0.001f64..1.0, b in 0.001f64..1.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assume!(hi - lo > 1e-3);
        prop_assume!(p.varpi(hi * p.t_end).unwrap() < 1.0 - 1e-9);
        let r = |s: WeightScheme, f: f64| {
            let t = f * p.t_end;
            s.at(&p, t).unwrap() / WeightScheme::Default.at(&p, t).unwrap()
        };
        let (n_lo, n_hi) = (r(WeightScheme::NoiseDriven, lo), r(WeightScheme::NoiseDriven, hi));
        prop_assert!(0.0 < n_lo && n_lo < n_hi && n_hi < 1.0);
        prop_assert!(r(WeightScheme::DataDriven, lo) > r(WeightScheme::DataDriven, hi));
    }
}

#[test]
fn exact_score_gives_zero_kl_on_the_reference_grid() {
    for s0 in [0.2, 0.5, 1.0, 2.0] {
        for hsq in [0.0, 1.0, 5.0, 20.0] {
            for case in 1..=5 {
                let spec = OracleSpec::unit_case(s0, 2.0, hsq, case, 0.0).unwrap();
                assert!(kl_exact(&spec).unwrap() < 1e-8, "s0={s0} hsq={hsq} case={case}");
            }
        }
    }
}

#[test]
fn error_sign_matters() {
    let spec = |case| OracleSpec::unit_case(0.2, 2.0, 20.0, case, 0.0).unwrap();
    // identical in the limit, split by the cubic term on a finite grid
    let exact = leading_l_exact(&spec(1)).unwrap();
    assert!((exact - leading_l_exact(&spec(2)).unwrap()).abs() < 1e-9 * exact);
    let fit = |case| leading_l(&spec(case), &TABLE_EPS_GRID).unwrap().value;
    assert!(fit(2) - fit(1) > 0.03);
}
