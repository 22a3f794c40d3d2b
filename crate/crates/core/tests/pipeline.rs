use sipml::estimation::{objective_s, step2_joint, Criterion};
use sipml::inference::{link_band_points, LinkBand};
use sipml::simulation::{generate_dataset, Heterogeneity};
use sipml::{bandwidth_diagnostics, fit, link_band, sandwich_from_fit, Dataset, Error, Family, FitConfig, IndexParam, SimConfig};

fn table1(n: usize, seed: u64) -> Dataset {
    generate_dataset(&SimConfig::table1(n, 1, seed), 0).unwrap()
}

fn quartic(u: f64) -> f64 {
    if u.abs() < 1.0 {
        15.0 / 16.0 * (1.0 - u * u).powi(2)
    } else {
        0.0
    }
}

#[test]
fn objective_matches_direct_sum() {
    let rows: Vec<Vec<f64>> = (0..10)
        .map(|i| vec![(i as f64 * 0.37).sin() * 2.0, (i as f64 * 1.3).cos()])
        .collect();
    let y = vec![1.0, 0.0, 3.0, 2.0, 5.0, 1.0, 0.0, 4.0, 2.0, 1.0];
    let data = Dataset::from_rows(y.clone(), &rows).unwrap();
    let theta = IndexParam::from_free(vec![0.4]);
    let t: Vec<f64> = rows.iter().map(|r| r[0] + 0.4 * r[1]).collect();
    let h = 0.5;
    let mut total = 0.0;
    for i in 0..10 {
        let (mut kw, mut yw) = (0.0, 0.0);
        for j in 0..10 {
            if j != i {
                let w = quartic((t[i] - t[j]) / h);
                kw += w;
                yw += w * y[j];
            }
        }
        if kw > 0.0 {
            let r = (yw / kw).max(1e-8);
            total += -r + y[i] * r.ln();
        }
    }
    let crit = Criterion::Lefn {
        family: Family::Poisson,
        alpha: 0.0,
    };
    let got = objective_s(&data, &theta, h, &crit, &[true; 10]).unwrap();
    assert!((got.value - total / 10.0).abs() < 1e-12, "{} vs {}", got.value, total / 10.0);
}

#[test]
fn fit_on_table1_fixture() {
    let data = table1(300, 7);
    let mut cfg = FitConfig::new(Family::NegBin);
    cfg.seed = 7;
    let f = fit(&data, &cfg).unwrap();
    let th2 = f.theta_hat.free()[0];
    assert!((2.0..=4.2).contains(&th2), "{th2}");
    assert!(f.h_hat >= f.domain.h_lo && f.h_hat <= f.domain.h_hi);
    assert!(f.theta_hat.distance(&f.theta_step1) <= f.domain.d_n + 1e-12);
    let again = objective_s(&data, &f.theta_hat, f.h_hat, &f.criterion(), &f.trim_mask).unwrap();
    assert!((again.value - f.objective).abs() <= 1e-12);
    // never worse than the Step 1 direction at any grid bandwidth
    for h in f.domain.grid() {
        let v = objective_s(&data, &f.theta_step1, h, &f.criterion(), &f.trim_mask).unwrap();
        assert!(f.objective >= v.value - 1e-12);
    }
    assert_eq!(fit(&data, &cfg).unwrap(), f);

    let v = sandwich_from_fit(&data, &f).unwrap();
    assert_eq!(v.std_errors.len(), 2);
    assert!(v.std_errors.iter().all(|s| s.is_finite() && *s > 0.0));
    assert!(v.bound_k.is_some());
    let diag = bandwidth_diagnostics(&data, &f).unwrap();
    assert!(diag.informative);
}

#[test]
fn larger_trim_threshold_shrinks_the_mask() {
    let data = table1(200, 3);
    let mut lo = FitConfig::new(Family::Poisson);
    lo.trim_c = Some(0.005);
    lo.h_grid_size = 3;
    let mut hi = lo.clone();
    hi.trim_c = Some(0.05);
    let a = fit(&data, &lo).unwrap();
    let b = fit(&data, &hi).unwrap();
    assert!(a.trim_mask.iter().zip(&b.trim_mask).all(|(x, y)| *x || !*y));
    assert!(b.trimmed_count() >= a.trimmed_count());
}

#[test]
fn collapsed_window_in_fit() {
    let data = table1(150, 4);
    let mut cfg = FitConfig::new(Family::NegBin);
    cfg.h_lo = Some(0.8);
    cfg.h_hi = Some(0.8);
    let f = fit(&data, &cfg).unwrap();
    assert_eq!(f.h_hat, 0.8);
}

#[test]
fn pure_noise_is_flagged_flat() {
    let config = SimConfig {
        theta0: vec![1.0, 0.0],
        link_offset: 3.0,
        heterogeneity: Heterogeneity::None,
        ..SimConfig::table1(200, 1, 8)
    };
    let gen = generate_dataset(&config, 0).unwrap();
    // responses drawn independently of the covariates
    let rows: Vec<Vec<f64>> = gen.rows().map(|z| z.to_vec()).collect();
    let mut shuffled = gen.y().to_vec();
    shuffled.sort_by(f64::total_cmp);
    let y: Vec<f64> = (0..shuffled.len()).map(|i| shuffled[(i * 83) % shuffled.len()]).collect();
    let data = Dataset::from_rows(y, &rows).unwrap();
    let theta = IndexParam::from_free(vec![0.0]);
    let domain = sipml::SearchDomain {
        h_lo: 0.6,
        h_hi: 1.2,
        d_n: 0.2,
        h_grid_size: 4,
    };
    let crit = Criterion::Lefn {
        family: Family::Poisson,
        alpha: 0.0,
    };
    let out = step2_joint(&data, &theta, &crit, &domain, &vec![true; data.n()]).unwrap();
    assert!(out.theta.distance(&theta) <= 0.2 + 1e-12);
    assert!(out.flat_surface);
    assert!(!out.converged);
}

#[test]
fn link_band_for_constant_response() {
    let rows: Vec<Vec<f64>> = (0..400)
        .map(|i| vec![i as f64 / 100.0 - 2.0, ((i * 7) % 13) as f64 / 13.0])
        .collect();
    let data = Dataset::from_rows(vec![3.0; 400], &rows).unwrap();
    let mut cfg = FitConfig::new(Family::NegBin);
    cfg.h_grid_size = 3;
    cfg.step1_start = Some(vec![0.0]);
    cfg.rho = 0.5;
    let f = fit(&data, &cfg).unwrap();
    let band: LinkBand = link_band(&data, &f, &[-0.5, 0.0, 0.5], 0.05).unwrap();
    for p in &band.points {
        assert!((p.r_hat - 3.0).abs() < 1e-12);
        assert!(p.bias.abs() < 1e-8);
        assert!(p.half_width > 0.0);
    }
    let far = link_band_points(&data, &f, &[1e3], 0.05).unwrap();
    assert!(matches!(far[0], Err(Error::OutsideSupport(_))));
    assert!(link_band(&data, &f, &[0.0, 1e3], 0.05).is_err());
}

#[test]
fn band_width_shrinks_with_sample_size() {
    let make = |n: usize| {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| vec![4.0 * (i as f64 + 0.5) / n as f64 - 2.0, 0.0])
            .collect();
        let y = (0..n).map(|i| 1.0 + (i % 3) as f64).collect();
        Dataset::from_rows(y, &rows).unwrap()
    };
    let small = make(500);
    let large = make(1000);
    let mut cfg = FitConfig::new(Family::NegBin);
    cfg.step1_start = Some(vec![0.0]);
    cfg.h_lo = Some(0.5);
    cfg.h_hi = Some(0.5);
    cfg.d_n = Some(0.0);
    cfg.rho = 0.3;
    let mut a = fit(&small, &cfg).unwrap();
    let mut b = fit(&large, &cfg).unwrap();
    a.alpha_tilde.alpha = 0.3;
    b.alpha_tilde.alpha = 0.3;
    let wa = link_band(&small, &a, &[0.0], 0.05).unwrap().points[0].half_width;
    let wb = link_band(&large, &b, &[0.0], 0.05).unwrap().points[0].half_width;
    let ratio = wa / wb;
    assert!((ratio / 2f64.sqrt() - 1.0).abs() < 0.02, "{ratio}");
}

#[test]
fn linear_link_is_not_informative() {
    let rows: Vec<Vec<f64>> = (0..300)
        .map(|i| vec![3.0 * (i as f64 + 0.5) / 300.0, ((i * 11) % 17) as f64 / 17.0])
        .collect();
    let y: Vec<f64> = rows.iter().map(|r| 2.0 + r[0]).collect();
    let data = Dataset::from_rows(y, &rows).unwrap();
    let mut cfg = FitConfig::new(Family::GaussianGls);
    cfg.step1_start = Some(vec![0.0]);
    cfg.d_n = Some(0.0);
    cfg.h_grid_size = 2;
    let mut f = fit(&data, &cfg).unwrap();
    // evaluate away from the design edges, where the density slope vanishes
    f.h_hat = 0.2;
    f.theta_hat = IndexParam::from_free(vec![0.0]);
    let t = data.index_values(&f.theta_hat);
    f.trim_mask = t.iter().map(|&v| v > 0.5 && v < 2.5).collect();
    let diag = bandwidth_diagnostics(&data, &f).unwrap();
    assert_eq!(diag.c1, 0.0);
    assert!(diag.c2 > 0.0);
    assert!(!diag.informative);
    assert!(diag.h_opt.is_none());
}
