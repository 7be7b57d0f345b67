use super::*;
use crate::bags::Bag;
use crate::synth::{generate_synthetic, SyntheticConfig};

fn bag(id: u32, label: Label, pixels: Vec<usize>) -> Bag {
    Bag { id, label, pixels }
}

fn params(beta: f64, ls: f64, lm: f64) -> ResolvedParams {
    ResolvedParams {
        beta,
        lambda_sparse: ls,
        lambda_mean: lm,
    }
}

#[test]
fn posterior_weight_matches_formula() {
    let w: f64 = posterior_weight(0.01, 0.5, 10.0);
    let a = (-0.1f64).exp();
    let b = (-5.0f64).exp();
    assert!((w - a / (a + b)).abs() < 1e-15);
    assert!((w - 0.99262).abs() < 2e-5);
    assert_eq!(posterior_weight(0.3f64, 0.3, 7.0), 0.5);
    // Extreme gaps stay finite.
    assert_eq!(posterior_weight(0.0f64, 1e6, 1e6), 1.0);
    assert_eq!(posterior_weight(1e6f64, 0.0, 1e6), 0.0);
}

fn small_scene(seed: u64) -> (HsiCube<f64>, BagSet) {
    let cfg = SyntheticConfig::new(20, 20, 12, 3).target_fraction(0.05);
    let mut rng = Rng::new(seed);
    let (cube, _, mask) = generate_synthetic::<f64>(&cfg, &mut rng).unwrap();
    (cube, mask.to_bags().unwrap())
}

#[test]
fn negative_pixels_get_zero_weight() {
    let (cube, bags) = small_scene(3);
    let res = run_efumi(&cube, &bags, &EfumiConfig::default(), None).unwrap();
    for i in bags.pixels_with(Label::Negative) {
        assert_eq!(res.zweights[i], 0.0);
    }
    let z = e_step(&cube, &bags, &res.endmembers, &res.params).unwrap();
    for i in bags.pixels_with(Label::Negative) {
        assert_eq!(z[i], 0.0);
    }
    assert!(z.iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn cost_trace_descends_and_columns_stay_unit() {
    let (cube, bags) = small_scene(11);
    let res = run_efumi(&cube, &bags, &EfumiConfig::default(), None).unwrap();
    for w in res.cost_trace.windows(2) {
        assert!(w[1] <= w[0] + 1e-8, "{} -> {}", w[0], w[1]);
    }
    for c in res.endmembers.columns() {
        let n: f64 = c.iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-9);
    }
    assert!(res.proportions.simplex_violation() < 1e-9);
}

#[test]
fn same_seed_is_bit_identical() {
    let (cube, bags) = small_scene(5);
    let cfg = EfumiConfig {
        seed: 9,
        ..EfumiConfig::default()
    };
    let a = run_efumi(&cube, &bags, &cfg, None).unwrap();
    let b = run_efumi(&cube, &bags, &cfg, None).unwrap();
    assert_eq!(a, b);
}

#[test]
fn warm_start_resumes_from_result() {
    let cfg = SyntheticConfig::new(20, 20, 12, 3).target_fraction(0.05).noise(0.01);
    let (cube, _, mask) = generate_synthetic::<f64>(&cfg, &mut Rng::new(7)).unwrap();
    let bags = mask.to_bags().unwrap();
    let base = EfumiConfig {
        max_iters: 5000,
        ..EfumiConfig::default()
    };
    let res = run_efumi(&cube, &bags, &base, None).unwrap();
    assert!(res.converged);
    let again = run_efumi(&cube, &bags, &res.config, Some(&res.warm_start())).unwrap();
    assert!(again.iterations <= 2);
    assert!(again.converged);
    let end = res.cost_trace[res.cost_trace.len() - 1];
    assert!((again.cost_trace[0] - end).abs() <= 1e-12 * end.abs());
}

#[test]
fn single_pixel_fit_is_normalized_pixel() {
    let x = vec![3.0f64, 4.0, 0.0];
    let cube = HsiCube::from_pixels(1, 1, &[x.clone()]).unwrap();
    let bags = BagSet::new(vec![bag(0, Label::Positive, vec![0])], 1).unwrap();
    let e = EndmemberSet::normalized(vec![vec![1.0, 1.0, 1.0]]).unwrap();
    let (e2, p) = m_step(&cube, &bags, &e, &[1.0], &params(1.0, 0.0, 0.0), 0.0).unwrap();
    let t = e2.target();
    assert!((t[0] - 0.6).abs() < 1e-12 && (t[1] - 0.8).abs() < 1e-12 && t[2].abs() < 1e-12);
    assert_eq!(p.row(0), &[1.0]);
}

#[test]
fn huge_mean_weight_pulls_columns_to_mean() {
    let (cube, bags) = small_scene(2);
    let res = run_efumi(&cube, &bags, &EfumiConfig::default(), None).unwrap();
    let z = res.zweights.clone();
    let (e2, _) = m_step(&cube, &bags, &res.endmembers, &z, &params(res.params.beta, 0.0, 1e9), 0.0).unwrap();
    let mu = cube.global_mean(None).unwrap();
    let n = mu.iter().map(|v| v * v).sum::<f64>().sqrt();
    for c in e2.columns() {
        for (a, b) in c.iter().zip(&mu) {
            assert!((a - b / n).abs() < 1e-6);
        }
    }
}

#[test]
fn m_step_does_not_raise_cost() {
    let (cube, bags) = small_scene(4);
    let mut rng = Rng::new(1);
    let (e, _) = default_init(&cube, &bags, 3, &mut rng).unwrap();
    let p = params(50.0, 0.0, 0.0);
    let z: Vec<f64> = bags
        .label_map(cube.n_pixels())
        .iter()
        .map(|l| if *l == Some(Label::Positive) { 1.0 } else { 0.0 })
        .collect();
    let cost_of = |e: &EndmemberSet<f64>| {
        let probe = Problem::new(&cube, &bags).unwrap().with_params(&p);
        let s = probe.snapshot(e.columns().to_vec(), None).unwrap();
        let zp: Vec<f64> = probe.pos.iter().map(|&i| z[i]).collect();
        probe.free_energy(&s, &zp)
    };
    let (e2, _) = m_step(&cube, &bags, &e, &z, &p, 0.0).unwrap();
    assert!(cost_of(&e2) <= cost_of(&e) + 1e-12);
}

#[test]
fn cost_is_zero_on_exact_reconstruction() {
    let e = EndmemberSet::normalized(vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
    let pix = vec![vec![0.5, 0.5, 0.0], vec![0.0, 0.2, 0.8], vec![0.0, 1.0, 0.0]];
    let cube = HsiCube::from_pixels(1, 3, &pix).unwrap();
    let bags = BagSet::new(
        vec![bag(0, Label::Positive, vec![0]), bag(1, Label::Negative, vec![1, 2])],
        3,
    )
    .unwrap();
    let p = ProportionMatrix::from_rows(&[vec![0.5, 0.5, 0.0], vec![0.0, 0.2, 0.8], vec![0.0, 1.0, 0.0]]).unwrap();
    let c: f64 = cost(&cube, &bags, &e, &p, &[1.0, 0.0, 0.0], &params(1.0, 0.0, 0.0)).unwrap();
    assert!(c.abs() < 1e-15);

    let eps = 0.25;
    let c2 = cost(&cube, &bags, &e, &p, &[1.0, 0.0, 0.0], &params(1.0, eps, 0.0)).unwrap();
    // Background mass: 0.5 + 1.0 + 1.0.
    assert!((c2 - eps * 2.5).abs() < 1e-14);
}

#[test]
fn cost_matches_term_by_term_sum() {
    let e = EndmemberSet::normalized(vec![
        vec![0.9, 0.1, 0.3, 0.2],
        vec![0.1, 0.8, 0.2, 0.1],
        vec![0.2, 0.3, 0.9, 0.4],
    ])
    .unwrap();
    let pix = vec![
        vec![0.5, 0.4, 0.6, 0.3],
        vec![0.3, 0.5, 0.5, 0.2],
        vec![0.2, 0.7, 0.3, 0.1],
        vec![0.1, 0.4, 0.8, 0.3],
        vec![0.6, 0.2, 0.4, 0.3],
    ];
    let cube = HsiCube::from_pixels(1, 5, &pix).unwrap();
    let bags = BagSet::new(
        vec![bag(0, Label::Positive, vec![0, 4]), bag(1, Label::Negative, vec![1, 2, 3])],
        5,
    )
    .unwrap();
    let rows = vec![
        vec![0.4, 0.3, 0.3],
        vec![0.0, 0.5, 0.5],
        vec![0.0, 0.9, 0.1],
        vec![0.0, 0.2, 0.8],
        vec![0.7, 0.1, 0.2],
    ];
    let p = ProportionMatrix::from_rows(&rows).unwrap();
    let z = [0.8, 0.0, 0.0, 0.0, 0.3];
    let pr = params(4.0, 0.01, 0.02);
    let got = cost(&cube, &bags, &e, &p, &z, &pr).unwrap();

    let cols = e.columns();
    let recon = |r: &[f64]| -> Vec<f64> {
        (0..4).map(|d| (0..3).map(|j| cols[j][d] * r[j]).sum()).collect()
    };
    let err = |x: &[f64], r: &[f64]| -> f64 {
        x.iter().zip(recon(r)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() + 0.01 * (r[1] + r[2])
    };
    let mut want = 0.0;
    for i in [0usize, 4] {
        let bg = crate::unmix::FclsSolver::new(&cols[1..])
            .unwrap()
            .solve_from(&pix[i], Some(&[0.01, 0.01]), None)
            .unwrap();
        let absent = bg.residual + 0.01 * (bg.p[0] + bg.p[1]);
        let h = z[i] * z[i].ln() + (1.0 - z[i]) * (1.0 - z[i]).ln();
        want += z[i] * err(&pix[i], &rows[i]) + (1.0 - z[i]) * absent + h / 4.0;
    }
    for i in [1usize, 2, 3] {
        want += err(&pix[i], &rows[i]);
    }
    let mu: Vec<f64> = (0..4).map(|d| pix.iter().map(|x| x[d]).sum::<f64>() / 5.0).collect();
    for c in cols {
        want += 0.02 * c.iter().zip(&mu).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

#[test]
fn prune_rules() {
    let e = EndmemberSet::normalized(vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
    let p = ProportionMatrix::from_rows(&[vec![0.5, 0.5, 0.0], vec![0.2, 0.8, 0.0]]).unwrap();
    let (e2, p2) = prune(&e, &p, 1e-6).unwrap();
    assert_eq!(e2.n_background(), 1);
    assert_eq!(p2.n_cols(), 2);
    let (e3, p3) = prune(&e, &p, 0.0).unwrap();
    assert_eq!(e3, e);
    assert_eq!(p3, p);

    let p = ProportionMatrix::from_rows(&[vec![0.4, 0.6, 1e-9 as f64], vec![0.5, 0.5, 0.0]]).unwrap();
    let (e4, p4) = prune(&e, &p, 1e-6).unwrap();
    assert_eq!(e4.n_background(), 1);
    assert!(p4.simplex_violation() < 1e-12);
    assert!(prune(&e, &p, 1.0).is_err());
}

#[test]
fn prune_keeps_target_and_one_background() {
    let e = EndmemberSet::normalized(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
    let p = ProportionMatrix::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
    let (e2, _) = prune(&e, &p, 0.5).unwrap();
    assert_eq!(e2.n_columns(), 2);
    assert_eq!(e2.target(), e.target());
}

#[test]
fn config_validation() {
    assert!(EfumiConfig::default().validate().is_ok());
    let bad = EfumiConfig {
        prune_threshold: 1.0,
        ..EfumiConfig::default()
    };
    assert!(bad.validate().is_err());
    let bad = EfumiConfig {
        m_init: 0,
        ..EfumiConfig::default()
    };
    assert!(bad.validate().is_err());
    let js = serde_json::to_string(&EfumiConfig::default()).unwrap();
    let back: EfumiConfig = serde_json::from_str(&js).unwrap();
    assert_eq!(back, EfumiConfig::default());
    let partial: EfumiConfig = serde_json::from_str(r#"{"m_init":3}"#).unwrap();
    assert_eq!(partial.m_init, 3);
}

#[test]
fn requires_both_bag_labels() {
    let (cube, bags) = small_scene(1);
    let only_pos: Vec<Bag> = bags.bags().iter().filter(|b| b.label == Label::Positive).cloned().collect();
    let bs = BagSet::new(only_pos, cube.n_pixels()).unwrap();
    assert!(matches!(
        run_efumi(&cube, &bs, &EfumiConfig::default(), None),
        Err(Error::NoNegativeBag)
    ));
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(8))]

    // Scaling pixels and endmembers by c (with beta by 1/c²) scales the
    // regularizer-free cost by c² and leaves the posterior weights alone.
    #[test]
    fn cost_is_quadratically_homogeneous(seed in 0u64..1000, c in 0.1f64..10.0) {
        let (cube, bags) = small_scene(seed);
        let res = run_efumi(&cube, &bags, &EfumiConfig { max_iters: 10, ..EfumiConfig::default() }, None).unwrap();
        let p0 = params(res.params.beta, 0.0, 0.0);
        let pc = params(res.params.beta / (c * c), 0.0, 0.0);
        let scaled_cube = cube.map_values(|v| v * c);
        let scaled_e = EndmemberSet::unchecked(
            res.endmembers.columns().iter().map(|col| col.iter().map(|v| v * c).collect()).collect(),
        )
        .unwrap();
        let z = e_step(&cube, &bags, &res.endmembers, &p0).unwrap();
        let zc = e_step(&scaled_cube, &bags, &scaled_e, &pc).unwrap();
        for (a, b) in z.iter().zip(&zc) {
            proptest::prop_assert!((a - b).abs() < 1e-9);
        }
        let f = cost(&cube, &bags, &res.endmembers, &res.proportions, &z, &p0).unwrap();
        let fc = cost(&scaled_cube, &bags, &scaled_e, &res.proportions, &z, &pc).unwrap();
        proptest::prop_assert!((fc - c * c * f).abs() <= 1e-9 * (1.0 + (c * c * f).abs()));
    }
}
