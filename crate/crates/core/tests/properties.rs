use efumi_core::efumi::run_efumi;
use efumi_core::influence::{doi, exact_influence_sweep, Restart};
use efumi_core::io::encode_cube;
use efumi_core::superpixel::region_metrics;
use efumi_core::synth::generate_synthetic;
use efumi_core::unmix::{fcls, objective, residuals, unmix_all};
use efumi_core::*;
use efumi_core::Rng;
use proptest::prelude::*;

fn rng_vec(rng: &mut Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.uniform_in(lo, hi)).collect()
}

fn columns(rng: &mut Rng, bands: usize, n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| rng_vec(rng, bands, 0.0, 1.0)).collect()
}

// Uniform draw from the simplex via normalized exponentials.
fn simplex_point(rng: &mut Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| -(1.0 - rng.uniform()).ln()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

fn small_scene(seed: u64, noise: f64) -> (Cube, BagSet) {
    let cfg = SyntheticConfig::new(20, 20, 8, 2).target_fraction(0.025).noise(noise);
    let (cube, _, mask) = generate_synthetic::<f64>(&cfg, &mut Rng::new(seed)).unwrap();
    let bags = mask.to_bags().unwrap();
    (cube, bags)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fcls_beats_random_simplex_points(seed in any::<u64>(), bands in 2usize..8, n in 1usize..5) {
        let mut rng = Rng::new(seed);
        let cols = columns(&mut rng, bands, n);
        let x = rng_vec(&mut rng, bands, -0.5, 1.5);
        let p = fcls(&x, &cols).unwrap();
        let best = objective(&x, &cols, &p, None);
        for _ in 0..10_000 {
            let q = simplex_point(&mut rng, n);
            prop_assert!(best <= objective(&x, &cols, &q, None) + 1e-10);
        }
    }

    #[test]
    fn fcls_commutes_with_column_permutation(seed in any::<u64>(), bands in 3usize..8, n in 2usize..5) {
        let mut rng = Rng::new(seed);
        let cols = columns(&mut rng, bands, n);
        let x = rng_vec(&mut rng, bands, 0.0, 1.0);
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let permuted: Vec<Vec<f64>> = order.iter().map(|&j| cols[j].clone()).collect();
        let p = fcls(&x, &cols).unwrap();
        let q = fcls(&x, &permuted).unwrap();
        let fp = objective(&x, &cols, &p, None);
        let fq = objective(&x, &permuted, &q, None);
        prop_assert!((fp - fq).abs() <= 1e-9 * (1.0 + fp));
        // Abundances agree whenever the columns are affinely independent.
        if n <= bands {
            for (k, &j) in order.iter().enumerate() {
                prop_assert!((q[k] - p[j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn appending_endmember_never_raises_residual(seed in any::<u64>(), n in 1usize..4) {
        let mut rng = Rng::new(seed);
        let bands = 6;
        let pixels: Vec<Vec<f64>> = (0..20).map(|_| rng_vec(&mut rng, bands, 0.0, 1.0)).collect();
        let cube = Cube::from_pixels(4, 5, &pixels).unwrap();
        let mut cols = columns(&mut rng, bands, n);
        let small = Endmembers::normalized(cols.clone()).unwrap();
        cols.push(rng_vec(&mut rng, bands, 0.0, 1.0));
        let big = Endmembers::normalized(cols).unwrap();
        let r_small = residuals(&cube, &small, &unmix_all(&cube, &small).unwrap()).unwrap();
        let r_big = residuals(&cube, &big, &unmix_all(&cube, &big).unwrap()).unwrap();
        for (a, b) in r_small.iter().zip(&r_big) {
            prop_assert!(*b <= *a + 1e-10);
        }
    }

    #[test]
    fn unmixed_rows_stay_on_simplex(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let pixels: Vec<Vec<f64>> = (0..30).map(|_| rng_vec(&mut rng, 5, -1.0, 2.0)).collect();
        let cube = Cube::from_pixels(5, 6, &pixels).unwrap();
        let e = Endmembers::normalized(columns(&mut rng, 5, 3)).unwrap();
        let p = unmix_all(&cube, &e).unwrap();
        prop_assert!(p.simplex_violation() <= 1e-12);
    }

    #[test]
    fn doi_is_scale_invariant(seed in any::<u64>(), c in 0.01f64..100.0) {
        let mut rng = Rng::new(seed);
        let t = rng_vec(&mut rng, 5, -1.0, 1.0);
        let e = rng_vec(&mut rng, 5, -1.0, 1.0);
        let k = rng_vec(&mut rng, 5, -1.0, 1.0);
        let s = |v: &[f64]| v.iter().map(|x| x * c).collect::<Vec<_>>();
        let a = doi(&t, &e, &k).unwrap();
        let b = doi(&s(&t), &s(&e), &s(&k)).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
    }

    #[test]
    fn region_metrics_merge_like_segments(seed in any::<u64>(), n in 4usize..60) {
        let mut rng = Rng::new(seed);
        // A one-row strip cut into runs keeps every segment connected.
        let mut labels = vec![0u32; n];
        let mut id = 0;
        for i in 1..n {
            if rng.uniform() < 0.3 {
                id += 1;
            }
            labels[i] = id;
        }
        prop_assume!(id >= 1);
        let pt = rng_vec(&mut rng, n, 0.0, 1.0);
        let re = rng_vec(&mut rng, n, 0.0, 1.0);
        let map = SuperpixelMap::new(1, n, labels.clone()).unwrap();
        let k = rng.below(id as usize) as u32;
        let merged: Vec<u32> = labels.iter().map(|&l| if l > k { l - 1 } else { l }).collect();
        let merged_map = SuperpixelMap::new(1, n, merged).unwrap();
        let before = region_metrics(&map, &pt, &re).unwrap();
        let after = region_metrics(&merged_map, &pt, &re).unwrap();
        let joined = before[k as usize].merge(before[k as usize + 1]);
        let got = after[k as usize];
        prop_assert_eq!(got.max_pt, joined.max_pt);
        prop_assert_eq!(got.max_re, joined.max_re);
        prop_assert!((got.sum_pt - joined.sum_pt).abs() < 1e-12);
        prop_assert!((got.sum_re - joined.sum_re).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn em_descends_with_invariants(seed in 0u64..1000) {
        let (cube, bags) = small_scene(seed, 0.01);
        let cfg = EfumiConfig { max_iters: 60, seed, ..EfumiConfig::default() };
        let res = run_efumi(&cube, &bags, &cfg, None).unwrap();
        for w in res.cost_trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-8);
        }
        for &i in &bags.pixels_with(Label::Negative) {
            prop_assert_eq!(res.zweights[i], 0.0);
        }
        for col in res.endmembers.columns() {
            let n: f64 = col.iter().map(|v| v * v).sum();
            prop_assert!((n - 1.0).abs() < 1e-9);
        }
        prop_assert!(res.proportions.simplex_violation() <= 1e-12);
    }
}

#[test]
fn all_empty_units_have_zero_influence() {
    let (cube, bags) = small_scene(3, 0.01);
    let base = run_efumi(&cube, &bags, &EfumiConfig::default(), None).unwrap();
    let units: Vec<Unit> = (0..4).map(|id| Unit { id, pixels: vec![] }).collect();
    let records = exact_influence_sweep(&cube, &bags, &base, &units, Restart::Warm).unwrap();
    assert!(records.iter().all(|r| r.exact == Some(0.0)));
}

#[test]
fn synthetic_cube_is_reproducible_and_in_hull() {
    let cfg = SyntheticConfig::new(20, 20, 10, 3);
    let (a, truth, _) = generate_synthetic::<f64>(&cfg, &mut Rng::new(11)).unwrap();
    let (b, _, _) = generate_synthetic::<f64>(&cfg, &mut Rng::new(11)).unwrap();
    assert_eq!(encode_cube(&a).unwrap(), encode_cube(&b).unwrap());
    let p = unmix_all(&a, &truth.endmembers).unwrap();
    let r = residuals(&a, &truth.endmembers, &p).unwrap();
    assert!(r.iter().all(|&v| v < 1e-20));
}
