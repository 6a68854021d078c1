use agnet::clustering::{fit_gmm, kmeans, GmmConfig, GmmModel, Point};
use agnet::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn blob(rng: &mut ChaCha8Rng, cx: f64, cy: f64, sigma: f64, n: usize) -> Vec<Point<f64>> {
    (0..n)
        .map(|_| {
            let (a, b): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
            [cx + sigma * a, cy + sigma * b]
        })
        .collect()
}

fn two_blobs(seed: u64) -> Vec<Point<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = blob(&mut rng, 10.0, 10.0, 1.0, 50);
    pts.extend(blob(&mut rng, 100.0, 100.0, 1.0, 50));
    pts
}

fn mean(pts: &[Point<f64>]) -> Point<f64> {
    let n = pts.len() as f64;
    [pts.iter().map(|p| p[0]).sum::<f64>() / n, pts.iter().map(|p| p[1]).sum::<f64>() / n]
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn cfg(k: usize) -> GmmConfig {
    GmmConfig { k, ..Default::default() }
}

#[test]
fn kmeans_finds_two_separated_blobs() {
    let pts = two_blobs(1);
    let flat: Vec<f64> = pts.iter().flatten().copied().collect();
    let km = kmeans(&flat, 2, 2, 7).unwrap();
    let truth = [mean(&pts[..50]), mean(&pts[50..])];
    for c in 0..2 {
        let best = truth.iter().map(|t| dist(km.centroid(c), t)).fold(f64::INFINITY, f64::min);
        assert!(best < 2.0);
        assert!(dist(km.centroid(c), &[10.0, 10.0]).min(dist(km.centroid(c), &[100.0, 100.0])) < 2.0);
    }
    assert!(km.labels[..50].iter().all(|&l| l == km.labels[0]));
    assert!(km.labels[50..].iter().all(|&l| l == km.labels[50] && l != km.labels[0]));
}

#[test]
fn kmeans_handles_higher_dimensions() {
    let rows: Vec<f64> = (0..40).flat_map(|i| if i < 20 { [0.0, 0.0, 0.0] } else { [5.0, 5.0, 5.0] }).collect();
    let km = kmeans(&rows, 3, 2, 0).unwrap();
    let mut cs: Vec<Vec<f64>> = (0..2).map(|c| km.centroid(c).to_vec()).collect();
    cs.sort_by(|a, b| a[0].total_cmp(&b[0]));
    assert_eq!(cs, vec![vec![0.0; 3], vec![5.0; 3]]);
}

#[test]
fn kmeans_rejects_ragged_rows_and_too_few_points() {
    assert!(kmeans(&[1.0, 2.0, 3.0], 2, 1, 0).is_err());
    assert!(matches!(kmeans(&[1.0, 2.0], 2, 2, 0), Err(Error::TooFewPoints { needed: 2, got: 1 })));
}

#[test]
fn single_component_is_the_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pts: Vec<Point<f64>> = (0..37).map(|_| [rng.gen_range(-5.0..9.0), rng.gen_range(0.0..3.0)]).collect();
    let (model, assign) = fit_gmm(&pts, &cfg(1)).unwrap();
    let m = mean(&pts);
    let n = pts.len() as f64;
    let cxx = pts.iter().map(|p| (p[0] - m[0]).powi(2)).sum::<f64>() / n + 1e-6;
    let cyy = pts.iter().map(|p| (p[1] - m[1]).powi(2)).sum::<f64>() / n + 1e-6;
    let cxy = pts.iter().map(|p| (p[0] - m[0]) * (p[1] - m[1])).sum::<f64>() / n;
    assert!(dist(&model.means[0], &m) < 1e-9);
    let c = model.covariances[0];
    for (got, want) in [(c[0][0], cxx), (c[1][1], cyy), (c[0][1], cxy), (c[1][0], cxy)] {
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }
    assert_eq!(model.weights, vec![1.0]);
    assert!(assign.labels.iter().all(|&l| l == 0));
}

/// Straight-line EM from the same k-means start, written against the
/// textbook density formula.
fn em_oracle(pts: &[Point<f64>], labels: &[usize], k: usize, reg: f64, max_iter: usize, tol: f64) -> Vec<Point<f64>> {
    let n = pts.len();
    let mut resp: Vec<Vec<f64>> = labels.iter().map(|&l| (0..k).map(|c| (c == l) as u8 as f64).collect()).collect();
    let mut prev = f64::NEG_INFINITY;
    let mut iter = 0;
    loop {
        let mut means = vec![[0.0; 2]; k];
        let mut covs = vec![[0.0; 3]; k];
        let mut weights = vec![0.0; k];
        for c in 0..k {
            let nk: f64 = resp.iter().map(|r| r[c]).sum();
            let mx = pts.iter().zip(&resp).map(|(p, r)| r[c] * p[0]).sum::<f64>() / nk;
            let my = pts.iter().zip(&resp).map(|(p, r)| r[c] * p[1]).sum::<f64>() / nk;
            let sxx = pts.iter().zip(&resp).map(|(p, r)| r[c] * (p[0] - mx).powi(2)).sum::<f64>() / nk + reg;
            let syy = pts.iter().zip(&resp).map(|(p, r)| r[c] * (p[1] - my).powi(2)).sum::<f64>() / nk + reg;
            let sxy = pts.iter().zip(&resp).map(|(p, r)| r[c] * (p[0] - mx) * (p[1] - my)).sum::<f64>() / nk;
            means[c] = [mx, my];
            covs[c] = [sxx, sxy, syy];
            weights[c] = nk / n as f64;
        }
        let mut ll = 0.0;
        for (p, r) in pts.iter().zip(resp.iter_mut()) {
            let dens: Vec<f64> = (0..k)
                .map(|c| {
                    let [a, b, d] = covs[c];
                    let det = a * d - b * b;
                    let (dx, dy) = (p[0] - means[c][0], p[1] - means[c][1]);
                    let q = (d * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det;
                    weights[c] * (-0.5 * q).exp() / (2.0 * std::f64::consts::PI * det.sqrt())
                })
                .collect();
            let total: f64 = dens.iter().sum();
            ll += total.ln();
            *r = dens.iter().map(|d| d / total).collect();
        }
        ll /= n as f64;
        iter += 1;
        if ll - prev < tol || iter >= max_iter {
            return means;
        }
        prev = ll;
    }
}

#[test]
fn two_blob_mixture_matches_oracle_and_membership() {
    for seed in 0..5 {
        let pts = two_blobs(100 + seed);
        let c = GmmConfig { seed, ..cfg(2) };
        let (model, assign) = fit_gmm(&pts, &c).unwrap();
        assert!(assign.labels[..50].iter().all(|&l| l == assign.labels[0]));
        assert!(assign.labels[50..].iter().all(|&l| l == 1 - assign.labels[0]));
        let a = assign.labels[0];
        assert!(dist(&model.means[a], &[10.0, 10.0]) < 2.0);
        assert!(dist(&model.means[1 - a], &[100.0, 100.0]) < 2.0);

        let flat: Vec<f64> = pts.iter().flatten().copied().collect();
        let km = kmeans(&flat, 2, 2, seed).unwrap();
        let want = em_oracle(&pts, &km.labels, 2, c.covariance_regularization, c.max_iterations, c.convergence_threshold);
        for (m, w) in model.means.iter().zip(&want) {
            assert!(dist(m, w) < 1e-9, "seed {seed}: {m:?} vs {w:?}");
        }
    }
}

#[test]
fn identical_points_collapse_to_regularized_point_mass() {
    let pts = vec![[3.5, -2.0]; 12];
    let (model, _) = fit_gmm(&pts, &cfg(1)).unwrap();
    assert_eq!(model.means[0], [3.5, -2.0]);
    assert_eq!(model.covariances[0], [[1e-6, 0.0], [0.0, 1e-6]]);
}

#[test]
fn fitting_is_deterministic() {
    let pts = two_blobs(9);
    let a = fit_gmm(&pts, &cfg(3)).unwrap();
    let b = fit_gmm(&pts, &cfg(3)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn too_few_points_is_structured() {
    let pts = vec![[0.0, 0.0], [1.0, 1.0]];
    assert!(matches!(fit_gmm(&pts, &cfg(3)), Err(Error::TooFewPoints { needed: 3, got: 2 })));
}

fn check_model(model: &GmmModel<f64>, reg: f64) -> std::result::Result<(), TestCaseError> {
    let total: f64 = model.weights.iter().sum();
    prop_assert!((total - 1.0).abs() < 1e-9);
    prop_assert!(model.weights.iter().all(|&w| w >= 0.0));
    for c in &model.covariances {
        let (a, b, d) = (c[0][0], c[0][1], c[1][1]);
        prop_assert_eq!(b, c[1][0]);
        let half_tr = (a + d) / 2.0;
        let lo = half_tr - (half_tr * half_tr - (a * d - b * b)).max(0.0).sqrt();
        // The smallest eigenvalue is computed with cancellation at large scales.
        prop_assert!(lo >= reg * (1.0 - 1e-6) - 1e-12 * half_tr, "eigenvalue {lo}");
    }
    Ok(())
}

fn scattered_points() -> impl Strategy<Value = (Vec<Point<f64>>, usize, u64)> {
    (20usize..=200, 1usize..=8, any::<u64>()).prop_map(|(n, k, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centres: Vec<Point<f64>> = (0..k).map(|_| [rng.gen_range(0.0..200.0), rng.gen_range(0.0..200.0)]).collect();
        let pts = (0..n)
            .map(|i| {
                let c = centres[i % k];
                let s = rng.gen_range(0.5..20.0);
                [c[0] + s * rng.sample::<f64, _>(StandardNormal), c[1] + s * rng.sample::<f64, _>(StandardNormal)]
            })
            .collect();
        (pts, k, seed)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn em_never_decreases_likelihood((pts, k, seed) in scattered_points()) {
        let c = GmmConfig { k, seed, ..Default::default() };
        let (model, assign) = fit_gmm(&pts, &c).unwrap();
        for w in model.log_likelihood_trace.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-8, "{} -> {}", w[0], w[1]);
        }
        check_model(&model, c.covariance_regularization)?;
        for (r, &l) in assign.responsibilities.iter().zip(&assign.labels) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(r.iter().all(|&v| v <= r[l]));
            prop_assert!(r[..l].iter().all(|&v| v < r[l]));
        }
    }

    #[test]
    fn kmeans_labels_are_nearest_centroids((pts, k, seed) in scattered_points()) {
        let flat: Vec<f64> = pts.iter().flatten().copied().collect();
        let km = kmeans(&flat, 2, k, seed).unwrap();
        prop_assert!(km.iterations <= agnet::clustering::KMEANS_MAX_ITERATIONS);
        if km.iterations < agnet::clustering::KMEANS_MAX_ITERATIONS {
            for (p, &l) in pts.iter().zip(&km.labels) {
                let d = dist(p, km.centroid(l));
                prop_assert!((0..k).all(|c| dist(p, km.centroid(c)) >= d));
            }
        }
    }
}
