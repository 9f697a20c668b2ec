use convrt_core::quality::{kendall_tau, psnr, psnr_from_mse, select_prompt, spearman_rho, ssim_eval};
use proptest::prelude::*;

/// Tau-b by enumerating every pair.
fn kendall_brute(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let (mut conc, mut disc, mut ta, mut tb) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let da = (a[i] - a[j]).signum() as i64 * (a[i] != a[j]) as i64;
            let db = (b[i] - b[j]).signum() as i64 * (b[i] != b[j]) as i64;
            match (da, db) {
                (0, 0) => {}
                (0, _) => ta += 1,
                (_, 0) => tb += 1,
                _ if da == db => conc += 1,
                _ => disc += 1,
            }
        }
    }
    let n0 = conc + disc;
    let denom = (((n0 + ta) * (n0 + tb)) as f64).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        (conc - disc) as f64 / denom
    }
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    (0..v.len())
        .map(|i| {
            let less = v.iter().filter(|&&x| x < v[i]).count() as f64;
            let eq = v.iter().filter(|&&x| x == v[i]).count() as f64;
            less + (eq + 1.0) / 2.0
        })
        .collect()
}

fn spearman_brute(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

fn seq_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..=50).prop_flat_map(|n| {
        (
            prop::collection::vec((0i32..8).prop_map(|v| v as f64 / 2.0), n),
            prop::collection::vec((0i32..8).prop_map(|v| v as f64 * 0.3), n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn kendall_matches_brute_force((a, b) in seq_pair()) {
        let got = kendall_tau(&a, &b).unwrap();
        prop_assert!((got - kendall_brute(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn spearman_matches_brute_force((a, b) in seq_pair()) {
        let got = spearman_rho(&a, &b).unwrap();
        prop_assert!((got - spearman_brute(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn correlations_invariant_under_monotone_maps((a, b) in seq_pair()) {
        let mapped: Vec<f64> = b.iter().map(|x| (3.0 * x + 1.0).exp()).collect();
        prop_assert_eq!(kendall_tau(&a, &b).unwrap(), kendall_tau(&a, &mapped).unwrap());
        prop_assert_eq!(spearman_rho(&a, &b).unwrap(), spearman_rho(&a, &mapped).unwrap());
    }
}

#[test]
fn psnr_reference_values() {
    assert!((psnr_from_mse(0.25, 1.0) - 6.020599913279624).abs() < 1e-9);
    let a = vec![0.0f32; 16];
    let b = vec![0.5f32; 16];
    assert!((psnr(&a, &b, 1.0).unwrap() - 6.0206).abs() < 1e-3);
}

#[test]
fn ssim_of_identical_frames_is_one() {
    let a: Vec<f32> = (0..16 * 16 * 3).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
    assert!((ssim_eval(&a, &a, [16, 16, 3]).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn perfectly_correlated_candidate_wins() {
    let reference: Vec<f64> = (0..30).map(|i| 1.0 / (1.0 + i as f64)).collect();
    let anti: Vec<f64> = reference.iter().map(|v| -v).collect();
    let noisy: Vec<f64> = reference.iter().enumerate().map(|(i, v)| v + if i % 3 == 0 { 0.2 } else { 0.0 }).collect();
    let cands = vec![("anti".to_string(), anti), ("same".to_string(), reference.clone()), ("noisy".to_string(), noisy)];
    let rep = select_prompt(&reference, &cands).unwrap();
    assert_eq!(rep.ranking, vec![1, 2, 0]);
    assert_eq!(rep.best().name, "same");
    assert_eq!(rep.scores[1].combined, 1.0);
    assert_eq!(rep.scores[0].combined, -1.0);
}
