//! Linear probe and attention statistic on controlled inputs.

use srcp::env::{agent_footprint, EnvConfig};
use srcp::evaluate::probe_features;
use srcp::linalg::Matrix;
use srcp::rng::RngStream;
use srcp::saliency::{attention_mass, top_k_mask, SaliencyMask};

fn states(n: usize, rng: &mut RngStream) -> Matrix<f64> {
    Matrix::from_rows(&(0..n).map(|_| (0..4).map(|_| rng.uniform()).collect()).collect::<Vec<_>>())
}

#[test]
fn identity_features_probe_exactly() {
    let mut rng = RngStream::new(1);
    let y = states(500, &mut rng);
    let r = probe_features(&y, &y, 400, 1e-12).unwrap();
    assert!(r.holdout_mse < 1e-10, "{}", r.holdout_mse);
    assert_eq!((r.n_train, r.n_holdout), (400, 100));
}

#[test]
fn constant_features_give_the_holdout_spread_around_the_train_mean() {
    let mut rng = RngStream::new(2);
    let y = states(600, &mut rng);
    let x = Matrix::from_rows(&vec![vec![0.7, -0.2]; 600]);
    let n_train = 450;
    let r = probe_features(&x, &y, n_train, 1e-9).unwrap();
    // best constant predictor is the train mean; measured on the holdout
    let mut expected = 0.0;
    for j in 0..4 {
        let mean = (0..n_train).map(|i| y.get(i, j)).sum::<f64>() / n_train as f64;
        expected += (n_train..600).map(|i| (y.get(i, j) - mean).powi(2)).sum::<f64>();
    }
    expected /= (150 * 4) as f64;
    assert!((r.holdout_mse - expected).abs() < 1e-8, "{} vs {expected}", r.holdout_mse);
}

#[test]
fn footprint_mask_has_full_attention() {
    let cfg = EnvConfig::default();
    let p = cfg.obs_dim();
    let fp = agent_footprint([0.37, 0.61], cfg.grid_size);
    let mut mask = vec![0.0; p];
    for &i in &fp {
        mask[i] = 1.0;
    }
    let m = SaliencyMask {
        mask,
        k_frac: fp.len() as f64 / p as f64,
        source: None,
    };
    assert_eq!(attention_mass(&m, &fp), 1.0);
}

#[test]
fn random_masks_match_the_footprint_area_fraction() {
    let cfg = EnvConfig::default();
    let p = cfg.obs_dim();
    let mut rng = RngStream::new(3);
    let mut total = 0.0;
    let mut expected = 0.0;
    let trials = 4000;
    for _ in 0..trials {
        let pos = [rng.uniform(), rng.uniform()];
        let fp = agent_footprint(pos, cfg.grid_size);
        let scores: Vec<f64> = (0..p).map(|_| rng.uniform()).collect();
        let m = SaliencyMask {
            mask: top_k_mask(&scores, 0.15).unwrap(),
            k_frac: 0.15,
            source: None,
        };
        total += attention_mass(&m, &fp);
        // a uniformly random k-subset hits each entry with probability k/P
        expected += fp.len() as f64 / p as f64;
    }
    let (mean, expected) = (total / trials as f64, expected / trials as f64);
    assert!((mean - expected).abs() < 0.1 * expected, "{mean} vs {expected}");
}
