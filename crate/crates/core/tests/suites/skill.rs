//! Closed-form skill inference.

use srcp::rng::RngStream;
use srcp::successor::infer_skill;
use srcp::tensor::Tensor;

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn features(n: usize, d: usize, rng: &mut RngStream) -> Tensor<f64> {
    Tensor::new(vec![n, d], (0..n * d).map(|_| rng.normal()).collect()).unwrap()
}

fn rewards(phi: &Tensor<f64>, z: &[f64]) -> Vec<f64> {
    (0..phi.rows()).map(|i| phi.row(i).iter().zip(z).map(|(p, w)| p * w).sum()).collect()
}

pub fn linear_rewards_recover_the_skill() {
    let root = RngStream::new(3);
    for trial in 0..100 {
        let mut rng = root.split(trial);
        let d = 2 + rng.index(15);
        let n = d + 1 + rng.index(2000);
        let phi = features(n, d, &mut rng);
        let z_star: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let z = infer_skill(&phi, &rewards(&phi, &z_star), 1e-8).unwrap();
        let c = cosine(&z, &z_star);
        assert!(c > 0.999, "trial {trial}: d={d} n={n} cosine {c}");
    }
}

pub fn zero_rewards_give_the_zero_skill() {
    let mut rng = RngStream::new(4);
    let phi = features(500, 8, &mut rng);
    let z = infer_skill(&phi, &vec![0.0; 500], 1e-8).unwrap();
    assert!(z.iter().all(|&v| v == 0.0), "{z:?}");
}

pub fn single_sample_matches_sherman_morrison() {
    // (phi phi^T + eps I)^{-1} phi r = phi r / (|phi|^2 + eps)
    let mut rng = RngStream::new(5);
    for _ in 0..20 {
        let phi = features(1, 6, &mut rng);
        let r = rng.normal();
        let eps = 0.1;
        let z = infer_skill(&phi, &[r], eps).unwrap();
        let denom = phi.data().iter().map(|v| v * v).sum::<f64>() + eps;
        for (zi, pi) in z.iter().zip(phi.data()) {
            assert!((zi - pi * r / denom).abs() < 1e-12);
        }
    }
}

pub fn mismatched_lengths_and_bad_ridge_are_rejected() {
    let phi = features(4, 2, &mut RngStream::new(6));
    assert!(infer_skill(&phi, &[1.0; 3], 1e-8).is_err());
    assert!(infer_skill(&phi, &[1.0; 4], -1.0).is_err());
    assert!(infer_skill(&phi, &[1.0; 4], f64::NAN).is_err());
}
