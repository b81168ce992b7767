//! Diagonal Gaussian densities on plain slices. The differentiable versions
//! live on [`Graph`](super::tape::Graph).

use rand::Rng;
use rand_distr::StandardNormal;

pub fn gaussian_log_prob(a: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    let c = 0.5 * (2.0 * std::f64::consts::PI).ln();
    a.iter()
        .zip(mean)
        .zip(log_std)
        .map(|((&a, &m), &l)| {
            let z = (a - m) / l.exp();
            -0.5 * z * z - l - c
        })
        .sum()
}

pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    let c = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
    log_std.iter().map(|&l| l + c).sum()
}

/// `KL(old || new)`.
pub fn gaussian_kl(mean_old: &[f64], log_std_old: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    (0..mean.len())
        .map(|k| {
            let vo = (2.0 * log_std_old[k]).exp();
            let vn = (2.0 * log_std[k]).exp();
            let d = mean_old[k] - mean[k];
            log_std[k] - log_std_old[k] + (vo + d * d) / (2.0 * vn) - 0.5
        })
        .sum()
}

pub fn gaussian_sample<R: Rng + ?Sized>(mean: &[f64], log_std: &[f64], rng: &mut R) -> Vec<f64> {
    mean.iter()
        .zip(log_std)
        .map(|(&m, &l)| {
            let n: f64 = rng.sample(StandardNormal);
            m + l.exp() * n
        })
        .collect()
}
