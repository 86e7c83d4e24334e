//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use privfed::nn::{
    backward_per_sample, cross_entropy, flatten_params, forward, init_model, random_batch, set_params, Activation,
    Matrix, MlpConfig, MlpModel,
};
use privfed::rng::StreamRng;
use rand::{Rng, SeedableRng};

pub fn sample_loss(model: &MlpModel, x: &[f64], y: usize) -> f64 {
    let batch = Matrix::new(1, x.len(), x.to_vec()).unwrap();
    let (logits, _) = forward(model, &batch).unwrap();
    cross_entropy(&logits, &[y]).unwrap().0
}

/// Central differences on every parameter for one sample.
pub fn numeric_grad(model: &MlpModel, x: &[f64], y: usize, h: f64) -> Vec<f64> {
    let theta = flatten_params(model);
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(theta.len());
    let mut t = theta.clone();
    for j in 0..theta.len() {
        t[j] = theta[j] + h;
        set_params(&mut probe, &t).unwrap();
        let up = sample_loss(&probe, x, y);
        t[j] = theta[j] - h;
        set_params(&mut probe, &t).unwrap();
        let down = sample_loss(&probe, x, y);
        t[j] = theta[j];
        out.push((up - down) / (2.0 * h));
    }
    out
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na.max(nb) == 0.0 {
        0.0
    } else {
        diff / na.max(nb)
    }
}

/// Max relative error over `models` random small networks.
pub fn max_gradient_error(models: usize, seed: u64) -> f64 {
    let mut rng = StreamRng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for m in 0..models {
        let depth = rng.random_range(1..=3);
        let cfg = MlpConfig {
            input_dim: rng.random_range(1..=5),
            hidden_dims: (0..depth).map(|_| rng.random_range(1..=6)).collect(),
            output_dim: rng.random_range(2..=4),
            activation: if m % 2 == 0 { Activation::Tanh } else { Activation::ReLU },
        };
        let mut model = init_model(&cfg, rng.random()).unwrap();
        // nonzero biases so every code path carries gradient
        let theta: Vec<f64> = flatten_params(&model).iter().map(|v| v + 0.1 * rng.random_range(-1.0..1.0)).collect();
        set_params(&mut model, &theta).unwrap();
        let batch = random_batch(&mut rng, 4, cfg.input_dim);
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..cfg.output_dim)).collect();
        let (_, cache) = forward(&model, &batch).unwrap();
        let grads = backward_per_sample(&model, &cache, &labels).unwrap();
        for i in 0..4 {
            let fd = numeric_grad(&model, batch.row(i), labels[i], 1e-5);
            worst = worst.max(rel_err(grads.sample(i), &fd));
        }
    }
    worst
}


fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Single-step RDP of the Poisson-subsampled Gaussian by direct numerical
/// integration of `E_{z ~ N(0, s^2)} [((1 - q) + q e^{(2z - 1) / (2 s^2)})^alpha]`,
/// carried out in log space with composite Simpson over a window wide enough
/// to hold both the `N(0, s^2)` and the `N(alpha, s^2)` mass.
pub fn rdp_by_quadrature(q: f64, sigma: f64, alpha: f64) -> f64 {
    let s2 = sigma * sigma;
    let ln_1mq = if q < 1.0 { (1.0 - q).ln() } else { f64::NEG_INFINITY };
    let ln_q = q.ln();
    let log_integrand = |z: f64| {
        let ln_phi = -0.5 * z * z / s2 - 0.5 * (2.0 * std::f64::consts::PI * s2).ln();
        let u = (2.0 * z - 1.0) / (2.0 * s2);
        ln_phi + alpha * log_add_exp(ln_1mq, ln_q + u)
    };
    let lo = -40.0 * sigma - 1.0;
    let hi = alpha + 40.0 * sigma + 1.0;
    let n = 400_000usize;
    let h = (hi - lo) / n as f64;
    let terms: Vec<f64> = (0..=n)
        .map(|i| {
            let w: f64 = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            w.ln() + log_integrand(lo + i as f64 * h)
        })
        .collect();
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ln_a = m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln() + (h / 3.0).ln();
    ln_a / (alpha - 1.0)
}

/// `(q, sigma, alpha)` grid checked against the quadrature oracle.
pub fn quadrature_grid() -> Vec<(f64, f64, f64)> {
    let mut grid = Vec::new();
    for &q in &[0.01, 0.0683, 0.3] {
        for &sigma in &[0.8, 1.1, 2.0, 5.0] {
            for &alpha in &[1.5, 2.0, 3.5, 8.0, 32.0] {
                grid.push((q, sigma, alpha));
            }
        }
    }
    grid
}
