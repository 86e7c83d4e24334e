//! Gradient privatization (per-sample clipping plus Gaussian noise) and the
//! SGD / Adam parameter updates that consume the privatized gradient.
//!
//! Privacy is paid entirely in [`noisy_mean`]; the optimizers only post-process
//! its output, so DP-SGD and DP-Adam share one accounting.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{MlpModel, PerSampleGrads};
use crate::rng::StreamRng;

/// Clipping bound `S` and noise multiplier `sigma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpSpec {
    pub clip_norm: f64,
    pub noise_multiplier: f64,
}

impl DpSpec {
    pub fn new(clip_norm: f64, noise_multiplier: f64) -> Result<Self> {
        if !(clip_norm > 0.0) {
            return Err(Error::InvalidArgument(format!("clip norm must be > 0, got {clip_norm}")));
        }
        if !(noise_multiplier >= 0.0) || !noise_multiplier.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "noise multiplier must be finite and >= 0, got {noise_multiplier}"
            )));
        }
        Ok(Self {
            clip_norm,
            noise_multiplier,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Lot size `L`; the expected number of samples per privatized step.
    pub lot_size: usize,
    pub epochs: usize,
}

impl TrainConfig {
    pub fn new(learning_rate: f64, lot_size: usize, epochs: usize) -> Result<Self> {
        if !(learning_rate > 0.0) || !learning_rate.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be > 0, got {learning_rate}"
            )));
        }
        if lot_size == 0 {
            return Err(Error::InvalidArgument("lot size must be >= 1".into()));
        }
        Ok(Self {
            learning_rate,
            lot_size,
            epochs,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
}

impl AdamState {
    /// Fresh state with `beta1 = 0.9`, `beta2 = 0.999`, `eps_hat = 1e-8`.
    pub fn new(param_count: usize) -> Self {
        Self::with_betas(param_count, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(param_count: usize, beta1: f64, beta2: f64, eps_hat: f64) -> Self {
        Self {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
            beta1,
            beta2,
            eps_hat,
        }
    }
}

/// Diagnostics for one privatized step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub pre_clip_norms: Vec<f64>,
    pub clipped_fraction: f64,
    /// Seed of the Gaussian draw added at this step.
    pub noise_seed: u64,
    pub grad_norm_after: f64,
    /// Largest per-sample norm after clipping, measured on the clipped vectors.
    pub max_post_clip_norm: f64,
}

impl StepReport {
    pub fn median_pre_clip_norm(&self) -> Option<f64> {
        median(&self.pre_clip_norms)
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len().is_multiple_of(2) {
        0.5 * (v[mid - 1] + v[mid])
    } else {
        v[mid]
    })
}

pub fn l2_norm(g: &[f64]) -> f64 {
    g.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `g / max(1, ||g|| / S)`.
pub fn clip_gradient(g: &[f64], clip_norm: f64) -> Result<Vec<f64>> {
    if !(clip_norm > 0.0) {
        return Err(Error::InvalidArgument(format!("clip norm must be > 0, got {clip_norm}")));
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gradient to clip".into()));
    }
    let norm = l2_norm(g);
    let factor = norm / clip_norm;
    if factor <= 1.0 {
        return Ok(g.to_vec());
    }
    Ok(g.iter().map(|v| v / factor).collect())
}

/// Running sum of (optionally clipped) per-sample gradients.
///
/// Samples are added strictly in arrival order so that chunked and unchunked
/// processing of the same lot produce bit-identical sums.
#[derive(Debug, Clone)]
pub struct ClippedSum {
    clip_norm: Option<f64>,
    sum: Vec<f64>,
    pre_clip_norms: Vec<f64>,
    clipped: usize,
    max_post_clip_norm: f64,
}

impl ClippedSum {
    /// `clip_norm = None` disables clipping.
    pub fn new(param_count: usize, clip_norm: Option<f64>) -> Self {
        Self {
            clip_norm,
            sum: vec![0.0; param_count],
            pre_clip_norms: Vec::new(),
            clipped: 0,
            max_post_clip_norm: 0.0,
        }
    }

    pub fn count(&self) -> usize {
        self.pre_clip_norms.len()
    }

    pub fn add(&mut self, grads: &PerSampleGrads) -> Result<()> {
        if grads.param_count() != self.sum.len() {
            return Err(Error::Shape(format!(
                "gradient length {} vs {}",
                grads.param_count(),
                self.sum.len()
            )));
        }
        for g in grads.samples() {
            let norm = l2_norm(g);
            if !norm.is_finite() {
                return Err(Error::NonFinite("per-sample gradient".into()));
            }
            self.pre_clip_norms.push(norm);
            match self.clip_norm {
                Some(s) if norm / s > 1.0 => {
                    let factor = norm / s;
                    self.clipped += 1;
                    let mut sq = 0.0;
                    for (a, v) in self.sum.iter_mut().zip(g) {
                        let c = v / factor;
                        sq += c * c;
                        *a += c;
                    }
                    self.max_post_clip_norm = self.max_post_clip_norm.max(sq.sqrt());
                }
                _ => {
                    self.max_post_clip_norm = self.max_post_clip_norm.max(norm);
                    self.sum.iter_mut().zip(g).for_each(|(a, v)| *a += v);
                }
            }
        }
        Ok(())
    }

    /// Exact mean over the samples added so far.
    pub fn mean(mut self) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.count();
        if n == 0 {
            return Err(Error::Empty("mean of an empty batch".into()));
        }
        let n = n as f64;
        self.sum.iter_mut().for_each(|a| *a /= n);
        Ok((self.sum, self.pre_clip_norms))
    }

    /// `(sum + N(0, sigma^2 S^2 I)) / L`.
    ///
    /// Draws one seed from `rng` per call; the Gaussian vector is generated
    /// from that seed and reported in [`StepReport::noise_seed`]. An empty
    /// accumulator is allowed (Poisson sampling can select no one), in which
    /// case the result is pure noise.
    pub fn privatize<R: Rng>(mut self, spec: &DpSpec, lot_size: usize, rng: &mut R) -> Result<(Vec<f64>, StepReport)> {
        if lot_size == 0 {
            return Err(Error::InvalidArgument("lot size must be >= 1".into()));
        }
        let clip = spec.clip_norm;
        let noise_seed: u64 = rng.random();
        let std = spec.noise_multiplier * clip;
        if std > 0.0 {
            let normal = Normal::new(0.0, std)
                .map_err(|e| Error::InvalidArgument(format!("noise distribution: {e}")))?;
            let mut noise_rng = StreamRng::seed_from_u64(noise_seed);
            self.sum
                .iter_mut()
                .for_each(|a| *a += normal.sample(&mut noise_rng));
        }
        let l = lot_size as f64;
        self.sum.iter_mut().for_each(|a| *a /= l);
        let n = self.count();
        let report = StepReport {
            clipped_fraction: if n == 0 { 0.0 } else { self.clipped as f64 / n as f64 },
            pre_clip_norms: self.pre_clip_norms,
            noise_seed,
            grad_norm_after: l2_norm(&self.sum),
            max_post_clip_norm: self.max_post_clip_norm,
        };
        Ok((self.sum, report))
    }
}

/// Clips every per-sample gradient to `spec.clip_norm`, sums, adds Gaussian
/// noise with per-coordinate standard deviation `sigma * S`, and divides by
/// the lot size.
pub fn noisy_mean<R: Rng>(
    grads: &PerSampleGrads,
    spec: &DpSpec,
    lot_size: usize,
    rng: &mut R,
) -> Result<(Vec<f64>, StepReport)> {
    if grads.batch_size() == 0 {
        return Err(Error::Empty("noisy mean of an empty batch".into()));
    }
    let mut acc = ClippedSum::new(grads.param_count(), Some(spec.clip_norm));
    acc.add(grads)?;
    acc.privatize(spec, lot_size, rng)
}

fn check_len(model: &MlpModel, grad: &[f64]) -> Result<()> {
    if grad.len() != model.param_count() {
        return Err(Error::Shape(format!(
            "gradient length {} for {} parameters",
            grad.len(),
            model.param_count()
        )));
    }
    Ok(())
}

/// `theta <- theta - lr * grad`.
pub fn sgd_step(model: &mut MlpModel, grad: &[f64], lr: f64) -> Result<()> {
    check_len(model, grad)?;
    model
        .params_mut()
        .zip(grad)
        .for_each(|(p, g)| *p -= lr * g);
    Ok(())
}

/// Bias-corrected Adam update.
pub fn adam_step(model: &mut MlpModel, state: &mut AdamState, grad: &[f64], lr: f64) -> Result<()> {
    check_len(model, grad)?;
    if state.m.len() != grad.len() || state.v.len() != grad.len() {
        return Err(Error::Shape(format!(
            "Adam state of length {} for {} parameters",
            state.m.len(),
            grad.len()
        )));
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let t = i32::try_from(state.t).unwrap_or(i32::MAX);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, &g), m), v) in model
        .params_mut()
        .zip(grad)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + state.eps_hat);
    }
    Ok(())
}

/// Descent on an already-privatized gradient.
pub fn dp_sgd_step(model: &mut MlpModel, noisy_grad: &[f64], lr: f64) -> Result<()> {
    sgd_step(model, noisy_grad, lr)
}

/// Adam on an already-privatized gradient. Costs no extra privacy.
pub fn dp_adam_step(model: &mut MlpModel, state: &mut AdamState, noisy_grad: &[f64], lr: f64) -> Result<()> {
    adam_step(model, state, noisy_grad, lr)
}

/// Adds the proximal pull `mu * (w - anchor)` to `grad` in place.
pub fn add_proximal_term(grad: &mut [f64], w: &[f64], anchor: &[f64], mu: f64) -> Result<()> {
    if grad.len() != w.len() || w.len() != anchor.len() {
        return Err(Error::Shape("proximal term operands differ in length".into()));
    }
    if mu == 0.0 {
        return Ok(());
    }
    for ((g, &wi), &ai) in grad.iter_mut().zip(w).zip(anchor) {
        *g += mu * (wi - ai);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_model, model_from_layers, Activation, DenseLayer, Matrix, MlpConfig};

    fn scalar_model(theta: f64) -> MlpModel {
        // one weight, zero-width bias is impossible, so use a 1->1->1 net and
        // touch only the first parameter
        let cfg = MlpConfig {
            input_dim: 1,
            hidden_dims: vec![1],
            output_dim: 1,
            activation: Activation::ReLU,
        };
        let layers = vec![
            DenseLayer { weight: Matrix::new(1, 1, vec![theta]).unwrap(), bias: vec![0.0] },
            DenseLayer { weight: Matrix::new(1, 1, vec![0.0]).unwrap(), bias: vec![0.0] },
        ];
        model_from_layers(cfg, layers).unwrap()
    }

    fn first(model: &MlpModel) -> f64 {
        *model.params().next().unwrap()
    }

    #[test]
    fn clip_examples() {
        let g = vec![6.0, 8.0];
        let c = clip_gradient(&g, 4.0).unwrap();
        assert!((l2_norm(&c) - 4.0).abs() < 1e-12);
        assert!((c[0] - 2.4).abs() < 1e-12 && (c[1] - 3.2).abs() < 1e-12);

        let small = vec![1.2, 1.6];
        assert_eq!(clip_gradient(&small, 4.0).unwrap(), small);
        assert_eq!(clip_gradient(&[0.0, 0.0], 4.0).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(clip_gradient(&[f64::NAN], 1.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn noisy_mean_without_noise_is_clipped_mean() {
        let grads = PerSampleGrads::new(vec![vec![3.0, 4.0], vec![0.0, 1.0]]).unwrap();
        let spec = DpSpec::new(1.0, 0.0).unwrap();
        let mut rng = StreamRng::seed_from_u64(0);
        let (g, rep) = noisy_mean(&grads, &spec, 2, &mut rng).unwrap();
        assert!((g[0] - 0.3).abs() < 1e-15);
        assert!((g[1] - 0.9).abs() < 1e-15);
        assert_eq!(rep.clipped_fraction, 0.5);
        assert_eq!(rep.pre_clip_norms, vec![5.0, 1.0]);
    }

    #[test]
    fn duplicated_lot_keeps_mean() {
        let one = PerSampleGrads::new(vec![vec![0.5, -0.25]]).unwrap();
        let two = PerSampleGrads::new(vec![vec![0.5, -0.25], vec![0.5, -0.25]]).unwrap();
        let spec = DpSpec::new(10.0, 0.0).unwrap();
        let mut rng = StreamRng::seed_from_u64(0);
        let (a, _) = noisy_mean(&one, &spec, 1, &mut rng).unwrap();
        let (b, _) = noisy_mean(&two, &spec, 2, &mut rng).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn spec_validation() {
        assert!(DpSpec::new(0.0, 1.0).is_err());
        assert!(DpSpec::new(1.0, -0.1).is_err());
        assert!(TrainConfig::new(0.0, 8, 1).is_err());
        assert!(TrainConfig::new(0.1, 0, 1).is_err());
    }

    #[test]
    fn sgd_examples() {
        let mut m = scalar_model(1.0);
        let n = m.param_count();
        let mut g = vec![0.0; n];
        g[0] = 2.0;
        dp_sgd_step(&mut m, &g, 0.5).unwrap();
        assert_eq!(first(&m), 0.0);

        let mut m = scalar_model(1.0);
        let before = m.clone();
        dp_sgd_step(&mut m, &vec![0.0; n], 0.5).unwrap();
        assert_eq!(m, before);
        dp_sgd_step(&mut m, &g, 0.0).unwrap();
        assert_eq!(m, before);

        // quadratic 0.5 theta^2 has gradient theta
        let mut m = scalar_model(1.0);
        let mut g = vec![0.0; n];
        g[0] = first(&m);
        sgd_step(&mut m, &g, 0.1).unwrap();
        assert!((first(&m) - 0.9).abs() < 1e-15);

        assert!(sgd_step(&mut m, &[1.0], 0.1).is_err());
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut m = init_model(&MlpConfig::with_defaults(3, 2), 1).unwrap();
        let before = m.clone();
        let mut st = AdamState::new(m.param_count());
        dp_adam_step(&mut m, &mut st, &vec![0.0; before.param_count()], 0.01).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn adam_two_scalar_steps_match_hand_recurrence() {
        let mut m = scalar_model(0.0);
        let n = m.param_count();
        let mut st = AdamState::new(n);
        let mut g = vec![0.0; n];
        g[0] = 1.0;
        let lr = 0.1;
        dp_adam_step(&mut m, &mut st, &g, lr).unwrap();
        dp_adam_step(&mut m, &mut st, &g, lr).unwrap();
        // hand-rolled recurrence
        let (b1, b2, eps) = (0.9_f64, 0.999_f64, 1e-8);
        let (mut mm, mut vv, mut th) = (0.0_f64, 0.0_f64, 0.0_f64);
        for t in 1..=2 {
            mm = b1 * mm + (1.0 - b1);
            vv = b2 * vv + (1.0 - b2);
            let mh = mm / (1.0 - b1.powi(t));
            let vh = vv / (1.0 - b2.powi(t));
            th -= lr * mh / (vh.sqrt() + eps);
        }
        // both steps have m_hat = v_hat = 1, so each moves by lr / (1 + eps)
        assert!((th + 2.0 * lr / (1.0 + eps)).abs() < 1e-15);
        assert!((first(&m) - th).abs() < 1e-15);
        assert_eq!(st.t, 2);
    }

    #[test]
    fn adam_constant_gradient_moves_by_lr_per_step() {
        let mut m = scalar_model(0.0);
        let n = m.param_count();
        let mut st = AdamState::new(n);
        let mut g = vec![0.0; n];
        g[0] = -3.0;
        let mut prev = first(&m);
        for _ in 0..200 {
            adam_step(&mut m, &mut st, &g, 0.01).unwrap();
            let now = first(&m);
            let delta = now - prev;
            assert!(delta > 0.0);
            assert!((delta - 0.01).abs() < 1e-6);
            prev = now;
        }
    }

    #[test]
    fn adam_state_mismatch_rejected() {
        let mut m = scalar_model(0.0);
        let mut st = AdamState::new(1);
        let g = vec![0.0; m.param_count()];
        assert!(adam_step(&mut m, &mut st, &g, 0.1).is_err());
    }

    #[test]
    fn proximal_term() {
        let mut g = vec![1.0];
        add_proximal_term(&mut g, &[1.0], &[1.0], 2.0).unwrap();
        assert_eq!(g, vec![1.0]);
        add_proximal_term(&mut g, &[2.0], &[1.0], 2.0).unwrap();
        assert_eq!(g, vec![3.0]);
    }

    #[test]
    fn median_of_norms() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }
}
