use crate::error::{Error, Result};
use crate::model::{ModelConfig, Parameters, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, epsilon: 1e-8, weight_decay: 0.0 }
    }
}

/// First and second moment estimates, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T = f32> {
    pub step: u64,
    pub m: Parameters<T>,
    pub v: Parameters<T>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: &ModelConfig) -> Self {
        OptimizerState { step: 0, m: Parameters::zeros(config), v: Parameters::zeros(config) }
    }

    pub fn for_params(params: &Parameters<T>) -> Self {
        OptimizerState { step: 0, m: params.zeros_like(), v: params.zeros_like() }
    }
}

/// One bias-corrected Adam update over flat slices. `t` is the 1-based step.
pub fn adam_update<T: Scalar>(theta: &mut [T], g: &[T], m: &mut [T], v: &mut [T], t: u64, lr: f64, hp: &AdamConfig) {
    let (b1, b2) = (hp.beta1, hp.beta2);
    let c1 = 1.0 - b1.powf(t as f64);
    let c2 = 1.0 - b2.powf(t as f64);
    for i in 0..theta.len() {
        let gi = g[i].to_f64().unwrap();
        let mi = b1 * m[i].to_f64().unwrap() + (1.0 - b1) * gi;
        let vi = b2 * v[i].to_f64().unwrap() + (1.0 - b2) * gi * gi;
        m[i] = T::lit(mi);
        v[i] = T::lit(vi);
        let mut x = theta[i].to_f64().unwrap();
        if hp.weight_decay > 0.0 {
            x -= lr * hp.weight_decay * x;
        }
        x -= lr * (mi / c1) / ((vi / c2).sqrt() + hp.epsilon);
        theta[i] = T::lit(x);
    }
}

/// Applies one Adam step to every tensor. Nothing is updated if any gradient
/// is non-finite.
pub fn adam_step<T: Scalar>(
    params: &mut Parameters<T>,
    grads: &Parameters<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
    hp: &AdamConfig,
) -> Result<()> {
    for (name, g) in grads.named() {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name));
        }
    }
    state.step += 1;
    let t = state.step;
    let grads = grads.named();
    let ms = state.m.named_mut();
    let vs = state.v.named_mut();
    for ((((name, p), (_, g)), (_, m)), (_, v)) in params.named_mut().into_iter().zip(grads).zip(ms).zip(vs) {
        if p.shape != g.shape || p.shape != m.shape || p.shape != v.shape {
            return Err(Error::ShapeMismatch(name));
        }
        adam_update(&mut p.data, &g.data, &mut m.data, &mut v.data, t, lr, hp);
    }
    Ok(())
}

/// Global L2 norm of all gradients.
pub fn grad_norm<T: Scalar>(grads: &Parameters<T>) -> f64 {
    grads
        .named()
        .iter()
        .flat_map(|(_, t)| t.data.iter())
        .map(|&x| {
            let x = x.to_f64().unwrap();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`.
pub fn clip_grad_norm<T: Scalar>(grads: &mut Parameters<T>, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm {
        grads.scale(T::lit(max_norm / norm));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn zero_gradient_leaves_parameters() {
        let config = ModelConfig { num_layers: 1, hidden_size: 8, num_heads: 2, intermediate_size: 16, vocab_size: 20, max_positions: 8, ..ModelConfig::tiny() };
        let mut params = Parameters::<f32>::init(&config, 1);
        let before = params.clone();
        let grads = params.zeros_like();
        let mut state = OptimizerState::for_params(&params);
        adam_step(&mut params, &grads, &mut state, 1e-3, &AdamConfig::default()).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let (mut x, mut m, mut v) = ([1.0f64], [0.0], [0.0]);
        adam_update(&mut x, &[2.0], &mut m, &mut v, 1, 1e-4, &AdamConfig::default());
        let expected = 1.0 - 1e-4 * 2.0 / (2.0 + 1e-8);
        assert!((x[0] - expected).abs() < 1e-16);
        assert!((x[0] - (1.0 - 1e-4)).abs() < 1e-11);
    }

    #[test]
    fn two_steps_by_hand() {
        // m1 = 0.1, v1 = 0.001, m2 = 0.19, v2 = 0.001999; both bias-corrected
        // ratios are exactly 1, so each step moves by lr / (1 + eps).
        let hp = AdamConfig::default();
        let (mut x, mut m, mut v) = ([0.5f64], [0.0], [0.0]);
        adam_update(&mut x, &[1.0], &mut m, &mut v, 1, 0.1, &hp);
        adam_update(&mut x, &[1.0], &mut m, &mut v, 2, 0.1, &hp);
        assert!((m[0] - 0.19).abs() < 1e-15);
        assert!((v[0] - 0.001999).abs() < 1e-15);
        assert!((x[0] - (0.5 - 0.2 / (1.0 + 1e-8))).abs() < 1e-14);
    }

    #[test]
    fn scale_equivariant_without_epsilon() {
        let hp = AdamConfig { epsilon: 0.0, ..Default::default() };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let g: Vec<Vec<f64>> = (0..3).map(|_| (0..50).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let theta0: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
        let run = |c: f64| {
            let (mut x, mut m, mut v) = (theta0.clone(), vec![0.0; 50], vec![0.0; 50]);
            for (t, gt) in g.iter().enumerate() {
                let scaled: Vec<f64> = gt.iter().map(|x| x * c).collect();
                adam_update(&mut x, &scaled, &mut m, &mut v, t as u64 + 1, 0.01, &hp);
            }
            x
        };
        let a = run(1.0);
        for c in [1e-3, 7.5, 1e4] {
            for (x, y) in a.iter().zip(run(c)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn non_finite_gradient_is_an_error() {
        let config = ModelConfig { num_layers: 0, hidden_size: 4, num_heads: 1, intermediate_size: 4, vocab_size: 8, max_positions: 4, ..ModelConfig::tiny() };
        let mut params = Parameters::<f32>::init(&config, 1);
        let before = params.clone();
        let mut grads = params.zeros_like();
        grads.pooler_b.data[1] = f32::NAN;
        let mut state = OptimizerState::for_params(&params);
        let err = adam_step(&mut params, &grads, &mut state, 1e-3, &AdamConfig::default()).unwrap_err();
        assert_eq!(err.to_string(), "non-finite gradient in pooler.bias");
        assert_eq!(params, before);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn clipping() {
        let config = ModelConfig { num_layers: 0, hidden_size: 4, num_heads: 1, intermediate_size: 4, vocab_size: 8, max_positions: 4, ..ModelConfig::tiny() };
        let mut g = Parameters::<f64>::zeros(&config);
        g.pooler_b.data[0] = 3.0;
        g.qa_b.data[1] = 4.0;
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((grad_norm(&g) - 1.0).abs() < 1e-15);
    }
}
