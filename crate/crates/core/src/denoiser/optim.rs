use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_EMA_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update in place. A non-finite gradient leaves
/// both the weights and the state untouched and reports divergence.
pub fn adam_step(weights: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if weights.len() != grads.len() || weights.len() != state.m.len() {
        return Err(Error::DimensionMismatch(weights.len(), grads.len()));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::TrainingDiverged {
            epoch: None,
            last_good_epoch: None,
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..weights.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        weights[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Exponential moving average of end-of-epoch weights:
/// `shadow = (1 - momentum) * shadow + momentum * weights`, with the first
/// update copying the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    pub momentum: f64,
    shadow: Option<Vec<f64>>,
    updates: usize,
}

impl EmaState {
    pub fn new(momentum: f64) -> Self {
        assert!((0.0..=1.0).contains(&momentum), "momentum outside [0, 1]");
        Self {
            momentum,
            shadow: None,
            updates: 0,
        }
    }

    pub fn shadow(&self) -> Option<&[f64]> {
        self.shadow.as_deref()
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    pub fn update(&mut self, weights: &[f64]) -> Result<()> {
        match &mut self.shadow {
            None => self.shadow = Some(weights.to_vec()),
            Some(shadow) => {
                if shadow.len() != weights.len() {
                    return Err(Error::DimensionMismatch(shadow.len(), weights.len()));
                }
                let m = self.momentum;
                for (s, w) in shadow.iter_mut().zip(weights) {
                    *s = (1.0 - m) * *s + m * w;
                }
            }
        }
        self.updates += 1;
        Ok(())
    }
}

impl Default for EmaState {
    fn default() -> Self {
        Self::new(DEFAULT_EMA_MOMENTUM)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::NoiseRng;
    use proptest::prelude::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [1e-6, 0.3, 250.0] {
            let mut w = vec![0.0; 3];
            let mut s = AdamState::new(3);
            adam_step(&mut w, &[g, -g, g], &mut s, 1e-3).unwrap();
            for (i, wi) in w.iter().enumerate() {
                let sign = if i == 1 { 1.0 } else { -1.0 };
                assert!((wi - sign * 1e-3).abs() < 1e-3 * 1e-2, "g={g}: {wi}");
            }
        }
    }

    #[test]
    fn zero_gradient_leaves_weights() {
        let mut w = vec![0.5, -1.0];
        let mut s = AdamState::new(2);
        adam_step(&mut w, &[0.0, 0.0], &mut s, 0.1).unwrap();
        assert_eq!(w, vec![0.5, -1.0]);
    }

    #[test]
    fn non_finite_gradient_is_divergence() {
        let mut w = vec![0.5];
        let mut s = AdamState::new(1);
        assert!(matches!(
            adam_step(&mut w, &[f64::NAN], &mut s, 0.1),
            Err(Error::TrainingDiverged { .. })
        ));
        assert_eq!(w, vec![0.5]);
        assert_eq!(s.steps(), 0);
    }

    #[test]
    fn quadratic_bowl_descends() {
        // f(w) = sum_i c_i (w_i - 1)^2
        let c = [1.0, 10.0, 0.1, 3.0];
        let f = |w: &[f64]| -> f64 { w.iter().zip(&c).map(|(x, ci)| ci * (x - 1.0).powi(2)).sum() };
        let mut w = vec![-2.0, 3.0, 0.0, 5.0];
        let mut s = AdamState::new(4);
        let mut history = vec![f(&w)];
        for _ in 0..500 {
            let g: Vec<f64> = w.iter().zip(&c).map(|(x, ci)| 2.0 * ci * (x - 1.0)).collect();
            adam_step(&mut w, &g, &mut s, 0.01).unwrap();
            history.push(f(&w));
        }
        // Monotone after a short warmup.
        assert!(history[20..].windows(2).all(|p| p[1] <= p[0] + 1e-12));
        assert!(history[500] < 0.1 * history[0]);
    }

    #[test]
    fn ema_examples() {
        let mut e = EmaState::new(0.1);
        for _ in 0..5 {
            e.update(&[2.0, -3.0]).unwrap();
            assert_eq!(e.shadow().unwrap(), &[2.0, -3.0]);
        }

        let mut e = EmaState::new(1.0);
        for w in [[1.0], [4.0], [-2.0]] {
            e.update(&w).unwrap();
            assert_eq!(e.shadow().unwrap(), &w);
        }

        let mut e = EmaState::new(0.1);
        e.update(&[0.0]).unwrap();
        e.update(&[1.0]).unwrap();
        assert!((e.shadow().unwrap()[0] - 0.1).abs() < 1e-15);

        assert!(matches!(e.update(&[1.0, 2.0]), Err(Error::DimensionMismatch(1, 2))));
    }

    proptest! {
        #[test]
        fn ema_stays_within_history_bounds(seed in 0u64..1000, len in 1usize..30) {
            let mut rng = NoiseRng::new(seed);
            let mut e = EmaState::default();
            let mut lo = [f64::INFINITY; 3];
            let mut hi = [f64::NEG_INFINITY; 3];
            for _ in 0..len {
                let w = rng.gaussian_vec(3);
                for i in 0..3 {
                    lo[i] = lo[i].min(w[i]);
                    hi[i] = hi[i].max(w[i]);
                }
                e.update(&w).unwrap();
                let s = e.shadow().unwrap();
                for i in 0..3 {
                    prop_assert!(s[i] >= lo[i] - 1e-12 && s[i] <= hi[i] + 1e-12);
                }
            }
        }
    }
}
