use crate::error::Result;
use crate::model::checkpoint::OptimizerState;
use crate::model::Parameters;

/// Adam with decoupled weight decay. Decay applies to arrays with two or
/// more dimensions (weights), not to biases, norm gains or embeddings rows.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay,
        }
    }

    pub fn init_state(params: &Parameters) -> OptimizerState {
        OptimizerState {
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn step(
        &self,
        params: &mut Parameters,
        grads: &Parameters,
        state: &mut OptimizerState,
        lr: f64,
    ) -> Result<()> {
        state.t += 1;
        let bc1 = 1.0 - self.beta1.powi(state.t.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - self.beta2.powi(state.t.min(i32::MAX as u64) as i32);
        state.m.zip_mut(grads, |_, _, m, g| {
            for (m, &g) in m.data.iter_mut().zip(&g.data) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            }
        })?;
        state.v.zip_mut(grads, |_, _, v, g| {
            for (v, &g) in v.data.iter_mut().zip(&g.data) {
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            }
        })?;
        let (m, v) = (&state.m, &state.v);
        let mut moments = m.named().into_iter().zip(v.named());
        params.for_each_mut(|_, _, p| {
            let ((_, _, m), (_, _, v)) = moments.next().expect("congruent moments");
            let decay = if p.shape.len() >= 2 { lr * self.weight_decay } else { 0.0 };
            for ((x, &m), &v) in p.data.iter_mut().zip(&m.data).zip(&v.data) {
                let update = (m / bc1) / ((v / bc2).sqrt() + self.eps);
                *x -= decay * *x + lr * update;
            }
        });
        Ok(())
    }
}

/// Global L2 norm of all gradient values.
pub fn grad_norm(grads: &Parameters) -> f64 {
    let mut s = 0.0;
    grads.for_each(|_, _, t| s += t.data.iter().map(|v| v * v).sum::<f64>());
    s.sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping. `max_norm <= 0` disables clipping.
pub fn clip_grad_norm(grads: &mut Parameters, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        grads.for_each_mut(|_, _, t| t.data.iter_mut().for_each(|v| *v *= scale));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let cfg = ModelConfig::tiny();
        let mut p = Parameters::init(&cfg, 0).unwrap();
        let before = p.clone();
        let g = Parameters::init(&cfg, 1).unwrap();
        let mut st = AdamW::init_state(&p);
        AdamW::new(0.01).step(&mut p, &g, &mut st, 0.0).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_moves_against_gradient_sign() {
        let cfg = ModelConfig::tiny();
        let mut p = Parameters::init(&cfg, 0).unwrap();
        let before = p.clone();
        let g = Parameters::init(&cfg, 1).unwrap();
        let mut st = AdamW::init_state(&p);
        AdamW::new(0.0).step(&mut p, &g, &mut st, 1e-3).unwrap();
        let (a, b, c) = (p.named(), before.named(), g.named());
        for ((x, y), z) in a.iter().zip(&b).zip(&c) {
            for ((x, y), z) in x.2.data.iter().zip(&y.2.data).zip(&z.2.data) {
                if z.abs() > 1e-3 {
                    // bias-corrected first step is lr * sign(g) up to eps
                    assert!(((y - x) - 1e-3 * z.signum()).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn clipping_caps_the_norm() {
        let cfg = ModelConfig::tiny();
        let mut g = Parameters::init(&cfg, 3).unwrap();
        let n = grad_norm(&g);
        assert_eq!(clip_grad_norm(&mut g, 0.0), n);
        let before = clip_grad_norm(&mut g, n / 2.0);
        assert_eq!(before, n);
        assert!((grad_norm(&g) - n / 2.0).abs() < 1e-9 * n);
    }
}
