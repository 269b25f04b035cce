//! Adam with bias correction, per-step exponential learning-rate decay, and
//! decoupled weight decay (applied only to parameter groups that opt in).

use super::real::Real;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig<F: Real> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    /// Multiplicative decay applied per step: `lr_t = lr * decay^(t-1)`.
    pub lr_decay: F,
    /// Decoupled weight decay coefficient (`theta -= lr_t * wd * theta`).
    pub weight_decay: F,
}

impl<F: Real> AdamConfig<F> {
    pub fn standard(lr: F) -> Self {
        AdamConfig {
            lr,
            beta1: F::from_f64(0.9),
            beta2: F::from_f64(0.999),
            eps: F::from_f64(1e-8),
            lr_decay: F::ONE,
            weight_decay: F::ZERO,
        }
    }
}

struct Moment<F> {
    m: Vec<F>,
    v: Vec<F>,
}

pub struct Adam<F: Real> {
    cfg: AdamConfig<F>,
    t: u64,
    slots: Vec<Moment<F>>,
}

impl<F: Real> Adam<F> {
    /// `sizes[i]` is the element count of parameter slot `i`.
    pub fn new(cfg: AdamConfig<F>, sizes: &[usize]) -> Self {
        Adam {
            cfg,
            t: 0,
            slots: sizes
                .iter()
                .map(|&n| Moment {
                    m: vec![F::ZERO; n],
                    v: vec![F::ZERO; n],
                })
                .collect(),
        }
    }

    /// Advance the step counter; must be called once per optimization step,
    /// before the `update` calls for that step. Returns the step's lr.
    pub fn begin_step(&mut self) -> F {
        self.t += 1;
        self.lr_t()
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    fn lr_t(&self) -> F {
        self.cfg.lr * self.cfg.lr_decay.powi((self.t - 1) as i32)
    }

    pub fn update(&mut self, slot: usize, values: &mut [F], grad: &[F], apply_decay: bool) {
        assert!(self.t >= 1, "begin_step before update");
        assert_eq!(values.len(), grad.len());
        let c = &self.cfg;
        let lr = self.lr_t();
        let bc1 = F::ONE - c.beta1.powi(self.t as i32);
        let bc2 = F::ONE - c.beta2.powi(self.t as i32);
        let st = &mut self.slots[slot];
        assert_eq!(st.m.len(), values.len(), "slot size mismatch");
        for i in 0..values.len() {
            let g = grad[i];
            st.m[i] = c.beta1 * st.m[i] + (F::ONE - c.beta1) * g;
            st.v[i] = c.beta2 * st.v[i] + (F::ONE - c.beta2) * g * g;
            let mhat = st.m[i] / bc1;
            let vhat = st.v[i] / bc2;
            let mut step = mhat / (vhat.sqrt() + c.eps);
            if apply_decay {
                step += c.weight_decay * values[i];
            }
            values[i] -= lr * step;
        }
    }
}
