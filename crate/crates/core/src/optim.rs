//! Adam with per-parameter lazy state and a cosine learning-rate schedule.
//!
//! State slots are created the first time a parameter receives a gradient
//! and advance only on steps that touch it. A parameter that gets no
//! gradient this step is not read, not written, and its moments do not
//! decay, which keeps off-path parameters bitwise frozen during path-sampled
//! finetuning.

use crate::error::Result;
use crate::tensor::{Real, Tensor};
use std::collections::HashMap;

#[derive(Clone, Copy, Debug)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Slot<F> {
    m: Tensor<F>,
    v: Tensor<F>,
    t: u64,
}

pub struct Adam<F> {
    pub hp: AdamParams,
    slots: HashMap<String, Slot<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(hp: AdamParams) -> Self {
        Adam {
            hp,
            slots: HashMap::new(),
        }
    }

    /// Whether a parameter has ever been stepped.
    pub fn has_state(&self, name: &str) -> bool {
        self.slots.contains_key(name)
    }

    /// One Adam update of a single parameter with the given gradient at the
    /// given learning rate.
    pub fn step(&mut self, name: &str, lr: f64, param: &mut Tensor<F>, grad: &Tensor<F>) -> Result<()> {
        debug_assert_eq!(param.shape(), grad.shape());
        let slot = self.slots.entry(name.to_string()).or_insert_with(|| Slot {
            m: Tensor::zeros(param.shape()),
            v: Tensor::zeros(param.shape()),
            t: 0,
        });
        slot.t += 1;
        let b1 = F::from_f64(self.hp.beta1);
        let b2 = F::from_f64(self.hp.beta2);
        let one = F::one();
        let corr1 = F::from_f64(1.0 - self.hp.beta1.powi(slot.t as i32));
        let corr2 = F::from_f64(1.0 - self.hp.beta2.powi(slot.t as i32));
        let lr = F::from_f64(lr);
        let eps = F::from_f64(self.hp.eps);
        for ((p, g), (m, v)) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(slot.m.data_mut().iter_mut().zip(slot.v.data_mut().iter_mut()))
        {
            *m = b1 * *m + (one - b1) * *g;
            *v = b2 * *v + (one - b2) * *g * *g;
            let mhat = *m / corr1;
            let vhat = *v / corr2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Cosine decay from `base` to zero over `total_steps`; `step` counts
/// completed steps, so the first step runs at `base`.
pub fn cosine_lr(base: f64, step: u64, total_steps: u64) -> f64 {
    if total_steps == 0 {
        return base;
    }
    let t = (step as f64 / total_steps as f64).clamp(0.0, 1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_converges() {
        // minimize x^2 from x = 3
        let mut adam = Adam::<f64>::new(AdamParams::default());
        let mut x = Tensor::new(vec![1], vec![3.0]).unwrap();
        for _ in 0..600 {
            let g = Tensor::new(vec![1], vec![2.0 * x.data()[0]]).unwrap();
            adam.step("x", 0.05, &mut x, &g).unwrap();
        }
        assert!(x.data()[0].abs() < 1e-3, "ended at {}", x.data()[0]);
    }

    #[test]
    fn first_step_magnitude_is_about_lr() {
        // after bias correction the first update is lr * g/|g| up to eps
        let mut adam = Adam::<f64>::new(AdamParams::default());
        let mut x = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        let g = Tensor::new(vec![2], vec![0.3, -7.0]).unwrap();
        adam.step("x", 0.01, &mut x, &g).unwrap();
        assert!((x.data()[0] - (1.0 - 0.01)).abs() < 1e-6);
        assert!((x.data()[1] - (-1.0 + 0.01)).abs() < 1e-6);
    }

    #[test]
    fn unstepped_parameters_have_no_state() {
        let mut adam = Adam::<f32>::new(AdamParams::default());
        let mut a = Tensor::new(vec![1], vec![1.0f32]).unwrap();
        let g = Tensor::new(vec![1], vec![0.5f32]).unwrap();
        adam.step("a", 0.1, &mut a, &g).unwrap();
        assert!(adam.has_state("a"));
        assert!(!adam.has_state("b"));
    }

    #[test]
    fn per_parameter_step_counts_are_independent() {
        // skipping steps for one parameter must not decay its moments
        let mut adam = Adam::<f64>::new(AdamParams::default());
        let mut a = Tensor::new(vec![1], vec![0.0]).unwrap();
        let g = Tensor::new(vec![1], vec![1.0]).unwrap();
        adam.step("a", 0.1, &mut a, &g).unwrap();
        let after_one = a.data()[0];

        // same parameter trained in a fresh optimizer with interleaved
        // steps of an unrelated parameter lands in the same place
        let mut adam2 = Adam::<f64>::new(AdamParams::default());
        let mut a2 = Tensor::new(vec![1], vec![0.0]).unwrap();
        let mut other = Tensor::new(vec![1], vec![5.0]).unwrap();
        adam2.step("other", 0.1, &mut other, &g).unwrap();
        adam2.step("a", 0.1, &mut a2, &g).unwrap();
        assert_eq!(a2.data()[0].to_bits(), after_one.to_bits());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 100), 0.1);
        assert!((cosine_lr(0.1, 50, 100) - 0.05).abs() < 1e-12);
        assert!(cosine_lr(0.1, 100, 100).abs() < 1e-12);
        assert!(cosine_lr(0.1, 30, 100) > cosine_lr(0.1, 70, 100));
    }
}
