//! AdamW, the warmup-stable-decay learning rate, EMA and gradient clipping.

use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::math;
use crate::tensor::Matrix;

/// Warmup-stable-decay: linear `0 → peak` over the first `warmup_frac` of
/// `total`, flat, then linear `peak → 0` over the last `decay_frac`.
pub fn wsd_lr(step: u64, total: u64, peak: f64, warmup_frac: f64, decay_frac: f64) -> f64 {
    let total_f = total as f64;
    let warmup = warmup_frac * total_f;
    let decay = decay_frac * total_f;
    let s = step.min(total) as f64;
    if s < warmup {
        peak * s / warmup
    } else if s > total_f - decay {
        peak * (total_f - s) / decay
    } else {
        peak
    }
}

/// `ema ← decay·ema + (1−decay)·param`.
pub fn ema_update(ema: &mut [Matrix], params: &[Matrix], decay: f64) -> Result<()> {
    if ema.len() != params.len() {
        return Err(shape_err("ema table", params.len(), ema.len()));
    }
    for (e, p) in ema.iter_mut().zip(params) {
        if e.shape() != p.shape() {
            return Err(shape_err("ema entry", p.shape(), e.shape()));
        }
        for (ev, pv) in e.data.iter_mut().zip(&p.data) {
            *ev = decay * *ev + (1.0 - decay) * pv;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First and second moment estimates, one matrix per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl Moments {
    pub fn zeros_like(params: &[Matrix]) -> Self {
        let z: Vec<Matrix> = params.iter().map(|p| Matrix::zeros(p.rows, p.cols)).collect();
        Self { m: z.clone(), v: z }
    }
}

impl AdamW {
    /// One update at 1-based `step`. Nothing is modified when a gradient is
    /// non-finite.
    pub fn step(&self, params: &mut [Matrix], grads: &[Matrix], mom: &mut Moments, step: u64, lr: f64) -> Result<()> {
        if step == 0 {
            return Err(Error::InvalidRange("optimizer steps are 1-based".into()));
        }
        if grads.len() != params.len() || mom.m.len() != params.len() || mom.v.len() != params.len() {
            return Err(shape_err("optimizer tables", params.len(), grads.len()));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(shape_err("gradient", p.shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(alloc::format!("parameter {i}")));
            }
        }
        let bc1 = 1.0 - math::powf(self.beta1, step as f64);
        let bc2 = 1.0 - math::powf(self.beta2, step as f64);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(mom.m.iter_mut().zip(mom.v.iter_mut())) {
            for k in 0..p.data.len() {
                let gk = g.data[k];
                m.data[k] = self.beta1 * m.data[k] + (1.0 - self.beta1) * gk;
                v.data[k] = self.beta2 * v.data[k] + (1.0 - self.beta2) * gk * gk;
                let m_hat = m.data[k] / bc1;
                let v_hat = v.data[k] / bc2;
                p.data[k] -= lr * (self.weight_decay * p.data[k] + m_hat / (math::sqrt(v_hat) + self.eps));
            }
        }
        Ok(())
    }
}

pub fn global_norm(grads: &[Matrix]) -> f64 {
    math::sqrt(grads.iter().map(Matrix::sum_sq).sum())
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale(s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn scalar(v: f64) -> Vec<Matrix> {
        vec![Matrix::filled(1, 1, v)]
    }

    #[test]
    fn wsd_examples() {
        assert_eq!(wsd_lr(0, 100, 3e-4, 0.1, 0.1), 0.0);
        assert_eq!(wsd_lr(50, 100, 3e-4, 0.1, 0.1), 3e-4);
        assert!((wsd_lr(95, 100, 3e-4, 0.1, 0.1) - 1.5e-4).abs() < 1e-18);
        assert!((wsd_lr(5, 100, 3e-4, 0.1, 0.1) - 1.5e-4).abs() < 1e-18);
        assert_eq!(wsd_lr(100, 100, 3e-4, 0.1, 0.1), 0.0);
        assert_eq!(wsd_lr(10, 100, 1.0, 0.0, 0.0), 1.0);
    }

    #[test]
    fn ema_examples() {
        let mut e = scalar(5.0);
        ema_update(&mut e, &scalar(2.0), 0.0).unwrap();
        assert_eq!(e[0].data[0], 2.0);

        let mut e = scalar(0.0);
        for _ in 0..10 {
            ema_update(&mut e, &scalar(1.0), 0.9999).unwrap();
        }
        assert!((e[0].data[0] - 9.9955e-4).abs() < 1e-7);
        assert!(ema_update(&mut e, &[], 0.5).is_err());
    }

    #[test]
    fn ema_matches_closed_form() {
        let (e0, p, d) = (-0.8, 1.7, 0.999);
        let mut e = scalar(e0);
        for k in 1..=10_000 {
            ema_update(&mut e, &scalar(p), d).unwrap();
            if k % 1000 == 0 {
                let closed = p + (e0 - p) * d.powi(k);
                assert!((e[0].data[0] - closed).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adamw_examples() {
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        let mut p = scalar(0.3);
        let mut mom = Moments::zeros_like(&p);
        opt.step(&mut p, &scalar(0.0), &mut mom, 1, 0.1).unwrap();
        assert_eq!(p[0].data[0], 0.3);

        let mut p = scalar(0.0);
        let mut mom = Moments::zeros_like(&p);
        opt.step(&mut p, &scalar(1.0), &mut mom, 1, 0.1).unwrap();
        assert!((p[0].data[0] + 0.1).abs() < 1e-6);

        let opt = AdamW {
            weight_decay: 0.1,
            ..AdamW::default()
        };
        let mut p = scalar(1.0);
        let mut mom = Moments::zeros_like(&p);
        opt.step(&mut p, &scalar(0.0), &mut mom, 1, 0.1).unwrap();
        assert!((p[0].data[0] - 0.99).abs() < 1e-15);

        let before = p.clone();
        let err = opt.step(&mut p, &scalar(f64::NAN), &mut mom, 2, 0.1);
        assert!(matches!(err, Err(Error::NonFiniteGradient(_))));
        assert_eq!(p, before);
        assert!(opt.step(&mut p, &scalar(0.0), &mut mom, 0, 0.1).is_err());
    }

    #[test]
    fn adamw_solves_convex_quadratic() {
        // f(x) = Σ a_i (x_i − c_i)²
        let a = [1.0, 10.0, 0.3];
        let c = [2.0, -1.0, 0.5];
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        let mut p = vec![Matrix::zeros(1, 3)];
        let mut mom = Moments::zeros_like(&p);
        for step in 1..=5000u64 {
            let g: Vec<f64> = (0..3).map(|i| 2.0 * a[i] * (p[0].data[i] - c[i])).collect();
            let lr = 0.05 * (1.0 - step as f64 / 5000.0) + 1e-4;
            opt.step(&mut p, &[Matrix::from_vec(1, 3, g).unwrap()], &mut mom, step, lr)
                .unwrap();
        }
        for (x, target) in p[0].data.iter().zip(c) {
            assert!((x - target).abs() < 1e-3, "{:?}", p[0].data);
        }
    }

    #[test]
    fn clipping() {
        let mut g = vec![Matrix::from_vec(1, 2, vec![3.0, 4.0]).unwrap()];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-15);
        let mut small = vec![Matrix::from_vec(1, 2, vec![0.3, 0.4]).unwrap()];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].data, vec![0.3, 0.4]);
    }
}
