use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd { momentum: f64 },
}

impl Optimizer {
    pub const fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub const fn sgd() -> Self {
        Optimizer::Sgd { momentum: 0.9 }
    }
}

impl Default for Optimizer {
    fn default() -> Self {
        Self::adam()
    }
}

/// Per-tensor first and second moments.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Moments {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Self {
            first: vec![0.0; n],
            second: vec![0.0; n],
        }
    }
}

/// One update of `param` in place. `step` counts from 1.
pub fn apply_update(opt: &Optimizer, param: &mut [f64], grad: &[f64], moments: &mut Moments, lr: f64, step: u64) {
    match *opt {
        Optimizer::Adam { beta1, beta2, eps } => {
            let c1 = 1.0 - beta1.powf(step as f64);
            let c2 = 1.0 - beta2.powf(step as f64);
            for (((p, &g), m), v) in param
                .iter_mut()
                .zip(grad)
                .zip(moments.first.iter_mut())
                .zip(moments.second.iter_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
        Optimizer::Sgd { momentum } => {
            for ((p, &g), m) in param.iter_mut().zip(grad).zip(moments.first.iter_mut()) {
                *m = momentum * *m + g;
                *p -= lr * *m;
            }
        }
    }
}

/// `lr0 · ½(1 + cos(π·iter/total))`, clamped to `iter ≤ total`.
pub fn cosine_lr(iter: usize, total_iters: usize, lr0: f64) -> f64 {
    if total_iters == 0 {
        return lr0;
    }
    let frac = iter.min(total_iters) as f64 / total_iters as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 1e-3), 1e-3);
        assert!(cosine_lr(100, 100, 1e-3).abs() < 1e-19);
        assert!((cosine_lr(50, 100, 1e-3) - 5e-4).abs() < 1e-18);
        assert!(cosine_lr(30, 100, 1.0) > cosine_lr(31, 100, 1.0));
    }

    #[test]
    fn adam_first_steps_closed_form() {
        // f(x) = (x - 3)², x0 = 0, lr 0.1
        let opt = Optimizer::adam();
        let mut x = [0.0];
        let mut mom = Moments::zeros(1);
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.1);
        let (mut m, mut v, mut xr) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=3u64 {
            let g = 2.0 * (x[0] - 3.0);
            apply_update(&opt, &mut x, &[g], &mut mom, lr, t);
            let gr = 2.0 * (xr - 3.0);
            m = b1 * m + (1.0 - b1) * gr;
            v = b2 * v + (1.0 - b2) * gr * gr;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            xr -= lr * mh / (vh.sqrt() + eps);
            assert!((x[0] - xr).abs() < 1e-15);
        }
        // the first Adam step moves by lr regardless of gradient scale
        let mut y = [0.0];
        apply_update(&opt, &mut y, &[-1234.5], &mut Moments::zeros(1), 0.1, 1);
        assert!((y[0] - 0.1).abs() < 1e-9);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let opt = Optimizer::adam();
        let mut x = [0.0];
        let mut mom = Moments::zeros(1);
        for t in 1..=2000 {
            let g = 2.0 * (x[0] - 3.0);
            apply_update(&opt, &mut x, &[g], &mut mom, cosine_lr(t as usize, 2000, 0.1), t);
        }
        assert!((x[0] - 3.0).abs() < 1e-3, "{}", x[0]);
    }

    #[test]
    fn sgd_momentum() {
        let opt = Optimizer::Sgd { momentum: 0.5 };
        let mut x = [1.0];
        let mut mom = Moments::zeros(1);
        apply_update(&opt, &mut x, &[2.0], &mut mom, 0.1, 1);
        assert!((x[0] - 0.8).abs() < 1e-15);
        apply_update(&opt, &mut x, &[2.0], &mut mom, 0.1, 2);
        assert!((x[0] - 0.5).abs() < 1e-15);
    }
}
