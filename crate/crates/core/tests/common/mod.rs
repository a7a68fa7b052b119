#![allow(dead_code)]

use candle_core::{Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Largest relative error between the analytic gradient of `loss` and a
/// central difference, over `samples` random coordinates of every var.
/// Vars are perturbed in place and restored.
pub fn max_grad_error(vars: &[&Var], loss: &dyn Fn() -> Tensor, samples: usize, seed: u64) -> f64 {
    let grads = loss().backward().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eval = || -> f64 { loss().to_scalar::<f64>().unwrap() };
    let h = 1e-5;
    let mut worst = 0f64;
    for v in vars {
        let g: Vec<f64> = grads
            .get(v.as_tensor())
            .map(|g| g.flatten_all().unwrap().to_vec1().unwrap())
            .unwrap_or_else(|| vec![0.0; v.as_tensor().elem_count()]);
        let base = v.as_tensor().copy().unwrap();
        let flat: Vec<f64> = base.flatten_all().unwrap().to_vec1().unwrap();
        let set = |vals: Vec<f64>| {
            v.set(&Tensor::from_vec(vals, base.shape(), &Device::Cpu).unwrap())
                .unwrap();
        };
        for _ in 0..samples {
            let i = rng.random_range(0..flat.len());
            let mut p = flat.clone();
            p[i] += h;
            set(p);
            let lp = eval();
            let mut m = flat.clone();
            m[i] -= h;
            set(m);
            let lm = eval();
            v.set(&base).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}
