//! Central finite-difference checks of the analytic gradients.
//!
//! Every layer kind is checked in `f64` against `(f(x+h) − f(x−h)) / 2h`
//! with `h = 1e-3`, using the scalar loss `Σ r ⊙ layer(x)` for a random
//! projection `r`. The error of one gradient block (the input gradient or
//! one parameter tensor) is `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{BatchNorm2d, Conv2d, Layer, Linear, ReflectionPad, Result, Tensor, TrainMode};

pub const FD_STEP: f64 = 1e-3;
pub const REL_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub instances: usize,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < REL_TOLERANCE
    }
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`; zero when both vectors vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn projected(layer: &Layer<f64>, x: &Tensor<f64>, mode: TrainMode, r: &[f64]) -> f64 {
    let mut l = layer.clone();
    let (y, _) = l.forward_traced(x, mode).expect("forward on checked input");
    y.data().iter().zip(r).map(|(a, b)| a * b).sum()
}

/// Largest relative error over the input gradient and every parameter
/// gradient of `layer` at `x`.
pub fn check_layer(layer: &Layer<f64>, x: &Tensor<f64>, mode: TrainMode, rng: &mut impl Rng) -> Result<f64> {
    let mut analytic = layer.clone();
    let (y, cache) = analytic.forward_traced(x, mode)?;
    let r: Vec<f64> = (0..y.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let grad_out = Tensor::new(y.shape().to_vec(), r.clone())?;
    let dx = analytic.backward(x, &cache, mode, grad_out.clone())?;

    let num_dx = numeric_gradient(
        |v| {
            let xt = Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap();
            projected(layer, &xt, mode, &r)
        },
        x.data(),
        FD_STEP,
    );
    let mut worst = relative_error(dx.data(), &num_dx);

    let n_params = layer.params().len();
    for pi in 0..n_params {
        let base = layer.params()[pi].data().to_vec();
        let num = numeric_gradient(
            |v| {
                let mut l = layer.clone();
                l.params_mut()[pi].data_mut().copy_from_slice(v);
                projected(&l, x, mode, &r)
            },
            &base,
            FD_STEP,
        );
        let params = analytic.params();
        let ana = params[pi].grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; base.len()]);
        worst = worst.max(relative_error(&ana, &num));
    }
    Ok(worst)
}

fn away_from_zero(rng: &mut impl Rng) -> f64 {
    let mag = rng.gen_range(0.1..1.0);
    if rng.gen_bool(0.5) {
        mag
    } else {
        -mag
    }
}

/// Input whose 2×2 windows hold values at least 0.05 apart, so no
/// finite-difference probe can swap a window's maximum.
fn separated_input(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut levels: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        levels.swap(i, rng.gen_range(0..=i));
    }
    Tensor::from_fn(shape, |i| levels[i] as f64 * 0.05 - 1.0 + rng.gen_range(0.0..0.01))
}

fn uniform(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

type Case = (&'static str, TrainMode, fn(&mut ChaCha8Rng) -> (Layer<f64>, Tensor<f64>));

fn cases() -> Vec<Case> {
    vec![
        ("reflection_pad", TrainMode::Training, |rng| {
            let p = rng.gen_range(1..3);
            (Layer::ReflectionPad(ReflectionPad { pad: p }), uniform(&[2, 2, 4, 5], rng))
        }),
        ("conv2d", TrainMode::Training, |rng| {
            let cin = rng.gen_range(1..3);
            let cout = rng.gen_range(1..4);
            (Layer::Conv(Conv2d::new(cin, cout, 3, rng)), uniform(&[2, cin, 5, 4], rng))
        }),
        ("relu", TrainMode::Training, |rng| {
            (Layer::Relu, Tensor::from_fn(&[2, 3, 3, 3], |_| away_from_zero(rng)))
        }),
        ("batchnorm_training", TrainMode::Training, |rng| {
            let mut bn = BatchNorm2d::new(3);
            bn.gamma = Tensor::from_fn(&[3], |_| rng.gen_range(0.5..1.5));
            bn.beta = uniform(&[3], rng);
            (Layer::BatchNorm(bn), Tensor::from_fn(&[3, 3, 2, 3], |_| rng.gen_range(-2.0..3.0)))
        }),
        ("batchnorm_evaluation", TrainMode::Evaluation, |rng| {
            let mut bn = BatchNorm2d::new(2);
            bn.gamma = Tensor::from_fn(&[2], |_| rng.gen_range(0.5..1.5));
            bn.beta = uniform(&[2], rng);
            bn.running_mean = vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            bn.running_var = vec![rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0)];
            (Layer::BatchNorm(bn), uniform(&[2, 2, 3, 3], rng))
        }),
        ("maxpool2x2", TrainMode::Training, |rng| {
            (Layer::MaxPool2x2, separated_input(&[2, 2, 4, 4], rng))
        }),
        ("flatten", TrainMode::Training, |rng| (Layer::Flatten, uniform(&[3, 2, 2, 3], rng))),
        ("linear", TrainMode::Training, |rng| {
            let fin = rng.gen_range(2..7);
            let fout = rng.gen_range(1..5);
            (Layer::Linear(Linear::new(fin, fout, rng)), uniform(&[3, fin], rng))
        }),
    ]
}

/// Runs every layer kind on `instances` random configurations.
pub fn check_all_layers(instances: usize, seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for (name, mode, make) in cases() {
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            let (layer, x) = make(&mut rng);
            worst = worst.max(check_layer(&layer, &x, mode, &mut rng)?);
        }
        reports.push(GradCheckReport {
            name: name.to_string(),
            instances,
            max_rel_error: worst,
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_gradient_of_known_function() {
        // f(x, y) = x²·y + sin(y)
        let f = |v: &[f64]| v[0] * v[0] * v[1] + v[1].sin();
        let g = numeric_gradient(f, &[1.5, -0.5], FD_STEP);
        assert!((g[0] - 2.0 * 1.5 * -0.5).abs() < 1e-6);
        assert!((g[1] - (1.5f64 * 1.5 + (-0.5f64).cos())).abs() < 1e-6);
    }

    #[test]
    fn relative_error_edge_cases() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn every_layer_kind_passes() {
        let reports = check_all_layers(5, 2024).unwrap();
        assert_eq!(reports.len(), 8);
        for r in &reports {
            assert!(r.passed(), "{} max rel error {:e}", r.name, r.max_rel_error);
        }
    }

    #[test]
    fn corrupted_backward_is_detected() {
        // a layer whose analytic gradient we scale must fail the check
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layer = Layer::Linear(Linear::<f64>::new(3, 2, &mut rng));
        let x = uniform(&[2, 3], &mut rng);
        let mut a = layer.clone();
        let (y, cache) = a.forward_traced(&x, TrainMode::Training).unwrap();
        let g = Tensor::full(y.shape(), 1.0);
        let dx = a.backward(&x, &cache, TrainMode::Training, g.clone()).unwrap();
        let wrong: Vec<f64> = dx.data().iter().map(|v| v * 1.01).collect();
        let num = numeric_gradient(
            |v| {
                let xt = Tensor::new(vec![2, 3], v.to_vec()).unwrap();
                projected(&layer, &xt, TrainMode::Training, g.data())
            },
            x.data(),
            FD_STEP,
        );
        assert!(relative_error(&wrong, &num) > REL_TOLERANCE);
        assert!(relative_error(dx.data(), &num) < REL_TOLERANCE);
    }
}
