//! Central-difference checks of every layer's hand-written backward pass.

use disc_grade_core::data_model::DiscLevel;
use disc_grade_core::models::{Preset, RoiRegressor};
use disc_grade_core::nn::*;
use disc_grade_core::rng::rng_from;
use rand::Rng;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = rng_from(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect())
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data.iter().zip(&b.data).map(|(&x, &y)| x as f64 * y as f64).sum()
}

trait Module {
    fn fwd(&mut self, ps: &mut ParamStore, x: &Tensor, pass: Pass) -> Tensor;
    fn bwd(&mut self, ps: &mut ParamStore, g: &Tensor) -> Tensor;
}

macro_rules! module_with_params {
    ($t:ty) => {
        impl Module for $t {
            fn fwd(&mut self, ps: &mut ParamStore, x: &Tensor, pass: Pass) -> Tensor {
                self.forward(ps, x, pass)
            }
            fn bwd(&mut self, ps: &mut ParamStore, g: &Tensor) -> Tensor {
                self.backward(ps, g)
            }
        }
    };
}
macro_rules! module_stateless {
    ($t:ty) => {
        impl Module for $t {
            fn fwd(&mut self, _: &mut ParamStore, x: &Tensor, pass: Pass) -> Tensor {
                self.forward(x, pass)
            }
            fn bwd(&mut self, _: &mut ParamStore, g: &Tensor) -> Tensor {
                self.backward(g)
            }
        }
    };
}
module_with_params!(Conv2d);
module_with_params!(BatchNorm);
module_with_params!(Linear);
module_with_params!(BasicBlock);
module_stateless!(MaxPool2d);
module_stateless!(GlobalAvgPool);
module_stateless!(Sigmoid);

/// Compares analytic gradients of `sum(r * f(x))` against central differences
/// for a sample of input entries and parameter entries.
fn check(m: &mut dyn Module, ps: &mut ParamStore, x: &Tensor, check_input: bool) -> f64 {
    check_eps(m, ps, x, check_input, 1e-2)
}

fn check_eps(m: &mut dyn Module, ps: &mut ParamStore, x: &Tensor, check_input: bool, eps: f32) -> f64 {
    let y = m.fwd(ps, x, Pass::TRAIN);
    let r = rand_tensor(&y.shape, 99);
    ps.zero_grad();
    let gx = m.bwd(ps, &r);
    let mut worst = 0.0f64;
    let mut compare = |analytic: f64, numeric: f64| {
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-1);
        worst = worst.max(err);
    };
    // Probes use training-mode statistics without caching.
    let probe = Pass {
        mode: Mode::Train,
        record: false,
    };
    if check_input {
        for i in (0..x.numel()).step_by((x.numel() / 20).max(1)) {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let lp = dot(&m.fwd(ps, &xp, probe), &r);
            xp.data[i] -= 2.0 * eps;
            let lm = dot(&m.fwd(ps, &xp, probe), &r);
            compare(gx.data[i] as f64, (lp - lm) / (2.0 * eps as f64));
        }
    }
    let ids: Vec<ParamId> = ps
        .iter()
        .filter(|(_, p)| p.kind == ParamKind::Weight)
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let n = ps.get(id).value.len();
        for i in (0..n).step_by((n / 8).max(1)) {
            let analytic = ps.get(id).grad[i] as f64;
            let orig = ps.get(id).value[i];
            ps.get_mut(id).value[i] = orig + eps;
            let lp = dot(&m.fwd(ps, x, probe), &r);
            ps.get_mut(id).value[i] = orig - eps;
            let lm = dot(&m.fwd(ps, x, probe), &r);
            ps.get_mut(id).value[i] = orig;
            compare(analytic, (lp - lm) / (2.0 * eps as f64));
        }
    }
    worst
}

#[test]
fn conv_strided_and_padded() {
    let mut ps = ParamStore::new();
    let mut conv = Conv2d::new(&mut ps, "c", 2, 3, 3, 2, 1, &mut rng_from(1));
    let worst = check(&mut conv, &mut ps, &rand_tensor(&[2, 2, 7, 7], 2), true);
    assert!(worst < 1e-2, "{worst}");
}

#[test]
fn conv_pointwise() {
    let mut ps = ParamStore::new();
    let mut conv = Conv2d::new(&mut ps, "c", 3, 2, 1, 1, 0, &mut rng_from(1));
    let worst = check(&mut conv, &mut ps, &rand_tensor(&[2, 3, 4, 4], 2), true);
    assert!(worst < 1e-2, "{worst}");
}

#[test]
fn batch_norm_training_mode() {
    let mut ps = ParamStore::new();
    let mut bn = BatchNorm::new(&mut ps, "bn", 3, &mut rng_from(1));
    let worst = check(&mut bn, &mut ps, &rand_tensor(&[4, 3, 3, 3], 5), true);
    assert!(worst < 1e-2, "{worst}");
    let mut ps = ParamStore::new();
    let mut bn = BatchNorm::new(&mut ps, "bn", 5, &mut rng_from(1));
    let worst = check(&mut bn, &mut ps, &rand_tensor(&[6, 5], 6), true);
    assert!(worst < 1e-2, "{worst}");
}

#[test]
fn linear_layer() {
    let mut ps = ParamStore::new();
    let mut fc = Linear::new(&mut ps, "fc", 7, 4, &mut rng_from(1));
    let worst = check(&mut fc, &mut ps, &rand_tensor(&[3, 7], 7), true);
    assert!(worst < 1e-2, "{worst}");
}

#[test]
fn pooling_and_sigmoid() {
    let mut ps = ParamStore::new();
    // Distinct values keep the max-pool argmax stable under the probe step.
    let x = Tensor::from_vec(&[1, 2, 5, 5], (0..50).map(|i| ((i * 37) % 50) as f32 * 0.1).collect());
    assert!(check(&mut MaxPool2d::new(3, 2, 1), &mut ps, &x, true) < 1e-2);
    assert!(
        check(
            &mut GlobalAvgPool::default(),
            &mut ps,
            &rand_tensor(&[2, 3, 3, 3], 1),
            true
        ) < 1e-2
    );
    assert!(check(&mut Sigmoid::default(), &mut ps, &rand_tensor(&[3, 4], 1), true) < 1e-2);
}

#[test]
fn residual_block_with_projection_shortcut() {
    let mut ps = ParamStore::new();
    let mut blk = BasicBlock::new(&mut ps, "b", 2, 4, 2, &mut rng_from(3));
    let worst = check_eps(&mut blk, &mut ps, &rand_tensor(&[3, 2, 6, 6], 4), true, 2e-3);
    assert!(worst < 3e-2, "{worst}");
}

#[test]
fn residual_block_identity_shortcut() {
    let mut ps = ParamStore::new();
    let mut blk = BasicBlock::new(&mut ps, "b", 3, 3, 1, &mut rng_from(3));
    let worst = check_eps(&mut blk, &mut ps, &rand_tensor(&[2, 3, 5, 5], 4), true, 2e-3);
    assert!(worst < 3e-2, "{worst}");
}

#[test]
fn regressor_head_gradients_reach_embedding() {
    let mut reg = RoiRegressor::new(Preset::Tiny, 0);
    let x = rand_tensor(&[2, 3, 256, 256], 1);
    let levels = [DiscLevel::L2L3, DiscLevel::L4L5];
    // Eval-mode dropout keeps the function deterministic for differencing.
    let pass = Pass {
        mode: Mode::Eval,
        record: true,
    };
    let y = reg.forward(&x, &levels, pass).unwrap();
    let r = rand_tensor(&y.shape, 5);
    reg.ps.zero_grad();
    reg.backward(&r);
    let id = reg.ps.id("regressor.level_embedding.weight").unwrap();
    let eps = 1e-2f32;
    for i in [32 + 3, 3 * 32 + 10] {
        let analytic = reg.ps.get(id).grad[i] as f64;
        let orig = reg.ps.get(id).value[i];
        reg.ps.get_mut(id).value[i] = orig + eps;
        let lp = dot(&reg.forward(&x, &levels, Pass::EVAL).unwrap(), &r);
        reg.ps.get_mut(id).value[i] = orig - eps;
        let lm = dot(&reg.forward(&x, &levels, Pass::EVAL).unwrap(), &r);
        reg.ps.get_mut(id).value[i] = orig;
        let numeric = (lp - lm) / (2.0 * eps as f64);
        assert!(
            (analytic - numeric).abs() <= 1e-2 * analytic.abs().max(1e-3),
            "{analytic} vs {numeric}"
        );
    }
    // Rows of levels absent from the batch receive no gradient.
    assert!(reg.ps.get(id).grad[..32].iter().all(|&g| g == 0.0));
}
