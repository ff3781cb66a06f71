mod common;

use common::{numeric_grad, random_tensor, rel_err, Fixture};
use pfrnn::model::ModelKind;
use pfrnn::rng::RngStream;
use pfrnn::tensor::{concat, Tensor};

fn check_unary(shape: &[usize], seed: u64, f: impl Fn(&Tensor) -> Tensor) {
    let mut rng = RngStream::new(seed);
    let x = random_tensor(&mut rng, shape, 1.0).into_param();
    let grads = f(&x).backward().unwrap();
    let analytic = grads.get_or_zeros(&x);
    let numeric = numeric_grad(x.data(), 1e-6, |v| f(&Tensor::new(v.to_vec(), shape).unwrap()).item());
    for (a, n) in analytic.iter().zip(&numeric) {
        assert!((a - n).abs() < 1e-6 * (1.0 + n.abs()), "autodiff {a} numeric {n}");
    }
}

#[test]
fn elementwise_ops() {
    check_unary(&[3, 4], 1, |x| x.tanh().sum());
    check_unary(&[3, 4], 2, |x| x.sigmoid().square().sum());
    check_unary(&[3, 4], 3, |x| x.exp().mean());
    check_unary(&[3, 4], 4, |x| x.square().add_scalar(0.5).log().unwrap().sum());
    check_unary(&[5], 5, |x| x.logaddexp_scalar(0.3).sum());
    check_unary(&[2, 3], 6, |x| x.one_minus().mul(x).unwrap().sum());
}

#[test]
fn reductions() {
    check_unary(&[3, 5], 7, |x| x.logsumexp(1).unwrap().sum());
    check_unary(&[3, 5], 8, |x| x.log_softmax(1).unwrap().scale(0.3).exp().sum());
    check_unary(&[4, 2], 9, |x| x.norm_axis(1).unwrap().sum());
    check_unary(&[4, 3], 10, |x| x.sum_axis(0).unwrap().square().sum());
}

#[test]
fn linear_algebra() {
    let mut rng = RngStream::new(12);
    let w = random_tensor(&mut rng, &[4, 3], 1.0);
    let w2 = w.clone();
    check_unary(&[2, 3], 13, move |x| x.matmul_t(&w).unwrap().tanh().sum());
    check_unary(&[3, 4], 14, move |x| w2.matmul(x).unwrap().square().sum());
    let other = random_tensor(&mut rng, &[2, 5, 1], 1.0);
    check_unary(&[2, 1, 5], 15, move |x| x.bmm(&other).unwrap().sum());
}

#[test]
fn structural_ops() {
    let mut rng = RngStream::new(16);
    let y = random_tensor(&mut rng, &[2, 2], 1.0);
    check_unary(&[2, 3], 17, move |x| concat(&[x.clone(), y.clone()], 1).unwrap().square().sum());
    check_unary(&[4, 2], 18, |x| x.gather_rows(&[3, 0, 3, 1]).unwrap().exp().sum());
    check_unary(&[2, 6], 19, |x| x.reshape(&[3, 4]).unwrap().logsumexp(0).unwrap().sum());
    let b = random_tensor(&mut rng, &[3], 1.0);
    check_unary(&[2, 3], 20, move |x| x.add(&b).unwrap().mul(x).unwrap().sum());
}

#[test]
fn convolution() {
    let mut rng = RngStream::new(21);
    let k = random_tensor(&mut rng, &[2, 3, 3, 3], 0.5);
    check_unary(&[3, 5, 5], 22, move |x| x.conv2d(&k, 2).unwrap().tanh().sum());
    let img = random_tensor(&mut rng, &[2, 4, 4], 1.0);
    check_unary(&[1, 2, 3, 3], 23, move |k| img.conv2d(k, 1).unwrap().square().sum());
}

fn assert_model_grads(kind: ModelKind, particles: usize) {
    let mut fx = Fixture::small(kind, 2, particles, 4, 3);
    let (worst, at, checked) = fx.gradcheck(1e-5, 1e-6);
    assert!(checked > 50, "only {checked} coordinates checked");
    assert!(worst < 1e-4, "{kind:?}: worst relative error {worst:e} at {at}");
}

#[test]
fn baseline_models() {
    for kind in [ModelKind::Lstm, ModelKind::Gru, ModelKind::LstmBnRelu, ModelKind::GruBnRelu] {
        assert_model_grads(kind, 1);
    }
}

#[test]
fn particle_models_without_resampling() {
    for kind in [ModelKind::PfLstm, ModelKind::PfGru] {
        let mut fx = Fixture::small(kind, 2, 3, 4, 3);
        fx.model.spec.cell.resample = false;
        match &mut fx.model.cell {
            pfrnn::model::Cell::PfLstm(c) => c.config.resample = false,
            pfrnn::model::Cell::PfGru(c) => c.config.resample = false,
            _ => unreachable!(),
        }
        let (worst, at, _) = fx.gradcheck(1e-5, 1e-6);
        assert!(worst < 1e-4, "{kind:?}: {worst:e} at {at}");
    }
}

#[test]
fn particle_models_with_single_particle() {
    assert_model_grads(ModelKind::PfGru, 1);
}

#[test]
fn relative_error_is_symmetric() {
    assert_eq!(rel_err(1.0, 2.0), rel_err(2.0, 1.0));
    assert!(rel_err(0.0, 0.0) == 0.0);
}
