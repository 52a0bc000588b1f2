//! Every differentiable op against central finite differences.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use wecdg::autodiff::{ScanOrder, Tape, Var};
use wecdg::gradcheck::{check_fn, GradcheckConfig};
use wecdg::{Result, Tensor};

fn rand_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn named(items: &[(&str, Tensor)]) -> Vec<(String, Tensor)> {
    items.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
}

fn assert_grads<F>(inputs: Vec<(String, Tensor)>, f: F)
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let cfg = GradcheckConfig {
        samples_per_tensor: 24,
        ..GradcheckConfig::default()
    };
    let report = check_fn(&inputs, f, &cfg).unwrap();
    for c in &report.checks {
        assert!(
            c.relative_error <= 1e-6,
            "{}: relative error {:e}",
            c.name,
            c.relative_error
        );
    }
}

#[test]
fn elementwise_binary_with_broadcast() {
    let a = rand_tensor(&[3, 4], 1, -1.0, 1.0);
    let b = rand_tensor(&[4], 2, 0.5, 1.5);
    assert_grads(named(&[("a", a.clone()), ("b", b.clone())]), |_, v| v[0].add(v[1]));
    assert_grads(named(&[("a", a.clone()), ("b", b.clone())]), |_, v| v[0].sub(v[1]));
    assert_grads(named(&[("a", a.clone()), ("b", b.clone())]), |_, v| v[0].mul(v[1]));
    assert_grads(named(&[("a", a), ("b", b)]), |_, v| v[0].div(v[1]));
}

#[test]
fn elementwise_unary() {
    let x = rand_tensor(&[2, 5], 3, -2.0, 2.0);
    let pos = rand_tensor(&[2, 5], 4, 0.2, 2.0);
    let one = |x: &Tensor| named(&[("x", x.clone())]);
    assert_grads(one(&x), |_, v| Ok(v[0].neg()));
    assert_grads(one(&x), |_, v| Ok(v[0].exp()));
    assert_grads(one(&pos), |_, v| Ok(v[0].ln()));
    assert_grads(one(&pos), |_, v| Ok(v[0].sqrt()));
    assert_grads(one(&pos), |_, v| Ok(v[0].abs()));
    assert_grads(one(&x), |_, v| Ok(v[0].square()));
    assert_grads(one(&x), |_, v| Ok(v[0].silu()));
    assert_grads(one(&x), |_, v| Ok(v[0].gelu()));
    assert_grads(one(&x), |_, v| Ok(v[0].softplus()));
    assert_grads(one(&x), |_, v| Ok(v[0].sigmoid()));
    assert_grads(one(&x), |_, v| Ok(v[0].tanh()));
    assert_grads(one(&x), |_, v| Ok(v[0].scale(-0.7).add_scalar(0.3)));
}

#[test]
fn clamp_interior() {
    let x = rand_tensor(&[8], 5, 0.1, 0.9);
    assert_grads(named(&[("x", x)]), |_, v| Ok(v[0].clamp(0.0, 1.0)));
}

#[test]
fn reductions_and_reshapes() {
    let x = rand_tensor(&[3, 4], 6, -1.0, 1.0);
    assert_grads(named(&[("x", x.clone())]), |_, v| Ok(v[0].mean()));
    assert_grads(named(&[("x", x.clone())]), |_, v| v[0].sum_axis(0));
    assert_grads(named(&[("x", x.clone())]), |_, v| v[0].sum_axis(1));
    assert_grads(named(&[("x", x.clone())]), |_, v| v[0].transpose());
    assert_grads(named(&[("x", x)]), |_, v| v[0].reshape(&[2, 6]));
}

#[test]
fn matmul_linear_softmax_layer_norm() {
    let a = rand_tensor(&[3, 4], 7, -1.0, 1.0);
    let b = rand_tensor(&[4, 2], 8, -1.0, 1.0);
    let bias = rand_tensor(&[2], 9, -1.0, 1.0);
    assert_grads(named(&[("a", a.clone()), ("b", b.clone())]), |_, v| v[0].matmul(v[1]));
    assert_grads(
        named(&[("x", a.clone()), ("w", b), ("bias", bias)]),
        |_, v| v[0].linear(v[1], Some(v[2])),
    );
    assert_grads(named(&[("x", a.clone())]), |_, v| Ok(v[0].softmax()));
    let gamma = rand_tensor(&[4], 10, 0.5, 1.5);
    let beta = rand_tensor(&[4], 11, -0.5, 0.5);
    assert_grads(
        named(&[("x", a), ("gamma", gamma), ("beta", beta)]),
        |_, v| v[0].layer_norm(v[1], v[2], 1e-6),
    );
}

#[test]
fn slicing_and_concatenation() {
    let a = rand_tensor(&[2, 3, 5], 12, -1.0, 1.0);
    let b = rand_tensor(&[2, 3, 2], 13, -1.0, 1.0);
    assert_grads(named(&[("a", a.clone())]), |_, v| v[0].slice_last(1, 3));
    assert_grads(named(&[("a", a), ("b", b)]), |_, v| Var::concat_last(&[v[1], v[0], v[1]]));
}

#[test]
fn convolutions() {
    let x = rand_tensor(&[5, 6, 3], 14, -1.0, 1.0);
    let w3 = rand_tensor(&[3, 3, 3, 4], 15, -0.5, 0.5);
    let w1 = rand_tensor(&[1, 1, 3, 2], 16, -0.5, 0.5);
    let b = rand_tensor(&[4], 17, -0.5, 0.5);
    assert_grads(
        named(&[("x", x.clone()), ("w", w3.clone()), ("b", b.clone())]),
        |_, v| v[0].conv2d(v[1], Some(v[2]), 1, 1),
    );
    assert_grads(
        named(&[("x", x.clone()), ("w", w3), ("b", b)]),
        |_, v| v[0].conv2d(v[1], Some(v[2]), 2, 1),
    );
    assert_grads(named(&[("x", x.clone()), ("w", w1)]), |_, v| {
        v[0].conv2d(v[1], None, 1, 0)
    });
    let dw = rand_tensor(&[3, 3, 3], 18, -0.5, 0.5);
    let db = rand_tensor(&[3], 19, -0.5, 0.5);
    assert_grads(named(&[("x", x), ("w", dw), ("b", db)]), |_, v| {
        v[0].dwconv3x3(v[1], Some(v[2]))
    });
}

#[test]
fn resampling_and_wavelets() {
    let x = rand_tensor(&[4, 6, 2], 20, -1.0, 1.0);
    assert_grads(named(&[("x", x.clone())]), |_, v| v[0].upsample2x());
    assert_grads(named(&[("x", x.clone())]), |_, v| v[0].dwt2());
    assert_grads(named(&[("x", x.clone())]), |_, v| v[0].subsample(2));
    assert_grads(named(&[("x", x.clone())]), |_, v| v[0].pad_reflect(2, 3));
    assert_grads(named(&[("x", x.clone())]), |_, v| v[0].crop(1, 2, 2, 3));
    assert_grads(named(&[("x", x.clone())]), |_, v| {
        v[0].filter_separable_valid(&[0.25, 0.5, 0.25])
    });
    let packed = rand_tensor(&[2, 3, 8], 21, -1.0, 1.0);
    assert_grads(named(&[("x", packed)]), |_, v| v[0].iwt2());
}

#[test]
fn selective_scan_all_inputs() {
    let (l, e, n) = (6, 3, 2);
    let inputs = named(&[
        ("x", rand_tensor(&[l, e], 22, -1.0, 1.0)),
        ("delta", rand_tensor(&[l, e], 23, 0.1, 1.0)),
        ("a", rand_tensor(&[e, n], 24, -2.0, -0.2)),
        ("b", rand_tensor(&[l, n], 25, -1.0, 1.0)),
        ("c", rand_tensor(&[l, n], 26, -1.0, 1.0)),
        ("d", rand_tensor(&[e], 27, -1.0, 1.0)),
    ]);
    for order in ScanOrder::four_directions(2, 3) {
        assert_grads(inputs.clone(), move |_, v| {
            v[0].selective_scan(v[1], v[2], v[3], v[4], v[5], &order)
        });
    }
}
