//! Central finite-difference checks for every differentiable op.

use std::rc::Rc;

use glfusion_tensor::{Conv2dSpec, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Compares autodiff gradients with central differences for every input entry.
fn check<F>(inputs: Vec<Tensor<f64>>, f: F, tol: f64)
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
{
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = f(&g, &vars);
    let grads = g.backward(loss);
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();

    let eval = |ins: &[Tensor<f64>]| {
        let g = Graph::new();
        let v: Vec<_> = ins.iter().map(|t| g.constant(t.clone())).collect();
        f(&g, &v).value().item()
    };
    let h = 1e-5;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[i].data()[j];
            let err = (a - numeric).abs() / (1.0 + a.abs().max(numeric.abs()));
            assert!(err < tol, "input {i} entry {j}: analytic {a} vs numeric {numeric}");
        }
    }
}

fn weights(shape: &[usize], seed: u64) -> Rc<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Rc::new(random(shape, &mut rng))
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4], &mut rng).map(|v| v.abs() + 0.5);
    let w = weights(&[3, 4], 9);
    check(
        vec![a, b],
        move |g, v| {
            let pos = v[1].add_scalar(0.1);
            let e = (v[0] * v[1] + v[0] / pos - v[1]).sigmoid();
            let f = v[0].exp() + pos.ln() + pos.sqrt() + v[0].relu().scale(0.3) + (-v[0]);
            (e + f).mul(g.constant((*w).clone())).sum()
        },
        1e-6,
    );
}

#[test]
fn shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&[2, 3, 4], &mut rng);
    let b = random(&[2, 2, 4], &mut rng);
    let w = weights(&[4, 5, 2], 10);
    check(
        vec![a, b],
        move |g, v| {
            let c = g.concat(&[v[0], v[1]], 1); // 2x5x4
            let p = c.permute(&[2, 1, 0]).narrow(2, 0, 2); // 4x5x2
            let s = g.stack(&[p, p.scale(2.0)], 0).sum_axis(0);
            s.reshape([4, 5, 2]).mul(g.constant((*w).clone())).sum()
        },
        1e-6,
    );
}

#[test]
fn reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&[3, 4, 5], &mut rng);
    let w = weights(&[3, 5], 11);
    let w2 = weights(&[4, 5], 12);
    check(
        vec![a],
        move |g, v| {
            let m = v[0].max_axis(1).mul(g.constant((*w).clone())).sum();
            let s = v[0].mean_axis(0).mul(g.constant((*w2).clone())).sum();
            m + s + v[0].mean()
        },
        1e-6,
    );
}

#[test]
fn matmul_variants() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random(&[2, 3, 4], &mut rng);
    let b = random(&[2, 4, 5], &mut rng);
    let c = random(&[5, 4], &mut rng);
    let d = random(&[4, 2], &mut rng);
    let w = weights(&[2, 3, 5], 13);
    check(
        vec![a, b, c, d],
        move |g, v| {
            let x = v[0].matmul(v[1]); // 2x3x5
            let y = v[0].matmul_t(v[2]); // 2x3x5 (shared rhs^T)
            let z = v[0].matmul(v[3]).matmul_t(v[3]); // 2x3x4
            (x + y).mul(g.constant((*w).clone())).sum() + z.sum().scale(0.1)
        },
        1e-6,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random(&[2, 3, 4], &mut rng);
    let b = random(&[2, 5, 4], &mut rng);
    check(vec![a, b], |_, v| v[0].matmul_t(v[1]).sigmoid().sum(), 1e-6);
}

#[test]
fn convolution_variants() {
    for (spec, k) in [
        (Conv2dSpec { stride: 1, padding: 1, dilation: 1 }, 3),
        (Conv2dSpec { stride: 2, padding: 1, dilation: 1 }, 3),
        (Conv2dSpec { stride: 1, padding: 2, dilation: 2 }, 3),
        (Conv2dSpec { stride: 1, padding: 0, dilation: 1 }, 1),
    ] {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&[2, 2, 5, 6], &mut rng);
        let w = random(&[3, 2, k, k], &mut rng);
        let b = random(&[3], &mut rng);
        check(vec![x, w, b], move |_, v| v[0].conv2d(v[1], Some(v[2]), spec).sigmoid().sum(), 1e-6);
    }
}

#[test]
fn pooling_and_resize() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&[2, 4, 6], &mut rng);
    let w = weights(&[2, 8, 12], 14);
    check(
        vec![x],
        move |g, v| {
            let up = v[0].resize(8, 12).mul(g.constant((*w).clone()));
            up.avg_pool(2).sigmoid().sum() + up.sum()
        },
        1e-6,
    );
}

#[test]
fn softmax_family_and_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&[4, 5], &mut rng).map(|v| 3.0 * v);
    let w = weights(&[4, 5], 15);
    let target = Rc::new(Tensor::from_fn([4, 5], |i| ((i[0] + i[1]) % 3) as f64 / 2.0));
    check(
        vec![x],
        move |g, v| {
            let a = v[0].softmax().mul(g.constant((*w).clone())).sum();
            let b = v[0].log_softmax().mul(g.constant((*w).clone())).sum();
            let c = v[0].cross_entropy(&[0, 4, 2, 2]);
            let d = v[0].bce_with_logits(Rc::clone(&target));
            a + b + c + d
        },
        1e-6,
    );
}

#[test]
fn softmax_rows_sum_to_one() {
    let g = Graph::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = g.constant(random(&[6, 7], &mut rng).map(|v| 50.0 * v));
    let p = x.softmax().value();
    for row in p.data().chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn constants_get_no_gradient() {
    let g = Graph::<f32>::new();
    let c = g.constant(Tensor::ones([3]));
    let v = g.variable(Tensor::ones([3]));
    let loss = (c * v).sum();
    let grads = g.backward(loss);
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(v).unwrap().data(), &[1.0, 1.0, 1.0]);
}
