use glfusion_core::mgfm::{attention_weights, view_concat, AttentionConfig};
use glfusion_core::mlfm::{compute_feature_mask, MaskVariant, Mlfm, MlfmConfig};
use glfusion_core::Error;
use glfusion_tensor::nn::ParamStore;
use glfusion_tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIGMOID_ONE: f64 = 0.731_058_578_630_004_9;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn random_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

fn mask(pseudo: &Tensor<f64>, center: &Tensor<f64>, stride: usize, variant: MaskVariant) -> Result<Tensor<f64>, Error> {
    let g = Graph::new();
    let m = compute_feature_mask(g.constant(pseudo.clone()), g.constant(center.clone()), stride, variant)?;
    Ok((*m.value()).clone())
}

#[test]
fn zero_logits_give_sigmoid_of_a_quarter() {
    let z = Tensor::zeros([2, 3, 8, 8]);
    let m = mask(&z, &z, 4, MaskVariant::Literal).unwrap();
    assert_eq!(m.shape(), &[2, 1, 2, 2]);
    for &v in m.data() {
        assert!((v - sigmoid(0.25)).abs() < 1e-12);
        assert!((v - 0.5622).abs() < 1e-4);
    }
}

#[test]
fn saturation_limits() {
    let hi = Tensor::full([1, 2, 4, 4], 60.0);
    let lo = Tensor::full([1, 2, 4, 4], -60.0);
    let z = Tensor::zeros([1, 2, 4, 4]);
    let up = mask(&hi, &hi, 2, MaskVariant::Literal).unwrap();
    assert!(up.data().iter().all(|&v| (v - SIGMOID_ONE).abs() < 1e-12));
    for (a, b) in [(&lo, &z), (&z, &lo), (&lo, &hi), (&hi, &lo)] {
        let m = mask(a, b, 2, MaskVariant::Literal).unwrap();
        assert!(m.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }
}

#[test]
fn mask_range_over_random_logits() {
    let shape = [25, 4, 20, 20];
    let p = random_tensor(&shape, -8.0, 8.0, 1);
    let c = random_tensor(&shape, -8.0, 8.0, 2);
    let literal = mask(&p, &c, 1, MaskVariant::Literal).unwrap();
    let unbounded = mask(&p, &c, 1, MaskVariant::Unbounded).unwrap();
    assert_eq!(literal.len(), 10_000);
    assert!(literal.data().iter().all(|&v| v > 0.5 && v < SIGMOID_ONE));
    assert!(unbounded.data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn mask_is_class_max_then_pool() {
    let p = random_tensor(&[1, 3, 4, 4], -3.0, 3.0, 3);
    let c = random_tensor(&[1, 3, 4, 4], -3.0, 3.0, 4);
    let m = mask(&p, &c, 2, MaskVariant::Literal).unwrap();
    let pooled = |t: &Tensor<f64>, y: usize, x: usize| {
        let mut s = 0.0;
        for dy in 0..2 {
            for dx in 0..2 {
                s += (0..3).map(|k| sigmoid(t.get(&[0, k, 2 * y + dy, 2 * x + dx]))).fold(0.0, f64::max);
            }
        }
        s / 4.0
    };
    for y in 0..2 {
        for x in 0..2 {
            let expected = sigmoid(pooled(&p, y, x) * pooled(&c, y, x));
            assert!((m.get(&[0, 0, y, x]) - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn mismatched_logits_are_shape_errors() {
    let a = Tensor::zeros([1, 2, 4, 4]);
    let b = Tensor::zeros([1, 3, 4, 4]);
    assert!(matches!(mask(&a, &b, 2, MaskVariant::Literal), Err(Error::Shape(_))));
    assert!(matches!(mask(&a, &a, 3, MaskVariant::Literal), Err(Error::Shape(_))));
}

fn randomized(d: usize, views: usize, seed: u64) -> (Mlfm, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = Mlfm::new(&mut store, "l", d, views, &MlfmConfig::default(), &mut rng);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|w| *w = rng.random_range(-0.5..0.5));
    }
    (m, store)
}

#[test]
fn constant_mask_scales_features() {
    let (m, store) = randomized(4, 3, 5);
    let feats: Vec<_> = (0..3).map(|i| random_tensor(&[2, 4, 3, 3], -1.0, 1.0, 10 + i)).collect();
    for c in [1.0, 0.6] {
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        let xs: Vec<_> = feats.iter().map(|f| g.constant(f.clone())).collect();
        let masks: Vec<_> = (0..3).map(|_| g.constant(Tensor::full([2, 1, 3, 3], c))).collect();
        let local = m.forward(&p, &xs, &masks).unwrap();
        let scaled: Vec<_> = feats.iter().map(|f| g.constant(f.map(|v| v * c))).collect();
        let reference = m.attention().forward(&p, view_concat(&scaled, 3).unwrap()).unwrap();
        for (v, l) in local.iter().enumerate() {
            let r = reference.narrow(1, v, 1).reshape([2, 4, 3, 3]);
            for (a, b) in l.value().data().iter().zip(r.value().data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        if c == 1.0 {
            let unmasked = m.attention().forward(&p, view_concat(&xs, 3).unwrap()).unwrap();
            assert_eq!(*unmasked.value(), *reference.value());
        }
    }
}

#[test]
fn zero_mask_zeroes_that_view() {
    let (m, _) = randomized(4, 2, 6);
    let g = Graph::new();
    let xs: Vec<_> = (0..2).map(|i| g.constant(random_tensor(&[1, 4, 2, 2], -1.0, 1.0, i))).collect();
    let masks = vec![g.constant(Tensor::ones([1, 1, 2, 2])), g.constant(Tensor::zeros([1, 1, 2, 2]))];
    let stacked = m.masked_stack(&xs, &masks).unwrap().value();
    assert!(stacked.narrow(1, 1, 1).data().iter().all(|&v| v == 0.0));
    assert_eq!(stacked.narrow(1, 0, 1).data(), xs[0].value().data());
}

#[test]
fn masked_stack_shapes_and_errors() {
    let mut store = ParamStore::<f32>::new();
    let m = Mlfm::new(&mut store, "l", 64, 3, &MlfmConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
    let g = Graph::new();
    let xs: Vec<_> = (0..3).map(|_| g.constant(Tensor::ones([40, 64, 14, 14]))).collect();
    let masks: Vec<_> = (0..3).map(|_| g.constant(Tensor::full([40, 1, 14, 14], 0.6))).collect();
    assert_eq!(m.masked_stack(&xs, &masks).unwrap().shape(), vec![40, 3, 64, 14, 14]);
    let coarse: Vec<_> = (0..3).map(|_| g.constant(Tensor::ones([40, 1, 7, 7]))).collect();
    assert!(matches!(m.masked_stack(&xs, &coarse), Err(Error::Shape(_))));
    assert!(matches!(m.masked_stack(&xs, &masks[..2]), Err(Error::Argument(_))));
}

/// Two views on a 4x4 grid; the peaked mask covers a 2x2 block of view 0.
#[test]
fn peaked_mask_concentrates_attention() {
    let cfg = AttentionConfig { d_k: Some(2), ..Default::default() };
    let mut store = ParamStore::new();
    let mcfg = MlfmConfig { attention: cfg.clone(), ..Default::default() };
    let m = Mlfm::new(&mut store, "l", 4, 2, &mcfg, &mut ChaCha8Rng::seed_from_u64(7));
    let tau = cfg.resolved_temperature(4);
    let set = |store: &mut ParamStore<f64>, name: &str, values: &[f64]| {
        let id = store.id_of(name).unwrap();
        store.get_mut(id).data_mut().copy_from_slice(values);
    };
    set(&mut store, "l.attention.query.weight", &[0.0; 8]);
    set(&mut store, "l.attention.query.bias", &[3.0 * tau, 3.0 * tau]);
    set(&mut store, "l.attention.key.weight", &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);

    let inside = |v: usize, y: usize, x: usize| v == 0 && (1..3).contains(&y) && (1..3).contains(&x);
    let logits = |v: usize| Tensor::from_fn([1, 2, 8, 8], |i| if inside(v, i[2] / 2, i[3] / 2) { 6.0 } else { -6.0 });
    let peaked: Vec<_> = (0..2).map(|v| mask(&logits(v), &logits(v), 2, MaskVariant::Unbounded).unwrap()).collect();
    let flat: Vec<_> = (0..2)
        .map(|_| {
            mask(&Tensor::full([1, 2, 8, 8], -60.0), &Tensor::zeros([1, 2, 8, 8]), 2, MaskVariant::Literal).unwrap()
        })
        .collect();

    let feats = Tensor::ones([1, 4, 4, 4]);
    let weights_for = |masks: &[Tensor<f64>]| {
        let g = Graph::new();
        let xs: Vec<_> = (0..2).map(|_| g.constant(feats.clone())).collect();
        let ms: Vec<_> = masks.iter().map(|t| g.constant(t.clone())).collect();
        let stacked = m.masked_stack(&xs, &ms).unwrap().value();
        attention_weights(m.attention(), &store, &stacked).unwrap()
    };
    let mass = |w: &Tensor<f64>| {
        let region: Vec<usize> = (0..32).filter(|&n| inside(n / 16, (n % 16) / 4, n % 4)).collect();
        assert_eq!(region.len(), 4);
        let rows = w.data().chunks(32);
        let n = rows.len() as f64;
        rows.map(|r| region.iter().map(|&j| r[j]).sum::<f64>()).sum::<f64>() / n
    };
    let (wp, wf) = (weights_for(&peaked), weights_for(&flat));
    assert!(mass(&wp) > 0.5, "peaked mass {}", mass(&wp));
    assert!((mass(&wf) - 4.0 / 32.0).abs() < 1e-9);
    assert_ne!(wp, wf);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn mask_is_monotone_in_pseudo_logits(seed in any::<u64>(), idx in 0usize..32, bump in 0.0f64..5.0, literal in any::<bool>()) {
        let variant = if literal { MaskVariant::Literal } else { MaskVariant::Unbounded };
        let p = random_tensor(&[1, 2, 4, 4], -4.0, 4.0, seed);
        let c = random_tensor(&[1, 2, 4, 4], -4.0, 4.0, seed ^ 0x5555);
        let mut q = p.clone();
        q.data_mut()[idx] += bump;
        let (a, b) = (mask(&p, &c, 2, variant).unwrap(), mask(&q, &c, 2, variant).unwrap());
        let (y, x) = ((idx % 16) / 4 / 2, (idx % 4) / 2);
        prop_assert!(b.get(&[0, 0, y, x]) >= a.get(&[0, 0, y, x]));
        for (u, v) in a.data().iter().zip(b.data()) {
            prop_assert!(v >= u);
        }
    }
}
