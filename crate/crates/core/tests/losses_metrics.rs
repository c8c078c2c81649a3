use std::rc::Rc;

use glfusion_core::backbone::BackboneConfig;
use glfusion_core::data::{BinaryMask, ViewSpec};
use glfusion_core::losses::{seg_loss, total_loss, LossWeights};
use glfusion_core::metrics::{binarize, dice_score, DiceAccumulator};
use glfusion_core::phantom::{synthesize_video, PhantomConfig};
use glfusion_core::train::{evaluate_samples, EvalSettings};
use glfusion_core::{GlFusion, ModelConfig};
use glfusion_tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_mask(h: usize, w: usize, p: f64, rng: &mut ChaCha8Rng) -> BinaryMask {
    BinaryMask::new(h, w, (0..h * w).map(|_| rng.random_bool(p)).collect()).unwrap()
}

fn targets(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| if rng.random_bool(0.4) { 1.0 } else { 0.0 })
}

#[test]
fn zero_logits_cost_ln2_per_frame() {
    let g = Graph::new();
    let shapes = [[3, 2, 4, 4], [2, 4, 4, 4]];
    let preds: Vec<_> = shapes.iter().map(|&s| g.constant(Tensor::zeros(s))).collect();
    let tgts: Vec<_> = shapes.iter().enumerate().map(|(i, &s)| Rc::new(targets(s, i as u64))).collect();
    let summed = seg_loss(&g, &preds, &tgts, false).unwrap();
    assert!(!summed.empty);
    assert!((summed.value.value().item() - 5.0 * 2f64.ln()).abs() < 1e-12);
    let mean = seg_loss(&g, &preds, &tgts, true).unwrap();
    assert!((mean.value.value().item() - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn confident_correct_logits_cost_nothing() {
    let g = Graph::new();
    let t = targets([2, 2, 4, 4], 3);
    let logits = t.map(|v| if v > 0.5 { 50.0 } else { -50.0 });
    let l = seg_loss(&g, &[g.constant(logits)], &[Rc::new(t)], false).unwrap();
    assert!(l.value.value().item().abs() < 1e-12);
}

#[test]
fn two_by_four_by_four_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let logits: Tensor<f64> = Tensor::from_fn([1, 2, 4, 4], |_| rng.random_range(-3.0..3.0));
    let t = targets([1, 2, 4, 4], 5);
    let expected: f64 = logits
        .data()
        .iter()
        .zip(t.data())
        .map(|(&x, &y): (&f64, &f64)| {
            let p = 1.0 / (1.0 + (-x).exp());
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / 32.0;
    let g = Graph::new();
    let l = seg_loss(&g, &[g.constant(logits)], &[Rc::new(t)], false).unwrap();
    assert!((l.value.value().item() - expected).abs() < 1e-12);
}

#[test]
fn total_loss_weights_terms() {
    let g = Graph::<f64>::new();
    let seg = g.constant(Tensor::scalar(1.5));
    let cyc = g.constant(Tensor::scalar(0.7));
    let center = g.constant(Tensor::scalar(0.4));
    let w = LossWeights { alpha: 2.0, center_aux: 0.1, normalize: false };
    assert!((total_loss(seg, Some(cyc), Some(center), &w).value().item() - (1.5 + 1.4 + 0.04)).abs() < 1e-12);
    assert_eq!(total_loss(seg, None, None, &w).value().item(), 1.5);
    let off = LossWeights { alpha: 0.0, ..w };
    assert!((total_loss(seg, Some(cyc), Some(center), &off).value().item() - 1.54).abs() < 1e-12);
}

#[test]
fn empty_annotation_set_is_flagged() {
    let g = Graph::<f64>::new();
    let l = seg_loss(&g, &[g.constant(Tensor::zeros([0, 2, 4, 4]))], &[Rc::new(Tensor::zeros([0, 2, 4, 4]))], false)
        .unwrap();
    assert!(l.empty);
    assert_eq!(l.value.value().item(), 0.0);
    assert!(seg_loss(&g, &[g.constant(Tensor::zeros([1, 2, 4, 4]))], &[Rc::new(Tensor::zeros([1, 3, 4, 4]))], false)
        .is_err());
}

#[test]
fn dice_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = random_mask(8, 8, 0.5, &mut rng);
    assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
    let left = BinaryMask::new(2, 4, vec![true, true, false, false, true, true, false, false]).unwrap();
    let right = BinaryMask::new(2, 4, vec![false, false, true, true, false, false, true, true]).unwrap();
    assert_eq!(dice_score(&left, &right).unwrap(), 0.0);
    let half = BinaryMask::new(2, 4, vec![true, true, true, false, true, true, false, false]).unwrap();
    let quarter = BinaryMask::new(2, 4, vec![false, false, true, false, false, false, false, false]).unwrap();
    assert_eq!(dice_score(&half, &quarter).unwrap(), 2.0 / 6.0);
    let two = BinaryMask::new(1, 4, vec![true, true, false, false]).unwrap();
    let one = BinaryMask::new(1, 4, vec![true, false, false, false]).unwrap();
    let other = BinaryMask::new(1, 4, vec![true, false, true, false]).unwrap();
    assert_eq!(dice_score(&two, &other).unwrap(), 0.5);
    assert!((dice_score(&two, &one).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(dice_score(&BinaryMask::empty(3, 3), &BinaryMask::empty(3, 3)).unwrap(), 1.0);
    assert!(dice_score(&BinaryMask::empty(3, 3), &BinaryMask::empty(3, 4)).is_err());
}

#[test]
fn dice_matches_set_arithmetic() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let (h, w) = (rng.random_range(1..20), rng.random_range(1..20));
        let (a, b) = (random_mask(h, w, 0.3, &mut rng), random_mask(h, w, 0.6, &mut rng));
        let inter = a.bits.iter().zip(&b.bits).filter(|(x, y)| **x && **y).count() as f64;
        let sizes = (a.count() + b.count()) as f64;
        let expected = if sizes == 0.0 { 1.0 } else { 2.0 * inter / sizes };
        assert!((dice_score(&a, &b).unwrap() - expected).abs() < 1e-9);
    }
}

proptest! {
    #[test]
    fn dice_is_symmetric_and_bounded(seed in any::<u64>(), p in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random_mask(6, 7, p, &mut rng), random_mask(6, 7, 1.0 - p, &mut rng));
        let d = dice_score(&a, &b).unwrap();
        prop_assert_eq!(d, dice_score(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&d));
    }
}

#[test]
fn binarize_thresholds_at_zero_logit() {
    let m = binarize(1, 4, &[-1.0f32, 0.0, 1e-6, 3.0]);
    assert_eq!(m.bits, vec![false, false, true, true]);
}

#[test]
fn report_csv_layout() {
    let views = ViewSpec::standard_roster();
    let mut acc = DiceAccumulator::new(&views);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (v, spec) in views.iter().enumerate() {
        for _ in 0..3 {
            let pred: Vec<_> = (0..spec.num_classes()).map(|_| random_mask(5, 5, 0.5, &mut rng)).collect();
            let gt: Vec<_> = (0..spec.num_classes()).map(|_| random_mask(5, 5, 0.5, &mut rng)).collect();
            acc.add_frame(v, &pred, &gt).unwrap();
        }
    }
    assert!(acc.add_frame(0, &[], &[]).is_err());
    let report = acc.finish();
    let csv = report.to_csv_string();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "view,class,frame_count,mean_dice");
    assert_eq!(lines.len(), 1 + 8 + 3 + 1);
    assert!(lines.last().unwrap().starts_with("AVERAGE,ALL,9,"));
    let per_view: f64 = report.views.iter().map(|v| v.mean_dice).sum::<f64>() / 3.0;
    assert!((report.average - per_view).abs() < 1e-15);
    for v in &report.views {
        let classes: f64 = v.classes.iter().map(|c| c.mean_dice).sum::<f64>() / v.classes.len() as f64;
        assert!((v.mean_dice - classes).abs() < 1e-15);
    }
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let bb = BackboneConfig { channels: 8, stride: 4, depth: 2, base_width: 4, decoder_width: 8, ..Default::default() };
    let mut model = GlFusion::<f32>::new(ModelConfig { backbone: bb, ..Default::default() }, 3).unwrap();
    let ids: Vec<_> = model.store().ids().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for id in ids {
        model.store_mut().get_mut(id).data_mut().iter_mut().for_each(|w| *w += rng.random_range(-0.1..0.1));
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt.json");
    model.save_checkpoint(&path).unwrap();
    let back = GlFusion::<f32>::load_checkpoint(&path).unwrap();
    assert_eq!(back.config(), model.config());
    for ((_, na, a), (_, nb, b)) in model.store().iter().zip(back.store().iter()) {
        assert_eq!(na, nb);
        assert_eq!(a, b);
    }
    let phantom = PhantomConfig { frames_per_video: 10, period: 5, height: 32, width: 32, ..Default::default() };
    let samples = vec![synthesize_video(&phantom, "v", 0, 10).unwrap()];
    let settings = EvalSettings { resize: 32, crop: 32, chunk: 4 };
    let a = evaluate_samples(&model, &samples, &settings, None).unwrap();
    let b = evaluate_samples(&back, &samples, &settings, None).unwrap();
    assert!((a.average - b.average).abs() < 1e-9);
    std::fs::write(&path, "{\"format\":\"other\"}").unwrap();
    assert!(GlFusion::<f32>::load_checkpoint(&path).is_err());
}
