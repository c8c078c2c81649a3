//! Training loop, evaluation runner and ablation harness.

mod ablation;
mod augment;
mod config;
mod eval;

use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::sync::mpsc::sync_channel;

use glfusion_tensor::nn::{Adam, AdamConfig, CosineAnnealing};
use glfusion_tensor::{Graph, Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use ablation::{
    run_ablation_suite, AblationCell, AblationReport, AblationRow, AblationTable, DirectionalCheck, CYCLE_ROWS,
    FUSION_ROWS,
};
pub use augment::{augment, AugmentMode, CropWindow};
pub use config::{AblationFlags, TrainConfig};
pub use eval::{
    evaluate, evaluate_samples, is_fully_annotated, write_overlay, EvalClip, EvalReport, EvalSettings, OracleSegmenter,
    OverlayOptions, Segmenter,
};

use crate::cycle::dense_cycle_loss;
use crate::data::{BinaryMask, DatasetManifest, MultiViewVideoSample, Split, ViewSpec};
use crate::error::{Error, Result};
use crate::losses::{center_target, seg_loss, total_loss};
use crate::metrics::DiceReport;
use crate::model::{frames_to_tensor, GlFusion, InputSpec};
use crate::phantom::{child_seed, synthesize_dataset, PhantomConfig};

const ORDER_STREAM: u64 = 0x6f72_6465_72;
const STEP_STREAM: u64 = 0x7374_6570;

/// Train, validation and test videos sharing one view roster.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub views: Vec<ViewSpec>,
    pub train: Vec<MultiViewVideoSample>,
    pub val: Vec<MultiViewVideoSample>,
    pub test: Vec<MultiViewVideoSample>,
}

impl Dataset {
    pub fn from_manifest(manifest: &DatasetManifest) -> Result<Self> {
        Ok(Self {
            views: manifest.views.clone(),
            train: manifest.load_split(Split::Train)?,
            val: manifest.load_split(Split::Val)?,
            test: manifest.load_split(Split::Test)?,
        })
    }

    /// Synthesizes the phantom dataset in memory.
    pub fn from_phantom(config: &PhantomConfig) -> Result<Self> {
        let mut data =
            Self { views: ViewSpec::standard_roster(), train: Vec::new(), val: Vec::new(), test: Vec::new() };
        for (split, sample) in synthesize_dataset(config)? {
            match split {
                Split::Train => data.train.push(sample),
                Split::Val => data.val.push(sample),
                Split::Test => data.test.push(sample),
            }
        }
        Ok(data)
    }

    pub fn split(&self, split: Split) -> &[MultiViewVideoSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// One annotated multi-view frame group of a step.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledItem {
    pub sample: String,
    pub frame: usize,
    #[serde(skip)]
    index: usize,
    #[serde(skip)]
    window: Option<CropWindow>,
}

/// One unlabeled clip of a step.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipItem {
    pub sample: String,
    pub start: usize,
    pub length: usize,
    #[serde(skip)]
    index: usize,
    #[serde(skip)]
    window: Option<CropWindow>,
}

/// Everything random about one step, fixed by `(rng_seed, step)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepPlan {
    pub step: usize,
    pub epoch: usize,
    /// Seed of the step's random stream.
    pub batch_seed: u64,
    pub labeled: Vec<LabeledItem>,
    pub clips: Vec<ClipItem>,
}

/// Tensors of one step.
#[derive(Clone, Debug)]
pub struct Batch<T: Scalar> {
    pub plan: StepPlan,
    /// Per view `[B, 1, H, W]`.
    pub inputs: Vec<Tensor<T>>,
    /// Per view `[B, C, H, W]` in `{0, 1}`.
    pub targets: Vec<Tensor<T>>,
    /// Per view `[B, C, H, W]` center-ness targets, when the center head is trained.
    pub center_targets: Option<Vec<Tensor<T>>>,
    /// Per clip, per view `[L, 1, H, W]`.
    pub clips: Vec<Vec<Tensor<T>>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub seg: f64,
    pub cycle: Option<f64>,
    pub center: Option<f64>,
}

/// Loss values and per-parameter gradients (store order) of one step.
pub struct StepOutput<T: Scalar> {
    pub losses: LossParts,
    pub grads: Vec<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub learning_rate: f64,
    pub losses: LossParts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_average_dice: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    pub config_hash: String,
    pub scalar: String,
    pub total_steps: usize,
    pub best_epoch: Option<usize>,
    /// Validation Dice of the selected checkpoint.
    pub validation: Option<DiceReport>,
    /// Validation average Dice after the last epoch.
    pub final_val_average_dice: Option<f64>,
    pub epochs: Vec<EpochRecord>,
    pub loss_curve: Vec<StepRecord>,
    pub checkpoint: PathBuf,
}

impl RunReport {
    pub fn loss_curve_csv(&self) -> String {
        let mut out = String::from("step,epoch,learning_rate,total,seg,cycle,center\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.8}"));
        for r in &self.loss_curve {
            let l = &r.losses;
            out.push_str(&format!(
                "{},{},{:.8e},{:.8},{:.8},{},{}\n",
                r.step,
                r.epoch,
                r.learning_rate,
                l.total,
                l.seg,
                opt(l.cycle),
                opt(l.center)
            ));
        }
        out
    }
}

fn has_annotation(sample: &MultiViewVideoSample, view: usize, frame: usize) -> Option<&[BinaryMask]> {
    sample.views()[view].annotations.iter().find(|a| a.frame_index == frame).map(|a| a.masks.as_slice())
}

/// Decides which frames, clips and crops each step uses.
pub struct Planner<'a> {
    config: &'a TrainConfig,
    data: &'a Dataset,
    groups: Vec<(usize, usize)>,
    clip_sources: Vec<usize>,
    steps_per_epoch: usize,
}

impl<'a> Planner<'a> {
    pub fn new(config: &'a TrainConfig, data: &'a Dataset) -> Result<Self> {
        if data.train.is_empty() {
            return Err(Error::Config("the train split is empty".into()));
        }
        let groups: Vec<(usize, usize)> = data
            .train
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.common_annotated_frames().into_iter().map(move |t| (i, t)))
            .collect();
        if groups.is_empty() {
            return Err(Error::Config("no train frame is annotated in every view".into()));
        }
        let clip_sources: Vec<usize> = if config.cycle_active() {
            let ok: Vec<usize> =
                (0..data.train.len()).filter(|&i| data.train[i].num_frames() >= config.clip_length).collect();
            if ok.is_empty() {
                return Err(Error::Config(format!("no train video has {} frames for a clip", config.clip_length)));
            }
            ok
        } else {
            Vec::new()
        };
        let steps_per_epoch = config.steps_per_epoch.unwrap_or_else(|| groups.len().div_ceil(config.labeled_batch));
        Ok(Self { config, data, groups, clip_sources, steps_per_epoch })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch * self.config.epochs
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    /// Shuffled order of the annotated groups for one epoch.
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.groups.len()).collect();
        let seed = child_seed(child_seed(self.config.rng_seed, ORDER_STREAM), epoch as u64);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order
    }

    pub fn plan(&self, epoch: usize, step_in_epoch: usize, order: &[usize]) -> Result<StepPlan> {
        let cfg = self.config;
        let step = epoch * self.steps_per_epoch + step_in_epoch;
        let batch_seed = child_seed(child_seed(cfg.rng_seed, STEP_STREAM), step as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(batch_seed);
        let labeled = (0..cfg.labeled_batch)
            .map(|j| {
                let (index, frame) = self.groups[order[(step_in_epoch * cfg.labeled_batch + j) % order.len()]];
                let window = CropWindow::new(AugmentMode::Train, cfg.resize, cfg.crop, &mut rng)?;
                Ok(LabeledItem {
                    sample: self.data.train[index].patient_id.clone(),
                    frame,
                    index,
                    window: Some(window),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut clips = Vec::new();
        if cfg.cycle_active() {
            for _ in 0..cfg.unlabeled_batch {
                let index = self.clip_sources[rng.random_range(0..self.clip_sources.len())];
                let sample = &self.data.train[index];
                let start = MultiViewVideoSample::clip_start(sample.num_frames(), cfg.clip_length, rng.random());
                let window = CropWindow::new(AugmentMode::Train, cfg.resize, cfg.crop, &mut rng)?;
                clips.push(ClipItem {
                    sample: sample.patient_id.clone(),
                    start,
                    length: cfg.clip_length,
                    index,
                    window: Some(window),
                });
            }
        }
        Ok(StepPlan { step, epoch, batch_seed, labeled, clips })
    }

    /// Loads and augments the frames of a plan.
    pub fn materialize<T: Scalar>(&self, plan: StepPlan, with_center: bool) -> Result<Batch<T>> {
        let views = self.data.views.len();
        let mut inputs = Vec::with_capacity(views);
        let mut targets = Vec::with_capacity(views);
        let mut centers = Vec::with_capacity(views);
        for v in 0..views {
            let mut frames = Vec::with_capacity(plan.labeled.len());
            let mut masks = Vec::with_capacity(plan.labeled.len());
            for item in &plan.labeled {
                let sample = &self.data.train[item.index];
                let window = item.window.expect("planned items carry a window");
                let ann = has_annotation(sample, v, item.frame).ok_or_else(|| {
                    Error::Argument(format!("{} frame {} is not annotated", sample.patient_id, item.frame))
                })?;
                frames.push(window.frame(&sample.views()[v].frames[item.frame]));
                masks.push(ann.iter().map(|m| window.mask(m)).collect::<Vec<_>>());
            }
            inputs.push(frames_to_tensor(&frames.iter().collect::<Vec<_>>())?);
            targets.push(masks_to_tensor(&masks, |m| m.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())?);
            if with_center {
                centers.push(masks_to_tensor(&masks, center_target)?);
            }
        }
        let clips = plan
            .clips
            .iter()
            .map(|c| {
                let sample = &self.data.train[c.index];
                let window = c.window.expect("planned clips carry a window");
                sample
                    .views()
                    .iter()
                    .map(|view| {
                        let frames: Vec<_> =
                            view.frames[c.start..c.start + c.length].iter().map(|f| window.frame(f)).collect();
                        frames_to_tensor(&frames.iter().collect::<Vec<_>>())
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Batch { plan, inputs, targets, center_targets: with_center.then_some(centers), clips })
    }
}

/// `[B, C, H, W]` from per-item class masks.
fn masks_to_tensor<T: Scalar>(
    masks: &[Vec<BinaryMask>],
    values: impl Fn(&BinaryMask) -> Vec<f64>,
) -> Result<Tensor<T>> {
    let (b, c) = (masks.len(), masks.first().map_or(0, Vec::len));
    let (h, w) = masks.first().and_then(|m| m.first()).map_or((0, 0), |m| (m.height, m.width));
    let mut data = Vec::with_capacity(b * c * h * w);
    for item in masks {
        for m in item {
            data.extend(values(m).into_iter().map(T::from_f64_lossy));
        }
    }
    Ok(Tensor::new([b, c, h, w], data)?)
}

/// Losses and gradients of one step; a non-finite total is a numeric error.
pub fn compute_step<T: Scalar>(model: &GlFusion<T>, config: &TrainConfig, batch: &Batch<T>) -> Result<StepOutput<T>> {
    let g = Graph::new();
    let p = model.store().bind(&g);
    let xs: Vec<_> = batch.inputs.iter().map(|x| g.constant(x.clone())).collect();
    let out = model.forward(&p, &xs)?;
    let targets: Vec<Rc<Tensor<T>>> = batch.targets.iter().map(|t| Rc::new(t.clone())).collect();
    let seg = seg_loss(&g, &out.logits, &targets, config.loss.normalize)?;
    let center = match (&out.center, &batch.center_targets) {
        (Some(logits), Some(ct)) if config.loss.center_aux > 0.0 => {
            let ct: Vec<Rc<Tensor<T>>> = ct.iter().map(|t| Rc::new(t.clone())).collect();
            Some(seg_loss(&g, logits, &ct, config.loss.normalize)?.value)
        }
        _ => None,
    };
    let cycle = if config.cycle_active() && !batch.clips.is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(child_seed(batch.plan.batch_seed, 1));
        let mut terms = Vec::with_capacity(batch.clips.len());
        for clip in &batch.clips {
            let xs: Vec<_> = clip.iter().map(|x| g.constant(x.clone())).collect();
            let features = model.encode(&p, &xs)?;
            let global = model.global(&p, &features)?;
            terms.push(dense_cycle_loss(&global, &config.cycle, &mut rng)?);
        }
        Some(g.stack(&terms, 0).mean())
    } else {
        None
    };
    let total = total_loss(seg.value, cycle, center, &config.loss);
    let item = |v: glfusion_tensor::Var<'_, T>| v.value().item().to_f64_lossy();
    let losses =
        LossParts { total: item(total), seg: item(seg.value), cycle: cycle.map(item), center: center.map(item) };
    if !losses.total.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss at step {} (batch seed {}): {losses:?}",
            batch.plan.step, batch.plan.batch_seed
        )));
    }
    let mut grads = g.backward(total);
    Ok(StepOutput { losses, grads: p.gradients(&mut grads) })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_nan_dump(out_dir: &Path, plan: &StepPlan, message: &str) -> PathBuf {
    let path = out_dir.join(format!("nan_step{:06}.json", plan.step));
    let body = serde_json::json!({ "error": message, "plan": plan });
    if let Err(e) = write_text(&path, &serde_json::to_string_pretty(&body).expect("plan serializes")) {
        log::error!("could not write the diagnostic dump: {e}");
    }
    path
}

/// Trains under `config`, writing checkpoints and reports into `out_dir`.
pub fn train<T: Scalar>(config: &TrainConfig, data: &Dataset, out_dir: &Path) -> Result<RunReport> {
    config.validate()?;
    if data.views != config.model.views {
        return Err(Error::Config("dataset view roster differs from the model's".into()));
    }
    let planner = Planner::new(config, data)?;
    let mut model = GlFusion::<T>::new(config.effective_model(), config.rng_seed)?;
    model.set_input_spec(Some(InputSpec { resize: config.resize, crop: config.crop }));
    let with_center = model.config().mlfm.enabled && config.loss.center_aux > 0.0;
    let mut adam = Adam::new(model.store(), AdamConfig { weight_decay: config.weight_decay, ..Default::default() });
    let total_steps = planner.total_steps();
    let schedule = CosineAnnealing { base_lr: config.learning_rate, min_lr: config.min_learning_rate, total_steps };
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_text(&out_dir.join("config.toml"), &config.to_toml())?;
    let checkpoint = out_dir.join("best.ckpt.json");
    let settings = EvalSettings { resize: config.resize, crop: config.crop, chunk: config.eval_chunk };
    log::info!(
        "training {} steps ({} per epoch, {} annotated groups), {} parameters",
        total_steps,
        planner.steps_per_epoch(),
        planner.num_groups(),
        model.store().num_scalars()
    );

    let mut curve = Vec::with_capacity(total_steps);
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, DiceReport)> = None;
    let mut final_val = None;
    for epoch in 0..config.epochs {
        let order = planner.epoch_order(epoch);
        let mut epoch_loss = 0.0;
        let mut run_step = |batch: Batch<T>, model: &mut GlFusion<T>| -> Result<()> {
            let lr = schedule.lr_at(batch.plan.step);
            let out = compute_step(model, config, &batch).map_err(|e| match e {
                Error::Numeric(msg) => {
                    let dump = write_nan_dump(out_dir, &batch.plan, &msg);
                    Error::Numeric(format!("{msg}; batch dumped to {}", dump.display()))
                }
                other => other,
            })?;
            adam.step(model.store_mut(), &out.grads, lr);
            let step = batch.plan.step;
            if step % 50 == 0 || step + 1 == total_steps {
                log::info!("step {step}/{total_steps} lr {lr:.3e} loss {:?}", out.losses);
            }
            epoch_loss += out.losses.total;
            curve.push(StepRecord { step, epoch, learning_rate: lr, losses: out.losses });
            Ok(())
        };
        let n = planner.steps_per_epoch();
        if config.deterministic {
            for k in 0..n {
                let plan = planner.plan(epoch, k, &order)?;
                run_step(planner.materialize(plan, with_center)?, &mut model)?;
            }
        } else {
            std::thread::scope(|s| -> Result<()> {
                let (tx, rx) = sync_channel::<Result<Batch<T>>>(2);
                let planner = &planner;
                let order = &order;
                s.spawn(move || {
                    for k in 0..n {
                        let batch = planner.plan(epoch, k, order).and_then(|p| planner.materialize(p, with_center));
                        if tx.send(batch).is_err() {
                            break;
                        }
                    }
                });
                for batch in rx {
                    run_step(batch?, &mut model)?;
                }
                Ok(())
            })?;
        }
        let last = epoch + 1 == config.epochs;
        let mut val_avg = None;
        if !data.val.is_empty() && ((epoch + 1) % config.validate_every == 0 || last) {
            let report = evaluate_samples(&model, &data.val, &settings, None)?;
            log::info!("epoch {epoch}: validation average Dice {:.4}", report.average);
            val_avg = Some(report.average);
            if last {
                final_val = Some(report.average);
            }
            if best.as_ref().is_none_or(|(_, b)| report.average > b.average) {
                model.save_checkpoint(&checkpoint)?;
                best = Some((epoch, report));
            }
        }
        epochs.push(EpochRecord { epoch, mean_loss: epoch_loss / n as f64, val_average_dice: val_avg });
    }
    if data.val.is_empty() {
        log::warn!("no validation videos; keeping the final model");
        model.save_checkpoint(&checkpoint)?;
    }
    let (best_epoch, validation) = match best {
        Some((e, r)) => (Some(e), Some(r)),
        None => (None, None),
    };
    let report = RunReport {
        config: config.clone(),
        config_hash: config.config_hash(),
        scalar: T::NAME.to_string(),
        total_steps,
        best_epoch,
        validation,
        final_val_average_dice: final_val,
        epochs,
        loss_curve: curve,
        checkpoint,
    };
    write_text(&out_dir.join("run_report.json"), &serde_json::to_string_pretty(&report).expect("report serializes"))?;
    write_text(&out_dir.join("loss_curve.csv"), &report.loss_curve_csv())?;
    if let Some(v) = &report.validation {
        write_text(&out_dir.join("val_dice.csv"), &v.to_csv_string())?;
    }
    Ok(report)
}
