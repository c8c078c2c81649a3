//! The multi-view network: per-view backbones joined by global and local fusion.

use std::path::Path;

use glfusion_tensor::nn::{Bound, ParamStore};
use glfusion_tensor::{Graph, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, ViewNetwork};
use crate::data::{validate_roster, Frame, ViewSpec};
use crate::error::{Error, Result};
use crate::mgfm::{Mgfm, MgfmConfig};
use crate::mlfm::{compute_feature_mask, Combiner, Mlfm, MlfmConfig};

pub const CHECKPOINT_FORMAT: &str = "glfusion-checkpoint/v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub views: Vec<ViewSpec>,
    pub backbone: BackboneConfig,
    pub mgfm: MgfmConfig,
    pub mlfm: MlfmConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            views: ViewSpec::standard_roster(),
            backbone: BackboneConfig::default(),
            mgfm: MgfmConfig::default(),
            mlfm: MlfmConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        validate_roster(&self.views)?;
        if self.views.is_empty() {
            return Err(Error::Config("model needs at least one view".into()));
        }
        self.backbone.validate()?;
        self.mgfm.attention.validate(self.backbone.channels)?;
        self.mlfm.attention.validate(self.backbone.channels)?;
        Ok(())
    }
}

/// Preprocessing the network was trained with: square resize, then a square crop.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub resize: usize,
    pub crop: usize,
}

/// Everything one forward pass produces, per view.
pub struct Forward<'g, T: Scalar> {
    /// Encoder features `F^i`, `[T, D, h, w]`.
    pub features: Vec<Var<'g, T>>,
    /// `F̄_global` (the encoder features when global fusion is off).
    pub global: Vec<Var<'g, T>>,
    /// Features handed to the final decode.
    pub fused: Vec<Var<'g, T>>,
    /// Final logits `[T, C, H, W]`.
    pub logits: Vec<Var<'g, T>>,
    /// First-decode pseudo labels, when local fusion is on.
    pub pseudo: Option<Vec<Var<'g, T>>>,
    /// Center-head logits, when local fusion is on.
    pub center: Option<Vec<Var<'g, T>>>,
    /// Feature-grid masks, when local fusion is on.
    pub masks: Option<Vec<Var<'g, T>>>,
}

#[derive(Clone, Debug)]
pub struct GlFusion<T: Scalar> {
    config: ModelConfig,
    store: ParamStore<T>,
    views: Vec<ViewNetwork>,
    mgfm: Option<Mgfm>,
    mlfm: Option<(Mlfm, Combiner)>,
    input: Option<InputSpec>,
}

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    scalar: String,
    model_config: ModelConfig,
    #[serde(default)]
    input: Option<InputSpec>,
    params: Vec<ParamRecord>,
}

impl<T: Scalar> GlFusion<T> {
    /// Builds a freshly initialised model; parameters depend only on `config` and `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.backbone.channels;
        let with_center = config.mlfm.enabled;
        let views = config
            .views
            .iter()
            .map(|spec| ViewNetwork::new(&mut store, spec, &config.backbone, with_center, &mut rng))
            .collect();
        let v = config.views.len();
        let mgfm = config.mgfm.enabled.then(|| Mgfm::new(&mut store, "mgfm", d, v, &config.mgfm, &mut rng));
        let mlfm = config.mlfm.enabled.then(|| {
            let m = Mlfm::new(&mut store, "mlfm", d, v, &config.mlfm, &mut rng);
            let names: Vec<&str> = config.views.iter().map(|s| s.view_id.as_str()).collect();
            let c = if config.mgfm.enabled {
                Combiner::new(&mut store, &names, d, config.mlfm.combine, &mut rng)
            } else {
                Combiner::Sum
            };
            (m, c)
        });
        Ok(Self { config, store, views, mgfm, mlfm, input: None })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn input_spec(&self) -> Option<InputSpec> {
        self.input
    }

    pub fn set_input_spec(&mut self, input: Option<InputSpec>) {
        self.input = input;
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn views(&self) -> &[ViewNetwork] {
        &self.views
    }

    pub fn mgfm(&self) -> Option<&Mgfm> {
        self.mgfm.as_ref()
    }

    pub fn mlfm(&self) -> Option<&Mlfm> {
        self.mlfm.as_ref().map(|(m, _)| m)
    }

    pub fn stride(&self) -> usize {
        self.config.backbone.stride
    }

    fn check_inputs(&self, inputs: &[Var<'_, T>]) -> Result<()> {
        if inputs.len() != self.views.len() {
            return Err(Error::Argument(format!("{} inputs for {} views", inputs.len(), self.views.len())));
        }
        let first = inputs[0].shape();
        if inputs.iter().any(|x| x.shape() != first) {
            return Err(Error::Shape("all views must share [T, C, H, W]".into()));
        }
        Ok(())
    }

    /// Per-view encoder features.
    pub fn encode<'g>(&self, p: &Bound<'g, T>, inputs: &[Var<'g, T>]) -> Result<Vec<Var<'g, T>>> {
        self.check_inputs(inputs)?;
        self.views.iter().zip(inputs).map(|(v, &x)| v.encoder.forward(p, x)).collect()
    }

    /// `F̄_global` of each view, or the features themselves when global fusion is off.
    pub fn global<'g>(&self, p: &Bound<'g, T>, features: &[Var<'g, T>]) -> Result<Vec<Var<'g, T>>> {
        match &self.mgfm {
            Some(m) => m.forward(p, features),
            None => Ok(features.to_vec()),
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g, T>, inputs: &[Var<'g, T>]) -> Result<Forward<'g, T>> {
        let features = self.encode(p, inputs)?;
        let global = self.global(p, &features)?;
        let mut out = Forward {
            features: features.clone(),
            global: global.clone(),
            fused: global.clone(),
            logits: Vec::new(),
            pseudo: None,
            center: None,
            masks: None,
        };
        if let Some((mlfm, combiner)) = &self.mlfm {
            let mut pseudo = Vec::with_capacity(self.views.len());
            let mut center = Vec::with_capacity(self.views.len());
            let mut masks = Vec::with_capacity(self.views.len());
            for (v, &f) in self.views.iter().zip(&features) {
                let y = v.decoder.forward(p, f)?;
                let y_mask = if self.config.mlfm.detach_pseudo { f.graph().constant((*y.value()).clone()) } else { y };
                let head = v.center.as_ref().expect("center head exists with local fusion");
                let w = head.forward(p, f)?;
                masks.push(compute_feature_mask(y_mask, w, self.stride(), self.config.mlfm.variant)?);
                pseudo.push(y);
                center.push(w);
            }
            let local = mlfm.forward(p, &features, &masks)?;
            out.fused = if self.mgfm.is_some() { combiner.forward(p, &global, &local) } else { local };
            out.pseudo = Some(pseudo);
            out.center = Some(center);
            out.masks = Some(masks);
        }
        out.logits = self.views.iter().zip(&out.fused).map(|(v, &f)| v.decoder.forward(p, f)).collect::<Result<_>>()?;
        Ok(out)
    }

    /// Final logits for `[T, C, H, W]` inputs, evaluated `chunk` frames at a time without gradients.
    pub fn predict(&self, inputs: &[Tensor<T>], chunk: usize) -> Result<Vec<Tensor<T>>> {
        if inputs.len() != self.views.len() {
            return Err(Error::Argument(format!("{} inputs for {} views", inputs.len(), self.views.len())));
        }
        let t = inputs[0].shape()[0];
        let chunk = chunk.max(1);
        let mut parts: Vec<Vec<Tensor<T>>> = vec![Vec::new(); self.views.len()];
        let mut start = 0;
        while start < t {
            let len = chunk.min(t - start);
            let g = Graph::new();
            let p = self.store.bind_frozen(&g);
            let xs: Vec<_> = inputs.iter().map(|x| g.constant(x.narrow(0, start, len))).collect();
            let f = self.forward(&p, &xs)?;
            for (acc, l) in parts.iter_mut().zip(&f.logits) {
                acc.push((*l.value()).clone());
            }
            start += len;
        }
        Ok(parts.iter().map(|ps| Tensor::concat(&ps.iter().collect::<Vec<_>>(), 0)).collect())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.to_string(),
            scalar: T::NAME.to_string(),
            model_config: self.config.clone(),
            input: self.input,
            params: self
                .store
                .iter()
                .map(|(_, name, v)| ParamRecord {
                    name: name.to_string(),
                    shape: v.shape().to_vec(),
                    data: v.data().iter().map(|x| x.to_f64_lossy()).collect(),
                })
                .collect(),
        };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let text = serde_json::to_string(&file).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: CheckpointFile =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("unsupported checkpoint format `{}`", file.format)));
        }
        let mut model = Self::new(file.model_config, 0)?;
        model.input = file.input;
        if file.params.len() != model.store.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, model expects {}",
                file.params.len(),
                model.store.len()
            )));
        }
        for rec in file.params {
            let value = Tensor::new(rec.shape.clone(), rec.data.iter().map(|&x| T::from_f64_lossy(x)).collect())
                .map_err(|e| Error::Format(format!("parameter `{}`: {e}", rec.name)))?;
            model.store.assign(&rec.name, value).map_err(|e| Error::Format(e.to_string()))?;
        }
        Ok(model)
    }
}

/// `[T, 1, H, W]` intensities in `[0, 1]`.
pub fn frames_to_tensor<T: Scalar>(frames: &[&Frame]) -> Result<Tensor<T>> {
    let Some(first) = frames.first() else {
        return Err(Error::Argument("no frames".into()));
    };
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(frames.len() * h * w);
    for f in frames {
        if (f.height, f.width) != (h, w) {
            return Err(Error::Shape(format!("frame {}x{} among {h}x{w} frames", f.height, f.width)));
        }
        data.extend(f.pixels.iter().map(|&p| T::from_f64_lossy(p as f64 / 255.0)));
    }
    Ok(Tensor::new([frames.len(), 1, h, w], data)?)
}
