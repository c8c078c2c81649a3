//! Per-view residual encoder, decoder and center head.

use glfusion_tensor::nn::{Bound, Conv2d, Init, ParamId, ParamStore};
use glfusion_tensor::{Scalar, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ViewSpec;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Feature channels `D` of the encoder output.
    pub channels: usize,
    /// Spatial downsampling factor, a power of two.
    pub stride: usize,
    /// Encoder stages; the first `log2(stride)` of them downsample.
    pub depth: usize,
    /// Width of the first stage; each later stage doubles it.
    pub base_width: usize,
    pub decoder_width: usize,
    /// Kernel of the post-upsampling convolution (1 or 3).
    pub decoder_kernel: usize,
    /// Dilated convolutions in the last stage.
    pub atrous: bool,
    pub in_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            stride: 8,
            depth: 3,
            base_width: 16,
            decoder_width: 32,
            decoder_kernel: 3,
            atrous: false,
            in_channels: 1,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.stride.is_power_of_two() {
            return Err(Error::Config(format!("stride {} is not a power of two", self.stride)));
        }
        if self.channels < 8 {
            return Err(Error::Config(format!("feature channels {} < 8", self.channels)));
        }
        let downs = self.stride.trailing_zeros() as usize;
        if self.depth < downs.max(1) {
            return Err(Error::Config(format!("depth {} cannot reach stride {}", self.depth, self.stride)));
        }
        if self.decoder_kernel != 1 && self.decoder_kernel != 3 {
            return Err(Error::Config(format!("decoder_kernel must be 1 or 3, got {}", self.decoder_kernel)));
        }
        if self.base_width == 0 || self.decoder_width == 0 || self.in_channels == 0 {
            return Err(Error::Config("widths must be positive".into()));
        }
        Ok(())
    }

    fn stage_width(&self, i: usize) -> usize {
        self.base_width << i.min(6)
    }
}

#[derive(Clone, Debug)]
struct ResidualBlock {
    a: Conv2d,
    b: Conv2d,
}

impl ResidualBlock {
    fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let h = self.a.forward(p, x).relu();
        (self.b.forward(p, h) + x).relu()
    }
}

#[derive(Clone, Debug)]
struct Stage {
    entry: Conv2d,
    block: ResidualBlock,
}

/// Frame-wise 2-D encoder of one view.
#[derive(Clone, Debug)]
pub struct Encoder {
    stem: Conv2d,
    stages: Vec<Stage>,
    proj: Conv2d,
    stride: usize,
}

impl Encoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &BackboneConfig,
        rng: &mut R,
    ) -> Self {
        let downs = cfg.stride.trailing_zeros() as usize;
        let stem =
            Conv2d::new(store, &format!("{prefix}.stem"), cfg.in_channels, cfg.base_width, 3, 1, 1, Init::He, rng);
        let mut c_in = cfg.base_width;
        let mut stages = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let c = cfg.stage_width(i);
            let stride = if i < downs { 2 } else { 1 };
            let dilation = if cfg.atrous && i + 1 == cfg.depth { 2 } else { 1 };
            let name = format!("{prefix}.stage{i}");
            let entry = Conv2d::new(store, &format!("{name}.entry"), c_in, c, 3, stride, 1, Init::He, rng);
            let a = Conv2d::new(store, &format!("{name}.res_a"), c, c, 3, 1, dilation, Init::He, rng);
            let b = Conv2d::new(store, &format!("{name}.res_b"), c, c, 3, 1, dilation, Init::He, rng);
            stages.push(Stage { entry, block: ResidualBlock { a, b } });
            c_in = c;
        }
        let proj = Conv2d::new(store, &format!("{prefix}.proj"), c_in, cfg.channels, 1, 1, 1, Init::Xavier, rng);
        Self { stem, stages, proj, stride: cfg.stride }
    }

    /// `[T, C, H, W]` frames to `[T, D, H/stride, W/stride]` features.
    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, frames: Var<'g, T>) -> Result<Var<'g, T>> {
        let shape = frames.shape();
        if shape.len() != 4 || shape[1] != self.stem.in_channels() {
            return Err(Error::Shape(format!(
                "encoder expects [T, {}, H, W] frames, got {shape:?}",
                self.stem.in_channels()
            )));
        }
        if shape[2] % self.stride != 0 || shape[3] % self.stride != 0 {
            return Err(Error::Shape(format!(
                "frame size {}x{} is not divisible by stride {}",
                shape[2], shape[3], self.stride
            )));
        }
        let mut x = self.stem.forward(p, frames).relu();
        for s in &self.stages {
            x = s.entry.forward(p, x).relu();
            x = s.block.forward(p, x);
        }
        Ok(self.proj.forward(p, x))
    }
}

/// Shared architecture of the segmentation decoder and the center head.
#[derive(Clone, Debug)]
pub struct Head {
    conv_in: Conv2d,
    conv_out: Conv2d,
    stride: usize,
    channels: usize,
}

impl Head {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &BackboneConfig,
        classes: usize,
        rng: &mut R,
    ) -> Self {
        let conv_in =
            Conv2d::new(store, &format!("{prefix}.conv_in"), cfg.channels, cfg.decoder_width, 3, 1, 1, Init::He, rng);
        let k = cfg.decoder_kernel;
        let conv_out =
            Conv2d::new(store, &format!("{prefix}.conv_out"), cfg.decoder_width, classes, k, 1, 1, Init::Xavier, rng);
        Self { conv_in, conv_out, stride: cfg.stride, channels: cfg.channels }
    }

    /// `[T, D, h, w]` features to `[T, C, h*stride, w*stride]` logits.
    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, features: Var<'g, T>) -> Result<Var<'g, T>> {
        let shape = features.shape();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::Shape(format!("head expects [T, {}, h, w] features, got {shape:?}", self.channels)));
        }
        let x = self.conv_in.forward(p, features).relu();
        let (out_h, out_w) = (shape[2] * self.stride, shape[3] * self.stride);
        if self.conv_out.spec().padding == 0 {
            // a 1x1 convolution commutes with the resize, so run it on the coarse grid
            return Ok(self.conv_out.forward(p, x).resize(out_h, out_w));
        }
        Ok(self.conv_out.forward(p, x.resize(out_h, out_w)))
    }

    pub fn classes(&self) -> usize {
        self.conv_out.out_channels()
    }

    pub fn bias(&self) -> ParamId {
        self.conv_out.params()[1]
    }
}

/// Non-shared networks of one view.
#[derive(Clone, Debug)]
pub struct ViewNetwork {
    pub spec: ViewSpec,
    pub encoder: Encoder,
    pub decoder: Head,
    pub center: Option<Head>,
    params: std::ops::Range<usize>,
}

impl ViewNetwork {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        spec: &ViewSpec,
        cfg: &BackboneConfig,
        with_center: bool,
        rng: &mut R,
    ) -> Self {
        let start = store.len();
        let prefix = spec.view_id.as_str();
        let encoder = Encoder::new(store, &format!("{prefix}.encoder"), cfg, rng);
        let decoder = Head::new(store, &format!("{prefix}.decoder"), cfg, spec.num_classes(), rng);
        let center = with_center.then(|| Head::new(store, &format!("{prefix}.center"), cfg, spec.num_classes(), rng));
        Self { spec: spec.clone(), encoder, decoder, center, params: start..store.len() }
    }

    /// Store indices of every parameter owned by this view.
    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        self.params.clone().map(ParamId)
    }
}
