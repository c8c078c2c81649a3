use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::param::{Bound, ParamId, ParamStore};
use crate::graph::Var;
use crate::kernels::Conv2dSpec;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Weight initialisation schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with std `sqrt(2 / fan_in)`.
    He,
    /// Uniform on `±sqrt(6 / (fan_in + fan_out))`.
    Xavier,
    Zeros,
}

impl Init {
    fn sample<T: Scalar, R: Rng + ?Sized>(
        self,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = match self {
            Init::He => {
                let std = (2.0 / fan_in as f64).sqrt();
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        T::from_f64_lossy(z * std)
                    })
                    .collect()
            }
            Init::Xavier => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| T::from_f64_lossy(rng.random_range(-a..a))).collect()
            }
            Init::Zeros => vec![T::zero(); n],
        };
        Tensor::new(shape.to_vec(), data).expect("init length")
    }
}

/// 2-D convolution with bias over NCHW input.
#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: ParamId,
    bias: ParamId,
    spec: Conv2dSpec,
    in_channels: usize,
    out_channels: usize,
}

impl Conv2d {
    /// A `kernel x kernel` convolution with "same" padding for odd kernels at stride 1.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let fan_out = out_channels * kernel * kernel;
        let shape = [out_channels, in_channels, kernel, kernel];
        let weight = store.add(format!("{name}.weight"), init.sample(&shape, fan_in, fan_out, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([out_channels]));
        let spec = Conv2dSpec { stride, padding: dilation * (kernel / 2), dilation };
        Self { weight, bias, spec, in_channels, out_channels }
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        x.conv2d(p.var(self.weight), Some(p.var(self.bias)), self.spec)
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }

    pub fn spec(&self) -> Conv2dSpec {
        self.spec
    }
}

/// Affine map over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: ParamId,
    bias: ParamId,
    in_features: usize,
    out_features: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let weight = store
            .add(format!("{name}.weight"), init.sample(&[in_features, out_features], in_features, out_features, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([out_features]));
        Self { weight, bias, in_features, out_features }
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let shape = x.shape();
        let last = *shape.last().expect("linear on scalar");
        assert_eq!(last, self.in_features, "linear expects {} input features, got {last}", self.in_features);
        let rows = x.value().len() / last;
        let y = x.reshape([rows, last]).matmul(p.var(self.weight)) + p.var(self.bias);
        let mut out_shape = shape;
        *out_shape.last_mut().expect("rank") = self.out_features;
        y.reshape(out_shape)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }
}
