//! Forward and backward kernels that operate on plain tensors.
//!
//! The autodiff graph calls into these; they are also usable directly for
//! inference-only code paths.

use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

/// Numpy-style broadcast of two shapes (right-aligned).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides that read `src` while iterating over `out` (0 on broadcast axes).
fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        let o = i + rank - src.len();
        if src[i] != 1 {
            strides[o] = acc;
        }
        acc *= src[i];
    }
    strides
}

/// Walks every element of `shape` in row-major order, yielding offsets into
/// two operands with the given strides.
fn for_each_offset2(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize)) {
    let n = numel(shape);
    if n == 0 {
        return;
    }
    let rank = shape.len();
    if rank == 0 {
        f(0, 0);
        return;
    }
    let last = rank - 1;
    let (la, lb, ln) = (sa[last], sb[last], shape[last]);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for _ in 0..n / ln {
        for j in 0..ln {
            f(oa + j * la, ob + j * lb);
        }
        for d in (0..last).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            oa -= sa[d] * shape[d];
            ob -= sb[d] * shape[d];
            idx[d] = 0;
        }
    }
}

/// Elementwise binary op with broadcasting. Panics if the shapes do not broadcast.
pub fn broadcast_binary<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let shape = broadcast_shape(a.shape(), b.shape())
        .unwrap_or_else(|| panic!("shapes {:?} and {:?} do not broadcast", a.shape(), b.shape()));
    let sa = broadcast_strides(a.shape(), &shape);
    let sb = broadcast_strides(b.shape(), &shape);
    let (ad, bd) = (a.data(), b.data());
    let mut data = Vec::with_capacity(numel(&shape));
    for_each_offset2(&shape, &sa, &sb, |i, j| data.push(f(ad[i], bd[j])));
    Tensor::new(shape, data).expect("broadcast output length")
}

/// Sums `grad` down to `shape`, undoing a broadcast.
pub fn reduce_to_shape<T: Scalar>(grad: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let out_shape = grad.shape().to_vec();
    let st = broadcast_strides(shape, &out_shape);
    let contiguous = crate::tensor::strides_of(&out_shape);
    let mut out = Tensor::zeros(shape.to_vec());
    let gd = grad.data();
    let od = out.data_mut();
    for_each_offset2(&out_shape, &contiguous, &st, |g, o| od[o] += gd[g]);
    out
}

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self { stride: 1, padding: 0, dilation: 1 }
    }
}

impl Conv2dSpec {
    pub fn output_dim(&self, input: usize, kernel: usize) -> usize {
        let span = self.dilation * (kernel - 1) + 1;
        assert!(input + 2 * self.padding >= span, "convolution kernel larger than padded input");
        (input + 2 * self.padding - span) / self.stride + 1
    }
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], spec: &Conv2dSpec) -> Self {
        assert_eq!(x.len(), 4, "conv2d input must be NCHW, got {x:?}");
        assert_eq!(w.len(), 4, "conv2d weight must be OCKK, got {w:?}");
        assert_eq!(x[1], w[1], "conv2d channel mismatch: input {x:?}, weight {w:?}");
        Self {
            n: x[0],
            c: x[1],
            h: x[2],
            w: x[3],
            o: w[0],
            kh: w[2],
            kw: w[3],
            ho: spec.output_dim(x[2], w[2]),
            wo: spec.output_dim(x[3], w[3]),
        }
    }

    fn pointwise(&self, spec: &Conv2dSpec) -> bool {
        self.kh == 1 && self.kw == 1 && spec.stride == 1 && spec.padding == 0
    }
}

/// Output columns `ox` whose tap `ix = ox*s - p + off` lands inside `0..w`.
fn valid_range(wo: usize, w: usize, s: usize, p: usize, off: usize) -> (usize, usize) {
    // ix >= 0  <=>  ox*s >= p - off
    let lo = if off >= p { 0 } else { (p - off).div_ceil(s) };
    // ix < w  <=>  ox*s + off < w + p
    let hi = if off >= w + p { 0 } else { (w + p - off).div_ceil(s) };
    (lo.min(wo), hi.min(wo).max(lo.min(wo)))
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, spec: &Conv2dSpec, cols: &mut [T]) {
    let hw = g.ho * g.wo;
    let (s, p, d) = (spec.stride, spec.padding, spec.dilation);
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * hw;
                let dst = &mut cols[row..row + hw];
                let (lo, hi) = valid_range(g.wo, g.w, s, p, j * d);
                for oy in 0..g.ho {
                    let iy = (oy * s + i * d) as isize - p as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    let start = lo * s + j * d - p;
                    if s == 1 {
                        line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (k, v) in line[lo..hi].iter_mut().enumerate() {
                            *v = src[start + k * s];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, spec: &Conv2dSpec, dx: &mut [T]) {
    let hw = g.ho * g.wo;
    let (s, p, d) = (spec.stride, spec.padding, spec.dilation);
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * hw;
                let src = &cols[row..row + hw];
                let (lo, hi) = valid_range(g.wo, g.w, s, p, j * d);
                if lo >= hi {
                    continue;
                }
                let start = lo * s + j * d - p;
                for oy in 0..g.ho {
                    let iy = (oy * s + i * d) as isize - p as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &src[oy * g.wo + lo..oy * g.wo + hi];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if s == 1 {
                        for (o, &v) in dst[start..start + line.len()].iter_mut().zip(line) {
                            *o += v;
                        }
                    } else {
                        for (k, &v) in line.iter().enumerate() {
                            dst[start + k * s] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of an NCHW batch with an OCKK filter bank, plus optional bias.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &Conv2dSpec,
) -> Tensor<T> {
    let g = ConvGeom::new(x.shape(), weight.shape(), spec);
    if let Some(b) = bias {
        assert_eq!(b.shape(), &[g.o], "conv2d bias shape");
    }
    let k = g.c * g.kh * g.kw;
    let hw = g.ho * g.wo;
    let mut out = vec![T::zero(); g.n * g.o * hw];
    let mut cols = if g.pointwise(spec) { Vec::new() } else { vec![T::zero(); k * hw] };
    let xin = g.c * g.h * g.w;
    for n in 0..g.n {
        let xn = &x.data()[n * xin..(n + 1) * xin];
        let cols_ref: &[T] = if g.pointwise(spec) {
            xn
        } else {
            im2col(xn, &g, spec, &mut cols);
            &cols
        };
        let on = &mut out[n * g.o * hw..(n + 1) * g.o * hw];
        if let Some(b) = bias {
            for (o, chunk) in on.chunks_mut(hw).enumerate() {
                chunk.iter_mut().for_each(|v| *v = b.data()[o]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(g.o, k, hw, T::one(), weight.data(), k as isize, 1, cols_ref, hw as isize, 1, beta, on, hw as isize, 1);
    }
    Tensor::new(vec![g.n, g.o, g.ho, g.wo], out).expect("conv output length")
}

/// Gradients of [`conv2d_forward`]: `(d_input, d_weight, d_bias)`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: &Conv2dSpec,
    need_input_grad: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let g = ConvGeom::new(x.shape(), weight.shape(), spec);
    assert_eq!(grad_out.shape(), &[g.n, g.o, g.ho, g.wo], "conv2d grad shape");
    let k = g.c * g.kh * g.kw;
    let hw = g.ho * g.wo;
    let xin = g.c * g.h * g.w;
    let pointwise = g.pointwise(spec);
    let mut dw = vec![T::zero(); g.o * k];
    let mut db = vec![T::zero(); g.o];
    let mut dx = if need_input_grad { vec![T::zero(); g.n * xin] } else { Vec::new() };
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); k * hw] };
    let mut dcols = if need_input_grad && !pointwise { vec![T::zero(); k * hw] } else { Vec::new() };
    for n in 0..g.n {
        let xn = &x.data()[n * xin..(n + 1) * xin];
        let gn = &grad_out.data()[n * g.o * hw..(n + 1) * g.o * hw];
        for (o, chunk) in gn.chunks(hw).enumerate() {
            db[o] += chunk.iter().copied().sum::<T>();
        }
        let cols_ref: &[T] = if pointwise {
            xn
        } else {
            im2col(xn, &g, spec, &mut cols);
            &cols
        };
        // dW += dOut_n (o x hw) * cols^T (hw x k)
        T::gemm(g.o, hw, k, T::one(), gn, hw as isize, 1, cols_ref, 1, hw as isize, T::one(), &mut dw, k as isize, 1);
        if need_input_grad {
            let dxn = &mut dx[n * xin..(n + 1) * xin];
            if pointwise {
                // dx_n (c x hw) = W^T (c x o) * dOut_n (o x hw)
                T::gemm(
                    k,
                    g.o,
                    hw,
                    T::one(),
                    weight.data(),
                    1,
                    k as isize,
                    gn,
                    hw as isize,
                    1,
                    T::zero(),
                    dxn,
                    hw as isize,
                    1,
                );
            } else {
                T::gemm(
                    k,
                    g.o,
                    hw,
                    T::one(),
                    weight.data(),
                    1,
                    k as isize,
                    gn,
                    hw as isize,
                    1,
                    T::zero(),
                    &mut dcols,
                    hw as isize,
                    1,
                );
                col2im(&dcols, &g, spec, dxn);
            }
        }
    }
    let dx = need_input_grad.then(|| Tensor::new(x.shape().to_vec(), dx).expect("dx length"));
    (dx, Tensor::new(weight.shape().to_vec(), dw).expect("dw length"), Tensor::new(vec![g.o], db).expect("db length"))
}

/// Source taps for one output coordinate of a half-pixel-centred bilinear resize.
#[derive(Clone, Copy, Debug)]
struct Tap<T> {
    lo: usize,
    hi: usize,
    frac: T,
}

fn bilinear_taps<T: Scalar>(input: usize, output: usize) -> Vec<Tap<T>> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            Tap { lo, hi, frac: T::from_f64_lossy(src - lo as f64) }
        })
        .collect()
}

/// Bilinear resize of the last two axes (`align_corners = false` convention).
pub fn resize_bilinear_forward<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let rank = x.ndim();
    assert!(rank >= 2, "resize needs at least two axes");
    let (h, w) = (x.shape()[rank - 2], x.shape()[rank - 1]);
    let planes = x.len() / (h * w).max(1);
    let ty = bilinear_taps::<T>(h, out_h);
    let tx = bilinear_taps::<T>(w, out_w);
    let mut out = Vec::with_capacity(planes * out_h * out_w);
    let one = T::one();
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for ay in &ty {
            let r0 = &src[ay.lo * w..(ay.lo + 1) * w];
            let r1 = &src[ay.hi * w..(ay.hi + 1) * w];
            for ax in &tx {
                let top = r0[ax.lo] * (one - ax.frac) + r0[ax.hi] * ax.frac;
                let bot = r1[ax.lo] * (one - ax.frac) + r1[ax.hi] * ax.frac;
                out.push(top * (one - ay.frac) + bot * ay.frac);
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[rank - 2] = out_h;
    shape[rank - 1] = out_w;
    Tensor::new(shape, out).expect("resize output length")
}

pub fn resize_bilinear_backward<T: Scalar>(grad_out: &Tensor<T>, in_h: usize, in_w: usize) -> Tensor<T> {
    let rank = grad_out.ndim();
    let (oh, ow) = (grad_out.shape()[rank - 2], grad_out.shape()[rank - 1]);
    let planes = grad_out.len() / (oh * ow).max(1);
    let ty = bilinear_taps::<T>(in_h, oh);
    let tx = bilinear_taps::<T>(in_w, ow);
    let mut shape = grad_out.shape().to_vec();
    shape[rank - 2] = in_h;
    shape[rank - 1] = in_w;
    let mut dx = Tensor::zeros(shape);
    let one = T::one();
    let dd = dx.data_mut();
    for p in 0..planes {
        let g = &grad_out.data()[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dd[p * in_h * in_w..(p + 1) * in_h * in_w];
        for (y, ay) in ty.iter().enumerate() {
            for (xi, ax) in tx.iter().enumerate() {
                let v = g[y * ow + xi];
                let top = v * (one - ay.frac);
                let bot = v * ay.frac;
                dst[ay.lo * in_w + ax.lo] += top * (one - ax.frac);
                dst[ay.lo * in_w + ax.hi] += top * ax.frac;
                dst[ay.hi * in_w + ax.lo] += bot * (one - ax.frac);
                dst[ay.hi * in_w + ax.hi] += bot * ax.frac;
            }
        }
    }
    dx
}

/// Non-overlapping `k x k` average pooling of the last two axes.
pub fn avg_pool_forward<T: Scalar>(x: &Tensor<T>, k: usize) -> Tensor<T> {
    let rank = x.ndim();
    let (h, w) = (x.shape()[rank - 2], x.shape()[rank - 1]);
    assert!(k > 0 && h % k == 0 && w % k == 0, "avg_pool: {h}x{w} not divisible by {k}");
    let (oh, ow) = (h / k, w / k);
    let planes = x.len() / (h * w).max(1);
    let inv = T::one() / T::from_usize_lossy(k * k);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..h {
            for xi in 0..w {
                dst[(y / k) * ow + xi / k] += src[y * w + xi];
            }
        }
        dst.iter_mut().for_each(|v| *v *= inv);
    }
    let mut shape = x.shape().to_vec();
    shape[rank - 2] = oh;
    shape[rank - 1] = ow;
    Tensor::new(shape, out).expect("pool output length")
}

pub fn avg_pool_backward<T: Scalar>(grad_out: &Tensor<T>, k: usize) -> Tensor<T> {
    let rank = grad_out.ndim();
    let (oh, ow) = (grad_out.shape()[rank - 2], grad_out.shape()[rank - 1]);
    let (h, w) = (oh * k, ow * k);
    let planes = grad_out.len() / (oh * ow).max(1);
    let inv = T::one() / T::from_usize_lossy(k * k);
    let mut shape = grad_out.shape().to_vec();
    shape[rank - 2] = h;
    shape[rank - 1] = w;
    let mut dx = Tensor::zeros(shape);
    let dd = dx.data_mut();
    for p in 0..planes {
        let g = &grad_out.data()[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dd[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xi in 0..w {
                dst[y * w + xi] = g[(y / k) * ow + xi / k] * inv;
            }
        }
    }
    dx
}
