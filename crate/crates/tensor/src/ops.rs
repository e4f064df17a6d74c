//! Eager tensor operations. The tape in [`crate::graph`] reuses these for its
//! forward values, so both paths agree bit for bit.

use crate::error::{dim_err, Result, TensorError};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::{Element, TensorOf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

/// Spatial padding. `Same` keeps `ceil(H/stride)` outputs, padding the
/// bottom/right edge with the odd pixel when the total is odd.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Padding {
    Same,
    Valid,
}

// Largest value strictly below one.
fn below_one<T: Element>() -> T {
    T::one() - T::epsilon() / (T::one() + T::one())
}

impl Activation {
    #[inline]
    pub fn apply<T: Element>(self, x: T) -> T {
        let one = T::one();
        match self {
            Activation::Sigmoid => {
                let s = if x >= T::zero() {
                    one / (one + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (one + e)
                };
                s.max(T::min_positive_value()).min(below_one())
            }
            Activation::Tanh => x.tanh().max(-below_one::<T>()).min(below_one()),
            Activation::Relu => x.max(T::zero()),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    #[inline]
    pub fn derivative<T: Element>(self, x: T, y: T) -> T {
        match self {
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Tanh => T::one() - y * y,
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

fn require_same_shape<T: Element>(
    op: &'static str,
    a: &TensorOf<T>,
    b: &TensorOf<T>,
) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn matmul<T: Element>(a: &TensorOf<T>, b: &TensorOf<T>) -> Result<TensorOf<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![T::zero(); m * n];
    kernels::gemm(m, k, n, a.data(), b.data(), &mut out, false);
    Ok(TensorOf::from_parts(vec![m, n], out))
}

pub fn elementwise<T: Element>(
    op: Elementwise,
    a: &TensorOf<T>,
    b: &TensorOf<T>,
) -> Result<TensorOf<T>> {
    require_same_shape(
        match op {
            Elementwise::Add => "add",
            Elementwise::Sub => "sub",
            Elementwise::Mul => "mul",
        },
        a,
        b,
    )?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| match op {
            Elementwise::Add => x + y,
            Elementwise::Sub => x - y,
            Elementwise::Mul => x * y,
        })
        .collect();
    Ok(TensorOf::from_parts(a.shape().to_vec(), data))
}

pub fn activation<T: Element>(kind: Activation, x: &TensorOf<T>) -> TensorOf<T> {
    x.map(|v| kind.apply(v))
}

/// Adds a bias along the feature axis: the last axis of a rank-2 tensor, or
/// the channel axis of a rank-4 `[B×C×H×W]` (or rank-3 `[C×H×W]`) tensor.
pub fn add_bias<T: Element>(x: &TensorOf<T>, bias: &TensorOf<T>) -> Result<TensorOf<T>> {
    let (outer, channels, inner) = bias_layout(x, bias)?;
    let b = bias.data();
    let mut data = x.data().to_vec();
    for o in 0..outer {
        for c in 0..channels {
            let start = (o * channels + c) * inner;
            for v in &mut data[start..start + inner] {
                *v += b[c];
            }
        }
    }
    Ok(TensorOf::from_parts(x.shape().to_vec(), data))
}

pub(crate) fn bias_layout<T: Element>(
    x: &TensorOf<T>,
    bias: &TensorOf<T>,
) -> Result<(usize, usize, usize)> {
    let s = x.shape();
    let layout = match s.len() {
        1 => (1, s[0], 1),
        2 => (s[0], s[1], 1),
        3 => (1, s[0], s[1] * s[2]),
        4 => (s[0], s[1], s[2] * s[3]),
        _ => return dim_err("add_bias", format!("unsupported rank {}", s.len())),
    };
    if bias.rank() != 1 || bias.shape()[0] != layout.1 {
        return Err(TensorError::ShapeMismatch {
            op: "add_bias",
            left: s.to_vec(),
            right: bias.shape().to_vec(),
        });
    }
    Ok(layout)
}

pub fn concat<T: Element>(a: &TensorOf<T>, b: &TensorOf<T>, axis: usize) -> Result<TensorOf<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    let compatible = sa.len() == sb.len()
        && axis < sa.len()
        && sa
            .iter()
            .zip(sb)
            .enumerate()
            .all(|(i, (x, y))| i == axis || x == y);
    if !compatible {
        return Err(TensorError::ShapeMismatch {
            op: "concat",
            left: sa.to_vec(),
            right: sb.to_vec(),
        });
    }
    let outer: usize = sa[..axis].iter().product();
    let chunk_a: usize = sa[axis..].iter().product();
    let chunk_b: usize = sb[axis..].iter().product();
    let mut data = Vec::with_capacity(a.len() + b.len());
    for o in 0..outer {
        data.extend_from_slice(&a.data()[o * chunk_a..(o + 1) * chunk_a]);
        data.extend_from_slice(&b.data()[o * chunk_b..(o + 1) * chunk_b]);
    }
    let mut shape = sa.to_vec();
    shape[axis] += sb[axis];
    Ok(TensorOf::from_parts(shape, data))
}

/// Contiguous slice `[start, start+len)` along `axis`.
pub fn slice<T: Element>(
    x: &TensorOf<T>,
    axis: usize,
    start: usize,
    len: usize,
) -> Result<TensorOf<T>> {
    let s = x.shape();
    if axis >= s.len() || len == 0 || start + len > s[axis] {
        return dim_err(
            "slice",
            format!("range {start}..{} on axis {axis} of {s:?}", start + len),
        );
    }
    let outer: usize = s[..axis].iter().product();
    let inner: usize = s[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * s[axis] * inner;
        data.extend_from_slice(&x.data()[base + start * inner..base + (start + len) * inner]);
    }
    let mut shape = s.to_vec();
    shape[axis] = len;
    Ok(TensorOf::from_parts(shape, data))
}

/// Splits along `axis` at `at`, the inverse of [`concat`].
pub fn split<T: Element>(
    x: &TensorOf<T>,
    axis: usize,
    at: usize,
) -> Result<(TensorOf<T>, TensorOf<T>)> {
    let size = *x.shape().get(axis).unwrap_or(&0);
    if at == 0 || at >= size {
        return dim_err(
            "split",
            format!("split point {at} on axis {axis} of {:?}", x.shape()),
        );
    }
    Ok((slice(x, axis, 0, at)?, slice(x, axis, at, size - at)?))
}

pub(crate) fn resolve_geometry(
    op: &'static str,
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Result<ConvGeometry> {
    if stride == 0 || kernel == 0 {
        return dim_err(op, "kernel and stride must be positive");
    }
    let pads = |n: usize| -> (usize, usize) {
        match padding {
            Padding::Valid => (0, 0),
            Padding::Same => {
                let out = n.div_ceil(stride);
                let total = ((out - 1) * stride + kernel).saturating_sub(n);
                (total / 2, total - total / 2)
            }
        }
    };
    let (pt, pb) = pads(height);
    let (pl, pr) = pads(width);
    if kernel > height + pt + pb || kernel > width + pl + pr {
        return dim_err(
            op,
            format!("{kernel}×{kernel} filter larger than padded {height}×{width} input"),
        );
    }
    Ok(ConvGeometry {
        channels,
        height,
        width,
        kernel,
        stride,
        pad_top: pt,
        pad_left: pl,
        out_height: (height + pt + pb - kernel) / stride + 1,
        out_width: (width + pl + pr - kernel) / stride + 1,
    })
}

/// `(batch, C, H, W, was_batched)` view of a rank-3 or rank-4 image tensor.
pub(crate) fn image_dims<T: Element>(
    op: &'static str,
    x: &TensorOf<T>,
) -> Result<(usize, usize, usize, usize, bool)> {
    match *x.shape() {
        [c, h, w] => Ok((1, c, h, w, false)),
        [b, c, h, w] => Ok((b, c, h, w, true)),
        _ => dim_err(
            op,
            format!("expected [C×H×W] or [B×C×H×W] input, got {:?}", x.shape()),
        ),
    }
}

pub(crate) fn image_shape(batched: bool, b: usize, c: usize, h: usize, w: usize) -> Vec<usize> {
    if batched {
        vec![b, c, h, w]
    } else {
        vec![c, h, w]
    }
}

/// Cross-correlation of `input` with `filters [N×C×K×K]`.
pub fn conv2d<T: Element>(
    input: &TensorOf<T>,
    filters: &TensorOf<T>,
    stride: usize,
    padding: Padding,
) -> Result<TensorOf<T>> {
    let (b, c, h, w, batched) = image_dims("conv2d", input)?;
    let fs = filters.shape();
    if fs.len() != 4 || fs[1] != c || fs[2] != fs[3] {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            left: input.shape().to_vec(),
            right: fs.to_vec(),
        });
    }
    let n = fs[0];
    let geo = resolve_geometry("conv2d", c, h, w, fs[2], stride, padding)?;
    let px = geo.out_pixels();
    let patch = geo.patch_len();
    let mut out = vec![T::zero(); b * n * px];
    let mut cols = vec![T::zero(); patch * px];
    let img_len = c * h * w;
    for i in 0..b {
        kernels::im2col(
            &geo,
            &input.data()[i * img_len..(i + 1) * img_len],
            &mut cols,
        );
        kernels::gemm(
            n,
            patch,
            px,
            filters.data(),
            &cols,
            &mut out[i * n * px..(i + 1) * n * px],
            false,
        );
    }
    Ok(TensorOf::from_parts(
        image_shape(batched, b, n, geo.out_height, geo.out_width),
        out,
    ))
}

/// One `K×K` filter per channel; `filters [C×K×K]`.
pub fn depthwise_conv2d<T: Element>(
    input: &TensorOf<T>,
    filters: &TensorOf<T>,
    stride: usize,
    padding: Padding,
) -> Result<TensorOf<T>> {
    let (b, c, h, w, batched) = image_dims("depthwise_conv2d", input)?;
    let fs = filters.shape();
    if fs.len() != 3 || fs[0] != c || fs[1] != fs[2] {
        return Err(TensorError::ShapeMismatch {
            op: "depthwise_conv2d",
            left: input.shape().to_vec(),
            right: fs.to_vec(),
        });
    }
    let geo = resolve_geometry("depthwise_conv2d", c, h, w, fs[1], stride, padding)?;
    let px = geo.out_pixels();
    let img_len = c * h * w;
    let mut out = vec![T::zero(); b * c * px];
    for i in 0..b {
        kernels::depthwise_forward(
            &geo,
            &input.data()[i * img_len..(i + 1) * img_len],
            filters.data(),
            &mut out[i * c * px..(i + 1) * c * px],
        );
    }
    Ok(TensorOf::from_parts(
        image_shape(batched, b, c, geo.out_height, geo.out_width),
        out,
    ))
}

/// Depthwise spatial filtering followed by a `1×1` pointwise channel mix.
pub fn depthwise_separable_conv2d<T: Element>(
    input: &TensorOf<T>,
    depth_filters: &TensorOf<T>,
    point_filters: &TensorOf<T>,
    stride: usize,
    padding: Padding,
) -> Result<TensorOf<T>> {
    let ps = point_filters.shape();
    if ps.len() != 4 || ps[2] != 1 || ps[3] != 1 || ps[1] != depth_filters.shape()[0] {
        return Err(TensorError::ShapeMismatch {
            op: "depthwise_separable_conv2d",
            left: depth_filters.shape().to_vec(),
            right: ps.to_vec(),
        });
    }
    let depth = depthwise_conv2d(input, depth_filters, stride, padding)?;
    conv2d(&depth, point_filters, 1, Padding::Valid)
}

/// The standard filter bank `[N×C×K×K]` equivalent to a depthwise-separable pair:
/// `W[n,c] = point[n,c] · depth[c]`.
pub fn separable_equivalent_filters<T: Element>(
    depth_filters: &TensorOf<T>,
    point_filters: &TensorOf<T>,
) -> Result<TensorOf<T>> {
    let ds = depth_filters.shape();
    let ps = point_filters.shape();
    if ds.len() != 3 || ps.len() != 4 || ps[1] != ds[0] {
        return Err(TensorError::ShapeMismatch {
            op: "separable_equivalent_filters",
            left: ds.to_vec(),
            right: ps.to_vec(),
        });
    }
    let (n, c, kk) = (ps[0], ds[0], ds[1] * ds[2]);
    let mut data = Vec::with_capacity(n * c * kk);
    for ni in 0..n {
        for ci in 0..c {
            let p = point_filters.data()[ni * c + ci];
            data.extend(
                depth_filters.data()[ci * kk..(ci + 1) * kk]
                    .iter()
                    .map(|&d| p * d),
            );
        }
    }
    TensorOf::new(vec![n, c, ds[1], ds[2]], data)
}

/// Relative cost of a depthwise-separable convolution against a standard one
/// with `filters` outputs and `kernel×kernel` windows: `1/N + 1/K²`.
pub fn separable_cost_ratio(filters: usize, kernel: usize) -> f64 {
    1.0 / filters as f64 + 1.0 / (kernel * kernel) as f64
}

/// Non-overlapping `size×size` max pooling (floor at the edges).
pub fn max_pool2d<T: Element>(input: &TensorOf<T>, size: usize) -> Result<TensorOf<T>> {
    Ok(max_pool_with_argmax(input, size)?.0)
}

pub(crate) fn max_pool_with_argmax<T: Element>(
    input: &TensorOf<T>,
    size: usize,
) -> Result<(TensorOf<T>, Vec<usize>)> {
    let (b, c, h, w, batched) = image_dims("max_pool2d", input)?;
    let geo = resolve_geometry("max_pool2d", c, h, w, size, size, Padding::Valid)?;
    let px = geo.out_pixels();
    let img_len = c * h * w;
    let mut out = vec![T::zero(); b * c * px];
    let mut argmax = vec![0usize; b * c * px];
    for i in 0..b {
        let range = i * c * px..(i + 1) * c * px;
        kernels::max_pool_forward(
            &geo,
            &input.data()[i * img_len..(i + 1) * img_len],
            &mut out[range.clone()],
            &mut argmax[range.clone()],
        );
        for a in &mut argmax[range] {
            *a += i * img_len;
        }
    }
    Ok((
        TensorOf::from_parts(
            image_shape(batched, b, c, geo.out_height, geo.out_width),
            out,
        ),
        argmax,
    ))
}

/// `[B×C×H×W]` → `[(B·H·W)×C]`: one row of channel values per pixel.
pub fn to_channels_last<T: Element>(x: &TensorOf<T>) -> Result<TensorOf<T>> {
    let (b, c, h, w, _) = image_dims("to_channels_last", x)?;
    let hw = h * w;
    let mut out = vec![T::zero(); x.len()];
    let src = x.data();
    for i in 0..b {
        for ch in 0..c {
            for p in 0..hw {
                out[(i * hw + p) * c + ch] = src[(i * c + ch) * hw + p];
            }
        }
    }
    Ok(TensorOf::from_parts(vec![b * hw, c], out))
}

/// Inverse of [`to_channels_last`].
pub fn from_channels_last<T: Element>(
    x: &TensorOf<T>,
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
) -> Result<TensorOf<T>> {
    let hw = height * width;
    if x.shape() != [batch * hw, channels] {
        return dim_err(
            "from_channels_last",
            format!("{:?} is not [{}×{channels}]", x.shape(), batch * hw),
        );
    }
    let mut out = vec![T::zero(); x.len()];
    let src = x.data();
    for i in 0..batch {
        for ch in 0..channels {
            for p in 0..hw {
                out[(i * channels + ch) * hw + p] = src[(i * hw + p) * channels + ch];
            }
        }
    }
    Ok(TensorOf::from_parts(
        vec![batch, channels, height, width],
        out,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn sigmoid_and_tanh_stay_open() {
        for x in [-200.0, -30.0, 0.0, 30.0, 200.0] {
            let s = Activation::Sigmoid.apply(x);
            assert!(s > 0.0 && s < 1.0, "sigmoid({x}) = {s}");
            let t = Activation::Tanh.apply(x);
            assert!(t > -1.0 && t < 1.0, "tanh({x}) = {t}");
        }
    }

    #[test]
    fn same_padding_keeps_size() {
        let g = resolve_geometry("t", 1, 7, 7, 3, 1, Padding::Same).unwrap();
        assert_eq!((g.out_height, g.out_width, g.pad_top), (7, 7, 1));
        let g = resolve_geometry("t", 1, 7, 7, 4, 1, Padding::Same).unwrap();
        assert_eq!((g.out_height, g.pad_top), (7, 1));
        let g = resolve_geometry("t", 1, 7, 7, 3, 2, Padding::Same).unwrap();
        assert_eq!(g.out_height, 4);
    }

    #[test]
    fn channels_last_round_trip() {
        let x = Tensor::from_vec([2, 3, 2, 2], (0..24).map(|v| v as f32).collect());
        let cl = to_channels_last(&x).unwrap();
        assert_eq!(cl.shape(), &[8, 3]);
        assert_eq!(cl.row(0), &[0.0, 4.0, 8.0]);
        assert_eq!(from_channels_last(&cl, 2, 3, 2, 2).unwrap(), x);
    }

    #[test]
    fn bias_rejects_wrong_length() {
        let x = Tensor::zeros([2, 3]);
        assert!(add_bias(&x, &Tensor::zeros([2])).is_err());
        let y = add_bias(&x, &Tensor::from_vec([3], vec![1., 2., 3.])).unwrap();
        assert_eq!(y.data(), &[1., 2., 3., 1., 2., 3.]);
    }
}
