//! Forward kernels for the closed operation set, plus the adjoint kernels
//! the gradient tape needs.
//!
//! All image tensors are NCHW. Every public kernel checks its result for
//! non-finite values and reports them as errors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PaddingMode {
    Zeros,
    Circular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Padding {
    pub width: usize,
    pub mode: PaddingMode,
}

impl Padding {
    pub const NONE: Padding = Padding {
        width: 0,
        mode: PaddingMode::Zeros,
    };

    pub fn zeros(width: usize) -> Self {
        Self {
            width,
            mode: PaddingMode::Zeros,
        }
    }

    pub fn circular(width: usize) -> Self {
        Self {
            width,
            mode: PaddingMode::Circular,
        }
    }
}

impl Default for Padding {
    fn default() -> Self {
        Self::NONE
    }
}

/// Pointwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu { alpha: f64 },
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Activation::LeakyRelu { alpha } if !(alpha > 0.0 && alpha < 1.0) => Err(
                Error::invalid("activation", format!("leaky_relu alpha {alpha} not in (0, 1)")),
            ),
            _ => Ok(()),
        }
    }

    fn apply<T: Scalar>(&self, x: T) -> T {
        match *self {
            Activation::Relu => x.max(T::zero()),
            Activation::LeakyRelu { alpha } => {
                if x > T::zero() {
                    x
                } else {
                    x * T::from_f64_lossy(alpha)
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => T::one() / (T::one() + (-x).exp()),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative<T: Scalar>(&self, x: T, y: T) -> T {
        match *self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu { alpha } => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::from_f64_lossy(alpha)
                }
            }
            Activation::Tanh => T::one() - y * y,
            Activation::Sigmoid => y * (T::one() - y),
        }
    }
}

fn check_bias<T: Scalar>(op: &'static str, bias: Option<&[T]>, channels: usize) -> Result<()> {
    match bias {
        Some(b) if b.len() != channels => Err(Error::shape(
            op,
            format!("bias has {} entries, expected {channels}", b.len()),
        )),
        _ => Ok(()),
    }
}

/// Pads every spatial plane; returns the padded buffer and its extents.
fn pad_planes<T: Scalar>(
    data: &[T],
    planes: usize,
    h: usize,
    w: usize,
    padding: Padding,
) -> (Vec<T>, usize, usize) {
    let p = padding.width;
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = vec![T::zero(); planes * hp * wp];
    for plane in 0..planes {
        let src = &data[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * hp * wp..(plane + 1) * hp * wp];
        for py in 0..hp {
            let sy = py as isize - p as isize;
            let sy = match padding.mode {
                PaddingMode::Zeros if sy < 0 || sy >= h as isize => continue,
                PaddingMode::Zeros => sy as usize,
                PaddingMode::Circular => sy.rem_euclid(h as isize) as usize,
            };
            let row = &mut dst[py * wp..(py + 1) * wp];
            let srow = &src[sy * w..(sy + 1) * w];
            row[p..p + w].copy_from_slice(srow);
            if padding.mode == PaddingMode::Circular && p > 0 {
                if p <= w {
                    row[..p].copy_from_slice(&srow[w - p..]);
                    row[p + w..].copy_from_slice(&srow[..p]);
                } else {
                    for (px, v) in row.iter_mut().enumerate() {
                        *v = srow[(px as isize - p as isize).rem_euclid(w as isize) as usize];
                    }
                }
            }
        }
    }
    (out, hp, wp)
}

/// Folds a padded buffer back onto the unpadded extent: zero padding drops
/// the border, circular padding adds it onto the wrapped positions.
fn unpad_planes<T: Scalar>(
    data: &[T],
    planes: usize,
    hp: usize,
    wp: usize,
    h: usize,
    w: usize,
    padding: Padding,
) -> Vec<T> {
    let p = padding.width as isize;
    let mut out = vec![T::zero(); planes * h * w];
    for plane in 0..planes {
        let src = &data[plane * hp * wp..(plane + 1) * hp * wp];
        let dst = &mut out[plane * h * w..(plane + 1) * h * w];
        for py in 0..hp {
            let y = py as isize - p;
            let y = match padding.mode {
                PaddingMode::Zeros if y < 0 || y >= h as isize => continue,
                PaddingMode::Zeros => y as usize,
                PaddingMode::Circular => y.rem_euclid(h as isize) as usize,
            };
            let srow = &src[py * wp..(py + 1) * wp];
            let drow = &mut dst[y * w..(y + 1) * w];
            let pu = p as usize;
            for (d, &v) in drow.iter_mut().zip(&srow[pu..pu + w]) {
                *d = *d + v;
            }
            if padding.mode == PaddingMode::Circular {
                for (px, &v) in srow[..pu].iter().chain(&srow[pu + w..]).enumerate() {
                    let px = if px < pu { px } else { px + w };
                    let x = (px as isize - p).rem_euclid(w as isize) as usize;
                    drow[x] = drow[x] + v;
                }
            }
        }
    }
    out
}

/// 2-D cross-correlation with optional zero or circular padding.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    const OP: &str = "conv2d";
    let (n, cin, h, w) = input.dims4(OP)?;
    let (cout, wcin, kh, kw) = weight.dims4(OP)?;
    if stride == 0 {
        return Err(Error::invalid(OP, "stride must be positive"));
    }
    if wcin != cin {
        return Err(Error::shape(
            OP,
            format!("input has {cin} channels, weight expects {wcin}"),
        ));
    }
    check_bias(OP, bias, cout)?;
    let (padded, hp, wp) = pad_planes(input.data(), n * cin, h, w, padding);
    if hp < kh || wp < kw {
        return Err(Error::shape(
            OP,
            format!("kernel {kh}x{kw} larger than padded input {hp}x{wp}"),
        ));
    }
    let ho = (hp - kh) / stride + 1;
    let wo = (wp - kw) / stride + 1;
    let out = correlate_valid(&padded, n, cin, hp, wp, weight.data(), cout, kh, kw, stride, ho, wo, bias);
    Tensor::from_parts(vec![n, cout, ho, wo], out).ensure_finite(OP)
}

/// Splits an `h×w` plane into `stride²` polyphase components so that
/// strided access becomes contiguous: phase `(py, px)` holds
/// `plane[stride·a + py, stride·b + px]`. Returns the phases row-major in
/// `(py, px)` with their common extent (short phases are zero-filled).
fn split_phases<T: Scalar>(plane: &[T], h: usize, w: usize, stride: usize) -> (Vec<Vec<T>>, usize, usize) {
    let (ph, pw) = (h.div_ceil(stride), w.div_ceil(stride));
    let mut phases = Vec::with_capacity(stride * stride);
    for py in 0..stride {
        for px in 0..stride {
            let mut phase = vec![T::zero(); ph * pw];
            for (a, y) in (py..h).step_by(stride).enumerate() {
                let src = plane[y * w + px..(y + 1) * w].iter().step_by(stride);
                for (d, &v) in phase[a * pw..(a + 1) * pw].iter_mut().zip(src) {
                    *d = v;
                }
            }
            phases.push(phase);
        }
    }
    (phases, ph, pw)
}

/// Inverse of [`split_phases`], writing into an `h×w` plane.
fn merge_phases<T: Scalar>(phases: &[Vec<T>], ph: usize, pw: usize, stride: usize, plane: &mut [T], h: usize, w: usize) {
    debug_assert!(h.div_ceil(stride) <= ph && w.div_ceil(stride) <= pw);
    for py in 0..stride {
        for px in 0..stride {
            let phase = &phases[py * stride + px];
            for (a, y) in (py..h).step_by(stride).enumerate() {
                let dst = plane[y * w + px..(y + 1) * w].iter_mut().step_by(stride);
                for (d, &v) in dst.zip(&phase[a * pw..(a + 1) * pw]) {
                    *d = v;
                }
            }
        }
    }
}

/// `dst += wv · src` elementwise.
#[inline]
fn axpy<T: Scalar>(dst: &mut [T], src: &[T], wv: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + wv * s;
    }
}

/// Valid-mode strided correlation over pre-padded planes.
#[allow(clippy::too_many_arguments)]
fn correlate_valid<T: Scalar>(
    padded: &[T],
    n: usize,
    cin: usize,
    hp: usize,
    wp: usize,
    weight: &[T],
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ho: usize,
    wo: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let mut out = vec![T::zero(); n * cout * ho * wo];
    for b in 0..n {
        // Polyphase view of every input plane of this batch item.
        let planes: Vec<(Vec<Vec<T>>, usize, usize)> = (0..cin)
            .map(|i| {
                let src = &padded[(b * cin + i) * hp * wp..(b * cin + i + 1) * hp * wp];
                if stride == 1 {
                    (vec![src.to_vec()], hp, wp)
                } else {
                    split_phases(src, hp, wp, stride)
                }
            })
            .collect();
        let pw = planes.first().map_or(wo, |p| p.2);
        // Rows are accumulated at the phase pitch `pw` so every tap is one
        // contiguous update; columns past `wo` are scratch.
        let mut wide = vec![T::zero(); ho * pw];
        for o in 0..cout {
            wide.fill(bias.map_or(T::zero(), |bias| bias[o]));
            for (i, (phases, _, _)) in planes.iter().enumerate() {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = weight[((o * cin + i) * kh + ky) * kw + kx];
                        let phase = &phases[(ky % stride) * stride + kx % stride];
                        let start = (ky / stride) * pw + kx / stride;
                        axpy(&mut wide, &phase[start..], wv);
                    }
                }
            }
            let dst = &mut out[(b * cout + o) * ho * wo..(b * cout + o + 1) * ho * wo];
            for (d, row) in dst.chunks_exact_mut(wo).zip(wide.chunks(pw)) {
                d.copy_from_slice(&row[..wo]);
            }
        }
    }
    out
}

/// Scatters `input` through `weight` (layout in × out × kh × kw) onto a
/// buffer of the full transposed extent `(h-1)·stride + k`, extended to at
/// least `min_full_h × min_full_w`.
#[allow(clippy::too_many_arguments)]
fn scatter_full<T: Scalar>(
    input: &[T],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    weight: &[T],
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    min_full: (usize, usize),
) -> (Vec<T>, usize, usize) {
    let hf = ((h - 1) * stride + kh).max(min_full.0);
    let wf = ((w - 1) * stride + kw).max(min_full.1);
    let (ph, pw) = (hf.div_ceil(stride), wf.div_ceil(stride));
    let mut full = vec![T::zero(); n * cout * hf * wf];
    for b in 0..n {
        // Input rows widened to the phase pitch `pw` with zero columns, so
        // every tap is one contiguous update.
        let wide: Vec<Vec<T>> = (0..cin)
            .map(|i| {
                let src = &input[(b * cin + i) * h * w..(b * cin + i + 1) * h * w];
                let mut row = vec![T::zero(); h * pw];
                for (d, s) in row.chunks_exact_mut(pw).zip(src.chunks_exact(w)) {
                    d[..w].copy_from_slice(s);
                }
                row
            })
            .collect();
        for o in 0..cout {
            // Output phase (qy, qx) collects full[stride·a + qy, stride·b + qx].
            let mut phases = vec![vec![T::zero(); ph * pw]; stride * stride];
            for (i, src) in wide.iter().enumerate() {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = weight[((i * cout + o) * kh + ky) * kw + kx];
                        let phase = &mut phases[(ky % stride) * stride + kx % stride];
                        let start = (ky / stride) * pw + kx / stride;
                        axpy(&mut phase[start..], src, wv);
                    }
                }
            }
            let plane = &mut full[(b * cout + o) * hf * wf..(b * cout + o + 1) * hf * wf];
            if stride == 1 {
                plane.copy_from_slice(&phases[0]);
            } else {
                merge_phases(&phases, ph, pw, stride, plane, hf, wf);
            }
        }
    }
    (full, hf, wf)
}

/// Transposed convolution: the adjoint of [`conv2d`] with the same weight,
/// stride and padding.
///
/// With zero padding of width `p` the output extent is `(h-1)·stride + k - 2p`
/// (the border is cropped); with circular padding the same extent is used and
/// border contributions wrap around.
pub fn conv_transpose2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    const OP: &str = "conv_transpose2d";
    let (_, _, h, w) = input.dims4(OP)?;
    let (_, _, kh, kw) = weight.dims4(OP)?;
    if stride == 0 {
        return Err(Error::invalid(OP, "stride must be positive"));
    }
    let full_h = (h.max(1) - 1) * stride + kh;
    let full_w = (w.max(1) - 1) * stride + kw;
    let p2 = 2 * padding.width;
    if full_h <= p2 || full_w <= p2 {
        return Err(Error::shape(
            OP,
            format!("padding {} consumes the whole {full_h}x{full_w} output", padding.width),
        ));
    }
    conv_transpose2d_sized(input, weight, bias, stride, padding, full_h - p2, full_w - p2)
}

/// Transposed convolution onto an explicit output extent; used for the input
/// gradient of strided convolutions whose forward extent was floored.
pub(crate) fn conv_transpose2d_sized<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
    stride: usize,
    padding: Padding,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    const OP: &str = "conv_transpose2d";
    let (n, cin, h, w) = input.dims4(OP)?;
    let (wcin, cout, kh, kw) = weight.dims4(OP)?;
    if wcin != cin {
        return Err(Error::shape(
            OP,
            format!("input has {cin} channels, weight expects {wcin}"),
        ));
    }
    check_bias(OP, bias, cout)?;
    if h == 0 || w == 0 {
        return Err(Error::shape(OP, "empty spatial extent"));
    }
    let p = padding.width;
    let (hp, wp) = (out_h + 2 * p, out_w + 2 * p);
    let (full, hf, wf) = scatter_full(input.data(), n, cin, h, w, weight.data(), cout, kh, kw, stride, (hp, wp));
    // Trim the scatter buffer to the padded extent before folding.
    let mut trimmed = if hf == hp && wf == wp {
        full
    } else {
        let mut t = vec![T::zero(); n * cout * hp * wp];
        for plane in 0..n * cout {
            for y in 0..hp {
                let src = &full[plane * hf * wf + y * wf..plane * hf * wf + y * wf + wp];
                t[plane * hp * wp + y * wp..plane * hp * wp + (y + 1) * wp].copy_from_slice(src);
            }
        }
        t
    };
    if p > 0 {
        trimmed = unpad_planes(&trimmed, n * cout, hp, wp, out_h, out_w, padding);
    }
    if let Some(bias) = bias {
        for b in 0..n {
            for (o, &bv) in bias.iter().enumerate() {
                let plane = &mut trimmed[(b * cout + o) * out_h * out_w..(b * cout + o + 1) * out_h * out_w];
                for v in plane {
                    *v = *v + bv;
                }
            }
        }
    }
    Tensor::from_parts(vec![n, cout, out_h, out_w], trimmed).ensure_finite(OP)
}

/// Gradient of [`conv2d`] with respect to its input.
pub fn conv2d_input_grad<T: Scalar>(
    grad_out: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: Padding,
    input_h: usize,
    input_w: usize,
) -> Result<Tensor<T>> {
    conv_transpose2d_sized(grad_out, weight, None, stride, padding, input_h, input_w)
}

/// Gradient of [`conv_transpose2d`] with respect to its input.
pub fn conv_transpose2d_input_grad<T: Scalar>(
    grad_out: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: Padding,
    input_h: usize,
    input_w: usize,
) -> Result<Tensor<T>> {
    let g = conv2d(grad_out, weight, None, stride, padding)?;
    let (_, _, gh, gw) = g.dims4("conv_transpose2d_input_grad")?;
    if gh < input_h || gw < input_w {
        return Err(Error::shape(
            "conv_transpose2d_input_grad",
            format!("adjoint extent {gh}x{gw} smaller than input {input_h}x{input_w}"),
        ));
    }
    if gh == input_h && gw == input_w {
        return Ok(g);
    }
    let (n, c, _, _) = g.dims4("conv_transpose2d_input_grad")?;
    let mut out = Vec::with_capacity(n * c * input_h * input_w);
    for plane in 0..n * c {
        for y in 0..input_h {
            let start = plane * gh * gw + y * gw;
            out.extend_from_slice(&g.data()[start..start + input_w]);
        }
    }
    Ok(Tensor::from_parts(vec![n, c, input_h, input_w], out))
}

/// Repeats every pixel `factor × factor` times.
pub fn upsample_nearest<T: Scalar>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    const OP: &str = "upsample_nearest";
    if factor < 1 {
        return Err(Error::invalid(OP, "factor must be at least 1"));
    }
    let (n, c, h, w) = input.dims4(OP)?;
    let (ho, wo) = (h * factor, w * factor);
    let mut out = vec![T::zero(); n * c * ho * wo];
    for plane in 0..n * c {
        let src = &input.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
        for y in 0..ho {
            let srow = &src[(y / factor) * w..(y / factor + 1) * w];
            for (x, d) in dst[y * wo..(y + 1) * wo].iter_mut().enumerate() {
                *d = srow[x / factor];
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, ho, wo], out))
}

/// Block sum: adjoint of [`upsample_nearest`].
pub fn upsample_nearest_backward<T: Scalar>(grad: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    const OP: &str = "upsample_nearest_backward";
    let (n, c, ho, wo) = grad.dims4(OP)?;
    if factor == 0 || ho % factor != 0 || wo % factor != 0 {
        return Err(Error::shape(OP, format!("{ho}x{wo} not divisible by {factor}")));
    }
    let (h, w) = (ho / factor, wo / factor);
    let mut out = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        let src = &grad.data()[plane * ho * wo..(plane + 1) * ho * wo];
        let dst = &mut out[plane * h * w..(plane + 1) * h * w];
        for y in 0..ho {
            for x in 0..wo {
                let d = &mut dst[(y / factor) * w + x / factor];
                *d = *d + src[y * wo + x];
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, h, w], out))
}

pub fn activation<T: Scalar>(input: &Tensor<T>, kind: Activation) -> Result<Tensor<T>> {
    kind.validate()?;
    input.map(|v| kind.apply(v)).ensure_finite("activation")
}

pub fn activation_backward<T: Scalar>(
    input: &Tensor<T>,
    output: &Tensor<T>,
    grad: &Tensor<T>,
    kind: Activation,
) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .zip(output.data())
        .zip(grad.data())
        .map(|((&x, &y), &g)| g * kind.derivative(x, y))
        .collect();
    Tensor::from_parts(input.shape().to_vec(), data)
}

/// Per-channel affine map `y = x·scale[c] + shift[c]`.
pub fn affine_channel<T: Scalar>(input: &Tensor<T>, scale: &[T], shift: &[T]) -> Result<Tensor<T>> {
    const OP: &str = "affine_channel";
    let (n, c, h, w) = input.dims4(OP)?;
    if scale.len() != c || shift.len() != c {
        return Err(Error::shape(
            OP,
            format!("{c} channels but scale/shift have {}/{}", scale.len(), shift.len()),
        ));
    }
    let mut out = input.data().to_vec();
    for b in 0..n {
        for ci in 0..c {
            let plane = &mut out[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
            for v in plane {
                *v = *v * scale[ci] + shift[ci];
            }
        }
    }
    Tensor::from_parts(vec![n, c, h, w], out).ensure_finite(OP)
}

pub fn affine_channel_backward<T: Scalar>(grad: &Tensor<T>, scale: &[T]) -> Result<Tensor<T>> {
    let zero = vec![T::zero(); scale.len()];
    affine_channel(grad, scale, &zero)
}

pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    const OP: &str = "concat_channels";
    let (na, ca, ha, wa) = a.dims4(OP)?;
    let (nb, cb, hb, wb) = b.dims4(OP)?;
    if (na, ha, wa) != (nb, hb, wb) {
        return Err(Error::shape(
            OP,
            format!("{:?} and {:?} differ outside the channel axis", a.shape(), b.shape()),
        ));
    }
    let plane = ha * wa;
    let mut out = Vec::with_capacity(a.numel() + b.numel());
    for n in 0..na {
        out.extend_from_slice(&a.data()[n * ca * plane..(n + 1) * ca * plane]);
        out.extend_from_slice(&b.data()[n * cb * plane..(n + 1) * cb * plane]);
    }
    Ok(Tensor::from_parts(vec![na, ca + cb, ha, wa], out))
}

/// Splits a gradient of [`concat_channels`] back into its two operands.
pub fn split_channels<T: Scalar>(grad: &Tensor<T>, first: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    const OP: &str = "split_channels";
    let (n, c, h, w) = grad.dims4(OP)?;
    if first > c {
        return Err(Error::shape(OP, format!("split at {first} of {c} channels")));
    }
    let plane = h * w;
    let mut a = Vec::with_capacity(n * first * plane);
    let mut b = Vec::with_capacity(n * (c - first) * plane);
    for bi in 0..n {
        let base = bi * c * plane;
        a.extend_from_slice(&grad.data()[base..base + first * plane]);
        b.extend_from_slice(&grad.data()[base + first * plane..base + c * plane]);
    }
    Ok((
        Tensor::from_parts(vec![n, first, h, w], a),
        Tensor::from_parts(vec![n, c - first, h, w], b),
    ))
}

/// Broadcasts a per-item vector (`N×C`, `N×C×1×1` or `C`) to `N×C×H×W`.
pub fn replicate_spatial<T: Scalar>(input: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    const OP: &str = "replicate_spatial";
    let (n, c) = match input.shape()[..] {
        [c] => (1, c),
        [n, c] => (n, c),
        [n, c, 1, 1] => (n, c),
        _ => {
            return Err(Error::shape(
                OP,
                format!("expected a vector per batch item, got {:?}", input.shape()),
            ))
        }
    };
    if h == 0 || w == 0 {
        return Err(Error::invalid(OP, "target extent must be non-empty"));
    }
    let mut out = Vec::with_capacity(n * c * h * w);
    for &v in input.data() {
        out.extend(std::iter::repeat_n(v, h * w));
    }
    Ok(Tensor::from_parts(vec![n, c, h, w], out))
}

/// Sums every spatial plane: adjoint of [`replicate_spatial`] (returned as `N×C`).
pub fn spatial_sum<T: Scalar>(grad: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = grad.dims4("spatial_sum")?;
    let data = grad
        .data()
        .chunks(h * w)
        .map(|plane| plane.iter().copied().sum())
        .collect();
    Ok(Tensor::from_parts(vec![n, c], data))
}

/// Source index for output position `i` under pixel-center nearest neighbour.
pub fn nearest_index(i: usize, src: usize, dst: usize) -> usize {
    // floor((i + 0.5) · src / dst) evaluated in integers.
    (((2 * i + 1) * src) / (2 * dst)).min(src - 1)
}

/// Nearest-neighbour resize of the spatial axes (pixel-center convention).
pub fn resize_nearest<T: Scalar>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    const OP: &str = "resize_nearest";
    let (n, c, h, w) = input.dims4(OP)?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::invalid(OP, "extents must be non-empty"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(input.clone());
    }
    let ys: Vec<usize> = (0..out_h).map(|i| nearest_index(i, h, out_h)).collect();
    let xs: Vec<usize> = (0..out_w).map(|j| nearest_index(j, w, out_w)).collect();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in input.data().chunks(h * w) {
        for &y in &ys {
            out.extend(xs.iter().map(|&x| plane[y * w + x]));
        }
    }
    Ok(Tensor::from_parts(vec![n, c, out_h, out_w], out))
}

pub fn resize_nearest_backward<T: Scalar>(grad: &Tensor<T>, in_h: usize, in_w: usize) -> Result<Tensor<T>> {
    const OP: &str = "resize_nearest_backward";
    let (n, c, out_h, out_w) = grad.dims4(OP)?;
    if (in_h, in_w) == (out_h, out_w) {
        return Ok(grad.clone());
    }
    let mut out = vec![T::zero(); n * c * in_h * in_w];
    for (plane, g) in grad.data().chunks(out_h * out_w).enumerate() {
        let dst = &mut out[plane * in_h * in_w..(plane + 1) * in_h * in_w];
        for i in 0..out_h {
            let y = nearest_index(i, in_h, out_h);
            for j in 0..out_w {
                let x = nearest_index(j, in_w, out_w);
                dst[y * in_w + x] = dst[y * in_w + x] + g[i * out_w + j];
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, in_h, in_w], out))
}

pub fn clamp<T: Scalar>(input: &Tensor<T>, lo: T, hi: T) -> Tensor<T> {
    input.map(|v| v.max(lo).min(hi))
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine_similarity<T: Scalar>(u: &[T], v: &[T]) -> Result<f64> {
    const EPS: f64 = 1e-12;
    if u.len() != v.len() {
        return Err(Error::shape(
            "cosine_similarity",
            format!("lengths {} and {}", u.len(), v.len()),
        ));
    }
    let (mut dot, mut nu, mut nv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (a.to_f64_lossy(), b.to_f64_lossy());
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    let (nu, nv) = (nu.sqrt(), nv.sqrt());
    if nu <= EPS || nv <= EPS {
        return Err(Error::DegenerateVector { threshold: EPS });
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Mean over height and width weighted by a non-negative `H×W` mask.
///
/// Accepts `C×H×W` or `1×C×H×W` activations.
pub fn masked_channel_mean<T: Scalar>(act: &Tensor<T>, mask: &[T]) -> Result<Vec<T>> {
    const OP: &str = "masked_channel_mean";
    let (h, w) = match act.shape()[..] {
        [_, h, w] | [1, _, h, w] => (h, w),
        _ => {
            return Err(Error::shape(
                OP,
                format!("expected C×H×W activations, got {:?}", act.shape()),
            ))
        }
    };
    if mask.len() != h * w {
        return Err(Error::shape(
            OP,
            format!("mask has {} cells, activations are {h}x{w}", mask.len()),
        ));
    }
    if mask.iter().any(|&m| m < T::zero() || !m.is_finite()) {
        return Err(Error::invalid(OP, "mask weights must be finite and non-negative"));
    }
    let total: T = mask.iter().copied().sum();
    if total <= T::zero() {
        return Err(Error::DegenerateMask("mask weights sum to zero".into()));
    }
    let out = act
        .data()
        .chunks(h * w)
        .map(|plane| {
            plane
                .iter()
                .zip(mask)
                .fold(T::zero(), |acc, (&a, &m)| acc + a * m)
                / total
        })
        .collect::<Vec<_>>();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: OP });
    }
    Ok(out)
}
