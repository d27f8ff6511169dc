//! Forward and backward kernels. The autodiff graph and the inference
//! path both call these, so a model evaluates identically whether or not
//! gradients are being recorded.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Geometry of a cubic-kernel 3D convolution with symmetric zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_extent: [usize; 3],
    pub out_extent: [usize; 3],
}

impl ConvGeometry {
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        in_extent: [usize; 3],
    ) -> Result<Self> {
        if kernel == 0 || kernel.is_multiple_of(2) {
            return Err(Error::invalid(format!("kernel size must be odd, got {kernel}")));
        }
        if !(1..=2).contains(&stride) {
            return Err(Error::invalid(format!("stride must be 1 or 2, got {stride}")));
        }
        let pad = kernel / 2;
        let out = |n: usize| (n + 2 * pad - kernel) / stride + 1;
        Ok(Self {
            c_in,
            c_out,
            kernel,
            stride,
            pad,
            in_extent,
            out_extent: [out(in_extent[0]), out(in_extent[1]), out(in_extent[2])],
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.kernel.pow(3)
    }

    pub fn out_voxels(&self) -> usize {
        self.out_extent.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }
}

/// Unfolds `(c_in, d, h, w)` into a `(c_in·k³) x P` patch matrix.
pub fn im2col<T: Real>(input: &[T], g: &ConvGeometry) -> Vec<T> {
    let [d_in, h_in, w_in] = g.in_extent;
    let [d_out, h_out, w_out] = g.out_extent;
    let p = g.out_voxels();
    let k = g.kernel;
    let mut cols = vec![T::ZERO; g.patch_len() * p];
    let mut row = 0;
    for c in 0..g.c_in {
        let plane = &input[c * d_in * h_in * w_in..(c + 1) * d_in * h_in * w_in];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for od in 0..d_out {
                        let id = (od * g.stride + kd) as isize - g.pad as isize;
                        if id < 0 || id >= d_in as isize {
                            continue;
                        }
                        for oh in 0..h_out {
                            let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                            if ih < 0 || ih >= h_in as isize {
                                continue;
                            }
                            let src_row = (id as usize * h_in + ih as usize) * w_in;
                            let dst_row = (od * h_out + oh) * w_out;
                            for ow in 0..w_out {
                                let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                                if iw >= 0 && iw < w_in as isize {
                                    dst[dst_row + ow] = plane[src_row + iw as usize];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates patch gradients into `grad_input`.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeometry, grad_input: &mut [T]) {
    let [d_in, h_in, w_in] = g.in_extent;
    let [d_out, h_out, w_out] = g.out_extent;
    let p = g.out_voxels();
    let k = g.kernel;
    let mut row = 0;
    for c in 0..g.c_in {
        let plane = &mut grad_input[c * d_in * h_in * w_in..(c + 1) * d_in * h_in * w_in];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let src = &cols[row * p..(row + 1) * p];
                    for od in 0..d_out {
                        let id = (od * g.stride + kd) as isize - g.pad as isize;
                        if id < 0 || id >= d_in as isize {
                            continue;
                        }
                        for oh in 0..h_out {
                            let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                            if ih < 0 || ih >= h_in as isize {
                                continue;
                            }
                            let dst_row = (id as usize * h_in + ih as usize) * w_in;
                            let src_row = (od * h_out + oh) * w_out;
                            for ow in 0..w_out {
                                let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                                if iw >= 0 && iw < w_in as isize {
                                    plane[dst_row + iw as usize] += src[src_row + ow];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Validates operand shapes and returns the convolution geometry.
pub fn conv3d_geometry<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Result<ConvGeometry> {
    let (c_in, extent) = input.dims4()?;
    let (c_out, wc, k) = match weight.shape() {
        &[co, ci, kd, kh, kw] if kd == kh && kh == kw => (co, ci, kd),
        other => {
            return Err(Error::shape(
                "conv3d weight",
                "[c_out, c_in, k, k, k]",
                other,
            ))
        }
    };
    if wc != c_in {
        return Err(Error::shape("conv3d input channels", wc, c_in));
    }
    if bias.shape() != [c_out] {
        return Err(Error::shape("conv3d bias", [c_out], bias.shape()));
    }
    ConvGeometry::new(c_in, c_out, k, stride, extent)
}

pub fn conv3d_forward<T: Real>(input: &[T], weight: &[T], bias: &[T], g: &ConvGeometry) -> Vec<T> {
    let p = g.out_voxels();
    let mut out = vec![T::ZERO; g.c_out * p];
    for (co, chunk) in out.chunks_exact_mut(p).enumerate() {
        chunk.fill(bias[co]);
    }
    if g.is_pointwise() {
        T::gemm(false, false, g.c_out, g.c_in, p, T::ONE, weight, input, T::ONE, &mut out);
    } else {
        let cols = im2col(input, g);
        T::gemm(false, false, g.c_out, g.patch_len(), p, T::ONE, weight, &cols, T::ONE, &mut out);
    }
    out
}

pub struct ConvGrads<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub input: Option<Vec<T>>,
}

pub fn conv3d_backward<T: Real>(
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    g: &ConvGeometry,
    need_input: bool,
) -> ConvGrads<T> {
    let p = g.out_voxels();
    let kl = g.patch_len();
    let bias = grad_out
        .chunks_exact(p)
        .map(|row| row.iter().copied().sum())
        .collect();
    let mut gw = vec![T::ZERO; g.c_out * kl];
    let cols_owned;
    let cols: &[T] = if g.is_pointwise() {
        input
    } else {
        cols_owned = im2col(input, g);
        &cols_owned
    };
    T::gemm(false, true, g.c_out, p, kl, T::ONE, grad_out, cols, T::ZERO, &mut gw);
    let gi = need_input.then(|| {
        let mut gcols = vec![T::ZERO; kl * p];
        T::gemm(true, false, kl, g.c_out, p, T::ONE, weight, grad_out, T::ZERO, &mut gcols);
        if g.is_pointwise() {
            gcols
        } else {
            let mut gi = vec![T::ZERO; g.c_in * g.in_extent.iter().product::<usize>()];
            col2im(&gcols, g, &mut gi);
            gi
        }
    });
    ConvGrads {
        weight: gw,
        bias,
        input: gi,
    }
}

/// 3D cross-correlation with zero padding `k / 2`; output extent is
/// `ceil(n / stride)` per axis.
pub fn conv3d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    let g = conv3d_geometry(input, weight, bias, stride)?;
    let out = conv3d_forward(input.data(), weight.data(), bias.data(), &g);
    let [d, h, w] = g.out_extent;
    Tensor::new(&[g.c_out, d, h, w], out)
}

pub fn relu<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| if v > T::ZERO { v } else { T::ZERO }).collect()
}

/// Checks `x: [n, f_in]`, `w: [f_in, f_out]`, `b: [f_out]`.
pub fn linear_dims<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<(usize, usize, usize)> {
    let (n, f_in) = x.dims2()?;
    let (wi, f_out) = w.dims2()?;
    if wi != f_in {
        return Err(Error::shape("linear weight rows", f_in, wi));
    }
    if b.shape() != [f_out] {
        return Err(Error::shape("linear bias", [f_out], b.shape()));
    }
    Ok((n, f_in, f_out))
}

pub fn linear_forward<T: Real>(x: &[T], w: &[T], b: &[T], n: usize, f_in: usize, f_out: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * f_out);
    for _ in 0..n {
        out.extend_from_slice(b);
    }
    T::gemm(false, false, n, f_in, f_out, T::ONE, x, w, T::ONE, &mut out);
    out
}

/// Affine map `x · w + b`.
pub fn linear<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, f_in, f_out) = linear_dims(x, w, b)?;
    Tensor::new(&[n, f_out], linear_forward(x.data(), w.data(), b.data(), n, f_in, f_out))
}

pub fn softmax_rows_raw<T: Real>(logits: &[T], k: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; logits.len()];
    for (row, dst) in logits.chunks_exact(k).zip(out.chunks_exact_mut(k)) {
        let m = row.iter().copied().fold(row[0], T::max);
        let mut sum = T::ZERO;
        for (o, &v) in dst.iter_mut().zip(row) {
            *o = (v - m).exp();
            sum += *o;
        }
        for o in dst.iter_mut() {
            *o = *o / sum;
        }
    }
    out
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, k) = logits.dims2()?;
    if k < 2 {
        return Err(Error::invalid(format!("softmax needs at least 2 classes, got {k}")));
    }
    Tensor::new(&[n, k], softmax_rows_raw(logits.data(), k))
}

pub(crate) fn check_targets(n: usize, k: usize, targets: &[usize]) -> Result<()> {
    if n == 0 {
        return Err(Error::invalid("loss over an empty batch"));
    }
    if targets.len() != n {
        return Err(Error::shape("loss targets", n, targets.len()));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::invalid(format!("target class {t} out of range for {k} classes")));
    }
    Ok(())
}

/// Mean negative log-likelihood of the targets under `softmax(logits)`.
/// Returns the loss and the per-row log-probabilities.
pub fn cross_entropy_raw<T: Real>(logits: &[T], k: usize, targets: &[usize]) -> (T, Vec<T>) {
    let n = targets.len();
    let mut logp = vec![T::ZERO; logits.len()];
    let mut total = T::ZERO;
    for (i, (row, dst)) in logits.chunks_exact(k).zip(logp.chunks_exact_mut(k)).enumerate() {
        let m = row.iter().copied().fold(row[0], T::max);
        let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
        for (o, &v) in dst.iter_mut().zip(row) {
            *o = v - lse;
        }
        total -= dst[targets[i]];
    }
    (total / T::from_f64(n as f64), logp)
}

pub fn cross_entropy<T: Real>(logits: &Tensor<T>, targets: &[usize]) -> Result<T> {
    let (n, k) = logits.dims2()?;
    check_targets(n, k, targets)?;
    Ok(cross_entropy_raw(logits.data(), k, targets).0)
}

/// Per-class soft-Dice sums: `(Σ p·y, Σ p, Σ y)`.
pub(crate) fn dice_sums<T: Real>(probs: &[T], k: usize, targets: &[usize]) -> Vec<(T, T, T)> {
    let mut sums = vec![(T::ZERO, T::ZERO, T::ZERO); k];
    for (row, &t) in probs.chunks_exact(k).zip(targets) {
        for (c, &p) in row.iter().enumerate() {
            sums[c].1 += p;
        }
        sums[t].0 += row[t];
        sums[t].2 += T::ONE;
    }
    sums
}

pub(crate) fn dice_from_sums<T: Real>(sums: &[(T, T, T)], smooth: T) -> T {
    let k = T::from_f64(sums.len() as f64);
    let two = T::from_f64(2.0);
    let mut acc = T::ZERO;
    for &(inter, p, y) in sums {
        let den = p + y + smooth;
        // Classes with no mass on either side count as perfectly matched.
        acc += if den > T::ZERO { (two * inter + smooth) / den } else { T::ONE };
    }
    T::ONE - acc / k
}

/// Soft Dice loss `1 − mean_k (2Σp·y + s) / (Σp + Σy + s)` over all classes.
pub fn dice_loss<T: Real>(probs: &Tensor<T>, targets: &[usize], smooth: T) -> Result<T> {
    let (n, k) = probs.dims2()?;
    check_targets(n, k, targets)?;
    Ok(dice_from_sums(&dice_sums(probs.data(), k, targets), smooth))
}

/// Index of the largest entry in each row; the lowest index wins ties.
pub fn argmax_rows<T: Real>(values: &[T], k: usize) -> Vec<usize> {
    values
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for c in 1..k {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}
