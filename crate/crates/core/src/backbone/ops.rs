//! Inference kernels: convolution, batch normalization, max pooling, ReLU.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor3};

/// Convolution filter bank of shape `out × in × kh × kw`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Filters<T = f32> {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub data: Vec<T>,
}

impl<T: Real> Filters<T> {
    pub fn new(out_channels: usize, in_channels: usize, kh: usize, kw: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != out_channels * in_channels * kh * kw {
            return Err(Error::Shape(format!(
                "filter data has {} values, expected {out_channels}x{in_channels}x{kh}x{kw}",
                data.len()
            )));
        }
        Ok(Self {
            out_channels,
            in_channels,
            kh,
            kw,
            data,
        })
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kh, self.kw]
    }

    /// Number of weights feeding one output value.
    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }
}

pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 {
        return None;
    }
    let padded = input + 2 * pad;
    (padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

/// Unrolls input patches into a `(C·kh·kw) × (H_out·W_out)` matrix.
fn im2col<T: Real>(
    input: &Tensor3<T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    let (c, h, w) = input.shape();
    let cols = out_h * out_w;
    let mut m = vec![T::zero(); c * kh * kw * cols];
    for ci in 0..c {
        let plane = input.plane(ci);
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let dst = &mut m[row * cols..(row + 1) * cols];
                for oy in 0..out_h {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let d = &mut dst[oy * out_w..(oy + 1) * out_w];
                    for (ox, slot) in d.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            *slot = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    m
}

/// 2-D cross-correlation with zero padding.
pub fn conv2d<T: Real>(
    input: &Tensor3<T>,
    filters: &Filters<T>,
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
) -> Result<Tensor3<T>> {
    let (c, h, w) = input.shape();
    if c != filters.in_channels {
        return Err(Error::Shape(format!(
            "conv2d input has {c} channels, filters expect {}",
            filters.in_channels
        )));
    }
    if let Some(b) = bias {
        if b.len() != filters.out_channels {
            return Err(Error::Shape(format!(
                "conv2d bias has {} values, expected {}",
                b.len(),
                filters.out_channels
            )));
        }
    }
    let (out_h, out_w) = match (
        conv_output_size(h, filters.kh, stride, pad),
        conv_output_size(w, filters.kw, stride, pad),
    ) {
        (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
        _ => {
            return Err(Error::Shape(format!(
                "conv2d {}x{} kernel, stride {stride}, pad {pad} on {h}x{w} input yields no output",
                filters.kh, filters.kw
            )))
        }
    };

    let cols = out_h * out_w;
    let mut out = Tensor3::zeros(filters.out_channels, out_h, out_w);
    if let Some(b) = bias {
        for (plane, &bv) in out.data.chunks_exact_mut(cols).zip(b) {
            plane.fill(bv);
        }
    }
    let k = filters.fan_in();
    if filters.kh == 1 && filters.kw == 1 && stride == 1 && pad == 0 {
        T::gemm_acc(filters.out_channels, k, cols, &filters.data, &input.data, &mut out.data);
    } else {
        let m = im2col(input, filters.kh, filters.kw, stride, pad, out_h, out_w);
        T::gemm_acc(filters.out_channels, k, cols, &filters.data, &m, &mut out.data);
    }
    Ok(out)
}

/// Frozen batch-normalization statistics for `C` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub eps: f32,
}

pub const BN_EPS: f32 = 1e-5;

impl BatchNorm {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Per channel `gamma·(x − mean)/sqrt(var + eps) + beta`.
pub fn batchnorm_infer(input: &Tensor3<f32>, bn: &BatchNorm) -> Result<Tensor3<f32>> {
    let mut out = input.clone();
    batchnorm_in_place(&mut out, bn)?;
    Ok(out)
}

pub(crate) fn batchnorm_in_place(t: &mut Tensor3<f32>, bn: &BatchNorm) -> Result<()> {
    let c = t.channels;
    if [bn.gamma.len(), bn.beta.len(), bn.mean.len(), bn.var.len()]
        .iter()
        .any(|&n| n != c)
    {
        return Err(Error::Shape(format!(
            "batchnorm statistics do not match {c} input channels"
        )));
    }
    if let Some(i) = bn.var.iter().position(|&v| !(v >= 0.0)) {
        return Err(Error::Shape(format!("batchnorm variance {i} is negative")));
    }
    let plane = t.height * t.width;
    for (ci, chunk) in t.data.chunks_exact_mut(plane.max(1)).enumerate().take(c) {
        let scale = bn.gamma[ci] / (bn.var[ci] + bn.eps).sqrt();
        let (mean, beta) = (bn.mean[ci], bn.beta[ci]);
        for v in chunk {
            *v = (*v - mean) * scale + beta;
        }
    }
    Ok(())
}

/// Windowed spatial maximum; padding never wins over a real value.
pub fn maxpool2d(input: &Tensor3<f32>, kernel: usize, stride: usize, pad: usize) -> Result<Tensor3<f32>> {
    let (c, h, w) = input.shape();
    if kernel == 0 || pad >= kernel {
        return Err(Error::Shape(format!(
            "maxpool kernel {kernel} with pad {pad} is invalid"
        )));
    }
    let (out_h, out_w) = match (
        conv_output_size(h, kernel, stride, pad),
        conv_output_size(w, kernel, stride, pad),
    ) {
        (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
        _ => {
            return Err(Error::Shape(format!(
                "maxpool {kernel}/{stride}/{pad} on {h}x{w} yields no output"
            )))
        }
    };
    let mut out = Tensor3::zeros(c, out_h, out_w);
    for ci in 0..c {
        let plane = input.plane(ci);
        for oy in 0..out_h {
            let y0 = (oy * stride) as isize - pad as isize;
            for ox in 0..out_w {
                let x0 = (ox * stride) as isize - pad as isize;
                let mut m = f32::NEG_INFINITY;
                for y in y0.max(0)..(y0 + kernel as isize).min(h as isize) {
                    let row = &plane[y as usize * w..(y as usize + 1) * w];
                    for x in x0.max(0)..(x0 + kernel as isize).min(w as isize) {
                        m = m.max(row[x as usize]);
                    }
                }
                out.set(ci, oy, ox, m);
            }
        }
    }
    Ok(out)
}

pub fn relu_in_place(t: &mut Tensor3<f32>) {
    for v in &mut t.data {
        *v = v.max(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel() {
        let input = Tensor3::from_vec(1, 3, 3, (1..=9).map(|v| v as f32).collect()).unwrap();
        let f = Filters::new(1, 1, 1, 1, vec![1.0f32]).unwrap();
        assert_eq!(conv2d(&input, &f, None, 1, 0).unwrap(), input);
    }

    #[test]
    fn box_kernel_counts_overlaps() {
        let input = Tensor3::filled(1, 3, 3, 1.0f32);
        let f = Filters::new(1, 1, 3, 3, vec![1.0f32; 9]).unwrap();
        let out = conv2d(&input, &f, None, 1, 1).unwrap();
        assert_eq!(out.shape(), (1, 3, 3));
        assert_eq!(out.get(0, 1, 1), 9.0);
        for (y, x) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(out.get(0, y, x), 4.0);
        }
        assert_eq!(out.get(0, 0, 1), 6.0);
    }

    #[test]
    fn strided_conv_with_bias() {
        let input = Tensor3::from_vec(1, 4, 4, (0..16).map(|v| v as f32).collect()).unwrap();
        let f = Filters::new(2, 1, 2, 2, vec![1.0f32, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let out = conv2d(&input, &f, Some(&[10.0, 0.0]), 2, 0).unwrap();
        assert_eq!(out.shape(), (2, 2, 2));
        assert_eq!(out.plane(0), &[10.0, 12.0, 18.0, 20.0]);
        assert_eq!(out.plane(1), &[5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn conv_shape_errors() {
        let input = Tensor3::filled(2, 3, 3, 1.0f32);
        let f = Filters::new(1, 1, 3, 3, vec![1.0f32; 9]).unwrap();
        assert!(conv2d(&input, &f, None, 1, 0).is_err());
        let f = Filters::new(1, 2, 5, 5, vec![1.0f32; 50]).unwrap();
        assert!(conv2d(&input, &f, None, 1, 0).is_err());
        let f = Filters::new(1, 2, 1, 1, vec![1.0f32; 2]).unwrap();
        assert!(conv2d(&input, &f, Some(&[1.0, 2.0]), 1, 0).is_err());
        assert!(Filters::new(1, 2, 1, 1, vec![1.0f32; 3]).is_err());
    }

    #[test]
    fn batchnorm_identity_and_constant() {
        let input = Tensor3::from_vec(2, 1, 2, vec![1.0, -2.0, 3.5, 0.25]).unwrap();
        let out = batchnorm_infer(&input, &BatchNorm::identity(2)).unwrap();
        for (a, b) in out.data.iter().zip(&input.data) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
        }
        let bn = BatchNorm {
            gamma: vec![0.0, 0.0],
            beta: vec![0.5, -1.0],
            ..BatchNorm::identity(2)
        };
        let out = batchnorm_infer(&input, &bn).unwrap();
        assert_eq!(out.data, vec![0.5, 0.5, -1.0, -1.0]);
        assert!(batchnorm_infer(&input, &BatchNorm::identity(3)).is_err());
    }

    #[test]
    fn maxpool_examples() {
        let input = Tensor3::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(maxpool2d(&input, 2, 2, 0).unwrap().data, vec![4.0]);
        let c = Tensor3::filled(2, 5, 5, -3.0);
        let out = maxpool2d(&c, 3, 2, 1).unwrap();
        assert_eq!(out.shape(), (2, 3, 3));
        assert!(out.data.iter().all(|&v| v == -3.0));
        assert!(maxpool2d(&c, 3, 2, 3).is_err());
    }
}
