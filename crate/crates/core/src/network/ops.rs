//! Convolution and batch-normalisation kernels on CHW f32 buffers.
//!
//! Convolutions go through im2col followed by a single sgemm; the column
//! buffer is kept for the backward pass.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Row-major C = alpha·A·B + beta·C with explicit strides.
#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm(m: usize, k: usize, n: usize, a: &[f32], rsa: usize, csa: usize, b: &[f32], rsb: usize, csb: usize, beta: f32, c: &mut [f32]) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the slices cover every element addressed by the given
    // dimensions and strides; `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Square-kernel convolution with "same"-style padding of `kernel / 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// out × (in·k·k)
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

/// Activations a conv layer keeps for its backward pass.
#[derive(Debug, Clone, Default)]
pub struct ConvCache {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    /// im2col buffer, or the input itself for 1×1 stride-1 convolutions.
    pub cols: Vec<f32>,
}

impl Conv2d {
    /// He-normal weights, zero bias.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f32;
        let normal = Normal::new(0.0f32, (2.0 / fan_in).sqrt()).expect("finite std");
        let weight = (0..out_channels * in_channels * kernel * kernel)
            .map(|_| normal.sample(rng))
            .collect();
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            weight,
            bias: vec![0.0; out_channels],
        }
    }

    pub fn scale_weights(&mut self, factor: f32) {
        self.weight.iter_mut().for_each(|w| *w *= factor);
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let pad = self.kernel / 2;
        (
            (h + 2 * pad - self.kernel) / self.stride + 1,
            (w + 2 * pad - self.kernel) / self.stride + 1,
        )
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    fn im2col(&self, input: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
        let k = self.kernel;
        let pad = k / 2;
        let n = oh * ow;
        let mut cols = vec![0.0f32; self.patch_len() * n];
        for ci in 0..self.in_channels {
            let plane = &input[ci * h * w..(ci + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &mut cols[((ci * k + ki) * k + kj) * n..][..n];
                    for oi in 0..oh {
                        let ii = (oi * self.stride + ki) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let src = &plane[ii as usize * w..][..w];
                        let dst = &mut row[oi * ow..][..ow];
                        for (oj, d) in dst.iter_mut().enumerate() {
                            let jj = (oj * self.stride + kj) as isize - pad as isize;
                            if jj >= 0 && jj < w as isize {
                                *d = src[jj as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
        let k = self.kernel;
        let pad = k / 2;
        let n = oh * ow;
        let mut out = vec![0.0f32; self.in_channels * h * w];
        for ci in 0..self.in_channels {
            let plane = &mut out[ci * h * w..(ci + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &cols[((ci * k + ki) * k + kj) * n..][..n];
                    for oi in 0..oh {
                        let ii = (oi * self.stride + ki) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[ii as usize * w..][..w];
                        let src = &row[oi * ow..][..ow];
                        for (oj, s) in src.iter().enumerate() {
                            let jj = (oj * self.stride + kj) as isize - pad as isize;
                            if jj >= 0 && jj < w as isize {
                                dst[jj as usize] += *s;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward(&self, input: &[f32], h: usize, w: usize) -> (Vec<f32>, ConvCache) {
        debug_assert_eq!(input.len(), self.in_channels * h * w);
        let (oh, ow) = self.out_size(h, w);
        let n = oh * ow;
        let cols = if self.is_pointwise() {
            input.to_vec()
        } else {
            self.im2col(input, h, w, oh, ow)
        };
        let mut out = vec![0.0f32; self.out_channels * n];
        for (co, chunk) in out.chunks_mut(n).enumerate() {
            chunk.fill(self.bias[co]);
        }
        let kk = self.patch_len();
        gemm(self.out_channels, kk, n, &self.weight, kk, 1, &cols, n, 1, 1.0, &mut out);
        (
            out,
            ConvCache {
                in_h: h,
                in_w: w,
                out_h: oh,
                out_w: ow,
                cols,
            },
        )
    }

    /// Accumulates parameter gradients into `grad` and returns the input
    /// gradient when `need_input_grad` is set.
    pub fn backward(&self, cache: &ConvCache, grad_out: &[f32], grad: &mut Conv2d, need_input_grad: bool) -> Option<Vec<f32>> {
        let n = cache.out_h * cache.out_w;
        let kk = self.patch_len();
        debug_assert_eq!(grad_out.len(), self.out_channels * n);
        for (co, chunk) in grad_out.chunks(n).enumerate() {
            grad.bias[co] += chunk.iter().sum::<f32>();
        }
        // dW += dOut · colsᵀ
        gemm(self.out_channels, n, kk, grad_out, n, 1, &cache.cols, 1, n, 1.0, &mut grad.weight);
        if !need_input_grad {
            return None;
        }
        // dCols = Wᵀ · dOut
        let mut dcols = vec![0.0f32; kk * n];
        gemm(kk, self.out_channels, n, &self.weight, 1, kk, grad_out, n, 1, 0.0, &mut dcols);
        if self.is_pointwise() {
            Some(dcols)
        } else {
            Some(self.col2im(&dcols, cache.in_h, cache.in_w, cache.out_h, cache.out_w))
        }
    }

    pub fn zeros_like(&self) -> Conv2d {
        Conv2d {
            weight: vec![0.0; self.weight.len()],
            bias: vec![0.0; self.bias.len()],
            ..self.clone()
        }
    }
}

/// Per-channel batch normalisation over (batch, H, W).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f32,
    pub eps: f32,
}

#[derive(Debug, Clone, Default)]
pub struct BatchNormCache {
    /// Normalised activations per image, channel-major.
    pub xhat: Vec<Vec<f32>>,
    pub inv_std: Vec<f32>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn zeros_like(&self) -> BatchNorm {
        BatchNorm {
            gamma: vec![0.0; self.channels],
            beta: vec![0.0; self.channels],
            running_mean: vec![0.0; self.channels],
            running_var: vec![0.0; self.channels],
            ..self.clone()
        }
    }

    /// Training-mode forward over a batch of C×HW buffers, updating the
    /// running statistics.
    pub fn forward_train(&mut self, inputs: &[Vec<f32>], hw: usize) -> (Vec<Vec<f32>>, BatchNormCache) {
        let m = (inputs.len() * hw) as f64;
        let mut inv_std = vec![0.0f32; self.channels];
        let mut xhat: Vec<Vec<f32>> = inputs.iter().map(|x| vec![0.0; x.len()]).collect();
        let mut outputs: Vec<Vec<f32>> = inputs.iter().map(|x| vec![0.0; x.len()]).collect();
        for c in 0..self.channels {
            let mut sum = 0.0f64;
            for x in inputs {
                sum += x[c * hw..(c + 1) * hw].iter().map(|&v| f64::from(v)).sum::<f64>();
            }
            let mean = sum / m;
            let mut sq = 0.0f64;
            for x in inputs {
                sq += x[c * hw..(c + 1) * hw].iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>();
            }
            let var = sq / m;
            let istd = 1.0 / (var + f64::from(self.eps)).sqrt();
            inv_std[c] = istd as f32;
            for ((x, xh), y) in inputs.iter().zip(xhat.iter_mut()).zip(outputs.iter_mut()) {
                for i in c * hw..(c + 1) * hw {
                    let n = ((f64::from(x[i]) - mean) * istd) as f32;
                    xh[i] = n;
                    y[i] = self.gamma[c] * n + self.beta[c];
                }
            }
            let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
            let mo = self.momentum;
            self.running_mean[c] = (1.0 - mo) * self.running_mean[c] + mo * mean as f32;
            self.running_var[c] = (1.0 - mo) * self.running_var[c] + mo * unbiased as f32;
        }
        (outputs, BatchNormCache { xhat, inv_std })
    }

    pub fn forward_eval(&self, input: &[f32], hw: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; input.len()];
        for c in 0..self.channels {
            let istd = 1.0 / (self.running_var[c] + self.eps).sqrt();
            for i in c * hw..(c + 1) * hw {
                out[i] = self.gamma[c] * (input[i] - self.running_mean[c]) * istd + self.beta[c];
            }
        }
        out
    }

    pub fn backward(&self, cache: &BatchNormCache, grad_out: &[Vec<f32>], hw: usize, grad: &mut BatchNorm) -> Vec<Vec<f32>> {
        let m = (grad_out.len() * hw) as f64;
        let mut grad_in: Vec<Vec<f32>> = grad_out.iter().map(|g| vec![0.0; g.len()]).collect();
        for c in 0..self.channels {
            let mut sum_dy = 0.0f64;
            let mut sum_dy_xhat = 0.0f64;
            for (g, xh) in grad_out.iter().zip(&cache.xhat) {
                for i in c * hw..(c + 1) * hw {
                    sum_dy += f64::from(g[i]);
                    sum_dy_xhat += f64::from(g[i]) * f64::from(xh[i]);
                }
            }
            grad.gamma[c] += sum_dy_xhat as f32;
            grad.beta[c] += sum_dy as f32;
            let scale = f64::from(self.gamma[c]) * f64::from(cache.inv_std[c]) / m;
            for ((g, xh), gi) in grad_out.iter().zip(&cache.xhat).zip(grad_in.iter_mut()) {
                for i in c * hw..(c + 1) * hw {
                    gi[i] = (scale * (m * f64::from(g[i]) - sum_dy - f64::from(xh[i]) * sum_dy_xhat)) as f32;
                }
            }
        }
        grad_in
    }
}

pub fn relu_inplace(x: &mut [f32]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes gradient entries whose forward ReLU output was not positive.
pub fn relu_backward_inplace(grad: &mut [f32], activated: &[f32]) {
    for (g, &a) in grad.iter_mut().zip(activated) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}
