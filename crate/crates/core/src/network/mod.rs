//! Two-branch fully convolutional counting network.
//!
//! A backbone produces an F×H×W feature grid. A shared 1×1 convolution
//! maps it to 2P channels which are split evenly: one half feeds the
//! classification branch (category maps M), the other the density branch
//! (density maps D). Each branch applies batch normalisation, a ReLU and
//! a 1×1 convolution to C channels. There is no global pooling.

mod checkpoint;
pub mod ops;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
use ops::{relu_backward_inplace, relu_inplace, BatchNorm, BatchNormCache, Conv2d, ConvCache};

use crate::datamodel::{CategoryMaps, DensityMaps, Maps};
use crate::error::{Error, Result};

/// RGB image, CHW layout, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != Self::CHANNELS * height * width {
            return Err(Error::shape(format!("3x{height}x{width}"), format!("{} values", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn flip_horizontal(&self) -> Image {
        let (h, w) = (self.height, self.width);
        let mut data = vec![0.0; self.data.len()];
        for c in 0..Self::CHANNELS {
            for i in 0..h {
                let src = &self.data[(c * h + i) * w..][..w];
                let dst = &mut data[(c * h + i) * w..][..w];
                for j in 0..w {
                    dst[j] = src[w - 1 - j];
                }
            }
        }
        Image { height: h, width: w, data }
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0f32; 3 * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = f32::from(px[c]) / 255.0;
            }
        }
        Image { height: h, width: w, data }
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }
}

/// Head hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub num_categories: usize,
    /// P = ceil(channel_factor · C)
    pub channel_factor: f64,
    pub peak_radius: usize,
    /// Fixed multiplier on the density branch output.
    #[serde(default = "unit_scale")]
    pub density_scale: f32,
}

fn unit_scale() -> f32 {
    1.0
}

impl HeadConfig {
    pub fn new(num_categories: usize) -> Self {
        Self {
            num_categories,
            channel_factor: 1.5,
            peak_radius: crate::peaks::DEFAULT_PEAK_RADIUS,
            density_scale: 1.0,
        }
    }

    /// Channels per branch.
    pub fn branch_channels(&self) -> usize {
        (self.channel_factor * self.num_categories as f64 - 1e-9).ceil().max(1.0) as usize
    }
}

/// Desk-scale strided convolutional backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 32],
            strides: vec![2, 2, 1],
            kernel: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub head: HeadConfig,
    pub backbone: BackboneConfig,
    pub input_height: usize,
    pub input_width: usize,
}

impl NetworkConfig {
    pub fn new(num_categories: usize, input_size: usize) -> Self {
        Self {
            head: HeadConfig::new(num_categories),
            backbone: BackboneConfig::default(),
            input_height: input_size,
            input_width: input_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.head.num_categories == 0 {
            problems.push("head.num_categories must be at least 1".to_string());
        }
        if !(self.head.channel_factor.is_finite() && self.head.channel_factor > 0.0) {
            problems.push("head.channel_factor must be positive".to_string());
        }
        if !(self.head.density_scale.is_finite() && self.head.density_scale > 0.0) {
            problems.push("head.density_scale must be positive".to_string());
        }
        if self.head.peak_radius == 0 {
            problems.push("head.peak_radius must be at least 1".to_string());
        }
        let bb = &self.backbone;
        if bb.channels.is_empty() || bb.channels.len() != bb.strides.len() {
            problems.push("backbone.channels and backbone.strides must be nonempty and of equal length".into());
        }
        if bb.kernel.is_multiple_of(2) {
            problems.push("backbone.kernel must be odd".into());
        }
        if bb.strides.contains(&0) || bb.channels.contains(&0) {
            problems.push("backbone strides and channels must be positive".into());
        }
        if self.input_height == 0 || self.input_width == 0 {
            problems.push("input size must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

/// What a feature extractor must provide to sit under the head:
/// deterministic, differentiable, 3×H₀×W₀ in, F×H×W out.
pub trait Backbone {
    type Cache;
    type Grad;

    fn feature_channels(&self) -> usize;
    fn feature_size(&self, height: usize, width: usize) -> (usize, usize);
    fn forward(&self, image: &Image) -> Vec<f32>;
    fn forward_train(&self, image: &Image) -> (Vec<f32>, Self::Cache);
    fn backward(&self, cache: &Self::Cache, grad_features: &[f32], grad: &mut Self::Grad);
    fn zero_grad(&self) -> Self::Grad;
    /// Parameter and gradient buffers in a fixed order.
    fn params_with_grads<'a>(&'a mut self, grad: &'a Self::Grad) -> Vec<(&'a mut [f32], &'a [f32])>;
}

/// Stack of conv + ReLU blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvBackbone {
    pub layers: Vec<Conv2d>,
}

#[derive(Debug, Clone)]
pub struct ConvBackboneCache {
    convs: Vec<ConvCache>,
    /// Post-ReLU outputs of each layer.
    outputs: Vec<Vec<f32>>,
}

impl ConvBackbone {
    pub fn new(config: &BackboneConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut in_c = Image::CHANNELS;
        let layers = config
            .channels
            .iter()
            .zip(&config.strides)
            .map(|(&out_c, &stride)| {
                let conv = Conv2d::new(in_c, out_c, config.kernel, stride, rng);
                in_c = out_c;
                conv
            })
            .collect();
        Self { layers }
    }
}

impl Backbone for ConvBackbone {
    type Cache = ConvBackboneCache;
    type Grad = Vec<Conv2d>;

    fn feature_channels(&self) -> usize {
        self.layers.last().map_or(Image::CHANNELS, |l| l.out_channels)
    }

    fn feature_size(&self, height: usize, width: usize) -> (usize, usize) {
        self.layers.iter().fold((height, width), |(h, w), l| l.out_size(h, w))
    }

    fn forward(&self, image: &Image) -> Vec<f32> {
        let (mut h, mut w) = (image.height, image.width);
        let mut x = image.data.clone();
        for layer in &self.layers {
            let (mut y, cache) = layer.forward(&x, h, w);
            relu_inplace(&mut y);
            h = cache.out_h;
            w = cache.out_w;
            x = y;
        }
        x
    }

    fn forward_train(&self, image: &Image) -> (Vec<f32>, ConvBackboneCache) {
        let (mut h, mut w) = (image.height, image.width);
        let mut convs = Vec::with_capacity(self.layers.len());
        let mut outputs: Vec<Vec<f32>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input = outputs.last().unwrap_or(&image.data);
            let (mut y, cache) = layer.forward(input, h, w);
            relu_inplace(&mut y);
            h = cache.out_h;
            w = cache.out_w;
            convs.push(cache);
            outputs.push(y);
        }
        (
            outputs.last().cloned().unwrap_or_else(|| image.data.clone()),
            ConvBackboneCache { convs, outputs },
        )
    }

    fn backward(&self, cache: &ConvBackboneCache, grad_features: &[f32], grad: &mut Vec<Conv2d>) {
        let mut g = grad_features.to_vec();
        for i in (0..self.layers.len()).rev() {
            relu_backward_inplace(&mut g, &cache.outputs[i]);
            match self.layers[i].backward(&cache.convs[i], &g, &mut grad[i], i > 0) {
                Some(next) => g = next,
                None => break,
            }
        }
    }

    fn zero_grad(&self) -> Vec<Conv2d> {
        self.layers.iter().map(Conv2d::zeros_like).collect()
    }

    fn params_with_grads<'a>(&'a mut self, grad: &'a Vec<Conv2d>) -> Vec<(&'a mut [f32], &'a [f32])> {
        let mut out = Vec::new();
        for (layer, g) in self.layers.iter_mut().zip(grad) {
            out.push((layer.weight.as_mut_slice(), g.weight.as_slice()));
            out.push((layer.bias.as_mut_slice(), g.bias.as_slice()));
        }
        out
    }
}

/// Shared 2P projection plus the two branches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub shared: Conv2d,
    pub bn_class: BatchNorm,
    pub bn_density: BatchNorm,
    pub class_out: Conv2d,
    pub density_out: Conv2d,
    #[serde(default = "unit_scale")]
    pub density_scale: f32,
}

#[derive(Debug, Clone)]
pub struct HeadGrad {
    pub shared: Conv2d,
    pub bn_class: BatchNorm,
    pub bn_density: BatchNorm,
    pub class_out: Conv2d,
    pub density_out: Conv2d,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    hw: usize,
    shared: Vec<ConvCache>,
    bn_class: BatchNormCache,
    bn_density: BatchNormCache,
    act_class: Vec<Vec<f32>>,
    act_density: Vec<Vec<f32>>,
    class_out: Vec<ConvCache>,
    density_out: Vec<ConvCache>,
}

impl Head {
    pub fn new(config: &HeadConfig, feature_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let p = config.branch_channels();
        let c = config.num_categories;
        let mut density_out = Conv2d::new(p, c, 1, 1, rng);
        // start with near-zero counts
        density_out.scale_weights(0.01);
        Self {
            shared: Conv2d::new(feature_channels, 2 * p, 1, 1, rng),
            bn_class: BatchNorm::new(p),
            bn_density: BatchNorm::new(p),
            class_out: Conv2d::new(p, c, 1, 1, rng),
            density_out,
            density_scale: config.density_scale,
        }
    }

    fn branch_channels(&self) -> usize {
        self.bn_class.channels
    }

    pub fn zero_grad(&self) -> HeadGrad {
        HeadGrad {
            shared: self.shared.zeros_like(),
            bn_class: self.bn_class.zeros_like(),
            bn_density: self.bn_density.zeros_like(),
            class_out: self.class_out.zeros_like(),
            density_out: self.density_out.zeros_like(),
        }
    }

    /// Inference forward with frozen normalisation statistics.
    pub fn forward(&self, features: &[f32], h: usize, w: usize) -> (Vec<f32>, Vec<f32>) {
        let hw = h * w;
        let p = self.branch_channels();
        let (z, _) = self.shared.forward(features, h, w);
        let mut a_cls = self.bn_class.forward_eval(&z[..p * hw], hw);
        let mut a_den = self.bn_density.forward_eval(&z[p * hw..], hw);
        relu_inplace(&mut a_cls);
        relu_inplace(&mut a_den);
        let (m, _) = self.class_out.forward(&a_cls, h, w);
        let (mut d, _) = self.density_out.forward(&a_den, h, w);
        scale(&mut d, self.density_scale);
        (m, d)
    }

    /// Training forward over a batch; normalisation uses batch statistics.
    #[allow(clippy::type_complexity)]
    pub fn forward_train(&mut self, features: &[Vec<f32>], h: usize, w: usize) -> (Vec<(Vec<f32>, Vec<f32>)>, HeadCache) {
        let hw = h * w;
        let p = self.branch_channels();
        let mut shared = Vec::with_capacity(features.len());
        let mut z_cls = Vec::with_capacity(features.len());
        let mut z_den = Vec::with_capacity(features.len());
        for f in features {
            let (z, cache) = self.shared.forward(f, h, w);
            z_cls.push(z[..p * hw].to_vec());
            z_den.push(z[p * hw..].to_vec());
            shared.push(cache);
        }
        let (mut a_cls, bn_class) = self.bn_class.forward_train(&z_cls, hw);
        let (mut a_den, bn_density) = self.bn_density.forward_train(&z_den, hw);
        let mut outputs = Vec::with_capacity(features.len());
        let mut class_out = Vec::with_capacity(features.len());
        let mut density_out = Vec::with_capacity(features.len());
        for (ac, ad) in a_cls.iter_mut().zip(a_den.iter_mut()) {
            relu_inplace(ac);
            relu_inplace(ad);
            let (m, cm) = self.class_out.forward(ac, h, w);
            let (mut d, cd) = self.density_out.forward(ad, h, w);
            scale(&mut d, self.density_scale);
            class_out.push(cm);
            density_out.push(cd);
            outputs.push((m, d));
        }
        (
            outputs,
            HeadCache {
                hw,
                shared,
                bn_class,
                bn_density,
                act_class: a_cls,
                act_density: a_den,
                class_out,
                density_out,
            },
        )
    }

    /// Returns the gradient with respect to each image's features.
    pub fn backward(&self, cache: &HeadCache, grad_m: &[Vec<f32>], grad_d: &[Vec<f32>], grad: &mut HeadGrad) -> Vec<Vec<f32>> {
        let hw = cache.hw;
        let n = grad_m.len();
        let mut g_cls = Vec::with_capacity(n);
        let mut g_den = Vec::with_capacity(n);
        for i in 0..n {
            let mut gc = self
                .class_out
                .backward(&cache.class_out[i], &grad_m[i], &mut grad.class_out, true)
                .expect("input grad requested");
            let mut gd_out = grad_d[i].clone();
            scale(&mut gd_out, self.density_scale);
            let mut gd = self
                .density_out
                .backward(&cache.density_out[i], &gd_out, &mut grad.density_out, true)
                .expect("input grad requested");
            relu_backward_inplace(&mut gc, &cache.act_class[i]);
            relu_backward_inplace(&mut gd, &cache.act_density[i]);
            g_cls.push(gc);
            g_den.push(gd);
        }
        let gz_cls = self.bn_class.backward(&cache.bn_class, &g_cls, hw, &mut grad.bn_class);
        let gz_den = self.bn_density.backward(&cache.bn_density, &g_den, hw, &mut grad.bn_density);
        (0..n)
            .map(|i| {
                let mut gz = gz_cls[i].clone();
                gz.extend_from_slice(&gz_den[i]);
                self.shared
                    .backward(&cache.shared[i], &gz, &mut grad.shared, true)
                    .expect("input grad requested")
            })
            .collect()
    }

    pub fn params_with_grads<'a>(&'a mut self, grad: &'a HeadGrad) -> Vec<(&'a mut [f32], &'a [f32])> {
        vec![
            (self.shared.weight.as_mut_slice(), grad.shared.weight.as_slice()),
            (self.shared.bias.as_mut_slice(), grad.shared.bias.as_slice()),
            (self.bn_class.gamma.as_mut_slice(), grad.bn_class.gamma.as_slice()),
            (self.bn_class.beta.as_mut_slice(), grad.bn_class.beta.as_slice()),
            (self.bn_density.gamma.as_mut_slice(), grad.bn_density.gamma.as_slice()),
            (self.bn_density.beta.as_mut_slice(), grad.bn_density.beta.as_slice()),
            (self.class_out.weight.as_mut_slice(), grad.class_out.weight.as_slice()),
            (self.class_out.bias.as_mut_slice(), grad.class_out.bias.as_slice()),
            (self.density_out.weight.as_mut_slice(), grad.density_out.weight.as_slice()),
            (self.density_out.bias.as_mut_slice(), grad.density_out.bias.as_slice()),
        ]
    }
}

fn scale(x: &mut [f32], s: f32) {
    if s != 1.0 {
        x.iter_mut().for_each(|v| *v *= s);
    }
}

/// Gradients for every parameter of a [`Network`].
pub struct NetworkGrad<B: Backbone> {
    pub backbone: B::Grad,
    pub head: HeadGrad,
}

/// Saved activations of one training forward pass.
pub struct ForwardCache<B: Backbone> {
    backbone: Vec<B::Cache>,
    head: HeadCache,
}

/// Network outputs for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutputs {
    pub category_maps: CategoryMaps,
    pub density_maps: DensityMaps,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<B: Backbone = ConvBackbone> {
    pub config: NetworkConfig,
    pub backbone: B,
    pub head: Head,
}

impl Network<ConvBackbone> {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = ConvBackbone::new(&config.backbone, &mut rng);
        let head = Head::new(&config.head, backbone.feature_channels(), &mut rng);
        Ok(Self { config, backbone, head })
    }
}

impl<B: Backbone> Network<B> {
    pub fn with_backbone(config: NetworkConfig, backbone: B, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = Head::new(&config.head, backbone.feature_channels(), &mut rng);
        Ok(Self { config, backbone, head })
    }

    pub fn num_categories(&self) -> usize {
        self.config.head.num_categories
    }

    /// Spatial size of both output branches.
    pub fn output_size(&self) -> (usize, usize) {
        self.backbone.feature_size(self.config.input_height, self.config.input_width)
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        if image.height != self.config.input_height || image.width != self.config.input_width {
            return Err(Error::shape(
                format!("3x{}x{}", self.config.input_height, self.config.input_width),
                format!("3x{}x{}", image.height, image.width),
            ));
        }
        Ok(())
    }

    fn to_outputs(&self, m: Vec<f32>, d: Vec<f32>) -> Result<BranchOutputs> {
        let (h, w) = self.output_size();
        let c = self.num_categories();
        Ok(BranchOutputs {
            category_maps: CategoryMaps(Maps::from_vec(c, h, w, m.into_iter().map(f64::from).collect())?),
            density_maps: DensityMaps(Maps::from_vec(c, h, w, d.into_iter().map(f64::from).collect())?),
        })
    }

    /// Inference forward pass.
    pub fn forward(&self, image: &Image) -> Result<BranchOutputs> {
        self.check_image(image)?;
        let (h, w) = self.output_size();
        let feats = self.backbone.forward(image);
        let (m, d) = self.head.forward(&feats, h, w);
        self.to_outputs(m, d)
    }

    /// Training forward pass over a batch.
    pub fn forward_train(&mut self, images: &[&Image]) -> Result<(Vec<BranchOutputs>, ForwardCache<B>)> {
        if images.is_empty() {
            return Err(Error::EmptyBatch);
        }
        for img in images {
            self.check_image(img)?;
        }
        let (h, w) = self.output_size();
        let mut feats = Vec::with_capacity(images.len());
        let mut bb = Vec::with_capacity(images.len());
        for img in images {
            let (f, cache) = self.backbone.forward_train(img);
            feats.push(f);
            bb.push(cache);
        }
        let (outs, head) = self.head.forward_train(&feats, h, w);
        let outputs = outs.into_iter().map(|(m, d)| self.to_outputs(m, d)).collect::<Result<Vec<_>>>()?;
        Ok((outputs, ForwardCache { backbone: bb, head }))
    }

    /// Back-propagates per-image gradients with respect to M and D.
    pub fn backward(&self, cache: &ForwardCache<B>, grads: &[(Vec<f64>, Vec<f64>)]) -> NetworkGrad<B> {
        let gm: Vec<Vec<f32>> = grads.iter().map(|(m, _)| m.iter().map(|&v| v as f32).collect()).collect();
        let gd: Vec<Vec<f32>> = grads.iter().map(|(_, d)| d.iter().map(|&v| v as f32).collect()).collect();
        let mut head = self.head.zero_grad();
        let gfeat = self.head.backward(&cache.head, &gm, &gd, &mut head);
        let mut backbone = self.backbone.zero_grad();
        for (c, g) in cache.backbone.iter().zip(&gfeat) {
            self.backbone.backward(c, g, &mut backbone);
        }
        NetworkGrad { backbone, head }
    }
}
