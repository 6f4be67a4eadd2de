use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{
    conv3x3_backward, conv3x3_forward, maxpool2_backward, maxpool2_forward, relu, relu_backward,
};
use super::Tensor;
use crate::detmetrics::Detection;
use crate::error::{Error, Result};
use crate::primitives::BBox;

pub const NUM_CLASSES: usize = 4;
pub const IN_CHANNELS: usize = 3;
/// Output channels of the three conv blocks.
pub const CHANNELS: [usize; 3] = [8, 16, 32];
const FEATURES: usize = CHANNELS[2];

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// The transferable part of the detector: three conv blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub conv3: ConvLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub backbone: Backbone,
    pub class_head: LinearLayer,
    pub box_head: LinearLayer,
}

pub const BACKBONE_TENSOR_NAMES: [&str; 6] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "conv3.weight",
    "conv3.bias",
];

pub const TENSOR_NAMES: [&str; 10] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "conv3.weight",
    "conv3.bias",
    "class_head.weight",
    "class_head.bias",
    "box_head.weight",
    "box_head.bias",
];

fn tensor_shape(name: &str) -> Vec<usize> {
    let conv = |i: usize| {
        let c_in = if i == 0 { IN_CHANNELS } else { CHANNELS[i - 1] };
        vec![CHANNELS[i], c_in, 3, 3]
    };
    match name {
        "conv1.weight" => conv(0),
        "conv2.weight" => conv(1),
        "conv3.weight" => conv(2),
        "conv1.bias" => vec![CHANNELS[0]],
        "conv2.bias" => vec![CHANNELS[1]],
        "conv3.bias" => vec![CHANNELS[2]],
        "class_head.weight" => vec![NUM_CLASSES, FEATURES],
        "box_head.weight" => vec![4, FEATURES],
        "class_head.bias" => vec![NUM_CLASSES],
        "box_head.bias" => vec![4],
        other => unreachable!("unknown tensor {other}"),
    }
}

fn take_named(named: &mut Vec<(String, Tensor)>, name: &str) -> Result<Tensor> {
    let pos = named
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| Error::Integrity(format!("missing tensor {name}")))?;
    let (_, t) = named.remove(pos);
    let expected = tensor_shape(name);
    if t.shape() != expected.as_slice() {
        return Err(Error::ShapeMismatch(format!(
            "{name}: expected {expected:?}, found {:?}",
            t.shape()
        )));
    }
    Ok(t)
}

fn he_normal<R: Rng>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    let n = shape.iter().product();
    Tensor::from_parts_unchecked(shape, (0..n).map(|_| normal.sample(rng)).collect())
}

impl Backbone {
    pub fn init<R: Rng>(rng: &mut R) -> Self {
        let mut conv = |name_w: &str, name_b: &str| {
            let shape = tensor_shape(name_w);
            let fan_in = shape[1] * 9;
            ConvLayer {
                weight: he_normal(shape, fan_in, rng),
                bias: Tensor::zeros(&tensor_shape(name_b)),
            }
        };
        Self {
            conv1: conv("conv1.weight", "conv1.bias"),
            conv2: conv("conv2.weight", "conv2.bias"),
            conv3: conv("conv3.weight", "conv3.bias"),
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 6] {
        [
            (BACKBONE_TENSOR_NAMES[0], &self.conv1.weight),
            (BACKBONE_TENSOR_NAMES[1], &self.conv1.bias),
            (BACKBONE_TENSOR_NAMES[2], &self.conv2.weight),
            (BACKBONE_TENSOR_NAMES[3], &self.conv2.bias),
            (BACKBONE_TENSOR_NAMES[4], &self.conv3.weight),
            (BACKBONE_TENSOR_NAMES[5], &self.conv3.bias),
        ]
    }

    pub fn from_named(mut named: Vec<(String, Tensor)>) -> Result<Self> {
        let b = Self {
            conv1: ConvLayer {
                weight: take_named(&mut named, "conv1.weight")?,
                bias: take_named(&mut named, "conv1.bias")?,
            },
            conv2: ConvLayer {
                weight: take_named(&mut named, "conv2.weight")?,
                bias: take_named(&mut named, "conv2.bias")?,
            },
            conv3: ConvLayer {
                weight: take_named(&mut named, "conv3.weight")?,
                bias: take_named(&mut named, "conv3.bias")?,
            },
        };
        if let Some((name, _)) = named.first() {
            return Err(Error::Integrity(format!("unexpected tensor {name}")));
        }
        Ok(b)
    }

    /// Order-sensitive FNV-1a over the raw bits of every value.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, t) in self.tensors() {
            for v in t.data() {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

impl ModelParams {
    /// Random backbone and heads.
    pub fn init<R: Rng>(rng: &mut R) -> Self {
        let backbone = Backbone::init(rng);
        Self::with_backbone(backbone, rng)
    }

    /// Given backbone, randomly initialized heads.
    pub fn with_backbone<R: Rng>(backbone: Backbone, rng: &mut R) -> Self {
        let mut linear = |name_w: &str, name_b: &str| {
            let shape = tensor_shape(name_w);
            let fan_in = shape[1];
            let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("valid std");
            let n = shape.iter().product();
            LinearLayer {
                weight: Tensor::from_parts_unchecked(
                    shape,
                    (0..n).map(|_| normal.sample(rng)).collect(),
                ),
                bias: Tensor::zeros(&tensor_shape(name_b)),
            }
        };
        let class_head = linear("class_head.weight", "class_head.bias");
        let box_head = linear("box_head.weight", "box_head.bias");
        Self {
            backbone,
            class_head,
            box_head,
        }
    }

    pub fn zeros() -> Self {
        let named = TENSOR_NAMES
            .iter()
            .map(|n| (n.to_string(), Tensor::zeros(&tensor_shape(n))))
            .collect();
        Self::from_named(named).expect("shapes are consistent")
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros()
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 10] {
        let b = self.backbone.tensors();
        [
            b[0],
            b[1],
            b[2],
            b[3],
            b[4],
            b[5],
            (TENSOR_NAMES[6], &self.class_head.weight),
            (TENSOR_NAMES[7], &self.class_head.bias),
            (TENSOR_NAMES[8], &self.box_head.weight),
            (TENSOR_NAMES[9], &self.box_head.bias),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 10] {
        let b = &mut self.backbone;
        [
            &mut b.conv1.weight,
            &mut b.conv1.bias,
            &mut b.conv2.weight,
            &mut b.conv2.bias,
            &mut b.conv3.weight,
            &mut b.conv3.bias,
            &mut self.class_head.weight,
            &mut self.class_head.bias,
            &mut self.box_head.weight,
            &mut self.box_head.bias,
        ]
    }

    pub fn from_named(mut named: Vec<(String, Tensor)>) -> Result<Self> {
        let class_head = LinearLayer {
            weight: take_named(&mut named, "class_head.weight")?,
            bias: take_named(&mut named, "class_head.bias")?,
        };
        let box_head = LinearLayer {
            weight: take_named(&mut named, "box_head.weight")?,
            bias: take_named(&mut named, "box_head.bias")?,
        };
        Ok(Self {
            backbone: Backbone::from_named(named)?,
            class_head,
            box_head,
        })
    }

    pub fn scale_add(&mut self, other: &ModelParams, scale: f64) {
        for (dst, (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d += scale * s;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }
}

/// Every intermediate of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub height: usize,
    pub width: usize,
    pub input: Tensor,
    /// Pre-activation of each conv block, `C x h x w`.
    pub conv_pre: [Tensor; 3],
    /// ReLU output of each conv block.
    pub conv_post: [Tensor; 3],
    /// Max-pooled output of each block; `pooled[2]` feeds the heads.
    pub pooled: [Tensor; 3],
    pub pool_argmax: [Vec<usize>; 3],
    pub features: Vec<f64>,
    pub logits: Vec<f64>,
    pub box_pre: Vec<f64>,
    /// Normalized `(cx, cy, w, h)` in `(0, 1)`.
    pub bbox: Vec<f64>,
}

impl ForwardCache {
    /// The GradCAM target layer: last block output, `32 x H/8 x W/8`.
    pub fn activation(&self) -> &Tensor {
        &self.pooled[2]
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn linear(layer: &LinearLayer, x: &[f64]) -> Vec<f64> {
    let w = layer.weight.data();
    let n_in = x.len();
    layer
        .bias
        .data()
        .iter()
        .enumerate()
        .map(|(o, b)| b + w[o * n_in..(o + 1) * n_in].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

pub fn forward(params: &ModelParams, image: &Tensor) -> Result<ForwardCache> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != IN_CHANNELS {
        return Err(Error::ShapeMismatch(format!(
            "expected a 3 x H x W image, got {shape:?}"
        )));
    }
    let (height, width) = (shape[1], shape[2]);
    if height == 0 || width == 0 || height % 8 != 0 || width % 8 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "image sides must be positive multiples of 8, got {height}x{width}"
        )));
    }
    let convs = [
        &params.backbone.conv1,
        &params.backbone.conv2,
        &params.backbone.conv3,
    ];
    let mut x = image.data().to_vec();
    let (mut c, mut h, mut w) = (IN_CHANNELS, height, width);
    let mut conv_pre = Vec::with_capacity(3);
    let mut conv_post = Vec::with_capacity(3);
    let mut pooled = Vec::with_capacity(3);
    let mut pool_argmax = Vec::with_capacity(3);
    for (layer, &c_out) in convs.iter().zip(&CHANNELS) {
        let z = conv3x3_forward(&x, c, h, w, layer.weight.data(), layer.bias.data(), c_out);
        let a = relu(&z);
        let (p, arg) = maxpool2_forward(&a, c_out, h, w);
        conv_pre.push(Tensor::from_parts_unchecked(vec![c_out, h, w], z));
        conv_post.push(Tensor::from_parts_unchecked(vec![c_out, h, w], a));
        c = c_out;
        h /= 2;
        w /= 2;
        pooled.push(Tensor::from_parts_unchecked(vec![c, h, w], p.clone()));
        pool_argmax.push(arg);
        x = p;
    }
    let hw = (h * w) as f64;
    let features: Vec<f64> = x.chunks(h * w).map(|ch| ch.iter().sum::<f64>() / hw).collect();
    let logits = linear(&params.class_head, &features);
    let box_pre = linear(&params.box_head, &features);
    let bbox = box_pre.iter().map(|&v| sigmoid(v)).collect();
    let to_arr = |v: Vec<Tensor>| -> [Tensor; 3] { v.try_into().expect("three blocks") };
    Ok(ForwardCache {
        height,
        width,
        input: image.clone(),
        conv_pre: to_arr(conv_pre),
        conv_post: to_arr(conv_post),
        pooled: to_arr(pooled),
        pool_argmax: pool_argmax.try_into().expect("three blocks"),
        features,
        logits,
        box_pre,
        bbox,
    })
}

/// Class index plus normalized `(cx, cy, w, h)` box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub class_index: usize,
    pub bbox: [f64; 4],
}

impl Target {
    /// Normalizes a pixel box against the image size.
    pub fn from_pixels(class_index: usize, bbox: &BBox, width: usize, height: usize) -> Self {
        let (w, h) = (width as f64, height as f64);
        Self {
            class_index,
            bbox: [
                (bbox.x() + bbox.width() / 2.0) / w,
                (bbox.y() + bbox.height() / 2.0) / h,
                bbox.width() / w,
                bbox.height() / h,
            ],
        }
    }
}

/// Softmax cross-entropy plus summed squared box error.
pub fn loss(logits: &[f64], bbox: &[f64], target: &Target) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let ce = lse - logits[target.class_index];
    let sq: f64 = bbox
        .iter()
        .zip(&target.bbox)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    ce + sq
}

/// Gradients of the loss and of individual logits.
fn backward_from_heads(
    params: &ModelParams,
    cache: &ForwardCache,
    d_logits: &[f64],
    d_box_pre: &[f64],
    grads: &mut ModelParams,
    through_backbone: bool,
) -> Vec<f64> {
    let f = &cache.features;
    let mut d_features = vec![0.0; FEATURES];
    for (layer, d_out, g) in [
        (&params.class_head, d_logits, &mut grads.class_head),
        (&params.box_head, d_box_pre, &mut grads.box_head),
    ] {
        let w = layer.weight.data();
        let gw = g.weight.data_mut();
        for (o, &d) in d_out.iter().enumerate() {
            for k in 0..FEATURES {
                gw[o * FEATURES + k] += d * f[k];
                d_features[k] += d * w[o * FEATURES + k];
            }
        }
        for (gb, &d) in g.bias.data_mut().iter_mut().zip(d_out) {
            *gb += d;
        }
    }
    let last = &cache.pooled[2];
    let hw = last.shape()[1] * last.shape()[2];
    let mut d_act = Vec::with_capacity(FEATURES * hw);
    for &d in &d_features {
        d_act.extend(std::iter::repeat_n(d / hw as f64, hw));
    }
    if !through_backbone {
        return d_act;
    }

    let convs = [
        &params.backbone.conv1,
        &params.backbone.conv2,
        &params.backbone.conv3,
    ];
    let mut d = d_act.clone();
    for i in (0..3).rev() {
        let post = &cache.conv_post[i];
        let (c_out, h, w) = (post.shape()[0], post.shape()[1], post.shape()[2]);
        let mut d_post = maxpool2_backward(&d, &cache.pool_argmax[i], post.len());
        relu_backward(cache.conv_pre[i].data(), &mut d_post);
        let input: &[f64] = if i == 0 {
            cache.input.data()
        } else {
            cache.pooled[i - 1].data()
        };
        let c_in = if i == 0 { IN_CHANNELS } else { CHANNELS[i - 1] };
        let g = match i {
            0 => &mut grads.backbone.conv1,
            1 => &mut grads.backbone.conv2,
            _ => &mut grads.backbone.conv3,
        };
        let d_in = conv3x3_backward(
            input,
            c_in,
            h,
            w,
            convs[i].weight.data(),
            c_out,
            &d_post,
            g.weight.data_mut(),
            g.bias.data_mut(),
            i > 0,
        );
        if let Some(d_in) = d_in {
            d = d_in;
        }
    }
    d_act
}

/// Reverse-mode gradients of [`loss`] for every parameter, accumulated into
/// `grads`. Returns the loss value.
pub fn backward_into(
    params: &ModelParams,
    cache: &ForwardCache,
    target: &Target,
    grads: &mut ModelParams,
) -> f64 {
    let probs = softmax(&cache.logits);
    let mut d_logits = probs;
    d_logits[target.class_index] -= 1.0;
    let d_box_pre: Vec<f64> = cache
        .bbox
        .iter()
        .zip(&target.bbox)
        .map(|(p, t)| 2.0 * (p - t) * p * (1.0 - p))
        .collect();
    backward_from_heads(params, cache, &d_logits, &d_box_pre, grads, true);
    loss(&cache.logits, &cache.bbox, target)
}

pub fn backward(params: &ModelParams, cache: &ForwardCache, target: &Target) -> ModelParams {
    let mut grads = ModelParams::zeros();
    backward_into(params, cache, target, &mut grads);
    grads
}

/// Gradient of logit `class_index` with respect to the GradCAM target
/// activation.
pub fn logit_gradient(params: &ModelParams, cache: &ForwardCache, class_index: usize) -> Tensor {
    let mut d_logits = vec![0.0; NUM_CLASSES];
    d_logits[class_index] = 1.0;
    let mut scratch = ModelParams::zeros();
    let d = backward_from_heads(params, cache, &d_logits, &[0.0; 4], &mut scratch, false);
    Tensor::from_parts_unchecked(cache.activation().shape().to_vec(), d)
}

/// Single-object detection: argmax class with its softmax probability as the
/// score, emitted only when the score reaches `score_threshold`.
pub fn predict_detection(
    params: &ModelParams,
    image: &Tensor,
    image_id: u64,
    score_threshold: f64,
) -> Result<Vec<Detection>> {
    let cache = forward(params, image)?;
    Ok(detection_from_cache(&cache, image_id, score_threshold)
        .into_iter()
        .collect())
}

pub(crate) fn detection_from_cache(
    cache: &ForwardCache,
    image_id: u64,
    score_threshold: f64,
) -> Option<Detection> {
    let probs = softmax(&cache.logits);
    let (class_index, &score) = probs
        .iter()
        .enumerate()
        .fold((0, &probs[0]), |best, (i, p)| if *p > *best.1 { (i, p) } else { best });
    if score < score_threshold {
        return None;
    }
    let (w, h) = (cache.width as f64, cache.height as f64);
    let b = &cache.bbox;
    let bw = (b[2] * w).max(1e-6);
    let bh = (b[3] * h).max(1e-6);
    let bbox = BBox::new(b[0] * w - bw / 2.0, b[1] * h - bh / 2.0, bw, bh).ok()?;
    Some(Detection {
        image_id,
        category_id: class_index as u32 + 1,
        bbox,
        score,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            vec![3, h, w],
            (0..3 * h * w).map(|_| rng.random::<f64>()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_model_outputs() {
        let p = ModelParams::zeros();
        let c = forward(&p, &image(16, 16, 1)).unwrap();
        assert_eq!(c.logits, vec![0.0; 4]);
        assert_eq!(c.bbox, vec![0.5; 4]);
    }

    #[test]
    fn output_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = ModelParams::init(&mut rng);
        let c = forward(&p, &image(64, 64, 2)).unwrap();
        assert_eq!(c.logits.len(), 4);
        assert_eq!(c.bbox.len(), 4);
        assert_eq!(c.activation().shape(), &[32, 8, 8]);
        assert!(c.bbox.iter().all(|&v| v > 0.0 && v < 1.0));
        for t in c.conv_post.iter().chain(&c.pooled) {
            assert!(t.data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let p = ModelParams::zeros();
        assert!(forward(&p, &image(12, 16, 0)).is_err());
        let gray = Tensor::zeros(&[1, 16, 16]);
        assert!(matches!(forward(&p, &gray), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn loss_terms() {
        let t = Target {
            class_index: 2,
            bbox: [0.5, 0.4, 0.3, 0.2],
        };
        assert!((loss(&[0.7; 4], &t.bbox, &t) - 4f64.ln()).abs() < 1e-15);
        let big = [0.0, 0.0, 1e3, 0.0];
        assert!(loss(&big, &t.bbox, &t) < 1e-12);
        let off = [0.6, 0.4, 0.3, 0.2];
        assert!((loss(&[0.0; 4], &off, &t) - 4f64.ln() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn gradients_vanish_at_zero_loss() {
        let mut p = ModelParams::zeros();
        p.class_head.bias.data_mut()[1] = 60.0;
        let c = forward(&p, &image(8, 8, 4)).unwrap();
        let t = Target {
            class_index: 1,
            bbox: [0.5; 4],
        };
        let g = backward(&p, &c, &t);
        for (_, t) in g.tensors() {
            assert!(t.data().iter().all(|v| v.abs() < 1e-20));
        }
    }

    #[test]
    fn predict_threshold_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = ModelParams::init(&mut rng);
        let img = image(16, 16, 5);
        let dets = predict_detection(&p, &img, 7, 0.0).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].image_id, 7);
        assert!((1..=4).contains(&dets[0].category_id));
        assert!(predict_detection(&p, &img, 7, 1.0).unwrap().is_empty());
        let probs = softmax(&forward(&p, &img).unwrap().logits);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn named_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ModelParams::init(&mut rng);
        let named = p
            .tensors()
            .iter()
            .map(|(n, t)| (n.to_string(), (*t).clone()))
            .collect();
        assert_eq!(ModelParams::from_named(named).unwrap(), p);
        let mut partial: Vec<(String, Tensor)> = p
            .tensors()
            .iter()
            .map(|(n, t)| (n.to_string(), (*t).clone()))
            .collect();
        partial.pop();
        assert!(ModelParams::from_named(partial).is_err());
    }
}
