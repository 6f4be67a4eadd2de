use super::model::{forward, logit_gradient, ModelParams, NUM_CLASSES};
use super::Tensor;
use crate::error::{Error, Result};
use crate::primitives::Grid;

/// Bilinear resize of a single-channel map (half-pixel centers, edge clamp).
pub fn bilinear_resize(src: &[f64], in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let axis = |out_len: usize, in_len: usize| -> Vec<(usize, usize, f64)> {
        let scale = in_len as f64 / out_len as f64;
        (0..out_len)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (s.floor() as usize).min(in_len - 1);
                let i1 = (i0 + 1).min(in_len - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let ys = axis(out_h, in_h);
    let xs = axis(out_w, in_w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, ly) in &ys {
        for &(x0, x1, lx) in &xs {
            let top = src[y0 * in_w + x0] * (1.0 - lx) + src[y0 * in_w + x1] * lx;
            let bottom = src[y1 * in_w + x0] * (1.0 - lx) + src[y1 * in_w + x1] * lx;
            out.push(top * (1.0 - ly) + bottom * ly);
        }
    }
    out
}

/// Rescales to `[0, 1]`; a constant map becomes all zeros.
pub fn min_max_normalize(values: &mut [f64]) {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max > min {
        let range = max - min;
        values.iter_mut().for_each(|v| *v = (*v - min) / range);
    } else {
        values.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Channel weights are the spatial mean of the gradient; the map is the ReLU
/// of the weighted channel sum at activation resolution, before resizing.
pub fn cam_from_activation(activation: &Tensor, gradient: &Tensor) -> Result<Vec<f64>> {
    if activation.shape() != gradient.shape() || activation.shape().len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "activation {:?} vs gradient {:?}",
            activation.shape(),
            gradient.shape()
        )));
    }
    let hw = activation.shape()[1] * activation.shape()[2];
    let mut cam = vec![0.0; hw];
    for (a, g) in activation.data().chunks(hw).zip(gradient.data().chunks(hw)) {
        let alpha = g.iter().sum::<f64>() / hw as f64;
        for (c, v) in cam.iter_mut().zip(a) {
            *c += alpha * v;
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(cam)
}

/// Upsampled, min-max normalized class activation map.
pub fn grad_cam_map(activation: &Tensor, gradient: &Tensor, out_h: usize, out_w: usize) -> Result<Grid> {
    let cam = cam_from_activation(activation, gradient)?;
    let (h, w) = (activation.shape()[1], activation.shape()[2]);
    let mut up = bilinear_resize(&cam, h, w, out_h, out_w);
    min_max_normalize(&mut up);
    Grid::new(out_w, out_h, up)
}

/// GradCAM for class index `class_index` (0-based) on the last conv block.
pub fn grad_cam(params: &ModelParams, image: &Tensor, class_index: usize) -> Result<Grid> {
    if class_index >= NUM_CLASSES {
        return Err(Error::InvalidConfig(format!(
            "class index {class_index} outside 0..{NUM_CLASSES}"
        )));
    }
    let cache = forward(params, image)?;
    let grad = logit_gradient(params, &cache, class_index);
    grad_cam_map(cache.activation(), &grad, cache.height, cache.width)
}
