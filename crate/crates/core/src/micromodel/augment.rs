//! Geometric augmentation: flips, right-angle rotations and box-preserving
//! crops, with the ground-truth box carried along.

use rand::Rng;

use super::gradcam::bilinear_resize;
use super::Tensor;
use crate::primitives::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    Identity,
    FlipHorizontal,
    FlipVertical,
    /// Clockwise quarter turns.
    Rotate90,
    Rotate180,
    Rotate270,
}

impl Orientation {
    pub const ALL: [Orientation; 6] = [
        Orientation::Identity,
        Orientation::FlipHorizontal,
        Orientation::FlipVertical,
        Orientation::Rotate90,
        Orientation::Rotate180,
        Orientation::Rotate270,
    ];
}

/// Square crop of side `size` at `(x0, y0)`, resized back to the full image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Crop {
    pub x0: usize,
    pub y0: usize,
    pub size: usize,
}

fn dims(image: &Tensor) -> (usize, usize, usize) {
    let s = image.shape();
    (s[0], s[1], s[2])
}

/// Applies an orientation change to a `C x H x W` image and its box.
/// Quarter turns swap the image sides.
pub fn orient(image: &Tensor, bbox: &BBox, op: Orientation) -> (Tensor, BBox) {
    let (c, h, w) = dims(image);
    let src = image.data();
    let (oh, ow) = match op {
        Orientation::Rotate90 | Orientation::Rotate270 => (w, h),
        _ => (h, w),
    };
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for r in 0..oh {
            for col in 0..ow {
                // source pixel for destination (r, col)
                let (sr, sc) = match op {
                    Orientation::Identity => (r, col),
                    Orientation::FlipHorizontal => (r, w - 1 - col),
                    Orientation::FlipVertical => (h - 1 - r, col),
                    Orientation::Rotate90 => (h - 1 - col, r),
                    Orientation::Rotate180 => (h - 1 - r, w - 1 - col),
                    Orientation::Rotate270 => (col, w - 1 - r),
                };
                out[(ch * oh + r) * ow + col] = src[(ch * h + sr) * w + sc];
            }
        }
    }
    let (x, y, bw, bh) = (bbox.x(), bbox.y(), bbox.width(), bbox.height());
    let (wf, hf) = (w as f64, h as f64);
    let (nx, ny, nw, nh) = match op {
        Orientation::Identity => (x, y, bw, bh),
        Orientation::FlipHorizontal => (wf - x - bw, y, bw, bh),
        Orientation::FlipVertical => (x, hf - y - bh, bw, bh),
        Orientation::Rotate90 => (hf - y - bh, x, bh, bw),
        Orientation::Rotate180 => (wf - x - bw, hf - y - bh, bw, bh),
        Orientation::Rotate270 => (y, wf - x - bw, bh, bw),
    };
    (
        Tensor::from_parts_unchecked(vec![c, oh, ow], out),
        BBox::new(nx, ny, nw, nh).expect("extent preserved"),
    )
}

pub fn crop_resize(image: &Tensor, bbox: &BBox, crop: Crop) -> (Tensor, BBox) {
    let (c, h, w) = dims(image);
    let src = image.data();
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let mut patch = Vec::with_capacity(crop.size * crop.size);
        for r in crop.y0..crop.y0 + crop.size {
            let row = (ch * h + r) * w;
            patch.extend_from_slice(&src[row + crop.x0..row + crop.x0 + crop.size]);
        }
        out.extend(bilinear_resize(&patch, crop.size, crop.size, h, w));
    }
    let sx = w as f64 / crop.size as f64;
    let sy = h as f64 / crop.size as f64;
    let nb = BBox::new(
        (bbox.x() - crop.x0 as f64) * sx,
        (bbox.y() - crop.y0 as f64) * sy,
        bbox.width() * sx,
        bbox.height() * sy,
    )
    .expect("extent preserved");
    (Tensor::from_parts_unchecked(vec![c, h, w], out), nb)
}

/// Random square crop fully containing `bbox`, or `None` when the image is
/// not square or the box leaves no room.
pub fn sample_crop<R: Rng>(bbox: &BBox, h: usize, w: usize, rng: &mut R) -> Option<Crop> {
    if h != w {
        return None;
    }
    let bx0 = bbox.x().floor().max(0.0) as usize;
    let by0 = bbox.y().floor().max(0.0) as usize;
    let bx1 = (bbox.x_max().ceil() as usize).min(w);
    let by1 = (bbox.y_max().ceil() as usize).min(h);
    let need = (bx1.saturating_sub(bx0)).max(by1.saturating_sub(by0)).max(1);
    if need >= w {
        return None;
    }
    let size = rng.random_range(need..=w);
    let x0 = rng.random_range(bx1.saturating_sub(size)..=bx0.min(w - size));
    let y0 = rng.random_range(by1.saturating_sub(size)..=by0.min(h - size));
    Some(Crop { x0, y0, size })
}

/// One orientation drawn uniformly from [`Orientation::ALL`] (quarter turns
/// only on square images), then a box-preserving crop with probability 1/2.
pub fn augment<R: Rng>(image: &Tensor, bbox: &BBox, rng: &mut R) -> (Tensor, BBox) {
    let (_, h, w) = dims(image);
    let choices: &[Orientation] = if h == w {
        &Orientation::ALL
    } else {
        &Orientation::ALL[..3]
    };
    let op = choices[rng.random_range(0..choices.len())];
    let (img, b) = orient(image, bbox, op);
    if rng.random_bool(0.5) {
        let (_, h, w) = dims(&img);
        if let Some(crop) = sample_crop(&b, h, w, rng) {
            return crop_resize(&img, &b, crop);
        }
    }
    (img, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::primitives::rasterize;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_image(h: usize, w: usize) -> Tensor {
        Tensor::new(vec![3, h, w], (0..3 * h * w).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap()
    }

    /// Image with ones exactly on the box pixels of channel 0.
    fn box_image(b: &BBox, h: usize, w: usize) -> Tensor {
        let m = rasterize(b, w, h);
        let mut data = vec![0.0; 3 * h * w];
        for (i, &bit) in m.bits().iter().enumerate() {
            if bit {
                data[i] = 1.0;
            }
        }
        Tensor::new(vec![3, h, w], data).unwrap()
    }

    #[test]
    fn flips_are_involutions() {
        let img = test_image(6, 8);
        let b = BBox::new(1.0, 2.0, 3.0, 1.5).unwrap();
        for op in [Orientation::FlipHorizontal, Orientation::FlipVertical] {
            let (i1, b1) = orient(&img, &b, op);
            let (i2, b2) = orient(&i1, &b1, op);
            assert_eq!(i2, img);
            assert_eq!(b2, b);
        }
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let img = test_image(6, 8);
        let b = BBox::new(1.0, 2.0, 3.0, 1.5).unwrap();
        let (mut i, mut bb) = (img.clone(), b);
        for _ in 0..4 {
            (i, bb) = orient(&i, &bb, Orientation::Rotate90);
        }
        assert_eq!(i, img);
        assert!((bb.x() - b.x()).abs() < 1e-12 && (bb.y() - b.y()).abs() < 1e-12);
        let (r180, _) = orient(&img, &b, Orientation::Rotate180);
        let (r90, b90) = orient(&img, &b, Orientation::Rotate90);
        let (r90x2, _) = orient(&r90, &b90, Orientation::Rotate90);
        assert_eq!(r180, r90x2);
        let (r270, _) = orient(&img, &b, Orientation::Rotate270);
        let (r90x3, _) = orient(&r90x2, &b90, Orientation::Rotate90);
        assert_eq!(r270, r90x3);
    }

    #[test]
    fn horizontal_flip_box_algebra() {
        let img = test_image(10, 20);
        let b = BBox::new(3.0, 4.0, 5.0, 2.0).unwrap();
        let (_, fb) = orient(&img, &b, Orientation::FlipHorizontal);
        assert_eq!(fb.to_array(), [20.0 - 3.0 - 5.0, 4.0, 5.0, 2.0]);
    }

    #[test]
    fn boxes_follow_pixels() {
        let b = BBox::new(1.0, 2.0, 3.0, 2.0).unwrap();
        let img = box_image(&b, 8, 8);
        for op in Orientation::ALL {
            let (oi, ob) = orient(&img, &b, op);
            let expected = box_image(&ob, 8, 8);
            assert_eq!(oi.data()[..64], expected.data()[..64], "{op:?}");
        }
    }

    #[test]
    fn crops_contain_the_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let img = test_image(32, 32);
        for _ in 0..200 {
            let x = rng.random_range(0.0..20.0);
            let y = rng.random_range(0.0..20.0);
            let b = BBox::new(x, y, rng.random_range(1.0..12.0), rng.random_range(1.0..12.0)).unwrap();
            let (out, nb) = augment(&img, &b, &mut rng);
            assert_eq!(out.shape(), &[3, 32, 32]);
            assert!(nb.x() >= -1e-9 && nb.y() >= -1e-9);
            assert!(nb.x_max() <= 32.0 + 1e-9 && nb.y_max() <= 32.0 + 1e-9);
        }
    }

    #[test]
    fn full_crop_is_identity() {
        let img = test_image(16, 16);
        let b = BBox::new(2.0, 3.0, 4.0, 5.0).unwrap();
        let (out, nb) = crop_resize(&img, &b, Crop { x0: 0, y0: 0, size: 16 });
        assert_eq!(out, img);
        assert_eq!(nb, b);
    }
}
