//! Synthetic domain-shift benchmark: one foreground shape per image (disk,
//! square, triangle or ring) over backgrounds of increasing clutter.
//!
//! Each image draws from its own RNG streams derived from `(seed, index)`, so
//! generation is order independent. Clutter uses a stream of its own, which
//! makes a zero-density cluttered domain pixel-identical to a plain one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detmetrics::GroundTruth;
use crate::error::{Error, Result};
use crate::micromodel::{shuffled, LabeledImage, Tensor};
use crate::primitives::{BBox, BinaryMask};
use crate::seeding::derive_seed;

pub const CLASS_NAMES: [&str; 4] = ["disk", "square", "triangle", "ring"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    Plain,
    MildClutter,
    HeavyClutter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub background: Background,
    pub clutter_density: f64,
    pub noise_sigma: f64,
    /// `(height, width)`.
    pub image_size: (usize, usize),
    /// Object size range as fractions of the shorter image side.
    pub object_scale_range: (f64, f64),
}

impl DomainSpec {
    pub fn plain(name: &str) -> Self {
        Self {
            name: name.into(),
            background: Background::Plain,
            clutter_density: 0.0,
            noise_sigma: 0.03,
            image_size: (64, 64),
            object_scale_range: (0.35, 0.6),
        }
    }

    pub fn mild(name: &str) -> Self {
        Self {
            background: Background::MildClutter,
            clutter_density: 0.35,
            noise_sigma: 0.05,
            ..Self::plain(name)
        }
    }

    pub fn heavy(name: &str) -> Self {
        Self {
            background: Background::HeavyClutter,
            clutter_density: 0.6,
            noise_sigma: 0.06,
            ..Self::plain(name)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        let (lo, hi) = self.object_scale_range;
        if h < 8 || w < 8 {
            return Err(Error::InvalidConfig(format!("{}: image too small", self.name)));
        }
        if !(0.0..=1.0).contains(&self.clutter_density) || !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "{}: clutter_density in [0,1] and noise_sigma >= 0 required",
                self.name
            )));
        }
        if !(lo > 0.0 && lo <= hi && hi < 0.95) {
            return Err(Error::InvalidConfig(format!(
                "{}: object_scale_range must satisfy 0 < min <= max < 0.95",
                self.name
            )));
        }
        if hi * (h.min(w) as f64) + 2.0 > h.min(w) as f64 {
            return Err(Error::InvalidConfig(format!("{}: objects do not fit the image", self.name)));
        }
        if (lo * h.min(w) as f64) < 4.0 {
            return Err(Error::InvalidConfig(format!("{}: objects under 4 px", self.name)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub images: Vec<Tensor>,
    pub ground_truths: Vec<GroundTruth>,
    pub domain: DomainSpec,
    pub seed: u64,
}

impl DatasetBundle {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn labeled(&self) -> Vec<LabeledImage> {
        self.images
            .iter()
            .zip(&self.ground_truths)
            .map(|(image, gt)| LabeledImage {
                image: image.clone(),
                class_index: gt.category_id as usize - 1,
                bbox: gt.bbox,
            })
            .collect()
    }

    fn subset(&self, idx: &[usize]) -> Self {
        Self {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            ground_truths: idx.iter().map(|&i| self.ground_truths[i]).collect(),
            domain: self.domain.clone(),
            seed: self.seed,
        }
    }
}

type Rgb = [f64; 3];

fn random_color<R: Rng>(rng: &mut R) -> Rgb {
    [rng.random(), rng.random(), rng.random()]
}

/// Foreground color at least 0.4 away from `bg` in some channel.
fn contrasting_color<R: Rng>(bg: &Rgb, rng: &mut R) -> Rgb {
    loop {
        let c = random_color(rng);
        if c.iter().zip(bg).any(|(a, b)| (a - b).abs() >= 0.4) {
            return c;
        }
    }
}

struct Canvas {
    h: usize,
    w: usize,
    px: Vec<Rgb>,
}

impl Canvas {
    fn fill_rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: &Rgb) {
        for y in y0.max(0)..y1.min(self.h as i64) {
            for x in x0.max(0)..x1.min(self.w as i64) {
                self.px[y as usize * self.w + x as usize] = *color;
            }
        }
    }
}

/// Pixel membership of a class shape of radius `r` centered at `(cx, cy)`.
fn shape_mask(class_index: usize, cx: f64, cy: f64, r: f64, h: usize, w: usize) -> BinaryMask {
    let mut m = BinaryMask::zeros(w, h);
    for row in 0..h {
        for col in 0..w {
            let dx = col as f64 + 0.5 - cx;
            let dy = row as f64 + 0.5 - cy;
            let d2 = dx * dx + dy * dy;
            let inside = match class_index {
                0 => d2 <= r * r,
                1 => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
                2 => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
                _ => d2 <= r * r && d2 >= (0.5 * r) * (0.5 * r),
            };
            if inside {
                m.set(row, col, true);
            }
        }
    }
    m
}

/// Tight pixel box around the set bits.
fn tight_box(m: &BinaryMask) -> Option<BBox> {
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for r in 0..m.height() {
        for c in 0..m.width() {
            if m.get(r, c) {
                r0 = r0.min(r);
                r1 = r1.max(r);
                c0 = c0.min(c);
                c1 = c1.max(c);
            }
        }
    }
    (r0 != usize::MAX)
        .then(|| BBox::new(c0 as f64, r0 as f64, (c1 - c0 + 1) as f64, (r1 - r0 + 1) as f64).ok())
        .flatten()
}

/// Distractors: bars, crosses and striped patches. None of them is a filled
/// disk, square, triangle or ring.
fn draw_clutter<R: Rng>(canvas: &mut Canvas, domain: &DomainSpec, bg: &Rgb, rng: &mut R) {
    let (h, w) = (canvas.h, canvas.w);
    let count = (domain.clutter_density * (h * w) as f64 / 64.0).round() as usize;
    let side = h.min(w) as f64;
    let heavy = domain.background == Background::HeavyClutter;
    for _ in 0..count {
        let color = if heavy {
            random_color(rng)
        } else {
            let mut c = *bg;
            for v in &mut c {
                *v = (*v + rng.random_range(-0.2..0.2)).clamp(0.0, 1.0);
            }
            c
        };
        let len = (side * rng.random_range(0.12..if heavy { 0.35 } else { 0.22 })).max(3.0) as i64;
        let thick = rng.random_range(1..=(len / 4).max(1));
        let x = rng.random_range(0..w as i64);
        let y = rng.random_range(0..h as i64);
        match rng.random_range(0..3) {
            0 => {
                if rng.random_bool(0.5) {
                    canvas.fill_rect(x, y, x + len, y + thick, &color);
                } else {
                    canvas.fill_rect(x, y, x + thick, y + len, &color);
                }
            }
            1 => {
                let half = len / 2;
                canvas.fill_rect(x - half, y, x + half, y + thick, &color);
                canvas.fill_rect(x, y - half, x + thick, y + half, &color);
            }
            _ => {
                let period = rng.random_range(2..=3);
                for k in 0..len {
                    if k % (2 * period) < period {
                        canvas.fill_rect(x + k, y, x + k + 1, y + len, &color);
                    }
                }
            }
        }
    }
}

/// Class, center and radius of the foreground object.
fn sample_object<R: Rng>(domain: &DomainSpec, rng: &mut R) -> (usize, f64, f64, f64) {
    let (h, w) = domain.image_size;
    let class_index = rng.random_range(0..CLASS_NAMES.len());
    let (lo, hi) = domain.object_scale_range;
    let r = h.min(w) as f64 * rng.random_range(lo..=hi) / 2.0;
    let cx = rng.random_range(r + 1.0..=w as f64 - r - 1.0);
    let cy = rng.random_range(r + 1.0..=h as f64 - r - 1.0);
    (class_index, cx, cy, r)
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn generate_one(domain: &DomainSpec, seed: u64, index: usize) -> (Tensor, GroundTruth) {
    let (h, w) = domain.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 3 * index as u64));
    let mut clutter_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 3 * index as u64 + 1));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 3 * index as u64 + 2));

    let (class_index, cx, cy, r) = sample_object(domain, &mut rng);
    let bg = random_color(&mut rng);
    let fg = contrasting_color(&bg, &mut rng);

    let mut canvas = Canvas {
        h,
        w,
        px: vec![bg; h * w],
    };
    if domain.background != Background::Plain {
        draw_clutter(&mut canvas, domain, &bg, &mut clutter_rng);
    }
    let mask = shape_mask(class_index, cx, cy, r, h, w);
    for (p, &bit) in canvas.px.iter_mut().zip(mask.bits()) {
        if bit {
            *p = fg;
        }
    }
    let bbox = tight_box(&mask).expect("shape radius is at least 2 px");

    let noise = Normal::new(0.0, domain.noise_sigma.max(0.0)).expect("finite sigma");
    let mut data = vec![0.0; 3 * h * w];
    for (i, p) in canvas.px.iter().enumerate() {
        for ch in 0..3 {
            let n = if domain.noise_sigma > 0.0 {
                noise.sample(&mut noise_rng)
            } else {
                0.0
            };
            data[ch * h * w + i] = quantize(p[ch] + n);
        }
    }
    (
        Tensor::new(vec![3, h, w], data).expect("finite pixels"),
        GroundTruth {
            image_id: index as u64,
            category_id: class_index as u32 + 1,
            bbox,
        },
    )
}

pub fn generate(domain: &DomainSpec, n: usize, seed: u64) -> Result<DatasetBundle> {
    domain.validate()?;
    if n == 0 {
        return Err(Error::InvalidConfig("cannot generate an empty dataset".into()));
    }
    let (images, ground_truths) = (0..n)
        .into_par_iter()
        .map(|i| generate_one(domain, seed, i))
        .unzip();
    Ok(DatasetBundle {
        images,
        ground_truths,
        domain: domain.clone(),
        seed,
    })
}

/// Shuffled train/validation/test partition. Validation and test sizes are
/// floor allocations; the remainder goes to training.
pub fn split(
    bundle: &DatasetBundle,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(DatasetBundle, DatasetBundle, DatasetBundle)> {
    let (a, b, c) = ratios;
    if !(a > 0.0 && b > 0.0 && c > 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "split ratios must be positive and sum to 1, got {ratios:?}"
        )));
    }
    let n = bundle.len();
    if n < 5 {
        return Err(Error::TooSmall { n, min: 5 });
    }
    let n_val = (n as f64 * b + 1e-9).floor() as usize;
    let n_test = (n as f64 * c + 1e-9).floor() as usize;
    let n_train = n - n_val - n_test;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5917));
    let order = shuffled(n, &mut rng);
    let (tr, rest) = order.split_at(n_train);
    let (va, te) = rest.split_at(n_val);
    Ok((bundle.subset(tr), bundle.subset(va), bundle.subset(te)))
}

/// The drawn pixels of one image's shape; exposed for coverage checks.
pub fn shape_pixels(domain: &DomainSpec, seed: u64, index: usize) -> BinaryMask {
    let (h, w) = domain.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 3 * index as u64));
    let (class_index, cx, cy, r) = sample_object(domain, &mut rng);
    shape_mask(class_index, cx, cy, r, h, w)
}
