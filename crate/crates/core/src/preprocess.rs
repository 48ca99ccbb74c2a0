//! Input standardization: per-slice Z-score, resampling to the network grid,
//! and paired image/mask augmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Grid, Image, LabelMask};

/// Smallest accepted source side length for resampling.
pub const MIN_SOURCE_SIZE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    pub rotate_prob: f64,
    pub max_rotation_deg: f64,
    pub scale_prob: f64,
    /// Scale factor drawn from [1 − max_scale, 1 + max_scale].
    pub max_scale: f64,
    pub gamma_prob: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            rotate_prob: 0.5,
            max_rotation_deg: 15.0,
            scale_prob: 0.5,
            max_scale: 0.1,
            gamma_prob: 0.5,
            gamma_min: 0.8,
            gamma_max: 1.2,
        }
    }
}

impl AugmentConfig {
    /// No transform enabled.
    pub fn disabled() -> Self {
        AugmentConfig {
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            rotate_prob: 0.0,
            max_rotation_deg: 0.0,
            scale_prob: 0.0,
            max_scale: 0.0,
            gamma_prob: 0.0,
            gamma_min: 1.0,
            gamma_max: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub target_size: usize,
    /// Standard deviations below this are treated as zero.
    pub epsilon: f64,
    pub augmentation: AugmentConfig,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target_size: 512,
            epsilon: 1e-8,
            augmentation: AugmentConfig::default(),
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self, depth: usize) -> Result<()> {
        let stride = 1usize << depth.min(usize::BITS as usize - 1);
        if self.target_size == 0 || !self.target_size.is_multiple_of(stride) {
            return Err(Error::Config(format!(
                "target size {} is not divisible by 2^{depth}",
                self.target_size
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Per-slice Z-score standardization. Constant slices map to zeros.
pub fn zscore(image: &Image) -> Result<Grid<f32>> {
    zscore_eps(image, PreprocessConfig::default().epsilon)
}

pub fn zscore_eps(image: &Image, epsilon: f64) -> Result<Grid<f32>> {
    if image.is_empty() {
        return Err(Error::Argument("cannot standardize an empty image".into()));
    }
    let n = image.len() as f64;
    let mean = image.as_slice().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = image
        .as_slice()
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    if std < epsilon {
        return Ok(image.map(|_| 0.0));
    }
    Ok(image.map(|v| ((v as f64 - mean) / std) as f32))
}

fn check_source(w: usize, h: usize) -> Result<()> {
    if w < MIN_SOURCE_SIZE || h < MIN_SOURCE_SIZE {
        return Err(Error::Argument(format!(
            "source {w}x{h} is smaller than {MIN_SOURCE_SIZE}x{MIN_SOURCE_SIZE}"
        )));
    }
    Ok(())
}

/// Bilinear resampling with half-pixel centres. Output values stay inside
/// the input range.
pub fn resize_image(image: &Image, width: usize, height: usize) -> Result<Image> {
    let (sw, sh) = image.dims();
    check_source(sw, sh)?;
    if (sw, sh) == (width, height) {
        return Ok(image.clone());
    }
    let axis = |src: usize, dst: usize| -> Vec<(usize, usize, f32)> {
        let scale = src as f64 / dst as f64;
        (0..dst)
            .map(|o| {
                let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let i0 = pos.floor() as usize;
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, (pos - i0 as f64) as f32)
            })
            .collect()
    };
    let xs = axis(sw, width);
    let ys = axis(sh, height);
    let mut out = Vec::with_capacity(width * height);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = image.get(x0, y0) * (1.0 - fx) + image.get(x1, y0) * fx;
            let bot = image.get(x0, y1) * (1.0 - fx) + image.get(x1, y1) * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    Grid::from_vec(width, height, out)
}

/// Nearest-neighbour resampling; never introduces new class ids.
pub fn resize_mask(mask: &LabelMask, width: usize, height: usize) -> Result<LabelMask> {
    let (sw, sh) = mask.dims();
    check_source(sw, sh)?;
    if (sw, sh) == (width, height) {
        return Ok(mask.clone());
    }
    let pick = |o: usize, src: usize, dst: usize| (((o as f64 + 0.5) * src as f64 / dst as f64) as usize).min(src - 1);
    let mut labels = Vec::with_capacity(width * height);
    for y in 0..height {
        let sy = pick(y, sh, height);
        for x in 0..width {
            labels.push(mask.grid().get(pick(x, sw, width), sy));
        }
    }
    LabelMask::from_vec(width, height, labels)
}

pub fn resize_image_to_target(image: &Image, target: usize) -> Result<Image> {
    resize_image(image, target, target)
}

pub fn resize_mask_to_target(mask: &LabelMask, target: usize) -> Result<LabelMask> {
    resize_mask(mask, target, target)
}

/// One concrete augmentation draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub hflip: bool,
    pub vflip: bool,
    pub rotation_deg: f64,
    pub scale: f64,
    pub gamma: f64,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        hflip: false,
        vflip: false,
        rotation_deg: 0.0,
        scale: 1.0,
        gamma: 1.0,
    };

    pub fn sample<R: Rng>(config: &AugmentConfig, rng: &mut R) -> Transform {
        let mut t = Transform::IDENTITY;
        // Every draw is consumed whether or not the transform fires, so the
        // sequence is stable when probabilities change.
        let coin = |rng: &mut R, p: f64| rng.random::<f64>() < p;
        let h = coin(rng, config.hflip_prob);
        let v = coin(rng, config.vflip_prob);
        let r = coin(rng, config.rotate_prob);
        let angle = rng.random_range(-1.0..=1.0) * config.max_rotation_deg;
        let s = coin(rng, config.scale_prob);
        let scale = 1.0 + rng.random_range(-1.0..=1.0) * config.max_scale;
        let g = coin(rng, config.gamma_prob);
        let gamma = config.gamma_min + rng.random::<f64>() * (config.gamma_max - config.gamma_min);
        t.hflip = h;
        t.vflip = v;
        if r {
            t.rotation_deg = angle;
        }
        if s {
            t.scale = scale;
        }
        if g {
            t.gamma = gamma;
        }
        t
    }

    pub fn is_geometric_identity(&self) -> bool {
        !self.hflip && !self.vflip && self.rotation_deg == 0.0 && self.scale == 1.0
    }

    /// Maps an output pixel centre back to input coordinates.
    fn source_point(&self, x: f64, y: f64, cx: f64, cy: f64) -> (f64, f64) {
        // Forward: scale, rotate, then flip about the centre.
        let mut dx = x - cx;
        let mut dy = y - cy;
        if self.hflip {
            dx = -dx;
        }
        if self.vflip {
            dy = -dy;
        }
        let theta = self.rotation_deg.to_radians();
        let (s, c) = theta.sin_cos();
        let rx = c * dx + s * dy;
        let ry = -s * dx + c * dy;
        (rx / self.scale + cx, ry / self.scale + cy)
    }
}

/// Applies `t` to an aligned image/mask pair. The image is resampled
/// bilinearly (out-of-frame pixels take the image minimum), the mask by
/// nearest neighbour (out-of-frame pixels become background).
pub fn apply_transform(image: &Image, mask: Option<&LabelMask>, t: &Transform) -> Result<(Image, Option<LabelMask>)> {
    if let Some(m) = mask {
        if m.dims() != image.dims() {
            return Err(Error::Argument("image and mask are not aligned".into()));
        }
    }
    let (w, h) = image.dims();
    let (mut out_img, out_mask) = if t.is_geometric_identity() {
        (image.clone(), mask.cloned())
    } else {
        let cx = (w as f64 - 1.0) / 2.0;
        let cy = (h as f64 - 1.0) / 2.0;
        let fill = image.as_slice().iter().cloned().fold(f32::INFINITY, f32::min);
        let mut img = Vec::with_capacity(w * h);
        let mut labels = mask.map(|_| Vec::with_capacity(w * h));
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = t.source_point(x as f64, y as f64, cx, cy);
                img.push(sample_bilinear(image, sx, sy, fill));
                if let (Some(labels), Some(m)) = (labels.as_mut(), mask) {
                    let (nx, ny) = (sx.round(), sy.round());
                    let inside = nx >= 0.0 && ny >= 0.0 && nx < w as f64 && ny < h as f64;
                    labels.push(if inside { m.grid().get(nx as usize, ny as usize) } else { 0 });
                }
            }
        }
        let out_mask = match labels {
            Some(l) => Some(LabelMask::from_vec(w, h, l)?),
            None => None,
        };
        (Grid::from_vec(w, h, img)?, out_mask)
    };
    if t.gamma != 1.0 {
        apply_gamma(&mut out_img, t.gamma);
    }
    Ok((out_img, out_mask))
}

fn sample_bilinear(image: &Image, x: f64, y: f64, fill: f32) -> f32 {
    let (w, h) = image.dims();
    if x < -0.5 || y < -0.5 || x > w as f64 - 0.5 || y > h as f64 - 0.5 {
        return fill;
    }
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
    let top = image.get(x0, y0) * (1.0 - fx) + image.get(x1, y0) * fx;
    let bot = image.get(x0, y1) * (1.0 - fx) + image.get(x1, y1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Gamma curve on the min-max normalized intensities, mapped back to the
/// original range.
fn apply_gamma(image: &mut Image, gamma: f64) {
    let (lo, hi) = image
        .as_slice()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let range = hi - lo;
    if range <= 0.0 {
        return;
    }
    for v in image.as_mut_slice() {
        let u = ((*v - lo) / range) as f64;
        *v = lo + range * u.powf(gamma) as f32;
    }
}

/// Draws a transform from `config` with `seed` and applies it.
pub fn augment(
    image: &Image,
    mask: &LabelMask,
    config: &AugmentConfig,
    seed: u64,
) -> Result<(Image, LabelMask)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = Transform::sample(config, &mut rng);
    let (img, m) = apply_transform(image, Some(mask), &t)?;
    Ok((img, m.expect("mask passed in")))
}

/// Network-ready slice: resampled to the target grid, optionally augmented,
/// then Z-scored.
pub fn prepare_slice(
    image: &Image,
    mask: Option<&LabelMask>,
    config: &PreprocessConfig,
    augment_seed: Option<u64>,
) -> Result<(Grid<f32>, Option<LabelMask>)> {
    let t = config.target_size;
    let img = resize_image(image, t, t)?;
    let m = mask.map(|m| resize_mask(m, t, t)).transpose()?;
    let (img, m) = match augment_seed {
        Some(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tr = Transform::sample(&config.augmentation, &mut rng);
            apply_transform(&img, m.as_ref(), &tr)?
        }
        None => (img, m),
    };
    Ok((zscore_eps(&img, config.epsilon)?, m))
}
