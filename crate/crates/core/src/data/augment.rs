use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ImageShape;
use crate::error::{Error, Result};

/// Brightness/contrast/saturation jitter; each factor is drawn from
/// `[1 - strength, 1 + strength]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColorJitter {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
}

impl ColorJitter {
    pub const fn uniform(strength: f32) -> Self {
        Self {
            brightness: strength,
            contrast: strength,
            saturation: strength,
        }
    }
}

impl Default for ColorJitter {
    fn default() -> Self {
        Self::uniform(0.25)
    }
}

/// Random augmentations applied to single images. Fields missing from a
/// serialized spec are off.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationSpec {
    /// Reflect padding for random crops; `None` disables cropping.
    #[serde(default)]
    pub crop_pad: Option<usize>,
    #[serde(default)]
    pub horizontal_flip: bool,
    #[serde(default)]
    pub color_jitter: Option<ColorJitter>,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            crop_pad: Some(4),
            horizontal_flip: true,
            color_jitter: Some(ColorJitter::default()),
        }
    }
}

impl AugmentationSpec {
    pub fn identity() -> Self {
        Self {
            crop_pad: None,
            horizontal_flip: false,
            color_jitter: None,
        }
    }

    /// Flip and crop only, the usual classifier recipe.
    pub fn flip_crop(pad: usize) -> Self {
        Self {
            crop_pad: Some(pad),
            horizontal_flip: true,
            color_jitter: None,
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.horizontal_flip && self.color_jitter.is_none() && self.crop_pad.unwrap_or(0) == 0
    }

    pub fn validate(&self, shape: ImageShape) -> Result<()> {
        if let Some(pad) = self.crop_pad {
            if pad >= shape.height || pad >= shape.width {
                return Err(Error::Config(format!(
                    "crop padding {pad} too large for {shape} images"
                )));
            }
        }
        if let Some(j) = self.color_jitter {
            for (name, v) in [
                ("brightness", j.brightness),
                ("contrast", j.contrast),
                ("saturation", j.saturation),
            ] {
                if !(0.0..1.0).contains(&v) {
                    return Err(Error::Config(format!(
                        "color jitter {name} must lie in [0, 1), got {v}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn apply<R: Rng + ?Sized>(&self, image: &[f32], shape: ImageShape, rng: &mut R) -> Vec<f32> {
        let mut out = image.to_vec();
        self.apply_in_place(&mut out, shape, rng);
        out
    }

    pub fn apply_in_place<R: Rng + ?Sized>(&self, image: &mut [f32], shape: ImageShape, rng: &mut R) {
        if let Some(pad) = self.crop_pad.filter(|&p| p > 0) {
            let dy = rng.gen_range(0..=2 * pad) as isize - pad as isize;
            let dx = rng.gen_range(0..=2 * pad) as isize - pad as isize;
            shift_reflect(image, shape, dy, dx);
        }
        if self.horizontal_flip && rng.gen_bool(0.5) {
            flip_horizontal(image, shape);
        }
        if let Some(j) = self.color_jitter {
            let b = 1.0 + rng.gen_range(-j.brightness..=j.brightness);
            let c = 1.0 + rng.gen_range(-j.contrast..=j.contrast);
            let s = 1.0 + rng.gen_range(-j.saturation..=j.saturation);
            jitter(image, shape, b, c, s);
        }
    }
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Equivalent to reflect-padding and cropping at offset `(dy, dx)`.
fn shift_reflect(image: &mut [f32], shape: ImageShape, dy: isize, dx: isize) {
    if dy == 0 && dx == 0 {
        return;
    }
    let (h, w) = (shape.height, shape.width);
    let src = image.to_vec();
    for c in 0..shape.channels {
        let plane = c * h * w;
        for y in 0..h {
            let sy = reflect(y as isize + dy, h);
            for x in 0..w {
                let sx = reflect(x as isize + dx, w);
                image[plane + y * w + x] = src[plane + sy * w + sx];
            }
        }
    }
}

fn flip_horizontal(image: &mut [f32], shape: ImageShape) {
    let (h, w) = (shape.height, shape.width);
    for row in image.chunks_exact_mut(w).take(shape.channels * h) {
        row.reverse();
    }
}

fn jitter(image: &mut [f32], shape: ImageShape, brightness: f32, contrast: f32, saturation: f32) {
    let plane = shape.height * shape.width;
    for p in image.iter_mut() {
        *p = (*p * brightness).clamp(0.0, 1.0);
    }
    let mean = image.iter().sum::<f32>() / image.len() as f32;
    for p in image.iter_mut() {
        *p = ((*p - mean) * contrast + mean).clamp(0.0, 1.0);
    }
    if shape.channels == 3 {
        for i in 0..plane {
            let (r, g, b) = (image[i], image[plane + i], image[2 * plane + i]);
            let gray = 0.299 * r + 0.587 * g + 0.114 * b;
            for c in 0..3 {
                let v = &mut image[c * plane + i];
                *v = ((*v - gray) * saturation + gray).clamp(0.0, 1.0);
            }
        }
    }
}

/// Rotates one image by `quarter_turns × 90°` counter-clockwise.
pub fn rotate_image(image: &[f32], shape: ImageShape, quarter_turns: usize) -> Result<Vec<f32>> {
    if !shape.is_square() {
        return Err(Error::Shape(format!(
            "rotation needs square images, got {shape}"
        )));
    }
    let n = shape.height;
    let mut out = image.to_vec();
    let mut scratch = vec![0.0f32; n * n];
    for _ in 0..quarter_turns % 4 {
        for c in 0..shape.channels {
            let plane = &mut out[c * n * n..(c + 1) * n * n];
            // out[y][x] = in[x][n - 1 - y]
            for y in 0..n {
                for x in 0..n {
                    scratch[y * n + x] = plane[x * n + (n - 1 - y)];
                }
            }
            plane.copy_from_slice(&scratch);
        }
    }
    Ok(out)
}

/// Four rotated copies of a batch, rotation-major, with labels `0..4`.
#[derive(Clone, Debug, PartialEq)]
pub struct RotatedBatch {
    pub images: Vec<f32>,
    pub labels: Vec<u32>,
}

/// Expands a packed batch into all four orientations.
///
/// The first `B` images of the output are the unrotated inputs.
pub fn rotate_batch(batch: &[f32], shape: ImageShape) -> Result<RotatedBatch> {
    let numel = shape.numel();
    if batch.is_empty() || batch.len() % numel != 0 {
        return Err(Error::InvalidArgument(format!(
            "batch of {} values is not a nonempty multiple of {shape}",
            batch.len()
        )));
    }
    if !shape.is_square() {
        return Err(Error::Shape(format!(
            "rotation needs square images, got {shape}"
        )));
    }
    let b = batch.len() / numel;
    let mut images = Vec::with_capacity(4 * batch.len());
    let mut labels = Vec::with_capacity(4 * b);
    for r in 0..4 {
        for img in batch.chunks_exact(numel) {
            images.extend(rotate_image(img, shape, r)?);
            labels.push(r as u32);
        }
    }
    Ok(RotatedBatch { images, labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn missing_fields_mean_off() {
        let spec = AugmentationSpec::flip_crop(3);
        let json = serde_json::to_value(&spec).unwrap();
        assert_eq!(serde_json::from_value::<AugmentationSpec>(json).unwrap(), spec);
        let none: AugmentationSpec = serde_json::from_str("{}").unwrap();
        assert!(none.is_identity());
    }

    fn ramp(shape: ImageShape) -> Vec<f32> {
        let n = shape.numel();
        (0..n).map(|i| i as f32 / n as f32).collect()
    }

    #[test]
    fn batch_of_128_rotates_to_512_balanced() {
        let shape = ImageShape::new(3, 4, 4);
        let batch: Vec<f32> = (0..128).flat_map(|_| ramp(shape)).collect();
        let out = rotate_batch(&batch, shape).unwrap();
        assert_eq!(out.images.len(), 512 * shape.numel());
        for r in 0..4 {
            assert_eq!(out.labels.iter().filter(|&&l| l == r).count(), 128);
        }
        assert_eq!(&out.images[..batch.len()], &batch[..]);
    }

    #[test]
    fn constant_image_rotations_identical() {
        let shape = ImageShape::new(1, 5, 5);
        let img = vec![0.3f32; 25];
        let out = rotate_batch(&img, shape).unwrap();
        assert_eq!(out.labels, vec![0, 1, 2, 3]);
        for chunk in out.images.chunks(25) {
            assert_eq!(chunk, &img[..]);
        }
    }

    #[test]
    fn quarter_turn_is_counter_clockwise() {
        // 2x2: [a b; c d] rotated CCW is [b d; a c]
        let shape = ImageShape::new(1, 2, 2);
        let out = rotate_image(&[1.0, 2.0, 3.0, 4.0], shape, 1).unwrap();
        assert_eq!(out, vec![2.0, 4.0, 1.0, 3.0]);
    }

    #[test]
    fn non_square_rejected() {
        let shape = ImageShape::new(1, 2, 3);
        assert!(rotate_batch(&[0.0; 6], shape).is_err());
    }

    #[test]
    fn identity_spec_is_identity() {
        let shape = ImageShape::new(3, 8, 8);
        let img = ramp(shape);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(AugmentationSpec::identity().apply(&img, shape, &mut rng), img);
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
        assert_eq!(reflect(3, 1), 0);
        assert_eq!(reflect(-3, 2), 1);
    }

    proptest! {
        #[test]
        fn rotations_compose(r1 in 0usize..4, r2 in 0usize..4, seed in 0u64..1000) {
            let shape = ImageShape::new(2, 6, 6);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img: Vec<f32> = (0..shape.numel()).map(|_| rng.gen()).collect();
            let a = rotate_image(&rotate_image(&img, shape, r2).unwrap(), shape, r1).unwrap();
            let b = rotate_image(&img, shape, (r1 + r2) % 4).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn augmentations_preserve_shape_and_range(seed in 0u64..1000) {
            let shape = ImageShape::new(3, 8, 8);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img: Vec<f32> = (0..shape.numel()).map(|_| rng.gen()).collect();
            let out = AugmentationSpec::default().apply(&img, shape, &mut rng);
            prop_assert_eq!(out.len(), img.len());
            prop_assert!(out.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }
}
