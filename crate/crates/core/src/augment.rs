//! Deterministic augmentation: 25 transforms fan one sample out into 26.
//!
//! Geometric transforms apply the identical coordinate map to image and
//! mask (bilinear vs. nearest sampling, masks re-binarized); photometric
//! transforms leave masks untouched. Randomized transforms draw from a
//! per-(spec seed, sample id, transform index) stream, so results are
//! order-independent across workers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{derive_seed, resize_bilinear_tensor, resize_nearest_tensor, Sample};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub enum Transform {
    Rot90,
    Rot180,
    Rot270,
    /// Rotation by a random angle in `[-max_deg, +max_deg]`.
    RotateRandom { max_deg: f64 },
    FlipH,
    FlipV,
    Transpose,
    /// Central crop of the given fraction, resized back to the original size.
    CenterCrop { frac: f64 },
    Elastic { alpha: f64, sigma: f64 },
    Brightness { delta: f32 },
    Contrast { factor: f32 },
    Gamma { gamma: f32 },
    GaussianNoise { std: f64 },
    /// Zeroes out `holes` random rectangles in the image (mask untouched).
    CoarseDropout { holes: usize },
    /// Random crop with a random scale in `[min_frac, max_frac]`, resized
    /// back.
    RandomScaleCrop { min_frac: f64, max_frac: f64 },
}

/// Exactly 25 transform descriptors plus the seed that fixes all randomness.
#[derive(Debug, Clone)]
pub struct AugmentationSpec {
    pub seed: u64,
    pub transforms: Vec<Transform>,
}

pub const AUGMENTATIONS_PER_IMAGE: usize = 25;

impl AugmentationSpec {
    pub fn new(seed: u64, transforms: Vec<Transform>) -> Result<AugmentationSpec> {
        if transforms.len() != AUGMENTATIONS_PER_IMAGE {
            return Err(Error::Config(format!(
                "augmentation spec needs exactly {AUGMENTATIONS_PER_IMAGE} transforms, got {}",
                transforms.len()
            )));
        }
        Ok(AugmentationSpec { seed, transforms })
    }

    /// The fixed roster: three axis rotations plus a random one, both flips,
    /// transpose, three center crops, three elastic warps, three brightness
    /// shifts, three contrast scalings, two gammas, two noise levels, one
    /// two-hole dropout, and one random scale-crop.
    pub fn standard(seed: u64) -> AugmentationSpec {
        let transforms = vec![
            Transform::Rot90,
            Transform::Rot180,
            Transform::Rot270,
            Transform::RotateRandom { max_deg: 45.0 },
            Transform::FlipH,
            Transform::FlipV,
            Transform::Transpose,
            Transform::CenterCrop { frac: 0.9 },
            Transform::CenterCrop { frac: 0.8 },
            Transform::CenterCrop { frac: 0.7 },
            Transform::Elastic { alpha: 8.0, sigma: 4.0 },
            Transform::Elastic { alpha: 8.0, sigma: 4.0 },
            Transform::Elastic { alpha: 8.0, sigma: 4.0 },
            Transform::Brightness { delta: -0.1 },
            Transform::Brightness { delta: 0.1 },
            Transform::Brightness { delta: 0.2 },
            Transform::Contrast { factor: 0.8 },
            Transform::Contrast { factor: 0.9 },
            Transform::Contrast { factor: 1.2 },
            Transform::Gamma { gamma: 0.8 },
            Transform::Gamma { gamma: 1.2 },
            Transform::GaussianNoise { std: 0.01 },
            Transform::GaussianNoise { std: 0.02 },
            Transform::CoarseDropout { holes: 2 },
            Transform::RandomScaleCrop { min_frac: 0.7, max_frac: 0.95 },
        ];
        debug_assert_eq!(transforms.len(), AUGMENTATIONS_PER_IMAGE);
        AugmentationSpec { seed, transforms }
    }
}

fn clamp01(t: Tensor<f32>) -> Tensor<f32> {
    t.map(|v| v.clamp(0.0, 1.0))
}

fn rebinarize(t: Tensor<f32>) -> Tensor<f32> {
    t.map(|v| if v > 0.5 { 1.0 } else { 0.0 })
}

/// Index permutation over spatial coordinates; exact for both image and
/// mask. `dims_swap` marks maps whose output is W x H instead of H x W.
fn permute(t: &Tensor<f32>, dims_swap: bool, src: impl Fn(usize, usize) -> (usize, usize)) -> Tensor<f32> {
    let s = t.shape();
    let (oh, ow) = if dims_swap { (s.w, s.h) } else { (s.h, s.w) };
    let mut out = vec![0.0f32; s.numel()];
    let mut o = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..oh {
                for x in 0..ow {
                    let (sy, sx) = src(y, x);
                    out[o] = t.at(n, c, sy, sx);
                    o += 1;
                }
            }
        }
    }
    Tensor::from_vec(Shape::new(s.n, s.c, oh, ow), out)
}

pub fn rot90(t: &Tensor<f32>) -> Tensor<f32> {
    let h = t.shape().h;
    permute(t, true, move |y, x| (h - 1 - x, y))
}

pub fn rot180(t: &Tensor<f32>) -> Tensor<f32> {
    let (h, w) = (t.shape().h, t.shape().w);
    permute(t, false, move |y, x| (h - 1 - y, w - 1 - x))
}

pub fn rot270(t: &Tensor<f32>) -> Tensor<f32> {
    let w = t.shape().w;
    permute(t, true, move |y, x| (x, w - 1 - y))
}

pub fn flip_h(t: &Tensor<f32>) -> Tensor<f32> {
    let w = t.shape().w;
    permute(t, false, move |y, x| (y, w - 1 - x))
}

pub fn flip_v(t: &Tensor<f32>) -> Tensor<f32> {
    let h = t.shape().h;
    permute(t, false, move |y, x| (h - 1 - y, x))
}

pub fn transpose(t: &Tensor<f32>) -> Tensor<f32> {
    permute(t, true, |y, x| (x, y))
}

/// Samples `t` at real-valued coordinates produced by `src(y, x)`; bilinear
/// when `smooth`, nearest otherwise; out-of-bounds reads as 0.
fn warp(t: &Tensor<f32>, smooth: bool, src: impl Fn(usize, usize) -> (f64, f64)) -> Tensor<f32> {
    let s = t.shape();
    let mut out = vec![0.0f32; s.numel()];
    for y in 0..s.h {
        for x in 0..s.w {
            let (sy, sx) = src(y, x);
            for n in 0..s.n {
                for c in 0..s.c {
                    let o = s.index(n, c, y, x);
                    out[o] = if smooth {
                        sample_bilinear(t, n, c, sy, sx)
                    } else {
                        sample_nearest(t, n, c, sy, sx)
                    };
                }
            }
        }
    }
    Tensor::from_vec(s, out)
}

fn sample_bilinear(t: &Tensor<f32>, n: usize, c: usize, sy: f64, sx: f64) -> f32 {
    let s = t.shape();
    let y0 = sy.floor() as isize;
    let x0 = sx.floor() as isize;
    let fy = sy - y0 as f64;
    let fx = sx - x0 as f64;
    let read = |yy: isize, xx: isize| -> f64 {
        if yy < 0 || xx < 0 || yy >= s.h as isize || xx >= s.w as isize {
            0.0
        } else {
            t.at(n, c, yy as usize, xx as usize) as f64
        }
    };
    let top = read(y0, x0) * (1.0 - fx) + read(y0, x0 + 1) * fx;
    let bot = read(y0 + 1, x0) * (1.0 - fx) + read(y0 + 1, x0 + 1) * fx;
    (top * (1.0 - fy) + bot * fy) as f32
}

fn sample_nearest(t: &Tensor<f32>, n: usize, c: usize, sy: f64, sx: f64) -> f32 {
    let s = t.shape();
    let y = sy.round() as isize;
    let x = sx.round() as isize;
    if y < 0 || x < 0 || y >= s.h as isize || x >= s.w as isize {
        0.0
    } else {
        t.at(n, c, y as usize, x as usize)
    }
}

/// Rotation by `deg` degrees around the image center, same output size.
pub fn rotate_sample(sample: &Sample, deg: f64) -> Sample {
    let s = sample.image.shape();
    let (cy, cx) = ((s.h as f64 - 1.0) / 2.0, (s.w as f64 - 1.0) / 2.0);
    let rad = deg.to_radians();
    let (sin, cos) = rad.sin_cos();
    // inverse map: rotate output coords by -deg
    let src = move |y: usize, x: usize| -> (f64, f64) {
        let dy = y as f64 - cy;
        let dx = x as f64 - cx;
        (cy + dy * cos - dx * sin, cx + dy * sin + dx * cos)
    };
    Sample {
        id: sample.id.clone(),
        image: clamp01(warp(&sample.image, true, src)),
        mask: rebinarize(warp(&sample.mask, false, src)),
    }
}

fn crop_tensor(t: &Tensor<f32>, top: usize, left: usize, ch: usize, cw: usize) -> Tensor<f32> {
    let s = t.shape();
    let mut out = vec![0.0f32; s.n * s.c * ch * cw];
    let mut o = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..ch {
                for x in 0..cw {
                    out[o] = t.at(n, c, top + y, left + x);
                    o += 1;
                }
            }
        }
    }
    Tensor::from_vec(Shape::new(s.n, s.c, ch, cw), out)
}

fn crop_and_restore(sample: &Sample, top: usize, left: usize, ch: usize, cw: usize) -> Result<Sample> {
    let (h, w) = (sample.height(), sample.width());
    if ch == 0 || cw == 0 || top + ch > h || left + cw > w {
        return Err(Error::Data(format!(
            "crop {ch}x{cw} at ({top},{left}) exceeds image {h}x{w}"
        )));
    }
    let image = crop_tensor(&sample.image, top, left, ch, cw);
    let mask = crop_tensor(&sample.mask, top, left, ch, cw);
    Ok(Sample {
        id: sample.id.clone(),
        image: clamp01(resize_bilinear_tensor(&image, h, w)),
        mask: rebinarize(resize_nearest_tensor(&mask, h, w)),
    })
}

pub fn center_crop(sample: &Sample, frac: f64) -> Result<Sample> {
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(Error::Data(format!(
            "center crop fraction {frac} outside (0, 1]: crop larger than image"
        )));
    }
    let (h, w) = (sample.height(), sample.width());
    let ch = ((h as f64 * frac).round() as usize).max(1);
    let cw = ((w as f64 * frac).round() as usize).max(1);
    crop_and_restore(sample, (h - ch) / 2, (w - cw) / 2, ch, cw)
}

/// Per-pixel displacement field: raw `U(-1,1)` noise, one field per axis
/// (dy first, then dx, row-major from one stream).
pub fn uniform_field(h: usize, w: usize, seed: u64) -> (Vec<f32>, Vec<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dy = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let dx = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (dy, dx)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Separable Gaussian blur with zero padding; accumulation in f64.
pub fn gaussian_smooth(field: &[f32], h: usize, w: usize, sigma: f64) -> Vec<f32> {
    let k = gaussian_kernel(sigma);
    let radius = k.len() / 2;
    let mut rows = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                let xx = x as isize + i as isize - radius as isize;
                if xx >= 0 && xx < w as isize {
                    acc += field[y * w + xx as usize] as f64 * kv;
                }
            }
            rows[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                let yy = y as isize + i as isize - radius as isize;
                if yy >= 0 && yy < h as isize {
                    acc += rows[yy as usize * w + x] * kv;
                }
            }
            out[y * w + x] = acc as f32;
        }
    }
    out
}

/// Smoothed, scaled displacement fields `(dy, dx)`.
pub fn elastic_displacement(
    h: usize,
    w: usize,
    alpha: f64,
    sigma: f64,
    seed: u64,
) -> (Vec<f32>, Vec<f32>) {
    let (raw_dy, raw_dx) = uniform_field(h, w, seed);
    let scale = |f: Vec<f32>| -> Vec<f32> {
        gaussian_smooth(&f, h, w, sigma)
            .into_iter()
            .map(|v| v * alpha as f32)
            .collect()
    };
    (scale(raw_dy), scale(raw_dx))
}

/// Warps the sample by a Gaussian-smoothed random displacement field.
pub fn elastic_transform(sample: &Sample, alpha: f64, sigma: f64, seed: u64) -> Result<Sample> {
    if sigma <= 0.0 {
        return Err(Error::Data(format!("elastic transform needs sigma > 0, got {sigma}")));
    }
    let (h, w) = (sample.height(), sample.width());
    let (dy, dx) = elastic_displacement(h, w, alpha, sigma, seed);
    let src = |y: usize, x: usize| -> (f64, f64) {
        (
            y as f64 + dy[y * w + x] as f64,
            x as f64 + dx[y * w + x] as f64,
        )
    };
    Ok(Sample {
        id: sample.id.clone(),
        image: clamp01(warp(&sample.image, true, src)),
        mask: rebinarize(warp(&sample.mask, false, src)),
    })
}

fn apply(sample: &Sample, t: &Transform, seed: u64) -> Result<Sample> {
    let geometric_pair = |img: Tensor<f32>, mask: Tensor<f32>| Sample {
        id: sample.id.clone(),
        image: img,
        mask,
    };
    Ok(match t {
        Transform::Rot90 => geometric_pair(rot90(&sample.image), rot90(&sample.mask)),
        Transform::Rot180 => geometric_pair(rot180(&sample.image), rot180(&sample.mask)),
        Transform::Rot270 => geometric_pair(rot270(&sample.image), rot270(&sample.mask)),
        Transform::RotateRandom { max_deg } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let deg = rng.gen_range(-max_deg..*max_deg);
            rotate_sample(sample, deg)
        }
        Transform::FlipH => geometric_pair(flip_h(&sample.image), flip_h(&sample.mask)),
        Transform::FlipV => geometric_pair(flip_v(&sample.image), flip_v(&sample.mask)),
        Transform::Transpose => geometric_pair(transpose(&sample.image), transpose(&sample.mask)),
        Transform::CenterCrop { frac } => center_crop(sample, *frac)?,
        Transform::Elastic { alpha, sigma } => elastic_transform(sample, *alpha, *sigma, seed)?,
        Transform::Brightness { delta } => Sample {
            id: sample.id.clone(),
            image: clamp01(sample.image.map(|v| v + delta)),
            mask: sample.mask.clone(),
        },
        Transform::Contrast { factor } => Sample {
            id: sample.id.clone(),
            image: clamp01(sample.image.map(|v| (v - 0.5) * factor + 0.5)),
            mask: sample.mask.clone(),
        },
        Transform::Gamma { gamma } => Sample {
            id: sample.id.clone(),
            image: clamp01(sample.image.map(|v| v.max(0.0).powf(*gamma))),
            mask: sample.mask.clone(),
        },
        Transform::GaussianNoise { std } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0f64, *std).expect("std validated");
            let image = sample
                .image
                .map(|v| (v as f64 + normal.sample(&mut rng)) as f32);
            Sample {
                id: sample.id.clone(),
                image: clamp01(image),
                mask: sample.mask.clone(),
            }
        }
        Transform::CoarseDropout { holes } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (h, w) = (sample.height(), sample.width());
            let mut image = sample.image.clone();
            for _ in 0..*holes {
                let hh = rng.gen_range(h / 8..=(h / 4).max(h / 8 + 1));
                let hw = rng.gen_range(w / 8..=(w / 4).max(w / 8 + 1));
                let top = rng.gen_range(0..=h.saturating_sub(hh));
                let left = rng.gen_range(0..=w.saturating_sub(hw));
                let s = image.shape();
                let buf = image.data_mut();
                for c in 0..s.c {
                    for y in top..(top + hh).min(h) {
                        for x in left..(left + hw).min(w) {
                            buf[s.index(0, c, y, x)] = 0.0;
                        }
                    }
                }
            }
            Sample {
                id: sample.id.clone(),
                image,
                mask: sample.mask.clone(),
            }
        }
        Transform::RandomScaleCrop { min_frac, max_frac } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let frac = rng.gen_range(*min_frac..*max_frac);
            let (h, w) = (sample.height(), sample.width());
            let ch = ((h as f64 * frac).round() as usize).clamp(1, h);
            let cw = ((w as f64 * frac).round() as usize).clamp(1, w);
            let top = rng.gen_range(0..=h - ch);
            let left = rng.gen_range(0..=w - cw);
            crop_and_restore(sample, top, left, ch, cw)?
        }
    })
}

/// Applies the full spec: returns the original plus 25 transformed samples,
/// ids suffixed `_0` (original) through `_25`.
pub fn augment_sample(sample: &Sample, spec: &AugmentationSpec) -> Result<Vec<Sample>> {
    if spec.transforms.len() != AUGMENTATIONS_PER_IMAGE {
        return Err(Error::Config(format!(
            "augmentation spec needs exactly {AUGMENTATIONS_PER_IMAGE} transforms, got {}",
            spec.transforms.len()
        )));
    }
    sample.validate()?;
    let mut out = Vec::with_capacity(AUGMENTATIONS_PER_IMAGE + 1);
    let mut original = sample.clone();
    original.id = format!("{}_0", sample.id);
    out.push(original);
    for (k, t) in spec.transforms.iter().enumerate() {
        let seed = derive_seed(spec.seed, &sample.id, (k + 1) as u64);
        let mut augmented = apply(sample, t, seed)?;
        augmented.id = format!("{}_{}", sample.id, k + 1);
        out.push(augmented);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_dataset;

    fn sample() -> Sample {
        synthetic_dataset(1, 24, 32, 77).pop().unwrap()
    }

    #[test]
    fn standard_roster_has_25_entries_and_yields_26() {
        let spec = AugmentationSpec::standard(3);
        assert_eq!(spec.transforms.len(), 25);
        let s = sample();
        let out = augment_sample(&s, &spec).unwrap();
        assert_eq!(out.len(), 26);
        assert_eq!(out[0].id, format!("{}_0", s.id));
        assert_eq!(out[25].id, format!("{}_25", s.id));
        assert_eq!(out[0].image.data(), s.image.data());
        for a in &out {
            assert!(a.mask.iter().all(|&v| v == 0.0 || v == 1.0), "{}", a.id);
            assert!(a.image.iter().all(|&v| (0.0..=1.0).contains(&v)), "{}", a.id);
        }
    }

    #[test]
    fn augmentation_is_bitwise_deterministic() {
        let spec = AugmentationSpec::standard(11);
        let s = sample();
        let a = augment_sample(&s, &spec).unwrap();
        let b = augment_sample(&s, &spec).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.image.data(), y.image.data());
            assert_eq!(x.mask.data(), y.mask.data());
        }

        // a different seed changes at least the seeded transforms
        let other = augment_sample(&s, &AugmentationSpec::standard(12)).unwrap();
        assert_ne!(a[4].image.data(), other[4].image.data()); // random rotation
    }

    #[test]
    fn transpose_is_an_involution() {
        let s = sample();
        let t = transpose(&transpose(&s.image));
        assert_eq!(t.data(), s.image.data());

        // the emitted transpose sample equals the axis-swapped original exactly
        let spec = AugmentationSpec::standard(0);
        let out = augment_sample(&s, &spec).unwrap();
        let idx = spec
            .transforms
            .iter()
            .position(|t| *t == Transform::Transpose)
            .unwrap();
        assert_eq!(out[idx + 1].image.data(), transpose(&s.image).data());
    }

    #[test]
    fn rot90_moves_corner_marker_analytically() {
        // corner-marked fixture: marker at (0, 0)
        let mut img = Tensor::zeros(Shape::new(1, 1, 4, 6));
        img.data_mut()[0] = 1.0;
        let r = rot90(&img);
        // 90-degree clockwise: (0,0) -> (0, H-1) in the W x H output
        assert_eq!(r.shape(), Shape::new(1, 1, 6, 4));
        assert_eq!(r.at(0, 0, 0, 3), 1.0);
        assert_eq!(r.iter().filter(|&&v| v == 1.0).count(), 1);

        // four rot90 applications are the identity
        let back = rot90(&rot90(&rot90(&rot90(&img))));
        assert_eq!(back.data(), img.data());
        // rot270 undoes rot90
        assert_eq!(rot270(&rot90(&img)).data(), img.data());
    }

    #[test]
    fn flips_are_involutions_and_rot180_composes() {
        let s = sample();
        assert_eq!(flip_h(&flip_h(&s.image)).data(), s.image.data());
        assert_eq!(flip_v(&flip_v(&s.image)).data(), s.image.data());
        assert_eq!(
            rot180(&s.image).data(),
            flip_h(&flip_v(&s.image)).data()
        );
    }

    #[test]
    fn geometric_transforms_keep_image_and_mask_aligned() {
        // fixture whose image encodes its own mask
        let mut s = sample();
        let mask_as_image = Tensor::from_vec(
            Shape::new(1, 3, 24, 32),
            [s.mask.data(), s.mask.data(), s.mask.data()].concat(),
        );
        s.image = mask_as_image;

        // exact index permutations agree exactly
        for t in [Transform::Rot90, Transform::Rot180, Transform::FlipH, Transform::Transpose] {
            let out = apply(&s, &t, 1).unwrap();
            assert_eq!(out.image.data()[..24 * 32], *out.mask.data(), "{t:?}");
        }

        // interpolating transforms may disagree on a thin boundary only
        for t in [
            Transform::RotateRandom { max_deg: 45.0 },
            Transform::CenterCrop { frac: 0.8 },
            Transform::Elastic { alpha: 8.0, sigma: 4.0 },
        ] {
            let out = apply(&s, &t, 2).unwrap();
            let disagreements = out
                .image
                .data()[..24 * 32]
                .iter()
                .zip(out.mask.iter())
                .filter(|(&i, &m)| (if i > 0.5 { 1.0 } else { 0.0 }) != m)
                .count();
            assert!(
                disagreements <= 24 * 32 / 50,
                "{t:?}: {disagreements} pixels diverge"
            );
        }
    }

    #[test]
    fn center_crop_validates_fraction() {
        let s = sample();
        assert!(center_crop(&s, 1.2).is_err());
        assert!(center_crop(&s, 0.0).is_err());
        let c = center_crop(&s, 0.5).unwrap();
        assert_eq!(c.image.shape(), s.image.shape());
    }

    #[test]
    fn elastic_zero_alpha_is_identity() {
        let s = sample();
        let out = elastic_transform(&s, 0.0, 3.0, 9).unwrap();
        assert!(out.image.max_abs_diff(&s.image) < 1e-6);
        assert_eq!(out.mask.data(), s.mask.data());
        assert!(elastic_transform(&s, 1.0, 0.0, 9).is_err());
    }

    #[test]
    fn elastic_constant_image_stays_constant() {
        let s = Sample {
            id: "c".into(),
            image: Tensor::full(Shape::new(1, 3, 16, 16), 0.6),
            mask: Tensor::zeros(Shape::new(1, 1, 16, 16)),
        };
        let out = elastic_transform(&s, 4.0, 2.0, 1).unwrap();
        // interior stays exactly constant; the border can blend with
        // out-of-bounds zeros when the field points outward
        for y in 2..14 {
            for x in 2..14 {
                for c in 0..3 {
                    assert!((out.image.at(0, c, y, x) - 0.6).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn smoothed_field_matches_direct_2d_convolution_oracle() {
        let (h, w, sigma) = (12, 10, 1.7);
        let (raw_dy, _) = uniform_field(h, w, 42);
        let got = gaussian_smooth(&raw_dy, h, w, sigma);

        // direct dense 2-D convolution with the outer-product kernel
        let k = {
            let radius = (3.0 * sigma).ceil().max(1.0) as usize;
            let mut k: Vec<f64> = (0..=2 * radius)
                .map(|i| {
                    let d = i as f64 - radius as f64;
                    (-d * d / (2.0 * sigma * sigma)).exp()
                })
                .collect();
            let sum: f64 = k.iter().sum();
            for v in k.iter_mut() {
                *v /= sum;
            }
            k
        };
        let radius = k.len() / 2;
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for (i, &ky) in k.iter().enumerate() {
                    for (j, &kx) in k.iter().enumerate() {
                        let yy = y as isize + i as isize - radius as isize;
                        let xx = x as isize + j as isize - radius as isize;
                        if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                            acc += raw_dy[yy as usize * w + xx as usize] as f64 * ky * kx;
                        }
                    }
                }
                assert!(
                    (got[y * w + x] as f64 - acc).abs() < 1e-6,
                    "({y},{x}): {} vs {acc}",
                    got[y * w + x]
                );
            }
        }
    }

    #[test]
    fn photometric_transforms_never_touch_the_mask() {
        let s = sample();
        for t in [
            Transform::Brightness { delta: 0.2 },
            Transform::Contrast { factor: 1.2 },
            Transform::Gamma { gamma: 0.8 },
            Transform::GaussianNoise { std: 0.02 },
            Transform::CoarseDropout { holes: 2 },
        ] {
            let out = apply(&s, &t, 5).unwrap();
            assert_eq!(out.mask.data(), s.mask.data(), "{t:?}");
            assert_ne!(out.image.data(), s.image.data(), "{t:?}");
        }
    }

    #[test]
    fn wrong_roster_length_is_rejected() {
        assert!(AugmentationSpec::new(0, vec![Transform::FlipH; 24]).is_err());
        assert!(AugmentationSpec::new(0, vec![Transform::FlipH; 25]).is_ok());
    }
}
