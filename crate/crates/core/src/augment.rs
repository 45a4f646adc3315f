//! Paired image/mask augmentation: flips, rotation, brightness and zoom,
//! plus the deterministic 12-variant expansion recipe that turns 256
//! training images into 3072.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Sample;
use crate::error::{Error, Result};

/// One augmentation. Geometric ops are applied identically to image and
/// mask; the mask is resampled with nearest neighbor so it stays binary.
/// Rotation is in degrees; positive angles follow the convention
/// `out[r][c] = in[(N-1) - c][r]` at 90 degrees on a square input.
#[derive(Debug, Clone, PartialEq)]
pub enum AugmentOp {
    HFlip,
    VFlip,
    /// Degrees; exact right angles are resolved without interpolation.
    Rotate(f64),
    /// Additive brightness shift in normalized units, |delta| <= 0.3.
    Brightness(f64),
    /// Scale factor about the image center, in [0.8, 1.2].
    Zoom(f64),
    Compose(Vec<AugmentOp>),
}

impl AugmentOp {
    pub fn validate(&self) -> Result<()> {
        match self {
            AugmentOp::Brightness(d) => {
                if !(-0.3..=0.3).contains(d) {
                    return Err(Error::config(format!("brightness {d} outside [-0.3, 0.3]")));
                }
            }
            AugmentOp::Zoom(s) => {
                if !(0.8..=1.2).contains(s) {
                    return Err(Error::config(format!("zoom {s} outside [0.8, 1.2]")));
                }
            }
            AugmentOp::Rotate(t) => {
                if !t.is_finite() {
                    return Err(Error::config("rotation angle must be finite"));
                }
            }
            AugmentOp::Compose(ops) => {
                for op in ops {
                    op.validate()?;
                }
            }
            AugmentOp::HFlip | AugmentOp::VFlip => {}
        }
        Ok(())
    }
}

/// Apply `op` to a sample. All parameters are carried by the op itself, so
/// the result is fully deterministic.
pub fn augment(sample: &Sample, op: &AugmentOp) -> Result<Sample> {
    op.validate()?;
    Ok(apply(sample, op))
}

fn apply(sample: &Sample, op: &AugmentOp) -> Sample {
    match op {
        AugmentOp::HFlip => flip(sample, false),
        AugmentOp::VFlip => flip(sample, true),
        AugmentOp::Rotate(deg) => warp(sample, Warp::rotation(*deg)),
        AugmentOp::Zoom(s) => warp(sample, Warp::zoom(*s)),
        AugmentOp::Brightness(delta) => brightness(sample, *delta),
        AugmentOp::Compose(ops) => {
            let mut cur = sample.clone();
            for op in ops {
                cur = apply(&cur, op);
            }
            cur
        }
    }
}

fn flip(sample: &Sample, vertical: bool) -> Sample {
    let axis = ndarray::Axis(usize::from(!vertical));
    let mut image = sample.image.view();
    image.invert_axis(axis);
    let mut mask = sample.mask.view();
    mask.invert_axis(axis);
    Sample {
        image: image.to_owned(),
        mask: mask.to_owned(),
        id: sample.id.clone(),
    }
}

fn brightness(sample: &Sample, delta: f64) -> Sample {
    if delta == 0.0 {
        return sample.clone();
    }
    let shift = delta * 255.0;
    let image = sample
        .image
        .mapv(|v| (v as f64 + shift).round().clamp(0.0, 255.0) as u8);
    Sample {
        image,
        mask: sample.mask.clone(),
        id: sample.id.clone(),
    }
}

/// Inverse-mapped affine warp about the image center.
struct Warp {
    // source = M * (dest - center) + center
    m: [[f64; 2]; 2],
}

impl Warp {
    fn rotation(degrees: f64) -> Self {
        let (sin, cos) = exact_trig(degrees);
        // inverse of a rotation is its transpose
        Warp {
            m: [[cos, sin], [-sin, cos]],
        }
    }

    fn zoom(scale: f64) -> Self {
        let inv = 1.0 / scale;
        Warp {
            m: [[inv, 0.0], [0.0, inv]],
        }
    }
}

/// Sine/cosine with exact values at multiples of 90 degrees so that right
/// angle rotations are pure index permutations.
fn exact_trig(degrees: f64) -> (f64, f64) {
    let norm = degrees.rem_euclid(360.0);
    if norm == 0.0 {
        (0.0, 1.0)
    } else if norm == 90.0 {
        (1.0, 0.0)
    } else if norm == 180.0 {
        (0.0, -1.0)
    } else if norm == 270.0 {
        (-1.0, 0.0)
    } else {
        let rad = degrees.to_radians();
        (rad.sin(), rad.cos())
    }
}

fn warp(sample: &Sample, w: Warp) -> Sample {
    let (h, wd, _) = sample.image.dim();
    let cx = (wd as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let fill = mean_color(&sample.image);

    let mut image = Array3::<u8>::zeros(sample.image.dim());
    let mut mask = Array2::<u8>::zeros(sample.mask.dim());
    for r in 0..h {
        for c in 0..wd {
            let dx = c as f64 - cx;
            let dy = r as f64 - cy;
            let sx = w.m[0][0] * dx + w.m[0][1] * dy + cx;
            let sy = w.m[1][0] * dx + w.m[1][1] * dy + cy;

            for ch in 0..3 {
                image[[r, c, ch]] = bilinear(&sample.image, sx, sy, ch, fill[ch]);
            }
            mask[[r, c]] = nearest(&sample.mask, sx, sy);
        }
    }
    Sample {
        image,
        mask,
        id: sample.id.clone(),
    }
}

fn mean_color(image: &Array3<u8>) -> [u8; 3] {
    let (h, w, _) = image.dim();
    let n = (h * w) as f64;
    let mut sums = [0f64; 3];
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                sums[ch] += image[[r, c, ch]] as f64;
            }
        }
    }
    [
        (sums[0] / n).round() as u8,
        (sums[1] / n).round() as u8,
        (sums[2] / n).round() as u8,
    ]
}

fn bilinear(image: &Array3<u8>, x: f64, y: f64, ch: usize, fill: u8) -> u8 {
    let (h, w, _) = image.dim();
    if x < 0.0 || y < 0.0 || x > (w - 1) as f64 || y > (h - 1) as f64 {
        return fill;
    }
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let v00 = image[[y0, x0, ch]] as f64;
    let v01 = image[[y0, x1, ch]] as f64;
    let v10 = image[[y1, x0, ch]] as f64;
    let v11 = image[[y1, x1, ch]] as f64;
    let top = v00 * (1.0 - fx) + v01 * fx;
    let bot = v10 * (1.0 - fx) + v11 * fx;
    (top * (1.0 - fy) + bot * fy).round().clamp(0.0, 255.0) as u8
}

fn nearest(mask: &Array2<u8>, x: f64, y: f64) -> u8 {
    let (h, w) = mask.dim();
    let xr = x.round();
    let yr = y.round();
    if xr < 0.0 || yr < 0.0 || xr > (w - 1) as f64 || yr > (h - 1) as f64 {
        return 0;
    }
    mask[[yr as usize, xr as usize]]
}

/// Deterministic 12-variant expansion: variant 0 is the original, 1-3 are
/// the flips, and variants >= 4 are seeded random composites (optional flip,
/// rotation in [-30, 30], zoom, brightness). Per-variant seeds derive from
/// `(seed, sample index, variant index)` so the result is independent of
/// iteration order.
pub fn expand_training_set(samples: &[Sample], factor: usize, seed: u64) -> Result<Vec<Sample>> {
    if factor < 1 {
        return Err(Error::config("expansion factor must be >= 1"));
    }
    let mut out = Vec::with_capacity(samples.len() * factor);
    for (i, sample) in samples.iter().enumerate() {
        for v in 0..factor {
            let augmented = match v {
                0 => sample.clone(),
                1 => apply(sample, &AugmentOp::HFlip),
                2 => apply(sample, &AugmentOp::VFlip),
                3 => apply(
                    sample,
                    &AugmentOp::Compose(vec![AugmentOp::HFlip, AugmentOp::VFlip]),
                ),
                _ => {
                    let op = random_composite(variant_seed(seed, i, v));
                    apply(sample, &op)
                }
            };
            let id = if v == 0 {
                sample.id.clone()
            } else {
                format!("{}_v{v:02}", sample.id)
            };
            out.push(Sample { id, ..augmented });
        }
    }
    Ok(out)
}

fn variant_seed(seed: u64, sample_idx: usize, variant: usize) -> u64 {
    seed.wrapping_add((sample_idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((variant as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9))
}

fn random_composite(seed: u64) -> AugmentOp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ops = Vec::new();
    match rng.random_range(0..4u32) {
        1 => ops.push(AugmentOp::HFlip),
        2 => ops.push(AugmentOp::VFlip),
        3 => {
            ops.push(AugmentOp::HFlip);
            ops.push(AugmentOp::VFlip);
        }
        _ => {}
    }
    ops.push(AugmentOp::Rotate(rng.random_range(-30.0..=30.0)));
    ops.push(AugmentOp::Zoom(rng.random_range(0.8..=1.2)));
    ops.push(AugmentOp::Brightness(rng.random_range(-0.3..=0.3)));
    AugmentOp::Compose(ops)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};

    fn checker_sample(n: usize) -> Sample {
        let mut image = Array3::<u8>::zeros((n, n, 3));
        let mut mask = Array2::<u8>::zeros((n, n));
        for r in 0..n {
            for c in 0..n {
                image[[r, c, 0]] = ((r * 31 + c * 7) % 256) as u8;
                image[[r, c, 1]] = ((r * 13 + c * 17) % 256) as u8;
                image[[r, c, 2]] = ((r + c) % 256) as u8;
                mask[[r, c]] = u8::from((r + 2 * c) % 5 == 0);
            }
        }
        Sample::new(image, mask, "t").unwrap()
    }

    #[test]
    fn hflip_is_an_involution() {
        let s = checker_sample(8);
        let once = augment(&s, &AugmentOp::HFlip).unwrap();
        let twice = augment(&once, &AugmentOp::HFlip).unwrap();
        assert_eq!(s.image, twice.image);
        assert_eq!(s.mask, twice.mask);
        assert_ne!(s.image, once.image);
    }

    #[test]
    fn vflip_is_an_involution() {
        let s = checker_sample(9);
        let twice = augment(
            &augment(&s, &AugmentOp::VFlip).unwrap(),
            &AugmentOp::VFlip,
        )
        .unwrap();
        assert_eq!(s.image, twice.image);
        assert_eq!(s.mask, twice.mask);
    }

    #[test]
    fn zero_brightness_is_identity() {
        let s = checker_sample(6);
        let out = augment(&s, &AugmentOp::Brightness(0.0)).unwrap();
        assert_eq!(s.image, out.image);
    }

    #[test]
    fn empty_compose_is_identity() {
        let s = checker_sample(6);
        let out = augment(&s, &AugmentOp::Compose(vec![])).unwrap();
        assert_eq!(s, out);
    }

    #[test]
    fn rotate_90_matches_index_permutation_oracle() {
        let s = checker_sample(4);
        let out = augment(&s, &AugmentOp::Rotate(90.0)).unwrap();
        let n = 4;
        for r in 0..n {
            for c in 0..n {
                assert_eq!(
                    out.mask[[r, c]],
                    s.mask[[n - 1 - c, r]],
                    "mask mismatch at ({r},{c})"
                );
                for ch in 0..3 {
                    assert_eq!(out.image[[r, c, ch]], s.image[[n - 1 - c, r, ch]]);
                }
            }
        }
    }

    #[test]
    fn rotated_masks_stay_binary() {
        let s = checker_sample(16);
        for deg in [-27.5, 13.0, 45.0, 90.0, 181.0] {
            let out = augment(&s, &AugmentOp::Rotate(deg)).unwrap();
            assert!(out.mask.iter().all(|&v| v <= 1));
        }
        for zoom in [0.8, 0.95, 1.2] {
            let out = augment(&s, &AugmentOp::Zoom(zoom)).unwrap();
            assert!(out.mask.iter().all(|&v| v <= 1));
        }
    }

    #[test]
    fn out_of_range_parameters_are_rejected() {
        let s = checker_sample(4);
        assert!(augment(&s, &AugmentOp::Brightness(0.5)).is_err());
        assert!(augment(&s, &AugmentOp::Zoom(1.5)).is_err());
        assert!(augment(&s, &AugmentOp::Zoom(0.5)).is_err());
    }

    #[test]
    fn expansion_count_and_determinism() {
        let samples: Vec<Sample> = (0..5)
            .map(|i| {
                let mut s = checker_sample(16);
                s.id = format!("s{i}");
                s
            })
            .collect();
        let a = expand_training_set(&samples, 12, 7).unwrap();
        let b = expand_training_set(&samples, 12, 7).unwrap();
        assert_eq!(a.len(), 60);
        assert_eq!(a, b);
        let c = expand_training_set(&samples, 12, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn factor_one_is_identity_copy() {
        let samples = vec![checker_sample(8)];
        let out = expand_training_set(&samples, 1, 0).unwrap();
        assert_eq!(out, samples);
    }

    #[test]
    fn expanded_masks_stay_binary() {
        let samples = vec![checker_sample(16)];
        let out = expand_training_set(&samples, 12, 3).unwrap();
        assert_eq!(out.len(), 12);
        for s in &out {
            assert!(s.mask.iter().all(|&v| v <= 1));
            assert_eq!(s.image.dim(), (16, 16, 3));
        }
    }
}
