use rand::Rng;
use serde::{Deserialize, Serialize};

use super::AugmentedInput;

/// Training augmentation ranges. Setting every probability to 0 disables
/// augmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub rotate_prob: f64,
    pub max_rotation_deg: f64,
    pub shift_prob: f64,
    /// Maximum shift as a fraction of each image dimension.
    pub max_shift_frac: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_prob: 0.5,
            rotate_prob: 1.0,
            max_rotation_deg: 15.0,
            shift_prob: 1.0,
            max_shift_frac: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            flip_prob: 0.0,
            rotate_prob: 0.0,
            shift_prob: 0.0,
            ..Self::default()
        }
    }
}

/// One geometric transform: horizontal flip, then rotation about the image
/// centre (counter-clockwise as displayed with rows pointing down, i.e. the
/// top-left corner moves to the top-right under +90°), then an integer
/// shift of `(rows, cols)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub flip: bool,
    pub angle_deg: f64,
    pub shift: (i32, i32),
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        flip: false,
        angle_deg: 0.0,
        shift: (0, 0),
    };
}

pub fn sample_transform<R: Rng + ?Sized>(
    cfg: &AugmentConfig,
    rng: &mut R,
    shape: (usize, usize),
) -> Transform {
    let flip = cfg.flip_prob > 0.0 && rng.gen_bool(cfg.flip_prob.min(1.0));
    let angle_deg = if cfg.rotate_prob > 0.0 && rng.gen_bool(cfg.rotate_prob.min(1.0)) {
        rng.gen_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg)
    } else {
        0.0
    };
    let shift = if cfg.shift_prob > 0.0 && rng.gen_bool(cfg.shift_prob.min(1.0)) {
        let max_r = cfg.max_shift_frac * shape.0 as f64;
        let max_c = cfg.max_shift_frac * shape.1 as f64;
        (
            rng.gen_range(-max_r..=max_r).round() as i32,
            rng.gen_range(-max_c..=max_c).round() as i32,
        )
    } else {
        (0, 0)
    };
    Transform {
        flip,
        angle_deg,
        shift,
    }
}

/// Applies `t` to all image channels (bilinear, zero fill) and to the mask
/// (bilinear, re-binarized at 0.5).
pub fn apply_transform(t: &Transform, input: &AugmentedInput, mask: &[u8]) -> (AugmentedInput, Vec<u8>) {
    if *t == Transform::IDENTITY {
        return (input.clone(), mask.to_vec());
    }
    let (h, w) = (input.height, input.width);
    let plane = h * w;
    let (sin, cos) = t.angle_deg.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = vec![0.0f32; input.data.len()];
    let mut out_mask = vec![0u8; plane];
    let mask_f: Vec<f32> = mask.iter().map(|&m| m as f32).collect();
    for r in 0..h {
        for c in 0..w {
            let ry = r as f64 - t.shift.0 as f64 - cy;
            let rx = c as f64 - t.shift.1 as f64 - cx;
            let (ys, xs) = if t.angle_deg == 0.0 {
                (ry, rx)
            } else {
                (-sin * rx + cos * ry, cos * rx + sin * ry)
            };
            let sy = ys + cy;
            let mut sx = xs + cx;
            if t.flip {
                sx = (w as f64 - 1.0) - sx;
            }
            let i = r * w + c;
            for ch in 0..AugmentedInput::CHANNELS {
                out[ch * plane + i] = bilinear(&input.data[ch * plane..(ch + 1) * plane], h, w, sy, sx);
            }
            out_mask[i] = u8::from(bilinear(&mask_f, h, w, sy, sx) >= 0.5);
        }
    }
    (
        AugmentedInput {
            height: h,
            width: w,
            data: out,
        },
        out_mask,
    )
}

pub fn augment<R: Rng + ?Sized>(
    cfg: &AugmentConfig,
    rng: &mut R,
    input: &AugmentedInput,
    mask: &[u8],
) -> (AugmentedInput, Vec<u8>) {
    let t = sample_transform(cfg, rng, (input.height, input.width));
    apply_transform(&t, input, mask)
}

fn bilinear(plane: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let y0 = y.floor();
    let x0 = x.floor();
    let wy = y - y0;
    let wx = x - x0;
    let mut acc = 0.0f64;
    for (dy, fy) in [(0.0, 1.0 - wy), (1.0, wy)] {
        for (dx, fx) in [(0.0, 1.0 - wx), (1.0, wx)] {
            let weight = fy * fx;
            if weight == 0.0 {
                continue;
            }
            let (yy, xx) = (y0 + dy, x0 + dx);
            if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
                continue;
            }
            acc += weight * plane[yy as usize * w + xx as usize] as f64;
        }
    }
    acc as f32
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn input(h: usize, w: usize) -> AugmentedInput {
        AugmentedInput {
            height: h,
            width: w,
            data: (0..3 * h * w).map(|i| (i % 17) as f32 - 8.0).collect(),
        }
    }

    #[test]
    fn zero_probabilities_leave_sample_unchanged() {
        let x = input(8, 8);
        let m: Vec<u8> = (0..64).map(|i| (i % 3 == 0) as u8).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let (y, ym) = augment(&AugmentConfig::disabled(), &mut rng, &x, &m);
            assert_eq!(y, x);
            assert_eq!(ym, m);
        }
    }

    #[test]
    fn double_flip_is_identity() {
        let x = input(6, 9);
        let m: Vec<u8> = (0..54).map(|i| (i % 5 == 0) as u8).collect();
        let t = Transform {
            flip: true,
            ..Transform::IDENTITY
        };
        let (once, m1) = apply_transform(&t, &x, &m);
        assert_ne!(once, x);
        let (twice, m2) = apply_transform(&t, &once, &m1);
        assert_eq!(twice, x);
        assert_eq!(m2, m);
    }

    #[test]
    fn quarter_turn_moves_corner_pixel() {
        // (0,0) about centre (1.5,1.5) is (x,y)=(-1.5,-1.5); +90° gives
        // (1.5,-1.5), i.e. row 0, column 3.
        let mut m = vec![0u8; 16];
        m[0] = 1;
        let x = input(4, 4);
        let t = Transform {
            angle_deg: 90.0,
            ..Transform::IDENTITY
        };
        let (_, out) = apply_transform(&t, &x, &m);
        let mut want = vec![0u8; 16];
        want[3] = 1;
        assert_eq!(out, want);
    }

    #[test]
    fn flip_and_unclipped_shift_preserve_foreground_count() {
        let mut m = vec![0u8; 20 * 20];
        for r in 6..12 {
            for c in 5..9 {
                m[r * 20 + c] = 1;
            }
        }
        let x = input(20, 20);
        let t = Transform {
            flip: true,
            angle_deg: 0.0,
            shift: (-3, 4),
        };
        let (_, out) = apply_transform(&t, &x, &m);
        assert_eq!(out.iter().filter(|&&v| v == 1).count(), 24);
    }

    #[test]
    fn sampled_parameters_respect_ranges() {
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..500 {
            let t = sample_transform(&cfg, &mut rng, (96, 80));
            assert!(t.angle_deg.abs() <= 15.0);
            assert!(t.shift.0.abs() <= 10 && t.shift.1.abs() <= 8);
        }
    }
}
