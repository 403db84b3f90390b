use rand::Rng;
use serde::{Deserialize, Serialize};

use super::reacher::{ReacherWorldState, WorldConfig};
use crate::rssm::ImageObs;

const ARM_COLOR: [f64; 3] = [0.25, 0.85, 0.35];
const TARGET_COLOR: [f64; 3] = [1.0, 0.25, 0.2];
const OCCLUDER_COLOR: [f64; 3] = [0.5, 0.5, 0.5];
/// Half-extent of the world square that maps onto the crop window.
const VIEW_EXTENT: f64 = 1.15;

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Disk moving in image-fraction coordinates `[0, 1]²`, reflecting at the
/// image borders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Occluder {
    pub center: [f64; 2],
    pub velocity: [f64; 2],
    pub radius: f64,
}

impl Occluder {
    pub fn advance(&mut self) {
        for k in 0..2 {
            let mut p = self.center[k] + self.velocity[k];
            if p < 0.0 {
                p = -p;
                self.velocity[k] = -self.velocity[k];
            } else if p > 1.0 {
                p = 2.0 - p;
                self.velocity[k] = -self.velocity[k];
            }
            self.center[k] = p;
        }
    }

    /// Whether the pixel at row `y`, column `x` of a `size` image is covered.
    pub fn covers(&self, size: usize, y: usize, x: usize) -> bool {
        let px = (x as f64 + 0.5) / size as f64 - self.center[0];
        let py = (y as f64 + 0.5) / size as f64 - self.center[1];
        px * px + py * py <= self.radius * self.radius
    }
}

/// One drifting Gaussian blob of the background pattern.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub color: Vec<f64>,
    pub width: f64,
    pub freq: [f64; 2],
    pub phase: [f64; 2],
}

impl Blob {
    fn center(&self, t: usize) -> [f64; 2] {
        let t = t as f64;
        [
            0.5 + 0.4 * (self.freq[0] * t + self.phase[0]).sin(),
            0.5 + 0.4 * (self.freq[1] * t + self.phase[1]).cos(),
        ]
    }
}

/// Time-varying natural-video stand-in: three drifting coloured blobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistractorField {
    pub blobs: Vec<Blob>,
}

impl DistractorField {
    pub fn random(rng: &mut impl Rng, channels: usize) -> Self {
        let blobs = (0..3)
            .map(|_| Blob {
                color: (0..channels).map(|_| rng.random_range(0.2..1.0)).collect(),
                width: rng.random_range(0.1..0.25),
                freq: [rng.random_range(0.02..0.08), rng.random_range(0.02..0.08)],
                phase: [
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.0..std::f64::consts::TAU),
                ],
            })
            .collect();
        DistractorField { blobs }
    }

    /// Background intensity of channel `c` at image fractions `(u, v)`.
    pub fn value(&self, u: f64, v: f64, c: usize, t: usize) -> f64 {
        let mut acc = 0.0;
        for b in &self.blobs {
            let [cx, cy] = b.center(t);
            let d2 = (u - cx).powi(2) + (v - cy).powi(2);
            acc += b.color[c % b.color.len()] * (-d2 / (2.0 * b.width * b.width)).exp();
        }
        acc.min(1.0)
    }
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let q = [a[0] + t * ab[0] - p[0], a[1] + t * ab[1] - p[1]];
    (q[0] * q[0] + q[1] * q[1]).sqrt()
}

/// Pixels per world unit for a config.
pub fn pixel_scale(config: &WorldConfig) -> f64 {
    config.image_size as f64 / 2.0 / VIEW_EXTENT
}

/// World coordinates of the centre of pixel `(y, x)` in the pre-crop image.
pub fn pixel_to_world(config: &WorldConfig, y: usize, x: usize) -> [f64; 2] {
    let scale = pixel_scale(config);
    let half = config.precrop_size as f64 / 2.0;
    [
        (x as f64 + 0.5 - half) / scale,
        -(y as f64 + 0.5 - half) / scale,
    ]
}

/// Clean render on black: the target disk, then the arm over it, with a
/// one-pixel antialiased edge. Returns the image and the foreground mask
/// (pixels with nonzero coverage).
pub fn render_scene(config: &WorldConfig, state: &ReacherWorldState) -> (ImageObs, Vec<bool>) {
    let n = config.precrop_size;
    let c = config.channels;
    let scale = pixel_scale(config);
    let joints = state.joints();
    let mut img = ImageObs::blank(n, c);
    let mut mask = vec![false; n * n];
    let coverage = |d: f64, r: f64| ((r - d) * scale + 0.5).clamp(0.0, 1.0);
    for y in 0..n {
        for x in 0..n {
            let p = pixel_to_world(config, y, x);
            let dt = ((p[0] - state.target[0]).powi(2) + (p[1] - state.target[1]).powi(2)).sqrt();
            let cov_t = coverage(dt, config.target_radius);
            let da = segment_distance(p, joints[0], joints[1])
                .min(segment_distance(p, joints[1], joints[2]));
            let cov_a = coverage(da, config.arm_half_width);
            if cov_t == 0.0 && cov_a == 0.0 {
                continue;
            }
            mask[y * n + x] = true;
            let i = (y * n + x) * c;
            for ch in 0..c {
                let under = cov_t * TARGET_COLOR[ch % 3];
                let v = cov_a * ARM_COLOR[ch % 3] + (1.0 - cov_a) * under;
                img.pixels[i + ch] = quantize(v);
            }
        }
    }
    (img, mask)
}

/// Replaces background pixels by the distractor pattern at time `t`;
/// foreground pixels are left untouched.
pub fn apply_distractor(img: &mut ImageObs, mask: &[bool], field: &DistractorField, t: usize) {
    let n = img.size;
    let c = img.channels;
    for y in 0..n {
        for x in 0..n {
            if mask[y * n + x] {
                continue;
            }
            let (u, v) = ((x as f64 + 0.5) / n as f64, (y as f64 + 0.5) / n as f64);
            for ch in 0..c {
                img.pixels[(y * n + x) * c + ch] = quantize(field.value(u, v, ch, t));
            }
        }
    }
}

/// Paints the occluder disk over every covered pixel.
pub fn apply_occlusion(img: &mut ImageObs, occ: &Occluder) {
    let n = img.size;
    let c = img.channels;
    for y in 0..n {
        for x in 0..n {
            if occ.covers(n, y, x) {
                for ch in 0..c {
                    img.pixels[(y * n + x) * c + ch] = quantize(OCCLUDER_COLOR[ch % 3]);
                }
            }
        }
    }
}
