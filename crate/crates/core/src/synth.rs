//! Synthetic task families.
//!
//! A family fixes an appearance (intensity ranges, noise, smoothing) and an
//! anatomy (where the target sits and roughly how large it is). Each sample
//! draws a smooth random blob near the family's anatomical site as the target
//! mask, adds distractor blobs with the same intensity statistics elsewhere,
//! and renders intensities plus Gaussian noise. Because distractors look like
//! the target, only the prompted context tells the model which blob to pick.
//!
//! Families may also have an attached neighbour: a blob at a fixed offset
//! from the target, rendered at exactly the target's intensity and allowed
//! to touch it. The image then shows no boundary between the two, and where
//! the target ends is only learnable from the context annotations.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Mask3D, Shape3, Volume3D};

/// Accepted range of target foreground fraction.
pub const FRACTION_BAND: (f64, f64) = (0.01, 0.30);
const MAX_ATTEMPTS: usize = 32;
/// Neighbour centre distance from the target centre, in target radii.
const NEIGHBOUR_DISTANCE: f64 = 1.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Appearance {
    pub fg_range: (f64, f64),
    pub bg_range: (f64, f64),
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    /// Gaussian smoothing sigma (voxels) of the field that shapes blobs.
    pub smoothing: f64,
}

/// Where the target lives, as fractions of the volume extent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Anatomy {
    pub center: [f64; 3],
    pub radius: [f64; 3],
    /// Per-sample positional jitter (fraction of extent, std-dev).
    pub jitter: f64,
    /// Target foreground fraction is drawn uniformly from this range.
    pub fraction: (f64, f64),
    pub distractors: usize,
    /// Offset of the attached neighbour's centre, in target radii per axis.
    #[serde(default)]
    pub neighbour: Option<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskFamily {
    pub family_seed: u64,
    pub n_samples: usize,
    pub shape: Shape3,
    pub appearance: Appearance,
    pub anatomy: Anatomy,
}

/// SplitMix64 finaliser, used to derive independent per-sample streams.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl TaskFamily {
    /// Draws a random family from `family_seed`.
    pub fn random(family_seed: u64, n_samples: usize, shape: Shape3) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(family_seed, u64::MAX));
        let fg = rng.random_range(0.6..0.95);
        let bg = rng.random_range(0.05..0.35);
        let base = rng.random_range(0.13..0.2);
        let dir: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
        TaskFamily {
            family_seed,
            n_samples,
            shape,
            appearance: Appearance {
                fg_range: (fg - 0.05, fg + 0.05),
                bg_range: (bg - 0.05, bg + 0.05),
                noise: rng.random_range(0.02..0.08),
                smoothing: rng.random_range(1.5..2.5),
            },
            anatomy: Anatomy {
                center: std::array::from_fn(|_| rng.random_range(0.3..0.7)),
                radius: std::array::from_fn(|_| base * rng.random_range(0.8..1.25)),
                jitter: 0.03,
                fraction: (0.02, 0.08),
                distractors: 1,
                neighbour: Some(dir.map(|v| NEIGHBOUR_DISTANCE * v / norm)),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        let a = &self.appearance;
        for (key, (lo, hi)) in [("fg_range", a.fg_range), ("bg_range", a.bg_range)] {
            if !(lo <= hi && lo.is_finite() && hi.is_finite()) {
                return Err(Error::config(format!("appearance.{key}"), "needs finite lo <= hi"));
            }
        }
        if !(a.noise >= 0.0) || !(a.smoothing >= 0.0) {
            return Err(Error::config("appearance", "noise and smoothing must be non-negative"));
        }
        let (lo, hi) = self.anatomy.fraction;
        if !(FRACTION_BAND.0 <= lo && lo <= hi && hi <= FRACTION_BAND.1) {
            return Err(Error::config("anatomy.fraction", format!("must lie within {FRACTION_BAND:?}")));
        }
        if self.anatomy.radius.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::config("anatomy.radius", "must be positive"));
        }
        Ok(())
    }
}

/// Separable Gaussian blur with clamped borders.
pub fn gaussian_blur(data: &mut [f64], shape: Shape3, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let dims = shape.0;
    let strides = [dims[1] * dims[2], dims[2], 1];
    let mut line = Vec::new();
    for axis in 0..3 {
        let n = dims[axis] as isize;
        let (o1, o2) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for a in 0..dims[o1] {
            for b in 0..dims[o2] {
                let base = a * strides[o1] + b * strides[o2];
                line.clear();
                line.extend((0..dims[axis]).map(|i| data[base + i * strides[axis]]));
                for i in 0..n {
                    let mut acc = 0.0;
                    for (j, &k) in kernel.iter().enumerate() {
                        let src = (i + j as isize - radius).clamp(0, n - 1) as usize;
                        acc += k * line[src];
                    }
                    data[base + i as usize * strides[axis]] = acc;
                }
            }
        }
    }
}

/// 6-connected components of `bits`, largest first.
fn components_3d(bits: &[bool], shape: Shape3) -> Vec<Vec<usize>> {
    let mut seen = vec![false; bits.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    let [d, h, w] = shape.0;
    for start in 0..bits.len() {
        if !bits[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let (z, y, x) = shape.coords(i);
            let mut push = |j: usize| {
                if bits[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if z > 0 {
                push(i - h * w);
            }
            if z + 1 < d {
                push(i + h * w);
            }
            if y > 0 {
                push(i - w);
            }
            if y + 1 < h {
                push(i + w);
            }
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < w {
                push(i + 1);
            }
        }
        out.push(comp);
    }
    out.sort_by_key(|c| std::cmp::Reverse(c.len()));
    out
}

/// Unit-variance smooth noise field.
fn smooth_field(rng: &mut ChaCha8Rng, shape: Shape3, sigma: f64) -> Vec<f64> {
    let mut f: Vec<f64> = (0..shape.len()).map(|_| StandardNormal.sample(rng)).collect();
    gaussian_blur(&mut f, shape, sigma);
    let mean = f.iter().sum::<f64>() / f.len() as f64;
    let std = (f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / f.len() as f64).sqrt().max(1e-12);
    f.iter_mut().for_each(|v| *v = (*v - mean) / std);
    f
}

/// Ellipsoidal score `1 - |(v - c) / r|²` perturbed by `field`.
fn blob_score(shape: Shape3, center: [f64; 3], radius: [f64; 3], field: &[f64], roughness: f64) -> Vec<f64> {
    (0..shape.len())
        .map(|i| {
            let (z, y, x) = shape.coords(i);
            let q: f64 = [z, y, x]
                .iter()
                .enumerate()
                .map(|(a, &c)| ((c as f64 - center[a]) / radius[a]).powi(2))
                .sum();
            1.0 - q + roughness * field[i]
        })
        .collect()
}

/// Keeps the `count` best-scoring voxels, then the largest 6-connected piece.
fn carve(score: &[f64], shape: Shape3, count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..score.len()).collect();
    order.sort_by(|&a, &b| score[b].total_cmp(&score[a]));
    let mut bits = vec![false; score.len()];
    for &i in order.iter().take(count) {
        bits[i] = true;
    }
    components_3d(&bits, shape).into_iter().next().unwrap_or_default()
}

fn try_sample(family: &TaskFamily, rng: &mut ChaCha8Rng) -> Option<(Volume3D<f32>, Mask3D)> {
    let shape = family.shape;
    let ext = shape.0.map(|n| n as f64);
    let an = &family.anatomy;
    let ap = &family.appearance;
    let field = smooth_field(rng, shape, ap.smoothing);

    let center: [f64; 3] = std::array::from_fn(|a| {
        let jitter: f64 = StandardNormal.sample(rng);
        ((an.center[a] + an.jitter * jitter) * ext[a]).clamp(0.0, ext[a] - 1.0)
    });
    let radius: [f64; 3] = std::array::from_fn(|a| (an.radius[a] * ext[a]).max(1.0));
    let fraction = rng.random_range(an.fraction.0..=an.fraction.1);
    let count = ((fraction * shape.len() as f64).round() as usize).max(1);
    let target = carve(&blob_score(shape, center, radius, &field, 0.35), shape, count);
    let frac = target.len() as f64 / shape.len() as f64;
    if !(FRACTION_BAND.0..=FRACTION_BAND.1).contains(&frac) {
        return None;
    }
    let mut mask = Mask3D::zeros(shape);
    let mut taken = vec![false; shape.len()];
    for &i in &target {
        let (z, y, x) = shape.coords(i);
        mask.set(z, y, x, true);
        taken[i] = true;
    }

    let fg = rng.random_range(ap.fg_range.0..=ap.fg_range.1);
    let mut blobs: Vec<(Vec<usize>, f64)> = Vec::new();
    if let Some(offset) = an.neighbour {
        let c: [f64; 3] = std::array::from_fn(|a| (center[a] + offset[a] * radius[a]).clamp(0.0, ext[a] - 1.0));
        let r: [f64; 3] = std::array::from_fn(|a| radius[a] * rng.random_range(0.8..1.2));
        let mut score = blob_score(shape, c, r, &field, 0.35);
        for (i, s) in score.iter_mut().enumerate() {
            if taken[i] {
                *s = f64::NEG_INFINITY;
            }
        }
        let n = ((rng.random_range(an.fraction.0..=an.fraction.1) * shape.len() as f64).round() as usize).max(1);
        let blob: Vec<usize> = carve(&score, shape, n).into_iter().filter(|&i| score[i].is_finite()).collect();
        blobs.push((blob, fg));
    }
    for (blob, _) in &blobs {
        for &i in blob {
            taken[i] = true;
        }
    }

    // Distractors: same statistics, placed away from everything so far.
    for _ in 0..an.distractors {
        let mut placed = None;
        for _ in 0..16 {
            let c: [f64; 3] = std::array::from_fn(|a| rng.random_range(radius[a]..(ext[a] - radius[a]).max(radius[a] + 1.0)));
            let sep: f64 = (0..3).map(|a| ((c[a] - center[a]) / (radius[a] * 2.2)).powi(2)).sum();
            if sep >= 1.0 {
                placed = Some(c);
                break;
            }
        }
        let Some(c) = placed else { continue };
        let r: [f64; 3] = std::array::from_fn(|a| radius[a] * rng.random_range(0.8..1.2));
        let mut score = blob_score(shape, c, r, &field, 0.35);
        for (i, s) in score.iter_mut().enumerate() {
            if taken[i] || near(&mask, shape, i) {
                *s = f64::NEG_INFINITY;
            }
        }
        let n = ((rng.random_range(an.fraction.0..=an.fraction.1) * shape.len() as f64).round() as usize).max(1);
        let blob: Vec<usize> = carve(&score, shape, n).into_iter().filter(|&i| score[i].is_finite()).collect();
        for &i in &blob {
            taken[i] = true;
        }
        blobs.push((blob, rng.random_range(ap.fg_range.0..=ap.fg_range.1)));
    }

    let bg = rng.random_range(ap.bg_range.0..=ap.bg_range.1);
    let mut img = vec![bg; shape.len()];
    for &i in &target {
        img[i] = fg;
    }
    for (blob, level) in &blobs {
        for &i in blob {
            img[i] = *level;
        }
    }
    if ap.noise > 0.0 {
        for v in &mut img {
            let g: f64 = StandardNormal.sample(rng);
            *v += ap.noise * g;
        }
    }
    let vol = Volume3D::new(shape, img.into_iter().map(|v| v as f32).collect()).ok()?;
    Some((vol.minmax_normalize().ok()?, mask))
}

/// True when voxel `i` is within one voxel (26-neighbourhood) of the mask.
fn near(mask: &Mask3D, shape: Shape3, i: usize) -> bool {
    let (z, y, x) = shape.coords(i);
    let [d, h, w] = shape.0;
    for zz in z.saturating_sub(1)..=(z + 1).min(d - 1) {
        for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
            for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                if mask.get(zz, yy, xx) {
                    return true;
                }
            }
        }
    }
    false
}

/// Deterministic `(image, mask)` for sample `index` of `family`.
pub fn generate_sample(family: &TaskFamily, index: usize) -> Result<(Volume3D<f32>, Mask3D)> {
    family.validate()?;
    if index >= family.n_samples {
        return Err(Error::InsufficientSamples { needed: index + 1, available: family.n_samples });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(family.family_seed, index as u64));
    for _ in 0..MAX_ATTEMPTS {
        if let Some(s) = try_sample(family, &mut rng) {
            return Ok(s);
        }
    }
    Err(Error::DegenerateSample(MAX_ATTEMPTS))
}

/// Disjoint context-pool and evaluation index sets for one family.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FamilySplit {
    pub pool: Vec<usize>,
    pub eval: Vec<usize>,
}

/// Shuffles sample indices with the family seed and cuts them into a context
/// pool and an evaluation set.
pub fn split_family(family: &TaskFamily, n_context_pool: usize, n_eval: usize) -> Result<FamilySplit> {
    let needed = n_context_pool + n_eval;
    if needed > family.n_samples {
        return Err(Error::InsufficientSamples { needed, available: family.n_samples });
    }
    let mut idx: Vec<usize> = (0..family.n_samples).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(family.family_seed, 0x5917));
    for i in (1..idx.len()).rev() {
        idx.swap(i, rng.random_range(0..=i));
    }
    Ok(FamilySplit { pool: idx[..n_context_pool].to_vec(), eval: idx[n_context_pool..needed].to_vec() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn family(seed: u64) -> TaskFamily {
        TaskFamily::random(seed, 50, Shape3([32, 32, 32]))
    }

    #[test]
    fn noiseless_foreground_is_exactly_one() {
        let mut f = family(1);
        f.appearance = Appearance { fg_range: (1.0, 1.0), bg_range: (0.0, 0.0), noise: 0.0, smoothing: 2.0 };
        let (img, mask) = generate_sample(&f, 3).unwrap();
        for (v, &m) in img.data().iter().zip(mask.data()) {
            if m == 1 {
                assert_eq!(*v, 1.0);
            }
        }
    }

    #[test]
    fn deterministic_per_index() {
        let f = family(7);
        assert_eq!(generate_sample(&f, 4).unwrap(), generate_sample(&f, 4).unwrap());
        assert_ne!(generate_sample(&f, 4).unwrap().1, generate_sample(&f, 5).unwrap().1);
    }

    #[test]
    fn target_is_single_connected_component() {
        let f = family(11);
        for i in 0..5 {
            let (_, m) = generate_sample(&f, i).unwrap();
            let bits: Vec<bool> = m.data().iter().map(|&v| v == 1).collect();
            assert_eq!(components_3d(&bits, m.shape()).len(), 1);
        }
    }

    #[test]
    fn index_out_of_range_rejected() {
        assert!(generate_sample(&family(1), 50).is_err());
    }

    #[test]
    fn split_is_disjoint() {
        let f = family(3);
        let s = split_family(&f, 20, 10).unwrap();
        assert_eq!(s.pool.len(), 20);
        assert_eq!(s.eval.len(), 10);
        assert!(s.pool.iter().all(|i| !s.eval.contains(i)));
        assert!(split_family(&f, 40, 11).is_err());
    }

    #[test]
    fn blur_preserves_constants() {
        let s = Shape3([4, 5, 6]);
        let mut v = vec![2.5; s.len()];
        gaussian_blur(&mut v, s, 1.3);
        assert!(v.iter().all(|x| (x - 2.5).abs() < 1e-12));
    }
}
