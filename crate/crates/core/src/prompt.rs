//! Weak-prompt simulation.
//!
//! Slices are drawn along axis 0 with probability proportional to their
//! foreground area. Each drawn slice is split into 4-connected components and
//! every component receives one prompt: a tight bounding box (optionally
//! jittered by rounded standard-normal offsets) rendered as a filled rectangle,
//! or a uniformly sampled point rendered as a soft sphere whose profile is the
//! normalized distance-to-surface of the ball, `1 - d/R`.
//!
//! Renderings compose by voxelwise max, so the order of prompts never matters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volume::{Mask3D, PromptChannel, PromptType, Shape3};
use crate::synth::mix_seed;

/// Probability of drawing each slice along axis 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceDistribution {
    areas: Vec<usize>,
    total: usize,
    probs: Vec<f64>,
}

impl SliceDistribution {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn areas(&self) -> &[usize] {
        &self.areas
    }

    /// Draws a slice index; sampling is exact over integer areas.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let mut r = rng.random_range(0..self.total);
        for (k, &a) in self.areas.iter().enumerate() {
            if r < a {
                return k;
            }
            r -= a;
        }
        unreachable!("r < total")
    }
}

pub fn slice_area_distribution(mask: &Mask3D) -> Result<SliceDistribution> {
    let areas: Vec<usize> = (0..mask.shape().d()).map(|z| mask.slice_area(z)).collect();
    let total: usize = areas.iter().sum();
    if total == 0 {
        return Err(Error::EmptyMask);
    }
    let probs = areas.iter().map(|&a| a as f64 / total as f64).collect();
    Ok(SliceDistribution { areas, total, probs })
}

/// Pixels `(row, col)` of one connected component, in discovery order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    pub pixels: Vec<(usize, usize)>,
}

impl Component {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.pixels.contains(&(row, col))
    }
}

/// 4-connected components of a row-major `height × width` binary slice,
/// labelled in scanline order of each component's first pixel.
pub fn connected_components_2d(slice: &[u8], height: usize, width: usize) -> Vec<Component> {
    assert_eq!(slice.len(), height * width, "slice size");
    let mut seen = vec![false; slice.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..slice.len() {
        if slice[start] == 0 || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut pixels = Vec::new();
        while let Some(i) = stack.pop() {
            let (r, c) = (i / width, i % width);
            pixels.push((r, c));
            let mut visit = |j: usize| {
                if slice[j] != 0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if r > 0 {
                visit(i - width);
            }
            if r + 1 < height {
                visit(i + width);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < width {
                visit(i + 1);
            }
        }
        out.push(Component { pixels });
    }
    out
}

/// Inclusive 2D box on slice `slice_index` of axis 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox2D {
    pub slice_index: usize,
    pub row_min: usize,
    pub row_max: usize,
    pub col_min: usize,
    pub col_max: usize,
}

impl BoundingBox2D {
    pub fn area(&self) -> usize {
        (self.row_max - self.row_min + 1) * (self.col_max - self.col_min + 1)
    }
}

pub fn tight_bbox(slice_index: usize, component: &Component) -> Result<BoundingBox2D> {
    let (&(r0, c0), rest) = component.pixels.split_first().ok_or(Error::EmptyComponent)?;
    let mut b = BoundingBox2D { slice_index, row_min: r0, row_max: r0, col_min: c0, col_max: c0 };
    for &(r, c) in rest {
        b.row_min = b.row_min.min(r);
        b.row_max = b.row_max.max(r);
        b.col_min = b.col_min.min(c);
        b.col_max = b.col_max.max(c);
    }
    Ok(b)
}

/// Adds pre-drawn offsets `(row_min, row_max, col_min, col_max)` after
/// rounding, clamps to the `height × width` slice and reorders inverted pairs.
pub fn jitter_bbox_with(b: BoundingBox2D, draws: [f64; 4], height: usize, width: usize) -> BoundingBox2D {
    let shift = |v: usize, g: f64, hi: usize| -> usize {
        (v as f64 + g.round()).clamp(0.0, (hi - 1) as f64) as usize
    };
    let r0 = shift(b.row_min, draws[0], height);
    let r1 = shift(b.row_max, draws[1], height);
    let c0 = shift(b.col_min, draws[2], width);
    let c1 = shift(b.col_max, draws[3], width);
    BoundingBox2D {
        slice_index: b.slice_index,
        row_min: r0.min(r1),
        row_max: r0.max(r1),
        col_min: c0.min(c1),
        col_max: c0.max(c1),
    }
}

pub fn jitter_bbox<R: Rng + ?Sized>(b: BoundingBox2D, rng: &mut R, height: usize, width: usize) -> BoundingBox2D {
    let draws: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
    jitter_bbox_with(b, draws, height, width)
}

/// Sets every voxel of the box to 1. Boxes outside the grid are clipped.
pub fn render_box<T: Scalar>(channel: &mut PromptChannel<T>, b: &BoundingBox2D) {
    let s = channel.shape();
    if b.slice_index >= s.d() || b.row_min >= s.h() || b.col_min >= s.w() {
        return;
    }
    for r in b.row_min..=b.row_max.min(s.h() - 1) {
        for c in b.col_min..=b.col_max.min(s.w() - 1) {
            channel.raise(s.index(b.slice_index, r, c), T::one());
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointPrompt {
    pub slice_index: usize,
    pub row: usize,
    pub col: usize,
    pub radius_voxels: f64,
}

pub fn sample_point<R: Rng + ?Sized>(
    slice_index: usize,
    component: &Component,
    radius_voxels: f64,
    rng: &mut R,
) -> Result<PointPrompt> {
    if component.is_empty() {
        return Err(Error::EmptyComponent);
    }
    let (row, col) = component.pixels[rng.random_range(0..component.len())];
    Ok(PointPrompt { slice_index, row, col, radius_voxels })
}

/// Soft sphere: voxels strictly inside radius `R` get `max(current, 1 - d/R)`.
pub fn render_point<T: Scalar>(channel: &mut PromptChannel<T>, p: &PointPrompt) {
    let s = channel.shape();
    let r = p.radius_voxels;
    if !(r > 0.0) {
        return;
    }
    let reach = r.ceil() as isize;
    let centre = [p.slice_index as isize, p.row as isize, p.col as isize];
    for dz in -reach..=reach {
        let z = centre[0] + dz;
        if z < 0 || z >= s.d() as isize {
            continue;
        }
        for dy in -reach..=reach {
            let y = centre[1] + dy;
            if y < 0 || y >= s.h() as isize {
                continue;
            }
            for dx in -reach..=reach {
                let x = centre[2] + dx;
                if x < 0 || x >= s.w() as isize {
                    continue;
                }
                let d = ((dz * dz + dy * dy + dx * dx) as f64).sqrt();
                if d < r {
                    let idx = s.index(z as usize, y as usize, x as usize);
                    channel.raise(idx, T::from_f64_lossy(1.0 - d / r));
                }
            }
        }
    }
}

/// Sphere radius used when none is configured: 4 voxels at a 32-voxel edge,
/// scaled with the mean edge length.
pub fn default_point_radius(shape: Shape3) -> f64 {
    let mean_edge = (shape.d() + shape.h() + shape.w()) as f64 / 3.0;
    (4.0 * mean_edge / 32.0).max(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSpec {
    pub prompt_type: PromptType,
    /// Slices drawn per image (with replacement).
    pub prompts_per_image: usize,
    #[serde(default = "default_true")]
    pub jitter_enabled: bool,
    #[serde(default)]
    pub rng_seed: u64,
    /// Point-sphere radius in voxels; defaults to [`default_point_radius`].
    #[serde(default)]
    pub point_radius: Option<f64>,
}

fn default_true() -> bool {
    true
}

impl PromptSpec {
    pub fn new(prompt_type: PromptType, prompts_per_image: usize, seed: u64) -> Self {
        PromptSpec { prompt_type, prompts_per_image, jitter_enabled: true, rng_seed: seed, point_radius: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompts_per_image < 1 {
            return Err(Error::config("prompts_per_image", "must be at least 1"));
        }
        if let Some(r) = self.point_radius {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::config("point_radius", "must be positive"));
            }
        }
        Ok(())
    }
}

/// Simulates prompts seeded from `spec.rng_seed`. Prompt `k` draws from its
/// own stream, so the prompts for `P` are a prefix of those for any larger `P`.
pub fn simulate_prompts<T: Scalar>(mask: &Mask3D, spec: &PromptSpec) -> Result<PromptChannel<T>> {
    spec.validate()?;
    let dist = slice_area_distribution(mask)?;
    let mut channel = PromptChannel::zeros(mask.shape());
    for k in 0..spec.prompts_per_image {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.rng_seed, k as u64));
        add_prompt(&mut channel, mask, &dist, spec, &mut rng)?;
    }
    Ok(channel)
}

/// Same as [`simulate_prompts`] but drawing every prompt from one caller-owned stream.
pub fn simulate_prompts_with<T: Scalar, R: Rng + ?Sized>(
    mask: &Mask3D,
    spec: &PromptSpec,
    rng: &mut R,
) -> Result<PromptChannel<T>> {
    spec.validate()?;
    let dist = slice_area_distribution(mask)?;
    let mut channel = PromptChannel::zeros(mask.shape());
    for _ in 0..spec.prompts_per_image {
        add_prompt(&mut channel, mask, &dist, spec, rng)?;
    }
    Ok(channel)
}

fn add_prompt<T: Scalar, R: Rng + ?Sized>(
    channel: &mut PromptChannel<T>,
    mask: &Mask3D,
    dist: &SliceDistribution,
    spec: &PromptSpec,
    rng: &mut R,
) -> Result<()> {
    let shape = mask.shape();
    let z = dist.sample(rng);
    for comp in connected_components_2d(mask.slice(z), shape.h(), shape.w()) {
        match spec.prompt_type {
            PromptType::Box => {
                let mut b = tight_bbox(z, &comp)?;
                if spec.jitter_enabled {
                    b = jitter_bbox(b, rng, shape.h(), shape.w());
                }
                render_box(channel, &b);
            }
            PromptType::Point => {
                let radius = spec.point_radius.unwrap_or_else(|| default_point_radius(shape));
                let p = sample_point(z, &comp, radius, rng)?;
                render_point(channel, &p);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn slice_from(rows: &[&str]) -> (Vec<u8>, usize, usize) {
        let h = rows.len();
        let w = rows[0].len();
        let data = rows.iter().flat_map(|r| r.bytes().map(|b| u8::from(b == b'#'))).collect();
        (data, h, w)
    }

    #[test]
    fn distribution_examples() {
        let s = Shape3([4, 2, 2]);
        let mut m = Mask3D::zeros(s);
        m.set(3, 1, 0, true);
        assert_eq!(slice_area_distribution(&m).unwrap().probs(), &[0.0, 0.0, 0.0, 1.0]);

        // areas [0, 2, 6, 0]
        let mut m = Mask3D::zeros(Shape3([4, 2, 4]));
        m.set(1, 0, 0, true);
        m.set(1, 1, 3, true);
        for i in 0..6 {
            m.set(2, i / 4, i % 4, true);
        }
        assert_eq!(slice_area_distribution(&m).unwrap().probs(), &[0.0, 0.25, 0.75, 0.0]);

        let full = Mask3D::new(Shape3([5, 2, 2]), vec![1; 20]).unwrap();
        assert!(slice_area_distribution(&full).unwrap().probs().iter().all(|&p| p == 0.2));

        assert!(matches!(slice_area_distribution(&Mask3D::zeros(s)), Err(Error::EmptyMask)));
    }

    #[test]
    fn components_examples() {
        let (s, h, w) = slice_from(&["....", ".##.", ".##.", "...."]);
        assert_eq!(connected_components_2d(&s, h, w).len(), 1);
        let (s, h, w) = slice_from(&["#.", ".#"]);
        let comps = connected_components_2d(&s, h, w);
        assert_eq!(comps.len(), 2);
        assert_eq!(comps[0].pixels, vec![(0, 0)]);
        assert_eq!(comps[1].pixels, vec![(1, 1)]);
        assert!(connected_components_2d(&[0; 6], 2, 3).is_empty());
    }

    #[test]
    fn components_scanline_order() {
        let (s, h, w) = slice_from(&["..#", "#..", "#.#"]);
        let comps = connected_components_2d(&s, h, w);
        let firsts: Vec<_> = comps.iter().map(|c| c.pixels[0]).collect();
        assert_eq!(firsts, vec![(0, 2), (1, 0), (2, 2)]);
    }

    #[test]
    fn bbox_examples() {
        let b = tight_bbox(0, &Component { pixels: vec![(5, 7)] }).unwrap();
        assert_eq!((b.row_min, b.row_max, b.col_min, b.col_max), (5, 5, 7, 7));
        let b = tight_bbox(0, &Component { pixels: vec![(2, 3), (4, 5)] }).unwrap();
        assert_eq!((b.row_min, b.row_max, b.col_min, b.col_max), (2, 4, 3, 5));
        let (s, h, w) = slice_from(&["###", "###"]);
        let b = tight_bbox(0, &connected_components_2d(&s, h, w)[0]).unwrap();
        assert_eq!((b.row_min, b.row_max, b.col_min, b.col_max), (0, 1, 0, 2));
        assert!(tight_bbox(0, &Component { pixels: vec![] }).is_err());
    }

    #[test]
    fn jitter_examples() {
        let b = BoundingBox2D { slice_index: 1, row_min: 2, row_max: 4, col_min: 3, col_max: 5 };
        assert_eq!(jitter_bbox_with(b, [0.2; 4], 10, 10), b);
        let j = jitter_bbox_with(b, [1.6, -0.7, 0.4, 1.2], 10, 10);
        assert_eq!((j.row_min, j.row_max, j.col_min, j.col_max), (3, 4, 3, 6));
        let j = jitter_bbox_with(b, [-5.0, 0.0, 0.0, 9.0], 10, 10);
        assert_eq!((j.row_min, j.col_max), (0, 9));
    }

    #[test]
    fn box_rendering() {
        let s = Shape3([3, 8, 8]);
        let b = BoundingBox2D { slice_index: 1, row_min: 2, row_max: 4, col_min: 3, col_max: 5 };
        let mut ch = PromptChannel::<f32>::zeros(s);
        render_box(&mut ch, &b);
        // (4 - 2 + 1) * (5 - 3 + 1)
        assert_eq!(ch.data().iter().filter(|&&v| v == 1.0).count(), 9);
        assert_eq!(b.area(), 9);
        assert!(ch.data()[..64].iter().all(|&v| v == 0.0));
        let once = ch.clone();
        render_box(&mut ch, &b);
        assert_eq!(ch, once);
        let b2 = BoundingBox2D { slice_index: 1, row_min: 6, row_max: 7, col_min: 0, col_max: 0 };
        render_box(&mut ch, &b2);
        assert_eq!(ch.data().iter().filter(|&&v| v == 1.0).count(), 9 + b2.area());
    }

    #[test]
    fn point_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let single = Component { pixels: vec![(4, 4)] };
        for _ in 0..10 {
            let p = sample_point(0, &single, 2.0, &mut rng).unwrap();
            assert_eq!((p.row, p.col), (4, 4));
        }
        let pair = Component { pixels: vec![(0, 0), (0, 1)] };
        let n = 10_000;
        let hits = (0..n).filter(|_| sample_point(0, &pair, 2.0, &mut rng).unwrap().col == 0).count();
        let f = hits as f64 / n as f64;
        assert!((f - 0.5).abs() <= 0.02, "frequency {f}");
        assert!(sample_point(0, &Component { pixels: vec![] }, 2.0, &mut rng).is_err());
    }

    #[test]
    fn point_rendering_profile() {
        let s = Shape3([17, 17, 17]);
        let r = 4.0;
        let mut ch = PromptChannel::<f64>::zeros(s);
        render_point(&mut ch, &PointPrompt { slice_index: 8, row: 8, col: 8, radius_voxels: r });
        let v = ch.volume();
        assert_eq!(v.get(8, 8, 8), 1.0);
        assert_eq!(v.get(8, 8, 12), 0.0);
        assert_eq!(v.get(8, 8, 10), 0.5);
        assert_eq!(v.get(6, 8, 8), 0.5);
        assert!(v.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn simulate_single_component_box() {
        let s = Shape3([4, 8, 8]);
        let mut m = Mask3D::zeros(s);
        for r in 2..5 {
            for c in 1..4 {
                m.set(2, r, c, true);
            }
        }
        let mut spec = PromptSpec::new(PromptType::Box, 1, 11);
        spec.jitter_enabled = false;
        let ch: PromptChannel<f32> = simulate_prompts(&m, &spec).unwrap();
        assert_eq!(ch.volume().threshold(0.5), m);
    }

    #[test]
    fn simulate_point_on_single_voxel_slices() {
        let s = Shape3([6, 9, 9]);
        let mut m = Mask3D::zeros(s);
        m.set(3, 4, 5, true);
        let spec = PromptSpec { point_radius: Some(2.0), ..PromptSpec::new(PromptType::Point, 1, 5) };
        let ch: PromptChannel<f64> = simulate_prompts(&m, &spec).unwrap();
        let ones: Vec<usize> = (0..s.len()).filter(|&i| ch.data()[i] == 1.0).collect();
        assert_eq!(ones, vec![s.index(3, 4, 5)]);
        let mut expect = PromptChannel::<f64>::zeros(s);
        render_point(&mut expect, &PointPrompt { slice_index: 3, row: 4, col: 5, radius_voxels: 2.0 });
        assert_eq!(ch, expect);
    }

    #[test]
    fn simulate_rejects_empty_and_bad_spec() {
        let s = Shape3([2, 2, 2]);
        let spec = PromptSpec::new(PromptType::Box, 1, 0);
        assert!(matches!(simulate_prompts::<f32>(&Mask3D::zeros(s), &spec), Err(Error::EmptyMask)));
        let mut m = Mask3D::zeros(s);
        m.set(0, 0, 0, true);
        let bad = PromptSpec { prompts_per_image: 0, ..spec };
        assert!(simulate_prompts::<f32>(&m, &bad).is_err());
    }

    fn random_mask(seed: u64, shape: Shape3, density: f64) -> Mask3D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Mask3D::zeros(shape);
        for i in 0..shape.len() {
            let (z, y, x) = shape.coords(i);
            m.set(z, y, x, rng.random_bool(density));
        }
        if m.is_empty() {
            m.set(0, 0, 0, true);
        }
        m
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn simulation_is_deterministic_and_in_range(seed in any::<u64>(), p in 1usize..4, point in any::<bool>()) {
            let m = random_mask(seed, Shape3([5, 6, 7]), 0.2);
            let ty = if point { PromptType::Point } else { PromptType::Box };
            let spec = PromptSpec::new(ty, p, seed ^ 0x55);
            let a: PromptChannel<f32> = simulate_prompts(&m, &spec).unwrap();
            let b: PromptChannel<f32> = simulate_prompts(&m, &spec).unwrap();
            prop_assert_eq!(&a, &b);
            if point {
                prop_assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            } else {
                prop_assert!(a.data().iter().all(|&v| v == 0.0 || v == 1.0));
            }
        }

        #[test]
        fn more_prompts_extend_fewer(seed in any::<u64>(), p in 1usize..4, point in any::<bool>()) {
            let m = random_mask(seed, Shape3([5, 6, 7]), 0.2);
            let ty = if point { PromptType::Point } else { PromptType::Box };
            let few: PromptChannel<f64> = simulate_prompts(&m, &PromptSpec::new(ty, p, seed)).unwrap();
            let more: PromptChannel<f64> = simulate_prompts(&m, &PromptSpec::new(ty, p + 2, seed)).unwrap();
            prop_assert!(few.data().iter().zip(more.data()).all(|(a, b)| a <= b));
        }

        #[test]
        fn distribution_support_matches_areas(seed in any::<u64>()) {
            let m = random_mask(seed, Shape3([6, 3, 3]), 0.1);
            let d = slice_area_distribution(&m).unwrap();
            prop_assert!((d.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            for z in 0..6 {
                prop_assert_eq!(d.probs()[z] == 0.0, m.slice_area(z) == 0);
            }
        }

        #[test]
        fn point_profile_monotone_along_rays(theta in 0.0f64..std::f64::consts::PI, phi in 0.0f64..std::f64::consts::TAU, r in 2.0f64..7.0) {
            let s = Shape3([21, 21, 21]);
            let mut ch = PromptChannel::<f64>::zeros(s);
            render_point(&mut ch, &PointPrompt { slice_index: 10, row: 10, col: 10, radius_voxels: r });
            let dir = [theta.cos(), theta.sin() * phi.cos(), theta.sin() * phi.sin()];
            let mut visited: Vec<(f64, f64)> = (0..=40)
                .map(|step| {
                    let t = step as f64 * 0.25;
                    let at = |k: usize| (10.0 + dir[k] * t).round() as usize;
                    let d = (0..3).map(|k| (at(k) as f64 - 10.0).powi(2)).sum::<f64>().sqrt();
                    (d, ch.volume().get(at(0), at(1), at(2)))
                })
                .collect();
            visited.sort_by(|a, b| a.0.total_cmp(&b.0));
            for w in visited.windows(2) {
                prop_assert!(w[1].1 <= w[0].1);
            }
        }
    }
}
