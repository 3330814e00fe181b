//! Volumetric data model: dense images, binary masks, prompt channels and
//! context sets, plus the preprocessing helpers and the Dice metric.
//!
//! All grids are row-major over `(D, H, W)`; axis 0 is the slicing axis used
//! when prompts are placed on 2D slices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Extent of a grid along `(D, H, W)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3(pub [usize; 3]);

impl Shape3 {
    pub fn new(d: usize, h: usize, w: usize) -> Result<Self> {
        let s = Shape3([d, h, w]);
        s.validate()?;
        Ok(s)
    }

    pub fn cube(n: usize) -> Result<Self> {
        Self::new(n, n, n)
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.contains(&0) {
            return Err(Error::InvalidShape(self.0));
        }
        Ok(())
    }

    pub fn d(&self) -> usize {
        self.0[0]
    }
    pub fn h(&self) -> usize {
        self.0[1]
    }
    pub fn w(&self) -> usize {
        self.0[2]
    }

    pub fn len(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Voxels per slice along axis 0.
    pub fn slice_len(&self) -> usize {
        self.0[1] * self.0[2]
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.0[1] + y) * self.0[2] + x
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let x = idx % self.0[2];
        let y = (idx / self.0[2]) % self.0[1];
        (idx / self.slice_len(), y, x)
    }

    fn ensure_same(&self, other: &Shape3) -> Result<()> {
        if self != other {
            return Err(Error::ShapeMismatch { expected: self.0, actual: other.0 });
        }
        Ok(())
    }
}

/// Dense scalar image.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D<T> {
    shape: Shape3,
    data: Vec<T>,
}

impl<T: Scalar> Volume3D<T> {
    pub fn new(shape: Shape3, data: Vec<T>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.len() {
            return Err(Error::LengthMismatch { shape: shape.0, len: data.len() });
        }
        Ok(Volume3D { shape, data })
    }

    pub fn filled(shape: Shape3, value: T) -> Self {
        Volume3D { shape, data: vec![value; shape.len()] }
    }

    pub fn zeros(shape: Shape3) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> T {
        self.data[self.shape.index(z, y, x)]
    }

    /// Rejects the first non-finite voxel.
    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite { index, value: self.data[index].as_f64() }),
            None => Ok(()),
        }
    }

    pub fn min_max(&self) -> (T, T) {
        self.data.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Affine map of the intensity range onto `[0, 1]`. Constant volumes map to
    /// all zeros.
    pub fn minmax_normalize(&self) -> Result<Self> {
        self.check_finite()?;
        let (lo, hi) = self.min_max();
        let range = hi - lo;
        let data = if range > T::zero() {
            self.data.iter().map(|&v| ((v - lo) / range).min(T::one()).max(T::zero())).collect()
        } else {
            vec![T::zero(); self.data.len()]
        };
        Ok(Volume3D { shape: self.shape, data })
    }

    pub fn cast<U: Scalar>(&self) -> Volume3D<U> {
        Volume3D {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    /// Binarize at `threshold` (values strictly above become foreground).
    pub fn threshold(&self, threshold: T) -> Mask3D {
        Mask3D {
            shape: self.shape,
            data: self.data.iter().map(|&v| u8::from(v > threshold)).collect(),
        }
    }
}

/// Binary segmentation mask with values in `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask3D {
    shape: Shape3,
    data: Vec<u8>,
}

impl Mask3D {
    pub fn new(shape: Shape3, data: Vec<u8>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.len() {
            return Err(Error::LengthMismatch { shape: shape.0, len: data.len() });
        }
        if let Some(index) = data.iter().position(|&v| v > 1) {
            return Err(Error::NonBinary { index, value: data[index] });
        }
        Ok(Mask3D { shape, data })
    }

    pub fn from_bools(shape: Shape3, bits: &[bool]) -> Result<Self> {
        Self::new(shape, bits.iter().map(|&b| u8::from(b)).collect())
    }

    pub fn zeros(shape: Shape3) -> Self {
        Mask3D { shape, data: vec![0; shape.len()] }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> bool {
        self.data[self.shape.index(z, y, x)] != 0
    }

    #[inline]
    pub fn set(&mut self, z: usize, y: usize, x: usize, on: bool) {
        let i = self.shape.index(z, y, x);
        self.data[i] = u8::from(on);
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    /// Foreground area of slice `z` along axis 0.
    pub fn slice_area(&self, z: usize) -> usize {
        let n = self.shape.slice_len();
        self.data[z * n..(z + 1) * n].iter().map(|&v| v as usize).sum()
    }

    /// Borrow slice `z` as a row-major `H × W` binary image.
    pub fn slice(&self, z: usize) -> &[u8] {
        let n = self.shape.slice_len();
        &self.data[z * n..(z + 1) * n]
    }

    pub fn to_volume<T: Scalar>(&self) -> Volume3D<T> {
        Volume3D {
            shape: self.shape,
            data: self.data.iter().map(|&v| if v != 0 { T::one() } else { T::zero() }).collect(),
        }
    }
}

/// Prompt selector; box and point models are trained and stored separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptType {
    Box,
    Point,
}

impl PromptType {
    pub fn as_str(&self) -> &'static str {
        match self {
            PromptType::Box => "box",
            PromptType::Point => "point",
        }
    }
}

impl std::fmt::Display for PromptType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PromptType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "box" => Ok(PromptType::Box),
            "point" => Ok(PromptType::Point),
            other => Err(Error::config("type", format!("expected `box` or `point`, got `{other}`"))),
        }
    }
}

/// Rendered weak prompts; values in `[0, 1]`, zero outside prompt regions.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptChannel<T>(Volume3D<T>);

impl<T: Scalar> PromptChannel<T> {
    pub fn zeros(shape: Shape3) -> Self {
        PromptChannel(Volume3D::zeros(shape))
    }

    /// Wraps a volume after checking every value lies in `[0, 1]`.
    pub fn from_volume(v: Volume3D<T>) -> Result<Self> {
        if let Some(index) = v.data().iter().position(|&x| !(x >= T::zero() && x <= T::one())) {
            return Err(Error::NonFinite { index, value: v.data()[index].as_f64() });
        }
        Ok(PromptChannel(v))
    }

    pub fn shape(&self) -> Shape3 {
        self.0.shape()
    }

    pub fn volume(&self) -> &Volume3D<T> {
        &self.0
    }

    pub fn into_volume(self) -> Volume3D<T> {
        self.0
    }

    pub fn data(&self) -> &[T] {
        self.0.data()
    }

    /// Max-composes `value` into voxel `idx`.
    #[inline]
    pub(crate) fn raise(&mut self, idx: usize, value: T) {
        let slot = &mut self.0.data[idx];
        if value > *slot {
            *slot = value;
        }
    }

    pub fn cast<U: Scalar>(&self) -> PromptChannel<U> {
        PromptChannel(self.0.cast())
    }
}

/// Ordered image/prompt pairs that condition a prediction.
#[derive(Debug, Clone)]
pub struct ContextSet<T> {
    pairs: Vec<(Volume3D<T>, PromptChannel<T>)>,
    prompt_type: PromptType,
}

impl<T: Scalar> ContextSet<T> {
    pub fn new(pairs: Vec<(Volume3D<T>, PromptChannel<T>)>, prompt_type: PromptType) -> Result<Self> {
        let first = pairs.first().ok_or(Error::EmptyContext)?.0.shape();
        for (x, u) in &pairs {
            first.ensure_same(&x.shape())?;
            first.ensure_same(&u.shape())?;
        }
        Ok(ContextSet { pairs, prompt_type })
    }

    pub fn pairs(&self) -> &[(Volume3D<T>, PromptChannel<T>)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn shape(&self) -> Shape3 {
        self.pairs[0].0.shape()
    }

    pub fn prompt_type(&self) -> PromptType {
        self.prompt_type
    }

    /// Reorders the pairs by `order` (a permutation of `0..len`).
    pub fn permuted(&self, order: &[usize]) -> Self {
        ContextSet {
            pairs: order.iter().map(|&i| self.pairs[i].clone()).collect(),
            prompt_type: self.prompt_type,
        }
    }
}

/// Resampling onto a new grid.
pub trait Resize: Sized {
    fn resize(&self, target: Shape3) -> Result<Self>;
}

/// Half-voxel-centred source coordinate for destination index `dst`.
fn source_coord(dst: usize, src_len: usize, dst_len: usize) -> f64 {
    let scale = src_len as f64 / dst_len as f64;
    ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64)
}

fn nearest_index(dst: usize, src_len: usize, dst_len: usize) -> usize {
    (((dst as f64 + 0.5) * src_len as f64 / dst_len as f64).floor() as usize).min(src_len - 1)
}

/// Trilinear interpolation.
impl<T: Scalar> Resize for Volume3D<T> {
    fn resize(&self, target: Shape3) -> Result<Self> {
        target.validate()?;
        if target == self.shape {
            return Ok(self.clone());
        }
        let src = self.shape;
        let axis = |a: usize| -> Vec<(usize, usize, f64)> {
            (0..target.0[a])
                .map(|i| {
                    let s = source_coord(i, src.0[a], target.0[a]);
                    let lo = s.floor() as usize;
                    let hi = (lo + 1).min(src.0[a] - 1);
                    (lo, hi, s - lo as f64)
                })
                .collect()
        };
        let (az, ay, ax) = (axis(0), axis(1), axis(2));
        let mut data = Vec::with_capacity(target.len());
        for &(z0, z1, tz) in &az {
            for &(y0, y1, ty) in &ay {
                for &(x0, x1, tx) in &ax {
                    let g = |z, y, x| self.get(z, y, x).as_f64();
                    let c00 = g(z0, y0, x0) * (1.0 - tx) + g(z0, y0, x1) * tx;
                    let c01 = g(z0, y1, x0) * (1.0 - tx) + g(z0, y1, x1) * tx;
                    let c10 = g(z1, y0, x0) * (1.0 - tx) + g(z1, y0, x1) * tx;
                    let c11 = g(z1, y1, x0) * (1.0 - tx) + g(z1, y1, x1) * tx;
                    let c0 = c00 * (1.0 - ty) + c01 * ty;
                    let c1 = c10 * (1.0 - ty) + c11 * ty;
                    data.push(T::from_f64_lossy(c0 * (1.0 - tz) + c1 * tz));
                }
            }
        }
        Ok(Volume3D { shape: target, data })
    }
}

/// Nearest-neighbour, so the output stays binary.
impl Resize for Mask3D {
    fn resize(&self, target: Shape3) -> Result<Self> {
        target.validate()?;
        if target == self.shape {
            return Ok(self.clone());
        }
        let src = self.shape;
        let idx = |a: usize| -> Vec<usize> {
            (0..target.0[a]).map(|i| nearest_index(i, src.0[a], target.0[a])).collect()
        };
        let (iz, iy, ix) = (idx(0), idx(1), idx(2));
        let mut data = Vec::with_capacity(target.len());
        for &z in &iz {
            for &y in &iy {
                for &x in &ix {
                    data.push(self.data[src.index(z, y, x)]);
                }
            }
        }
        Ok(Mask3D { shape: target, data })
    }
}

/// Dice overlap `2|A∩B| / (|A|+|B|)`; two empty masks score 1.
pub fn dice(a: &Mask3D, b: &Mask3D) -> Result<f64> {
    a.shape.ensure_same(&b.shape)?;
    let (mut inter, mut sa, mut sb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += (x & y) as usize;
        sa += x as usize;
        sb += y as usize;
    }
    if sa + sb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (sa + sb) as f64)
}
