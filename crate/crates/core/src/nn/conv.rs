//! Direct same-padded 3D convolution.
//!
//! Each input channel is copied once into a zero-padded buffer. In that
//! layout every kernel tap is a constant offset, so a tap's contribution to a
//! run of consecutive outputs reads a contiguous run of inputs. Outputs are
//! computed on the padded grid (halo results are discarded), in register
//! tiles of `TILE` voxels × `CO` output channels.
//!
//! The input gradient is the same kernel applied to the zero-haloed output
//! gradient with flipped, transposed weights.

use super::tensor::Tensor;
use crate::scalar::Scalar;

const TILE: usize = 32;
const CO: usize = 4;
/// Voxels per block in the weight-gradient reduction.
const CHUNK: usize = 1024;

/// Padded-grid geometry for one volume size and kernel size.
struct Grid {
    dims: [usize; 3],
    pad: usize,
    hp: usize,
    wp: usize,
    /// First padded index that holds an interior voxel.
    q_lo: usize,
    /// Computed range length, a multiple of `TILE` covering every interior voxel.
    q_len: usize,
    /// Per-channel buffer length; leaves room for every tap offset.
    stride: usize,
    offsets: Vec<isize>,
}

impl Grid {
    fn new(dims: [usize; 3], ksize: usize) -> Self {
        let pad = ksize / 2;
        let [d, h, w] = dims;
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        let plane = hp * wp;
        let q_lo = pad * plane + pad * wp + pad;
        let q_hi = (d - 1 + pad) * plane + (h - 1 + pad) * wp + (w - 1 + pad) + 1;
        let q_len = (q_hi - q_lo).div_ceil(TILE) * TILE;
        let mut offsets = Vec::with_capacity(ksize.pow(3));
        for kz in 0..ksize {
            for ky in 0..ksize {
                for kx in 0..ksize {
                    let o = (kz as isize - pad as isize) * plane as isize
                        + (ky as isize - pad as isize) * wp as isize
                        + (kx as isize - pad as isize);
                    offsets.push(o);
                }
            }
        }
        Grid { dims, pad, hp, wp, q_lo, q_len, stride: 2 * q_lo + q_len, offsets }
    }

    fn row_start(&self, z: usize, y: usize) -> usize {
        ((z + self.pad) * self.hp + y + self.pad) * self.wp + self.pad
    }

    /// Copies `x` into zero-padded per-channel buffers.
    fn pad<T: Scalar>(&self, x: &Tensor<T>) -> Vec<T> {
        let [d, h, w] = self.dims;
        let mut out = vec![T::zero(); x.channels * self.stride];
        for c in 0..x.channels {
            let src = x.channel(c);
            let dst = &mut out[c * self.stride..(c + 1) * self.stride];
            for z in 0..d {
                for y in 0..h {
                    let s = (z * h + y) * w;
                    let r = self.row_start(z, y);
                    dst[r..r + w].copy_from_slice(&src[s..s + w]);
                }
            }
        }
        out
    }

    /// Extracts interior voxels, adding them onto `out`.
    fn unpad_add<T: Scalar>(&self, padded: &[T], out: &mut Tensor<T>) {
        let [d, h, w] = self.dims;
        let n = d * h * w;
        for c in 0..out.channels {
            let src = &padded[c * self.stride..(c + 1) * self.stride];
            let dst = &mut out.data[c * n..(c + 1) * n];
            for z in 0..d {
                for y in 0..h {
                    let s = (z * h + y) * w;
                    let r = self.row_start(z, y);
                    for (o, &v) in dst[s..s + w].iter_mut().zip(&src[r..r + w]) {
                        *o = *o + v;
                    }
                }
            }
        }
    }
}

#[inline(always)]
fn madd<T: Scalar, const FMA: bool>(acc: T, a: T, b: T) -> T {
    if FMA {
        a.mul_add(b, acc)
    } else {
        acc + a * b
    }
}

/// `dst[co][q] = Σ_ci Σ_t wt[ci][t][co] · src[ci][q + off_t]` over the grid's
/// computed range. `wt` is laid out `[cin][taps][cout]`.
#[inline(always)]
fn shifted_conv_impl<T: Scalar, const FMA: bool>(src: &[T], cin: usize, g: &Grid, wt: &[T], cout: usize, dst: &mut [T]) {
    let taps = g.offsets.len();
    let full = cout / CO * CO;
    let mut q = g.q_lo;
    while q < g.q_lo + g.q_len {
        let mut co0 = 0;
        while co0 < full {
            let mut acc = [[T::zero(); TILE]; CO];
            for ci in 0..cin {
                let xs = &src[ci * g.stride..(ci + 1) * g.stride];
                for (t, &off) in g.offsets.iter().enumerate() {
                    let b = (q as isize + off) as usize;
                    let xt: &[T; TILE] = xs[b..b + TILE].try_into().expect("tile in bounds");
                    let ws: &[T; CO] = wt[(ci * taps + t) * cout + co0..][..CO].try_into().expect("weights in bounds");
                    for c in 0..CO {
                        for j in 0..TILE {
                            acc[c][j] = madd::<T, FMA>(acc[c][j], ws[c], xt[j]);
                        }
                    }
                }
            }
            for (c, a) in acc.iter().enumerate() {
                dst[(co0 + c) * g.stride + q..][..TILE].copy_from_slice(a);
            }
            co0 += CO;
        }
        for co in full..cout {
            let mut acc = [T::zero(); TILE];
            for ci in 0..cin {
                let xs = &src[ci * g.stride..(ci + 1) * g.stride];
                for (t, &off) in g.offsets.iter().enumerate() {
                    let b = (q as isize + off) as usize;
                    let xt: &[T; TILE] = xs[b..b + TILE].try_into().expect("tile in bounds");
                    let wc = wt[(ci * taps + t) * cout + co];
                    for j in 0..TILE {
                        acc[j] = madd::<T, FMA>(acc[j], wc, xt[j]);
                    }
                }
            }
            dst[co * g.stride + q..][..TILE].copy_from_slice(&acc);
        }
        q += TILE;
    }
}

/// `dw[co][ci][t] += Σ_q dy[co][q] · x[ci][q + off_t]`; `dy` must be zero
/// outside interior voxels.
#[inline(always)]
fn weight_grad_impl<T: Scalar, const FMA: bool>(x: &[T], cin: usize, dy: &[T], cout: usize, g: &Grid, dw: &mut [T]) {
    let taps = g.offsets.len();
    let full = cout / CO * CO;
    let end = g.q_lo + g.q_len;
    let mut c0 = g.q_lo;
    while c0 < end {
        let c1 = (c0 + CHUNK).min(end);
        for ci in 0..cin {
            let xs = &x[ci * g.stride..(ci + 1) * g.stride];
            for (t, &off) in g.offsets.iter().enumerate() {
                let mut co0 = 0;
                while co0 < cout {
                    let width = if co0 < full { CO } else { cout - full };
                    let mut acc = [[T::zero(); TILE]; CO];
                    let mut q = c0;
                    while q < c1 {
                        let b = (q as isize + off) as usize;
                        let xt: &[T; TILE] = xs[b..b + TILE].try_into().expect("tile in bounds");
                        if width == CO {
                            for c in 0..CO {
                                let dt: &[T; TILE] = dy[(co0 + c) * g.stride + q..][..TILE].try_into().expect("tile in bounds");
                                for j in 0..TILE {
                                    acc[c][j] = madd::<T, FMA>(acc[c][j], dt[j], xt[j]);
                                }
                            }
                        } else {
                            for c in 0..width {
                                let dt: &[T; TILE] = dy[(co0 + c) * g.stride + q..][..TILE].try_into().expect("tile in bounds");
                                for j in 0..TILE {
                                    acc[c][j] = madd::<T, FMA>(acc[c][j], dt[j], xt[j]);
                                }
                            }
                        }
                        q += TILE;
                    }
                    for (c, a) in acc.iter().take(width).enumerate() {
                        let i = ((co0 + c) * cin + ci) * taps + t;
                        dw[i] = dw[i] + a.iter().copied().sum::<T>();
                    }
                    co0 += width;
                }
            }
        }
        c0 = c1;
    }
}

macro_rules! dispatch {
    ($name:ident, $impl:ident, ($($arg:ident: $ty:ty),*)) => {
        fn $name<T: Scalar>($($arg: $ty),*) {
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx512f,avx2,fma")]
                unsafe fn avx512<T: Scalar>($($arg: $ty),*) {
                    $impl::<T, true>($($arg),*)
                }
                #[target_feature(enable = "avx2,fma")]
                unsafe fn avx2<T: Scalar>($($arg: $ty),*) {
                    $impl::<T, true>($($arg),*)
                }
                if std::arch::is_x86_feature_detected!("avx512f") && std::arch::is_x86_feature_detected!("fma") {
                    // SAFETY: the required CPU features were detected at runtime.
                    return unsafe { avx512::<T>($($arg),*) };
                }
                if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
                    // SAFETY: as above.
                    return unsafe { avx2::<T>($($arg),*) };
                }
            }
            $impl::<T, false>($($arg),*)
        }
    };
}

dispatch!(shifted_conv, shifted_conv_impl, (src: &[T], cin: usize, g: &Grid, wt: &[T], cout: usize, dst: &mut [T]));
dispatch!(weight_grad, weight_grad_impl, (x: &[T], cin: usize, dy: &[T], cout: usize, g: &Grid, dw: &mut [T]));

/// Same-padded convolution with a cubic kernel of odd size `ksize`.
/// `weight` is `cout × cin × k³`, `bias` is `cout`.
pub fn conv3d<T: Scalar>(x: &Tensor<T>, weight: &[T], bias: &[T], cout: usize, ksize: usize) -> Tensor<T> {
    let cin = x.channels;
    let taps = ksize.pow(3);
    assert_eq!(weight.len(), cout * cin * taps, "conv weight size");
    let g = Grid::new(x.dims, ksize);
    let xp = g.pad(x);
    // [cin][taps][cout]
    let mut wt = vec![T::zero(); weight.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for t in 0..taps {
                wt[(ci * taps + t) * cout + co] = weight[(co * cin + ci) * taps + t];
            }
        }
    }
    let mut yp = vec![T::zero(); cout * g.stride];
    shifted_conv(&xp, cin, &g, &wt, cout, &mut yp);
    let mut y = Tensor::zeros(cout, x.dims);
    let n = y.spatial();
    for (co, &b) in bias.iter().enumerate() {
        y.data[co * n..(co + 1) * n].fill(b);
    }
    g.unpad_add(&yp, &mut y);
    y
}

/// Backward of [`conv3d`]: accumulates into `dweight`/`dbias` and returns the
/// input gradient when `need_dx`.
pub fn conv3d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &[T],
    dy: &Tensor<T>,
    dweight: &mut [T],
    dbias: &mut [T],
    ksize: usize,
    need_dx: bool,
) -> Option<Tensor<T>> {
    let (cin, cout) = (x.channels, dy.channels);
    let taps = ksize.pow(3);
    let n = x.spatial();
    for (co, db) in dbias.iter_mut().enumerate() {
        *db = *db + dy.data[co * n..(co + 1) * n].iter().copied().sum::<T>();
    }
    let g = Grid::new(x.dims, ksize);
    let xp = g.pad(x);
    let dyp = g.pad(dy);
    weight_grad(&xp, cin, &dyp, cout, &g, dweight);
    if !need_dx {
        return None;
    }
    // [cout][taps][cin], taps reversed
    let mut wt = vec![T::zero(); weight.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for t in 0..taps {
                wt[(co * taps + (taps - 1 - t)) * cin + ci] = weight[(co * cin + ci) * taps + t];
            }
        }
    }
    let mut dxp = vec![T::zero(); cin * g.stride];
    shifted_conv(&dyp, cout, &g, &wt, cin, &mut dxp);
    let mut dx = Tensor::zeros(cin, x.dims);
    g.unpad_add(&dxp, &mut dx);
    Some(dx)
}
