//! Forward and backward kernels for the layers the network uses.

pub use super::conv::{conv3d, conv3d_backward};
use super::tensor::Tensor;
use crate::scalar::Scalar;

pub const LEAKY_SLOPE: f64 = 0.1;

pub const NORM_EPS: f64 = 1e-5;

fn channel_stats<T: Scalar>(x: &[T]) -> (T, T) {
    let n = T::from_usize(x.len()).expect("channel size");
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, T::one() / (var + T::from_f64_lossy(NORM_EPS)).sqrt())
}

/// Per-channel instance normalization followed by `scale · x̂ + shift`.
pub fn instance_norm<T: Scalar>(x: &Tensor<T>, scale: &[T], shift: &[T]) -> Tensor<T> {
    let mut y = x.clone();
    let n = x.spatial();
    for c in 0..x.channels {
        let ch = &mut y.data[c * n..(c + 1) * n];
        let (mean, inv) = channel_stats(ch);
        for v in ch.iter_mut() {
            *v = (*v - mean) * inv * scale[c] + shift[c];
        }
    }
    y
}

/// Backward of [`instance_norm`] given its input `x`; accumulates the affine
/// gradients and returns the input gradient.
pub fn instance_norm_backward<T: Scalar>(x: &Tensor<T>, scale: &[T], dy: &Tensor<T>, dscale: &mut [T], dshift: &mut [T]) -> Tensor<T> {
    let n = x.spatial();
    let nf = T::from_usize(n).expect("channel size");
    let mut dx = Tensor::zeros(x.channels, x.dims);
    for c in 0..x.channels {
        let xs = &x.data[c * n..(c + 1) * n];
        let gs = &dy.data[c * n..(c + 1) * n];
        let (mean, inv) = channel_stats(xs);
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for (&v, &g) in xs.iter().zip(gs) {
            sum_g = sum_g + g;
            sum_gx = sum_gx + g * (v - mean) * inv;
        }
        dscale[c] = dscale[c] + sum_gx;
        dshift[c] = dshift[c] + sum_g;
        let k = scale[c] * inv / nf;
        for ((d, &v), &g) in dx.data[c * n..(c + 1) * n].iter_mut().zip(xs).zip(gs) {
            *d = k * (nf * g - sum_g - (v - mean) * inv * sum_gx);
        }
    }
    dx
}

pub fn leaky_relu<T: Scalar>(x: &mut Tensor<T>) {
    let k = T::from_f64_lossy(LEAKY_SLOPE);
    for v in &mut x.data {
        if *v < T::zero() {
            *v = *v * k;
        }
    }
}

/// Multiplies `grad` by the activation derivative, read off the activation
/// output (its sign matches the input's).
pub fn leaky_relu_backward<T: Scalar>(out: &Tensor<T>, grad: &mut Tensor<T>) {
    let k = T::from_f64_lossy(LEAKY_SLOPE);
    for (g, &o) in grad.data.iter_mut().zip(&out.data) {
        if o < T::zero() {
            *g = *g * k;
        }
    }
}

/// 2×2×2 average pooling; extents must be even.
pub fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [d, h, w] = x.dims;
    debug_assert!(d % 2 == 0 && h % 2 == 0 && w % 2 == 0);
    let od = [d / 2, h / 2, w / 2];
    let mut y = Tensor::zeros(x.channels, od);
    let eighth = T::from_f64_lossy(0.125);
    let (n, m) = (x.spatial(), y.spatial());
    for c in 0..x.channels {
        let src = &x.data[c * n..(c + 1) * n];
        let dst = &mut y.data[c * m..(c + 1) * m];
        for z in 0..d {
            for yy in 0..h {
                let row = &src[(z * h + yy) * w..(z * h + yy + 1) * w];
                let orow = &mut dst[((z / 2) * od[1] + yy / 2) * od[2]..((z / 2) * od[1] + yy / 2 + 1) * od[2]];
                for (xo, o) in orow.iter_mut().enumerate() {
                    *o = *o + row[2 * xo] + row[2 * xo + 1];
                }
            }
        }
        for v in dst.iter_mut() {
            *v = *v * eighth;
        }
    }
    y
}

pub fn avg_pool2_backward<T: Scalar>(dy: &Tensor<T>, dims: [usize; 3]) -> Tensor<T> {
    let mut dx = upsample2(dy);
    debug_assert_eq!(dx.dims, dims);
    dx.scale(T::from_f64_lossy(0.125));
    dx
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [d, h, w] = x.dims;
    let od = [2 * d, 2 * h, 2 * w];
    let mut y = Tensor::zeros(x.channels, od);
    let (n, m) = (x.spatial(), y.spatial());
    for c in 0..x.channels {
        let src = &x.data[c * n..(c + 1) * n];
        let dst = &mut y.data[c * m..(c + 1) * m];
        for z in 0..od[0] {
            for yy in 0..od[1] {
                let row = &src[((z / 2) * h + yy / 2) * w..((z / 2) * h + yy / 2 + 1) * w];
                let orow = &mut dst[(z * od[1] + yy) * od[2]..(z * od[1] + yy + 1) * od[2]];
                for (xo, o) in orow.iter_mut().enumerate() {
                    *o = row[xo / 2];
                }
            }
        }
    }
    y
}

/// Adjoint of [`upsample2`]: sums each 2×2×2 block.
pub fn upsample2_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = avg_pool2(dy);
    dx.scale(T::from_f64_lossy(8.0));
    dx
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, c: usize, dims: [usize; 3]) -> Tensor<f64> {
        let mut t = Tensor::zeros(c, dims);
        for v in &mut t.data {
            *v = rng.random_range(-1.0..1.0);
        }
        t
    }

    /// Direct-loop reference convolution.
    fn conv_reference(x: &Tensor<f64>, wt: &[f64], b: &[f64], cout: usize, k: usize) -> Tensor<f64> {
        let [d, h, w] = x.dims;
        let p = (k / 2) as isize;
        let mut y = Tensor::zeros(cout, x.dims);
        for co in 0..cout {
            for z in 0..d {
                for yy in 0..h {
                    for xx in 0..w {
                        let mut acc = b[co];
                        for ci in 0..x.channels {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let sz = z as isize + kz as isize - p;
                                        let sy = yy as isize + ky as isize - p;
                                        let sx = xx as isize + kx as isize - p;
                                        if sz < 0 || sy < 0 || sx < 0 || sz >= d as isize || sy >= h as isize || sx >= w as isize {
                                            continue;
                                        }
                                        let wi = ((co * x.channels + ci) * k + kz) * k * k + ky * k + kx;
                                        acc += wt[wi] * x.data[ci * d * h * w + (sz as usize * h + sy as usize) * w + sx as usize];
                                    }
                                }
                            }
                        }
                        y.data[co * d * h * w + (z * h + yy) * w + xx] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(cin, cout, k, dims) in &[(2, 3, 3, [3, 4, 5]), (3, 9, 3, [4, 3, 6]), (5, 4, 1, [2, 3, 4]), (3, 2, 1, [2, 3, 2]), (1, 1, 3, [1, 1, 1])] {
            let x = random_tensor(&mut rng, cin, dims);
            let wt: Vec<f64> = (0..cout * cin * k * k * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..cout).map(|_| rng.random_range(-1.0..1.0)).collect();
            let got = conv3d(&x, &wt, &b, cout, k);
            let want = conv_reference(&x, &wt, &b, cout, k);
            for (g, w) in got.data.iter().zip(&want.data) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), dy> is linear in both x and W: check dx and dW via
        // directional finite differences (exact up to rounding for linear maps).
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &k in &[1usize, 3] {
            for &(cin, cout, dims) in &[(2, 3, [4, 3, 5]), (3, 6, [5, 4, 3])] {
            let x = random_tensor(&mut rng, cin, dims);
            let wt: Vec<f64> = (0..cout * cin * k.pow(3)).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b = vec![0.0; cout];
            let dy = random_tensor(&mut rng, cout, dims);
            let mut dw = vec![0.0; wt.len()];
            let mut db = vec![0.0; cout];
            let dx = conv3d_backward(&x, &wt, &dy, &mut dw, &mut db, k, true).unwrap();
            let inner = |a: &Tensor<f64>| a.data.iter().zip(&dy.data).map(|(p, q)| p * q).sum::<f64>();
            let vx = random_tensor(&mut rng, cin, dims);
            let lhs = inner(&conv3d(&vx, &wt, &b, cout, k));
            let rhs: f64 = dx.data.iter().zip(&vx.data).map(|(p, q)| p * q).sum();
            assert!((lhs - rhs).abs() < 1e-9, "dx adjoint {lhs} vs {rhs}");
            let vw: Vec<f64> = (0..wt.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let lhs = inner(&conv3d(&x, &vw, &b, cout, k));
            let rhs: f64 = dw.iter().zip(&vw).map(|(p, q)| p * q).sum();
            assert!((lhs - rhs).abs() < 1e-9, "dW adjoint {lhs} vs {rhs}");
            let total: f64 = dy.data.iter().sum();
            assert!((db.iter().sum::<f64>() - total).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pool_and_upsample_are_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&mut rng, 2, [4, 2, 6]);
        let g = random_tensor(&mut rng, 2, [2, 1, 3]);
        let lhs: f64 = avg_pool2(&x).data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = avg_pool2_backward(&g, x.dims).data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        let lhs: f64 = upsample2(&g).data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = upsample2_backward(&x).data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn instance_norm_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(&mut rng, 2, [2, 3, 2]);
        let scale = [1.3, -0.7];
        let shift = [0.2, 0.1];
        let probe = random_tensor(&mut rng, 2, [2, 3, 2]);
        let f = |x: &Tensor<f64>, s: &[f64]| -> f64 {
            instance_norm(x, s, &shift).data.iter().zip(&probe.data).map(|(a, b)| a * b).sum()
        };
        let (mut ds, mut db) = (vec![0.0; 2], vec![0.0; 2]);
        let dx = instance_norm_backward(&x, &scale, &probe, &mut ds, &mut db);
        let h = 1e-6;
        for i in 0..x.data.len() {
            let (mut a, mut b) = (x.clone(), x.clone());
            a.data[i] += h;
            b.data[i] -= h;
            let num = (f(&a, &scale) - f(&b, &scale)) / (2.0 * h);
            assert!((num - dx.data[i]).abs() < 1e-6, "dx[{i}] {num} vs {}", dx.data[i]);
        }
        for c in 0..2 {
            let (mut a, mut b) = (scale, scale);
            a[c] += h;
            b[c] -= h;
            let num = (f(&x, &a) - f(&x, &b)) / (2.0 * h);
            assert!((num - ds[c]).abs() < 1e-6);
        }
        assert!((db[0] - probe.channel(0).iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn concat_split_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_tensor(&mut rng, 2, [2, 2, 2]);
        let b = random_tensor(&mut rng, 1, [2, 2, 2]);
        let parts = Tensor::concat(&[&a, &b]).split(&[2, 1]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }
}
