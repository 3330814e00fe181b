use crate::scalar::Scalar;

/// Single-sample activation tensor laid out as `C × D × H × W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub channels: usize,
    pub dims: [usize; 3],
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        Tensor { channels, dims, data: vec![T::zero(); channels * dims.iter().product::<usize>()] }
    }

    pub fn from_channels(dims: [usize; 3], channels: &[&[T]]) -> Self {
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n * channels.len());
        for c in channels {
            assert_eq!(c.len(), n, "channel length");
            data.extend_from_slice(c);
        }
        Tensor { channels: channels.len(), dims, data }
    }

    /// Voxels per channel.
    pub fn spatial(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.spatial();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<T>()
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn scale(&mut self, k: T) {
        for a in &mut self.data {
            *a = *a * k;
        }
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
    }

    /// Stacks tensors with equal spatial extent along the channel axis.
    pub fn concat(parts: &[&Tensor<T>]) -> Self {
        let dims = parts[0].dims;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        for p in parts {
            assert_eq!(p.dims, dims, "concat extent");
            data.extend_from_slice(&p.data);
        }
        Tensor { channels: parts.iter().map(|p| p.channels).sum(), dims, data }
    }

    /// Inverse of [`Tensor::concat`] for the given channel counts.
    pub fn split(&self, counts: &[usize]) -> Vec<Tensor<T>> {
        let n = self.spatial();
        let mut off = 0;
        counts
            .iter()
            .map(|&c| {
                let t = Tensor { channels: c, dims: self.dims, data: self.data[off * n..(off + c) * n].to_vec() };
                off += c;
                t
            })
            .collect()
    }
}
