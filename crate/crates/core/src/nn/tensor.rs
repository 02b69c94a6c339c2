/// Dense `f32` tensor in NCHW layout.
///
/// Token sequences (used by the transformer encoder) are stored as
/// `[n, 1, tokens, dim]` so that each sample is a row-major `tokens × dim`
/// matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: [usize; 4],
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Tensor { shape, data }
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.shape[0]
    }
    #[inline]
    pub fn c(&self) -> usize {
        self.shape[1]
    }
    #[inline]
    pub fn h(&self) -> usize {
        self.shape[2]
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.shape[3]
    }

    /// Elements per sample.
    #[inline]
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let len = self.sample_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f32] {
        let len = self.sample_len();
        &mut self.data[i * len..(i + 1) * len]
    }

    /// Copies samples `[start, end)` into a new tensor.
    pub fn slice_batch(&self, start: usize, end: usize) -> Tensor {
        let len = self.sample_len();
        let mut shape = self.shape;
        shape[0] = end - start;
        Tensor::from_vec(shape, self.data[start * len..end * len].to_vec())
    }

    /// Concatenates along the batch axis.
    pub fn concat_batch(parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let mut shape = parts[0].shape;
        shape[0] = 0;
        let mut data = Vec::new();
        for p in parts {
            assert_eq!(p.shape[1..], parts[0].shape[1..]);
            shape[0] += p.n();
            data.extend_from_slice(&p.data);
        }
        Tensor::from_vec(shape, data)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    /// Adds `other` into samples starting at batch index `offset`.
    pub fn add_assign_at(&mut self, offset: usize, other: &Tensor) {
        assert_eq!(self.shape[1..], other.shape[1..]);
        let len = self.sample_len();
        let dst = &mut self.data[offset * len..(offset + other.n()) * len];
        for (a, b) in dst.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}
