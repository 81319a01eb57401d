/// Dense row-major f64 tensor. Activations are `(C, D, H, W)`, convolution
/// weights `(Cout, Cin, k, k, k)` (transposed convolutions `(Cin, Cout, ...)`),
/// scalars `[1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "tensor data does not match shape {shape:?}"
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1);
        self.data[0]
    }

    /// Shape as `(C, D, H, W)`; panics if not 4-dimensional.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        match *self.shape.as_slice() {
            [c, d, h, w] => (c, d, h, w),
            _ => panic!("expected 4D tensor, got shape {:?}", self.shape),
        }
    }

    /// Shape as a 5-tuple; panics if not 5-dimensional.
    pub fn dims5(&self) -> (usize, usize, usize, usize, usize) {
        match *self.shape.as_slice() {
            [a, b, c, d, e] => (a, b, c, d, e),
            _ => panic!("expected 5D tensor, got shape {:?}", self.shape),
        }
    }

    pub fn accumulate(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    /// Euclidean norm of all elements.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}
