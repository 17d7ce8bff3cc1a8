use crate::error::{invalid_arg, Result};

/// Dense `N × C × H × W` tensor of `f64`, row-major, with an optional gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    dims: [usize; 4],
    data: Vec<f64>,
    /// Filled by [`Graph::backward`](super::Graph::backward); same length as the data.
    pub grad: Option<Vec<f64>>,
}

impl Tensor4 {
    pub fn new(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(invalid_arg!("tensor dims must all be >= 1, got {dims:?}"));
        }
        let n: usize = dims.iter().product();
        if data.len() != n {
            return Err(invalid_arg!("tensor {dims:?} needs {n} values, got {}", data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid_arg!("tensor values must be finite"));
        }
        Ok(Self { dims, data, grad: None })
    }

    /// Skips the finiteness scan; for values produced by our own kernels.
    pub(crate) fn from_parts(dims: [usize; 4], data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), dims.iter().product::<usize>());
        Self { dims, data, grad: None }
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Self::from_parts(dims, vec![0.0; dims.iter().product()])
    }

    pub fn filled(dims: [usize; 4], value: f64) -> Self {
        Self::from_parts(dims, vec![value; dims.iter().product()])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts([1, 1, 1, 1], vec![value])
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on a tensor of dims {:?}", self.dims);
        self.data[0]
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        let [_, cs, h, w] = self.dims;
        self.data[((n * cs + c) * h + y) * w + x]
    }

    /// The `H × W` plane of batch item `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let hw = self.dims[2] * self.dims[3];
        let start = (n * self.dims[1] + c) * hw;
        &self.data[start..start + hw]
    }

    /// Sum of elementwise products.
    pub fn dot(&self, other: &Tensor4) -> Result<f64> {
        self.expect_same_dims(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub(crate) fn expect_same_dims(&self, other: &Tensor4, op: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(invalid_arg!("{op}: shape mismatch {:?} vs {:?}", self.dims, other.dims));
        }
        Ok(())
    }

    /// Stacks single-item tensors of equal `C × H × W` along the batch axis.
    pub fn stack(items: &[&Tensor4]) -> Result<Tensor4> {
        let first = items.first().ok_or_else(|| invalid_arg!("cannot stack zero tensors"))?;
        let [_, c, h, w] = first.dims;
        let mut data = Vec::with_capacity(items.iter().map(|t| t.len()).sum());
        let mut n = 0;
        for t in items {
            if t.dims[1..] != [c, h, w] {
                return Err(invalid_arg!(
                    "stack: item dims {:?} differ from {:?}",
                    t.dims,
                    first.dims
                ));
            }
            data.extend_from_slice(&t.data);
            n += t.dims[0];
        }
        Ok(Self::from_parts([n, c, h, w], data))
    }

    /// Batch item `n` as a `1 × C × H × W` tensor.
    pub fn item_at(&self, n: usize) -> Tensor4 {
        let [_, c, h, w] = self.dims;
        let len = c * h * w;
        Self::from_parts([1, c, h, w], self.data[n * len..(n + 1) * len].to_vec())
    }
}
