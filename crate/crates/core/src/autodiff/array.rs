use crate::error::{Error, Result};

/// Row-major `f64` array with an explicit shape.
///
/// Leading dimensions may be zero (an empty set of voxels is still a valid
/// `[0, c]` feature matrix); every stored value is finite.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseArray {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl DenseArray {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if dims.is_empty() || expected != data.len() {
            return Err(Error::shape(
                "DenseArray::new",
                format!("{expected} values for dims {dims:?}"),
                data.len(),
            ));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { dims, index });
        }
        Ok(Self { dims, data })
    }

    /// Builds an array from values produced by an internal kernel. Finiteness
    /// is checked only in debug builds.
    pub(crate) fn from_raw(dims: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        debug_assert!(data.iter().all(|v| v.is_finite()), "non-finite value in {dims:?}");
        Self { dims, data }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: &[usize], value: f64) -> Self {
        let n = dims.iter().product();
        Self::from_raw(dims.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_raw(vec![1], vec![value])
    }

    pub fn vector(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(vec![n], values)
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::from_raw(vec![n, n], data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the trailing axis.
    pub fn last_dim(&self) -> usize {
        *self.dims.last().expect("rank >= 1")
    }

    /// Number of rows when the array is viewed as `[.., last_dim]`.
    pub fn rows(&self) -> usize {
        let last = self.last_dim();
        if last == 0 {
            self.dims[..self.dims.len() - 1].iter().product()
        } else {
            self.data.len() / last
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.last_dim();
        &self.data[r * c..(r + 1) * c]
    }

    /// The single value of a one-element array.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on array with dims {:?}", self.dims);
        self.data[0]
    }

    pub fn reshape(self, dims: Vec<usize>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if dims.is_empty() || n != self.data.len() {
            return Err(Error::shape("reshape", format!("{} values", self.data.len()), format!("{dims:?}")));
        }
        Ok(Self { dims, data: self.data })
    }
}

/// Splits `dims` around `axis` into `(outer, len, inner)` so that element
/// `(o, a, i)` lives at `(o * len + a) * inner + i`.
pub(crate) fn axis_split(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = dims[..axis].iter().product();
    let len = dims[axis];
    let inner = dims[axis + 1..].iter().product();
    (outer, len, inner)
}
