//! Dense row-major array of f64 — the only value type the tape records.

use std::fmt;

use super::AutodiffError;

/// Shape + contiguous row-major buffer. Arrays are immutable once recorded
/// on a tape; construction validates that the buffer matches the shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, AutodiffError> {
        let expect: usize = shape.iter().product();
        if shape.contains(&0) || expect != data.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "Array::new",
                details: format!("shape {shape:?} does not hold {} values", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a scalar (shape-[1]) array.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1, "item() on non-scalar {:?}", self.shape);
        self.data[0]
    }

    /// 2-D accessor used by tests; row-major.
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub(crate) fn with_shape_unchecked(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }
}

impl fmt::Display for Array {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Array{:?}", self.shape)
    }
}

/// C = A·B for 2-D row-major operands, via matrixmultiply's dgemm
/// (single-threaded, hence bit-deterministic across runs).
pub(crate) fn matmul_2d(a: &Array, b: &Array) -> Result<Array, AutodiffError> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(AutodiffError::ShapeMismatch {
            op: "matmul",
            details: format!("{:?} x {:?}", a.shape(), b.shape()),
        });
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data().as_ptr(),
            k as isize,
            1,
            b.data().as_ptr(),
            n as isize,
            1,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(Array::with_shape_unchecked(vec![m, n], out))
}

/// C = Aᵀ·B without materializing the transpose (strides do the work).
pub(crate) fn matmul_at_b(a: &Array, b: &Array) -> Result<Array, AutodiffError> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[0] != b.shape()[0] {
        return Err(AutodiffError::ShapeMismatch {
            op: "matmul_at_b",
            details: format!("{:?}ᵀ x {:?}", a.shape(), b.shape()),
        });
    }
    let (k, m) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data().as_ptr(),
            1,
            m as isize,
            b.data().as_ptr(),
            n as isize,
            1,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(Array::with_shape_unchecked(vec![m, n], out))
}

/// C = A·Bᵀ without materializing the transpose.
pub(crate) fn matmul_a_bt(a: &Array, b: &Array) -> Result<Array, AutodiffError> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[1] {
        return Err(AutodiffError::ShapeMismatch {
            op: "matmul_a_bt",
            details: format!("{:?} x {:?}ᵀ", a.shape(), b.shape()),
        });
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[0];
    let mut out = vec![0.0; m * n];
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data().as_ptr(),
            k as isize,
            1,
            b.data().as_ptr(),
            1,
            k as isize,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(Array::with_shape_unchecked(vec![m, n], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_buffer() {
        assert!(Array::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Array::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Array::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn matmul_identity() {
        let eye = Array::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let x = Array::new(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(matmul_2d(&eye, &x).unwrap(), x);
    }

    #[test]
    fn transposed_variants_agree_with_explicit_transpose() {
        let a = Array::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Array::new(vec![2, 2], vec![7., 8., 9., 10.]).unwrap();
        // Aᵀ·B where Aᵀ is 3x2.
        let at = Array::new(vec![3, 2], vec![1., 4., 2., 5., 3., 6.]).unwrap();
        assert_eq!(matmul_at_b(&a, &b).unwrap(), matmul_2d(&at, &b).unwrap());
        // A·Bᵀ with B reinterpreted as 2x3 rows.
        let c = Array::new(vec![4, 3], (1..=12).map(f64::from).collect()).unwrap();
        let ct = Array::new(vec![3, 4], vec![1., 4., 7., 10., 2., 5., 8., 11., 3., 6., 9., 12.])
            .unwrap();
        assert_eq!(matmul_a_bt(&a, &c).unwrap(), matmul_2d(&a, &ct).unwrap());
    }
}
