use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use super::DiffError;

/// Floating-point element type the engine runs on.
///
/// Training uses `f32`; gradient checks run the same graphs in `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + std::iter::Sum + 'static
{
    /// `c = a·b + beta·c` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
    ///
    /// `a_t` / `b_t` mean the operand is stored transposed (`k×m` / `n×k`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_t: bool,
        b: &[Self],
        b_t: bool,
        beta: Self,
        c: &mut [Self],
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }
}

fn gemm_strides(m: usize, k: usize, n: usize, a_t: bool, b_t: bool) -> [isize; 6] {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    [rsa, csa, rsb, csb, n as isize, 1]
}

macro_rules! impl_scalar {
    ($t:ty, $kernel:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_t: bool,
                b: &[Self],
                b_t: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    c[..m * n].iter_mut().for_each(|v| *v *= beta);
                    return;
                }
                let [rsa, csa, rsb, csb, rsc, csc] = gemm_strides(m, k, n, a_t, b_t);
                // SAFETY: bounds asserted above; strides describe the dense row-major
                // (optionally transposed) layouts of a, b and c.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Dense row-major tensor with an optional gradient buffer of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, DiffError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(DiffError::InvalidArgument(format!(
                "tensor of shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            grad: None,
        }
    }

    /// Builds a tensor from `f64` values, mostly for tests and literals.
    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self, DiffError> {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn take_grad(&mut self) -> Option<Vec<T>> {
        self.grad.take()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<T>>) {
        if let Some(g) = &grad {
            assert_eq!(g.len(), self.data.len(), "gradient length must match data");
        }
        self.grad = grad;
    }

    pub(crate) fn grad_mut_or_zero(&mut self) -> &mut Vec<T> {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![T::zero(); n])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, DiffError> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(DiffError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        self.grad = None;
        Ok(self)
    }

    /// Converts the element type (f32 ↔ f64). The gradient is dropped.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
            grad: None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()
    }
}
