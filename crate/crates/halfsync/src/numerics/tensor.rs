use super::{Precision, PrecisionPolicy};
use crate::{Error, Result};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Dense row-major tensor. Elements are stored as `f64` but are invariantly
/// representable in `precision`: constructors and every op quantize on the
/// way in, so a tensor never silently carries more resolution than its
/// declared width.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    precision: Precision,
}

impl Tensor {
    /// Build a tensor, rounding `data` into `precision`.
    pub fn new(shape: &[usize], data: Vec<f64>, precision: Precision) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} wants {n} elements, got {}",
                data.len()
            )));
        }
        let data = data.into_iter().map(|x| precision.quantize(x)).collect();
        Ok(Tensor { shape: shape.to_vec(), data, precision })
    }

    pub fn zeros(shape: &[usize], precision: Precision) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n], precision }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable element access. Callers must store only values representable
    /// at the tensor's precision (quantize first); the debug invariant check
    /// in tests will catch violations.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Rows/cols of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::ShapeMismatch(format!(
                "expected 2-D tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert_eq!(self.shape.len(), 2);
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    /// Transpose of a 2-D tensor. Pure data movement, no rounding.
    pub fn transposed(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor { shape: vec![c, r], data, precision: self.precision })
    }

    /// True when every element is representable at the declared precision
    /// (the storage invariant). Used by tests and debug assertions.
    pub fn check_invariant(&self) -> bool {
        self.data.iter().all(|&x| self.precision.representable(x))
    }

    /// Index of the first non-finite element, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|x| !x.is_finite())
    }
}

/// Overflow/underflow counts from a precision cast.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CastStats {
    /// Finite values that became infinite.
    pub overflows: u64,
    /// Non-zero values that became zero.
    pub underflows: u64,
}

impl CastStats {
    pub fn merge(&mut self, other: CastStats) {
        self.overflows += other.overflows;
        self.underflows += other.underflows;
    }
}

/// Re-round a tensor to `precision`, reporting how many elements saturated
/// to infinity or flushed to zero in the process.
pub fn cast(t: &Tensor, precision: Precision) -> (Tensor, CastStats) {
    let mut stats = CastStats::default();
    let data = t
        .data
        .iter()
        .map(|&x| {
            let q = precision.quantize(x);
            if x.is_finite() && q.is_infinite() {
                stats.overflows += 1;
            }
            if x != 0.0 && q == 0.0 {
                stats.underflows += 1;
            }
            q
        })
        .collect();
    (
        Tensor { shape: t.shape.clone(), data, precision },
        stats,
    )
}

/// One output row of `a @ b`: products round at `math`, the running sum at
/// `acc` (left to right over k), the stored result at `math`.
#[inline]
fn matmul_row(
    a_row: &[f64],
    b: &[f64],
    out_row: &mut [f64],
    n: usize,
    math: Precision,
    acc_p: Precision,
) {
    let k = a_row.len();
    for j in 0..n {
        let mut acc = 0.0;
        for (kk, &av) in a_row.iter().enumerate().take(k) {
            let term = math.quantize(av * b[kk * n + j]);
            acc = acc_p.quantize(acc + term);
        }
        out_row[j] = math.quantize(acc);
    }
}

/// Policy-aware matrix multiply, parallel over output rows when the
/// `parallel` feature is on. Row tasks are independent and each runs the
/// same sequential inner loop, so the result is bit-identical to
/// [`matmul_seq`] regardless of thread count.
pub fn matmul(a: &Tensor, b: &Tensor, policy: &PrecisionPolicy) -> Result<Tensor> {
    let (m, ka) = a.dims2()?;
    let (kb, n) = b.dims2()?;
    if ka != kb {
        return Err(Error::ShapeMismatch(format!(
            "matmul inner dims: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0; m * n];
    let math = policy.math;
    let acc_p = policy.accumulator;

    #[cfg(feature = "parallel")]
    out.par_chunks_mut(n)
        .enumerate()
        .for_each(|(i, row)| matmul_row(a.row(i), &b.data, row, n, math, acc_p));

    #[cfg(not(feature = "parallel"))]
    for (i, row) in out.chunks_mut(n).enumerate() {
        matmul_row(a.row(i), &b.data, row, n, math, acc_p);
    }

    Ok(Tensor { shape: vec![m, n], data: out, precision: math })
}

/// Sequential matrix multiply with identical rounding semantics to
/// [`matmul`]. Kept unconditionally for oracle tests and benchmarks.
pub fn matmul_seq(a: &Tensor, b: &Tensor, policy: &PrecisionPolicy) -> Result<Tensor> {
    let (m, ka) = a.dims2()?;
    let (kb, n) = b.dims2()?;
    if ka != kb {
        return Err(Error::ShapeMismatch(format!(
            "matmul inner dims: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0; m * n];
    for (i, row) in out.chunks_mut(n).enumerate() {
        matmul_row(a.row(i), &b.data, row, n, policy.math, policy.accumulator);
    }
    Ok(Tensor { shape: vec![m, n], data: out, precision: policy.math })
}

/// Elementwise operations. Binary ops round once per element; the unary
/// transcendentals are computed in double and rounded once to the math
/// precision (the correctly-rounded-function model).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElemOp {
    Add,
    Mul,
    Sigmoid,
    Tanh,
    Relu,
}

impl ElemOp {
    pub const fn arity(self) -> usize {
        match self {
            ElemOp::Add | ElemOp::Mul => 2,
            _ => 1,
        }
    }
}

/// Apply `op` elementwise. Binary ops take operands of equal shape, except
/// `Add` which also accepts a `[1, n]` right operand broadcast over the rows
/// of an `[m, n]` left operand (bias addition). The result is at
/// `policy.math`.
pub fn elementwise(op: ElemOp, args: &[&Tensor], policy: &PrecisionPolicy) -> Result<Tensor> {
    if args.len() != op.arity() {
        return Err(Error::ShapeMismatch(format!(
            "{op:?} wants {} operand(s), got {}",
            op.arity(),
            args.len()
        )));
    }
    let math = policy.math;
    match op {
        ElemOp::Add | ElemOp::Mul => {
            let (a, b) = (args[0], args[1]);
            if a.shape == b.shape {
                let data = a
                    .data
                    .iter()
                    .zip(&b.data)
                    .map(|(&x, &y)| match op {
                        ElemOp::Add => math.quantize(x + y),
                        _ => math.quantize(x * y),
                    })
                    .collect();
                return Ok(Tensor { shape: a.shape.clone(), data, precision: math });
            }
            // Row broadcast: [m, n] + [1, n].
            if op == ElemOp::Add {
                if let (Ok((m, n)), Ok((rb, nb))) = (a.dims2(), b.dims2()) {
                    if rb == 1 && nb == n {
                        let mut data = Vec::with_capacity(m * n);
                        for i in 0..m {
                            for j in 0..n {
                                data.push(math.quantize(a.at2(i, j) + b.data[j]));
                            }
                        }
                        return Ok(Tensor { shape: vec![m, n], data, precision: math });
                    }
                }
            }
            Err(Error::ShapeMismatch(format!(
                "{op:?} on shapes {:?} and {:?}",
                a.shape, b.shape
            )))
        }
        ElemOp::Sigmoid | ElemOp::Tanh | ElemOp::Relu => {
            let a = args[0];
            let data = a
                .data
                .iter()
                .map(|&x| {
                    let y = match op {
                        ElemOp::Sigmoid => 1.0 / (1.0 + (-x).exp()),
                        ElemOp::Tanh => x.tanh(),
                        _ => x.max(0.0),
                    };
                    math.quantize(y)
                })
                .collect();
            Ok(Tensor { shape: a.shape.clone(), data, precision: math })
        }
    }
}

impl Precision {
    /// Scalar helpers: one correctly-rounded elementary op at this width.
    /// These are what the model and optimizer use for math that is not
    /// naturally a tensor op, keeping rounding behaviour uniform.
    #[inline]
    pub fn add(self, a: f64, b: f64) -> f64 {
        self.quantize(a + b)
    }

    #[inline]
    pub fn sub(self, a: f64, b: f64) -> f64 {
        self.quantize(a - b)
    }

    #[inline]
    pub fn mul(self, a: f64, b: f64) -> f64 {
        self.quantize(a * b)
    }

    #[inline]
    pub fn div(self, a: f64, b: f64) -> f64 {
        self.quantize(a / b)
    }
}
