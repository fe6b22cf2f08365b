//! Dense row-major tensors and the batched matrix product used everywhere
//! else in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Floating point element type. Training and inference run in `f32`,
/// gradient checks and diagnostics in `f64`.
pub trait Scalar:
    Float + FromPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// `c = alpha * a * b + beta * c` with arbitrary strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m×k`, `k×n` and `m×n`
    /// matrices; `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Scalar for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} holds {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    /// Stack of `count` identity matrices, shape `[count, n, n]`.
    pub fn eye_stack(count: usize, n: usize) -> Self {
        let mut t = Self::zeros(&[count, n, n]);
        for c in 0..count {
            for i in 0..n {
                t.data[c * n * n + i * n + i] = T::one();
            }
        }
        t
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::of(z * std)
            })
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Size of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of(x.as_f64())).collect(),
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        self.cast()
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Slice `i` along the leading axis.
    pub fn index0(&self, i: usize) -> Self {
        let inner: usize = self.shape[1..].iter().product();
        Self {
            shape: self.shape[1..].to_vec(),
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
        }
    }

    /// Concatenate equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::ShapeMismatch("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(Error::ShapeMismatch(format!(
                    "stack of {:?} and {:?}",
                    first.shape, p.shape
                )));
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }

    /// Swap axes 1 and 2 of a rank-4 tensor: `[a, b, c, d] -> [a, c, b, d]`.
    pub fn swap_axes12(&self) -> Self {
        let [a, b, c, d] = <[usize; 4]>::try_from(self.shape.as_slice()).expect("rank-4 tensor");
        let mut out = vec![T::zero(); self.data.len()];
        for i in 0..a {
            for j in 0..b {
                for k in 0..c {
                    let src = ((i * b + j) * c + k) * d;
                    let dst = ((i * c + k) * b + j) * d;
                    out[dst..dst + d].copy_from_slice(&self.data[src..src + d]);
                }
            }
        }
        Self {
            shape: vec![a, c, b, d],
            data: out,
        }
    }

    /// Batched matrix product over the last two axes.
    ///
    /// The batch axes of the shorter operand must be a suffix of the
    /// longer one's; it is broadcast across the remaining leading axes.
    pub fn matmul(&self, other: &Self, ta: bool, tb: bool) -> Result<Self> {
        let plan = MatmulPlan::new(&self.shape, &other.shape, ta, tb)?;
        let mut out = Self::zeros(&plan.out_shape);
        plan.run(
            &self.data,
            ta,
            &other.data,
            tb,
            &mut out.data,
            plan.geom(),
            false,
        );
        Ok(out)
    }
}

/// Geometry of one batched gemm call: `c[i % nc] (+)= op(a[i % na]) op(b[i % nb])`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct GemmGeom {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub na: usize,
    pub nb: usize,
    pub nc: usize,
    /// Stored (rows, cols) of each operand.
    pub a_dims: (usize, usize),
    pub b_dims: (usize, usize),
}

#[derive(Debug, Clone)]
pub(crate) struct MatmulPlan {
    pub out_shape: Vec<usize>,
    pub batch: usize,
    pub na: usize,
    pub nb: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub a_dims: (usize, usize),
    pub b_dims: (usize, usize),
}

impl MatmulPlan {
    pub fn new(a: &[usize], b: &[usize], ta: bool, tb: bool) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul needs rank >= 2, got {a:?} and {b:?}"
            )));
        }
        let (ab, am) = a.split_at(a.len() - 2);
        let (bb, bm) = b.split_at(b.len() - 2);
        let a_dims = (am[0], am[1]);
        let b_dims = (bm[0], bm[1]);
        let (m, ka) = if ta { (am[1], am[0]) } else { (am[0], am[1]) };
        let (kb, n) = if tb { (bm[1], bm[0]) } else { (bm[0], bm[1]) };
        if ka != kb {
            return Err(Error::ShapeMismatch(format!(
                "matmul inner dims differ: {a:?}{} x {b:?}{}",
                if ta { "ᵀ" } else { "" },
                if tb { "ᵀ" } else { "" }
            )));
        }
        let long = if ab.len() >= bb.len() { ab } else { bb };
        let short = if ab.len() >= bb.len() { bb } else { ab };
        if !long.ends_with(short) {
            return Err(Error::ShapeMismatch(format!(
                "matmul batch axes {ab:?} and {bb:?} do not broadcast"
            )));
        }
        let mut out_shape = long.to_vec();
        out_shape.push(m);
        out_shape.push(n);
        Ok(Self {
            out_shape,
            batch: long.iter().product(),
            na: ab.iter().product(),
            nb: bb.iter().product(),
            m,
            k: ka,
            n,
            a_dims,
            b_dims,
        })
    }

    pub fn geom(&self) -> GemmGeom {
        GemmGeom {
            batch: self.batch,
            m: self.m,
            k: self.k,
            n: self.n,
            na: self.na,
            nb: self.nb,
            nc: self.batch,
            a_dims: self.a_dims,
            b_dims: self.b_dims,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn run<T: Scalar>(
        &self,
        a: &[T],
        ta: bool,
        b: &[T],
        tb: bool,
        c: &mut [T],
        g: GemmGeom,
        accumulate: bool,
    ) {
        batched_gemm(a, ta, b, tb, c, g, accumulate)
    }
}

/// Runs `c[i % nc] (+)= op(a[i % na]) · op(b[i % nb])` for `i` in `0..batch`.
pub(crate) fn batched_gemm<T: Scalar>(
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    g: GemmGeom,
    accumulate: bool,
) {
    let GemmGeom {
        batch,
        m,
        k,
        n,
        na,
        nb,
        nc,
        a_dims,
        b_dims,
    } = g;
    let a_sz = a_dims.0 * a_dims.1;
    let b_sz = b_dims.0 * b_dims.1;
    let c_sz = m * n;
    debug_assert_eq!(a.len(), a_sz * na);
    debug_assert_eq!(b.len(), b_sz * nb);
    debug_assert_eq!(c.len(), c_sz * nc);
    if !accumulate {
        c.iter_mut().for_each(|x| *x = T::zero());
    }
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let (rsa, csa) = if ta {
        (1, a_dims.1 as isize)
    } else {
        (a_dims.1 as isize, 1)
    };
    let (rsb, csb) = if tb {
        (1, b_dims.1 as isize)
    } else {
        (b_dims.1 as isize, 1)
    };

    // A single weight matrix applied to a stack of row blocks folds into one gemm.
    if nb == 1 && nc == batch && na == batch && !ta && batch > 1 {
        unsafe {
            T::gemm(
                batch * m,
                k,
                n,
                T::one(),
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                T::one(),
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        return;
    }

    for i in 0..batch {
        let ap = &a[(i % na) * a_sz..][..a_sz];
        let bp = &b[(i % nb) * b_sz..][..b_sz];
        let cp = &mut c[(i % nc) * c_sz..][..c_sz];
        unsafe {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                ap.as_ptr(),
                rsa,
                csa,
                bp.as_ptr(),
                rsb,
                csb,
                T::one(),
                cp.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn naive(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        Tensor::from_fn(&[m, n], |idx| {
            let (i, j) = (idx / n, idx % n);
            (0..k).map(|p| a.data()[i * k + p] * b.data()[p * n + j]).sum()
        })
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = StdRng::seed_from_u64(7);
        let a = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[4, 2], 1.0, &mut rng);
        let c = a.matmul(&b, false, false).unwrap();
        assert!(c.max_abs_diff(&naive(&a, &b)) < 1e-12);
    }

    #[test]
    fn transposed_operands() {
        let mut rng = StdRng::seed_from_u64(8);
        let a = Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[2, 4], 1.0, &mut rng);
        let at = Tensor::from_fn(&[3, 4], |i| a.data()[(i % 4) * 3 + i / 4]);
        let bt = Tensor::from_fn(&[4, 2], |i| b.data()[(i % 2) * 4 + i / 2]);
        let c = a.matmul(&b, true, true).unwrap();
        assert!(c.max_abs_diff(&naive(&at, &bt)) < 1e-12);
    }

    #[test]
    fn broadcast_batch_suffix() {
        let mut rng = StdRng::seed_from_u64(9);
        let a = Tensor::<f64>::randn(&[2, 3, 2, 4], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[3, 4, 5], 1.0, &mut rng);
        let c = a.matmul(&w, false, false).unwrap();
        assert_eq!(c.shape(), &[2, 3, 2, 5]);
        for bi in 0..2 {
            for h in 0..3 {
                let ai = a.index0(bi).index0(h);
                let wi = w.index0(h);
                let ci = c.index0(bi).index0(h);
                assert!(ci.max_abs_diff(&naive(&ai, &wi)) < 1e-12);
            }
        }
        assert!(a.matmul(&Tensor::zeros(&[2, 4, 5]), false, false).is_err());
    }

    #[test]
    fn swap_axes_roundtrip() {
        let t = Tensor::<f32>::from_fn(&[2, 3, 4, 5], |i| i as f32);
        let s = t.swap_axes12();
        assert_eq!(s.shape(), &[2, 4, 3, 5]);
        assert_eq!(s.swap_axes12(), t);
    }
}
