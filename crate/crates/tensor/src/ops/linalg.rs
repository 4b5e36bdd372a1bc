use crate::array::DenseArray;
use crate::error::{invalid, mismatch, Result};
use crate::graph::Var;
use crate::scalar::Scalar;

/// `c (+)= op(a) * op(b)` with `op(a)` of shape m×k and `op(b)` k×n.
/// Operands are row-major; `ta`/`tb` read them transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m) } else { (k, 1) };
    let (rsb, csb) = if tb { (1, k) } else { (n, 1) };
    if m * n * k <= 4096 {
        for i in 0..m {
            for j in 0..n {
                let mut acc = T::zero();
                for p in 0..k {
                    acc += a[i * rsa + p * csa] * b[p * rsb + j * csb];
                }
                let cij = &mut c[i * n + j];
                *cij = if accumulate { *cij + acc } else { acc };
            }
        }
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: slices are bounds-checked above; c does not alias a or b.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    /// Matrix product over the last two axes.
    ///
    /// `[.., m, k] x [k, n]` shares the right operand across the batch;
    /// `[B.., m, k] x [B.., k, n]` multiplies matching batch entries.
    pub fn matmul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let av = self.value();
        let bv = other.value();
        let (sa, sb) = (av.shape().to_vec(), bv.shape().to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let m = sa[sa.len() - 2];
        let k = sa[sa.len() - 1];
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let (ra, rb) = (self.requires_grad(), other.requires_grad());
        if sb.len() == 2 {
            let rows = av.len() / k;
            let mut out = vec![T::zero(); rows * n];
            gemm(rows, k, n, av.data(), false, bv.data(), false, &mut out, false);
            let mut shape = sa.clone();
            *shape.last_mut().unwrap() = n;
            let value = DenseArray::new(&shape, out)?;
            return self.graph().custom("matmul", &[self, other], value, move |g| {
                let ga = ra.then(|| {
                    let mut ga = vec![T::zero(); rows * k];
                    gemm(rows, n, k, g.data(), false, bv.data(), true, &mut ga, false);
                    DenseArray::new(av.shape(), ga).expect("matmul grad a")
                });
                let gb = rb.then(|| {
                    let mut gb = vec![T::zero(); k * n];
                    gemm(k, rows, n, av.data(), true, g.data(), false, &mut gb, false);
                    DenseArray::new(bv.shape(), gb).expect("matmul grad b")
                });
                vec![ga, gb]
            });
        }
        if sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            gemm(
                m,
                k,
                n,
                &av.data()[bi * m * k..],
                false,
                &bv.data()[bi * k * n..],
                false,
                &mut out[bi * m * n..(bi + 1) * m * n],
                false,
            );
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        let value = DenseArray::new(&shape, out)?;
        self.graph().custom("matmul", &[self, other], value, move |g| {
            let gd = g.data();
            let ga = ra.then(|| {
                let mut ga = vec![T::zero(); batch * m * k];
                for bi in 0..batch {
                    gemm(
                        m,
                        n,
                        k,
                        &gd[bi * m * n..],
                        false,
                        &bv.data()[bi * k * n..],
                        true,
                        &mut ga[bi * m * k..(bi + 1) * m * k],
                        false,
                    );
                }
                DenseArray::new(av.shape(), ga).expect("bmm grad a")
            });
            let gb = rb.then(|| {
                let mut gb = vec![T::zero(); batch * k * n];
                for bi in 0..batch {
                    gemm(
                        k,
                        m,
                        n,
                        &av.data()[bi * m * k..],
                        true,
                        &gd[bi * m * n..],
                        false,
                        &mut gb[bi * k * n..(bi + 1) * k * n],
                        false,
                    );
                }
                DenseArray::new(bv.shape(), gb).expect("bmm grad b")
            });
            vec![ga, gb]
        })
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'g, T>> {
        let value = self.value().permuted(axes)?;
        let mut inverse = vec![0; axes.len()];
        for (k, &a) in axes.iter().enumerate() {
            inverse[a] = k;
        }
        self.graph().custom("permute", &[self], value, move |g| {
            vec![Some(g.permuted(&inverse).expect("inverse permute"))]
        })
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'g, T>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(invalid("transpose", "rank must be at least 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(&axes)
    }
}

#[cfg(test)]
mod tests {
    use crate::{DenseArray, Graph};

    #[test]
    fn identity_matmul() {
        let g = Graph::<f64>::new();
        let a = DenseArray::from_fn(&[3, 3], |i| (i * i) as f64 - 2.0);
        let i3 = g.constant(DenseArray::eye(3));
        let out = i3.matmul(g.constant(a.clone())).unwrap();
        assert_eq!(*out.value(), a);
    }

    #[test]
    fn large_gemm_matches_naive() {
        let g = Graph::<f64>::new();
        let a = DenseArray::from_fn(&[20, 30], |i| ((i * 7) % 11) as f64 - 5.0);
        let b = DenseArray::from_fn(&[30, 25], |i| ((i * 3) % 13) as f64 - 6.0);
        let out = g.constant(a.clone()).matmul(g.constant(b.clone())).unwrap();
        for i in 0..20 {
            for j in 0..25 {
                let want: f64 = (0..30).map(|p| a.at(&[i, p]) * b.at(&[p, j])).sum();
                assert_eq!(out.value().at(&[i, j]), want);
            }
        }
    }
}
