use crate::array::{broadcast_shape, broadcast_strides, for_each_strided, reduce_to_shape, DenseArray};
use crate::error::{invalid, mismatch, Result};
use crate::graph::Var;
use crate::scalar::Scalar;

type BinFn<T> = fn(T, T) -> T;
type BinGrad<T> = fn(T, T, T) -> T;

fn binary<'g, T: Scalar>(
    op: &'static str,
    a: Var<'g, T>,
    b: Var<'g, T>,
    f: BinFn<T>,
    da: BinGrad<T>,
    db: BinGrad<T>,
) -> Result<Var<'g, T>> {
    let av = a.value();
    let bv = b.value();
    let out_shape = broadcast_shape(av.shape(), bv.shape())
        .ok_or_else(|| mismatch(op, av.shape(), bv.shape()))?;
    let n: usize = out_shape.iter().product();
    let mut out = vec![T::zero(); n];
    let same = av.shape() == bv.shape();
    if same {
        for ((o, &x), &y) in out.iter_mut().zip(av.data()).zip(bv.data()) {
            *o = f(x, y);
        }
    } else {
        let sa = broadcast_strides(av.shape(), &out_shape);
        let sb = broadcast_strides(bv.shape(), &out_shape);
        let (ad, bd) = (av.data(), bv.data());
        for_each_strided(&out_shape, &sa, &sb, |i, ia, ib| out[i] = f(ad[ia], bd[ib]));
    }
    let value = DenseArray::new(&out_shape, out)?;
    let (ra, rb) = (a.requires_grad(), b.requires_grad());
    a.graph().custom(op, &[a, b], value, move |g| {
        let gd = g.data();
        let (ad, bd) = (av.data(), bv.data());
        let mut ga = if ra { vec![T::zero(); gd.len()] } else { Vec::new() };
        let mut gb = if rb { vec![T::zero(); gd.len()] } else { Vec::new() };
        if same {
            for i in 0..gd.len() {
                if ra {
                    ga[i] = da(ad[i], bd[i], gd[i]);
                }
                if rb {
                    gb[i] = db(ad[i], bd[i], gd[i]);
                }
            }
        } else {
            let sa = broadcast_strides(av.shape(), g.shape());
            let sb = broadcast_strides(bv.shape(), g.shape());
            for_each_strided(g.shape(), &sa, &sb, |i, ia, ib| {
                if ra {
                    ga[i] = da(ad[ia], bd[ib], gd[i]);
                }
                if rb {
                    gb[i] = db(ad[ia], bd[ib], gd[i]);
                }
            });
        }
        let wrap = |v: Vec<T>, shape: &[usize]| {
            let full = DenseArray::new(g.shape(), v).expect("grad shape");
            Some(reduce_to_shape(&full, shape))
        };
        vec![
            if ra { wrap(ga, av.shape()) } else { None },
            if rb { wrap(gb, bv.shape()) } else { None },
        ]
    })
}

fn unary<'g, T: Scalar>(
    op: &'static str,
    x: Var<'g, T>,
    f: fn(T) -> T,
    // (input, output, upstream) -> input gradient
    df: fn(T, T, T) -> T,
) -> Result<Var<'g, T>> {
    let xv = x.value();
    let value = xv.map(f);
    let yv = std::rc::Rc::new(value.clone());
    x.graph().custom(op, &[x], value, move |g| {
        let data = xv
            .data()
            .iter()
            .zip(yv.data())
            .zip(g.data())
            .map(|((&xi, &yi), &gi)| df(xi, yi, gi))
            .collect();
        vec![Some(DenseArray::new(g.shape(), data).expect("unary grad"))]
    })
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        binary("add", self, other, |a, b| a + b, |_, _, g| g, |_, _, g| g)
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        binary("sub", self, other, |a, b| a - b, |_, _, g| g, |_, _, g| -g)
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        binary("mul", self, other, |a, b| a * b, |_, b, g| g * b, |a, _, g| g * a)
    }

    pub fn div(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        binary(
            "div",
            self,
            other,
            |a, b| a / b,
            |_, b, g| g / b,
            |a, b, g| -g * a / (b * b),
        )
    }

    pub fn mul_scalar(self, s: f64) -> Result<Var<'g, T>> {
        let s = T::lit(s);
        let value = self.value().map(|x| x * s);
        self.graph()
            .custom("scalar-mul", &[self], value, move |g| vec![Some(g.map(|x| x * s))])
    }

    pub fn add_scalar(self, s: f64) -> Result<Var<'g, T>> {
        let s = T::lit(s);
        let value = self.value().map(|x| x + s);
        self.graph()
            .custom("scalar-add", &[self], value, |g| vec![Some(g.clone())])
    }

    pub fn neg(self) -> Result<Var<'g, T>> {
        self.mul_scalar(-1.0)
    }

    /// Multiplies by a constant array (broadcast), without differentiating it.
    pub fn mul_const(self, c: &DenseArray<T>) -> Result<Var<'g, T>> {
        let c = self.graph().constant(c.clone());
        self.mul(c)
    }

    pub fn add_const(self, c: &DenseArray<T>) -> Result<Var<'g, T>> {
        let c = self.graph().constant(c.clone());
        self.add(c)
    }

    pub fn relu(self) -> Result<Var<'g, T>> {
        unary(
            "relu",
            self,
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _, g| if x > T::zero() { g } else { T::zero() },
        )
    }

    pub fn elu(self) -> Result<Var<'g, T>> {
        unary(
            "elu",
            self,
            |x| if x > T::zero() { x } else { x.exp() - T::one() },
            |x, y, g| if x > T::zero() { g } else { g * (y + T::one()) },
        )
    }

    pub fn sigmoid(self) -> Result<Var<'g, T>> {
        unary(
            "sigmoid",
            self,
            |x| {
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            },
            |_, y, g| g * y * (T::one() - y),
        )
    }

    pub fn exp(self) -> Result<Var<'g, T>> {
        unary("exp", self, |x| x.exp(), |_, y, g| g * y)
    }

    pub fn tanh(self) -> Result<Var<'g, T>> {
        unary("tanh", self, |x| x.tanh(), |_, y, g| g * (T::one() - y * y))
    }

    pub fn abs(self) -> Result<Var<'g, T>> {
        unary("abs", self, |x| x.abs(), |x, _, g| {
            if x > T::zero() {
                g
            } else if x < T::zero() {
                -g
            } else {
                T::zero()
            }
        })
    }

    pub fn square(self) -> Result<Var<'g, T>> {
        unary("square", self, |x| x * x, |x, _, g| g * (x + x))
    }
}

/// Elementwise sum of equally shaped inputs. Each element is accumulated in
/// f64 over the sorted terms, so the result does not depend on input order.
pub fn sum_n<'g, T: Scalar>(vars: &[Var<'g, T>]) -> Result<Var<'g, T>> {
    let first = vars.first().ok_or_else(|| invalid("sum-n", "no inputs"))?;
    let values: Vec<_> = vars.iter().map(|v| v.value()).collect();
    let shape = values[0].shape().to_vec();
    if let Some(v) = values.iter().find(|v| v.shape() != shape.as_slice()) {
        return Err(mismatch("sum-n", &shape, v.shape()));
    }
    let mut terms = vec![0.0f64; values.len()];
    let out = (0..values[0].len())
        .map(|i| {
            for (t, v) in terms.iter_mut().zip(&values) {
                *t = v.data()[i].as_f64();
            }
            terms.sort_by(f64::total_cmp);
            T::lit(terms.iter().sum())
        })
        .collect();
    let value = DenseArray::new(&shape, out)?;
    let n = vars.len();
    first.graph().custom("sum-n", vars, value, move |g| vec![Some(g.clone()); n])
}

#[cfg(test)]
mod tests {
    use crate::{DenseArray, Graph};

    #[test]
    fn sum_n_ignores_order() {
        let g = Graph::<f32>::new();
        let vals = [1e8f32, 1.0, -1e8, 3.5e-3];
        let vars: Vec<_> = vals.iter().map(|&x| g.leaf(DenseArray::from_f64(&[1], &[x as f64]).unwrap())).collect();
        let a = super::sum_n(&vars).unwrap().value().data()[0];
        let rev: Vec<_> = vars.iter().rev().copied().collect();
        let b = super::sum_n(&rev).unwrap().value().data()[0];
        assert_eq!(a, b);
        assert!((a - 1.0035).abs() < 1e-6);
        let grads = g.gradients(super::sum_n(&vars).unwrap().sum_all().unwrap()).unwrap();
        assert_eq!(grads.get(vars[2]).unwrap().data(), &[1.0]);
    }

    #[test]
    fn square_sum_gradient() {
        let g = Graph::<f64>::new();
        let x = g.leaf(DenseArray::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap());
        let loss = x.mul(x).unwrap().sum_all().unwrap();
        let grads = g.gradients(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let g = Graph::<f64>::new();
        let x = g.leaf(DenseArray::zeros(&[1]));
        let loss = x.sigmoid().unwrap().sum_all().unwrap();
        let grads = g.gradients(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.25]);
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let g = Graph::<f64>::new();
        let a = g.leaf(DenseArray::zeros(&[2, 3]));
        let b = g.leaf(DenseArray::zeros(&[3]));
        let loss = a.add(b).unwrap().sum_all().unwrap();
        let grads = g.gradients(loss).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert_eq!(grads.get(a).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let g = Graph::<f32>::new();
        let a = g.constant(DenseArray::zeros(&[2, 3]));
        let b = g.constant(DenseArray::zeros(&[4]));
        let err = a.add(b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[2, 3]") && err.contains("[4]"), "{err}");
    }
}
