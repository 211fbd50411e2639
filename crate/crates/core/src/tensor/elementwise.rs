use super::{Element, Tape, Tensor, Var};
use crate::error::{Error, Result};

fn same_shape<T: Element>(tape: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", tape.shape(a), tape.shape(b)),
        ));
    }
    Ok(())
}

fn zip_map<T: Element>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

#[inline]
fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn softplus<T: Element>(x: T) -> T {
    // log(1 + e^x) without overflow
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl<T: Element> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.record("add", out, &[a, b], |g| vec![Some(g.grad.clone()), Some(g.grad.clone())])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "sub", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.record("sub", out, &[a, b], |g| {
            vec![Some(g.grad.clone()), Some(g.grad.map(|v| -v))]
        })
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.record("mul", out, &[a, b], |g| {
            vec![
                g.needs[0].then(|| zip_map(g.grad, g.inputs[1], |d, y| d * y)),
                g.needs[1].then(|| zip_map(g.grad, g.inputs[0], |d, x| d * x)),
            ]
        })
    }

    /// Sum of several same-shape tensors.
    ///
    /// Each output element adds its terms in ascending value order, which
    /// makes the result independent of the order of `terms`.
    pub fn sum_n(&mut self, terms: &[Var]) -> Result<Var> {
        let first = *terms
            .first()
            .ok_or_else(|| Error::shape("sum_n", "no terms"))?;
        for &t in &terms[1..] {
            same_shape(self, "sum_n", first, t)?;
        }
        let numel = self.value(first).numel();
        let mut scratch = Vec::with_capacity(terms.len());
        let data = (0..numel)
            .map(|i| {
                scratch.clear();
                scratch.extend(terms.iter().map(|&t| self.value(t).data()[i]));
                scratch.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
                scratch.iter().fold(T::zero(), |acc, &v| acc + v)
            })
            .collect();
        let out = Tensor::new(self.shape(first).to_vec(), data)?;
        let n = terms.len();
        self.record("sum_n", out, terms, move |g| vec![Some(g.grad.clone()); n])
    }

    /// Multiplies by a compile-time constant.
    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let f = T::lit(factor);
        let out = self.value(x).map(|v| v * f);
        self.record("scale", out, &[x], move |g| vec![Some(g.grad.map(|v| v * f))])
    }

    /// Multiplies every element of `x` by the single element of `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("mul_scalar", format!("scalar expected, got {:?}", self.shape(s))));
        }
        let k = self.value(s).item();
        let out = self.value(x).map(|v| v * k);
        self.record("mul_scalar", out, &[x, s], |g| {
            let k = g.inputs[1].item();
            vec![
                g.needs[0].then(|| g.grad.map(|v| v * k)),
                g.needs[1].then(|| {
                    let dot = g
                        .grad
                        .data()
                        .iter()
                        .zip(g.inputs[0].data())
                        .fold(T::zero(), |acc, (&d, &x)| acc + d * x);
                    Tensor::scalar(dot)
                }),
            ]
        })
    }

    /// Picks element `index` of a 1-D tensor as a `[1]` tensor.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let v = self.value(x);
        if v.ndim() != 1 || index >= v.numel() {
            return Err(Error::shape("select", format!("index {index} into {:?}", v.shape())));
        }
        let out = Tensor::scalar(v.data()[index]);
        self.record("select", out, &[x], move |g| {
            let mut d = Tensor::zeros(g.inputs[0].shape().to_vec());
            d.data_mut()[index] = g.grad.item();
            vec![Some(d)]
        })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.record("relu", out, &[x], |g| {
            vec![Some(zip_map(g.grad, g.inputs[0], |d, x| if x > T::zero() { d } else { T::zero() }))]
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.record("sigmoid", out, &[x], |g| {
            vec![Some(zip_map(g.grad, g.output, |d, y| d * y * (T::one() - y)))]
        })
    }

    /// `ln(1 + e^x)`, always positive.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(softplus);
        self.record("softplus", out, &[x], |g| {
            vec![Some(zip_map(g.grad, g.inputs[0], |d, x| d * sigmoid(x)))]
        })
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.exp());
        self.record("exp", out, &[x], |g| vec![Some(zip_map(g.grad, g.output, |d, y| d * y))])
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().fold(T::zero(), |a, &v| a + v);
        self.record("sum", Tensor::scalar(total), &[x], |g| {
            vec![Some(Tensor::full(g.inputs[0].shape().to_vec(), g.grad.item()))]
        })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }
}
