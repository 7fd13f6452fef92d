//! Elementwise, matrix and indexing operations recorded on a [`Tape`].

use super::kernels::{matmul, matmul_nt, matmul_tn, sigmoid, softplus};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

impl Tape {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.record(
            &[a, b],
            value,
            Box::new(|g, _, _, needs| vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.record(
            &[a, b],
            value,
            Box::new(|g, _, _, needs| {
                vec![needs[0].then(|| g.clone()), needs[1].then(|| g.map(|v| -v))]
            }),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.record(
            &[a, b],
            value,
            Box::new(|g, x, _, needs| {
                vec![
                    needs[0].then(|| zip_map(g, x[1], |g, y| g * y)),
                    needs[1].then(|| zip_map(g, x[0], |g, y| g * y)),
                ]
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|v| v * s);
        self.record(&[a], value, Box::new(move |g, _, _, _| vec![Some(g.map(|v| v * s))]))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|v| v + s);
        self.record(&[a], value, Box::new(|g, _, _, _| vec![Some(g.clone())]))
    }

    /// `x[.., n] + r[n]` broadcast over all leading rows.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.value(r).len() != n {
            return Err(Error::shape("add_row", self.shape(x), self.shape(r)));
        }
        let mut value = self.value(x).clone();
        let row = self.value(r).data().to_vec();
        for chunk in value.data_mut().chunks_mut(n) {
            for (v, b) in chunk.iter_mut().zip(&row) {
                *v += b;
            }
        }
        Ok(self.record(
            &[x, r],
            value,
            Box::new(move |g, inp, _, needs| {
                let gr = needs[1].then(|| {
                    let mut acc = vec![0.0; n];
                    for chunk in g.data().chunks(n) {
                        for (a, v) in acc.iter_mut().zip(chunk) {
                            *a += v;
                        }
                    }
                    Tensor::from_parts(inp[1].shape().to_vec(), acc)
                });
                vec![needs[0].then(|| g.clone()), gr]
            }),
        ))
    }

    /// `x[.., n] ⊙ r[n]` broadcast over all leading rows.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.value(r).len() != n {
            return Err(Error::shape("mul_row", self.shape(x), self.shape(r)));
        }
        let mut value = self.value(x).clone();
        let row = self.value(r).data().to_vec();
        for chunk in value.data_mut().chunks_mut(n) {
            for (v, b) in chunk.iter_mut().zip(&row) {
                *v *= b;
            }
        }
        Ok(self.record(
            &[x, r],
            value,
            Box::new(move |g, inp, _, needs| {
                let (xv, rv) = (inp[0], inp[1]);
                let gx = needs[0].then(|| {
                    let mut d = g.clone();
                    for chunk in d.data_mut().chunks_mut(n) {
                        for (v, b) in chunk.iter_mut().zip(rv.data()) {
                            *v *= b;
                        }
                    }
                    d
                });
                let gr = needs[1].then(|| {
                    let mut acc = vec![0.0; n];
                    for (gc, xc) in g.data().chunks(n).zip(xv.data().chunks(n)) {
                        for j in 0..n {
                            acc[j] += gc[j] * xc[j];
                        }
                    }
                    Tensor::from_parts(rv.shape().to_vec(), acc)
                });
                vec![gx, gr]
            }),
        ))
    }

    /// Matrix product of `[m,k]` and `[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::from_parts(vec![m, n], data);
        Ok(self.record(
            &[a, b],
            value,
            Box::new(move |g, x, _, needs| {
                vec![
                    needs[0].then(|| {
                        Tensor::from_parts(vec![m, k], matmul_nt(g.data(), x[1].data(), m, n, k))
                    }),
                    needs[1].then(|| {
                        Tensor::from_parts(vec![k, n], matmul_tn(x[0].data(), g.data(), m, k, n))
                    }),
                ]
            }),
        ))
    }

    /// `y = x·w + b` with `x[.., in]`, `w[in, out]`, `b[out]`; leading
    /// dimensions of `x` are flattened into rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let sb = self.shape(b).to_vec();
        if sw.len() != 2 || sx.last() != Some(&sw[0]) {
            return Err(Error::shape("linear", &sx, &sw));
        }
        let (k, n) = (sw[0], sw[1]);
        if sb.iter().product::<usize>() != n {
            return Err(Error::shape("linear", &sw, &sb));
        }
        let m = self.value(x).rows();
        let mut data = matmul(self.value(x).data(), self.value(w).data(), m, k, n);
        let bias = self.value(b).data();
        for row in data.chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(bias) {
                *v += bv;
            }
        }
        let mut out_shape = sx.clone();
        *out_shape.last_mut().unwrap() = n;
        let value = Tensor::from_parts(out_shape, data);
        Ok(self.record(
            &[x, w, b],
            value,
            Box::new(move |g, inp, _, needs| {
                let gx = needs[0].then(|| {
                    Tensor::from_parts(sx.clone(), matmul_nt(g.data(), inp[1].data(), m, n, k))
                });
                let gw = needs[1].then(|| {
                    Tensor::from_parts(vec![k, n], matmul_tn(inp[0].data(), g.data(), m, k, n))
                });
                let gb = needs[2].then(|| {
                    let mut acc = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (a, v) in acc.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    Tensor::from_parts(sb.clone(), acc)
                });
                vec![gx, gw, gb]
            }),
        ))
    }

    /// Column-wise concatenation of `[m,p]` and `[m,q]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.rows() != tb.rows() {
            return Err(Error::shape("concat_cols", ta.shape(), tb.shape()));
        }
        let (m, p, q) = (ta.rows(), ta.cols(), tb.cols());
        let mut data = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            data.extend_from_slice(ta.row(i));
            data.extend_from_slice(tb.row(i));
        }
        let value = Tensor::from_parts(vec![m, p + q], data);
        Ok(self.record(
            &[a, b],
            value,
            Box::new(move |g, _, _, needs| {
                let mut ga = Vec::with_capacity(m * p);
                let mut gb = Vec::with_capacity(m * q);
                for row in g.data().chunks(p + q) {
                    ga.extend_from_slice(&row[..p]);
                    gb.extend_from_slice(&row[p..]);
                }
                vec![
                    needs[0].then(|| Tensor::from_parts(vec![m, p], ga)),
                    needs[1].then(|| Tensor::from_parts(vec![m, q], gb)),
                ]
            }),
        ))
    }

    /// Selects rows `x[idx[i], :]`; repeated indices accumulate gradient.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = (tx.rows(), tx.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::invalid(format!("gather_rows: index {bad} out of {m} rows")));
        }
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(tx.row(i));
        }
        let value = Tensor::from_parts(vec![idx.len(), n], data);
        let idx = idx.to_vec();
        let in_shape = tx.shape().to_vec();
        Ok(self.record(
            &[x],
            value,
            Box::new(move |g, _, _, _| {
                let mut acc = Tensor::zeros(&in_shape);
                let d = acc.data_mut();
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        d[i * n + j] += g.data()[r * n + j];
                    }
                }
                vec![Some(acc)]
            }),
        ))
    }

    /// Lookup of rows from an embedding table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// Reverses the order of rows of a 2-D tensor.
    pub fn reverse_rows(&mut self, x: Var) -> Result<Var> {
        let m = self.value(x).rows();
        let idx: Vec<usize> = (0..m).rev().collect();
        self.gather_rows(x, &idx)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 {
            return Err(Error::invalid(format!("transpose needs rank 2, got {:?}", tx.shape())));
        }
        let (m, n) = (tx.shape()[0], tx.shape()[1]);
        let value = Tensor::from_parts(vec![n, m], transpose_data(tx.data(), m, n));
        Ok(self.record(
            &[x],
            value,
            Box::new(move |g, _, _, _| {
                vec![Some(Tensor::from_parts(vec![m, n], transpose_data(g.data(), n, m)))]
            }),
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let in_shape = self.shape(x).to_vec();
        Ok(self.record(
            &[x],
            value,
            Box::new(move |g, _, _, _| vec![Some(Tensor::from_parts(in_shape.clone(), g.data().to_vec()))]),
        ))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.record(
            &[x],
            value,
            Box::new(|g, _, y, _| vec![Some(zip_map(g, y, |g, s| g * s * (1.0 - s)))]),
        )
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        self.record(
            &[x],
            value,
            Box::new(|g, inp, _, _| {
                vec![Some(zip_map(g, inp[0], |g, v| {
                    let s = sigmoid(v);
                    g * s * (1.0 + v * (1.0 - s))
                }))]
            }),
        )
    }

    /// Swish with unit gate; identical to [`Tape::silu`].
    pub fn swish(&mut self, x: Var) -> Var {
        self.silu(x)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let value = self.value(x).map(softplus);
        self.record(
            &[x],
            value,
            Box::new(|g, inp, _, _| vec![Some(zip_map(g, inp[0], |g, v| g * sigmoid(v)))]),
        )
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::exp);
        self.record(&[x], value, Box::new(|g, _, y, _| vec![Some(zip_map(g, y, |g, e| g * e))]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let shape = self.shape(x).to_vec();
        self.record(
            &[x],
            value,
            Box::new(move |g, _, _, _| vec![Some(Tensor::full(&shape, g.data()[0]))]),
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let n = ta.len() as f64;
        let value = Tensor::scalar(
            ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n,
        );
        Ok(self.record(
            &[a, b],
            value,
            Box::new(move |g, inp, _, needs| {
                let c = 2.0 * g.data()[0] / n;
                let d = zip_map(inp[0], inp[1], |x, y| c * (x - y));
                let neg = needs[1].then(|| d.map(|v| -v));
                vec![needs[0].then_some(d), neg]
            }),
        ))
    }
}

pub(crate) fn transpose_data(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}
