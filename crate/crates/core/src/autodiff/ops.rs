//! Elementwise, broadcast, reduction, shape and matrix operations.

use std::rc::Rc;

use super::{gemm, Var};

impl<'t> Var<'t> {
    fn same_shape(&self, other: &Var<'t>, op: &str) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "{op}: operands on different tapes"
        );
        assert_eq!(self.shape(), other.shape(), "{op}: shape mismatch");
    }

    fn unary(
        self,
        f: impl Fn(f64) -> f64,
        // derivative given (input, output)
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'t> {
        let x = self.value();
        let y: Vec<f64> = x.iter().map(|&v| f(v)).collect();
        let yv = Rc::new(y.clone());
        let id = self.id;
        self.tape.push(self.shape(), y, &[self], move |g, sink| {
            let dx: Vec<f64> = g
                .iter()
                .zip(x.iter().zip(yv.iter()))
                .map(|(g, (&x, &y))| g * df(x, y))
                .collect();
            sink.add_owned(id, dx);
        })
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.same_shape(&other, "add");
        let (a, b) = (self.value(), other.value());
        let y = a.iter().zip(b.iter()).map(|(a, b)| a + b).collect();
        let (ia, ib) = (self.id, other.id);
        self.tape.push(self.shape(), y, &[self, other], move |g, sink| {
            sink.add(ia, g);
            sink.add(ib, g);
        })
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.same_shape(&other, "sub");
        let (a, b) = (self.value(), other.value());
        let y = a.iter().zip(b.iter()).map(|(a, b)| a - b).collect();
        let (ia, ib) = (self.id, other.id);
        self.tape.push(self.shape(), y, &[self, other], move |g, sink| {
            sink.add(ia, g);
            if sink.wants(ib) {
                sink.add_owned(ib, g.iter().map(|v| -v).collect());
            }
        })
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.same_shape(&other, "mul");
        let (a, b) = (self.value(), other.value());
        let y = a.iter().zip(b.iter()).map(|(a, b)| a * b).collect();
        let (ia, ib) = (self.id, other.id);
        self.tape.push(self.shape(), y, &[self, other], move |g, sink| {
            if sink.wants(ia) {
                sink.add_owned(ia, g.iter().zip(b.iter()).map(|(g, b)| g * b).collect());
            }
            if sink.wants(ib) {
                sink.add_owned(ib, g.iter().zip(a.iter()).map(|(g, a)| g * a).collect());
            }
        })
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        self.same_shape(&other, "div");
        let (a, b) = (self.value(), other.value());
        let y: Vec<f64> = a.iter().zip(b.iter()).map(|(a, b)| a / b).collect();
        let (ia, ib) = (self.id, other.id);
        self.tape.push(self.shape(), y, &[self, other], move |g, sink| {
            if sink.wants(ia) {
                sink.add_owned(ia, g.iter().zip(b.iter()).map(|(g, b)| g / b).collect());
            }
            if sink.wants(ib) {
                let d = g
                    .iter()
                    .zip(a.iter().zip(b.iter()))
                    .map(|(g, (a, b))| -g * a / (b * b))
                    .collect();
                sink.add_owned(ib, d);
            }
        })
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let y = self.value().iter().map(|v| v * c).collect();
        let id = self.id;
        self.tape.push(self.shape(), y, &[self], move |g, sink| {
            sink.add_owned(id, g.iter().map(|v| v * c).collect());
        })
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let y = self.value().iter().map(|v| v + c).collect();
        let id = self.id;
        self.tape
            .push(self.shape(), y, &[self], move |g, sink| sink.add(id, g))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    /// Multiplies every element by the scalar node `s`.
    pub fn mul_scalar(self, s: Var<'t>) -> Var<'t> {
        assert_eq!(s.len(), 1, "mul_scalar: expected a scalar");
        let (x, sv) = (self.value(), s.value());
        let c = sv[0];
        let y = x.iter().map(|v| v * c).collect();
        let (ix, is) = (self.id, s.id);
        self.tape.push(self.shape(), y, &[self, s], move |g, sink| {
            if sink.wants(ix) {
                sink.add_owned(ix, g.iter().map(|v| v * c).collect());
            }
            if sink.wants(is) {
                let d: f64 = g.iter().zip(x.iter()).map(|(g, x)| g * x).sum();
                sink.add(is, &[d]);
            }
        })
    }

    /// `[M, N] + [N]`, broadcasting the row over every row.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        let (m, n) = self.rows_cols();
        assert_eq!(row.len(), n, "add_row: width mismatch");
        let (x, r) = (self.value(), row.value());
        let mut y = x.as_ref().clone();
        for chunk in y.chunks_mut(n) {
            for (v, b) in chunk.iter_mut().zip(r.iter()) {
                *v += b;
            }
        }
        let (ix, ir) = (self.id, row.id);
        self.tape.push(self.shape(), y, &[self, row], move |g, sink| {
            sink.add(ix, g);
            if sink.wants(ir) {
                let mut d = vec![0.0; n];
                for chunk in g.chunks(n).take(m) {
                    for (a, b) in d.iter_mut().zip(chunk) {
                        *a += b;
                    }
                }
                sink.add_owned(ir, d);
            }
        })
    }

    /// `[M, N] * [N]`, broadcasting the row over every row.
    pub fn mul_row(self, row: Var<'t>) -> Var<'t> {
        let (_, n) = self.rows_cols();
        assert_eq!(row.len(), n, "mul_row: width mismatch");
        let (x, r) = (self.value(), row.value());
        let mut y = x.as_ref().clone();
        for chunk in y.chunks_mut(n) {
            for (v, b) in chunk.iter_mut().zip(r.iter()) {
                *v *= b;
            }
        }
        let (ix, ir) = (self.id, row.id);
        self.tape.push(self.shape(), y, &[self, row], move |g, sink| {
            if sink.wants(ix) {
                let mut d = g.to_vec();
                for chunk in d.chunks_mut(n) {
                    for (v, b) in chunk.iter_mut().zip(r.iter()) {
                        *v *= b;
                    }
                }
                sink.add_owned(ix, d);
            }
            if sink.wants(ir) {
                let mut d = vec![0.0; n];
                for (gc, xc) in g.chunks(n).zip(x.chunks(n)) {
                    for j in 0..n {
                        d[j] += gc[j] * xc[j];
                    }
                }
                sink.add_owned(ir, d);
            }
        })
    }

    /// Matrix product `[M, K] x [K, N]`.
    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let (m, k) = self.rows_cols();
        let (k2, n) = other.rows_cols();
        assert_eq!(k, k2, "matmul: inner dimensions differ");
        let (a, b) = (self.value(), other.value());
        let mut y = vec![0.0; m * n];
        gemm(m, k, n, &a, false, &b, false, &mut y, 0.0);
        let (ia, ib) = (self.id, other.id);
        self.tape.push(vec![m, n], y, &[self, other], move |g, sink| {
            if sink.wants(ia) {
                // dA = G Bᵀ
                let mut d = vec![0.0; m * k];
                gemm(m, n, k, g, false, &b, true, &mut d, 0.0);
                sink.add_owned(ia, d);
            }
            if sink.wants(ib) {
                // dB = Aᵀ G
                let mut d = vec![0.0; k * n];
                gemm(k, m, n, &a, true, g, false, &mut d, 0.0);
                sink.add_owned(ib, d);
            }
        })
    }

    /// Affine layer `x W + b` for `x: [N, In]`, `W: [In, Out]`, `b: [Out]`.
    pub fn linear(self, weight: Var<'t>, bias: Var<'t>) -> Var<'t> {
        self.matmul(weight).add_row(bias)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(f64::sqrt, |_, y| if y > 0.0 { 0.5 / y } else { 0.0 })
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    /// Absolute value; the subgradient at 0 is 0.
    pub fn abs(self) -> Var<'t> {
        self.unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    /// `temperature * ln(1 + exp(x / temperature))`, computed stably.
    pub fn softplus(self, temperature: f64) -> Var<'t> {
        self.unary(
            move |x| {
                let z = x / temperature;
                temperature * (z.max(0.0) + (-z.abs()).exp().ln_1p())
            },
            move |x, _| sigmoid(x / temperature),
        )
    }

    /// `2 * sigmoid(x)^ln(10) + 1e-7`: positive, monotone, bounded output
    /// nonlinearity for magnitudes and amplitudes.
    pub fn exp_sigmoid(self) -> Var<'t> {
        self.unary(exp_sigmoid, |x, _| {
            let s = sigmoid(x);
            2.0 * std::f64::consts::LN_10 * s.powf(std::f64::consts::LN_10) * (1.0 - s)
        })
    }

    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let total = x.iter().sum();
        let (n, id) = (x.len(), self.id);
        self.tape.push(vec![], vec![total], &[self], move |g, sink| {
            sink.add_owned(id, vec![g[0]; n]);
        })
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.len();
        self.sum().scale(1.0 / n as f64)
    }

    /// Mean over rows of `[M, N]`, giving `[N]`.
    pub fn mean_rows(self) -> Var<'t> {
        let (m, n) = self.rows_cols();
        let x = self.value();
        let mut y = vec![0.0; n];
        for chunk in x.chunks(n) {
            for (a, b) in y.iter_mut().zip(chunk) {
                *a += b;
            }
        }
        let inv = 1.0 / m as f64;
        y.iter_mut().for_each(|v| *v *= inv);
        let id = self.id;
        self.tape.push(vec![n], y, &[self], move |g, sink| {
            let mut d = Vec::with_capacity(m * n);
            for _ in 0..m {
                d.extend(g.iter().map(|v| v * inv));
            }
            sink.add_owned(id, d);
        })
    }

    /// Sum over columns of `[M, N]`, giving `[M]`.
    pub fn sum_cols(self) -> Var<'t> {
        let (m, n) = self.rows_cols();
        let x = self.value();
        let y: Vec<f64> = x.chunks(n).map(|c| c.iter().sum()).collect();
        let id = self.id;
        self.tape.push(vec![m], y, &[self], move |g, sink| {
            let mut d = Vec::with_capacity(m * n);
            for gi in g {
                d.extend(std::iter::repeat(*gi).take(n));
            }
            sink.add_owned(id, d);
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.len(),
            "reshape: size mismatch"
        );
        let y = self.to_vec();
        let id = self.id;
        self.tape
            .push(shape.to_vec(), y, &[self], move |g, sink| sink.add(id, g))
    }

    /// Contiguous range of a flattened tensor, as a 1-D result.
    pub fn narrow(self, start: usize, len: usize) -> Var<'t> {
        let x = self.value();
        assert!(start + len <= x.len(), "narrow: range out of bounds");
        let total = x.len();
        let y = x[start..start + len].to_vec();
        let id = self.id;
        self.tape.push(vec![len], y, &[self], move |g, sink| {
            if sink.wants(id) {
                let mut d = vec![0.0; total];
                d[start..start + len].copy_from_slice(g);
                sink.add_owned(id, d);
            }
        })
    }

    /// Element `i` of a flattened tensor as a scalar.
    pub fn at(self, i: usize) -> Var<'t> {
        self.narrow(i, 1).reshape(&[])
    }

    /// Columns `[start, end)` of a `[M, N]` matrix.
    pub fn slice_cols(self, start: usize, end: usize) -> Var<'t> {
        let (m, n) = self.rows_cols();
        assert!(start <= end && end <= n, "slice_cols: bad range");
        let w = end - start;
        let x = self.value();
        let mut y = Vec::with_capacity(m * w);
        for row in x.chunks(n) {
            y.extend_from_slice(&row[start..end]);
        }
        let id = self.id;
        self.tape.push(vec![m, w], y, &[self], move |g, sink| {
            if sink.wants(id) {
                let mut d = vec![0.0; m * n];
                for (r, gr) in g.chunks(w).enumerate() {
                    d[r * n + start..r * n + end].copy_from_slice(gr);
                }
                sink.add_owned(id, d);
            }
        })
    }

    /// Concatenates `[M, N_i]` matrices along columns, or 1-D / scalar
    /// tensors end to end.
    pub fn concat(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat: no inputs");
        let tape = parts[0].tape;
        let two_d = parts[0].shape().len() == 2;
        if !two_d {
            let mut y = Vec::new();
            let mut spans = Vec::new();
            for p in parts {
                let v = p.value();
                spans.push((p.id, y.len(), v.len()));
                y.extend_from_slice(&v);
            }
            let n = y.len();
            return tape.push(vec![n], y, parts, move |g, sink| {
                for &(id, off, len) in &spans {
                    sink.add(id, &g[off..off + len]);
                }
            });
        }
        let m = parts[0].rows_cols().0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let (pm, pn) = p.rows_cols();
                assert_eq!(pm, m, "concat: row counts differ");
                pn
            })
            .collect();
        let total: usize = widths.iter().sum();
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let mut y = Vec::with_capacity(m * total);
        for r in 0..m {
            for (v, &w) in values.iter().zip(&widths) {
                y.extend_from_slice(&v[r * w..(r + 1) * w]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        tape.push(vec![m, total], y, parts, move |g, sink| {
            let mut off = 0;
            for (&id, &w) in ids.iter().zip(&widths) {
                if sink.wants(id) {
                    let mut d = Vec::with_capacity(m * w);
                    for r in 0..m {
                        d.extend_from_slice(&g[r * total + off..r * total + off + w]);
                    }
                    sink.add_owned(id, d);
                }
                off += w;
            }
        })
    }

    /// Row-wise layer normalization without affine terms.
    pub fn layer_norm(self, eps: f64) -> Var<'t> {
        let (_, n) = self.rows_cols();
        let x = self.value();
        let mut y = Vec::with_capacity(x.len());
        let mut inv_std = Vec::new();
        for row in x.chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            y.extend(row.iter().map(|v| (v - mean) * is));
        }
        let yv = Rc::new(y.clone());
        let id = self.id;
        self.tape.push(self.shape(), y, &[self], move |g, sink| {
            let mut d = Vec::with_capacity(g.len());
            for ((gr, yr), is) in g.chunks(n).zip(yv.chunks(n)).zip(&inv_std) {
                let mg = gr.iter().sum::<f64>() / n as f64;
                let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                d.extend(gr.iter().zip(yr).map(|(g, y)| is * (g - mg - y * mgy)));
            }
            sink.add_owned(id, d);
        })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn exp_sigmoid(x: f64) -> f64 {
    2.0 * sigmoid(x).powf(std::f64::consts::LN_10) + 1e-7
}
