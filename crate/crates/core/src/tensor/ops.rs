use super::kernels::{gemm, gemm_nt, gemm_tn};
use super::{Result, Tensor, TensorError};

const LN_EPS: f64 = 1e-5;

fn same_dims(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(TensorError::Shape {
            op,
            lhs: a.dims().to_vec(),
            rhs: b.dims().to_vec(),
        });
    }
    Ok(())
}

fn track(t: &Tensor) -> bool {
    t.is_tracked()
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn last_dim(t: &Tensor) -> usize {
    *t.dims().last().unwrap()
}

impl Tensor {
    // ---- elementwise binary -------------------------------------------------

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_dims("add", self, other)?;
        let (ta, tb) = (track(self), track(other));
        Tensor::from_op(
            "add",
            self.dims().to_vec(),
            zip_map(self.data(), other.data(), |x, y| x + y),
            vec![self.clone(), other.clone()],
            Box::new(move |_, g| vec![ta.then(|| g.to_vec()), tb.then(|| g.to_vec())]),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_dims("sub", self, other)?;
        let (ta, tb) = (track(self), track(other));
        Tensor::from_op(
            "sub",
            self.dims().to_vec(),
            zip_map(self.data(), other.data(), |x, y| x - y),
            vec![self.clone(), other.clone()],
            Box::new(move |_, g| {
                vec![
                    ta.then(|| g.to_vec()),
                    tb.then(|| g.iter().map(|v| -v).collect()),
                ]
            }),
        )
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_dims("mul", self, other)?;
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            "mul",
            self.dims().to_vec(),
            zip_map(self.data(), other.data(), |x, y| x * y),
            vec![self.clone(), other.clone()],
            Box::new(move |_, g| {
                vec![
                    track(&a).then(|| zip_map(g, b.data(), |g, y| g * y)),
                    track(&b).then(|| zip_map(g, a.data(), |g, x| g * x)),
                ]
            }),
        )
    }

    /// Elementwise maximum; ties route the gradient to `self`.
    pub fn maximum(&self, other: &Tensor) -> Result<Tensor> {
        same_dims("maximum", self, other)?;
        let pick: Vec<bool> = zip_map(self.data(), other.data(), |x, y| f64::from(x >= y))
            .into_iter()
            .map(|v| v > 0.5)
            .collect();
        let (ta, tb) = (track(self), track(other));
        Tensor::from_op(
            "maximum",
            self.dims().to_vec(),
            zip_map(self.data(), other.data(), f64::max),
            vec![self.clone(), other.clone()],
            Box::new(move |_, g| {
                vec![
                    ta.then(|| g.iter().zip(&pick).map(|(g, &p)| if p { *g } else { 0.0 }).collect()),
                    tb.then(|| g.iter().zip(&pick).map(|(g, &p)| if p { 0.0 } else { *g }).collect()),
                ]
            }),
        )
    }

    /// Adds `bias[n]` to every row of a tensor whose last dimension is `n`.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let n = last_dim(self);
        if bias.numel() != n {
            return Err(TensorError::Shape {
                op: "add_bias",
                lhs: self.dims().to_vec(),
                rhs: bias.dims().to_vec(),
            });
        }
        let data: Vec<f64> = self
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(bias.data()).map(|(x, b)| x + b))
            .collect();
        let (tx, tb) = (track(self), track(bias));
        Tensor::from_op(
            "add_bias",
            self.dims().to_vec(),
            data,
            vec![self.clone(), bias.clone()],
            Box::new(move |_, g| {
                let gb = tb.then(|| {
                    let mut acc = vec![0.0; n];
                    for row in g.chunks(n) {
                        acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    acc
                });
                vec![tx.then(|| g.to_vec()), gb]
            }),
        )
    }

    /// Multiplies row `i` of `self[m×n]` by `scales[i]`.
    pub fn scale_rows(&self, scales: &Tensor) -> Result<Tensor> {
        let (m, n) = self.shape2("scale_rows")?;
        if scales.numel() != m {
            return Err(TensorError::Shape {
                op: "scale_rows",
                lhs: self.dims().to_vec(),
                rhs: scales.dims().to_vec(),
            });
        }
        let data: Vec<f64> = (0..m)
            .flat_map(|i| self.row(i).iter().map(move |x| x * scales.data()[i]).collect::<Vec<_>>())
            .collect();
        let (x, s) = (self.clone(), scales.clone());
        Tensor::from_op(
            "scale_rows",
            self.dims().to_vec(),
            data,
            vec![self.clone(), scales.clone()],
            Box::new(move |_, g| {
                let gx = track(&x).then(|| {
                    (0..m)
                        .flat_map(|i| g[i * n..(i + 1) * n].iter().map(|v| v * s.data()[i]).collect::<Vec<_>>())
                        .collect()
                });
                let gs = track(&s).then(|| {
                    (0..m)
                        .map(|i| g[i * n..(i + 1) * n].iter().zip(x.row(i)).map(|(a, b)| a * b).sum())
                        .collect()
                });
                vec![gx, gs]
            }),
        )
    }

    // ---- scalar affine ------------------------------------------------------

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        Tensor::from_op(
            "scale",
            self.dims().to_vec(),
            self.data().iter().map(|x| x * c).collect(),
            vec![self.clone()],
            Box::new(move |_, g| vec![Some(g.iter().map(|v| v * c).collect())]),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        Tensor::from_op(
            "add_scalar",
            self.dims().to_vec(),
            self.data().iter().map(|x| x + c).collect(),
            vec![self.clone()],
            Box::new(|_, g| vec![Some(g.to_vec())]),
        )
    }

    /// `c - self`
    pub fn rsub_scalar(&self, c: f64) -> Result<Tensor> {
        Tensor::from_op(
            "rsub_scalar",
            self.dims().to_vec(),
            self.data().iter().map(|x| c - x).collect(),
            vec![self.clone()],
            Box::new(|_, g| vec![Some(g.iter().map(|v| -v).collect())]),
        )
    }

    // ---- linear algebra -----------------------------------------------------

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.shape2("matmul")?;
        let (k2, n) = other.shape2("matmul")?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: self.dims().to_vec(),
                rhs: other.dims().to_vec(),
            });
        }
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            "matmul",
            vec![m, n],
            gemm(self.data(), other.data(), m, k, n),
            vec![self.clone(), other.clone()],
            Box::new(move |_, g| {
                vec![
                    track(&a).then(|| gemm_nt(g, b.data(), m, n, k)),
                    track(&b).then(|| gemm_tn(a.data(), g, k, m, n)),
                ]
            }),
        )
    }

    /// `self[m×k] · other[n×k]ᵀ`
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.shape2("matmul_nt")?;
        let (n, k2) = other.shape2("matmul_nt")?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul_nt",
                lhs: self.dims().to_vec(),
                rhs: other.dims().to_vec(),
            });
        }
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            "matmul_nt",
            vec![m, n],
            gemm_nt(self.data(), other.data(), m, k, n),
            vec![self.clone(), other.clone()],
            Box::new(move |_, g| {
                vec![
                    track(&a).then(|| gemm(g, b.data(), m, n, k)),
                    track(&b).then(|| gemm_tn(g, a.data(), n, m, k)),
                ]
            }),
        )
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.shape2("transpose")?;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data()[i * n + j];
            }
        }
        Tensor::from_op(
            "transpose",
            vec![n, m],
            data,
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        gx[i * n + j] = g[j * m + i];
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    // ---- reductions ---------------------------------------------------------

    pub fn sum(&self) -> Result<Tensor> {
        let n = self.numel();
        Tensor::from_op(
            "sum",
            vec![1],
            vec![self.data().iter().sum()],
            vec![self.clone()],
            Box::new(move |_, g| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Mean over the rows of `self[m×n]`, giving `[n]`.
    pub fn mean_rows(&self) -> Result<Tensor> {
        let (m, n) = self.shape2("mean_rows")?;
        let mut acc = vec![0.0; n];
        for row in self.data().chunks(n) {
            acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
        }
        let inv = 1.0 / m as f64;
        acc.iter_mut().for_each(|a| *a *= inv);
        Tensor::from_op(
            "mean_rows",
            vec![n],
            acc,
            vec![self.clone()],
            Box::new(move |_, g| {
                let row: Vec<f64> = g.iter().map(|v| v * inv).collect();
                vec![Some(row.iter().copied().cycle().take(m * n).collect())]
            }),
        )
    }

    // ---- pointwise nonlinearities ------------------------------------------

    fn unary(
        &self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Result<Tensor> {
        let x = self.clone();
        Tensor::from_op(
            op,
            self.dims().to_vec(),
            self.data().iter().map(|&v| f(v)).collect(),
            vec![self.clone()],
            Box::new(move |y, g| {
                vec![Some(
                    g.iter()
                        .zip(x.data())
                        .zip(y)
                        .map(|((g, &x), &y)| g * df(x, y))
                        .collect(),
                )]
            }),
        )
    }

    /// Logistic function, kept strictly inside (0, 1).
    pub fn sigmoid(&self) -> Result<Tensor> {
        self.unary("sigmoid", sigmoid_scalar, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&self) -> Result<Tensor> {
        self.unary("tanh", f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.unary("relu", |x| x.max(0.0), |x, _| f64::from(x > 0.0))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Result<Tensor> {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        self.unary(
            "gelu",
            |x| 0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh()),
            |x, _| {
                let u = C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
            },
        )
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.unary("exp", f64::exp, |_, y| y)
    }

    /// `ln(clamp(x, lo, hi))`; the gradient is zero where the clamp is active.
    pub fn ln_clamped(&self, lo: f64, hi: f64) -> Result<Tensor> {
        self.unary(
            "ln_clamped",
            move |x| x.clamp(lo, hi).ln(),
            move |x, _| if (lo..=hi).contains(&x) { 1.0 / x } else { 0.0 },
        )
    }

    /// `x^p` for non-negative `x`.
    pub fn powf(&self, p: f64) -> Result<Tensor> {
        self.unary(
            "powf",
            move |x| x.max(0.0).powf(p),
            move |x, _| {
                if p == 0.0 || (x <= 0.0 && p < 1.0) {
                    0.0
                } else {
                    p * x.max(0.0).powf(p - 1.0)
                }
            },
        )
    }

    // ---- normalization ------------------------------------------------------

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let dims = self.dims().to_vec();
        if axis >= dims.len() {
            return Err(TensorError::Contract(format!(
                "softmax axis {axis} out of range for rank {}",
                dims.len()
            )));
        }
        let len = dims[axis];
        let inner: usize = dims[axis + 1..].iter().product();
        let outer: usize = dims[..axis].iter().product();
        let idx = move |o: usize, a: usize, i: usize| (o * len + a) * inner + i;
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let max = (0..len).map(|a| x[idx(o, a, i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for a in 0..len {
                    let e = (x[idx(o, a, i)] - max).exp();
                    y[idx(o, a, i)] = e;
                    z += e;
                }
                for a in 0..len {
                    y[idx(o, a, i)] /= z;
                }
            }
        }
        Tensor::from_op(
            "softmax",
            dims,
            y,
            vec![self.clone()],
            Box::new(move |y, g| {
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let dot: f64 = (0..len).map(|a| g[idx(o, a, i)] * y[idx(o, a, i)]).sum();
                        for a in 0..len {
                            let k = idx(o, a, i);
                            gx[k] = y[k] * (g[k] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Row softmax of `self[m×n]` restricted to entries where `keep` is true.
    /// Dropped entries come out as exact zeros. A row with nothing kept is an error.
    pub fn masked_softmax(&self, keep: &[bool]) -> Result<Tensor> {
        let (m, n) = self.shape2("masked_softmax")?;
        if keep.len() != m * n {
            return Err(TensorError::Shape {
                op: "masked_softmax",
                lhs: vec![m, n],
                rhs: vec![keep.len()],
            });
        }
        let x = self.data();
        let mut y = vec![0.0; m * n];
        for r in 0..m {
            let row = r * n..(r + 1) * n;
            let max = row
                .clone()
                .filter(|&k| keep[k])
                .map(|k| x[k])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(TensorError::Contract(format!(
                    "attention row {r} has no valid key"
                )));
            }
            let mut z = 0.0;
            for k in row.clone() {
                if keep[k] {
                    y[k] = (x[k] - max).exp();
                    z += y[k];
                }
            }
            for k in row {
                y[k] /= z;
            }
        }
        Tensor::from_op(
            "masked_softmax",
            vec![m, n],
            y,
            vec![self.clone()],
            Box::new(move |y, g| {
                let mut gx = vec![0.0; m * n];
                for r in 0..m {
                    let row = r * n..(r + 1) * n;
                    let dot: f64 = row.clone().map(|k| g[k] * y[k]).sum();
                    for k in row {
                        gx[k] = y[k] * (g[k] - dot);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Normalizes the last dimension to zero mean and unit variance, then
    /// applies `gain` and `bias`.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let n = last_dim(self);
        if gain.numel() != n || bias.numel() != n {
            return Err(TensorError::Shape {
                op: "layer_norm",
                lhs: self.dims().to_vec(),
                rhs: gain.dims().to_vec(),
            });
        }
        let rows = self.numel() / n;
        let mut xhat = vec![0.0; self.numel()];
        let mut inv_std = vec![0.0; rows];
        for (r, row) in self.data().chunks(n).enumerate() {
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = s;
            for (h, v) in xhat[r * n..(r + 1) * n].iter_mut().zip(row) {
                *h = (v - mu) * s;
            }
        }
        let y: Vec<f64> = xhat
            .chunks(n)
            .flat_map(|row| {
                row.iter()
                    .zip(gain.data())
                    .zip(bias.data())
                    .map(|((h, g), b)| h * g + b)
                    .collect::<Vec<_>>()
            })
            .collect();
        let (tx, tg, tb) = (track(self), track(gain), track(bias));
        let gain_c = gain.clone();
        Tensor::from_op(
            "layer_norm",
            self.dims().to_vec(),
            y,
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |_, g| {
                let mut gx = vec![0.0; g.len()];
                let mut gg = vec![0.0; n];
                let mut gb = vec![0.0; n];
                for r in 0..rows {
                    let gr = &g[r * n..(r + 1) * n];
                    let hr = &xhat[r * n..(r + 1) * n];
                    for j in 0..n {
                        gg[j] += gr[j] * hr[j];
                        gb[j] += gr[j];
                    }
                    if tx {
                        let dh: Vec<f64> = gr.iter().zip(gain_c.data()).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            gx[r * n + j] = inv_std[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
                vec![tx.then_some(gx), tg.then_some(gg), tb.then_some(gb)]
            }),
        )
    }

    // ---- indexing -----------------------------------------------------------

    /// Gathers rows of `table[V×d]`; the backward pass scatter-adds.
    pub fn embedding(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        let (v, d) = table.shape2("embedding")?;
        if ids.is_empty() {
            return Err(TensorError::Contract("embedding lookup with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::Index {
                op: "embedding",
                index: bad,
                extent: v,
            });
        }
        let data: Vec<f64> = ids.iter().flat_map(|&i| table.row(i).to_vec()).collect();
        let ids = ids.to_vec();
        Tensor::from_op(
            "embedding",
            vec![ids.len(), d],
            data,
            vec![table.clone()],
            Box::new(move |_, g| {
                let mut gt = vec![0.0; v * d];
                for (r, &i) in ids.iter().enumerate() {
                    gt[i * d..(i + 1) * d]
                        .iter_mut()
                        .zip(&g[r * d..(r + 1) * d])
                        .for_each(|(a, b)| *a += b);
                }
                vec![Some(gt)]
            }),
        )
    }

    /// Picks `self[i, cols[i]]` for every row, giving `[m]`.
    pub fn gather_cols(&self, cols: &[usize]) -> Result<Tensor> {
        let (m, n) = self.shape2("gather_cols")?;
        if cols.len() != m {
            return Err(TensorError::Shape {
                op: "gather_cols",
                lhs: vec![m, n],
                rhs: vec![cols.len()],
            });
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= n) {
            return Err(TensorError::Index {
                op: "gather_cols",
                index: bad,
                extent: n,
            });
        }
        let data = cols.iter().enumerate().map(|(i, &c)| self.data()[i * n + c]).collect();
        let cols = cols.to_vec();
        Tensor::from_op(
            "gather_cols",
            vec![m],
            data,
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut gx = vec![0.0; m * n];
                for (i, &c) in cols.iter().enumerate() {
                    gx[i * n + c] = g[i];
                }
                vec![Some(gx)]
            }),
        )
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = self.shape2("slice_cols")?;
        if start + len > n || len == 0 {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: start + len,
                extent: n,
            });
        }
        let data = (0..m).flat_map(|i| self.row(i)[start..start + len].to_vec()).collect();
        Tensor::from_op(
            "slice_cols",
            vec![m, len],
            data,
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    gx[i * n + start..i * n + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                vec![Some(gx)]
            }),
        )
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = self.shape2("slice_rows")?;
        if start + len > m || len == 0 {
            return Err(TensorError::Index {
                op: "slice_rows",
                index: start + len,
                extent: m,
            });
        }
        Tensor::from_op(
            "slice_rows",
            vec![len, n],
            self.data()[start * n..(start + len) * n].to_vec(),
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut gx = vec![0.0; m * n];
                gx[start * n..(start + len) * n].copy_from_slice(g);
                vec![Some(gx)]
            }),
        )
    }

    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        let m = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of nothing".into()))?
            .shape2("concat_cols")?
            .0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pm, pn) = p.shape2("concat_cols")?;
            if pm != m {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    lhs: parts[0].dims().to_vec(),
                    rhs: p.dims().to_vec(),
                });
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        let tracked: Vec<bool> = parts.iter().map(track).collect();
        Tensor::from_op(
            "concat_cols",
            vec![m, total],
            data,
            parts.to_vec(),
            Box::new(move |_, g| {
                let mut offset = 0;
                let mut out = Vec::with_capacity(widths.len());
                for (&w, &t) in widths.iter().zip(&tracked) {
                    out.push(t.then(|| {
                        (0..m)
                            .flat_map(|i| g[i * total + offset..i * total + offset + w].to_vec())
                            .collect()
                    }));
                    offset += w;
                }
                out
            }),
        )
    }

    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let n = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of nothing".into()))?
            .shape2("concat_rows")?
            .1;
        let mut heights = Vec::with_capacity(parts.len());
        for p in parts {
            let (pm, pn) = p.shape2("concat_rows")?;
            if pn != n {
                return Err(TensorError::Shape {
                    op: "concat_rows",
                    lhs: parts[0].dims().to_vec(),
                    rhs: p.dims().to_vec(),
                });
            }
            heights.push(pm);
        }
        let data: Vec<f64> = parts.iter().flat_map(|p| p.data().to_vec()).collect();
        let tracked: Vec<bool> = parts.iter().map(track).collect();
        Tensor::from_op(
            "concat_rows",
            vec![heights.iter().sum(), n],
            data,
            parts.to_vec(),
            Box::new(move |_, g| {
                let mut offset = 0;
                heights
                    .iter()
                    .zip(&tracked)
                    .map(|(&h, &t)| {
                        let part = t.then(|| g[offset * n..(offset + h) * n].to_vec());
                        offset += h;
                        part
                    })
                    .collect()
            }),
        )
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor> {
        if dims.iter().product::<usize>() != self.numel() || dims.contains(&0) {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.dims().to_vec(),
                rhs: dims.to_vec(),
            });
        }
        Tensor::from_op(
            "reshape",
            dims.to_vec(),
            self.data().to_vec(),
            vec![self.clone()],
            Box::new(|_, g| vec![Some(g.to_vec())]),
        )
    }

    // ---- convolution --------------------------------------------------------

    /// Square-kernel convolution over a channel-last map `self[H×W×Cin]`.
    /// `weight` is `[k·k·Cin × Cout]` (rows ordered kernel-row, kernel-col,
    /// channel), `bias` is `[Cout]`. Padding taps repeat the nearest edge
    /// pixel, so a constant input gives a spatially constant output.
    pub fn conv2d(&self, weight: &Tensor, bias: &Tensor, k: usize, stride: usize, pad: usize) -> Result<Tensor> {
        let [h, w, cin] = match self.dims() {
            &[h, w, c] => [h, w, c],
            other => {
                return Err(TensorError::Shape {
                    op: "conv2d",
                    lhs: other.to_vec(),
                    rhs: vec![0, 0, 0],
                })
            }
        };
        let (kk, cout) = weight.shape2("conv2d")?;
        if kk != k * k * cin || bias.numel() != cout || stride == 0 {
            return Err(TensorError::Shape {
                op: "conv2d",
                lhs: self.dims().to_vec(),
                rhs: weight.dims().to_vec(),
            });
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(TensorError::Shape {
                op: "conv2d",
                lhs: self.dims().to_vec(),
                rhs: vec![k, k],
            });
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let geom = ConvGeom { h, w, cin, k, stride, pad, ho, wo };
        let col = geom.im2col(self.data());
        let mut out = gemm(&col, weight.data(), ho * wo, kk, cout);
        for row in out.chunks_mut(cout) {
            row.iter_mut().zip(bias.data()).for_each(|(o, b)| *o += b);
        }
        let (tx, tw, tb) = (track(self), track(weight), track(bias));
        let wt = weight.clone();
        Tensor::from_op(
            "conv2d",
            vec![ho, wo, cout],
            out,
            vec![self.clone(), weight.clone(), bias.clone()],
            Box::new(move |_, g| {
                let gw = tw.then(|| gemm_tn(&col, g, kk, ho * wo, cout));
                let gb = tb.then(|| {
                    let mut acc = vec![0.0; cout];
                    for row in g.chunks(cout) {
                        acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    acc
                });
                let gx = tx.then(|| geom.col2im(&gemm_nt(g, wt.data(), ho * wo, cout, kk)));
                vec![gx, gw, gb]
            }),
        )
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    /// Visits `(col index, input index)` for every tap; out-of-bounds taps
    /// read the clamped edge position.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let kk = self.k * self.k * self.cin;
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let base = (oy * self.wo + ox) * kk;
                for ky in 0..self.k {
                    let iy = ((oy * self.stride + ky) as isize - self.pad as isize).clamp(0, self.h as isize - 1);
                    for kx in 0..self.k {
                        let ix = ((ox * self.stride + kx) as isize - self.pad as isize).clamp(0, self.w as isize - 1);
                        let src = (iy as usize * self.w + ix as usize) * self.cin;
                        let dst = base + (ky * self.k + kx) * self.cin;
                        for c in 0..self.cin {
                            f(dst + c, src + c);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let mut col = vec![0.0; self.ho * self.wo * self.k * self.k * self.cin];
        self.for_each_tap(|c, i| col[c] = x[i]);
        col
    }

    fn col2im(&self, col: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.h * self.w * self.cin];
        self.for_each_tap(|c, i| x[i] += col[c]);
        x
    }
}

/// Logistic function clamped to the open unit interval.
pub fn sigmoid_scalar(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}
