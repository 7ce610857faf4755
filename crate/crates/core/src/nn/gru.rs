use crate::tensor::{ParamId, ParamStore, Result, SeededRng, Tensor, TensorError};

/// Single-layer GRU.
///
/// ```text
/// z  = σ(x·Wz + h·Uz + bz)
/// r  = σ(x·Wr + h·Ur + br)
/// n  = tanh(x·Wn + (r⊙h)·Un + bn)
/// h' = (1 − z)⊙h + z⊙n
/// ```
#[derive(Debug, Clone)]
pub struct Gru {
    pub w: [ParamId; 3],
    pub u: [ParamId; 3],
    pub b: [ParamId; 3],
    pub input: usize,
    pub hidden: usize,
}

const GATES: [&str; 3] = ["z", "r", "n"];

impl Gru {
    pub fn new(store: &mut ParamStore, rng: &mut SeededRng, name: &str, input: usize, hidden: usize) -> Self {
        let w = GATES.map(|g| store.xavier(format!("{name}.w_{g}"), input, hidden, rng));
        let u = GATES.map(|g| store.xavier(format!("{name}.u_{g}"), hidden, hidden, rng));
        let b = GATES.map(|g| store.zeros(format!("{name}.b_{g}"), &[hidden]));
        Self { w, u, b, input, hidden }
    }

    /// Runs the recurrence over the rows of `inputs[L×input]` starting from
    /// `h0[1×hidden]` and returns the final hidden state.
    pub fn encode(&self, store: &ParamStore, inputs: &Tensor, h0: &Tensor) -> Result<Tensor> {
        let (len, dim) = inputs.shape2("gru_encode")?;
        if len == 0 {
            return Err(TensorError::Contract("gru_encode on an empty sequence".into()));
        }
        if dim != self.input || h0.dims() != [1, self.hidden] {
            return Err(TensorError::Shape {
                op: "gru_encode",
                lhs: inputs.dims().to_vec(),
                rhs: h0.dims().to_vec(),
            });
        }
        // input projections for every step at once
        let proj = self
            .w
            .iter()
            .zip(&self.b)
            .map(|(&w, &b)| inputs.matmul(store.get(w))?.add_bias(store.get(b)))
            .collect::<Result<Vec<_>>>()?;
        let mut h = h0.clone();
        for t in 0..len {
            let xz = proj[0].slice_rows(t, 1)?;
            let xr = proj[1].slice_rows(t, 1)?;
            let xn = proj[2].slice_rows(t, 1)?;
            h = self.step(store, [&xz, &xr, &xn], &h)?;
        }
        Ok(h)
    }

    fn step(&self, store: &ParamStore, x: [&Tensor; 3], h: &Tensor) -> Result<Tensor> {
        let z = x[0].add(&h.matmul(store.get(self.u[0]))?)?.sigmoid()?;
        let r = x[1].add(&h.matmul(store.get(self.u[1]))?)?.sigmoid()?;
        let n = x[2].add(&r.mul(h)?.matmul(store.get(self.u[2]))?)?.tanh()?;
        z.rsub_scalar(1.0)?.mul(h)?.add(&z.mul(&n)?)
    }
}

/// One GRU update from input row `x[1×input]` and state `h[1×hidden]`.
pub fn gru_cell(gru: &Gru, store: &ParamStore, x: &Tensor, h: &Tensor) -> Result<Tensor> {
    let proj = gru
        .w
        .iter()
        .zip(&gru.b)
        .map(|(&w, &b)| x.matmul(store.get(w))?.add_bias(store.get(b)))
        .collect::<Result<Vec<_>>>()?;
    gru.step(store, [&proj[0], &proj[1], &proj[2]], h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_params;
    use crate::tensor::sigmoid_scalar as sig;

    fn zeroed(input: usize, hidden: usize) -> (ParamStore, Gru) {
        let mut store = ParamStore::new();
        let gru = Gru::new(&mut store, &mut SeededRng::new(0), "g", input, hidden);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let dims = store.get(id).dims().to_vec();
            let n = store.get(id).numel();
            let name = store.name(id).to_string();
            store.set(&name, &dims, &vec![0.0; n]).unwrap();
        }
        (store, gru)
    }

    /// Plain-f64 recurrence used as an independent oracle.
    fn scalar_gru(store: &ParamStore, gru: &Gru, xs: &[Vec<f64>], h0: &[f64]) -> Vec<f64> {
        let mat = |id, r: usize, c: usize| store.get(id).data()[r * gru.hidden + c];
        let mut h = h0.to_vec();
        for x in xs {
            let pre = |g: usize, hv: &[f64]| -> Vec<f64> {
                (0..gru.hidden)
                    .map(|c| {
                        let xi: f64 = (0..gru.input).map(|r| x[r] * mat(gru.w[g], r, c)).sum();
                        let hi: f64 = (0..gru.hidden).map(|r| hv[r] * mat(gru.u[g], r, c)).sum();
                        xi + hi + store.get(gru.b[g]).data()[c]
                    })
                    .collect()
            };
            let z: Vec<f64> = pre(0, &h).into_iter().map(sig).collect();
            let r: Vec<f64> = pre(1, &h).into_iter().map(sig).collect();
            let rh: Vec<f64> = r.iter().zip(&h).map(|(a, b)| a * b).collect();
            let n: Vec<f64> = (0..gru.hidden)
                .map(|c| {
                    let xi: f64 = (0..gru.input).map(|i| x[i] * mat(gru.w[2], i, c)).sum();
                    let hi: f64 = (0..gru.hidden).map(|i| rh[i] * mat(gru.u[2], i, c)).sum();
                    (xi + hi + store.get(gru.b[2]).data()[c]).tanh()
                })
                .collect();
            h = (0..gru.hidden).map(|c| (1.0 - z[c]) * h[c] + z[c] * n[c]).collect();
        }
        h
    }

    #[test]
    fn zero_weights_halve_the_state_each_step() {
        let (store, gru) = zeroed(3, 2);
        let x = Tensor::matrix(&[&[1.0, 2.0, 3.0], &[-1.0, 0.5, 0.0]]).unwrap();
        let h0 = Tensor::matrix(&[&[0.8, -0.4]]).unwrap();
        let h = gru.encode(&store, &x, &h0).unwrap();
        // z = σ(0) = 0.5 and n = tanh(0) = 0 at every step
        assert_eq!(h.data(), &[0.2, -0.1]);
    }

    #[test]
    fn single_step_equals_cell() {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(4);
        let gru = Gru::new(&mut store, &mut rng, "g", 3, 4);
        let x = rng.uniform_tensor(&[1, 3], -1.0, 1.0);
        let h0 = rng.uniform_tensor(&[1, 4], -1.0, 1.0);
        let a = gru.encode(&store, &x, &h0).unwrap();
        let b = gru_cell(&gru, &store, &x, &h0).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn matches_scalar_oracle() {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(8);
        let gru = Gru::new(&mut store, &mut rng, "g", 3, 4);
        for id in gru.b {
            let vals: Vec<f64> = (0..4).map(|_| rng.range(-0.5, 0.5)).collect();
            let name = store.name(id).to_string();
            store.set(&name, &[4], &vals).unwrap();
        }
        let xs: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| rng.range(-1.0, 1.0)).collect()).collect();
        let h0: Vec<f64> = (0..4).map(|_| rng.range(-1.0, 1.0)).collect();
        let x = Tensor::new(&[5, 3], xs.concat()).unwrap();
        let got = gru.encode(&store, &x, &Tensor::new(&[1, 4], h0.clone()).unwrap()).unwrap();
        let want = scalar_gru(&store, &gru, &xs, &h0);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let (store, gru) = zeroed(2, 2);
        // a 0-row tensor cannot be built, so an empty sentence surfaces as a shape error upstream
        assert!(Tensor::new(&[0, 2], vec![]).is_err());
        assert!(gru.encode(&store, &Tensor::zeros(&[1, 3]), &Tensor::zeros(&[1, 2])).is_err());
    }

    #[test]
    fn gradient_through_all_weights() {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(12);
        let gru = Gru::new(&mut store, &mut rng, "g", 3, 4);
        for id in gru.b {
            let vals: Vec<f64> = (0..4).map(|_| rng.range(-0.3, 0.3)).collect();
            let name = store.name(id).to_string();
            store.set(&name, &[4], &vals).unwrap();
        }
        let x = rng.uniform_tensor(&[3, 3], -1.0, 1.0);
        let h0 = rng.uniform_tensor(&[1, 4], -0.5, 0.5);
        let proj = rng.uniform_tensor(&[1, 4], -1.0, 1.0);
        let err = check_params(&store, |s| gru.encode(s, &x, &h0)?.mul(&proj)?.sum(), 1e-5).unwrap();
        assert!(err < 1e-5, "{err}");
    }
}
