use serde::{Deserialize, Serialize};

use crate::nn::Linear;
use crate::tensor::{ParamStore, Result, SeededRng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FusionOp {
    #[default]
    Add,
    Mul,
    Max,
}

impl std::str::FromStr for FusionOp {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "add" => Ok(Self::Add),
            "mul" => Ok(Self::Mul),
            "max" => Ok(Self::Max),
            other => Err(format!("unknown fusion op {other:?} (expected add, mul or max)")),
        }
    }
}

/// Elementwise combination of the global and region vectors.
pub fn fuse(f_g: &Tensor, f_l: &Tensor, op: FusionOp) -> Result<Tensor> {
    match op {
        FusionOp::Add => f_g.add(f_l),
        FusionOp::Mul => f_g.mul(f_l),
        FusionOp::Max => f_g.maximum(f_l),
    }
}

/// Three independent sigmoid classifiers over `f_g`, `f_l` and `f_f`.
#[derive(Debug, Clone)]
pub struct TagHeads {
    pub global: Linear,
    pub region: Linear,
    pub fusion: Linear,
}

impl TagHeads {
    pub fn new(store: &mut ParamStore, rng: &mut SeededRng, name: &str, dim: usize, n_tags: usize) -> Self {
        Self {
            global: Linear::new(store, rng, &format!("{name}.global"), dim, n_tags, true),
            region: Linear::new(store, rng, &format!("{name}.region"), dim, n_tags, true),
            fusion: Linear::new(store, rng, &format!("{name}.fusion"), dim, n_tags, true),
        }
    }

    pub fn global_probs(&self, store: &ParamStore, f_g: &Tensor) -> Result<Tensor> {
        self.global.forward(store, f_g)?.sigmoid()
    }

    /// Probabilities of the global, region and fusion branches.
    pub fn branch_probs(&self, store: &ParamStore, f_g: &Tensor, f_l: &Tensor, f_f: &Tensor) -> Result<[Tensor; 3]> {
        Ok([
            self.global.forward(store, f_g)?.sigmoid()?,
            self.region.forward(store, f_l)?.sigmoid()?,
            self.fusion.forward(store, f_f)?.sigmoid()?,
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{focal_loss, FocalConfig};
    use crate::tensor::{backward, TensorError};

    fn row(v: &[f64]) -> Tensor {
        Tensor::new(&[1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn fusion_identities() {
        let g = row(&[1.0, -2.0, 0.5]);
        assert_eq!(fuse(&g, &row(&[0.0; 3]), FusionOp::Add).unwrap().data(), g.data());
        assert_eq!(fuse(&g, &row(&[1.0; 3]), FusionOp::Mul).unwrap().data(), g.data());
        assert_eq!(fuse(&row(&[1.0, 2.0]), &row(&[3.0, 4.0]), FusionOp::Add).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(fuse(&row(&[1.0, 5.0]), &row(&[3.0, 4.0]), FusionOp::Max).unwrap().data(), &[3.0, 5.0]);
        assert!(matches!(
            fuse(&row(&[1.0, 2.0]), &row(&[1.0]), FusionOp::Add),
            Err(TensorError::Shape { .. })
        ));
    }

    #[test]
    fn parse_ops() {
        assert_eq!("mul".parse::<FusionOp>().unwrap(), FusionOp::Mul);
        assert!("avg".parse::<FusionOp>().is_err());
    }

    fn heads(seed: u64) -> (ParamStore, TagHeads) {
        let mut store = ParamStore::new();
        let h = TagHeads::new(&mut store, &mut SeededRng::new(seed), "h", 4, 3);
        (store, h)
    }

    #[test]
    fn zero_weights_give_half() {
        let (mut store, h) = heads(1);
        for l in [&h.global, &h.region, &h.fusion] {
            let name = store.name(l.weight).to_string();
            store.set(&name, &[4, 3], &[0.0; 12]).unwrap();
        }
        let f = row(&[1.0, 2.0, 3.0, 4.0]);
        for p in h.branch_probs(&store, &f, &f, &f).unwrap() {
            assert!(p.data().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn heads_are_independent() {
        let (mut store, h) = heads(2);
        let mut rng = SeededRng::new(3);
        let (fg, fl) = (rng.uniform_tensor(&[1, 4], -1.0, 1.0), rng.uniform_tensor(&[1, 4], -1.0, 1.0));
        let ff = fuse(&fg, &fl, FusionOp::Add).unwrap();
        let before = h.branch_probs(&store, &fg, &fl, &ff).unwrap();
        let name = store.name(h.region.weight).to_string();
        let perturbed: Vec<f64> = store.get(h.region.weight).data().iter().map(|v| v + 0.3).collect();
        store.set(&name, &[4, 3], &perturbed).unwrap();
        let after = h.branch_probs(&store, &fg, &fl, &ff).unwrap();
        assert_eq!(before[0].data(), after[0].data());
        assert_eq!(before[2].data(), after[2].data());
        assert_ne!(before[1].data(), after[1].data());
    }

    #[test]
    fn branch_loss_reaches_only_its_head() {
        let (store, h) = heads(4);
        let mut rng = SeededRng::new(5);
        let fg = rng.uniform_tensor(&[1, 4], -1.0, 1.0).requires_grad();
        let fl = rng.uniform_tensor(&[1, 4], -1.0, 1.0).requires_grad();
        let ff = fuse(&fg, &fl, FusionOp::Add).unwrap();
        let probs = h.branch_probs(&store, &fg, &fl, &ff).unwrap();
        let y = [1.0, 0.0, 1.0];
        let loss = focal_loss(&probs[1], &y, &FocalConfig::default()).unwrap();
        let g = backward(&loss).unwrap();
        assert!(g.get(store.get(h.region.weight)).is_some());
        assert!(g.get(store.get(h.global.weight)).is_none());
        assert!(g.get(store.get(h.fusion.weight)).is_none());
        assert!(g.get(&fl).is_some());
        assert!(g.get(&fg).is_none());
    }
}
