use std::collections::{HashMap, HashSet};

use super::{NodeId, Result, Tensor, TensorError};

/// Gradients of a scalar loss with respect to every tracked leaf it reaches.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    map: HashMap<NodeId, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.map.get(&t.id()).map(Vec::as_slice)
    }

    pub fn get_id(&self, id: NodeId) -> Option<&[f64]> {
        self.map.get(&id).map(Vec::as_slice)
    }

    /// Gradient as a tensor shaped like `t`, zeros when unreached.
    pub fn wrt(&self, t: &Tensor) -> Tensor {
        match self.get(t) {
            Some(g) => Tensor::leaf(t.dims().to_vec(), g.to_vec(), false),
            None => Tensor::zeros(t.dims()),
        }
    }

    /// Adds `other` into `self`, entry by entry.
    pub fn accumulate(&mut self, other: Gradients) {
        for (id, g) in other.map {
            match self.map.get_mut(&id) {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => {
                    self.map.insert(id, g);
                }
            }
        }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Nodes reachable from `root` through tracked edges, parents before children.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut seen: HashSet<NodeId> = HashSet::new();
    // (node, inputs already pushed)
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !seen.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(gf) = &t.0.grad_fn {
            for input in gf.inputs.iter().rev() {
                if input.0.requires_grad && !seen.contains(&input.id()) {
                    stack.push((input.clone(), false));
                }
            }
        }
    }
    order
}

/// Reverse sweep from a scalar loss. Gradients of shared nodes accumulate.
pub fn backward(loss: &Tensor) -> Result<Gradients> {
    if loss.numel() != 1 {
        return Err(TensorError::Contract(format!(
            "backward needs a scalar loss, got dims {:?}",
            loss.dims()
        )));
    }
    let mut out = Gradients::default();
    if !loss.0.requires_grad {
        return Ok(out);
    }
    let order = topo_order(loss);
    let mut pending: HashMap<NodeId, Vec<f64>> = HashMap::new();
    pending.insert(loss.id(), vec![1.0]);
    for node in order.iter().rev() {
        let Some(grad) = pending.remove(&node.id()) else {
            continue;
        };
        let Some(gf) = &node.0.grad_fn else {
            out.map.insert(node.id(), grad);
            continue;
        };
        let input_grads = (gf.backward)(&node.0.data, &grad);
        debug_assert_eq!(input_grads.len(), gf.inputs.len(), "{}", gf.op);
        for (input, g) in gf.inputs.iter().zip(input_grads) {
            let Some(g) = g else { continue };
            if !input.0.requires_grad {
                continue;
            }
            debug_assert_eq!(g.len(), input.numel(), "{}", gf.op);
            match pending.get_mut(&input.id()) {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => {
                    pending.insert(input.id(), g);
                }
            }
        }
    }
    if out.map.values().flatten().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite { op: "backward" });
    }
    Ok(out)
}
