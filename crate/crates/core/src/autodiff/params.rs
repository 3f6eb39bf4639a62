use std::collections::HashMap;

use crate::autodiff::graph::{Gradients, Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamIdx(usize);

#[derive(Clone, Debug)]
struct Param<E: Element> {
    name: String,
    value: Tensor<E>,
    first_moment: Vec<E>,
    second_moment: Vec<E>,
}

/// Named trainable tensors with AdamW state.
#[derive(Clone, Debug)]
pub struct ParamSet<E: Element = f32> {
    params: Vec<Param<E>>,
    by_name: HashMap<String, usize>,
    step: u64,
}

impl<E: Element> Default for ParamSet<E> {
    fn default() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
            step: 0,
        }
    }
}

/// Per-parameter gradients aligned with a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct GradMap<E: Element = f32> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> GradMap<E> {
    pub fn empty(params: &ParamSet<E>) -> Self {
        Self {
            grads: vec![None; params.len()],
        }
    }

    pub fn set(&mut self, idx: ParamIdx, grad: Tensor<E>) {
        self.grads[idx.0] = Some(grad);
    }

    pub fn get(&self, idx: ParamIdx) -> Option<&Tensor<E>> {
        self.grads[idx.0].as_ref()
    }

    /// Largest absolute gradient entry; 0 when empty.
    pub fn max_abs(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|t| t.data().iter().map(|v| v.as_f64().abs()))
            .fold(0.0, f64::max)
    }
}

/// Parameter leaves bound into one graph.
#[derive(Clone, Debug)]
pub struct BoundParams {
    ids: Vec<NodeId>,
}

impl BoundParams {
    pub fn node(&self, idx: ParamIdx) -> NodeId {
        self.ids[idx.0]
    }

    pub fn collect<E: Element>(&self, grads: &Gradients<E>) -> GradMap<E> {
        GradMap {
            grads: self.ids.iter().map(|&id| grads.get(id).cloned()).collect(),
        }
    }
}

impl<E: Element> ParamSet<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<E>) -> ParamIdx {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let n = value.numel();
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            value,
            first_moment: vec![E::zero(); n],
            second_moment: vec![E::zero(); n],
        });
        ParamIdx(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn get(&self, idx: ParamIdx) -> &Tensor<E> {
        &self.params[idx.0].value
    }

    pub fn index_of(&self, name: &str) -> Option<ParamIdx> {
        self.by_name.get(name).copied().map(ParamIdx)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamIdx, &str, &Tensor<E>)> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| (ParamIdx(i), p.name.as_str(), &p.value))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Replaces a value by name, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<E>) -> Result<()> {
        let i = *self
            .by_name
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        if self.params[i].value.dims() != value.dims() {
            return Err(Error::shape(
                "param_set",
                format!("{name}: {:?} vs {:?}", self.params[i].value.dims(), value.dims()),
            ));
        }
        self.params[i].value = value;
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph<E>) -> BoundParams {
        BoundParams {
            ids: self.params.iter().map(|p| g.input(p.value.clone())).collect(),
        }
    }

    /// Binds parameters as constants, for inference without parameter grads.
    pub fn bind_frozen(&self, g: &mut Graph<E>) -> BoundParams {
        BoundParams {
            ids: self.params.iter().map(|p| g.constant(p.value.clone())).collect(),
        }
    }

    /// Copies values into another precision; optimizer state is reset.
    pub fn cast<F: Element>(&self) -> ParamSet<F> {
        let mut out = ParamSet::new();
        for p in &self.params {
            out.add(p.name.clone(), p.value.cast());
        }
        out
    }

    /// One AdamW update (beta1 0.9, beta2 0.999, eps 1e-8) with decoupled
    /// weight decay. Parameters without a gradient entry are skipped. All
    /// gradients are validated before any parameter changes.
    pub fn adamw_step(&mut self, grads: &GradMap<E>, lr: f64, weight_decay: f64) -> Result<()> {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        if grads.grads.len() != self.params.len() {
            return Err(Error::shape(
                "adamw_step",
                format!("{} grads for {} params", grads.grads.len(), self.params.len()),
            ));
        }
        for (p, g) in self.params.iter().zip(&grads.grads) {
            if let Some(g) = g {
                if g.dims() != p.value.dims() {
                    return Err(Error::shape(
                        "adamw_step",
                        format!("{}: {:?} vs {:?}", p.name, p.value.dims(), g.dims()),
                    ));
                }
                if !g.all_finite() {
                    return Err(Error::NonFinite(format!("gradient of {}", p.name)));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - B1.powi(t);
        let bc2 = 1.0 - B2.powi(t);
        for (p, g) in self.params.iter_mut().zip(&grads.grads) {
            let Some(g) = g else { continue };
            let mut data = p.value.data().to_vec();
            for (((w, &gv), m), v) in data
                .iter_mut()
                .zip(g.data())
                .zip(p.first_moment.iter_mut())
                .zip(p.second_moment.iter_mut())
            {
                let gv = gv.as_f64();
                let mut wv = w.as_f64();
                wv -= lr * weight_decay * wv;
                let mv = B1 * m.as_f64() + (1.0 - B1) * gv;
                let vv = B2 * v.as_f64() + (1.0 - B2) * gv * gv;
                *m = E::from_f64_lossy(mv);
                *v = E::from_f64_lossy(vv);
                wv -= lr * (mv / bc1) / ((vv / bc2).sqrt() + EPS);
                *w = E::from_f64_lossy(wv);
            }
            p.value = Tensor::from_parts(p.value.dims().to_vec(), data);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: f64) -> (ParamSet<f64>, ParamIdx) {
        let mut ps = ParamSet::new();
        let i = ps.add(name, Tensor::scalar(v));
        (ps, i)
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let (mut ps, i) = one("w", 1.5);
        let mut g = GradMap::empty(&ps);
        g.set(i, Tensor::scalar(0.0));
        ps.adamw_step(&g, 0.1, 0.0).unwrap();
        assert_eq!(ps.get(i).item(), 1.5);
        assert_eq!(ps.step_count(), 1);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // m̂ = g, v̂ = g², so the update is -lr·g/(|g| + eps).
        let (mut ps, i) = one("w", 2.0);
        let (lr, gv) = (0.01, 0.3);
        let mut g = GradMap::empty(&ps);
        g.set(i, Tensor::scalar(gv));
        ps.adamw_step(&g, lr, 0.0).unwrap();
        let expect = 2.0 - lr * gv / ((gv * gv).sqrt() + 1e-8);
        assert!((ps.get(i).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn decoupled_decay_scales_parameter() {
        let (mut ps, i) = one("w", 3.0);
        let mut g = GradMap::empty(&ps);
        g.set(i, Tensor::scalar(0.0));
        ps.adamw_step(&g, 0.5, 0.1).unwrap();
        assert!((ps.get(i).item() - 3.0 * (1.0 - 0.5 * 0.1)).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_names_parameter_and_leaves_values() {
        let mut ps = ParamSet::<f32>::new();
        let a = ps.add("enc.w", Tensor::scalar(1.0));
        let b = ps.add("dec.w", Tensor::scalar(1.0));
        let mut g = GradMap::empty(&ps);
        g.set(a, Tensor::scalar(1.0));
        g.grads[b.0] = Some(Tensor::from_parts(vec![1], vec![f32::INFINITY]));
        let err = ps.adamw_step(&g, 0.1, 0.0).unwrap_err().to_string();
        assert!(err.contains("dec.w"), "{err}");
        assert_eq!(ps.get(a).item(), 1.0);
        assert_eq!(ps.step_count(), 0);
    }
}
