use std::collections::BTreeMap;

use super::{Param, ParamSet};

/// RMSProp without momentum. State is keyed by parameter name so the
/// trainable set can change between calls without invalidating it.
#[derive(Debug, Clone)]
pub struct RmsProp {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    state: BTreeMap<String, Vec<f64>>,
}

impl RmsProp {
    pub fn new(lr: f64) -> Self {
        RmsProp {
            lr,
            decay: 0.99,
            eps: 1e-8,
            state: BTreeMap::new(),
        }
    }

    /// One update over every parameter whose name starts with any of
    /// `trainable_prefixes` (empty list means train everything).
    /// Gradients are consumed (zeroed) for updated parameters.
    pub fn step<M: ParamSet>(&mut self, model: &mut M, trainable_prefixes: &[String]) {
        let lr = self.lr;
        let decay = self.decay;
        let eps = self.eps;
        let state = &mut self.state;
        model.visit_mut("", &mut |name: &str, p: &mut Param| {
            let trainable = trainable_prefixes.is_empty()
                || trainable_prefixes.iter().any(|pre| name.starts_with(pre.as_str()));
            if !trainable {
                return;
            }
            let sq = state
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; p.v.len()]);
            let v = p.v.as_slice_mut().expect("contiguous param");
            let g = p.g.as_slice_mut().expect("contiguous grad");
            for ((vi, gi), si) in v.iter_mut().zip(g.iter_mut()).zip(sq.iter_mut()) {
                *si = decay * *si + (1.0 - decay) * *gi * *gi;
                *vi -= lr * *gi / (si.sqrt() + eps);
                *gi = 0.0;
            }
        });
    }
}
