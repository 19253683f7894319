use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct ParamGroup {
    pub name: String,
    pub params: Vec<ParamId>,
    pub lr: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    AdamW,
    Sgd,
}

/// AdamW (decoupled weight decay) or SGD with momentum over parameter groups.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub groups: Vec<ParamGroup>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub momentum: f64,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, groups: Vec<ParamGroup>, ps: &ParamStore) -> Self {
        let sizes: Vec<usize> = groups
            .iter()
            .flat_map(|g| g.params.iter().map(|&id| ps.get(id).value.len()))
            .collect();
        Optimizer {
            kind,
            groups,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum: 0.9,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn adamw(groups: Vec<ParamGroup>, ps: &ParamStore) -> Self {
        Self::new(OptimizerKind::AdamW, groups, ps)
    }

    pub fn lrs(&self) -> Vec<f64> {
        self.groups.iter().map(|g| g.lr).collect()
    }

    pub fn set_lrs(&mut self, lrs: &[f64]) {
        assert_eq!(lrs.len(), self.groups.len());
        for (g, &lr) in self.groups.iter_mut().zip(lrs) {
            g.lr = lr;
        }
    }

    pub fn step(&mut self, ps: &mut ParamStore) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut slot = 0;
        for g in &self.groups {
            for &id in &g.params {
                let p = ps.get_mut(id);
                let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
                slot += 1;
                match self.kind {
                    OptimizerKind::AdamW => {
                        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
                        let decay = (1.0 - g.lr * g.weight_decay) as f32;
                        let step = (g.lr / bc1) as f32;
                        let sbc2 = bc2.sqrt() as f32;
                        for i in 0..p.value.len() {
                            let gr = p.grad[i];
                            m[i] = b1 * m[i] + (1.0 - b1) * gr;
                            v[i] = b2 * v[i] + (1.0 - b2) * gr * gr;
                            p.value[i] = p.value[i] * decay - step * m[i] / (v[i].sqrt() / sbc2 + self.eps as f32);
                        }
                    }
                    OptimizerKind::Sgd => {
                        let (lr, wd, mom) = (g.lr as f32, g.weight_decay as f32, self.momentum as f32);
                        for i in 0..p.value.len() {
                            let gr = p.grad[i] + wd * p.value[i];
                            m[i] = mom * m[i] + gr;
                            p.value[i] -= lr * m[i];
                        }
                    }
                }
            }
        }
    }
}

/// Global L2 norm of the gradients of `params`.
pub fn grad_norm(ps: &ParamStore, params: &[ParamId]) -> f64 {
    params
        .iter()
        .flat_map(|&id| ps.get(id).grad.iter())
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm(ps: &mut ParamStore, params: &[ParamId], max_norm: f64) -> f64 {
    let norm = grad_norm(ps, params);
    if norm > max_norm && norm > 0.0 {
        let s = (max_norm / (norm + 1e-6)) as f32;
        for &id in params {
            ps.get_mut(id).grad.iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::{Init, ParamKind};
    use crate::rng::rng_from;

    #[test]
    fn adamw_moves_against_gradient() {
        let mut ps = ParamStore::new();
        let id = ps.add("w", &[2], ParamKind::Weight, Init::Ones, &mut rng_from(0));
        let mut opt = Optimizer::adamw(
            vec![ParamGroup {
                name: "all".into(),
                params: vec![id],
                lr: 0.1,
                weight_decay: 0.0,
            }],
            &ps,
        );
        ps.get_mut(id).grad = vec![1.0, -1.0];
        opt.step(&mut ps);
        let v = ps.value(id);
        // First Adam step has magnitude ~lr.
        assert!((v[0] - 0.9).abs() < 1e-4 && (v[1] - 1.1).abs() < 1e-4);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut ps = ParamStore::new();
        let id = ps.add("w", &[2], ParamKind::Weight, Init::Zeros, &mut rng_from(0));
        ps.get_mut(id).grad = vec![3.0, 4.0];
        let before = clip_grad_norm(&mut ps, &[id], 1.0);
        assert!((before - 5.0).abs() < 1e-9);
        assert!((grad_norm(&ps, &[id]) - 1.0).abs() < 1e-4);
    }
}
