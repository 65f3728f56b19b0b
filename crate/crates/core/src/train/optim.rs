use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    /// Heavy-ball SGD: `buf ← β·buf + g`, `p ← p − lr·buf`. `beta = 0` is plain SGD.
    SgdMomentum { beta: f64 },
    /// Adam with decoupled weight decay: `p ← p − lr·wd·p` before the Adam step.
    #[serde(rename = "adamw")]
    AdamW {
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl OptimizerKind {
    pub fn adamw(weight_decay: f64) -> Self {
        OptimizerKind::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn sgd() -> Self {
        OptimizerKind::SgdMomentum { beta: 0.0 }
    }
}

/// Optimizer state for a fixed list of parameter tensors.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: i32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &[Vec<f64>]) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count");
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            if matches!(self.kind, OptimizerKind::AdamW { .. }) {
                self.second = self.first.clone();
            }
        }
        self.step += 1;
        let lr = self.lr;
        match self.kind {
            OptimizerKind::SgdMomentum { beta } => {
                for ((p, g), buf) in params.into_iter().zip(grads).zip(&mut self.first) {
                    for ((pv, &gv), bv) in p.iter_mut().zip(g).zip(buf.iter_mut()) {
                        *bv = if self.step == 1 { gv } else { beta * *bv + gv };
                        *pv -= lr * *bv;
                    }
                }
            }
            OptimizerKind::AdamW {
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                let bc1 = 1.0 - beta1.powi(self.step);
                let bc2_sqrt = (1.0 - beta2.powi(self.step)).sqrt();
                let step_size = lr / bc1;
                let decay = 1.0 - lr * weight_decay;
                for (((p, g), m), v) in params
                    .into_iter()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    for (((pv, &gv), mv), vv) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *pv *= decay;
                        *mv = beta1 * *mv + (1.0 - beta1) * gv;
                        *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                        let denom = vv.sqrt() / bc2_sqrt + eps;
                        *pv -= step_size * *mv / denom;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step() {
        let mut p = vec![1.0, 2.0];
        let mut opt = Optimizer::new(OptimizerKind::sgd(), 0.1);
        opt.step(vec![&mut p], &[vec![1.0, -1.0]]);
        assert_eq!(p, vec![0.9, 2.1]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // With zero decay the first bias-corrected step is lr · g / (|g| + eps').
        let mut p = vec![0.0, 0.0];
        let mut opt = Optimizer::new(OptimizerKind::adamw(0.0), 0.01);
        opt.step(vec![&mut p], &[vec![3.0, -0.5]]);
        assert!((p[0] + 0.01).abs() < 1e-9);
        assert!((p[1] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn config_round_trip() {
        let k = OptimizerKind::adamw(0.01);
        let s = serde_json::to_string(&k).unwrap();
        assert!(s.contains("\"type\":\"adamw\""));
        assert_eq!(serde_json::from_str::<OptimizerKind>(&s).unwrap(), k);
    }
}
