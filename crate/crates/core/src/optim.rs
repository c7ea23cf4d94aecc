//! First-order optimizers over [`MilModel`] parameters.

use serde::{Deserialize, Serialize};

use crate::model::MilModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Rmsprop,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(Self::Adam),
            "rmsprop" => Ok(Self::Rmsprop),
            "sgd" => Ok(Self::Sgd),
            other => Err(format!("unknown optimizer '{other}'")),
        }
    }
}

/// Optimizer state. Hyperparameters other than the learning rate follow the
/// usual library defaults (Adam: 0.9/0.999/1e-8, RMSprop: alpha 0.99, eps 1e-8).
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, model: &MilModel) -> Self {
        let zeros: Vec<Vec<f64>> = model.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            kind,
            lr,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn step(&mut self, model: &mut MilModel, grads: &MilModel) {
        self.step += 1;
        let t = self.step as i32;
        let lr = self.lr;
        let params = model.tensors_mut();
        let grads = grads.tensors();
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            match self.kind {
                OptimizerKind::Sgd => {
                    for (p, g) in p.iter_mut().zip(g) {
                        *p -= lr * g;
                    }
                }
                OptimizerKind::Rmsprop => {
                    let (alpha, eps) = (0.99, 1e-8);
                    for ((p, g), v) in p.iter_mut().zip(g).zip(self.second[i].iter_mut()) {
                        *v = alpha * *v + (1.0 - alpha) * g * g;
                        *p -= lr * g / (v.sqrt() + eps);
                    }
                }
                OptimizerKind::Adam => {
                    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
                    let c1 = 1.0 - b1.powi(t);
                    let c2 = 1.0 - b2.powi(t);
                    let m = self.first[i].iter_mut();
                    let v = self.second[i].iter_mut();
                    for (((p, g), m), v) in p.iter_mut().zip(g).zip(m).zip(v) {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ConvBlockSpec, FeatureExtractorSpec, ModelSpec};
    use crate::rng::{substream, Stream};
    use crate::types::InstanceShape;

    fn model() -> MilModel {
        let spec = ModelSpec {
            extractor: FeatureExtractorSpec {
                name: "t".into(),
                input: InstanceShape::new(1, 4, 4),
                conv_blocks: vec![ConvBlockSpec { out_channels: 2, kernel: 3, padding: 1, pool: 2 }],
                fc_widths: vec![3, 3, 3],
            },
            attention_hidden: 2,
        };
        MilModel::new(spec, &mut substream(0, Stream::Init)).unwrap()
    }

    #[test]
    fn first_adam_step_moves_by_lr_times_sign() {
        let mut m = model();
        let before = m.clone();
        let mut g = m.zeros_like();
        for t in g.tensors_mut() {
            t.iter_mut().enumerate().for_each(|(i, v)| *v = if i % 2 == 0 { 0.5 } else { -2.0 });
        }
        let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-3, &m);
        opt.step(&mut m, &g);
        for ((a, b), gt) in m.tensors().iter().zip(before.tensors()).zip(g.tensors()) {
            for ((x, y), gv) in a.iter().zip(b.iter()).zip(gt.iter()) {
                assert!(((y - x) - 1e-3 * gv.signum()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        for kind in [OptimizerKind::Adam, OptimizerKind::Rmsprop, OptimizerKind::Sgd] {
            let mut m = model();
            let before = m.clone();
            let g = m.zeros_like();
            Optimizer::new(kind, 0.1, &m).step(&mut m, &g);
            assert_eq!(m, before);
        }
    }
}
