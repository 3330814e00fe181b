use serde::{Deserialize, Serialize};

use crate::nn::Params;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer<T> {
    Sgd,
    Adam { m: Params<T>, v: Params<T>, t: u64 },
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, params: &Params<T>) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam { m: params.zeros_like(), v: params.zeros_like(), t: 0 },
        }
    }

    pub fn update(&mut self, params: &mut Params<T>, grads: &Params<T>, lr: f64) {
        match self {
            Optimizer::Sgd => {
                for (p, g) in params.tensors.iter_mut().zip(&grads.tensors) {
                    for (w, &d) in p.data.iter_mut().zip(&g.data) {
                        *w = *w - T::from_f64_lossy(lr * d.as_f64());
                    }
                }
            }
            Optimizer::Adam { m, v, t } => {
                *t += 1;
                let c1 = 1.0 - BETA1.powi(*t as i32);
                let c2 = 1.0 - BETA2.powi(*t as i32);
                let tensors = params.tensors.iter_mut().zip(&grads.tensors).zip(m.tensors.iter_mut().zip(v.tensors.iter_mut()));
                for ((p, g), (mt, vt)) in tensors {
                    for i in 0..p.data.len() {
                        let d = g.data[i].as_f64();
                        let mi = BETA1 * mt.data[i].as_f64() + (1.0 - BETA1) * d;
                        let vi = BETA2 * vt.data[i].as_f64() + (1.0 - BETA2) * d * d;
                        mt.data[i] = T::from_f64_lossy(mi);
                        vt.data[i] = T::from_f64_lossy(vi);
                        let step = lr * (mi / c1) / ((vi / c2).sqrt() + EPS);
                        p.data[i] = p.data[i] - T::from_f64_lossy(step);
                    }
                }
            }
        }
    }
}
