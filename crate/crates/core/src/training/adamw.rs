use serde::{Deserialize, Serialize};

use crate::backbone::Param;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWHyper {
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        AdamWHyper {
            betas: [0.9, 0.999],
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay. Moments exist only for parameters that
/// were trainable when the optimizer was created.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub hyper: AdamWHyper,
    pub step: u64,
    /// Per parameter `(m, v)`, `None` for frozen ones.
    pub moments: Vec<Option<(Tensor, Tensor)>>,
}

impl AdamW {
    pub fn new(params: &[Param], hyper: AdamWHyper) -> Self {
        let moments = params
            .iter()
            .map(|p| (!p.frozen).then(|| (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape()))))
            .collect();
        AdamW {
            hyper,
            step: 0,
            moments,
        }
    }

    /// One update with learning rate `lr`:
    /// `p ← p − lr·wd·p − lr·m̂ / (√v̂ + eps)`.
    /// Parameters without moments or without a gradient are untouched. Any
    /// non-finite gradient aborts the step before anything changes.
    pub fn update(&mut self, params: &mut [Param], grads: &[Option<&Tensor>], lr: f64) -> Result<()> {
        if params.len() != self.moments.len() || grads.len() != params.len() {
            return Err(Error::arg(
                "adamw",
                format!("{} params, {} grads, {} moment slots", params.len(), grads.len(), self.moments.len()),
            ));
        }
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::arg("adamw", format!("learning rate {lr} is invalid")));
        }
        for (p, g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != p.value.shape() {
                    return Err(Error::shape("adamw", "gradient", format!("{} {:?} vs {:?}", p.name, g.shape(), p.value.shape())));
                }
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of {}", p.name)));
                }
            }
        }
        self.step += 1;
        let [b1, b2] = self.hyper.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let (eps, wd) = (self.hyper.eps, self.hyper.weight_decay);
        for ((p, g), slot) in params.iter_mut().zip(grads).zip(&mut self.moments) {
            let (Some(g), Some((m, v))) = (g, slot.as_mut()) else {
                continue;
            };
            if p.frozen {
                continue;
            }
            let (pd, md, vd) = (p.value.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = b1 * md[i] + (1.0 - b1) * gi;
                vd[i] = b2 * vd[i] + (1.0 - b2) * gi * gi;
                let update = (md[i] / c1) / ((vd[i] / c2).sqrt() + eps);
                pd[i] = pd[i] - lr * wd * pd[i] - lr * update;
            }
        }
        Ok(())
    }
}
