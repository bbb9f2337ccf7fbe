use indexmap::IndexMap;
use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Gradients, ParamStore, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates per trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub step: u64,
    pub m: IndexMap<String, Array2<F>>,
    pub v: IndexMap<String, Array2<F>>,
}

impl<F: Real> AdamState<F> {
    pub fn new(params: &ParamStore<F>) -> Self {
        let zeros = || {
            params
                .iter()
                .filter(|(_, p)| p.trainable)
                .map(|(n, p)| (n.to_owned(), Array2::zeros(p.value.dim())))
                .collect()
        };
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One AdamW update at learning rate `lr`: decoupled decay `w -= lr*wd*w`
/// followed by the bias-corrected adaptive step. Nothing is modified if any
/// gradient is missing or non-finite.
pub fn adamw_step<F: Real>(
    params: &mut ParamStore<F>,
    grads: &Gradients<F>,
    state: &mut AdamState<F>,
    cfg: &AdamWConfig,
    lr: f64,
) -> Result<()> {
    let names: Vec<String> = params.trainable_names().map(str::to_owned).collect();
    for name in &names {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::config(format!("no gradient for trainable parameter `{name}`")))?;
        if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
            return Err(Error::numerical("adamw_step", format!("gradient of `{name}` contains {bad}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (F::from_f64_lossy(cfg.beta1), F::from_f64_lossy(cfg.beta2));
    let (one_b1, one_b2) = (F::from_f64_lossy(1.0 - cfg.beta1), F::from_f64_lossy(1.0 - cfg.beta2));
    let decay = F::from_f64_lossy(1.0 - lr * cfg.weight_decay);
    let step = F::from_f64_lossy(lr / bc1);
    let inv_bc2 = F::from_f64_lossy(1.0 / bc2);
    let eps = F::from_f64_lossy(cfg.eps);
    for name in &names {
        let g = grads.get(name).expect("checked above");
        let w = params.trainable_mut(name)?;
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Array2::zeros(g.dim()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Array2::zeros(g.dim()));
        Zip::from(w).and(m).and(v).and(g).for_each(|w, m, v, &g| {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            *w = *w * decay - step * *m / ((*v * inv_bc2).sqrt() + eps);
        });
    }
    Ok(())
}
