use std::collections::{BTreeMap, HashSet};

use super::{LrSchedule, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments keyed by parameter name, so one state can drive several
/// stores (names must be distinct across them).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step_count: u64,
    pub moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
    micro_steps: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            ..Default::default()
        }
    }

    /// Micro-batches accumulated since the last applied update.
    pub fn pending_micro_steps(&self) -> u64 {
        self.micro_steps
    }

    pub(crate) fn set_pending_micro_steps(&mut self, n: u64) {
        self.micro_steps = n;
    }
}

/// One Adam update over every unlocked parameter; clears gradients.
pub fn adam_step(params: &mut [&mut ParamStore], state: &mut AdamState, lr: f64) -> Result<()> {
    let mut seen = HashSet::new();
    for store in params.iter() {
        for p in store.iter().filter(|p| !p.locked) {
            if !seen.insert(p.name.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "parameter name `{}` appears in two optimized stores",
                    p.name
                )));
            }
            if p.grad.is_none() {
                return Err(Error::MissingGradient(p.name.clone()));
            }
        }
    }
    let t = state.step_count as i32 + 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let c1 = 1.0 - (beta1 as f64).powi(t);
    let c2 = 1.0 - (beta2 as f64).powi(t);
    let step = (lr / c1) as f32;
    let c2 = c2 as f32;
    for store in params.iter_mut() {
        for p in store.iter_mut() {
            if p.locked {
                continue;
            }
            let grad = p.grad.take().expect("checked above");
            let n = grad.len();
            let (m, v) = state
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            if m.len() != n {
                return Err(Error::shape(
                    "adam_step",
                    format!(
                        "moment of `{}` has {} entries, parameter {n}",
                        p.name,
                        m.len()
                    ),
                ));
            }
            let w = std::rc::Rc::make_mut(&mut p.value).data_mut();
            for i in 0..n {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let denom = (v[i] / c2).sqrt() + eps;
                w[i] -= step * m[i] / denom;
            }
        }
    }
    state.step_count += 1;
    Ok(())
}

/// Records one backward pass worth of summed gradients; every
/// `accumulation` calls, averages them and applies a scheduled Adam step.
/// `micro_step` is the 1-based count of micro-batches seen so far.
pub fn accumulate_and_maybe_step(
    params: &mut [&mut ParamStore],
    state: &mut AdamState,
    schedule: &LrSchedule,
    micro_step: u64,
    accumulation: u64,
) -> Result<bool> {
    if accumulation == 0 {
        return Err(Error::InvalidArgument(
            "gradient accumulation must be >= 1".into(),
        ));
    }
    state.micro_steps += 1;
    if micro_step % accumulation != 0 {
        return Ok(false);
    }
    if accumulation > 1 {
        let k = 1.0 / accumulation as f32;
        for store in params.iter_mut() {
            for p in store.iter_mut() {
                if let Some(g) = p.grad.as_mut() {
                    g.iter_mut().for_each(|v| *v *= k);
                }
            }
        }
    }
    let lr = schedule.lr_at_step(state.step_count);
    adam_step(params, state, lr)?;
    state.micro_steps = 0;
    Ok(true)
}

/// Adam plus learning-rate schedule and gradient accumulation.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub state: AdamState,
    pub schedule: LrSchedule,
    pub accumulation: u64,
}

impl Optimizer {
    pub fn new(config: AdamConfig, schedule: LrSchedule, accumulation: u64) -> Result<Self> {
        if accumulation == 0 {
            return Err(Error::InvalidArgument(
                "gradient accumulation must be >= 1".into(),
            ));
        }
        Ok(Self {
            state: AdamState::new(config),
            schedule,
            accumulation,
        })
    }

    /// Call once after every backward pass; returns whether an update was
    /// applied.
    pub fn micro_step(&mut self, params: &mut [&mut ParamStore]) -> Result<bool> {
        let micro = self.state.pending_micro_steps() + 1;
        accumulate_and_maybe_step(
            params,
            &mut self.state,
            &self.schedule,
            micro,
            self.accumulation,
        )
    }

    /// Learning rate the next update will use.
    pub fn current_lr(&self) -> f64 {
        self.schedule.lr_at_step(self.state.step_count)
    }
}
