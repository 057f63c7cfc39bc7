//! Named parameter collections, momentum SGD, and the finite-difference
//! gradient oracle.

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// One named parameter tensor plus its optimizer state.
#[derive(Debug, Clone)]
pub struct ParamEntry<S: Scalar> {
    pub tensor: Tensor<S>,
    pub trainable: bool,
    velocity: Option<Vec<S>>,
}

/// Ordered map from parameter identifier to tensor. Iteration order is the
/// lexicographic name order, which keeps every training loop deterministic.
#[derive(Debug, Clone, Default)]
pub struct Params<S: Scalar> {
    entries: BTreeMap<String, ParamEntry<S>>,
}

impl<S: Scalar> Params<S> {
    pub fn new() -> Self {
        Params {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<S>, trainable: bool) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::State(format!("duplicate parameter name `{name}`")));
        }
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                tensor,
                trainable,
                velocity: None,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry<S>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::State(format!("unknown parameter name `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamEntry<S>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("unknown parameter name `{name}`")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<S>> {
        self.get(name).map(|e| &e.tensor)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry<S>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for e in self.entries.values_mut() {
            e.trainable = trainable;
        }
    }

    pub fn any_trainable(&self) -> bool {
        self.entries.values().any(|e| e.trainable)
    }

    pub fn clear_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.tensor.clear_grad();
        }
    }

    /// Copies every entry onto a tape as a leaf; trainable entries request
    /// gradients. Returns the name → [`Var`] mapping for graph building.
    pub fn stage(&self, tape: &mut Tape<S>) -> BTreeMap<String, Var> {
        self.entries
            .iter()
            .map(|(name, e)| (name.clone(), tape.leaf(e.tensor.clone(), e.trainable)))
            .collect()
    }

    /// Pulls gradients accumulated on the tape back into the trainable
    /// entries' grad slots. Trainable parameters the loss never touched
    /// get an explicit zero gradient.
    pub fn absorb_grads(&mut self, tape: &Tape<S>, vars: &BTreeMap<String, Var>) -> Result<()> {
        for (name, entry) in self.entries.iter_mut() {
            if !entry.trainable {
                continue;
            }
            let var = vars
                .get(name)
                .ok_or_else(|| Error::State(format!("parameter `{name}` was never staged")))?;
            let grad = match tape.grad(*var) {
                Some(g) => g.to_vec(),
                None => vec![S::zero(); entry.tensor.len()],
            };
            entry.tensor.set_grad(grad)?;
        }
        Ok(())
    }
}

/// One SGD-with-momentum step over every trainable entry:
/// `v ← momentum·v − lr·grad; p ← p + v`. Gradients are cleared afterwards;
/// non-trainable entries are untouched even if they carry a gradient.
pub fn sgd_step<S: Scalar>(params: &mut Params<S>, learning_rate: S, momentum: S) -> Result<()> {
    if learning_rate < S::zero() || !learning_rate.is_finite() {
        return Err(Error::Parameter(format!(
            "learning rate must be non-negative and finite, got {learning_rate}"
        )));
    }
    if momentum < S::zero() || !momentum.is_finite() {
        return Err(Error::Parameter(format!(
            "momentum must be non-negative and finite, got {momentum}"
        )));
    }
    for (name, entry) in params.entries.iter_mut() {
        if !entry.trainable {
            continue;
        }
        let grad = entry
            .tensor
            .grad()
            .ok_or_else(|| Error::State(format!("trainable parameter `{name}` has no gradient")))?
            .to_vec();
        let velocity = entry
            .velocity
            .get_or_insert_with(|| vec![S::zero(); grad.len()]);
        for ((p, v), g) in entry
            .tensor
            .data_mut()
            .iter_mut()
            .zip(velocity.iter_mut())
            .zip(&grad)
        {
            *v = momentum * *v - learning_rate * *g;
            *p = *p + *v;
        }
        entry.tensor.clear_grad();
    }
    Ok(())
}

/// Compares analytic gradients (already stored in the trainable entries'
/// grad slots) against central differences of `loss_fn` at a random subset
/// of coordinates per tensor. Returns the maximum relative error
/// `|analytic−numeric| / max(1e-8, |analytic|+|numeric|)`.
///
/// The central difference is only a valid oracle where the loss is smooth
/// across the whole `[p−ε, p+ε]` stencil; a coordinate whose stencil
/// straddles an activation kink (relu branch or pooling argmax flip) is
/// detected by comparing the estimate against a half-step estimate and is
/// resampled. A genuinely wrong gradient produces *consistent* numeric
/// estimates and is still reported.
///
/// `loss_fn` must be deterministic; two baseline evaluations are compared
/// and a mismatch is reported as a determinism error.
pub fn finite_difference_check<S, F>(
    mut loss_fn: F,
    params: &mut Params<S>,
    epsilon: S,
    coords_per_tensor: usize,
    rng: &mut ChaCha8Rng,
) -> Result<S>
where
    S: Scalar,
    F: FnMut(&Params<S>) -> Result<S>,
{
    if epsilon <= S::zero() {
        return Err(Error::Parameter("epsilon must be positive".into()));
    }
    let base_a = loss_fn(params)?;
    let base_b = loss_fn(params)?;
    if base_a != base_b {
        return Err(Error::Determinism(format!(
            "loss function returned {base_a} then {base_b} for identical parameters"
        )));
    }

    let names: Vec<String> = params
        .entries
        .iter()
        .filter(|(_, e)| e.trainable)
        .map(|(n, _)| n.clone())
        .collect();
    let floor = S::of(1e-8);
    let mut max_rel = S::zero();
    for name in names {
        let (len, analytic) = {
            let entry = params.get(&name)?;
            let grad = entry.tensor.grad().ok_or_else(|| {
                Error::State(format!("trainable parameter `{name}` has no gradient"))
            })?;
            (entry.tensor.len(), grad.to_vec())
        };
        let mut checked = 0;
        let mut attempts = 0;
        let budget = coords_per_tensor.min(len);
        while checked < budget && attempts < 4 * budget {
            attempts += 1;
            let idx = rng.gen_range(0..len);
            let mut diff_at = |eps: S| -> Result<S> {
                let original = params.get(&name)?.tensor.data()[idx];
                params.get_mut(&name)?.tensor.data_mut()[idx] = original + eps;
                let loss_plus = loss_fn(params)?;
                params.get_mut(&name)?.tensor.data_mut()[idx] = original - eps;
                let loss_minus = loss_fn(params)?;
                params.get_mut(&name)?.tensor.data_mut()[idx] = original;
                Ok((loss_plus - loss_minus) / (S::of(2.0) * eps))
            };
            let full = diff_at(epsilon)?;
            let half = diff_at(epsilon / S::of(2.0))?;
            // smooth loss: both estimates agree to O(eps^2); a kink inside
            // the stencil makes them diverge, so the oracle does not apply
            let kink = (full - half).abs() > S::of(1e-3) * floor.max(full.abs() + half.abs());
            if kink {
                continue;
            }
            checked += 1;
            let a = analytic[idx];
            let rel = (a - half).abs() / floor.max(a.abs() + half.abs());
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

/// Convenience used by tests: seeds a tensor with He-scaled Gaussians.
pub fn he_init<S: Scalar>(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| S::of(rng::next_gaussian(rng) * std))
}
