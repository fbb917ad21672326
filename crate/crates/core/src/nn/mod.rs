//! Differentiable building blocks shared by every model component.

mod gradcheck;
mod layers;
mod optim;
mod param;
mod rng;
mod tape;
mod tensor;

use std::collections::HashMap;

pub use gradcheck::{gradient_check, GradCheckReport, REL_ERROR_FLOOR};
pub use layers::{
    dropout, dropout_mask, sinusoidal_positions, AttentionBlock, BatchNorm, LayerNorm, Linear,
    MultiHeadAttention, DEFAULT_DROPOUT, LN_EPS,
};
pub use optim::{cosine_lr, Adam, AdamConfig};
pub use param::{ParamId, ParamStore, Parameter};
pub use rng::RngState;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{softmax, Tensor};

use crate::error::{Error, Result};

/// Floor applied inside the cross-entropy logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// Evaluation mode of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Gradients tracked, dropout active, batch statistics used.
    Train,
    /// Gradients tracked but dropout off and running statistics used; the
    /// forward pass is a pure function of inputs and parameters.
    Check,
    /// No gradient bookkeeping.
    Eval,
}

/// One forward pass: the tape plus read access to the parameters.
pub struct Ctx<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    rng: Option<&'a mut RngState>,
    mode: Mode,
    leaves: HashMap<ParamId, Var>,
    stat_updates: Vec<(ParamId, Tensor)>,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode, rng: Option<&'a mut RngState>) -> Self {
        let tape = if mode == Mode::Eval { Tape::inference() } else { Tape::new() };
        Self { tape, store, rng, mode, leaves: HashMap::new(), stat_updates: Vec::new() }
    }

    pub fn train(store: &'a ParamStore, rng: &'a mut RngState) -> Self {
        Self::new(store, Mode::Train, Some(rng))
    }

    pub fn eval(store: &'a ParamStore) -> Self {
        Self::new(store, Mode::Eval, None)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn training(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.leaves.get(&id) {
            return v;
        }
        let p = self.store.get(id);
        let v = self.tape.param_leaf(id, p.value.clone(), p.trainable);
        self.leaves.insert(id, v);
        v
    }

    pub fn rng(&mut self) -> Result<&mut RngState> {
        self.rng
            .as_deref_mut()
            .ok_or_else(|| Error::Config("training-mode forward pass needs a random stream".into()))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    pub(crate) fn push_stat_update(&mut self, id: ParamId, t: Tensor) {
        self.stat_updates.push((id, t));
    }

    pub fn take_stat_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.stat_updates)
    }

    /// Gradients of a scalar output with respect to every trainable
    /// parameter that took part in the pass.
    pub fn param_grads(&self, loss: Var) -> Result<Vec<(ParamId, Tensor)>> {
        let grads = self.tape.backward(loss)?;
        Ok(self
            .tape
            .param_vars()
            .into_iter()
            .filter_map(|(id, v)| grads.get(v).map(|g| (id, g)))
            .collect())
    }
}
