//! Small building blocks shared by the encoders and the scoring heads.

use crate::autodiff::{Activation, Tape, Var};
use crate::params::{ParamGroup, ParamId, ParamStore};

/// Affine map `x · W + b` with `W: in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        group: ParamGroup,
    ) -> Self {
        let std = (2.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = store.normal(&format!("{name}.w"), in_dim, out_dim, std, group);
        let bias = store.zeros(&format!("{name}.b"), 1, out_dim, group);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Var<'t> {
        x.matmul(tape.param(store, self.weight))
            .add_row(tape.param(store, self.bias))
    }
}

/// Two affine layers with one nonlinearity between them.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub first: Linear,
    pub second: Linear,
    pub activation: Activation,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize, usize),
        activation: Activation,
        group: ParamGroup,
    ) -> Self {
        let (input, hidden, output) = dims;
        Self {
            first: Linear::new(store, &format!("{name}.0"), input, hidden, group),
            second: Linear::new(store, &format!("{name}.1"), hidden, output, group),
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.first.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.second.out_dim
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Var<'t> {
        let h = self.first.forward(tape, store, x).act(self.activation);
        self.second.forward(tape, store, h)
    }

    pub fn params(&self) -> [ParamId; 4] {
        [
            self.first.weight,
            self.first.bias,
            self.second.weight,
            self.second.bias,
        ]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize, group: ParamGroup) -> Self {
        Self {
            gain: store.ones(&format!("{name}.gain"), 1, dim, group),
            bias: store.zeros(&format!("{name}.bias"), 1, dim, group),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Var<'t> {
        tape.layer_norm(
            x,
            tape.param(store, self.gain),
            tape.param(store, self.bias),
            Self::EPS,
        )
    }
}
