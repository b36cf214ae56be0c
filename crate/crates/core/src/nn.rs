//! Small building blocks shared by both branches.

use rand::Rng;

use crate::error::Result;
use crate::params::{ModelState, ParamId};
use crate::tensor::{Graph, Tensor, Var};

/// A graph plus the parameter store it reads from.
#[derive(Clone, Copy)]
pub struct Ctx<'a> {
    pub g: &'a Graph,
    pub st: &'a ModelState,
}

impl<'a> Ctx<'a> {
    pub fn new(g: &'a Graph, st: &'a ModelState) -> Self {
        Self { g, st }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.g.param(self.st, id)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(st: &mut ModelState, rng: &mut R, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let w = st.add(format!("{name}.w"), Tensor::randn(&[d_in, d_out], 1.0 / (d_in as f64).sqrt(), rng));
        let b = bias.then(|| st.add(format!("{name}.b"), Tensor::zeros(&[1, d_out])));
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, cx: Ctx, x: Var) -> Result<Var> {
        let y = cx.g.matmul(x, cx.p(self.w))?;
        match self.b {
            Some(b) => cx.g.add_row(y, cx.p(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(st: &mut ModelState, name: &str, dim: usize) -> Self {
        Self {
            gain: st.add(format!("{name}.gain"), Tensor::full(&[1, dim], 1.0)),
            bias: st.add(format!("{name}.bias"), Tensor::zeros(&[1, dim])),
        }
    }

    pub fn forward(&self, cx: Ctx, x: Var) -> Result<Var> {
        cx.g.layer_norm(x, cx.p(self.gain), cx.p(self.bias))
    }
}

/// Two linear layers with a GELU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(st: &mut ModelState, rng: &mut R, name: &str, d_in: usize, hidden: usize, d_out: usize) -> Self {
        Self {
            fc1: Linear::new(st, rng, &format!("{name}.fc1"), d_in, hidden, true),
            fc2: Linear::new(st, rng, &format!("{name}.fc2"), hidden, d_out, true),
        }
    }

    pub fn forward(&self, cx: Ctx, x: Var) -> Result<Var> {
        let h = cx.g.gelu(self.fc1.forward(cx, x)?);
        self.fc2.forward(cx, h)
    }
}
