//! Cross-modality completion: a stack of layers in which a masked modality
//! attends to itself, then cross-attends to the intact other modality.

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Ctx, LayerNorm, Linear, Mlp};
use crate::params::ModelState;
use crate::tensor::{AttnGroup, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Masked tabular nodes query intact visual tokens.
    TabularFromVisual,
    /// Masked visual tokens query intact tabular nodes.
    VisualFromTabular,
}

impl Direction {
    pub fn tag(self) -> &'static str {
        match self {
            Direction::TabularFromVisual => "tab_from_vis",
            Direction::VisualFromTabular => "vis_from_tab",
        }
    }
}

#[derive(Clone, Debug)]
pub struct CmcLayer {
    pub ws_q: Linear,
    pub ws_k: Linear,
    pub ws_v: Linear,
    pub wc_q: Linear,
    pub wc_k: Linear,
    pub wc_v: Linear,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl CmcLayer {
    fn new<R: Rng + ?Sized>(st: &mut ModelState, rng: &mut R, name: &str, c: usize, hidden: usize) -> Self {
        let sq = |st: &mut ModelState, rng: &mut R, n: &str| Linear::new(st, rng, &format!("{name}.{n}"), c, c, false);
        Self {
            ws_q: sq(st, rng, "ws_q"),
            ws_k: sq(st, rng, "ws_k"),
            ws_v: sq(st, rng, "ws_v"),
            wc_q: sq(st, rng, "wc_q"),
            wc_k: sq(st, rng, "wc_k"),
            wc_v: sq(st, rng, "wc_v"),
            ln1: LayerNorm::new(st, &format!("{name}.ln1"), c),
            ln2: LayerNorm::new(st, &format!("{name}.ln2"), c),
            mlp: Mlp::new(st, rng, &format!("{name}.mlp"), c, hidden, c),
        }
    }

    /// `A = LN(SA(own) + own)`, `B = LN(CA(A, other) + A)`, `MLP(B) + B`.
    /// A missing `other` contributes a zero cross-attention term.
    pub fn forward(&self, cx: Ctx, own: Var, other: Option<Var>, heads: usize) -> Result<Var> {
        let g = cx.g;
        let n = g.shape(own)[0];
        let sa = g.attention(
            self.ws_q.forward(cx, own)?,
            self.ws_k.forward(cx, own)?,
            self.ws_v.forward(cx, own)?,
            Rc::new(vec![AttnGroup::full(n, n)]),
            heads,
        )?;
        let a = self.ln1.forward(cx, g.add(sa, own)?)?;
        let ca = match other {
            Some(o) => {
                let m = g.shape(o)[0];
                g.attention(
                    self.wc_q.forward(cx, a)?,
                    self.wc_k.forward(cx, o)?,
                    self.wc_v.forward(cx, o)?,
                    Rc::new(vec![AttnGroup::full(n, m)]),
                    heads,
                )?
            }
            None => g.constant(Tensor::zeros(&g.shape(a))),
        };
        let b = self.ln2.forward(cx, g.add(ca, a)?)?;
        g.add(self.mlp.forward(cx, b)?, b)
    }
}

#[derive(Clone, Debug)]
pub struct CmcStack {
    pub direction: Direction,
    pub layers: Vec<CmcLayer>,
    /// Maps the other modality's width onto this stack's width when the two
    /// branches were configured with different channel counts.
    pub adapter: Option<Linear>,
    pub channels: usize,
    pub other_channels: usize,
    pub heads: usize,
}

impl CmcStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        st: &mut ModelState,
        rng: &mut R,
        prefix: &str,
        direction: Direction,
        channels: usize,
        other_channels: usize,
        layers: usize,
        heads: usize,
        hidden: usize,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Config("cmc.layers must be at least 1".into()));
        }
        if !channels.is_multiple_of(heads) {
            return Err(Error::Config(format!("cmc.heads={heads} does not divide channel size {channels}")));
        }
        let adapter = (other_channels != channels)
            .then(|| Linear::new(st, rng, &format!("{prefix}.adapter"), other_channels, channels, true));
        Ok(Self {
            direction,
            layers: (0..layers)
                .map(|i| CmcLayer::new(st, rng, &format!("{prefix}.layer{i}"), channels, hidden))
                .collect(),
            adapter,
            channels,
            other_channels,
            heads,
        })
    }

    /// Runs every layer in order over the masked modality's features.
    pub fn complete(&self, cx: Ctx, own: Var, other: Option<Var>) -> Result<Var> {
        let g = cx.g;
        let own_c = g.shape(own)[1];
        if own_c != self.channels {
            return Err(Error::Config(format!(
                "{} stack expects {}-channel features, got {own_c}",
                self.direction.tag(),
                self.channels
            )));
        }
        let other = match other {
            Some(o) => {
                let oc = g.shape(o)[1];
                if oc != self.other_channels {
                    return Err(Error::Config(format!(
                        "{} stack expects {}-channel counterpart features, got {oc}",
                        self.direction.tag(),
                        self.other_channels
                    )));
                }
                Some(match &self.adapter {
                    Some(a) => a.forward(cx, o)?,
                    None => o,
                })
            }
            None => None,
        };
        let mut x = own;
        for l in &self.layers {
            x = l.forward(cx, x, other, self.heads)?;
        }
        Ok(x)
    }

    /// Zeroes and freezes every cross-attention value projection so no
    /// information crosses between modalities.
    pub fn null_cross_values(&self, st: &mut ModelState) {
        for l in &self.layers {
            st.value_mut(l.wc_v.w).data_mut().fill(0.0);
            st.set_frozen(l.wc_v.w, true);
        }
    }
}
