//! Risk head and Cox partial-likelihood loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Ctx, Linear, Mlp};
use crate::params::ModelState;
use crate::tensor::Var;

/// Survival endpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Endpoint {
    Pfs,
    Os,
}

impl Endpoint {
    pub fn as_str(self) -> &'static str {
        match self {
            Endpoint::Pfs => "pfs",
            Endpoint::Os => "os",
        }
    }
}

impl std::str::FromStr for Endpoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pfs" => Ok(Endpoint::Pfs),
            "os" => Ok(Endpoint::Os),
            _ => Err(Error::Usage(format!("endpoint must be pfs or os, got {s:?}"))),
        }
    }
}

/// Follow-up time in months and whether the event was observed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub time: f64,
    pub event: bool,
}

/// Risk scores paired with outcomes, one entry per subject.
#[derive(Clone, Debug, PartialEq)]
pub struct RiskBatch {
    pub scores: Vec<f64>,
    pub outcomes: Vec<Outcome>,
}

impl RiskBatch {
    pub fn new(scores: Vec<f64>, outcomes: Vec<Outcome>) -> Result<Self> {
        if scores.len() != outcomes.len() {
            return Err(Error::Dimension {
                op: "risk_batch",
                lhs: vec![scores.len()],
                rhs: vec![outcomes.len()],
            });
        }
        if let Some(o) = outcomes.iter().find(|o| !(o.time > 0.0 && o.time.is_finite())) {
            return Err(Error::Data(format!("survival time must be positive, got {}", o.time)));
        }
        Ok(Self { scores, outcomes })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.outcomes.iter().map(|o| o.time).collect()
    }

    pub fn events(&self) -> Vec<bool> {
        self.outcomes.iter().map(|o| o.event).collect()
    }

    pub fn n_events(&self) -> usize {
        self.outcomes.iter().filter(|o| o.event).count()
    }
}

/// Negative log partial likelihood averaged over events, Breslow ties.
pub fn cox_loss(batch: &RiskBatch) -> Result<f64> {
    if batch.n_events() == 0 {
        return Err(Error::Contract("Cox loss needs at least one event; resample the batch".into()));
    }
    let g = crate::tensor::Graph::inference();
    let n = batch.len();
    let h = g.constant(crate::tensor::Tensor::matrix(n, 1, batch.scores.clone()));
    let l = g.cox_nll(h, &batch.times(), &batch.events())?;
    Ok(g.item(l))
}

/// `F -> hidden -> 1` MLP on pooled visual features and the tabular [CLS].
#[derive(Clone, Debug)]
pub struct RiskHead {
    pub mlp: Mlp,
    pub in_dim: usize,
}

impl RiskHead {
    pub fn new<R: Rng + ?Sized>(st: &mut ModelState, rng: &mut R, prefix: &str, in_dim: usize, hidden: usize) -> Self {
        Self {
            mlp: Mlp::new(st, rng, prefix, in_dim, hidden, 1),
            in_dim,
        }
    }

    /// Parameter-name prefix covering every head parameter.
    pub fn prefix(st: &ModelState, head: &RiskHead) -> String {
        let name = st.name(head.mlp.fc1.w);
        name.trim_end_matches(".fc1.w").to_string()
    }

    pub fn output(&self) -> &Linear {
        &self.mlp.fc2
    }

    /// Scores a batch of fused feature rows, `n x in_dim -> n x 1`.
    pub fn score(&self, cx: Ctx, features: Var) -> Result<Var> {
        self.mlp.forward(cx, features)
    }
}

/// Mean-pools visual tokens and concatenates the tabular [CLS] row (row 0).
/// Either part may be absent for single-modality variants.
pub fn fuse_features(cx: Ctx, visual: Option<Var>, tabular: Option<Var>) -> Result<Var> {
    let g = cx.g;
    let mut parts = Vec::new();
    if let Some(v) = visual {
        parts.push(g.mean_rows(v));
    }
    if let Some(t) = tabular {
        parts.push(g.index_rows(t, &[0])?);
    }
    if parts.is_empty() {
        return Err(Error::Config("risk head needs at least one modality".into()));
    }
    g.concat_cols(&parts)
}
