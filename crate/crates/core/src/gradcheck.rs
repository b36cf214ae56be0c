//! Central finite-difference checking of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::Ctx;
use crate::params::{ModelState, ParamId};
use crate::tensor::{Graph, Var};

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub rel_err: f64,
    pub analytic_norm: f64,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub params: Vec<ParamCheck>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// Denominator floor for [`relative_error`]. Central differences carry
/// roughly `1e-16 |L| / step` of rounding noise, so gradients that vanish
/// exactly (shift-invariant directions, for instance) are compared on an
/// absolute scale instead.
pub const NORM_FLOOR: f64 = 1e-6;

/// Relative error `|a - n| / max(|a|, |n|, NORM_FLOOR)` in the Euclidean norm.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(NORM_FLOOR)
}

/// Compares backward-pass gradients with central differences.
///
/// For each listed parameter at most `max_entries` coordinates are probed,
/// chosen with `seed`; `None` probes every coordinate.
pub fn check(
    state: &mut ModelState,
    ids: &[ParamId],
    step: f64,
    max_entries: Option<usize>,
    seed: u64,
    loss: impl Fn(Ctx) -> Result<Var>,
) -> Result<GradReport> {
    let g = Graph::new();
    let l = loss(Ctx::new(&g, state))?;
    let grads = g.backward(l)?;
    let analytic: Vec<Option<Vec<f64>>> = {
        let mut by_id = vec![None; state.len()];
        for (id, gr) in grads.params() {
            by_id[id.index()] = Some(gr.to_vec());
        }
        by_id
    };
    drop(g);

    let eval = |st: &ModelState| -> Result<f64> {
        let g = Graph::inference();
        let v = loss(Ctx::new(&g, st))?;
        let out = g.item(v);
        Ok(out)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = Vec::new();
    for &id in ids {
        let n = state.value(id).len();
        let coords: Vec<usize> = match max_entries {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let full = analytic[id.index()].clone().unwrap_or_else(|| vec![0.0; n]);
        let mut a = Vec::with_capacity(coords.len());
        let mut num = Vec::with_capacity(coords.len());
        for &i in &coords {
            let orig = state.value(id).data()[i];
            state.value_mut(id).data_mut()[i] = orig + step;
            let plus = eval(state)?;
            state.value_mut(id).data_mut()[i] = orig - step;
            let minus = eval(state)?;
            state.value_mut(id).data_mut()[i] = orig;
            num.push((plus - minus) / (2.0 * step));
            a.push(full[i]);
        }
        report.push(ParamCheck {
            name: state.name(id).to_string(),
            checked: coords.len(),
            rel_err: relative_error(&a, &num),
            analytic_norm: a.iter().map(|x| x * x).sum::<f64>().sqrt(),
        });
    }
    Ok(GradReport { params: report })
}
