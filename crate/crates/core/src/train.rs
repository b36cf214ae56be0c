//! Training loops: masked pretraining, frozen-trunk head fitting, and the
//! supervised end-to-end variant used by the S ablations.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cmc::Direction;
use crate::config::{Modality, RunConfig};
use crate::error::{Error, Result};
use crate::model::{Masks, Model, Subject, TRUNK_PREFIXES};
use crate::nn::Ctx;
use crate::optim::Adam;
use crate::params::{ModelState, ParamId};
use crate::survival::{Endpoint, RiskHead};
use crate::tabular::sample_variable_mask;
use crate::tensor::{Graph, Tensor};
use crate::volume::{sample_patch_mask, MaskPartition};

/// splitmix64 finalizer over a combined key.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub l_v: f64,
    pub l_x: f64,
    pub total: f64,
}

pub fn loss_log_csv(rows: &[EpochLoss]) -> String {
    let mut s = String::from("epoch,L_v,L_x,total\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.epoch, r.l_v, r.l_x, r.total));
    }
    s
}

/// Mask pair for one subject at one step. Seeds depend only on the run seed,
/// the epoch and the subject's position, never on batch composition.
pub fn step_masks(model: &Model, cfg: &RunConfig, epoch: usize, index: usize) -> Result<Masks> {
    let s = mix_seed(cfg.seed, epoch as u64 + 1, index as u64);
    Ok(Masks {
        visual: sample_patch_mask(model.n_tokens(), cfg.mask_ratio_img, s)?,
        tabular: sample_variable_mask(model.d_vars(), cfg.mask_ratio_tab, s ^ 0x5A5A_5A5A)?,
    })
}

fn directions_for_step(cfg: &RunConfig, step: usize) -> Vec<Direction> {
    let all = cfg.modality.directions();
    if cfg.cmc_alternate_directions && all.len() == 2 {
        vec![all[step % 2]]
    } else {
        all
    }
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xE90C, epoch as u64)));
    order
}

/// Masked-reconstruction pretraining. Returns one averaged row per epoch.
pub fn pretrain(st: &mut ModelState, model: &Model, subjects: &[Subject], cfg: &RunConfig) -> Result<Vec<EpochLoss>> {
    if subjects.is_empty() {
        return Err(Error::Data("no subjects to pretrain on".into()));
    }
    let mut adam = Adam::new(cfg.lr_pretrain);
    let mut log = Vec::with_capacity(cfg.epochs_pretrain);
    let mut step = 0;
    for epoch in 0..cfg.epochs_pretrain {
        let order = epoch_order(subjects.len(), cfg.seed, epoch);
        let (mut sv, mut sx, mut st_) = (0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let dirs = directions_for_step(cfg, step);
            st.zero_grad();
            for &i in batch {
                let masks = step_masks(model, cfg, epoch, i)?;
                let g = Graph::new();
                let l = model.pretrain_loss(Ctx::new(&g, st), &subjects[i], &masks, &dirs)?;
                let total = g.item(l.total);
                let grads = g.backward(l.total)?;
                st.accumulate(&grads, 1.0 / batch.len() as f64);
                sv += l.l_v;
                sx += l.l_x;
                st_ += total;
            }
            adam.step(st);
            step += 1;
        }
        let n = subjects.len() as f64;
        let row = EpochLoss {
            epoch,
            l_v: sv / n,
            l_x: sx / n,
            total: st_ / n,
        };
        log::info!("pretrain epoch {epoch}: L_v={:.5} L_x={:.5} total={:.5}", row.l_v, row.l_x, row.total);
        log.push(row);
    }
    st.zero_grad();
    Ok(log)
}

/// Frozen-trunk features for every subject, `n x F`.
pub fn extract_features(st: &ModelState, model: &Model, subjects: &[Subject]) -> Result<Tensor> {
    let f = model.feature_dim();
    let mut data = Vec::with_capacity(subjects.len() * f);
    for s in subjects {
        let g = Graph::inference();
        let v = model.features(Ctx::new(&g, st), s)?;
        data.extend_from_slice(g.value(v).data());
    }
    Ok(Tensor::matrix(subjects.len(), f, data))
}

/// Adds a fresh risk head named `head.<endpoint>`.
pub fn add_head(st: &mut ModelState, model: &Model, cfg: &RunConfig, endpoint: Endpoint) -> RiskHead {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x4EAD, endpoint as u64));
    RiskHead::new(st, &mut rng, &format!("head.{}", endpoint.as_str()), model.feature_dim(), cfg.head_hidden)
}

pub fn head_ids(st: &ModelState, head: &RiskHead) -> Vec<ParamId> {
    let prefix = format!("{}.", RiskHead::prefix(st, head));
    st.ids().filter(|&id| st.name(id).starts_with(&prefix)).collect()
}

/// Full-batch Cox fitting of the head on pre-stored features. Every other
/// parameter is frozen and its checksum is verified afterwards.
pub fn fit_head(st: &mut ModelState, head: &RiskHead, features: &Tensor, outcomes: &[crate::survival::Outcome], cfg: &RunConfig) -> Result<Vec<f64>> {
    let times: Vec<f64> = outcomes.iter().map(|o| o.time).collect();
    let events: Vec<bool> = outcomes.iter().map(|o| o.event).collect();
    if !events.iter().any(|&e| e) {
        return Err(Error::Data("no events in the training split".into()));
    }
    let prefix = RiskHead::prefix(st, head);
    let ids = head_ids(st, head);
    let was_frozen: Vec<bool> = st.ids().map(|id| st.is_frozen(id)).collect();
    st.freeze_all_except(&[&prefix]);
    let outside = |name: &str| !name.starts_with(&format!("{prefix}."));
    let before = st.checksum(outside);
    let mut adam = Adam::new(cfg.lr_finetune);
    let mut losses = Vec::with_capacity(cfg.epochs_finetune);
    for _ in 0..cfg.epochs_finetune {
        let g = Graph::new();
        let cx = Ctx::new(&g, st);
        let x = g.constant(features.clone());
        let h = head.score(cx, x)?;
        let loss = g.cox_nll(h, &times, &events)?;
        let lv = g.item(loss);
        if !lv.is_finite() {
            return Err(Error::Numeric("non-finite Cox loss while fitting the head".into()));
        }
        let grads = g.backward(loss)?;
        st.zero_grad();
        st.accumulate(&grads, 1.0);
        adam.step_params(st, &ids);
        losses.push(lv);
    }
    st.zero_grad();
    let after = st.checksum(outside);
    for (id, f) in st.ids().collect::<Vec<_>>().into_iter().zip(was_frozen) {
        st.set_frozen(id, f);
    }
    if before != after {
        return Err(Error::Contract("frozen trunk parameters changed during head fitting".into()));
    }
    Ok(losses)
}

pub fn risk_scores(st: &ModelState, head: &RiskHead, features: &Tensor) -> Result<Vec<f64>> {
    let g = Graph::inference();
    let x = g.constant(features.clone());
    let h = head.score(Ctx::new(&g, st), x)?;
    let out = g.value(h).data().to_vec();
    Ok(out)
}

/// Supervised variant: trunk and head trained together on minibatch Cox
/// loss for `epochs_pretrain` epochs. Batches without events are skipped.
pub fn train_supervised(st: &mut ModelState, model: &Model, head: &RiskHead, subjects: &[Subject], cfg: &RunConfig, endpoint: Endpoint) -> Result<Vec<f64>> {
    let hids = head_ids(st, head);
    let trunk: Vec<ParamId> = st
        .ids()
        .filter(|&id| TRUNK_PREFIXES.iter().any(|p| st.name(id).starts_with(p)))
        .collect();
    let mut trunk_opt = Adam::new(cfg.lr_pretrain);
    let mut head_opt = Adam::new(cfg.lr_finetune);
    let mut log = Vec::with_capacity(cfg.epochs_pretrain);
    for epoch in 0..cfg.epochs_pretrain {
        let order = epoch_order(subjects.len(), cfg.seed, epoch);
        let (mut sum, mut n) = (0.0, 0);
        for batch in order.chunks(cfg.batch_size) {
            let outcomes: Vec<_> = batch.iter().map(|&i| subjects[i].outcome(endpoint)).collect();
            if !outcomes.iter().any(|o| o.event) {
                continue;
            }
            let g = Graph::new();
            let cx = Ctx::new(&g, st);
            let rows = batch.iter().map(|&i| model.features(cx, &subjects[i])).collect::<Result<Vec<_>>>()?;
            let h = head.score(cx, g.concat_rows(&rows)?)?;
            let times: Vec<f64> = outcomes.iter().map(|o| o.time).collect();
            let events: Vec<bool> = outcomes.iter().map(|o| o.event).collect();
            let loss = g.cox_nll(h, &times, &events)?;
            let lv = g.item(loss);
            if !lv.is_finite() {
                return Err(Error::Numeric("non-finite Cox loss in supervised training".into()));
            }
            let grads = g.backward(loss)?;
            st.zero_grad();
            st.accumulate(&grads, 1.0);
            trunk_opt.step_params(st, &trunk);
            head_opt.step_params(st, &hids);
            sum += lv;
            n += 1;
        }
        let mean = if n > 0 { sum / n as f64 } else { f64::NAN };
        log::info!("supervised epoch {epoch}: cox={mean:.5}");
        log.push(mean);
    }
    st.zero_grad();
    Ok(log)
}

/// Mean squared reconstruction error of one numerical variable, which is
/// always placed in the tabular mask. The visual counterpart stays intact.
pub fn variable_recon_error(st: &ModelState, model: &Model, subjects: &[Subject], var: usize, ratio: f64, seed: u64) -> Result<f64> {
    if !model.tabular.schema.variables[var].is_numerical() {
        return Err(Error::Usage(format!("{} is not numerical", model.tabular.schema.variables[var].name)));
    }
    let d = model.d_vars();
    let mut total = 0.0;
    for (i, s) in subjects.iter().enumerate() {
        let part = force_masked(sample_variable_mask(d, ratio, mix_seed(seed, 0x7AB, i as u64))?, var);
        let g = Graph::inference();
        let preds = model.tabular_predictions(Ctx::new(&g, st), s, &part)?;
        let target = s.record.num(var).ok_or_else(|| Error::Data(format!("subject {} lacks a numerical value for variable {var}", s.id)))?;
        let err = g.value(preds[var]).item() - target;
        total += err * err;
    }
    Ok(total / subjects.len() as f64)
}

/// Moves `var` into the masked set, swapping out the last masked entry.
fn force_masked(mut part: MaskPartition, var: usize) -> MaskPartition {
    if part.masked.contains(&var) {
        return part;
    }
    if let Some(out) = part.masked.pop() {
        part.visible.push(out);
    }
    part.visible.retain(|&v| v != var);
    part.masked.push(var);
    part.visible.sort_unstable();
    part.masked.sort_unstable();
    part
}

/// Whether the configuration trains the trunk with survival supervision.
pub fn is_supervised(cfg: &RunConfig) -> bool {
    cfg.pretrain_mode == crate::config::PretrainMode::Supervised
}

pub fn modality_uses_cross(cfg: &RunConfig) -> bool {
    cfg.cmc_enabled && cfg.modality == Modality::Both
}
