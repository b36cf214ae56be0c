//! Full two-branch model: encoders, completion stacks, decoders, and the
//! per-subject forward passes used for pretraining and feature extraction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cmc::{CmcStack, Direction};
use crate::config::{Modality, RunConfig};
use crate::data::{Manifest, Preprocessor};
use crate::error::{Error, Result};
use crate::nn::Ctx;
use crate::params::ModelState;
use crate::schema::{TabularRecord, TabularSchema};
use crate::survival::{fuse_features, Endpoint, Outcome};
use crate::tabular::{tabular_recon_loss, TabularDecoder, TabularEncoder};
use crate::tensor::{Tensor, Var};
use crate::visual::{visual_recon_loss, VisualDecoder, VisualEncoder};
use crate::volume::{patchify, preprocess, read_volume, window_intensities, MaskPartition, PatchGrid};

/// Parameter-name prefixes of the frozen trunk.
pub const TRUNK_PREFIXES: [&str; 3] = ["visual.enc", "tabular.enc", "cmc."];

/// One subject ready for the model.
#[derive(Clone, Debug)]
pub struct Subject {
    pub id: String,
    pub grid: PatchGrid,
    pub record: TabularRecord,
    pub pfs: Outcome,
    pub os: Outcome,
}

impl Subject {
    pub fn outcome(&self, e: Endpoint) -> Outcome {
        match e {
            Endpoint::Pfs => self.pfs,
            Endpoint::Os => self.os,
        }
    }
}

/// Reads, resamples, crops, windows and patchifies every manifest volume.
pub fn load_grids(m: &Manifest, cfg: &RunConfig) -> Result<Vec<PatchGrid>> {
    m.rows
        .iter()
        .map(|r| {
            let v = read_volume(&r.volume_path)?;
            let v = window_intensities(&preprocess(&v, cfg.visual_spacing, cfg.visual_extents)?);
            patchify(&v, cfg.visual_patch)
        })
        .collect()
}

/// Pairs patch grids with imputed, standardized records.
pub fn build_subjects(m: &Manifest, grids: &[PatchGrid], pre: &Preprocessor, rows: &[usize]) -> Vec<Subject> {
    rows.iter()
        .map(|&i| {
            let r = &m.rows[i];
            Subject {
                id: r.subject_id.clone(),
                grid: grids[i].clone(),
                record: pre.apply(r),
                pfs: r.pfs,
                os: r.os,
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Model {
    pub visual: VisualEncoder,
    pub visual_dec: VisualDecoder,
    pub tabular: TabularEncoder,
    pub tabular_dec: TabularDecoder,
    /// Masked visual tokens complete themselves from tabular nodes.
    pub vis_stack: CmcStack,
    /// Masked tabular nodes complete themselves from visual tokens.
    pub tab_stack: CmcStack,
    pub modality: Modality,
    pub cmc_enabled: bool,
    pub loss_weights: (f64, f64),
}

/// Per-subject masks for one pretraining step.
#[derive(Clone, Debug)]
pub struct Masks {
    pub visual: MaskPartition,
    pub tabular: MaskPartition,
}

/// Loss terms of one pretraining forward pass.
pub struct PretrainLoss {
    pub total: Var,
    pub l_v: f64,
    pub l_x: f64,
}

impl Model {
    /// Builds every module with parameters drawn from `cfg.seed`. With
    /// completion disabled the cross-attention value projections are zeroed
    /// and frozen.
    pub fn build(cfg: &RunConfig, schema: &TabularSchema) -> Result<(ModelState, Model)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut st = ModelState::new();
        let vcfg = cfg.visual();
        let tcfg = cfg.tabular();
        let visual = VisualEncoder::new(&mut st, &mut rng, "visual.enc", &vcfg)?;
        let tabular = TabularEncoder::new(&mut st, &mut rng, "tabular.enc", schema, &tcfg)?;
        let (cv, ct) = (cfg.visual_channels, cfg.tabular_channels);
        let vis_stack = CmcStack::new(
            &mut st,
            &mut rng,
            "cmc.vis",
            Direction::VisualFromTabular,
            cv,
            ct,
            cfg.cmc_layers,
            cfg.cmc_heads,
            cfg.cmc_mlp_hidden,
        )?;
        let tab_stack = CmcStack::new(
            &mut st,
            &mut rng,
            "cmc.tab",
            Direction::TabularFromVisual,
            ct,
            cv,
            cfg.cmc_layers,
            cfg.cmc_heads,
            cfg.cmc_mlp_hidden,
        )?;
        let visual_dec = VisualDecoder::new(&mut st, &mut rng, "visual.dec", &vcfg);
        let tabular_dec = TabularDecoder::new(&mut st, &mut rng, "tabular.dec", &tabular);
        if !cfg.cmc_enabled {
            vis_stack.null_cross_values(&mut st);
            tab_stack.null_cross_values(&mut st);
        }
        Ok((
            st,
            Model {
                visual,
                visual_dec,
                tabular,
                tabular_dec,
                vis_stack,
                tab_stack,
                modality: cfg.modality,
                cmc_enabled: cfg.cmc_enabled,
                loss_weights: (cfg.loss_weight_v, cfg.loss_weight_x),
            },
        ))
    }

    pub fn n_tokens(&self) -> usize {
        self.visual.cfg.n_tokens()
    }

    pub fn d_vars(&self) -> usize {
        self.tabular.schema.d_vars()
    }

    /// Width of the fused feature row fed to the risk head.
    pub fn feature_dim(&self) -> usize {
        let mut f = 0;
        if self.modality.uses_image() {
            f += self.vis_stack.channels;
        }
        if self.modality.uses_tabular() {
            f += self.tab_stack.channels;
        }
        f
    }

    fn intact_visual(&self, cx: Ctx, s: &Subject) -> Result<Var> {
        let all: Vec<usize> = (0..self.n_tokens()).collect();
        self.visual.encode(cx, &s.grid, &all)
    }

    fn intact_tabular(&self, cx: Ctx, s: &Subject) -> Result<Var> {
        let all: Vec<usize> = (0..self.d_vars()).collect();
        self.tabular.encode(cx, &s.record, &all)
    }

    fn crosses(&self) -> bool {
        self.cmc_enabled && self.modality == Modality::Both
    }

    /// Masked visual tokens completed from the intact tabular graph, decoded
    /// and scored against the masked patches.
    pub fn visual_direction(&self, cx: Ctx, s: &Subject, part: &MaskPartition) -> Result<Var> {
        let enc = self.visual.encode(cx, &s.grid, &part.visible)?;
        let other = if self.crosses() { Some(self.intact_tabular(cx, s)?) } else { None };
        let fused = self.vis_stack.complete(cx, enc, other)?;
        let pred = self.visual_dec.decode(cx, fused, part)?;
        visual_recon_loss(cx, pred, &s.grid, &part.masked)
    }

    /// Decoder predictions for every variable after masking `part.masked`.
    pub fn tabular_predictions(&self, cx: Ctx, s: &Subject, part: &MaskPartition) -> Result<Vec<Var>> {
        let enc = self.tabular.encode(cx, &s.record, &part.visible)?;
        let other = if self.crosses() { Some(self.intact_visual(cx, s)?) } else { None };
        let fused = self.tab_stack.complete(cx, enc, other)?;
        self.tabular_dec.decode(cx, fused, part, self.tabular.mask_table(cx)?)
    }

    pub fn tabular_direction(&self, cx: Ctx, s: &Subject, part: &MaskPartition) -> Result<Var> {
        let preds = self.tabular_predictions(cx, s, part)?;
        tabular_recon_loss(cx, &self.tabular.schema, &preds, &s.record, &part.masked)
    }

    /// `w_v L_v + w_x L_x` over the requested directions.
    pub fn pretrain_loss(&self, cx: Ctx, s: &Subject, masks: &Masks, dirs: &[Direction]) -> Result<PretrainLoss> {
        let g = cx.g;
        let mut total = g.constant(Tensor::scalar(0.0));
        let (mut l_v, mut l_x) = (0.0, 0.0);
        for d in dirs {
            match d {
                Direction::VisualFromTabular => {
                    let l = self.visual_direction(cx, s, &masks.visual)?;
                    l_v = g.item(l);
                    total = g.add(total, g.scale(l, self.loss_weights.0))?;
                }
                Direction::TabularFromVisual => {
                    let l = self.tabular_direction(cx, s, &masks.tabular)?;
                    l_x = g.item(l);
                    total = g.add(total, g.scale(l, self.loss_weights.1))?;
                }
            }
        }
        if !(l_v.is_finite() && l_x.is_finite()) {
            return Err(Error::Numeric(format!("non-finite pretraining loss for subject {}", s.id)));
        }
        Ok(PretrainLoss { total, l_v, l_x })
    }

    /// Fused `1 x F` feature row from intact inputs: mean-pooled visual
    /// completion output next to the tabular [CLS] row.
    pub fn features(&self, cx: Ctx, s: &Subject) -> Result<Var> {
        let vis = if self.modality.uses_image() { Some(self.intact_visual(cx, s)?) } else { None };
        let tab = if self.modality.uses_tabular() { Some(self.intact_tabular(cx, s)?) } else { None };
        let cross = self.crosses();
        let v = match vis {
            Some(v) => Some(self.vis_stack.complete(cx, v, if cross { tab } else { None })?),
            None => None,
        };
        let t = match tab {
            Some(t) => Some(self.tab_stack.complete(cx, t, if cross { vis } else { None })?),
            None => None,
        };
        fuse_features(cx, v, t)
    }
}
