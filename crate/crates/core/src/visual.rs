//! Visual branch: patch embedding, alternating slice/depth attention blocks,
//! and an MAE-style decoder with one shared mask token.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Ctx, LayerNorm, Linear, Mlp};
use crate::params::{ModelState, ParamId};
use crate::tensor::{AttnGroup, Tensor, Var};
use crate::volume::{grid_coords, MaskPartition, PatchGrid, TokenCoord};

#[derive(Clone, Debug, PartialEq)]
pub struct VisualConfig {
    pub grid: [usize; 3],
    pub patch: [usize; 3],
    pub channels: usize,
    pub heads: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    pub mlp_hidden: usize,
}

impl VisualConfig {
    pub fn n_tokens(&self) -> usize {
        self.grid.iter().product()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch.iter().product()
    }
}

/// Which tokens share an attention group.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnAxis {
    /// S-Attn: tokens with the same depth index.
    Slice,
    /// D-Attn: tokens with the same spatial column.
    Depth,
}

/// Groups the positions of `coords` by `axis`. Group order follows the
/// group key; positions inside a group keep their order in `coords`.
pub fn attention_groups(coords: &[TokenCoord], axis: AttnAxis) -> Vec<AttnGroup> {
    let mut by_key: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (pos, c) in coords.iter().enumerate() {
        let key = match axis {
            AttnAxis::Slice => c.depth,
            AttnAxis::Depth => c.slice,
        };
        by_key.entry(key).or_default().push(pos);
    }
    by_key.into_values().map(AttnGroup::symmetric).collect()
}

/// Fixed 3D sine-cosine table, one row per token in grid order.
///
/// Each axis `(iy, ix, iz)` gets `2 * floor(c / 6)` channels laid out as
/// `[sin(p w_0), cos(p w_0), sin(p w_1), ...]` with `w_i = 10000^(-2i/n)`;
/// leftover channels are zero.
pub fn sincos_pos_emb_3d(grid: [usize; 3], c: usize) -> Tensor {
    let per_axis = 2 * (c / 6);
    let [h, w, d] = grid;
    let mut data = vec![0.0; h * w * d * c];
    for (t, coord) in grid_coords(grid).iter().enumerate() {
        let pos = [coord.slice / w, coord.slice % w, coord.depth];
        for (a, &p) in pos.iter().enumerate() {
            for i in 0..per_axis / 2 {
                let freq = 10000f64.powf(-(2.0 * i as f64) / per_axis as f64);
                let base = t * c + a * per_axis + 2 * i;
                data[base] = (p as f64 * freq).sin();
                data[base + 1] = (p as f64 * freq).cos();
            }
        }
    }
    Tensor::matrix(h * w * d, c, data)
}

/// Post-norm transformer block whose self-attention is confined to groups
/// along one axis.
#[derive(Clone, Debug)]
pub struct VisualBlock {
    pub axis: AttnAxis,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln1: LayerNorm,
    pub mlp: Mlp,
    pub ln2: LayerNorm,
}

impl VisualBlock {
    fn new<R: Rng + ?Sized>(st: &mut ModelState, rng: &mut R, name: &str, axis: AttnAxis, c: usize, hidden: usize) -> Self {
        Self {
            axis,
            wq: Linear::new(st, rng, &format!("{name}.wq"), c, c, false),
            wk: Linear::new(st, rng, &format!("{name}.wk"), c, c, false),
            wv: Linear::new(st, rng, &format!("{name}.wv"), c, c, false),
            wo: Linear::new(st, rng, &format!("{name}.wo"), c, c, false),
            ln1: LayerNorm::new(st, &format!("{name}.ln1"), c),
            mlp: Mlp::new(st, rng, &format!("{name}.mlp"), c, hidden, c),
            ln2: LayerNorm::new(st, &format!("{name}.ln2"), c),
        }
    }

    pub fn forward(&self, cx: Ctx, x: Var, coords: &[TokenCoord], heads: usize) -> Result<Var> {
        let g = cx.g;
        let groups = Rc::new(attention_groups(coords, self.axis));
        let q = self.wq.forward(cx, x)?;
        let k = self.wk.forward(cx, x)?;
        let v = self.wv.forward(cx, x)?;
        let a = self.wo.forward(cx, g.attention(q, k, v, groups, heads)?)?;
        let x1 = self.ln1.forward(cx, g.add(a, x)?)?;
        let m = self.mlp.forward(cx, x1)?;
        self.ln2.forward(cx, g.add(m, x1)?)
    }
}

fn alternating_blocks<R: Rng + ?Sized>(st: &mut ModelState, rng: &mut R, prefix: &str, n: usize, c: usize, hidden: usize) -> Vec<VisualBlock> {
    (0..n)
        .map(|i| {
            let axis = if i % 2 == 0 { AttnAxis::Slice } else { AttnAxis::Depth };
            VisualBlock::new(st, rng, &format!("{prefix}.block{i}"), axis, c, hidden)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct VisualEncoder {
    pub cfg: VisualConfig,
    pub patch_proj: Linear,
    pub pos_emb: Tensor,
    pub blocks: Vec<VisualBlock>,
}

impl VisualEncoder {
    pub fn new<R: Rng + ?Sized>(st: &mut ModelState, rng: &mut R, prefix: &str, cfg: &VisualConfig) -> Result<Self> {
        if cfg.enc_blocks == 0 || !cfg.enc_blocks.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "visual.blocks must be a positive even count (slice/depth pairs), got {}",
                cfg.enc_blocks
            )));
        }
        let c = cfg.channels;
        Ok(Self {
            cfg: cfg.clone(),
            patch_proj: Linear::new(st, rng, &format!("{prefix}.patch_proj"), cfg.patch_dim(), c, true),
            pos_emb: sincos_pos_emb_3d(cfg.grid, c),
            blocks: alternating_blocks(st, rng, prefix, cfg.enc_blocks, c, cfg.mlp_hidden),
        })
    }

    /// `patch_proj(raw) + pos_emb` for the listed tokens, in that order.
    pub fn embed_patches(&self, cx: Ctx, grid: &PatchGrid, tokens: &[usize]) -> Result<Var> {
        if grid.patch_dim() != self.cfg.patch_dim() || grid.grid != self.cfg.grid {
            return Err(Error::Config(format!(
                "patch grid {:?} with C={} does not match encoder grid {:?} with C={}",
                grid.grid,
                grid.patch_dim(),
                self.cfg.grid,
                self.cfg.patch_dim()
            )));
        }
        let raw = cx.g.constant(grid.patches.select_rows(tokens));
        let proj = self.patch_proj.forward(cx, raw)?;
        let pos = cx.g.constant(self.pos_emb.select_rows(tokens));
        cx.g.add(proj, pos)
    }

    /// Runs the alternating S-Attn / D-Attn blocks over tokens at `coords`.
    pub fn st_dt_forward(&self, cx: Ctx, x: Var, coords: &[TokenCoord]) -> Result<Var> {
        let mut x = x;
        for b in &self.blocks {
            x = b.forward(cx, x, coords, self.cfg.heads)?;
        }
        Ok(x)
    }

    /// Embeds and encodes only the listed tokens.
    pub fn encode(&self, cx: Ctx, grid: &PatchGrid, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Contract("visual encoder needs at least one visible token".into()));
        }
        let all = grid_coords(self.cfg.grid);
        let coords: Vec<TokenCoord> = tokens.iter().map(|&t| all[t]).collect();
        let x = self.embed_patches(cx, grid, tokens)?;
        self.st_dt_forward(cx, x, &coords)
    }
}

#[derive(Clone, Debug)]
pub struct VisualDecoder {
    pub cfg: VisualConfig,
    pub mask_token: ParamId,
    pub pos_emb: Tensor,
    pub blocks: Vec<VisualBlock>,
    pub output_proj: Linear,
}

impl VisualDecoder {
    pub fn new<R: Rng + ?Sized>(st: &mut ModelState, rng: &mut R, prefix: &str, cfg: &VisualConfig) -> Self {
        let c = cfg.channels;
        Self {
            cfg: cfg.clone(),
            mask_token: st.add(format!("{prefix}.mask_token"), Tensor::randn(&[1, c], 0.02, rng)),
            pos_emb: sincos_pos_emb_3d(cfg.grid, c),
            blocks: alternating_blocks(st, rng, prefix, cfg.dec_blocks, c, cfg.mlp_hidden),
            output_proj: Linear::new(st, rng, &format!("{prefix}.output_proj"), c, cfg.patch_dim(), true),
        }
    }

    /// Reassembles the full grid from visible features (rows ordered as
    /// `part.visible`) plus mask tokens, decodes it and projects back to
    /// patch space. Returns `T x C` predictions in token order.
    pub fn decode(&self, cx: Ctx, visible_feats: Var, part: &MaskPartition) -> Result<Var> {
        let g = cx.g;
        let n = self.cfg.n_tokens();
        if !part.is_partition_of(n) {
            return Err(Error::Contract(
                "visible and masked token sets must be disjoint and cover the grid".into(),
            ));
        }
        if g.shape(visible_feats)[0] != part.visible.len() {
            return Err(Error::Dimension {
                op: "visual_decode",
                lhs: g.shape(visible_feats),
                rhs: vec![part.visible.len()],
            });
        }
        let full = if part.masked.is_empty() {
            visible_feats
        } else {
            let tok = g.index_rows(cx.p(self.mask_token), &vec![0; part.masked.len()])?;
            let pos = g.constant(self.pos_emb.select_rows(&part.masked));
            let masked_rows = g.add(tok, pos)?;
            let stacked = g.concat_rows(&[visible_feats, masked_rows])?;
            let mut perm = vec![0; n];
            for (row, &t) in part.visible.iter().chain(&part.masked).enumerate() {
                perm[t] = row;
            }
            g.index_rows(stacked, &perm)?
        };
        let coords = grid_coords(self.cfg.grid);
        let mut x = full;
        for b in &self.blocks {
            x = b.forward(cx, x, &coords, self.cfg.heads)?;
        }
        self.output_proj.forward(cx, x)
    }
}

/// Mean squared error over the masked tokens only; a constant zero when
/// nothing is masked.
pub fn visual_recon_loss(cx: Ctx, pred: Var, target: &PatchGrid, masked: &[usize]) -> Result<Var> {
    let g = cx.g;
    if g.shape(pred) != target.patches.shape() {
        return Err(Error::Dimension {
            op: "visual_recon_loss",
            lhs: g.shape(pred),
            rhs: target.patches.shape().to_vec(),
        });
    }
    if masked.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let p = g.index_rows(pred, masked)?;
    let t = g.constant(target.patches.select_rows(masked));
    let d = g.sub(p, t)?;
    Ok(g.mean(g.mul(d, d)?))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcheck;
    use crate::tensor::Graph;
    use crate::volume::{patchify, sample_patch_mask, Volume};

    fn small_cfg() -> VisualConfig {
        VisualConfig {
            grid: [2, 2, 2],
            patch: [2, 2, 2],
            channels: 12,
            heads: 2,
            enc_blocks: 2,
            dec_blocks: 2,
            mlp_hidden: 16,
        }
    }

    fn setup(seed: u64) -> (ModelState, VisualEncoder, VisualDecoder, PatchGrid) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut st = ModelState::new();
        let cfg = small_cfg();
        let enc = VisualEncoder::new(&mut st, &mut rng, "visual.enc", &cfg).unwrap();
        let dec = VisualDecoder::new(&mut st, &mut rng, "visual.dec", &cfg);
        let mut vals = Vec::new();
        for i in 0..64 {
            vals.push(((i * 37 % 17) as f32 - 8.0) / 8.0);
        }
        let vol = Volume::new([4, 4, 4], [1.0; 3], vals).unwrap();
        (st, enc, dec, patchify(&vol, [2, 2, 2]).unwrap())
    }

    #[test]
    fn zero_voxels_embed_to_positional_table() {
        let (st, enc, _, grid) = setup(1);
        let zero = PatchGrid {
            patches: Tensor::zeros(grid.patches.shape()),
            ..grid
        };
        let g = Graph::new();
        let all: Vec<usize> = (0..8).collect();
        let e = enc.embed_patches(Ctx::new(&g, &st), &zero, &all).unwrap();
        assert_eq!(g.value(e).shape(), &[8, 12]);
        assert_eq!(*g.value(e), enc.pos_emb);
    }

    #[test]
    fn identical_patches_differ_by_position_only() {
        let (st, enc, _, grid) = setup(2);
        let mut patches = grid.patches.clone();
        let row0 = patches.row(0).to_vec();
        patches.data_mut()[5 * 8..6 * 8].copy_from_slice(&row0);
        let same = PatchGrid { patches, ..grid };
        let g = Graph::new();
        let e = enc.embed_patches(Ctx::new(&g, &st), &same, &[0, 5]).unwrap();
        let v = g.value(e);
        for j in 0..12 {
            let want = enc.pos_emb.at(0, j) - enc.pos_emb.at(5, j);
            assert!((v.at(0, j) - v.at(1, j) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn patch_dim_mismatch_is_config_error() {
        let (st, enc, _, grid) = setup(3);
        let bad = PatchGrid {
            patch: [1, 2, 2],
            patches: Tensor::zeros(&[8, 4]),
            ..grid
        };
        let g = Graph::new();
        assert!(matches!(enc.embed_patches(Ctx::new(&g, &st), &bad, &[0]), Err(Error::Config(_))));
    }

    #[test]
    fn singleton_group_is_identity_attention() {
        // With one token the attention output is exactly W_o W_v x.
        let (st, enc, _, grid) = setup(4);
        let g = Graph::new();
        let cx = Ctx::new(&g, &st);
        let x = enc.embed_patches(cx, &grid, &[3]).unwrap();
        let coords = [grid.coords()[3]];
        let b = &enc.blocks[0];
        let out = b.forward(cx, x, &coords, 2).unwrap();
        let v = b.wv.forward(cx, x).unwrap();
        let a = b.wo.forward(cx, v).unwrap();
        let x1 = b.ln1.forward(cx, g.add(a, x).unwrap()).unwrap();
        let m = b.mlp.forward(cx, x1).unwrap();
        let want = b.ln2.forward(cx, g.add(m, x1).unwrap()).unwrap();
        assert_eq!(*g.value(out), *g.value(want));
    }

    #[test]
    fn permuting_tokens_within_a_slice_permutes_outputs() {
        let (st, enc, _, grid) = setup(5);
        let g = Graph::new();
        let cx = Ctx::new(&g, &st);
        let coords = grid.coords();
        // Tokens 0, 2, 4, 6 share depth 0.
        let order_a = [0, 2, 4, 6];
        let order_b = [4, 0, 6, 2];
        let run = |order: &[usize]| {
            let x = enc.embed_patches(cx, &grid, order).unwrap();
            let c: Vec<TokenCoord> = order.iter().map(|&t| coords[t]).collect();
            let b = &enc.blocks[0];
            g.value(b.forward(cx, x, &c, 2).unwrap()).clone()
        };
        let a = run(&order_a);
        let b = run(&order_b);
        for (pos_b, tok) in order_b.iter().enumerate() {
            let pos_a = order_a.iter().position(|t| t == tok).unwrap();
            for j in 0..12 {
                assert!((a.at(pos_a, j) - b.at(pos_b, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decode_shapes_and_overlap_error() {
        let (st, enc, dec, grid) = setup(6);
        let g = Graph::new();
        let cx = Ctx::new(&g, &st);
        let none = MaskPartition::none(8);
        let f = enc.encode(cx, &grid, &none.visible).unwrap();
        assert_eq!(g.shape(dec.decode(cx, f, &none).unwrap()), vec![8, 8]);

        let one = MaskPartition {
            visible: vec![5],
            masked: vec![0, 1, 2, 3, 4, 6, 7],
        };
        let f = enc.encode(cx, &grid, &one.visible).unwrap();
        assert_eq!(g.shape(dec.decode(cx, f, &one).unwrap()), vec![8, 8]);

        let bad = MaskPartition {
            visible: vec![0, 1, 2, 3, 4],
            masked: vec![4, 5, 6, 7],
        };
        let f = enc.encode(cx, &grid, &bad.visible).unwrap();
        assert!(matches!(dec.decode(cx, f, &bad), Err(Error::Contract(_))));
    }

    #[test]
    fn recon_loss_examples() {
        let (st, _, _, grid) = setup(7);
        let g = Graph::new();
        let cx = Ctx::new(&g, &st);
        let same = g.constant(grid.patches.clone());
        assert_eq!(g.item(visual_recon_loss(cx, same, &grid, &[1, 4]).unwrap()), 0.0);
        let mut shifted = grid.patches.clone();
        shifted.data_mut().iter_mut().for_each(|v| *v += 1.0);
        let p = g.constant(shifted);
        assert!((g.item(visual_recon_loss(cx, p, &grid, &[0, 3, 6]).unwrap()) - 1.0).abs() < 1e-15);
        assert_eq!(g.item(visual_recon_loss(cx, p, &grid, &[]).unwrap()), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pred = Tensor::randn(&[8, 8], 1.0, &mut rng);
        let masked = [1, 5, 6];
        let mut total = 0.0;
        for &t in &masked {
            for j in 0..8 {
                let d = pred.at(t, j) - grid.patches.at(t, j);
                total += d * d;
            }
        }
        let want = total / 24.0;
        let got = g.item(visual_recon_loss(cx, g.constant(pred), &grid, &masked).unwrap());
        assert!((got - want).abs() < 1e-14);
    }

    #[test]
    fn masked_voxels_do_not_reach_visible_features() {
        let (st, enc, _, grid) = setup(8);
        for seed in 0..5 {
            let part = sample_patch_mask(8, 0.5, seed).unwrap();
            let mut perturbed = grid.clone();
            for &t in &part.masked {
                for j in 0..8 {
                    perturbed.patches.data_mut()[t * 8 + j] += 3.0 + j as f64;
                }
            }
            let g = Graph::inference();
            let cx = Ctx::new(&g, &st);
            let a = enc.encode(cx, &grid, &part.visible).unwrap();
            let b = enc.encode(cx, &perturbed, &part.visible).unwrap();
            assert_eq!(*g.value(a), *g.value(b));
        }
    }

    #[test]
    fn mask_token_receives_gradient_and_full_path_checks() {
        let (mut st, enc, dec, grid) = setup(10);
        let part = sample_patch_mask(8, 0.5, 4).unwrap();
        let ids: Vec<ParamId> = st.ids().collect();
        let rep = gradcheck::check(&mut st, &ids, 1e-5, Some(6), 1, |cx| {
            let f = enc.encode(cx, &grid, &part.visible)?;
            let pred = dec.decode(cx, f, &part)?;
            visual_recon_loss(cx, pred, &grid, &part.masked)
        })
        .unwrap();
        assert!(rep.max_rel_err() <= 1e-4, "{:?}", rep.worst());
        let mt = rep.params.iter().find(|p| p.name == "visual.dec.mask_token").unwrap();
        assert!(mt.analytic_norm > 0.0);
    }

    #[test]
    fn pos_emb_is_deterministic_with_per_axis_channels() {
        let a = sincos_pos_emb_3d([2, 3, 4], 64);
        assert_eq!(a, sincos_pos_emb_3d([2, 3, 4], 64));
        // 20 channels per axis, last 4 channels unused.
        for t in 0..24 {
            assert!(a.row(t)[60..].iter().all(|&v| v == 0.0));
        }
        assert_eq!(a.at(0, 1), 1.0);
        // Token 1 is (iy=0, ix=0, iz=1): the depth block holds sin(1), cos(1).
        assert!((a.at(1, 40) - 1f64.sin()).abs() < 1e-15);
        assert!((a.at(1, 41) - 1f64.cos()).abs() < 1e-15);
    }
}
