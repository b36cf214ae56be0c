//! Tabular branch: variable embeddings, graph-transformer blocks with learned
//! edges, variable-specific mask embeddings, decoder heads and the mixed
//! reconstruction loss.
//!
//! Node 0 is always the [CLS] node; node `1 + j` carries variable `j`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Ctx, LayerNorm, Linear, Mlp};
use crate::params::{ModelState, ParamId};
use crate::schema::{TabValue, TabularRecord, TabularSchema};
use crate::tensor::{Tensor, Var};
use crate::volume::{mask_count, sample_partition, MaskPartition};

#[derive(Clone, Debug, PartialEq)]
pub struct TabularConfig {
    pub channels: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    pub mlp_hidden: usize,
    /// Decoder blocks reuse the encoder's `Z` tables instead of owning one.
    pub share_z: bool,
    /// Variable-specific mask embeddings; `false` uses one shared token.
    pub cvs: bool,
}

/// Masks `floor(d * k)` variables, keeping at least one visible.
pub fn sample_variable_mask(d_vars: usize, k: f64, seed: u64) -> Result<MaskPartition> {
    if !(0.0..=1.0).contains(&k) {
        return Err(Error::Contract(format!("mask ratio {k} outside [0, 1]")));
    }
    let m = mask_count(d_vars, k).min(d_vars.saturating_sub(1));
    Ok(sample_partition(d_vars, m, seed))
}

/// Node ids (CLS first) for the listed variables.
pub fn node_ids(vars: &[usize]) -> Vec<usize> {
    std::iter::once(0).chain(vars.iter().map(|&j| j + 1)).collect()
}

#[derive(Clone, Debug)]
pub struct VariableEmbedding {
    pub num_w: ParamId,
    pub num_b: ParamId,
    /// One table per categorical variable, indexed by schema position.
    pub cat: Vec<Option<ParamId>>,
    pub cls: ParamId,
    /// Row of `num_w` / `num_b` for each numerical variable.
    num_row: Vec<Option<usize>>,
}

impl VariableEmbedding {
    fn new<R: Rng + ?Sized>(st: &mut ModelState, rng: &mut R, prefix: &str, schema: &TabularSchema, c: usize) -> Self {
        let nums = schema.numerical();
        let mut num_row = vec![None; schema.d_vars()];
        for (r, &j) in nums.iter().enumerate() {
            num_row[j] = Some(r);
        }
        let n_num = nums.len().max(1);
        let num_w = st.add(format!("{prefix}.num_w"), Tensor::randn(&[n_num, c], 1.0, rng));
        let num_b = st.add(format!("{prefix}.num_b"), Tensor::zeros(&[n_num, c]));
        let cat = schema
            .variables
            .iter()
            .map(|v| {
                v.cardinality()
                    .map(|k| st.add(format!("{prefix}.cat.{}", v.name), Tensor::randn(&[k, c], 1.0, rng)))
            })
            .collect();
        let cls = st.add(format!("{prefix}.cls"), Tensor::randn(&[1, c], 1.0, rng));
        Self {
            num_w,
            num_b,
            cat,
            cls,
            num_row,
        }
    }

    /// Features for [CLS] followed by the listed variables, `(1 + n) x c`.
    pub fn encode_variables(&self, cx: Ctx, schema: &TabularSchema, rec: &TabularRecord, vars: &[usize]) -> Result<Var> {
        let g = cx.g;
        let mut rows = vec![cx.p(self.cls)];
        for &j in vars {
            let v = &schema.variables[j];
            let row = match (rec.values.get(j), self.num_row[j], self.cat[j]) {
                (Some(&TabValue::Num(x)), Some(r), _) => {
                    let w = g.index_rows(cx.p(self.num_w), &[r])?;
                    let b = g.index_rows(cx.p(self.num_b), &[r])?;
                    g.add(g.scale(w, x), b)?
                }
                (Some(&TabValue::Cat(i)), _, Some(table)) => {
                    let k = v.cardinality().unwrap_or(0);
                    if i >= k {
                        return Err(Error::Data(format!(
                            "variable {:?}: category index {i} >= cardinality {k}",
                            v.name
                        )));
                    }
                    g.index_rows(cx.p(table), &[i])?
                }
                _ => return Err(Error::Data(format!("variable {:?}: value does not match its kind", v.name))),
            };
            rows.push(row);
        }
        g.concat_rows(&rows)
    }
}

/// Graph-transformer block with sample-specific (`X R X^T`) and global
/// (`Z Z^T`) edges.
#[derive(Clone, Debug)]
pub struct GraphBlock {
    /// Diagonal of `R`, stored as `1 x c`.
    pub r: ParamId,
    /// One row per node, [CLS] first.
    pub z: ParamId,
    pub wv: Linear,
    pub wo: Linear,
    pub ln1: LayerNorm,
    pub mlp: Mlp,
    pub ln2: LayerNorm,
}

impl GraphBlock {
    fn new<R: Rng + ?Sized>(st: &mut ModelState, rng: &mut R, name: &str, n_nodes: usize, c: usize, hidden: usize, z: Option<ParamId>) -> Self {
        let r = st.add(format!("{name}.r"), Tensor::full(&[1, c], 1.0 / c as f64));
        let z = z.unwrap_or_else(|| st.add(format!("{name}.z"), Tensor::randn(&[n_nodes, c], 1.0 / (c as f64).sqrt(), rng)));
        Self {
            r,
            z,
            wv: Linear::new(st, rng, &format!("{name}.wv"), c, c, false),
            wo: Linear::new(st, rng, &format!("{name}.wo"), c, c, false),
            ln1: LayerNorm::new(st, &format!("{name}.ln1"), c),
            mlp: Mlp::new(st, rng, &format!("{name}.mlp"), c, hidden, c),
            ln2: LayerNorm::new(st, &format!("{name}.ln2"), c),
        }
    }

    /// `softmax_rows(X R X^T + Z_s Z_s^T)` where `Z_s` keeps the rows of the
    /// surviving `nodes` (the rows of `x`, in order).
    pub fn build_graph(&self, cx: Ctx, x: Var, nodes: &[usize]) -> Result<Var> {
        let g = cx.g;
        let xt = g.transpose(x)?;
        let gs = g.matmul(g.mul_row(x, cx.p(self.r))?, xt)?;
        let zs = g.index_rows(cx.p(self.z), nodes)?;
        let gz = g.matmul(zs, g.transpose(zs)?)?;
        Ok(g.softmax_rows(g.add(gs, gz)?))
    }

    pub fn forward(&self, cx: Ctx, x: Var, nodes: &[usize]) -> Result<Var> {
        let g = cx.g;
        let graph = self.build_graph(cx, x, nodes)?;
        let v = self.wv.forward(cx, x)?;
        let a = self.wo.forward(cx, g.matmul(graph, v)?)?;
        let x1 = self.ln1.forward(cx, g.add(a, x)?)?;
        let m = self.mlp.forward(cx, x1)?;
        self.ln2.forward(cx, g.add(m, x1)?)
    }
}

#[derive(Clone, Debug)]
pub enum MaskSource {
    /// `concat(Z_1..Z_n)[variable rows] . W_z`.
    Cvs { w_z: ParamId },
    Shared { token: ParamId },
}

#[derive(Clone, Debug)]
pub struct TabularEncoder {
    pub cfg: TabularConfig,
    pub schema: TabularSchema,
    pub embed: VariableEmbedding,
    pub blocks: Vec<GraphBlock>,
    pub mask: MaskSource,
}

impl TabularEncoder {
    pub fn new<R: Rng + ?Sized>(st: &mut ModelState, rng: &mut R, prefix: &str, schema: &TabularSchema, cfg: &TabularConfig) -> Result<Self> {
        if cfg.enc_blocks == 0 {
            return Err(Error::Config("tabular.blocks must be at least 1".into()));
        }
        let c = cfg.channels;
        let n_nodes = schema.d_vars() + 1;
        let embed = VariableEmbedding::new(st, rng, &format!("{prefix}.embed"), schema, c);
        let blocks: Vec<GraphBlock> = (0..cfg.enc_blocks)
            .map(|i| GraphBlock::new(st, rng, &format!("{prefix}.block{i}"), n_nodes, c, cfg.mlp_hidden, None))
            .collect();
        let mask = if cfg.cvs {
            let n = blocks.len();
            MaskSource::Cvs {
                w_z: st.add(format!("{prefix}.w_z"), Tensor::randn(&[n * c, c], 1.0 / ((n * c) as f64).sqrt(), rng)),
            }
        } else {
            MaskSource::Shared {
                token: st.add(format!("{prefix}.mask_token"), Tensor::randn(&[1, c], 0.02, rng)),
            }
        };
        Ok(Self {
            cfg: cfg.clone(),
            schema: schema.clone(),
            embed,
            blocks,
            mask,
        })
    }

    /// Encodes [CLS] plus the listed visible variables. Values of variables
    /// outside `visible` are never read.
    pub fn encode(&self, cx: Ctx, rec: &TabularRecord, visible: &[usize]) -> Result<Var> {
        let nodes = node_ids(visible);
        let mut x = self.embed.encode_variables(cx, &self.schema, rec, visible)?;
        for b in &self.blocks {
            x = b.forward(cx, x, &nodes)?;
        }
        Ok(x)
    }

    /// Mask-embedding table, one row per variable (`d_vars x c`).
    pub fn mask_table(&self, cx: Ctx) -> Result<Var> {
        let d = self.schema.d_vars();
        match &self.mask {
            MaskSource::Cvs { w_z } => {
                let zs: Vec<Var> = self.blocks.iter().map(|b| cx.p(b.z)).collect();
                cvs_mask_embeddings(cx, &zs, cx.p(*w_z))
            }
            MaskSource::Shared { token } => cx.g.index_rows(cx.p(*token), &vec![0; d]),
        }
    }
}

/// `concat_cols(Z_1..Z_n) W_z`, dropping the [CLS] row of each `Z`.
pub fn cvs_mask_embeddings(cx: Ctx, zs: &[Var], w_z: Var) -> Result<Var> {
    let g = cx.g;
    let n_nodes = g.shape(zs[0])[0];
    let var_rows: Vec<usize> = (1..n_nodes).collect();
    let parts: Vec<Var> = zs.iter().map(|&z| g.index_rows(z, &var_rows)).collect::<Result<_>>()?;
    g.matmul(g.concat_cols(&parts)?, w_z)
}

#[derive(Clone, Debug)]
pub struct TabularDecoder {
    pub blocks: Vec<GraphBlock>,
    /// One head per variable: width 1 for numerical and binary variables,
    /// one logit per level otherwise.
    pub heads: Vec<Linear>,
}

impl TabularDecoder {
    pub fn new<R: Rng + ?Sized>(st: &mut ModelState, rng: &mut R, prefix: &str, enc: &TabularEncoder) -> Self {
        let cfg = &enc.cfg;
        let c = cfg.channels;
        let n_nodes = enc.schema.d_vars() + 1;
        let blocks = (0..cfg.dec_blocks)
            .map(|i| {
                let z = cfg.share_z.then(|| enc.blocks[i % enc.blocks.len()].z);
                GraphBlock::new(st, rng, &format!("{prefix}.block{i}"), n_nodes, c, cfg.mlp_hidden, z)
            })
            .collect();
        let heads = enc
            .schema
            .variables
            .iter()
            .map(|v| Linear::new(st, rng, &format!("{prefix}.head.{}", v.name), c, v.head_width(), true))
            .collect();
        Self { blocks, heads }
    }

    /// Seeds masked nodes from `mask_table`, runs the full graph and returns
    /// one prediction row per variable in schema order.
    ///
    /// `visible_feats` holds [CLS] followed by `part.visible` in order.
    pub fn decode(&self, cx: Ctx, visible_feats: Var, part: &MaskPartition, mask_table: Var) -> Result<Vec<Var>> {
        let g = cx.g;
        let d = self.heads.len();
        if !part.is_partition_of(d) {
            return Err(Error::Contract(
                "visible and masked variable sets must be disjoint and cover the schema".into(),
            ));
        }
        if g.shape(visible_feats)[0] != part.visible.len() + 1 {
            return Err(Error::Dimension {
                op: "tabular_decode",
                lhs: g.shape(visible_feats),
                rhs: vec![part.visible.len() + 1],
            });
        }
        let full = if part.masked.is_empty() {
            visible_feats
        } else {
            let seeded = g.index_rows(mask_table, &part.masked)?;
            let stacked = g.concat_rows(&[visible_feats, seeded])?;
            let mut perm = vec![0; d + 1];
            for (row, &j) in part.visible.iter().chain(&part.masked).enumerate() {
                perm[j + 1] = row + 1;
            }
            g.index_rows(stacked, &perm)?
        };
        let nodes: Vec<usize> = (0..=d).collect();
        let mut x = full;
        for b in &self.blocks {
            x = b.forward(cx, x, &nodes)?;
        }
        self.heads
            .iter()
            .enumerate()
            .map(|(j, h)| h.forward(cx, g.index_rows(x, &[j + 1])?))
            .collect()
    }
}

/// Mean over masked variables of squared error (numerical), BCE on a single
/// logit (binary) or cross-entropy (multiclass). Zero for an empty mask.
pub fn tabular_recon_loss(cx: Ctx, schema: &TabularSchema, preds: &[Var], target: &TabularRecord, masked: &[usize]) -> Result<Var> {
    let g = cx.g;
    if masked.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let mut terms = Vec::with_capacity(masked.len());
    for &j in masked {
        let v = &schema.variables[j];
        let p = preds[j];
        let term = match (v.cardinality(), target.values[j]) {
            (None, TabValue::Num(y)) => {
                let diff = g.sub(p, g.constant(Tensor::matrix(1, 1, vec![y])))?;
                g.mul(diff, diff)?
            }
            (Some(2), TabValue::Cat(y)) => g.sub(g.softplus(p), g.scale(p, y as f64))?,
            (Some(_), TabValue::Cat(y)) => g.scale(g.pick(g.log_softmax_rows(p), &[y])?, -1.0),
            _ => return Err(Error::Data(format!("variable {:?}: value does not match its kind", v.name))),
        };
        terms.push(term);
    }
    Ok(g.mean(g.concat_rows(&terms)?))
}
