//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `cargo test --test acceptance` runs all nine; `-- 3 7` runs a subset.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::rc::Rc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cmsurv::cmc::{CmcStack, Direction};
use cmsurv::config::{Modality, PretrainMode, RunConfig};
use cmsurv::gradcheck;
use cmsurv::harness::{self, assign_folds, Dataset};
use cmsurv::model::{Masks, Model, Subject};
use cmsurv::nn::{Ctx, Linear};
use cmsurv::params::{ModelState, ParamId};
use cmsurv::schema::{TabValue, TabularRecord, TabularSchema};
use cmsurv::stats::{chi_square_sf_1dof, concordance_index, kaplan_meier, log_rank_test};
use cmsurv::survival::{cox_loss, Outcome, RiskBatch, RiskHead};
use cmsurv::tabular::{sample_variable_mask, TabularConfig, TabularEncoder};
use cmsurv::tensor::{AttnGroup, Graph, Tensor, Var};
use cmsurv::train::{pretrain, variable_recon_error};
use cmsurv::visual::{VisualConfig, VisualEncoder};
use cmsurv::volume::{grid_coords, patchify, sample_patch_mask, TokenCoord, Volume};

type Outcome_ = std::result::Result<String, String>;
type Criterion = (u32, &'static str, fn() -> Outcome_);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn main() {
    let criteria: Vec<Criterion> = vec![
        (1, "gradient integrity", c1_gradients),
        (2, "formula oracles", c2_formula_oracles),
        (3, "statistics oracles", c3_statistics),
        (4, "masked independence", c4_masked_independence),
        (5, "cox loss", c5_cox),
        (6, "end-to-end learnability", c6_learnability),
        (7, "completion benefit", c7_completion_benefit),
        (8, "ablation structure", c8_ablations),
        (9, "determinism", c9_determinism),
    ];
    let picked: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !picked.is_empty() && !picked.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match r {
            Ok(detail) => println!("PASS criterion {n} ({name}): {detail} [{secs:.1}s]"),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {n} ({name}): {why} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- helpers

type M = Vec<Vec<f64>>;

fn mat(t: &Tensor) -> M {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn mm(a: &M, b: &M) -> M {
    a.iter()
        .map(|r| (0..b[0].len()).map(|j| r.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
        .collect()
}

fn add(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

fn ln(a: &M, gain: &[f64], bias: &[f64]) -> M {
    a.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mu = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
            let s = (var + 1e-5).sqrt();
            r.iter().enumerate().map(|(k, x)| (x - mu) / s * gain[k] + bias[k]).collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (0.7978845608 * (x + 0.044715 * x * x * x)).tanh())
}

fn softmax(s: &[f64]) -> Vec<f64> {
    let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|x| if x.is_finite() { (x - mx).exp() } else { 0.0 }).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// Dense multi-head attention; `allowed(i, j)` masks query i from key j.
fn dense_attn(q: &M, k: &M, v: &M, heads: usize, allowed: impl Fn(usize, usize) -> bool) -> M {
    let c = q[0].len();
    let dh = c / heads;
    let mut out = vec![vec![0.0; c]; q.len()];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for (i, qi) in q.iter().enumerate() {
            let s: Vec<f64> = k
                .iter()
                .enumerate()
                .map(|(j, kj)| {
                    if allowed(i, j) {
                        cols.clone().map(|t| qi[t] * kj[t]).sum::<f64>() / (dh as f64).sqrt()
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect();
            let p = softmax(&s);
            for (j, vj) in v.iter().enumerate() {
                for t in cols.clone() {
                    out[i][t] += p[j] * vj[t];
                }
            }
        }
    }
    out
}

fn weights(st: &ModelState, l: &Linear) -> M {
    mat(st.value(l.w))
}

fn row(st: &ModelState, id: ParamId) -> Vec<f64> {
    st.value(id).data().to_vec()
}

fn mlp(st: &ModelState, m: &cmsurv::nn::Mlp, x: &M) -> M {
    let b1 = row(st, m.fc1.b.unwrap());
    let b2 = row(st, m.fc2.b.unwrap());
    let h: M = mm(x, &weights(st, &m.fc1))
        .into_iter()
        .map(|r| r.iter().zip(&b1).map(|(a, b)| gelu(a + b)).collect())
        .collect();
    mm(&h, &weights(st, &m.fc2))
        .into_iter()
        .map(|r| r.iter().zip(&b2).map(|(a, b)| a + b).collect())
        .collect()
}

fn max_abs_diff(a: &M, b: &Tensor) -> f64 {
    let mut m: f64 = 0.0;
    for (i, r) in a.iter().enumerate() {
        for (j, v) in r.iter().enumerate() {
            m = m.max((v - b.at(i, j)).abs());
        }
    }
    m
}

/// Adds noise to every parameter so zero biases and unit gains do not hide
/// mistakes.
fn jitter(st: &mut ModelState, rng: &mut ChaCha8Rng, scale: f64) {
    let ids: Vec<ParamId> = st.ids().collect();
    for id in ids {
        for v in st.value_mut(id).data_mut() {
            *v += scale * (rng.random::<f64>() * 2.0 - 1.0);
        }
    }
}

fn tiny_cfg() -> RunConfig {
    let mut c = RunConfig::profile("test").unwrap();
    for (k, v) in [
        ("visual.extents", "4,4,4"),
        ("visual.patch", "2,2,2"),
        ("visual.channels", "8"),
        ("tabular.channels", "8"),
        ("visual.mlp_hidden", "8"),
        ("tabular.mlp_hidden", "8"),
        ("cmc.mlp_hidden", "8"),
        ("cmc.layers", "1"),
        ("visual.dec_blocks", "1"),
        ("tabular.blocks", "1"),
        ("head.hidden", "6"),
    ] {
        c.set(k, v).unwrap();
    }
    c
}

fn random_subject(seed: u64, schema: &TabularSchema) -> Subject {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vol = Volume::from_fn([4, 4, 4], [1.0; 3], |_, _, _| rng.random::<f32>() - 0.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABC);
    let values = schema
        .variables
        .iter()
        .map(|v| match v.cardinality() {
            None => TabValue::Num(rng.random::<f64>() * 2.0 - 1.0),
            Some(k) => TabValue::Cat(rng.random_range(0..k)),
        })
        .collect();
    Subject {
        id: format!("r{seed}"),
        grid: patchify(&vol, [2, 2, 2]).unwrap(),
        record: TabularRecord { values },
        pfs: Outcome {
            time: 1.0 + seed as f64,
            event: !seed.is_multiple_of(3),
        },
        os: Outcome {
            time: 2.0 + (seed * 7 % 5) as f64,
            event: seed.is_multiple_of(2),
        },
    }
}

// ---------------------------------------------------------------- 1

fn op_checks() -> std::result::Result<(usize, f64), String> {
    type OpFn = Box<dyn Fn(&Graph, &[Var]) -> cmsurv::Result<Var>>;
    let cases: Vec<(&str, Vec<[usize; 2]>, OpFn)> = vec![
        ("matmul", vec![[3, 4], [4, 2]], Box::new(|g, v| g.matmul(v[0], v[1]))),
        ("transpose", vec![[3, 4]], Box::new(|g, v| g.transpose(v[0]))),
        ("add", vec![[3, 4], [3, 4]], Box::new(|g, v| g.add(v[0], v[1]))),
        ("sub", vec![[3, 4], [3, 4]], Box::new(|g, v| g.sub(v[0], v[1]))),
        ("mul", vec![[3, 4], [3, 4]], Box::new(|g, v| g.mul(v[0], v[1]))),
        ("add_row", vec![[3, 4], [1, 4]], Box::new(|g, v| g.add_row(v[0], v[1]))),
        ("mul_row", vec![[3, 4], [1, 4]], Box::new(|g, v| g.mul_row(v[0], v[1]))),
        ("scale", vec![[3, 4]], Box::new(|g, v| Ok(g.scale(v[0], -1.7)))),
        ("gelu", vec![[3, 4]], Box::new(|g, v| Ok(g.gelu(v[0])))),
        ("softplus", vec![[3, 4]], Box::new(|g, v| Ok(g.softplus(v[0])))),
        ("softmax_rows", vec![[3, 4]], Box::new(|g, v| Ok(g.softmax_rows(v[0])))),
        ("log_softmax_rows", vec![[3, 4]], Box::new(|g, v| Ok(g.log_softmax_rows(v[0])))),
        ("layer_norm", vec![[3, 5], [1, 5], [1, 5]], Box::new(|g, v| g.layer_norm(v[0], v[1], v[2]))),
        ("sum", vec![[3, 4]], Box::new(|g, v| Ok(g.sum(g.gelu(v[0]))))),
        ("mean", vec![[3, 4]], Box::new(|g, v| Ok(g.mean(g.gelu(v[0]))))),
        ("mean_rows", vec![[3, 4]], Box::new(|g, v| Ok(g.mean_rows(v[0])))),
        ("index_rows", vec![[4, 3]], Box::new(|g, v| g.index_rows(v[0], &[2, 0, 2]))),
        ("concat_rows", vec![[2, 3], [3, 3]], Box::new(|g, v| g.concat_rows(&[v[0], v[1]]))),
        ("concat_cols", vec![[3, 2], [3, 3]], Box::new(|g, v| g.concat_cols(&[v[0], v[1]]))),
        ("pick", vec![[3, 4]], Box::new(|g, v| g.pick(v[0], &[0, 5, 11, 5]))),
        (
            "attention",
            vec![[5, 4], [5, 4], [5, 4]],
            Box::new(|g, v| {
                let groups = Rc::new(vec![AttnGroup::symmetric(vec![0, 2, 4]), AttnGroup::symmetric(vec![1, 3])]);
                g.attention(v[0], v[1], v[2], groups, 2)
            }),
        ),
        (
            "cross_attention",
            vec![[3, 4], [6, 4], [6, 4]],
            Box::new(|g, v| g.attention(v[0], v[1], v[2], Rc::new(vec![AttnGroup::full(3, 6)]), 2)),
        ),
        (
            "cox_nll",
            vec![[6, 1]],
            Box::new(|g, v| g.cox_nll(v[0], &[1.0, 2.0, 2.0, 3.0, 5.0, 4.0], &[true, true, false, true, false, true])),
        ),
    ];
    let mut worst: f64 = 0.0;
    for (k, (name, shapes, f)) in cases.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        let mut st = ModelState::new();
        let ids: Vec<ParamId> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| st.add(format!("x{i}"), Tensor::randn(s, 1.0, &mut rng)))
            .collect();
        let report = gradcheck::check(&mut st, &ids, 1e-5, None, k as u64, |cx| {
            let vars: Vec<Var> = ids.iter().map(|&id| cx.p(id)).collect();
            let y = f(cx.g, &vars)?;
            let shape = cx.g.shape(y);
            if shape.iter().product::<usize>() == 1 {
                return Ok(cx.g.scale(y, 1.3));
            }
            // Random projection so every output entry carries a distinct weight.
            let w = cx.g.constant(Tensor::randn(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(99)));
            Ok(cx.g.sum(cx.g.mul(y, w)?))
        })
        .map_err(|e| format!("{name}: {e}"))?;
        let e = report.max_rel_err();
        ensure(e <= 1e-4, || format!("{name}: relative error {e:.2e} ({:?})", report.worst()))?;
        worst = worst.max(e);
    }
    Ok((cases.len(), worst))
}

fn c1_gradients() -> Outcome_ {
    let t = Instant::now();
    let (n_ops, op_err) = op_checks()?;
    let schema = TabularSchema::default_schema();
    let mut composites = Vec::new();
    for (k, path) in ["visual reconstruction", "tabular reconstruction", "completion + Cox"].iter().enumerate() {
        let cfg = tiny_cfg();
        let (mut st, model) = Model::build(&cfg, &schema).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(40 + k as u64);
        jitter(&mut st, &mut rng, 0.1);
        let subjects: Vec<Subject> = (0..4).map(|i| random_subject(10 * k as u64 + i, &schema)).collect();
        let masks = Masks {
            visual: sample_patch_mask(8, 0.5, rng.random()).unwrap(),
            tabular: sample_variable_mask(22, 0.5, rng.random()).unwrap(),
        };
        let head = RiskHead::new(&mut st, &mut rng, "head.os", model.feature_dim(), 6);
        let ids: Vec<ParamId> = st.ids().collect();
        let report = gradcheck::check(&mut st, &ids, 1e-5, Some(3), k as u64, |cx| match k {
            0 => model.visual_direction(cx, &subjects[0], &masks.visual),
            1 => model.tabular_direction(cx, &subjects[0], &masks.tabular),
            _ => {
                let rows = subjects.iter().map(|s| model.features(cx, s)).collect::<cmsurv::Result<Vec<_>>>()?;
                let h = head.score(cx, cx.g.concat_rows(&rows)?)?;
                let times: Vec<f64> = subjects.iter().map(|s| s.os.time).collect();
                let events: Vec<bool> = subjects.iter().map(|s| s.os.event).collect();
                cx.g.cox_nll(h, &times, &events)
            }
        })
        .map_err(|e| format!("{path}: {e}"))?;
        let e = report.max_rel_err();
        let probed = report.params.iter().filter(|p| p.analytic_norm > 0.0).count();
        ensure(e <= 1e-4, || format!("{path}: relative error {e:.2e} ({:?})", report.worst()))?;
        ensure(probed > 20, || format!("{path}: only {probed} parameters reached"))?;
        composites.push(format!("{path} {e:.1e} over {probed} params"));
    }
    let secs = t.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!("{n_ops} ops max rel err {op_err:.1e}; {}", composites.join("; ")))
}

// ---------------------------------------------------------------- 2

fn c2_formula_oracles() -> Outcome_ {
    let schema = TabularSchema::default_schema();
    let (mut e_graph, mut e_cmc, mut e_vis): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for inst in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + inst);
        let c = 4 + 2 * (inst as usize % 3);

        // Graph construction: softmax(X R X^T + Z_s Z_s^T) row by row.
        let mut st = ModelState::new();
        let tcfg = TabularConfig {
            channels: c,
            enc_blocks: 1,
            dec_blocks: 1,
            mlp_hidden: 6,
            share_z: false,
            cvs: true,
        };
        let enc = TabularEncoder::new(&mut st, &mut rng, "t", &schema, &tcfg).unwrap();
        jitter(&mut st, &mut rng, 0.5);
        let mut nodes: Vec<usize> = vec![0];
        nodes.extend((1..=22).filter(|_| rng.random::<f64>() < 0.6));
        let x = Tensor::randn(&[nodes.len(), c], 1.0, &mut rng);
        let g = Graph::new();
        let got = enc.blocks[0].build_graph(Ctx::new(&g, &st), g.constant(x.clone()), &nodes).unwrap();
        let r = row(&st, enc.blocks[0].r);
        let z = mat(st.value(enc.blocks[0].z));
        let xm = mat(&x);
        let want: M = (0..nodes.len())
            .map(|i| {
                let s: Vec<f64> = (0..nodes.len())
                    .map(|j| {
                        (0..c).map(|k| xm[i][k] * r[k] * xm[j][k]).sum::<f64>()
                            + (0..c).map(|k| z[nodes[i]][k] * z[nodes[j]][k]).sum::<f64>()
                    })
                    .collect();
                softmax(&s)
            })
            .collect();
        e_graph = e_graph.max(max_abs_diff(&want, &g.value(got)));

        // Completion layer, evaluated step by step.
        let mut st = ModelState::new();
        let heads = if c.is_multiple_of(4) { 2 } else { 1 };
        let stack = CmcStack::new(&mut st, &mut rng, "cmc", Direction::VisualFromTabular, c, c, 1, heads, 7).unwrap();
        jitter(&mut st, &mut rng, 0.3);
        let l = &stack.layers[0];
        let own = Tensor::randn(&[2 + inst as usize % 5, c], 1.0, &mut rng);
        let other = Tensor::randn(&[1 + inst as usize % 7, c], 1.0, &mut rng);
        let g = Graph::new();
        let got = l
            .forward(Ctx::new(&g, &st), g.constant(own.clone()), Some(g.constant(other.clone())), heads)
            .unwrap();
        let (o, t) = (mat(&own), mat(&other));
        let w = |lin: &Linear| weights(&st, lin);
        let sa = dense_attn(&mm(&o, &w(&l.ws_q)), &mm(&o, &w(&l.ws_k)), &mm(&o, &w(&l.ws_v)), heads, |_, _| true);
        let a = ln(&add(&sa, &o), &row(&st, l.ln1.gain), &row(&st, l.ln1.bias));
        let ca = dense_attn(&mm(&a, &w(&l.wc_q)), &mm(&t, &w(&l.wc_k)), &mm(&t, &w(&l.wc_v)), heads, |_, _| true);
        let b = ln(&add(&ca, &a), &row(&st, l.ln2.gain), &row(&st, l.ln2.bias));
        let want = add(&mlp(&st, &l.mlp, &b), &b);
        e_cmc = e_cmc.max(max_abs_diff(&want, &g.value(got)));

        // Factorized slice/depth attention against dense masked attention.
        let mut st = ModelState::new();
        let grid = [1 + inst as usize % 2, 2, 2 + inst as usize % 3];
        let vcfg = VisualConfig {
            grid,
            patch: [1, 1, 1],
            channels: 8,
            heads: 2,
            enc_blocks: 2,
            dec_blocks: 1,
            mlp_hidden: 10,
        };
        let venc = VisualEncoder::new(&mut st, &mut rng, "v", &vcfg).unwrap();
        jitter(&mut st, &mut rng, 0.3);
        let all = grid_coords(grid);
        let mut tokens: Vec<usize> = (0..all.len()).filter(|_| rng.random::<f64>() < 0.7).collect();
        if tokens.is_empty() {
            tokens.push(0);
        }
        let coords: Vec<TokenCoord> = tokens.iter().map(|&t| all[t]).collect();
        let x = Tensor::randn(&[tokens.len(), 8], 1.0, &mut rng);
        let g = Graph::new();
        let got = venc.st_dt_forward(Ctx::new(&g, &st), g.constant(x.clone()), &coords).unwrap();
        let mut h = mat(&x);
        for (bi, blk) in venc.blocks.iter().enumerate() {
            let same = |i: usize, j: usize| {
                if bi % 2 == 0 {
                    coords[i].depth == coords[j].depth
                } else {
                    coords[i].slice == coords[j].slice
                }
            };
            let w = |lin: &Linear| weights(&st, lin);
            let att = dense_attn(&mm(&h, &w(&blk.wq)), &mm(&h, &w(&blk.wk)), &mm(&h, &w(&blk.wv)), 2, same);
            let x1 = ln(&add(&mm(&att, &w(&blk.wo)), &h), &row(&st, blk.ln1.gain), &row(&st, blk.ln1.bias));
            h = ln(&add(&mlp(&st, &blk.mlp, &x1), &x1), &row(&st, blk.ln2.gain), &row(&st, blk.ln2.bias));
        }
        e_vis = e_vis.max(max_abs_diff(&h, &g.value(got)));
    }
    ensure(e_graph <= 1e-12, || format!("graph construction off by {e_graph:.2e}"))?;
    ensure(e_cmc <= 1e-12, || format!("completion layer off by {e_cmc:.2e}"))?;
    ensure(e_vis <= 1e-10, || format!("factorized attention off by {e_vis:.2e}"))?;
    Ok(format!(
        "50 instances each; max abs err graph {e_graph:.1e}, completion {e_cmc:.1e}, slice/depth {e_vis:.1e}"
    ))
}

// ---------------------------------------------------------------- 3

fn c3_statistics() -> Outcome_ {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut cohorts = 0;
    while cohorts < 100 {
        let n = rng.random_range(2..=300);
        let censor = rng.random::<f64>() * 0.8;
        let coarse = cohorts % 2 == 0;
        let scores: Vec<f64> = (0..n)
            .map(|_| if coarse { rng.random_range(0..6) as f64 } else { rng.random::<f64>() })
            .collect();
        let outs: Vec<Outcome> = (0..n)
            .map(|_| Outcome {
                time: if coarse { rng.random_range(1..25) as f64 } else { rng.random::<f64>() * 30.0 },
                event: rng.random::<f64>() >= censor,
            })
            .collect();
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if outs[i].event && outs[i].time < outs[j].time {
                    den += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        if den == 0.0 {
            continue;
        }
        let ci = concordance_index(&RiskBatch::new(scores, outs).unwrap()).map_err(|e| e.to_string())?;
        worst = worst.max((ci - num / den).abs());
        cohorts += 1;
    }
    ensure(worst <= 1e-12, || format!("CI differs from pair enumeration by {worst:.2e}"))?;

    let o = |time, event| Outcome { time, event };
    let km = kaplan_meier(&[o(1.0, true), o(2.0, false), o(3.0, true), o(4.0, false)]);
    ensure((km.at(1.0) - 0.75).abs() < 1e-15 && (km.at(3.0) - 0.375).abs() < 1e-15, || {
        format!("KM gave S(1)={} S(3)={}", km.at(1.0), km.at(3.0))
    })?;

    let grp = [o(1.0, true), o(2.0, true), o(3.0, false), o(5.0, true)];
    let lr = log_rank_test(&grp, &grp).map_err(|e| e.to_string())?;
    ensure(lr.chi_square == 0.0 && lr.p == 1.0, || format!("identical groups gave {lr:?}"))?;
    let p = chi_square_sf_1dof(3.841);
    ensure((p - 0.05).abs() <= 1e-3, || format!("chi2 3.841 -> p {p}"))?;
    Ok(format!(
        "100 cohorts max CI err {worst:.1e}; KM S(1)=0.75 S(3)=0.375; log-rank identical chi2=0 p=1; p(3.841)={p:.5}"
    ))
}

// ---------------------------------------------------------------- 4

fn c4_masked_independence() -> Outcome_ {
    let schema = TabularSchema::default_schema();
    let mut cfg = RunConfig::profile("test").unwrap();
    cfg.set("visual.extents", "8,8,4").unwrap();
    cfg.set("visual.patch", "2,2,2").unwrap();
    let (st, model) = Model::build(&cfg, &schema).map_err(|e| e.to_string())?;
    let [p1, p2, p3] = cfg.visual_patch;
    let grid = cfg.visual().grid;
    let n_tokens = model.n_tokens();
    let mut perturbed_voxels = 0;
    for trial in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + trial);
        let base: Vec<f32> = (0..8 * 8 * 4).map(|_| rng.random::<f32>()).collect();
        let part = sample_patch_mask(n_tokens, 0.5, trial).unwrap();
        let vol = Volume::new([8, 8, 4], [1.0; 3], base.clone()).unwrap();
        let token_of = |y: usize, x: usize, z: usize| ((y / p1) * grid[1] + x / p2) * grid[2] + z / p3;
        let alt = Volume::from_fn([8, 8, 4], [1.0; 3], |y, x, z| {
            let v = vol.get(y, x, z);
            if part.masked.contains(&token_of(y, x, z)) {
                v + 5.0 + (y * x + z) as f32
            } else {
                v
            }
        })
        .unwrap();
        perturbed_voxels += alt.voxels().iter().zip(vol.voxels()).filter(|(a, b)| a != b).count();
        let (ga, gb) = (patchify(&vol, [p1, p2, p3]).unwrap(), patchify(&alt, [p1, p2, p3]).unwrap());
        ensure(ga.patches != gb.patches, || "perturbation did not change any patch".into())?;
        let run = |grid| {
            let g = Graph::inference();
            let v = model.visual.encode(Ctx::new(&g, &st), grid, &part.visible).unwrap();
            let out = g.value(v).data().to_vec();
            out
        };
        ensure(run(&ga) == run(&gb), || format!("visual trial {trial}: visible outputs changed"))?;
    }
    let sub = random_subject(1, &schema);
    for trial in 0..20u64 {
        let part = sample_variable_mask(22, 0.5, trial).unwrap();
        let mut alt = sub.record.clone();
        for &j in &part.masked {
            alt.values[j] = match alt.values[j] {
                TabValue::Num(x) => TabValue::Num(x + 3.0 + j as f64),
                TabValue::Cat(c) => TabValue::Cat((c + 1) % schema.variables[j].cardinality().unwrap()),
            };
        }
        let run = |rec: &TabularRecord| {
            let g = Graph::inference();
            let v = model.tabular.encode(Ctx::new(&g, &st), rec, &part.visible).unwrap();
            let out = g.value(v).data().to_vec();
            out
        };
        ensure(run(&sub.record) == run(&alt), || format!("tabular trial {trial}: visible outputs changed"))?;
    }
    Ok(format!(
        "20 patch masks ({perturbed_voxels} voxels perturbed) and 20 variable masks: visible outputs bitwise equal"
    ))
}

// ---------------------------------------------------------------- 5

fn c5_cox() -> Outcome_ {
    let o = |time, event| Outcome { time, event };
    let two = cox_loss(&RiskBatch::new(vec![0.0, 0.0], vec![o(1.0, true), o(2.0, true)]).unwrap()).unwrap();
    let want = std::f64::consts::LN_2 / 2.0;
    ensure((two - want).abs() <= 1e-12, || format!("two-subject loss {two} vs {want}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(2..40);
        let h: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let mut outs: Vec<Outcome> = (0..n)
            .map(|_| o(rng.random_range(1..10) as f64, rng.random::<f64>() < 0.6))
            .collect();
        outs[0].event = true;
        let shift = rng.random::<f64>() * 200.0 - 100.0;
        let a = cox_loss(&RiskBatch::new(h.clone(), outs.clone()).unwrap()).unwrap();
        let b = cox_loss(&RiskBatch::new(h.iter().map(|x| x + shift).collect(), outs).unwrap()).unwrap();
        worst = worst.max((a - b).abs());
    }
    ensure(worst <= 1e-10, || format!("shift changed loss by {worst:.2e}"))?;
    Ok(format!("two-subject loss err {:.1e}; 50 shifts max change {worst:.1e}", (two - want).abs()))
}

// ---------------------------------------------------------------- 6

fn cohort(cfg: &RunConfig, dir: &Path) -> Dataset {
    let files = harness::generate(cfg, dir).unwrap();
    Dataset::load(&files.manifest, cfg).unwrap()
}

fn holdout(data: &Dataset, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let test = assign_folds(data.len(), 5, seed).unwrap().swap_remove(0);
    let train = (0..data.len()).filter(|i| test.binary_search(i).is_err()).collect();
    (train, test)
}

fn c6_learnability() -> Outcome_ {
    let t = Instant::now();
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for seed in [11u64, 12, 13] {
        let mut cfg = RunConfig::profile("test").unwrap();
        cfg.seed = seed;
        cfg.synth.n_subjects = 400;
        cfg.synth.censoring = 0.3;
        let dir = tempfile::tempdir().unwrap();
        let data = cohort(&cfg, dir.path());
        let (train, test) = holdout(&data, seed);
        let risk = harness::train_and_score(&cfg, &data, &train, &test).map_err(|e| e.to_string())?;
        let outs = data.outcomes(&test, cfg.endpoint);
        let ci = concordance_index(&RiskBatch::new(risk, outs.clone()).unwrap()).unwrap();
        let truth: Vec<f64> = test.iter().map(|&i| data.truth.as_ref().unwrap()[i]).collect();
        let oracle = concordance_index(&RiskBatch::new(truth, outs).unwrap()).unwrap();
        lines.push(format!("seed {seed}: CI {ci:.3} oracle {oracle:.3}"));
        if !(ci >= 0.65 && ci >= 0.85 * oracle) {
            failures.push(format!("seed {seed} CI {ci:.3} vs oracle {oracle:.3}"));
        }
    }
    let secs = t.elapsed().as_secs_f64();
    ensure(failures.is_empty(), || format!("{} ({})", failures.join(", "), lines.join("; ")))?;
    ensure(secs <= 900.0, || format!("took {secs:.0}s"))?;
    Ok(lines.join("; "))
}

// ---------------------------------------------------------------- 7

fn c7_completion_benefit() -> Outcome_ {
    let (mut with, mut without) = (0.0, 0.0);
    let mut lines = Vec::new();
    for seed in [21u64, 22, 23] {
        let mut cfg = RunConfig::profile("test").unwrap();
        cfg.seed = seed;
        cfg.synth.n_subjects = 200;
        cfg.epochs_pretrain = 10;
        let dir = tempfile::tempdir().unwrap();
        let data = cohort(&cfg, dir.path());
        let ldh = data.manifest.schema.index_of("ldh").unwrap();
        let (train, test) = holdout(&data, seed);
        let (_, tr) = data.subjects(&train, &train);
        let (_, te) = data.subjects(&train, &test);
        let mut errs = [0.0; 2];
        for (k, on) in [true, false].into_iter().enumerate() {
            let mut c = cfg.clone();
            c.cmc_enabled = on;
            let (mut st, model) = Model::build(&c, &data.manifest.schema).map_err(|e| e.to_string())?;
            pretrain(&mut st, &model, &tr, &c).map_err(|e| e.to_string())?;
            errs[k] = variable_recon_error(&st, &model, &te, ldh, 0.5, seed).map_err(|e| e.to_string())?;
        }
        lines.push(format!("seed {seed}: {:.3} vs {:.3}", errs[0], errs[1]));
        with += errs[0] / 3.0;
        without += errs[1] / 3.0;
    }
    ensure(with < without, || format!("mean error with completion {with:.4} >= without {without:.4}"))?;
    Ok(format!("coupled-variable MSE {with:.3} with vs {without:.3} without ({})", lines.join("; ")))
}

// ---------------------------------------------------------------- 8

fn c8_ablations() -> Outcome_ {
    let mut cfg = RunConfig::profile("test").unwrap();
    cfg.synth.n_subjects = 48;
    cfg.epochs_pretrain = 2;
    cfg.epochs_finetune = 40;
    cfg.folds = 3;
    let dir = tempfile::tempdir().unwrap();
    let data = cohort(&cfg, dir.path());
    let mut parts = Vec::new();

    let mut shared = cfg.clone();
    shared.set("tabular.cvs", "false").unwrap();
    let (st, _) = Model::build(&shared, &data.manifest.schema).unwrap();
    ensure(st.id("tabular.enc.mask_token").is_some() && st.id("tabular.enc.w_z").is_none(), || {
        "shared-token variant still builds variable-specific masks".into()
    })?;
    let r = harness::run_cv(&shared, &data, None).map_err(|e| e.to_string())?;
    parts.push(format!("shared token CI {:.3}", r.mean));

    let expect = [
        ("VS", Modality::Image, PretrainMode::Supervised, false),
        ("VM", Modality::Image, PretrainMode::Masked, false),
        ("TS", Modality::Tabular, PretrainMode::Supervised, false),
        ("TM", Modality::Tabular, PretrainMode::Masked, false),
        ("CS", Modality::Both, PretrainMode::Supervised, false),
        ("CM", Modality::Both, PretrainMode::Masked, false),
        ("full", Modality::Both, PretrainMode::Masked, true),
    ];
    let mut cis = Vec::new();
    for (name, modality, mode, cmc) in expect {
        let mut c = cfg.clone();
        c.set("ablation", name).unwrap();
        ensure(c.modality == modality && c.pretrain_mode == mode && c.cmc_enabled == cmc, || {
            format!("{name} maps to {:?}/{:?}/{}", c.modality, c.pretrain_mode, c.cmc_enabled)
        })?;
        let (_, model) = Model::build(&c, &data.manifest.schema).unwrap();
        let width = match modality {
            Modality::Both => 2 * 24,
            _ => 24,
        };
        ensure(model.feature_dim() == width, || format!("{name} feature width {}", model.feature_dim()))?;
        let r = harness::run_cv(&c, &data, None).map_err(|e| format!("{name}: {e}"))?;
        cis.push(format!("{name} {:.3}", r.mean));
    }
    parts.push(format!("ablations {}", cis.join(" ")));

    // Mask-ratio shape is advisory: recorded, never failed on.
    let mut interior = 0;
    let mut shapes = Vec::new();
    for seed in [31u64, 32, 33] {
        let mut c = cfg.clone();
        c.seed = seed;
        c.folds = 2;
        c.sweep_ratios = vec![0.1, 0.5, 0.9];
        let d = tempfile::tempdir().unwrap();
        let files = harness::generate(&c, &d.path().join("data")).unwrap();
        let rows = harness::cmd_sweep(&c, &files.manifest, &d.path().join("sweep")).map_err(|e| e.to_string())?;
        for axis in ["image", "tabular"] {
            let ci: Vec<f64> = rows.iter().filter(|r| r.modality == axis).map(|r| r.ci).collect();
            if ci[1] >= ci[0] && ci[1] >= ci[2] {
                interior += 1;
            }
            shapes.push(format!("{axis}[{:.2},{:.2},{:.2}]", ci[0], ci[1], ci[2]));
        }
    }
    parts.push(format!("sweep interior max in {interior}/6 (advisory) {}", shapes.join(" ")));
    Ok(parts.join("; "))
}

// ---------------------------------------------------------------- 9

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn c9_determinism() -> Outcome_ {
    let mut cfg = RunConfig::profile("test").unwrap();
    cfg.synth.n_subjects = 20;
    cfg.epochs_pretrain = 2;
    cfg.epochs_finetune = 20;
    cfg.folds = 2;
    cfg.sweep_ratios = vec![0.3, 0.6];
    let run = |root: &Path| {
        let files = harness::generate(&cfg, &root.join("data")).unwrap();
        let m = &files.manifest;
        let p = harness::cmd_pretrain(&cfg, m, &root.join("pretrain")).unwrap();
        let f = harness::cmd_finetune(&cfg, m, &p.checkpoint, &root.join("finetune")).unwrap();
        harness::cmd_evaluate(&cfg, m, &f.model, &root.join("evaluate")).unwrap();
        harness::cmd_cv(&cfg, m, &root.join("cv")).unwrap();
        harness::cmd_sweep(&cfg, m, &root.join("sweep")).unwrap();
        snapshot(root)
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (sa, sb) = (run(a.path()), run(b.path()));
    ensure(sa.len() == sb.len(), || "different file sets".into())?;
    for ((na, da), (nb, db)) in sa.iter().zip(&sb) {
        ensure(na == nb, || format!("{na} vs {nb}"))?;
        ensure(da == db, || format!("{na} differs between runs"))?;
    }
    let csv = sa.iter().filter(|(n, _)| n.ends_with(".csv")).count();
    let ckpt = sa.iter().filter(|(n, _)| n.ends_with(".ckpt")).count();
    Ok(format!("{} files ({csv} CSV, {ckpt} checkpoints) bitwise identical across two runs", sa.len()))
}
