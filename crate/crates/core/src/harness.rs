//! Command implementations behind the `cmsurv` binary. Each writes its
//! artifacts into an output directory together with the effective config.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::{PretrainMode, RunConfig};
use crate::data::{load_manifest, Manifest, Preprocessor};
use crate::error::{Error, Result};
use crate::model::{build_subjects, load_grids, Model, Subject};
use crate::params::ModelState;
use crate::schema::TabularSchema;
use crate::stats::{concordance_index, kaplan_meier, km_svg, log_rank_test, median_split, LogRank};
use crate::survival::{Endpoint, Outcome, RiskBatch};
use crate::synth::{generate_cohort, read_truth, write_cohort, CohortFiles};
use crate::train::{add_head, extract_features, fit_head, loss_log_csv, mix_seed, pretrain, risk_scores, train_supervised, EpochLoss};
use crate::volume::PatchGrid;

pub const CONFIG_FILE: &str = "config.txt";
pub const TRUTH_FILE: &str = "truth.csv";

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn prepare_out(out: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write(&out.join(CONFIG_FILE), cfg.render())
}

/// A loaded manifest with preprocessed patch grids and, when present, the
/// generator's true-risk sidecar.
pub struct Dataset {
    pub manifest: Manifest,
    pub grids: Vec<PatchGrid>,
    pub truth: Option<Vec<f64>>,
}

impl Dataset {
    pub fn load(path: &Path, cfg: &RunConfig) -> Result<Self> {
        let schema = TabularSchema::default_schema();
        let manifest = load_manifest(path, &schema)?;
        let grids = load_grids(&manifest, cfg)?;
        let sidecar = path.parent().unwrap_or(Path::new(".")).join(TRUTH_FILE);
        let truth = if sidecar.is_file() {
            let pairs = read_truth(&sidecar)?;
            let lookup: std::collections::HashMap<_, _> = pairs.into_iter().collect();
            manifest.rows.iter().map(|r| lookup.get(&r.subject_id).copied()).collect::<Option<Vec<f64>>>()
        } else {
            None
        };
        Ok(Self { manifest, grids, truth })
    }

    pub fn len(&self) -> usize {
        self.manifest.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.rows.is_empty()
    }

    pub fn outcomes(&self, rows: &[usize], e: Endpoint) -> Vec<Outcome> {
        rows.iter().map(|&i| self.manifest.rows[i].outcome(e)).collect()
    }

    /// Subjects for `rows`, standardized with statistics fit on `fit_rows`.
    pub fn subjects(&self, fit_rows: &[usize], rows: &[usize]) -> (Preprocessor, Vec<Subject>) {
        let pre = Preprocessor::fit(&self.manifest, fit_rows);
        let s = build_subjects(&self.manifest, &self.grids, &pre, rows);
        (pre, s)
    }
}

pub fn generate(cfg: &RunConfig, out: &Path) -> Result<CohortFiles> {
    cfg.validate()?;
    prepare_out(out, cfg)?;
    let schema = TabularSchema::default_schema();
    let cohort = generate_cohort(&cfg.synthetic_spec(), &schema)?;
    write_cohort(out, &schema, &cohort)
}

pub struct PretrainOutput {
    pub checkpoint: PathBuf,
    pub log: Vec<EpochLoss>,
}

/// Masked pretraining on every manifest subject.
pub fn cmd_pretrain(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<PretrainOutput> {
    cfg.validate()?;
    let data = Dataset::load(manifest, cfg)?;
    prepare_out(out, cfg)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let (pre, subjects) = data.subjects(&all, &all);
    pre.save(&out.join("preprocess.json"))?;
    let (mut st, model) = Model::build(cfg, &data.manifest.schema)?;
    let log = pretrain(&mut st, &model, &subjects, cfg)?;
    write(&out.join("loss_log.csv"), loss_log_csv(&log))?;
    let path = out.join("pretrain.ckpt");
    checkpoint::save(&path, &st, &cfg.fingerprint())?;
    Ok(PretrainOutput { checkpoint: path, log })
}

/// Restores trunk weights from a checkpoint written for the same architecture.
fn restore(cfg: &RunConfig, schema: &TabularSchema, ckpt: &Path) -> Result<(ModelState, Model, ModelState)> {
    let c = checkpoint::load(ckpt)?;
    if c.fingerprint != cfg.fingerprint() {
        return Err(Error::Version(format!(
            "checkpoint {} was written for architecture {}, config describes {}",
            ckpt.display(),
            c.fingerprint,
            cfg.fingerprint()
        )));
    }
    let (mut st, model) = Model::build(cfg, schema)?;
    st.load_values_from(&c.state)?;
    if !cfg.cmc_enabled {
        model.vis_stack.null_cross_values(&mut st);
        model.tab_stack.null_cross_values(&mut st);
    }
    Ok((st, model, c.state))
}

fn risk_csv(subjects: &[Subject], risk: &[f64]) -> String {
    let mut s = String::from("subject_id,risk\n");
    for (sub, r) in subjects.iter().zip(risk) {
        let _ = writeln!(s, "{},{}", sub.id, r);
    }
    s
}

pub struct FinetuneOutput {
    pub model: PathBuf,
    pub risk: Vec<f64>,
    pub trunk_checksum: String,
}

/// Fits the `cfg.endpoint` head on frozen features (or jointly with the
/// trunk for supervised variants) and writes the model plus risk scores.
pub fn cmd_finetune(cfg: &RunConfig, manifest: &Path, ckpt: &Path, out: &Path) -> Result<FinetuneOutput> {
    cfg.validate()?;
    let data = Dataset::load(manifest, cfg)?;
    let (mut st, model, _) = restore(cfg, &data.manifest.schema, ckpt)?;
    prepare_out(out, cfg)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let (pre, subjects) = data.subjects(&all, &all);
    pre.save(&out.join("preprocess.json"))?;
    let head = add_head(&mut st, &model, cfg, cfg.endpoint);
    let outcomes = data.outcomes(&all, cfg.endpoint);
    let features = match cfg.pretrain_mode {
        PretrainMode::Masked => {
            let f = extract_features(&st, &model, &subjects)?;
            fit_head(&mut st, &head, &f, &outcomes, cfg)?;
            f
        }
        PretrainMode::Supervised => {
            train_supervised(&mut st, &model, &head, &subjects, cfg, cfg.endpoint)?;
            extract_features(&st, &model, &subjects)?
        }
    };
    let risk = risk_scores(&st, &head, &features)?;
    write(&out.join("risk.csv"), risk_csv(&subjects, &risk))?;
    let path = out.join("model.ckpt");
    checkpoint::save(&path, &st, &cfg.fingerprint())?;
    Ok(FinetuneOutput {
        model: path,
        risk,
        trunk_checksum: st.checksum(|n| !n.starts_with("head.")),
    })
}

/// Concordance, median-split KM curves and log-rank for one scored set.
pub struct Evaluation {
    pub ci: f64,
    pub high: Vec<Outcome>,
    pub low: Vec<Outcome>,
    pub logrank: Option<LogRank>,
    pub warnings: Vec<String>,
}

pub fn evaluate_scores(risk: &[f64], outcomes: &[Outcome]) -> Result<Evaluation> {
    let ci = concordance_index(&RiskBatch::new(risk.to_vec(), outcomes.to_vec())?)?;
    let (hi, lo) = median_split(risk)?;
    let high: Vec<Outcome> = hi.iter().map(|&i| outcomes[i]).collect();
    let low: Vec<Outcome> = lo.iter().map(|&i| outcomes[i]).collect();
    let mut warnings = Vec::new();
    let logrank = match log_rank_test(&high, &low) {
        Ok(l) => Some(l),
        Err(e) => {
            warnings.push(e.to_string());
            None
        }
    };
    Ok(Evaluation { ci, high, low, logrank, warnings })
}

fn write_km(out: &Path, stem: &str, ev: &Evaluation) -> Result<()> {
    let (h, l) = (kaplan_meier(&ev.high), kaplan_meier(&ev.low));
    h.write_csv(&out.join(format!("{stem}_high.csv")))?;
    l.write_csv(&out.join(format!("{stem}_low.csv")))?;
    write(&out.join(format!("{stem}.svg")), km_svg(&[("high risk", &h), ("low risk", &l)]))
}

fn fmt_logrank(l: &Option<LogRank>) -> String {
    match l {
        Some(l) => format!("{},{}", l.chi_square, l.p),
        None => "NA,NA".into(),
    }
}

/// Scores every manifest subject with a fine-tuned model.
pub fn cmd_evaluate(cfg: &RunConfig, manifest: &Path, model_path: &Path, out: &Path) -> Result<Evaluation> {
    cfg.validate()?;
    let data = Dataset::load(manifest, cfg)?;
    let (mut st, model, saved) = restore(cfg, &data.manifest.schema, model_path)?;
    let head_name = format!("head.{}.fc1.w", cfg.endpoint.as_str());
    if saved.id(&head_name).is_none() {
        return Err(Error::Version(format!("{} has no {} head", model_path.display(), cfg.endpoint.as_str())));
    }
    let head = add_head(&mut st, &model, cfg, cfg.endpoint);
    st.load_values_from(&saved)?;
    prepare_out(out, cfg)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let (_, subjects) = data.subjects(&all, &all);
    let risk = risk_scores(&st, &head, &extract_features(&st, &model, &subjects)?)?;
    let ev = evaluate_scores(&risk, &data.outcomes(&all, cfg.endpoint))?;
    write(&out.join("risk.csv"), risk_csv(&subjects, &risk))?;
    write(
        &out.join("eval.csv"),
        format!("endpoint,ci,chi_square,p\n{},{},{}\n", cfg.endpoint.as_str(), ev.ci, fmt_logrank(&ev.logrank)),
    )?;
    write_km(out, "km", &ev)?;
    Ok(ev)
}

/// Seeded shuffle cut into `folds` contiguous test sets whose sizes differ by
/// at most one. Each returned list is sorted.
pub fn assign_folds(n: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 || n < folds {
        return Err(Error::Data(format!("cannot split {n} subjects into {folds} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xF01D, 0)));
    let mut out = Vec::with_capacity(folds);
    let mut start = 0;
    for f in 0..folds {
        let size = n / folds + usize::from(f < n % folds);
        let mut test = order[start..start + size].to_vec();
        test.sort_unstable();
        out.push(test);
        start += size;
    }
    Ok(out)
}

/// Trains on `train` and returns risk scores for `test`. Preprocessing
/// statistics, pretraining and head fitting all see training rows only.
pub fn train_and_score(cfg: &RunConfig, data: &Dataset, train: &[usize], test: &[usize]) -> Result<Vec<f64>> {
    if cfg.oracle_head {
        let truth = data
            .truth
            .as_ref()
            .ok_or_else(|| Error::Data(format!("oracle head needs a {TRUTH_FILE} sidecar next to the manifest")))?;
        return Ok(test.iter().map(|&i| truth[i]).collect());
    }
    let (_, train_s) = data.subjects(train, train);
    let (_, test_s) = data.subjects(train, test);
    let (mut st, model) = Model::build(cfg, &data.manifest.schema)?;
    let head = add_head(&mut st, &model, cfg, cfg.endpoint);
    match cfg.pretrain_mode {
        PretrainMode::Masked => {
            pretrain(&mut st, &model, &train_s, cfg)?;
            let f = extract_features(&st, &model, &train_s)?;
            fit_head(&mut st, &head, &f, &data.outcomes(train, cfg.endpoint), cfg)?;
        }
        PretrainMode::Supervised => {
            train_supervised(&mut st, &model, &head, &train_s, cfg, cfg.endpoint)?;
        }
    }
    risk_scores(&st, &head, &extract_features(&st, &model, &test_s)?)
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub fold: usize,
    pub ci: f64,
    pub logrank: Option<LogRank>,
}

#[derive(Clone, Debug)]
pub struct CvReport {
    pub endpoint: Endpoint,
    pub folds: Vec<FoldResult>,
    pub warnings: Vec<String>,
    pub mean: f64,
    /// Sample standard deviation over completed folds.
    pub sd: f64,
}

/// Mean and sample standard deviation; the latter is NaN below two values.
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() < 2 {
        f64::NAN
    } else {
        (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (mean, sd)
}

/// Cross-validation without file output.
pub fn run_cv(cfg: &RunConfig, data: &Dataset, out: Option<&Path>) -> Result<CvReport> {
    let folds = assign_folds(data.len(), cfg.folds, cfg.seed)?;
    let e = cfg.endpoint;
    let mut results = Vec::new();
    let mut warnings = Vec::new();
    for (f, test) in folds.iter().enumerate() {
        let train: Vec<usize> = (0..data.len()).filter(|i| test.binary_search(i).is_err()).collect();
        let test_out = data.outcomes(test, e);
        let skip = if !data.outcomes(&train, e).iter().any(|o| o.event) {
            Some("training split has no events")
        } else if !test_out.iter().any(|o| o.event) {
            Some("test split has no events")
        } else {
            None
        };
        if let Some(why) = skip {
            let w = format!("fold {f} skipped: {why}");
            log::warn!("{w}");
            warnings.push(w);
            continue;
        }
        let risk = train_and_score(cfg, data, &train, test)?;
        let ev = match evaluate_scores(&risk, &test_out) {
            Ok(ev) => ev,
            Err(err @ Error::UndefinedMetric(_)) => {
                warnings.push(format!("fold {f} skipped: {err}"));
                continue;
            }
            Err(err) => return Err(err),
        };
        warnings.extend(ev.warnings.iter().map(|w| format!("fold {f}: {w}")));
        if let Some(out) = out {
            write_km(out, &format!("km_fold{f}"), &ev)?;
        }
        log::info!("fold {f}: {} CI {:.4}", e.as_str(), ev.ci);
        results.push(FoldResult {
            fold: f,
            ci: ev.ci,
            logrank: ev.logrank,
        });
    }
    if results.is_empty() {
        return Err(Error::Data("every fold was skipped".into()));
    }
    let (mean, sd) = mean_sd(&results.iter().map(|r| r.ci).collect::<Vec<_>>());
    Ok(CvReport {
        endpoint: e,
        folds: results,
        warnings,
        mean,
        sd,
    })
}

pub fn cmd_cv(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<CvReport> {
    cfg.validate()?;
    let data = Dataset::load(manifest, cfg)?;
    prepare_out(out, cfg)?;
    let report = run_cv(cfg, &data, Some(out))?;
    let e = report.endpoint.as_str();
    let mut ci = String::from("fold,endpoint,ci\n");
    let mut lr = String::from("fold,endpoint,chi_square,p\n");
    for r in &report.folds {
        let _ = writeln!(ci, "{},{e},{}", r.fold, r.ci);
        let _ = writeln!(lr, "{},{e},{}", r.fold, fmt_logrank(&r.logrank));
    }
    let _ = writeln!(ci, "mean,{e},{}", report.mean);
    let _ = writeln!(ci, "sd,{e},{}", report.sd);
    write(&out.join("ci.csv"), ci)?;
    write(&out.join("logrank.csv"), lr)?;
    write(&out.join("warnings.txt"), report.warnings.iter().map(|w| format!("{w}\n")).collect::<String>())?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub modality: &'static str,
    pub ratio: f64,
    pub endpoint: Endpoint,
    pub ci: f64,
}

/// Varies one modality's mask ratio with the other fixed at 0.5; every point
/// is a full cross-validation and reports its mean CI.
pub fn cmd_sweep(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let data = Dataset::load(manifest, cfg)?;
    prepare_out(out, cfg)?;
    let mut rows = Vec::new();
    let mut csv = String::from("modality,ratio,endpoint,ci\n");
    let mut axes = Vec::new();
    if cfg.modality.uses_image() {
        axes.push("image");
    }
    if cfg.modality.uses_tabular() {
        axes.push("tabular");
    }
    for axis in axes {
        for &r in &cfg.sweep_ratios {
            let mut c = cfg.clone();
            c.mask_ratio_img = 0.5;
            c.mask_ratio_tab = 0.5;
            match axis {
                "image" => c.mask_ratio_img = r,
                _ => c.mask_ratio_tab = r,
            }
            let rep = run_cv(&c, &data, None)?;
            log::info!("sweep {axis} ratio {r}: CI {:.4}", rep.mean);
            let _ = writeln!(csv, "{axis},{r},{},{}", cfg.endpoint.as_str(), rep.mean);
            rows.push(SweepRow {
                modality: axis,
                ratio: r,
                endpoint: cfg.endpoint,
                ci: rep.mean,
            });
        }
    }
    write(&out.join("sweep.csv"), csv)?;
    Ok(rows)
}
