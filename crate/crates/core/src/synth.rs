//! Synthetic cohort generator with a known proportional-hazards truth.
//!
//! Numerical variables are standard normal and categorical variables follow
//! the schema's level weights. One numerical variable is rendered into the
//! volume as the radius of a soft-tissue sphere on a lung-density
//! background. Both endpoints use exponential hazards `lambda0 * exp(b.x)`
//! (PFS at twice the baseline rate) with uniform censoring calibrated to the
//! requested rate. `truth.csv` stores `b.x` per subject.

use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{write_manifest, ManifestRow};
use crate::error::{Error, Result};
use crate::schema::{TabValue, TabularSchema};
use crate::survival::Outcome;
use crate::volume::{write_volume, Volume};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_subjects: usize,
    /// `(variable, coefficient)`; categorical variables contribute their
    /// level index.
    pub beta: Vec<(String, f64)>,
    /// Numerical variable encoded as lesion radius.
    pub coupled: String,
    pub censoring: f64,
    pub seed: u64,
    pub extents: [usize; 3],
    pub spacing: [f64; 3],
    /// Baseline hazard per month.
    pub lambda0: f64,
    /// Probability that any tabular cell is left empty.
    pub missing_rate: f64,
    /// Standard deviation of radius noise, in voxels.
    pub radius_noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_subjects: 400,
            beta: vec![("ldh".into(), 1.5)],
            coupled: "ldh".into(),
            censoring: 0.3,
            seed: 0,
            extents: [16, 16, 8],
            spacing: [1.5, 1.5, 3.0],
            lambda0: 1.0 / 12.0,
            missing_rate: 0.0,
            radius_noise: 0.3,
        }
    }
}

pub const BACKGROUND_HU: f32 = -800.0;
pub const LESION_HU: f32 = 40.0;

/// Everything a generated cohort consists of, before it is written out.
#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub rows: Vec<ManifestRow>,
    pub volumes: Vec<Volume>,
    pub true_risk: Vec<f64>,
    /// Complete tabular values (before cells were blanked).
    pub complete: Vec<Vec<TabValue>>,
}

impl SyntheticSpec {
    fn validate(&self, schema: &TabularSchema) -> Result<(Vec<(usize, f64)>, usize)> {
        if !(0.0..1.0).contains(&self.censoring) {
            return Err(Error::Config(format!("censoring rate {} outside [0, 1)", self.censoring)));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(Error::Config(format!("missing rate {} outside [0, 1)", self.missing_rate)));
        }
        if !(self.lambda0 > 0.0) || self.n_subjects == 0 || self.extents.contains(&0) {
            return Err(Error::Config("synthetic cohort needs subjects, extents and a positive baseline hazard".into()));
        }
        let mut beta = Vec::new();
        for (name, b) in &self.beta {
            let j = schema
                .index_of(name)
                .ok_or_else(|| Error::Config(format!("unknown variable {name:?} in coefficients")))?;
            if !b.is_finite() {
                return Err(Error::Config(format!("coefficient for {name:?} is not finite")));
            }
            beta.push((j, *b));
        }
        let coupled = schema
            .index_of(&self.coupled)
            .filter(|&j| schema.variables[j].is_numerical())
            .ok_or_else(|| Error::Config(format!("coupled variable {:?} must be numerical", self.coupled)))?;
        Ok((beta, coupled))
    }
}

fn subject_rng(seed: u64, i: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ i as u64)
}

/// Upper bound `a` of the censoring distribution `U(0, a)` such that the
/// expected censored fraction over subjects with rates `lambdas` is `rate`.
pub fn calibrate_censoring(lambdas: &[f64], rate: f64) -> f64 {
    if rate <= 0.0 {
        return f64::INFINITY;
    }
    // P(C < T) for T ~ Exp(l), C ~ U(0, a) is (1 - exp(-l a)) / (l a).
    let frac = |a: f64| {
        lambdas.iter().map(|&l| (1.0 - (-l * a).exp()) / (l * a)).sum::<f64>() / lambdas.len() as f64
    };
    let (mut lo, mut hi) = (1e-9, 1.0);
    while frac(hi) > rate {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if frac(mid) > rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn generate_cohort(spec: &SyntheticSpec, schema: &TabularSchema) -> Result<Cohort> {
    let (beta, coupled) = spec.validate(schema)?;
    let n = spec.n_subjects;
    let mut rngs: Vec<ChaCha8Rng> = (0..n).map(|i| subject_rng(spec.seed, i)).collect();

    let mut complete = Vec::with_capacity(n);
    for rng in rngs.iter_mut() {
        let mut vals = Vec::with_capacity(schema.d_vars());
        for v in &schema.variables {
            vals.push(if v.is_numerical() {
                TabValue::Num(StandardNormal.sample(rng))
            } else {
                let w = WeightedIndex::new(&v.weights).map_err(|e| Error::Config(format!("{}: {e}", v.name)))?;
                TabValue::Cat(w.sample(rng))
            });
        }
        complete.push(vals);
    }
    let covariate = |vals: &[TabValue], j: usize| match vals[j] {
        TabValue::Num(x) => x,
        TabValue::Cat(c) => c as f64,
    };
    let true_risk: Vec<f64> = complete
        .iter()
        .map(|vals| beta.iter().map(|&(j, b)| b * covariate(vals, j)).sum())
        .collect();
    let os_rate: Vec<f64> = true_risk.iter().map(|r| spec.lambda0 * r.exp()).collect();
    let pfs_rate: Vec<f64> = os_rate.iter().map(|l| 2.0 * l).collect();
    let a_os = calibrate_censoring(&os_rate, spec.censoring);
    let a_pfs = calibrate_censoring(&pfs_rate, spec.censoring);

    let mut rows = Vec::with_capacity(n);
    let mut volumes = Vec::with_capacity(n);
    for (i, rng) in rngs.iter_mut().enumerate() {
        let draw = |rng: &mut ChaCha8Rng, rate: f64, a: f64| {
            let u: f64 = rng.random();
            let t = -(1.0 - u).ln() / rate;
            let c = a * rng.random::<f64>();
            // Keep times strictly positive in the manifest.
            let t = t.max(1e-6);
            if t <= c {
                Outcome { time: t, event: true }
            } else {
                Outcome { time: c.max(1e-6), event: false }
            }
        };
        let os = draw(rng, os_rate[i], a_os);
        let pfs = draw(rng, pfs_rate[i], a_pfs);
        volumes.push(render_lesion(spec, covariate(&complete[i], coupled), rng)?);
        let values = complete[i]
            .iter()
            .map(|&v| (rng.random::<f64>() >= spec.missing_rate).then_some(v))
            .collect();
        let id = format!("S{i:05}");
        rows.push(ManifestRow {
            volume_path: PathBuf::from(format!("volumes/{id}.rvol")),
            subject_id: id,
            values,
            pfs,
            os,
        });
    }
    Ok(Cohort {
        rows,
        volumes,
        true_risk,
        complete,
    })
}

/// Lung background with mild noise and a soft-tissue sphere whose radius is
/// an affine function of `x` plus noise.
fn render_lesion(spec: &SyntheticSpec, x: f64, rng: &mut ChaCha8Rng) -> Result<Volume> {
    let [h, w, d] = spec.extents;
    let phys = |a: usize| spec.extents[a] as f64 * spec.spacing[a];
    let half_min = (0..3).map(phys).fold(f64::INFINITY, f64::min) / 2.0;
    let unit = spec.spacing.iter().cloned().fold(f64::INFINITY, f64::min);
    let noise: f64 = StandardNormal.sample(rng);
    let r = (half_min * (0.45 + 0.15 * x) + spec.radius_noise * unit * noise).clamp(0.5 * unit.min(half_min), 0.9 * half_min);
    let mut centre = [0.0; 3];
    for (a, c) in centre.iter_mut().enumerate() {
        let jitter: f64 = rng.random_range(-0.1..0.1);
        *c = phys(a) * (0.5 + jitter);
    }
    let bg: Vec<f32> = (0..h * w * d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            BACKGROUND_HU + (20.0 * z) as f32
        })
        .collect();
    Volume::from_fn(spec.extents, spec.spacing, |y, xx, z| {
        let p = [
            (y as f64 + 0.5) * spec.spacing[0],
            (xx as f64 + 0.5) * spec.spacing[1],
            (z as f64 + 0.5) * spec.spacing[2],
        ];
        let dist = ((p[0] - centre[0]).powi(2) + (p[1] - centre[1]).powi(2) + (p[2] - centre[2]).powi(2)).sqrt();
        if dist <= r {
            LESION_HU
        } else {
            bg[(z * h + y) * w + xx]
        }
    })
}

/// Paths written by [`write_cohort`].
#[derive(Clone, Debug)]
pub struct CohortFiles {
    pub manifest: PathBuf,
    pub truth: PathBuf,
}

/// Writes `manifest.csv`, `truth.csv` and `volumes/*.rvol` under `dir`.
pub fn write_cohort(dir: &Path, schema: &TabularSchema, c: &Cohort) -> Result<CohortFiles> {
    let vdir = dir.join("volumes");
    std::fs::create_dir_all(&vdir).map_err(|e| Error::io(&vdir, e))?;
    for (row, vol) in c.rows.iter().zip(&c.volumes) {
        write_volume(&dir.join(&row.volume_path), vol)?;
    }
    let manifest = dir.join("manifest.csv");
    write_manifest(&manifest, schema, &c.rows)?;
    let truth = dir.join("truth.csv");
    let mut w = csv::Writer::from_path(&truth)?;
    w.write_record(["subject_id", "true_risk"])?;
    for (row, r) in c.rows.iter().zip(&c.true_risk) {
        w.write_record([row.subject_id.clone(), format!("{r}")])?;
    }
    w.flush().map_err(|e| Error::io(&truth, e))?;
    Ok(CohortFiles { manifest, truth })
}

/// Reads `truth.csv` into `(subject_id, true_risk)` pairs.
pub fn read_truth(path: &Path) -> Result<Vec<(String, f64)>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let risk: f64 = rec
            .get(1)
            .unwrap_or("")
            .parse()
            .map_err(|_| Error::Data(format!("{}: bad true_risk value", path.display())))?;
        out.push((rec.get(0).unwrap_or("").to_string(), risk));
    }
    Ok(out)
}
