//! Run configuration: a flat `key = value` file with `#` comments.
//!
//! Every key has a default from the selected profile. Unknown keys are usage
//! errors that list the valid keys. [`RunConfig::render`] produces the
//! effective configuration in the same format, so it can be echoed into
//! output directories and read back.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::cmc::Direction;
use crate::error::{Error, Result};
use crate::survival::Endpoint;
use crate::synth::SyntheticSpec;
use crate::tabular::TabularConfig;
use crate::visual::VisualConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Image,
    Tabular,
    Both,
}

impl Modality {
    pub fn uses_image(self) -> bool {
        self != Modality::Tabular
    }

    pub fn uses_tabular(self) -> bool {
        self != Modality::Image
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Tabular => "tabular",
            Modality::Both => "both",
        }
    }

    /// Completion directions that have a masked modality to train.
    pub fn directions(self) -> Vec<Direction> {
        let mut d = Vec::new();
        if self.uses_image() {
            d.push(Direction::VisualFromTabular);
        }
        if self.uses_tabular() {
            d.push(Direction::TabularFromVisual);
        }
        d
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Modality::Image),
            "tabular" => Ok(Modality::Tabular),
            "both" => Ok(Modality::Both),
            _ => Err(Error::Usage(format!("modality must be image, tabular or both, got {s:?}"))),
        }
    }
}

/// How the trunk is trained before (or instead of) head fitting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PretrainMode {
    /// Masked reconstruction, then a head on frozen features.
    Masked,
    /// Trunk and head trained together with the Cox loss.
    Supervised,
}

impl PretrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PretrainMode::Masked => "masked",
            PretrainMode::Supervised => "supervised",
        }
    }
}

impl FromStr for PretrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "masked" => Ok(PretrainMode::Masked),
            "supervised" => Ok(PretrainMode::Supervised),
            _ => Err(Error::Usage(format!("pretrain.mode must be masked or supervised, got {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub profile: String,
    pub ablation: String,

    pub visual_extents: [usize; 3],
    pub visual_spacing: [f64; 3],
    pub visual_patch: [usize; 3],
    pub visual_channels: usize,
    pub visual_heads: usize,
    pub visual_blocks: usize,
    pub visual_dec_blocks: usize,
    pub visual_mlp_hidden: usize,

    pub tabular_channels: usize,
    pub tabular_blocks: usize,
    pub tabular_dec_blocks: usize,
    pub tabular_mlp_hidden: usize,
    pub tabular_share_z: bool,
    pub tabular_cvs: bool,

    pub cmc_layers: usize,
    pub cmc_heads: usize,
    pub cmc_mlp_hidden: usize,
    pub cmc_enabled: bool,
    pub cmc_alternate_directions: bool,

    pub head_hidden: usize,

    pub mask_ratio_img: f64,
    pub mask_ratio_tab: f64,
    pub loss_weight_v: f64,
    pub loss_weight_x: f64,
    pub lr_pretrain: f64,
    pub lr_finetune: f64,
    pub epochs_pretrain: usize,
    pub epochs_finetune: usize,
    pub batch_size: usize,
    pub folds: usize,
    pub seed: u64,
    pub endpoint: Endpoint,
    pub modality: Modality,
    pub pretrain_mode: PretrainMode,
    pub oracle_head: bool,
    pub sweep_ratios: Vec<f64>,

    pub synth: SyntheticSpec,
}

pub const PROFILES: [&str; 3] = ["paper", "desk", "test"];

/// Keys that determine parameter names and shapes.
const ARCH_KEYS: [&str; 16] = [
    "visual.extents",
    "visual.patch",
    "visual.channels",
    "visual.heads",
    "visual.blocks",
    "visual.dec_blocks",
    "visual.mlp_hidden",
    "tabular.channels",
    "tabular.blocks",
    "tabular.dec_blocks",
    "tabular.mlp_hidden",
    "tabular.share_z",
    "tabular.cvs",
    "cmc.layers",
    "cmc.heads",
    "cmc.mlp_hidden",
];

impl Default for RunConfig {
    fn default() -> Self {
        Self::profile("desk").expect("desk profile exists")
    }
}

impl RunConfig {
    pub fn profile(name: &str) -> Result<Self> {
        let base = RunConfig {
            profile: "desk".into(),
            ablation: "full".into(),
            visual_extents: [32, 32, 16],
            visual_spacing: [1.5, 1.5, 3.0],
            visual_patch: [8, 8, 4],
            visual_channels: 64,
            visual_heads: 4,
            visual_blocks: 4,
            visual_dec_blocks: 2,
            visual_mlp_hidden: 128,
            tabular_channels: 64,
            tabular_blocks: 3,
            tabular_dec_blocks: 2,
            tabular_mlp_hidden: 128,
            tabular_share_z: false,
            tabular_cvs: true,
            cmc_layers: 2,
            cmc_heads: 4,
            cmc_mlp_hidden: 128,
            cmc_enabled: true,
            cmc_alternate_directions: false,
            head_hidden: 64,
            mask_ratio_img: 0.5,
            mask_ratio_tab: 0.5,
            loss_weight_v: 1.0,
            loss_weight_x: 1.0,
            lr_pretrain: 1e-4,
            lr_finetune: 1e-2,
            epochs_pretrain: 80,
            epochs_finetune: 100,
            batch_size: 16,
            folds: 5,
            seed: 0,
            endpoint: Endpoint::Os,
            modality: Modality::Both,
            pretrain_mode: PretrainMode::Masked,
            oracle_head: false,
            sweep_ratios: vec![0.1, 0.5, 0.9],
            synth: SyntheticSpec {
                extents: [32, 32, 16],
                ..SyntheticSpec::default()
            },
        };
        match name {
            "desk" => Ok(base),
            "paper" => Ok(RunConfig {
                profile: "paper".into(),
                visual_extents: [480, 480, 240],
                visual_spacing: [0.75, 0.75, 1.5],
                visual_patch: [16, 16, 8],
                synth: SyntheticSpec {
                    extents: [480, 480, 240],
                    spacing: [0.75, 0.75, 1.5],
                    ..base.synth.clone()
                },
                ..base
            }),
            "test" => Ok(RunConfig {
                profile: "test".into(),
                visual_extents: [16, 16, 8],
                visual_patch: [4, 4, 2],
                visual_channels: 24,
                visual_heads: 2,
                visual_blocks: 2,
                visual_dec_blocks: 2,
                visual_mlp_hidden: 48,
                tabular_channels: 24,
                tabular_blocks: 2,
                tabular_dec_blocks: 1,
                tabular_mlp_hidden: 48,
                cmc_layers: 1,
                cmc_heads: 2,
                cmc_mlp_hidden: 48,
                head_hidden: 32,
                lr_pretrain: 1e-3,
                epochs_pretrain: 4,
                epochs_finetune: 100,
                batch_size: 16,
                synth: SyntheticSpec {
                    extents: [16, 16, 8],
                    n_subjects: 64,
                    ..base.synth.clone()
                },
                ..base
            }),
            _ => Err(Error::Usage(format!("unknown profile {name:?}; valid: {}", PROFILES.join(", ")))),
        }
    }

    /// Parses config text: `profile` may appear first to pick the base
    /// defaults, later lines override.
    pub fn parse(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let mut cfg = match pairs.iter().find(|(k, _)| k == "profile") {
            Some((_, p)) => Self::profile(p)?,
            None => Self::default(),
        };
        for (k, v) in &pairs {
            if k != "profile" {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let bad = |what: &str| Error::Usage(format!("invalid value {v:?} for {key}: expected {what}"));
        macro_rules! num {
            ($t:ty) => {
                v.parse::<$t>().map_err(|_| bad(stringify!($t)))?
            };
        }
        let boolean = || match v {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            _ => Err(bad("true or false")),
        };
        match key {
            "profile" => {
                let keep_seed = self.seed;
                *self = Self::profile(v)?;
                self.seed = keep_seed;
            }
            "ablation" => self.apply_ablation(v)?,
            "visual.extents" => self.visual_extents = triple(v).ok_or_else(|| bad("three integers"))?,
            "visual.spacing" => self.visual_spacing = triple(v).ok_or_else(|| bad("three numbers"))?,
            "visual.patch" => self.visual_patch = triple(v).ok_or_else(|| bad("three integers"))?,
            "visual.channels" => self.visual_channels = num!(usize),
            "visual.heads" => self.visual_heads = num!(usize),
            "visual.blocks" => self.visual_blocks = num!(usize),
            "visual.dec_blocks" => self.visual_dec_blocks = num!(usize),
            "visual.mlp_hidden" => self.visual_mlp_hidden = num!(usize),
            "tabular.channels" => self.tabular_channels = num!(usize),
            "tabular.blocks" => self.tabular_blocks = num!(usize),
            "tabular.dec_blocks" => self.tabular_dec_blocks = num!(usize),
            "tabular.mlp_hidden" => self.tabular_mlp_hidden = num!(usize),
            "tabular.share_z" => self.tabular_share_z = boolean()?,
            "tabular.cvs" => self.tabular_cvs = boolean()?,
            "cmc.layers" => self.cmc_layers = num!(usize),
            "cmc.heads" => self.cmc_heads = num!(usize),
            "cmc.mlp_hidden" => self.cmc_mlp_hidden = num!(usize),
            "cmc.enabled" => self.cmc_enabled = boolean()?,
            "cmc.alternate_directions" => self.cmc_alternate_directions = boolean()?,
            "head.hidden" => self.head_hidden = num!(usize),
            "mask_ratio_img" => self.mask_ratio_img = num!(f64),
            "mask_ratio_tab" => self.mask_ratio_tab = num!(f64),
            "loss.weight_v" => self.loss_weight_v = num!(f64),
            "loss.weight_x" => self.loss_weight_x = num!(f64),
            "lr_pretrain" => self.lr_pretrain = num!(f64),
            "lr_finetune" => self.lr_finetune = num!(f64),
            "epochs_pretrain" => self.epochs_pretrain = num!(usize),
            "epochs_finetune" => self.epochs_finetune = num!(usize),
            "batch_size" => self.batch_size = num!(usize),
            "folds" => self.folds = num!(usize),
            "seed" => self.seed = num!(u64),
            "endpoint" => self.endpoint = v.parse()?,
            "modality" => self.modality = v.parse()?,
            "pretrain.mode" => self.pretrain_mode = v.parse()?,
            "test.oracle_head" => self.oracle_head = boolean()?,
            "sweep.ratios" => self.sweep_ratios = list(v).ok_or_else(|| bad("comma-separated numbers"))?,
            "synth.n_subjects" => self.synth.n_subjects = num!(usize),
            "synth.censoring" => self.synth.censoring = num!(f64),
            "synth.coupled" => self.synth.coupled = v.to_string(),
            "synth.lambda0" => self.synth.lambda0 = num!(f64),
            "synth.missing_rate" => self.synth.missing_rate = num!(f64),
            "synth.radius_noise" => self.synth.radius_noise = num!(f64),
            "synth.extents" => self.synth.extents = triple(v).ok_or_else(|| bad("three integers"))?,
            "synth.spacing" => self.synth.spacing = triple(v).ok_or_else(|| bad("three numbers"))?,
            "synth.beta" => self.synth.beta = coefficients(v).ok_or_else(|| bad("name:value pairs"))?,
            _ => {
                return Err(Error::Usage(format!(
                    "unknown config key {key:?}; valid keys: {}",
                    Self::keys().join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Structural presets: `V`/`T`/`C` pick image, tabular or both; `S`
    /// trains the trunk with the Cox loss, `M` pretrains each branch by
    /// masked reconstruction without cross-modality completion.
    fn apply_ablation(&mut self, name: &str) -> Result<()> {
        let (modality, mode, cmc) = match name {
            "full" => (Modality::Both, PretrainMode::Masked, true),
            "VS" => (Modality::Image, PretrainMode::Supervised, false),
            "VM" => (Modality::Image, PretrainMode::Masked, false),
            "TS" => (Modality::Tabular, PretrainMode::Supervised, false),
            "TM" => (Modality::Tabular, PretrainMode::Masked, false),
            "CS" => (Modality::Both, PretrainMode::Supervised, false),
            "CM" => (Modality::Both, PretrainMode::Masked, false),
            _ => {
                return Err(Error::Usage(format!(
                    "unknown ablation {name:?}; valid: full, VS, VM, TS, TM, CS, CM"
                )))
            }
        };
        self.ablation = name.to_string();
        self.modality = modality;
        self.pretrain_mode = mode;
        self.cmc_enabled = cmc;
        Ok(())
    }

    pub fn keys() -> Vec<&'static str> {
        Self::default().entries().into_iter().map(|(k, _)| k).collect()
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = |a: &[usize; 3]| format!("{},{},{}", a[0], a[1], a[2]);
        let tf = |a: &[f64; 3]| format!("{},{},{}", a[0], a[1], a[2]);
        vec![
            ("profile", self.profile.clone()),
            ("ablation", self.ablation.clone()),
            ("visual.extents", t(&self.visual_extents)),
            ("visual.spacing", tf(&self.visual_spacing)),
            ("visual.patch", t(&self.visual_patch)),
            ("visual.channels", self.visual_channels.to_string()),
            ("visual.heads", self.visual_heads.to_string()),
            ("visual.blocks", self.visual_blocks.to_string()),
            ("visual.dec_blocks", self.visual_dec_blocks.to_string()),
            ("visual.mlp_hidden", self.visual_mlp_hidden.to_string()),
            ("tabular.channels", self.tabular_channels.to_string()),
            ("tabular.blocks", self.tabular_blocks.to_string()),
            ("tabular.dec_blocks", self.tabular_dec_blocks.to_string()),
            ("tabular.mlp_hidden", self.tabular_mlp_hidden.to_string()),
            ("tabular.share_z", self.tabular_share_z.to_string()),
            ("tabular.cvs", self.tabular_cvs.to_string()),
            ("cmc.layers", self.cmc_layers.to_string()),
            ("cmc.heads", self.cmc_heads.to_string()),
            ("cmc.mlp_hidden", self.cmc_mlp_hidden.to_string()),
            ("cmc.enabled", self.cmc_enabled.to_string()),
            ("cmc.alternate_directions", self.cmc_alternate_directions.to_string()),
            ("head.hidden", self.head_hidden.to_string()),
            ("mask_ratio_img", self.mask_ratio_img.to_string()),
            ("mask_ratio_tab", self.mask_ratio_tab.to_string()),
            ("loss.weight_v", self.loss_weight_v.to_string()),
            ("loss.weight_x", self.loss_weight_x.to_string()),
            ("lr_pretrain", self.lr_pretrain.to_string()),
            ("lr_finetune", self.lr_finetune.to_string()),
            ("epochs_pretrain", self.epochs_pretrain.to_string()),
            ("epochs_finetune", self.epochs_finetune.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("folds", self.folds.to_string()),
            ("seed", self.seed.to_string()),
            ("endpoint", self.endpoint.as_str().to_string()),
            ("modality", self.modality.as_str().to_string()),
            ("pretrain.mode", self.pretrain_mode.as_str().to_string()),
            ("test.oracle_head", self.oracle_head.to_string()),
            (
                "sweep.ratios",
                self.sweep_ratios.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(","),
            ),
            ("synth.n_subjects", self.synth.n_subjects.to_string()),
            ("synth.censoring", self.synth.censoring.to_string()),
            ("synth.coupled", self.synth.coupled.clone()),
            ("synth.lambda0", self.synth.lambda0.to_string()),
            ("synth.missing_rate", self.synth.missing_rate.to_string()),
            ("synth.radius_noise", self.synth.radius_noise.to_string()),
            ("synth.extents", t(&self.synth.extents)),
            ("synth.spacing", tf(&self.synth.spacing)),
            (
                "synth.beta",
                self.synth.beta.iter().map(|(n, b)| format!("{n}:{b}")).collect::<Vec<_>>().join(","),
            ),
        ]
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// SHA-256 over the architecture keys.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if ARCH_KEYS.contains(&k) {
                h.update(format!("{k}={v}\n").as_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        for a in 0..3 {
            if self.visual_patch[a] == 0 || !self.visual_extents[a].is_multiple_of(self.visual_patch[a]) {
                return cfg(format!(
                    "visual.extents {:?} must be positive multiples of visual.patch {:?}",
                    self.visual_extents, self.visual_patch
                ));
            }
            if !(self.visual_spacing[a] > 0.0) {
                return cfg(format!("visual.spacing must be positive, got {:?}", self.visual_spacing));
            }
        }
        if self.visual_heads == 0 || !self.visual_channels.is_multiple_of(self.visual_heads) {
            return cfg("visual.heads must divide visual.channels".into());
        }
        if self.cmc_heads == 0 || !self.visual_channels.is_multiple_of(self.cmc_heads) || !self.tabular_channels.is_multiple_of(self.cmc_heads) {
            return cfg("cmc.heads must divide both channel sizes".into());
        }
        for (k, r) in [("mask_ratio_img", self.mask_ratio_img), ("mask_ratio_tab", self.mask_ratio_tab)] {
            if !(0.0..1.0).contains(&r) {
                return cfg(format!("{k} must lie in [0, 1), got {r}"));
            }
        }
        if self.sweep_ratios.iter().any(|r| !(0.0..1.0).contains(r)) {
            return cfg("sweep.ratios must lie in [0, 1)".into());
        }
        if self.batch_size == 0 || self.folds < 2 {
            return cfg("batch_size must be positive and folds at least 2".into());
        }
        if !(self.lr_pretrain > 0.0 && self.lr_finetune > 0.0) {
            return cfg("learning rates must be positive".into());
        }
        Ok(())
    }

    pub fn visual(&self) -> VisualConfig {
        VisualConfig {
            grid: [
                self.visual_extents[0] / self.visual_patch[0],
                self.visual_extents[1] / self.visual_patch[1],
                self.visual_extents[2] / self.visual_patch[2],
            ],
            patch: self.visual_patch,
            channels: self.visual_channels,
            heads: self.visual_heads,
            enc_blocks: self.visual_blocks,
            dec_blocks: self.visual_dec_blocks,
            mlp_hidden: self.visual_mlp_hidden,
        }
    }

    pub fn tabular(&self) -> TabularConfig {
        TabularConfig {
            channels: self.tabular_channels,
            enc_blocks: self.tabular_blocks,
            dec_blocks: self.tabular_dec_blocks,
            mlp_hidden: self.tabular_mlp_hidden,
            share_z: self.tabular_share_z,
            cvs: self.tabular_cvs,
        }
    }

    /// Generator settings with the configured seed.
    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            seed: self.seed,
            ..self.synth.clone()
        }
    }
}

fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("config line {}: expected key = value, got {raw:?}", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn list<T: FromStr>(v: &str) -> Option<Vec<T>> {
    if v.trim().is_empty() {
        return Some(Vec::new());
    }
    v.split(',').map(|s| s.trim().parse().ok()).collect()
}

fn triple<T: FromStr + Copy>(v: &str) -> Option<[T; 3]> {
    let l: Vec<T> = list(v)?;
    (l.len() == 3).then(|| [l[0], l[1], l[2]])
}

fn coefficients(v: &str) -> Option<Vec<(String, f64)>> {
    if v.trim().is_empty() {
        return Some(Vec::new());
    }
    v.split(',')
        .map(|p| {
            let (n, b) = p.split_once(':')?;
            Some((n.trim().to_string(), b.trim().parse().ok()?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_published_schedule() {
        for p in PROFILES {
            let c = RunConfig::profile(p).unwrap();
            assert_eq!((c.mask_ratio_img, c.mask_ratio_tab), (0.5, 0.5));
            assert_eq!(c.lr_finetune, 1e-2);
            assert_eq!(c.folds, 5);
            c.validate().unwrap();
        }
        let paper = RunConfig::profile("paper").unwrap();
        assert_eq!(paper.lr_pretrain, 1e-4);
        assert_eq!((paper.epochs_pretrain, paper.epochs_finetune), (80, 100));
        assert_eq!(paper.visual_spacing, [0.75, 0.75, 1.5]);
        assert_eq!(paper.visual_extents, [480, 480, 240]);
    }

    #[test]
    fn render_parse_round_trip() {
        let mut c = RunConfig::profile("test").unwrap();
        c.set("synth.beta", "ldh:1.5, age:-0.25").unwrap();
        c.set("ablation", "CM").unwrap();
        let back = RunConfig::parse(&c.render()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.fingerprint(), c.fingerprint());
    }

    #[test]
    fn comments_and_overrides() {
        let c = RunConfig::parse("profile = test # small\n# whole line\nseed = 7\nmask_ratio_tab=0.25\n").unwrap();
        assert_eq!((c.seed, c.mask_ratio_tab, c.visual_channels), (7, 0.25, 24));
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let e = RunConfig::parse("learning_rate = 1\n").unwrap_err();
        assert!(matches!(e, Error::Usage(_)));
        let m = e.to_string();
        assert!(m.contains("lr_pretrain") && m.contains("mask_ratio_img"), "{m}");
        assert_eq!(e.exit_code(), 1);
    }

    #[test]
    fn fingerprint_tracks_architecture_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.set("lr_pretrain", "0.5").unwrap();
        b.set("seed", "9").unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.set("tabular.cvs", "false").unwrap();
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn ablation_presets() {
        let mut c = RunConfig::default();
        c.set("ablation", "TS").unwrap();
        assert_eq!((c.modality, c.pretrain_mode, c.cmc_enabled), (Modality::Tabular, PretrainMode::Supervised, false));
        c.set("ablation", "full").unwrap();
        assert_eq!((c.modality, c.pretrain_mode, c.cmc_enabled), (Modality::Both, PretrainMode::Masked, true));
        assert!(c.set("ablation", "XX").is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::parse("visual.patch = 5,5,5\n").is_err());
        assert!(RunConfig::parse("mask_ratio_img = 1.0\n").is_err());
        assert!(RunConfig::parse("endpoint = dfs\n").is_err());
        assert!(RunConfig::parse("seed\n").is_err());
    }
}
