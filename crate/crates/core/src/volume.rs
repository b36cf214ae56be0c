//! CT volumes: RVOL file I/O, spacing resampling, center crop, intensity
//! windowing, 3D patchification and patch masking.
//!
//! Axis convention: extents are `(H, W, D)`; voxel `(y, x, z)` with
//! `y < H`, `x < W`, `z < D` lives at flat index `z * H * W + y * W + x`.
//! Spacing components follow the extent order.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const RVOL_MAGIC: &str = "RVOL1";
const RVOL_DTYPE: &str = "f32le";

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    extents: [usize; 3],
    spacing: [f64; 3],
    voxels: Vec<f32>,
}

impl Volume {
    pub fn new(extents: [usize; 3], spacing: [f64; 3], voxels: Vec<f32>) -> Result<Self> {
        if extents.contains(&0) {
            return Err(Error::Contract(format!("volume extents must be positive: {extents:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Contract(format!("volume spacing must be positive: {spacing:?}")));
        }
        let n = extents.iter().product::<usize>();
        if voxels.len() != n {
            return Err(Error::Dimension {
                op: "volume",
                lhs: extents.to_vec(),
                rhs: vec![voxels.len()],
            });
        }
        Ok(Self { extents, spacing, voxels })
    }

    pub fn filled(extents: [usize; 3], spacing: [f64; 3], value: f32) -> Result<Self> {
        Self::new(extents, spacing, vec![value; extents.iter().product()])
    }

    /// Builds a volume by evaluating `f(y, x, z)` at every voxel.
    pub fn from_fn(extents: [usize; 3], spacing: [f64; 3], mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let [h, w, d] = extents;
        let mut voxels = Vec::with_capacity(h * w * d);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    voxels.push(f(y, x, z));
                }
            }
        }
        Self::new(extents, spacing, voxels)
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    fn index(&self, y: usize, x: usize, z: usize) -> usize {
        let [h, w, _] = self.extents;
        z * h * w + y * w + x
    }

    pub fn get(&self, y: usize, x: usize, z: usize) -> f32 {
        self.voxels[self.index(y, x, z)]
    }
}

#[derive(Serialize, Deserialize)]
struct RvolHeader {
    extents: [usize; 3],
    spacing: [f64; 3],
    dtype: String,
}

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let header = RvolHeader {
        extents: v.extents,
        spacing: v.spacing,
        dtype: RVOL_DTYPE.to_string(),
    };
    let mut out = format!("{RVOL_MAGIC} {}\n", serde_json::to_string(&header).expect("header serializes")).into_bytes();
    out.reserve(v.voxels.len() * 4);
    for x in &v.voxels {
        out.extend(x.to_le_bytes());
    }
    out
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    let fmt = |offset: usize, message: String| Error::Format { offset, message };
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| fmt(0, "missing RVOL header terminator".into()))?;
    let line = std::str::from_utf8(&bytes[..nl]).map_err(|_| fmt(0, "RVOL header is not UTF-8".into()))?;
    let json = line
        .strip_prefix(RVOL_MAGIC)
        .and_then(|r| r.strip_prefix(' '))
        .ok_or_else(|| fmt(0, format!("bad magic, expected {RVOL_MAGIC}")))?;
    let header: RvolHeader =
        serde_json::from_str(json).map_err(|e| fmt(RVOL_MAGIC.len() + 1, format!("bad RVOL header: {e}")))?;
    if header.dtype != RVOL_DTYPE {
        return Err(fmt(RVOL_MAGIC.len() + 1, format!("unsupported dtype {:?}", header.dtype)));
    }
    let n: usize = header.extents.iter().product();
    let payload = &bytes[nl + 1..];
    if payload.len() < n * 4 {
        return Err(fmt(
            bytes.len(),
            format!("truncated payload: {} voxels declared, {} bytes present", n, payload.len()),
        ));
    }
    if payload.len() > n * 4 {
        return Err(fmt(nl + 1 + n * 4, "trailing bytes after voxel payload".into()));
    }
    let voxels = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Volume::new(header.extents, header.spacing, voxels).map_err(|e| fmt(RVOL_MAGIC.len() + 1, e.to_string()))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes)
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    fs::write(path, encode_volume(v)).map_err(|e| Error::io(path, e))
}

/// Per-axis sampling table: for every output index, the two source indices
/// and the weight of the second.
fn axis_taps(n_in: usize, s_in: f64, n_out: usize, s_out: f64) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|j| {
            let u = (j as f64 * s_out / s_in).clamp(0.0, (n_in - 1) as f64);
            let i0 = u.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, u - i0 as f64)
        })
        .collect()
}

/// Trilinear resampling to `target_spacing` with edge clamping.
///
/// Voxel 0 keeps its physical position; output voxel `j` samples source
/// coordinate `j * s_out / s_in` along each axis.
pub fn resample(v: &Volume, target_spacing: [f64; 3]) -> Result<Volume> {
    let mut out_ext = [0usize; 3];
    for a in 0..3 {
        if !(target_spacing[a] > 0.0) {
            return Err(Error::Contract(format!("target spacing must be positive: {target_spacing:?}")));
        }
        out_ext[a] = ((v.extents[a] as f64 * v.spacing[a] / target_spacing[a]).round() as usize).max(1);
    }
    if out_ext == v.extents && target_spacing == v.spacing {
        return Ok(v.clone());
    }
    let ty = axis_taps(v.extents[0], v.spacing[0], out_ext[0], target_spacing[0]);
    let tx = axis_taps(v.extents[1], v.spacing[1], out_ext[1], target_spacing[1]);
    let tz = axis_taps(v.extents[2], v.spacing[2], out_ext[2], target_spacing[2]);
    let lerp = |a: f64, b: f64, f: f64| if f == 0.0 { a } else { a + (b - a) * f };
    Volume::from_fn(out_ext, target_spacing, |y, x, z| {
        let (y0, y1, fy) = ty[y];
        let (x0, x1, fx) = tx[x];
        let (z0, z1, fz) = tz[z];
        let g = |yy, xx, zz| v.get(yy, xx, zz) as f64;
        let c00 = lerp(g(y0, x0, z0), g(y0, x1, z0), fx);
        let c01 = lerp(g(y0, x0, z1), g(y0, x1, z1), fx);
        let c10 = lerp(g(y1, x0, z0), g(y1, x1, z0), fx);
        let c11 = lerp(g(y1, x0, z1), g(y1, x1, z1), fx);
        let c0 = lerp(c00, c10, fy);
        let c1 = lerp(c01, c11, fy);
        lerp(c0, c1, fz) as f32
    })
}

/// Center crop, or symmetric zero padding, to `target` extents.
pub fn center_crop_or_pad(v: &Volume, target: [usize; 3]) -> Result<Volume> {
    if target.contains(&0) {
        return Err(Error::Contract(format!("target extents must be positive: {target:?}")));
    }
    if target == v.extents {
        return Ok(v.clone());
    }
    // Signed offset of output voxel 0 in source coordinates.
    let off: Vec<isize> = (0..3).map(|a| (v.extents[a] as isize - target[a] as isize).div_euclid(2)).collect();
    Volume::from_fn(target, v.spacing, |y, x, z| {
        let sy = y as isize + off[0];
        let sx = x as isize + off[1];
        let sz = z as isize + off[2];
        let inside = |s: isize, n: usize| s >= 0 && (s as usize) < n;
        if inside(sy, v.extents[0]) && inside(sx, v.extents[1]) && inside(sz, v.extents[2]) {
            v.get(sy as usize, sx as usize, sz as usize)
        } else {
            0.0
        }
    })
}

/// Resample to `target_spacing`, then center-crop or pad to `target_extents`.
pub fn preprocess(v: &Volume, target_spacing: [f64; 3], target_extents: [usize; 3]) -> Result<Volume> {
    let r = resample(v, target_spacing)?;
    center_crop_or_pad(&r, target_extents)
}

pub const HU_MIN: f64 = -1000.0;
pub const HU_MAX: f64 = 400.0;

/// Clamps Hounsfield units to `[HU_MIN, HU_MAX]` and maps them onto `[-1, 1]`.
pub fn window_intensities(v: &Volume) -> Volume {
    let voxels = v
        .voxels
        .iter()
        .map(|&x| {
            let c = (x as f64).clamp(HU_MIN, HU_MAX);
            (2.0 * (c - HU_MIN) / (HU_MAX - HU_MIN) - 1.0) as f32
        })
        .collect();
    Volume {
        voxels,
        ..v.clone()
    }
}

/// Position of a token in the patch grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenCoord {
    /// `iy * w + ix`, shared by all tokens of one spatial column.
    pub slice: usize,
    /// Depth index `iz`, shared by all tokens of one slice.
    pub depth: usize,
}

/// Non-overlapping 3D patches in token order.
///
/// Token `(iy * w + ix) * d + iz` holds the patch at grid cell `(iy, ix, iz)`;
/// inside a patch, element `(dz * p1 + dy) * p2 + dx` is voxel offset
/// `(dy, dx, dz)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub grid: [usize; 3],
    pub patch: [usize; 3],
    pub patches: Tensor,
}

impl PatchGrid {
    pub fn n_tokens(&self) -> usize {
        self.grid.iter().product()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch.iter().product()
    }

    pub fn coords(&self) -> Vec<TokenCoord> {
        grid_coords(self.grid)
    }
}

pub fn grid_coords(grid: [usize; 3]) -> Vec<TokenCoord> {
    let [h, w, d] = grid;
    (0..h * w * d)
        .map(|t| TokenCoord {
            slice: t / d,
            depth: t % d,
        })
        .collect()
}

pub fn patchify(v: &Volume, patch: [usize; 3]) -> Result<PatchGrid> {
    let [hh, ww, dd] = v.extents;
    let [p1, p2, p3] = patch;
    if p1 == 0 || p2 == 0 || p3 == 0 || p1 > hh || p2 > ww || p3 > dd {
        return Err(Error::Config(format!(
            "patch {patch:?} does not fit volume extents {:?}",
            v.extents
        )));
    }
    let grid = [hh / p1, ww / p2, dd / p3];
    let [h, w, d] = grid;
    let c = p1 * p2 * p3;
    let mut data = Vec::with_capacity(h * w * d * c);
    for iy in 0..h {
        for ix in 0..w {
            for iz in 0..d {
                for dz in 0..p3 {
                    for dy in 0..p1 {
                        for dx in 0..p2 {
                            data.push(v.get(iy * p1 + dy, ix * p2 + dx, iz * p3 + dz) as f64);
                        }
                    }
                }
            }
        }
    }
    Ok(PatchGrid {
        grid,
        patch,
        patches: Tensor::matrix(h * w * d, c, data),
    })
}

/// Inverse of [`patchify`] on the retained region; discarded border voxels
/// come back as zero.
pub fn unpatchify(g: &PatchGrid, extents: [usize; 3], spacing: [f64; 3]) -> Result<Volume> {
    let [h, w, d] = g.grid;
    let [p1, p2, p3] = g.patch;
    let mut vol = Volume::filled(extents, spacing, 0.0)?;
    for iy in 0..h {
        for ix in 0..w {
            for iz in 0..d {
                let row = g.patches.row((iy * w + ix) * d + iz);
                for dz in 0..p3 {
                    for dy in 0..p1 {
                        for dx in 0..p2 {
                            let idx = vol.index(iy * p1 + dy, ix * p2 + dx, iz * p3 + dz);
                            vol.voxels[idx] = row[(dz * p1 + dy) * p2 + dx] as f32;
                        }
                    }
                }
            }
        }
    }
    Ok(vol)
}

/// Disjoint visible/masked token index sets, each ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPartition {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
}

impl MaskPartition {
    pub fn none(n: usize) -> Self {
        Self {
            visible: (0..n).collect(),
            masked: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.visible.len() + self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// True when the two sets are disjoint and together cover `0..n`.
    pub fn is_partition_of(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        for &i in self.visible.iter().chain(&self.masked) {
            if i >= n || seen[i] {
                return false;
            }
            seen[i] = true;
        }
        seen.into_iter().all(|s| s)
    }
}

/// `floor(n * ratio)`, tolerant of representation error in `ratio`.
pub(crate) fn mask_count(n: usize, ratio: f64) -> usize {
    ((n as f64 * ratio) + 1e-9).floor() as usize
}

/// Uniformly masks `floor(n * k)` of `n` tokens, deterministically per seed.
/// At least one token stays visible whenever `k < 1`.
pub fn sample_patch_mask(n_tokens: usize, k: f64, seed: u64) -> Result<MaskPartition> {
    if !(0.0..=1.0).contains(&k) {
        return Err(Error::Contract(format!("mask ratio {k} outside [0, 1]")));
    }
    let mut m = mask_count(n_tokens, k).min(n_tokens);
    if k < 1.0 && n_tokens > 0 {
        m = m.min(n_tokens - 1);
    }
    Ok(sample_partition(n_tokens, m, seed))
}

pub(crate) fn sample_partition(n: usize, m: usize, seed: u64) -> MaskPartition {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_masked = vec![false; n];
    for i in sample(&mut rng, n, m) {
        is_masked[i] = true;
    }
    let (masked, visible): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| is_masked[i]);
    MaskPartition { visible, masked }
}
