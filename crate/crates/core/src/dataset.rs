//! Dataset generation, on-disk layout, splitting and normalization.
//!
//! A dataset directory holds `manifest.json` plus one `scene_NNNNN.fdt` per
//! simulated scene. A scene file is a named-tensor container with `rho0`
//! followed by `tau_i`, `ux_i`, `uy_i` for each snapshot `i`, all float64.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ddpm::{build_condition, ConditionTensor};
use crate::error::IoError;
use crate::fdt::{decode_named, encode_named, read_bytes, write_bytes, AnyTensor};
use crate::fluid::{simulate, Grid, SimParams};
use crate::rng::{derive_seed, GaussianRng};
use crate::tensor::{Real, Tensor};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
/// Seed stream reserved for the train/test permutation.
const SPLIT_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitAssignment {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitAssignment {
    pub fn of(&self, scene: usize) -> Option<Split> {
        if self.train.binary_search(&scene).is_ok() {
            Some(Split::Train)
        } else if self.test.binary_search(&scene).is_ok() {
            Some(Split::Test)
        } else {
            None
        }
    }

    pub fn scenes(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// Disjoint and covering `0..n` exactly.
    pub fn is_partition_of(&self, n: usize) -> bool {
        let mut all: Vec<usize> = self.train.iter().chain(&self.test).copied().collect();
        all.sort_unstable();
        all == (0..n).collect::<Vec<_>>()
    }
}

/// Random whole-scene split: the first `floor(n * train / (train + test))`
/// entries of a seeded permutation go to training. Lists are returned sorted.
pub fn split_scenes(n_scenes: usize, ratio: (u32, u32), seed: u64) -> Result<SplitAssignment, IoError> {
    if n_scenes < 2 {
        return Err(IoError::InvalidSplit(format!("need at least 2 scenes, got {n_scenes}")));
    }
    let (tr, te) = ratio;
    if tr == 0 || te == 0 {
        return Err(IoError::InvalidSplit(format!("ratio parts must be positive, got {tr}:{te}")));
    }
    let n_train = (n_scenes as u128 * tr as u128 / (tr as u128 + te as u128)) as usize;
    let perm = GaussianRng::new(seed).permutation(n_scenes);
    let mut train = perm[..n_train].to_vec();
    let mut test = perm[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitAssignment { train, test })
}

/// Per-channel normalization for (u_x, u_y).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStats {
    /// largest |value| per channel over the training scenes
    pub max_abs: [f64; 2],
    /// divisor actually applied: `max_abs` rounded up to a power of two
    pub scale: [f64; 2],
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Smallest power of two `>= max_abs`, or 1 when `max_abs` is zero or not finite.
pub fn scale_for(max_abs: f64) -> Option<f64> {
    if !(max_abs > 0.0) || !max_abs.is_finite() {
        return None;
    }
    let mut s = 2f64.powi(max_abs.log2().ceil() as i32);
    while s < max_abs {
        s *= 2.0;
    }
    while s / 2.0 >= max_abs {
        s /= 2.0;
    }
    Some(s)
}

impl NormStats {
    pub fn from_max_abs(max_abs: [f64; 2]) -> Self {
        let mut warnings = Vec::new();
        let scale = [0, 1].map(|c| {
            scale_for(max_abs[c]).unwrap_or_else(|| {
                let msg = format!("channel {c} has max-abs {}; scale forced to 1", max_abs[c]);
                log::warn!("{msg}");
                warnings.push(msg);
                1.0
            })
        });
        Self {
            max_abs,
            scale,
            warnings,
        }
    }

    pub fn identity() -> Self {
        Self {
            max_abs: [1.0, 1.0],
            scale: [1.0, 1.0],
            warnings: Vec::new(),
        }
    }
}

pub fn normalize(field: &Grid, scale: f64) -> Grid {
    Grid::from_fn(field.ny(), field.nx(), |j, i| field.get(j, i) / scale)
}

pub fn denormalize(field: &Grid, scale: f64) -> Grid {
    Grid::from_fn(field.ny(), field.nx(), |j, i| field.get(j, i) * scale)
}

/// Stacks normalized (u_x, u_y) into a `[2, H, W]` tensor.
pub fn velocity_tensor(ux: &Grid, uy: &Grid, stats: &NormStats) -> Tensor<f64> {
    let (h, w) = (ux.ny(), ux.nx());
    let mut data = Vec::with_capacity(2 * h * w);
    data.extend(ux.data().iter().map(|v| v / stats.scale[0]));
    data.extend(uy.data().iter().map(|v| v / stats.scale[1]));
    Tensor::new(vec![2, h, w], data).expect("velocity shape")
}

/// Inverse of [`velocity_tensor`].
pub fn velocity_grids<E: Real>(t: &Tensor<E>, stats: &NormStats) -> Result<(Grid, Grid), IoError> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 2 {
        return Err(IoError::Malformed(format!("velocity tensor must be [2, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let ch = |c: usize| {
        let vals = t.data()[c * plane..(c + 1) * plane].iter().map(|v| v.as_f64() * stats.scale[c]).collect();
        Grid::from_vec(h, w, vals).expect("plane size")
    };
    Ok((ch(0), ch(1)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSnapshot {
    pub tau: f64,
    pub ux: Grid,
    pub uy: Grid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub index: usize,
    pub rho0: Grid,
    pub snapshots: Vec<SceneSnapshot>,
}

impl SceneRecord {
    pub fn encode(&self) -> Vec<u8> {
        let mut owned: Vec<(String, Tensor<f64>)> = vec![("rho0".into(), self.rho0.to_tensor())];
        for (i, s) in self.snapshots.iter().enumerate() {
            owned.push((format!("tau_{i}"), Tensor::scalar(s.tau)));
            owned.push((format!("ux_{i}"), s.ux.to_tensor()));
            owned.push((format!("uy_{i}"), s.uy.to_tensor()));
        }
        let refs: Vec<(&str, &Tensor<f64>)> = owned.iter().map(|(n, t)| (n.as_str(), t)).collect();
        encode_named(&refs)
    }

    pub fn decode(index: usize, bytes: &[u8]) -> Result<Self, IoError> {
        let entries = decode_named(bytes)?;
        let mut it = entries.into_iter();
        let grid = |name: &str, t: AnyTensor| -> Result<Grid, IoError> {
            let t = t.into_typed::<f64>()?;
            match *t.shape() {
                [h, w] => Ok(Grid::from_vec(h, w, t.into_data()).expect("2-d shape")),
                _ => Err(IoError::Malformed(format!("{name} must be 2-d, got {:?}", t.shape()))),
            }
        };
        let expect = |got: Option<(String, AnyTensor)>, want: &str| -> Result<AnyTensor, IoError> {
            match got {
                Some((n, t)) if n == want => Ok(t),
                Some((n, _)) => Err(IoError::Malformed(format!("expected {want}, found {n}"))),
                None => Err(IoError::Malformed(format!("missing {want}"))),
            }
        };
        let rho0 = grid("rho0", expect(it.next(), "rho0")?)?;
        let mut snapshots = Vec::new();
        while let Some(first) = it.next() {
            let i = snapshots.len();
            let tau = expect(Some(first), &format!("tau_{i}"))?.into_typed::<f64>()?;
            let tau = tau
                .item()
                .ok_or_else(|| IoError::Malformed(format!("tau_{i} must hold one value")))?;
            let ux = grid("ux", expect(it.next(), &format!("ux_{i}"))?)?;
            let uy = grid("uy", expect(it.next(), &format!("uy_{i}"))?)?;
            for g in [&ux, &uy] {
                if (g.ny(), g.nx()) != (rho0.ny(), rho0.nx()) {
                    return Err(IoError::Malformed(format!("snapshot {i} shape differs from rho0")));
                }
            }
            snapshots.push(SceneSnapshot { tau, ux, uy });
        }
        if snapshots.windows(2).any(|w| w[1].tau <= w[0].tau) {
            return Err(IoError::Malformed("snapshot taus are not strictly increasing".into()));
        }
        Ok(Self { index, rho0, snapshots })
    }

    /// Largest |u_x| and |u_y| over all snapshots.
    pub fn max_abs(&self) -> [f64; 2] {
        self.snapshots.iter().fold([0.0, 0.0], |m, s| [m[0].max(s.ux.max_abs()), m[1].max(s.uy.max_abs())])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneEntry {
    pub index: usize,
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    /// (H, W)
    pub grid_size: [usize; 2],
    pub n_scenes: usize,
    pub snapshots_per_scene: usize,
    pub record_every: f64,
    pub total_time: f64,
    pub nu: f64,
    pub eta: f64,
    pub solver_dt: f64,
    pub pressure_tol: f64,
    pub pressure_max_iter: usize,
    pub base_seed: u64,
    /// (train, test)
    pub split_ratio: [u32; 2],
    pub split: SplitAssignment,
    /// computed from the training scenes only
    pub normalization: NormStats,
    pub scenes: Vec<SceneEntry>,
}

impl DatasetManifest {
    pub fn sim_params(&self) -> SimParams {
        SimParams {
            nu: self.nu,
            eta: self.eta,
            dt: self.solver_dt,
            height: self.grid_size[0],
            width: self.grid_size[1],
            total_time: self.total_time,
            record_every: self.record_every,
            pressure_tol: self.pressure_tol,
            pressure_max_iter: self.pressure_max_iter,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

pub fn scene_file_name(index: usize) -> String {
    format!("scene_{index:05}.fdt")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Assignment used for a dataset of `n` scenes; a single scene goes to training.
fn assign(n: usize, ratio: (u32, u32), base_seed: u64) -> Result<SplitAssignment, IoError> {
    if n == 1 {
        return Ok(SplitAssignment {
            train: vec![0],
            test: Vec::new(),
        });
    }
    split_scenes(n, ratio, derive_seed(base_seed, SPLIT_STREAM))
}

/// Simulates `n_scenes` scenes in parallel and writes them plus a manifest to `out_dir`.
///
/// Scene `i` uses seed `derive_seed(base_seed, i)`. Any solver failure aborts
/// the whole run before the manifest is written.
pub fn generate_dataset(
    params: &SimParams,
    n_scenes: usize,
    base_seed: u64,
    ratio: (u32, u32),
    out_dir: &Path,
) -> Result<DatasetManifest, IoError> {
    params
        .validate()
        .map_err(|e| IoError::Manifest(format!("invalid simulation parameters: {e}")))?;
    if n_scenes == 0 {
        return Err(IoError::InvalidSplit("n_scenes must be >= 1".into()));
    }
    let split = assign(n_scenes, ratio, base_seed)?;
    fs::create_dir_all(out_dir).map_err(|source| IoError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;

    let results: Vec<Result<(SceneEntry, [f64; 2]), IoError>> = (0..n_scenes)
        .into_par_iter()
        .map(|i| {
            let traj = simulate(derive_seed(base_seed, i as u64), params)
                .map_err(|source| IoError::Scene { scene: i, source })?;
            let record = SceneRecord {
                index: i,
                rho0: traj.rho0,
                snapshots: traj
                    .snapshots
                    .into_iter()
                    .map(|s| SceneSnapshot {
                        tau: s.tau,
                        ux: s.ux,
                        uy: s.uy,
                    })
                    .collect(),
            };
            let bytes = record.encode();
            let file = scene_file_name(i);
            write_bytes(&out_dir.join(&file), &bytes)?;
            let entry = SceneEntry {
                index: i,
                file,
                sha256: sha256_hex(&bytes),
            };
            Ok((entry, record.max_abs()))
        })
        .collect();

    let mut scenes = Vec::with_capacity(n_scenes);
    let mut max_abs = [0.0f64; 2];
    for (i, r) in results.into_iter().enumerate() {
        let (entry, m) = r?;
        if split.of(i) == Some(Split::Train) {
            max_abs = [max_abs[0].max(m[0]), max_abs[1].max(m[1])];
        }
        scenes.push(entry);
    }

    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        grid_size: [params.height, params.width],
        n_scenes,
        snapshots_per_scene: params.snapshot_count(),
        record_every: params.record_every,
        total_time: params.total_time,
        nu: params.nu,
        eta: params.eta,
        solver_dt: params.dt,
        pressure_tol: params.pressure_tol,
        pressure_max_iter: params.pressure_max_iter,
        base_seed,
        split_ratio: [ratio.0, ratio.1],
        split,
        normalization: NormStats::from_max_abs(max_abs),
        scenes,
    };
    write_bytes(&out_dir.join(MANIFEST_FILE), manifest.to_json().as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest, IoError> {
    let bytes = read_bytes(&dir.join(MANIFEST_FILE))?;
    let m: DatasetManifest = serde_json::from_slice(&bytes)?;
    if m.format_version != FORMAT_VERSION {
        return Err(IoError::VersionMismatch {
            found: m.format_version,
            expected: FORMAT_VERSION,
        });
    }
    if m.scenes.len() != m.n_scenes || m.scenes.iter().enumerate().any(|(i, s)| s.index != i) {
        return Err(IoError::Manifest("scene list does not enumerate 0..n_scenes".into()));
    }
    if !m.split.is_partition_of(m.n_scenes) {
        return Err(IoError::Manifest("split is not a partition of the scenes".into()));
    }
    Ok(m)
}

/// A dataset whose files all matched their recorded hashes.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub scenes: Vec<SceneRecord>,
}

/// Reads the manifest and every scene, checking hashes, shapes and snapshot counts.
pub fn load_dataset(dir: &Path) -> Result<Dataset, IoError> {
    let manifest = read_manifest(dir)?;
    let [h, w] = manifest.grid_size;
    let scenes = manifest
        .scenes
        .par_iter()
        .map(|entry| {
            let bytes = read_bytes(&dir.join(&entry.file))?;
            let found = sha256_hex(&bytes);
            if found != entry.sha256 {
                return Err(IoError::HashMismatch {
                    file: entry.file.clone(),
                    expected: entry.sha256.clone(),
                    found,
                });
            }
            let rec = SceneRecord::decode(entry.index, &bytes)?;
            if (rec.rho0.ny(), rec.rho0.nx()) != (h, w) {
                return Err(IoError::Manifest(format!("{}: grid differs from manifest", entry.file)));
            }
            if rec.snapshots.len() != manifest.snapshots_per_scene {
                return Err(IoError::Manifest(format!(
                    "{}: {} snapshots, manifest says {}",
                    entry.file,
                    rec.snapshots.len(),
                    manifest.snapshots_per_scene
                )));
            }
            Ok(rec)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset {
        root: dir.to_path_buf(),
        manifest,
        scenes,
    })
}

/// Full consistency check; also confirms the stored normalization is reproducible
/// from the training scenes alone.
pub fn verify_dataset(dir: &Path) -> Result<DatasetManifest, IoError> {
    let ds = load_dataset(dir)?;
    let recomputed = NormStats::from_max_abs(ds.max_abs(Split::Train));
    if recomputed.max_abs != ds.manifest.normalization.max_abs || recomputed.scale != ds.manifest.normalization.scale {
        return Err(IoError::Manifest(format!(
            "normalization {:?} does not match training scenes {:?}",
            ds.manifest.normalization.max_abs, recomputed.max_abs
        )));
    }
    Ok(ds.manifest)
}

/// One supervised example: normalized velocity at `tau` and its condition.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub scene: usize,
    pub tau: f64,
    pub x0: Tensor<f64>,
    pub y: ConditionTensor,
}

impl Dataset {
    pub fn scene_indices(&self, split: Split) -> &[usize] {
        self.manifest.split.scenes(split)
    }

    pub fn max_abs(&self, split: Split) -> [f64; 2] {
        self.scene_indices(split).iter().fold([0.0, 0.0], |m, &i| {
            let s = self.scenes[i].max_abs();
            [m[0].max(s[0]), m[1].max(s[1])]
        })
    }

    /// All (scene, snapshot) pairs of `split`, in scene then time order.
    pub fn pairs(&self, split: Split) -> Result<Vec<TrainingPair>, IoError> {
        let stats = &self.manifest.normalization;
        let mut out = Vec::new();
        for &i in self.scene_indices(split) {
            let rec = &self.scenes[i];
            for s in &rec.snapshots {
                let y = build_condition(&rec.rho0, s.tau, self.manifest.total_time)
                    .map_err(|e| IoError::Manifest(format!("scene {i}: {e}")))?;
                out.push(TrainingPair {
                    scene: i,
                    tau: s.tau,
                    x0: velocity_tensor(&s.ux, &s.uy, stats),
                    y,
                });
            }
        }
        Ok(out)
    }
}
