//! Feature container: in-memory data model, the `PGCD` binary format, the
//! synthetic fine-grained generator and two-view augmentation.
//!
//! Layout of a `PGCD` file (all little-endian):
//!
//! ```text
//! "PGCD" | u32 version=1 | u32 sample_count | u32 C | u32 d | u32 N_p | u8 flags
//!   | 7 reserved zero bytes (header is 32 bytes)
//! per sample:
//!   u64 id | i32 label (-1 = none) | f32[d] cls_fixed | f32[N_p*d] patches_fixed
//!   | f32[N_p*d] patches_learnable (flags bit0) | f32[N_p] attention
//! ```
//!
//! The labeled/unlabeled split travels in the sidecar manifest
//! (`<file>.manifest.csv`, lines `id,label,is_labeled`). Without a manifest,
//! every sample carrying a label is treated as labeled.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"PGCD";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 32;
const RESERVED_LEN: usize = HEADER_LEN - (4 + 4 * 5 + 1);
const FLAG_HAS_LEARNABLE: u8 = 1;

/// One image's worth of features.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    /// Ground-truth class, if known. Whether the model may see it is decided
    /// by [`DatasetMeta::labeled_ids`].
    pub label: Option<usize>,
    pub cls_fixed: Array1<f32>,
    /// `N_p x d`, features before the trainable block.
    pub patches_fixed: Array2<f32>,
    /// `N_p x d`, features after the trainable block.
    pub patches_learnable: Array2<f32>,
    /// Class-to-patch attention, length `N_p`, non-negative.
    pub attention: Array1<f32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub num_classes: usize,
    pub old_classes: BTreeSet<usize>,
    pub labeled_ids: BTreeSet<u64>,
    pub dim: usize,
    pub num_patches: usize,
}

impl DatasetMeta {
    pub fn is_old(&self, class: usize) -> bool {
        self.old_classes.contains(&class)
    }

    pub fn new_classes(&self) -> Vec<usize> {
        (0..self.num_classes).filter(|c| !self.old_classes.contains(c)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDataset {
    pub meta: DatasetMeta,
    pub samples: Vec<Sample>,
    /// Whether `patches_learnable` is written to disk. When false the loader
    /// fills it with a copy of `patches_fixed`.
    pub has_learnable: bool,
}

impl FeatureDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_labeled(&self, idx: usize) -> bool {
        self.meta.labeled_ids.contains(&self.samples[idx].id)
    }

    /// Labels visible to the learner: `Some` only for labeled-split samples.
    pub fn visible_labels(&self) -> Vec<Option<usize>> {
        (0..self.len()).map(|i| if self.is_labeled(i) { self.samples[i].label } else { None }).collect()
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_labeled(i)).collect()
    }

    pub fn unlabeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.is_labeled(i)).collect()
    }

    /// `n x d` matrix of raw CLS features.
    pub fn cls_matrix(&self) -> Array2<f32> {
        let mut out = Array2::zeros((self.len(), self.meta.dim));
        for (mut row, s) in out.rows_mut().into_iter().zip(&self.samples) {
            row.assign(&s.cls_fixed);
        }
        out
    }

    /// Checks every invariant of the data model.
    pub fn validate(&self) -> Result<()> {
        let m = &self.meta;
        if m.old_classes.len() > m.num_classes {
            return Err(Error::Invalid(format!("{} old classes exceed C = {}", m.old_classes.len(), m.num_classes)));
        }
        if let Some(&c) = m.old_classes.iter().find(|&&c| c >= m.num_classes) {
            return Err(Error::Invalid(format!("old class {c} outside [0, {})", m.num_classes)));
        }
        let mut ids = BTreeSet::new();
        for s in &self.samples {
            if !ids.insert(s.id) {
                return Err(Error::Invalid(format!("duplicate sample id {}", s.id)));
            }
            if s.cls_fixed.len() != m.dim
                || s.patches_fixed.dim() != (m.num_patches, m.dim)
                || s.patches_learnable.dim() != (m.num_patches, m.dim)
                || s.attention.len() != m.num_patches
            {
                return Err(Error::Shape(format!("sample {} does not match d={}, N_p={}", s.id, m.dim, m.num_patches)));
            }
            if let Some(l) = s.label {
                if l >= m.num_classes {
                    return Err(Error::Invalid(format!("sample {} label {l} outside [0, {})", s.id, m.num_classes)));
                }
            }
            check_finite(s.id, "cls_fixed", s.cls_fixed.iter())?;
            check_finite(s.id, "patches_fixed", s.patches_fixed.iter())?;
            check_finite(s.id, "patches_learnable", s.patches_learnable.iter())?;
            check_finite(s.id, "attention", s.attention.iter())?;
            if s.attention.iter().any(|&a| a < 0.0) {
                return Err(Error::Invalid(format!("sample {} has negative attention", s.id)));
            }
        }
        for id in &m.labeled_ids {
            let s = self
                .samples
                .iter()
                .find(|s| s.id == *id)
                .ok_or_else(|| Error::Invalid(format!("labeled id {id} not in dataset")))?;
            match s.label {
                Some(l) if m.old_classes.contains(&l) => {}
                Some(l) => return Err(Error::Invalid(format!("labeled sample {id} has new-class label {l}"))),
                None => return Err(Error::Invalid(format!("labeled sample {id} carries no label"))),
            }
        }
        Ok(())
    }
}

fn check_finite<'a>(id: u64, field: &'static str, mut it: impl Iterator<Item = &'a f32>) -> Result<()> {
    if it.all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { sample_id: id, field })
    }
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.csv");
    PathBuf::from(s)
}

fn header_u32(field: &'static str, value: usize) -> Result<u32> {
    u32::try_from(value).map_err(|_| Error::HeaderOverflow { field, value })
}

/// Serializes `dataset` into the container byte layout.
pub fn encode_dataset(dataset: &FeatureDataset) -> Result<Vec<u8>> {
    let m = &dataset.meta;
    let n = header_u32("sample_count", dataset.len())?;
    let c = header_u32("C", m.num_classes)?;
    let d = header_u32("d", m.dim)?;
    let np = header_u32("N_p", m.num_patches)?;
    let floats_per = m.dim + m.num_patches * m.dim * (1 + dataset.has_learnable as usize) + m.num_patches;
    let mut buf = Vec::with_capacity(HEADER_LEN + dataset.len() * (12 + 4 * floats_per));
    buf.extend_from_slice(&MAGIC);
    for v in [FORMAT_VERSION, n, c, d, np] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.push(if dataset.has_learnable { FLAG_HAS_LEARNABLE } else { 0 });
    buf.extend_from_slice(&[0u8; RESERVED_LEN]);
    let put = |buf: &mut Vec<u8>, xs: &mut dyn Iterator<Item = &f32>| {
        for x in xs {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    };
    for s in &dataset.samples {
        buf.extend_from_slice(&s.id.to_le_bytes());
        let label: i32 = match s.label {
            Some(l) => i32::try_from(l).map_err(|_| Error::HeaderOverflow { field: "label", value: l })?,
            None => -1,
        };
        buf.extend_from_slice(&label.to_le_bytes());
        put(&mut buf, &mut s.cls_fixed.iter());
        put(&mut buf, &mut s.patches_fixed.iter());
        if dataset.has_learnable {
            put(&mut buf, &mut s.patches_learnable.iter());
        }
        put(&mut buf, &mut s.attention.iter());
    }
    Ok(buf)
}

/// Writes the container and its sidecar manifest.
pub fn save_dataset(dataset: &FeatureDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    dataset.validate()?;
    let bytes = encode_dataset(dataset)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let mpath = manifest_path(path);
    let mut text = String::from("id,label,is_labeled\n");
    for s in &dataset.samples {
        let label = s.label.map(|l| l as i64).unwrap_or(-1);
        let lab = dataset.meta.labeled_ids.contains(&s.id) as u8;
        text.push_str(&format!("{},{},{}\n", s.id, label, lab));
    }
    let mut f = fs::File::create(&mpath).map_err(|e| Error::io(&mpath, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(&mpath, e))?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn floats(&mut self, n: usize) -> Option<Vec<f32>> {
        let raw = self.take(n.checked_mul(4)?)?;
        Some(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect())
    }
}

/// Parses container bytes. `split` gives `(labeled ids)`; when `None`, every
/// labeled-looking sample (label != -1) is placed in the labeled split.
pub fn decode_dataset(bytes: &[u8], split: Option<BTreeSet<u64>>) -> Result<FeatureDataset> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = match cur.take(4) {
        Some(b) => b.try_into().unwrap(),
        None => return Err(Error::Invalid("file shorter than the magic number".into())),
    };
    if magic != MAGIC {
        return Err(Error::BadMagic { expected: MAGIC, found: magic });
    }
    let short_header = || Error::Invalid("truncated header".into());
    let version = cur.u32().ok_or_else(short_header)?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch { expected: FORMAT_VERSION, found: version });
    }
    let n = cur.u32().ok_or_else(short_header)? as usize;
    let num_classes = cur.u32().ok_or_else(short_header)? as usize;
    let dim = cur.u32().ok_or_else(short_header)? as usize;
    let num_patches = cur.u32().ok_or_else(short_header)? as usize;
    let flags = cur.take(1).ok_or_else(short_header)?[0];
    let has_learnable = flags & FLAG_HAS_LEARNABLE != 0;
    cur.take(RESERVED_LEN).ok_or_else(short_header)?;

    let mut samples = Vec::with_capacity(n.min(1 << 20));
    for record in 0..n {
        let trunc = || Error::Truncated { record };
        let id = u64::from_le_bytes(cur.take(8).ok_or_else(trunc)?.try_into().unwrap());
        let raw_label = i32::from_le_bytes(cur.take(4).ok_or_else(trunc)?.try_into().unwrap());
        let cls = cur.floats(dim).ok_or_else(trunc)?;
        let pf = cur.floats(num_patches * dim).ok_or_else(trunc)?;
        let pl = if has_learnable { Some(cur.floats(num_patches * dim).ok_or_else(trunc)?) } else { None };
        let attn = cur.floats(num_patches).ok_or_else(trunc)?;
        let label = match raw_label {
            -1 => None,
            l if l >= 0 => Some(l as usize),
            l => return Err(Error::Invalid(format!("sample {id} has label {l}"))),
        };
        let patches_fixed = Array2::from_shape_vec((num_patches, dim), pf).expect("sized");
        let patches_learnable = match pl {
            Some(v) => Array2::from_shape_vec((num_patches, dim), v).expect("sized"),
            None => patches_fixed.clone(),
        };
        samples.push(Sample {
            id,
            label,
            cls_fixed: Array1::from(cls),
            patches_fixed,
            patches_learnable,
            attention: Array1::from(attn),
        });
    }
    if cur.pos != bytes.len() {
        return Err(Error::Invalid(format!("{} trailing bytes after last record", bytes.len() - cur.pos)));
    }
    let labeled_ids = match split {
        Some(s) => s,
        None => samples.iter().filter(|s| s.label.is_some()).map(|s| s.id).collect(),
    };
    let old_classes = samples.iter().filter(|s| labeled_ids.contains(&s.id)).filter_map(|s| s.label).collect();
    let ds = FeatureDataset {
        meta: DatasetMeta { num_classes, old_classes, labeled_ids, dim, num_patches },
        samples,
        has_learnable,
    };
    ds.validate()?;
    Ok(ds)
}

fn read_manifest(path: &Path) -> Result<Option<BTreeSet<u64>>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut labeled = BTreeSet::new();
    for (lineno, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || Error::Invalid(format!("{}: malformed manifest line {}", path.display(), lineno + 1));
        if fields.len() != 3 {
            return Err(bad());
        }
        let id: u64 = fields[0].parse().map_err(|_| bad())?;
        match fields[2] {
            "1" => {
                labeled.insert(id);
            }
            "0" => {}
            _ => return Err(bad()),
        }
    }
    Ok(Some(labeled))
}

/// Loads a container, using its sidecar manifest for the labeled split when present.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<FeatureDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let split = read_manifest(&manifest_path(path))?;
    decode_dataset(&bytes, split)
}

/// Parameters of the synthetic fine-grained benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub old_class_count: usize,
    /// Parts per class.
    pub parts_per_class: usize,
    pub dim: usize,
    pub num_patches: usize,
    pub foreground_patch_count: usize,
    /// Minimum pairwise distance between class centers.
    pub class_separation: f64,
    /// Minimum pairwise distance between part centers of one class.
    pub part_separation: f64,
    /// Per-patch isotropic noise around its part center.
    pub noise_sigma: f64,
    /// Spread of the shared background Gaussian (centered at the origin).
    pub background_sigma: f64,
    /// Norm of the class-specific offset added to the CLS feature.
    pub cls_offset_norm: f64,
    pub samples_per_class: usize,
    /// Shift each class's part centers so they average to the class center.
    pub center_parts: bool,
    /// Spread foreground patches evenly over the parts instead of sampling them.
    pub balanced_parts: bool,
    /// Per-sample offset added to every foreground patch, drawn in a fixed
    /// random subspace of dimension `nuisance_dim` (pose, colour of the object).
    pub nuisance_sigma: f64,
    pub nuisance_dim: usize,
    /// Per-sample isotropic noise added to the CLS feature only, making the
    /// holistic summary lossier than the patches it summarizes.
    pub cls_noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 20,
            old_class_count: 10,
            parts_per_class: 4,
            dim: 16,
            num_patches: 16,
            foreground_patch_count: 8,
            class_separation: 1.0,
            part_separation: 4.0,
            noise_sigma: 0.5,
            background_sigma: 1.0,
            cls_offset_norm: 0.5,
            samples_per_class: 40,
            center_parts: false,
            balanced_parts: false,
            nuisance_sigma: 0.0,
            nuisance_dim: 0,
            cls_noise_sigma: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// The 20-class fine-grained benchmark behind the end-to-end checks: the
    /// CLS summary is noisy, every object carries a strong per-sample pose
    /// offset, and classes differ mostly in where their parts sit.
    pub fn benchmark(seed: u64) -> Self {
        SynthConfig {
            class_separation: 1.5,
            background_sigma: 0.3,
            center_parts: true,
            balanced_parts: true,
            nuisance_sigma: 2.0,
            nuisance_dim: 4,
            cls_noise_sigma: 0.3,
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.parts_per_class < 1 {
            return bad("parts_per_class must be >= 1");
        }
        if self.num_classes < 1 || self.old_class_count > self.num_classes {
            return bad("need 1 <= C and old_class_count <= C");
        }
        if self.dim < 1 || self.num_patches < 1 {
            return bad("dim and num_patches must be positive");
        }
        if self.foreground_patch_count < 1 || self.foreground_patch_count > self.num_patches {
            return bad("foreground_patch_count must lie in [1, N_p]");
        }
        if !(self.class_separation > 0.0 && self.part_separation > 0.0) {
            return bad("separations must be > 0");
        }
        if !(self.noise_sigma >= 0.0 && self.background_sigma >= 0.0 && self.cls_offset_norm >= 0.0) {
            return bad("noise scales must be >= 0");
        }
        if !(self.cls_noise_sigma >= 0.0) {
            return bad("cls_noise_sigma must be >= 0");
        }
        if !(self.nuisance_sigma >= 0.0) || self.nuisance_dim > self.dim {
            return bad("nuisance_sigma must be >= 0 and nuisance_dim <= dim");
        }
        Ok(())
    }
}

/// Generator ground truth kept alongside a synthetic dataset.
#[derive(Clone, Debug)]
pub struct SynthTruth {
    /// `C x d` class centers.
    pub class_centers: Array2<f64>,
    /// Per class, `K x d` part centers.
    pub part_centers: Vec<Array2<f64>>,
    /// Per sample, per patch: the generating part, or `None` for background.
    pub patch_parts: Vec<Vec<Option<usize>>>,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

/// Draws `count` points at radius `radius` around `center`, pairwise at least `min_dist` apart.
/// `n` orthonormal rows in `d` dimensions (Gram-Schmidt on Gaussian draws).
fn orthonormal_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((n, d));
    let mut i = 0;
    while i < n {
        let mut v = Array1::from_vec(gaussian_vec(rng, d));
        for r in 0..i {
            let proj = out.row(r).dot(&v);
            v.scaled_add(-proj, &out.row(r));
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-8 {
            out.row_mut(i).assign(&(v / norm));
            i += 1;
        }
    }
    out
}

fn separated_points(
    rng: &mut ChaCha8Rng,
    center: &[f64],
    count: usize,
    radius: f64,
    min_dist: f64,
    what: &str,
) -> Result<Array2<f64>> {
    const MAX_TRIES: usize = 2000;
    let d = center.len();
    let mut pts: Vec<Vec<f64>> = Vec::with_capacity(count);
    'outer: while pts.len() < count {
        for _ in 0..MAX_TRIES {
            let mut g = gaussian_vec(rng, d);
            let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
            for (x, c) in g.iter_mut().zip(center) {
                *x = c + *x / norm * radius;
            }
            let ok =
                pts.iter().all(|p| p.iter().zip(&g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() >= min_dist);
            if ok {
                pts.push(g);
                continue 'outer;
            }
        }
        return Err(Error::Infeasible(format!(
            "cannot place {count} {what} at mutual distance >= {min_dist} in dimension {d}"
        )));
    }
    Ok(Array2::from_shape_vec((count, d), pts.into_iter().flatten().collect()).expect("sized"))
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<FeatureDataset> {
    generate_synthetic_with_truth(cfg).map(|(ds, _)| ds)
}

/// Builds the synthetic benchmark and returns the generating parameters too.
///
/// Each class owns `parts_per_class` part centers around its class center.
/// A sample's foreground patches each pick a part uniformly at random, so the
/// CLS feature (mean foreground plus class offset) carries composition noise
/// that per-part pooling removes. Background patches come from one shared
/// Gaussian and receive zero attention.
pub fn generate_synthetic_with_truth(cfg: &SynthConfig) -> Result<(FeatureDataset, SynthTruth)> {
    cfg.validate()?;
    let d = cfg.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let origin = vec![0.0; d];
    // Radius chosen so that random directions typically clear the minimum distance.
    let class_centers = separated_points(
        &mut rng,
        &origin,
        cfg.num_classes,
        cfg.class_separation,
        cfg.class_separation,
        "class centers",
    )?;
    let mut part_centers = Vec::with_capacity(cfg.num_classes);
    let mut offsets = Vec::with_capacity(cfg.num_classes);
    for c in 0..cfg.num_classes {
        let center = class_centers.row(c).to_vec();
        part_centers.push(separated_points(
            &mut rng,
            &center,
            cfg.parts_per_class,
            cfg.part_separation,
            cfg.part_separation,
            "part centers",
        )?);
        if cfg.center_parts {
            let pc = part_centers.last_mut().expect("just pushed");
            let shift = pc.mean_axis(ndarray::Axis(0)).expect("K >= 1") - Array1::from_vec(center);
            *pc -= &shift;
        }
        let mut o = gaussian_vec(&mut rng, d);
        let norm = o.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
        o.iter_mut().for_each(|x| *x *= cfg.cls_offset_norm / norm);
        offsets.push(o);
    }

    let nuisance_basis = if cfg.nuisance_sigma > 0.0 && cfg.nuisance_dim > 0 {
        orthonormal_rows(&mut rng, cfg.nuisance_dim, d)
    } else {
        Array2::zeros((0, d))
    };

    let fg_frac = cfg.foreground_patch_count as f64 / cfg.num_patches as f64;
    let mut samples = Vec::with_capacity(cfg.num_classes * cfg.samples_per_class);
    let mut patch_parts = Vec::with_capacity(samples.capacity());
    let mut labeled_ids = BTreeSet::new();
    let mut positions: Vec<usize> = (0..cfg.num_patches).collect();
    for c in 0..cfg.num_classes {
        let is_old = c < cfg.old_class_count;
        for s in 0..cfg.samples_per_class {
            let id = (c * cfg.samples_per_class + s) as u64;
            positions.shuffle(&mut rng);
            let mut parts = vec![None; cfg.num_patches];
            for (i, &p) in positions[..cfg.foreground_patch_count].iter().enumerate() {
                parts[p] = Some(if cfg.balanced_parts {
                    i % cfg.parts_per_class
                } else {
                    rng.random_range(0..cfg.parts_per_class)
                });
            }
            let nuisance = if nuisance_basis.nrows() > 0 {
                let z = Array1::from_vec(gaussian_vec(&mut rng, nuisance_basis.nrows()));
                nuisance_basis.t().dot(&z) * cfg.nuisance_sigma
            } else {
                Array1::zeros(d)
            };
            let mut patches = Array2::<f32>::zeros((cfg.num_patches, d));
            let mut attention = Array1::<f32>::zeros(cfg.num_patches);
            let mut fg_sum = vec![0.0f64; d];
            for (j, part) in parts.iter().enumerate() {
                let noise = gaussian_vec(&mut rng, d);
                match part {
                    Some(k) => {
                        let pc = part_centers[c].row(*k);
                        for t in 0..d {
                            let v = pc[t] + cfg.noise_sigma * noise[t] + nuisance[t];
                            patches[[j, t]] = v as f32;
                            fg_sum[t] += patches[[j, t]] as f64;
                        }
                        // fg attention in [1, 1.1) stays >= the per-sample mean
                        // whenever fg covers at most 90% of the patches.
                        let jitter: f64 = if fg_frac <= 0.9 { rng.random::<f64>() * 0.1 } else { 0.0 };
                        attention[j] = (1.0 + jitter) as f32;
                    }
                    None => {
                        for t in 0..d {
                            patches[[j, t]] = (cfg.background_sigma * noise[t]) as f32;
                        }
                    }
                }
            }
            let fg = cfg.foreground_patch_count as f64;
            let cls_noise = if cfg.cls_noise_sigma > 0.0 { gaussian_vec(&mut rng, d) } else { vec![0.0; d] };
            let cls = Array1::from_iter(
                (0..d).map(|t| (fg_sum[t] / fg + offsets[c][t] + cfg.cls_noise_sigma * cls_noise[t]) as f32),
            );
            if is_old && s < cfg.samples_per_class / 2 {
                labeled_ids.insert(id);
            }
            samples.push(Sample {
                id,
                label: Some(c),
                cls_fixed: cls,
                patches_learnable: patches.clone(),
                patches_fixed: patches,
                attention,
            });
            patch_parts.push(parts);
        }
    }
    let meta = DatasetMeta {
        num_classes: cfg.num_classes,
        old_classes: (0..cfg.old_class_count).collect(),
        labeled_ids,
        dim: d,
        num_patches: cfg.num_patches,
    };
    let ds = FeatureDataset { meta, samples, has_learnable: true };
    let truth = SynthTruth { class_centers, part_centers, patch_parts };
    Ok((ds, truth))
}

/// Magnitudes of the second-view augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Std-dev of Gaussian jitter added to every feature.
    pub sigma: f64,
    /// Probability of zeroing each foreground patch's attention.
    pub p_drop: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { sigma: 0.1, p_drop: 0.2 }
    }
}

/// Foreground patches: attention at or above the sample mean and strictly positive.
pub fn foreground_mask(attention: &Array1<f32>) -> Vec<bool> {
    let mean = attention.mean().unwrap_or(0.0);
    attention.iter().map(|&a| a >= mean && a > 0.0).collect()
}

/// Produces another view of `sample`: feature jitter plus attention dropout
/// on foreground patches (a stand-in for crops that hide parts).
pub fn augment_view(sample: &Sample, seed: u64, cfg: &AugmentConfig) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = sample.clone();
    if cfg.sigma > 0.0 {
        let sigma = cfg.sigma;
        let mut jitter = |x: &mut f32| {
            let z: f64 = StandardNormal.sample(&mut rng);
            *x = (*x as f64 + sigma * z) as f32;
        };
        out.cls_fixed.iter_mut().for_each(&mut jitter);
        out.patches_fixed.iter_mut().for_each(&mut jitter);
        out.patches_learnable.iter_mut().for_each(&mut jitter);
    }
    if cfg.p_drop > 0.0 {
        let fg = foreground_mask(&sample.attention);
        for (j, is_fg) in fg.into_iter().enumerate() {
            if is_fg && (cfg.p_drop >= 1.0 || rng.random::<f64>() < cfg.p_drop) {
                out.attention[j] = 0.0;
            }
        }
    }
    out
}
