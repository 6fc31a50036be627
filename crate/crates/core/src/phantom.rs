//! Paired synthetic kVCT / MVCT head phantoms with metal inserts and streaks.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::filters::{blur_same, gaussian_kernel};
use crate::io::{read_masks, read_volume, write_masks, write_volume};
use crate::kv::{parse_value, KvConfig, KvDoc};
use crate::volume::{classify_artifact_slices, Modality, Volume};

/// MVCT renders metal at no more than this value.
pub const MVCT_METAL_CAP_HU: f64 = 1500.0;

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomConfig {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub n_metal: usize,
    pub metal_hu: f64,
    pub streak_amplitude: f64,
    /// Number of positive/negative ray pairs around each insert.
    pub streak_count: usize,
    pub mvct_blur_sigma: f64,
    pub mvct_noise_sigma: f64,
    pub tissue_hu: f64,
    pub bone_hu: f64,
    /// Share of slices that carry metal when `n_metal > 0`.
    pub artifact_fraction: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            depth: 20,
            height: 64,
            width: 64,
            n_metal: 2,
            metal_hu: 3000.0,
            streak_amplitude: 800.0,
            streak_count: 8,
            mvct_blur_sigma: 1.0,
            mvct_noise_sigma: 20.0,
            tissue_hu: 40.0,
            bone_hu: 1000.0,
            artifact_fraction: 0.1478,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depth == 0 {
            return bad("phantom depth must be >= 1".into());
        }
        if self.height < 16 || self.width < 16 || self.height % 2 != 0 || self.width % 2 != 0 {
            return bad(format!("phantom size {}x{} must be even and >= 16", self.height, self.width));
        }
        if !(self.mvct_blur_sigma >= 0.0 && self.mvct_noise_sigma >= 0.0 && self.streak_amplitude >= 0.0) {
            return bad("sigmas and streak amplitude must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.artifact_fraction) {
            return bad(format!("artifact_fraction {} outside [0, 1]", self.artifact_fraction));
        }
        if !self.metal_hu.is_finite() || !self.tissue_hu.is_finite() || !self.bone_hu.is_finite() {
            return bad("HU levels must be finite".into());
        }
        Ok(())
    }

    /// Number of consecutive slices that carry metal.
    pub fn metal_slice_count(&self) -> usize {
        if self.n_metal == 0 {
            0
        } else {
            ((self.artifact_fraction * self.depth as f64).round() as usize).clamp(1, self.depth)
        }
    }
}

impl KvConfig for PhantomConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        let Some(k) = key.strip_prefix("phantom.") else { return Ok(false) };
        match k {
            "depth" => self.depth = parse_value(key, v)?,
            "height" => self.height = parse_value(key, v)?,
            "width" => self.width = parse_value(key, v)?,
            "n_metal" => self.n_metal = parse_value(key, v)?,
            "metal_hu" => self.metal_hu = parse_value(key, v)?,
            "streak_amplitude" => self.streak_amplitude = parse_value(key, v)?,
            "streak_count" => self.streak_count = parse_value(key, v)?,
            "mvct_blur_sigma" => self.mvct_blur_sigma = parse_value(key, v)?,
            "mvct_noise_sigma" => self.mvct_noise_sigma = parse_value(key, v)?,
            "tissue_hu" => self.tissue_hu = parse_value(key, v)?,
            "bone_hu" => self.bone_hu = parse_value(key, v)?,
            "artifact_fraction" => self.artifact_fraction = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn to_kv(&self) -> KvDoc {
        let mut d = KvDoc::new();
        d.push("phantom.depth", self.depth);
        d.push("phantom.height", self.height);
        d.push("phantom.width", self.width);
        d.push("phantom.n_metal", self.n_metal);
        d.push("phantom.metal_hu", self.metal_hu);
        d.push("phantom.streak_amplitude", self.streak_amplitude);
        d.push("phantom.streak_count", self.streak_count);
        d.push("phantom.mvct_blur_sigma", self.mvct_blur_sigma);
        d.push("phantom.mvct_noise_sigma", self.mvct_noise_sigma);
        d.push("phantom.tissue_hu", self.tissue_hu);
        d.push("phantom.bone_hu", self.bone_hu);
        d.push("phantom.artifact_fraction", self.artifact_fraction);
        d.push("phantom.seed", self.seed);
        d
    }
}

/// One aligned kVCT / MVCT pair with ground truth and masks.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientCase {
    pub patient_id: String,
    pub kvct: Volume,
    pub kvct_clean: Volume,
    pub mvct: Volume,
    pub body_mask: Array3<bool>,
    pub metal_mask: Array3<bool>,
    pub artifact_slices: Vec<usize>,
}

impl PatientCase {
    /// Checks the structural invariants of a case.
    pub fn validate(&self) -> Result<()> {
        let dims = self.kvct.dims();
        for (name, v) in [("kvct_clean", &self.kvct_clean), ("mvct", &self.mvct)] {
            if v.dims() != dims {
                return Err(Error::Shape(format!("{name} dims {:?} differ from kvct {dims:?}", v.dims())));
            }
        }
        let dhw = (dims.1, dims.2, dims.3);
        if self.body_mask.dim() != dhw || self.metal_mask.dim() != dhw {
            return Err(Error::Shape("mask dims differ from the volumes".into()));
        }
        if self.metal_mask.iter().zip(self.body_mask.iter()).any(|(&m, &b)| m && !b) {
            return Err(Error::Data("metal mask leaves the body mask".into()));
        }
        if self.artifact_slices != classify_artifact_slices(&self.kvct) {
            return Err(Error::Data("artifact slice list disagrees with the kVCT thresholds".into()));
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.kvct.depth()
    }

    pub fn artifact_fraction(&self) -> f64 {
        self.artifact_slices.len() as f64 / self.depth() as f64
    }
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
}

impl Ellipse {
    /// Squared normalised radius; < 1 inside.
    fn rho2(&self, y: f64, x: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.rx).powi(2) + (v / self.ry).powi(2)
    }

    fn scaled(&self, f: f64) -> Ellipse {
        Ellipse { ry: self.ry * f, rx: self.rx * f, ..*self }
    }
}

/// Builds one deterministic phantom case from `cfg`.
pub fn generate_patient_case(cfg: &PhantomConfig) -> Result<PatientCase> {
    cfg.validate()?;
    let (d, h, w) = (cfg.depth, cfg.height, cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (hf, wf) = (h as f64, w as f64);
    let air = Modality::Kvct.default_window().min;

    let head = Ellipse {
        cy: hf / 2.0 + rng.random_range(-0.03..0.03) * hf,
        cx: wf / 2.0 + rng.random_range(-0.03..0.03) * wf,
        ry: hf * rng.random_range(0.38..0.44),
        rx: wf * rng.random_range(0.32..0.38),
        angle: rng.random_range(-0.15..0.15),
    };
    let skull = rng.random_range(0.82..0.88);
    let inner_scale = skull - 0.02;
    let structures: Vec<(Ellipse, f64)> = (0..3)
        .map(|i| {
            let r = rng.random_range(0.0..0.45);
            let t = rng.random_range(0.0..2.0 * PI);
            let e = Ellipse {
                cy: head.cy + r * head.ry * t.sin(),
                cx: head.cx + r * head.rx * t.cos(),
                ry: head.ry * rng.random_range(0.08..0.18),
                rx: head.rx * rng.random_range(0.08..0.18),
                angle: rng.random_range(0.0..PI),
            };
            let delta = if i == 0 { -35.0 } else { rng.random_range(-25.0..35.0) };
            (e, delta)
        })
        .collect();

    // depth taper of the head outline
    let taper = |z: usize| {
        let t = (z as f64 + 0.5) / d as f64 - 0.5;
        1.0 - 0.3 * t * t
    };

    let mut clean = Array3::<f64>::from_elem((d, h, w), air);
    let mut body = Array3::from_elem((d, h, w), false);
    for z in 0..d {
        let outer = head.scaled(taper(z));
        for y in 0..h {
            for x in 0..w {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                let r2 = outer.rho2(py, px);
                if r2 >= 1.0 {
                    continue;
                }
                body[[z, y, x]] = true;
                let r = r2.sqrt();
                clean[[z, y, x]] = if r >= skull {
                    cfg.bone_hu
                } else {
                    let mut v = cfg.tissue_hu + 8.0 * (r * 3.0).cos();
                    for (e, delta) in &structures {
                        if e.rho2(py, px) < 1.0 {
                            v += delta;
                        }
                    }
                    v
                };
            }
        }
    }

    // metal block placement and insert centres
    let n_slices = cfg.metal_slice_count();
    let start = if n_slices == 0 { 0 } else { rng.random_range(0..=d - n_slices) };
    let metal_radius = (0.035 * hf.min(wf)).max(1.5);
    let zmid = start + n_slices / 2;
    let inner_mid = head.scaled(taper(zmid) * inner_scale);
    let centres: Vec<(f64, f64, f64)> = (0..cfg.n_metal)
        .map(|_| {
            let r = rng.random_range(0.15..0.55);
            let t = rng.random_range(0.0..2.0 * PI);
            let (s, c) = inner_mid.angle.sin_cos();
            let (u, v) = (r * inner_mid.rx * t.cos(), r * inner_mid.ry * t.sin());
            let phase = rng.random_range(0.0..PI);
            (inner_mid.cy + s * u + c * v, inner_mid.cx + c * u - s * v, phase)
        })
        .collect();

    let mut kvct = clean.clone();
    let mut metal = Array3::from_elem((d, h, w), false);
    let k = cfg.streak_count as f64;
    for z in start..start + n_slices {
        for y in 0..h {
            for x in 0..w {
                if !body[[z, y, x]] {
                    continue;
                }
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                let mut streak = 0.0;
                let mut in_metal = false;
                for &(cy, cx, phase) in &centres {
                    let r = ((py - cy).powi(2) + (px - cx).powi(2)).sqrt();
                    if r <= metal_radius {
                        in_metal = true;
                    }
                    let theta = (py - cy).atan2(px - cx);
                    streak += cfg.streak_amplitude * (k * theta + phase).cos().powi(9) * metal_radius / r.max(metal_radius);
                }
                if in_metal {
                    metal[[z, y, x]] = true;
                    kvct[[z, y, x]] = cfg.metal_hu;
                } else {
                    kvct[[z, y, x]] = (kvct[[z, y, x]] + streak).max(air);
                }
            }
        }
    }

    // MVCT: metal capped, in-plane blur, additive noise
    let mut mvct = clean.clone();
    let cap = cfg.metal_hu.min(MVCT_METAL_CAP_HU);
    for (m, &is_metal) in mvct.iter_mut().zip(metal.iter()) {
        if is_metal {
            *m = cap;
        }
    }
    if cfg.mvct_blur_sigma > 0.0 {
        let radius = (3.0 * cfg.mvct_blur_sigma).ceil() as usize;
        let kernel = gaussian_kernel(2 * radius + 1, cfg.mvct_blur_sigma);
        for z in 0..d {
            let blurred = blur_same(mvct.index_axis(Axis(0), z), &kernel);
            mvct.index_axis_mut(Axis(0), z).assign(&blurred);
        }
    }
    if cfg.mvct_noise_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.mvct_noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        for m in mvct.iter_mut() {
            *m += noise.sample(&mut rng);
        }
    }

    let id = format!("seed{}", cfg.seed);
    let to_vol = |a: &Array3<f64>, m: Modality| Volume::from_hu3(a.mapv(|v| v as f32), m).map(|v| v.with_id(id.clone()));
    let kvct = to_vol(&kvct, Modality::Kvct)?;
    let artifact_slices = classify_artifact_slices(&kvct);
    let case = PatientCase {
        patient_id: id.clone(),
        kvct,
        kvct_clean: to_vol(&clean, Modality::Kvct)?,
        mvct: to_vol(&mvct, Modality::Mvct)?,
        body_mask: body,
        metal_mask: metal,
        artifact_slices,
    };
    debug_assert!(case.validate().is_ok());
    Ok(case)
}

/// Seed of patient `index` in a cohort drawn from `seed`.
pub fn patient_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 step; keeps cohorts with nearby seeds unrelated
    let mut z = seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `n` patients named `P000`, `P001`, ... drawn from `base` with per-patient seeds.
pub fn generate_cohort(n: usize, base: &PhantomConfig) -> Result<Vec<PatientCase>> {
    (0..n)
        .map(|i| {
            let cfg = PhantomConfig { seed: patient_seed(base.seed, i), ..base.clone() };
            let mut case = generate_patient_case(&cfg)?;
            let id = format!("P{i:03}");
            for v in [&mut case.kvct, &mut case.kvct_clean, &mut case.mvct] {
                v.id = id.clone();
            }
            case.patient_id = id;
            Ok(case)
        })
        .collect()
}

/// Patient-wise split. `round(train_frac * N)` distinct patients go to training.
pub fn split_dataset<T: Clone>(
    cases: &[T],
    patient_id: impl Fn(&T) -> &str,
    train_frac: f64,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::Config(format!("train fraction {train_frac} must lie in (0, 1)")));
    }
    let ids: BTreeSet<&str> = cases.iter().map(&patient_id).collect();
    if ids.len() < 2 {
        return Err(Error::Data(format!("need at least 2 patients to split, got {}", ids.len())));
    }
    let mut ids: Vec<&str> = ids.into_iter().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (train_frac * ids.len() as f64).round() as usize;
    let train_ids: BTreeSet<&str> = ids[..n_train].iter().copied().collect();
    let (train, test) = cases.iter().cloned().partition(|c| train_ids.contains(patient_id(c)));
    Ok((train, test))
}

const CASE_FILES: [&str; 5] = ["kvct.h3dv", "kvct_clean.h3dv", "mvct.h3dv", "masks.h3dm", "meta.txt"];

/// Writes a case as one directory of files.
pub fn write_case(dir: impl AsRef<Path>, case: &PatientCase) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_volume(dir.join(CASE_FILES[0]), &case.kvct)?;
    write_volume(dir.join(CASE_FILES[1]), &case.kvct_clean)?;
    write_volume(dir.join(CASE_FILES[2]), &case.mvct)?;
    write_masks(dir.join(CASE_FILES[3]), &case.body_mask, &case.metal_mask)?;
    let (_, d, h, w) = case.kvct.dims();
    let mut meta = KvDoc::new();
    meta.push("patient_id", &case.patient_id);
    meta.push("depth", d);
    meta.push("height", h);
    meta.push("width", w);
    meta.push("artifact_slices", crate::kv::join_list(&case.artifact_slices));
    meta.push("metal_voxels", case.metal_mask.iter().filter(|&&m| m).count());
    let p = dir.join(CASE_FILES[4]);
    fs::write(&p, meta.to_string()).map_err(|e| Error::io(&p, e))
}

pub fn read_case(dir: impl AsRef<Path>) -> Result<PatientCase> {
    let dir = dir.as_ref();
    let meta_path = dir.join(CASE_FILES[4]);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta = KvDoc::parse(&text).map_err(|e| Error::Format(format!("{}: {e}", meta_path.display())))?;
    let patient_id = meta.get("patient_id").ok_or_else(|| Error::Format("meta.txt lacks patient_id".into()))?.to_string();
    let kvct = read_volume(dir.join(CASE_FILES[0]))?.with_id(patient_id.clone());
    let kvct_clean = read_volume(dir.join(CASE_FILES[1]))?.with_id(patient_id.clone());
    let mvct = read_volume(dir.join(CASE_FILES[2]))?.with_id(patient_id.clone());
    let (body_mask, metal_mask) = read_masks(dir.join(CASE_FILES[3]))?;
    let case = PatientCase {
        artifact_slices: classify_artifact_slices(&kvct),
        patient_id,
        kvct,
        kvct_clean,
        mvct,
        body_mask,
        metal_mask,
    };
    case.validate().map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
    Ok(case)
}

/// One manifest row.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub patient_id: String,
    pub depth: usize,
    pub artifact_slices: usize,
}

impl ManifestEntry {
    pub fn fraction(&self) -> f64 {
        self.artifact_slices as f64 / self.depth as f64
    }
}

pub const MANIFEST_FILE: &str = "manifest.csv";
const MANIFEST_HEADER: &str = "patient_id,depth,artifact_slices,artifact_fraction";

/// Share of artifact slices over all listed slices.
pub fn manifest_fraction(entries: &[ManifestEntry]) -> f64 {
    let slices: usize = entries.iter().map(|e| e.depth).sum();
    if slices == 0 {
        return 0.0;
    }
    entries.iter().map(|e| e.artifact_slices).sum::<usize>() as f64 / slices as f64
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut s = format!("{MANIFEST_HEADER}\n");
    for e in entries {
        s.push_str(&format!("{},{},{},{:.6}\n", e.patient_id, e.depth, e.artifact_slices, e.fraction()));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Error::Format(format!("{}: missing manifest header", path.display())));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(Error::Format(format!("bad manifest row {l:?}")));
            }
            Ok(ManifestEntry {
                patient_id: f[0].to_string(),
                depth: f[1].parse().map_err(|_| Error::Format(format!("bad depth in {l:?}")))?,
                artifact_slices: f[2].parse().map_err(|_| Error::Format(format!("bad count in {l:?}")))?,
            })
        })
        .collect()
}

/// Writes every case plus the manifest under `out`. Returns the manifest rows.
pub fn write_dataset(out: impl AsRef<Path>, cases: &[PatientCase]) -> Result<Vec<ManifestEntry>> {
    let out = out.as_ref();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let entries: Vec<ManifestEntry> = cases
        .iter()
        .map(|c| {
            write_case(out.join(&c.patient_id), c)?;
            Ok(ManifestEntry {
                patient_id: c.patient_id.clone(),
                depth: c.depth(),
                artifact_slices: c.artifact_slices.len(),
            })
        })
        .collect::<Result<_>>()?;
    write_manifest(out.join(MANIFEST_FILE), &entries)?;
    Ok(entries)
}

/// Loads every case listed in the dataset manifest.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Vec<PatientCase>> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::Data(format!("dataset directory {} does not exist", dir.display())));
    }
    let entries = read_manifest(dir.join(MANIFEST_FILE))?;
    entries.iter().map(|e| read_case(case_dir(dir, &e.patient_id))).collect()
}

pub fn case_dir(dataset: &Path, patient_id: &str) -> PathBuf {
    dataset.join(patient_id)
}
