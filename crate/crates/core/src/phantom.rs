//! Synthetic complex-valued phantoms with a labelled region of interest.
//!
//! Each image is a smooth body ellipse with a few additive inner ellipses and,
//! for most images, one ROI ellipse overwritten at elevated intensity. The
//! label marks exactly the pixels whose centre lies inside the ROI ellipse.
//! A low-order polynomial phase makes both channels non-trivial.
//!
//! Dataset directory: `manifest.json` (spec, split ids, per-image SHA-256 and
//! a dataset hash), `images/<id>.cf32` + `images/<id>.json` (see
//! [`crate::kspace::io`]) and `labels/<id>.u8`, one byte per pixel.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kspace::io::{complex_from_bytes, complex_to_bytes, read_json, write_json, ComplexSidecar};
use crate::kspace::ComplexImage;
use crate::rng::substream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub size: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Inclusive range of inner ellipse counts.
    pub ellipses: (usize, usize),
    /// ROI intensity relative to the brightest non-ROI pixel.
    pub roi_contrast: f64,
    /// Fraction of images per split that contain an ROI.
    pub roi_fraction: f64,
    /// Largest phase excursion (radians) of the polynomial phase field.
    pub phase_amplitude: f64,
    /// Total degree of the phase polynomial.
    pub phase_order: usize,
    pub intensity_scale: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            size: 64,
            n_train: 600,
            n_val: 150,
            n_test: 150,
            ellipses: (3, 8),
            roi_contrast: 1.5,
            roi_fraction: 0.9,
            phase_amplitude: std::f64::consts::FRAC_PI_2,
            phase_order: 2,
            intensity_scale: 1.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 || self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::Config("phantom size must be >= 8 and every split non-empty".into()));
        }
        if self.ellipses.0 > self.ellipses.1 || !(0.0..=1.0).contains(&self.roi_fraction) {
            return Err(Error::Config("invalid ellipse range or ROI fraction".into()));
        }
        if !(self.roi_contrast > 1.0) || !(self.intensity_scale > 0.0) {
            return Err(Error::Config("ROI contrast must exceed 1 and the intensity scale be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub id: u64,
    pub image: ComplexImage,
    /// ROI membership per pixel, row-major, 0 or 1.
    pub label: Vec<u8>,
}

impl LabeledImage {
    pub fn has_roi(&self) -> bool {
        self.label.iter().any(|&v| v == 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: PhantomSpec,
    pub train: Vec<LabeledImage>,
    pub val: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[LabeledImage] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// SHA-256 over all image and label bytes in split order.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for s in Split::ALL {
            for item in self.split(s) {
                h.update(item_hash(item).as_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

fn item_hash(item: &LabeledImage) -> String {
    let mut h = Sha256::new();
    h.update(item.id.to_le_bytes());
    h.update(complex_to_bytes(&item.image));
    h.update(&item.label);
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    /// Pixel-centre membership test in pixel coordinates.
    fn contains(&self, row: usize, col: usize) -> bool {
        let (x, y) = (col as f64 + 0.5 - self.cx, row as f64 + 0.5 - self.cy);
        let (s, c) = self.theta.sin_cos();
        let u = x * c + y * s;
        let v = -x * s + y * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    fn random_inside<R: Rng + ?Sized>(outer: &Ellipse, scale: (f64, f64), reach: f64, rng: &mut R) -> Ellipse {
        let r = reach * rng.random::<f64>().sqrt();
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let (s, c) = outer.theta.sin_cos();
        let (u, v) = (r * outer.a * phi.cos(), r * outer.b * phi.sin());
        Ellipse {
            cx: outer.cx + u * c - v * s,
            cy: outer.cy + u * s + v * c,
            a: rng.random_range(scale.0..scale.1) * outer.a,
            b: rng.random_range(scale.0..scale.1) * outer.b,
            theta: rng.random_range(0.0..std::f64::consts::PI),
        }
    }
}

/// Rounds toward zero to the nearest `f32`, so storage never grows a value.
fn f32_toward_zero(x: f64) -> f64 {
    let f = x as f32;
    let f = if (f as f64).abs() > x.abs() {
        if f > 0.0 { f.next_down() } else { f.next_up() }
    } else {
        f
    };
    f as f64
}

/// One phantom from its own random stream.
pub fn generate_image<R: Rng + ?Sized>(spec: &PhantomSpec, id: u64, with_roi: bool, rng: &mut R) -> LabeledImage {
    let n = spec.size;
    let half = n as f64 / 2.0;
    let body = Ellipse {
        cx: half + rng.random_range(-0.05..0.05) * n as f64,
        cy: half + rng.random_range(-0.05..0.05) * n as f64,
        a: rng.random_range(0.68..0.85) * half,
        b: rng.random_range(0.55..0.75) * half,
        theta: rng.random_range(-0.3..0.3),
    };
    let (gx, gy) = (rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2));
    let base = rng.random_range(0.25..0.4);
    let mut mag = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            if body.contains(r, c) {
                let (x, y) = ((c as f64 + 0.5) / half - 1.0, (r as f64 + 0.5) / half - 1.0);
                mag[r * n + c] = base * (1.0 + gx * x + gy * y);
            }
        }
    }
    let count = rng.random_range(spec.ellipses.0..=spec.ellipses.1);
    for _ in 0..count {
        let e = Ellipse::random_inside(&body, (0.1, 0.35), 0.6, rng);
        let intensity = rng.random_range(0.08..0.3) * if rng.random::<f64>() < 0.3 { -0.5 } else { 1.0 };
        for r in 0..n {
            for c in 0..n {
                if e.contains(r, c) && body.contains(r, c) {
                    mag[r * n + c] = (mag[r * n + c] + intensity).max(0.0);
                }
            }
        }
    }
    let mut label = vec![0u8; n * n];
    if with_roi {
        let roi = Ellipse::random_inside(&body, (0.14, 0.26), 0.45, rng);
        let level = mag.iter().copied().fold(0.0, f64::max) * spec.roi_contrast;
        for r in 0..n {
            for c in 0..n {
                if roi.contains(r, c) {
                    label[r * n + c] = 1;
                    mag[r * n + c] = level;
                }
            }
        }
    }
    let peak = mag.iter().copied().fold(0.0, f64::max);
    let argmax = mag.iter().position(|&m| m == peak).expect("non-empty image");
    mag.iter_mut().for_each(|m| *m = *m / peak * spec.intensity_scale);

    // Phase: random polynomial of total degree `phase_order`, scaled to the
    // requested amplitude and shifted to vanish at the brightest pixel, so
    // that pixel stores its magnitude exactly.
    let mut coeffs = Vec::new();
    for i in 0..=spec.phase_order {
        for j in 0..=spec.phase_order - i {
            if i + j > 0 {
                coeffs.push((i as i32, j as i32, rng.random_range(-1.0..1.0)));
            }
        }
    }
    let poly = |r: usize, c: usize| {
        let (x, y) = ((c as f64 + 0.5) / half - 1.0, (r as f64 + 0.5) / half - 1.0);
        coeffs.iter().map(|&(i, j, a)| a * x.powi(i) * y.powi(j)).sum::<f64>()
    };
    let raw: Vec<f64> = (0..n * n).map(|p| poly(p / n, p % n)).collect();
    let span = raw.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let phase0 = raw[argmax];
    let mut re = Vec::with_capacity(n * n);
    let mut im = Vec::with_capacity(n * n);
    for (p, &m) in mag.iter().enumerate() {
        let phi = (raw[p] - phase0) / span * spec.phase_amplitude / 2.0;
        let (s, c) = phi.sin_cos();
        re.push(f32_toward_zero(m * c));
        im.push(f32_toward_zero(m * s));
    }
    let image = ComplexImage::new(n, n, re, im).expect("consistent extents").with_scale(spec.intensity_scale);
    LabeledImage { id, image, label }
}

/// First id of each split: train, then val, then test.
fn split_offset(spec: &PhantomSpec, s: Split) -> u64 {
    match s {
        Split::Train => 0,
        Split::Val => spec.n_train as u64,
        Split::Test => (spec.n_train + spec.n_val) as u64,
    }
}

fn split_len(spec: &PhantomSpec, s: Split) -> usize {
    match s {
        Split::Train => spec.n_train,
        Split::Val => spec.n_val,
        Split::Test => spec.n_test,
    }
}

/// Deterministic dataset; each image depends only on `(seed, id)`.
pub fn generate_dataset(spec: &PhantomSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut splits = BTreeMap::new();
    for s in Split::ALL {
        let len = split_len(spec, s);
        let with_roi = (spec.roi_fraction * len as f64).round() as usize;
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut substream(spec.seed, &format!("roi-{}", s.name()), 0));
        let mut has = vec![false; len];
        order[..with_roi].iter().for_each(|&i| has[i] = true);
        let first = split_offset(spec, s);
        let items = (0..len)
            .map(|i| {
                let id = first + i as u64;
                generate_image(spec, id, has[i], &mut substream(spec.seed, "phantom", id))
            })
            .collect::<Vec<_>>();
        splits.insert(s.name(), items);
    }
    Ok(Dataset {
        spec: spec.clone(),
        train: splits.remove("train").unwrap_or_default(),
        val: splits.remove("val").unwrap_or_default(),
        test: splits.remove("test").unwrap_or_default(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: PhantomSpec,
    pub splits: BTreeMap<String, Vec<u64>>,
    /// Per-image SHA-256 over id, image bytes and label bytes.
    pub hashes: BTreeMap<u64, String>,
    pub dataset_hash: String,
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let (idir, ldir) = (dir.join("images"), dir.join("labels"));
    for d in [&idir, &ldir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut splits = BTreeMap::new();
    let mut hashes = BTreeMap::new();
    for s in Split::ALL {
        let mut ids = Vec::new();
        for item in ds.split(s) {
            crate::kspace::io::write_complex(&idir.join(item.id.to_string()), &item.image)?;
            let lpath = ldir.join(format!("{}.u8", item.id));
            fs::write(&lpath, &item.label).map_err(|e| Error::io(&lpath, e))?;
            hashes.insert(item.id, item_hash(item));
            ids.push(item.id);
        }
        splits.insert(s.name().to_string(), ids);
    }
    let manifest = DatasetManifest { spec: ds.spec.clone(), splits, hashes, dataset_hash: ds.hash() };
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    read_json(&dir.join("manifest.json"))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join("manifest.json");
    let manifest = load_manifest(dir)?;
    let n = manifest.spec.size;
    let mut out: BTreeMap<String, Vec<LabeledImage>> = BTreeMap::new();
    for s in Split::ALL {
        let ids = manifest
            .splits
            .get(s.name())
            .ok_or_else(|| Error::load(&mpath, format!("manifest lacks split '{}'", s.name())))?;
        let mut items = Vec::with_capacity(ids.len());
        for &id in ids {
            let stem = dir.join("images").join(id.to_string());
            let side: ComplexSidecar = read_json(&stem.with_extension("json"))?;
            let dpath = stem.with_extension("cf32");
            if (side.height, side.width) != (n, n) {
                return Err(Error::load(&dpath, format!("image is {}x{}, manifest says {n}x{n}", side.height, side.width)));
            }
            let bytes = fs::read(&dpath).map_err(|e| Error::io(&dpath, e))?;
            let image = complex_from_bytes(&bytes, n, n, &dpath)?.with_scale(side.intensity_scale);
            let lpath = dir.join("labels").join(format!("{id}.u8"));
            let label = fs::read(&lpath).map_err(|e| Error::io(&lpath, e))?;
            if label.len() != n * n || label.iter().any(|&v| v > 1) {
                return Err(Error::load(&lpath, format!("label has {} bytes, expected {} values in {{0, 1}}", label.len(), n * n)));
            }
            let item = LabeledImage { id, image, label };
            if manifest.hashes.get(&id) != Some(&item_hash(&item)) {
                return Err(Error::load(&dpath, format!("image {id} does not match its manifest hash")));
            }
            items.push(item);
        }
        out.insert(s.name().to_string(), items);
    }
    let ds = Dataset {
        spec: manifest.spec,
        train: out.remove("train").unwrap_or_default(),
        val: out.remove("val").unwrap_or_default(),
        test: out.remove("test").unwrap_or_default(),
    };
    Ok(ds)
}

/// Batches of indices into a split of length `len` for one epoch. With
/// `shuffle` the order is a pure function of `(seed, epoch)`; the final
/// short batch is kept.
pub fn batch_order(len: usize, batch_size: usize, seed: u64, epoch: u64, shuffle: bool) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut idx: Vec<usize> = (0..len).collect();
    if shuffle {
        idx.shuffle(&mut substream(seed, "batches", epoch));
    }
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PhantomSpec {
        PhantomSpec { n_train: 20, n_val: 10, n_test: 10, seed: 3, ..PhantomSpec::default() }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(&small()).unwrap();
        let b = generate_dataset(&small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
        let c = generate_dataset(&PhantomSpec { seed: 4, ..small() }).unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn roi_fraction_per_split() {
        let ds = generate_dataset(&small()).unwrap();
        for s in Split::ALL {
            let items = ds.split(s);
            let frac = items.iter().filter(|i| i.has_roi()).count() as f64 / items.len() as f64;
            assert!((frac - 0.9).abs() <= 1.0 / items.len() as f64, "{}: {frac}", s.name());
        }
    }

    #[test]
    fn magnitudes_are_normalized() {
        let ds = generate_dataset(&small()).unwrap();
        for s in Split::ALL {
            for item in ds.split(s) {
                let m = item.image.magnitude();
                assert!(m.iter().all(|&v| (0.0..=1.0).contains(&v)), "id {}", item.id);
                assert_eq!(m.iter().copied().fold(0.0, f64::max), 1.0, "id {}", item.id);
                assert!(item.image.imag().iter().any(|&v| v.abs() > 1e-3), "phase should be non-trivial");
            }
        }
    }

    #[test]
    fn labels_follow_pixel_centre_rule() {
        // A phantom with ROI has all labelled pixels at the peak magnitude.
        let ds = generate_dataset(&small()).unwrap();
        for item in ds.train.iter().filter(|i| i.has_roi()) {
            let m = item.image.magnitude();
            for (p, &l) in item.label.iter().enumerate() {
                if l == 1 {
                    assert!(m[p] > 0.999, "labelled pixel below ROI level");
                } else {
                    assert!(m[p] <= 1.0 / 1.5 + 1e-6, "unlabelled pixel at ROI level");
                }
            }
        }
        let e = Ellipse { cx: 4.0, cy: 4.0, a: 2.0, b: 1.0, theta: 0.0 };
        assert!(e.contains(3, 3) && e.contains(3, 5) && !e.contains(3, 6) && !e.contains(5, 3));
    }

    #[test]
    fn splits_are_disjoint() {
        let ds = generate_dataset(&small()).unwrap();
        let mut ids: Vec<u64> = Split::ALL.iter().flat_map(|&s| ds.split(s).iter().map(|i| i.id)).collect();
        let n = ids.len();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), n);
    }

    #[test]
    fn save_load_roundtrip_and_tamper() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&small()).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        let manifest = load_manifest(dir.path()).unwrap();
        assert_eq!(generate_dataset(&manifest.spec).unwrap().hash(), manifest.dataset_hash);

        let victim = dir.path().join("images").join("5.cf32");
        let mut bytes = fs::read(&victim).unwrap();
        bytes.pop();
        fs::write(&victim, bytes).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("5.cf32"), "{err}");
    }

    #[test]
    fn batch_order_properties() {
        let one = batch_order(10, 10, 1, 0, false).unwrap();
        assert_eq!(one, vec![(0..10).collect::<Vec<_>>()]);
        assert_eq!(batch_order(10, 3, 7, 2, true).unwrap(), batch_order(10, 3, 7, 2, true).unwrap());
        assert_ne!(batch_order(50, 5, 7, 2, true).unwrap(), batch_order(50, 5, 7, 3, true).unwrap());
        let b = batch_order(10, 3, 7, 2, true).unwrap();
        assert_eq!(b.last().unwrap().len(), 1);
        let mut all: Vec<usize> = b.into_iter().flatten().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(batch_order(10, 0, 1, 0, true).is_err());
    }
}
