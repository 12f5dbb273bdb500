//! Image quality and segmentation metrics, SIS, and report aggregation.
//!
//! PSNR and SSIM operate on magnitude images. A perfect reconstruction has
//! PSNR `+inf`, which JSON and CSV both spell `Infinity`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kspace::ComplexImage;
use crate::networks::{segment, UNetConfig};
use crate::tensor::{ParamSet, Real, Tensor};

fn same_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {a} vs {b} pixels")));
    }
    Ok(())
}

/// `10 log10(peak^2 / mse)`; identical inputs give `+inf`.
pub fn psnr(x: &[f64], x_hat: &[f64], peak: f64) -> Result<f64> {
    same_len(x.len(), x_hat.len(), "psnr")?;
    if x.is_empty() || !(peak > 0.0) {
        return Err(Error::Config("psnr needs a non-empty image and a positive peak".into()));
    }
    let mse = x.iter().zip(x_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SsimWindow {
    /// Sliding Gaussian window over all fully contained positions.
    Gaussian { size: usize, sigma: f64 },
    /// Non-overlapping uniform blocks; a partial last row/column is dropped.
    Block { size: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window: SsimWindow,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range `L`.
    pub range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self { window: SsimWindow::Gaussian { size: 11, sigma: 1.5 }, k1: 0.01, k2: 0.03, range: 1.0 }
    }
}

impl SsimConfig {
    pub fn block8() -> Self {
        Self { window: SsimWindow::Block { size: 8 }, ..Self::default() }
    }

    pub fn with_range(self, range: f64) -> Self {
        Self { range, ..self }
    }
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

fn ssim_local(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64, c1: f64, c2: f64) -> f64 {
    ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

/// Separable valid-mode filtering of an `h x w` plane with a 1-D kernel.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ho, wo) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * wo];
    for r in 0..h {
        for c in 0..wo {
            rows[r * wo + c] = k.iter().enumerate().map(|(i, &kv)| kv * img[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for r in 0..ho {
        for c in 0..wo {
            out[r * wo + c] = k.iter().enumerate().map(|(i, &kv)| kv * rows[(r + i) * wo + c]).sum();
        }
    }
    out
}

/// Mean local SSIM of two `h x w` images.
pub fn ssim(x: &[f64], y: &[f64], h: usize, w: usize, cfg: &SsimConfig) -> Result<f64> {
    same_len(x.len(), y.len(), "ssim")?;
    same_len(x.len(), h * w, "ssim extent")?;
    let size = match cfg.window {
        SsimWindow::Gaussian { size, .. } | SsimWindow::Block { size } => size,
    };
    if size == 0 || h < size || w < size {
        return Err(Error::Shape(format!("{h}x{w} image is smaller than the {size}x{size} SSIM window")));
    }
    let c1 = (cfg.k1 * cfg.range).powi(2);
    let c2 = (cfg.k2 * cfg.range).powi(2);
    match cfg.window {
        SsimWindow::Gaussian { size, sigma } => {
            let k = gaussian_kernel(size, sigma);
            let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
            let mx = filter_valid(x, h, w, &k);
            let my = filter_valid(y, h, w, &k);
            let sxx = filter_valid(&prod(x, x), h, w, &k);
            let syy = filter_valid(&prod(y, y), h, w, &k);
            let sxy = filter_valid(&prod(x, y), h, w, &k);
            let total: f64 = (0..mx.len())
                .map(|i| {
                    let (a, b) = (mx[i], my[i]);
                    ssim_local(a, b, sxx[i] - a * a, syy[i] - b * b, sxy[i] - a * b, c1, c2)
                })
                .sum();
            Ok(total / mx.len() as f64)
        }
        SsimWindow::Block { size } => {
            let (bh, bw) = (h / size, w / size);
            let n = (size * size) as f64;
            let mut total = 0.0;
            for br in 0..bh {
                for bc in 0..bw {
                    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for r in br * size..(br + 1) * size {
                        for c in bc * size..(bc + 1) * size {
                            let (a, b) = (x[r * w + c], y[r * w + c]);
                            sx += a;
                            sy += b;
                            sxx += a * a;
                            syy += b * b;
                            sxy += a * b;
                        }
                    }
                    let (mx, my) = (sx / n, sy / n);
                    total += ssim_local(mx, my, sxx / n - mx * mx, syy / n - my * my, sxy / n - mx * my, c1, c2);
                }
            }
            Ok(total / (bh * bw) as f64)
        }
    }
}

/// Foreground Dice overlap; two empty masks score 1.
pub fn dice(a: &[u8], b: &[u8]) -> Result<f64> {
    same_len(a.len(), b.len(), "dice")?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&p, &q) in a.iter().zip(b) {
        let (p, q) = (p != 0, q != 0);
        na += p as usize;
        nb += q as usize;
        inter += (p && q) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Ratio of cohort means, `mean(d_rec) / mean(d_gt)`.
pub fn sis_from_dice(d_rec: &[f64], d_gt: &[f64]) -> Result<f64> {
    if d_rec.len() != d_gt.len() {
        return Err(Error::Shape(format!("{} reconstruction vs {} ground-truth Dice values", d_rec.len(), d_gt.len())));
    }
    if d_rec.is_empty() {
        return Err(Error::EmptyCohort);
    }
    let n = d_rec.len() as f64;
    let gt = d_gt.iter().sum::<f64>() / n;
    if gt == 0.0 {
        return Err(Error::DegenerateSegmenter);
    }
    Ok((d_rec.iter().sum::<f64>() / n) / gt)
}

/// Binary segmentations (probability >= 0.5) of image magnitudes.
pub fn segment_masks<T: Real>(cfg: &UNetConfig, params: &ParamSet<T>, images: &[&ComplexImage]) -> Result<Vec<Vec<u8>>> {
    const CHUNK: usize = 16;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(CHUNK) {
        let (h, w) = (chunk[0].height(), chunk[0].width());
        let mut data = Vec::with_capacity(chunk.len() * h * w);
        for img in chunk {
            if (img.height(), img.width()) != (h, w) {
                return Err(Error::Shape("segmentation batch mixes image sizes".into()));
            }
            data.extend(img.magnitude().into_iter().map(T::of));
        }
        let prob = segment(cfg, params, &Tensor::new([chunk.len(), 1, h, w], data)?)?;
        for p in prob.data().chunks(h * w) {
            out.push(p.iter().map(|&v| (v.f64() >= 0.5) as u8).collect());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SisResult {
    pub sis: f64,
    /// Indices (into the inputs) of images with a non-empty label.
    pub cohort: Vec<usize>,
    pub d_rec: Vec<f64>,
    pub d_gt: Vec<f64>,
}

/// Semantic interpretability score of `recon` against `gt` with a fixed
/// segmenter, restricted to images whose label has a foreground pixel.
pub fn sis<T: Real>(
    cfg: &UNetConfig,
    params: &ParamSet<T>,
    recon: &[&ComplexImage],
    gt: &[&ComplexImage],
    labels: &[&[u8]],
) -> Result<SisResult> {
    if recon.len() != gt.len() || gt.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} reconstructions, {} ground truths, {} labels",
            recon.len(),
            gt.len(),
            labels.len()
        )));
    }
    let cohort: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].iter().any(|&v| v != 0)).collect();
    if cohort.is_empty() {
        return Err(Error::EmptyCohort);
    }
    let seg_rec = segment_masks(cfg, params, &cohort.iter().map(|&i| recon[i]).collect::<Vec<_>>())?;
    let seg_gt = segment_masks(cfg, params, &cohort.iter().map(|&i| gt[i]).collect::<Vec<_>>())?;
    let mut d_rec = Vec::with_capacity(cohort.len());
    let mut d_gt = Vec::with_capacity(cohort.len());
    for (k, &i) in cohort.iter().enumerate() {
        d_rec.push(dice(&seg_rec[k], labels[i])?);
        d_gt.push(dice(&seg_gt[k], labels[i])?);
    }
    Ok(SisResult { sis: sis_from_dice(&d_rec, &d_gt)?, cohort, d_rec, d_gt })
}

/// Serde adapter writing non-finite floats as the strings `Infinity`,
/// `-Infinity` and `NaN`.
pub mod float_or_string {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn to_text(v: f64) -> String {
        if v.is_nan() {
            "NaN".into()
        } else if v == f64::INFINITY {
            "Infinity".into()
        } else if v == f64::NEG_INFINITY {
            "-Infinity".into()
        } else {
            format!("{v}")
        }
    }

    pub fn from_text(s: &str) -> Option<f64> {
        match s {
            "NaN" => Some(f64::NAN),
            "Infinity" => Some(f64::INFINITY),
            "-Infinity" => Some(f64::NEG_INFINITY),
            _ => s.parse().ok(),
        }
    }

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&to_text(*v))
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => from_text(&t).ok_or_else(|| serde::de::Error::custom(format!("not a number: {t}"))),
        }
    }

    pub mod option {
        use super::*;

        pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
            match v {
                Some(v) => super::serialize(v, s),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
            match Option::<Repr>::deserialize(d)? {
                None => Ok(None),
                Some(Repr::Num(v)) => Ok(Some(v)),
                Some(Repr::Text(t)) => {
                    from_text(&t).map(Some).ok_or_else(|| serde::de::Error::custom(format!("not a number: {t}")))
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    #[serde(with = "float_or_string")]
    pub psnr_db: f64,
    pub ssim: f64,
    #[serde(with = "float_or_string::option", default)]
    pub dice: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    #[serde(with = "float_or_string")]
    pub mean: f64,
    #[serde(with = "float_or_string")]
    pub std: f64,
}

impl Stat {
    /// Mean and population standard deviation. All-infinite inputs (every
    /// image reconstructed exactly) give `std = 0`.
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len() as f64;
        if values.iter().all(|v| v.is_infinite() && *v > 0.0) {
            return Stat { mean: f64::INFINITY, std: 0.0 };
        }
        let mean = values.iter().sum::<f64>() / n;
        if !mean.is_finite() {
            return Stat { mean, std: f64::NAN };
        }
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Stat { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub psnr_db: Stat,
    pub ssim: Stat,
    pub dice: Option<Stat>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub checkpoints: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub records: Vec<ImageRecord>,
    pub aggregates: Aggregates,
    #[serde(with = "float_or_string::option", default)]
    pub sis: Option<f64>,
    pub provenance: Provenance,
}

pub fn aggregate_report(
    method: &str,
    records: Vec<ImageRecord>,
    sis: Option<f64>,
    provenance: Provenance,
) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::Contract("cannot aggregate an empty record list".into()));
    }
    let col = |f: fn(&ImageRecord) -> f64| records.iter().map(f).collect::<Vec<_>>();
    let dice = if records.iter().all(|r| r.dice.is_some()) {
        Some(Stat::of(&records.iter().filter_map(|r| r.dice).collect::<Vec<_>>()))
    } else {
        None
    };
    let aggregates = Aggregates { psnr_db: Stat::of(&col(|r| r.psnr_db)), ssim: Stat::of(&col(|r| r.ssim)), dice };
    Ok(MetricsReport { method: method.to_string(), records, aggregates, sis, provenance })
}

pub const CSV_HEADER: &str = "id,psnr_db,ssim,dice";

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Json { path: "<report>".into(), source: e })
    }

    /// Per-image rows; `dice` is empty when no segmenter was supplied.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let dice = r.dice.map(float_or_string::to_text).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{}", r.id, float_or_string::to_text(r.psnr_db), float_or_string::to_text(r.ssim), dice);
        }
        out
    }

    /// Parses rows written by [`MetricsReport::to_csv`].
    pub fn records_from_csv(text: &str) -> Result<Vec<ImageRecord>> {
        let bad = |line: &str| Error::Contract(format!("malformed metrics CSV row: {line}"));
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err(Error::Contract(format!("metrics CSV must start with '{CSV_HEADER}'")));
        }
        lines
            .map(|line| {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 4 {
                    return Err(bad(line));
                }
                let num = |s: &str| float_or_string::from_text(s).ok_or_else(|| bad(line));
                Ok(ImageRecord {
                    id: f[0].parse().map_err(|_| bad(line))?,
                    psnr_db: num(f[1])?,
                    ssim: num(f[2])?,
                    dice: if f[3].is_empty() { None } else { Some(num(f[3])?) },
                })
            })
            .collect()
    }
}
