//! Test-set reconstruction and scoring of each method.
//!
//! Every method sees the same measurements: the mask and noise of a test
//! image depend only on the evaluation seed and the image id.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kspace::{zero_fill, ComplexImage, KSpaceSample};
use crate::metrics::{aggregate_report, dice, psnr, segment_masks, sis_from_dice, ssim, ImageRecord, MetricsReport, Provenance, SsimConfig};
use crate::networks::{CascadeConfig, RefinerConfig, UNetConfig};
use crate::phantom::{Dataset, LabeledImage};
use crate::tensor::ParamSet;
use crate::training::{arch_from, fixed_samples, load_net, reconstruct_images, refine_images, RECON, REFINE, SEGMENT};

/// A trained network with its configuration and a short content id.
#[derive(Debug, Clone)]
pub struct Loaded<C> {
    pub cfg: C,
    pub params: ParamSet<f32>,
    pub id: String,
}

impl<C: for<'de> Deserialize<'de>> Loaded<C> {
    /// Loads `kind` from a checkpoint directory or a run directory.
    pub fn load(path: &Path, kind: &str) -> Result<Self> {
        let ck = load_net(path, kind)?;
        let cfg = arch_from(&ck, path)?;
        let id = format!("{kind}:{}", &ck.params.fingerprint()[..16]);
        Ok(Self { cfg, params: ck.params, id })
    }
}

pub type Cascade = Loaded<CascadeConfig>;
pub type Refiner = Loaded<RefinerConfig>;
pub type Segmenter = Loaded<UNetConfig>;

impl Cascade {
    pub fn open(path: &Path) -> Result<Self> {
        Self::load(path, RECON)
    }
}

impl Refiner {
    pub fn open(path: &Path) -> Result<Self> {
        Self::load(path, REFINE)
    }
}

impl Segmenter {
    pub fn open(path: &Path) -> Result<Self> {
        Self::load(path, SEGMENT)
    }
}

/// A way of turning test measurements into images.
#[derive(Debug, Clone)]
pub enum Method {
    ZeroFilled,
    Stage1(Cascade),
    /// Frozen stage-1 cascade followed by the refiner.
    Refined(Cascade, Refiner),
    /// Cascade and refiner from the joint ablation.
    Joint(Cascade, Refiner),
    /// The ground truth itself.
    Identity,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::ZeroFilled => "zero-filled",
            Method::Stage1(_) => "stage1",
            Method::Refined(..) => "refined",
            Method::Joint(..) => "joint",
            Method::Identity => "identity",
        }
    }

    /// Loads the joint ablation's cascade and refiner from its run directory.
    pub fn joint(run: &Path) -> Result<Self> {
        Ok(Method::Joint(Cascade::open(run)?, Refiner::open(run)?))
    }

    /// Ids of the checkpoints the method uses.
    pub fn checkpoints(&self) -> Vec<String> {
        match self {
            Method::ZeroFilled | Method::Identity => Vec::new(),
            Method::Stage1(r) => vec![r.id.clone()],
            Method::Refined(r, v) | Method::Joint(r, v) => vec![r.id.clone(), v.id.clone()],
        }
    }

    pub fn reconstruct(&self, samples: &[KSpaceSample], gt: &[&LabeledImage]) -> Result<Vec<ComplexImage>> {
        match self {
            Method::ZeroFilled => Ok(samples.iter().map(zero_fill).collect()),
            Method::Identity => Ok(gt.iter().map(|g| g.image.clone()).collect()),
            Method::Stage1(r) => reconstruct_images(&r.cfg, &r.params, samples),
            Method::Refined(r, v) | Method::Joint(r, v) => {
                let x_rec = reconstruct_images(&r.cfg, &r.params, samples)?;
                refine_images(&v.cfg, &v.params, &x_rec)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub seed: u64,
    pub ratio: f64,
    pub noise_std: f64,
    pub ssim: SsimConfig,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { seed: 0, ratio: 0.25, noise_std: 0.0, ssim: SsimConfig::default() }
    }
}

/// Measurements of every test image.
pub fn test_samples(ds: &Dataset, settings: &EvalSettings) -> Result<Vec<KSpaceSample>> {
    let items: Vec<&LabeledImage> = ds.test.iter().collect();
    fixed_samples(&items, settings.ratio, settings.noise_std, settings.seed, "test")
}

/// Scores reconstructions of the test split. With a segmenter, per-image
/// Dice and the SIS over images with a labelled ROI are included.
pub fn score(
    ds: &Dataset,
    method: &str,
    recon: &[ComplexImage],
    seg: Option<&Segmenter>,
    settings: &EvalSettings,
    checkpoints: Vec<String>,
) -> Result<MetricsReport> {
    let test = &ds.test;
    if recon.len() != test.len() {
        return Err(Error::Shape(format!("{} reconstructions for {} test images", recon.len(), test.len())));
    }
    let peak = ds.spec.intensity_scale;
    let ssim_cfg = settings.ssim.with_range(peak);
    let masks = match seg {
        Some(s) => Some(segment_masks(&s.cfg, &s.params, &recon.iter().collect::<Vec<_>>())?),
        None => None,
    };
    let mut records = Vec::with_capacity(test.len());
    for (i, (item, rec)) in test.iter().zip(recon).enumerate() {
        let (gt_mag, rec_mag) = (item.image.magnitude(), rec.magnitude());
        records.push(ImageRecord {
            id: item.id,
            psnr_db: psnr(&gt_mag, &rec_mag, peak)?,
            ssim: ssim(&gt_mag, &rec_mag, item.image.height(), item.image.width(), &ssim_cfg)?,
            dice: masks.as_ref().map(|m| dice(&m[i], &item.label)).transpose()?,
        });
    }
    let sis = match (seg, &masks) {
        (Some(s), Some(m)) => {
            let cohort: Vec<usize> = (0..test.len()).filter(|&i| test[i].has_roi()).collect();
            let gt_images: Vec<&ComplexImage> = cohort.iter().map(|&i| &test[i].image).collect();
            let gt_masks = segment_masks(&s.cfg, &s.params, &gt_images)?;
            let mut d_rec = Vec::with_capacity(cohort.len());
            let mut d_gt = Vec::with_capacity(cohort.len());
            for (k, &i) in cohort.iter().enumerate() {
                d_rec.push(dice(&m[i], &test[i].label)?);
                d_gt.push(dice(&gt_masks[k], &test[i].label)?);
            }
            Some(sis_from_dice(&d_rec, &d_gt)?)
        }
        _ => None,
    };
    let mut checkpoints = checkpoints;
    if let Some(s) = seg {
        checkpoints.push(s.id.clone());
    }
    let provenance = Provenance {
        dataset_hash: ds.hash(),
        seeds: BTreeMap::from([("dataset".to_string(), ds.spec.seed), ("eval".to_string(), settings.seed)]),
        checkpoints,
    };
    aggregate_report(method, records, sis, provenance)
}

/// Reconstructs and scores the test split with one method.
pub fn evaluate(ds: &Dataset, method: &Method, seg: Option<&Segmenter>, settings: &EvalSettings) -> Result<MetricsReport> {
    let samples = test_samples(ds, settings)?;
    let gt: Vec<&LabeledImage> = ds.test.iter().collect();
    let recon = method.reconstruct(&samples, &gt)?;
    score(ds, method.name(), &recon, seg, settings, method.checkpoints())
}
