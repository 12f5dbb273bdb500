//! Subcommand implementations.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use csmri::evaluation::{score, test_samples, Cascade, EvalSettings, Method, Refiner, Segmenter};
use csmri::kspace::io::{read_complex, write_complex};
use csmri::metrics::{segment_masks, MetricsReport, SsimConfig};
use csmri::networks::Preset;
use csmri::phantom::{generate_dataset, load_dataset, save_dataset, Dataset, LabeledImage, PhantomSpec};
use csmri::training::{read_log, train_joint, train_segmenter, train_stage1, train_stage2, Stage, TrainConfig, RECON, REFINE};
use serde::{Deserialize, Serialize};

use crate::config::{read_resolved, Settings};
use crate::plot::{box_plot, loss_curves, panel, Tile};

/// Index written by `eval` and read by `report`.
pub const EVAL_INDEX: &str = "eval.json";
pub const GROUND_TRUTH: &str = "ground-truth";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    /// Unique name within one eval directory.
    pub label: String,
    pub method: String,
    /// Run directories whose checkpoints the method uses.
    pub runs: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalIndex {
    pub dataset_hash: String,
    pub intensity_scale: f64,
    pub settings: EvalSettings,
    pub segmenter: Option<String>,
    pub methods: Vec<EvalEntry>,
    /// Test ids with saved panel images.
    pub panels: Vec<u64>,
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("cannot write {}", path.display()))
}

pub fn gen_data(mut s: Settings) -> Result<()> {
    let d = PhantomSpec::default();
    s.fallback("seed", d.seed);
    s.fallback("size", d.size);
    s.fallback("n_train", d.n_train);
    s.fallback("n_val", d.n_val);
    s.fallback("n_test", d.n_test);
    s.fallback("ellipses_min", d.ellipses.0);
    s.fallback("ellipses_max", d.ellipses.1);
    s.fallback("roi_contrast", d.roi_contrast);
    s.fallback("roi_fraction", d.roi_fraction);
    s.fallback("phase_amplitude", d.phase_amplitude);
    s.fallback("phase_order", d.phase_order);
    s.fallback("intensity_scale", d.intensity_scale);
    let spec = PhantomSpec {
        size: s.get("size")?,
        n_train: s.get("n_train")?,
        n_val: s.get("n_val")?,
        n_test: s.get("n_test")?,
        ellipses: (s.get("ellipses_min")?, s.get("ellipses_max")?),
        roi_contrast: s.get("roi_contrast")?,
        roi_fraction: s.get("roi_fraction")?,
        phase_amplitude: s.get("phase_amplitude")?,
        phase_order: s.get("phase_order")?,
        intensity_scale: s.get("intensity_scale")?,
        seed: s.get("seed")?,
    };
    let out = s.path("out")?;
    let ds = generate_dataset(&spec)?;
    save_dataset(&ds, &out)?;
    s.write(&out)?;
    println!("dataset {} written to {} ({}/{}/{} images)", ds.hash(), out.display(), ds.train.len(), ds.val.len(), ds.test.len());
    Ok(())
}

fn train_config(stage: Stage, s: &mut Settings) -> Result<TrainConfig> {
    s.fallback("preset", "desk");
    let preset: Preset = s.get("preset")?;
    let d = TrainConfig::new(stage, preset);
    s.fallback("seed", d.seed);
    s.fallback("epochs", d.epochs);
    s.fallback("batch_size", d.batch_size);
    s.fallback("lr", d.adam.lr);
    s.fallback("beta1", d.adam.beta1);
    s.fallback("beta2", d.adam.beta2);
    s.fallback("ratio", d.ratio);
    s.fallback("noise_std", d.noise_std);
    s.fallback("smoothing", d.smoothing);
    s.fallback("replay_capacity", d.replay_capacity);
    s.fallback("replay_p", d.replay_p);
    for k in ["train_limit", "val_limit", "max_steps"] {
        s.fallback(k, "none");
    }
    let mut cfg = TrainConfig {
        epochs: s.get("epochs")?,
        batch_size: s.get("batch_size")?,
        seed: s.get("seed")?,
        ratio: s.get("ratio")?,
        noise_std: s.get("noise_std")?,
        smoothing: s.get("smoothing")?,
        replay_capacity: s.get("replay_capacity")?,
        replay_p: s.get("replay_p")?,
        train_limit: s.opt("train_limit")?,
        val_limit: s.opt("val_limit")?,
        max_steps: s.opt("max_steps")?,
        ..d
    };
    cfg.adam.lr = s.get("lr")?;
    cfg.adam.beta1 = s.get("beta1")?;
    cfg.adam.beta2 = s.get("beta2")?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(stage: Stage, mut s: Settings, resume: bool) -> Result<()> {
    let cfg = train_config(stage, &mut s)?;
    let data_dir = s.path("data")?;
    let out = s.path("out")?;
    let stage1 = if stage == Stage::Refine {
        let p = s.path("stage1_ckpt")?;
        let abs = p.canonicalize().with_context(|| format!("stage-1 checkpoint {} not found", p.display()))?;
        s.set("stage1_ckpt", abs.display().to_string());
        Some(abs)
    } else {
        None
    };
    let data = load_dataset(&data_dir)?;
    s.write(&out)?;
    let summary = match stage {
        Stage::Recon => train_stage1(&cfg, &data, &out, resume)?,
        Stage::Refine => train_stage2(&cfg, &data, stage1.as_deref().expect("checked"), &out, resume)?,
        Stage::Joint => train_joint(&cfg, &data, &out, resume)?,
        Stage::Segment => train_segmenter(&cfg, &data, &out, resume)?,
    };
    let st = &summary.state;
    match st.best_epoch {
        Some(e) => println!("{} steps; best epoch {} (score {:.6}); checkpoints in {}", st.global_step, e + 1, st.best_score.unwrap_or(f64::NAN), summary.best_dir.display()),
        None => println!("{} steps; checkpoints in {}", st.global_step, summary.best_dir.display()),
    }
    Ok(())
}

fn eval_settings(s: &mut Settings, with_ssim: bool) -> Result<EvalSettings> {
    let d = EvalSettings::default();
    s.fallback("seed", d.seed);
    s.fallback("ratio", d.ratio);
    s.fallback("noise_std", d.noise_std);
    let ssim = if with_ssim {
        s.fallback("ssim_window", "gaussian");
        match s.require("ssim_window")? {
            "gaussian" => SsimConfig::default(),
            "block8" => SsimConfig::block8(),
            other => bail!("invalid value '{other}' for ssim_window: expected gaussian or block8"),
        }
    } else {
        d.ssim
    };
    Ok(EvalSettings { seed: s.get("seed")?, ratio: s.get("ratio")?, noise_std: s.get("noise_std")?, ssim })
}

pub fn recon(mut s: Settings) -> Result<()> {
    let settings = eval_settings(&mut s, false)?;
    let ds = load_dataset(&s.path("data")?)?;
    let out = s.path("out")?;
    let r = Cascade::open(&s.path("ckpt")?)?;
    let mut methods = vec![Method::ZeroFilled, Method::Stage1(r.clone())];
    if let Some(p) = s.opt_path("refine_ckpt") {
        methods.push(Method::Refined(r, Refiner::open(&p)?));
    }
    let samples = test_samples(&ds, &settings)?;
    let gt: Vec<&LabeledImage> = ds.test.iter().collect();
    s.write(&out)?;
    for m in &methods {
        let images = m.reconstruct(&samples, &gt)?;
        for (item, img) in gt.iter().zip(&images) {
            write_complex(&out.join(m.name()).join(item.id.to_string()), img)?;
        }
        println!("{}: {} images in {}", m.name(), images.len(), out.join(m.name()).display());
    }
    Ok(())
}

/// Whether `dir` holds a `kind` checkpoint, directly or as `best/<kind>`.
fn has_checkpoint(dir: &Path, kind: &str) -> bool {
    if dir.join("best").join(kind).join("manifest.json").exists() {
        return true;
    }
    let Ok(text) = fs::read_to_string(dir.join("manifest.json")) else { return false };
    serde_json::from_str::<serde_json::Value>(&text).ok().and_then(|v| v.get("kind").and_then(|k| k.as_str()).map(|k| k == kind)) == Some(true)
}

/// Works out which method a run directory holds: a cascade alone is
/// stage 1, cascade plus refiner the joint ablation, and a refiner alone a
/// stage-2 run whose cascade is named in its `config.txt`.
pub fn open_method(spec: &str) -> Result<(Method, Vec<PathBuf>)> {
    match spec {
        "identity" => return Ok((Method::Identity, Vec::new())),
        "zero-filled" => return Ok((Method::ZeroFilled, Vec::new())),
        _ => {}
    }
    let dir = PathBuf::from(spec).canonicalize().with_context(|| format!("checkpoint directory {spec} does not exist"))?;
    match (has_checkpoint(&dir, RECON), has_checkpoint(&dir, REFINE)) {
        (true, true) => Ok((Method::Joint(Cascade::open(&dir)?, Refiner::open(&dir)?), vec![dir])),
        (true, false) => Ok((Method::Stage1(Cascade::open(&dir)?), vec![dir])),
        (false, true) => {
            let resolved = read_resolved(&dir).context("a refiner run needs the config.txt naming its stage-1 checkpoint")?;
            let stage1 = PathBuf::from(
                resolved.get("stage1_ckpt").ok_or_else(|| anyhow!("{} has no stage1_ckpt entry", dir.join("config.txt").display()))?,
            );
            Ok((Method::Refined(Cascade::open(&stage1)?, Refiner::open(&dir)?), vec![stage1, dir]))
        }
        (false, false) => bail!("no reconstruction checkpoint in {}", dir.display()),
    }
}

fn write_mask(path: &Path, mask: &[u8]) -> Result<()> {
    write(path, mask)
}

pub fn eval(mut s: Settings) -> Result<()> {
    let settings = eval_settings(&mut s, true)?;
    s.fallback("panels", 4);
    let n_panels: usize = s.get("panels")?;
    let ds = load_dataset(&s.path("data")?)?;
    let out = s.path("out")?;
    let seg = s.opt_path("seg_ckpt").map(|p| Segmenter::open(&p)).transpose()?;

    let mut methods = vec![(Method::ZeroFilled, Vec::new())];
    for spec in s.list("ckpts") {
        let (m, runs) = open_method(&spec)?;
        if !matches!(m, Method::ZeroFilled) {
            methods.push((m, runs));
        }
    }
    s.write(&out)?;

    let test: Vec<&LabeledImage> = ds.test.iter().collect();
    let panel_ids: Vec<usize> = (0..test.len()).filter(|&i| test[i].has_roi()).take(n_panels).collect();
    let samples = test_samples(&ds, &settings)?;
    let panel_dir = out.join("panels");
    save_ground_truth_panels(&ds, &panel_ids, seg.as_ref(), &panel_dir.join(GROUND_TRUTH))?;

    let mut entries = Vec::new();
    let mut used = BTreeSet::new();
    for (method, runs) in &methods {
        let mut label = method.name().to_string();
        let mut k = 2;
        while !used.insert(label.clone()) {
            label = format!("{}-{k}", method.name());
            k += 1;
        }
        let recon = method.reconstruct(&samples, &test)?;
        let report = score(&ds, method.name(), &recon, seg.as_ref(), &settings, method.checkpoints())?;
        let dir = out.join(&label);
        write(&dir.join("metrics.json"), report.to_json())?;
        write(&dir.join("metrics.csv"), report.to_csv())?;
        let pdir = panel_dir.join(&label);
        let chosen: Vec<&csmri::kspace::ComplexImage> = panel_ids.iter().map(|&i| &recon[i]).collect();
        let masks = match &seg {
            Some(sg) => Some(segment_masks(&sg.cfg, &sg.params, &chosen)?),
            None => None,
        };
        for (j, &i) in panel_ids.iter().enumerate() {
            let stem = pdir.join(test[i].id.to_string());
            write_complex(&stem, chosen[j])?;
            if let Some(m) = &masks {
                write_mask(&stem.with_extension("mask.u8"), &m[j])?;
            }
        }
        let a = &report.aggregates;
        println!(
            "{label:>12}: PSNR {:.3} ± {:.3} dB, SSIM {:.4} ± {:.4}{}",
            a.psnr_db.mean,
            a.psnr_db.std,
            a.ssim.mean,
            a.ssim.std,
            report.sis.map(|v| format!(", SIS {v:.4}")).unwrap_or_default()
        );
        entries.push(EvalEntry { label, method: method.name().into(), runs: runs.clone() });
    }
    let index = EvalIndex {
        dataset_hash: ds.hash(),
        intensity_scale: ds.spec.intensity_scale,
        settings,
        segmenter: seg.as_ref().map(|s| s.id.clone()),
        methods: entries,
        panels: panel_ids.iter().map(|&i| test[i].id).collect(),
    };
    write(&out.join(EVAL_INDEX), serde_json::to_string_pretty(&index)? + "\n")
}

fn save_ground_truth_panels(ds: &Dataset, ids: &[usize], seg: Option<&Segmenter>, dir: &Path) -> Result<()> {
    let items: Vec<&LabeledImage> = ids.iter().map(|&i| &ds.test[i]).collect();
    let images: Vec<&csmri::kspace::ComplexImage> = items.iter().map(|i| &i.image).collect();
    let masks = match seg {
        Some(sg) => Some(segment_masks(&sg.cfg, &sg.params, &images)?),
        None => None,
    };
    for (j, item) in items.iter().enumerate() {
        let stem = dir.join(item.id.to_string());
        write_complex(&stem, &item.image)?;
        write_mask(&stem.with_extension("label.u8"), &item.label)?;
        if let Some(m) = &masks {
            write_mask(&stem.with_extension("mask.u8"), &m[j])?;
        }
    }
    Ok(())
}

fn read_index(dir: &Path) -> Result<EvalIndex> {
    let path = dir.join(EVAL_INDEX);
    let text = fs::read_to_string(&path).with_context(|| format!("{} is not an eval directory (no {EVAL_INDEX})", dir.display()))?;
    serde_json::from_str(&text).with_context(|| format!("cannot parse {}", path.display()))
}

fn read_report(path: &Path) -> Result<MetricsReport> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    MetricsReport::from_json(&text).with_context(|| format!("cannot parse {}", path.display()))
}

fn fmt(v: f64) -> String {
    csmri::metrics::float_or_string::to_text(v)
}

fn safe(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn read_optional(path: &Path) -> Option<Vec<u8>> {
    fs::read(path).ok()
}

pub fn report(s: Settings) -> Result<()> {
    let dirs: Vec<PathBuf> = s.list("eval_dirs").into_iter().map(PathBuf::from).collect();
    if dirs.is_empty() {
        bail!("report needs --eval-dirs");
    }
    let out = s.path("out")?;
    s.write(&out)?;
    let multi = dirs.len() > 1;
    let prefix = |d: &Path, i: usize| d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| format!("eval{i}"));

    let mut summary = String::from("label,method,n,psnr_mean,psnr_std,ssim_mean,ssim_std,dice_mean,dice_std,sis\n");
    let mut records = String::from("label,id,psnr_db,ssim,dice\n");
    let (mut psnr_groups, mut ssim_groups) = (Vec::new(), Vec::new());
    let mut runs: Vec<PathBuf> = Vec::new();
    for (i, dir) in dirs.iter().enumerate() {
        let index = read_index(dir)?;
        for e in &index.methods {
            let rep = read_report(&dir.join(&e.label).join("metrics.json"))?;
            let label = if multi { format!("{}/{}", prefix(dir, i), e.label) } else { e.label.clone() };
            let a = &rep.aggregates;
            let (dm, ds) = a.dice.map(|d| (fmt(d.mean), fmt(d.std))).unwrap_or_default();
            summary.push_str(&format!(
                "{label},{},{},{},{},{},{},{dm},{ds},{}\n",
                e.method,
                rep.records.len(),
                fmt(a.psnr_db.mean),
                fmt(a.psnr_db.std),
                fmt(a.ssim.mean),
                fmt(a.ssim.std),
                rep.sis.map(fmt).unwrap_or_default()
            ));
            for r in &rep.records {
                records.push_str(&format!("{label},{},{},{},{}\n", r.id, fmt(r.psnr_db), fmt(r.ssim), r.dice.map(fmt).unwrap_or_default()));
            }
            psnr_groups.push((label.clone(), rep.records.iter().map(|r| r.psnr_db).collect::<Vec<_>>()));
            ssim_groups.push((label, rep.records.iter().map(|r| r.ssim).collect::<Vec<_>>()));
            for r in &e.runs {
                if !runs.contains(r) {
                    runs.push(r.clone());
                }
            }
        }
        write_panels(dir, &index, &out, multi.then(|| prefix(dir, i)))?;
    }
    write(&out.join("summary.csv"), &summary)?;
    write(&out.join("records.csv"), &records)?;
    write(&out.join("psnr_box.svg"), box_plot("PSNR on the test split", "PSNR (dB)", &psnr_groups))?;
    write(&out.join("ssim_box.svg"), box_plot("SSIM on the test split", "SSIM", &ssim_groups))?;

    let mut names = BTreeSet::new();
    for run in &runs {
        let log = run.join("log.jsonl");
        if !log.exists() {
            log::warn!("no training log in {}", run.display());
            continue;
        }
        let base = safe(&run.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into()));
        let mut name = base.clone();
        let mut k = 2;
        while !names.insert(name.clone()) {
            name = format!("{base}-{k}");
            k += 1;
        }
        let recs = read_log(&log)?;
        write(&out.join(format!("loss_{name}.svg")), loss_curves(&format!("training log of {}", run.display()), &recs))?;
    }
    print!("{summary}");
    Ok(())
}

/// One PNG per saved test image: ground truth, then every method in eval
/// order. Yellow outlines are predicted segmentations, red the label.
fn write_panels(dir: &Path, index: &EvalIndex, out: &Path, prefix: Option<String>) -> Result<()> {
    let pdir = dir.join("panels");
    let mut legend = format!("columns: {}", GROUND_TRUTH);
    for e in &index.methods {
        legend.push_str(&format!(", {}", e.label));
    }
    legend.push_str("\nyellow: predicted segmentation; red: ground-truth label\n");
    let stem = |p: &str| match &prefix {
        Some(x) => format!("{}_{p}", safe(x)),
        None => p.to_string(),
    };
    for id in &index.panels {
        let gt_stem = pdir.join(GROUND_TRUTH).join(id.to_string());
        let label = read_optional(&gt_stem.with_extension("label.u8"));
        let mut tiles = Vec::new();
        let mut add = |img_stem: &Path| -> Result<()> {
            let img = read_complex(img_stem)?;
            tiles.push(Tile {
                magnitude: img.magnitude(),
                height: img.height(),
                width: img.width(),
                predicted: read_optional(&img_stem.with_extension("mask.u8")),
                truth: label.clone(),
            });
            Ok(())
        };
        add(&gt_stem)?;
        for e in &index.methods {
            add(&pdir.join(&e.label).join(id.to_string()))?;
        }
        let img = panel(&tiles, index.intensity_scale, 4);
        let path = out.join(stem(&format!("panel_{id}.png")));
        img.save(&path).with_context(|| format!("cannot write {}", path.display()))?;
    }
    write(&out.join(stem("panels.txt")), legend)
}
