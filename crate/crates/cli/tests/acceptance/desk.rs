//! Desk-scale criteria, run end to end through the `csmri` binary.
//!
//! The dataset is the default 64x64 phantom set (600/150/150) at 4x
//! undersampling. Schedules are sized so that three seeds of stage 1,
//! stage 2 and the joint ablation fit the runtime budget on one CPU core.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use csmri::kspace::io::read_complex;
use csmri::losses::LossCalibration;
use csmri::metrics::MetricsReport;
use csmri::phantom::load_dataset;
use csmri::training::{LogRecord, TrainState};
use tempfile::TempDir;

use crate::Verdict;

const SEEDS: [u64; 3] = [0, 1, 2];
const RECON_EPOCHS: u64 = 10;
const REFINE_EPOCHS: u64 = 5;
const JOINT_EPOCHS: u64 = 10;
const SEG_EPOCHS: u64 = 20;
const SEG_LR: f64 = 1e-3;

const STAGE1_BUDGET_S: f64 = 15.0 * 60.0;
const ORDERING_BUDGET_S: f64 = 45.0 * 60.0;

/// Scores of one method read back from `metrics.json`.
#[derive(Debug, Clone)]
struct Scores {
    psnr: f64,
    sis: Option<f64>,
    report: MetricsReport,
}

#[derive(Debug, Clone)]
struct SeedRun {
    seconds: f64,
    methods: BTreeMap<String, Scores>,
}

pub struct Desk {
    root: PathBuf,
    _temp: Option<TempDir>,
    data: bool,
    stage1: BTreeMap<u64, f64>,
    seg: Option<f64>,
    seeds: BTreeMap<u64, SeedRun>,
}

fn seconds(start: Instant) -> f64 {
    start.elapsed().as_secs_f64()
}

fn progress(msg: &str) {
    eprintln!("  .. {msg}");
}

impl Desk {
    pub fn new() -> Result<Self> {
        let (root, temp) = match std::env::var_os("CSMRI_ACCEPTANCE_DIR") {
            Some(d) => {
                let root = PathBuf::from(d);
                fs::create_dir_all(&root).with_context(|| format!("cannot create {}", root.display()))?;
                (root, None)
            }
            None => {
                let t = tempfile::Builder::new().prefix("csmri-acceptance").tempdir()?;
                (t.path().to_path_buf(), Some(t))
            }
        };
        Ok(Self { root, _temp: temp, data: false, stage1: BTreeMap::new(), seg: None, seeds: BTreeMap::new() })
    }

    pub fn kept(&self) -> Option<&Path> {
        self._temp.is_none().then_some(self.root.as_path())
    }

    fn run(&self, args: &[String]) -> Result<String> {
        run_in(&self.root, args)
    }

    fn data(&mut self) -> Result<()> {
        if !self.data {
            progress("generating the phantom dataset");
            self.run(&args(&["gen-data", "--out", "data", "--seed", "0"]))?;
            self.data = true;
        }
        Ok(())
    }

    /// Stage-1 training for `seed`; returns its wall time.
    fn stage1(&mut self, seed: u64) -> Result<f64> {
        self.data()?;
        if let Some(&t) = self.stage1.get(&seed) {
            return Ok(t);
        }
        progress(&format!("stage 1, seed {seed}"));
        let start = Instant::now();
        let out = format!("s{seed}/stage1");
        self.run(&train("train-recon", &out, seed, RECON_EPOCHS, &[]))?;
        let t = seconds(start);
        self.stage1.insert(seed, t);
        Ok(t)
    }

    fn segmenter(&mut self) -> Result<f64> {
        self.data()?;
        if let Some(t) = self.seg {
            return Ok(t);
        }
        progress("segmenter");
        let start = Instant::now();
        self.run(&train("train-seg", "seg", 0, SEG_EPOCHS, &["--lr", &SEG_LR.to_string()]))?;
        let t = seconds(start);
        self.seg = Some(t);
        Ok(t)
    }

    /// Stage 1, stage 2, joint ablation and evaluation for one seed.
    fn seed_run(&mut self, seed: u64) -> Result<SeedRun> {
        if let Some(r) = self.seeds.get(&seed) {
            return Ok(r.clone());
        }
        self.segmenter()?;
        let mut total = self.stage1(seed)?;
        let start = Instant::now();
        let dir = format!("s{seed}");
        progress(&format!("stage 2, seed {seed}"));
        let s1 = format!("{dir}/stage1");
        self.run(&train("train-refine", &format!("{dir}/refine"), seed, REFINE_EPOCHS, &["--stage1-ckpt", &s1]))?;
        progress(&format!("joint ablation, seed {seed}"));
        self.run(&train("ablate-joint", &format!("{dir}/joint"), seed, JOINT_EPOCHS, &[]))?;
        let eval = format!("{dir}/eval");
        self.run(&args(&[
            "eval", "--data", "data", "--ckpts", &s1, &format!("{dir}/refine"), &format!("{dir}/joint"), "identity",
            "--seg-ckpt", "seg", "--seed", &seed.to_string(), "--out", &eval,
        ]))?;
        self.run(&args(&["report", "--eval-dirs", &eval, "--out", &format!("{dir}/report")]))?;
        total += seconds(start);
        let mut methods = BTreeMap::new();
        for m in ["zero-filled", "stage1", "refined", "joint", "identity"] {
            methods.insert(m.to_string(), scores(&self.root.join(&eval).join(m))?);
        }
        let run = SeedRun { seconds: total, methods };
        self.seeds.insert(seed, run.clone());
        Ok(run)
    }
}

fn args(a: &[&str]) -> Vec<String> {
    a.iter().map(|s| s.to_string()).collect()
}

fn train(cmd: &str, out: &str, seed: u64, epochs: u64, extra: &[&str]) -> Vec<String> {
    let mut a = args(&[cmd, "--data", "data", "--out", out, "--seed", &seed.to_string(), "--epochs", &epochs.to_string()]);
    a.extend(args(extra));
    a
}

fn run_in(dir: &Path, args: &[String]) -> Result<String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_csmri"));
    cmd.current_dir(dir).args(args);
    if std::env::var_os(csmri_cli::LOG_ENV).is_none() {
        cmd.env(csmri_cli::LOG_ENV, "warn");
    }
    let out = cmd.output().with_context(|| format!("cannot start csmri {}", args.join(" ")))?;
    if !out.status.success() {
        bail!("csmri {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim());
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn scores(dir: &Path) -> Result<Scores> {
    let path = dir.join("metrics.json");
    let text = fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
    let report = MetricsReport::from_json(&text)?;
    Ok(Scores { psnr: report.aggregates.psnr_db.mean, sis: report.sis, report })
}

pub fn ac3(desk: &mut Desk) -> Result<Verdict> {
    let t = desk.stage1(0)?;
    desk.run(&args(&["eval", "--data", "data", "--ckpts", "s0/stage1", "--seed", "0", "--out", "s0/eval-stage1"]))?;
    let zf = scores(&desk.root.join("s0/eval-stage1/zero-filled"))?.psnr;
    let s1 = scores(&desk.root.join("s0/eval-stage1/stage1"))?.psnr;
    Ok(Verdict::new(
        s1 >= zf + 3.0 && t <= STAGE1_BUDGET_S,
        format!(
            "stage-1 test PSNR {s1:.3} dB vs zero-filled {zf:.3} dB (gain {:+.3}, need >= +3); {RECON_EPOCHS} epochs in {t:.0} s (budget {STAGE1_BUDGET_S:.0} s)",
            s1 - zf
        ),
    ))
}

pub fn ac6(desk: &mut Desk) -> Result<Verdict> {
    desk.stage1(0)?;
    desk.run(&train("train-refine", "s0/refine-init", 0, 0, &["--stage1-ckpt", "s0/stage1"]))?;
    desk.run(&args(&["recon", "--data", "data", "--ckpt", "s0/stage1", "--refine-ckpt", "s0/refine-init", "--out", "s0/recon-init"]))?;
    let ds = load_dataset(&desk.root.join("data"))?;
    let rec = desk.root.join("s0/recon-init");
    let mut worst = 0f64;
    for item in &ds.test {
        let a = read_complex(&rec.join("stage1").join(item.id.to_string()))?;
        let b = read_complex(&rec.join("refined").join(item.id.to_string()))?;
        worst = worst.max(a.max_abs_diff(&b));
    }
    Ok(Verdict::new(worst == 0.0, format!("max |x_hat - R(x_u)| = {worst:e} over {} test images at stage-2 initialization", ds.test.len())))
}

fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    text.lines().map(|l| serde_json::from_str(l).with_context(|| format!("bad line in {}", path.display()))).collect()
}

pub fn ac7(desk: &mut Desk) -> Result<Verdict> {
    const STEPS: u64 = 1000;
    desk.stage1(0)?;
    progress("stage 2 calibration run");
    let extra = ["--stage1-ckpt", "s0/stage1", "--train-limit", "16", "--val-limit", "8", "--batch-size", "2", "--max-steps", "1000"];
    desk.run(&train("train-refine", "s0/calibration", 0, 1000, &extra))?;
    let dir = desk.root.join("s0/calibration");
    let log = read_log(&dir.join("log.jsonl"))?;
    let steps: Vec<&LogRecord> = log.iter().filter(|r| r.kind == "step").collect();
    let first = steps.first().context("empty log")?;
    ensure!(first.step == 1, "first logged step is {}", first.step);
    let c: LossCalibration = first.calibration.context("step 1 carries no calibration")?;
    let part = |r: &LogRecord, k: &str| r.losses.get(k).copied().with_context(|| format!("step {} has no '{k}' loss", r.step));
    let ratios = [part(first, "adv")? / c.m, part(first, "feat")? / c.n, part(first, "vgg")? / c.o];
    let penalty = c.alpha * part(first, "pen")?;
    let ratio_err = ratios.iter().map(|r| (r - 1.0).abs()).fold(0.0, f64::max);

    let state: TrainState = serde_json::from_str(&fs::read_to_string(dir.join("last/state.json"))?)?;
    let later: Vec<&&LogRecord> = steps.iter().filter(|r| r.step > 1 && r.calibration.is_some()).collect();
    let last = steps.last().context("empty log")?;
    // The logged total at the last step, recomputed from the step-1 constants.
    let total = c.total(&csmri::losses::PartValues {
        adv: part(last, "adv")?,
        feat: part(last, "feat")?,
        vgg: part(last, "vgg")?,
        pen: part(last, "pen")?,
    })?;
    let total_err = (total - part(last, "total")?).abs() / total.abs();
    let unchanged = state.calibration == Some(c) && later.is_empty() && state.global_step == STEPS && last.step == STEPS;
    let pass = ratio_err <= 1e-6 && (penalty - 0.1).abs() <= 1e-6 && unchanged && total_err <= 1e-5;
    Ok(Verdict::new(
        pass,
        format!(
            "step 1: L_adv/M {:?}, L_feat/N {:?}, L_VGG/O {:?}, alpha*L_pen {penalty:?}; step {}: stored constants {} the step-1 values, \
             logged total matches them to {total_err:.1e}",
            ratios[0],
            ratios[1],
            ratios[2],
            state.global_step,
            if state.calibration == Some(c) && later.is_empty() { "equal" } else { "DIFFER from" }
        ),
    ))
}

pub fn ac4(desk: &mut Desk) -> Result<Verdict> {
    let mut lines = Vec::new();
    let (mut ok, mut total) = (0, 0.0);
    for seed in SEEDS {
        let r = desk.seed_run(seed)?;
        total += r.seconds;
        let p = |m: &str| r.methods[m].psnr;
        let (s1, two, joint) = (p("stage1"), p("refined"), p("joint"));
        let holds = s1 >= two && two >= joint && s1 - two <= 1.5;
        ok += holds as usize;
        lines.push(format!(
            "seed {seed}: stage1 {s1:.3} / two-stage {two:.3} / joint {joint:.3} dB (gap {:.3}) {}",
            s1 - two,
            if holds { "ok" } else { "violated" }
        ));
    }
    Ok(Verdict::new(
        ok >= 2 && total <= ORDERING_BUDGET_S,
        format!("{ok}/3 seeds satisfy the ordering (need 2); {}; {total:.0} s (budget {ORDERING_BUDGET_S:.0} s)", lines.join("; ")),
    ))
}

pub fn ac5(desk: &mut Desk) -> Result<Verdict> {
    let seg_time = desk.segmenter()?;
    let ds = load_dataset(&desk.root.join("data"))?;
    let cohort: BTreeSet<u64> = ds.test.iter().filter(|i| i.has_roi()).map(|i| i.id).collect();
    let mut lines = Vec::new();
    let (mut ok, mut identity_exact, mut gt_dice) = (0, true, None);
    for seed in SEEDS {
        let r = desk.seed_run(seed)?;
        let sis = |m: &str| r.methods[m].sis.context("evaluation ran without a segmenter");
        let (s1, two, id) = (sis("stage1")?, sis("refined")?, sis("identity")?);
        identity_exact &= id == 1.0;
        let holds = two >= s1;
        ok += holds as usize;
        lines.push(format!("seed {seed}: SIS stage1 {s1:.5} / two-stage {two:.5} {}", if holds { "ok" } else { "violated" }));
        if gt_dice.is_none() {
            let d: Vec<f64> = r.methods["identity"].report.records.iter().filter(|x| cohort.contains(&x.id)).filter_map(|x| x.dice).collect();
            ensure!(d.len() == cohort.len(), "identity report lacks Dice values");
            gt_dice = Some(d.iter().sum::<f64>() / d.len() as f64);
        }
    }
    let gt = gt_dice.expect("at least one seed");
    Ok(Verdict::new(
        ok >= 2 && gt >= 0.85 && identity_exact,
        format!(
            "{ok}/3 seeds improve SIS (need 2); {}; segmenter GT Dice {gt:.4} on {} ROI test images (need >= 0.85, trained in {seg_time:.0} s); identity SIS exactly 1: {identity_exact}",
            lines.join("; "),
            cohort.len()
        ),
    ))
}

/// Every file under `root`, keyed by relative path.
fn snapshot(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).with_context(|| format!("cannot list {}", d.display()))? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root)?.to_path_buf(), fs::read(&p)?);
            }
        }
    }
    Ok(out)
}

const SMALL: [&str; 6] = ["--train-limit", "16", "--val-limit", "8", "--batch-size", "4"];
const SMALL_EPOCHS: u64 = 2;

/// A short desk workflow in `dir`: data, all four trainers, evaluation.
fn workflow(root: &Path, dir: &str) -> Result<()> {
    fs::create_dir_all(root.join(dir))?;
    let here = root.join(dir);
    run_in(&here, &args(&["gen-data", "--out", "data", "--seed", "0"]))?;
    run_in(&here, &train("train-recon", "s1", 0, SMALL_EPOCHS, &SMALL))?;
    let mut refine = SMALL.to_vec();
    refine.extend(["--stage1-ckpt", "s1"]);
    run_in(&here, &train("train-refine", "s2", 0, SMALL_EPOCHS, &refine))?;
    run_in(&here, &train("train-seg", "seg", 0, SMALL_EPOCHS, &SMALL))?;
    run_in(&here, &train("ablate-joint", "joint", 0, SMALL_EPOCHS, &SMALL))?;
    run_in(&here, &args(&["eval", "--data", "data", "--ckpts", "s1", "s2", "joint", "identity", "--seg-ckpt", "seg", "--out", "eval"]))?;
    Ok(())
}

pub fn ac10(desk: &mut Desk) -> Result<Verdict> {
    let root = desk.root.join("determinism");
    progress("two short workflows");
    workflow(&root, "a")?;
    workflow(&root, "b")?;
    let mut differ = Vec::new();
    let mut compared = 0;
    for m in ["zero-filled", "stage1", "refined", "joint", "identity"] {
        let f = format!("eval/{m}/metrics.json");
        let (a, b) = (fs::read(root.join("a").join(&f))?, fs::read(root.join("b").join(&f))?);
        compared += 1;
        if a != b {
            differ.push(f);
        }
    }

    // Interrupt each trainer twice mid-epoch and resume; the result must
    // equal workflow `a`'s uninterrupted run file for file.
    progress("interrupted and resumed training");
    let here = root.join("a");
    let mut resumed = Vec::new();
    for (cmd, run) in [("train-recon", "s1"), ("train-refine", "s2"), ("train-seg", "seg"), ("ablate-joint", "joint")] {
        let out = format!("resumed-{run}");
        let mut extra = SMALL.to_vec();
        if cmd == "train-refine" {
            extra.extend(["--stage1-ckpt", "s1"]);
        }
        let base = train(cmd, &out, 0, SMALL_EPOCHS, &extra);
        for (flag, steps) in [(None, "3"), (Some("--resume"), "6")] {
            let mut a = base.clone();
            a.extend(flag.map(String::from));
            a.extend(args(&["--max-steps", steps]));
            run_in(&here, &a)?;
        }
        let mut last = base.clone();
        last.push("--resume".into());
        run_in(&here, &last)?;
        let (mut x, mut y) = (snapshot(&here.join(run))?, snapshot(&here.join(&out))?);
        // The recorded settings necessarily differ in the output directory.
        for m in [&mut x, &mut y] {
            if let Some(cfg) = m.get_mut(Path::new("config.txt")) {
                let kept: Vec<&str> = std::str::from_utf8(cfg)?.lines().filter(|l| !l.starts_with("out = ")).collect();
                *cfg = kept.join("\n").into_bytes();
            }
        }
        let mismatched: Vec<String> = x
            .keys()
            .chain(y.keys())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .filter(|k| x.get(*k) != y.get(*k))
            .map(|k| k.display().to_string())
            .collect();
        if !mismatched.is_empty() {
            differ.push(format!("{run} after resume: {}", mismatched.join(" ")));
        }
        resumed.push(run);
    }
    Ok(Verdict::new(
        differ.is_empty(),
        format!(
            "{compared} metrics.json files compared across two workflows; {} trainers resumed twice and compared file by file with uninterrupted runs (config.txt without its out line){}",
            resumed.len(),
            if differ.is_empty() { String::new() } else { format!("; differences: {}", differ.join("; ")) }
        ),
    ))
}
