//! Acceptance criteria AC-1 to AC-10, one PASS/FAIL line each.
//!
//! `cargo test -p csmri-cli --test acceptance -- AC-1 AC-8` runs a subset.
//! The desk-scale criteria train networks through the `csmri` binary in a
//! temporary directory; set `CSMRI_ACCEPTANCE_DIR` to keep the artifacts.

mod desk;
mod properties;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Result;

pub struct Verdict {
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }

    pub fn pass(detail: impl Into<String>) -> Self {
        Self::new(true, detail)
    }

    pub fn fail(detail: impl Into<String>) -> Self {
        Self::new(false, detail)
    }
}

fn panic_text(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default()
}

fn main() -> ExitCode {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| a.starts_with("AC-")).collect();
    let wanted = |id: &str| filter.is_empty() || filter.iter().any(|f| f == id);
    let mut desk = match desk::Desk::new() {
        Ok(d) => d,
        Err(e) => {
            eprintln!("cannot set up the work directory: {e:#}");
            return ExitCode::FAILURE;
        }
    };

    type Run<'a> = Box<dyn FnOnce(&mut desk::Desk) -> Result<Verdict> + 'a>;
    let criteria: Vec<(&str, Run)> = vec![
        ("AC-1", Box::new(|_| properties::ac1())),
        ("AC-2", Box::new(|_| properties::ac2())),
        ("AC-8", Box::new(|_| properties::ac8())),
        ("AC-9", Box::new(|_| properties::ac9())),
        ("AC-3", Box::new(desk::ac3)),
        ("AC-6", Box::new(desk::ac6)),
        ("AC-7", Box::new(desk::ac7)),
        ("AC-4", Box::new(desk::ac4)),
        ("AC-5", Box::new(desk::ac5)),
        ("AC-10", Box::new(desk::ac10)),
    ];

    let mut failed = Vec::new();
    for (id, run) in criteria {
        if !wanted(id) {
            continue;
        }
        let start = Instant::now();
        let verdict = match catch_unwind(AssertUnwindSafe(|| run(&mut desk))) {
            Ok(Ok(v)) => v,
            Ok(Err(e)) => Verdict::fail(format!("error: {e:#}")),
            Err(p) => Verdict::fail(format!("panicked: {}", panic_text(p))),
        };
        let status = if verdict.pass { "PASS" } else { "FAIL" };
        println!("{id} {status} [{:.1} s] {}", start.elapsed().as_secs_f64(), verdict.detail);
        if !verdict.pass {
            failed.push(id);
        }
    }
    if let Some(dir) = desk.kept() {
        println!("artifacts kept in {}", dir.display());
    }
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
