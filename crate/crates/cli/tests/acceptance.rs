//! Acceptance suite: one pass/fail line per criterion, then supplementary
//! directional checks. Criteria 7 to 10 drive the `modfus` binary end to end.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use common::Check;
use modfus::checkpoint::Checkpoint;
use modfus::dataset::Dataset;

const DESK_EPOCHS: &str = "200";
const DESK_LR: &str = "0.001";
const LENGTH_EPOCHS: &str = "100";

struct Line {
    id: String,
    name: &'static str,
    check: Check,
    secs: f64,
}

fn timed(id: &str, name: &'static str, limit_secs: f64, f: impl FnOnce() -> Check) -> Line {
    let start = Instant::now();
    let mut check = f();
    let secs = start.elapsed().as_secs_f64();
    if secs > limit_secs {
        check.pass = false;
        check.detail.push_str(&format!("; runtime {secs:.1} s exceeds {limit_secs} s"));
    }
    line(id, name, check, secs)
}

fn line(id: &str, name: &'static str, check: Check, secs: f64) -> Line {
    let l = Line { id: id.into(), name, check, secs };
    print_line(&l);
    l
}

fn print_line(l: &Line) {
    println!(
        "{:<12} {} {} ({:.1} s): {}",
        l.id,
        if l.check.pass { "PASS" } else { "FAIL" },
        l.name,
        l.secs,
        l.check.detail
    );
}

fn modfus(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_modfus"))
        .args(args)
        .env_remove("MODFUS_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("modfus {args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// `condition -> value` for every `(condition, "all", metric)` row of a summary CSV.
fn summary(path: &Path, metric: &str) -> BTreeMap<String, f64> {
    let mut rdr = csv::Reader::from_path(path).expect("summary csv");
    rdr.records()
        .map(|r| r.expect("csv row"))
        .filter(|r| &r[3] == metric)
        .map(|r| (r[1].to_string(), r[4].parse().expect("value")))
        .collect()
}

fn loss_column(path: &Path) -> Vec<f64> {
    let mut rdr = csv::Reader::from_path(path).expect("loss csv");
    rdr.records().map(|r| r.expect("row")[4].parse().expect("value")).collect()
}

fn csv_files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).expect("read dir") {
            let p = e.expect("entry").path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") {
                out.push(p.strip_prefix(dir).expect("prefix").to_path_buf());
            }
        }
    }
    out.sort();
    out
}

/// Outputs of one desk run: synthesis, training, probe and ablation.
struct DeskRun {
    root: PathBuf,
    model: PathBuf,
    model_bytes_before_probe: Vec<u8>,
    train_probe_secs: f64,
    ablate_secs: f64,
}

impl DeskRun {
    fn dir(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

fn desk_run(root: &Path) -> Result<DeskRun, String> {
    let train = root.join("train.ds");
    let probe = root.join("probe.ds");
    let model = root.join("model.ck");
    let rd = |n: &str| root.join(n);
    let start = Instant::now();
    modfus(&["--run-dir", s(&rd("synth-train")), "--seed", "1", "synth", "--count", "100", "--len", "128", "--out", s(&train)])?;
    modfus(&["--run-dir", s(&rd("synth-probe")), "--seed", "2", "synth", "--count", "100", "--len", "128", "--out", s(&probe)])?;
    modfus(&[
        "--run-dir", s(&rd("train")), "--seed", "0", "train-diffusion", "--data", s(&train), "--epochs", DESK_EPOCHS,
        "--batch", "64", "--lr", DESK_LR, "--out", s(&model),
    ])?;
    let model_bytes_before_probe = fs::read(&model).map_err(|e| e.to_string())?;
    modfus(&[
        "--run-dir", s(&rd("probe")), "--seed", "0", "probe", "--checkpoint", s(&model), "--data", s(&probe), "--n", "10",
        "--trials", "10", "--variant", "daffus",
    ])?;
    let train_probe_secs = start.elapsed().as_secs_f64();
    let start = Instant::now();
    modfus(&[
        "--run-dir", s(&rd("ablate")), "--seed", "0", "ablate", "--checkpoint", s(&model), "--data", s(&probe), "--n", "10",
        "--trials", "10",
    ])?;
    Ok(DeskRun {
        root: root.to_path_buf(),
        model,
        model_bytes_before_probe,
        train_probe_secs,
        ablate_secs: start.elapsed().as_secs_f64(),
    })
}

fn criterion_7(run: &DeskRun) -> Check {
    let losses = loss_column(&run.dir("train").join("loss.csv"));
    let acc = summary(&run.dir("probe").join("probe_summary.csv"), "accuracy_mean");
    let acc = *acc.values().next().expect("probe summary row");
    let (first, last) = (losses[0], *losses.last().unwrap());
    Check::all(vec![
        Check::new(acc >= 0.70, format!("daffus mean accuracy {acc:.4} (target >= 0.70)")),
        Check::new(
            losses.len() == 200 && last <= 0.5 * first,
            format!("loss {first:.4} -> {last:.4} over {} epochs (target <= {:.4})", losses.len(), 0.5 * first),
        ),
        Check::new(
            run.train_probe_secs <= 1800.0,
            format!("train + probe {:.0} s (target <= 1800 s)", run.train_probe_secs),
        ),
    ])
}

fn criterion_8(run: &DeskRun) -> Check {
    let after = fs::read(&run.model).expect("model checkpoint");
    let heads = Checkpoint::load(run.dir("probe").join("heads.ck"), None).expect("heads checkpoint");
    let model = Checkpoint::load(&run.model, None).expect("model checkpoint");
    let same_file = after == run.model_bytes_before_probe;
    let same_backbone = Checkpoint::backbone_bytes(&model.params) == Checkpoint::backbone_bytes(&heads.params);
    Check::new(
        same_file && same_backbone,
        format!("checkpoint file unchanged: {same_file}; backbone in heads checkpoint identical: {same_backbone}"),
    )
}

fn criterion_9(run: &DeskRun) -> Check {
    let grid = summary(&run.dir("ablate").join("ablation_summary.csv"), "accuracy_mean");
    let mut parts = Vec::new();
    let mut variants: Vec<String> = grid
        .keys()
        .filter_map(|k| k.strip_prefix("t=1;variant=").map(String::from))
        .collect();
    variants.sort();
    for v in &variants {
        let a1 = grid[&format!("t=1;variant={v}")];
        let at = grid[&format!("t=100;variant={v}")];
        parts.push(Check::new(at <= a1, format!("{v} t=100 {at:.3} <= t=1 {a1:.3}")));
    }
    let mut c = Check::all(parts);
    c.pass &= variants.len() == 11 && grid.len() == 66;
    c.detail = format!("{} cells, ablation {:.0} s; {}", grid.len(), run.ablate_secs, c.detail);
    c
}

fn criterion_10(a: &DeskRun, b: &DeskRun) -> Check {
    let fa = csv_files(&a.root);
    let fb = csv_files(&b.root);
    if fa != fb {
        return Check::new(false, format!("CSV file sets differ: {fa:?} vs {fb:?}"));
    }
    let differing: Vec<String> = fa
        .iter()
        .filter(|p| fs::read(a.root.join(p)).ok() != fs::read(b.root.join(p)).ok())
        .map(|p| p.display().to_string())
        .collect();
    let model_same = fs::read(&a.model).ok() == fs::read(&b.model).ok();
    Check::new(
        differing.is_empty() && model_same,
        format!(
            "{} CSV files compared, {} differ {:?}; checkpoints identical: {model_same}",
            fa.len(),
            differing.len(),
            differing
        ),
    )
}

fn generation_power(run: &DeskRun) -> Check {
    let out = run.root.join("generated.ds");
    if let Err(e) = modfus(&[
        "--run-dir", s(&run.dir("generate")), "generate", "--checkpoint", s(&run.model), "--count", "100", "--len", "128",
        "--out", s(&out),
    ]) {
        return Check::new(false, e);
    }
    let ds = Dataset::load(&out).expect("generated set");
    let finite = ds.signals().iter().all(|g| g.i().iter().chain(g.q()).all(|v| v.is_finite()));
    let power = ds.signals().iter().map(|g| g.power()).sum::<f64>() / ds.len() as f64;
    Check::new(
        finite && (0.5..=2.0).contains(&power),
        format!("mean power of {} generations {power:.3} (target [0.5, 2.0])", ds.len()),
    )
}

fn channel_and_shift(run: &DeskRun) -> Result<(Check, Check), String> {
    let heads = run.dir("probe").join("heads.ck");
    let clean = run.root.join("clean.ds");
    modfus(&["--run-dir", s(&run.dir("synth-clean")), "--seed", "3", "synth", "--noiseless", "--out", s(&clean)])?;
    modfus(&[
        "--run-dir", s(&run.dir("channel")), "--seed", "0", "eval-channel", "--checkpoint", s(&heads), "--data", s(&clean),
        "--rician-k", "2,6,10,14,18,inf",
    ])?;
    let ch = summary(&run.dir("channel").join("channel_summary.csv"), "accuracy_mean");
    let ideal = ch.get("ideal").copied().ok_or("no ideal row")?;
    let los = ch
        .iter()
        .find(|(k, _)| k.contains("rician") && k.contains("inf"))
        .map(|(_, v)| *v)
        .ok_or("no K=inf row")?;
    let n = Dataset::load(&clean).map_err(|e| e.to_string())?.len() as f64;
    // Three binomial standard errors of a single evaluation pass.
    let tol = 3.0 * (ideal * (1.0 - ideal) / n).sqrt();
    let rician = Check::new(
        (los - ideal).abs() <= tol,
        format!("K=inf {los:.4} vs ideal {ideal:.4} (tolerance {tol:.4}); conditions: {ch:?}"),
    );

    let base = run.root.join("shift_a.ds");
    let shifted = run.root.join("shift_b.ds");
    modfus(&["--run-dir", s(&run.dir("synth-a")), "--seed", "4", "synth", "--out", s(&base)])?;
    modfus(&["--run-dir", s(&run.dir("synth-b")), "--seed", "4", "synth", "--max-cfo", "0.01", "--out", s(&shifted)])?;
    modfus(&[
        "--run-dir", s(&run.dir("shift")), "--seed", "0", "eval-shift", "--checkpoint", s(&heads), "--test", s(&shifted),
        "--baseline", s(&base),
    ])?;
    let sh = summary(&run.dir("shift").join("shift_summary.csv"), "accuracy_mean");
    let delta = summary(&run.dir("shift").join("shift_summary.csv"), "accuracy_delta");
    let shift = Check::new(
        delta.len() == 1,
        format!("A {:.4} B {:.4} delta {:+.4} (reported only)", sh["A"], sh["B"], delta["B-A"]),
    );
    Ok((rician, shift))
}

fn length_trend(root: &Path) -> Result<Check, String> {
    let train = root.join("train256.ds");
    let probe = root.join("probe256.ds");
    let model = root.join("model256.ck");
    let rd = |n: &str| root.join(n);
    modfus(&["--run-dir", s(&rd("s1")), "--seed", "1", "synth", "--len", "256", "--out", s(&train)])?;
    modfus(&["--run-dir", s(&rd("s2")), "--seed", "2", "synth", "--len", "256", "--out", s(&probe)])?;
    modfus(&[
        "--run-dir", s(&rd("train")), "--seed", "0", "train-diffusion", "--data", s(&train), "--epochs", LENGTH_EPOCHS,
        "--batch", "64", "--lr", DESK_LR, "--out", s(&model),
    ])?;
    modfus(&[
        "--run-dir", s(&rd("length")), "--seed", "0", "eval-length", "--checkpoint", s(&model), "--data", s(&probe),
        "--n", "10", "--trials", "10", "--lengths", "64,128,256",
    ])?;
    let acc = summary(&rd("length").join("length_summary.csv"), "accuracy_mean");
    let at = |l: usize| acc[&format!("length={l};variant=daffus")];
    let (a, b, c) = (at(64), at(128), at(256));
    Ok(Check::new(a <= b && b <= c, format!("accuracy 64: {a:.4}, 128: {b:.4}, 256: {c:.4} (non-decreasing)")))
}

fn failed(id: &str, name: &'static str, e: String) -> Line {
    line(id, name, Check::new(false, e), 0.0)
}

fn main() -> ExitCode {
    // libtest arguments (filters, --nocapture) are accepted and ignored.
    let work = tempfile::tempdir().expect("scratch dir");
    let mut lines = vec![
        timed("criterion 1", "schedule invariants", 1.0, common::schedule_invariants),
        timed("criterion 2", "posterior oracle", 10.0, common::posterior_oracle),
        timed("criterion 3", "perfect-oracle reverse chain", 10.0, common::perfect_oracle_chain),
        timed("criterion 4", "zero-predictor loss", 5.0, common::zero_predictor_loss),
        timed("criterion 5", "gradient check", 60.0, common::gradient_check),
        timed("criterion 6", "signal-synth metrology", 30.0, common::synth_metrology),
    ];

    let run_a = desk_run(&work.path().join("run-a"));
    let run_b = desk_run(&work.path().join("run-b"));
    match (&run_a, &run_b) {
        (Ok(a), Ok(b)) => {
            lines.push(line("criterion 7", "end-to-end desk run", criterion_7(a), a.train_probe_secs));
            lines.push(timed("criterion 8", "frozen backbone", f64::INFINITY, || criterion_8(a)));
            lines.push(line("criterion 9", "directional ablation", criterion_9(a), a.ablate_secs));
            lines.push(timed("criterion 10", "reproducibility", f64::INFINITY, || criterion_10(a, b)));
            lines.push(timed("supplement", "generation power", 600.0, || generation_power(a)));
            match channel_and_shift(a) {
                Ok((rician, shift)) => {
                    lines.push(timed("supplement", "Rician K=inf matches ideal", f64::INFINITY, || rician));
                    lines.push(timed("supplement", "distribution shift", f64::INFINITY, || shift));
                }
                Err(e) => lines.push(failed("supplement", "channel and shift runs", e)),
            }
        }
        (Err(e), _) | (_, Err(e)) => {
            for (id, name) in [
                ("criterion 7", "end-to-end desk run"),
                ("criterion 8", "frozen backbone"),
                ("criterion 9", "directional ablation"),
                ("criterion 10", "reproducibility"),
            ] {
                lines.push(failed(id, name, e.clone()));
            }
        }
    }
    match length_trend(&work.path().join("length")) {
        Ok(c) => lines.push(timed("supplement", "length trend", f64::INFINITY, || c)),
        Err(e) => lines.push(failed("supplement", "length trend", e)),
    }

    println!();
    println!("acceptance summary");
    for l in &lines {
        print_line(l);
    }
    let failures = lines.iter().filter(|l| !l.check.pass).count();
    println!("{} checks, {failures} failed", lines.len());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
