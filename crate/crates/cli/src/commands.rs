use std::fs;
use std::path::{Path, PathBuf};

use modfus::checkpoint::{Checkpoint, ScheduleSpec, TrainingState};
use modfus::daffus::{Extraction, HeadHyper, Heads};
use modfus::dataset::{Dataset, SplitSpec};
use modfus::diffusion::{generate_batch, NoiseSchedule};
use modfus::eval::plot::{heatmap, line_plot, Series};
use modfus::eval::{
    config_hash, run_ablation_t_blocks, run_channel_robustness, run_distribution_shift, run_limited_label,
    run_variable_length, write_csv, write_json, ChannelCondition, CsvRow, EvalReport, Probe, RunSeeds,
};
use modfus::rng;
use modfus::synth::{synth_dataset, synth_noiseless};
use modfus::unet::{DiffusionTrainer, ModelParams, TrainHyper};
use serde_json::json;

use crate::args::*;
use crate::config::RunConfig;
use crate::error::CliError;

type CmdResult = Result<(), CliError>;

/// Resolved configuration plus where this run writes.
struct Run {
    cfg: RunConfig,
    seeds: RunSeeds,
    dir: PathBuf,
    hash: String,
}

impl Run {
    fn start(mut cfg: RunConfig, cli: &GlobalOpts, name: &str) -> Result<Self, CliError> {
        let seed = cli.seed.or(cfg.seed).or(cli.env_seed).unwrap_or(0);
        cfg.seed = Some(seed);
        if let Some(d) = &cli.output_dir {
            cfg.output_dir = d.clone();
        }
        let text = cfg.to_toml();
        let hash = config_hash(text.as_bytes());
        let dir = match &cli.run_dir {
            Some(d) => d.clone(),
            None => {
                let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
                cfg.output_dir.join(format!("{name}-{stamp}-{}", &hash[..8]))
            }
        };
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("config.toml"), &text)?;
        fs::write(dir.join("config.sha256"), format!("{hash}\n"))?;
        eprintln!("run directory {}", dir.display());
        Ok(Self {
            seeds: RunSeeds::new(seed),
            cfg,
            dir,
            hash,
        })
    }

    fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    fn schedule(&self) -> Result<NoiseSchedule, CliError> {
        Ok(self.schedule_spec().build()?)
    }

    fn schedule_spec(&self) -> ScheduleSpec {
        ScheduleSpec {
            kind: self.cfg.diffusion.schedule,
            total_steps: self.cfg.diffusion.total_steps,
        }
    }

    fn head_hyper(&self) -> HeadHyper {
        let h = &self.cfg.head;
        HeadHyper {
            epochs: h.epochs,
            learning_rate: h.learning_rate,
            batch_size: h.batch_size,
            fused_dim: h.fused_dim,
            seed: self.seeds.head,
        }
    }

    fn split(&self) -> SplitSpec {
        SplitSpec {
            n_per_type_per_snr: self.cfg.head.n,
            trials: self.cfg.head.trials,
            seed: self.seeds.split,
        }
    }

    fn extraction(&self) -> Extraction {
        Extraction {
            t: self.cfg.head.t,
            mode: self.cfg.head.mode,
            seed: self.seeds.extraction,
        }
    }

    fn write_report(&self, stem: &str, rows: &[CsvRow], summary: &[CsvRow], meta: serde_json::Value) -> CmdResult {
        write_csv(self.path(&format!("{stem}.csv")), rows)?;
        write_csv(self.path(&format!("{stem}_summary.csv")), summary)?;
        let sidecar = json!({
            "config_hash": self.hash,
            "seeds": self.seeds,
            "results": meta,
        });
        write_json(&self.path(&format!("{stem}.json")), &sidecar)?;
        Ok(())
    }

    fn write_svg(&self, file: &str, svg: &str) -> CmdResult {
        fs::write(self.path(file), svg)?;
        Ok(())
    }
}

pub struct GlobalOpts {
    pub seed: Option<u64>,
    pub env_seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    Dataset::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path, None).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn require_heads(ck: &Checkpoint, path: &Path) -> Result<Heads, CliError> {
    ck.heads.clone().ok_or_else(|| {
        CliError::Data(format!(
            "{} holds no trained heads; run `probe` first",
            path.display()
        ))
    })
}

fn summary_row(experiment: &str, condition: &str, r: &EvalReport) -> CsvRow {
    CsvRow::new(experiment, condition, "all", "accuracy_mean", r.mean_accuracy)
}

fn snr_series(name: &str, r: &EvalReport) -> Series {
    Series {
        name: name.into(),
        points: r.accuracy_by_snr.iter().map(|s| (s.snr_db, s.accuracy)).collect(),
    }
}

pub fn synth(mut cfg: RunConfig, g: &GlobalOpts, a: SynthArgs) -> CmdResult {
    let s = &mut cfg.synth;
    if let Some(v) = a.schemes {
        s.schemes = v;
    }
    if let Some(v) = a.snr {
        s.snr_db = v;
    }
    if let Some(v) = a.count {
        s.count = v;
    }
    if let Some(v) = a.length {
        s.length = v;
    }
    if let Some(v) = a.max_cfo {
        s.impairments.max_cfo = v;
    }
    if let Some(v) = a.max_tau {
        s.impairments.max_tau = v;
    }
    let spec = cfg.synth.spec();
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let run = Run::start(cfg, g, "synth")?;
    let ds = if a.noiseless {
        synth_noiseless(&spec, run.seeds.synth)?
    } else {
        synth_dataset(&spec, run.seeds.synth)?
    };
    ds.save(&a.out)?;
    let counts: Vec<usize> = (0..ds.num_classes())
        .map(|k| ds.labels().iter().filter(|&&l| l == k).count())
        .collect();
    let summary = json!({
        "file": a.out,
        "signals": ds.len(),
        "length": ds.signal_len(),
        "classes": ds.class_names(),
        "per_class": counts,
        "snr_db": ds.snr_values(),
        "noiseless": a.noiseless,
    });
    write_json(&run.path("summary.json"), &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary).expect("json"));
    Ok(())
}

pub fn train_diffusion(mut cfg: RunConfig, g: &GlobalOpts, a: TrainArgs) -> CmdResult {
    let d = &mut cfg.diffusion;
    if let Some(v) = a.epochs {
        d.epochs = v;
    }
    if let Some(v) = a.batch_size {
        d.batch_size = v;
    }
    if let Some(v) = a.learning_rate {
        d.learning_rate = v;
    }
    if let Some(v) = a.schedule {
        d.schedule = v;
    }
    if let Some(v) = a.total_steps {
        d.total_steps = v;
    }
    let resumed = a.resume.as_deref().map(load_checkpoint).transpose()?;
    if let Some(ck) = &resumed {
        cfg.diffusion.unet = ck.params.config().clone();
        cfg.diffusion.schedule = ck.schedule.kind;
        cfg.diffusion.total_steps = ck.schedule.total_steps;
    }
    let run = Run::start(cfg, g, "train-diffusion")?;
    let ds = load_dataset(&a.data)?;
    let sched = run.schedule()?;
    let dcfg = &run.cfg.diffusion;
    let hyper = TrainHyper {
        learning_rate: dcfg.learning_rate,
        weight_decay: dcfg.weight_decay,
        epochs: dcfg.epochs,
        batch_size: dcfg.batch_size,
        seed: run.seeds.train,
    };
    hyper.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let mut trainer = match resumed {
        Some(ck) => {
            let state = ck.training.ok_or_else(|| {
                CliError::Data("checkpoint to resume holds no optimizer state".into())
            })?;
            let mut t = DiffusionTrainer::new(ck.params, TrainHyper { seed: state.hyper.seed, ..hyper })?;
            t.optimizer = state.optimizer;
            t.epochs_done = state.epochs_done;
            t.loss_history = state.loss_history;
            t
        }
        None => DiffusionTrainer::new(ModelParams::init(&dcfg.unet, run.seeds.train)?, hyper)?,
    };
    let start = trainer.epochs_done;
    let total = trainer.hyper.epochs;
    trainer.run(&ds, &sched, |e, loss| eprintln!("epoch {e}/{total} loss {loss:.6}"))?;
    eprintln!("trained epochs {}..{}", start + 1, trainer.epochs_done);

    let out = a.out.unwrap_or_else(|| run.path("model.ck"));
    let mut ck = Checkpoint::new(trainer.params.clone(), run.schedule_spec());
    ck.training = Some(TrainingState {
        hyper: trainer.hyper.clone(),
        epochs_done: trainer.epochs_done,
        loss_history: trainer.loss_history.clone(),
        optimizer: trainer.optimizer.clone(),
    });
    ck.save(&out)?;
    let rows: Vec<CsvRow> = trainer
        .loss_history
        .iter()
        .enumerate()
        .map(|(e, &l)| CsvRow::new("train_diffusion", "all", e + 1, "loss", l))
        .collect();
    write_csv(run.path("loss.csv"), &rows)?;
    let series = Series {
        name: "loss".into(),
        points: rows.iter().enumerate().map(|(e, r)| ((e + 1) as f64, r.value)).collect(),
    };
    run.write_svg("loss.svg", &line_plot("Diffusion training loss", "epoch", "loss", &[series]))?;
    println!("{}", out.display());
    Ok(())
}

fn apply_probe(cfg: &mut RunConfig, p: &ProbeSettings) {
    let h = &mut cfg.head;
    if let Some(v) = p.n {
        h.n = v;
    }
    if let Some(v) = p.trials {
        h.trials = v;
    }
    if let Some(v) = p.variant {
        h.variant = v;
    }
    if let Some(v) = p.t {
        h.t = v;
    }
    if let Some(v) = p.mode {
        h.mode = v;
    }
}

/// Loads the checkpoint and dataset, adopting the checkpoint's schedule.
fn open_probe(cfg: &mut RunConfig, p: &ProbeSettings) -> Result<(Checkpoint, Dataset), CliError> {
    let ck = load_checkpoint(&p.checkpoint)?;
    let ds = load_dataset(&p.data)?;
    cfg.diffusion.unet = ck.params.config().clone();
    cfg.diffusion.schedule = ck.schedule.kind;
    cfg.diffusion.total_steps = ck.schedule.total_steps;
    Ok((ck, ds))
}

fn with_probe<T>(run: &Run, ck: &Checkpoint, extraction: Extraction, f: impl FnOnce(&Probe<'_>) -> T) -> Result<T, CliError> {
    let sched = run.schedule()?;
    let hyper = run.head_hyper();
    let probe = Probe {
        backbone: &ck.params,
        sched: &sched,
        extraction,
        head: &hyper,
        config_hash: &run.hash,
    };
    Ok(f(&probe))
}

pub fn probe(mut cfg: RunConfig, g: &GlobalOpts, a: ProbeArgs) -> CmdResult {
    apply_probe(&mut cfg, &a.probe);
    let (ck, ds) = open_probe(&mut cfg, &a.probe)?;
    let run = Run::start(cfg, g, "probe")?;
    let variant = run.cfg.head.variant;
    let result = with_probe(&run, &ck, run.extraction(), |p| run_limited_label(p, &ds, &run.split(), variant))??;
    let r = &result.report;
    let cond = format!("variant={variant};n={};t={}", run.cfg.head.n, run.cfg.head.t);
    run.write_report("probe", &r.csv_rows("probe", &cond), &[summary_row("probe", &cond, r)], json!(r))?;
    run.write_svg("probe.svg", &line_plot("Accuracy vs SNR", "SNR (dB)", "accuracy", &[snr_series(&variant.to_string(), r)]))?;

    let mut out = Checkpoint::new(ck.params.clone(), ck.schedule);
    out.heads = result.heads.into_iter().next();
    let path = a.heads_out.unwrap_or_else(|| run.path("heads.ck"));
    out.save(&path)?;
    println!(
        "mean accuracy {:.4} (std {:.4}) over {} trials; heads in {}",
        r.mean_accuracy,
        r.std_accuracy,
        r.per_trial.len(),
        path.display()
    );
    Ok(())
}

pub fn ablate(mut cfg: RunConfig, g: &GlobalOpts, a: AblateArgs) -> CmdResult {
    apply_probe(&mut cfg, &a.probe);
    if let Some(v) = a.steps {
        cfg.eval.ablation_steps = v;
    }
    if let Some(v) = a.variants {
        cfg.eval.ablation_variants = v;
    }
    if let Some(m) = a.probe.mode {
        cfg.eval.ablation_mode = m;
    }
    let (ck, ds) = open_probe(&mut cfg, &a.probe)?;
    let run = Run::start(cfg, g, "ablate")?;
    let ex = Extraction {
        mode: run.cfg.eval.ablation_mode,
        ..run.extraction()
    };
    let e = &run.cfg.eval;
    let grid = with_probe(&run, &ck, ex, |p| run_ablation_t_blocks(p, &ds, &e.ablation_steps, &e.ablation_variants, &run.split()))??;
    let mut summary = Vec::new();
    for (ti, t) in grid.steps.iter().enumerate() {
        for (vi, v) in grid.variants.iter().enumerate() {
            summary.push(summary_row("ablation", &format!("t={t};variant={v}"), &grid.reports[ti][vi]));
        }
    }
    run.write_report("ablation", &grid.csv_rows(), &summary, json!(grid))?;
    let series: Vec<Series> = grid
        .variants
        .iter()
        .enumerate()
        .map(|(vi, v)| Series {
            name: v.to_string(),
            points: grid.steps.iter().enumerate().map(|(ti, &t)| (t as f64, grid.mean_accuracy(ti, vi))).collect(),
        })
        .collect();
    run.write_svg("ablation.svg", &line_plot("Accuracy vs diffusion step", "t", "accuracy", &series))?;
    let rows: Vec<String> = grid.steps.iter().map(|t| format!("t={t}")).collect();
    let cols: Vec<String> = grid.variants.iter().map(|v| v.to_string().replace("single:", "")).collect();
    let values: Vec<Vec<f64>> = (0..grid.steps.len())
        .map(|ti| (0..grid.variants.len()).map(|vi| grid.mean_accuracy(ti, vi)).collect())
        .collect();
    run.write_svg("ablation_heatmap.svg", &heatmap("Accuracy by step and block", &rows, &cols, &values))?;
    for r in &summary {
        println!("{} {:.4}", r.condition, r.value);
    }
    Ok(())
}

fn open_heads(cfg: &mut RunConfig, path: &Path) -> Result<(Checkpoint, Heads), CliError> {
    let ck = load_checkpoint(path)?;
    let heads = require_heads(&ck, path)?;
    cfg.diffusion.unet = ck.params.config().clone();
    cfg.diffusion.schedule = ck.schedule.kind;
    cfg.diffusion.total_steps = ck.schedule.total_steps;
    cfg.head.variant = heads.variant;
    cfg.head.t = heads.extraction.t;
    cfg.head.mode = heads.extraction.mode;
    Ok((ck, heads))
}

pub fn eval_shift(mut cfg: RunConfig, g: &GlobalOpts, a: ShiftArgs) -> CmdResult {
    let (ck, heads) = open_heads(&mut cfg, &a.checkpoint)?;
    let test = load_dataset(&a.test)?;
    let baseline = a.baseline.as_deref().map(load_dataset).transpose()?;
    let run = Run::start(cfg, g, "eval-shift")?;
    let (shifted, base) = with_probe(&run, &ck, heads.extraction, |p| {
        let shifted = run_distribution_shift(p, &heads, &test)?;
        let base = baseline.as_ref().map(|b| run_distribution_shift(p, &heads, b)).transpose()?;
        Ok::<_, modfus::Error>((shifted, base))
    })??;
    let mut rows = shifted.csv_rows("shift", "B");
    let mut summary = vec![summary_row("shift", "B", &shifted)];
    if let Some(b) = &base {
        rows.extend(b.csv_rows("shift", "A"));
        summary.insert(0, summary_row("shift", "A", b));
        let delta = shifted.mean_accuracy - b.mean_accuracy;
        summary.push(CsvRow::new("shift", "B-A", "all", "accuracy_delta", delta));
        println!("accuracy A {:.4} B {:.4} delta {delta:+.4}", b.mean_accuracy, shifted.mean_accuracy);
    } else {
        println!("accuracy {:.4}", shifted.mean_accuracy);
    }
    run.write_report("shift", &rows, &summary, json!({ "shifted": shifted, "baseline": base }))?;
    Ok(())
}

pub fn eval_channel(mut cfg: RunConfig, g: &GlobalOpts, a: ChannelArgs) -> CmdResult {
    let (ck, heads) = open_heads(&mut cfg, &a.checkpoint)?;
    let e = &mut cfg.eval;
    if let Some(v) = a.snr_db {
        e.channel_snr_db = v;
    }
    if let Some(v) = a.rayleigh_sigma2 {
        e.rayleigh_sigma2 = v;
    }
    if let Some(v) = a.rician_k {
        e.rician_k = v;
    }
    if let Some(v) = a.colors {
        e.noise_colors = v;
    }
    let clean = load_dataset(&a.data)?;
    let run = Run::start(cfg, g, "eval-channel")?;
    let e = &run.cfg.eval;
    let mut conditions = vec![ChannelCondition::Ideal];
    conditions.extend(e.rayleigh_sigma2.iter().map(|&sigma2| ChannelCondition::Rayleigh { sigma2 }));
    conditions.extend(e.rician_k.iter().map(|&k_factor| ChannelCondition::Rician { k_factor }));
    conditions.extend(e.noise_colors.iter().map(|&color| ChannelCondition::Noise { color }));
    let results = with_probe(&run, &ck, heads.extraction, |p| {
        run_channel_robustness(p, &heads, &clean, &conditions, e.channel_snr_db, run.seeds.channel)
    })??;
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for (c, r) in &results {
        rows.extend(r.csv_rows("channel", &c.name()));
        summary.push(summary_row("channel", &c.name(), r));
        println!("{} {:.4}", c.name(), r.mean_accuracy);
    }
    let reports: Vec<_> = results.iter().map(|(c, r)| json!({ "condition": c, "report": r })).collect();
    run.write_report("channel", &rows, &summary, json!(reports))?;
    let pick = |f: &dyn Fn(&ChannelCondition) -> Option<f64>| -> Vec<(f64, f64)> {
        results.iter().filter_map(|(c, r)| f(c).map(|x| (x, r.mean_accuracy))).collect()
    };
    let rayleigh = pick(&|c| match c {
        ChannelCondition::Rayleigh { sigma2 } => Some(*sigma2),
        _ => None,
    });
    if !rayleigh.is_empty() {
        let s = [Series { name: "rayleigh".into(), points: rayleigh }];
        run.write_svg("channel_rayleigh.svg", &line_plot("Accuracy vs Rayleigh variance", "sigma^2", "accuracy", &s))?;
    }
    let rician = pick(&|c| match c {
        ChannelCondition::Rician { k_factor } => Some(*k_factor),
        _ => None,
    });
    if !rician.is_empty() {
        let s = [Series { name: "rician".into(), points: rician }];
        run.write_svg("channel_rician.svg", &line_plot("Accuracy vs Rician K", "K", "accuracy", &s))?;
    }
    Ok(())
}

pub fn eval_length(mut cfg: RunConfig, g: &GlobalOpts, a: LengthArgs) -> CmdResult {
    apply_probe(&mut cfg, &a.probe);
    if let Some(v) = a.lengths {
        cfg.eval.lengths = v;
    }
    let (ck, ds) = open_probe(&mut cfg, &a.probe)?;
    let run = Run::start(cfg, g, "eval-length")?;
    let variant = run.cfg.head.variant;
    let results = with_probe(&run, &ck, run.extraction(), |p| {
        run_variable_length(p, &ds, &run.cfg.eval.lengths, &run.split(), variant, run.seeds.crop)
    })??;
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for (l, r) in &results {
        let cond = format!("length={l};variant={variant}");
        rows.extend(r.csv_rows("length", &cond));
        summary.push(summary_row("length", &cond, r));
        println!("length {l} {:.4}", r.mean_accuracy);
    }
    let reports: Vec<_> = results.iter().map(|(l, r)| json!({ "length": l, "report": r })).collect();
    run.write_report("length", &rows, &summary, json!(reports))?;
    let s = [Series {
        name: variant.to_string(),
        points: results.iter().map(|(l, r)| (*l as f64, r.mean_accuracy)).collect(),
    }];
    run.write_svg("length.svg", &line_plot("Accuracy vs signal length", "length", "accuracy", &s))?;
    Ok(())
}

pub fn generate(mut cfg: RunConfig, g: &GlobalOpts, a: GenerateArgs) -> CmdResult {
    let ck = load_checkpoint(&a.checkpoint)?;
    cfg.diffusion.unet = ck.params.config().clone();
    cfg.diffusion.schedule = ck.schedule.kind;
    cfg.diffusion.total_steps = ck.schedule.total_steps;
    let run = Run::start(cfg, g, "generate")?;
    let sched = run.schedule()?;
    let mut r = rng::seeded(run.seeds.generate);
    let signals = generate_batch(&ck.params, a.count, a.length, &sched, &mut r)?;
    let n = signals.len();
    let ds = Dataset::new(signals, vec![0; n], vec![0.0; n], vec!["generated".into()])?;
    ds.save(&a.out)?;
    println!("{n} signals of length {} in {}", a.length, a.out.display());
    Ok(())
}

pub fn inspect(a: InspectArgs) -> CmdResult {
    let ck = load_checkpoint(&a.checkpoint)?;
    let bytes = Checkpoint::backbone_bytes(&ck.params);
    let summary = json!({
        "config": ck.params.config(),
        "num_params": ck.params.num_params(),
        "num_tensors": ck.params.architecture().tensors().len(),
        "backbone_sha256": config_hash(&bytes),
        "schedule": ck.schedule,
        "training": ck.training.as_ref().map(|t| json!({
            "epochs_done": t.epochs_done,
            "adam_step": t.optimizer.step,
            "first_loss": t.loss_history.first(),
            "last_loss": t.loss_history.last(),
        })),
        "heads": ck.heads.as_ref().map(|h| json!({
            "variant": h.variant,
            "extraction": h.extraction,
            "classes": h.class_names,
            "fused_dim": h.fusion.d,
        })),
    });
    println!("{}", serde_json::to_string_pretty(&summary).expect("json"));
    Ok(())
}
