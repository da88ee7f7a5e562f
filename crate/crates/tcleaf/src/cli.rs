//! The `tcleaf` command line.
//!
//! Every command writes its outputs and a `manifest.json` into
//! `<out>/<hash>/`, where the hash covers the command, its arguments, the
//! configuration snapshot and the seed. Exit codes: 0 success, 1 a check
//! failed (or training diverged), 2 usage or IO error.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context as _;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use tcleaf_core::boxes::DetectionBox;
use tcleaf_core::config::{BranchScheme, NeckMode, PatchMode};
use tcleaf_core::metrics::{map_suite, Interpolation, MetricsReport, SuiteConfig};
use tcleaf_core::synth::AnnotatedImage;

use crate::ablation::{grid, run_grid};
use crate::audit::{attention_flops, audit_flops, audit_shapes, AttnKind, RATIO_TARGET};
use crate::checkpoint;
use crate::config_file::{load_config, write_config, RunConfig};
use crate::dataset::{load_split, synth_split, write_synth_dataset, Split};
use crate::gradsuite::{all_checks, run_check};
use crate::manifest::{seed_override, RunManifest, SEED_ENV};
use crate::report;
use crate::train::{predict_all, train, EpochLog, Schedule, TrainError, LOG_HEADER};

#[derive(Debug, Parser)]
#[command(name = "tcleaf", version, about = "Lesion detector audits, training and evaluation")]
pub struct Cli {
    /// Root directory for per-run output directories.
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    Toy,
    Reference,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Flat `section.key = value` file applied on top of the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub stem_stride: Option<usize>,
}

impl ModelArgs {
    fn resolve(&self, default: Preset) -> anyhow::Result<RunConfig> {
        let base = match self.preset.unwrap_or(default) {
            Preset::Toy => RunConfig::toy(),
            Preset::Reference => RunConfig::reference(),
        };
        let mut cfg = match &self.config {
            Some(p) => load_config(p, base).map_err(usage)?,
            None => base,
        };
        if let Some(s) = self.image_size {
            cfg.model.image_size = s;
        }
        if let Some(s) = self.stem_stride {
            cfg.model.backbone.stem_stride = s;
        }
        crate::config_file::validate(&cfg).map_err(usage)?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Dataset manifest (JSON); without it the synthetic task is generated in memory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub train_scenes: Option<usize>,
    #[arg(long)]
    pub val_scenes: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
}

impl DataArgs {
    fn load(&self, split: Split, default_count: usize, num_classes: usize) -> anyhow::Result<Vec<AnnotatedImage>> {
        match &self.data {
            Some(m) => Ok(load_split(m, split, num_classes).map_err(usage)?),
            None => {
                let n = match split {
                    Split::Train => self.train_scenes,
                    _ => self.val_scenes,
                }
                .unwrap_or(default_count);
                Ok(synth_split(n, self.data_seed, split))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AttnArg {
    Ea,
    Mhsa,
    Both,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum InterpArg {
    AllPoint,
    #[value(name = "101")]
    Point101,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Forward one image and compare every stage shape with the stride ladder.
    AuditShapes {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// `all`, an op name, or `detector` for the end-to-end check.
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Operation counts of exact and efficient attention.
    Flops {
        #[arg(long, value_enum, default_value = "both")]
        attn: AttnArg,
        #[arg(long, default_value_t = 8)]
        heads: usize,
        #[arg(long, default_value_t = 1600)]
        len: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        /// Random features of the efficient variant.
        #[arg(long, default_value_t = 64)]
        features: usize,
    },
    /// Write the synthetic task to disk as PNG + YOLO txt + manifest.
    Synth {
        #[arg(long)]
        dest: PathBuf,
        #[arg(long, default_value_t = 200)]
        train: usize,
        #[arg(long, default_value_t = 50)]
        val: usize,
        #[arg(long, default_value_t = 0)]
        data_seed: u64,
    },
    Train {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        cosine: bool,
        /// Stop once validation mAP@50 reaches this value.
        #[arg(long)]
        target_map50: Option<f64>,
    },
    /// Per-image detections after NMS, as JSON.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
    },
    /// Metrics of a checkpoint, or of a detections file, against ground truth.
    Eval {
        #[arg(long, required_unless_present = "detections")]
        checkpoint: Option<PathBuf>,
        #[arg(long, conflicts_with = "checkpoint")]
        detections: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        #[arg(long, value_enum, default_value = "all-point")]
        interp: InterpArg,
        #[arg(long, default_value = "ideal")]
        tag: String,
        #[arg(long, default_value_t = 3)]
        num_classes: usize,
    },
    /// Epoch-mAP curves from training logs, as one CSV.
    Plotdata {
        #[arg(long = "log", required = true)]
        logs: Vec<PathBuf>,
    },
    /// Train the patch x branch x neck grid and report every variant.
    Ablation {
        #[arg(long, value_delimiter = ',')]
        patch: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        branch: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        neck: Vec<String>,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Re-run the command recorded in a manifest.
    Replay { manifest: PathBuf },
}

/// A failed check; maps to exit code 1.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct Failed(pub String);

/// A usage or input problem; maps to exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct Usage(pub String);

fn usage(e: impl std::fmt::Display) -> anyhow::Error {
    Usage(e.to_string()).into()
}

/// One run: its directory, manifest and the artifacts written so far.
struct Run {
    dir: PathBuf,
    manifest: RunManifest,
    start: Instant,
}

impl Run {
    fn open(out: &Path, command: &str, args: &[String], config: String, seed: u64) -> anyhow::Result<Self> {
        let manifest = RunManifest::new(command, args, config, seed);
        let dir = manifest.run_dir(out);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self { dir, manifest, start: Instant::now() })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        if !self.manifest.artifacts.iter().any(|a| a == name) {
            self.manifest.artifacts.push(name.into());
        }
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> anyhow::Result<PathBuf> {
        let p = self.path(name);
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }

    fn finish(mut self) -> anyhow::Result<PathBuf> {
        self.manifest.wall_clock_secs = self.start.elapsed().as_secs_f64();
        let p = self.manifest.write(&self.dir)?;
        println!("run directory: {}", self.dir.display());
        Ok(p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxJson {
    pub class_id: usize,
    pub score: f64,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageDetections {
    pub image: String,
    pub detections: Vec<BoxJson>,
}

impl From<&DetectionBox> for BoxJson {
    fn from(b: &DetectionBox) -> Self {
        Self { class_id: b.class_id, score: b.score, cx: b.cx, cy: b.cy, w: b.w, h: b.h }
    }
}

impl From<&BoxJson> for DetectionBox {
    fn from(b: &BoxJson) -> Self {
        DetectionBox::new(b.class_id, b.score, b.cx, b.cy, b.w, b.h)
    }
}

fn effective_seed(flag: u64) -> anyhow::Result<u64> {
    seed_override(flag).map_err(usage)
}

fn parse_list<T>(raw: &[String], parse: fn(&str) -> Option<T>, what: &str) -> anyhow::Result<Vec<T>> {
    raw.iter().map(|s| parse(s).ok_or_else(|| usage(format!("unknown {what} {s:?}")))).collect()
}

fn train_error(e: TrainError, run: &mut Run) -> anyhow::Error {
    match e {
        TrainError::NonFinite(d) => match run.write("diagnostics.txt", d.to_string()) {
            Ok(p) => Failed(format!("training diverged; diagnostics written to {}\n{d}", p.display())).into(),
            Err(w) => w,
        },
        other => anyhow::Error::new(other),
    }
}

fn cmd_audit_shapes(out: &Path, args: &[String], model: &ModelArgs) -> anyhow::Result<()> {
    let cfg = model.resolve(Preset::Reference)?;
    let mut run = Run::open(out, "audit-shapes", args, write_config(&cfg), 0)?;
    let audit = audit_shapes(&cfg.model)?;
    let table = audit.table();
    print!("{table}");
    println!("trainable parameters: {}  elapsed: {:.2?}", audit.params, audit.elapsed);
    run.write("shapes.txt", &table)?;
    let verdict = audit.first_failure().map(|r| format!("FAIL at {}", r.stage));
    println!("{}", verdict.as_deref().unwrap_or("PASS"));
    run.finish()?;
    match verdict {
        Some(v) => Err(Failed(v).into()),
        None => Ok(()),
    }
}

fn cmd_gradcheck(out: &Path, args: &[String], module: &str, seed: u64) -> anyhow::Result<()> {
    let seed = effective_seed(seed)?;
    let names: Vec<String> = if module == "all" { all_checks().into_iter().map(String::from).collect() } else { vec![module.into()] };
    let mut run = Run::open(out, "gradcheck", args, String::new(), seed)?;
    let mut table = format!("{:<22} {:>14} {:>7}  result\n", "check", "max rel err", "coords");
    let mut failed = Vec::new();
    for n in &names {
        let row = run_check(n, seed).ok_or_else(|| usage(format!("unknown check {n:?}")))??;
        let line = format!("{:<22} {:>14.3e} {:>7}  {}\n", row.name, row.max_rel_error, row.coords, if row.passed() { "PASS" } else { "FAIL" });
        print!("{line}");
        std::io::stdout().flush().ok();
        table += &line;
        if !row.passed() {
            failed.push(row.name);
        }
    }
    run.write("gradcheck.txt", &table)?;
    run.finish()?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failed(format!("gradient check failed: {}", failed.join(", "))).into())
    }
}

fn cmd_flops(out: &Path, args: &[String], attn: AttnArg, heads: usize, len: usize, dim: usize, features: usize) -> anyhow::Result<()> {
    if heads == 0 || len == 0 || dim == 0 || features == 0 {
        return Err(usage("heads, len, dim and features must be positive"));
    }
    let mut run = Run::open(out, "flops", args, String::new(), 0)?;
    let text = match attn {
        AttnArg::Both => {
            let a = audit_flops(heads, len, dim, features)?;
            let verdict = if a.ratio() >= RATIO_TARGET { "PASS" } else { "FAIL" };
            let t = format!("{}\n{verdict}\n", a.report());
            print!("{t}");
            run.write("flops.txt", &t)?;
            run.finish()?;
            return if a.ratio() >= RATIO_TARGET {
                Ok(())
            } else {
                Err(Failed(format!("MHSA/EA ratio {:.2} is below {RATIO_TARGET:.0}", a.ratio())).into())
            };
        }
        AttnArg::Ea => format!("EA ops {}\n", attention_flops(AttnKind::Ea, heads, len, dim, features)?),
        AttnArg::Mhsa => format!("MHSA ops {}\n", attention_flops(AttnKind::Mhsa, heads, len, dim, features)?),
    };
    print!("{text}");
    run.write("flops.txt", &text)?;
    run.finish()?;
    Ok(())
}

fn cmd_synth(out: &Path, args: &[String], dest: &Path, n_train: usize, n_val: usize, data_seed: u64) -> anyhow::Result<()> {
    let data_seed = effective_seed(data_seed)?;
    let mut run = Run::open(out, "synth", args, String::new(), data_seed)?;
    let m = write_synth_dataset(dest, n_train, n_val, data_seed).map_err(usage)?;
    println!("wrote {n_train} train and {n_val} val scenes; manifest {}", m.display());
    run.manifest.artifacts.push(m.display().to_string());
    run.finish()?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    out: &Path,
    args: &[String],
    model: &ModelArgs,
    data: &DataArgs,
    epochs: Option<usize>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    seed: Option<u64>,
    cosine: bool,
    target: Option<f64>,
) -> anyhow::Result<()> {
    let mut cfg = model.resolve(Preset::Toy)?;
    let t = &mut cfg.train;
    t.epochs = epochs.unwrap_or(t.epochs);
    t.lr = lr.unwrap_or(t.lr);
    t.batch_size = batch_size.unwrap_or(t.batch_size);
    t.seed = effective_seed(seed.unwrap_or(t.seed))?;
    if cosine {
        t.schedule = Schedule::Cosine;
    }
    crate::config_file::validate(&cfg).map_err(usage)?;
    let nc = cfg.model.head.num_classes;
    let train_set = data.load(Split::Train, 200, nc)?;
    let val_set = data.load(Split::Val, 50, nc)?;
    let config_text = write_config(&cfg);
    let mut run = Run::open(out, "train", args, config_text.clone(), cfg.train.seed)?;
    run.write("config.txt", &config_text)?;
    let (det, store) = tcleaf_core::model::Detector::new(&cfg.model, cfg.train.seed)?;
    let log_path = run.path("log.csv");
    let mut log = fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    writeln!(log, "{LOG_HEADER}")?;
    println!("{LOG_HEADER}");
    let outcome = train(&det, store, &train_set, &val_set, &cfg.train, |row: &EpochLog| {
        println!("{}", row.csv_row());
        let _ = writeln!(log, "{}", row.csv_row()).and_then(|_| log.flush());
        target.is_none_or(|t| row.map50 < t)
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => {
            let err = train_error(e, &mut run);
            run.finish()?;
            return Err(err);
        }
    };
    checkpoint::save(&run.path("best.ckpt"), &cfg.model, &outcome.best)?;
    checkpoint::save(&run.path("last.ckpt"), &cfg.model, &outcome.last)?;
    let best = outcome.log[outcome.best_epoch];
    println!("best epoch {} mAP@50 {:.4} mAP@50:95 {:.4}", best.epoch, best.map50, best.map50_95);
    run.finish()?;
    Ok(())
}

fn cmd_infer(out: &Path, args: &[String], ckpt: &Path, data: &DataArgs, split: Split) -> anyhow::Result<()> {
    let (det, store) = checkpoint::load(ckpt).map_err(|e| usage(format!("{}: {e}", ckpt.display())))?;
    let samples = data.load(split, 50, det.cfg.head.num_classes)?;
    let mut run = Run::open(out, "infer", args, write_config(&RunConfig { model: det.cfg.clone(), train: Default::default() }), 0)?;
    let dets = predict_all(&det, &store, &samples)?;
    let json: Vec<ImageDetections> = samples
        .iter()
        .zip(&dets)
        .map(|(s, d)| ImageDetections { image: s.source.clone(), detections: d.iter().map(BoxJson::from).collect() })
        .collect();
    let p = run.write("detections.json", serde_json::to_string_pretty(&json)?)?;
    println!("{} images, {} detections -> {}", json.len(), dets.iter().map(Vec::len).sum::<usize>(), p.display());
    run.finish()?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    out: &Path,
    args: &[String],
    ckpt: Option<&Path>,
    detections: Option<&Path>,
    data: &DataArgs,
    split: Split,
    interp: InterpArg,
    tag: &str,
    num_classes: usize,
) -> anyhow::Result<()> {
    let interpolation = match interp {
        InterpArg::AllPoint => Interpolation::AllPoint,
        InterpArg::Point101 => Interpolation::Point101,
    };
    let (config, dets, gts, nc) = if let Some(ckpt) = ckpt {
        let (det, store) = checkpoint::load(ckpt).map_err(|e| usage(format!("{}: {e}", ckpt.display())))?;
        let nc = det.cfg.head.num_classes;
        let samples = data.load(split, 50, nc)?;
        let dets = predict_all(&det, &store, &samples)?;
        let cfg = write_config(&RunConfig { model: det.cfg.clone(), train: Default::default() });
        (cfg, dets, samples.into_iter().map(|s| s.boxes).collect::<Vec<_>>(), nc)
    } else {
        let p = detections.expect("clap enforces one source");
        let text = fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
        let json: Vec<ImageDetections> = serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?;
        let samples = data.load(split, 50, num_classes)?;
        if samples.len() != json.len() {
            return Err(usage(format!("{} detection entries for {} images", json.len(), samples.len())));
        }
        let dets = json.iter().map(|i| i.detections.iter().map(DetectionBox::from).collect()).collect();
        (String::new(), dets, samples.into_iter().map(|s| s.boxes).collect(), num_classes)
    };
    let mut run = Run::open(out, "eval", args, config, 0)?;
    let suite = SuiteConfig { num_classes: nc, score_threshold: 0.25, interpolation };
    let r: MetricsReport = map_suite(&dets, &gts, &suite, tag).map_err(usage)?;
    run.write("report.json", report::to_json(&r))?;
    let csv = report::to_csv(&[&r]);
    run.write("report.csv", &csv)?;
    print!("{csv}");
    run.finish()?;
    Ok(())
}

/// Parses one training log into `(epoch, mAP@50, mAP@50:95)` rows.
pub fn read_log(path: &Path) -> anyhow::Result<Vec<(usize, f64, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == LOG_HEADER => {}
        _ => return Err(usage(format!("{}: missing header {LOG_HEADER:?}", path.display()))),
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || usage(format!("{}:{}: malformed row", path.display(), i + 1));
            if f.len() != 7 {
                return Err(bad());
            }
            Ok((f[0].parse().map_err(|_| bad())?, f[5].parse().map_err(|_| bad())?, f[6].parse().map_err(|_| bad())?))
        })
        .collect()
}

fn cmd_plotdata(out: &Path, args: &[String], logs: &[PathBuf]) -> anyhow::Result<()> {
    let mut csv = String::from("run,epoch,map50,map50_95\n");
    for p in logs {
        let name = match p.file_name().and_then(|s| s.to_str()) {
            Some("log.csv") => p.parent().and_then(|d| d.file_name()).and_then(|s| s.to_str()).unwrap_or("run"),
            _ => p.file_stem().and_then(|s| s.to_str()).unwrap_or("run"),
        }
        .to_string();
        for (e, m50, m5095) in read_log(p)? {
            csv += &format!("{name},{e},{m50:.6},{m5095:.6}\n");
        }
    }
    let mut run = Run::open(out, "plotdata", args, String::new(), 0)?;
    let p = run.write("curves.csv", &csv)?;
    println!("{}", p.display());
    run.finish()?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_ablation(
    out: &Path,
    args: &[String],
    patch: &[String],
    branch: &[String],
    neck: &[String],
    epochs: usize,
    model: &ModelArgs,
    data: &DataArgs,
    seed: Option<u64>,
) -> anyhow::Result<()> {
    let patches = parse_list(patch, PatchMode::parse, "patch mode")?;
    let branches = parse_list(branch, BranchScheme::parse, "branch scheme")?;
    let necks = parse_list(neck, NeckMode::parse, "neck mode")?;
    let mut cfg = model.resolve(Preset::Toy)?;
    cfg.train.epochs = epochs;
    cfg.train.seed = effective_seed(seed.unwrap_or(cfg.train.seed))?;
    crate::config_file::validate(&cfg).map_err(usage)?;
    let nc = cfg.model.head.num_classes;
    let train_set = data.load(Split::Train, 40, nc)?;
    let val_set = data.load(Split::Val, 10, nc)?;
    let variants = grid(&patches, &branches, &necks);
    let mut run = Run::open(out, "ablation", args, write_config(&cfg), cfg.train.seed)?;
    let results = run_grid(&cfg.model, &variants, &train_set, &val_set, &cfg.train, |r| {
        let last = r.log.last().map_or(f64::NAN, |l| l.total);
        println!("{:<20} params {:>8} L_total {:.4} mAP@50 {:.4} mAP@50:95 {:.4}", r.variant.tag(), r.params, last, r.report.map50, r.report.map50_95);
    })
    .map_err(|e| train_error(e, &mut run))?;
    let reports: Vec<&MetricsReport> = results.iter().map(|r| &r.report).collect();
    run.write("ablation.csv", report::to_csv(&reports))?;
    let mut summary = String::from("variant,params,L_total,map50,map50_95\n");
    for r in &results {
        summary += &format!(
            "{},{},{:.6},{:.6},{:.6}\n",
            r.variant.tag(),
            r.params,
            r.log.last().map_or(f64::NAN, |l| l.total),
            r.report.map50,
            r.report.map50_95
        );
    }
    run.write("summary.csv", &summary)?;
    run.finish()?;
    Ok(())
}

fn cmd_replay(manifest: &Path) -> anyhow::Result<()> {
    let m = RunManifest::read(manifest).map_err(|e| usage(format!("{}: {e}", manifest.display())))?;
    if m.args.first().map(String::as_str) == Some("replay") {
        return Err(usage("refusing to replay a replay"));
    }
    // The recorded seed already reflects any override of the original run.
    std::env::set_var(SEED_ENV, m.seed.to_string());
    let mut argv = vec!["tcleaf".to_string()];
    argv.extend(m.args.iter().cloned());
    let cli = Cli::try_parse_from(&argv).map_err(usage)?;
    dispatch(&cli, &m.args)
}

fn dispatch(cli: &Cli, args: &[String]) -> anyhow::Result<()> {
    let out = cli.out.as_path();
    match &cli.command {
        Command::AuditShapes { model } => cmd_audit_shapes(out, args, model),
        Command::Gradcheck { module, seed } => cmd_gradcheck(out, args, module, *seed),
        Command::Flops { attn, heads, len, dim, features } => cmd_flops(out, args, *attn, *heads, *len, *dim, *features),
        Command::Synth { dest, train, val, data_seed } => cmd_synth(out, args, dest, *train, *val, *data_seed),
        Command::Train { model, data, epochs, lr, batch_size, seed, cosine, target_map50 } => {
            cmd_train(out, args, model, data, *epochs, *lr, *batch_size, *seed, *cosine, *target_map50)
        }
        Command::Infer { checkpoint, data, split } => cmd_infer(out, args, checkpoint, data, (*split).into()),
        Command::Eval { checkpoint, detections, data, split, interp, tag, num_classes } => cmd_eval(
            out,
            args,
            checkpoint.as_deref(),
            detections.as_deref(),
            data,
            (*split).into(),
            *interp,
            tag,
            *num_classes,
        ),
        Command::Plotdata { logs } => cmd_plotdata(out, args, logs),
        Command::Ablation { patch, branch, neck, epochs, model, data, seed } => {
            cmd_ablation(out, args, patch, branch, neck, *epochs, model, data, *seed)
        }
        Command::Replay { manifest } => cmd_replay(manifest),
    }
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Failed>().is_some() {
        1
    } else {
        2
    }
}

pub fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli, &argv[1..]) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
