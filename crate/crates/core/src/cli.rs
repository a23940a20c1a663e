//! Command-line front end.
//!
//! Exit codes: 0 success, 1 invalid input or usage, 2 internal failure
//! (including a failed gradient check). Errors are reported as one JSON
//! line on stderr. Every output file is written to a temporary sibling and
//! renamed into place, and only after all outputs have been computed.
//!
//! `--config FILE` reads `key = value` defaults: top-level keys apply to any
//! subcommand that accepts them, keys under `[subcommand]` to that
//! subcommand only. Flags given on the command line win.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::anchors::{self, CenterUpdate, KMeansConfig, Shape};
use crate::annotations::{self, FilterConfig, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{self, ApMethod};
use crate::exec;
use crate::gradcheck;
use crate::stats;

#[derive(Debug, Parser)]
#[command(name = "logodet", version, about = "Logo detection dataset and metric toolkit")]
#[command(args_override_self = true)]
pub struct Cli {
    /// key=value defaults file; command-line flags override it
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Worker threads (outputs do not depend on this)
    #[arg(long, global = true, value_parser = clap::value_parser!(u32).range(1..))]
    pub threads: Option<u32>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Curate an annotated image tree (or a manifest with digests)
    Filter(FilterArgs),
    /// Stratified trainval/test split of a manifest
    Split(SplitArgs),
    /// Dataset statistics tables
    Stats(StatsArgs),
    /// K-means anchor design under the Avg-IoU objective
    Anchors(AnchorsArgs),
    /// VOC-style mAP evaluation
    Eval(EvalArgs),
    /// Finite-difference check of the CIoU and Focal gradients
    Losscheck(LosscheckArgs),
    /// Build a manifest from an annotation tree
    Ingest(IngestArgs),
    /// Build a vocabulary from a `<super-class>/<category>/` annotation tree
    Vocab(VocabArgs),
}

#[derive(Debug, clap::Args)]
pub struct FilterArgs {
    /// Directory of images with sibling XML files, or a digested manifest
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long, default_value_t = 300)]
    pub min_dim: u32,
    #[arg(long, default_value_t = 3.0)]
    pub max_aspect: f64,
    #[arg(long, default_value_t = 4)]
    pub dedup_threshold: u32,
    /// Filter report JSON (stdout when omitted)
    #[arg(long)]
    pub report_out: Option<PathBuf>,
    /// Manifest of the kept records
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 0.104)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub trainval_out: PathBuf,
    #[arg(long)]
    pub test_out: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CenterArg {
    Median,
    Mean,
}

#[derive(Debug, clap::Args)]
pub struct AnchorsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 9)]
    pub k: usize,
    /// Anchor counts to sweep, `start:stop:step` inclusive
    #[arg(long)]
    pub k_sweep: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 300)]
    pub max_iter: usize,
    #[arg(long, value_enum, default_value = "median")]
    pub center: CenterArg,
    #[arg(long, default_value_t = 3)]
    pub restarts: usize,
    /// Anchor JSON (stdout when omitted)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Sweep CSV `k,avg_iou`
    #[arg(long)]
    pub sweep_out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub detections: PathBuf,
    #[arg(long)]
    pub gt_manifest: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub iou: f64,
    /// IoU thresholds `start:stop:step` inclusive
    #[arg(long)]
    pub sweep: Option<String>,
    /// Use 11-point interpolated AP
    #[arg(long)]
    pub eleven_point: bool,
    /// Report JSON (stdout when omitted)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-class PR curve CSV
    #[arg(long)]
    pub pr_out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct LosscheckArgs {
    #[arg(long, default_value_t = 1000)]
    pub samples: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Report JSON (stdout when omitted)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also hash the sibling images (needed by `filter`)
    #[arg(long)]
    pub digests: bool,
}

#[derive(Debug, clap::Args)]
pub struct VocabArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Outputs of one command, flushed only once everything has succeeded.
#[derive(Default)]
struct Outputs {
    files: Vec<(PathBuf, Vec<u8>)>,
    stdout: Vec<u8>,
}

impl Outputs {
    fn file(&mut self, path: &Path, bytes: impl Into<Vec<u8>>) {
        self.files.push((path.to_path_buf(), bytes.into()));
    }

    fn to(&mut self, path: Option<&Path>, bytes: impl Into<Vec<u8>>) {
        match path {
            Some(p) => self.file(p, bytes),
            None => self.stdout.extend(bytes.into()),
        }
    }
}

fn json_pretty<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| Error::Internal(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn parse_k_sweep(spec: &str) -> Result<Vec<usize>> {
    let bad = || Error::invalid(format!("k sweep must be start:stop:step, got `{spec}`"));
    let parts: Vec<usize> = spec
        .split(':')
        .map(|p| p.trim().parse::<usize>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    match parts.as_slice() {
        [start, stop, step] if *step > 0 && start <= stop && *start >= 1 => {
            Ok((*start..=*stop).step_by(*step).collect())
        }
        _ => Err(bad()),
    }
}

fn load_manifest_or_tree(input: &Path, digests: bool) -> Result<Vec<annotations::ImageRecord>> {
    if input.is_dir() {
        annotations::load_annotation_tree(input, digests)
    } else {
        annotations::read_manifest(input)
    }
}

fn cmd_filter(a: &FilterArgs, out: &mut Outputs) -> Result<()> {
    let cfg = FilterConfig {
        min_dimension: a.min_dim,
        max_aspect_ratio: a.max_aspect,
        dedup_hamming_threshold: a.dedup_threshold,
    };
    cfg.validate()?;
    let vocab = Vocabulary::load(&a.vocab)?;
    let records = load_manifest_or_tree(&a.input, true)?;
    let (kept, report) = annotations::apply_filters(records, &vocab, &cfg)?;
    out.to(a.report_out.as_deref(), json_pretty(&report)?);
    if let Some(p) = &a.out {
        out.file(p, annotations::manifest_to_jsonl(&kept));
    }
    Ok(())
}

fn cmd_split(a: &SplitArgs, out: &mut Outputs) -> Result<()> {
    let records = annotations::read_manifest(&a.manifest)?;
    let split = annotations::split_dataset(&records, a.test_fraction, a.seed)?;
    let list = |rs: &[annotations::ImageRecord]| {
        rs.iter().map(|r| format!("{}\n", r.path)).collect::<String>()
    };
    out.file(&a.trainval_out, list(&split.trainval));
    out.file(&a.test_out, list(&split.test));
    Ok(())
}

fn cmd_stats(a: &StatsArgs, out: &mut Outputs) -> Result<()> {
    let vocab = Vocabulary::load(&a.vocab)?;
    let records = annotations::read_manifest(&a.manifest)?;
    let s = stats::compute_stats(&records, &vocab)?;
    out.file(&a.out_dir.join("category_stats.csv"), s.category_csv()?);
    out.file(&a.out_dir.join("super_class_stats.csv"), s.super_class_csv()?);
    out.file(&a.out_dir.join("size_bins.json"), s.size_bins_json()?);
    out.file(&a.out_dir.join("objects_per_image.csv"), s.objects_per_image_csv()?);
    Ok(())
}

#[derive(Serialize)]
struct AnchorsOutput {
    k: usize,
    centers: Vec<Shape>,
    avg_iou: f64,
    iterations: usize,
    converged: bool,
    seed: u64,
    samples: usize,
    skipped_degenerate: usize,
    published_centers_avg_iou: f64,
}

fn cmd_anchors(a: &AnchorsArgs, out: &mut Outputs) -> Result<()> {
    let records = annotations::read_manifest(&a.manifest)?;
    let (samples, skipped) = anchors::shape_samples(&records);
    let cfg = KMeansConfig {
        k: a.k,
        seed: a.seed,
        max_iter: a.max_iter,
        center_update: match a.center {
            CenterArg::Median => CenterUpdate::Median,
            CenterArg::Mean => CenterUpdate::Mean,
        },
        restarts: a.restarts,
    };
    let ks = a.k_sweep.as_deref().map(parse_k_sweep).transpose()?;
    if ks.is_none() && a.sweep_out.is_some() {
        return Err(Error::invalid("--sweep-out needs --k-sweep"));
    }
    let set = anchors::kmeans_anchors(&samples, &cfg)?;
    let result = AnchorsOutput {
        k: set.k,
        avg_iou: set.avg_iou,
        iterations: set.iterations,
        converged: set.converged,
        centers: set.shapes,
        seed: a.seed,
        samples: samples.len(),
        skipped_degenerate: skipped,
        published_centers_avg_iou: anchors::avg_iou_objective(&samples, &anchors::published_anchors())?,
    };
    out.to(a.out.as_deref(), json_pretty(&result)?);
    if let Some(ks) = ks {
        let curve = anchors::anchor_count_sweep(&samples, &ks, &cfg)?;
        let mut csv = String::from("k,avg_iou\n");
        for p in curve {
            csv.push_str(&format!("{},{}\n", p.k, p.avg_iou));
        }
        match &a.sweep_out {
            Some(p) => out.file(p, csv),
            None => out.stdout.extend(csv.into_bytes()),
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput {
    report: eval::EvalReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    sweep: Option<Vec<eval::SweepPoint>>,
}

fn cmd_eval(a: &EvalArgs, out: &mut Outputs) -> Result<()> {
    let text = fs::read_to_string(&a.detections).map_err(|e| Error::io(&a.detections, e))?;
    let dets = eval::detections_from_jsonl(&text).map_err(|e| match e {
        Error::Json { context, source } => Error::Json {
            context: format!("{}: {context}", a.detections.display()),
            source,
        },
        other => other,
    })?;
    let gt = annotations::read_manifest(&a.gt_manifest)?;
    let method = if a.eleven_point { ApMethod::ElevenPoint } else { ApMethod::AllPoints };
    let report = eval::evaluate_with(&dets, &gt, a.iou, method)?;
    let sweep = match &a.sweep {
        Some(spec) => Some(eval::threshold_sweep_with(&dets, &gt, &eval::parse_sweep(spec)?, method)?),
        None => None,
    };
    if let Some(p) = &a.pr_out {
        out.file(p, report.pr_csv()?);
    }
    out.to(a.out.as_deref(), json_pretty(&EvalOutput { report, sweep })?);
    Ok(())
}

fn cmd_losscheck(a: &LosscheckArgs, out: &mut Outputs) -> Result<bool> {
    let report = gradcheck::losscheck(a.samples, a.seed)?;
    out.to(a.out.as_deref(), json_pretty(&report)?);
    Ok(report.pass)
}

fn cmd_ingest(a: &IngestArgs, out: &mut Outputs) -> Result<()> {
    if !a.input.is_dir() {
        return Err(Error::invalid(format!("{} is not a directory", a.input.display())));
    }
    let records = annotations::load_annotation_tree(&a.input, a.digests)?;
    out.file(&a.out, annotations::manifest_to_jsonl(&records));
    Ok(())
}

fn cmd_vocab(a: &VocabArgs, out: &mut Outputs) -> Result<()> {
    if !a.input.is_dir() {
        return Err(Error::invalid(format!("{} is not a directory", a.input.display())));
    }
    let vocab = Vocabulary::from_dataset_tree(&a.input)?;
    out.file(&a.out, json_pretty(&vocab)?);
    Ok(())
}

/// Outcome of a command that ran to completion.
enum Done {
    Ok,
    CheckFailed,
}

fn dispatch(cmd: &Command, out: &mut Outputs) -> Result<Done> {
    match cmd {
        Command::Filter(a) => cmd_filter(a, out)?,
        Command::Split(a) => cmd_split(a, out)?,
        Command::Stats(a) => cmd_stats(a, out)?,
        Command::Anchors(a) => cmd_anchors(a, out)?,
        Command::Eval(a) => cmd_eval(a, out)?,
        Command::Losscheck(a) => {
            return Ok(if cmd_losscheck(a, out)? { Done::Ok } else { Done::CheckFailed })
        }
        Command::Ingest(a) => cmd_ingest(a, out)?,
        Command::Vocab(a) => cmd_vocab(a, out)?,
    }
    Ok(Done::Ok)
}

fn toml_to_arg(v: &toml::Value) -> Option<String> {
    match v {
        toml::Value::String(s) => Some(s.clone()),
        toml::Value::Integer(i) => Some(i.to_string()),
        toml::Value::Float(f) => Some(f.to_string()),
        toml::Value::Boolean(b) => Some(b.to_string()),
        _ => None,
    }
}

/// Finds `--config` in raw argv without a full parse (the config may supply
/// required flags).
fn find_config(argv: &[OsString]) -> Option<PathBuf> {
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--" {
            break;
        }
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(v) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(v));
        }
    }
    None
}

/// Splices config-file defaults in right after the subcommand name, so that
/// any repeated flag given later on the command line overrides them.
fn apply_config(argv: Vec<OsString>, path: &Path) -> Result<Vec<OsString>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::invalid(format!("{}: {}", path.display(), e.message())))?;

    let cmd = Cli::command();
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    let Some(pos) = argv
        .iter()
        .skip(1)
        .position(|a| names.iter().any(|n| a.to_str() == Some(n.as_str())))
        .map(|p| p + 1)
    else {
        return Ok(argv);
    };
    let sub_name = argv[pos].to_string_lossy().into_owned();
    let sub = cmd.find_subcommand(&sub_name).expect("name came from the command");
    let accepts = |key: &str| {
        sub.get_arguments()
            .chain(cmd.get_arguments())
            .find(|a| a.get_long() == Some(key))
            .map(|a| a.get_action().takes_values())
    };

    let mut injected: Vec<OsString> = Vec::new();
    let mut push = |key: &str, v: &toml::Value, strict: bool| -> Result<()> {
        let key = key.replace('_', "-");
        if key == "config" {
            return Err(Error::invalid(format!("{}: `config` cannot be set in a config file", path.display())));
        }
        let takes_value = match accepts(&key) {
            Some(t) => t,
            None if strict => {
                return Err(Error::invalid(format!(
                    "{}: unknown key `{key}` for `{sub_name}`",
                    path.display()
                )))
            }
            None => return Ok(()),
        };
        let val = toml_to_arg(v)
            .ok_or_else(|| Error::invalid(format!("{}: `{key}` must be a scalar", path.display())))?;
        if takes_value {
            injected.push(format!("--{key}").into());
            injected.push(val.into());
        } else if val == "true" {
            injected.push(format!("--{key}").into());
        } else if val != "false" {
            return Err(Error::invalid(format!("{}: `{key}` must be true or false", path.display())));
        }
        Ok(())
    };
    for (k, v) in &table {
        if !v.is_table() {
            push(k, v, false)?;
        }
    }
    if let Some(section) = table.get(&sub_name) {
        let section = section
            .as_table()
            .ok_or_else(|| Error::invalid(format!("{}: `{sub_name}` must be a section", path.display())))?;
        for (k, v) in section {
            push(k, v, true)?;
        }
    }
    for (k, v) in &table {
        if v.is_table() && !names.contains(k) {
            return Err(Error::invalid(format!("{}: unknown section `[{k}]`", path.display())));
        }
    }

    let mut out = argv[..=pos].to_vec();
    out.extend(injected);
    out.extend_from_slice(&argv[pos + 1..]);
    Ok(out)
}

#[derive(Serialize)]
struct Diagnostic<'a> {
    error: &'a str,
    message: String,
}

fn report_error(stderr: &mut dyn Write, kind: &str, message: &str) {
    let line = serde_json::to_string(&Diagnostic {
        error: kind,
        message: message.replace('\n', " ").trim().to_string(),
    })
    .expect("diagnostic serializes");
    let _ = writeln!(stderr, "{line}");
}

/// Runs one invocation and returns the process exit code.
pub fn run_with<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let mut argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    if let Some(cfg) = find_config(&argv) {
        match apply_config(argv, &cfg) {
            Ok(a) => argv = a,
            Err(e) => {
                report_error(stderr, e.kind(), &e.to_string());
                return 1;
            }
        }
    }

    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{e}");
                return 0;
            }
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("").trim_start_matches("error: ");
            report_error(stderr, "usage", first);
            let _ = write!(stderr, "{}", e.render());
            return 1;
        }
    };

    let work = || -> Result<(Done, Outputs)> {
        let mut out = Outputs::default();
        let done = dispatch(&cli.command, &mut out)?;
        Ok((done, out))
    };
    let result = match cli.threads {
        Some(n) => exec::with_threads(n as usize, work),
        None => work(),
    };
    let (done, out) = match result {
        Ok(r) => r,
        Err(e) => {
            report_error(stderr, e.kind(), &e.to_string());
            return if e.is_internal() { 2 } else { 1 };
        }
    };
    for (path, bytes) in &out.files {
        if let Err(e) = write_atomic(path, bytes) {
            report_error(stderr, e.kind(), &e.to_string());
            return 1;
        }
    }
    if stdout.write_all(&out.stdout).and_then(|_| stdout.flush()).is_err() {
        return 2;
    }
    match done {
        Done::Ok => 0,
        Done::CheckFailed => {
            report_error(stderr, "check_failed", "gradient check exceeded tolerance");
            2
        }
    }
}

pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(argv, &mut stdout.lock(), &mut stderr.lock())
}
