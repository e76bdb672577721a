use std::fs;
use std::path::{Path, PathBuf};

use aesthete::attention::{attention_stats, compare_stats, AttentionComparison, AttentionStats};
use aesthete::config::RunConfig;
use aesthete::data::{images_to_tensor, merge_manifests, ImageSet, Manifest, MergeStats};
use aesthete::model::{open_or_build, Checkpoint, Encoder, PredictionHead, Projector, ScoreModel};
use aesthete::seed::derive_seed;
use aesthete::synthetic::{self, SyntheticSpec};
use aesthete::train::{
    evaluate, finetune_teacher, run_cfa, run_skd, CfaInputs, EvalReport, RunDir, StepRecord, TeacherFeatures,
    TeacherSource, TrainOutcome,
};
use aesthete::{BinSpec, Error, Result};
use candle_core::Device;
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::listing::{build_manifest, read_labels, SourceDir};
use crate::Global;

pub const RUN_ROOT_ENV: &str = "AESTHETE_RUN_ROOT";
pub const REPORT_FILE: &str = "report.json";
pub const IER_PLOT_FILE: &str = "ier.csv";
pub const ATTENTION_FILE: &str = "attention.json";
pub const ATTENTION_PLOT_FILE: &str = "attention.csv";

#[derive(Args, Debug)]
pub struct MakeManifestArgs {
    /// Image directory, optionally tagged: `[SOURCE=]DIR`; repeatable.
    #[arg(long = "images", value_name = "[SOURCE=]DIR", conflicts_with = "merge")]
    images: Vec<SourceDir>,
    /// Rows of `name,score` or `name,p1,...,pd` keyed by file stem.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Comma-separated bin values for labels (default 1..10).
    #[arg(long, value_delimiter = ',')]
    bins: Option<Vec<f64>>,
    /// Declared range of scalar labels, `LO,HI` (default: the bin range).
    #[arg(long, value_delimiter = ',', num_args = 1)]
    score_range: Option<Vec<f64>>,
    /// Manifest to merge; repeatable.
    #[arg(long = "merge", value_name = "MANIFEST")]
    merge: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    n_unlabeled: usize,
    #[arg(long, default_value_t = 36)]
    image_size: u32,
    #[arg(long, default_value_t = 0.0)]
    label_noise: f64,
    #[arg(long, default_value_t = 1.0)]
    spread: f64,
    #[arg(long, default_value = "syn")]
    prefix: String,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Continue from the run directory's saved state.
    #[arg(long)]
    resume: bool,
    /// Stop after this many total steps, saving resumable state.
    #[arg(long)]
    max_steps: Option<u64>,
    /// Also save resumable state every this many steps.
    #[arg(long)]
    checkpoint_every: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Score model checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labeled manifest to evaluate on.
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Args, Debug)]
pub struct AttnArgs {
    #[arg(long)]
    before: PathBuf,
    #[arg(long)]
    after: PathBuf,
    /// Probe images; the first `--probe` records are used.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 16)]
    probe: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub before: AttentionStats,
    pub after: AttentionStats,
    pub comparison: AttentionComparison,
    pub probe: Vec<String>,
}

fn print_json<T: Serialize>(value: &T) {
    use std::io::Write;
    // a closed pipe (`| head`) is not an error worth a panic
    let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn run_dir(cfg: &RunConfig, command: &str) -> PathBuf {
    if let Some(dir) = &cfg.run_dir {
        return dir.clone();
    }
    match std::env::var_os(RUN_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join(command),
        None => PathBuf::from("runs").join(command),
    }
}

fn required<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| Error::Config(format!("`{key}` must be set (config file or --set {key}=...)")))
}

fn load_set(path: &Path, root: &Path, cfg: &RunConfig, name: &str) -> Result<ImageSet> {
    let set = ImageSet::load(&Manifest::read(path)?)?;
    if !set.skipped.is_empty() {
        let report = root.join(format!("{name}-{}", cfg.data.skip_report));
        log::warn!("{} undecodable samples in {}; see {}", set.skipped.entries.len(), path.display(), report.display());
        set.skipped.write(&report)?;
    }
    Ok(set)
}

/// Opens the run directory and records the resolved config, or reopens it
/// for resumption.
fn open_run(cfg: &RunConfig, root: &Path, resume: bool) -> Result<(RunDir, Option<Checkpoint>)> {
    if resume {
        let (dir, state) = RunDir::resume(root)?;
        return Ok((dir, Some(state)));
    }
    let dir = RunDir::create(root)?;
    cfg.save(root)?;
    Ok((dir, None))
}

fn apply_train_args(cfg: &mut RunConfig, args: &TrainArgs) {
    if args.max_steps.is_some() {
        cfg.control.max_steps = args.max_steps;
    }
    if args.checkpoint_every.is_some() {
        cfg.control.checkpoint_every = args.checkpoint_every;
    }
}

fn resolve(g: &Global, args: &TrainArgs, command: &str) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = g.resolve()?;
    apply_train_args(&mut cfg, args);
    if args.resume {
        // the stored config wins; only the stop controls may change
        let root = run_dir(&cfg, command);
        let mut stored = RunConfig::load(&root.join(aesthete::config::CONFIG_FILE))?;
        stored.control = cfg.control.clone();
        stored.run_dir = Some(root.clone());
        return Ok((stored, root));
    }
    let root = run_dir(&cfg, command);
    cfg.run_dir = Some(root.clone());
    Ok((cfg, root))
}

pub fn make_manifest(args: &MakeManifestArgs) -> Result<()> {
    let (manifest, stats) = if !args.merge.is_empty() {
        let inputs = args.merge.iter().map(Manifest::read).collect::<Result<Vec<_>>>()?;
        merge_manifests(&inputs)?
    } else if !args.images.is_empty() {
        let bins = match &args.bins {
            Some(v) => BinSpec::new(v.clone())?,
            None => BinSpec::default(),
        };
        let range = match args.score_range.as_deref() {
            None => None,
            Some(&[lo, hi]) if lo < hi => Some((lo, hi)),
            Some(_) => return Err(Error::Config("--score-range takes LO,HI with LO < HI".into())),
        };
        let labels = args.labels.as_deref().map(read_labels).transpose()?;
        let m = build_manifest(&args.images, labels.as_ref(), &bins, range)?;
        let stats = MergeStats {
            total: m.len(),
            per_source: m.source_counts(),
            duplicates: 0,
            labeled: m.is_labeled(),
        };
        (m, stats)
    } else {
        return Err(Error::Config("give --images directories or --merge manifests".into()));
    };
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    manifest.write(&args.out)?;
    print_json(&stats);
    Ok(())
}

pub fn synth(g: &Global, args: &SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        n: args.n,
        n_unlabeled: args.n_unlabeled,
        image_size: args.image_size,
        seed: g.seed.unwrap_or(0),
        label_noise: args.label_noise,
        spread: args.spread,
        prefix: args.prefix.clone(),
        ..SyntheticSpec::default()
    };
    let set = synthetic::generate(&spec, &args.out)?;
    print_json(&serde_json::json!({
        "labeled": set.labeled_path,
        "unlabeled": set.unlabeled_path,
        "n": set.labeled.len(),
        "n_unlabeled": set.unlabeled.len(),
    }));
    Ok(())
}

fn summary(root: &Path, log: &[StepRecord], completed: bool) -> serde_json::Value {
    serde_json::json!({
        "run_dir": root,
        "completed": completed,
        "steps": log.last().map(|r| r.step),
        "last_loss": log.last().map(|r| r.loss),
    })
}

pub fn cfa(g: &Global, args: &TrainArgs) -> Result<()> {
    let (cfg, root) = resolve(g, args, "cfa")?;
    let (mut run, state) = open_run(&cfg, &root, args.resume)?;
    let seed = cfg.seed;
    let set = load_set(required(&cfg.data.train, "data.train")?, &root, &cfg, "train")?;
    let teacher = match &cfg.init.cfa_teacher {
        Some(p) => Checkpoint::load(p)?.to_encoder()?,
        None => Encoder::new(cfg.model.teacher.clone(), derive_seed(seed, &["cfa-teacher"]))?,
    };
    let student = match &cfg.init.student_backbone {
        Some(p) => Checkpoint::load(p)?.to_encoder()?,
        None => Encoder::new(cfg.model.student.clone(), derive_seed(seed, &["student"]))?,
    };
    if state.is_none() {
        // the starting point, for before/after attention reports
        Checkpoint::backbone(&student)?.save(&root.join("backbone_init"))?;
    }
    let projector = Projector::new(
        cfg.model.projector.clone(),
        student.feature_dim(),
        teacher.feature_dim(),
        derive_seed(seed, &["projector"]),
    )?;
    let preprocess = cfg.preprocess.spec(seed);
    let cache;
    let features = match cfg.cfa.teacher_source {
        TeacherSource::Live => TeacherFeatures::Live {
            encoder: &teacher,
            norm: cfg.preprocess.teacher_norm,
        },
        TeacherSource::Cache => {
            let path = cfg
                .init
                .feature_cache
                .clone()
                .unwrap_or_else(|| root.join("teacher_features.bin"));
            cache = open_or_build(&path, &teacher, &set, &preprocess, &cfg.preprocess.teacher_norm)?;
            TeacherFeatures::Cache(&cache)
        }
    };
    let teacher_hash = teacher.params.hash()?;
    let inputs = CfaInputs {
        student,
        projector,
        teacher: features,
        data: &set,
        preprocess,
        student_norm: cfg.preprocess.student_norm,
        seed,
    };
    let out = run_cfa(inputs, &cfg.cfa, cfg.control.control(), Some(&mut run), state.as_ref())?;
    debug_assert_eq!(teacher.params.hash()?, teacher_hash);
    print_json(&summary(&root, &out.log, out.completed));
    Ok(())
}

fn fresh_head(cfg: &RunConfig, backbone: &Encoder, tag: &str) -> Result<PredictionHead> {
    PredictionHead::new(
        cfg.model.head.clone(),
        backbone.feature_dim(),
        cfg.model.bins.clone(),
        derive_seed(cfg.seed, &[tag]),
    )
}

fn finish(root: &Path, out: &TrainOutcome) -> Result<()> {
    if let Some(report) = &out.final_eval {
        write_json(&root.join(REPORT_FILE), report)?;
        write_ier_plot(&root.join(IER_PLOT_FILE), report)?;
    }
    let mut s = summary(root, &out.log, out.completed);
    s["eval"] = serde_json::to_value(out.final_eval.as_ref().map(|e| &e.metrics)).expect("serializable");
    s["best_srcc"] = serde_json::to_value(out.best.as_ref().map(|b| b.1)).expect("serializable");
    print_json(&s);
    Ok(())
}

pub fn finetune(g: &Global, args: &TrainArgs) -> Result<()> {
    let (cfg, root) = resolve(g, args, "finetune-teacher")?;
    let (mut run, state) = open_run(&cfg, &root, args.resume)?;
    let labeled = load_set(required(&cfg.data.train, "data.train")?, &root, &cfg, "train")?;
    let eval = cfg.data.eval.as_deref().map(|p| load_set(p, &root, &cfg, "eval")).transpose()?;
    let backbone = match &cfg.init.teacher_backbone {
        Some(p) => Checkpoint::load(p)?.to_encoder()?,
        None => Encoder::new(cfg.model.score_teacher.clone(), derive_seed(cfg.seed, &["score-teacher"]))?,
    };
    let head = fresh_head(&cfg, &backbone, "teacher-head")?;
    let out = finetune_teacher(
        ScoreModel::new(backbone, head)?,
        &labeled,
        eval.as_ref(),
        &cfg.finetune,
        &cfg.score_setup(true),
        cfg.control.control(),
        Some(&mut run),
        state.as_ref(),
    )?;
    finish(&root, &out)
}

pub fn skd(g: &Global, args: &TrainArgs) -> Result<()> {
    let (cfg, root) = resolve(g, args, "skd")?;
    let teacher = Checkpoint::load(required(&cfg.init.teacher, "init.teacher")?)?.to_score_model()?;
    let (mut run, state) = open_run(&cfg, &root, args.resume)?;
    let labeled = load_set(required(&cfg.data.train, "data.train")?, &root, &cfg, "train")?;
    let unlabeled = cfg
        .data
        .unlabeled
        .as_deref()
        .map(|p| load_set(p, &root, &cfg, "unlabeled"))
        .transpose()?;
    let eval = cfg.data.eval.as_deref().map(|p| load_set(p, &root, &cfg, "eval")).transpose()?;
    let backbone = match &cfg.init.student_backbone {
        Some(p) => Checkpoint::load(p)?.to_encoder()?,
        None => Encoder::new(cfg.model.student.clone(), derive_seed(cfg.seed, &["student"]))?,
    };
    let head = fresh_head(&cfg, &backbone, "student-head")?;
    let teacher_hash = teacher.hash()?;
    let out = run_skd(
        ScoreModel::new(backbone, head)?,
        &teacher,
        &labeled,
        unlabeled.as_ref(),
        eval.as_ref(),
        &cfg.skd,
        &cfg.score_setup(true),
        cfg.control.control(),
        Some(&mut run),
        state.as_ref(),
    )?;
    debug_assert_eq!(teacher.hash()?, teacher_hash);
    finish(&root, &out)
}

fn write_ier_plot(path: &Path, report: &EvalReport) -> Result<()> {
    let mut text = String::from("lo,hi,n,errors,rate\n");
    for iv in &report.ier.intervals {
        let rate = iv.rate.map(|r| r.to_string()).unwrap_or_default();
        text.push_str(&format!("{},{},{},{},{rate}\n", iv.lo, iv.hi, iv.n, iv.errors));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn eval(g: &Global, args: &EvalArgs) -> Result<()> {
    let cfg = g.resolve()?;
    let root = run_dir(&cfg, "eval");
    let model = Checkpoint::load(&args.checkpoint)?.to_score_model()?;
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let set = load_set(&args.manifest, &root, &cfg, "eval")?;
    let report = evaluate(&model, &set, &cfg.score_setup(true))?;
    write_json(&root.join(REPORT_FILE), &report)?;
    write_ier_plot(&root.join(IER_PLOT_FILE), &report)?;
    print_json(&report.metrics);
    Ok(())
}

pub fn attn_report(g: &Global, args: &AttnArgs) -> Result<()> {
    let cfg = g.resolve()?;
    let root = run_dir(&cfg, "attn-report");
    let before = Checkpoint::load(&args.before)?.to_encoder()?;
    let after = Checkpoint::load(&args.after)?.to_encoder()?;
    for enc in [&before, &after] {
        if !enc.spec().is_transformer() {
            return Err(Error::Unsupported("attention statistics need transformer backbones".into()));
        }
    }
    if args.probe == 0 {
        return Err(Error::Argument("--probe must be positive".into()));
    }
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let set = load_set(&args.manifest, &root, &cfg, "probe")?;
    let n = args.probe.min(set.len());
    if n == 0 {
        return Err(Error::Argument("probe manifest has no decodable images".into()));
    }
    let indices: Vec<usize> = (0..n).collect();
    let stats = |enc: &Encoder| -> Result<AttentionStats> {
        let size = enc.spec().image_size().expect("transformer") as u32;
        let mut spec = cfg.preprocess.spec(cfg.seed).eval();
        spec.crop = size;
        spec.resize = spec.resize.max(size);
        let views = set.views(&indices, &spec, 0)?;
        let x = images_to_tensor(&views, &cfg.preprocess.student_norm, &Device::Cpu)?;
        attention_stats(&enc.capture_attention(&x)?)
    };
    let (sb, sa) = (stats(&before)?, stats(&after)?);
    let comparison = compare_stats(&sb, &sa)?;
    let report = AttentionReport {
        before: sb,
        after: sa,
        comparison,
        probe: indices.iter().map(|&i| set.record(i).id.clone()).collect(),
    };
    write_json(&root.join(ATTENTION_FILE), &report)?;
    let mut csv = String::from("layer,checkpoint,mean_distance,distance_std,mean_entropy\n");
    for (name, stats) in [("before", &report.before), ("after", &report.after)] {
        for (l, s) in stats.per_layer.iter().enumerate() {
            csv.push_str(&format!(
                "{l},{name},{},{},{}\n",
                s.mean_distance, s.distance_std, s.mean_entropy
            ));
        }
    }
    let plot = root.join(ATTENTION_PLOT_FILE);
    fs::write(&plot, csv).map_err(|e| Error::io(&plot, e))?;
    print_json(&report.comparison);
    Ok(())
}
