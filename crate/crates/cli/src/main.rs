//! `ctf`: command-line driver for data generation, tokenizer and model training,
//! clustering, sampling, evaluation and benchmarks.
//!
//! Every subcommand works inside one run directory (`--out`), reading upstream artifacts
//! from it and writing its own. Exit codes: 0 success, 1 runtime failure, 2 usage error,
//! 3 validation failure. Failures print one JSON line on stderr.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ctf_core::checkpoint::{load_checkpoint, save_checkpoint, tokenizer_checkpoint, tokenizer_from_checkpoint};
use ctf_core::clustering::{load_cluster_map, save_cluster_map, ClusterMap};
use ctf_core::config::{Overrides, RunConfig};
use ctf_core::data::{export_dataset, generate_dataset, import_dataset, write_ppm, Image, LabeledDataset, Split};
use ctf_core::eval::{
    convergence_curves, nll_report, substitution_experiment, throughput_bench, token_accuracy, NllMode, NllModels,
    SubstitutionMode,
};
use ctf_core::model::ModelKind;
use ctf_core::pipeline::{generate, generate_baseline, tokenize_dataset, train_model, TrainedModel};
use ctf_core::sweep::{ablation_sweep, SweepAxis, SweepInputs};
use ctf_core::tokenizer::{export_codebook, import_codebook, train_tokenizer, Codebook, TokenizerParams};
use ctf_core::CtfError;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "ctf", version, about = "Coarse-to-fine autoregressive image generation over clustered VQ tokens")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// JSON run configuration; omitted sections and fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory holding every artifact.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Replaces the seed of every config section.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of clusters M.
    #[arg(long)]
    clusters: Option<usize>,
    /// Classifier-free guidance scale.
    #[arg(long, allow_negative_numbers = true)]
    cfg_scale: Option<f64>,
    /// Stage-1 (coarse) sampling temperature.
    #[arg(long)]
    temp1: Option<f64>,
    /// Stage-2 (fine) sampling temperature.
    #[arg(long)]
    temp2: Option<f64>,
    /// Keep only the k largest logits (0 = unrestricted).
    #[arg(long)]
    top_k: Option<usize>,
    /// Restrict stage-2 sampling to members of the sampled cluster.
    #[arg(long)]
    cluster_mask: bool,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Trunk preset for every model: tiny, small, desk or large.
    #[arg(long)]
    model_size: Option<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SampleModel {
    Ctf,
    Baseline,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic train and validation sets as PPM files.
    GenData(Common),
    /// Train the patch VQ tokenizer on the training set.
    TrainTokenizer(Common),
    /// Write the tokenizer's codebook as a CBK1 file.
    ExportCodebook {
        #[command(flatten)]
        common: Common,
        /// Destination (default: <out>/codebook.cbk).
        #[arg(long)]
        dest: Option<PathBuf>,
    },
    /// Validate a CBK1 codebook and store it in the run directory for clustering.
    ImportCodebook {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        codebook: PathBuf,
    },
    /// Cluster the codebook into M groups (k-means or random, per config).
    Cluster {
        #[command(flatten)]
        common: Common,
        /// Codebook to cluster (default: <out>/codebook.cbk, else the tokenizer's).
        #[arg(long)]
        codebook: Option<PathBuf>,
    },
    /// Train the causal coarse-label model.
    TrainStage1(Common),
    /// Train the full-attention fine-label model.
    TrainStage2(Common),
    /// Train the single-stage fine-token baseline.
    TrainBaseline(Common),
    /// Generate images and write them as a PPM grid.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "ctf")]
        model: SampleModel,
    },
    /// Token accuracy and held-out likelihood of every trained model in the run.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Also train matched stage-1 / baseline runs and record per-epoch curves.
        #[arg(long)]
        convergence: bool,
    },
    /// Sampling throughput of the two-stage model against the baseline.
    Bench(Common),
    /// Reconstruction error under same-cluster and any-token substitution.
    Substitute(Common),
    /// Vary one configuration axis and report metrics per value.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// clusters, stage2_size, cfg, top_k, temp1, temp2 or clustering_mode.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
}

enum Failure {
    Usage(String),
    Core(CtfError),
}

impl From<CtfError> for Failure {
    fn from(e: CtfError) -> Self {
        Failure::Core(e)
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn classify(e: &CtfError) -> (u8, &'static str) {
    match e {
        CtfError::Config(_) => (3, "config"),
        CtfError::MissingArtifact(_) => (3, "missing_artifact"),
        CtfError::Fingerprint(_) => (3, "fingerprint"),
        CtfError::Parameter(_) => (3, "parameter"),
        CtfError::Format { .. } => (3, "format"),
        CtfError::UnsupportedDtype(_) => (3, "unsupported_dtype"),
        CtfError::Json(_) => (3, "json"),
        CtfError::Index(_) => (1, "index"),
        CtfError::Shape(_) => (1, "shape"),
        CtfError::Tensor(_) => (1, "tensor"),
        CtfError::Training { .. } => (1, "training"),
        CtfError::Sampling(_) => (1, "sampling"),
        CtfError::Io { .. } => (1, "io"),
    }
}

fn fail(code: u8, kind: &str, message: &str) -> ExitCode {
    eprintln!("{}", json!({"error": kind, "message": message, "exit_code": code}));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return fail(2, "usage", e.kind().as_str().unwrap_or("invalid arguments"));
        }
    };
    match run(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(Failure::Usage(m)) => fail(2, "usage", &m),
        Err(Failure::Core(e)) => {
            let (code, kind) = classify(&e);
            fail(code, kind, &e.to_string())
        }
    }
}

/// Resolved configuration plus the run directory.
struct Run {
    cfg: RunConfig,
    out: PathBuf,
}

impl Run {
    fn new(common: &Common) -> Outcome<Self> {
        let mut cfg = match &common.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let overrides = Overrides {
            seed: common.seed,
            clusters: common.clusters,
            cfg_scale: common.cfg_scale,
            temp1: common.temp1,
            temp2: common.temp2,
            top_k: common.top_k,
            cluster_mask: common.cluster_mask.then_some(true),
            epochs: common.epochs,
            model_size: common.model_size.clone(),
        };
        overrides.apply(&mut cfg)?;
        fs::create_dir_all(&common.out).map_err(|e| CtfError::io(&common.out, e))?;
        Ok(Self { cfg, out: common.out.clone() })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn config_value(&self) -> Value {
        self.cfg.to_value()
    }

    /// Writes `{"config": ..., <key>: value}` as pretty JSON.
    fn write_json(&self, name: &str, key: &str, value: Value) -> Outcome<PathBuf> {
        let path = self.path(name);
        let doc = json!({ "config": self.config_value(), key: value });
        fs::write(&path, serde_json::to_vec_pretty(&doc).map_err(CtfError::from)?).map_err(|e| CtfError::io(&path, e))?;
        Ok(path)
    }

    fn require(&self, name: &str, hint: &str) -> Outcome<PathBuf> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(CtfError::MissingArtifact(format!("{} (run `ctf {hint}` first)", p.display())).into())
        }
    }

    fn dataset(&self, split: Split) -> Outcome<LabeledDataset> {
        let dir = self.path("data").join(split.name());
        if !dir.join("manifest.json").exists() {
            return Err(CtfError::MissingArtifact(format!("{} dataset in {} (run `ctf gen-data` first)", split.name(), dir.display())).into());
        }
        Ok(import_dataset(&dir)?)
    }

    fn tokenizer(&self) -> Outcome<TokenizerParams> {
        let p = self.require("tokenizer.ckpt", "train-tokenizer")?;
        Ok(tokenizer_from_checkpoint(load_checkpoint(&p)?)?)
    }

    fn cluster_map(&self) -> Outcome<ClusterMap> {
        Ok(load_cluster_map(&self.require("clusters.clm", "cluster")?)?)
    }

    fn model(&self, kind: ModelKind) -> Outcome<TrainedModel> {
        let name = format!("{}.ckpt", kind.name());
        let p = self.require(&name, &format!("train-{}", kind.name().replace('_', "-")))?;
        let m = TrainedModel::from_checkpoint(load_checkpoint(&p)?)?;
        if m.params.config.kind != kind {
            return Err(CtfError::Config(format!("{} holds a {} model", p.display(), m.params.config.kind.name())).into());
        }
        Ok(m)
    }

    fn sample_classes(&self, class_count: usize) -> Vec<usize> {
        (0..self.cfg.eval.samples.max(1)).map(|i| i % class_count).collect()
    }
}

fn summary(command: &str, artifacts: &[PathBuf], extra: Value) -> String {
    let paths: Vec<String> = artifacts.iter().map(|p| p.display().to_string()).collect();
    json!({"status": "ok", "command": command, "artifacts": paths, "result": extra}).to_string()
}

/// Images laid out ten per row.
fn image_grid(images: &[Image]) -> Outcome<Image> {
    let rows = images.chunks(10).map(|row| Image::hstack(row, 1)).collect::<ctf_core::Result<Vec<_>>>()?;
    let width = rows.iter().map(|r| r.width).max().unwrap_or(0);
    let padded: Vec<Image> = rows
        .into_iter()
        .map(|r| if r.width == width { Ok(r) } else { Image::hstack(&[r.clone(), Image::filled(r.height, width - r.width, [0.0; 3])], 0) })
        .collect::<ctf_core::Result<_>>()?;
    Ok(Image::vstack(&padded, 1)?)
}

fn run(command: Command) -> Outcome<String> {
    match command {
        Command::GenData(c) => gen_data(&Run::new(&c)?),
        Command::TrainTokenizer(c) => train_tok(&Run::new(&c)?),
        Command::ExportCodebook { common, dest } => {
            let run = Run::new(&common)?;
            let tok = run.tokenizer()?;
            let dest = dest.unwrap_or_else(|| run.path("codebook.cbk"));
            export_codebook(&tok.codebook, &dest)?;
            Ok(summary("export-codebook", &[dest], json!({"k": tok.codebook.k(), "d": tok.codebook.d()})))
        }
        Command::ImportCodebook { common, codebook } => {
            let run = Run::new(&common)?;
            let cb = import_codebook(&codebook)?;
            let dest = run.path("codebook.cbk");
            export_codebook(&cb, &dest)?;
            Ok(summary("import-codebook", &[dest], json!({"k": cb.k(), "d": cb.d()})))
        }
        Command::Cluster { common, codebook } => cluster(&Run::new(&common)?, codebook),
        Command::TrainStage1(c) => train(&Run::new(&c)?, ModelKind::Stage1),
        Command::TrainStage2(c) => train(&Run::new(&c)?, ModelKind::Stage2),
        Command::TrainBaseline(c) => train(&Run::new(&c)?, ModelKind::Baseline),
        Command::Sample { common, model } => sample(&Run::new(&common)?, model),
        Command::Eval { common, convergence } => eval(&Run::new(&common)?, convergence),
        Command::Bench(c) => {
            let run = Run::new(&c)?;
            let report = throughput_bench(&run.cfg.eval.bench)?;
            let path = run.write_json("bench_report.json", "report", serde_json::to_value(&report).map_err(CtfError::from)?)?;
            Ok(summary("bench", &[path], serde_json::to_value(&report.values).map_err(CtfError::from)?))
        }
        Command::Substitute(c) => substitute(&Run::new(&c)?),
        Command::Sweep { common, axis, values } => {
            let axis: SweepAxis = axis.parse().map_err(|e: CtfError| Failure::Usage(e.to_string()))?;
            let values: Vec<String> = values.into_iter().map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
            if values.is_empty() {
                return Err(Failure::Usage(format!("sweep over {axis} needs at least one value")));
            }
            sweep(&Run::new(&common)?, axis, &values)
        }
    }
}

fn gen_data(run: &Run) -> Outcome<String> {
    let d = &run.cfg.data;
    let mut written = Vec::new();
    for (split, per_class) in [(Split::Train, d.train_per_class), (Split::Val, d.val_per_class)] {
        let ds = generate_dataset(d.classes, per_class, d.height, d.width, d.seed, split)?;
        written.push(export_dataset(&ds, &run.path("data").join(split.name()))?);
    }
    written.push(run.write_json("data.json", "data", json!({"train": d.classes * d.train_per_class, "val": d.classes * d.val_per_class}))?);
    Ok(summary("gen-data", &written, json!({"classes": d.classes})))
}

fn train_tok(run: &Run) -> Outcome<String> {
    let train = run.dataset(Split::Train)?;
    let (params, report) = train_tokenizer(&train, &run.cfg.tokenizer)?;
    let ckpt = run.path("tokenizer.ckpt");
    save_checkpoint(&tokenizer_checkpoint(&params, run.cfg.tokenizer.seed, report.steps as u64, Some(run.config_value())), &ckpt)?;
    let rep = run.write_json("tokenizer_report.json", "report", serde_json::to_value(&report).map_err(CtfError::from)?)?;
    Ok(summary("train-tokenizer", &[ckpt, rep], json!({"recon_mse": report.recon_mse, "codebook_usage": report.codebook_usage})))
}

fn cluster(run: &Run, codebook: Option<PathBuf>) -> Outcome<String> {
    let source = codebook.or_else(|| Some(run.path("codebook.cbk")).filter(|p| p.exists()));
    let cb: Codebook = match &source {
        Some(p) if !p.exists() => return Err(CtfError::MissingArtifact(p.display().to_string()).into()),
        Some(p) => import_codebook(p)?,
        None => run.tokenizer()?.codebook,
    };
    let map = run.cfg.clustering.build(&cb)?;
    let path = run.path("clusters.clm");
    save_cluster_map(&map, &path)?;
    let info = json!({
        "codebook": source.map_or("tokenizer.ckpt".to_string(), |p| p.display().to_string()),
        "m": map.m(),
        "k": map.k(),
        "sse": map.sse,
        "iterations": map.iterations,
        "sse_history": map.sse_history,
        "cluster_sizes": map.cluster_sizes(),
    });
    let rep = run.write_json("cluster_report.json", "clustering", info)?;
    Ok(summary("cluster", &[path, rep], json!({"m": map.m(), "k": map.k(), "sse": map.sse})))
}

fn train(run: &Run, kind: ModelKind) -> Outcome<String> {
    let tok = run.tokenizer()?;
    let map = if kind == ModelKind::Baseline { None } else { Some(run.cluster_map()?) };
    if let Some(m) = &map {
        if m.k() != tok.codebook.k() {
            return Err(CtfError::Config(format!("cluster map covers {} codewords but the tokenizer has {}", m.k(), tok.codebook.k())).into());
        }
    }
    let train = run.dataset(Split::Train)?;
    let trunk = match kind {
        ModelKind::Stage1 => run.cfg.model.stage1.clone(),
        ModelKind::Stage2 => run.cfg.model.stage2.clone(),
        ModelKind::Baseline => run.cfg.model.baseline.clone(),
    };
    let conditioned = kind != ModelKind::Stage2 || run.cfg.model.stage2_class_conditioning;
    let (model, curve) = train_model(kind, &train, &tok, map.as_ref(), trunk, conditioned, &run.cfg.train)?;
    let ckpt = run.path(&format!("{}.ckpt", kind.name()));
    save_checkpoint(&model.to_checkpoint(Some(run.config_value()))?, &ckpt)?;
    let rep = run.write_json(&format!("{}_curve.json", kind.name()), "curve", serde_json::to_value(&curve).map_err(CtfError::from)?)?;
    Ok(summary(&format!("train-{}", kind.name()), &[ckpt, rep], json!({"steps": model.step, "final_loss": curve.epoch_loss.last()})))
}

fn sample(run: &Run, which: SampleModel) -> Outcome<String> {
    let tok = run.tokenizer()?;
    let class_count = run.dataset(Split::Train).map(|d| d.class_count).unwrap_or(run.cfg.data.classes);
    let classes = run.sample_classes(class_count);
    let gen = match which {
        SampleModel::Ctf => {
            let map = run.cluster_map()?;
            let s1 = run.model(ModelKind::Stage1)?;
            let s2 = run.model(ModelKind::Stage2)?;
            generate(&classes, &s1, &s2, &map, &tok, &run.cfg.sampler)?
        }
        SampleModel::Baseline => generate_baseline(&classes, &run.model(ModelKind::Baseline)?, &tok, &run.cfg.sampler)?,
    };
    let name = match which {
        SampleModel::Ctf => "samples",
        SampleModel::Baseline => "samples_baseline",
    };
    let grid = run.path(&format!("{name}.ppm"));
    write_ppm(&image_grid(&gen.images)?, &grid)?;
    let tokens = json!({
        "classes": classes,
        "coarse": gen.coarse,
        "fine": gen.fine,
        "stage1_invocations": gen.stage1_invocations,
        "stage2_invocations": gen.stage2_invocations,
        "sampler": run.cfg.sampler,
    });
    let meta = run.write_json(&format!("{name}.json"), "samples", tokens)?;
    Ok(summary("sample", &[grid, meta], json!({"images": gen.images.len(), "invocations": gen.stage1_invocations + gen.stage2_invocations})))
}

fn eval(run: &Run, convergence: bool) -> Outcome<String> {
    let tok = run.tokenizer()?;
    let val = tokenize_dataset(&run.dataset(Split::Val)?, &tok)?;
    let map = run.cluster_map().ok();
    let load = |kind: ModelKind| -> Outcome<Option<TrainedModel>> {
        if !run.path(&format!("{}.ckpt", kind.name())).exists() {
            return Ok(None);
        }
        let m = run.model(kind)?;
        m.check_lineage(Some(&tok), if kind == ModelKind::Baseline { None } else { map.as_ref() })?;
        Ok(Some(m))
    };
    let (s1, s2, bl) = (load(ModelKind::Stage1)?, load(ModelKind::Stage2)?, load(ModelKind::Baseline)?);
    if s1.is_none() && s2.is_none() && bl.is_none() && !convergence {
        return Err(CtfError::MissingArtifact("no trained model in the run directory".into()).into());
    }
    let mut reports = serde_json::Map::new();
    let mut put = |name: &str, r: &ctf_core::eval::EvalReport| -> Outcome<()> {
        reports.insert(name.into(), serde_json::to_value(r).map_err(CtfError::from)?);
        Ok(())
    };
    for m in [&s1, &s2, &bl].into_iter().flatten() {
        let kind = m.params.config.kind;
        if kind != ModelKind::Baseline && map.is_none() {
            return Err(CtfError::MissingArtifact(format!("{} (run `ctf cluster` first)", run.path("clusters.clm").display())).into());
        }
        put(&format!("{}_accuracy", kind.name()), &token_accuracy(&m.params, &val, map.as_ref())?)?;
    }
    let models = NllModels { stage1: s1.as_ref().map(|m| &m.params), stage2: s2.as_ref().map(|m| &m.params), baseline: bl.as_ref().map(|m| &m.params) };
    if models.stage1.is_some() && models.stage2.is_some() {
        put("nll_ctf_masked", &nll_report(&models, &val, map.as_ref(), NllMode::CtfMasked)?)?;
    }
    if models.baseline.is_some() {
        put("nll_baseline", &nll_report(&models, &val, None, NllMode::Baseline)?)?;
    }
    if convergence {
        let map = map.as_ref().ok_or_else(|| CtfError::MissingArtifact("clusters.clm (run `ctf cluster` first)".into()))?;
        let train = tokenize_dataset(&run.dataset(Split::Train)?, &tok)?;
        put("convergence", &convergence_curves(&train, &val, map, run.cfg.model.stage1.clone(), &run.cfg.train)?)?;
    }
    let keys: Vec<String> = reports.keys().cloned().collect();
    let path = run.write_json("eval_report.json", "reports", Value::Object(reports))?;
    Ok(summary("eval", &[path], json!({"reports": keys})))
}

fn substitute(run: &Run) -> Outcome<String> {
    let tok = run.tokenizer()?;
    let map = run.cluster_map()?;
    let mut val = run.dataset(Split::Val)?;
    let n = run.cfg.eval.substitution_images;
    if n > 0 && n < val.len() {
        val = val.subset(&(0..n).collect::<Vec<_>>());
    }
    let mut results = serde_json::Map::new();
    let mut written = Vec::new();
    let mut mse = Vec::new();
    for (name, mode) in [("same_cluster", SubstitutionMode::SameCluster), ("any_token", SubstitutionMode::AnyToken)] {
        let s = substitution_experiment(&val, &tok, &map, mode, run.cfg.eval.seed)?;
        let grid = run.path(&format!("substitution_{name}.ppm"));
        write_ppm(&s.grid, &grid)?;
        written.push(grid);
        mse.push(s.report.value("mse")?);
        results.insert(name.into(), serde_json::to_value(&s.report).map_err(CtfError::from)?);
    }
    let ratio = mse[0] / mse[1];
    results.insert("ratio".into(), json!(ratio));
    written.push(run.write_json("substitution_report.json", "substitution", Value::Object(results))?);
    Ok(summary("substitute", &written, json!({"same_cluster_mse": mse[0], "any_token_mse": mse[1], "ratio": ratio})))
}

fn sweep(run: &Run, axis: SweepAxis, values: &[String]) -> Outcome<String> {
    let tok = run.tokenizer()?;
    let train = tokenize_dataset(&run.dataset(Split::Train)?, &tok)?;
    let val = tokenize_dataset(&run.dataset(Split::Val)?, &tok)?;
    let inputs = SweepInputs { codebook: &tok.codebook, train: &train, val: &val };
    let report = ablation_sweep(&run.cfg, axis, values, &inputs)?;
    let path = run.path(&format!("sweep_{}.json", axis.name()));
    fs::write(&path, serde_json::to_vec_pretty(&report).map_err(CtfError::from)?).map_err(|e| CtfError::io(&path, e))?;
    Ok(summary("sweep", &[path], json!({"axis": axis.name(), "rows": report.rows.len()})))
}
