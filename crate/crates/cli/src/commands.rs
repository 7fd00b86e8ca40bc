use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;

use la_transformer::checks::{component_checks, op_checks, run_suite, CheckOptions, CheckResult};
use la_transformer::config::RunConfig;
use la_transformer::data::{
    export_market_layout, generate_synthetic, load_directory, Checkpoint, Dataset,
};
use la_transformer::reid::{
    evaluate, read_embeddings, write_embeddings, write_jsonl, EvalReport, GalleryIndex, LabeledEmbedding,
};
use la_transformer::train::{embed_samples, EpochMetrics, Trainer};
use la_transformer::Error;

use crate::error::CliError;
use crate::{ConfigArgs, EmbeddingFormat, OUTPUT_DIR_ENV};

/// Version of the eval, summary and gradcheck JSON documents.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

pub fn single_thread() -> Result<(), CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot configure thread pool: {e}")))
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig, CliError> {
    Ok(RunConfig::load(args.config.as_deref(), &args.profile, &args.overrides)?)
}

/// Flag, then environment, then config.
fn output_dir(flag: Option<&Path>, config: &RunConfig) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| config.output_dir.clone())
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn io_error(path: &Path, source: std::io::Error) -> CliError {
    CliError::Core(Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Malformed(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| io_error(path, e))
}

fn use_directory(config: &mut RunConfig, dir: &Path) -> Result<(), CliError> {
    config.data.synthetic = None;
    config.data.directory = Some(dir.to_path_buf());
    config.validate()?;
    Ok(())
}

fn load_dataset(config: &RunConfig) -> Result<Dataset, CliError> {
    let b = &config.backbone;
    let norm = &config.data.normalization;
    let data = match (&config.data.synthetic, &config.data.directory) {
        (Some(spec), _) => Dataset::from_synthetic(spec, norm)?,
        (None, Some(dir)) => Dataset::load_market(dir, b.image_height, b.image_width, norm)?,
        (None, None) => return Err(Error::Config(vec!["no data source configured".into()]).into()),
    };
    info!(
        "data: {} train ({} identities), {} query, {} gallery",
        data.train.len(),
        data.num_classes(),
        data.query.len(),
        data.gallery.len()
    );
    Ok(data)
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    schema_version: u32,
    epochs_completed: usize,
    last: Option<&'a EpochMetrics>,
    best_epoch: Option<usize>,
    best_query_rank1: Option<f64>,
    /// `best.ckpt` when `eval.select_best` is set and a best epoch exists, else `last.ckpt`.
    selected_checkpoint: &'a str,
}

pub fn train(
    args: &ConfigArgs,
    data_dir: Option<&Path>,
    output: Option<&Path>,
    resume: Option<&Path>,
) -> Result<(), CliError> {
    let mut trainer = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let stored: RunConfig = serde_json::from_str(&ck.config_json)
                .map_err(|e| Error::Malformed(format!("checkpoint config: {e}")))?;
            let mut config = stored.with_overrides(&args.overrides)?;
            if let Some(dir) = data_dir {
                use_directory(&mut config, dir)?;
            }
            Trainer::from_checkpoint_with(&ck, config)?
        }
        None => {
            let mut config = load_config(args)?;
            if let Some(dir) = data_dir {
                use_directory(&mut config, dir)?;
            }
            Trainer::new(config)?
        }
    };
    if trainer.config.deterministic && rayon::current_num_threads() > 1 {
        single_thread()?;
    }
    let out = output_dir(output, &trainer.config);
    create_dir(&out)?;
    let config_path = out.join("config.toml");
    fs::write(&config_path, trainer.config.to_toml()?).map_err(|e| io_error(&config_path, e))?;
    let last_path = out.join("last.ckpt");
    if trainer.next_epoch >= trainer.config.training.epochs {
        trainer.checkpoint()?.save(&last_path)?;
        info!("no epochs to run; wrote {}", last_path.display());
        println!("{}", last_path.display());
        return Ok(());
    }
    let data = load_dataset(&trainer.config)?;
    let best_path = out.join("best.ckpt");
    let metrics_path = out.join("metrics.jsonl");
    let mut metrics_file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&metrics_path)
        .map_err(|e| io_error(&metrics_path, e))?;
    while trainer.next_epoch < trainer.config.training.epochs {
        let m = trainer.run_epoch(&data)?;
        let line = serde_json::to_string(&m).map_err(|e| Error::Malformed(e.to_string()))?;
        writeln!(metrics_file, "{line}").map_err(|e| io_error(&metrics_path, e))?;
        let ck = trainer.checkpoint()?;
        ck.save(&last_path)?;
        if trainer.is_best(&m) {
            ck.save(&best_path)?;
            info!("new best query rank-1 {:.4} at epoch {}", m.query_rank1.unwrap_or(0.0), m.epoch);
        }
    }
    let best = trainer.metadata.best.clone();
    let selected = if trainer.config.eval.select_best && best.is_some() {
        "best.ckpt"
    } else {
        "last.ckpt"
    };
    let summary = TrainSummary {
        schema_version: REPORT_SCHEMA_VERSION,
        epochs_completed: trainer.next_epoch,
        last: trainer.metadata.history.last(),
        best_epoch: best.as_ref().map(|b| b.epoch),
        best_query_rank1: best.as_ref().map(|b| b.query_rank1),
        selected_checkpoint: selected,
    };
    write_json(&out.join("summary.json"), &summary)?;
    println!("{}", out.join(selected).display());
    Ok(())
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub data: Option<PathBuf>,
    pub query_embeddings: Option<PathBuf>,
    pub gallery_embeddings: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub output: Option<PathBuf>,
}

#[derive(Serialize)]
struct EvalDocument<'a> {
    schema_version: u32,
    checkpoint: String,
    embedding_dim: usize,
    queries: usize,
    gallery: usize,
    valid_queries: usize,
    max_rank: usize,
    exclude_same_camera: bool,
    rank1: f64,
    rank5: f64,
    rank10: f64,
    #[serde(rename = "mAP")]
    mean_ap: f64,
    cmc: &'a [f64],
    per_query_ap: &'a [Option<f64>],
}

fn read_embedding_file(path: &Path, expected_dim: usize, role: &str) -> Result<Vec<LabeledEmbedding>, CliError> {
    let file = read_embeddings(path)?;
    if file.dim != expected_dim && !file.records.is_empty() {
        return Err(Error::Dimension(format!(
            "{role} embeddings in {} have dimension {}, the checkpoint produces {expected_dim}",
            path.display(),
            file.dim
        ))
        .into());
    }
    Ok(file.records)
}

pub fn table(report: &EvalReport) -> String {
    let mut s = String::from("metric   value\n");
    for k in [1, 5, 10] {
        s += &format!("{:<8} {:.4}\n", format!("rank-{k}"), report.rank(k));
    }
    s += &format!("{:<8} {:.4}\n", "mAP", report.mean_ap);
    s
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let stored: RunConfig = serde_json::from_str(&ck.config_json)
        .map_err(|e| Error::Malformed(format!("checkpoint config: {e}")))?;
    let mut config = stored.with_overrides(&args.overrides)?;
    if let Some(dir) = &args.data {
        use_directory(&mut config, dir)?;
    }
    let trainer = Trainer::from_checkpoint_with(&ck, config)?;
    let dim = trainer.model.embedding_dim();
    let need_data = args.query_embeddings.is_none() || args.gallery_embeddings.is_none();
    let data = if need_data { Some(load_dataset(&trainer.config)?) } else { None };
    let embed_split = |pick: fn(&Dataset) -> &[la_transformer::data::Sample]| -> Result<Vec<LabeledEmbedding>, CliError> {
        let d = data.as_ref().expect("dataset loaded");
        Ok(embed_samples(&trainer.model, pick(d))?)
    };
    let gallery = match &args.gallery_embeddings {
        Some(p) => read_embedding_file(p, dim, "gallery")?,
        None => embed_split(|d| &d.gallery)?,
    };
    let queries = match &args.query_embeddings {
        Some(p) => read_embedding_file(p, dim, "query")?,
        None => embed_split(|d| &d.query)?,
    };
    let options = trainer.config.eval.options();
    let report = evaluate(&queries, &GalleryIndex::new(&gallery)?, &options)?;

    let out = output_dir(args.output.as_deref(), &trainer.config);
    create_dir(&out)?;
    let doc = EvalDocument {
        schema_version: REPORT_SCHEMA_VERSION,
        checkpoint: args.checkpoint.display().to_string(),
        embedding_dim: dim,
        queries: queries.len(),
        gallery: gallery.len(),
        valid_queries: report.valid_queries,
        max_rank: options.max_rank,
        exclude_same_camera: options.exclude_same_camera,
        rank1: report.rank(1),
        rank5: report.rank(5),
        rank10: report.rank(10),
        mean_ap: report.mean_ap,
        cmc: &report.cmc,
        per_query_ap: &report.per_query_ap,
    };
    write_json(&out.join("eval.json"), &doc)?;
    let text = table(&report);
    let txt = out.join("eval.txt");
    fs::write(&txt, &text).map_err(|e| io_error(&txt, e))?;
    print!("{text}");
    Ok(())
}

pub fn embed(checkpoint: &Path, images: &Path, out: &Path, format: EmbeddingFormat) -> Result<(), CliError> {
    let trainer = Trainer::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let b = &trainer.config.backbone;
    let samples = load_directory(images, b.image_height, b.image_width, &trainer.config.data.normalization)?;
    let records = embed_samples(&trainer.model, &samples)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    match format {
        EmbeddingFormat::Binary => write_embeddings(out, trainer.model.embedding_dim(), &records)?,
        EmbeddingFormat::Jsonl => write_jsonl(out, &records)?,
    }
    info!("wrote {} embeddings of dimension {} to {}", records.len(), trainer.model.embedding_dim(), out.display());
    println!("{}", records.len());
    Ok(())
}

#[derive(Serialize)]
struct GradcheckDocument<'a> {
    schema_version: u32,
    tolerance: f64,
    seed: u64,
    passed: bool,
    checks: &'a [CheckResult],
}

pub fn gradcheck(
    args: &ConfigArgs,
    seed: Option<u64>,
    tolerance: f64,
    corrupt: bool,
    end_to_end: bool,
    report: Option<&Path>,
) -> Result<(), CliError> {
    let config = load_config(args)?;
    let mut opts = CheckOptions {
        seed: seed.unwrap_or(config.training.seed),
        tolerance,
        ..CheckOptions::default()
    };
    opts.gradcheck.corrupt = corrupt;
    let model = config.model();
    let results = if end_to_end {
        run_suite(&model, &opts)?
    } else {
        let mut r = op_checks(&opts)?;
        r.extend(component_checks(&model.backbone, &opts)?);
        r
    };
    for r in &results {
        println!(
            "{} {:<28} {:.3e}  ({} coordinates)",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.max_rel_error,
            r.coordinates
        );
    }
    let passed = results.iter().all(|r| r.passed);
    if let Some(path) = report {
        write_json(
            path,
            &GradcheckDocument {
                schema_version: REPORT_SCHEMA_VERSION,
                tolerance,
                seed: opts.seed,
                passed,
                checks: &results,
            },
        )?;
    }
    if passed {
        Ok(())
    } else {
        let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
        Err(CliError::CheckFailed(format!("{} of {} checks failed: {}", failed.len(), results.len(), failed.join(", "))))
    }
}

pub fn synth(args: &ConfigArgs, out: &Path) -> Result<(), CliError> {
    let config = load_config(args)?;
    let spec = config
        .data
        .synthetic
        .ok_or_else(|| CliError::Usage("the config has no data.synthetic section".into()))?;
    let set = generate_synthetic(&spec)?;
    export_market_layout(&set, out)?;
    println!(
        "{} train, {} query, {} gallery images in {}",
        set.train.len(),
        set.query.len(),
        set.gallery.len(),
        out.display()
    );
    Ok(())
}

pub fn show_config(args: &ConfigArgs) -> Result<(), CliError> {
    let config = load_config(args)?;
    let mut w = BufWriter::new(std::io::stdout());
    write!(w, "{}", config.to_toml()?).and_then(|_| w.flush()).map_err(|e| io_error(Path::new("<stdout>"), e))
}
