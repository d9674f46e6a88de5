use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pick_kie::autodiff::{DType, GradCheckOptions, Real};
use pick_kie::data::{
    compute_metrics, generate_synthetic, load_corpus, load_document, load_predictions, save_document,
    save_predictions, DataError, Document, EntitySpan, LayoutMode, SynthConfig,
};
use pick_kie::model::{
    checkpoint_precision, decode_checkpoint, evaluate, layer_sweep, model_gradcheck, save_checkpoint,
    split_validation, sweep_table, tiny_config, train, ModelConfig, ModelError,
};

mod overrides;

use overrides::ConfigOverrides;

const PRECISION_ENV: &str = "PICK_KIE_PRECISION";

#[derive(Parser)]
#[command(name = "pick-kie", version, about = "Key information extraction from document images")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Ablation {
    Image,
    GraphLearning,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model; writes `model.ckpt` and `metrics.jsonl` under --out.
    Train {
        /// Directory of `pick-kie/1` document files.
        #[arg(long)]
        data: PathBuf,
        /// `key = value` config file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Evaluation documents for a layer sweep; defaults to the validation split.
        #[arg(long)]
        test: Option<PathBuf>,
        /// Graph layers; a list such as `1,2,3,4` runs one model per value and prints a comparison.
        #[arg(long, value_delimiter = ',')]
        layers: Vec<usize>,
        #[arg(long, value_enum)]
        ablate: Vec<Ablation>,
        #[command(flatten)]
        overrides: ConfigOverrides,
    },
    /// Print entity metrics as JSON, from a checkpoint or from stored predictions.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
        checkpoint: Option<PathBuf>,
        /// Directory of predictions files, matched to documents by id.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Extract entities from one document file or a directory of them.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output file (or directory when --data is one); stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic corpus.
    GenSynth {
        #[arg(long, default_value = "fixed")]
        mode: LayoutMode,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Use gray placeholder crops instead of rendered glyphs.
        #[arg(long)]
        no_images: bool,
        /// Disable the TOTAL/CASH ambiguity probe in variable mode.
        #[arg(long)]
        no_probe: bool,
        /// Filler lines per variable-layout document.
        #[arg(long)]
        distractors: Option<usize>,
        /// Keep variable-layout segments in reading order.
        #[arg(long)]
        reading_order: bool,
    },
    /// Finite-difference check of every parameter group of a small model.
    Gradcheck {
        /// Config file; the built-in tiny config when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Entries checked per parameter group.
        #[arg(long)]
        max_entries: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        layers: Vec<usize>,
        #[command(flatten)]
        overrides: ConfigOverrides,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => Failure::Usage(e.to_string()),
            ModelError::NonFinite { .. } | ModelError::Autodiff(_) => Failure::Numeric(e.to_string()),
            ModelError::Data(e) => e.into(),
            _ => Failure::Data(e.to_string()),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Data(format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Usage(m) | Failure::Data(m) | Failure::Numeric(m)) = &f;
            eprintln!("error: {m}");
            ExitCode::from(f.code())
        }
    }
}

fn run(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Train {
            data,
            config,
            out,
            test,
            layers,
            ablate,
            overrides,
        } => {
            let mut cfg = load_config(config.as_deref(), ModelConfig::default())?;
            if let Some(p) = std::env::var_os(PRECISION_ENV) {
                let p = p.to_string_lossy();
                cfg.precision = p
                    .parse()
                    .map_err(|e| Failure::Usage(format!("{PRECISION_ENV}={p}: {e}")))?;
            }
            overrides.apply(&mut cfg)?;
            cfg.ablate_image |= ablate.contains(&Ablation::Image);
            cfg.ablate_graph_learning |= ablate.contains(&Ablation::GraphLearning);
            if let [l] = layers[..] {
                cfg.layers = l;
            }
            cfg.validate()?;
            let docs = load_corpus(&data)?;
            if docs.is_empty() {
                return Err(Failure::Data(format!("{}: no documents", data.display())));
            }
            fs::create_dir_all(&out).map_err(|e| io_failure(&out, e))?;
            if layers.len() > 1 {
                let test_docs = test.as_deref().map(load_corpus).transpose()?;
                return match cfg.precision {
                    DType::F32 => sweep::<f32>(&docs, test_docs, &cfg, &layers, &out),
                    DType::F64 => sweep::<f64>(&docs, test_docs, &cfg, &layers, &out),
                };
            }
            match cfg.precision {
                DType::F32 => train_to::<f32>(&docs, &cfg, &out),
                DType::F64 => train_to::<f64>(&docs, &cfg, &out),
            }
        }
        Cmd::Eval {
            data,
            checkpoint,
            predictions,
        } => {
            let docs = load_corpus(&data)?;
            let report = match (checkpoint, predictions) {
                (Some(ck), _) => {
                    let bytes = fs::read(&ck).map_err(|e| io_failure(&ck, e))?;
                    match checkpoint_precision(&bytes)? {
                        DType::F32 => evaluate(&decode_checkpoint::<f32>(&bytes)?.model, &docs)?,
                        DType::F64 => evaluate(&decode_checkpoint::<f64>(&bytes)?.model, &docs)?,
                    }
                }
                (None, Some(dir)) => {
                    let stored = load_prediction_dir(&dir)?;
                    let pred: Vec<Vec<EntitySpan>> = docs
                        .iter()
                        .map(|d| stored.get(&d.id).cloned().unwrap_or_default())
                        .collect();
                    let gold: Vec<Vec<EntitySpan>> = docs.iter().map(Document::gold_spans).collect();
                    compute_metrics(&pred, &gold)
                }
                (None, None) => return Err(Failure::Usage("eval needs --checkpoint or --predictions".into())),
            };
            eprint!("{}", report.table());
            println!("{}", report.to_json());
            Ok(())
        }
        Cmd::Predict { checkpoint, data, out } => {
            let bytes = fs::read(&checkpoint).map_err(|e| io_failure(&checkpoint, e))?;
            match checkpoint_precision(&bytes)? {
                DType::F32 => predict::<f32>(&bytes, &data, out.as_deref()),
                DType::F64 => predict::<f64>(&bytes, &data, out.as_deref()),
            }
        }
        Cmd::GenSynth {
            mode,
            count,
            seed,
            out,
            no_images,
            no_probe,
            distractors,
            reading_order,
        } => {
            let mut cfg = match mode {
                LayoutMode::Fixed => SynthConfig::fixed(count),
                LayoutMode::Variable => SynthConfig::variable(count),
            };
            cfg.render_images = !no_images;
            cfg.ambiguity_probe &= !no_probe;
            cfg.shuffle_order &= !reading_order;
            if let Some(d) = distractors {
                cfg.distractors = d;
            }
            let docs = generate_synthetic(&cfg, seed)?;
            fs::create_dir_all(&out).map_err(|e| io_failure(&out, e))?;
            for d in &docs {
                save_document(d, out.join(format!("{}.json", d.id)))?;
            }
            eprintln!("wrote {} documents to {}", docs.len(), out.display());
            Ok(())
        }
        Cmd::Gradcheck {
            config,
            tolerance,
            max_entries,
            layers,
            overrides,
        } => {
            let mut cfg = load_config(config.as_deref(), tiny_config())?;
            overrides.apply(&mut cfg)?;
            match layers[..] {
                [] => {}
                [l] => cfg.layers = l,
                _ => return Err(Failure::Usage("gradcheck takes a single --layers value".into())),
            }
            cfg.validate()?;
            let opts = GradCheckOptions {
                max_entries: max_entries.unwrap_or(usize::MAX),
                ..GradCheckOptions::default()
            };
            let reports = model_gradcheck(&cfg, &opts)?;
            let width = reports.iter().map(|r| r.name.len()).max().unwrap_or(5);
            println!("{:<width$}  {:>7}  {:>12}  {:>12}", "group", "checked", "max_rel", "max_abs");
            for r in &reports {
                println!(
                    "{:<width$}  {:>7}  {:>12.3e}  {:>12.3e}",
                    r.name, r.checked, r.max_rel_error, r.max_abs_error
                );
            }
            let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
            println!("max relative error {worst:.3e} (tolerance {tolerance:.0e})");
            if worst <= tolerance {
                Ok(())
            } else {
                Err(Failure::Numeric(format!("gradient check failed: {worst:.3e} > {tolerance:.0e}")))
            }
        }
    }
}

/// Reads a config file over `base`'s values.
fn load_config(path: Option<&Path>, base: ModelConfig) -> Result<ModelConfig, Failure> {
    let mut cfg = base;
    if let Some(path) = path {
        let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
        cfg.apply_text(&text)
            .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    }
    Ok(cfg)
}

fn train_to<F: Real>(docs: &[Document], cfg: &ModelConfig, out: &Path) -> Result<(), Failure> {
    let log_path = out.join("metrics.jsonl");
    let file = fs::File::create(&log_path).map_err(|e| io_failure(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let ck = train::<F>(docs, cfg, &mut log)?;
    log.flush().map_err(|e| io_failure(&log_path, e))?;
    let ck_path = out.join("model.ckpt");
    save_checkpoint(&ck, &ck_path)?;
    let config_path = out.join("config.cfg");
    fs::write(&config_path, cfg.to_text()).map_err(|e| io_failure(&config_path, e))?;
    eprintln!(
        "trained {} steps; wrote {} and {}",
        ck.optimizer.step,
        ck_path.display(),
        log_path.display()
    );
    Ok(())
}

fn sweep<F: Real>(
    docs: &[Document],
    test: Option<Vec<Document>>,
    cfg: &ModelConfig,
    layers: &[usize],
    out: &Path,
) -> Result<(), Failure> {
    let (train_docs, test_docs) = match test {
        Some(t) => (docs.to_vec(), t),
        None => split_validation(docs, cfg.val_fraction, cfg.seed),
    };
    if test_docs.is_empty() {
        return Err(Failure::Usage("layer sweep needs --test or a nonzero val_fraction".into()));
    }
    let rows = layer_sweep::<F>(&train_docs, &test_docs, cfg, layers)?;
    print!("{}", sweep_table(&rows));
    let path = out.join("sweep.json");
    let json = serde_json::to_string_pretty(&rows).expect("sweep rows serialize");
    fs::write(&path, json + "\n").map_err(|e| io_failure(&path, e))?;
    match rows.iter().find(|r| !r.finite) {
        Some(r) => Err(Failure::Numeric(format!("non-finite loss at {} layers", r.layers))),
        None => Ok(()),
    }
}

fn load_prediction_dir(dir: &Path) -> Result<BTreeMap<String, Vec<EntitySpan>>, Failure> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| io_failure(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| io_failure(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "json") {
            let p = load_predictions(&path)?;
            if out.insert(p.id.clone(), p.predictions).is_some() {
                return Err(Failure::Data(format!("{}: duplicate document id {:?}", path.display(), p.id)));
            }
        }
    }
    Ok(out)
}

fn predict<F: Real>(bytes: &[u8], data: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let model = decode_checkpoint::<F>(bytes)?.model;
    if data.is_dir() {
        let out = out.ok_or_else(|| Failure::Usage("predicting a directory needs --out".into()))?;
        fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;
        for d in load_corpus(data)? {
            save_predictions(&d.id, &model.predict(&d)?, out.join(format!("{}.json", d.id)))?;
        }
        return Ok(());
    }
    let doc = load_document(data)?;
    let spans = model.predict(&doc)?;
    match out {
        Some(p) => save_predictions(&doc.id, &spans, p)?,
        None => println!("{}", pick_kie::data::predictions_to_json(&doc.id, &spans)),
    }
    Ok(())
}
