//! One function per subcommand.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use dualcls::corpus::{
    generate_parallel_corpus, generate_paraphrase_corpus, parse_parallel_tsv, save_parallel_tsv,
    synthetic_languages,
};
use dualcls::diagnostics::{
    cosine_category_report, export_embeddings as write_embeddings, pos_neg_curves, spectrum_report,
    stack_rows, DEFAULT_RANKME_EPS,
};
use dualcls::encoder::{load_checkpoint, save_checkpoint};
use dualcls::trainer::{
    evaluate_validation, mode_split, record_line, split_train_validation, train as run_training,
    Objective,
};
use dualcls::{Error, MetricsLog, Model, PackedExample, ParallelPair, RunConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::run_dir::{io_error, unix_now, RunManifest, CHECKPOINT_DIR, METRICS_FILE};
use crate::{DiagnoseArgs, EvalArgs, ExportArgs, GenCorpusArgs, Split, TrainArgs};

/// Key under which checkpoints store the run configuration they were trained with.
const RUN_CONFIG_KEY: &str = "run_config";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn read_corpus(path: &Path) -> Result<(Vec<u8>, Vec<ParallelPair>), Error> {
    let bytes = fs::read(path).map_err(|e| io_error(path, e))?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|e| Error::Config(format!("{}: not UTF-8: {e}", path.display())))?;
    let pairs =
        parse_parallel_tsv(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok((bytes, pairs))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), Error> {
    fs::write(path, contents).map_err(|e| io_error(path, e))
}

fn to_json<T: Serialize>(value: &T) -> Result<String, Error> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

pub fn gen_corpus(args: &GenCorpusArgs) -> CliResult {
    if args.min_len > args.max_len {
        return Err(CliError::Usage(format!(
            "--min-len {} exceeds --max-len {}",
            args.min_len, args.max_len
        )));
    }
    let langs = synthetic_languages(args.languages as usize, args.vocab_size as usize)?;
    let range = (args.min_len as usize, args.max_len as usize);
    let mut pairs = generate_parallel_corpus(&langs, args.pairs, range, args.seed)?;
    if args.monolingual_pairs > 0 {
        pairs.extend(generate_paraphrase_corpus(
            &langs,
            args.monolingual_pairs,
            range,
            args.seed.wrapping_add(1),
        )?);
    }
    save_parallel_tsv(&pairs, &args.output)?;
    eprintln!("wrote {} pairs to {}", pairs.len(), args.output.display());
    Ok(())
}

pub fn train(args: &TrainArgs) -> CliResult {
    let mut config = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let corpus_path: PathBuf = match (&args.corpus, &config.corpus.path) {
        (Some(p), _) | (None, Some(p)) => p.clone(),
        (None, None) => {
            return Err(CliError::Usage(
                "no corpus given: pass --corpus or set corpus.path in the config".into(),
            ))
        }
    };
    config.corpus.path = Some(corpus_path.clone());
    let (bytes, pairs) = read_corpus(&corpus_path)?;

    let run_dir = &args.run_dir;
    fs::create_dir_all(run_dir).map_err(|e| io_error(run_dir, e))?;
    let mut manifest = RunManifest::new(config.clone(), &corpus_path, &bytes);
    manifest.write(run_dir)?;

    let metrics_path = run_dir.join(METRICS_FILE);
    let mut metrics_file = File::create(&metrics_path).map_err(|e| io_error(&metrics_path, e))?;
    let mut write_error: Option<Error> = None;
    let outcome = run_training(&pairs, &config, Objective::Combined, |record| {
        eprintln!(
            "epoch {:>3}  train total {:.4}  val mlm {:.4} alignment {:.4} total {:.4}  rankme {:.2}",
            record.epoch,
            record.train.total,
            record.validation.mlm,
            record.validation.alignment,
            record.validation.total,
            record.rankme
        );
        if write_error.is_none() {
            let line = record_line(record).and_then(|l| {
                metrics_file
                    .write_all(l.as_bytes())
                    .map_err(|e| io_error(&metrics_path, e))
            });
            write_error = line.err();
        }
    })?;
    if let Some(e) = write_error {
        return Err(e.into());
    }

    let metadata = serde_json::json!({ RUN_CONFIG_KEY: config });
    save_checkpoint(
        &run_dir.join(CHECKPOINT_DIR),
        &outcome.model.params,
        &outcome.model.vocab,
        &metadata,
    )?;
    manifest.finished_unix = Some(unix_now());
    manifest.write(run_dir)?;
    eprintln!("run complete: {}", run_dir.display());
    Ok(())
}

/// Loads a checkpoint together with the run configuration stored inside it.
fn load_model(dir: &Path) -> Result<(Model, RunConfig), Error> {
    let ckpt = load_checkpoint(dir, None)?;
    let config: RunConfig = ckpt
        .metadata
        .get(RUN_CONFIG_KEY)
        .cloned()
        .ok_or_else(|| {
            Error::CheckpointMismatch(format!("{}: no stored run configuration", dir.display()))
        })
        .and_then(|v| {
            serde_json::from_value(v)
                .map_err(|e| Error::CheckpointMismatch(format!("stored run configuration: {e}")))
        })?;
    let expected = config.encoder.with_vocab(ckpt.vocab.len());
    if &expected != ckpt.params.config() {
        return Err(Error::CheckpointMismatch(format!(
            "stored configuration {expected:?} does not describe the saved tensors {:?}",
            ckpt.params.config()
        )));
    }
    Ok((
        Model {
            params: ckpt.params,
            vocab: ckpt.vocab,
        },
        config,
    ))
}

/// The corpus pairs of `split`, after the run's `max_pairs` truncation and mode filter.
fn split_pairs(pairs: &[ParallelPair], config: &RunConfig, split: Split) -> Vec<ParallelPair> {
    let pairs = match config.corpus.max_pairs {
        Some(m) => &pairs[..m.min(pairs.len())],
        None => pairs,
    };
    let indices = match split {
        Split::All => (0..pairs.len()).collect(),
        Split::Train => mode_split(pairs, &config.train).0,
        Split::Validation => mode_split(pairs, &config.train).1,
    };
    indices.into_iter().map(|i| pairs[i].clone()).collect()
}

fn validation_pairs(corpus: &Path, config: &RunConfig) -> Result<Vec<ParallelPair>, Error> {
    let (_, pairs) = read_corpus(corpus)?;
    let val = split_pairs(&pairs, config, Split::Validation);
    if val.len() < 2 {
        return Err(Error::Config(format!(
            "{} validation pairs in {} (from {} pairs); need at least 2",
            val.len(),
            corpus.display(),
            split_train_validation(pairs.len()).1.len()
        )));
    }
    Ok(val)
}

#[derive(Serialize)]
struct EvalReport {
    mlm: f64,
    alignment: f64,
    total: f64,
}

pub fn eval(args: &EvalArgs) -> CliResult {
    let (model, config) = load_model(&args.checkpoint)?;
    let val = validation_pairs(&args.corpus, &config)?;
    let examples: Vec<PackedExample> = val
        .iter()
        .map(|p| model.pack(p))
        .collect::<Result<_, _>>()?;
    let result = evaluate_validation(&model.params, &examples, &config.train)?;
    let report = EvalReport {
        mlm: result.losses.mlm,
        alignment: result.losses.alignment,
        total: result.losses.total,
    };
    print!("{}", to_json(&report)?);
    Ok(())
}

pub fn diagnose(args: &DiagnoseArgs) -> CliResult {
    let (model, config) = load_model(&args.checkpoint)?;
    let val = validation_pairs(&args.corpus, &config)?;
    fs::create_dir_all(&args.output).map_err(|e| io_error(&args.output, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let table = cosine_category_report(&model, &val, args.unrelated_samples as usize, &mut rng)?;
    write_file(
        &args.output.join("cosine_table.tsv"),
        table.to_tsv().as_bytes(),
    )?;

    let (z_a, z_b) = model.embed_pairs(&val)?;
    let spectrum = spectrum_report(&stack_rows(&z_a, &z_b)?, DEFAULT_RANKME_EPS)?;
    write_file(
        &args.output.join("spectrum.json"),
        to_json(&spectrum)?.as_bytes(),
    )?;

    let metrics_path = match &args.metrics {
        Some(p) => Some(p.clone()),
        None => {
            let sibling = args
                .checkpoint
                .parent()
                .map(|p| p.join(METRICS_FILE))
                .filter(|p| p.is_file());
            if sibling.is_none() {
                eprintln!("note: no metrics log beside the checkpoint; curves.json not written");
            }
            sibling
        }
    };
    if let Some(path) = metrics_path {
        let log = MetricsLog::load(&path)?;
        write_file(
            &args.output.join("curves.json"),
            to_json(&pos_neg_curves(&log))?.as_bytes(),
        )?;
    }

    write_embeddings(&model, &val, &args.output.join("embeddings.jsonl"))?;

    let overall = table.overall();
    let fmt = |m: Option<f64>| m.map_or_else(|| "NA".to_string(), |v| format!("{v:.4}"));
    println!(
        "related {}  unrelated {}  first component {:.4}  rankme {:.3}",
        fmt(overall.diff_language_related.mean),
        fmt(table.unrelated().mean),
        spectrum.first_component_share,
        spectrum.rankme
    );
    Ok(())
}

pub fn export_embeddings(args: &ExportArgs) -> CliResult {
    let (model, config) = load_model(&args.checkpoint)?;
    let (_, pairs) = read_corpus(&args.corpus)?;
    let selected = split_pairs(&pairs, &config, args.split);
    write_embeddings(&model, &selected, &args.output)?;
    eprintln!(
        "wrote {} records to {}",
        2 * selected.len(),
        args.output.display()
    );
    Ok(())
}
