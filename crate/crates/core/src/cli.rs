//! Subcommand implementations behind the `tim` binary.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::{self, Checkpoint, ModelSpec};
use crate::config::RunConfig;
use crate::corpus::{read_jsonl, TextPair, TokenizedExample, Vocabulary};
use crate::encoder::load_text_vectors;
use crate::error::{Error, Result};
use crate::eval::{argmax, evaluate, EvalReport, Task};
use crate::features::{to_json, FeatureConfig, FeatureMode};
use crate::model::TimModel;
use crate::params::{round_f32, ParameterStore};
use crate::sanity::{self, SanityConfig, SanityRun};
use crate::training::{fit, MetricsLog, TrainState, CSV_HEADER};

pub const VOCAB_FILE: &str = "vocab.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const EFFECTIVE_CONFIG: &str = "effective_config.toml";

/// Tokenizes pairs, reporting the line of the first unusable one.
pub fn tokenize_file(path: &Path, vocab: &Vocabulary) -> Result<Vec<TokenizedExample>> {
    let pairs = read_jsonl(path)?;
    tokenize_pairs(path, &pairs, vocab)
}

fn tokenize_pairs(path: &Path, pairs: &[TextPair], vocab: &Vocabulary) -> Result<Vec<TokenizedExample>> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            vocab.tokenize_pair(p).map_err(|e| Error::Line {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn check_labels(path: &Path, examples: &[TokenizedExample], classes: usize) -> Result<()> {
    match examples.iter().position(|e| e.label >= classes) {
        Some(i) => Err(Error::Line {
            path: path.to_path_buf(),
            line: i + 1,
            message: format!("label {} is outside 0..{classes}", examples[i].label),
        }),
        None => Ok(()),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub stopped_early: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_step: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_dev: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<EvalReport>,
    pub parameters: usize,
}

/// Keeps the header and rows up to `step`, so a resumed run continues the
/// log without duplicates.
fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kept = vec![CSV_HEADER.to_string()];
    for line in BufReader::new(file).lines().skip(1) {
        let line = line.map_err(|e| Error::io(path, e))?;
        let row_step: u64 = line
            .split(',')
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Data(format!("{}: malformed metrics row", path.display())))?;
        if row_step <= step {
            kept.push(line);
        }
    }
    fs::write(path, kept.join("\n") + "\n").map_err(|e| Error::io(path, e))
}

/// Trains from a config file, writing vocabulary, metrics and checkpoints
/// into `out_dir`. With `resume`, continues from a checkpoint holding
/// training state.
pub fn cmd_train(config_path: &Path, out_dir: &Path, resume: Option<&Path>) -> Result<TrainSummary> {
    let config = RunConfig::load(config_path)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    fs::write(out_dir.join(EFFECTIVE_CONFIG), config.to_toml()).map_err(|e| Error::io(out_dir, e))?;

    let train_pairs = read_jsonl(&config.data.train)?;
    let vocab = Vocabulary::build(train_pairs.iter(), config.data.min_count)?;
    vocab.save(&out_dir.join(VOCAB_FILE))?;
    let classes = config.encoder.num_classes;
    let train = tokenize_pairs(&config.data.train, &train_pairs, &vocab)?;
    check_labels(&config.data.train, &train, classes)?;
    let split = |p: &Option<PathBuf>| -> Result<Option<Vec<TokenizedExample>>> {
        match p {
            None => Ok(None),
            Some(p) => {
                let ex = tokenize_file(p, &vocab)?;
                check_labels(p, &ex, classes)?;
                Ok(Some(ex))
            }
        }
    };
    let dev = split(&config.data.dev)?;
    let test = split(&config.data.test)?;

    let spec = ModelSpec {
        encoder: config.encoder.with_vocab(vocab.len()),
        features: config.features.clone(),
        critic: config.critic.clone(),
        vocab_hash: vocab.hash(),
    };
    let (model, mut state) = match resume {
        Some(path) => {
            let ck = checkpoint::load(path)?;
            if ck.model.vocab_hash != spec.vocab_hash {
                return Err(Error::Incompatible {
                    expected: ck.model.vocab_hash,
                    found: spec.vocab_hash,
                });
            }
            let model = ck.bind_model()?;
            let (_, state) = ck
                .resume
                .ok_or_else(|| Error::Data(format!("{} holds no training state", path.display())))?;
            (model, state)
        }
        None => {
            let mut store = ParameterStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
            let model = TimModel::new(
                spec.encoder.clone(),
                spec.features.clone(),
                spec.critic.clone(),
                &mut store,
                &mut rng,
            )?;
            if let Some(vectors) = &config.data.vectors {
                let id = model.encoder.embedding;
                let mut table = store.get(id).value.clone();
                let hits = load_text_vectors(vectors, &vocab, &mut table)?;
                log::info!("loaded {hits} pretrained vectors");
                store.set_value(id, table.mapv(round_f32))?;
            }
            (model, TrainState::new(store, config.train.seed))
        }
    };
    log::info!(
        "{} training pairs, vocabulary {}, {} parameters",
        train.len(),
        vocab.len(),
        state.params.count(None)
    );

    let metrics_path = out_dir.join(METRICS_FILE);
    let fresh = state.step == 0 || !metrics_path.exists();
    if !fresh {
        truncate_metrics(&metrics_path, state.step)?;
    }
    let file = fs::OpenOptions::new()
        .create(true)
        .append(!fresh)
        .write(true)
        .truncate(fresh)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let mut log = MetricsLog::new(file, fresh).map_err(|e| Error::io(&metrics_path, e))?;

    let task = config.data.task;
    let tc = config.train.clone();
    let last = out_dir.join(LAST_CHECKPOINT);
    let outcome = fit(
        &model,
        &mut state,
        Arc::new(train),
        dev.as_deref().map(|d| (d, task)),
        &tc,
        |s, m| {
            log.write(m).map_err(|e| Error::io(&metrics_path, e))?;
            if s.step % tc.eval_every == 0 {
                checkpoint::save(&last, &spec, &s.params, Some((&tc, s)))?;
            }
            Ok(())
        },
    )?;

    checkpoint::save(
        &out_dir.join(FINAL_CHECKPOINT),
        &spec,
        &state.params,
        Some((&tc, &state)),
    )?;
    let best_params = outcome.best.as_ref().map_or(&state.params, |(_, _, p)| p);
    checkpoint::save(&out_dir.join(BEST_CHECKPOINT), &spec, best_params, None)?;
    let test = match &test {
        Some(t) => Some(evaluate(&model, best_params, t, task)?),
        None => None,
    };
    Ok(TrainSummary {
        steps: state.step,
        stopped_early: outcome.stopped_early,
        best_step: outcome.best.as_ref().map(|b| b.0),
        best_dev: outcome.best.as_ref().map(|b| b.1),
        test,
        parameters: state.params.count(None),
    })
}

/// Loads a checkpoint and the vocabulary it was trained with. The
/// vocabulary defaults to `vocab.txt` beside the checkpoint.
pub fn load_model(checkpoint: &Path, vocab: Option<&Path>) -> Result<(Checkpoint, TimModel, Vocabulary)> {
    let ck = checkpoint::load(checkpoint)?;
    let vocab_path = match vocab {
        Some(p) => p.to_path_buf(),
        None => checkpoint.parent().unwrap_or(Path::new(".")).join(VOCAB_FILE),
    };
    let vocab = Vocabulary::load(&vocab_path)?;
    let found = vocab.hash();
    if found != ck.model.vocab_hash {
        return Err(Error::Incompatible {
            expected: ck.model.vocab_hash.clone(),
            found,
        });
    }
    let model = ck.bind_model()?;
    Ok((ck, model, vocab))
}

pub fn cmd_eval(checkpoint: &Path, data: &Path, task: Task, vocab: Option<&Path>) -> Result<EvalReport> {
    let (ck, model, vocab) = load_model(checkpoint, vocab)?;
    let examples = tokenize_file(data, &vocab)?;
    evaluate(&model, &ck.params, &examples, task)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prediction {
    pub probabilities: Vec<f64>,
    pub label: usize,
}

pub fn cmd_predict(checkpoint: &Path, text_a: &str, text_b: &str, vocab: Option<&Path>) -> Result<Prediction> {
    let (ck, model, vocab) = load_model(checkpoint, vocab)?;
    let ex = vocab.tokenize_pair(&TextPair::new(text_a, text_b, 0))?;
    let probabilities = model.probabilities(&ck.params, &ex.tokens_a, &ex.tokens_b)?;
    let label = argmax(&probabilities);
    Ok(Prediction { probabilities, label })
}

/// Overrides applied to the checkpoint's feature settings.
#[derive(Clone, Debug, Default)]
pub struct FeatureOverrides {
    pub mode: Option<FeatureMode>,
    pub m: Option<usize>,
    pub d: Option<usize>,
}

pub fn cmd_features(
    checkpoint: &Path,
    text: &str,
    overrides: &FeatureOverrides,
    vocab: Option<&Path>,
) -> Result<serde_json::Value> {
    let (ck, model, vocab) = load_model(checkpoint, vocab)?;
    let mut features: FeatureConfig = model.features.clone();
    if let Some(mode) = overrides.mode {
        features.mode = mode;
    }
    if let Some(m) = overrides.m {
        features.m = m;
    }
    if overrides.d.is_some() {
        features.d = overrides.d;
    }
    features.validate()?;
    let tokens = vocab.encode(text);
    if tokens.is_empty() {
        return Err(Error::Empty("text after tokenization"));
    }
    let set = features.extract(&tokens, model.feature_table(&ck.params))?;
    Ok(to_json(&set))
}

/// Runs the Gaussian harness, optionally writing its CSV.
pub fn cmd_mi_sanity(config: &SanityConfig, csv: Option<&Path>) -> Result<SanityRun> {
    let run = sanity::run(config)?;
    if let Some(path) = csv {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(run.to_csv().as_bytes()).map_err(|e| Error::io(path, e))?;
    }
    Ok(run)
}
