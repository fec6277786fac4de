use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use attnet::gradcheck::{run_suite, GradCheckOptions};
use attnet::model::{attention_weights_to_tokens, EMBEDDING};
use attnet::synth::{generate_corpus, SynthConfig};
use attnet::text::{load_embeddings, read_jsonl, stratified_split, write_jsonl};
use attnet::{
    build_model, build_vocab, encode, load_checkpoint, mcnemar, metrics, save_checkpoint,
    tokenize, AttNet, Checkpoint, Dataset, Error, FormatError, LabelMap, ModelConfig, Sample,
    TrainConfig, TrainHistory,
};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::{log_open, CliError, EvalArgs, GradcheckArgs, PredictArgs, SynthArgs, TrainArgs};

type CmdResult = Result<(), CliError>;

fn read_examples(path: &Path) -> Result<Vec<attnet::Example>, CliError> {
    log_open(path);
    Ok(read_jsonl(path)?)
}

fn write_json(path: &Path, value: &impl Serialize) -> CmdResult {
    let mut text = serde_json::to_string_pretty(value).map_err(io::Error::from).map_err(Error::from)?;
    text.push('\n');
    fs::write(path, text).map_err(Error::from)?;
    Ok(())
}

// ── synth ──────────────────────────────────────────────────────────────

pub fn synth(args: &SynthArgs) -> CmdResult {
    let cfg = SynthConfig {
        classes: args.classes,
        docs_per_class: args.docs_per_class,
        seed: args.seed,
        ..SynthConfig::default()
    };
    let corpus = generate_corpus(&cfg)?;
    fs::write(&args.out, corpus.to_jsonl()).map_err(Error::from)?;
    let ds = corpus.dataset();
    println!("wrote {} documents to {}", ds.len(), args.out.display());
    for (name, count) in ds.labels().names().iter().zip(ds.class_counts()) {
        println!("{name}\t{count}");
    }
    Ok(())
}

// ── train ──────────────────────────────────────────────────────────────

#[derive(Debug, Serialize)]
struct TrainReport<'a> {
    history: &'a TrainHistory,
    train_examples: usize,
    val_examples: usize,
    vocab_size: usize,
    labels: &'a [String],
    embedding_coverage: Option<usize>,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
}

fn resolve(flag: &Option<PathBuf>, fallback: &Option<PathBuf>) -> Option<PathBuf> {
    flag.clone().or_else(|| fallback.clone())
}

fn samples(ds: &Dataset) -> Vec<Sample<Vec<usize>>> {
    ds.encoded()
        .expect("dataset encoded before training")
        .iter()
        .zip(ds.classes())
        .map(|(ids, &label)| Sample { input: ids.clone(), label })
        .collect()
}

pub fn train(args: &TrainArgs) -> CmdResult {
    let mut run = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(e) = args.epochs {
        run.train.max_epochs = e;
    }
    if let Some(s) = args.seed {
        run.model.seed = s;
        run.train.shuffle_seed = s;
    }
    if let Some(lr) = args.lr {
        run.train.learning_rate = lr;
    }
    if let Some(b) = args.batch_size {
        run.train.batch_size = b;
    }
    run.train.validate()?;
    let paths = &run.paths;
    let out_model = resolve(&args.out_model, &paths.out_model)
        .ok_or_else(|| CliError::Usage("--out-model is required".into()))?;
    let report = resolve(&args.report, &paths.report);
    let embeddings = resolve(&args.embeddings, &paths.embeddings);

    let (train_ds, val_ds) = if args.train.is_some() || args.data.is_none() && paths.train.is_some() {
        let train_path = resolve(&args.train, &paths.train).expect("checked above");
        let val_path = resolve(&args.val, &paths.val)
            .ok_or_else(|| CliError::Usage("--val is required with --train".into()))?;
        // The test file, if named, is deliberately left unopened.
        let train_ds = Dataset::new(read_examples(&train_path)?);
        let val_ds = Dataset::with_labels(read_examples(&val_path)?, train_ds.labels().clone())?;
        (train_ds, val_ds)
    } else {
        let data = resolve(&args.data, &paths.data)
            .ok_or_else(|| CliError::Usage("either --data or --train/--val is required".into()))?;
        let all = Dataset::new(read_examples(&data)?);
        let (tr, va, te) = stratified_split(&all, run.pipeline.split, run.pipeline.split_seed)?;
        if let Some(dir) = resolve(&args.split_dir, &paths.split_dir) {
            fs::create_dir_all(&dir).map_err(Error::from)?;
            for (name, part) in [("train", &tr), ("val", &va), ("test", &te)] {
                write_jsonl(dir.join(format!("{name}.jsonl")), part.examples())?;
            }
        }
        (tr, va)
    };
    if train_ds.labels().len() < 2 {
        return Err(Error::Data("training data needs at least two labels".into()).into());
    }

    let vocab = build_vocab(&train_ds.tokenized(), run.pipeline.min_count, run.pipeline.max_vocab)?;
    let config = ModelConfig {
        vocab_size: vocab.len(),
        classes: train_ds.labels().len(),
        ..run.model.clone()
    };
    let mut params = build_model(&config)?;
    let mut coverage = None;
    if let Some(path) = &embeddings {
        log_open(path);
        let loaded = load_embeddings(path, &vocab, config.embed_dim, config.seed)?;
        eprintln!("embeddings cover {}/{} vocabulary tokens", loaded.coverage, vocab.len() - 2);
        *params.get_mut(EMBEDDING)? = loaded.table;
        coverage = Some(loaded.coverage);
    }

    let (mut train_ds, mut val_ds) = (train_ds, val_ds);
    train_ds.encode(&vocab, config.max_len);
    val_ds.encode(&vocab, config.max_len);
    let model = AttNet { config: config.clone() };
    let epochs = run.train.max_epochs;
    let (params, history) = attnet::train_observed(
        &model,
        params,
        &samples(&train_ds),
        &samples(&val_ds),
        &run.train,
        |h| {
            let e = h.epochs() - 1;
            eprintln!(
                "epoch {}/{epochs}  train_loss {:.4}  train_acc {:.4}  val_loss {:.4}  val_acc {:.4}",
                e + 1,
                h.train_loss[e],
                h.train_acc[e],
                h.val_loss[e],
                h.val_acc[e]
            );
        },
    )?;

    let labels = train_ds.labels().clone();
    save_checkpoint(
        &out_model,
        &Checkpoint {
            config: config.clone(),
            vocabulary: vocab.clone(),
            labels: labels.clone(),
            params,
        },
    )?;
    if let Some(path) = &report {
        write_json(
            path,
            &TrainReport {
                history: &history,
                train_examples: train_ds.len(),
                val_examples: val_ds.len(),
                vocab_size: vocab.len(),
                labels: labels.names(),
                embedding_coverage: coverage,
                model: &config,
                train: &run.train,
            },
        )?;
    }
    println!(
        "trained {} epochs (best {}), val_acc {:.4}, model written to {}",
        history.epochs(),
        history.best_epoch + 1,
        history.val_acc[history.best_epoch],
        out_model.display()
    );
    Ok(())
}

// ── eval ───────────────────────────────────────────────────────────────

/// One line of saved predictions; the same shape `predict` emits.
#[derive(Debug, Serialize, Deserialize)]
struct SavedPrediction {
    label: String,
    confidence: f32,
}

fn read_saved_predictions(path: &Path, labels: &LabelMap) -> Result<Vec<usize>, CliError> {
    log_open(path);
    let file = fs::File::open(path).map_err(Error::from)?;
    let mut out = Vec::new();
    for (i, line) in io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(Error::from)?;
        if line.trim().is_empty() {
            continue;
        }
        #[derive(Deserialize)]
        struct Label {
            label: String,
        }
        let p: Label = serde_json::from_str(&line).map_err(|e| {
            Error::Format(FormatError::Line { line: i + 1, message: e.to_string() })
        })?;
        let idx = labels
            .index(&p.label)
            .ok_or_else(|| Error::Data(format!("unknown label {:?} in {}", p.label, path.display())))?;
        out.push(idx);
    }
    Ok(out)
}

pub fn eval(args: &EvalArgs) -> CmdResult {
    log_open(&args.model);
    let ck = load_checkpoint(&args.model)?;
    let ds = Dataset::with_labels(read_examples(&args.data)?, ck.labels.clone())?;
    let mut preds = Vec::with_capacity(ds.len());
    let mut saved = Vec::with_capacity(ds.len());
    for ex in ds.examples() {
        let ids = encode(&tokenize(&ex.text), &ck.vocabulary, ck.config.max_len);
        let p = attnet::predict(&ck.params, &ck.config, &ids)?;
        preds.push(p.label);
        saved.push(SavedPrediction {
            label: ck.labels.name(p.label).unwrap_or_default().to_string(),
            confidence: p.confidence,
        });
    }
    let gold = ds.classes();
    let m = attnet::eval::confusion_matrix(gold, &preds, ck.labels.len())?;
    let mut report = metrics(&m, ck.labels.names())?;
    if let Some(path) = &args.compare_preds {
        let other = read_saved_predictions(path, &ck.labels)?;
        if other.len() != preds.len() {
            return Err(Error::Data(format!(
                "{} has {} predictions, data has {} examples",
                path.display(),
                other.len(),
                preds.len()
            ))
            .into());
        }
        report.mcnemar = Some(mcnemar(gold, &preds, &other)?);
    }
    if let Some(path) = &args.save_preds {
        let mut text = String::new();
        for p in &saved {
            text.push_str(&serde_json::to_string(p).map_err(io::Error::from).map_err(Error::from)?);
            text.push('\n');
        }
        fs::write(path, text).map_err(Error::from)?;
    }
    if let Some(path) = &args.report {
        write_json(path, &report)?;
    }
    println!("examples  {}", report.n);
    println!("accuracy  {:.4}", report.accuracy);
    println!("macro_f1  {:.4}", report.macro_f1);
    for c in &report.per_class {
        println!(
            "  {:<16} p {:.4}  r {:.4}  f1 {:.4}  n {}",
            c.label, c.precision, c.recall, c.f1, c.support
        );
    }
    if let Some(mc) = &report.mcnemar {
        println!("mcnemar   b {} c {} statistic {:.4} p {:.4}", mc.b, mc.c, mc.statistic, mc.p);
    }
    Ok(())
}

// ── predict ────────────────────────────────────────────────────────────

#[derive(Debug, Serialize)]
struct AttentionSpan {
    span: [usize; 2],
    weight: f32,
}

#[derive(Debug, Serialize)]
struct PredictionLine {
    label: String,
    confidence: f32,
    #[serde(skip_serializing_if = "Option::is_none")]
    attention: Option<Vec<AttentionSpan>>,
    empty_input: bool,
}

fn predict_one(ck: &Checkpoint, text: &str, show_attention: bool) -> Result<PredictionLine, CliError> {
    let tokens = tokenize(text);
    let ids = encode(&tokens, &ck.vocabulary, ck.config.max_len);
    let p = attnet::predict(&ck.params, &ck.config, &ids)?;
    let attention = show_attention.then(|| {
        attention_weights_to_tokens(&p.alpha, &ck.config)
            .into_iter()
            .zip(p.alpha.data())
            .map(|(s, &weight)| AttentionSpan { span: [s.start, s.end], weight })
            .collect()
    });
    Ok(PredictionLine {
        label: ck.labels.name(p.label).unwrap_or_default().to_string(),
        confidence: p.confidence,
        attention,
        empty_input: tokens.is_empty(),
    })
}

pub fn predict(args: &PredictArgs) -> CmdResult {
    log_open(&args.model);
    let ck = load_checkpoint(&args.model)?;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let mut emit = |line: PredictionLine| -> CmdResult {
        let s = serde_json::to_string(&line).map_err(io::Error::from).map_err(Error::from)?;
        writeln!(out, "{s}").map_err(Error::from)?;
        Ok(())
    };
    if let Some(text) = &args.text {
        return emit(predict_one(&ck, text, args.show_attention)?);
    }
    #[derive(Deserialize)]
    struct Input {
        text: String,
    }
    for (i, line) in io::stdin().lock().lines().enumerate() {
        let line = line.map_err(Error::from)?;
        if line.trim().is_empty() {
            continue;
        }
        let input: Input = serde_json::from_str(&line).map_err(|e| {
            Error::Format(FormatError::Line { line: i + 1, message: e.to_string() })
        })?;
        emit(predict_one(&ck, &input.text, args.show_attention)?)?;
    }
    Ok(())
}

// ── gradcheck ──────────────────────────────────────────────────────────

pub fn gradcheck(args: &GradcheckArgs) -> CmdResult {
    let opts = GradCheckOptions {
        corrupt_tanh_grad: args.corrupt_tanh_grad,
        ..GradCheckOptions::default()
    };
    let report = run_suite(&opts)?;
    for g in &report.groups {
        println!(
            "{:<44} {:>10.3e}  <= {:.0e}  {}",
            g.group,
            g.max_rel_err,
            g.threshold,
            if g.passed() { "ok" } else { "FAIL" }
        );
    }
    let failed = report.failures().count();
    println!("{} groups, {} failed", report.groups.len(), failed);
    if failed > 0 {
        return Err(CliError::Verification(format!("{failed} gradient groups exceed their threshold")));
    }
    Ok(())
}
