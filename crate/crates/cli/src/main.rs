use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use ong::checkpoint::Checkpoint;
use ong::corpus::{gen_synthetic, parse_conllu, parse_corpus, split_train_dev, write_corpus, Span};
use ong::encoder::{parse_sidecar, Vocab};
use ong::model::{Example, Model};
use ong::objective::{RegPool, Variant};
use ong::trainer::{bucket_by_distance, evaluate, predict_all, train, Fold, Metrics, TrainConfig};
use ong::Error;

#[derive(Parser, Debug)]
#[command(name = "ong", version, about = "Target-oriented opinion word extraction with ON-LSTM and GCNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write a checkpoint
    Train(TrainArgs),
    /// Score a checkpoint on a corpus (exact-span P/R/F1)
    Eval(EvalArgs),
    /// Print predicted opinion spans, one JSON line per example
    Predict(EvalArgs),
    /// Train and evaluate ablation variants, one metrics line per variant
    Ablate(TrainArgs),
    /// Write a synthetic corpus
    GenData(GenArgs),
    /// Dump distances, syntax scores and adjacency matrices of one example
    Inspect(InspectArgs),
    /// Evaluate per target-opinion distance fold (1, 2, 3, >3)
    BucketEval(EvalArgs),
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Corpus file (tab-separated lines, or CoNLL-U with --annotations)
    #[arg(long)]
    data: PathBuf,
    /// Precomputed token vectors aligned with --data
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Target/opinion annotations; reads --data as CoNLL-U
    #[arg(long)]
    annotations: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// JSON training config; explicit flags take precedence
    #[arg(long)]
    config: Option<PathBuf>,
    /// Fraction of --data held out for model selection [default: 0.2]
    #[arg(long)]
    dev_ratio: Option<f64>,
    /// Random seed [default: 13]
    #[arg(long)]
    seed: Option<u64>,
    /// Training epochs [default: 10]
    #[arg(long)]
    epochs: Option<usize>,
    /// Mini-batch size [default: 32]
    #[arg(long)]
    batch: Option<usize>,
    /// Adam learning rate [default: 0.001]
    #[arg(long)]
    lr: Option<f64>,
    /// Token embedding size; ignored with --embeddings [default: 100]
    #[arg(long)]
    tok_dim: Option<usize>,
    /// Position embedding size [default: 30]
    #[arg(long)]
    pos_dim: Option<usize>,
    /// Recurrent hidden size [default: 300]
    #[arg(long)]
    hidden: Option<usize>,
    /// GCN hidden size [default: 200]
    #[arg(long)]
    gcn_dim: Option<usize>,
    /// Number of GCN layers [default: 2]
    #[arg(long)]
    gcn_layers: Option<usize>,
    /// Hidden width of the prediction head [default: 200]
    #[arg(long)]
    ff_dim: Option<usize>,
    /// Weight of the dependency adjacency in the combined matrix [default: 0.2]
    #[arg(long)]
    gamma: Option<f64>,
    /// Weight of the KL consistency loss [default: 0.1]
    #[arg(long)]
    alpha: Option<f64>,
    /// Weight of the representation regularizer [default: 0.1]
    #[arg(long)]
    beta: Option<f64>,
    /// Named variant: ong, ong-kl, ong-onlstm, ong-wlstm, ong-ad, ong-at,
    /// ong-reg, ong-mp-gcn, ong-gcn, ong-gcn-reg
    #[arg(long)]
    variant: Option<Variant>,
    /// Drop the KL consistency loss
    #[arg(long)]
    no_kl: bool,
    /// Drop the representation regularizer
    #[arg(long)]
    no_reg: bool,
    /// Remove the GCN
    #[arg(long)]
    no_gcn: bool,
    /// Replace the ON-LSTM by a plain LSTM (implies --no-kl)
    #[arg(long)]
    use_lstm: bool,
    /// Drop the dependency adjacency A^d
    #[arg(long)]
    no_ad: bool,
    /// Drop the learned adjacency A^t
    #[arg(long)]
    no_at: bool,
    /// Regularizer pooling: graph or maxpool [default: graph]
    #[arg(long)]
    reg_pool: Option<RegPool>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Held-out test corpus, scored after training
    #[arg(long)]
    test: Option<PathBuf>,
    /// Precomputed token vectors aligned with --test
    #[arg(long)]
    test_embeddings: Option<PathBuf>,
    /// Checkpoint path (train) or directory for per-variant checkpoints (ablate)
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint written by `train`
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Output corpus path (stdout when absent)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of sentences
    #[arg(long, default_value_t = 500)]
    n: usize,
    /// Shortest sentence
    #[arg(long, default_value_t = 5)]
    min_len: usize,
    /// Longest sentence
    #[arg(long, default_value_t = 12)]
    max_len: usize,
    /// Random seed
    #[arg(long, default_value_t = 13)]
    seed: u64,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Example index in --data
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Checkpoint whose learned adjacency to show; a freshly initialized
    /// model otherwise
    #[arg(long)]
    model: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

/// Failure with its process exit code.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => 1,
            Error::Divergence { .. } => 3,
            _ => 2,
        };
        Failure { code, msg: e.to_string() }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure { code: 1, msg: msg.into() }
}

fn data_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure { code: 2, msg: format!("{}: {e}", path.display()) }
}

type Outcome = Result<(), Failure>;

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| data_err(path, e))
}

fn load_examples(data: &Path, embeddings: Option<&Path>, annotations: Option<&Path>) -> Result<Vec<Example>, Failure> {
    let sentences = match annotations {
        Some(ann) => parse_conllu(&read(data)?, &read(ann)?).map_err(|e| data_err(data, e))?,
        None => parse_corpus(&read(data)?).map_err(|e| data_err(data, e))?,
    };
    let Some(path) = embeddings else {
        return Ok(sentences.into_iter().map(Example::new).collect());
    };
    let sidecar = parse_sidecar(&read(path)?).map_err(|e| data_err(path, e))?;
    if sidecar.vectors.len() != sentences.len() {
        return Err(data_err(
            path,
            format!("{} vector blocks for {} examples", sidecar.vectors.len(), sentences.len()),
        ));
    }
    sentences
        .into_iter()
        .zip(sidecar.vectors)
        .enumerate()
        .map(|(i, (s, v))| {
            if v.nrows() != s.len() {
                return Err(data_err(path, format!("example {i}: {} vectors for {} tokens", v.nrows(), s.len())));
            }
            Ok(Example::with_vectors(s, v))
        })
        .collect()
}

fn sidecar_dim(examples: &[Example]) -> Option<usize> {
    examples.first().and_then(|e| e.vectors.as_ref()).map(|v| v.ncols())
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig, Failure> {
        let mut c = match &self.config {
            Some(path) => serde_json::from_str(&read(path)?).map_err(|e| usage(format!("{}: {e}", path.display())))?,
            None => TrainConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag { c.$($field).+ = v; })*
            };
        }
        set!(
            dev_ratio => dev_ratio, seed => seed, epochs => epochs, batch => batch, lr => lr,
            tok_dim => model.tok_dim, pos_dim => model.pos_dim, hidden => model.hidden,
            gcn_dim => model.gcn_dim, gcn_layers => model.gcn_layers, ff_dim => model.ff_dim,
            gamma => model.gamma, alpha => model.alpha, beta => model.beta,
        );
        let mask = &mut c.model.mask;
        if let Some(v) = self.variant {
            *mask = v.mask();
        }
        if let Some(p) = self.reg_pool {
            mask.reg_pool = p;
        }
        mask.use_kl &= !self.no_kl && !self.use_lstm;
        mask.use_reg &= !self.no_reg;
        mask.use_gcn &= !self.no_gcn;
        mask.use_ad &= !self.no_ad;
        mask.use_at &= !self.no_at;
        if self.use_lstm {
            mask.use_onlstm = false;
            mask.use_plain_lstm = true;
        }
        c.validate()?;
        Ok(c)
    }
}

fn announce(config: &TrainConfig) {
    eprintln!("config {}", serde_json::to_string(config).expect("config serializes"));
}

fn emit(line: impl std::fmt::Display) -> Outcome {
    let mut out = io::stdout().lock();
    writeln!(out, "{line}").map_err(|e| Failure { code: 2, msg: format!("stdout: {e}") })
}

/// Metrics JSON with leading label fields.
fn labelled(labels: &[(&str, serde_json::Value)], metrics: &Metrics) -> String {
    let fields: Vec<String> = labels.iter().map(|(k, v)| format!("{}:{v}", json!(k))).collect();
    format!("{{{},{}", fields.join(","), &metrics.to_json()[1..])
}

struct Prepared {
    config: TrainConfig,
    train: Vec<Example>,
    dev: Vec<Example>,
    test: Option<Vec<Example>>,
    vocab: Option<Vocab>,
}

fn prepare(args: &TrainArgs, mut config: TrainConfig) -> Result<Prepared, Failure> {
    let d = &args.data;
    let data = load_examples(&d.data, d.embeddings.as_deref(), d.annotations.as_deref())?;
    if data.is_empty() {
        return Err(data_err(&d.data, "no examples"));
    }
    if let Some(dim) = sidecar_dim(&data) {
        config.model.tok_dim = dim;
    }
    let test = match &args.test {
        Some(path) => Some(load_examples(path, args.test_embeddings.as_deref(), None)?),
        None => None,
    };
    let (train, dev) = split_train_dev(&data, config.dev_ratio, config.seed)?;
    if train.is_empty() {
        return Err(usage("dev ratio leaves no training data"));
    }
    let vocab = d.embeddings.is_none().then(|| Vocab::build(train.iter().map(|e| &e.sentence)));
    Ok(Prepared { config, train, dev, test, vocab })
}

fn run_train(args: &TrainArgs) -> Outcome {
    let config = args.config.resolve()?;
    let p = prepare(args, config)?;
    announce(&p.config);
    let mut log_err = None;
    let outcome = train(&p.config, p.vocab, &p.train, &p.dev, |log| {
        if let Err(e) = emit(log.to_json()) {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e);
    }
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from("model.ongckpt"));
    let ck = Checkpoint {
        config: p.config,
        best_dev_f1: outcome.best_dev.f1,
        epoch: outcome.best_epoch,
        model: outcome.model,
    };
    ck.save(&out).map_err(|e| data_err(&out, e))?;
    eprintln!("saved epoch {} (dev f1 {:.4}) to {}", ck.epoch, ck.best_dev_f1, out.display());
    if let Some(test) = &p.test {
        emit(evaluate(&ck.model, test)?.to_json())?;
    }
    Ok(())
}

fn run_ablate(args: &TrainArgs) -> Outcome {
    let base = args.config.resolve()?;
    let variants: Vec<Variant> = match args.config.variant {
        Some(v) => vec![v],
        None => Variant::ABLATIONS.to_vec(),
    };
    let p = prepare(args, base)?;
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir).map_err(|e| data_err(dir, e))?;
    }
    for v in variants {
        let mut config = p.config.clone();
        config.model.mask = v.mask();
        config.validate()?;
        announce(&config);
        let outcome = train(&config, p.vocab.clone(), &p.train, &p.dev, |_| {})?;
        let metrics = match &p.test {
            Some(test) => evaluate(&outcome.model, test)?,
            None => outcome.best_dev,
        };
        if let Some(dir) = &args.out {
            let path = dir.join(format!("{v}.ongckpt"));
            let ck = Checkpoint { config, best_dev_f1: outcome.best_dev.f1, epoch: outcome.best_epoch, model: outcome.model };
            ck.save(&path).map_err(|e| data_err(&path, e))?;
        }
        emit(labelled(&[("variant", json!(v.name()))], &metrics))?;
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    let ck = Checkpoint::load(path).map_err(|e| data_err(path, e))?;
    announce(&ck.config);
    Ok(ck)
}

fn eval_data(args: &EvalArgs) -> Result<(Checkpoint, Vec<Example>), Failure> {
    let ck = load_checkpoint(&args.model)?;
    let d = &args.data;
    let data = load_examples(&d.data, d.embeddings.as_deref(), d.annotations.as_deref())?;
    Ok((ck, data))
}

fn run_eval(args: &EvalArgs) -> Outcome {
    let (ck, data) = eval_data(args)?;
    emit(evaluate(&ck.model, &data)?.to_json())
}

fn run_predict(args: &EvalArgs) -> Outcome {
    let (ck, data) = eval_data(args)?;
    for (ex, pred) in data.iter().zip(predict_all(&ck.model, &data)?) {
        let spans: Vec<String> = pred.spans().iter().map(Span::to_string).collect();
        emit(json!({ "target": ex.sentence.target.to_string(), "opinions": spans }))?;
    }
    Ok(())
}

fn run_bucket_eval(args: &EvalArgs) -> Outcome {
    let (ck, data) = eval_data(args)?;
    for (fold, members) in Fold::ALL.iter().zip(bucket_by_distance(&data)) {
        let subset: Vec<Example> = members.iter().map(|&i| data[i].clone()).collect();
        let metrics = if subset.is_empty() { Metrics::from_counts(0, 0, 0) } else { evaluate(&ck.model, &subset)? };
        emit(labelled(&[("fold", json!(fold.label())), ("examples", json!(subset.len()))], &metrics))?;
    }
    Ok(())
}

fn run_gen(args: &GenArgs) -> Outcome {
    let sentences = gen_synthetic(args.n, (args.min_len, args.max_len), args.seed)?;
    let text = write_corpus(&sentences);
    match &args.out {
        Some(path) => fs::write(path, text).map_err(|e| data_err(path, e)),
        None => emit(text.trim_end()),
    }
}

fn run_inspect(args: &InspectArgs) -> Outcome {
    let d = &args.data;
    let data = load_examples(&d.data, d.embeddings.as_deref(), d.annotations.as_deref())?;
    let ex = data
        .get(args.index)
        .ok_or_else(|| usage(format!("index {} out of range ({} examples)", args.index, data.len())))?;
    let model = match &args.model {
        Some(path) => load_checkpoint(path)?.model,
        None => {
            let mut config = args.config.resolve()?;
            if let Some(dim) = sidecar_dim(&data) {
                config.model.tok_dim = dim;
            }
            announce(&config);
            let vocab = d.embeddings.is_none().then(|| Vocab::build(data.iter().map(|e| &e.sentence)));
            Model::new(config.model, vocab, config.seed)?
        }
    };
    let dump = model.inspect(ex)?;
    emit(serde_json::to_string(&dump).expect("dump serializes"))
}

fn run(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Predict(a) => run_predict(a),
        Command::Ablate(a) => run_ablate(a),
        Command::GenData(a) => run_gen(a),
        Command::Inspect(a) => run_inspect(a),
        Command::BucketEval(a) => run_bucket_eval(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
