//! Command-line pipeline: generate synthetic logs, preprocess and train,
//! evaluate Precision@K, predict next items, and run the gradient oracle.
//!
//! Every option can also come from a flat `key=value` config file
//! (`--config`); command-line flags override file entries, unknown keys are
//! rejected, and each run echoes its fully-resolved configuration to stderr.
//! Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric
//! failure.

use std::collections::BTreeMap;
use std::io::{BufReader, Read};
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use acrec::datapipe::{
    build_vocab, encode, encode_corpus, parse_log, split, MaskMode, Vocabulary,
    DEFAULT_MAX_LEN, DEFAULT_MAX_RECS, DEFAULT_MIN_COUNT,
};
use acrec::error::{Error, Result};
use acrec::eval::{evaluate, MetricReport, DEFAULT_K};
use acrec::grad::{backward, check_instance, fd_check_grads, FD_EPSILON};
use acrec::model::{load_checkpoint, predict_next, save_checkpoint, Variant};
use acrec::numkernel::{softmax, topk, Rng};
use acrec::synth::{generate, to_jsonl, SynthConfig};
use acrec::train::{train, TrainConfig};

#[derive(Parser)]
#[command(name = "acrec", version, about = "Action-conditional session models for next-item recommendation")]
struct Cli {
    /// Cap worker threads (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic interaction log plus ground-truth sidecar
    Gen(GenArgs),
    /// Preprocess a log and train one model variant
    Train(TrainArgs),
    /// Evaluate a checkpoint: Precision@K with view/click breakdown
    Eval(EvalArgs),
    /// Read one session from stdin and print the top-K next items
    Predict(PredictArgs),
    /// Compare analytic gradients against central finite differences
    Gradcheck(GradcheckArgs),
}

/// Flat key=value config file; `#` starts a comment.
struct FileCfg {
    entries: BTreeMap<String, String>,
    path: Option<PathBuf>,
}

impl FileCfg {
    fn load(path: Option<&PathBuf>) -> Result<FileCfg> {
        let mut entries = BTreeMap::new();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)?;
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| Error::Config(format!(
                    "{}:{}: expected key=value, got {line:?}",
                    p.display(),
                    i + 1
                )))?;
                entries.insert(key.trim().to_string(), value.trim().to_string());
            }
        }
        Ok(FileCfg { entries, path: path.cloned() })
    }

    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                Error::Config(format!("config key {key}: cannot parse {raw:?}"))
            }),
        }
    }

    /// Every key must have been consumed.
    fn finish(self) -> Result<()> {
        if let Some(key) = self.entries.keys().next() {
            let whence = self.path.map(|p| p.display().to_string()).unwrap_or_default();
            return Err(Error::Config(format!("unknown config key {key:?} in {whence}")));
        }
        Ok(())
    }
}

fn echo_config(command: &str, pairs: &[(&str, String)]) {
    eprintln!("# resolved config ({command})");
    for (k, v) in pairs {
        eprintln!("{k}={v}");
    }
}

// ---------------------------------------------------------------------------

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output log path
    #[arg(long, default_value = "synth.jsonl")]
    out: PathBuf,
    /// Ground-truth sidecar path (default: <out>.truth)
    #[arg(long)]
    truth_out: Option<PathBuf>,
    #[arg(long)]
    sessions: Option<usize>,
    /// Catalog size V
    #[arg(long)]
    catalog: Option<usize>,
    #[arg(long)]
    len_min: Option<usize>,
    #[arg(long)]
    len_max: Option<usize>,
    #[arg(long)]
    zipf_s: Option<f64>,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    p_intra: Option<f64>,
    #[arg(long)]
    rec_rate: Option<f64>,
    #[arg(long)]
    slate_size: Option<usize>,
    #[arg(long)]
    p_follow: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let mut file = FileCfg::load(args.config.as_ref())?;
    let def = SynthConfig::default();
    let cfg = SynthConfig {
        n_sessions: args.sessions.or(file.take("sessions")?).unwrap_or(def.n_sessions),
        catalog: args.catalog.or(file.take("catalog")?).unwrap_or(def.catalog),
        len_range: (
            args.len_min.or(file.take("len_min")?).unwrap_or(def.len_range.0),
            args.len_max.or(file.take("len_max")?).unwrap_or(def.len_range.1),
        ),
        zipf_s: args.zipf_s.or(file.take("zipf_s")?).unwrap_or(def.zipf_s),
        n_clusters: args.clusters.or(file.take("clusters")?).unwrap_or(def.n_clusters),
        p_intra: args.p_intra.or(file.take("p_intra")?).unwrap_or(def.p_intra),
        rec_rate: args.rec_rate.or(file.take("rec_rate")?).unwrap_or(def.rec_rate),
        slate_size: args.slate_size.or(file.take("slate_size")?).unwrap_or(def.slate_size),
        p_follow: args.p_follow.or(file.take("p_follow")?).unwrap_or(def.p_follow),
        seed: args.seed.or(file.take("seed")?).unwrap_or(def.seed),
    };
    file.finish()?;
    let truth_path = args
        .truth_out
        .unwrap_or_else(|| PathBuf::from(format!("{}.truth", args.out.display())));
    echo_config(
        "gen",
        &[
            ("sessions", cfg.n_sessions.to_string()),
            ("catalog", cfg.catalog.to_string()),
            ("len_min", cfg.len_range.0.to_string()),
            ("len_max", cfg.len_range.1.to_string()),
            ("zipf_s", cfg.zipf_s.to_string()),
            ("clusters", cfg.n_clusters.to_string()),
            ("p_intra", cfg.p_intra.to_string()),
            ("rec_rate", cfg.rec_rate.to_string()),
            ("slate_size", cfg.slate_size.to_string()),
            ("p_follow", cfg.p_follow.to_string()),
            ("seed", cfg.seed.to_string()),
            ("out", args.out.display().to_string()),
            ("truth_out", truth_path.display().to_string()),
        ],
    );

    let (sessions, truth) = generate(&cfg)?;
    std::fs::write(&args.out, to_jsonl(&sessions))?;
    std::fs::write(&truth_path, truth.to_sidecar())?;
    println!("wrote {} sessions to {}", sessions.len(), args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input log file
    #[arg(long)]
    data: Option<PathBuf>,
    /// Artifact directory (checkpoint.bin, vocab.tsv, history.csv)
    #[arg(long, default_value = "train_out")]
    out_dir: PathBuf,
    /// navigation | early | late | clicks
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_start: Option<f64>,
    #[arg(long)]
    lr_end: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    /// all | clicks_only (forced to clicks_only for the clicks variant)
    #[arg(long)]
    mask_mode: Option<String>,
    #[arg(long)]
    min_count: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    max_recs: Option<usize>,
    #[arg(long)]
    valid_fraction: Option<f64>,
    #[arg(long)]
    eval_every: Option<u64>,
    /// K for the final validation Precision@K line
    #[arg(long = "k")]
    k: Option<usize>,
}

fn parse_mask_mode(s: &str) -> Result<MaskMode> {
    match s {
        "all" => Ok(MaskMode::All),
        "clicks_only" => Ok(MaskMode::ClicksOnly),
        other => Err(Error::Config(format!(
            "unknown mask_mode {other:?}; expected all|clicks_only"
        ))),
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut file = FileCfg::load(args.config.as_ref())?;
    let data_path = args
        .data
        .or(file.take("data")?)
        .ok_or_else(|| Error::Config("missing --data (or data= in config)".into()))?;
    let variant_str: String =
        args.variant.or(file.take("variant")?).unwrap_or_else(|| "late".to_string());
    let variant = Variant::parse(&variant_str)?;
    let mut cfg = TrainConfig::new(variant);
    cfg.iterations = args.iterations.or(file.take("iterations")?).unwrap_or(cfg.iterations);
    cfg.batch_size = args.batch_size.or(file.take("batch_size")?).unwrap_or(cfg.batch_size);
    cfg.lr_start = args.lr_start.or(file.take("lr_start")?).unwrap_or(cfg.lr_start);
    cfg.lr_end = args.lr_end.or(file.take("lr_end")?).unwrap_or(cfg.lr_end);
    cfg.seed = args.seed.or(file.take("seed")?).unwrap_or(cfg.seed);
    cfg.d = args.embed_dim.or(file.take("embed_dim")?).unwrap_or(cfg.d);
    cfg.k = args.hidden_dim.or(file.take("hidden_dim")?).unwrap_or(cfg.k);
    cfg.eval_every = args.eval_every.or(file.take("eval_every")?).unwrap_or(cfg.eval_every);
    if let Some(m) = args.mask_mode.or(file.take("mask_mode")?) {
        cfg.mask_mode = parse_mask_mode(&m)?;
    }
    let min_count = args.min_count.or(file.take("min_count")?).unwrap_or(DEFAULT_MIN_COUNT);
    let max_len = args.max_len.or(file.take("max_len")?).unwrap_or(DEFAULT_MAX_LEN);
    let max_recs = args.max_recs.or(file.take("max_recs")?).unwrap_or(DEFAULT_MAX_RECS);
    let valid_fraction =
        args.valid_fraction.or(file.take("valid_fraction")?).unwrap_or(0.2);
    let k = args.k.or(file.take("k")?).unwrap_or(DEFAULT_K);
    file.finish()?;
    cfg.validate()?;
    if !(valid_fraction > 0.0 && valid_fraction < 1.0) {
        return Err(Error::Config(format!(
            "valid_fraction must lie in (0, 1), got {valid_fraction}"
        )));
    }

    echo_config(
        "train",
        &[
            ("data", data_path.display().to_string()),
            ("out_dir", args.out_dir.display().to_string()),
            ("variant", variant.name().to_string()),
            ("iterations", cfg.iterations.to_string()),
            ("batch_size", cfg.batch_size.to_string()),
            ("lr_start", cfg.lr_start.to_string()),
            ("lr_end", cfg.lr_end.to_string()),
            ("seed", cfg.seed.to_string()),
            ("embed_dim", cfg.d.to_string()),
            ("hidden_dim", cfg.k.to_string()),
            (
                "mask_mode",
                match cfg.effective_mask_mode() {
                    MaskMode::All => "all".to_string(),
                    MaskMode::ClicksOnly => "clicks_only".to_string(),
                },
            ),
            ("eval_every", cfg.eval_every.to_string()),
            ("min_count", min_count.to_string()),
            ("max_len", max_len.to_string()),
            ("max_recs", max_recs.to_string()),
            ("valid_fraction", valid_fraction.to_string()),
            ("k", k.to_string()),
        ],
    );

    let reader = BufReader::new(std::fs::File::open(&data_path)?);
    let parsed = parse_log(reader)?;
    if parsed.rejected_empty > 0 {
        eprintln!("warning: rejected {} session(s) with no events", parsed.rejected_empty);
    }
    if parsed.sessions.is_empty() {
        return Err(Error::Data(format!("{}: no sessions", data_path.display())));
    }
    let vocab = build_vocab(&parsed.sessions, min_count)?;
    let encoded = encode_corpus(&parsed.sessions, &vocab, max_len, max_recs);
    if encoded.is_empty() {
        return Err(Error::Data("no sessions with at least 2 events".into()));
    }
    let (train_set, valid_set) =
        split(encoded, valid_fraction, &mut Rng::new(cfg.seed).derive(2));
    eprintln!(
        "corpus: {} train / {} valid sequences, vocabulary {}",
        train_set.len(),
        valid_set.len(),
        vocab.len()
    );

    std::fs::create_dir_all(&args.out_dir)?;
    std::fs::write(args.out_dir.join("vocab.tsv"), vocab.to_tsv())?;

    let outcome = train(&cfg, vocab.len(), &train_set, &valid_set, Some(&args.out_dir))?;
    save_checkpoint(&args.out_dir.join("checkpoint.bin"), &outcome.params, variant)?;
    std::fs::write(args.out_dir.join("history.csv"), outcome.history.to_csv())?;

    if valid_set.is_empty() {
        println!("validation precision@{k}: n/a (empty validation split)");
    } else {
        let mut eval_rng = Rng::new(cfg.seed).derive(3);
        let (_, report) = evaluate(&outcome.params, variant, &valid_set, k, &mut eval_rng);
        print!("{}", report.to_text(variant.name()));
    }

    if let Some(iter) = outcome.diverged_at {
        return Err(Error::Numeric(format!(
            "training diverged at iteration {iter}; wrote last good checkpoint"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Log file to evaluate on
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long = "k")]
    k: Option<usize>,
    /// Bootstrap seed
    #[arg(long)]
    seed: Option<u64>,
    /// Metrics CSV output path (stdout report is always printed)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Append a row instead of writing header + row
    #[arg(long)]
    append: bool,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    max_recs: Option<usize>,
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mut file = FileCfg::load(args.config.as_ref())?;
    let checkpoint = args
        .checkpoint
        .or(file.take("checkpoint")?)
        .ok_or_else(|| Error::Config("missing --checkpoint".into()))?;
    let vocab_path = args
        .vocab
        .or(file.take("vocab")?)
        .ok_or_else(|| Error::Config("missing --vocab".into()))?;
    let data_path = args
        .data
        .or(file.take("data")?)
        .ok_or_else(|| Error::Config("missing --data".into()))?;
    let k = args.k.or(file.take("k")?).unwrap_or(DEFAULT_K);
    let seed = args.seed.or(file.take("seed")?).unwrap_or(0);
    let max_len = args.max_len.or(file.take("max_len")?).unwrap_or(DEFAULT_MAX_LEN);
    let max_recs = args.max_recs.or(file.take("max_recs")?).unwrap_or(DEFAULT_MAX_RECS);
    let out = args.out.or(file.take("out")?);
    file.finish()?;

    echo_config(
        "eval",
        &[
            ("checkpoint", checkpoint.display().to_string()),
            ("vocab", vocab_path.display().to_string()),
            ("data", data_path.display().to_string()),
            ("k", k.to_string()),
            ("seed", seed.to_string()),
            ("max_len", max_len.to_string()),
            ("max_recs", max_recs.to_string()),
        ],
    );

    let (params, variant) = load_checkpoint(&checkpoint)?;
    let vocab = Vocabulary::from_tsv(&std::fs::read_to_string(&vocab_path)?)?;
    if vocab.len() != params.v_x {
        return Err(Error::Data(format!(
            "vocabulary size {} does not match checkpoint V_x {}",
            vocab.len(),
            params.v_x
        )));
    }
    if k < 1 || k > params.v_x {
        return Err(Error::Config(format!("k must lie in [1, {}], got {k}", params.v_x)));
    }
    let parsed = parse_log(BufReader::new(std::fs::File::open(&data_path)?))?;
    let encoded = encode_corpus(&parsed.sessions, &vocab, max_len, max_recs);
    if encoded.is_empty() {
        return Err(Error::Data("no evaluable sessions (need at least 2 events)".into()));
    }

    let mut rng = Rng::new(seed);
    let (_, report) = evaluate(&params, variant, &encoded, k, &mut rng);
    print!("{}", report.to_text(variant.name()));
    if let Some(path) = out {
        let row = report.csv_row(variant.name());
        if args.append && path.exists() {
            let mut existing = std::fs::read_to_string(&path)?;
            if !existing.ends_with('\n') {
                existing.push('\n');
            }
            existing.push_str(&row);
            existing.push('\n');
            std::fs::write(&path, existing)?;
        } else {
            std::fs::write(&path, format!("{}\n{row}\n", MetricReport::csv_header()))?;
        }
        eprintln!("wrote metrics to {}", path.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long = "k")]
    k: Option<usize>,
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let mut file = FileCfg::load(args.config.as_ref())?;
    let checkpoint = args
        .checkpoint
        .or(file.take("checkpoint")?)
        .ok_or_else(|| Error::Config("missing --checkpoint".into()))?;
    let vocab_path = args
        .vocab
        .or(file.take("vocab")?)
        .ok_or_else(|| Error::Config("missing --vocab".into()))?;
    let k = args.k.or(file.take("k")?).unwrap_or(DEFAULT_K);
    file.finish()?;

    echo_config(
        "predict",
        &[
            ("checkpoint", checkpoint.display().to_string()),
            ("vocab", vocab_path.display().to_string()),
            ("k", k.to_string()),
        ],
    );

    let (params, variant) = load_checkpoint(&checkpoint)?;
    let vocab = Vocabulary::from_tsv(&std::fs::read_to_string(&vocab_path)?)?;
    if vocab.len() != params.v_x {
        return Err(Error::Data("vocabulary does not match checkpoint".into()));
    }
    if k < 1 || k > params.v_x {
        return Err(Error::Config(format!("k must lie in [1, {}], got {k}", params.v_x)));
    }

    let mut input = String::new();
    std::io::stdin().read_to_string(&mut input)?;
    let line = input
        .lines()
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| Error::Data("no session on stdin".into()))?;
    let session: acrec::datapipe::RawSession = serde_json::from_str(line)
        .map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?;
    if session.events.is_empty() {
        return Err(Error::Data("session has no events".into()));
    }
    let seq = encode(&session, &vocab, DEFAULT_MAX_LEN, DEFAULT_MAX_RECS);

    let logits = predict_next(&params, &seq, variant);
    let probs = softmax(&logits)?;
    for idx in topk(&probs, k) {
        println!("{}\t{:.6}", vocab.id_of(idx), probs[idx]);
    }
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// navigation | early | late | clicks
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// all | clicks_only
    #[arg(long)]
    mask_mode: Option<String>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Negative control: corrupt one analytic gradient entry before the
    /// comparison (must make the check fail).
    #[arg(long, hide = true)]
    corrupt: bool,
}

const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let mut file = FileCfg::load(args.config.as_ref())?;
    let variant_str: String =
        args.variant.or(file.take("variant")?).unwrap_or_else(|| "late".to_string());
    let variant = Variant::parse(&variant_str)?;
    let seed = args.seed.or(file.take("seed")?).unwrap_or(0);
    let mask_mode = match args.mask_mode.or(file.take("mask_mode")?) {
        Some(m) => parse_mask_mode(&m)?,
        None => MaskMode::All,
    };
    let epsilon = args.epsilon.or(file.take("epsilon")?).unwrap_or(FD_EPSILON);
    file.finish()?;

    echo_config(
        "gradcheck",
        &[
            ("variant", variant.name().to_string()),
            ("seed", seed.to_string()),
            (
                "mask_mode",
                match mask_mode {
                    MaskMode::All => "all".to_string(),
                    MaskMode::ClicksOnly => "clicks_only".to_string(),
                },
            ),
            ("epsilon", epsilon.to_string()),
        ],
    );

    let (params, seq) = check_instance(50, 8, 8, 6, seed);
    let mask = mask_mode.mask_for(&seq);
    let (_, mut grads) = backward(&params, &seq, variant, &mask)?;
    if args.corrupt {
        grads.w_z.data[0] += 0.05;
    }
    let err = fd_check_grads(&params, &seq, variant, &mask, epsilon, &grads)?;
    let mask_name = match mask_mode {
        MaskMode::All => "all",
        MaskMode::ClicksOnly => "clicks_only",
    };
    println!("variant={} mask={mask_name} seed={seed} max_rel_err={err:.6e}", variant.name());
    if err >= GRADCHECK_TOLERANCE {
        return Err(Error::Numeric(format!(
            "gradient check failed: max relative error {err:.3e} >= {GRADCHECK_TOLERANCE:.0e}"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                e.exit(); // exits 0
            }
            let _ = e.print();
            std::process::exit(1);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: could not apply --threads: {e}");
        }
    }
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
