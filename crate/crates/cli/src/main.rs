use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use reval_core::bleu::{corpus_bleu_owned, sentence_bleu, BleuConfig};
use reval_core::corpus::{generate, ParallelCorpus, Split, TaskKind, TaskSpec};
use reval_core::experiment::{ablate, train_to_dir, AblationRow, Dataset, RunConfig, RunFiles};
use reval_core::inference::{translate, ModelRewriter, StoppingPolicy};
use reval_core::model::Model;
use reval_core::vocab::Vocabulary;

#[derive(Parser)]
#[command(
    name = "reval",
    version,
    about = "Multi-pass rewriting with a learned evaluator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic parallel corpus as JSONL.
    Gen(GenArgs),
    /// Train a rewriter and evaluator from a config file.
    Train(TrainArgs),
    /// Translate sentences with a trained checkpoint.
    Translate(TranslateArgs),
    /// Corpus BLEU of hypotheses against references.
    Score(ScoreArgs),
    /// Train and evaluate the base config and its ablation variants.
    Ablate(AblateArgs),
}

#[derive(clap::Args)]
struct GenArgs {
    #[arg(long, value_parser = parse_task)]
    task: TaskKind,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    vocab: usize,
    #[arg(long, default_value_t = 0.15)]
    noise: f64,
    #[arg(long, default_value_t = 4)]
    min_len: usize,
    #[arg(long, default_value_t = 10)]
    max_len: usize,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `out_dir` from the config.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Continue from the state saved in the output directory.
    #[arg(long)]
    resume: bool,
    /// Stop this invocation after N epochs; resume later with `--resume`.
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(clap::Args)]
struct TranslateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Plain text input, one tokenized sentence per line.
    #[arg(long, conflicts_with = "corpus", required_unless_present = "corpus")]
    input: Option<PathBuf>,
    /// JSONL corpus; its references are used for scoring.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Restrict `--corpus` to one split.
    #[arg(long, value_parser = ["train", "dev", "test", "all"], default_value = "all")]
    split: String,
    /// Plain text references, one per input line.
    #[arg(long, conflicts_with = "corpus")]
    refs: Option<PathBuf>,
    /// Vocabulary file that must match the checkpoint.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// threshold, argmax, oracle or fixed:k
    #[arg(long, default_value = "threshold")]
    policy: String,
    #[arg(long, default_value_t = 0.01)]
    delta: f64,
    #[arg(long = "max-k", default_value_t = 4)]
    max_k: usize,
    #[arg(long, default_value_t = 4)]
    beam: usize,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct ScoreArgs {
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long)]
    refs: PathBuf,
    /// Also print smoothed sentence BLEU per line.
    #[arg(long)]
    sentence: bool,
}

#[derive(clap::Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// An error caused by how the command was invoked.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn parse_task(s: &str) -> Result<TaskKind, String> {
    s.parse().map_err(|e: reval_core::Error| e.to_string())
}

fn tokens(line: &str) -> Vec<String> {
    line.split_whitespace().map(String::from).collect()
}

fn read_lines(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(tokens).collect())
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let spec = TaskSpec {
        kind: a.task,
        vocab_size: a.vocab,
        min_len: a.min_len,
        max_len: a.max_len,
        noise: a.noise,
        seed: a.seed,
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    if a.n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let corpus = generate(&spec, a.n)?;
    emit(a.out.as_deref(), &corpus.to_jsonl()?)
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    RunConfig::parse(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let dir = a
        .out_dir
        .or(cfg.out_dir.clone())
        .ok_or_else(|| usage("no output directory: set out_dir or pass --out-dir"))?;
    if let Some(p) = &cfg.corpus {
        if !p.exists() {
            bail!("corpus {} does not exist", p.display());
        }
    }
    let data = Dataset::for_config(&cfg)?;
    let out = train_to_dir(&cfg, &data, &dir, a.resume, a.stop_after)?;
    let s = &out.state;
    println!(
        "epochs {} steps {} processed {} best_dev_bleu {:.4} finished {}",
        s.epoch,
        s.step,
        s.processed,
        if s.best_dev.is_finite() {
            s.best_dev
        } else {
            0.0
        },
        s.finished
    );
    println!("checkpoint {}", dir.join(RunFiles::BEST).display());
    Ok(())
}

fn cmd_translate(a: TranslateArgs) -> Result<()> {
    let policy =
        StoppingPolicy::parse(&a.policy, a.delta, a.max_k).map_err(|e| usage(e.to_string()))?;
    policy.validate().map_err(|e| usage(e.to_string()))?;
    let (sources, refs): (Vec<Vec<String>>, Option<Vec<Vec<String>>>) = match (&a.input, &a.corpus)
    {
        (Some(input), _) => (
            read_lines(input)?,
            a.refs.as_deref().map(read_lines).transpose()?,
        ),
        (None, Some(path)) => {
            let mut corpus = ParallelCorpus::load(path)?;
            if a.split != "all" {
                let which = match a.split.as_str() {
                    "train" => Split::Train,
                    "dev" => Split::Dev,
                    _ => Split::Test,
                };
                corpus = corpus.split(which);
            }
            let (x, y) = corpus
                .pairs
                .into_iter()
                .map(|p| (p.src, p.reference))
                .unzip();
            (x, Some(y))
        }
        (None, None) => return Err(usage("one of --input or --corpus is required")),
    };
    if matches!(policy, StoppingPolicy::OracleBleu { .. }) && refs.is_none() {
        return Err(usage(
            "--policy oracle requires references (--refs or --corpus)",
        ));
    }
    if let Some(r) = &refs {
        if r.len() != sources.len() {
            return Err(usage(format!(
                "{} references for {} inputs",
                r.len(),
                sources.len()
            )));
        }
    }
    let model = Model::load(&a.checkpoint)
        .with_context(|| format!("loading {}", a.checkpoint.display()))?;
    if let Some(vp) = &a.vocab {
        let v = Vocabulary::load(vp)?;
        if &v != model.vocab() {
            return Err(reval_core::Error::VocabMismatch(format!(
                "{} ({} entries) differs from the checkpoint vocabulary ({} entries)",
                vp.display(),
                v.len(),
                model.vocab().len()
            ))
            .into());
        }
    }
    let rw = ModelRewriter::new(&model, a.beam);
    let mut text = String::new();
    let mut outputs = Vec::with_capacity(sources.len());
    for (i, x) in sources.iter().enumerate() {
        let reference = refs.as_ref().map(|r| r[i].as_slice());
        let t = translate(&rw, x, &policy, reference)
            .with_context(|| format!("input line {}", i + 1))?;
        text.push_str(&t.trace.output_line());
        text.push('\n');
        outputs.push(t.tokens);
    }
    emit(a.out.as_deref(), &text)?;
    if let Some(r) = refs {
        let bleu = corpus_bleu_owned(&outputs, &r, &BleuConfig::unsmoothed())?;
        let line = format!("bleu {:.6}", bleu.value);
        if a.out.is_some() {
            println!("{line}");
        } else {
            eprintln!("{line}");
        }
    }
    Ok(())
}

fn cmd_score(a: ScoreArgs) -> Result<()> {
    let hyp = read_lines(&a.hyp)?;
    let refs = read_lines(&a.refs)?;
    if hyp.len() != refs.len() {
        return Err(usage(format!(
            "{} hypotheses for {} references",
            hyp.len(),
            refs.len()
        )));
    }
    if a.sentence {
        for (h, r) in hyp.iter().zip(&refs) {
            println!("{:.6}", sentence_bleu(h, r, &BleuConfig::default())?.value);
        }
    }
    println!(
        "bleu {:.6}",
        corpus_bleu_owned(&hyp, &refs, &BleuConfig::unsmoothed())?.value
    );
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let mut text = format!("{}\n{}\n", cfg.seeds().header(), AblationRow::CSV_HEADER);
    let rows = ablate(&cfg, |row| eprintln!("{}", row.csv_row()))?;
    for r in &rows {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    emit(a.out.as_deref(), &text)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Translate(a) => cmd_translate(a),
        Command::Score(a) => cmd_score(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let is_usage = e.downcast_ref::<Usage>().is_some()
                || matches!(
                    e.downcast_ref::<reval_core::Error>(),
                    Some(reval_core::Error::MissingReference)
                );
            ExitCode::from(if is_usage { 2 } else { 1 })
        }
    }
}
