use std::fs;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::builder::{PossibleValuesParser, TypedValueParser};
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};
use log::{info, warn};
use serde_json::json;

use softpivot::cascade::{load_cascade, run_pipeline, ArtifactPaths, PipelineConfig, Step};
use softpivot::data::Vocab;
use softpivot::decoding::{cascade_decode, PivotInput};
use softpivot::eval::{ablate, report, ExperimentSpec};
use softpivot::softbridge::{detect_inconsistencies, CorrectionMode};

/// Soft-pivot cascade translation on synthetic data.
#[derive(Debug, Parser)]
#[command(name = "softpivot", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpora and vocabularies.
    GenData(StepArgs),
    /// Pretrain the source-pivot, pivot-target and direct models.
    Pretrain(StepArgs),
    /// Translate the direct data's source side into pseudo-pivots.
    PseudoPivot(StepArgs),
    /// Fine-tune the connected cascade end to end.
    Finetune(StepArgs),
    /// Score direct, hard pivot and soft cascade on the test set.
    Evaluate(StepArgs),
    /// Run every step, skipping those already done.
    Run(StepArgs),
    /// Translate sentences through the cascade, one JSON object per line.
    Decode(DecodeArgs),
    /// Score a grid of bridge and decoding settings over seeds.
    Ablate(AblateArgs),
    /// Collate a run directory into reports/summary.md.
    Report(ReportArgs),
}

#[derive(Debug, Default, Args)]
struct Overrides {
    /// TOML configuration file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Run seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Decode-time probability correction.
    #[arg(long, value_parser = correction_parser())]
    correction: Option<CorrectionMode>,
    /// Pivot hypotheses carried into the second half.
    #[arg(long, value_name = "N", value_parser = positive)]
    n_pivot: Option<usize>,
    /// Target hypotheses per pivot hypothesis.
    #[arg(long, value_name = "N", value_parser = positive)]
    m_target: Option<usize>,
    /// Beam size for pivot and target decoding.
    #[arg(long, value_name = "N", value_parser = positive)]
    beam: Option<usize>,
    /// Re-normalization exponent during fine-tuning.
    #[arg(long, value_name = "F", value_parser = positive_f64)]
    alpha_train: Option<f64>,
    /// Re-normalization exponent during decoding.
    #[arg(long, value_name = "F", value_parser = positive_f64)]
    alpha_decode: Option<f64>,
    /// Weight of the pivot loss.
    #[arg(long, value_name = "F", value_parser = non_negative_f64)]
    beta: Option<f64>,
    /// Weight of the target loss.
    #[arg(long, value_name = "F", value_parser = non_negative_f64)]
    gamma: Option<f64>,
}

#[derive(Debug, Args)]
struct StepArgs {
    #[command(flatten)]
    o: Overrides,
    /// Rerun even if the step's outputs exist.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct DecodeArgs {
    #[command(flatten)]
    o: Overrides,
    /// Source sentences, one per line (default: stdin).
    #[arg(long, value_name = "PATH")]
    input: Option<PathBuf>,
    /// JSONL output (default: stdout).
    #[arg(long, value_name = "PATH")]
    output: Option<PathBuf>,
    /// Pass pivot tokens to the pretrained pivot-target model instead of
    /// bridging distributions into the fine-tuned one.
    #[arg(long)]
    hard: bool,
}

#[derive(Debug, Args)]
struct AblateArgs {
    /// Experiment file. `--out` replaces its output prefix; the other
    /// overrides pin one grid axis (or the seed list) to a single value.
    #[command(flatten)]
    o: Overrides,
    /// Worker threads.
    #[arg(long, value_name = "N", default_value_t = 1, value_parser = positive)]
    jobs: usize,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Run directory.
    #[arg(long, value_name = "DIR", default_value = "run")]
    out: PathBuf,
}

fn correction_parser() -> impl TypedValueParser<Value = CorrectionMode> {
    PossibleValuesParser::new(CorrectionMode::ALL.map(|m| m.as_str())).map(|s| s.parse().expect("listed value"))
}

fn positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(n) => Ok(n),
        Err(e) => Err(e.to_string()),
    }
}

fn positive_f64(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(x) if x.is_finite() && x > 0.0 => Ok(x),
        Ok(_) => Err("must be a finite number > 0".into()),
        Err(e) => Err(e.to_string()),
    }
}

fn non_negative_f64(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(x) if x.is_finite() && x >= 0.0 => Ok(x),
        Ok(_) => Err("must be a finite number >= 0".into()),
        Err(e) => Err(e.to_string()),
    }
}

impl Overrides {
    fn out(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("run"))
    }

    /// `--config`, else the run directory's stored config, else defaults;
    /// then flag overrides.
    fn pipeline_config(&self) -> anyhow::Result<PipelineConfig> {
        let stored = self.out().join("config.toml");
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None if stored.exists() => PipelineConfig::load(&stored)?,
            None => PipelineConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        let bridge = &mut cfg.finetune.bridge;
        if let Some(c) = self.correction {
            bridge.correction = c;
        }
        if let Some(a) = self.alpha_train {
            bridge.alpha_train = a;
        }
        if let Some(a) = self.alpha_decode {
            bridge.alpha_decode = a;
        }
        if let Some(b) = self.beta {
            cfg.finetune.weights.beta = b;
        }
        if let Some(g) = self.gamma {
            cfg.finetune.weights.gamma = g;
        }
        if let Some(n) = self.n_pivot {
            cfg.decode.n_pivot = n;
        }
        if let Some(m) = self.m_target {
            cfg.decode.m_target = m;
        }
        if let Some(b) = self.beam {
            cfg.decode.pivot.beam_size = b;
            cfg.decode.target.beam_size = b;
        }
        cfg.validate()?;
        info!("config hash {:016x}, seed {}", cfg.hash(), cfg.seed);
        Ok(cfg)
    }

    fn experiment(&self) -> anyhow::Result<ExperimentSpec> {
        let Some(path) = &self.config else {
            bail!("ablate needs --config pointing at an experiment file");
        };
        let mut spec = ExperimentSpec::load(path)?;
        if let Some(o) = &self.out {
            spec.out = o.clone();
        }
        if let Some(s) = self.seed {
            spec.seeds = vec![s];
        }
        let g = &mut spec.grid;
        if let Some(v) = self.correction {
            g.correction = Some(vec![v]);
        }
        if let Some(v) = self.n_pivot {
            g.n_pivot = Some(vec![v]);
        }
        if let Some(v) = self.m_target {
            g.m_target = Some(vec![v]);
        }
        if let Some(v) = self.beam {
            g.beam = Some(vec![v]);
        }
        if let Some(v) = self.alpha_train {
            g.alpha_train = Some(vec![v]);
        }
        if let Some(v) = self.alpha_decode {
            g.alpha_decode = Some(vec![v]);
        }
        if let Some(v) = self.beta {
            g.beta = Some(vec![v]);
        }
        if let Some(v) = self.gamma {
            g.gamma = Some(vec![v]);
        }
        Ok(spec)
    }
}

fn run_steps(args: &StepArgs, steps: &[Step]) -> anyhow::Result<()> {
    let cfg = args.o.pipeline_config()?;
    let root = args.o.out();
    let stored = root.join("config.toml");
    if stored.exists() && !args.force {
        let old = PipelineConfig::load(&stored)?;
        if old.hash() != cfg.hash() {
            warn!(
                "config differs from {} (hash {:016x}); existing outputs are kept unless --force is given",
                stored.display(),
                old.hash()
            );
        }
    }
    let r = run_pipeline(&cfg, &root, steps, args.force)?;
    for s in &r.skipped {
        info!("{s}: skipped, outputs exist");
    }
    if let Some(e) = r.eval {
        if let Some(d) = e.direct {
            println!("direct   BLEU {:6.2}", d.bleu);
        }
        println!(
            "pivot    BLEU {:6.2}  inconsistency rate {:.4}",
            e.pivot.bleu, e.pivot.inconsistency_rate
        );
        println!(
            "cascade  BLEU {:6.2}  inconsistency rate {:.4}",
            e.cascade.bleu, e.cascade.inconsistency_rate
        );
    }
    Ok(())
}

fn read_vocab(paths: &ArtifactPaths, side: &str) -> anyhow::Result<Vocab> {
    let p = paths.vocab(side);
    Vocab::read(&p).with_context(|| format!("reading vocabulary {}", p.display()))
}

fn decode(args: &DecodeArgs) -> anyhow::Result<()> {
    let cfg = args.o.pipeline_config()?;
    let paths = ArtifactPaths::new(args.o.out());
    let (src_v, piv_v, tgt_v) = (
        read_vocab(&paths, "src")?,
        read_vocab(&paths, "piv")?,
        read_vocab(&paths, "tgt")?,
    );
    let cm = load_cascade(&paths, !args.hard)?;
    let input = if args.hard {
        PivotInput::Hard
    } else {
        PivotInput::Soft(&cfg.finetune.bridge)
    };
    let reader: Box<dyn BufRead> = match &args.input {
        Some(p) => Box::new(io::BufReader::new(
            fs::File::open(p).with_context(|| format!("opening {}", p.display()))?,
        )),
        None => Box::new(io::stdin().lock()),
    };
    let mut out: Box<dyn Write> = match &args.output {
        Some(p) => Box::new(BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    for line in reader.lines() {
        let line = line?;
        let r = cascade_decode(&cm, &src_v.encode_eos(&line), input, &cfg.decode)?;
        let best = r.best();
        let pivot = &r.pivots[best.pivot];
        let candidates: Vec<_> = r
            .candidates
            .iter()
            .map(|c| {
                json!({
                    "pivot": piv_v.decode(r.pivots[c.pivot].content()),
                    "translation": tgt_v.decode(c.target.content()),
                    "score": c.rank_score,
                })
            })
            .collect();
        let obj = json!({
            "source": line,
            "pivot": piv_v.decode(pivot.content()),
            "translation": tgt_v.decode(best.target.content()),
            "inconsistent_positions": detect_inconsistencies(&pivot.dist_seq),
            "candidates": candidates,
        });
        writeln!(out, "{obj}")?;
    }
    out.flush()?;
    Ok(())
}

fn run_ablate(args: &AblateArgs) -> anyhow::Result<()> {
    let spec = args.o.experiment()?;
    let base = ArtifactPaths::new(&spec.run_dir).config()?;
    info!(
        "config hash {:016x}, run seed {}, seeds {:?}",
        base.hash(),
        base.seed,
        spec.seeds
    );
    let table = ablate(&spec, args.jobs)?;
    print!("{}", table.to_text());
    info!("wrote {}", spec.out.with_extension("tsv").display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(a) => run_steps(&a, &[Step::GenData]),
        Command::Pretrain(a) => run_steps(&a, &[Step::Pretrain]),
        Command::PseudoPivot(a) => run_steps(&a, &[Step::PseudoPivot]),
        Command::Finetune(a) => run_steps(&a, &[Step::Finetune]),
        Command::Evaluate(a) => run_steps(&a, &[Step::Evaluate]),
        Command::Run(a) => run_steps(&a, &Step::ALL),
        Command::Decode(a) => decode(&a),
        Command::Ablate(a) => run_ablate(&a),
        Command::Report(a) => {
            if let Ok(cfg) = ArtifactPaths::new(&a.out).config() {
                info!("config hash {:016x}, seed {}", cfg.hash(), cfg.seed);
            }
            println!("{}", report(&a.out)?.display());
            Ok(())
        }
    }
}

/// Long flags accepted by the subcommand named in `argv`, or by the top level.
fn valid_flags(argv: &[String]) -> Vec<String> {
    let mut cmd = Cli::command();
    let name = argv.iter().skip(1).find(|a| !a.starts_with('-')).cloned();
    let sub = name.and_then(|n| cmd.find_subcommand_mut(&n).cloned()).unwrap_or(cmd);
    sub.get_arguments()
        .filter_map(|a| a.get_long())
        .map(|l| format!("--{l}"))
        .collect()
}

fn exit_on_usage_error(argv: &[String], e: clap::Error) -> ExitCode {
    let _ = e.print();
    if e.kind() == ErrorKind::UnknownArgument {
        eprintln!("\nvalid flags: {}", valid_flags(argv).join(", "));
    }
    // Help and version go to stdout and are not errors.
    ExitCode::from(if e.use_stderr() { 2 } else { 0 })
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => return exit_on_usage_error(&argv, e),
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
