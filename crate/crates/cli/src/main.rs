//! Command-line front end for vocabulary expansion experiments.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lexpand::bpe::Tokenizer;
use lexpand::candidates::split_words;
use lexpand::corpus::{read_lines, ParallelCorpus, DEFAULT_REFERENCE};
use lexpand::detok::TraceSet;
use lexpand::metrics::{analyze, perversity_audit};
use lexpand::pipeline::{
    emit_report, pareto_front, read_ledger, run_experiment, run_init, run_selection, ExperimentConfig,
};
use lexpand::{Error, Result};

const EXIT_INPUT: u8 = 1;
const EXIT_VALIDATION: u8 = 2;

#[derive(Parser)]
#[command(name = "lexpand", version, about = "Vocabulary expansion toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Directory for cached mapper fits.
    #[arg(long, env = "LEXPAND_CACHE_DIR")]
    cache_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Token and character ratios of each language against the reference.
    AnalyzeFragmentation {
        #[arg(long)]
        tokenizer: PathBuf,
        /// Parallel corpus directory or `lang<TAB>index<TAB>text` file.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = DEFAULT_REFERENCE)]
        reference: String,
        #[arg(long, default_value = "train")]
        split: String,
        /// Restrict to these languages (repeatable).
        #[arg(long = "lang")]
        langs: Vec<String>,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Choose expansion items and write the expanded tokenizer.
    Select(ConfigArgs),
    /// Select, then initialize and assemble the expanded embeddings.
    InitEmbeddings(ConfigArgs),
    /// Full experiment: select, initialize, measure and record.
    Run(ConfigArgs),
    /// Pareto front over a results ledger.
    Pareto {
        #[arg(long)]
        ledger: PathBuf,
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        svg: PathBuf,
    },
    /// Words the expanded tokenizer encodes into more tokens.
    AuditPerversity {
        #[arg(long)]
        original: PathBuf,
        #[arg(long)]
        expanded: PathBuf,
        /// Text file; every word in it is audited.
        #[arg(long)]
        words: PathBuf,
    },
    /// Check a trace file and its sidecar.
    ValidateTraces {
        #[arg(long)]
        trace: PathBuf,
        /// Also check each record's token ids against this tokenizer.
        #[arg(long)]
        tokenizer: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_INPUT) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { EXIT_VALIDATION } else { EXIT_INPUT })
        }
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::AnalyzeFragmentation {
            tokenizer,
            corpus,
            reference,
            split,
            langs,
            csv,
            json,
        } => {
            let tok = Tokenizer::load(&tokenizer)?;
            let corpus = ParallelCorpus::load(&corpus, &reference, &split)?;
            let report = analyze(&tok, &corpus, (!langs.is_empty()).then_some(langs.as_slice()))?;
            if let Some(p) = &csv {
                report.write_csv(p)?;
            }
            if let Some(p) = &json {
                report.write_json(p)?;
            }
            if csv.is_none() && json.is_none() {
                print!("{}", report.to_csv());
            }
        }
        Command::Select(args) => {
            let cfg = ExperimentConfig::load(&args.config)?;
            let plan = run_selection(&cfg)?;
            println!("selected {} items into {}", plan.items.len(), cfg.output_dir.display());
        }
        Command::InitEmbeddings(args) => {
            let cfg = ExperimentConfig::load(&args.config)?;
            let (plan, e, _) = run_init(&cfg, args.cache_dir.as_deref())?;
            println!(
                "initialized {} items; expanded matrices have {} rows",
                plan.items.len(),
                e.rows()
            );
        }
        Command::Run(args) => {
            let cfg = ExperimentConfig::load(&args.config)?;
            let out = run_experiment(&cfg, args.cache_dir.as_deref())?;
            println!("{}", serde_json::to_string(&out.row).expect("json"));
        }
        Command::Pareto { ledger, csv, svg } => {
            let rows = read_ledger(&ledger)?;
            let front = pareto_front(&rows)?;
            emit_report(&rows, &front, &csv, &svg)?;
            println!("{} of {} rows on the front", front.len(), rows.len());
        }
        Command::AuditPerversity {
            original,
            expanded,
            words,
        } => {
            let orig = Tokenizer::load(&original)?;
            let exp = Tokenizer::load(&expanded)?;
            let lines = read_lines(&words)?;
            let mut list: Vec<&str> = lines.iter().flat_map(|l| split_words(l)).collect();
            list.sort_unstable();
            list.dedup();
            let flagged = perversity_audit(&orig, &exp, &list)?;
            for w in &flagged {
                println!("{}", serde_json::to_string(w).expect("json"));
            }
            log::info!("{} of {} words encode longer", flagged.len(), list.len());
        }
        Command::ValidateTraces { trace, tokenizer } => validate_traces(&trace, tokenizer.as_deref())?,
    }
    Ok(())
}

fn validate_traces(trace: &Path, tokenizer: Option<&Path>) -> Result<()> {
    let traces = TraceSet::load(trace)?;
    if let Some(p) = tokenizer {
        let tok = Tokenizer::load(p)?;
        for r in traces.records() {
            let ids = tok.encode(&r.word)?;
            if ids != r.token_ids {
                return Err(Error::Consistency(format!(
                    "{}: {:?} has token ids {:?} but the tokenizer gives {:?}",
                    trace.display(),
                    r.word,
                    r.token_ids,
                    ids
                )));
            }
        }
    }
    let warnings = traces.validate();
    for w in &warnings {
        println!("warning: {w}");
    }
    println!("{} records, {} warnings", traces.records().len(), warnings.len());
    Ok(())
}
