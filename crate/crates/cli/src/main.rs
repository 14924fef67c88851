use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use codemill::budget::{BudgeterMode, TokenBudgeter};
use codemill::decontam::{filter_corpus, load_test_sets, NGramIndex, DEFAULT_N};
use codemill::document::{Domain, RepoBundle, SourceDocument};
use codemill::filter::{run_cascade, CascadeConfig};
use codemill::fim::{build_file_fim, SpanPolicy};
use codemill::gate::{gate_instruction_corpus, ExternalScores, GatePolicy, InstructionSample};
use codemill::ingest::{ingest_directory, IngestOptions, RepoNaming};
use codemill::jsonl;
use codemill::mixture::{mixture_report, parse_targets, plan_mixture_with, sample_interleaved, DEFAULT_MAX_EPOCHS};
use codemill::needle::{generate_grid, results_csv, score_response, NeedleInstance, NeedleResult, NeedleSpec};
use codemill::pack::{order_files, pack_repo, pack_repo_fim_last, FileOrder, REPO_STAGE_BUDGET};
use codemill::pipeline::{self, PipelineConfig, RunReport};
use codemill::sentinel::{contains_sentinel, END_OF_TEXT};

#[derive(Parser)]
#[command(name = "codemill", version, about = "Code pretraining data pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Walk a directory tree into a document manifest.
    Ingest {
        input: PathBuf,
        #[arg(long, default_value = "code")]
        domain: Domain,
        /// One repository with this name instead of one per top-level directory.
        #[arg(long)]
        repo: Option<String>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Run the quality cascade over a manifest.
    Filter {
        input: PathBuf,
        /// Cascade TOML; defaults to a single stage of the built-in rules.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        budget: BudgetArgs,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long)]
        drops: Option<PathBuf>,
    },
    /// Remove documents sharing a word n-gram with any test set.
    Decontam {
        input: PathBuf,
        #[arg(long)]
        tests: PathBuf,
        #[arg(long, default_value_t = DEFAULT_N)]
        n: usize,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long)]
        removals: Option<PathBuf>,
    },
    /// Build file-level fill-in-the-middle samples.
    Fim {
        input: PathBuf,
        #[command(flatten)]
        fim: FimArgs,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Pack repositories into long-context sequences.
    Pack {
        input: PathBuf,
        #[arg(long, default_value_t = REPO_STAGE_BUDGET)]
        budget: usize,
        /// path-lex or dependency-first.
        #[arg(long, default_value = "path-lex", value_parser = parse_serde::<FileOrder>)]
        order: FileOrder,
        /// Rewrite the last file of each sequence into FIM form.
        #[arg(long)]
        fim_last: bool,
        #[command(flatten)]
        fim: FimArgs,
        #[command(flatten)]
        budget_args: BudgetArgs,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Interleave domains to target token ratios.
    Mix {
        /// Manifests of documents; each keeps its own domain.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "code=0.7,text=0.2,math=0.1")]
        targets: String,
        #[arg(long, default_value_t = DEFAULT_MAX_EPOCHS)]
        max_epochs: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        budget: BudgetArgs,
        /// Index of emitted units.
        #[arg(long, short)]
        out: PathBuf,
        /// Concatenated text of the emitted units.
        #[arg(long)]
        text: Option<PathBuf>,
    },
    /// Gate an instruction corpus on code presence, parseability and checklist score.
    Gate {
        input: PathBuf,
        /// JSON-Lines of judgment scores.
        #[arg(long)]
        scores: Option<PathBuf>,
        /// Policy TOML.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long)]
        drops: Option<PathBuf>,
    },
    /// Build or score long-context retrieval probes.
    #[command(subcommand)]
    Needle(NeedleCommand),
    /// Run the configured pipeline end to end.
    Run {
        config: PathBuf,
        /// Overrides the worker count from the config and environment.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Print the report of a finished run.
    Report {
        /// Output root of a run.
        output: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Subcommand)]
enum NeedleCommand {
    /// Generate a depth by length grid of instances.
    Gen {
        /// Manifest supplying the haystack files.
        corpus: PathBuf,
        #[arg(long)]
        needle: PathBuf,
        #[arg(long, default_value = "python")]
        language: String,
        #[arg(long, value_delimiter = ',', default_values_t = codemill::needle::default_depths())]
        depths: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = codemill::needle::DEFAULT_LENGTHS)]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        budget: BudgetArgs,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Score model responses against generated instances.
    Score {
        instances: PathBuf,
        /// JSON-Lines of `{instance_id, response}`.
        #[arg(long)]
        responses: PathBuf,
        /// CSV output; stdout when absent.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct BudgetArgs {
    /// whitespace-word or byte-quarter.
    #[arg(long = "budgeter", default_value = "whitespace-word", value_parser = parse_serde::<BudgeterMode>)]
    mode: BudgeterMode,
}

#[derive(Args)]
struct FimArgs {
    #[arg(long, default_value_t = SpanPolicy::default().fim_rate)]
    rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Languages whose middles come from syntax-tree blocks.
    #[arg(long, value_delimiter = ',')]
    ast_langs: Vec<String>,
}

impl FimArgs {
    fn policy(&self) -> SpanPolicy {
        SpanPolicy { fim_rate: self.rate, seed: self.seed, ..SpanPolicy::default() }
    }
}

fn parse_serde<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn read_docs(path: &Path) -> Result<Vec<SourceDocument>> {
    jsonl::read(path).with_context(|| format!("reading {}", path.display()))
}

fn write_lines<T: serde::Serialize>(path: &Path, items: &[T]) -> Result<()> {
    jsonl::write(path, items).with_context(|| format!("writing {}", path.display()))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Ingest { input, domain, repo, out } => {
            let mut opts = IngestOptions::new(domain);
            if let Some(r) = repo {
                opts.repos = RepoNaming::Single(r);
            }
            let docs = ingest_directory(&input, &opts)?;
            log::info!("ingested {} files", docs.len());
            write_lines(&out, &docs)?;
        }
        Command::Filter { input, config, budget, out, drops } => {
            let (cfg, base) = match &config {
                Some(p) => (CascadeConfig::from_toml(&fs::read_to_string(p)?)?, p.parent().unwrap_or(Path::new("")).to_path_buf()),
                None => (CascadeConfig::default(), PathBuf::new()),
            };
            let cascade = cfg.build(&base)?;
            let result = run_cascade(read_docs(&input)?, &cascade, &TokenBudgeter::from(budget.mode));
            log::info!("kept {}, {} stage failures", result.kept.len(), result.drops.len());
            write_lines(&out, &result.kept)?;
            if let Some(p) = drops {
                write_lines(&p, &result.drops)?;
            }
        }
        Command::Decontam { input, tests, n, out, removals } => {
            if n == 0 {
                bail!("--n must be at least 1");
            }
            let sets = load_test_sets(&tests)?;
            let index = NGramIndex::build(n, sets.iter().map(|(b, t)| (b.as_str(), t.as_str())));
            let (clean, log) = filter_corpus(read_docs(&input)?, &index);
            log::info!("removed {} documents", log.len());
            write_lines(&out, &clean)?;
            if let Some(p) = removals {
                write_lines(&p, &log)?;
            }
        }
        Command::Fim { input, fim, out } => {
            let ast = fim.ast_langs.iter().cloned().collect();
            let docs: Vec<_> = read_docs(&input)?.into_iter().filter(|d| d.domain == Domain::Code).collect();
            let (records, drops) = build_file_fim(&docs, &fim.policy(), &ast)?;
            log::info!("{} samples, {} dropped", records.len(), drops.len());
            write_lines(&out, &records)?;
        }
        Command::Pack { input, budget, order, fim_last, fim, budget_args, out } => {
            let budgeter = TokenBudgeter::from(budget_args.mode);
            let docs: Vec<_> = read_docs(&input)?.into_iter().filter(|d| d.domain == Domain::Code).collect();
            let mut sequences = Vec::new();
            for bundle in RepoBundle::group(docs)? {
                let ordered = order_files(&bundle, order);
                let packed = if fim_last {
                    pack_repo_fim_last(&ordered, budget, &budgeter, &fim.policy())?
                } else {
                    pack_repo(&ordered, budget, &budgeter)?
                };
                for w in &packed.warnings {
                    log::warn!("{}/{}: {}", w.repo, w.path, w.reason);
                }
                sequences.extend(packed.sequences);
            }
            write_lines(&out, &sequences)?;
        }
        Command::Mix { inputs, targets, max_epochs, seed, budget, out, text } => {
            let budgeter = TokenBudgeter::from(budget.mode);
            let targets = parse_targets(&targets)?;
            let mut streams: BTreeMap<Domain, Vec<(String, String, u64)>> = BTreeMap::new();
            for path in &inputs {
                for d in read_docs(path)? {
                    if contains_sentinel(&d.content) {
                        log::warn!("skipping {} (sentinel collision)", d.doc_id);
                        continue;
                    }
                    let unit = format!("{}{END_OF_TEXT}", d.content);
                    let tokens = budgeter.count(&unit) as u64;
                    streams.entry(d.domain).or_default().push((d.doc_id, unit, tokens));
                }
            }
            let available = streams.iter().map(|(d, s)| (*d, s.iter().map(|u| u.2).sum())).collect();
            let plan = plan_mixture_with(&available, &targets, max_epochs)?;
            let emissions = sample_interleaved(&streams, &plan, seed, |u| u.2)?;
            let index: Vec<_> = emissions
                .iter()
                .map(|e| serde_json::json!({ "domain": e.domain, "doc_id": streams[&e.domain][e.index].0, "pass": e.pass, "tokens": e.tokens }))
                .collect();
            write_lines(&out, &index)?;
            if let Some(p) = text {
                let body: String = emissions.iter().map(|e| streams[&e.domain][e.index].1.as_str()).collect();
                fs::write(p, body)?;
            }
            println!("{}", serde_json::to_string_pretty(&mixture_report(&plan, &emissions))?);
        }
        Command::Gate { input, scores, policy, out, drops } => {
            let policy: GatePolicy = match policy {
                Some(p) => toml::from_str(&fs::read_to_string(&p)?)?,
                None => GatePolicy::default(),
            };
            let external = match scores {
                Some(p) => ExternalScores::load(&p).map_err(|e| anyhow::anyhow!(e))?,
                None => ExternalScores::default(),
            };
            let samples: Vec<InstructionSample> = jsonl::read(&input)?;
            let result = gate_instruction_corpus(&samples, &policy, &external)?;
            log::info!("kept {} of {}", result.kept.len(), samples.len());
            write_lines(&out, &result.kept)?;
            if let Some(p) = drops {
                write_lines(&p, &result.drops)?;
            }
        }
        Command::Needle(NeedleCommand::Gen { corpus, needle, language, depths, lengths, seed, budget, out }) => {
            let files: Vec<(String, String)> = read_docs(&corpus)?
                .into_iter()
                .filter(|d| d.domain == Domain::Code)
                .map(|d| (format!("{}/{}", d.repo, d.path), d.content))
                .collect();
            let source = fs::read_to_string(&needle)?;
            let template = NeedleSpec { seed, ..NeedleSpec::new(&source, &language, 0.0, 1) };
            let grid = generate_grid(&files, &depths, &lengths, &template, &TokenBudgeter::from(budget.mode))?;
            write_lines(&out, &grid)?;
        }
        Command::Needle(NeedleCommand::Score { instances, responses, out }) => {
            let instances: Vec<NeedleInstance> = jsonl::read(&instances)?;
            let responses: Vec<serde_json::Value> = jsonl::read(&responses)?;
            let by_id: BTreeMap<&str, &str> = responses
                .iter()
                .filter_map(|r| Some((r.get("instance_id")?.as_str()?, r.get("response")?.as_str()?)))
                .collect();
            let rows: Vec<NeedleResult> = instances
                .iter()
                .map(|i| NeedleResult {
                    depth: i.depth,
                    length: i.length,
                    score: by_id.get(i.instance_id.as_str()).map_or(0, |r| score_response(i, r)),
                })
                .collect();
            let csv = results_csv(&rows);
            match out {
                Some(p) => fs::write(p, csv)?,
                None => print!("{csv}"),
            }
        }
        Command::Run { config, workers } => {
            let (cfg, base) = PipelineConfig::load(&config)?;
            let workers = workers.or_else(|| pipeline::worker_count(&cfg));
            let report = pipeline::run_with_workers(&cfg, &base, workers)?;
            print!("{}", report.to_human());
        }
        Command::Report { output, json } => {
            let report = RunReport::load(&output).with_context(|| format!("no report under {}", output.display()))?;
            if json {
                print!("{}", report.to_json());
            } else {
                print!("{}", report.to_human());
            }
        }
    }
    Ok(())
}
