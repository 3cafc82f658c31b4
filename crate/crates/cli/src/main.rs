use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fcheck::backend::{Embedder, HttpEmbedder, MockEmbedder};
use fcheck::corpus::{load_corpus, load_corpus_with_sidecar, sidecar_path, write_records, LabelScheme, Split};
use fcheck::metrics::{format_explanation_table, format_segment_table, format_subjective_table};
use fcheck::runner::{self, ExperimentConfig, Overrides, RunnerError};

#[derive(Parser)]
#[command(name = "fcheck", version, about = "Justification-based fact-checking experiments")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment config (TOML).
    #[arg(long, short, global = true, env = "FCHECK_CONFIG")]
    config: Option<PathBuf>,
    /// Endpoint for every http backend in the config.
    #[arg(long, global = true, env = "FCHECK_BACKEND_URL")]
    backend_url: Option<String>,
    #[arg(long, global = true)]
    parallelism: Option<usize>,
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    /// Directory holding run outputs; defaults to the config's output_dir.
    #[arg(long, global = true)]
    runs_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a corpus and print split sizes and evidence buckets.
    Ingest {
        corpus: PathBuf,
        /// liar-raw or raw-fc; read from the .scheme sidecar when omitted.
        #[arg(long)]
        scheme: Option<String>,
        /// Write the normalized corpus (and its sidecar) here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Classify evidence stance and write partitions.
    Stage1 {
        #[arg(long)]
        split: Option<Split>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Consolidate partitions into justifications.
    Stage2 {
        #[arg(long)]
        partitions: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the configured experiment.
    Run,
    /// Run the four justification ablations (TBE-3 only).
    Ablate,
    /// Metrics per evidence-count bucket for a finished run.
    Segment {
        run_id: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a run's explanations against gold explanations.
    ExplainEval {
        run_id: String,
        #[arg(long)]
        gold: PathBuf,
        /// Embedding model for the semantic score (served at FCHECK_EMBED_URL).
        #[arg(long, conflicts_with = "mock_embed")]
        embed_model: Option<String>,
        /// Use the offline hashed embedder for the semantic score.
        #[arg(long)]
        mock_embed: bool,
        /// Rate explanations with the config's judge backend.
        #[arg(long)]
        judge: bool,
    },
    /// Print the metrics table of a finished run.
    Report { run_id: String },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runner(RunnerError),
}

impl From<RunnerError> for CliError {
    fn from(e: RunnerError) -> Self {
        CliError::Runner(e)
    }
}

impl From<fcheck::corpus::CorpusError> for CliError {
    fn from(e: fcheck::corpus::CorpusError) -> Self {
        CliError::Runner(e.into())
    }
}

impl From<fcheck::backend::BackendError> for CliError {
    fn from(e: fcheck::backend::BackendError) -> Self {
        CliError::Runner(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runner(e) => e.exit_code() as u8,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Runner(e) => write!(f, "{e}"),
        }
    }
}

impl Global {
    fn load_config(&self) -> Result<ExperimentConfig, CliError> {
        let path = self
            .config
            .as_ref()
            .ok_or_else(|| CliError::Usage("--config is required for this command".into()))?;
        let mut config = ExperimentConfig::load(path)?;
        config.apply_overrides(&Overrides {
            backend_url: self.backend_url.clone(),
            parallelism: self.parallelism,
            cache_dir: self.cache_dir.clone(),
            output_dir: None,
        });
        config.validate()?;
        Ok(config)
    }

    fn runs_dir(&self) -> Result<PathBuf, CliError> {
        if let Some(dir) = &self.runs_dir {
            return Ok(dir.clone());
        }
        match &self.config {
            Some(_) => Ok(self.load_config()?.output_dir),
            None => Err(CliError::Usage("pass --runs-dir or --config".into())),
        }
    }
}

fn stage_run_id(config: &ExperimentConfig, corpus_digest: &str, pipeline: &fcheck::entail::Pipeline, verb: &str) -> Result<String, CliError> {
    let digest = config.digest(corpus_digest, &pipeline.templates)?;
    Ok(format!("{verb}-{}", &digest[..12]))
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let g = &cli.global;
    match cli.command {
        Command::Ingest {
            corpus,
            scheme,
            out,
            json,
        } => {
            let loaded = match &scheme {
                Some(name) => {
                    let s = LabelScheme::by_name(name)
                        .ok_or_else(|| CliError::Usage(format!("unknown scheme {name:?}")))?;
                    load_corpus(&corpus, &s)?
                }
                None => load_corpus_with_sidecar(&corpus)?,
            };
            if let Some(out) = out {
                write_records(&out, &loaded.records)?;
                std::fs::write(sidecar_path(&out), format!("{}\n", loaded.scheme.name())).map_err(|e| {
                    RunnerError::Io {
                        path: out.clone(),
                        reason: e.to_string(),
                    }
                })?;
            }
            let s = runner::ingest(&loaded);
            if json {
                println!("{}", serde_json::to_string_pretty(&s).expect("summary serializes"));
            } else {
                println!("{}  scheme {}  sha256 {}", s.path.display(), s.scheme, s.digest);
                println!("records {}  train {}  val {}  test {}", s.records, s.train, s.val, s.test);
                for (bucket, n) in &s.evidence_buckets {
                    println!("  evidences {bucket:>6}: {n}");
                }
            }
        }
        Command::Stage1 { split, out } => {
            let config = g.load_config()?;
            let corpus = config.load_corpus()?;
            let pipeline = config.build_pipeline()?;
            let run_id = stage_run_id(&config, &corpus.provenance.digest, &pipeline, "stage1")?;
            let n = runner::run_stage1(&config, &corpus, &pipeline, split, &out, &run_id)?;
            println!("{n} partitions -> {}", out.display());
        }
        Command::Stage2 { partitions, out } => {
            let config = g.load_config()?;
            let corpus = config.load_corpus()?;
            let pipeline = config.build_pipeline()?;
            let run_id = stage_run_id(&config, &corpus.provenance.digest, &pipeline, "stage2")?;
            let n = runner::run_stage2(&config, &corpus, &pipeline, &partitions, &out, &run_id)?;
            println!("{n} justification pairs -> {}", out.display());
        }
        Command::Run => {
            let config = g.load_config()?;
            let manifest = runner::run_experiment(&config)?;
            print!("{}", runner::report(&config.output_dir, &manifest.run_id)?);
            println!("run dir: {}", config.output_dir.join(&manifest.run_id).display());
        }
        Command::Ablate => {
            let config = g.load_config()?;
            let suite = runner::run_ablation_suite(&config)?;
            print!("{}", suite.table);
            for m in &suite.manifests {
                println!("{}  {}", m.ablation, m.run_id);
            }
        }
        Command::Segment { run_id, seed } => {
            let report = runner::run_segmentation(&g.runs_dir()?, &run_id, seed)?;
            print!("{}", format_segment_table(&report));
        }
        Command::ExplainEval {
            run_id,
            gold,
            embed_model,
            mock_embed,
            judge,
        } => {
            let runs_dir = g.runs_dir()?;
            let embedder: Option<Box<dyn Embedder>> = match (embed_model, mock_embed) {
                (Some(model), _) => Some(Box::new(HttpEmbedder::from_env("http-embed", model)?)),
                (None, true) => Some(Box::new(MockEmbedder::new("mock-embed", 256))),
                (None, false) => None,
            };
            let judge = if judge { Some(g.load_config()?.build_judge()?) } else { None };
            let eval = runner::run_explanation_eval(&runs_dir, &run_id, &gold, embedder.as_deref(), judge.as_ref())?;
            println!("{} explanations", eval.n);
            print!("{}", format_explanation_table(&[(run_id.clone(), &eval.scores)]));
            if let Some(s) = &eval.subjective {
                print!("{}", format_subjective_table(s));
            }
        }
        Command::Report { run_id } => {
            print!("{}", runner::report(&g.runs_dir()?, &run_id)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            log::debug!("exit code {}", e.exit_code());
            ExitCode::from(e.exit_code())
        }
    }
}
