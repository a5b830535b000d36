use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use prix_core::classifier::{self, init_model, MlpArchitecture, TrainConfig, Variant};
use prix_core::evaluation::{self, Granularity, LooConfig};
use prix_core::expectation::{build_expectation_table, ExpectationTable};
use prix_core::features::{self, fit_feature_spec, FeatureSpec, PruneRules};
use prix_core::ingest::Collection;
use prix_core::pipeline::{self, PipelineConfig};
use prix_core::seed;
use prix_core::synth::{self, SynthConfig};

/// Classify multi-page handwritten documents from probabilistic indexes.
#[derive(Debug, Parser)]
#[command(name = "prix-classify", version, about)]
struct Cli {
    /// Worker threads (defaults to PRIX_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log verbosity: -v info, -vv debug.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse index files, join them with a manifest and save the collection.
    Ingest {
        /// Index files or glob patterns.
        #[arg(long, required = true, num_args = 1..)]
        index: Vec<String>,
        #[arg(long)]
        manifest: PathBuf,
        /// Fail on pages listed in the manifest but absent from the index.
        #[arg(long)]
        strict: bool,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Compute the expectation table of a collection.
    Expectations {
        #[arg(long)]
        collection: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Fit vocabulary, idf and standardizer on the whole collection.
    Features {
        #[arg(long)]
        expectations: PathBuf,
        #[arg(long, default_value_t = 1024)]
        n: usize,
        #[command(flatten)]
        rules: RuleArgs,
        #[arg(long, short)]
        out: PathBuf,
        /// Also write standardized document vectors as TSV.
        #[arg(long)]
        vectors_out: Option<PathBuf>,
    },
    /// Train one classifier on every document.
    Train {
        #[arg(long)]
        expectations: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value = "mlp1")]
        arch: Variant,
        #[command(flatten)]
        training: TrainArgs,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Leave-one-out evaluation; writes the report directory.
    Loo {
        /// Expectation table (or a collection, which is indexed first).
        #[arg(long, alias = "collection")]
        expectations: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "document")]
        granularity: Vec<GranularityArg>,
        /// Comma-separated sizes; `a..bxk` expands to a, a*k, ... up to b.
        #[arg(long, default_value = "8..16384x2", value_parser = parse_n_grid)]
        n_grid: NGrid,
        #[arg(long, value_delimiter = ',', default_value = "mlp0,mlp1,mlp2")]
        arch: Vec<Variant>,
        #[command(flatten)]
        rules: RuleArgs,
        #[command(flatten)]
        training: TrainArgs,
        /// Page folds also drop the held-out page's document.
        #[arg(long)]
        fold_by_document: bool,
        /// Fit the standardizer with the held-out unit included.
        #[arg(long)]
        frozen_standardizer: bool,
        #[arg(long, alias = "out")]
        out_dir: PathBuf,
    },
    /// Rewrite report files from saved leave-one-out results.
    Report {
        #[arg(long)]
        results: PathBuf,
        #[arg(long, alias = "out")]
        out_dir: PathBuf,
    },
    /// Generate a synthetic collection.
    Synth {
        /// TOML config; defaults to a small three-class corpus.
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// Built-in config: `small` or `table1`.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, alias = "out")]
        out_dir: PathBuf,
    },
    /// Run the whole pipeline from a TOML config.
    RunAll {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, alias = "out")]
        out_dir: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum GranularityArg {
    #[value(alias = "doc")]
    Document,
    Page,
    #[value(alias = "page-vote")]
    PageVoted,
}

#[derive(Debug, Clone)]
struct NGrid(Vec<usize>);

fn parse_n_grid(text: &str) -> std::result::Result<NGrid, String> {
    let mut grid = Vec::new();
    for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if let Some((start, rest)) = item.split_once("..") {
            let (end, factor) = rest.split_once('x').unwrap_or((rest, "2"));
            let parse = |s: &str| s.trim().parse::<usize>().map_err(|e| format!("`{item}`: {e}"));
            let (mut n, end, factor) = (parse(start)?, parse(end)?, parse(factor)?);
            if n == 0 || factor < 2 {
                return Err(format!("`{item}`: start must be positive and factor at least 2"));
            }
            while n <= end {
                grid.push(n);
                n *= factor;
            }
        } else {
            grid.push(item.parse().map_err(|e| format!("`{item}`: {e}"))?);
        }
    }
    if grid.is_empty() {
        return Err("empty n grid".to_string());
    }
    Ok(NGrid(grid))
}

impl From<GranularityArg> for Granularity {
    fn from(g: GranularityArg) -> Self {
        match g {
            GranularityArg::Document => Granularity::Document,
            GranularityArg::Page => Granularity::Page,
            GranularityArg::PageVoted => Granularity::PageVoted,
        }
    }
}

#[derive(Debug, Args)]
struct RuleArgs {
    #[arg(long, default_value_t = features::DEFAULT_MIN_CHARS)]
    min_chars: usize,
    #[arg(long, default_value_t = features::DEFAULT_MIN_DOC_FREQ)]
    min_doc_freq: f64,
}

impl RuleArgs {
    fn rules(&self) -> PruneRules {
        PruneRules {
            min_chars: self.min_chars,
            min_doc_freq: self.min_doc_freq,
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 0.01)]
    learning_rate: f64,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = classifier::DEFAULT_HIDDEN_WIDTH)]
    hidden_width: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn load_table(path: &Path) -> Result<ExpectationTable> {
    ExpectationTable::load(path).with_context(|| format!("loading expectations {}", path.display()))
}

/// Accepts either a saved expectation table or a saved collection.
fn load_table_or_collection(path: &Path) -> Result<ExpectationTable> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(table) = ExpectationTable::from_json(&text) {
        return Ok(table);
    }
    let collection = Collection::from_json(&text)
        .with_context(|| format!("{} is neither an expectation table nor a collection", path.display()))?;
    Ok(build_expectation_table(&collection))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest {
            index,
            manifest,
            strict,
            out,
        } => {
            let collection = pipeline::ingest_stage(&index, &manifest, strict)?;
            collection.save(&out)?;
            eprintln!(
                "{} documents, {} pages, {} spots, {} classes",
                collection.num_documents(),
                collection.num_pages(),
                collection.num_records(),
                collection.num_classes()
            );
        }
        Command::Expectations { collection, out } => {
            let collection = Collection::load(&collection)
                .with_context(|| format!("loading collection {}", collection.display()))?;
            let table = build_expectation_table(&collection);
            table.save(&out)?;
            print!("{}", table.summary());
        }
        Command::Features {
            expectations,
            n,
            rules,
            out,
            vectors_out,
        } => {
            let table = load_table(&expectations)?;
            let (spec, vectors) = fit_feature_spec(&table, rules.rules(), n)?;
            spec.save(&out)?;
            if let Some(path) = vectors_out {
                std::fs::write(&path, pipeline::vectors_tsv(&vectors, table.classes()))
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            eprintln!("{} features", spec.vocabulary.len());
        }
        Command::Train {
            expectations,
            spec,
            arch,
            training,
            out,
        } => {
            let table = load_table(&expectations)?;
            let spec = FeatureSpec::load(&spec)?;
            let data: Vec<(Vec<f64>, usize)> = table
                .docs()
                .iter()
                .map(|d| (spec.vectorize(&table, &d.total), d.class))
                .collect();
            let seed = seed::derive(training.seed, "train");
            let architecture = MlpArchitecture::new(arch, spec.vocabulary.len(), table.num_classes())
                .with_hidden_width(training.hidden_width);
            let config = TrainConfig {
                learning_rate: training.learning_rate,
                epochs: training.epochs,
                batch_size: training.batch_size,
                seed,
            };
            let run = classifier::train(init_model(architecture, seed), &data, &config)?;
            run.model.save(&out)?;
            if let Some(loss) = run.loss_curve.last() {
                eprintln!("final training loss {loss:.6}");
            }
        }
        Command::Loo {
            expectations,
            granularity,
            n_grid,
            arch,
            rules,
            training,
            fold_by_document,
            frozen_standardizer,
            out_dir,
        } => {
            let table = load_table_or_collection(&expectations)?;
            let config = LooConfig {
                n_grid: n_grid.0,
                archs: arch,
                rules: rules.rules(),
                learning_rate: training.learning_rate,
                epochs: training.epochs,
                batch_size: training.batch_size,
                hidden_width: training.hidden_width,
                seed: training.seed,
                fold_by_document,
                frozen_standardizer,
            };
            let granularities: Vec<Granularity> = granularity.into_iter().map(Into::into).collect();
            let results = pipeline::run_loo(&table, &config, &granularities)?;
            evaluation::write_report(&results, table.classes(), &out_dir)?;
            print_results(&results);
        }
        Command::Report { results, out_dir } => {
            let bundle = evaluation::load_results(&results)?;
            evaluation::write_report(&bundle.results, &bundle.classes, &out_dir)?;
            print_results(&bundle.results);
        }
        Command::Synth {
            config,
            preset,
            seed,
            out_dir,
        } => {
            let mut synth_config = match (config, preset.as_deref()) {
                (Some(path), _) => SynthConfig::load(&path)?,
                (None, None | Some("small")) => SynthConfig::default(),
                (None, Some("table1")) => SynthConfig::table1_like(),
                (None, Some(other)) => bail!("unknown preset `{other}` (expected small or table1)"),
            };
            if let Some(s) = seed {
                synth_config.seed = s;
            }
            let corpus = synth::generate(&synth_config)?;
            let files = corpus.write(&out_dir)?;
            eprintln!(
                "{} documents, {} pages -> {}",
                corpus.manifest.num_documents(),
                corpus.pages.len(),
                files.index.parent().unwrap_or(Path::new(".")).display()
            );
        }
        Command::RunAll { config, out_dir } => {
            let mut config = PipelineConfig::load(&config)?;
            if cli.threads.is_some() {
                config.threads = cli.threads;
            }
            let summary = pipeline::run_all(&config, &out_dir)?;
            print_results(&summary.results);
        }
    }
    Ok(())
}

fn print_results(results: &[evaluation::LooResult]) {
    println!("granularity\tarch\tn\terror_rate\tci95_halfwidth\tunits");
    for r in results {
        println!(
            "{}\t{}\t{}\t{:.4}\t{:.4}\t{}",
            r.granularity,
            r.arch,
            r.n,
            r.error_rate,
            r.ci95_halfwidth,
            r.predictions.len()
        );
    }
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
    let threads = pipeline::resolve_threads(cli.threads);
    let is_run_all = matches!(cli.command, Command::RunAll { .. });
    if let (Some(n), false) = (threads, is_run_all) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn n_grid_ranges() {
        assert_eq!(parse_n_grid("8..64x2").unwrap().0, vec![8, 16, 32, 64]);
        assert_eq!(parse_n_grid("8..16384x2").unwrap().0.len(), 12);
        assert_eq!(parse_n_grid("5, 10,3..27x3").unwrap().0, vec![5, 10, 3, 9, 27]);
        assert!(parse_n_grid("0..8").is_err());
        assert!(parse_n_grid("a").is_err());
        assert!(parse_n_grid("").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
