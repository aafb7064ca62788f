//! Command-line interface. Exit codes: 0 ok, 1 other failure, 2 config,
//! 3 divergence, 4 digest mismatch.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::artifacts::{load_dataset, load_or_pretrain, load_policy, load_trained, run_dir, save_trained, write_file, ArtifactError, Stamp};
use crate::bench::{aggregate, report_csv, report_markdown, run_benchmark, summaries_jsonl, train_variant, BenchError, Lab, ReportRow, Trained, Variant};
use crate::config::{ConfigError, RunConfig};
use crate::models::ModelConfig;
use crate::params::ParamStore;
use crate::reward::SummaryBook;
use crate::rng::stream;
use crate::world::{make_dataset, write_dataset, Dataset, Manifest, Split, World};

#[derive(Debug, Parser)]
#[command(name = "plus-lab", version, about = "Summary-conditioned preference learning on synthetic worlds")]
pub struct Cli {
    /// Worker threads; only 1 is supported.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train, test-seen and test-ood splits with a manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one variant and write its checkpoints and curves.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        variant: Variant,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train or load every variant and seed, then write the report.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Trained runs are read from and written to this directory.
        #[arg(long)]
        artifacts: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<Variant>>,
        #[arg(long, value_delimiter = ',', value_parser = parse_split)]
        splits: Option<Vec<Split>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Fail instead of training a missing run.
        #[arg(long)]
        no_train: bool,
    },
    /// Write the greedy summary of every user in a split.
    Summarize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test-seen", value_parser = parse_split)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a report CSV as a mean ± std table.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed and the environment.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Where pretrained bases are cached; defaults to `cache/` beside the outputs.
    #[arg(long)]
    pub cache: Option<PathBuf>,
}

fn parse_split(s: &str) -> Result<Split, String> {
    Split::parse(s).ok_or_else(|| format!("unknown split {s:?}"))
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Diverged(String),
    #[error("{0}")]
    Digest(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Diverged(_) => 3,
            CliError::Digest(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<ArtifactError> for CliError {
    fn from(e: ArtifactError) -> Self {
        match e {
            ArtifactError::Digest { .. } => CliError::Digest(e.to_string()),
            e => CliError::Other(e.to_string()),
        }
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::Diverged { .. } => CliError::Diverged(e.to_string()),
            BenchError::Spec(_) => CliError::Usage(e.to_string()),
            e => CliError::Other(e.to_string()),
        }
    }
}

fn other(e: impl std::fmt::Display) -> CliError {
    CliError::Other(e.to_string())
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    Ok(match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

/// Dataset of `dir`, refusing one built over another vocabulary.
fn dataset_for(dir: &Path, world: &World) -> Result<(Manifest, Dataset), CliError> {
    let (manifest, data) = load_dataset(dir)?;
    if manifest.vocab_digest != world.vocab.digest() {
        return Err(CliError::Digest(format!(
            "dataset {} was generated over vocabulary {}, config gives {}",
            dir.display(),
            manifest.vocab_digest,
            world.vocab.digest()
        )));
    }
    Ok((manifest, data))
}

fn cache_dir(common: &Common, beside: &Path) -> PathBuf {
    common.cache.clone().unwrap_or_else(|| beside.join("cache"))
}

struct Prepared {
    cfg: RunConfig,
    world: World,
    model: ModelConfig,
    data: Dataset,
    base: ParamStore,
    stamp: Stamp,
}

fn prepare(common: &Common, data_dir: &Path, cache: &Path) -> Result<Prepared, CliError> {
    let cfg = load_config(common)?;
    let world = cfg.build_world()?;
    let model = cfg.model_for(&world);
    let (_, data) = dataset_for(data_dir, &world)?;
    let base = load_or_pretrain(cache, &world, &model, &cfg.pretrain)?;
    let stamp = Stamp::new(&cfg.digest(), &world);
    Ok(Prepared {
        cfg,
        world,
        model,
        data,
        base,
        stamp,
    })
}

impl Prepared {
    fn lab(&self) -> Lab<'_> {
        Lab {
            world: &self.world,
            data: &self.data,
            base: Some(&self.base),
            model: &self.model,
            rm: &self.cfg.rm,
            joint: &self.cfg.joint,
            vpl_variational: self.cfg.bench.vpl_variational,
        }
    }
}

pub fn gen_data(common: &Common, out: &Path) -> Result<String, CliError> {
    let cfg = load_config(common)?;
    let seed = cfg.resolve_seed(common.seed)?;
    let world = cfg.build_world()?;
    let data = make_dataset(&world, seed).map_err(other)?;
    let m = write_dataset(out, &world, &data, seed, &cfg.digest()).map_err(other)?;
    let mut msg = format!("wrote {} to {}", m.files.keys().cloned().collect::<Vec<_>>().join(", "), out.display());
    for (name, f) in &m.files {
        let _ = write!(msg, "\n  {name}: {} records, sha256 {}", f.records, f.sha256);
    }
    Ok(msg)
}

pub fn train(common: &Common, variant: Variant, data: &Path, out: &Path) -> Result<String, CliError> {
    let p = prepare(common, data, &cache_dir(common, out))?;
    let seed = p.cfg.resolve_seed(common.seed)?;
    let dir = run_dir(out, variant, seed);
    if load_trained(&dir, &p.stamp, &p.model, variant, seed, p.cfg.bench.vpl_variational)?.is_some() {
        return Ok(format!("{} already holds {variant} seed {seed} for this config", dir.display()));
    }
    let (trained, log) = train_variant(&p.lab(), variant, seed)?;
    save_trained(&dir, &p.stamp, variant, seed, &trained, &log)?;
    if let Some(it) = log.halted {
        return Err(CliError::Diverged(format!(
            "{variant} seed {seed} halted at iteration {it}; partial artifacts in {}",
            dir.display()
        )));
    }
    let mut msg = format!("trained {variant} seed {seed} into {}", dir.display());
    for split in [Split::TestSeen, Split::TestOod] {
        let s = trained.evaluate(&p.world, p.data.split(split))?;
        let _ = write!(msg, "\n  {} accuracy {:.3}", split.as_str(), s.accuracy);
    }
    Ok(msg)
}

#[allow(clippy::too_many_arguments)]
pub fn bench(
    common: &Common,
    data: &Path,
    artifacts: &Path,
    out: &Path,
    variants: Option<Vec<Variant>>,
    splits: Option<Vec<Split>>,
    seeds: Option<Vec<u64>>,
    no_train: bool,
) -> Result<String, CliError> {
    let p = prepare(common, data, &cache_dir(common, artifacts))?;
    let mut spec = p.cfg.bench.clone();
    spec.variants = variants.unwrap_or(spec.variants);
    spec.splits = splits.unwrap_or(spec.splits);
    spec.seeds = seeds.unwrap_or(spec.seeds);
    spec.validate()?;
    // Load everything up front so digest mismatches surface before any training.
    let mut ready: BTreeMap<(Variant, u64), Trained> = BTreeMap::new();
    for &v in &spec.variants {
        for &s in &spec.seeds {
            match load_trained(&run_dir(artifacts, v, s), &p.stamp, &p.model, v, s, spec.vpl_variational)? {
                Some(t) => {
                    ready.insert((v, s), t);
                }
                None if no_train => {
                    return Err(CliError::Usage(format!("no trained {v} seed {s} in {} and --no-train given", artifacts.display())));
                }
                None => {}
            }
        }
    }
    let mut saved = Ok(());
    let outcome = run_benchmark(
        &spec,
        &p.lab(),
        |v, s| Ok(ready.remove(&(v, s))),
        |v, s, t, log| {
            if saved.is_ok() {
                saved = save_trained(&run_dir(artifacts, v, s), &p.stamp, v, s, t, log).map(|_| ());
            }
            Ok(())
        },
    )?;
    saved?;
    write_file(&out.join("report.csv"), report_csv(&outcome.rows))?;
    let md = report_markdown(&outcome.aggregates);
    write_file(&out.join("report.md"), &md)?;
    let mut jsonl = String::new();
    for (seed, split, book) in &outcome.summaries {
        jsonl.push_str(&summaries_jsonl(&p.world.vocab, *seed, *split, book));
    }
    write_file(&out.join("summaries.jsonl"), jsonl)?;
    let mut wr = String::from("seed,wins,ties,losses,win_rate\n");
    for (seed, w) in &outcome.win_rates {
        let _ = writeln!(wr, "{seed},{},{},{},{:.6}", w.wins, w.ties, w.losses, w.rate());
    }
    write_file(&out.join("win_rate.csv"), wr)?;
    Ok(md)
}

pub fn summarize(common: &Common, checkpoint: &Path, data: &Path, split: Split, out: &Path) -> Result<String, CliError> {
    let cfg = load_config(common)?;
    let world = cfg.build_world()?;
    let model = cfg.model_for(&world);
    let (manifest, data) = load_dataset(data)?;
    let (policy, store) = load_policy(checkpoint, &model, &manifest.vocab_digest)?;
    let mut book = SummaryBook::new();
    for r in data.split(split) {
        if book.contains_key(&r.user_id()) {
            continue;
        }
        let z = policy.sample(&store, &r.context.tokens(), 0.0, &mut stream(0, &[])).map_err(other)?;
        book.insert(r.user_id(), z.content().to_vec());
    }
    let seed = cfg.resolve_seed(common.seed)?;
    write_file(out, summaries_jsonl(&world.vocab, seed, split, &book))?;
    Ok(format!("wrote {} summaries to {}", book.len(), out.display()))
}

fn parse_report(text: &str) -> Result<Vec<ReportRow>, CliError> {
    let bad = |n: usize, m: &str| CliError::Usage(format!("report line {n}: {m}"));
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 7 {
                return Err(bad(n + 1, "expected 7 columns"));
            }
            Ok(ReportRow {
                variant: f[0].parse().map_err(|e: String| bad(n + 1, &e))?,
                split: parse_split(f[1]).map_err(|e| bad(n + 1, &e))?,
                seed: f[2].parse().map_err(|_| bad(n + 1, "seed"))?,
                accuracy: f[3].parse().map_err(|_| bad(n + 1, "accuracy"))?,
                tie_rate: f[4].parse().map_err(|_| bad(n + 1, "tie_rate"))?,
                n_pairs: f[5].parse().map_err(|_| bad(n + 1, "n_pairs"))?,
                params_digest: f[6].to_string(),
            })
        })
        .collect()
}

pub fn report(input: &Path, out: Option<&Path>) -> Result<String, CliError> {
    let text = std::fs::read_to_string(input).map_err(|e| other(format!("{}: {e}", input.display())))?;
    let md = report_markdown(&aggregate(&parse_report(&text)?));
    if let Some(out) = out {
        write_file(out, &md)?;
    }
    Ok(md)
}

pub fn execute(cli: Cli) -> Result<String, CliError> {
    if cli.threads != 1 {
        return Err(CliError::Usage(format!("--threads {} requested; only single-threaded runs are supported", cli.threads)));
    }
    match cli.command {
        Command::GenData { common, out } => gen_data(&common, &out),
        Command::Train { common, variant, data, out } => train(&common, variant, &data, &out),
        Command::Bench {
            common,
            data,
            artifacts,
            out,
            variants,
            splits,
            seeds,
            no_train,
        } => bench(&common, &data, &artifacts, &out, variants, splits, seeds, no_train),
        Command::Summarize {
            common,
            checkpoint,
            data,
            split,
            out,
        } => summarize(&common, &checkpoint, &data, split, &out),
        Command::Report { input, out } => report(&input, out.as_deref()),
    }
}

/// Parses the process arguments, runs the command and maps failures to exit codes.
pub fn main() -> ExitCode {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(msg) => {
            use std::io::Write as _;
            let _ = writeln!(std::io::stdout(), "{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_round_trips_through_csv() {
        let rows = vec![ReportRow {
            variant: Variant::PlusUntrained,
            split: Split::TestOod,
            seed: 2,
            accuracy: 0.655,
            tie_rate: 0.0,
            n_pairs: 200,
            params_digest: "ab".into(),
        }];
        assert_eq!(parse_report(&report_csv(&rows)).unwrap(), rows);
        assert!(parse_report("h\nbtl,test-seen,0\n").is_err());
    }

    #[test]
    fn exit_codes_follow_the_contract() {
        assert_eq!(CliError::Config(ConfigError::Invalid("x".into())).exit_code(), 2);
        assert_eq!(CliError::Diverged("x".into()).exit_code(), 3);
        assert_eq!(CliError::Digest("x".into()).exit_code(), 4);
        let e: CliError = ArtifactError::Digest {
            what: "a".into(),
            expected: "b".into(),
            found: "c".into(),
        }
        .into();
        assert_eq!(e.exit_code(), 4);
    }

    #[test]
    fn more_than_one_thread_is_refused() {
        let cli = Cli::try_parse_from(["plus-lab", "--threads", "4", "report", "--input", "x"]).unwrap();
        assert_eq!(execute(cli).unwrap_err().exit_code(), 2);
    }
}
