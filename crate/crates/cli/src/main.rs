//! `disflow`: curate, split, train, sample, discretize and evaluate
//! disordered crystal datasets.

mod config;
mod plot;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use disflow::crystal::{pad_to_order, DisorderedCrystal};
use disflow::data::cif::{parse_cif, CifOptions};
use disflow::data::{augment_ordered, read_jsonl, split, write_jsonl, Record, Split};
use disflow::discretize::{discretize_crystal, DiscretizeConfig};
use disflow::metrics::{
    density, evaluate_generation, n_el, structure_match, EvalReport, GenerationEval, MatchTolerances,
};
use disflow::net::checkpoint::Checkpoint;
use disflow::sampler::{sample_batch, sample_conditioned, Condition, Sample, SamplerConfig, SizeSampler};
use disflow::selftest;
use disflow::training::{train_with, TaskMode, TrainingConfig};

const SEED_ENV: &str = "DISFLOW_SEED";

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Data(_) => 3,
            Failure::Numerical(_) => 4,
        }
    }

    fn line(&self) -> String {
        let (kind, msg) = match self {
            Failure::Usage(m) => ("usage", m),
            Failure::Data(m) => ("data", m),
            Failure::Numerical(m) => ("numerical", m),
        };
        let msg = serde_json::to_string(&msg.replace('\n', " ")).expect("string encodes");
        format!("error kind={kind} msg={msg}")
    }
}

impl From<disflow::Error> for Failure {
    fn from(e: disflow::Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else if matches!(e, disflow::Error::Config(_)) {
            Failure::Usage(e.to_string())
        } else {
            Failure::Data(e.to_string())
        }
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Data(format!("{}: {e}", path.display()))
}

#[derive(Parser)]
#[command(name = "disflow", version, about = "Flow matching for disordered crystals")]
struct Cli {
    /// Omit wall-clock metadata so repeated runs produce identical files.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Task {
    Csp,
    Dng,
}

impl From<Task> for TaskMode {
    fn from(t: Task) -> Self {
        match t {
            Task::Csp => TaskMode::Csp,
            Task::Dng => TaskMode::Dng,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Parse a directory of CIF files into JSONL, reporting rejects.
    Curate(CurateArgs),
    /// Shuffle and write train/val/test JSONL files.
    Split(SplitArgs),
    /// Train a velocity network and write a checkpoint.
    Train(TrainArgs),
    /// Generate structures from a checkpoint.
    Sample(SampleArgs),
    /// Turn continuous occupancies into multi-hot assignments.
    Discretize(DiscretizeArgs),
    /// Score generated structures against references.
    Evaluate(EvaluateArgs),
    /// Run the built-in consistency suites.
    Selftest,
}

#[derive(Args)]
struct CurateArgs {
    #[arg(long)]
    cif_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    min_atoms: usize,
    #[arg(long, default_value_t = 50)]
    max_atoms: usize,
    /// Largest number of positions per site.
    #[arg(long, default_value_t = 2)]
    lmax: usize,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "0.8,0.1,0.1")]
    fractions: String,
    /// Defaults to the directory of the input file.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Ordered structures appended to the training split.
    #[arg(long)]
    augment: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    task: Task,
    #[arg(long)]
    data: PathBuf,
    /// Flat `key = value` file over the training config fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, env = SEED_ENV)]
    seed: Option<u64>,
    /// Extra `key=value` settings, applied after the file.
    #[arg(long = "set", value_parser = config::parse_assignment)]
    set: Vec<(String, String)>,
    /// Print the mean loss every this many epochs; 0 disables.
    #[arg(long, default_value_t = 10)]
    log_every: usize,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    model: PathBuf,
    /// Defaults to the task the model was trained for.
    #[arg(long, value_enum)]
    task: Option<Task>,
    /// Structures whose species and position weights are kept (structure prediction).
    #[arg(long)]
    conditions: Option<PathBuf>,
    /// Total structures for generation; structures per condition for prediction.
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 20.0)]
    slope: f64,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Chains integrated together.
    #[arg(long, default_value_t = 64)]
    chunk: usize,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct DiscretizeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Flat `key = value` file over the threshold names.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    tau_ratio: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    tau_abs: Option<f64>,
    #[arg(long)]
    tau_percentile: Option<f64>,
    #[arg(long)]
    alpha_adapt: Option<f64>,
    #[arg(long)]
    tau_entropy: Option<f64>,
    #[arg(long)]
    tau_vote: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long, value_enum)]
    task: Task,
    #[arg(long)]
    pred: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Directory for density and element-count histograms (generation only).
    #[arg(long)]
    plot: Option<PathBuf>,
    /// Smallest allowed interatomic distance, in Å.
    #[arg(long, default_value_t = 0.5)]
    d_min: f64,
    #[arg(long, default_value_t = 10)]
    n_realizations: usize,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    seed: u64,
}

fn read_records(path: &Path) -> Outcome<Vec<Record>> {
    if !path.exists() {
        return Err(Failure::Data(format!("{}: no such file", path.display())));
    }
    read_jsonl(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn write_records(path: &Path, records: &[Record]) -> Outcome {
    write_jsonl(path, records).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn read_pairs(path: &Path) -> Outcome<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    config::parse_pairs(&text).map_err(Failure::Usage)
}

fn curate(a: CurateArgs) -> Outcome {
    let opts = CifOptions { min_atoms: a.min_atoms, max_atoms: a.max_atoms, order: a.lmax, ..CifOptions::default() };
    let mut files: Vec<PathBuf> = fs::read_dir(&a.cif_dir)
        .map_err(io_err(&a.cif_dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("cif")))
        .collect();
    files.sort();
    let mut kept = Vec::new();
    let mut rejected = 0;
    for path in &files {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let parsed = fs::read_to_string(path)
            .map_err(|e| e.to_string())
            .and_then(|text| parse_cif(&text, &opts).map_err(|e| e.to_string()));
        match parsed {
            Ok(c) => {
                let mut r = Record::new(c);
                r.meta.insert("source".into(), Value::String(name));
                kept.push(r);
            }
            Err(reason) => {
                rejected += 1;
                eprintln!("reject file={} reason={}", json!(name), json!(reason));
            }
        }
    }
    if kept.is_empty() {
        return Err(Failure::Data(format!("no structure accepted from {} CIF files", files.len())));
    }
    write_records(&a.out, &kept)?;
    eprintln!("curated {} structures, rejected {rejected}", kept.len());
    Ok(())
}

fn parse_fractions(s: &str) -> Outcome<[f64; 3]> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| Failure::Usage(format!("fractions: {e}")))?;
    parts.try_into().map_err(|_| Failure::Usage("fractions needs three comma-separated values".into()))
}

fn split_cmd(a: SplitArgs) -> Outcome {
    let fractions = parse_fractions(&a.fractions)?;
    let records = read_records(&a.input)?;
    let mut dataset = split(records, a.seed, fractions)?;
    if let Some(path) = &a.augment {
        let ordered: Vec<DisorderedCrystal> = read_records(path)?.into_iter().map(|r| r.crystal).collect();
        dataset = augment_ordered(&dataset, &ordered)?;
    }
    let dir = a.out_dir.clone().unwrap_or_else(|| a.input.parent().map(Path::to_path_buf).unwrap_or_default());
    if !dir.as_os_str().is_empty() {
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    for part in [Split::Train, Split::Val, Split::Test] {
        let records: Vec<Record> = dataset.part(part).cloned().collect();
        write_records(&dir.join(format!("{}.jsonl", part.name())), &records)?;
        println!("{} {}", part.name(), records.len());
    }
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Outcome {
    let task: TaskMode = a.task.into();
    let mut pairs = match &a.config {
        Some(p) => read_pairs(p)?,
        None => Vec::new(),
    };
    let flags = [
        ("epochs", a.epochs.map(|v| v.to_string())),
        ("batch_size", a.batch_size.map(|v| v.to_string())),
        ("learning_rate", a.lr.map(|v| v.to_string())),
        ("seed", a.seed.map(|v| v.to_string())),
    ];
    pairs.extend(flags.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
    pairs.extend(a.set.iter().cloned());
    let cfg = config::overlay(&TrainingConfig::new(task), &pairs).map_err(Failure::Usage)?;
    if cfg.task != task {
        return Err(Failure::Usage(format!("config task {:?} conflicts with --task", cfg.task)));
    }

    let records = read_records(&a.data)?;
    let order = records.iter().map(|r| r.crystal.order()).max().unwrap_or(0).max(cfg.net.order);
    let crystals = records.iter().map(|r| pad_to_order(&r.crystal, order)).collect::<Result<Vec<_>, _>>()?;
    let log_every = a.log_every;
    let outcome = train_with(&crystals, &cfg, |epoch, loss| {
        if log_every > 0 && ((epoch + 1) % log_every == 0 || epoch == 0) {
            eprintln!("epoch {} loss {loss:.6}", epoch + 1);
        }
    })?;
    let ckpt = Checkpoint {
        params: outcome.params,
        task,
        length_prior: outcome.length_prior,
        atom_counts: outcome.atom_counts,
    };
    ckpt.save(&a.out).map_err(|e| Failure::Data(format!("{}: {e}", a.out.display())))?;
    if let Some(last) = outcome.history.last() {
        println!("trained {} epochs on {} structures, final loss {last:.6}", cfg.epochs, crystals.len());
    }
    Ok(())
}

fn sample_record(s: Sample, task: TaskMode, chain: usize, condition: Option<usize>, stamp: Option<u64>) -> Record {
    let mut r = Record::new(s.crystal);
    let m = &mut r.meta;
    m.insert("task".into(), json!(task));
    m.insert("seed".into(), json!(s.metadata.seed));
    m.insert("chain".into(), json!(chain));
    m.insert("steps".into(), json!(s.metadata.steps));
    m.insert("slope".into(), json!(s.metadata.slope));
    m.insert("model_checksum".into(), json!(s.metadata.model_checksum));
    if let Some(c) = condition {
        m.insert("condition".into(), json!(c));
    }
    if !s.metadata.warnings.is_empty() {
        m.insert("warnings".into(), json!(s.metadata.warnings));
    }
    if let Some(t) = stamp {
        m.insert("created_unix".into(), json!(t));
    }
    r
}

fn sample_cmd(a: SampleArgs, deterministic: bool) -> Outcome {
    let ckpt = Checkpoint::load(&a.model).map_err(|e| Failure::Data(format!("{}: {e}", a.model.display())))?;
    let task = a.task.map(TaskMode::from).unwrap_or(ckpt.task);
    if task != ckpt.task {
        return Err(Failure::Usage(format!("model was trained for {:?}, not {task:?}", ckpt.task)));
    }
    let mut config = SamplerConfig::new(task);
    config.steps = a.steps;
    config.slope = a.slope;
    config.seed = a.seed;
    config.threads = a.threads.max(1);
    let (vocab, order) = (ckpt.params.config.vocab, ckpt.params.config.order);
    let stamp = (!deterministic).then(|| SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()));

    let records = match task {
        TaskMode::Csp => {
            let path = a.conditions.as_ref().ok_or_else(|| Failure::Usage("--conditions is required for csp".into()))?;
            let mut conditions = Vec::new();
            for (i, r) in read_records(path)?.iter().enumerate() {
                if r.crystal.vocab_size() != vocab {
                    return Err(Failure::Data(format!("condition {i}: D={} but model has {vocab}", r.crystal.vocab_size())));
                }
                if r.crystal.order() > order {
                    return Err(Failure::Data(format!("condition {i}: order {} exceeds model order {order}", r.crystal.order())));
                }
                conditions.push(Condition::from_crystal(&pad_to_order(&r.crystal, order)?));
            }
            let per = a.n_samples.unwrap_or(1);
            let mut out: Vec<(usize, usize, Record)> = Vec::new();
            for round in 0..per {
                let mut c = config.clone();
                c.seed = config.seed.wrapping_add(round as u64);
                let samples = sample_conditioned(&ckpt.params, &conditions, vocab, order, &c, &ckpt.length_prior, a.chunk)?;
                for (i, s) in samples.into_iter().enumerate() {
                    out.push((i, round, sample_record(s, task, i, Some(i), stamp)));
                }
            }
            out.sort_by_key(|(i, round, _)| (*i, *round));
            out.into_iter().map(|(_, _, r)| r).collect::<Vec<_>>()
        }
        TaskMode::Dng => {
            if a.conditions.is_some() {
                return Err(Failure::Usage("--conditions applies to csp only".into()));
            }
            let sizes = SizeSampler::from_histogram(&ckpt.atom_counts)?;
            let count = a.n_samples.unwrap_or(100);
            let samples = sample_batch(&ckpt.params, &sizes, count, vocab, order, &config, &ckpt.length_prior, a.chunk)?;
            samples.into_iter().enumerate().map(|(i, s)| sample_record(s, task, i, None, stamp)).collect()
        }
    };
    write_records(&a.out, &records)?;
    println!("wrote {} structures to {}", records.len(), a.out.display());
    Ok(())
}

fn discretize_cmd(a: DiscretizeArgs) -> Outcome {
    let mut pairs = match &a.config {
        Some(p) => read_pairs(p)?,
        None => Vec::new(),
    };
    let flags = [
        ("tau_ratio", a.tau_ratio.map(|v| v.to_string())),
        ("k", a.k.map(|v| v.to_string())),
        ("tau_abs", a.tau_abs.map(|v| v.to_string())),
        ("tau_percentile", a.tau_percentile.map(|v| v.to_string())),
        ("alpha_adapt", a.alpha_adapt.map(|v| v.to_string())),
        ("tau_entropy", a.tau_entropy.map(|v| v.to_string())),
        ("tau_vote", a.tau_vote.map(|v| v.to_string())),
    ];
    pairs.extend(flags.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
    let cfg = config::overlay(&DiscretizeConfig::default(), &pairs).map_err(Failure::Usage)?;
    cfg.check()?;
    let out: Vec<Record> = read_records(&a.input)?
        .into_iter()
        .map(|r| {
            let mut d = Record { crystal: discretize_crystal(&r.crystal, &cfg), meta: r.meta };
            d.meta.insert("discretized".into(), Value::Bool(true));
            d
        })
        .collect();
    write_records(&a.out, &out)?;
    println!("discretized {} structures", out.len());
    Ok(())
}

/// Best match per reference over the predictions tagged with its index
/// (or aligned by position when untagged).
fn evaluate_csp_grouped(preds: &[Record], refs: &[DisorderedCrystal]) -> Outcome<EvalReport> {
    if refs.is_empty() {
        return Err(Failure::Data("empty reference set".into()));
    }
    let mut groups: BTreeMap<usize, Vec<&DisorderedCrystal>> = BTreeMap::new();
    for (i, r) in preds.iter().enumerate() {
        let idx = r.meta.get("condition").and_then(Value::as_u64).map_or(i, |v| v as usize);
        if idx >= refs.len() {
            return Err(Failure::Data(format!("prediction {i} refers to reference {idx} of {}", refs.len())));
        }
        groups.entry(idx).or_default().push(&r.crystal);
    }
    let tol = MatchTolerances::default();
    let rmses: Vec<f64> = refs
        .iter()
        .enumerate()
        .filter_map(|(i, truth)| {
            groups
                .get(&i)?
                .iter()
                .filter_map(|p| structure_match(p, truth, &tol))
                .min_by(f64::total_cmp)
        })
        .collect();
    let rmse = (!rmses.is_empty()).then(|| rmses.iter().sum::<f64>() / rmses.len() as f64);
    Ok(EvalReport { match_rate: Some(rmses.len() as f64 / refs.len() as f64), rmse, ..Default::default() })
}

fn evaluate_cmd(a: EvaluateArgs) -> Outcome {
    let preds = read_records(&a.pred)?;
    let refs: Vec<DisorderedCrystal> = read_records(&a.reference)?.into_iter().map(|r| r.crystal).collect();
    let report = match TaskMode::from(a.task) {
        TaskMode::Csp => evaluate_csp_grouped(&preds, &refs)?,
        TaskMode::Dng => {
            let generated: Vec<DisorderedCrystal> = preds.into_iter().map(|r| r.crystal).collect();
            let opts = GenerationEval { d_min: a.d_min, n_realizations: a.n_realizations.max(1), thresholds: None };
            let report = evaluate_generation(&generated, &refs, &opts, &mut ChaCha8Rng::seed_from_u64(a.seed))?;
            if let Some(dir) = &a.plot {
                fs::create_dir_all(dir).map_err(io_err(dir))?;
                let dens = |s: &[DisorderedCrystal]| s.iter().filter_map(|c| density(c).ok()).collect::<Vec<_>>();
                let nel = |s: &[DisorderedCrystal]| s.iter().map(|c| n_el(c) as f64).collect::<Vec<_>>();
                plot::histogram(&dir.join("density.png"), &dens(&generated), &dens(&refs), 30).map_err(Failure::Data)?;
                let (g, r) = (nel(&generated), nel(&refs));
                let span = g.iter().chain(&r).copied().fold(0.0, f64::max) - g.iter().chain(&r).copied().fold(f64::INFINITY, f64::min);
                plot::histogram(&dir.join("n_el.png"), &g, &r, span as usize + 1).map_err(Failure::Data)?;
            }
            report
        }
    };
    let text = report.to_json()?;
    fs::write(&a.out, text + "\n").map_err(io_err(&a.out))?;
    println!("{}", report.table());
    Ok(())
}

fn selftest_cmd() -> Outcome {
    let results = selftest::run_all();
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    match results.iter().filter(|r| !r.passed).count() {
        0 => Ok(()),
        n => Err(Failure::Numerical(format!("{n} self-test suite(s) failed"))),
    }
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Curate(a) => curate(a),
        Command::Split(a) => split_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Sample(a) => sample_cmd(a, cli.deterministic),
        Command::Discretize(a) => discretize_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Selftest => selftest_cmd(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                eprint!("{e}");
                return ExitCode::from(2);
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            eprintln!("{}", Failure::Usage(first).line());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.line());
            ExitCode::from(f.code())
        }
    }
}
