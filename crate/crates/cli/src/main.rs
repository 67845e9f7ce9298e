//! `cscore`: split, train, eval, histogram, curriculum and summarize.

mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use cscore::data_io::{self, DataRoot, ScoreTable, ScoredSubset};
use cscore::evaluation::{render_table, score_histogram, EvalReport, MetricSet};
use cscore::models::argmax_rows;
use cscore::objectives::Objective;
use cscore::training::{self, MatrixData, Profile, RunRecord, RunStatus, TrainError};
use log::{info, warn};
use serde::Serialize;

use config::{resolve_root, resolve_scores, resolve_split, DataArgs, FileConfig, RunConfig, TrainArgs};

const CONFIG_FILE: &str = "config.json";
const ID_SET: &str = "CIFAR-100";
const OOD_SET: &str = "CIFAR-10";
const DESK_NOTE: &str = "desk profile: reduced data, epochs and model; not comparable with full-scale results";

#[derive(Parser)]
#[command(name = "cscore", version, about = "Train and evaluate consistency-score predictors")]
struct Cli {
    /// TOML config file; command-line flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the seeded train/test id manifest.
    Split {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every (objective, seed) cell and write runs/<objective>/<seed>/.
    Train(TrainArgs),
    /// Re-evaluate every checkpoint under a run directory.
    Eval {
        /// Run directory written by `train`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "dataset-dir")]
        dataset_dir: Option<PathBuf>,
    },
    /// Print a score histogram with a text plot.
    Histogram {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, default_value_t = 20)]
        bins: usize,
    },
    /// Write sample ids ordered by (given or predicted) score.
    Curriculum {
        /// Score file to order.
        #[arg(long, conflicts_with = "run")]
        scores: Option<PathBuf>,
        /// Cell directory (runs/<objective>/<seed>) whose model predicts the scores.
        #[arg(long, required_unless_present = "scores")]
        run: Option<PathBuf>,
        /// Dataset the model scores: cifar100 or cifar10.
        #[arg(long, default_value = "cifar100")]
        dataset: String,
        #[arg(long = "dataset-dir")]
        dataset_dir: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Direction::EasyFirst)]
        direction: Direction,
        /// Output CSV path.
        #[arg(long)]
        output: PathBuf,
    },
    /// Tabulate recorded final metrics across seeds.
    Summarize {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "src")]
        metric: String,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Direction {
    EasyFirst,
    HardFirst,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// Returns whether every requested cell succeeded.
fn run(cli: Cli) -> Result<bool> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Split { data, out } => cmd_split(&data, out, &file).map(|_| true),
        Command::Train(args) => cmd_train(&args, &file),
        Command::Eval { out, dataset_dir } => cmd_eval(&run_dir(out, &file), dataset_dir),
        Command::Histogram { scores, bins } => cmd_histogram(&scores, bins).map(|_| true),
        Command::Curriculum { scores, run, dataset, dataset_dir, direction, output } => {
            cmd_curriculum(scores, run, &dataset, dataset_dir, direction, &output, &file).map(|_| true)
        }
        Command::Summarize { out, metric } => cmd_summarize(&run_dir(out, &file), &metric).map(|_| true),
    }
}

fn run_dir(flag: Option<PathBuf>, file: &FileConfig) -> PathBuf {
    flag.or_else(|| file.out.clone()).unwrap_or_else(|| PathBuf::from("out"))
}

fn echo<S: Serialize>(label: &str, value: &S) -> Result<()> {
    println!("{label}: {}", serde_json::to_string(value)?);
    Ok(())
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn load_score_file(path: &Path) -> Result<ScoreTable> {
    if !path.is_file() {
        bail!("coverage error: score file {} not found; no sample has a score", path.display());
    }
    Ok(data_io::load_scores(path)?)
}

#[derive(Serialize)]
struct SplitManifest {
    dataset: String,
    dataset_dir: PathBuf,
    scores: PathBuf,
    split: data_io::SplitSpec,
    train_ids: Vec<u32>,
    test_ids: Vec<u32>,
}

fn cmd_split(args: &DataArgs, out: Option<PathBuf>, file: &FileConfig) -> Result<()> {
    let root = resolve_root(args.dataset_dir.as_deref(), file)?;
    let scores_path = resolve_scores(args.scores.as_deref(), file, &root)?;
    let spec = resolve_split(args, file);
    let out = run_dir(out, file);
    let set = root.load_cifar100()?;
    let scores = load_score_file(&scores_path)?;
    let (train, test) = data_io::split(&set, &scores, &spec)?;
    let manifest = SplitManifest {
        dataset: set.name.clone(),
        dataset_dir: root.0.clone(),
        scores: scores_path,
        split: spec,
        train_ids: train.ids,
        test_ids: test.ids,
    };
    echo(
        "config",
        &serde_json::json!({"dataset_dir": &manifest.dataset_dir, "scores": &manifest.scores, "split": spec, "out": &out}),
    )?;
    let path = out.join("split.json");
    write_json(&path, &manifest)?;
    println!(
        "split {}: {} train / {} test -> {}",
        manifest.dataset,
        manifest.train_ids.len(),
        manifest.test_ids.len(),
        path.display()
    );
    Ok(())
}

struct RunData {
    train: ScoredSubset,
    evals: Vec<ScoredSubset>,
}

/// Training subset and evaluation sets described by a resolved configuration.
fn load_run_data(cfg: &RunConfig) -> Result<RunData> {
    let root = DataRoot(cfg.dataset_dir.clone());
    let set = root.load_cifar100()?;
    let scores = load_score_file(&cfg.scores)?;
    let (train, test) = data_io::split(&set, &scores, &cfg.split)?;
    let limit = |n: Option<usize>| n.unwrap_or(usize::MAX);
    let mut evals = vec![test.head(limit(cfg.eval_limit), ID_SET)];
    if let Some(ood_scores) = &cfg.ood_scores {
        let ood = root.load_cifar10()?;
        let joined = ScoredSubset::join(&ood, &load_score_file(ood_scores)?)?;
        evals.push(joined.head(limit(cfg.eval_limit), OOD_SET));
    }
    Ok(RunData { train: train.head(limit(cfg.train_limit), "cifar100-train"), evals })
}

fn cmd_train(args: &TrainArgs, file: &FileConfig) -> Result<bool> {
    let cfg = config::resolve_train(args, file)?;
    echo("config", &cfg)?;
    let data = load_run_data(&cfg)?;
    info!(
        "training on {} samples; evaluating on {}",
        data.train.len(),
        data.evals.iter().map(|s| format!("{} ({})", s.name, s.len())).collect::<Vec<_>>().join(", ")
    );
    write_json(&cfg.out.join(CONFIG_FILE), &cfg)?;
    let eval_refs: Vec<&ScoredSubset> = data.evals.iter().collect();
    let cells =
        training::run_matrix(&cfg.plans, MatrixData { train: &data.train, eval_sets: &eval_refs }, Some(&cfg.out))?;
    let mut all_ok = true;
    let mut records = Vec::new();
    for cell in cells {
        match cell.outcome {
            Ok(record) => {
                println!("cell {}/{}: completed{}", cell.method, cell.seed, format_metrics(&record.final_eval));
                records.push(record);
            }
            Err(e) => {
                all_ok = false;
                if let TrainError::Divergence { .. } = e {
                    println!("cell {}/{}: diverged: {e}", cell.method, cell.seed);
                } else {
                    println!("cell {}/{}: failed: {e}", cell.method, cell.seed);
                }
            }
        }
    }
    if !records.is_empty() {
        print!("{}", summary_table(&records, "src", cfg.profile)?);
    }
    Ok(all_ok)
}

fn format_metrics(eval: &BTreeMap<String, MetricSet>) -> String {
    let mut s = String::new();
    for (set, m) in eval {
        for (k, v) in m {
            s.push_str(&format!(" {set}.{k}={v:.4}"));
        }
    }
    s
}

fn summary_table(records: &[RunRecord], metric: &str, profile: Profile) -> Result<String> {
    let reports = training::summarize_records(records, metric)?;
    let note = (!profile.comparable()).then_some(DESK_NOTE);
    Ok(render_table(&reports, metric, &[ID_SET, OOD_SET], note))
}

fn read_run_config(out: &Path) -> Result<RunConfig> {
    let path = out.join(CONFIG_FILE);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Cell directories `runs/<objective>/<seed>/` in sorted order.
fn cell_dirs(out: &Path) -> Result<Vec<PathBuf>> {
    let runs = out.join("runs");
    let mut dirs = Vec::new();
    let read = |p: &Path| -> Result<Vec<PathBuf>> {
        let mut v: Vec<PathBuf> = std::fs::read_dir(p)
            .with_context(|| format!("reading {}", p.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        v.sort();
        Ok(v)
    };
    for method in read(&runs)? {
        let mut seeds = read(&method)?;
        seeds.sort_by_key(|p| p.file_name().and_then(|n| n.to_str()).and_then(|s| s.parse::<u64>().ok()));
        dirs.extend(seeds);
    }
    Ok(dirs)
}

#[derive(Serialize)]
struct CellEval {
    method: String,
    seed: u64,
    metrics: BTreeMap<String, MetricSet>,
    matches_record: Option<bool>,
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    config: &'a RunConfig,
    cells: Vec<CellEval>,
    reports: Vec<EvalReport>,
}

fn cmd_eval(out: &Path, dataset_dir: Option<PathBuf>) -> Result<bool> {
    let mut cfg = read_run_config(out)?;
    if let Some(d) = dataset_dir {
        cfg.dataset_dir = d;
    }
    echo("config", &cfg)?;
    let data = load_run_data(&cfg)?;
    let mut all_ok = true;
    let mut cells = Vec::new();
    for dir in cell_dirs(out)? {
        if !dir.join(training::CHECKPOINT_FILE).is_file() {
            all_ok = false;
            println!("missing checkpoint: {}", dir.join(training::CHECKPOINT_FILE).display());
            continue;
        }
        let (sidecar, model) = training::load_model(&dir)?;
        let mut metrics = BTreeMap::new();
        for set in &data.evals {
            let m = training::evaluate_subset(&model, &sidecar.objective, set, &sidecar.plan.pair_eval)?;
            metrics.insert(set.name.clone(), m);
        }
        let matches_record = training::read_record(&dir).ok().map(|r| r.final_eval == metrics);
        if matches_record == Some(false) {
            warn!("{}: metrics differ from the recorded final evaluation", dir.display());
        }
        println!("cell {}/{}:{}", sidecar.objective.label(), sidecar.seed, format_metrics(&metrics));
        cells.push(CellEval { method: sidecar.objective.label(), seed: sidecar.seed, metrics, matches_record });
    }
    if cells.is_empty() && all_ok {
        bail!("no trained cells under {}", out.join("runs").display());
    }
    let mut groups: BTreeMap<(String, String, String), Vec<(u64, f64)>> = BTreeMap::new();
    for c in &cells {
        for (set, m) in &c.metrics {
            for (k, v) in m {
                groups.entry((set.clone(), c.method.clone(), k.clone())).or_default().push((c.seed, *v));
            }
        }
    }
    let reports = groups
        .into_iter()
        .map(|((set, method, metric), v)| EvalReport::new(&set, &method, &metric, v))
        .collect::<Result<Vec<_>, _>>()?;
    let note = (!cfg.profile.comparable()).then_some(DESK_NOTE);
    let table = render_table(&reports, "src", &[ID_SET, OOD_SET], note);
    let eval_dir = out.join("eval");
    write_json(&eval_dir.join("reports.json"), &EvalOutput { config: &cfg, cells, reports })?;
    std::fs::write(eval_dir.join("table.txt"), &table)?;
    print!("{table}");
    Ok(all_ok)
}

/// Bar lengths scaled so the largest count spans `width` characters.
fn histogram_plot(counts: &[usize], width: usize) -> String {
    let max = counts.iter().copied().max().unwrap_or(0).max(1);
    let k = counts.len();
    let mut s = String::new();
    for (i, &c) in counts.iter().enumerate() {
        let bar = "#".repeat((c * width).div_ceil(max).min(width));
        let close = if i + 1 == k { ']' } else { ')' };
        s.push_str(&format!("[{:.3}, {:.3}{close} {c:>8} {bar}\n", i as f64 / k as f64, (i + 1) as f64 / k as f64));
    }
    s
}

fn cmd_histogram(scores: &Path, bins: usize) -> Result<()> {
    echo("config", &serde_json::json!({"scores": scores, "bins": bins}))?;
    let table = load_score_file(scores)?;
    let counts = score_histogram(&table.scores, bins)?;
    echo("counts", &counts)?;
    print!("{}", histogram_plot(&counts, 50));
    Ok(())
}

/// Sample ids by score: descending for easy-first, ascending for hard-first;
/// ties always in ascending id order.
fn curriculum_order(ids: &[u32], scores: &[f64], direction: Direction) -> Vec<(u32, f64)> {
    let mut rows: Vec<(u32, f64)> = ids.iter().copied().zip(scores.iter().copied()).collect();
    rows.sort_by(|a, b| {
        let by_score = match direction {
            Direction::EasyFirst => b.1.total_cmp(&a.1),
            Direction::HardFirst => a.1.total_cmp(&b.1),
        };
        by_score.then(a.0.cmp(&b.0))
    });
    rows
}

/// Scalar difficulty from raw model outputs; bin models map to the center of the argmax bin.
fn outputs_to_scores(objective: &Objective, outputs: &[f64]) -> Vec<f64> {
    match objective {
        Objective::Bins { k } => argmax_rows(outputs, *k).into_iter().map(|b| (b as f64 + 0.5) / *k as f64).collect(),
        _ => outputs.to_vec(),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_curriculum(
    scores: Option<PathBuf>,
    run: Option<PathBuf>,
    dataset: &str,
    dataset_dir: Option<PathBuf>,
    direction: Direction,
    output: &Path,
    file: &FileConfig,
) -> Result<()> {
    let (ids, values, source) = match (scores, run) {
        (Some(path), _) => {
            let t = load_score_file(&path)?;
            (t.ids, t.scores, serde_json::json!({"scores": path}))
        }
        (None, Some(dir)) => {
            let root = resolve_root(dataset_dir.as_deref(), file)?;
            let set = match dataset {
                "cifar100" => root.load_cifar100()?,
                "cifar10" => root.load_cifar10()?,
                other => bail!("unknown dataset `{other}` (expected cifar100|cifar10)"),
            };
            let (sidecar, model) = training::load_model(&dir)?;
            let outputs = model.infer(&set.images)?;
            let values = outputs_to_scores(&sidecar.objective, &outputs);
            (
                set.ids,
                values,
                serde_json::json!({"run": dir, "dataset": dataset, "dataset_dir": root.0, "objective": sidecar.objective}),
            )
        }
        (None, None) => bail!("either --scores or --run is required"),
    };
    let config = serde_json::json!({"source": source, "direction": direction, "output": output});
    echo("config", &config)?;
    let rows = curriculum_order(&ids, &values, direction);
    let mut csv = String::from("rank,index,score\n");
    for (rank, (id, s)) in rows.iter().enumerate() {
        csv.push_str(&format!("{rank},{id},{s}\n"));
    }
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(output, csv).with_context(|| format!("writing {}", output.display()))?;
    let mut sidecar = output.as_os_str().to_owned();
    sidecar.push(".json");
    write_json(Path::new(&sidecar), &config)?;
    println!("wrote {} ids to {}", rows.len(), output.display());
    Ok(())
}

fn cmd_summarize(out: &Path, metric: &str) -> Result<()> {
    let cfg = read_run_config(out)?;
    echo("config", &serde_json::json!({"out": out, "metric": metric, "profile": cfg.profile}))?;
    let mut records = Vec::new();
    for dir in cell_dirs(out)? {
        let r = training::read_record(&dir)?;
        if let RunStatus::Diverged { global_step, ref cause, .. } = r.status {
            println!("cell {}/{}: diverged at global step {global_step} ({cause})", r.method, r.seed);
        }
        records.push(r);
    }
    let table = summary_table(&records, metric, cfg.profile)?;
    std::fs::write(out.join(format!("summary-{metric}.txt")), &table)?;
    print!("{table}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn easy_first_order() {
        let rows = curriculum_order(&[0, 1, 2], &[0.1, 0.9, 0.5], Direction::EasyFirst);
        assert_eq!(rows.iter().map(|r| r.0).collect::<Vec<_>>(), vec![1, 2, 0]);
    }

    #[test]
    fn ties_keep_id_order() {
        for d in [Direction::EasyFirst, Direction::HardFirst] {
            let rows = curriculum_order(&[3, 0, 2, 1], &[0.5; 4], d);
            assert_eq!(rows.iter().map(|r| r.0).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn hard_first_reverses_distinct_scores() {
        let ids: Vec<u32> = (0..20).collect();
        let scores: Vec<f64> = ids.iter().map(|&i| ((i * 7) % 20) as f64 / 20.0).collect();
        let mut easy = curriculum_order(&ids, &scores, Direction::EasyFirst);
        easy.reverse();
        assert_eq!(easy, curriculum_order(&ids, &scores, Direction::HardFirst));
    }

    #[test]
    fn histogram_plot_rows() {
        let plot = histogram_plot(&[1, 0, 2], 4);
        let lines: Vec<&str> = plot.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].ends_with(" ##"));
        assert!(lines[2].starts_with("[0.667, 1.000]") && lines[2].ends_with("####"));
    }

    #[test]
    fn bin_outputs_map_to_centers() {
        let got = outputs_to_scores(&Objective::Bins { k: 4 }, &[0.0, 1.0, 0.0, 0.0, 5.0, 5.0, 0.0, 0.0]);
        assert_eq!(got, vec![0.375, 0.125]);
    }
}
