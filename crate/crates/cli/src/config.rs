//! Config file schema, flag overrides and the resolved run configuration.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use cscore::data_io::{DataRoot, SplitSpec, DATA_DIR_ENV};
use cscore::models::BackboneKind;
use cscore::objectives::{BprVariant, Objective};
use cscore::training::{Profile, TrainPlan};
use serde::{Deserialize, Serialize};

pub const DEFAULT_BINS: usize = 10;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub dataset_dir: Option<PathBuf>,
    pub scores: Option<PathBuf>,
    pub ood_scores: Option<PathBuf>,
    pub ood: Option<bool>,
    pub split_seed: Option<u64>,
    pub train_fraction: Option<f64>,
    pub objective: Option<String>,
    pub profile: Option<String>,
    pub seeds: Option<Vec<u64>>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub bins: BinsSection,
    #[serde(default)]
    pub bpr: BprSection,
    #[serde(default)]
    pub train: TrainSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinsSection {
    pub k: Option<usize>,
    pub weighted: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BprSection {
    pub variant: Option<String>,
}

/// Overrides applied on top of the chosen profile.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub base_lr: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub decay_factor: Option<f64>,
    pub decay_epochs: Option<Vec<usize>>,
    pub warmup_epochs: Option<usize>,
    pub eval_every: Option<usize>,
    pub backbone: Option<BackboneKind>,
    pub stage_widths: Option<Vec<usize>>,
    pub train_limit: Option<usize>,
    pub eval_limit: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Data root (default: config file, then the CSCORE_DATA_DIR environment variable).
    #[arg(long = "dataset-dir")]
    pub dataset_dir: Option<PathBuf>,
    /// Score file for the training dataset (default: <dataset-dir>/scores/cifar100.{csv,bin}).
    #[arg(long)]
    pub scores: Option<PathBuf>,
    #[arg(long = "split-seed")]
    pub split_seed: Option<u64>,
    #[arg(long = "train-fraction")]
    pub train_fraction: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// regression | bins | bpr | all (all six compared methods); labels such as bins-20 also work.
    #[arg(long)]
    pub objective: Option<String>,
    #[arg(long = "bins.k")]
    pub bins_k: Option<usize>,
    /// traditional | modified
    #[arg(long = "bpr.variant")]
    pub bpr_variant: Option<String>,
    /// desk | full (alias: paper)
    #[arg(long)]
    pub profile: Option<String>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "batch-size")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Score file for the out-of-distribution set (default: <dataset-dir>/scores/cifar10.{csv,bin}).
    #[arg(long = "ood-scores")]
    pub ood_scores: Option<PathBuf>,
    /// Skip the out-of-distribution evaluation set.
    #[arg(long = "no-ood")]
    pub no_ood: bool,
}

/// Fully resolved configuration of a training run; echoed as `config.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset_dir: PathBuf,
    pub scores: PathBuf,
    pub ood_scores: Option<PathBuf>,
    pub split: SplitSpec,
    pub profile: Profile,
    pub train_limit: Option<usize>,
    pub eval_limit: Option<usize>,
    pub out: PathBuf,
    pub plans: Vec<TrainPlan>,
}

pub fn resolve_root(flag: Option<&Path>, file: &FileConfig) -> Result<DataRoot> {
    if let Some(p) = flag.or(file.dataset_dir.as_deref()) {
        return Ok(DataRoot(p.to_path_buf()));
    }
    DataRoot::from_env().with_context(|| format!("no data root: pass --dataset-dir or set {DATA_DIR_ENV}"))
}

pub fn resolve_scores(flag: Option<&Path>, file: &FileConfig, root: &DataRoot) -> Result<PathBuf> {
    if let Some(p) = flag.or(file.scores.as_deref()) {
        return Ok(p.to_path_buf());
    }
    root.scores("cifar100").with_context(|| {
        format!("coverage error: no score file for cifar100 under {}", root.0.join("scores").display())
    })
}

pub fn resolve_split(args: &DataArgs, file: &FileConfig) -> SplitSpec {
    let d = SplitSpec::default();
    SplitSpec {
        seed: args.split_seed.or(file.split_seed).unwrap_or(d.seed),
        train_fraction: args.train_fraction.or(file.train_fraction).unwrap_or(d.train_fraction),
    }
}

/// Objectives named by `spec`, with `k` and `variant` filling in bare `bins` / `bpr`.
pub fn parse_objectives(spec: &str, k: Option<usize>, variant: Option<&str>) -> Result<Vec<Objective>> {
    let variant: BprVariant = match variant {
        Some(v) => v.parse().map_err(anyhow::Error::msg)?,
        None => BprVariant::Modified,
    };
    let objective = match spec {
        "all" => return Ok(Profile::methods()),
        "regression" => Objective::Regression,
        "bins" => Objective::Bins { k: k.unwrap_or(DEFAULT_BINS) },
        "bpr" => Objective::Bpr { variant },
        label => {
            let o: Objective = label.parse().map_err(anyhow::Error::msg)?;
            if let (Objective::Bins { k: a }, Some(b)) = (o, k) {
                if a != b {
                    bail!("objective `{label}` conflicts with --bins.k {b}");
                }
            }
            o
        }
    };
    objective.validate()?;
    Ok(vec![objective])
}

pub fn resolve_train(args: &TrainArgs, file: &FileConfig) -> Result<RunConfig> {
    let root = resolve_root(args.data.dataset_dir.as_deref(), file)?;
    let scores = resolve_scores(args.data.scores.as_deref(), file, &root)?;
    let profile: Profile =
        args.profile.as_deref().or(file.profile.as_deref()).unwrap_or("desk").parse().map_err(anyhow::Error::msg)?;
    let objectives = parse_objectives(
        args.objective.as_deref().or(file.objective.as_deref()).unwrap_or("bpr"),
        args.bins_k.or(file.bins.k),
        args.bpr_variant.as_deref().or(file.bpr.variant.as_deref()),
    )?;
    let t = &file.train;
    let mut plans = Vec::new();
    for objective in objectives {
        let mut plan = profile.plan(objective);
        if let Some(seeds) = args.seeds.clone().or_else(|| file.seeds.clone()) {
            plan.seeds = seeds;
        }
        if let Some(e) = args.epochs.or(t.epochs) {
            plan.sgd.total_epochs = e;
            if t.decay_epochs.is_none() {
                plan.sgd.decay_epochs.retain(|&d| d < e);
            }
        }
        if let Some(d) = &t.decay_epochs {
            plan.sgd.decay_epochs = d.clone();
        }
        if let Some(b) = args.batch_size.or(t.batch_size) {
            plan.batch_size = b;
        }
        if let Some(lr) = args.lr.or(t.base_lr) {
            plan.sgd.base_lr = lr;
        }
        if let Some(m) = t.momentum {
            plan.sgd.momentum = m;
        }
        if let Some(w) = t.weight_decay {
            plan.sgd.weight_decay = w;
        }
        if let Some(f) = t.decay_factor {
            plan.sgd.decay_factor = f;
        }
        if let Some(w) = t.warmup_epochs {
            plan.sgd.warmup_epochs = w;
        }
        if let Some(e) = t.eval_every {
            plan.eval_every = e;
        }
        if let Some(kind) = t.backbone {
            plan.backbone = match kind {
                BackboneKind::SmallCnn => cscore::models::BackboneConfig::small_cnn(),
                BackboneKind::Resnet18Like => cscore::models::BackboneConfig::resnet18_like(),
            };
        }
        if let Some(w) = &t.stage_widths {
            plan.backbone.stage_widths = w.clone();
        }
        plan.bins_weighted = file.bins.weighted.unwrap_or(false);
        plan.validate()?;
        plans.push(plan);
    }
    let ood_scores = if args.no_ood || file.ood == Some(false) {
        None
    } else {
        match args.ood_scores.clone().or_else(|| file.ood_scores.clone()) {
            Some(p) => Some(p),
            None if root.cifar10_train().iter().all(|p| p.is_file()) => {
                Some(root.scores("cifar10").with_context(|| {
                    format!(
                    "coverage error: CIFAR-10 images found but no cifar10 score file under {} (use --no-ood to skip)",
                    root.0.join("scores").display()
                )
                })?)
            }
            None => None,
        }
    };
    Ok(RunConfig {
        dataset_dir: root.0,
        scores,
        ood_scores,
        split: resolve_split(&args.data, file),
        profile,
        train_limit: t.train_limit.or(profile.train_limit()),
        eval_limit: t.eval_limit.or(profile.eval_limit()),
        out: args.out.clone().or_else(|| file.out.clone()).unwrap_or_else(|| PathBuf::from("out")),
        plans,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn objective_parsing() {
        assert_eq!(parse_objectives("bins", Some(40), None).unwrap(), vec![Objective::Bins { k: 40 }]);
        assert_eq!(parse_objectives("bins", None, None).unwrap(), vec![Objective::Bins { k: DEFAULT_BINS }]);
        assert_eq!(
            parse_objectives("bpr", None, Some("traditional")).unwrap(),
            vec![Objective::Bpr { variant: BprVariant::Traditional }]
        );
        assert_eq!(parse_objectives("bins-20", None, None).unwrap(), vec![Objective::Bins { k: 20 }]);
        assert!(parse_objectives("bins-20", Some(5), None).is_err());
        assert!(parse_objectives("bins", Some(1), None).is_err());
        assert!(parse_objectives("bpr", None, Some("fancy")).is_err());
        assert_eq!(parse_objectives("all", None, None).unwrap().len(), 6);
    }

    #[test]
    fn file_schema_rejects_unknown_keys() {
        let ok: FileConfig = toml::from_str("objective = \"bins\"\n[bins]\nk = 5\n[train]\nepochs = 2\n").unwrap();
        assert_eq!(ok.bins.k, Some(5));
        assert_eq!(ok.train.epochs, Some(2));
        assert!(toml::from_str::<FileConfig>("objectve = \"bins\"").is_err());
    }
}
