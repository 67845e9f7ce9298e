use cscore::autodiff::SgdConfig;
use cscore::data_io::{self, SplitSpec};
use cscore::evaluation::PairEvalSpec;
use cscore::models::BackboneConfig;
use cscore::objectives::{BprVariant, Objective};
use cscore::synthetic;
use cscore::training::{self, MatrixData, RunStatus, TrainError, TrainOptions, TrainPlan};

fn plan(objective: Objective, seeds: Vec<u64>) -> TrainPlan {
    TrainPlan {
        objective,
        sgd: SgdConfig { base_lr: 0.02, momentum: 0.9, decay_epochs: vec![1], total_epochs: 2, ..SgdConfig::default() },
        batch_size: 16,
        seeds,
        eval_every: 1,
        backbone: BackboneConfig { stage_widths: vec![4, 8], ..BackboneConfig::small_cnn() },
        pair_eval: PairEvalSpec { permutation_seed: 3, eval_batch: 16 },
        bins_weighted: false,
    }
}

fn data() -> (data_io::ScoredSubset, data_io::ScoredSubset) {
    let (bytes, scores) = synthetic::cifar100_like_bytes(80, 11);
    let set = data_io::parse_cifar100(&bytes).unwrap();
    data_io::split(&set, &scores, &SplitSpec { seed: 5, train_fraction: 0.75 }).unwrap()
}

#[test]
fn matrix_cells_match_direct_training() {
    let (train, test) = data();
    let plans =
        [plan(Objective::Regression, vec![0, 1]), plan(Objective::Bpr { variant: BprVariant::Modified }, vec![2])];
    let cells = training::run_matrix(&plans, MatrixData { train: &train, eval_sets: &[&test] }, None).unwrap();
    assert_eq!(cells.len(), 3);
    for (cell, (p, seed)) in cells.iter().zip([(&plans[0], 0), (&plans[0], 1), (&plans[1], 2)]) {
        let direct = training::train(p, seed, &train, &[&test], &TrainOptions::default()).unwrap().record;
        let rec = cell.outcome.as_ref().unwrap();
        assert_eq!(rec.loss_curve(), direct.loss_curve());
        assert_eq!(rec.final_eval, direct.final_eval);
        assert_eq!(rec.status, RunStatus::Completed);
    }
}

#[test]
fn reloaded_checkpoints_reproduce_recorded_metrics() {
    let (train, test) = data();
    for objective in [Objective::Regression, Objective::Bins { k: 5 }, Objective::Bpr { variant: BprVariant::Modified }]
    {
        let dir = tempfile::tempdir().unwrap();
        let p = plan(objective, vec![4]);
        let opts = TrainOptions { out_dir: Some(dir.path().to_path_buf()), poison_step: None };
        training::train(&p, 4, &train, &[&test], &opts).unwrap();
        let record = training::read_record(dir.path()).unwrap();
        assert_eq!(record.epochs.len(), 2);
        assert!(record.epochs.iter().all(|e| e.step_lrs.len() == e.step_losses.len()));
        let (sidecar, model) = training::load_model(dir.path()).unwrap();
        assert_eq!(sidecar.epoch, 2);
        assert_eq!(sidecar.objective, objective);
        let again = training::evaluate_subset(&model, &objective, &test, &p.pair_eval).unwrap();
        assert_eq!(record.final_eval["cifar100-test"], again);
    }
}

#[test]
fn traditional_bpr_diverges_under_an_oversized_step() {
    let (train, _) = data();
    let mut p = plan(Objective::Bpr { variant: BprVariant::Traditional }, vec![0]);
    p.sgd.base_lr = 1e4;
    p.sgd.warmup_epochs = 0;
    p.sgd.total_epochs = 20;
    p.sgd.decay_epochs.clear();
    let dir = tempfile::tempdir().unwrap();
    let opts = TrainOptions { out_dir: Some(dir.path().to_path_buf()), poison_step: None };
    match training::train(&p, 0, &train, &[], &opts) {
        Err(TrainError::Divergence { global_step, record, .. }) => {
            assert_eq!(record.loss_curve().len(), global_step);
            assert!(record.loss_curve().iter().all(|l| l.is_finite()));
            assert!(training::read_record(dir.path()).is_ok());
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}
