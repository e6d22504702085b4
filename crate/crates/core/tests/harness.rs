use std::collections::{BTreeMap, BTreeSet};

use dfm::data::{generate_synthetic, Dataset, FeatureDims, SignalStrength, SynthConfig};
use dfm::harness::{
    grid_search, make_folds, run_ablation, run_nested_cv, run_nested_cv_with_plan, variants, AblationAxis, CvConfig,
    Grid, GridPoint,
};
use dfm::model::ModelConfig;
use dfm::objective::Component;
use dfm::train::TrainConfig;

fn data(teachers: usize, per: usize, noise_sd: f64, seed: u64) -> Dataset {
    generate_synthetic(&SynthConfig {
        n_teachers: teachers,
        segments_per_teacher: per,
        signal: SignalStrength::uniform(1.0),
        noise_sd,
        students_per_teacher: 0,
        dims: FeatureDims { text: 8, audio: 8, video: 8 },
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn cv_config(d: &Dataset, epochs: usize, grid: Grid) -> CvConfig {
    CvConfig {
        model: ModelConfig {
            dims: d.manifest.dims,
            num_heads: 2,
            head_hidden: 64,
            ..ModelConfig::default()
        },
        train: TrainConfig {
            max_epochs: epochs,
            ..TrainConfig::default()
        },
        grid,
        n_outer: 5,
        n_inner: 2,
        seed: 13,
    }
}

fn point(lr: f64, batch_size: usize, num_modules: usize) -> GridPoint {
    GridPoint { lr, batch_size, num_modules }
}

#[test]
fn every_segment_predicted_once_without_teacher_leakage() {
    let d = data(12, 3, 0.5, 2);
    let grid = Grid { lr: vec![1e-3], batch_size: vec![8], num_modules: vec![1, 2] };
    let cfg = cv_config(&d, 2, grid);
    let res = run_nested_cv(&d, &cfg).unwrap();

    let mut seen: BTreeMap<(String, Component), usize> = BTreeMap::new();
    for r in &res.predictions {
        *seen.entry((r.segment_id.clone(), r.component)).or_default() += 1;
        assert!(res.plan.outer[r.fold].contains(&r.teacher_id));
        assert!(!res.plan.training_teachers(r.fold).contains(&r.teacher_id));
    }
    assert_eq!(seen.len(), d.len() * 3);
    assert!(seen.values().all(|&n| n == 1));

    // exhaustive: no test teacher in any of its fold's training or inner sets
    for (k, fold) in res.plan.outer.iter().enumerate() {
        let test: BTreeSet<&String> = fold.iter().collect();
        assert!(res.plan.training_teachers(k).iter().all(|t| !test.contains(t)));
        assert!(res.plan.inner[k].iter().flatten().all(|t| !test.contains(t)));
    }
    assert_eq!(res.folds.len(), 5);
    assert!(res.folds.iter().all(|f| f.grid.len() == 2));
}

#[test]
fn single_point_grid_is_returned_untrained() {
    let d = data(6, 2, 0.5, 3);
    let p = point(1e-4, 8, 3);
    let cfg = cv_config(&d, 1, Grid::single(p));
    let plan = make_folds(&d, 3, 2, 0).unwrap();
    let (best, scores) = grid_search(&d, &plan, 0, &cfg).unwrap();
    assert_eq!(best, p);
    assert_eq!(scores.len(), 1);
    assert!(scores[0].mean_qwk.is_none());
}

#[test]
fn easy_signal_selects_one_module_deterministically() {
    let d = data(30, 4, 0.0, 4);
    let grid = Grid { lr: vec![1e-3], batch_size: vec![8], num_modules: vec![2, 1] };
    let cfg = cv_config(&d, 200, grid);
    let plan = make_folds(&d, 5, 2, cfg.seed).unwrap();
    let (best, scores) = grid_search(&d, &plan, 0, &cfg).unwrap();
    let (again, scores_again) = grid_search(&d, &plan, 0, &cfg).unwrap();
    assert_eq!(best, again);
    assert_eq!(scores, scores_again);
    assert_eq!(best.num_modules, 1, "{scores:?}");
}

#[test]
fn ablation_variants_share_one_plan() {
    let d = data(6, 2, 0.5, 5);
    let mut cfg = cv_config(&d, 1, Grid::single(point(1e-3, 8, 1)));
    cfg.n_outer = 3;
    let vs = variants(&cfg.model, &[AblationAxis::Task, AblationAxis::Loss]);
    let names: Vec<&str> = vs.iter().map(|v| v.name.as_str()).collect();
    assert_eq!(names, ["Single", "Multi", "L1", "CE", "OLL"]);
    let rep = run_ablation(&d, &cfg, &vs).unwrap();
    assert_eq!(rep.plan, make_folds(&d, cfg.n_outer, cfg.n_inner, cfg.seed).unwrap());
    // each row is what that variant scores on the shared plan
    for (v, row) in vs.iter().zip(&rep.rows) {
        assert_eq!(row.components.len(), 3, "{}", v.name);
        for m in &v.configs {
            let res = run_nested_cv_with_plan(&d, &CvConfig { model: m.clone(), ..cfg.clone() }, &rep.plan).unwrap();
            for (c, r) in &res.report.components {
                assert_eq!(row.components[c], (r.mean_qwk, r.se));
            }
        }
    }
    let single = &rep.rows[0];
    assert_eq!(single.components.keys().copied().collect::<Vec<_>>(), Component::ALL.to_vec());
    let modality_rows: Vec<String> =
        variants(&cfg.model, &[AblationAxis::Modalities]).into_iter().map(|v| v.name).collect();
    assert_eq!(modality_rows, ["T", "A", "V", "T+A", "T+A+V"]);
    let encoder_rows: Vec<String> = variants(&cfg.model, &[AblationAxis::Encoder]).into_iter().map(|v| v.name).collect();
    assert_eq!(encoder_rows, ["LSTM", "Attention"]);
}
