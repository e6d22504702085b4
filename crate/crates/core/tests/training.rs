use dfm::blocks::HEAD_HIDDEN;
use dfm::data::{generate_synthetic, Dataset, FeatureDims, SignalStrength, SynthConfig};
use dfm::model::{build_model, ModelConfig};
use dfm::train::{class_weights_for, evaluate_loss, train, History, TrainConfig};
use dfm::Error;

fn toy() -> Dataset {
    generate_synthetic(&SynthConfig {
        n_teachers: 4,
        segments_per_teacher: 4,
        signal: SignalStrength::uniform(1.0),
        noise_sd: 0.0,
        students_per_teacher: 2,
        dims: FeatureDims { text: 16, audio: 16, video: 16 },
        seed: 21,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn model_config(data: &Dataset) -> ModelConfig {
    ModelConfig {
        dims: data.manifest.dims,
        num_heads: 2,
        head_hidden: HEAD_HIDDEN,
        dropout: 0.0,
        seed: 4,
        ..ModelConfig::default()
    }
}

fn split(data: &Dataset) -> (Vec<usize>, Vec<usize>) {
    let last = data.teacher_of(data.len() - 1).to_string();
    (0..data.len()).partition(|&i| data.teacher_of(i) != last)
}

fn run(data: &Dataset, cfg: &TrainConfig) -> (History, f64) {
    let (tr, va) = split(data);
    let mut model = build_model::<f32>(&model_config(data)).unwrap();
    let h = train(&mut model, data, &tr, &va, cfg).unwrap();
    let weights = class_weights_for(data, &tr, &model.components()).unwrap();
    let restored = evaluate_loss(&model, data, &va, cfg.batch_size, &weights).unwrap();
    (h, restored)
}

#[test]
fn separable_toy_is_fit_to_near_zero_loss() {
    let data = toy();
    assert_eq!(data.len(), 16);
    let cfg = TrainConfig {
        lr: 1e-3,
        batch_size: 4,
        max_epochs: 200,
        early_stop_patience: 200,
        plateau_patience: 200,
        seed: 9,
        ..TrainConfig::default()
    };
    let (h, _) = run(&data, &cfg);
    let first = h.epochs[0].train_loss;
    let last = h.epochs.last().unwrap().train_loss;
    assert_eq!(h.stop_epoch, 200);
    assert!(last < 0.01, "train loss {first} -> {last}");
}

#[test]
fn same_seed_same_trace_and_restored_best() {
    let data = toy();
    let cfg = TrainConfig {
        lr: 1e-3,
        batch_size: 4,
        max_epochs: 40,
        early_stop_patience: 5,
        plateau_patience: 2,
        seed: 3,
        ..TrainConfig::default()
    };
    let (a, restored_a) = run(&data, &cfg);
    let (b, restored_b) = run(&data, &cfg);
    assert_eq!(a, b);
    assert_eq!(restored_a.to_bits(), restored_b.to_bits());
    // the model left behind is the best-validation checkpoint
    assert!((restored_a - a.best_val_loss).abs() <= 1e-6, "{restored_a} vs {}", a.best_val_loss);
    if a.early_stopped {
        assert_eq!(a.stop_epoch, a.best_epoch + 5);
    }
}

#[test]
fn shared_teacher_between_train_and_val_is_rejected() {
    let data = toy();
    let (tr, mut va) = split(&data);
    va.push(tr[0]);
    let mut model = build_model::<f32>(&model_config(&data)).unwrap();
    let err = train(&mut model, &data, &tr, &va, &TrainConfig { max_epochs: 1, ..TrainConfig::default() }).unwrap_err();
    assert!(matches!(err, Error::Usage(_)), "{err}");
    assert!(err.to_string().contains(data.teacher_of(tr[0])));
}
