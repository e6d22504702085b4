use dfm::blocks::{Forward, Init};
use dfm::data::{FeatureDims, Modality, SegmentFeatures};
use dfm::model::{build_model, Batch, EncoderKind, FusionModel, ModelConfig};
use dfm::tensor::Tensor;

fn dims() -> FeatureDims {
    FeatureDims { text: 12, audio: 16, video: 8 }
}

fn segment(lt: usize, la: usize, seed: u64) -> SegmentFeatures {
    let d = dims();
    let mut init = Init::new(seed);
    SegmentFeatures {
        segment_id: format!("s{seed}"),
        teacher_id: "t".into(),
        lesson_id: "l".into(),
        text: init.normal(vec![lt, d.text], 1.0),
        audio: init.normal(vec![la, d.audio], 1.0),
        video: init.normal(vec![la, d.video], 1.0),
        duration_s: 960.0,
    }
}

fn permute_rows(t: &Tensor<f32>, perm: &[usize]) -> Tensor<f32> {
    let d = t.shape()[1];
    let data: Vec<f32> = perm.iter().flat_map(|&i| t.row(i).to_vec()).collect();
    Tensor::new(vec![perm.len(), d], data).unwrap()
}

fn pooled(model: &FusionModel<f64>, seg: &SegmentFeatures) -> Vec<f64> {
    let batch = Batch::new(&[seg], model.config.modalities.as_slice()).unwrap();
    let mut fwd = Forward::eval(&model.params);
    let v = model.pooled(&mut fwd, &batch).unwrap();
    fwd.tape.value(v).to_f64_vec()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn config(positional: bool, modules: usize) -> ModelConfig {
    ModelConfig {
        modalities: "T+A+V".parse().unwrap(),
        num_modules: modules,
        positional,
        dims: dims(),
        num_heads: 3,
        head_hidden: 10,
        seed: 5,
        ..ModelConfig::default()
    }
}

#[test]
fn cls_output_ignores_row_order_without_positions() {
    let seg = segment(6, 5, 1);
    let mut shuffled = seg.clone();
    shuffled.text = permute_rows(&seg.text, &[3, 0, 5, 1, 4, 2]);
    shuffled.audio = permute_rows(&seg.audio, &[4, 2, 0, 3, 1]);
    shuffled.video = permute_rows(&seg.video, &[1, 3, 4, 0, 2]);
    for modules in [1, 2] {
        let model = build_model::<f64>(&config(false, modules)).unwrap();
        let (a, b) = (pooled(&model, &seg), pooled(&model, &shuffled));
        assert!(max_diff(&a, &b) <= 1e-5, "M={modules}: {}", max_diff(&a, &b));

        let outs = |s: &SegmentFeatures| {
            let batch = Batch::new(&[s], model.config.modalities.as_slice()).unwrap();
            model.output_values(&batch).unwrap()
        };
        let (oa, ob) = (outs(&seg), outs(&shuffled));
        for (c, v) in &oa {
            assert!(max_diff(v, &ob[c]) <= 1e-5);
        }
    }
    // the check is sensitive: with positions on, order matters
    let model = build_model::<f64>(&config(true, 1)).unwrap();
    assert!(max_diff(&pooled(&model, &seg), &pooled(&model, &shuffled)) > 1e-5);
}

#[test]
fn identical_audio_chunks_can_be_reordered() {
    let mut seg = segment(4, 6, 2);
    let row = seg.audio.row(0).to_vec();
    seg.audio = Tensor::new(vec![6, dims().audio], row.repeat(6)).unwrap();
    let mut shuffled = seg.clone();
    shuffled.audio = permute_rows(&seg.audio, &[5, 4, 3, 2, 1, 0]);
    let model = build_model::<f64>(&ModelConfig {
        modalities: "T+A".parse().unwrap(),
        ..config(false, 1)
    })
    .unwrap();
    assert!(max_diff(&pooled(&model, &seg), &pooled(&model, &shuffled)) <= 1e-5);
}

#[test]
fn lstm_baseline_pools_to_3584_at_full_width() {
    let cfg = ModelConfig {
        encoder: EncoderKind::Lstm,
        modalities: "T+A".parse().unwrap(),
        lstm_layers: 1,
        head_hidden: 8,
        ..ModelConfig::default()
    };
    assert_eq!(cfg.pooled_dim(), 3584);
    let model = build_model::<f32>(&cfg).unwrap();
    let d = FeatureDims::default();
    let mut init = Init::new(3);
    let seg = SegmentFeatures {
        segment_id: "s".into(),
        teacher_id: "t".into(),
        lesson_id: "l".into(),
        text: init.normal(vec![2, d.text], 1.0),
        audio: init.normal(vec![2, d.audio], 1.0),
        video: init.normal(vec![2, d.video], 1.0),
        duration_s: 960.0,
    };
    let batch = Batch::new(&[&seg], &[Modality::Text, Modality::Audio]).unwrap();
    let mut fwd = Forward::eval(&model.params);
    let v = model.pooled(&mut fwd, &batch).unwrap();
    assert_eq!(fwd.tape.shape(v), &[1, 3584]);
    assert_eq!(model.components().len(), 3);
}
