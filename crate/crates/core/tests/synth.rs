use dfm::data::{generate_synthetic, Dataset, FeatureDims, Modality, SignalStrength, SynthConfig};
use dfm::eval::qwk;
use dfm::objective::{round_to_rating, Component};
use nalgebra::{DMatrix, DVector};

fn dataset(signal: f64, noise_sd: f64, seed: u64) -> Dataset {
    generate_synthetic(&SynthConfig {
        n_teachers: 100,
        segments_per_teacher: 4,
        signal: SignalStrength::uniform(signal),
        noise_sd,
        students_per_teacher: 1,
        dims: FeatureDims { text: 8, audio: 8, video: 8 },
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

/// Intercept plus the per-modality mean embedding.
fn design(data: &Dataset, idx: &[usize]) -> DMatrix<f64> {
    let width = 1 + Modality::ALL.iter().map(|&m| data.manifest.dims.of(m)).sum::<usize>();
    DMatrix::from_fn(idx.len(), width, |r, c| {
        if c == 0 {
            return 1.0;
        }
        let seg = &data.segments[idx[r]];
        let mut c = c - 1;
        for m in Modality::ALL {
            let x = seg.get(m);
            let d = x.shape()[1];
            if c < d {
                let n = x.shape()[0];
                return (0..n).map(|i| x.row(i)[c] as f64).sum::<f64>() / n as f64;
            }
            c -= d;
        }
        unreachable!()
    })
}

/// Ridge readout fit on the first 70 teachers, QWK on the rest.
fn readout_qwk(data: &Dataset, c: Component) -> f64 {
    let cut = format!("t{:03}", 70);
    let (train, test): (Vec<usize>, Vec<usize>) = (0..data.len()).partition(|&i| data.teacher_of(i) < cut.as_str());
    let x = design(data, &train);
    let y = DVector::from_iterator(train.len(), train.iter().map(|&i| data.label(i, c).value()));
    let gram = x.transpose() * &x + DMatrix::identity(x.ncols(), x.ncols()) * 1e-6;
    let beta = gram.cholesky().expect("gram matrix is positive definite").solve(&(x.transpose() * y));
    let pred = design(data, &test) * beta;
    let truth: Vec<usize> = test.iter().map(|&i| data.label(i, c).index()).collect();
    let guess: Vec<usize> = pred.iter().map(|&v| round_to_rating(v).index()).collect();
    qwk(&truth, &guess, 7).unwrap()
}

#[test]
fn planted_signal_is_linearly_recoverable() {
    let data = dataset(1.0, 0.0, 3);
    for c in Component::ALL {
        let k = readout_qwk(&data, c);
        assert!(k > 0.95, "{c}: readout qwk {k}");
    }
}

#[test]
fn zero_signal_leaves_nothing_to_read() {
    let data = dataset(0.0, 0.5, 4);
    for c in Component::ALL {
        let k = readout_qwk(&data, c);
        assert!(k.abs() < 0.25, "{c}: readout qwk {k}");
    }
}

#[test]
fn asymmetric_signal_lives_in_the_expected_modality() {
    let data = generate_synthetic(&SynthConfig {
        n_teachers: 100,
        signal: SignalStrength::asymmetric(),
        noise_sd: 0.0,
        students_per_teacher: 1,
        dims: FeatureDims { text: 8, audio: 8, video: 8 },
        seed: 5,
        ..SynthConfig::default()
    })
    .unwrap();
    // drop one modality by zeroing it, then read out again
    let without = |m: Modality| {
        let mut d = data.clone();
        for s in &mut d.segments {
            let x = match m {
                Modality::Text => &mut s.text,
                Modality::Audio => &mut s.audio,
                Modality::Video => &mut s.video,
            };
            x.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        d
    };
    let no_audio = without(Modality::Audio);
    let no_text = without(Modality::Text);
    assert!(readout_qwk(&no_audio, Component::Nature) < 0.3);
    assert!(readout_qwk(&no_text, Component::Nature) > 0.95);
    assert!(readout_qwk(&no_text, Component::Questioning) < 0.3);
    assert!(readout_qwk(&no_audio, Component::Questioning) > 0.95);
}
