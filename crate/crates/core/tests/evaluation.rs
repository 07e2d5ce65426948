use cohar_core::data::{cover_windows, generate_synthetic, stack_windows, windows_at, SynthConfig, Window};
use cohar_core::metrics::{accuracy, evaluate, macro_f1, predict_sequences};
use cohar_core::model::{predict_dense, UNetShape};
use cohar_core::{IndependentUNet, LabelModel, SeededRng};

fn small_data() -> cohar_core::data::Dataset {
    generate_synthetic(&SynthConfig {
        num_sequences: 3,
        duration_s: 8.0,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn model(ds: &cohar_core::data::Dataset) -> IndependentUNet {
    let shape = UNetShape {
        depth: 2,
        base_channels: 4,
        kernel_size: 3,
    };
    IndependentUNet::build(6, ds.labels.clone(), shape, &mut SeededRng::new(5)).unwrap()
}

#[test]
fn all_null_model_scores_null_prevalence() {
    let ds = small_data();
    let mut m = model(&ds);
    for p in m.params_mut() {
        p.data_mut().fill(0.0);
    }
    let (report, _) = evaluate(&m, &ds, 32, 16).unwrap();
    for (h, lm) in report.labels.iter().enumerate() {
        let null = ds.class_prevalence(h)[0];
        assert!((lm.accuracy - null).abs() < 1e-12);
    }
    assert_eq!(report.samples, ds.total_steps());
}

#[test]
fn evaluate_matches_flat_oracle() {
    let ds = small_data();
    let m = model(&ds);
    let (report, preds) = evaluate(&m, &ds, 32, 16).unwrap();
    for h in 0..2 {
        let p: Vec<usize> = preds.iter().flat_map(|s| s[h].clone()).collect();
        let t: Vec<usize> = ds.sequences.iter().flat_map(|s| s.y[h].clone()).collect();
        assert_eq!(p.len(), ds.total_steps());
        assert_eq!(report.labels[h].accuracy, accuracy(&p, &t).unwrap());
        assert_eq!(report.labels[h].macro_f1, macro_f1(&p, &t, ds.labels[h].num_classes).unwrap());
    }
    let (again, _) = evaluate(&m, &ds, 32, 16).unwrap();
    assert_eq!(report, again);
}

#[test]
fn overlapping_windows_resolve_to_nearest_center() {
    let ds = small_data();
    let m = model(&ds);
    let (l, s) = (32, 16);
    let preds = predict_sequences(&m, &ds, l, s).unwrap();
    for (i, seq) in ds.sequences.iter().enumerate() {
        let offs = cover_windows(seq.len(), l, s).unwrap();
        let windows = windows_at(&ds, i, &offs, l);
        let per_window: Vec<Vec<Vec<usize>>> = windows
            .iter()
            .map(|w| {
                let (x, _) = stack_windows(&[w as &Window]).unwrap();
                predict_dense(&m, &x).unwrap()
            })
            .collect();
        for t in 0..seq.len() {
            let mut best = (f64::INFINITY, 0);
            for (wi, &o) in offs.iter().enumerate() {
                if t >= o && t < o + l {
                    let d = (t as f64 - (o as f64 + (l as f64 - 1.0) / 2.0)).abs();
                    if d < best.0 {
                        best = (d, wi);
                    }
                }
            }
            for h in 0..2 {
                assert_eq!(preds[i][h][t], per_window[best.1][h][t - offs[best.1]]);
            }
        }
    }
}

#[test]
fn label_mismatch_is_a_contract_error() {
    let ds = small_data();
    let m = model(&ds);
    let mut other = ds.clone();
    other.labels[1].num_classes = 10;
    assert!(matches!(
        evaluate(&m, &other, 32, 16),
        Err(cohar_core::Error::Contract(_))
    ));
}
