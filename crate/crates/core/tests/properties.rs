use ndarray::{Array1, Array2};
use proptest::prelude::*;

use pulsekit::checkpoint::Checkpoint;
use pulsekit::data::{parse_record, record_to_csv, LabeledRecord};
use pulsekit::denoiser::{soft_threshold, Activation, DenoiserArch, Mlp};
use pulsekit::eval::{bland_altman, compute_metrics};
use pulsekit::training::standardized_mse;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-10.0f64..10.0, rows * cols)
        .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn frobenius(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn pairs() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((40.0f64..180.0, 40.0f64..180.0), 1..60)
}

proptest! {
    #[test]
    fn soft_threshold_is_nonexpansive(a in matrix(8, 3), b in matrix(8, 3), tau in 0.0f64..5.0, complex: bool) {
        let (pa, pb) = (soft_threshold(a.view(), tau, complex), soft_threshold(b.view(), tau, complex));
        prop_assert!(frobenius(&(&pa - &pb)) <= frobenius(&(&a - &b)) * (1.0 + 1e-12) + 1e-12);
    }

    #[test]
    fn soft_threshold_shrinks(a in matrix(8, 3), tau in 0.0f64..5.0, complex: bool) {
        let p = soft_threshold(a.view(), tau, complex);
        let n = a.nrows() / 2;
        for c in 0..a.ncols() {
            if complex {
                for i in 0..n {
                    let before = a[[i, c]].hypot(a[[n + i, c]]);
                    let after = p[[i, c]].hypot(p[[n + i, c]]);
                    prop_assert!((after - (before - tau).max(0.0)).abs() <= 1e-9 * (1.0 + before));
                }
            } else {
                for i in 0..a.nrows() {
                    prop_assert!((p[[i, c]].abs() - (a[[i, c]].abs() - tau).max(0.0)).abs() <= 1e-12);
                    prop_assert!(p[[i, c]] * a[[i, c]] >= 0.0);
                }
            }
        }
    }

    #[test]
    fn standardized_mse_ignores_column_scale_and_offset(
        pred in matrix(30, 2),
        target in matrix(30, 2),
        scale in prop::collection::vec(0.1f64..20.0, 2),
        shift in prop::collection::vec(-50.0f64..50.0, 2),
    ) {
        prop_assume!((0..2).all(|c| pred.column(c).std(0.0) > 1e-3));
        let moved = Array2::from_shape_fn(pred.dim(), |(i, c)| pred[[i, c]] * scale[c] + shift[c]);
        let (a, _) = standardized_mse(pred.view(), target.view()).unwrap();
        let (b, _) = standardized_mse(moved.view(), target.view()).unwrap();
        prop_assert!((a - b).abs() <= 1e-8 * (1.0 + a.abs()), "{a} vs {b}");
    }

    #[test]
    fn checkpoint_round_trips(seed in 0u64..1000, complex: bool, io in 1usize..6, hidden in 1usize..6, depth in 1usize..4) {
        let arch = DenoiserArch { io_dim: io, hidden_dim: hidden, depth, activation: Activation::Tanh, complex, injection: depth > 1 };
        let net = Mlp::init(arch, seed, seed % 2 == 0).unwrap();
        let ckpt = Checkpoint::new(serde_json::json!({ "seed": seed })).with_network("r", net);
        let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(back, ckpt);
    }

    #[test]
    fn record_csv_round_trips(
        regions in matrix(12, 3),
        ppg in prop::collection::vec(-5.0f64..5.0, 12),
        fs in prop::sample::select(vec![25.0, 30.0, 60.0]),
    ) {
        let rec = LabeledRecord { regions, ppg: Array1::from(ppg), hr_series: None, fs, subject_id: "s".into() };
        let back = parse_record(&record_to_csv(&rec), "s").unwrap();
        prop_assert_eq!(back, rec);
    }

    #[test]
    fn metrics_are_ordered(p in pairs()) {
        let m = compute_metrics(&p).unwrap();
        prop_assert!(m.mae_bpm <= m.rmse_bpm * (1.0 + 1e-12));
        prop_assert!((0.0..=100.0).contains(&m.pte6_pct));
        if let Some(r) = m.pearson_rho {
            prop_assert!((-1.0..=1.0).contains(&r));
        }
    }

    #[test]
    fn bland_altman_shifts_with_bias(p in pairs(), bias in -20.0f64..20.0) {
        let a = bland_altman(&p).unwrap();
        let shifted: Vec<_> = p.iter().map(|(g, q)| (*g, q + bias)).collect();
        let b = bland_altman(&shifted).unwrap();
        prop_assert!((b.mean_diff_bpm - a.mean_diff_bpm - bias).abs() < 1e-9);
        prop_assert!((b.loa_low - a.loa_low - bias).abs() < 1e-9);
        prop_assert!((b.loa_high - a.loa_high - bias).abs() < 1e-9);
    }
}
