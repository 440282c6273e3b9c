//! Loss properties, reproducibility, resumption and persistence of training.

mod support;

use jpdvt::denoiser::DenoiserConfig;
use jpdvt::posenc::Layout;
use jpdvt::trainer::{loss_graph, run, Checkpoint, CheckpointError, RunOptions, TrainConfig, Trainer};
use jpdvt::Error;
use support::{tiny_config, toy_set};
use tensorlab::Graph;

fn trained_a_little(cfg: TrainConfig, layout: Layout) -> Trainer {
    let mut t = Trainer::new(cfg, toy_set(12, layout)).unwrap();
    for _ in 0..t.total_steps() {
        t.step().unwrap();
    }
    t
}

#[test]
fn zero_prediction_scores_unit_loss() {
    let cfg = TrainConfig {
        batch_size: 100,
        ..tiny_config()
    };
    let mut t = Trainer::new(cfg, toy_set(40, Layout::square(2))).unwrap();
    // Fresh output heads are zero, so the loss is the mean squared noise.
    let mean = (0..100)
        .map(|s| {
            let b = t.batch(s).unwrap();
            t.evaluate_loss(&b).unwrap()
        })
        .sum::<f64>()
        / 100.0;
    assert!((mean - 1.0).abs() <= 0.02, "{mean}");
}

#[test]
fn loss_ignores_presentation_order() {
    for masked in [false, true] {
        let mut t = trained_a_little(
            TrainConfig {
                masked,
                lr: 1e-2,
                ..tiny_config()
            },
            Layout::square(3),
        );
        let batch = t.batch(7).unwrap();
        let base = t.evaluate_loss(&batch).unwrap();
        for perm in [vec![8, 7, 6, 5, 4, 3, 2, 1, 0], vec![3, 0, 4, 1, 5, 2, 6, 8, 7]] {
            let moved = t.evaluate_loss(&batch.permute_rows(&perm)).unwrap();
            assert!((moved - base).abs() <= 1e-6, "masked={masked}: {moved} vs {base}");
        }
    }
}

#[test]
fn masked_loss_without_missing_rows_is_the_position_loss() {
    let mut t = trained_a_little(
        TrainConfig {
            masked: true,
            lr: 1e-2,
            ..tiny_config()
        },
        Layout::square(2),
    );
    let mut batch = t.batch(3).unwrap().cast::<f64>();
    batch.missing.iter_mut().for_each(|m| *m = false);
    let params = t.params().cast::<f64>();
    let cfg = t.config().clone();
    let mut g = Graph::new();
    let w = params.bind(&mut g);
    let sched = cfg.schedule().build().unwrap();
    let parts = loss_graph(&mut g, &w, t.model_config(), &batch, &sched, &cfg.weights(), None).unwrap();
    assert!(parts.content.is_none());
    let aux = g.value(parts.aux.unwrap()).item();
    let total = g.value(parts.total).item();
    let pe = g.value(parts.pe).item();
    assert!((total - cfg.aux_weight * aux - pe).abs() <= 1e-6);
}

#[test]
fn same_seed_same_trajectory() {
    let run = |seed| {
        let mut t = Trainer::new(
            TrainConfig {
                seed,
                ..tiny_config()
            },
            toy_set(12, Layout::square(2)),
        )
        .unwrap();
        let losses: Vec<u64> = (0..6).map(|_| t.step().unwrap().loss.to_bits()).collect();
        (losses, t.checkpoint().to_bytes().unwrap())
    };
    assert_eq!(run(3), run(3));
    assert_ne!(run(3).0, run(4).0);
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let data = || toy_set(12, Layout::square(2));
    let whole = trained_a_little(tiny_config(), Layout::square(2));

    let mut first = Trainer::new(tiny_config(), data()).unwrap();
    for _ in 0..3 {
        first.step().unwrap();
    }
    let bytes = first.checkpoint().to_bytes().unwrap();
    let mut second = Trainer::resume(Checkpoint::from_bytes(&bytes).unwrap(), data()).unwrap();
    while !second.is_done() {
        second.step().unwrap();
    }
    assert_eq!(second.checkpoint().to_bytes().unwrap(), whole.checkpoint().to_bytes().unwrap());
}

#[test]
fn checkpoint_file_roundtrip_and_rejections() {
    let dir = tempfile::tempdir().unwrap();
    let t = trained_a_little(
        TrainConfig {
            masked: true,
            ..tiny_config()
        },
        Layout::square(2),
    );
    let path = dir.path().join("c.bin");
    let ckpt = t.checkpoint();
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.to_bytes().unwrap(), std::fs::read(&path).unwrap());
    assert_eq!(back.train, ckpt.train);
    assert_eq!(back.step, 6);
    for ((a, x), (b, y)) in back.params.iter().zip(ckpt.params.iter()) {
        assert_eq!(a, b);
        assert_eq!(x.data(), y.data());
    }
    assert_eq!(back.adam.step_count(), ckpt.adam.step_count());

    let other = DenoiserConfig {
        hidden: 16,
        ..ckpt.model.clone()
    };
    let err = Checkpoint::load_expecting(&path, &other).unwrap_err();
    let text = err.to_string();
    assert!(matches!(err, Error::Checkpoint(CheckpointError::ConfigMismatch { .. })));
    assert!(text.contains("\"hidden\":16") && text.contains("\"hidden\":8"), "{text}");

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[1] = b'Q';
    std::fs::write(&path, &bytes).unwrap();
    let err = Checkpoint::load(&path).unwrap_err();
    assert!(err.to_string().contains("JPDVT1"), "{err}");

    bytes[1] = b'P';
    bytes.truncate(bytes.len() / 2);
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(
        Checkpoint::load(&path),
        Err(Error::Checkpoint(CheckpointError::Truncated { .. }))
    ));
}

#[test]
fn divergence_stops_with_last_good_state() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(
        TrainConfig {
            lr: 1e38,
            steps: 20,
            ..tiny_config()
        },
        toy_set(12, Layout::square(2)),
    )
    .unwrap();
    let err = run(&mut t, dir.path(), &[], &RunOptions::default(), |_| {}).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "{err}");
    let done = t.steps_done();
    assert!(done < 20);
    let saved = Checkpoint::load(&dir.path().join(format!("ckpt_{done}.bin"))).unwrap();
    assert!(saved.params.iter().all(|(_, p)| p.is_finite()));
    let rows = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap().lines().count();
    assert_eq!(rows as u64, done + 1);
}

fn window_means(losses: &[f64], width: usize) -> Vec<f64> {
    losses.chunks(width).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
}

#[test]
fn toy_corpora_loss_falls_every_window() {
    let (spatial, _) = support::spatial_corpus(21, 300, 0);
    let (temporal, _) = support::temporal_corpus(22, 300, 0);
    for (name, data) in [("spatial", spatial), ("temporal", temporal)] {
        let cfg = TrainConfig {
            layers: 2,
            hidden: 32,
            mlp: 64,
            heads: 2,
            time_freq: 16,
            batch_size: 8,
            ..support::desk_config(5000, false, false)
        };
        let mut t = Trainer::new(cfg, jpdvt::trainer::TrainSet::from_instances(&data).unwrap()).unwrap();
        let losses: Vec<f64> = (0..5000).map(|_| t.step().unwrap().loss).collect();
        let means = window_means(&losses, 500);
        for pair in means.windows(2) {
            assert!(pair[1] < pair[0], "{name}: {means:?}");
        }
    }
}
