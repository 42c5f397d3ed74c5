//! End-to-end behaviour of the training loop.

use lvit_core::training::{adam_step, evaluate_loss, AdamState};
use lvit_core::{
    fit, gen_synthetic, lr_at, save_checkpoint, CheckpointMeta, Dataset, Lvit, LvitError, ModelConfig, ParamStore,
    RngState, Sample, TrainConfig, Tensor,
};
use proptest::prelude::*;

fn small(dropout_p: f64, seed: u64) -> Lvit {
    let cfg = ModelConfig { embed_dim: 16, num_heads: 2, num_layers: 1, dropout_p, ..ModelConfig::default() };
    Lvit::init(cfg, &mut RngState::new(seed)).unwrap()
}

fn subset(data: &Dataset, n: usize) -> Dataset {
    Dataset::new(data.samples[..n].to_vec(), data.label_names.clone()).unwrap()
}

#[test]
fn single_sample_overfits_monotonically() {
    let data = subset(&gen_synthetic(1, 3, 0.3).unwrap(), 1);
    let mut m = small(0.0, 1);
    // One step per epoch: keep the rate constant so the run can actually converge.
    let cfg = TrainConfig { epochs: 600, batch_size: 1, seed: 2, decay_gamma: 1.0, ..TrainConfig::default() };
    let losses: Vec<f64> = fit(&mut m, &data, &cfg, |_| {}).unwrap().iter().map(|r| r.mean_loss).collect();
    for w in losses[5..].windows(2) {
        assert!(w[1] < w[0], "loss rose from {} to {}", w[0], w[1]);
    }
    assert!(*losses.last().unwrap() < 0.01, "final loss {}", losses.last().unwrap());
}

#[test]
fn identical_runs_are_bitwise_identical() {
    let data = gen_synthetic(3, 4, 0.3).unwrap();
    let cfg = TrainConfig { epochs: 3, batch_size: 8, seed: 11, ..TrainConfig::default() };
    let run = |p: f64| {
        let mut m = small(p, 5);
        let reports = fit(&mut m, &data, &cfg, |_| {}).unwrap();
        let losses: Vec<u64> = reports.iter().map(|r| r.mean_loss.to_bits()).collect();
        (losses, m.store().iter().map(|p| p.value().clone()).collect::<Vec<_>>())
    };
    for p in [0.0, 0.3] {
        let (la, pa) = run(p);
        let (lb, pb) = run(p);
        assert_eq!(la, lb);
        assert!(pa.iter().zip(&pb).all(|(a, b)| a.data() == b.data()));
    }
}

#[test]
fn warm_start_continues_from_donor() {
    let data = gen_synthetic(2, 6, 0.3).unwrap();
    let mut donor = small(0.0, 7);
    let warmup = TrainConfig { epochs: 2, batch_size: 8, seed: 1, ..TrainConfig::default() };
    fit(&mut donor, &data, &warmup, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("donor.lvit");
    save_checkpoint(&donor, &CheckpointMeta::default(), &path).unwrap();
    let (donor_loss, _) = evaluate_loss(&donor, &data, data.len()).unwrap();

    let mut fresh = small(0.0, 99);
    let cfg = TrainConfig { epochs: 1, batch_size: data.len(), warm_start: Some(path), ..TrainConfig::default() };
    let reports = fit(&mut fresh, &data, &cfg, |_| {}).unwrap();
    assert!((reports[0].mean_loss - donor_loss).abs() < 1e-12);

    let mut wider = Lvit::init(ModelConfig { embed_dim: 32, ..donor.config().clone() }, &mut RngState::new(0)).unwrap();
    assert!(matches!(fit(&mut wider, &data, &cfg, |_| {}), Err(LvitError::Compat(_))));
}

#[test]
fn fit_rejects_bad_inputs() {
    let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
    let names = vec!["a".to_string()];
    let empty = Dataset::new(vec![], names.clone()).unwrap();
    assert!(matches!(fit(&mut small(0.0, 1), &empty, &cfg, |_| {}), Err(LvitError::Contract(_))));

    let mut labels: Vec<String> = (0..12).map(|i| format!("c{i:02}")).collect();
    labels.sort();
    let sample = Sample { image: Tensor::zeros(&[48, 48]), label: 11, source_id: "s11".into() };
    let wide = Dataset::new(vec![sample], labels).unwrap();
    match fit(&mut small(0.0, 1), &wide, &cfg, |_| {}) {
        Err(LvitError::Contract(msg)) => assert!(msg.contains("s11")),
        other => panic!("expected contract error, got {other:?}"),
    }
}

#[test]
fn non_finite_loss_names_epoch_and_batch() {
    let data = gen_synthetic(1, 1, 0.3).unwrap();
    let mut m = small(0.0, 1);
    let id = m.params().head_b;
    m.store_mut().set_value(id, Tensor::full(&[10], f64::NAN)).unwrap();
    let cfg = TrainConfig { epochs: 2, batch_size: 4, ..TrainConfig::default() };
    match fit(&mut m, &data, &cfg, |_| {}) {
        Err(LvitError::NonFinite(msg)) => assert!(msg.contains("epoch 0") && msg.contains("batch 0"), "{msg}"),
        other => panic!("expected non-finite error, got {other:?}"),
    }
}

#[test]
fn on_epoch_sees_every_report() {
    let data = gen_synthetic(1, 2, 0.3).unwrap();
    let cfg = TrainConfig { epochs: 3, batch_size: 4, ..TrainConfig::default() };
    let mut seen = Vec::new();
    let reports = fit(&mut small(0.3, 1), &data, &cfg, |r| seen.push(r.clone())).unwrap();
    assert_eq!(seen, reports);
    assert!(reports.iter().all(|r| r.mean_loss.is_finite() && (0.0..=1.0).contains(&r.train_accuracy)));
    assert_eq!(reports.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![0, 1, 2]);
}

proptest! {
    #[test]
    fn lr_never_increases(gamma in 0.01f64..=1.0, every in 1usize..10, epoch in 0usize..500) {
        let cfg = TrainConfig { decay_gamma: gamma, decay_every: every, ..TrainConfig::default() };
        prop_assert!(lr_at(epoch + 1, &cfg) <= lr_at(epoch, &cfg));
    }

    #[test]
    fn adam_with_zero_gradient_is_a_no_op(steps in 1usize..20, seed in any::<u64>()) {
        let mut rng = RngState::new(seed);
        let mut store = ParamStore::new();
        store.add("w", Tensor::from_fn(&[3, 2], |_| rng.normal())).unwrap();
        let before = store.iter().next().unwrap().value().clone();
        let mut state = AdamState::new(&store);
        let cfg = TrainConfig::default();
        for _ in 0..steps {
            adam_step(&mut store, &mut state, 1e-3, &cfg).unwrap();
        }
        prop_assert_eq!(state.step_count(), steps as u64);
        prop_assert_eq!(store.iter().next().unwrap().value().data(), before.data());
    }

    #[test]
    fn cross_entropy_is_non_negative(seed in any::<u64>(), k in 2usize..12) {
        let mut rng = RngState::new(seed);
        let mut tape = lvit_core::Tape::new();
        let z = tape.constant(Tensor::from_fn(&[3, k], |_| 20.0 * rng.normal()));
        let labels = [0, k - 1, k / 2];
        let l = tape.cross_entropy(z, &labels).unwrap();
        prop_assert!(tape.value(l).data()[0] >= 0.0);
    }
}
