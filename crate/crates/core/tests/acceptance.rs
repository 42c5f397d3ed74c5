//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use lvit_core::checkpoint::{from_bytes, to_bytes};
use lvit_core::data::{parse_phoenix, write_phoenix};
use lvit_core::eval::reference_table;
use lvit_core::gradcheck::model_grad_check;
use lvit_core::model::patchify;
use lvit_core::training::train_log_csv;
use lvit_core::{
    class_metrics, confusion, fit, gen_synthetic, macro_metrics, predict, CheckpointMeta, Lvit, LvitError,
    ModelConfig, RngState, Tape, TrainConfig, Tensor,
};

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_image(rng: &mut RngState) -> Tensor {
    Tensor::from_fn(&[48, 48], |_| rng.normal())
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let report = model_grad_check(0, 1e-5, None).map_err(|e| e.to_string())?;
    let err = report.max_rel_error();
    let took = start.elapsed();
    ensure(
        err < 1e-5 && took < Duration::from_secs(60),
        format!("max relative error {err:.3e} over {} tensors in {took:.2?}", report.per_param.len()),
    )
}

fn attention_normalization() -> Outcome {
    let mut worst = 0.0f64;
    let mut rows = 0usize;
    for pass in 0..100u64 {
        let mut rng = RngState::new(1000 + pass);
        let model = Lvit::init(ModelConfig::default(), &mut rng).map_err(|e| e.to_string())?;
        let img = random_image(&mut rng);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let trace = model
            .forward_traced(&mut tape, &bound, &[&img], &mut rng, pass % 2 == 0)
            .map_err(|e| e.to_string())?;
        for a in &trace.attention {
            let t = tape.value(*a);
            for row in t.data().chunks(t.last_dim()) {
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
                rows += 1;
            }
        }
    }
    ensure(worst < 1e-12, format!("{rows} rows, worst |sum - 1| = {worst:.3e}"))
}

fn permutation_invariance() -> Outcome {
    let mut rng = RngState::new(2);
    let mut model = Lvit::init(ModelConfig { dropout_p: 0.0, ..ModelConfig::default() }, &mut rng)
        .map_err(|e| e.to_string())?;
    let pos = model.params().pos_embed;
    model.store_mut().set_value(pos, Tensor::zeros(&[10, 256])).map_err(|e| e.to_string())?;
    let patches = patchify(model.config(), &random_image(&mut rng)).map_err(|e| e.to_string())?;
    let pd = patches.last_dim();
    let logits = |order: &[usize]| -> Result<Tensor, LvitError> {
        let data = order.iter().flat_map(|&r| patches.data()[r * pd..(r + 1) * pd].to_vec()).collect();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let p = tape.constant(Tensor::new(vec![1, 9, pd], data)?);
        let mut y = model.embed_sequence(&mut tape, &bound, p, &mut RngState::new(0), false)?;
        for layer in &bound.layers {
            y = model.encoder_layer(&mut tape, layer, y, &mut RngState::new(0), false)?.0;
        }
        let f0 = tape.select(y, 1, 0)?;
        let out = model.head(&mut tape, &bound, f0)?;
        Ok(tape.value(out).clone())
    };
    let base = logits(&(0..9).collect::<Vec<_>>()).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let mut order: Vec<usize> = (0..9).collect();
        for i in (1..9).rev() {
            order.swap(i, rng.below(i + 1));
        }
        worst = worst.max(logits(&order).map_err(|e| e.to_string())?.max_abs_diff(&base));
    }
    ensure(worst < 1e-9, format!("100 permutations, worst logit change {worst:.3e}"))
}

fn residual_identity() -> Outcome {
    let mut rng = RngState::new(3);
    let mut model = Lvit::init(ModelConfig::default(), &mut rng).map_err(|e| e.to_string())?;
    for l in model.params().layers.clone() {
        for id in [l.wo, l.bo, l.ffn2_w, l.ffn2_b] {
            let shape = model.store().get(id).value().shape().to_vec();
            model.store_mut().set_value(id, Tensor::zeros(&shape)).map_err(|e| e.to_string())?;
        }
    }
    let img = random_image(&mut rng);
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let trace =
        model.forward_traced(&mut tape, &bound, &[&img], &mut rng, false).map_err(|e| e.to_string())?;
    let input = tape.value(trace.embedded).data();
    let same = trace.layer_outputs.iter().all(|y| {
        tape.value(*y).data().iter().zip(input).all(|(a, b)| a.to_bits() == b.to_bits())
    });
    ensure(same, format!("{} layers, bitwise comparison of {} values", trace.layer_outputs.len(), input.len()))
}

fn overfit_run() -> Outcome {
    let start = Instant::now();
    let train = gen_synthetic(32, 7, 0.3).map_err(|e| e.to_string())?;
    let test = gen_synthetic(8, 8, 0.3).map_err(|e| e.to_string())?;
    let mut model = Lvit::init(ModelConfig { embed_dim: 64, ..ModelConfig::default() }, &mut RngState::new(7))
        .map_err(|e| e.to_string())?;
    let cfg = TrainConfig { epochs: 100, seed: 7, ..TrainConfig::default() };
    let reports = fit(&mut model, &train, &cfg, |_| {}).map_err(|e| e.to_string())?;
    let final_acc = reports.last().map_or(0.0, |r| r.train_accuracy);
    let first_99 = reports
        .iter()
        .position(|r| r.train_accuracy >= 0.99)
        .map_or_else(|| "never".to_string(), |e| e.to_string());
    let logits = model.logits_eval(&test.images(), 64).map_err(|e| e.to_string())?;
    let pred: Vec<usize> = logits.iter().map(predict).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let held_out = pred.iter().zip(test.labels()).filter(|(p, t)| **p == *t).count() as f64 / test.len() as f64;
    let took = start.elapsed();
    ensure(
        final_acc >= 0.99 && held_out >= 0.90 && took < Duration::from_secs(600),
        format!(
            "train accuracy {final_acc:.4} (first >= 0.99 at epoch {first_99}), held-out {held_out:.4}, {took:.1?}"
        ),
    )
}

fn metrics_oracle() -> Outcome {
    let mut rng = RngState::new(4);
    let mut worst = 0.0f64;
    let mut recall_mismatch = 0;
    for _ in 0..10_000 {
        let k = 2 + rng.below(9);
        let n = 1 + rng.below(100);
        let truth: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        let names: Vec<String> = (0..k).map(|i| i.to_string()).collect();
        let cm = confusion(&truth, &pred, &names).map_err(|e| e.to_string())?;
        for t in 0..k {
            for p in 0..k {
                let count = truth.iter().zip(&pred).filter(|(a, b)| **a == t && **b == p).count() as u64;
                if cm.get(t, p) != count {
                    return Err(format!("confusion cell ({t}, {p}) is {} not {count}", cm.get(t, p)));
                }
            }
        }
        let (mut sp, mut sr, mut sf) = (0.0, 0.0, 0.0);
        for c in 0..k {
            let pairs = || truth.iter().zip(&pred);
            let tp = pairs().filter(|(t, p)| **t == c && **p == c).count() as f64;
            let predicted = pairs().filter(|(_, p)| **p == c).count() as f64;
            let actual = pairs().filter(|(t, _)| **t == c).count() as f64;
            let p = if predicted > 0.0 { tp / predicted } else { 0.0 };
            let r = if actual > 0.0 { tp / actual } else { 0.0 };
            let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            let m = class_metrics(&cm, c);
            worst = worst.max((m.precision - p).abs()).max((m.recall - r).abs()).max((m.f1 - f).abs());
            if m.accuracy != m.recall {
                recall_mismatch += 1;
            }
            sp += p;
            sr += r;
            sf += f;
        }
        let report = macro_metrics(&cm).map_err(|e| e.to_string())?;
        let kf = k as f64;
        worst = worst
            .max((report.precision - sp / kf).abs())
            .max((report.recall - sr / kf).abs())
            .max((report.f1 - sf / kf).abs());
    }
    ensure(
        worst < 1e-12 && recall_mismatch == 0,
        format!("10000 label sets, worst deviation {worst:.3e}, accuracy != recall in {recall_mismatch} classes"),
    )
}

fn reference_average() -> Outcome {
    let table = reference_table();
    let i = table.method("LViT").ok_or("LViT row missing")?;
    let avg = table.average(i);
    ensure((avg - 97.75).abs() <= 0.01, format!("computed LViT average {avg:.4}, printed 97.75"))
}

fn cross_entropy_anchor() -> Outcome {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::full(&[1, 10], 0.37));
    let loss = tape.cross_entropy(z, &[6]).map_err(|e| e.to_string())?;
    let v = tape.value(loss).data()[0];
    let diff = (v - 10f64.ln()).abs();
    ensure(diff < 1e-12, format!("loss {v}, |loss - ln 10| = {diff:.3e}"))
}

fn checkpoint_round_trip() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.lvit");
    let model = Lvit::init(ModelConfig::default(), &mut RngState::new(5)).map_err(|e| e.to_string())?;
    let meta = CheckpointMeta { label_names: vec!["a".into(); 10], epoch: Some(79), seed: Some(5) };
    lvit_core::save_checkpoint(&model, &meta, &path).map_err(|e| e.to_string())?;
    let (back, _) = lvit_core::load_checkpoint(&path).map_err(|e| e.to_string())?;
    let bitwise = model.store().iter().zip(back.store().iter()).all(|(a, b)| {
        a.name() == b.name()
            && a.value().shape() == b.value().shape()
            && a.value().data().iter().zip(b.value().data()).all(|(x, y)| x.to_bits() == y.to_bits())
    }) && model.store().len() == back.store().len();
    let mut bytes = to_bytes(&model, &meta).map_err(|e| e.to_string())?;
    bytes[0] = b'X';
    let rejected = matches!(from_bytes(&bytes), Err(LvitError::Format(_)));
    ensure(
        bitwise && rejected,
        format!("{} tensors bitwise equal: {bitwise}; corrupted magic rejected: {rejected}", model.store().len()),
    )
}

fn determinism() -> Outcome {
    let data = gen_synthetic(4, 9, 0.3).map_err(|e| e.to_string())?;
    let run = || -> Result<String, LvitError> {
        let cfg = ModelConfig { embed_dim: 32, ..ModelConfig::default() };
        let mut model = Lvit::init(cfg, &mut RngState::new(9))?;
        let tc = TrainConfig { epochs: 4, batch_size: 16, seed: 9, ..TrainConfig::default() };
        train_log_csv(&fit(&mut model, &data, &tc, |_| {})?)
    };
    let a = run().map_err(|e| e.to_string())?;
    let b = run().map_err(|e| e.to_string())?;
    ensure(a == b, format!("two runs, {} log bytes each, identical: {}", a.len(), a == b))
}

fn phoenix_round_trip() -> Outcome {
    let mut details = Vec::new();
    for (rows, cols) in [(2usize, 2usize), (64, 64)] {
        let mut rng = RngState::new((rows * cols) as u64);
        let mag = Tensor::from_fn(&[rows, cols], |_| (rng.exponential() * 50.0) as f32 as f64);
        let mut fields = BTreeMap::new();
        fields.insert("TargetType".to_string(), "bmp2_tank".to_string());
        let bytes = write_phoenix(&fields, &mag, None);
        let (hdr, img) = parse_phoenix(&bytes).map_err(|e| e.to_string())?;
        if img.data() != mag.data() || hdr.fields.get("TargetType") != fields.get("TargetType") {
            return Err(format!("{rows}x{cols} round trip differs"));
        }
        let cut = bytes.len() - 4 * rows * cols - 1;
        if !matches!(parse_phoenix(&bytes[..cut]), Err(LvitError::Truncated(_))) {
            return Err(format!("{rows}x{cols} truncated payload accepted"));
        }
        details.push(format!("{rows}x{cols} exact, truncation rejected"));
    }
    Ok(details.join("; "))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 11] = [
        ("gradient fidelity", gradient_fidelity),
        ("attention normalization", attention_normalization),
        ("permutation invariance", permutation_invariance),
        ("residual identity", residual_identity),
        ("overfit run", overfit_run),
        ("metrics oracle", metrics_oracle),
        ("reference table average", reference_average),
        ("cross-entropy anchor", cross_entropy_anchor),
        ("checkpoint round trip", checkpoint_round_trip),
        ("determinism", determinism),
        ("phoenix parser", phoenix_round_trip),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
