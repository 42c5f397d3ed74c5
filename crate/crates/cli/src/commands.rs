//! Subcommand implementations.

use std::fs;
use std::path::Path;

use lvit_core::data::decode_image;
use lvit_core::eval::{render_heatmap, write_confusion_csv};
use lvit_core::gradcheck::{model_grad_check, MODEL_CHECK_TOLERANCE};
use lvit_core::model::probabilities;
use lvit_core::training::{train_log_csv, warm_start};
use lvit_core::{
    confusion, fit, gen_synthetic, load_checkpoint, load_image_dir, macro_metrics, predict, preprocess,
    save_checkpoint, write_atomic, CheckpointMeta, Dataset, KvMap, Lvit, LvitError, ModelConfig, ResizeMode, RngState,
    TrainConfig,
};

use crate::config::{self, Source};
use crate::{exit, EvalArgs, Failure, GradcheckArgs, HeatmapFormat, PredictArgs, SynthArgs, TrainArgs};

/// Data loading errors all map to the data exit code.
fn data_err(e: LvitError) -> Failure {
    Failure::new(exit::DATA, e.to_string())
}

fn checkpoint_err(path: &Path, e: LvitError) -> Failure {
    Failure::new(exit::MISMATCH, format!("checkpoint {}: {e}", path.display()))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::new(exit::DATA, format!("cannot create {}: {e}", dir.display())))
}

fn load_data(source: &Source, mode: ResizeMode, seed: u64) -> Result<Dataset, Failure> {
    match source {
        Source::Dir(dir) => load_image_dir(dir, mode, None).map_err(data_err),
        Source::Synthetic { per_class, noise } => gen_synthetic(*per_class, seed, *noise).map_err(data_err),
    }
}

pub fn train(args: TrainArgs) -> Result<(), Failure> {
    let rc = config::resolve_train(&args)?;
    create_dir(&rc.out)?;
    write_atomic(&rc.out.join("config.resolved"), rc.resolved.to_text().as_bytes())?;

    let data = load_data(&rc.source, rc.resize_mode, rc.train.seed)?;
    let k = rc.model.num_classes;
    if data.num_classes() != k {
        return Err(Failure::new(
            exit::DATA,
            format!("data has {} classes but the model is configured for {k}", data.num_classes()),
        ));
    }

    let mut model = Lvit::init(rc.model.clone(), &mut RngState::new(rc.train.seed))?;
    if let Some(path) = &rc.train.warm_start {
        warm_start(&mut model, path).map_err(|e| checkpoint_err(path, e))?;
    }
    let cfg = TrainConfig { warm_start: None, ..rc.train.clone() };
    eprintln!("training on {} samples, {} classes, {} parameters", data.len(), k, model.store().num_scalars());
    let reports = fit(&mut model, &data, &cfg, |r| {
        eprintln!(
            "epoch {:>3}/{}  loss {:.5}  accuracy {:.4}  lr {:.3e}  {:.2}s",
            r.epoch + 1,
            cfg.epochs,
            r.mean_loss,
            r.train_accuracy,
            r.lr,
            r.seconds
        );
    })?;

    let meta = CheckpointMeta {
        label_names: data.label_names.clone(),
        epoch: Some(cfg.epochs),
        seed: Some(cfg.seed),
    };
    save_checkpoint(&model, &meta, &rc.out.join("checkpoint.lvit"))?;
    write_atomic(&rc.out.join("train_log.csv"), train_log_csv(&reports)?.as_bytes())?;
    if let Some(last) = reports.last() {
        println!("final loss {}  train accuracy {}", last.mean_loss, last.train_accuracy);
    }
    println!("artifacts written to {}", rc.out.display());
    Ok(())
}

/// Model keys given on the eval side must agree with the checkpoint. Dropout is
/// irrelevant at evaluation time and is not compared.
fn check_model_keys(requested: &KvMap, model: &ModelConfig) -> Result<(), Failure> {
    let stored = model.to_kv();
    let mut diffs = Vec::new();
    for &key in ModelConfig::keys().iter().filter(|&&k| k != "dropout_p") {
        if let (Some(want), Some(have)) = (requested.get(key), stored.get(key)) {
            let same = match (want.parse::<f64>(), have.parse::<f64>()) {
                (Ok(a), Ok(b)) => a == b,
                _ => want == have,
            };
            if !same {
                diffs.push(format!("{key}: config {want}, checkpoint {have}"));
            }
        }
    }
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(Failure::new(exit::MISMATCH, format!("checkpoint does not match config ({})", diffs.join("; "))))
    }
}

pub fn eval(args: EvalArgs) -> Result<(), Failure> {
    let mut flags = KvMap::new();
    config::apply_data_flags(&mut flags, &args.data);
    if let Some(s) = args.seed {
        flags.set("seed", s);
    }
    if let Some(o) = &args.out {
        flags.set("out", o.display());
    }
    let m = config::layered(args.config.as_deref(), &flags)?;
    let seed = m.get_parsed::<u64>("seed").map_err(Failure::from_lvit)?.unwrap_or(0);
    let (source, mode) = config::source_of(&m)?;
    let out = m
        .get("out")
        .map(std::path::PathBuf::from)
        .ok_or_else(|| Failure::new(exit::CONFIG, "no output directory: pass --out DIR"))?;

    let (model, meta) = load_checkpoint(&args.checkpoint).map_err(|e| checkpoint_err(&args.checkpoint, e))?;
    check_model_keys(&m, model.config())?;

    let mut resolved = KvMap::new();
    resolved.set("checkpoint", args.checkpoint.display());
    match &source {
        Source::Dir(p) => resolved.set("data", p.display()),
        Source::Synthetic { per_class, noise } => {
            resolved.set("synthetic", per_class);
            resolved.set("noise", noise);
        }
    }
    resolved.set("seed", seed);
    resolved.set("resize_mode", mode);
    resolved.set("out", out.display());
    create_dir(&out)?;
    write_atomic(&out.join("eval.resolved"), resolved.to_text().as_bytes())?;

    let data = load_data(&source, mode, seed)?;
    let k = model.config().num_classes;
    if data.num_classes() != k {
        return Err(Failure::new(
            exit::MISMATCH,
            format!("checkpoint has {k} classes but the data has {}", data.num_classes()),
        ));
    }
    if !meta.label_names.is_empty() && meta.label_names != data.label_names {
        eprintln!("warning: data class names differ from the names stored in the checkpoint");
    }

    let logits = model.logits_eval(&data.images(), 64)?;
    let predicted = logits.iter().map(predict).collect::<lvit_core::Result<Vec<_>>>().map_err(|e| {
        Failure::new(exit::NUMERICAL, e.to_string())
    })?;
    let cm = confusion(&data.labels(), &predicted, &data.label_names)?;
    let report = macro_metrics(&cm)?;
    let heatmap = match args.heatmap_format {
        HeatmapFormat::Ppm => "heatmap.ppm",
        HeatmapFormat::Png => "heatmap.png",
    };
    write_confusion_csv(&cm, &out.join("confusion.csv"))?;
    render_heatmap(&cm, &out.join(heatmap), args.heatmap_scale.into())?;
    write_atomic(&out.join("metrics.txt"), report.to_text().as_bytes())?;

    println!("overall accuracy {}", report.overall_accuracy);
    println!("macro precision {}  recall {}  f1 {}", report.precision, report.recall, report.f1);
    Ok(())
}

pub fn predict_cmd(args: PredictArgs) -> Result<(), Failure> {
    let (model, meta) = load_checkpoint(&args.checkpoint).map_err(|e| checkpoint_err(&args.checkpoint, e))?;
    let (raw, h, w) = decode_image(&args.image).map_err(data_err)?;
    let img = preprocess(&raw, h, w, args.resize_mode).map_err(|e| {
        Failure::new(exit::DATA, format!("{}: {e}", args.image.display()))
    })?;
    let logits = model.forward(&img, &mut RngState::new(0), false)?;
    let label = predict(&logits).map_err(|e| Failure::new(exit::NUMERICAL, e.to_string()))?;
    let k = model.config().num_classes;
    let names: Vec<String> =
        if meta.label_names.len() == k { meta.label_names } else { (0..k).map(|i| format!("class{i}")).collect() };
    println!("predicted {} ({label})", names[label]);
    for (name, p) in names.iter().zip(probabilities(&logits)) {
        println!("{name}\t{p}");
    }
    Ok(())
}

pub fn gradcheck(args: GradcheckArgs) -> Result<(), Failure> {
    let report = model_grad_check(args.seed, args.eps, args.corrupt_backward)
        .map_err(|e| Failure::new(exit::GRADCHECK, e.to_string()))?;
    for p in &report.per_param {
        println!("{}\t{:e}", p.name, p.max_rel_error);
    }
    let max = report.max_rel_error();
    println!("max relative error {max:e}");
    if max < MODEL_CHECK_TOLERANCE {
        return Ok(());
    }
    let worst = report.worst().map_or("?", |p| p.name.as_str());
    Err(Failure::new(
        exit::GRADCHECK,
        format!("gradient check failed: `{worst}` has relative error {max:e} (limit {MODEL_CHECK_TOLERANCE:e})"),
    ))
}

/// 16-bit binary PGM (big-endian samples) with the image's range stretched to the full scale.
fn encode_pgm(values: &[f64], side: usize) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut bytes = format!("P5\n{side} {side}\n65535\n").into_bytes();
    for v in values {
        bytes.extend_from_slice(&(((v - lo) / span * 65535.0).round() as u16).to_be_bytes());
    }
    bytes
}

pub fn synth(args: SynthArgs) -> Result<(), Failure> {
    if args.per_class == 0 {
        return Err(Failure::new(exit::CONFIG, "--per-class must be at least 1"));
    }
    let data = gen_synthetic(args.per_class, args.seed, args.noise).map_err(|e| Failure::new(exit::CONFIG, e.to_string()))?;
    let mut written = 0;
    for name in &data.label_names {
        create_dir(&args.out.join(name))?;
    }
    let mut counters = vec![0usize; data.num_classes()];
    for s in &data.samples {
        let name = &data.label_names[s.label];
        let path = args.out.join(name).join(format!("{name}_{:04}.pgm", counters[s.label]));
        counters[s.label] += 1;
        write_atomic(&path, &encode_pgm(s.image.data(), s.image.shape()[0])).map_err(data_err)?;
        written += 1;
    }
    println!("wrote {written} images in {} classes to {}", data.num_classes(), args.out.display());
    Ok(())
}
