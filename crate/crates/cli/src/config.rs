//! Run configuration: defaults, then the config file, then command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use lvit_core::{KvMap, LvitError, ModelConfig, ResizeMode, TrainConfig};

use crate::{exit, DataArgs, Failure};

/// Keys that describe the run itself rather than the model or optimizer.
pub const RUN_KEYS: [&str; 5] = ["data", "synthetic", "noise", "resize_mode", "out"];

pub const DEFAULT_NOISE: f64 = 0.3;

/// Where the samples come from.
#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    Dir(PathBuf),
    Synthetic { per_class: usize, noise: f64 },
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub source: Source,
    pub resize_mode: ResizeMode,
    pub out: PathBuf,
    /// Every key, as written to the resolved config file.
    pub resolved: KvMap,
}

fn config_err(e: LvitError) -> Failure {
    Failure::new(exit::CONFIG, e.to_string())
}

pub fn read_file(path: &Path) -> Result<KvMap, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::new(exit::CONFIG, format!("cannot read config {}: {e}", path.display())))?;
    KvMap::parse(&text).map_err(|e| Failure::new(exit::CONFIG, format!("{}: {e}", path.display())))
}

fn check_keys(m: &KvMap) -> Result<(), Failure> {
    let known = |k: &str| ModelConfig::keys().contains(&k) || TrainConfig::keys().contains(&k) || RUN_KEYS.contains(&k);
    match m.iter().find(|(k, _)| !known(k)) {
        Some((k, _)) => Err(Failure::new(exit::CONFIG, format!("unknown config key `{k}`"))),
        None => Ok(()),
    }
}

/// Overlay the shared data flags onto `m`.
pub fn apply_data_flags(m: &mut KvMap, d: &DataArgs) {
    if let Some(p) = &d.data {
        m.set("data", p.display());
        m.remove("synthetic");
    }
    if let Some(n) = d.synthetic {
        m.set("synthetic", n);
        m.remove("data");
    }
    if let Some(v) = d.noise {
        m.set("noise", v);
    }
    if let Some(r) = d.resize_mode {
        m.set("resize_mode", r);
    }
}

/// Overlay `flags` on the config file (if any) and check every key is known.
pub fn layered(file: Option<&Path>, flags: &KvMap) -> Result<KvMap, Failure> {
    let mut m = match file {
        Some(p) => read_file(p)?,
        None => KvMap::new(),
    };
    // The two data sources are exclusive: a flag for one drops the file's other.
    if flags.contains("data") {
        m.remove("synthetic");
    }
    if flags.contains("synthetic") {
        m.remove("data");
    }
    m.merge(flags);
    check_keys(&m)?;
    Ok(m)
}

pub fn source_of(m: &KvMap) -> Result<(Source, ResizeMode), Failure> {
    let resize_mode = m.get_parsed::<ResizeMode>("resize_mode").map_err(config_err)?.unwrap_or_default();
    let noise = m.get_parsed::<f64>("noise").map_err(config_err)?.unwrap_or(DEFAULT_NOISE);
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Failure::new(exit::CONFIG, format!("noise must be >= 0, got {noise}")));
    }
    let source = match (m.get("data"), m.get_parsed::<usize>("synthetic").map_err(config_err)?) {
        (Some(_), Some(_)) => return Err(Failure::new(exit::CONFIG, "give either data or synthetic, not both")),
        (Some(dir), None) => Source::Dir(PathBuf::from(dir)),
        (None, Some(0)) => return Err(Failure::new(exit::CONFIG, "synthetic needs at least 1 sample per class")),
        (None, Some(n)) => Source::Synthetic { per_class: n, noise },
        (None, None) => return Err(Failure::new(exit::CONFIG, "no data source: pass --data DIR or --synthetic N")),
    };
    Ok((source, resize_mode))
}

/// Fully resolve a training run.
pub fn resolve_train(args: &crate::TrainArgs) -> Result<RunConfig, Failure> {
    let mut flags = KvMap::new();
    apply_data_flags(&mut flags, &args.data);
    let mut set = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            flags.set(k, v);
        }
    };
    set("seed", args.seed.map(|v| v.to_string()));
    set("out", args.out.as_ref().map(|p| p.display().to_string()));
    set("embed_dim", args.embed_dim.map(|v| v.to_string()));
    set("num_heads", args.heads.map(|v| v.to_string()));
    set("num_layers", args.layers.map(|v| v.to_string()));
    set("dropout_p", args.dropout.map(|v| v.to_string()));
    set("lr", args.lr.map(|v| v.to_string()));
    set("epochs", args.epochs.map(|v| v.to_string()));
    set("batch_size", args.batch_size.map(|v| v.to_string()));
    set("warm_start", args.warm_start.as_ref().map(|p| p.display().to_string()));
    let m = layered(args.config.as_deref(), &flags)?;

    let model = ModelConfig::from_kv(&m).map_err(config_err)?;
    let train = TrainConfig::from_kv(&m).map_err(config_err)?;
    let (source, resize_mode) = source_of(&m)?;
    let out = m
        .get("out")
        .map(PathBuf::from)
        .ok_or_else(|| Failure::new(exit::CONFIG, "no output directory: pass --out DIR"))?;

    let mut resolved = KvMap::new();
    model.write_kv(&mut resolved);
    train.write_kv(&mut resolved);
    match &source {
        Source::Dir(p) => resolved.set("data", p.display()),
        Source::Synthetic { per_class, noise } => {
            resolved.set("synthetic", per_class);
            resolved.set("noise", noise);
        }
    }
    resolved.set("resize_mode", resize_mode);
    resolved.set("out", out.display());
    Ok(RunConfig { model, train, source, resize_mode, out, resolved })
}
