//! The lightweight vision transformer.
//!
//! Images are cut into non-overlapping square patches, each patch is linearly
//! projected (no bias) to the embedding width, a learnable class token is
//! prepended and learnable positional encodings are added. The sequence then
//! passes through `num_layers` pre-norm encoder layers:
//!
//! ```text
//! y' = MSA(LN(y)) + y
//! y  = FFN(LN(y')) + y'
//! ```
//!
//! and the final class-token row goes through a layer norm and an affine head.

use crate::autodiff::{Tape, Var};
use crate::error::{LvitError, Result};
use crate::kv::KvMap;
use crate::param::{ParamId, ParamStore};
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Standard deviation of initialized weights.
pub const INIT_STD: f64 = 0.02;
/// Truncation bound of the initializer, in units of the underlying normal's scale.
pub const INIT_TRUNCATION: f64 = 2.0;
/// Std of a unit normal truncated to ±2. Dividing by it keeps the drawn std at `INIT_STD`.
const TRUNCATED_UNIT_STD: f64 = 0.879_625_661_034_239_8;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub mlp_ratio: usize,
    pub dropout_p: f64,
    pub num_classes: usize,
    /// Number of affine maps in the classification head; extra maps are `D→D` with GELU.
    pub head_depth: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 48,
            patch_size: 16,
            in_channels: 1,
            embed_dim: 256,
            num_heads: 2,
            num_layers: 2,
            mlp_ratio: 4,
            dropout_p: 0.3,
            num_classes: 10,
            head_depth: 1,
        }
    }
}

const CONFIG_KEYS: [&str; 10] = [
    "image_size",
    "patch_size",
    "in_channels",
    "embed_dim",
    "num_heads",
    "num_layers",
    "mlp_ratio",
    "dropout_p",
    "num_classes",
    "head_depth",
];

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("in_channels", self.in_channels),
            ("embed_dim", self.embed_dim),
            ("num_heads", self.num_heads),
            ("num_layers", self.num_layers),
            ("mlp_ratio", self.mlp_ratio),
            ("num_classes", self.num_classes),
            ("head_depth", self.head_depth),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(LvitError::Config(format!("{name} must be >= 1")));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(LvitError::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(LvitError::Config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(LvitError::Config(format!("dropout_p must be in [0, 1), got {}", self.dropout_p)));
        }
        Ok(())
    }

    /// Number of patches per image.
    pub fn num_patches(&self) -> usize {
        let per_side = self.image_size / self.patch_size;
        per_side * per_side
    }

    /// Token count including the class token.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.mlp_ratio * self.embed_dim
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        self.write_kv(&mut m);
        m
    }

    pub fn write_kv(&self, m: &mut KvMap) {
        m.set("image_size", self.image_size);
        m.set("patch_size", self.patch_size);
        m.set("in_channels", self.in_channels);
        m.set("embed_dim", self.embed_dim);
        m.set("num_heads", self.num_heads);
        m.set("num_layers", self.num_layers);
        m.set("mlp_ratio", self.mlp_ratio);
        m.set("dropout_p", self.dropout_p);
        m.set("num_classes", self.num_classes);
        m.set("head_depth", self.head_depth);
    }

    /// Read model keys from `m`, falling back to defaults for absent keys.
    pub fn from_kv(m: &KvMap) -> Result<Self> {
        let d = ModelConfig::default();
        let cfg = ModelConfig {
            image_size: m.get_parsed("image_size")?.unwrap_or(d.image_size),
            patch_size: m.get_parsed("patch_size")?.unwrap_or(d.patch_size),
            in_channels: m.get_parsed("in_channels")?.unwrap_or(d.in_channels),
            embed_dim: m.get_parsed("embed_dim")?.unwrap_or(d.embed_dim),
            num_heads: m.get_parsed("num_heads")?.unwrap_or(d.num_heads),
            num_layers: m.get_parsed("num_layers")?.unwrap_or(d.num_layers),
            mlp_ratio: m.get_parsed("mlp_ratio")?.unwrap_or(d.mlp_ratio),
            dropout_p: m.get_parsed("dropout_p")?.unwrap_or(d.dropout_p),
            num_classes: m.get_parsed("num_classes")?.unwrap_or(d.num_classes),
            head_depth: m.get_parsed("head_depth")?.unwrap_or(d.head_depth),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn keys() -> &'static [&'static str] {
        &CONFIG_KEYS
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Every learnable tensor in creation order: name, shape, initializer.
fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.embed_dim;
    let hid = cfg.hidden_dim();
    let mut specs = vec![
        ("patch_embed.weight".to_string(), vec![d, cfg.patch_dim()], Init::Normal),
        ("class_token".to_string(), vec![d], Init::Zeros),
        ("pos_embed".to_string(), vec![cfg.seq_len(), d], Init::Normal),
    ];
    for l in 0..cfg.num_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        specs.push((p("ln1.gain"), vec![d], Init::Ones));
        specs.push((p("ln1.bias"), vec![d], Init::Zeros));
        for proj in ["q", "k", "v", "o"] {
            specs.push((p(&format!("attn.{proj}.weight")), vec![d, d], Init::Normal));
            specs.push((p(&format!("attn.{proj}.bias")), vec![d], Init::Zeros));
        }
        specs.push((p("ln2.gain"), vec![d], Init::Ones));
        specs.push((p("ln2.bias"), vec![d], Init::Zeros));
        specs.push((p("ffn1.weight"), vec![hid, d], Init::Normal));
        specs.push((p("ffn1.bias"), vec![hid], Init::Zeros));
        specs.push((p("ffn2.weight"), vec![d, hid], Init::Normal));
        specs.push((p("ffn2.bias"), vec![d], Init::Zeros));
    }
    specs.push(("head.norm.gain".to_string(), vec![d], Init::Ones));
    specs.push(("head.norm.bias".to_string(), vec![d], Init::Zeros));
    for h in 0..cfg.head_depth - 1 {
        specs.push((format!("head.hidden.{h}.weight"), vec![d, d], Init::Normal));
        specs.push((format!("head.hidden.{h}.bias"), vec![d], Init::Zeros));
    }
    specs.push(("head.out.weight".to_string(), vec![cfg.num_classes, d], Init::Normal));
    specs.push(("head.out.bias".to_string(), vec![cfg.num_classes], Init::Zeros));
    specs
}

/// Closed-form count of learnable scalars.
pub fn count_params(cfg: &ModelConfig) -> usize {
    let d = cfg.embed_dim;
    let hid = cfg.hidden_dim();
    let embed = d * cfg.patch_dim() + d + cfg.seq_len() * d;
    let per_layer = 2 * d + 4 * (d * d + d) + 2 * d + (hid * d + hid) + (d * hid + d);
    let head = 2 * d + (cfg.head_depth - 1) * (d * d + d) + cfg.num_classes * d + cfg.num_classes;
    embed + cfg.num_layers * per_layer + head
}

#[derive(Clone, Debug)]
pub struct LayerParams {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub ffn1_w: ParamId,
    pub ffn1_b: ParamId,
    pub ffn2_w: ParamId,
    pub ffn2_b: ParamId,
}

/// Handles to every tensor of the model inside its [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub patch_weight: ParamId,
    pub class_token: ParamId,
    pub pos_embed: ParamId,
    pub layers: Vec<LayerParams>,
    pub head_norm_gain: ParamId,
    pub head_norm_bias: ParamId,
    pub head_hidden: Vec<(ParamId, ParamId)>,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

impl ModelParams {
    fn resolve(cfg: &ModelConfig, store: &ParamStore) -> Result<Self> {
        let id = |name: &str| {
            store
                .id_of(name)
                .ok_or_else(|| LvitError::Compat(vec![format!("missing tensor `{name}`")]))
        };
        let layers = (0..cfg.num_layers)
            .map(|l| {
                let p = |s: &str| id(&format!("layers.{l}.{s}"));
                Ok(LayerParams {
                    ln1_gain: p("ln1.gain")?,
                    ln1_bias: p("ln1.bias")?,
                    wq: p("attn.q.weight")?,
                    bq: p("attn.q.bias")?,
                    wk: p("attn.k.weight")?,
                    bk: p("attn.k.bias")?,
                    wv: p("attn.v.weight")?,
                    bv: p("attn.v.bias")?,
                    wo: p("attn.o.weight")?,
                    bo: p("attn.o.bias")?,
                    ln2_gain: p("ln2.gain")?,
                    ln2_bias: p("ln2.bias")?,
                    ffn1_w: p("ffn1.weight")?,
                    ffn1_b: p("ffn1.bias")?,
                    ffn2_w: p("ffn2.weight")?,
                    ffn2_b: p("ffn2.bias")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let head_hidden = (0..cfg.head_depth - 1)
            .map(|h| Ok((id(&format!("head.hidden.{h}.weight"))?, id(&format!("head.hidden.{h}.bias"))?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelParams {
            patch_weight: id("patch_embed.weight")?,
            class_token: id("class_token")?,
            pos_embed: id("pos_embed")?,
            layers,
            head_norm_gain: id("head.norm.gain")?,
            head_norm_bias: id("head.norm.bias")?,
            head_hidden,
            head_w: id("head.out.weight")?,
            head_b: id("head.out.bias")?,
        })
    }
}

/// Parameters of one encoder layer recorded on a tape.
#[derive(Clone, Debug)]
pub struct BoundLayer {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub ffn1_w: Var,
    pub ffn1_b: Var,
    pub ffn2_w: Var,
    pub ffn2_b: Var,
}

/// All model parameters recorded as leaves on one tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub patch_weight: Var,
    pub class_token: Var,
    pub pos_embed: Var,
    pub layers: Vec<BoundLayer>,
    pub head_norm_gain: Var,
    pub head_norm_bias: Var,
    pub head_hidden: Vec<(Var, Var)>,
    pub head_w: Var,
    pub head_b: Var,
}

/// Output of a traced forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub logits: Var,
    /// Token sequence after embedding, `[B, N+1, D]`.
    pub embedded: Var,
    /// Token sequence after each encoder layer.
    pub layer_outputs: Vec<Var>,
    /// Attention probabilities per layer, `[B·h, N+1, N+1]`.
    pub attention: Vec<Var>,
}

/// A configured model together with its parameters.
#[derive(Clone, Debug)]
pub struct Lvit {
    config: ModelConfig,
    store: ParamStore,
    params: ModelParams,
}

impl Lvit {
    /// Cold-start initialization, fully determined by the RNG seed.
    pub fn init(config: ModelConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        for (name, shape, init) in param_specs(&config) {
            let t = match init {
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::ones(&shape),
                Init::Normal => {
                    let scale = INIT_STD / TRUNCATED_UNIT_STD;
                    Tensor::from_fn(&shape, |_| rng.truncated_normal(scale, INIT_TRUNCATION))
                }
            };
            store.add(name, t)?;
        }
        let params = ModelParams::resolve(&config, &store)?;
        Ok(Lvit { config, store, params })
    }

    /// Assemble a model from loaded tensors, checking names and shapes against `config`.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        let mut problems = Vec::new();
        for (name, shape, _) in &specs {
            match store.by_name(name) {
                None => problems.push(format!("missing tensor `{name}` {shape:?}")),
                Some(p) if p.value().shape() != shape.as_slice() => problems.push(format!(
                    "`{name}` has shape {:?}, config expects {shape:?}",
                    p.value().shape()
                )),
                Some(_) => {}
            }
        }
        for p in store.iter() {
            if !specs.iter().any(|(n, _, _)| n == p.name()) {
                problems.push(format!("unexpected tensor `{}`", p.name()));
            }
        }
        if !problems.is_empty() {
            return Err(LvitError::Compat(problems));
        }
        let params = ModelParams::resolve(&config, &store)?;
        Ok(Lvit { config, store, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// Mutable access to the dropout rate, e.g. to disable it for verification.
    pub fn set_dropout(&mut self, p: f64) -> Result<()> {
        if !(0.0..1.0).contains(&p) {
            return Err(LvitError::Param(format!("dropout must be in [0, 1), got {p}")));
        }
        self.config.dropout_p = p;
        Ok(())
    }

    /// Record every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        self.bind_from(tape, &self.store)
    }

    /// Like [`Lvit::bind`], but reads values from `s`, which must have this model's
    /// layout (e.g. a perturbed copy during a gradient check).
    pub fn bind_from(&self, tape: &mut Tape, s: &ParamStore) -> BoundParams {
        let p = &self.params;
        BoundParams {
            patch_weight: tape.param(s, p.patch_weight),
            class_token: tape.param(s, p.class_token),
            pos_embed: tape.param(s, p.pos_embed),
            layers: p
                .layers
                .iter()
                .map(|l| BoundLayer {
                    ln1_gain: tape.param(s, l.ln1_gain),
                    ln1_bias: tape.param(s, l.ln1_bias),
                    wq: tape.param(s, l.wq),
                    bq: tape.param(s, l.bq),
                    wk: tape.param(s, l.wk),
                    bk: tape.param(s, l.bk),
                    wv: tape.param(s, l.wv),
                    bv: tape.param(s, l.bv),
                    wo: tape.param(s, l.wo),
                    bo: tape.param(s, l.bo),
                    ln2_gain: tape.param(s, l.ln2_gain),
                    ln2_bias: tape.param(s, l.ln2_bias),
                    ffn1_w: tape.param(s, l.ffn1_w),
                    ffn1_b: tape.param(s, l.ffn1_b),
                    ffn2_w: tape.param(s, l.ffn2_w),
                    ffn2_b: tape.param(s, l.ffn2_b),
                })
                .collect(),
            head_norm_gain: tape.param(s, p.head_norm_gain),
            head_norm_bias: tape.param(s, p.head_norm_bias),
            head_hidden: p.head_hidden.iter().map(|&(w, b)| (tape.param(s, w), tape.param(s, b))).collect(),
            head_w: tape.param(s, p.head_w),
            head_b: tape.param(s, p.head_b),
        }
    }

    /// Patch sequence `[B, N, patch_dim]` for a batch of images, recorded as a constant.
    pub fn patch_batch(&self, tape: &mut Tape, images: &[&Tensor]) -> Result<Var> {
        if images.is_empty() {
            return Err(LvitError::Contract("empty image batch".into()));
        }
        let (n, pd) = (self.config.num_patches(), self.config.patch_dim());
        let mut data = Vec::with_capacity(images.len() * n * pd);
        for img in images {
            data.extend_from_slice(patchify(&self.config, img)?.data());
        }
        Ok(tape.constant(Tensor::new(vec![images.len(), n, pd], data)?))
    }

    /// `[B, N, patch_dim]` patches → `[B, N+1, D]` token sequence with class token and positions.
    pub fn embed_sequence(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        patches: Var,
        rng: &mut RngState,
        training: bool,
    ) -> Result<Var> {
        let shape = tape.shape(patches).to_vec();
        if shape.len() != 3 || shape[1] != self.config.num_patches() || shape[2] != self.config.patch_dim() {
            return Err(LvitError::shape(
                "embed_sequence",
                format!(
                    "patches {shape:?}, expected [B, {}, {}]",
                    self.config.num_patches(),
                    self.config.patch_dim()
                ),
            ));
        }
        let b = shape[0];
        let d = self.config.embed_dim;
        let z = tape.linear(patches, bound.patch_weight, None)?;
        let cls = tape.reshape(bound.class_token, &[1, d])?;
        let cls = tape.expand(cls, b)?;
        let tokens = tape.concat(&[cls, z], 1)?;
        let y0 = tape.add(tokens, bound.pos_embed)?;
        tape.dropout(y0, self.config.dropout_p, rng, training)
    }

    /// Multi-head self-attention on `[B, T, D]`. Returns the projected output and
    /// the attention probabilities `[B·h, T, T]` (before dropout).
    pub fn mhsa(
        &self,
        tape: &mut Tape,
        layer: &BoundLayer,
        x: Var,
        rng: &mut RngState,
        training: bool,
    ) -> Result<(Var, Var)> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.config.embed_dim {
            return Err(LvitError::shape("mhsa", format!("input {shape:?}")));
        }
        let (b, t) = (shape[0], shape[1]);
        let (h, dh) = (self.config.num_heads, self.config.head_dim());
        let p = self.config.dropout_p;

        let split = |tape: &mut Tape, v: Var| -> Result<Var> {
            let v = tape.reshape(v, &[b, t, h, dh])?;
            let v = tape.transpose(v, 1, 2)?;
            tape.reshape(v, &[b * h, t, dh])
        };
        let q = tape.linear(x, layer.wq, Some(layer.bq))?;
        let k = tape.linear(x, layer.wk, Some(layer.bk))?;
        let v = tape.linear(x, layer.wv, Some(layer.bv))?;
        let (q, k, v) = (split(tape, q)?, split(tape, k)?, split(tape, v)?);

        let kt = tape.transpose(k, 1, 2)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.softmax(scores);
        let attn_dropped = tape.dropout(attn, p, rng, training)?;
        let ctx = tape.matmul(attn_dropped, v)?;

        let ctx = tape.reshape(ctx, &[b, h, t, dh])?;
        let ctx = tape.transpose(ctx, 1, 2)?;
        let ctx = tape.reshape(ctx, &[b, t, h * dh])?;
        let out = tape.linear(ctx, layer.wo, Some(layer.bo))?;
        let out = tape.dropout(out, p, rng, training)?;
        Ok((out, attn))
    }

    /// Position-wise feed-forward: linear → GELU → linear, then dropout.
    pub fn ffn(&self, tape: &mut Tape, layer: &BoundLayer, x: Var, rng: &mut RngState, training: bool) -> Result<Var> {
        let hdn = tape.linear(x, layer.ffn1_w, Some(layer.ffn1_b))?;
        let hdn = tape.gelu(hdn);
        let out = tape.linear(hdn, layer.ffn2_w, Some(layer.ffn2_b))?;
        tape.dropout(out, self.config.dropout_p, rng, training)
    }

    /// One pre-norm encoder layer. Returns the new sequence and the attention probabilities.
    pub fn encoder_layer(
        &self,
        tape: &mut Tape,
        layer: &BoundLayer,
        y_prev: Var,
        rng: &mut RngState,
        training: bool,
    ) -> Result<(Var, Var)> {
        let n1 = tape.layer_norm(y_prev, layer.ln1_gain, layer.ln1_bias, LAYER_NORM_EPS)?;
        let (attn_out, attn) = self.mhsa(tape, layer, n1, rng, training)?;
        let y_mid = tape.add(y_prev, attn_out)?;
        let n2 = tape.layer_norm(y_mid, layer.ln2_gain, layer.ln2_bias, LAYER_NORM_EPS)?;
        let f = self.ffn(tape, layer, n2, rng, training)?;
        let y = tape.add(y_mid, f)?;
        Ok((y, attn))
    }

    /// Class-token row `[B, D]` → logits `[B, K]`.
    pub fn head(&self, tape: &mut Tape, bound: &BoundParams, f0: Var) -> Result<Var> {
        let mut x = tape.layer_norm(f0, bound.head_norm_gain, bound.head_norm_bias, LAYER_NORM_EPS)?;
        for &(w, b) in &bound.head_hidden {
            x = tape.linear(x, w, Some(b))?;
            x = tape.gelu(x);
        }
        tape.linear(x, bound.head_w, Some(bound.head_b))
    }

    /// Full forward pass over a batch, keeping handles to intermediate tensors.
    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        images: &[&Tensor],
        rng: &mut RngState,
        training: bool,
    ) -> Result<ForwardTrace> {
        let patches = self.patch_batch(tape, images)?;
        let embedded = self.embed_sequence(tape, bound, patches, rng, training)?;
        let mut y = embedded;
        let mut layer_outputs = Vec::with_capacity(bound.layers.len());
        let mut attention = Vec::with_capacity(bound.layers.len());
        for layer in &bound.layers {
            let (next, attn) = self.encoder_layer(tape, layer, y, rng, training)?;
            y = next;
            layer_outputs.push(y);
            attention.push(attn);
        }
        let f0 = tape.select(y, 1, 0)?;
        let logits = self.head(tape, bound, f0)?;
        Ok(ForwardTrace { logits, embedded, layer_outputs, attention })
    }

    /// Logits `[B, K]` for a batch of images.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        images: &[&Tensor],
        rng: &mut RngState,
        training: bool,
    ) -> Result<Var> {
        Ok(self.forward_traced(tape, bound, images, rng, training)?.logits)
    }

    /// Logits `[K]` for a single image.
    pub fn forward(&self, image: &Tensor, rng: &mut RngState, training: bool) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let logits = self.forward_batch(&mut tape, &bound, &[image], rng, training)?;
        tape.value(logits).reshaped(&[self.config.num_classes])
    }

    /// Eval-mode logits for many images, processed in chunks of `chunk`.
    pub fn logits_eval(&self, images: &[&Tensor], chunk: usize) -> Result<Vec<Tensor>> {
        let mut rng = RngState::new(0);
        let k = self.config.num_classes;
        let mut out = Vec::with_capacity(images.len());
        for batch in images.chunks(chunk.max(1)) {
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape);
            let logits = self.forward_batch(&mut tape, &bound, batch, &mut rng, false)?;
            for row in tape.value(logits).data().chunks(k) {
                out.push(Tensor::new(vec![k], row.to_vec())?);
            }
        }
        Ok(out)
    }
}

/// Split an image into non-overlapping patches in raster order.
///
/// Accepts `[H, W]` for single-channel configs or `[C, H, W]`. Each output row is
/// one patch flattened channel-major, then row-major within the patch.
pub fn patchify(cfg: &ModelConfig, image: &Tensor) -> Result<Tensor> {
    let (s, p, c) = (cfg.image_size, cfg.patch_size, cfg.in_channels);
    let ok = match image.shape() {
        [h, w] => c == 1 && *h == s && *w == s,
        [ch, h, w] => *ch == c && *h == s && *w == s,
        _ => false,
    };
    if !ok {
        return Err(LvitError::shape(
            "patchify",
            format!("image {:?}, expected [{s}, {s}] with {c} channel(s)", image.shape()),
        ));
    }
    let grid = s / p;
    let data = image.data();
    let mut out = Vec::with_capacity(image.len());
    for gr in 0..grid {
        for gc in 0..grid {
            for ch in 0..c {
                for i in 0..p {
                    let row = gr * p + i;
                    let start = ch * s * s + row * s + gc * p;
                    out.extend_from_slice(&data[start..start + p]);
                }
            }
        }
    }
    Tensor::new(vec![grid * grid, cfg.patch_dim()], out)
}

/// Arg-max with ties going to the lowest index.
pub fn predict(logits: &Tensor) -> Result<usize> {
    if logits.is_empty() {
        return Err(LvitError::Contract("predict needs at least one logit".into()));
    }
    if !logits.is_finite() {
        return Err(LvitError::Contract(format!("non-finite logits: {logits:?}")));
    }
    let mut best = 0;
    for (i, &v) in logits.data().iter().enumerate() {
        if v > logits.data()[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Softmax of a logit vector.
pub fn probabilities(logits: &Tensor) -> Vec<f64> {
    let max = logits.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.data().iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
