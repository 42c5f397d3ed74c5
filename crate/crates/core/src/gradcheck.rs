//! Central-difference verification of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{LvitError, Result};
use crate::model::{Lvit, ModelConfig};
use crate::param::ParamStore;
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Pass mark for [`model_grad_check`].
pub const MODEL_CHECK_TOLERANCE: f64 = 1e-5;

/// Worst relative error for one named parameter.
#[derive(Clone, Debug)]
pub struct ParamError {
    pub name: String,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamError>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_param.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamError> {
        self.per_param.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

fn eval_scalar<F>(f: &mut F, store: &ParamStore) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(LvitError::Contract(format!("grad_check needs a scalar, got {:?}", v.shape())));
    }
    Ok(v.data()[0])
}

/// Compare the tape gradient of `f` against central differences for every
/// parameter entry in `store`.
///
/// The error per entry is `|analytic - numeric| / max(1, |numeric|)`. `f` must be
/// deterministic, so any dropout inside it has to be disabled. Parameter values
/// are restored before returning; gradients are left holding the analytic result.
pub fn grad_check<F>(store: &mut ParamStore, eps: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(LvitError::Param(format!("grad_check eps must be > 0, got {eps}")));
    }
    store.zero_grads();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.backward(loss, store)?;
    drop(tape);

    let mut per_param = Vec::with_capacity(store.len());
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.get(id).name().to_string();
        let analytic = store.get(id).grad().data().to_vec();
        let mut worst = 0.0f64;
        for (j, &a) in analytic.iter().enumerate() {
            let orig = store.get(id).value().data()[j];
            store.get_mut(id).value_mut()[j] = orig + eps;
            let plus = eval_scalar(&mut f, store);
            store.get_mut(id).value_mut()[j] = orig - eps;
            let minus = eval_scalar(&mut f, store);
            store.get_mut(id).value_mut()[j] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            if !a.is_finite() || !numeric.is_finite() {
                return Err(LvitError::NonFinite(format!(
                    "gradient of `{name}`[{j}]: analytic {a}, numeric {numeric}"
                )));
            }
            worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
        }
        per_param.push(ParamError { name, max_rel_error: worst });
    }
    Ok(GradCheckReport { per_param })
}

/// Gradient check of the full classifier loss on a small seeded model
/// (D=8, h=2, L=2, dropout off) and a batch of two random images.
///
/// Parameters are drawn uniformly from [-1, 1] rather than the training init so
/// that gradients are O(1) and the relative error is a sharp test.
/// `backward_fault` scales the GELU backward rule, for exercising the failure path.
pub fn model_grad_check(seed: u64, eps: f64, backward_fault: Option<f64>) -> Result<GradCheckReport> {
    let cfg = ModelConfig { embed_dim: 8, num_heads: 2, num_layers: 2, dropout_p: 0.0, ..ModelConfig::default() };
    let mut rng = RngState::new(seed);
    let mut model = Lvit::init(cfg, &mut rng)?;
    for p in model.store_mut().iter_mut() {
        for v in p.value_mut() {
            *v = rng.uniform_range(-1.0, 1.0);
        }
    }
    let images: Vec<Tensor> = (0..2).map(|_| Tensor::from_fn(&[48, 48], |_| rng.normal())).collect();
    let labels: Vec<usize> = (0..2).map(|_| rng.below(model.config().num_classes)).collect();
    let refs: Vec<&Tensor> = images.iter().collect();
    let shell = model.clone();
    grad_check(model.store_mut(), eps, |tape, store| {
        if let Some(scale) = backward_fault {
            tape.corrupt_gelu_backward(scale);
        }
        let bound = shell.bind_from(tape, store);
        let logits = shell.forward_batch(tape, &bound, &refs, &mut RngState::new(0), false)?;
        tape.cross_entropy(logits, &labels)
    })
}
