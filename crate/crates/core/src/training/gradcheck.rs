//! Central finite-difference check of the batch gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{batch_gradients, batch_loss, sample_gen_targets, Weights};
use crate::corpus::{build_vocab_from, Example};
use crate::exec::Exec;
use crate::model::{Mode, Model, ModelConfig};
use crate::worldgen::{gen_microworld_example, MicroworldConfig};

const STEP: f64 = 1e-5;
/// Denominator floor of the relative error per unit of loss, so entries
/// whose true gradient is zero are judged by absolute error at a scale
/// that follows the loss (a summed loss has summed round-off).
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_err: f64,
    pub loss: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Relative error of analytic `a` against numeric `n`, floored at
/// `REL_FLOOR * max(|loss|, 1)`.
pub fn rel_err(a: f64, n: f64, loss: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR * loss.abs().max(1.0))
}

/// Two short micro-world stories with one QA pair each.
pub fn micro_batch() -> Vec<Example> {
    let cfg = MicroworldConfig { n_events: 4, n_qa: 1, seed: 17, ..Default::default() };
    (0..2).map(|i| gen_microworld_example(&cfg, i).unwrap()).collect()
}

/// Compares the analytic gradient of the weighted loss on [`micro_batch`]
/// with central differences, on up to `per_tensor` entries of every tensor
/// (half the largest analytic entries, half drawn at random).
pub fn grad_check(cfg: &ModelConfig, w: Weights, mode: Mode, per_tensor: usize) -> GradCheckReport {
    let batch_owned = micro_batch();
    let batch: Vec<&Example> = batch_owned.iter().collect();
    let vocab = build_vocab_from(batch_owned.iter()).unwrap();
    let cfg = ModelConfig { dropout: 0.0, ..cfg.clone() };
    let mut model = Model::<f64>::new(cfg, vocab, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let gen = sample_gen_targets(&batch, true, true, &mut rng);
    let (bd, grads) = batch_gradients(&model, &batch, &gen, w, mode, None, Exec::Sequential).unwrap();
    let mut tensors = Vec::new();
    for id in 0..model.params.len() {
        let shape = model.params.get(id).raw_dim();
        let n = model.params.get(id).len();
        let analytic: Vec<f64> = match grads.get(id) {
            Some(g) => g.iter().copied().collect(),
            None => vec![0.0; n],
        };
        let mut picks: Vec<usize> = (0..n).collect();
        if n > per_tensor {
            picks.sort_by(|&a, &b| analytic[b].abs().total_cmp(&analytic[a].abs()).then(a.cmp(&b)));
            let mut chosen: Vec<usize> = picks[..per_tensor / 2].to_vec();
            let rest = &picks[per_tensor / 2..];
            chosen.extend(sample(&mut rng, rest.len(), per_tensor - chosen.len()).iter().map(|i| rest[i]));
            picks = chosen;
        }
        let mut check = TensorCheck { name: model.params.name(id).to_string(), entries: picks.len(), max_rel_err: 0.0, max_abs_err: 0.0 };
        for flat in picks {
            let idx = (flat / shape[1], flat % shape[1]);
            let orig = model.params.get(id)[idx];
            model.params.get_mut(id)[idx] = orig + STEP;
            let plus = batch_loss(&model, &batch, &gen, w, mode).unwrap().total;
            model.params.get_mut(id)[idx] = orig - STEP;
            let minus = batch_loss(&model, &batch, &gen, w, mode).unwrap().total;
            model.params.get_mut(id)[idx] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            check.max_abs_err = check.max_abs_err.max((analytic[flat] - numeric).abs());
            check.max_rel_err = check.max_rel_err.max(rel_err(analytic[flat], numeric, bd.total));
        }
        tensors.push(check);
    }
    let max_rel_err = tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max);
    GradCheckReport { tensors, max_rel_err, loss: bd.total }
}
