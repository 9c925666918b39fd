#![allow(dead_code)]

use faceforge::corpus::{Batch, SequencePair};
use faceforge::frequency::{FreqMode, FrequencyTable};
use faceforge::loss::{batch_loss_with_weights, step_weights, LossConfig, WeightMode, WeightSource};
use faceforge::seq2seq::{ModelHyper, ModelParams, TeacherPass};

pub fn batch_of(pairs: &[SequencePair]) -> Batch {
    let refs: Vec<&SequencePair> = pairs.iter().collect();
    Batch::from_pairs(&refs, (0..pairs.len()).collect())
}

/// Two pairs of different lengths over a 12-token vocabulary.
pub fn micro_batch() -> Batch {
    batch_of(&[
        SequencePair::new(vec![4, 7, 9], vec![5, 8, 10], 12).unwrap(),
        SequencePair::new(vec![6, 11], vec![4], 12).unwrap(),
    ])
}

pub fn micro_model(seed: u64) -> ModelParams {
    let hyper = ModelHyper {
        vocab: 12,
        embed: 6,
        hidden: 16,
        layers: 1,
    };
    ModelParams::init(hyper, seed).unwrap()
}

/// A skewed table so FACE weights differ across tokens.
pub fn skewed_table(mode: FreqMode) -> FrequencyTable {
    FrequencyTable::from_counts(vec![0, 1, 0, 9, 7, 3, 12, 1, 5, 2, 0, 4], mode).unwrap()
}

pub struct GradientComparison {
    pub name: String,
    pub relative_errors: Vec<f64>,
}

impl GradientComparison {
    pub fn fraction_below(&self, tol: f64) -> f64 {
        let ok = self.relative_errors.iter().filter(|&&e| e < tol).count();
        ok as f64 / self.relative_errors.len() as f64
    }

    pub fn worst(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

/// Analytic parameter gradients of the batch loss against central
/// differences with step `h`. Frequency and entropy weights are computed once
/// at the unperturbed point and held fixed on both sides.
pub fn compare_gradients(config: &LossConfig, params: &ModelParams, batch: &Batch, h: f64) -> GradientComparison {
    let table = config.freq_mode.map(skewed_table);
    let pre = match (config.weight_mode, &table) {
        (Some(WeightMode::Pre), Some(t)) => Some(t.pre_weight().unwrap()),
        _ => None,
    };
    let source = WeightSource::new(table.as_ref(), pre.as_ref());
    let pass = TeacherPass::run(params, batch, None).unwrap();
    let weights = step_weights(&pass.logits(), batch, config, source).unwrap();
    let bl = batch_loss_with_weights(&pass.logits(), batch, config, weights.clone()).unwrap();
    let grads = pass.backward(&bl.logit_grads).unwrap();

    let loss_at = |p: &ModelParams| {
        let pass = TeacherPass::run(p, batch, None).unwrap();
        batch_loss_with_weights(&pass.logits(), batch, config, weights.clone())
            .unwrap()
            .loss
    };
    let mut relative_errors = Vec::new();
    let mut probe = params.clone();
    for (i, g) in grads.iter().enumerate() {
        for j in 0..g.len() {
            let orig = params.tensors()[i].data()[j];
            probe.tensors_mut()[i].data_mut()[j] = orig + h;
            let plus = loss_at(&probe);
            probe.tensors_mut()[i].data_mut()[j] = orig - h;
            let minus = loss_at(&probe);
            probe.tensors_mut()[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            relative_errors.push(relative_error(g.data()[j], numeric));
        }
    }
    GradientComparison {
        name: config.name(),
        relative_errors,
    }
}

/// Every refinement variant plus CE.
pub fn all_variants() -> Vec<LossConfig> {
    let mut v = vec![LossConfig::ce()];
    v.extend(LossConfig::refinement_grid());
    v
}
