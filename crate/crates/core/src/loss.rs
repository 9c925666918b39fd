//! Cross-entropy, frequency-aware cross-entropy, the confidence penalties and
//! their combinations, each with an analytic gradient w.r.t. the logits.
//!
//! Frequency weights and the entropy weight of `FaceCpFree` are treated as
//! constants during differentiation. The additive entropy terms of `Cp`,
//! `CpFree` and `FaceCp` are differentiated.

use std::fmt;
use std::str::FromStr;
use std::sync::Once;

use crate::corpus::{Batch, PAD};
use crate::error::{Error, Result};
use crate::frequency::{FreqMode, FrequencyTable, WeightVector};
use crate::numkernel::{softmax, Matrix};

pub const DEFAULT_BETA: f64 = 0.01;
pub const DEFAULT_ENTROPY_FLOOR: f64 = 1e-8;
/// Probabilities below this are clamped inside the log.
pub const PROB_FLOOR: f64 = 1e-12;

static CLAMP_WARNING: Once = Once::new();

/// A point on the probability simplex with its (natural-log) entropy.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictedDistribution {
    probs: Vec<f64>,
    entropy: f64,
}

fn entropy_of(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

impl PredictedDistribution {
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        let probs = softmax(logits)?;
        let entropy = entropy_of(&probs);
        Ok(PredictedDistribution { probs, entropy })
    }

    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::domain("probabilities must be finite and non-negative"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::domain(format!("probabilities sum to {total}")));
        }
        let entropy = entropy_of(&probs);
        Ok(PredictedDistribution { probs, entropy })
    }

    pub fn uniform(n: usize) -> Self {
        Self::from_probs(vec![1.0 / n as f64; n]).expect("uniform distribution")
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn entropy(&self) -> f64 {
        self.entropy
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Most probable token, lowest id on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    /// `d H / d logits`.
    fn entropy_grad(&self) -> Vec<f64> {
        self.probs
            .iter()
            .map(|&p| if p > 0.0 { -p * (p.ln() + self.entropy) } else { 0.0 })
            .collect()
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossVariant {
    Ce,
    Face,
    Cp,
    CpFree,
    FaceCp,
    FaceCpFree,
}

impl LossVariant {
    pub fn uses_frequency(self) -> bool {
        matches!(self, LossVariant::Face | LossVariant::FaceCp | LossVariant::FaceCpFree)
    }

    pub fn uses_beta(self) -> bool {
        matches!(self, LossVariant::Cp | LossVariant::FaceCp)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum WeightMode {
    Pre,
    Post,
}

impl fmt::Display for WeightMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightMode::Pre => "pre",
            WeightMode::Post => "post",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub variant: LossVariant,
    pub freq_mode: Option<FreqMode>,
    pub weight_mode: Option<WeightMode>,
    pub beta: f64,
    pub entropy_floor: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig::ce()
    }
}

impl LossConfig {
    fn with(variant: LossVariant, modes: Option<(FreqMode, WeightMode)>) -> Self {
        LossConfig {
            variant,
            freq_mode: modes.map(|m| m.0),
            weight_mode: modes.map(|m| m.1),
            beta: DEFAULT_BETA,
            entropy_floor: DEFAULT_ENTROPY_FLOOR,
        }
    }

    pub fn ce() -> Self {
        Self::with(LossVariant::Ce, None)
    }

    pub fn face(freq: FreqMode, weight: WeightMode) -> Self {
        Self::with(LossVariant::Face, Some((freq, weight)))
    }

    pub fn cp(beta: f64) -> Self {
        LossConfig {
            beta,
            ..Self::with(LossVariant::Cp, None)
        }
    }

    pub fn cp_free() -> Self {
        Self::with(LossVariant::CpFree, None)
    }

    pub fn face_cp(freq: FreqMode, weight: WeightMode) -> Self {
        Self::with(LossVariant::FaceCp, Some((freq, weight)))
    }

    pub fn face_cp_free(freq: FreqMode, weight: WeightMode) -> Self {
        Self::with(LossVariant::FaceCpFree, Some((freq, weight)))
    }

    /// The eight refinement variants compared against CE.
    pub fn refinement_grid() -> Vec<LossConfig> {
        use FreqMode::*;
        use WeightMode::*;
        vec![
            Self::face(Output, Pre),
            Self::face(Output, Post),
            Self::face(Gt, Pre),
            Self::face(Gt, Post),
            Self::cp(DEFAULT_BETA),
            Self::cp_free(),
            Self::face_cp(Output, Pre),
            Self::face_cp_free(Output, Pre),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.variant.uses_beta() && !(self.beta > 0.0) {
            return Err(Error::usage("beta must be positive for confidence-penalty variants"));
        }
        if !(self.entropy_floor > 0.0) {
            return Err(Error::usage("entropy floor must be positive"));
        }
        let has_modes = self.freq_mode.is_some() && self.weight_mode.is_some();
        if self.variant.uses_frequency() && !has_modes {
            return Err(Error::usage(format!(
                "{} needs a frequency mode and a weight mode",
                self.name()
            )));
        }
        if !self.variant.uses_frequency() && (self.freq_mode.is_some() || self.weight_mode.is_some()) {
            return Err(Error::usage(format!(
                "{} takes no frequency or weight mode",
                self.name()
            )));
        }
        Ok(())
    }

    /// Command-line name of the configuration.
    pub fn name(&self) -> String {
        let modes = match (self.freq_mode, self.weight_mode) {
            (Some(f), Some(w)) => {
                let f = if f == FreqMode::Gt { 'g' } else { 'o' };
                let w = if w == WeightMode::Pre { "pr" } else { "po" };
                format!("{f}{w}")
            }
            _ => String::new(),
        };
        match self.variant {
            LossVariant::Ce => "ce".into(),
            LossVariant::Cp => "cp".into(),
            LossVariant::CpFree => "cp-free".into(),
            LossVariant::Face => format!("face-{modes}"),
            LossVariant::FaceCp if modes == "opr" => "face-cp".into(),
            LossVariant::FaceCpFree if modes == "opr" => "face-cp-free".into(),
            LossVariant::FaceCp => format!("face-cp-{modes}"),
            LossVariant::FaceCpFree => format!("face-cp-free-{modes}"),
        }
    }
}

impl FromStr for LossConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        use FreqMode::*;
        use WeightMode::*;
        let modes = |code: &str| match code {
            "opr" => Some((Output, Pre)),
            "opo" => Some((Output, Post)),
            "gpr" => Some((Gt, Pre)),
            "gpo" => Some((Gt, Post)),
            _ => None,
        };
        let config = match s {
            "ce" => Some(Self::ce()),
            "cp" => Some(Self::cp(DEFAULT_BETA)),
            "cp-free" => Some(Self::cp_free()),
            "face-cp" => Some(Self::face_cp(Output, Pre)),
            "face-cp-free" => Some(Self::face_cp_free(Output, Pre)),
            other => {
                if let Some(code) = other.strip_prefix("face-cp-free-") {
                    modes(code).map(|(f, w)| Self::face_cp_free(f, w))
                } else if let Some(code) = other.strip_prefix("face-cp-") {
                    modes(code).map(|(f, w)| Self::face_cp(f, w))
                } else if let Some(code) = other.strip_prefix("face-") {
                    modes(code).map(|(f, w)| Self::face(f, w))
                } else {
                    None
                }
            }
        };
        config.ok_or_else(|| {
            Error::usage(format!(
                "unknown loss {s:?}; expected ce, face-opr, face-opo, face-gpr, face-gpo, cp, cp-free, face-cp or face-cp-free"
            ))
        })
    }
}

fn check_target(dist: &PredictedDistribution, target: usize) -> Result<()> {
    if target >= dist.len() {
        return Err(Error::usage(format!(
            "target {target} outside a {}-way distribution",
            dist.len()
        )));
    }
    if target == PAD {
        return Err(Error::usage("PAD is never a loss target"));
    }
    Ok(())
}

/// `-ln p[target]`, with the probability clamped at `PROB_FLOOR`.
pub fn ce(dist: &PredictedDistribution, target: usize) -> Result<f64> {
    check_target(dist, target)?;
    let p = dist.probs[target];
    if p < PROB_FLOOR {
        CLAMP_WARNING.call_once(|| {
            log::warn!("target probability {p:e} clamped to {PROB_FLOOR:e} inside the log");
        });
    }
    Ok(-p.max(PROB_FLOOR).ln())
}

pub fn face(dist: &PredictedDistribution, target: usize, weight: f64) -> Result<f64> {
    if !(weight >= 0.0) || !weight.is_finite() {
        return Err(Error::domain(format!("FACE weight {weight} must be finite and >= 0")));
    }
    Ok(weight * ce(dist, target)?)
}

/// `ce - beta * H`; negative for large enough `beta`.
pub fn cp(dist: &PredictedDistribution, target: usize, beta: f64) -> Result<f64> {
    Ok(ce(dist, target)? - beta * dist.entropy)
}

/// `ce + 1 / max(H, floor)`.
pub fn cp_free(dist: &PredictedDistribution, target: usize, entropy_floor: f64) -> Result<f64> {
    Ok(ce(dist, target)? + 1.0 / dist.entropy.max(entropy_floor))
}

/// Target-independent entropy weight `1 + 1 / max(H, floor)`.
pub fn cp_weight(dist: &PredictedDistribution, entropy_floor: f64) -> f64 {
    1.0 + 1.0 / dist.entropy.max(entropy_floor)
}

/// Tables a FACE weight may be derived from.
#[derive(Clone, Copy, Debug, Default)]
pub struct WeightSource<'a> {
    pub table: Option<&'a FrequencyTable>,
    pub pre: Option<&'a WeightVector>,
}

impl<'a> WeightSource<'a> {
    pub fn new(table: Option<&'a FrequencyTable>, pre: Option<&'a WeightVector>) -> Self {
        WeightSource { table, pre }
    }
}

/// The frequency weight for one step of a FACE variant.
pub fn face_weight(
    dist: &PredictedDistribution,
    target: usize,
    config: &LossConfig,
    source: WeightSource<'_>,
) -> Result<f64> {
    match config.weight_mode {
        Some(WeightMode::Pre) => {
            let weights = source
                .pre
                .ok_or_else(|| Error::usage("pre-weight variant needs a weight vector"))?;
            Ok(weights.get(target))
        }
        Some(WeightMode::Post) => {
            let table = source
                .table
                .ok_or_else(|| Error::usage("post-weight variant needs a frequency table"))?;
            table.post_weight(dist.argmax(), target)
        }
        None => Err(Error::usage("variant has no weight mode")),
    }
}

/// Single-step loss for any configured variant.
pub fn combined(
    dist: &PredictedDistribution,
    target: usize,
    config: &LossConfig,
    freq_table: Option<&FrequencyTable>,
    weight_vec: Option<&WeightVector>,
) -> Result<f64> {
    config.validate()?;
    let source = WeightSource::new(freq_table, weight_vec);
    match config.variant {
        LossVariant::Ce => ce(dist, target),
        LossVariant::Cp => cp(dist, target, config.beta),
        LossVariant::CpFree => cp_free(dist, target, config.entropy_floor),
        LossVariant::Face => face(dist, target, face_weight(dist, target, config, source)?),
        LossVariant::FaceCp => {
            let w = face_weight(dist, target, config, source)?;
            Ok(face(dist, target, w)? - config.beta * dist.entropy)
        }
        LossVariant::FaceCpFree => {
            let w = face_weight(dist, target, config, source)?;
            Ok(cp_weight(dist, config.entropy_floor) * face(dist, target, w)?)
        }
    }
}

/// Frozen multiplicative weights for one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepWeight {
    /// Frequency weight (1 for variants without one).
    pub face: f64,
    /// Entropy weight (1 unless the variant is `FaceCpFree`).
    pub cp: f64,
}

impl StepWeight {
    pub const ONE: StepWeight = StepWeight { face: 1.0, cp: 1.0 };

    pub fn applied(&self) -> f64 {
        self.face * self.cp
    }
}

pub fn step_weight(
    dist: &PredictedDistribution,
    target: usize,
    config: &LossConfig,
    source: WeightSource<'_>,
) -> Result<StepWeight> {
    let face = if config.variant.uses_frequency() {
        face_weight(dist, target, config, source)?
    } else {
        1.0
    };
    let cp = if config.variant == LossVariant::FaceCpFree {
        cp_weight(dist, config.entropy_floor)
    } else {
        1.0
    };
    Ok(StepWeight { face, cp })
}

/// Loss value and its gradient w.r.t. the logits that produced `dist`,
/// holding `weight` constant.
pub fn loss_and_logit_grad(
    dist: &PredictedDistribution,
    target: usize,
    config: &LossConfig,
    weight: StepWeight,
) -> Result<(f64, Vec<f64>)> {
    let ce_value = ce(dist, target)?;
    let mut grad: Vec<f64> = dist.probs.to_vec();
    grad[target] -= 1.0;
    let scale_ce = |grad: &mut Vec<f64>, s: f64| grad.iter_mut().for_each(|g| *g *= s);
    let value = match config.variant {
        LossVariant::Ce => ce_value,
        LossVariant::Face => {
            scale_ce(&mut grad, weight.face);
            face(dist, target, weight.face)?
        }
        LossVariant::FaceCpFree => {
            let w = weight.face * weight.cp;
            scale_ce(&mut grad, w);
            weight.cp * face(dist, target, weight.face)?
        }
        LossVariant::Cp | LossVariant::FaceCp => {
            let w = if config.variant == LossVariant::FaceCp { weight.face } else { 1.0 };
            scale_ce(&mut grad, w);
            for (g, dh) in grad.iter_mut().zip(dist.entropy_grad()) {
                *g -= config.beta * dh;
            }
            face(dist, target, w)? - config.beta * dist.entropy
        }
        LossVariant::CpFree => {
            let h = dist.entropy;
            if h > config.entropy_floor {
                for (g, dh) in grad.iter_mut().zip(dist.entropy_grad()) {
                    *g -= dh / (h * h);
                }
            }
            ce_value + 1.0 / h.max(config.entropy_floor)
        }
    };
    Ok((value, grad))
}

/// Weight applied at one non-PAD position of a batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AppliedWeight {
    pub step: usize,
    pub row: usize,
    pub target: usize,
    pub predicted: usize,
    pub weight: StepWeight,
}

#[derive(Clone, Debug)]
pub struct BatchLoss {
    /// Mean loss over non-PAD positions.
    pub loss: f64,
    pub positions: usize,
    pub weights: Vec<AppliedWeight>,
    /// `d loss / d logits`, one matrix per decoder step.
    pub logit_grads: Vec<Matrix>,
}

fn check_logits(logits: &[Matrix], batch: &Batch) -> Result<()> {
    if logits.len() != batch.max_target_len() {
        return Err(Error::structural(format!(
            "{} logit steps for {} target steps",
            logits.len(),
            batch.max_target_len()
        )));
    }
    if logits.iter().any(|m| m.rows() != batch.len()) {
        return Err(Error::structural("logit rows must match the batch size"));
    }
    if batch.target_token_count() == 0 {
        return Err(Error::usage("batch has no non-PAD target positions"));
    }
    Ok(())
}

/// Weights for every non-PAD position, in (step, row) order.
pub fn step_weights(
    logits: &[Matrix],
    batch: &Batch,
    config: &LossConfig,
    source: WeightSource<'_>,
) -> Result<Vec<AppliedWeight>> {
    config.validate()?;
    check_logits(logits, batch)?;
    let mut out = Vec::with_capacity(batch.target_token_count());
    for (step, m) in logits.iter().enumerate() {
        for row in 0..batch.len() {
            let Some(target) = batch.target(row, step) else { continue };
            let dist = PredictedDistribution::from_logits(m.row(row))?;
            out.push(AppliedWeight {
                step,
                row,
                target,
                predicted: dist.argmax(),
                weight: step_weight(&dist, target, config, source)?,
            });
        }
    }
    Ok(out)
}

/// Mean loss over non-PAD positions with the given frozen weights.
pub fn batch_loss_with_weights(
    logits: &[Matrix],
    batch: &Batch,
    config: &LossConfig,
    weights: Vec<AppliedWeight>,
) -> Result<BatchLoss> {
    config.validate()?;
    check_logits(logits, batch)?;
    let positions = batch.target_token_count();
    if weights.len() != positions {
        return Err(Error::structural(format!(
            "{} weights for {positions} positions",
            weights.len()
        )));
    }
    let inv = 1.0 / positions as f64;
    let mut total = 0.0;
    let mut logit_grads: Vec<Matrix> =
        logits.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
    for aw in &weights {
        if batch.target(aw.row, aw.step) != Some(aw.target) {
            return Err(Error::structural("weight list does not match the batch positions"));
        }
        let dist = PredictedDistribution::from_logits(logits[aw.step].row(aw.row))?;
        let (value, grad) = loss_and_logit_grad(&dist, aw.target, config, aw.weight)?;
        total += value;
        for (g, v) in logit_grads[aw.step].row_mut(aw.row).iter_mut().zip(grad) {
            *g = v * inv;
        }
    }
    Ok(BatchLoss {
        loss: total * inv,
        positions,
        weights,
        logit_grads,
    })
}

pub fn batch_loss(
    logits: &[Matrix],
    batch: &Batch,
    config: &LossConfig,
    source: WeightSource<'_>,
) -> Result<BatchLoss> {
    let weights = step_weights(logits, batch, config, source)?;
    batch_loss_with_weights(logits, batch, config, weights)
}
