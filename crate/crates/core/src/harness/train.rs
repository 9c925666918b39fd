use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::{info, warn};

use super::config::{Phase, TrainConfig};
use crate::corpus::{make_batches, Batch, SequencePair, Vocabulary, EOS};
use crate::error::{Error, Result};
use crate::frequency::{FreqMode, FrequencyTable, WeightVector};
use crate::loss::{batch_loss, WeightSource};
use crate::metrics::distinct_n;
use crate::numkernel::{clip_global_norm, AdamState};
use crate::seq2seq::{greedy_decode_batch, Checkpoint, Dropout, ModelParams, TeacherPass};

/// What the scheduler did with one validation score.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SchedulerEvent {
    Improved,
    Waiting,
    Reduced,
    Stop,
}

/// Reduce-on-plateau over validation d-1 with an early-stop rule.
///
/// A score improves when it beats the best so far by at least `threshold`.
/// After `patience` non-improving scores in a row the rate is multiplied by
/// `factor`; `max_reductions` reductions without an improvement stop the run.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    pub max_reductions: usize,
    pub best: f64,
    pub bad_evals: usize,
    pub reductions_since_best: usize,
    pub reductions: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize, threshold: f64, max_reductions: usize) -> Self {
        PlateauScheduler {
            lr,
            factor,
            patience,
            threshold,
            max_reductions,
            best: f64::NEG_INFINITY,
            bad_evals: 0,
            reductions_since_best: 0,
            reductions: 0,
        }
    }

    pub fn from_config(c: &TrainConfig) -> Self {
        Self::new(c.lr, c.factor, c.patience, c.plateau_threshold, c.max_reductions)
    }

    pub fn observe(&mut self, score: f64) -> SchedulerEvent {
        if score >= self.best + self.threshold {
            self.best = score;
            self.bad_evals = 0;
            self.reductions_since_best = 0;
            return SchedulerEvent::Improved;
        }
        self.bad_evals += 1;
        if self.bad_evals < self.patience {
            return SchedulerEvent::Waiting;
        }
        self.bad_evals = 0;
        self.lr *= self.factor;
        self.reductions += 1;
        self.reductions_since_best += 1;
        if self.reductions_since_best >= self.max_reductions {
            SchedulerEvent::Stop
        } else {
            SchedulerEvent::Reduced
        }
    }
}

/// Encoded training and validation data sharing one vocabulary.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub train: Vec<SequencePair>,
    pub valid: Vec<SequencePair>,
}

/// One line of the run log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub valid_d1: f64,
    pub valid_d2: f64,
}

pub const RUN_LOG_HEADER: &str = "# epoch batch lr train_loss valid_d1 valid_d2";

impl EvalRecord {
    pub fn to_line(&self) -> String {
        format!(
            "{} {} {} {} {} {}",
            self.epoch, self.step, self.lr, self.train_loss, self.valid_d1, self.valid_d2
        )
    }
}

/// Weights applied during the run, aggregated per target token.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightAudit {
    pub weight_sum: Vec<f64>,
    pub positions: Vec<u64>,
    /// Weights applied in the most recent epoch only.
    pub epoch_weight_sum: Vec<f64>,
    pub epoch_positions: Vec<u64>,
    /// Greedy-output counts of the most recent epoch.
    pub epoch_outputs: Vec<u64>,
}

impl WeightAudit {
    fn new(vocab: usize) -> Self {
        WeightAudit {
            weight_sum: vec![0.0; vocab],
            positions: vec![0; vocab],
            epoch_weight_sum: vec![0.0; vocab],
            epoch_positions: vec![0; vocab],
            epoch_outputs: vec![0; vocab],
        }
    }

    fn start_epoch(&mut self) {
        self.epoch_weight_sum.iter_mut().for_each(|x| *x = 0.0);
        self.epoch_positions.iter_mut().for_each(|x| *x = 0);
        self.epoch_outputs.iter_mut().for_each(|x| *x = 0);
    }

    pub fn mean_weight(&self, token: usize) -> Option<f64> {
        (self.positions[token] > 0).then(|| self.weight_sum[token] / self.positions[token] as f64)
    }

    pub fn epoch_mean_weight(&self, token: usize) -> Option<f64> {
        (self.epoch_positions[token] > 0).then(|| self.epoch_weight_sum[token] / self.epoch_positions[token] as f64)
    }

    /// `token<TAB>positions<TAB>mean_weight` for every token that was a target.
    pub fn dump(&self, vocab: &Vocabulary) -> String {
        let mut s = String::new();
        for id in 0..self.positions.len() {
            if let Some(w) = self.mean_weight(id) {
                let _ = writeln!(s, "{}\t{}\t{}", vocab.token(id), self.positions[id], w);
            }
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub best_d1: f64,
    pub log: Vec<EvalRecord>,
    pub steps: usize,
    pub epochs: usize,
    pub scheduler: PlateauScheduler,
    pub stopped_early: bool,
    pub gt_table: Option<FrequencyTable>,
    pub output_table: Option<FrequencyTable>,
    pub audit: WeightAudit,
}

/// Greedy decodes with EOS and anything after it removed.
pub fn decode_responses(params: &ModelParams, inputs: &[Vec<usize>], max_len: usize) -> Result<Vec<Vec<usize>>> {
    Ok(greedy_decode_batch(params, inputs, max_len)?
        .into_iter()
        .map(|mut s| {
            if let Some(p) = s.iter().position(|&t| t == EOS) {
                s.truncate(p);
            }
            s
        })
        .collect())
}

/// d-1 and d-2 of greedy decodes over (a capped prefix of) the validation set.
/// Empty decodes yield zero diversity rather than an error.
pub fn validation_diversity(params: &ModelParams, valid: &[SequencePair], cap: usize, max_len: usize) -> Result<(f64, f64)> {
    let inputs: Vec<Vec<usize>> = valid.iter().take(cap).map(|p| p.input.clone()).collect();
    if inputs.is_empty() {
        return Err(Error::usage("empty validation set"));
    }
    let responses = decode_responses(params, &inputs, max_len)?;
    if responses.iter().all(Vec::is_empty) {
        return Ok((0.0, 0.0));
    }
    Ok((distinct_n(&responses, 1)?, distinct_n(&responses, 2)?))
}

fn diverged(epoch: usize, step: usize, e: Error) -> Error {
    match e {
        Error::NumericDomain(reason) => Error::TrainingDiverged {
            epoch,
            batch: step,
            reason,
        },
        other => other,
    }
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64)
}

/// The shared train/refine loop.
///
/// Each batch: update frequency tables (FACE variants only), forward with
/// teacher forcing, batch loss, backward, clip, Adam. Validation d-1 drives
/// the scheduler; the best-d1 and last checkpoints are written to `out_dir`
/// when given, together with the run log and the resolved configuration.
pub fn run(config: &TrainConfig, data: &Dataset, start: Checkpoint, out_dir: Option<&Path>) -> Result<RunOutcome> {
    config.validate()?;
    let loss_config = config.loss_config();
    if data.train.is_empty() {
        return Err(Error::usage("empty training set"));
    }
    let mut params = start.params;
    let vocab = params.hyper().vocab;
    if vocab != data.vocab.len() {
        return Err(Error::usage(format!(
            "model vocabulary {vocab} does not match data vocabulary {}",
            data.vocab.len()
        )));
    }
    let mut adam = match (start.adam, config.resume_optimizer) {
        (Some(a), true) => a,
        _ => AdamState::new(params.tensors()),
    };
    adam.alpha = config.lr;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.txt"), config.snapshot())?;
        data.vocab.save(&dir.join("vocab.txt"))?;
    }

    let freq_mode = loss_config.variant.uses_frequency().then_some(loss_config.freq_mode).flatten();
    let mut gt_table = (freq_mode == Some(FreqMode::Gt)).then(|| FrequencyTable::new(vocab, FreqMode::Gt));
    let mut output_table = (freq_mode == Some(FreqMode::Output)).then(|| FrequencyTable::new(vocab, FreqMode::Output));
    let mut audit = WeightAudit::new(vocab);

    let mut scheduler = PlateauScheduler::from_config(config);
    let mut dropout = Dropout::new(config.dropout, epoch_seed(config.seed, usize::MAX));
    let mut log = Vec::new();
    let mut log_text = format!("{RUN_LOG_HEADER}\n");
    let mut best: Option<Checkpoint> = None;
    let mut step = 0usize;
    let mut epochs = 0usize;
    let mut stopped_early = false;
    let mut loss_sum = 0.0;
    let mut loss_batches = 0usize;

    'epochs: for epoch in 1..=config.max_epochs {
        epochs = epoch;
        audit.start_epoch();
        let batches = make_batches(&data.train, config.batch_size, epoch_seed(config.seed, epoch))?;
        let n_batches = batches.len();
        for (bi, batch) in batches.iter().enumerate() {
            step += 1;
            let loss = train_step(
                &mut params,
                &mut adam,
                batch,
                config,
                &loss_config,
                &mut gt_table,
                &mut output_table,
                &mut audit,
                &mut dropout,
            )
            .map_err(|e| diverged(epoch, step, e))?;
            loss_sum += loss;
            loss_batches += 1;

            let epoch_end = bi + 1 == n_batches;
            let budget_hit = config.max_steps > 0 && step >= config.max_steps;
            let due = if config.eval_every == 0 { epoch_end } else { step.is_multiple_of(config.eval_every) };
            if due || budget_hit {
                let (d1, d2) = validation_diversity(&params, &data.valid, config.valid_cap, config.max_len)?;
                let record = EvalRecord {
                    epoch,
                    step,
                    lr: adam.alpha,
                    train_loss: loss_sum / loss_batches as f64,
                    valid_d1: d1,
                    valid_d2: d2,
                };
                loss_sum = 0.0;
                loss_batches = 0;
                info!("{}", record.to_line());
                log.push(record);
                log_text.push_str(&record.to_line());
                log_text.push('\n');
                let event = scheduler.observe(d1);
                adam.alpha = scheduler.lr;
                if event == SchedulerEvent::Improved {
                    let ckpt = Checkpoint::new(params.clone(), Some(adam.clone()));
                    if let Some(dir) = out_dir {
                        ckpt.save(&dir.join("best.ckpt"))?;
                    }
                    best = Some(ckpt);
                }
                if let Some(dir) = out_dir {
                    fs::write(dir.join("run.log"), &log_text)?;
                }
                if event == SchedulerEvent::Stop {
                    info!("early stop after {} reductions without improvement", config.max_reductions);
                    stopped_early = true;
                    break 'epochs;
                }
            }
            if budget_hit {
                break 'epochs;
            }
        }
    }

    let last = Checkpoint::new(params, Some(adam));
    if let Some(dir) = out_dir {
        last.save(&dir.join("last.ckpt"))?;
        fs::write(dir.join("weights.audit"), audit.dump(&data.vocab))?;
        if let Some(t) = gt_table.as_ref().or(output_table.as_ref()) {
            t.save(&dir.join("frequency.txt"), &data.vocab)?;
        }
    }
    let best = best.unwrap_or_else(|| {
        warn!("no evaluation ran; best checkpoint is the last one");
        last.clone()
    });
    Ok(RunOutcome {
        best,
        last,
        best_d1: scheduler.best,
        log,
        steps: step,
        epochs,
        scheduler,
        stopped_early,
        gt_table,
        output_table,
        audit,
    })
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    params: &mut ModelParams,
    adam: &mut AdamState,
    batch: &Batch,
    config: &TrainConfig,
    loss_config: &crate::loss::LossConfig,
    gt_table: &mut Option<FrequencyTable>,
    output_table: &mut Option<FrequencyTable>,
    audit: &mut WeightAudit,
    dropout: &mut Dropout,
) -> Result<f64> {
    if let Some(t) = gt_table.as_mut() {
        t.update_gt(batch)?;
    }
    if let Some(t) = output_table.as_mut() {
        let decoded = greedy_decode_batch(params, &batch.unpadded_inputs(), config.max_len)?;
        for s in &decoded {
            for &tok in s {
                audit.epoch_outputs[tok] += 1;
            }
        }
        t.update_output(&decoded)?;
    }
    let table = gt_table.as_ref().or(output_table.as_ref());
    let pre: Option<WeightVector> = match (table, loss_config.weight_mode) {
        (Some(t), Some(crate::loss::WeightMode::Pre)) => Some(t.pre_weight()?),
        _ => None,
    };
    let dropout = (config.dropout > 0.0).then_some(dropout);
    let pass = TeacherPass::run(params, batch, dropout)?;
    let bl = batch_loss(&pass.logits(), batch, loss_config, WeightSource::new(table, pre.as_ref()))?;
    if !bl.loss.is_finite() {
        return Err(Error::domain(format!("batch loss {}", bl.loss)));
    }
    for aw in &bl.weights {
        let w = aw.weight.applied();
        audit.weight_sum[aw.target] += w;
        audit.positions[aw.target] += 1;
        audit.epoch_weight_sum[aw.target] += w;
        audit.epoch_positions[aw.target] += 1;
    }
    let mut grads = pass.backward(&bl.logit_grads)?;
    for g in &grads {
        g.ensure_finite("gradient")?;
    }
    clip_global_norm(&mut grads, config.clip);
    adam.step(&mut params.tensors_mut(), &grads)?;
    Ok(bl.loss)
}

/// CE training from a fresh initialization.
pub fn train(config: &TrainConfig, data: &Dataset, out_dir: Option<&Path>) -> Result<RunOutcome> {
    if config.phase != Phase::Train {
        return Err(Error::usage("train needs a train-phase configuration"));
    }
    config.validate()?;
    let params = ModelParams::init(config.hyper(data.vocab.len()), config.seed)?;
    run(config, data, Checkpoint::new(params, None), out_dir)
}

/// Fine-tune a trained checkpoint with any loss variant.
pub fn refine(config: &TrainConfig, data: &Dataset, base: Checkpoint, out_dir: Option<&Path>) -> Result<RunOutcome> {
    if config.phase != Phase::Refine {
        return Err(Error::usage("refine needs a refine-phase configuration"));
    }
    run(config, data, base, out_dir)
}
