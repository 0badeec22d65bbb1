//! Joint multilingual training, adding languages against frozen modules, the
//! Adam optimizer with its warmup schedule, and a shared-model baseline.

mod optim;
mod shared;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{make_batches, BatchStream, EncodedPair, ParallelBatch};
use crate::error::{Error, Result};
use crate::lang::{Direction, LanguageId};
use crate::registry::Registry;
use crate::transformer::{teacher_forced_loss, Graph, Role};

pub use optim::{lr_at, AdamConfig, Moments, OptimizerState};
pub use shared::{SharedBaseline, SHARED_LANGUAGE};

/// The set of directions trained together, visited in a fixed nested order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSchedule {
    directions: BTreeSet<Direction>,
}

impl TrainingSchedule {
    /// Every ordered pair of distinct languages.
    pub fn all_pairs<'a>(langs: impl IntoIterator<Item = &'a LanguageId> + Clone) -> Self {
        let mut directions = BTreeSet::new();
        for a in langs.clone() {
            for b in langs.clone() {
                if a != b {
                    directions.insert(Direction::new(a.clone(), b.clone()));
                }
            }
        }
        TrainingSchedule { directions }
    }

    /// An explicit list. Same-language entries are allowed when listed.
    pub fn new(directions: impl IntoIterator<Item = Direction>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for d in directions {
            if !set.insert(d.clone()) {
                return Err(Error::Config(format!("direction {d} is scheduled twice")));
            }
        }
        Ok(TrainingSchedule { directions: set })
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn contains(&self, d: &Direction) -> bool {
        self.directions.contains(d)
    }

    pub fn remove(&mut self, d: &Direction) -> bool {
        self.directions.remove(d)
    }

    pub fn directions(&self) -> impl Iterator<Item = &Direction> {
        self.directions.iter()
    }

    pub fn validate(&self, r: &Registry) -> Result<()> {
        for d in &self.directions {
            r.require(&d.src)?;
            r.require(&d.tgt)?;
        }
        Ok(())
    }

    /// Outer loop over source languages, inner loop over target languages,
    /// both in registration order, keeping the pairs in the schedule.
    pub fn visit_order(&self, r: &Registry) -> Vec<Direction> {
        let langs: Vec<&LanguageId> = r.languages().collect();
        let mut out = Vec::new();
        for src in &langs {
            for tgt in &langs {
                let d = Direction::new((*src).clone(), (*tgt).clone());
                if self.directions.contains(&d) {
                    out.push(d);
                }
            }
        }
        out
    }
}

fn stream_id(d: &Direction) -> u64 {
    // FNV-1a over the direction name, so a stream's shuffles do not depend
    // on which other directions exist.
    d.to_string()
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Training streams and validation batches per direction.
#[derive(Clone, Debug)]
pub struct TrainingData {
    budget: usize,
    seed: u64,
    streams: BTreeMap<Direction, BatchStream>,
    valid: BTreeMap<Direction, Vec<ParallelBatch>>,
}

impl TrainingData {
    pub fn new(token_budget: usize, seed: u64) -> Self {
        TrainingData {
            budget: token_budget,
            seed,
            streams: BTreeMap::new(),
            valid: BTreeMap::new(),
        }
    }

    pub fn add_direction(
        &mut self,
        direction: Direction,
        train: Vec<EncodedPair>,
        valid: Vec<EncodedPair>,
    ) -> Result<()> {
        let stream = stream_id(&direction);
        let valid = make_batches(&direction, &valid, self.budget, 0)?;
        let s = BatchStream::new(direction.clone(), train, self.budget, self.seed, stream)?;
        self.streams.insert(direction.clone(), s);
        self.valid.insert(direction, valid);
        Ok(())
    }

    /// Tokenizes sentence pairs with the source and target tokenizers.
    pub fn encode_pairs(
        r: &Registry,
        direction: &Direction,
        pairs: &[(String, String)],
    ) -> Result<Vec<EncodedPair>> {
        let (s, t) = (r.tokenizer(&direction.src)?, r.tokenizer(&direction.tgt)?);
        Ok(pairs
            .iter()
            .map(|(a, b)| EncodedPair {
                src: s.encode(a),
                tgt: t.encode(b),
            })
            .collect())
    }

    pub fn has(&self, d: &Direction) -> bool {
        self.streams.contains_key(d)
    }

    pub fn validation(&self, d: &Direction) -> Option<&[ParallelBatch]> {
        self.valid.get(d).map(Vec::as_slice)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StopCriterion {
    /// Evaluations without improvement before stopping.
    pub patience: u32,
    /// Steps between validation evaluations.
    pub interval: u64,
    /// Stop as soon as the mean validation loss is at or below this value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_loss: Option<f64>,
}

impl Default for StopCriterion {
    fn default() -> Self {
        StopCriterion {
            patience: 5,
            interval: 200,
            target_loss: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    MaxSteps,
    Patience,
    TargetLoss,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::MaxSteps => "max-steps",
            StopReason::Patience => "patience",
            StopReason::TargetLoss => "target-loss",
        })
    }
}

/// One validation evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub lr: f64,
    /// Mean training loss per direction since the previous evaluation.
    pub train_loss: BTreeMap<String, f64>,
    pub valid_loss: BTreeMap<String, f64>,
    pub mean_valid_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub records: Vec<EvalRecord>,
    /// Training loss of every direction visit, step by step.
    pub loss_trace: Vec<Vec<(String, f32)>>,
    pub steps: u64,
    pub best_step: Option<u64>,
    pub best_valid_loss: Option<f64>,
    pub stop_reason: StopReason,
}

impl TrainingReport {
    /// One line per evaluation followed by a summary line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            let fmt_map = |m: &BTreeMap<String, f64>| {
                m.iter()
                    .map(|(k, v)| format!("{k}={v:.4}"))
                    .collect::<Vec<_>>()
                    .join(",")
            };
            s += &format!(
                "step={} lr={:.3e} train[{}] valid[{}] mean_valid={:.4}\n",
                r.step,
                r.lr,
                fmt_map(&r.train_loss),
                fmt_map(&r.valid_loss),
                r.mean_valid_loss
            );
        }
        s += &format!(
            "stopped={} steps={} best_step={} best_valid={}\n",
            self.stop_reason,
            self.steps,
            self.best_step.map_or("-".into(), |x| x.to_string()),
            self.best_valid_loss.map_or("-".into(), |x| format!("{x:.4}")),
        );
        s
    }
}

fn dropout_seed(r: &Registry, step: u64, visit: usize) -> u64 {
    crate::seed::derive(r.seed(), &[0x64726f70, step, visit as u64])
}

/// One pass of the nested direction loop: for every scheduled direction, one
/// batch, one backward pass and one Adam update of the source encoder and
/// target decoder. Returns the training loss of each visit in order.
pub fn multilingual_training_step(
    r: &mut Registry,
    sched: &TrainingSchedule,
    data: &mut TrainingData,
    opt: &mut OptimizerState,
) -> Result<Vec<(Direction, f32)>> {
    sched.validate(r)?;
    let order = sched.visit_order(r);
    if let Some(d) = order.iter().find(|d| !data.has(d)) {
        return Err(Error::Config(format!("no training data for direction {d}")));
    }
    opt.step += 1;
    let step = opt.step;
    let mut losses = Vec::with_capacity(order.len());
    for (visit, d) in order.into_iter().enumerate() {
        let (i, j) = (r.require(&d.src)?, r.require(&d.tgt)?);
        let batch = data.streams.get_mut(&d).unwrap().next_batch()?;
        let mut g = Graph::training(dropout_seed(r, step, visit));
        let enc = &r.entry_at(i).modules;
        let dec = &r.entry_at(j).modules;
        let loss = teacher_forced_loss(&mut g, (i, enc), (j, dec), batch)?;
        let value = g.tape.value(loss)[0];
        g.tape.backward(loss)?;
        for k in BTreeSet::from([i, j]) {
            let m = r.modules_at_mut(k);
            m.zero_grads();
            g.accumulate_grads(k, m)?;
        }
        drop(g);
        // Only the encoder of `i` and the decoder of `j` took part; every
        // other parameter of those languages has no gradient and is skipped.
        for k in BTreeSet::from([i, j]) {
            let m = r.modules_at_mut(k);
            opt.update(m.params_mut().iter_mut(), step)?;
            m.zero_grads();
        }
        r.record_trained(d.clone());
        losses.push((d, value));
    }
    Ok(losses)
}

/// Mean teacher-forced loss over the validation batches of `d`, weighted by
/// target tokens.
pub fn validation_loss(r: &Registry, data: &TrainingData, d: &Direction) -> Result<Option<f64>> {
    let Some(batches) = data.validation(d) else {
        return Ok(None);
    };
    let (i, j) = (r.require(&d.src)?, r.require(&d.tgt)?);
    let (mut total, mut weight) = (0.0, 0.0);
    for b in batches {
        let mut g = Graph::inference();
        let loss = teacher_forced_loss(
            &mut g,
            (i, &r.entry_at(i).modules),
            (j, &r.entry_at(j).modules),
            b,
        )?;
        let n = b.tgt.chunks(b.tgt_len).map(|row| row[1..].iter().filter(|&&t| t != 0).count()).sum::<usize>() as f64;
        total += g.tape.value(loss)[0] as f64 * n;
        weight += n;
    }
    Ok((weight > 0.0).then(|| total / weight))
}

fn as_divergence(step: u64, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Divergence {
            step,
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// Repeats [`multilingual_training_step`], evaluating every
/// `stop.interval` steps, until the stop criterion fires or `max_steps`
/// steps have run. The registry and optimizer are left at the state with the
/// best mean validation loss. On divergence they are restored to that state
/// and the error is returned.
pub fn train_joint(
    r: &mut Registry,
    sched: &TrainingSchedule,
    data: &mut TrainingData,
    opt: &mut OptimizerState,
    stop: &StopCriterion,
    max_steps: u64,
) -> Result<TrainingReport> {
    sched.validate(r)?;
    if let Some(d) = sched.visit_order(r).iter().find(|d| !data.has(d)) {
        return Err(Error::Config(format!("no training data for direction {d}")));
    }
    if stop.interval == 0 {
        return Err(Error::Config("evaluation interval must be positive".into()));
    }
    let mut report = TrainingReport {
        records: Vec::new(),
        loss_trace: Vec::new(),
        steps: 0,
        best_step: None,
        best_valid_loss: None,
        stop_reason: StopReason::MaxSteps,
    };
    if max_steps == 0 {
        return Ok(report);
    }
    let mut best: Option<(f64, Registry, OptimizerState)> = None;
    let mut stale = 0;
    let mut since_eval: BTreeMap<String, (f64, u32)> = BTreeMap::new();
    for n in 1..=max_steps {
        let losses = match multilingual_training_step(r, sched, data, opt) {
            Ok(l) => l,
            Err(e) => {
                let e = as_divergence(opt.step, e);
                if let Some((_, br, bo)) = best {
                    *r = br;
                    *opt = bo;
                }
                return Err(e);
            }
        };
        report.steps = n;
        for (d, l) in &losses {
            let e = since_eval.entry(d.to_string()).or_default();
            e.0 += *l as f64;
            e.1 += 1;
        }
        report
            .loss_trace
            .push(losses.iter().map(|(d, l)| (d.to_string(), *l)).collect());

        if n % stop.interval != 0 && n != max_steps {
            continue;
        }
        let mut valid_loss = BTreeMap::new();
        for d in sched.visit_order(r) {
            let l = validation_loss(r, data, &d).map_err(|e| as_divergence(opt.step, e))?;
            if let Some(l) = l {
                valid_loss.insert(d.to_string(), l);
            }
        }
        let mean = if valid_loss.is_empty() {
            f64::NAN
        } else {
            valid_loss.values().sum::<f64>() / valid_loss.len() as f64
        };
        report.records.push(EvalRecord {
            step: opt.step,
            lr: opt.lr(opt.step)?,
            train_loss: std::mem::take(&mut since_eval)
                .into_iter()
                .map(|(k, (s, c))| (k, s / c as f64))
                .collect(),
            valid_loss,
            mean_valid_loss: mean,
        });
        if mean.is_nan() {
            // Without validation data the latest state is kept.
            continue;
        }
        if best.as_ref().is_none_or(|(b, _, _)| mean < *b) {
            best = Some((mean, r.clone(), opt.clone()));
            report.best_step = Some(opt.step);
            report.best_valid_loss = Some(mean);
            stale = 0;
        } else {
            stale += 1;
        }
        if stop.target_loss.is_some_and(|t| mean <= t) {
            report.stop_reason = StopReason::TargetLoss;
            break;
        }
        if stale >= stop.patience {
            report.stop_reason = StopReason::Patience;
            break;
        }
    }
    if let Some((_, br, bo)) = best {
        *r = br;
        *opt = bo;
    }
    Ok(report)
}

fn changed(before: &BTreeMap<String, String>, after: &BTreeMap<String, String>) -> Vec<String> {
    before
        .iter()
        .filter(|(k, v)| after.get(*k) != Some(v))
        .map(|(k, _)| k.clone())
        .collect()
}

/// Outcome of one add-language phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AddLanguageReport {
    pub direction: Direction,
    pub frozen: (LanguageId, Role),
    pub training: TrainingReport,
    /// Number of parameters of pre-existing languages whose digest changed.
    /// Always zero on success.
    pub changed_preexisting: usize,
    pub checked_preexisting: usize,
}

#[allow(clippy::too_many_arguments)]
fn add_language_phase(
    r: &mut Registry,
    new_lang: &LanguageId,
    anchor: &LanguageId,
    role: Role,
    data: &mut TrainingData,
    opt: &mut OptimizerState,
    stop: &StopCriterion,
    max_steps: u64,
) -> Result<AddLanguageReport> {
    if new_lang == anchor {
        return Err(Error::Config(format!(
            "`{new_lang}` cannot be added against itself"
        )));
    }
    r.require(new_lang)?;
    r.require(anchor)?;
    if !r.was_trained(anchor) {
        return Err(Error::Config(format!(
            "anchor `{anchor}` has never been trained"
        )));
    }
    let direction = match role {
        Role::Encoder => Direction::new(new_lang.clone(), anchor.clone()),
        Role::Decoder => Direction::new(anchor.clone(), new_lang.clone()),
    };
    let frozen_role = match role {
        Role::Encoder => Role::Decoder,
        Role::Decoder => Role::Encoder,
    };
    let preexisting: BTreeMap<String, String> = {
        let prefix = format!("{new_lang}/");
        r.fingerprint()
            .into_iter()
            .filter(|(k, _)| !k.starts_with(&prefix))
            .collect()
    };
    r.freeze(anchor, frozen_role)?;
    let frozen_names = r.role_fingerprint(anchor, frozen_role)?;
    opt.drop_moments(frozen_names.keys().map(String::as_str));
    // After an earlier phase the new language's other module is trained; a
    // table it shares with the module being trained must not move under it.
    let hold_new = r.was_trained(new_lang) && !r.is_frozen(new_lang, frozen_role);
    if hold_new {
        r.freeze(new_lang, frozen_role)?;
    }
    let sched = TrainingSchedule::new([direction.clone()])?;
    let training = train_joint(r, &sched, data, opt, stop, max_steps);
    if hold_new {
        r.unfreeze(new_lang, frozen_role)?;
    }
    let training = training?;
    let after = r.fingerprint();
    let drift = changed(&preexisting, &after);
    if let Some(name) = drift.first() {
        return Err(Error::Integrity(format!(
            "{} pre-existing parameters changed while adding `{new_lang}`, first: {name}",
            drift.len()
        )));
    }
    Ok(AddLanguageReport {
        direction,
        frozen: (anchor.clone(), frozen_role),
        training,
        changed_preexisting: 0,
        checked_preexisting: preexisting.len(),
    })
}

/// Trains the encoder of `new_lang` on `new_lang → anchor` pairs with the
/// anchor decoder frozen.
pub fn add_language_encoder(
    r: &mut Registry,
    new_lang: &LanguageId,
    anchor: &LanguageId,
    data: &mut TrainingData,
    opt: &mut OptimizerState,
    stop: &StopCriterion,
    max_steps: u64,
) -> Result<AddLanguageReport> {
    add_language_phase(r, new_lang, anchor, Role::Encoder, data, opt, stop, max_steps)
}

/// Trains the decoder of `new_lang` on `anchor → new_lang` pairs with the
/// anchor encoder frozen.
pub fn add_language_decoder(
    r: &mut Registry,
    new_lang: &LanguageId,
    anchor: &LanguageId,
    data: &mut TrainingData,
    opt: &mut OptimizerState,
    stop: &StopCriterion,
    max_steps: u64,
) -> Result<AddLanguageReport> {
    add_language_phase(r, new_lang, anchor, Role::Decoder, data, opt, stop, max_steps)
}
