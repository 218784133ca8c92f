use std::collections::BTreeMap;
use std::io::Write;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Tensor};
use crate::eval::{evaluate_model, PairSelection};
use crate::objectives::{ae_loss, cae_loss, j_cvae, j_mcvae, j_vae, triplet_loss};
use crate::rnn::{Model, Segment};
use crate::scalar::Scalar;

use super::adam::{adam_step, clip_global_norm, OptimizerState};
use super::checkpoint::{Checkpoint, ResumeState};
use super::config::{ModelKind, TrainConfig};
use super::TrainError;

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    /// The objective as defined for the model kind: maximized for the
    /// variational kinds, minimized otherwise.
    pub objective: f64,
    pub kl: f64,
    pub weight: f64,
    /// Validation AP in percent, when evaluated after this step.
    pub val_ap: Option<f64>,
}

impl StepRecord {
    pub fn log_line(&self) -> String {
        let ap = self.val_ap.map_or_else(|| "NA".to_string(), |v| v.to_string());
        format!("step {} objective {} kl {} weight {} val_ap {}", self.step, self.objective, self.kl, self.weight, ap)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<S> {
    /// Parameters with the best validation AP (the last parameters when
    /// there is no validation set).
    pub best: Checkpoint<S>,
    /// Final parameters with full resume state.
    pub last: Checkpoint<S>,
    /// `(step, AP percent)` for every validation evaluation.
    pub evaluations: Vec<(u64, f64)>,
    pub records: Vec<StepRecord>,
}

/// Seeded training loop.
///
/// A single ChaCha8 stream seeded with `config.seed` is consumed in this
/// order: parameter initialization (skipped when starting from given
/// parameters); then, at the start of every epoch, a shuffle of the
/// training items; then, at every step, either the standard-normal latent
/// noise for the batch (`K × rows × latent_dim`, row-major in the layout
/// the objectives expect) or, for the Siamese model, one negative per
/// triplet.
pub struct Trainer<'a, S: Scalar> {
    config: TrainConfig,
    segments: &'a [Segment<S>],
    pairs: Vec<(usize, usize)>,
    validation: Vec<&'a Segment<S>>,
    negatives: BTreeMap<Option<String>, Vec<usize>>,
    model: Model<S>,
    optimizer: OptimizerState<S>,
    rng: ChaCha8Rng,
    step: u64,
    epoch: usize,
    batch: usize,
    order: Vec<usize>,
    epoch_word_pos: Option<u128>,
    best: Option<(Model<S>, u64)>,
    best_ap: Option<f64>,
    evals_since_best: usize,
    last_eval_step: Option<u64>,
    evaluations: Vec<(u64, f64)>,
    records: Vec<StepRecord>,
}

impl<'a, S: Scalar> Trainer<'a, S> {
    /// Starts a run. `pairs` index into `segments` and are required exactly
    /// for the pair-trained kinds. Without `init` the parameters are drawn
    /// from the run's random stream.
    pub fn new(
        config: TrainConfig,
        segments: &'a [Segment<S>],
        pairs: &[(usize, usize)],
        validation: &'a [Segment<S>],
        init: Option<&Model<S>>,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = match init {
            Some(m) => {
                if m.config != config.model {
                    return Err(TrainError::ArchitectureMismatch { expected: config.model.clone(), found: m.config.clone() });
                }
                m.clone()
            }
            None => Model::init(&config.model, &mut rng),
        };
        Self::assemble(config, segments, pairs, validation, model, rng)
    }

    /// Continues a run from a checkpoint carrying resume state.
    pub fn resume(
        config: TrainConfig,
        segments: &'a [Segment<S>],
        pairs: &[(usize, usize)],
        validation: &'a [Segment<S>],
        checkpoint: &Checkpoint<S>,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        let r = checkpoint.resume.as_ref().ok_or(TrainError::NotResumable)?;
        if checkpoint.model.config != config.model {
            return Err(TrainError::ArchitectureMismatch { expected: config.model.clone(), found: checkpoint.model.config.clone() });
        }
        if r.seed != config.seed {
            return Err(TrainError::Data(format!("checkpoint was trained with seed {}, config has {}", r.seed, config.seed)));
        }
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut t = Self::assemble(config, segments, pairs, validation, checkpoint.model.clone(), rng)?;
        t.optimizer = r.optimizer.clone();
        t.step = checkpoint.step;
        t.epoch = r.epoch;
        t.batch = r.batch;
        if let Some(pos) = r.epoch_word_pos {
            t.rng.set_word_pos(pos);
            t.shuffle();
        }
        t.rng.set_word_pos(r.word_pos);
        t.best = r.best.clone();
        t.best_ap = checkpoint.best_val_ap;
        t.evals_since_best = r.evals_since_best;
        t.last_eval_step = r.last_eval_step;
        Ok(t)
    }

    fn assemble(
        config: TrainConfig,
        segments: &'a [Segment<S>],
        pairs: &[(usize, usize)],
        validation: &'a [Segment<S>],
        model: Model<S>,
        rng: ChaCha8Rng,
    ) -> Result<Self, TrainError> {
        let kind = config.kind;
        if segments.is_empty() {
            return Err(TrainError::Data("empty training set".into()));
        }
        if let Some(s) = segments.iter().chain(validation).find(|s| s.dim() != config.model.feature_dim) {
            return Err(TrainError::Data(format!("segment {} has dimension {}, model expects {}", s.id, s.dim(), config.model.feature_dim)));
        }
        if kind.uses_pairs() && pairs.is_empty() {
            return Err(TrainError::Data(format!("{kind} training needs pairs")));
        }
        if let Some(&(a, b)) = pairs.iter().find(|&&(a, b)| a >= segments.len() || b >= segments.len()) {
            return Err(TrainError::Data(format!("pair ({a}, {b}) is out of range")));
        }
        let mut negatives = BTreeMap::new();
        if kind == ModelKind::Siamese {
            for &(a, _) in pairs {
                let label = segments[a].label.clone();
                if label.is_some() && !negatives.contains_key(&label) {
                    let others: Vec<usize> = (0..segments.len()).filter(|&i| segments[i].label != label).collect();
                    if others.is_empty() {
                        return Err(TrainError::Data(format!("no negatives for label {}", label.unwrap_or_default())));
                    }
                    negatives.insert(label, others);
                }
            }
        }
        let optimizer = OptimizerState::new(model.named_tensors());
        Ok(Self {
            pairs: if kind.uses_pairs() { pairs.to_vec() } else { Vec::new() },
            validation: validation.iter().collect(),
            negatives,
            optimizer,
            model,
            rng,
            config,
            segments,
            step: 0,
            epoch: 0,
            batch: 0,
            order: Vec::new(),
            epoch_word_pos: None,
            best: None,
            best_ap: None,
            evals_since_best: 0,
            last_eval_step: None,
            evaluations: Vec::new(),
            records: Vec::new(),
        })
    }

    pub fn model(&self) -> &Model<S> {
        &self.model
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    fn num_items(&self) -> usize {
        if self.config.kind.uses_pairs() {
            self.pairs.len()
        } else {
            self.segments.len()
        }
    }

    fn shuffle(&mut self) {
        self.order = (0..self.num_items()).collect();
        self.order.shuffle(&mut self.rng);
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.max_epochs
            || self.config.max_steps.is_some_and(|m| self.step >= m)
            || self.config.patience.is_some_and(|p| self.evals_since_best > p)
    }

    fn evaluate(&mut self) -> Result<Option<f64>, TrainError> {
        if self.validation.len() < 2 {
            return Ok(None);
        }
        let report = evaluate_model(&self.model.encoder, &self.validation, PairSelection::All)?;
        let ap = report.ap_percent.as_f64();
        info!("step {}: validation AP {:.2}%", self.step, ap);
        self.evaluations.push((self.step, ap));
        self.last_eval_step = Some(self.step);
        if self.best_ap.is_none_or(|b| ap > b) {
            self.best_ap = Some(ap);
            self.best = Some((self.model.clone(), self.step));
            self.evals_since_best = 0;
        } else {
            self.evals_since_best += 1;
        }
        Ok(Some(ap))
    }

    fn ensure_started(&mut self) -> Result<(), TrainError> {
        if self.step == 0 && self.last_eval_step.is_none() {
            self.evaluate()?;
        }
        Ok(())
    }

    fn noise(&mut self, rows: usize) -> Tensor<S> {
        let shape = [self.config.loss.samples * rows, self.config.model.latent_dim];
        Tensor::from_fn(&shape, |_| S::lit(self.rng.sample(StandardNormal)))
    }

    fn kl_weight(&self) -> f64 {
        let w = self.config.loss.kl_weight;
        if self.config.kl_anneal {
            w * self.config.anneal.weight(self.step)
        } else {
            w
        }
    }

    /// Loss gradients for one minibatch and the objective diagnostics.
    fn gradients(&mut self, items: &[usize]) -> Result<(Vec<Tensor<S>>, f64, f64, f64), TrainError> {
        let kind = self.config.kind;
        let loss_cfg = self.config.loss;
        let weight = if kind.is_variational() { self.kl_weight() } else { 0.0 };
        let segs: Vec<&Segment<S>> = if kind.uses_pairs() { Vec::new() } else { items.iter().map(|&i| &self.segments[i]).collect() };
        let pairs: Vec<(&Segment<S>, &Segment<S>)> =
            if kind.uses_pairs() { items.iter().map(|&i| (&self.segments[self.pairs[i].0], &self.segments[self.pairs[i].1])).collect() } else { Vec::new() };
        let noise = match kind {
            ModelKind::Vae => Some(self.noise(segs.len())),
            ModelKind::Cvae | ModelKind::Mcvae => Some(self.noise(2 * pairs.len())),
            _ => None,
        };
        let negatives: Vec<usize> = if kind == ModelKind::Siamese {
            items.iter().map(|&i| self.draw_negative(self.pairs[i])).collect()
        } else {
            Vec::new()
        };

        let mut tape = Tape::new();
        let mv = self.model.bind(&mut tape, true);
        let (k, w, s2) = (loss_cfg.samples, S::lit(weight), S::lit(loss_cfg.sigma2));
        let obj = match kind {
            ModelKind::Vae => j_vae(&mut tape, &mv, &segs, k, w, s2, noise.as_ref().expect("drawn above"))?,
            ModelKind::Cvae => j_cvae(&mut tape, &mv, &pairs, k, w, s2, noise.as_ref().expect("drawn above"))?,
            ModelKind::Mcvae => j_mcvae(&mut tape, &mv, &pairs, k, w, s2, noise.as_ref().expect("drawn above"))?,
            ModelKind::Ae => ae_loss(&mut tape, &mv, &segs)?,
            ModelKind::Cae => cae_loss(&mut tape, &mv, &pairs)?,
            ModelKind::Siamese => {
                let triplets: Vec<_> = pairs.iter().zip(&negatives).map(|(&(a, s), &d)| (a, s, &self.segments[d])).collect();
                triplet_loss(&mut tape, &mv.encoder, &triplets, S::lit(loss_cfg.margin))?
            }
        };
        let value = tape.value(obj.value).item().as_f64();
        if !value.is_finite() {
            return Err(TrainError::NonFiniteObjective { step: self.step + 1 });
        }
        let loss = if kind.is_variational() { tape.neg(obj.value) } else { obj.value };
        tape.backward(loss)?;
        let grads = mv.all.iter().map(|&v| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v)))).collect();
        Ok((grads, value, obj.mean_kl.as_f64(), weight))
    }

    fn draw_negative(&mut self, (a, s): (usize, usize)) -> usize {
        let label = &self.segments[a].label;
        match self.negatives.get(label) {
            Some(pool) if label.is_some() => pool[self.rng.random_range(0..pool.len())],
            _ => {
                let pool: Vec<usize> = (0..self.segments.len()).filter(|&i| i != a && i != s).collect();
                pool[self.rng.random_range(0..pool.len())]
            }
        }
    }

    fn step_once(&mut self, metrics: &mut dyn Write) -> Result<(), TrainError> {
        let n = self.num_items();
        if self.order.is_empty() {
            self.epoch_word_pos = Some(self.rng.get_word_pos());
            self.shuffle();
        }
        let b = self.config.batch_size;
        let items: Vec<usize> = self.order[self.batch * b..((self.batch + 1) * b).min(n)].to_vec();
        let (mut grads, objective, kl, weight) = self.gradients(&items)?;
        if let Some(c) = self.config.clip_norm {
            clip_global_norm(&mut grads, S::lit(c));
        }
        let lr = S::lit(self.config.learning_rate);
        adam_step(&mut self.model.tensors_mut(), &grads, &mut self.optimizer, lr)?;
        self.step += 1;
        self.batch += 1;
        let mut val_ap = None;
        if self.batch * b >= n {
            self.epoch += 1;
            self.batch = 0;
            self.order.clear();
            self.epoch_word_pos = None;
            if self.config.eval_every.is_none() {
                val_ap = self.evaluate()?;
            }
        }
        if self.config.eval_every.is_some_and(|e| self.step % e == 0) {
            val_ap = self.evaluate()?;
        }
        let record = StepRecord { step: self.step, objective, kl, weight, val_ap };
        writeln!(metrics, "{}", record.log_line())?;
        self.records.push(record);
        Ok(())
    }

    /// Runs at most `steps` more optimizer steps, stopping early when the
    /// run is finished. Does not perform the closing evaluation.
    pub fn run_steps(&mut self, steps: u64, metrics: &mut dyn Write) -> Result<(), TrainError> {
        self.ensure_started()?;
        for _ in 0..steps {
            if self.is_finished() {
                break;
            }
            self.step_once(metrics)?;
        }
        Ok(())
    }

    /// Runs to completion and returns the best and last checkpoints.
    pub fn run(mut self, metrics: &mut dyn Write) -> Result<TrainOutcome<S>, TrainError> {
        self.ensure_started()?;
        while !self.is_finished() {
            self.step_once(metrics)?;
        }
        if self.last_eval_step != Some(self.step) {
            self.evaluate()?;
        }
        let last = self.checkpoint();
        let best = match &self.best {
            Some((model, step)) => Checkpoint {
                model: model.clone(),
                config: self.recorded_config(),
                step: *step,
                best_val_ap: self.best_ap,
                resume: None,
            },
            None => last.without_resume(),
        };
        Ok(TrainOutcome { best, last, evaluations: self.evaluations, records: self.records })
    }

    /// Current parameters with everything needed to resume.
    /// The configuration stored in checkpoints. The `init` path is left
    /// out so that a checkpoint does not depend on where its run lived.
    fn recorded_config(&self) -> BTreeMap<String, String> {
        let mut m = self.config.to_map();
        m.remove("init");
        m
    }

    pub fn checkpoint(&self) -> Checkpoint<S> {
        Checkpoint {
            model: self.model.clone(),
            config: self.recorded_config(),
            step: self.step,
            best_val_ap: self.best_ap,
            resume: Some(ResumeState {
                epoch: self.epoch,
                batch: self.batch,
                seed: self.config.seed,
                word_pos: self.rng.get_word_pos(),
                epoch_word_pos: self.epoch_word_pos,
                optimizer: self.optimizer.clone(),
                best: self.best.clone(),
                evals_since_best: self.evals_since_best,
                last_eval_step: self.last_eval_step,
            }),
        }
    }
}
