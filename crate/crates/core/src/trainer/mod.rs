//! The semi-supervised training loop.
//!
//! Each step draws a labeled and an unlabeled batch, scores the unlabeled
//! weak views with frozen parameters, builds `K` strong views of every weak
//! view, keeps the variant chosen by the aggregator, and takes one SGD step
//! on `loss_l + λ·loss_u`.

mod metrics;
mod optim;
mod state;

pub use metrics::{write_metrics_csv, MetricsRow, METRICS_COLUMNS};
pub use optim::{cosine_lr, ema_update, sgd_step, SgdSettings};
pub use state::TrainState;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{
    build_uncertainty_set, strong_augment, variant_seed, weak_augment, AugmentConfig,
};
use crate::autodiff::{kernels, Tape, Tensor, Var};
use crate::data::{BatchStream, Dataset, DatasetSpec, SslSplit};
use crate::losses::{self, Aggregator, ConsistencyBatchLosses, TargetMode};
use crate::model::{Architecture, Network};
use crate::rng::{derive, rng_from, stream};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the unlabeled term.
    pub lambda: f64,
    /// Variants per uncertainty set.
    pub k: usize,
    /// When set, `K` is drawn from this list at every step.
    pub k_set: Option<Vec<usize>>,
    pub aggregator: Aggregator,
    /// Confidence threshold for the unlabeled term.
    pub threshold: f64,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub steps: u64,
    /// Linear warmup length; 0 disables it.
    pub warmup_steps: u64,
    pub model_seed: u64,
    pub data_seed: u64,
    pub augment_seed: u64,
    pub eps: f64,
    pub target_mode: TargetMode,
    pub log_every: u64,
    /// Take the single-strong-view path instead of building uncertainty sets.
    pub fixmatch_mode: bool,
    pub augment: AugmentConfig,
    /// `None` picks the default architecture for the data.
    pub architecture: Option<Architecture>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            k: 3,
            k_set: None,
            aggregator: Aggregator::Max,
            threshold: 0.95,
            batch_labeled: 64,
            batch_unlabeled: 448,
            lr: 0.03,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 5e-4,
            ema_decay: 0.999,
            steps: 2000,
            warmup_steps: 0,
            model_seed: 0,
            data_seed: 0,
            augment_seed: 0,
            eps: losses::DEFAULT_EPS,
            target_mode: TargetMode::PseudoLabel,
            log_every: 50,
            fixmatch_mode: false,
            augment: AugmentConfig::default(),
            architecture: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!(
                "lambda must be finite and nonnegative, got {}",
                self.lambda
            ));
        }
        match &self.k_set {
            Some(set) if set.is_empty() || set.contains(&0) => {
                return bad("k-set must be nonempty with positive entries".into())
            }
            None if self.k == 0 => return bad("k must be at least 1".into()),
            _ => {}
        }
        if !(self.threshold >= 0.0 && self.threshold <= 1.0) {
            return bad(format!("threshold {} outside [0, 1]", self.threshold));
        }
        if self.batch_labeled == 0 {
            return bad("batch-labeled must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight-decay must be nonnegative".into());
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad(format!("ema-decay {} outside [0, 1)", self.ema_decay));
        }
        if self.log_every == 0 {
            return bad("log-every must be positive".into());
        }
        if self.fixmatch_mode && (self.k_set.is_some() || self.k != 1) {
            return bad("fixmatch-mode uses a single strong view; set k = 1".into());
        }
        losses::check_eps(self.eps)?;
        self.augment.validate()?;
        if let Some(arch) = &self.architecture {
            arch.validate()?;
        }
        Ok(())
    }

    fn unlabeled_active(&self) -> bool {
        self.lambda > 0.0 && self.batch_unlabeled > 0
    }

    pub fn sgd(&self) -> SgdSettings {
        SgdSettings {
            momentum: self.momentum,
            nesterov: self.nesterov,
            weight_decay: self.weight_decay,
        }
    }

    /// Learning rate used at step `t`.
    pub fn lr_at(&self, t: u64) -> f64 {
        let lr = cosine_lr(t, self.steps, self.lr);
        if self.warmup_steps > 0 && t < self.warmup_steps {
            lr * (t + 1) as f64 / self.warmup_steps as f64
        } else {
            lr
        }
    }

    /// Number of variants used at step `t`.
    pub fn k_at(&self, t: u64) -> usize {
        match &self.k_set {
            Some(set) => {
                let mut rng = rng_from(derive(self.augment_seed, &[stream::K_DRAW, t]));
                set[rng.random_range(0..set.len())]
            }
            None => self.k,
        }
    }
}

/// Training set, its labeled/unlabeled split, and a held-out test set.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub train: Dataset,
    pub split: SslSplit,
    pub test: Dataset,
}

impl TrainData {
    pub fn from_spec(spec: &DatasetSpec) -> Result<Self> {
        let (train, test) = spec.load()?;
        let split = spec.split(&train)?;
        Ok(Self { train, split, test })
    }

    pub fn labeled(&self) -> Dataset {
        self.train.subset(&self.split.labeled)
    }
}

/// Values computed during one step, before evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub k: usize,
    pub lr: f64,
    pub loss_l: f64,
    pub loss_u: f64,
    pub loss_u_mean: f64,
    pub loss_u_min: f64,
    pub loss_u_max: f64,
    /// Batch loss of variant 0 alone.
    pub loss_u_first: f64,
    pub mask_rate: f64,
}

#[derive(Debug)]
pub struct Trainer<'a> {
    cfg: TrainConfig,
    data: &'a TrainData,
    stream: BatchStream,
    state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, data: &'a TrainData) -> Result<Self> {
        cfg.validate()?;
        let arch = cfg.architecture.clone().unwrap_or_else(|| {
            Architecture::default_for(&data.train.sample_shape.dims(), data.train.n_classes)
        });
        if arch.input_len() != data.train.sample_shape.len()
            || arch.classes() != data.train.n_classes
        {
            return Err(Error::Architecture(format!(
                "network maps {} inputs to {} classes but the data has {} features and {} classes",
                arch.input_len(),
                arch.classes(),
                data.train.sample_shape.len(),
                data.train.n_classes
            )));
        }
        let net = Network::init(&arch, cfg.model_seed)?;
        let state = TrainState::fresh(net);
        Self::resume(cfg, data, state)
    }

    pub fn resume(cfg: TrainConfig, data: &'a TrainData, state: TrainState) -> Result<Self> {
        cfg.validate()?;
        if state.network.input_len() != data.train.sample_shape.len() {
            return Err(Error::Architecture(
                "snapshot does not match the data".into(),
            ));
        }
        let stream = BatchStream::new(
            &data.split,
            cfg.batch_labeled,
            cfg.batch_unlabeled,
            cfg.lambda,
            cfg.data_seed,
        )?;
        Ok(Self {
            cfg,
            data,
            stream,
            state,
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.cfg.steps
    }

    /// One optimization step.
    pub fn step(&mut self) -> Result<StepStats> {
        let t = self.state.step;
        let stats = self.step_inner(t).map_err(|e| match e {
            Error::NonFinite(_) => Error::NanLoss {
                step: t as usize,
                snapshot: Box::new(self.state.network.snapshot()),
            },
            other => other,
        })?;
        self.state.step += 1;
        Ok(stats)
    }

    fn step_inner(&mut self, t: u64) -> Result<StepStats> {
        let cfg = &self.cfg;
        let train = &self.data.train;
        let (l_idx, u_idx) = self.stream.batch(t);
        let lr = cfg.lr_at(t);
        let net = &self.state.network;

        let mut tape = Tape::new();
        let params = net.register(&mut tape);

        let xl = self.weak_batch(&l_idx, stream::WEAK_LABELED, t);
        let yl: Vec<usize> = l_idx.iter().map(|&i| train.labels[i]).collect();
        let xl = tape.constant(xl);
        let logits_l = net.forward_on_tape(&mut tape, &params, xl)?;
        let w_l = vec![1.0 / l_idx.len() as f64; l_idx.len()];
        let loss_l = tape.cross_entropy(logits_l, &yl, &w_l)?;

        let mut stats = StepStats {
            step: t,
            k: 0,
            lr,
            loss_l: tape.value(loss_l).item()?,
            loss_u: 0.0,
            loss_u_mean: 0.0,
            loss_u_min: 0.0,
            loss_u_max: 0.0,
            loss_u_first: 0.0,
            mask_rate: 0.0,
        };

        let mut total = loss_l;
        if cfg.unlabeled_active() && !u_idx.is_empty() {
            let weak_u = self.weak_batch(&u_idx, stream::WEAK_UNLABELED, t);
            let unlabeled = if cfg.fixmatch_mode {
                self.single_view_term(&mut tape, &params, &u_idx, &weak_u, t, &mut stats)?
            } else {
                self.worst_case_term(&mut tape, &params, &u_idx, &weak_u, t, &mut stats)?
            };
            if let Some(lu) = unlabeled {
                let scaled = tape.scale(lu, cfg.lambda);
                total = tape.add(total, scaled)?;
            }
        }
        let total_value = tape.value(total).item()?;
        if !total_value.is_finite() {
            return Err(Error::NonFinite(format!("total loss at step {t}")));
        }
        tape.backward(total)?;
        let grads: Vec<Tensor> = params.iter().map(|&p| tape.grad(p)).collect();
        if let Some(g) = grads.iter().find(|g| !g.is_finite()) {
            g.ensure_finite("parameter gradient")?;
        }

        let sgd = self.cfg.sgd();
        sgd_step(
            &mut self.state.network,
            &mut self.state.velocity,
            &grads,
            lr,
            sgd,
        )?;
        ema_update(&mut self.state.ema, &self.state.network, self.cfg.ema_decay)?;
        if let Some(bad) = self.state.network.params().find(|p| !p.is_finite()) {
            bad.ensure_finite("parameters after update")?;
        }
        Ok(stats)
    }

    /// Weak views of the given rows as an `(m, d)` tensor.
    fn weak_batch(&self, idx: &[usize], tag: u64, t: u64) -> Tensor {
        let train = &self.data.train;
        let d = train.sample_shape.len();
        let mut data = Vec::with_capacity(idx.len() * d);
        for (pos, &i) in idx.iter().enumerate() {
            let seed = derive(self.cfg.augment_seed, &[tag, i as u64, t, pos as u64]);
            data.extend(weak_augment(
                train.sample(i),
                train.sample_shape,
                seed,
                &self.cfg.augment,
            ));
        }
        Tensor::new(vec![idx.len(), d], data).expect("row width")
    }

    fn worst_case_term(
        &self,
        tape: &mut Tape,
        params: &[Var],
        u_idx: &[usize],
        weak_u: &Tensor,
        t: u64,
        stats: &mut StepStats,
    ) -> Result<Option<Var>> {
        let cfg = &self.cfg;
        let shape = self.data.train.sample_shape;
        let k = cfg.k_at(t);
        stats.k = k;
        let usets = u_idx
            .iter()
            .enumerate()
            .map(|(pos, &i)| {
                build_uncertainty_set(
                    weak_u.row(pos),
                    shape,
                    k,
                    cfg.augment_seed,
                    i as u64,
                    t,
                    &cfg.augment,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let net = &self.state.network;
        let batch = losses::consistency_batch(
            net,
            weak_u,
            &usets,
            cfg.threshold,
            cfg.aggregator,
            cfg.target_mode,
            cfg.eps,
        )?;
        fill_unlabeled_stats(stats, &batch)?;

        let b = u_idx.len() as f64;
        let mut rows = Vec::new();
        let mut owners = Vec::new();
        let mut weights = Vec::new();
        for (i, set) in usets.iter().enumerate() {
            if !batch.mask[i] {
                continue;
            }
            match cfg.aggregator {
                Aggregator::Mean => {
                    for v in &set.variants {
                        rows.push(v.as_slice());
                        owners.push(i);
                        weights.push(1.0 / (set.k() as f64 * b));
                    }
                }
                Aggregator::Max | Aggregator::Min => {
                    rows.push(set.variants[batch.chosen[i]].as_slice());
                    owners.push(i);
                    weights.push(1.0 / b);
                }
            }
        }
        self.consistency_on_tape(tape, params, &rows, &owners, &weights, &batch)
    }

    /// One strong view per weak view, no aggregation.
    fn single_view_term(
        &self,
        tape: &mut Tape,
        params: &[Var],
        u_idx: &[usize],
        weak_u: &Tensor,
        t: u64,
        stats: &mut StepStats,
    ) -> Result<Option<Var>> {
        let cfg = &self.cfg;
        let shape = self.data.train.sample_shape;
        stats.k = 1;
        let net = &self.state.network;
        let n_c = net.classes();
        let scores = net.forward(weak_u)?;
        let probs = kernels::softmax_rows(scores.data(), n_c);
        let strong: Vec<Vec<f64>> = u_idx
            .iter()
            .enumerate()
            .map(|(pos, &i)| {
                let seed = variant_seed(cfg.augment_seed, i as u64, t, 0);
                strong_augment(weak_u.row(pos), shape, seed, &cfg.augment)
            })
            .collect::<Result<_>>()?;
        let strong_scores = net.forward(&Tensor::new(
            vec![strong.len(), net.input_len()],
            strong.concat(),
        )?)?;
        let mut batch = ConsistencyBatchLosses {
            losses: Vec::new(),
            mask: Vec::new(),
            chosen: Vec::new(),
            values: Vec::new(),
            pseudo_labels: Vec::new(),
            target_probs: Vec::new(),
        };
        for i in 0..u_idx.len() {
            let p = &probs[i * n_c..(i + 1) * n_c];
            let row = losses::consistency_row(
                scores.row(i),
                &[strong_scores.row(i)],
                cfg.target_mode,
                cfg.eps,
            )?;
            batch
                .mask
                .push(p.iter().copied().fold(f64::NEG_INFINITY, f64::max) > cfg.threshold);
            batch.values.push(row[0]);
            batch.losses.push(row);
            batch.chosen.push(0);
            batch
                .pseudo_labels
                .push(crate::autodiff::argmax(scores.row(i)));
            batch.target_probs.push(p.to_vec());
        }
        fill_unlabeled_stats(stats, &batch)?;
        let b = u_idx.len() as f64;
        let owners: Vec<usize> = (0..u_idx.len()).filter(|&i| batch.mask[i]).collect();
        let rows: Vec<&[f64]> = owners.iter().map(|&i| strong[i].as_slice()).collect();
        let weights = vec![1.0 / b; owners.len()];
        self.consistency_on_tape(tape, params, &rows, &owners, &weights, &batch)
    }

    /// Records the weighted consistency loss of the given input rows against
    /// their owners' frozen targets.
    fn consistency_on_tape(
        &self,
        tape: &mut Tape,
        params: &[Var],
        rows: &[&[f64]],
        owners: &[usize],
        weights: &[f64],
        batch: &ConsistencyBatchLosses,
    ) -> Result<Option<Var>> {
        if rows.is_empty() {
            return Ok(None);
        }
        let net = &self.state.network;
        let x = Tensor::new(vec![rows.len(), net.input_len()], rows.concat())?;
        let x = tape.constant(x);
        let logits = net.forward_on_tape(tape, params, x)?;
        let loss = match self.cfg.target_mode {
            TargetMode::PseudoLabel => {
                let targets: Vec<usize> = owners.iter().map(|&i| batch.pseudo_labels[i]).collect();
                tape.cross_entropy(logits, &targets, weights)?
            }
            TargetMode::Soft => {
                let eps = self.cfg.eps;
                let n_c = net.classes();
                let targets: Vec<f64> = owners
                    .iter()
                    .flat_map(|&i| losses::clamp_probs(&batch.target_probs[i], eps))
                    .collect();
                let targets = Tensor::new(vec![owners.len(), n_c], targets)?;
                let probs = tape.softmax(logits)?;
                tape.clamped_soft_ce(probs, &targets, eps, weights)?
            }
        };
        Ok(Some(loss))
    }

    /// Metrics row for the most recent step, with full evaluations.
    pub fn evaluate(&self, stats: &StepStats) -> Result<MetricsRow> {
        let labeled = self.data.labeled();
        let train_err = self
            .state
            .network
            .error_rate(&labeled.features, &labeled.labels)?;
        let test = &self.data.test;
        Ok(MetricsRow {
            step: stats.step,
            epoch: self.stream.epoch_at(stats.step),
            loss_l: stats.loss_l,
            loss_u: stats.loss_u,
            loss_u_mean: stats.loss_u_mean,
            loss_u_min: stats.loss_u_min,
            loss_u_max: stats.loss_u_max,
            mask_rate: stats.mask_rate,
            lr: stats.lr,
            train_err,
            test_err: self
                .state
                .network
                .error_rate(&test.features, &test.labels)?,
            ema_test_err: self.state.ema.error_rate(&test.features, &test.labels)?,
            loss_u_first: stats.loss_u_first,
        })
    }

    fn should_log(&self, t: u64) -> bool {
        t.is_multiple_of(self.cfg.log_every) || t + 1 == self.cfg.steps
    }

    /// Runs until the configured number of steps, calling `on_row` for every
    /// logged row.
    pub fn run(&mut self, mut on_row: impl FnMut(&MetricsRow)) -> Result<Vec<MetricsRow>> {
        let mut rows = Vec::new();
        while !self.is_done() {
            let stats = self.step()?;
            if self.should_log(stats.step) {
                let row = self.evaluate(&stats)?;
                on_row(&row);
                rows.push(row);
            }
        }
        Ok(rows)
    }
}

fn fill_unlabeled_stats(stats: &mut StepStats, batch: &ConsistencyBatchLosses) -> Result<()> {
    stats.loss_u = batch.batch_loss();
    stats.loss_u_mean = batch.batch_loss_with(Aggregator::Mean)?;
    stats.loss_u_min = batch.batch_loss_with(Aggregator::Min)?;
    stats.loss_u_max = batch.batch_loss_with(Aggregator::Max)?;
    stats.loss_u_first = batch.batch_loss_of_variant(0);
    stats.mask_rate = batch.mask_rate();
    if !stats.loss_u.is_finite() {
        return Err(Error::NonFinite("unlabeled loss".into()));
    }
    Ok(())
}

/// Trains from scratch and returns the final state with the logged rows.
pub fn run_training(cfg: &TrainConfig, data: &TrainData) -> Result<(TrainState, Vec<MetricsRow>)> {
    let mut trainer = Trainer::new(cfg.clone(), data)?;
    let rows = trainer.run(|_| {})?;
    Ok((trainer.into_state(), rows))
}
