//! Siamese training step and epoch loop with validation-based selection.

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{AugmentError, AugmentationConfig, Augmenter, GranularPitchShifter};
use crate::dsp::{canonical_extractor, MelSpectrogram};
use crate::embed::{embed_clips, mean_dimension_std, EmbedError};
use crate::linalg::Matrix;
use crate::losses::{compose_loss, ema_decay_at, ema_update, LossConfig, LossError, LossTerm, LossVariant};
use crate::metrics::{eer, mnr, sample_trials, MetricsError};
use crate::model::{Embedding, ForwardCache, HeadCache, Model, ModelError, ModelSpec, SiluLinear};
use crate::nn::{Adam, AdamConfig, Parameters};
use crate::pairs::{epoch_batches, LoadedClip, PairBatch, PairsError};
use crate::rng;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Pairs(#[from] PairsError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at step {}", .0.step)]
    NonFinite(Box<Diagnostic>),
    #[error("cannot write metrics log: {0}")]
    Log(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PitchEngine {
    Identity,
    Granular,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub segment_seconds: f64,
    pub max_epochs: usize,
    /// Global cap on optimizer steps; the epoch in progress ends early.
    pub max_steps: Option<usize>,
    /// Epochs without validation-loss improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub model: ModelSpec,
    pub augmentation: AugmentationConfig,
    pub pitch_engine: PitchEngine,
    pub val_trials: usize,
    pub val_mnr_queries: usize,
    pub val_mnr_candidates: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_variant(LossVariant::Cont)
    }
}

impl TrainConfig {
    pub fn for_variant(variant: LossVariant) -> Self {
        let optimizer = match variant {
            LossVariant::Byol => AdamConfig {
                learning_rate: 3e-5,
                weight_decay: 1.5e-6,
                ..AdamConfig::default()
            },
            _ => AdamConfig::default(),
        };
        Self {
            optimizer,
            batch_size: 120,
            segment_seconds: 4.0,
            max_epochs: 100,
            max_steps: None,
            patience: 10,
            seed: 0,
            loss: LossConfig::for_variant(variant),
            model: ModelSpec::default(),
            augmentation: AugmentationConfig::default(),
            pitch_engine: PitchEngine::Granular,
            val_trials: 2000,
            val_mnr_queries: 200,
            val_mnr_candidates: 512,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let o = &self.optimizer;
        if !(o.learning_rate >= 0.0 && o.learning_rate.is_finite()) || !(o.weight_decay >= 0.0) {
            return Err(TrainError::Config("learning rate and weight decay must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(TrainError::Config("Adam moments must be in [0, 1) and eps > 0".into()));
        }
        if self.batch_size < 2 {
            return Err(TrainError::Config("batch size must be at least 2".into()));
        }
        if !(self.segment_seconds > 0.0) {
            return Err(TrainError::Config("segment length must be positive".into()));
        }
        if self.val_trials == 0 {
            return Err(TrainError::Config("val_trials must be positive".into()));
        }
        self.loss.validate()?;
        self.model.validate()?;
        self.augmentation.validate()?;
        Ok(())
    }

    pub fn augmenter(&self) -> Result<Augmenter, TrainError> {
        let a = Augmenter::new(self.augmentation.clone())?;
        Ok(match self.pitch_engine {
            PitchEngine::Identity => a,
            PitchEngine::Granular => a.with_pitch_shifter(Arc::new(GranularPitchShifter::default())),
        })
    }
}

/// Online network, optimizer state and (for BYOL) predictor and target.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub online: Model<f32>,
    pub predictor: Option<SiluLinear<f32>>,
    pub target: Option<Model<f32>>,
    optimizer: Adam<f32>,
    pub step: usize,
    /// Planned number of steps, used by the EMA schedule.
    pub total_steps: usize,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let online = Model::new(&cfg.model, cfg.seed)?;
        Ok(Self::from_parts(cfg, online, None, None))
    }

    /// Restores a state from saved networks; BYOL parts are created when
    /// missing. Optimizer moments start fresh.
    pub fn from_parts(
        cfg: &TrainConfig,
        online: Model<f32>,
        predictor: Option<SiluLinear<f32>>,
        target: Option<Model<f32>>,
    ) -> Self {
        let byol = cfg.loss.variant == LossVariant::Byol;
        let d = cfg.model.projection_dim;
        let predictor = predictor.or_else(|| {
            byol.then(|| {
                let mut r = rng::stream(cfg.seed, "predictor", &[]);
                SiluLinear::new("predictor", d, d, cfg.loss.byol_normalize, &mut r)
            })
        });
        let target = target.or_else(|| byol.then(|| online.clone()));
        Self {
            online,
            predictor,
            target,
            optimizer: Adam::new(cfg.optimizer),
            step: 0,
            total_steps: 0,
        }
    }
}

/// Per-step diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub terms: Vec<LossTerm>,
    /// Mean per-dimension std of `h` over both views of the batch.
    pub h_std: f64,
}

/// State summary attached to a numerical abort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub step: usize,
    pub loss: f64,
    pub terms: Vec<LossTerm>,
    pub h_std: f64,
    pub max_abs_parameter: f64,
    pub non_finite_parameters: Vec<String>,
    pub clip_ids: Vec<String>,
}

fn mels(views: &[Vec<f32>]) -> Result<Vec<MelSpectrogram>, TrainError> {
    views
        .par_iter()
        .map(|v| canonical_extractor().compute_samples(v).map_err(|e| ModelError::from(e).into()))
        .collect()
}

type Forward = (Embedding<f32>, ForwardCache<f32>);

fn forward_all(model: &Model<f32>, mels: &[MelSpectrogram]) -> Result<Vec<Forward>, TrainError> {
    mels.par_iter()
        .map(|m| model.forward_mel_cached(m).map_err(TrainError::from))
        .collect()
}

fn to_matrix<'a>(rows: impl ExactSizeIterator<Item = &'a [f32]>) -> Matrix {
    let n = rows.len();
    let mut data = Vec::new();
    let mut cols = 0;
    for r in rows {
        cols = r.len();
        data.extend(r.iter().map(|&v| f64::from(v)));
    }
    Matrix::from_vec(n, cols, data)
}

fn z_matrix(f: &[Forward]) -> Matrix {
    to_matrix(f.iter().map(|(e, _)| e.z.as_slice()))
}

fn row_f32(m: &Matrix, i: usize) -> Vec<f32> {
    m.row(i).iter().map(|&v| v as f32).collect()
}

/// Sums per-example parameter gradients in batch order.
fn backprop(model: &Model<f32>, fwd: &[Forward], dz: &Matrix) -> Model<f32> {
    let parts: Vec<Model<f32>> = fwd
        .par_iter()
        .enumerate()
        .map(|(i, (_, cache))| {
            let mut g = model.zeros_like();
            model.backward(cache, &row_f32(dz, i), None, &mut g);
            g
        })
        .collect();
    let mut total = model.zeros_like();
    for p in &parts {
        total.accumulate(p);
    }
    total
}

struct Computed {
    value: f64,
    terms: Vec<LossTerm>,
    h_std: f64,
    online_grads: Option<Model<f32>>,
    predictor_grads: Option<SiluLinear<f32>>,
}

fn merge_terms(into: &mut Vec<LossTerm>, add: &[LossTerm], w: f64) {
    for t in add {
        match into.iter_mut().find(|x| x.name == t.name) {
            Some(x) => x.value += w * t.value,
            None => into.push(LossTerm {
                value: w * t.value,
                ..t.clone()
            }),
        }
    }
}

fn compute(state: &TrainState, cfg: &TrainConfig, batch: &PairBatch, grads: bool) -> Result<Computed, TrainError> {
    let m1 = mels(&batch.view1)?;
    let m2 = mels(&batch.view2)?;
    let f1 = forward_all(&state.online, &m1)?;
    let f2 = forward_all(&state.online, &m2)?;
    let hs: Vec<Vec<f32>> = f1.iter().chain(&f2).map(|(e, _)| e.h.clone()).collect();
    let h_std = mean_dimension_std(&hs);
    let (z1, z2) = (z_matrix(&f1), z_matrix(&f2));

    let (Some(predictor), Some(target)) = (&state.predictor, &state.target) else {
        let out = compose_loss(&cfg.loss, &z1, &z2, None)?;
        let online_grads = (grads && out.is_finite()).then(|| {
            let mut g = backprop(&state.online, &f1, &out.grad1);
            g.accumulate(&backprop(&state.online, &f2, &out.grad2));
            g
        });
        return Ok(Computed {
            value: if out.is_finite() { out.value } else { f64::NAN },
            terms: out.terms,
            h_std,
            online_grads,
            predictor_grads: None,
        });
    };

    let t1 = forward_all(target, &m1)?;
    let t2 = forward_all(target, &m2)?;
    let (zt1, zt2) = (z_matrix(&t1), z_matrix(&t2));
    let views = [(&z1, &zt2), (&z2, &zt1)];
    let directions: &[usize] = if cfg.loss.byol_symmetrize { &[0, 1] } else { &[0] };
    let w = 1.0 / directions.len() as f64;

    let (b, d) = z1.shape();
    let mut dz = [Matrix::zeros(b, d), Matrix::zeros(b, d)];
    let mut pred_grads = predictor.zeros_like();
    let mut value = 0.0;
    let mut terms = Vec::new();
    let mut finite = true;
    for &k in directions {
        let (online_z, target_z) = views[k];
        let inputs = if cfg.loss.byol_predictor_on_target { target_z } else { online_z };
        let heads: Vec<(Vec<f32>, HeadCache<f32>)> = (0..b)
            .into_par_iter()
            .map(|i| predictor.forward_cached(&row_f32(inputs, i)))
            .collect::<Result<_, _>>()?;
        let p = to_matrix(heads.iter().map(|(y, _)| y.as_slice()));
        let out = compose_loss(&cfg.loss, online_z, target_z, Some(&p))?;
        finite &= out.is_finite();
        value += w * out.value;
        merge_terms(&mut terms, &out.terms, w);
        if !grads || !finite {
            continue;
        }
        let dp = out.grad_predictions.as_ref().expect("BYOL fills prediction gradients");
        dz[k].add_scaled(&out.grad1, w);
        for (i, (_, cache)) in heads.iter().enumerate() {
            let g: Vec<f32> = dp.row(i).iter().map(|&v| (w * v) as f32).collect();
            let dx = predictor.backward(cache, &g, &mut pred_grads);
            if !cfg.loss.byol_predictor_on_target {
                for (a, &v) in dz[k].row_mut(i).iter_mut().zip(&dx) {
                    *a += f64::from(v);
                }
            }
        }
    }
    let online_grads = (grads && finite).then(|| {
        let mut g = backprop(&state.online, &f1, &dz[0]);
        g.accumulate(&backprop(&state.online, &f2, &dz[1]));
        g
    });
    Ok(Computed {
        value: if finite { value } else { f64::NAN },
        terms,
        h_std,
        online_grads,
        predictor_grads: (grads && finite).then_some(pred_grads),
    })
}

fn diagnostic(state: &TrainState, c: &Computed, batch: &PairBatch) -> Diagnostic {
    let mut max_abs = 0.0f64;
    let mut bad = Vec::new();
    let mut params = state.online.params();
    if let Some(p) = &state.predictor {
        params.extend(p.params());
    }
    for p in params {
        for &v in &p.data {
            if v.is_finite() {
                max_abs = max_abs.max(f64::from(v.abs()));
            } else if !bad.contains(&p.name) {
                bad.push(p.name.clone());
            }
        }
    }
    Diagnostic {
        step: state.step,
        loss: c.value,
        terms: c.terms.clone(),
        h_std: c.h_std,
        max_abs_parameter: max_abs,
        non_finite_parameters: bad,
        clip_ids: batch.clip_ids.clone(),
    }
}

/// One optimizer update on `batch`. For BYOL the target network then moves
/// toward the online network by EMA.
pub fn train_step(state: &mut TrainState, cfg: &TrainConfig, batch: &PairBatch) -> Result<StepMetrics, TrainError> {
    let c = match compute(state, cfg, batch, true) {
        Err(TrainError::Model(ModelError::DegenerateProjection(_))) => Computed {
            value: f64::NAN,
            terms: Vec::new(),
            h_std: f64::NAN,
            online_grads: None,
            predictor_grads: None,
        },
        other => other?,
    };
    if !c.value.is_finite() {
        return Err(TrainError::NonFinite(Box::new(diagnostic(state, &c, batch))));
    }
    let og = c.online_grads.as_ref().expect("gradients requested");
    let mut params = state.online.params_mut();
    let mut grads = og.params();
    if let (Some(p), Some(pg)) = (state.predictor.as_mut(), c.predictor_grads.as_ref()) {
        params.extend(p.params_mut());
        grads.extend(pg.params());
    }
    state.optimizer.step(params, grads);
    if let Some(target) = state.target.as_mut() {
        let decay = ema_decay_at(&cfg.loss, state.step, state.total_steps);
        for (t, o) in target.params_mut().into_iter().zip(state.online.params()) {
            ema_update(&mut t.data, &o.data, decay)?;
        }
    }
    state.step += 1;
    Ok(StepMetrics {
        step: state.step,
        loss: c.value,
        terms: c.terms,
        h_std: c.h_std,
    })
}

/// Loss on `batch` without updating anything.
pub fn evaluate_batch(state: &TrainState, cfg: &TrainConfig, batch: &PairBatch) -> Result<f64, TrainError> {
    Ok(compute(state, cfg, batch, false)?.value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    pub loss: f64,
    pub eer: f64,
    pub mnr: Option<f64>,
    /// Mean per-dimension std of `h` over the validation segments.
    pub h_std: f64,
}

const VAL_EPOCH: u64 = u64::MAX;

/// Validation loss on fixed pair batches plus similarity metrics of `h`.
pub fn validate(state: &TrainState, cfg: &TrainConfig, val: &[LoadedClip]) -> Result<ValMetrics, TrainError> {
    let augmenter = cfg.augmenter()?;
    let eligible = val
        .iter()
        .filter(|c| c.clip.len() >= crate::pairs::segment_samples(cfg.segment_seconds, c.clip.sample_rate_hz()))
        .count();
    let batch = cfg.batch_size.min(eligible);
    if batch < 2 {
        return Err(TrainError::EmptySplit("validation"));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for b in epoch_batches(val, batch, cfg.segment_seconds, &augmenter, cfg.seed, VAL_EPOCH)? {
        total += evaluate_batch(state, cfg, &b)?;
        n += 1;
    }
    let (table, _) = embed_clips(&state.online, val, cfg.segment_seconds)?;
    let h_std = mean_dimension_std(&table.rows.iter().map(|r| r.vector.clone()).collect::<Vec<_>>());
    let trials = sample_trials(&table, cfg.val_trials, &mut rng::stream(cfg.seed, "val-trials", &[]))?;
    let eer = eer(&trials)?.eer;
    let candidates = cfg.val_mnr_candidates.min(table.len().saturating_sub(2)).max(1);
    let mnr = mnr(
        &table,
        cfg.val_mnr_queries.max(1),
        candidates,
        &mut rng::stream(cfg.seed, "val-mnr", &[]),
    )
    .ok();
    Ok(ValMetrics {
        loss: total / n as f64,
        eer,
        mnr,
        h_std,
    })
}

/// Trained networks plus the metadata needed to reproduce them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: usize,
    pub step: usize,
    pub val: Option<ValMetrics>,
    pub online: Model<f32>,
    pub predictor: Option<SiluLinear<f32>>,
    pub target: Option<Model<f32>>,
    /// Free-form provenance, e.g. the resolved run configuration.
    pub provenance: String,
}

impl Checkpoint {
    pub fn from_state(cfg: &TrainConfig, state: &TrainState, epoch: usize, val: Option<ValMetrics>) -> Self {
        Self {
            config: cfg.clone(),
            epoch,
            step: state.step,
            val,
            online: state.online.clone(),
            predictor: state.predictor.clone(),
            target: state.target.clone(),
            provenance: String::new(),
        }
    }
}

/// One line of the epoch log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub val: ValMetrics,
    pub best_epoch: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub final_state: TrainState,
}

fn better(a: &ValMetrics, b: &ValMetrics) -> bool {
    let key = |v: &ValMetrics| (v.eer, v.mnr.unwrap_or(f64::INFINITY));
    key(a) < key(b)
}

/// Trains until patience on the validation loss runs out, `max_epochs` or
/// `max_steps`. Keeps the epoch with the lowest validation EER (ties: lower
/// MNR, then earlier epoch). Each epoch is appended to `log` as one JSON line.
pub fn train_loop(
    cfg: &TrainConfig,
    train: &[LoadedClip],
    val: &[LoadedClip],
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let mut state = TrainState::new(cfg)?;
    let mut best = Checkpoint::from_state(cfg, &state, 0, None);
    let mut history = Vec::new();
    if cfg.max_epochs == 0 || cfg.max_steps == Some(0) {
        return Ok(TrainOutcome {
            best,
            history,
            final_state: state,
        });
    }
    let augmenter = cfg.augmenter()?;
    let per_epoch = epoch_batches(train, cfg.batch_size, cfg.segment_seconds, &augmenter, cfg.seed, 0)?.num_batches();
    state.total_steps = cfg.max_steps.unwrap_or(usize::MAX).min(per_epoch * cfg.max_epochs);

    let mut best_val_loss = f64::INFINITY;
    let mut stale = 0usize;
    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for batch in epoch_batches(train, cfg.batch_size, cfg.segment_seconds, &augmenter, cfg.seed, epoch as u64)? {
            if state.step >= state.total_steps {
                break;
            }
            loss_sum += train_step(&mut state, cfg, &batch)?.loss;
            steps += 1;
        }
        let v = validate(&state, cfg, val)?;
        if !v.loss.is_finite() {
            let c = Computed {
                value: v.loss,
                terms: Vec::new(),
                h_std: v.h_std,
                online_grads: None,
                predictor_grads: None,
            };
            let empty = PairBatch {
                view1: Vec::new(),
                view2: Vec::new(),
                clip_ids: Vec::new(),
            };
            return Err(TrainError::NonFinite(Box::new(diagnostic(&state, &c, &empty))));
        }
        let improved = best.val.as_ref().map_or(true, |b| better(&v, b));
        if improved {
            best = Checkpoint::from_state(cfg, &state, epoch, Some(v.clone()));
        }
        let record = EpochRecord {
            epoch,
            steps: state.step,
            train_loss: loss_sum / steps.max(1) as f64,
            val: v.clone(),
            best_epoch: best.epoch,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train {:.4} val {:.4} eer {:.3} h_std {:.4}",
            record.train_loss,
            v.loss,
            v.eer,
            v.h_std
        );
        if let Some(w) = log.as_mut() {
            writeln!(w, "{}", serde_json::to_string(&record).expect("records serialize"))?;
            w.flush()?;
        }
        history.push(record);

        if v.loss < best_val_loss {
            best_val_loss = v.loss;
            stale = 0;
        } else {
            stale += 1;
        }
        if stale >= cfg.patience.max(1) || state.step >= state.total_steps {
            break;
        }
    }
    Ok(TrainOutcome {
        best,
        history,
        final_state: state,
    })
}
