//! Self-supervised objectives over batches of projections and their analytic
//! gradients.
//!
//! Every loss takes one or two `B x D` projection batches (one row per clip,
//! view 1 and view 2 share row order) and returns a [`LossOutput`] holding the
//! scalar value and the gradient with respect to each input matrix. The five
//! training objectives are built by [`compose_loss`] from these terms.

mod gradcheck;
mod kernels;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{dot, norm, Matrix};

pub use gradcheck::{finite_difference_gradient, loss_gradient_check, GradCheckReport};

/// Row norms of a normalized batch must be within this of 1.
pub const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("batch needs at least {required} rows, got {got}")]
    BatchTooSmall { required: usize, got: usize },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("row {row} has norm {norm}, expected unit norm")]
    NotNormalized { row: usize, norm: f64 },
    #[error("zero-length vector in cosine similarity")]
    ZeroVector,
    #[error("the BYOL objective needs predictor outputs")]
    MissingPredictions,
    #[error("invalid loss parameter: {0}")]
    InvalidParameter(String),
}

/// The five training objectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossVariant {
    #[serde(rename = "CONT")]
    Cont,
    #[serde(rename = "CONT-VC")]
    ContVc,
    #[serde(rename = "UNIF")]
    Unif,
    #[serde(rename = "VICReg")]
    VicReg,
    #[serde(rename = "BYOL")]
    Byol,
}

impl LossVariant {
    pub const ALL: [LossVariant; 5] = [
        LossVariant::Cont,
        LossVariant::ContVc,
        LossVariant::Unif,
        LossVariant::VicReg,
        LossVariant::Byol,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::Cont => "CONT",
            LossVariant::ContVc => "CONT-VC",
            LossVariant::Unif => "UNIF",
            LossVariant::VicReg => "VICReg",
            LossVariant::Byol => "BYOL",
        }
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown loss variant {0:?}; expected one of CONT, CONT-VC, UNIF, VICReg, BYOL")]
pub struct UnknownVariant(pub String);

impl FromStr for LossVariant {
    type Err = UnknownVariant;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_uppercase();
        match norm.as_str() {
            "CONT" => Ok(LossVariant::Cont),
            "CONTVC" => Ok(LossVariant::ContVc),
            "UNIF" => Ok(LossVariant::Unif),
            "VICREG" => Ok(LossVariant::VicReg),
            "BYOL" => Ok(LossVariant::Byol),
            _ => Err(UnknownVariant(s.to_string())),
        }
    }
}

/// Objective selection and weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub variant: LossVariant,
    /// Contrastive temperature.
    pub temperature: f64,
    /// Average both anchor directions of the contrastive term.
    pub symmetrize_contrastive: bool,
    pub uniformity_t: f64,
    pub uniformity_weight: f64,
    pub invariance_weight: f64,
    pub variance_weight: f64,
    pub covariance_weight: f64,
    pub variance_target: f64,
    pub variance_eps: f64,
    /// EMA decay of the BYOL target network.
    pub ema_decay: f64,
    /// Anneal the EMA decay toward 1 with a cosine schedule.
    pub ema_cosine_anneal: bool,
    /// Unit-normalize predictor outputs before the BYOL regression.
    pub byol_normalize: bool,
    /// Apply the predictor to the target branch instead of the online branch.
    pub byol_predictor_on_target: bool,
    /// Average the BYOL loss over both view orderings.
    pub byol_symmetrize: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::for_variant(LossVariant::Cont)
    }
}

impl LossConfig {
    pub fn for_variant(variant: LossVariant) -> Self {
        Self {
            variant,
            temperature: 0.2,
            symmetrize_contrastive: false,
            uniformity_t: 2.0,
            uniformity_weight: 1.0,
            invariance_weight: 25.0,
            variance_weight: 25.0,
            covariance_weight: 100.0,
            variance_target: 1.0,
            variance_eps: 1e-4,
            ema_decay: 0.99,
            ema_cosine_anneal: false,
            byol_normalize: true,
            byol_predictor_on_target: false,
            byol_symmetrize: true,
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let weights = [
            ("uniformity_weight", self.uniformity_weight),
            ("invariance_weight", self.invariance_weight),
            ("variance_weight", self.variance_weight),
            ("covariance_weight", self.covariance_weight),
            ("variance_target", self.variance_target),
        ];
        for (name, w) in weights {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(LossError::InvalidParameter(format!("{name} must be >= 0")));
            }
        }
        if !(self.temperature > 0.0) {
            return Err(LossError::InvalidParameter("temperature must be > 0".into()));
        }
        if !(self.uniformity_t > 0.0) {
            return Err(LossError::InvalidParameter("uniformity_t must be > 0".into()));
        }
        if !(self.variance_eps > 0.0) {
            return Err(LossError::InvalidParameter("variance_eps must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(LossError::InvalidParameter("ema_decay must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One weighted component of a composite loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTerm {
    pub name: String,
    pub weight: f64,
    pub value: f64,
}

/// Loss value plus gradients.
///
/// `grad1` and `grad2` are taken with respect to the first and second batch
/// argument of the function that produced them. [`compose_loss`] additionally
/// fills `grad_predictions` for the BYOL objective. The weighted sum of
/// `terms` equals `value`.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub grad1: Matrix,
    pub grad2: Matrix,
    pub grad_predictions: Option<Matrix>,
    pub terms: Vec<LossTerm>,
}

impl LossOutput {
    fn single(name: &str, value: f64, grad1: Matrix, grad2: Matrix) -> Self {
        Self {
            value,
            grad1,
            grad2,
            grad_predictions: None,
            terms: vec![LossTerm {
                name: name.to_string(),
                weight: 1.0,
                value,
            }],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
            && self.grad1.is_finite()
            && self.grad2.is_finite()
            && self.grad_predictions.as_ref().map_or(true, Matrix::is_finite)
    }
}

fn require_rows(z: &Matrix, required: usize) -> Result<(), LossError> {
    if z.rows() < required {
        return Err(LossError::BatchTooSmall {
            required,
            got: z.rows(),
        });
    }
    Ok(())
}

fn require_same_shape(a: &Matrix, b: &Matrix) -> Result<(), LossError> {
    if a.shape() != b.shape() {
        return Err(LossError::ShapeMismatch(a.shape(), b.shape()));
    }
    Ok(())
}

fn require_normalized(z: &Matrix) -> Result<(), LossError> {
    for (row, r) in z.iter_rows().enumerate() {
        let n = norm(r);
        if (n - 1.0).abs() > NORM_TOLERANCE {
            return Err(LossError::NotNormalized { row, norm: n });
        }
    }
    Ok(())
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, LossError> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(LossError::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Contrastive loss with the positive pair removed from the denominator.
///
/// Anchors are the rows of `z1`; for anchor `i` the positive is `z2[i]` and
/// the negatives are every other row of `z2`. The per-anchor terms are summed.
pub fn nt_xent_decoupled(z1: &Matrix, z2: &Matrix, tau: f64) -> Result<LossOutput, LossError> {
    require_same_shape(z1, z2)?;
    require_rows(z1, 2)?;
    require_normalized(z1)?;
    require_normalized(z2)?;
    if !(tau > 0.0) {
        return Err(LossError::InvalidParameter("temperature must be > 0".into()));
    }
    let k = kernels::nt_xent(z1, z2, tau);
    Ok(LossOutput::single("contrastive", k.value, k.grad_a, k.grad_b))
}

pub fn alignment_loss(z1: &Matrix, z2: &Matrix) -> Result<LossOutput, LossError> {
    require_same_shape(z1, z2)?;
    require_rows(z1, 1)?;
    let k = kernels::mean_squared_distance(z1, z2);
    Ok(LossOutput::single("alignment", k.value, k.grad_a, k.grad_b))
}

/// Average over both views of the log mean pairwise Gaussian potential.
pub fn uniformity_loss(z1: &Matrix, z2: &Matrix, t: f64) -> Result<LossOutput, LossError> {
    require_same_shape(z1, z2)?;
    require_rows(z1, 2)?;
    require_normalized(z1)?;
    require_normalized(z2)?;
    let (v, g1, g2) = uniformity_both(z1, z2, t);
    Ok(LossOutput::single("uniformity", v, g1, g2))
}

fn uniformity_both(z1: &Matrix, z2: &Matrix, t: f64) -> (f64, Matrix, Matrix) {
    let mut a = kernels::uniformity_single(z1, t);
    let mut b = kernels::uniformity_single(z2, t);
    a.grad.scale(0.5);
    b.grad.scale(0.5);
    (0.5 * (a.value + b.value), a.grad, b.grad)
}

pub fn variance_loss(z: &Matrix, target_std: f64, eps: f64) -> Result<LossOutput, LossError> {
    require_rows(z, 2)?;
    let k = kernels::variance(z, target_std, eps);
    let zeros = Matrix::zeros(z.rows(), z.cols());
    Ok(LossOutput::single("variance", k.value, k.grad, zeros))
}

pub fn covariance_loss(z: &Matrix) -> Result<LossOutput, LossError> {
    require_rows(z, 2)?;
    let k = kernels::covariance(z);
    let zeros = Matrix::zeros(z.rows(), z.cols());
    Ok(LossOutput::single("covariance", k.value, k.grad, zeros))
}

/// Mean squared error between predictions and targets. `grad2` (targets) is
/// identically zero.
pub fn byol_loss(predictions: &Matrix, targets: &Matrix) -> Result<LossOutput, LossError> {
    require_same_shape(predictions, targets)?;
    require_rows(predictions, 1)?;
    let k = kernels::mean_squared_distance(predictions, targets);
    let zeros = Matrix::zeros(targets.rows(), targets.cols());
    Ok(LossOutput::single("byol", k.value, k.grad_a, zeros))
}

/// `target <- decay * target + (1 - decay) * online`, elementwise.
pub fn ema_update<T>(target: &mut [T], online: &[T], decay: f64) -> Result<(), LossError>
where
    T: num_traits::Float,
{
    if target.len() != online.len() {
        return Err(LossError::ShapeMismatch(
            (target.len(), 1),
            (online.len(), 1),
        ));
    }
    if !(0.0..=1.0).contains(&decay) {
        return Err(LossError::InvalidParameter("ema decay must be in [0, 1]".into()));
    }
    if decay == 1.0 {
        return Ok(());
    }
    let keep = T::from(decay).unwrap();
    let mix = T::from(1.0 - decay).unwrap();
    for (t, &o) in target.iter_mut().zip(online) {
        *t = keep * *t + mix * o;
    }
    Ok(())
}

/// EMA decay at `step` of `total_steps`; cosine-annealed toward 1 when enabled.
pub fn ema_decay_at(cfg: &LossConfig, step: usize, total_steps: usize) -> f64 {
    if !cfg.ema_cosine_anneal || total_steps == 0 {
        return cfg.ema_decay;
    }
    let progress = (step as f64 / total_steps as f64).min(1.0);
    1.0 - (1.0 - cfg.ema_decay) * ((std::f64::consts::PI * progress).cos() + 1.0) / 2.0
}

/// Validates the inputs of `compose_loss` for `cfg.variant`.
fn validate_compose(
    cfg: &LossConfig,
    z1: &Matrix,
    z2: &Matrix,
    predictions: Option<&Matrix>,
) -> Result<(), LossError> {
    cfg.validate()?;
    require_same_shape(z1, z2)?;
    match cfg.variant {
        LossVariant::Cont | LossVariant::ContVc | LossVariant::Unif => {
            require_rows(z1, 2)?;
            require_normalized(z1)?;
            require_normalized(z2)?;
        }
        LossVariant::VicReg => require_rows(z1, 2)?,
        LossVariant::Byol => {
            let p = predictions.ok_or(LossError::MissingPredictions)?;
            require_same_shape(p, z2)?;
            require_rows(z1, 1)?;
        }
    }
    Ok(())
}

/// Weighted composition of the individual terms for the configured objective.
///
/// Variance and covariance regularizers are evaluated per view and averaged.
/// For BYOL, `z2` holds target projections and `predictions` the predictor
/// outputs; the gradient w.r.t. the predictions is in `grad_predictions`.
pub fn compose_loss(
    cfg: &LossConfig,
    z1: &Matrix,
    z2: &Matrix,
    predictions: Option<&Matrix>,
) -> Result<LossOutput, LossError> {
    validate_compose(cfg, z1, z2, predictions)?;
    Ok(compose_unchecked(cfg, z1, z2, predictions))
}

struct Accumulator {
    value: f64,
    grad1: Matrix,
    grad2: Matrix,
    terms: Vec<LossTerm>,
}

impl Accumulator {
    fn new(shape: (usize, usize)) -> Self {
        Self {
            value: 0.0,
            grad1: Matrix::zeros(shape.0, shape.1),
            grad2: Matrix::zeros(shape.0, shape.1),
            terms: Vec::new(),
        }
    }

    fn add(&mut self, name: &str, weight: f64, value: f64, g1: &Matrix, g2: &Matrix) {
        self.value += weight * value;
        self.grad1.add_scaled(g1, weight);
        self.grad2.add_scaled(g2, weight);
        self.terms.push(LossTerm {
            name: name.to_string(),
            weight,
            value,
        });
    }

    fn add_regularizers(&mut self, cfg: &LossConfig, z1: &Matrix, z2: &Matrix) {
        let (mut v1, mut v2) = (
            kernels::variance(z1, cfg.variance_target, cfg.variance_eps),
            kernels::variance(z2, cfg.variance_target, cfg.variance_eps),
        );
        v1.grad.scale(0.5);
        v2.grad.scale(0.5);
        let var = 0.5 * (v1.value + v2.value);
        self.add("variance", cfg.variance_weight, var, &v1.grad, &v2.grad);

        let (mut c1, mut c2) = (kernels::covariance(z1), kernels::covariance(z2));
        c1.grad.scale(0.5);
        c2.grad.scale(0.5);
        let cov = 0.5 * (c1.value + c2.value);
        self.add("covariance", cfg.covariance_weight, cov, &c1.grad, &c2.grad);
    }

    fn finish(self, grad_predictions: Option<Matrix>) -> LossOutput {
        LossOutput {
            value: self.value,
            grad1: self.grad1,
            grad2: self.grad2,
            grad_predictions,
            terms: self.terms,
        }
    }
}

pub(crate) fn contrastive_term(cfg: &LossConfig, z1: &Matrix, z2: &Matrix) -> (f64, Matrix, Matrix) {
    let fwd = kernels::nt_xent(z1, z2, cfg.temperature);
    if !cfg.symmetrize_contrastive {
        return (fwd.value, fwd.grad_a, fwd.grad_b);
    }
    let rev = kernels::nt_xent(z2, z1, cfg.temperature);
    let mut g1 = fwd.grad_a;
    g1.add_scaled(&rev.grad_b, 1.0);
    g1.scale(0.5);
    let mut g2 = fwd.grad_b;
    g2.add_scaled(&rev.grad_a, 1.0);
    g2.scale(0.5);
    (0.5 * (fwd.value + rev.value), g1, g2)
}

pub(crate) fn compose_unchecked(
    cfg: &LossConfig,
    z1: &Matrix,
    z2: &Matrix,
    predictions: Option<&Matrix>,
) -> LossOutput {
    let mut acc = Accumulator::new(z1.shape());
    match cfg.variant {
        LossVariant::Cont => {
            let (v, g1, g2) = contrastive_term(cfg, z1, z2);
            acc.add("contrastive", 1.0, v, &g1, &g2);
        }
        LossVariant::ContVc => {
            let (v, g1, g2) = contrastive_term(cfg, z1, z2);
            acc.add("contrastive", 1.0, v, &g1, &g2);
            acc.add_regularizers(cfg, z1, z2);
        }
        LossVariant::Unif => {
            let a = kernels::mean_squared_distance(z1, z2);
            acc.add("alignment", 1.0, a.value, &a.grad_a, &a.grad_b);
            let (v, g1, g2) = uniformity_both(z1, z2, cfg.uniformity_t);
            acc.add("uniformity", cfg.uniformity_weight, v, &g1, &g2);
        }
        LossVariant::VicReg => {
            let a = kernels::mean_squared_distance(z1, z2);
            acc.add("alignment", cfg.invariance_weight, a.value, &a.grad_a, &a.grad_b);
            acc.add_regularizers(cfg, z1, z2);
        }
        LossVariant::Byol => {
            let p = predictions.expect("validated: predictions present");
            let zeros = Matrix::zeros(z1.rows(), z1.cols());
            if cfg.byol_predictor_on_target {
                // |z1 - q(z2)|^2: gradient reaches the online projection and the predictor.
                let k = kernels::mean_squared_distance(z1, p);
                acc.add("byol", 1.0, k.value, &k.grad_a, &zeros);
                return acc.finish(Some(k.grad_b));
            }
            let k = kernels::mean_squared_distance(p, z2);
            acc.add("byol", 1.0, k.value, &zeros, &zeros);
            return acc.finish(Some(k.grad_a));
        }
    }
    acc.finish(None)
}
