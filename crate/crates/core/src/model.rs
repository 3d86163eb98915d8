//! Encoder, temporal pooling and projection head.
//!
//! The full model maps a waveform to log-mel features, runs a small
//! convolutional encoder over time (mel bins are input channels), averages
//! the encoder output over time into the feature embedding `h`, and projects
//! `h` through SiLU and a fully-connected layer to the unit-norm projection
//! `z`. Only `h` is kept for evaluation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{canonical_extractor, DspError, MelExtractor, MelSpectrogram};
use crate::nn::{silu, silu_grad, Conv1d, Linear, Param, Parameters, Scalar};
use crate::rng::{self, Rng};

/// Smallest pre-normalization projection norm accepted.
pub const MIN_PROJECTION_NORM: f64 = 1e-12;
const STANDARDIZE_EPS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("mel input has {got} bins, encoder expects {expected}")]
    BinMismatch { got: usize, expected: usize },
    #[error("input of {frames} frames is too short for {blocks} downsampling blocks")]
    TooShort { frames: usize, blocks: usize },
    #[error("cannot pool an empty sequence")]
    EmptySequence,
    #[error("projection norm {0:e} is too small to normalize")]
    DegenerateProjection(f64),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
}

/// Convolutional stack: each block is conv (same padding) -> SiLU -> average
/// pooling by 2 in time. The last block's channel count is the embedding width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub n_mels: usize,
    pub channels: Vec<usize>,
    pub kernel_size: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            n_mels: 80,
            channels: vec![32, 64, 64, 128],
            kernel_size: 3,
        }
    }
}

impl EncoderSpec {
    pub fn embedding_dim(&self) -> usize {
        *self.channels.last().unwrap_or(&self.n_mels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub encoder: EncoderSpec,
    pub projection_dim: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            encoder: EncoderSpec::default(),
            projection_dim: 256,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        let e = &self.encoder;
        if e.n_mels == 0 || e.channels.is_empty() || e.channels.contains(&0) {
            return Err(ModelError::InvalidSpec("channel counts must be positive".into()));
        }
        if e.kernel_size == 0 || e.kernel_size % 2 == 0 {
            return Err(ModelError::InvalidSpec("kernel size must be odd".into()));
        }
        if self.projection_dim == 0 {
            return Err(ModelError::InvalidSpec("projection dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    pub spec: EncoderSpec,
    pub blocks: Vec<Conv1d<T>>,
}

/// Activations kept for the backward pass of one input.
#[derive(Debug, Clone)]
pub struct EncoderCache<T> {
    frames: Vec<usize>,
    inputs: Vec<Vec<T>>,
    pre_activations: Vec<Vec<T>>,
}

/// Latent sequence `channels x frames`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent<T> {
    pub channels: usize,
    pub frames: usize,
    pub values: Vec<T>,
}

/// Per-spectrogram standardization to zero mean and unit variance.
fn standardize<T: Scalar>(mel: &MelSpectrogram) -> Vec<T> {
    let v = mel.values();
    let n = v.len().max(1) as f64;
    let mean = v.iter().map(|&x| f64::from(x)).sum::<f64>() / n;
    let var = v.iter().map(|&x| (f64::from(x) - mean).powi(2)).sum::<f64>() / n;
    let scale = 1.0 / (var + STANDARDIZE_EPS).sqrt();
    v.iter().map(|&x| T::of((f64::from(x) - mean) * scale)).collect()
}

impl<T: Scalar> Encoder<T> {
    pub fn new(spec: &EncoderSpec, rng: &mut Rng) -> Self {
        let mut blocks = Vec::with_capacity(spec.channels.len());
        let mut c_in = spec.n_mels;
        for (i, &c_out) in spec.channels.iter().enumerate() {
            blocks.push(Conv1d::new(&format!("encoder.block{i}"), c_in, c_out, spec.kernel_size, rng));
            c_in = c_out;
        }
        Self {
            spec: spec.clone(),
            blocks,
        }
    }

    pub fn output_frames(&self, frames: usize) -> usize {
        self.blocks.iter().fold(frames, |f, _| f / 2)
    }

    pub fn encode(&self, mel: &MelSpectrogram) -> Result<Latent<T>, ModelError> {
        self.encode_cached(mel).map(|(l, _)| l)
    }

    pub fn encode_cached(&self, mel: &MelSpectrogram) -> Result<(Latent<T>, EncoderCache<T>), ModelError> {
        if mel.n_mels() != self.spec.n_mels {
            return Err(ModelError::BinMismatch {
                got: mel.n_mels(),
                expected: self.spec.n_mels,
            });
        }
        if self.output_frames(mel.n_frames()) == 0 {
            return Err(ModelError::TooShort {
                frames: mel.n_frames(),
                blocks: self.blocks.len(),
            });
        }
        let mut cache = EncoderCache {
            frames: Vec::with_capacity(self.blocks.len()),
            inputs: Vec::with_capacity(self.blocks.len()),
            pre_activations: Vec::with_capacity(self.blocks.len()),
        };
        let mut x = standardize::<T>(mel);
        let mut frames = mel.n_frames();
        for block in &self.blocks {
            let a = block.forward(&x, frames);
            let pooled_frames = frames / 2;
            let c = block.out_channels;
            let mut pooled = vec![T::zero(); c * pooled_frames];
            let half = T::of(0.5);
            for ch in 0..c {
                let row = &a[ch * frames..(ch + 1) * frames];
                for t in 0..pooled_frames {
                    pooled[ch * pooled_frames + t] = half * (silu(row[2 * t]) + silu(row[2 * t + 1]));
                }
            }
            cache.frames.push(frames);
            cache.inputs.push(std::mem::replace(&mut x, pooled));
            cache.pre_activations.push(a);
            frames = pooled_frames;
        }
        Ok((
            Latent {
                channels: self.spec.embedding_dim(),
                frames,
                values: x,
            },
            cache,
        ))
    }

    /// Accumulates parameter gradients for upstream gradient `d_latent`.
    pub fn backward(&self, cache: &EncoderCache<T>, d_latent: &[T], grads: &mut Encoder<T>) {
        let mut d = d_latent.to_vec();
        let half = T::of(0.5);
        for (k, block) in self.blocks.iter().enumerate().rev() {
            let frames = cache.frames[k];
            let pooled_frames = frames / 2;
            let a = &cache.pre_activations[k];
            let c = block.out_channels;
            let mut da = vec![T::zero(); c * frames];
            for ch in 0..c {
                for t in 0..pooled_frames {
                    let g = half * d[ch * pooled_frames + t];
                    for s in [2 * t, 2 * t + 1] {
                        da[ch * frames + s] = g * silu_grad(a[ch * frames + s]);
                    }
                }
            }
            let dx = block.backward(&cache.inputs[k], frames, &da, &mut grads.blocks[k], k > 0);
            if let Some(dx) = dx {
                d = dx;
            }
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            blocks: self.blocks.iter().map(Conv1d::zeros_like).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Encoder<U> {
        Encoder {
            spec: self.spec.clone(),
            blocks: self.blocks.iter().map(Conv1d::cast).collect(),
        }
    }
}

impl<T: Scalar> Parameters<T> for Encoder<T> {
    fn params(&self) -> Vec<&Param<T>> {
        self.blocks.iter().flat_map(|b| [&b.weight, &b.bias]).collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.blocks.iter_mut().flat_map(|b| [&mut b.weight, &mut b.bias]).collect()
    }
}

/// Arithmetic mean over time of a `channels x frames` sequence.
pub fn temporal_pool<T: Scalar>(latent: &Latent<T>) -> Result<Vec<T>, ModelError> {
    if latent.frames == 0 {
        return Err(ModelError::EmptySequence);
    }
    let inv = T::of(1.0 / latent.frames as f64);
    Ok(latent
        .values
        .chunks_exact(latent.frames)
        .map(|row| row.iter().copied().sum::<T>() * inv)
        .collect())
}

fn temporal_pool_backward<T: Scalar>(dh: &[T], frames: usize) -> Vec<T> {
    let inv = T::of(1.0 / frames as f64);
    dh.iter().flat_map(|&g| std::iter::repeat(g * inv).take(frames)).collect()
}

/// SiLU followed by a fully-connected layer, optionally unit-normalized.
/// Used for both the projection head and the BYOL predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct SiluLinear<T> {
    pub linear: Linear<T>,
    pub normalize: bool,
}

#[derive(Debug, Clone)]
pub struct HeadCache<T> {
    input: Vec<T>,
    activated: Vec<T>,
    output: Vec<T>,
    norm: T,
}

impl<T: Scalar> SiluLinear<T> {
    pub fn new(prefix: &str, inputs: usize, outputs: usize, normalize: bool, rng: &mut Rng) -> Self {
        Self {
            linear: Linear::new(prefix, inputs, outputs, rng),
            normalize,
        }
    }

    pub fn forward(&self, x: &[T]) -> Result<Vec<T>, ModelError> {
        self.forward_cached(x).map(|(y, _)| y)
    }

    pub fn forward_cached(&self, x: &[T]) -> Result<(Vec<T>, HeadCache<T>), ModelError> {
        let activated: Vec<T> = x.iter().map(|&v| silu(v)).collect();
        let y = self.linear.forward(&activated);
        let norm = y.iter().map(|&v| v * v).sum::<T>().sqrt();
        let out = if self.normalize {
            if !(norm.f64() >= MIN_PROJECTION_NORM) {
                return Err(ModelError::DegenerateProjection(norm.f64()));
            }
            y.iter().map(|&v| v / norm).collect()
        } else {
            y
        };
        let cache = HeadCache {
            input: x.to_vec(),
            activated,
            output: out.clone(),
            norm,
        };
        Ok((out, cache))
    }

    pub fn backward(&self, cache: &HeadCache<T>, d_out: &[T], grads: &mut SiluLinear<T>) -> Vec<T> {
        let dy: Vec<T> = if self.normalize {
            let proj = cache.output.iter().zip(d_out).map(|(&z, &g)| z * g).sum::<T>();
            cache
                .output
                .iter()
                .zip(d_out)
                .map(|(&z, &g)| (g - z * proj) / cache.norm)
                .collect()
        } else {
            d_out.to_vec()
        };
        let du = self.linear.backward(&cache.activated, &dy, &mut grads.linear);
        du.iter()
            .zip(&cache.input)
            .map(|(&g, &x)| g * silu_grad(x))
            .collect()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            linear: self.linear.zeros_like(),
            normalize: self.normalize,
        }
    }

    pub fn cast<U: Scalar>(&self) -> SiluLinear<U> {
        SiluLinear {
            linear: self.linear.cast(),
            normalize: self.normalize,
        }
    }
}

impl<T: Scalar> Parameters<T> for SiluLinear<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.linear.weight, &self.linear.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.linear.weight, &mut self.linear.bias]
    }
}

pub type ProjectionHead<T> = SiluLinear<T>;

/// Unit-norm projection `normalize(W SiLU(h) + b)`.
pub fn project<T: Scalar>(head: &ProjectionHead<T>, h: &[T]) -> Result<Vec<T>, ModelError> {
    head.forward(h)
}

/// Encoder plus projection head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub spec: ModelSpec,
    pub encoder: Encoder<T>,
    pub head: ProjectionHead<T>,
}

/// Everything the backward pass needs for one input.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    encoder: EncoderCache<T>,
    latent_frames: usize,
    head: HeadCache<T>,
}

/// Output of one forward pass: feature embedding `h` and projection `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<T> {
    pub h: Vec<T>,
    pub z: Vec<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(spec: &ModelSpec, seed: u64) -> Result<Self, ModelError> {
        spec.validate()?;
        let mut r = rng::stream(seed, "init", &[]);
        let encoder = Encoder::new(&spec.encoder, &mut r);
        let head = SiluLinear::new(
            "projection",
            spec.encoder.embedding_dim(),
            spec.projection_dim,
            true,
            &mut r,
        );
        Ok(Self {
            spec: spec.clone(),
            encoder,
            head,
        })
    }

    pub fn forward_mel(&self, mel: &MelSpectrogram) -> Result<Embedding<T>, ModelError> {
        self.forward_mel_cached(mel).map(|(e, _)| e)
    }

    pub fn forward_mel_cached(&self, mel: &MelSpectrogram) -> Result<(Embedding<T>, ForwardCache<T>), ModelError> {
        let (latent, enc_cache) = self.encoder.encode_cached(mel)?;
        let h = temporal_pool(&latent)?;
        let (z, head_cache) = self.head.forward_cached(&h)?;
        Ok((
            Embedding { h, z },
            ForwardCache {
                encoder: enc_cache,
                latent_frames: latent.frames,
                head: head_cache,
            },
        ))
    }

    /// Backpropagates `dz` (and optionally an extra gradient on `h`).
    pub fn backward(&self, cache: &ForwardCache<T>, dz: &[T], dh_extra: Option<&[T]>, grads: &mut Model<T>) {
        let mut dh = self.head.backward(&cache.head, dz, &mut grads.head);
        if let Some(extra) = dh_extra {
            dh.iter_mut().zip(extra).for_each(|(a, &b)| *a += b);
        }
        let d_latent = temporal_pool_backward(&dh, cache.latent_frames);
        self.encoder.backward(&cache.encoder, &d_latent, &mut grads.encoder);
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            encoder: self.encoder.zeros_like(),
            head: self.head.zeros_like(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            encoder: self.encoder.cast(),
            head: self.head.cast(),
        }
    }
}

impl<T: Scalar> Parameters<T> for Model<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.encoder.params();
        p.extend(self.head.params());
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.encoder.params_mut();
        p.extend(self.head.params_mut());
        p
    }
}

/// Waveform to `(h, z)` through the given feature extractor.
pub fn forward_with<T: Scalar>(
    model: &Model<T>,
    extractor: &MelExtractor,
    x: &[f32],
) -> Result<Embedding<T>, ModelError> {
    let mel = extractor.compute_samples(x)?;
    model.forward_mel(&mel)
}

/// Waveform at the canonical rate to `(h, z)`.
pub fn forward<T: Scalar>(model: &Model<T>, x: &[f32]) -> Result<Embedding<T>, ModelError> {
    forward_with(model, canonical_extractor(), x)
}
