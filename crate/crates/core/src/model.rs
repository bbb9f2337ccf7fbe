//! The end-to-end classifier: modality fusion, prior-query encoder, latent
//! self-attention stack, and the query-array decoder with its class-wise head.
//!
//! Batches are processed by stacking every sample's rows; each sample owns a
//! 2-row slice of the latent array and attention never mixes samples.

use std::ops::Range;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionParams, AttentionShape};
use crate::corpus::Label;
use crate::error::{Error, Result};
use crate::numerics::{softmax_rows, Init, Linear, ParamStore, Real, Segments, Tape, Var};
use crate::priors::{CategoryPriorPair, CategoryPriors};

pub const QUERY_ARRAY: &str = "decoder.query";
pub const TEXT_TAG: &str = "fusion.text_tag";
pub const AUDIO_TAG: &str = "fusion.audio_tag";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Width of the fused input rows (transcript embedding width).
    pub input_width: usize,
    /// Mel bands per audio frame.
    pub audio_width: usize,
    pub latent_width: usize,
    pub query_width: usize,
    pub output_width: usize,
    /// Number of latent self-attention blocks.
    pub depth: usize,
    pub heads: usize,
    pub zero_init_residual: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_width: 768,
            audio_width: 80,
            latent_width: 512,
            query_width: 512,
            output_width: 512,
            depth: 8,
            heads: 1,
            zero_init_residual: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = [
            ("input_width", self.input_width),
            ("audio_width", self.audio_width),
            ("latent_width", self.latent_width),
            ("query_width", self.query_width),
            ("output_width", self.output_width),
        ];
        if let Some((name, _)) = widths.iter().find(|(_, w)| *w == 0) {
            return Err(Error::config(format!("model.{name} must be at least 1")));
        }
        if self.depth == 0 {
            return Err(Error::config("model.depth must be at least 1"));
        }
        if self.output_width != self.query_width {
            return Err(Error::config(
                "model.output_width must equal model.query_width (the decoder output keeps the query width)",
            ));
        }
        if self.heads == 0 || !self.latent_width.is_multiple_of(self.heads) || !self.query_width.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "model.heads = {} must divide latent_width and query_width",
                self.heads
            )));
        }
        Ok(())
    }
}

/// One sample's raw features: transcript rows and/or mel frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureInput<F> {
    pub text: Option<Array2<F>>,
    pub audio: Option<Array2<F>>,
}

impl<F: Real> FeatureInput<F> {
    pub fn rows(&self) -> usize {
        self.text.as_ref().map_or(0, |t| t.nrows()) + self.audio.as_ref().map_or(0, |a| a.nrows())
    }
}

/// Per-prior logit pairs, their mean, and the fused class probabilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassWiseOutput<F> {
    pub y_c0: [F; 2],
    pub y_c1: [F; 2],
    pub y_prime: [F; 2],
    pub probabilities: [F; 2],
}

impl<F: Real> ClassWiseOutput<F> {
    pub fn from_logits(y_c0: [F; 2], y_c1: [F; 2]) -> Self {
        let half = F::from_f64_lossy(0.5);
        let y_prime = [(y_c0[0] + y_c1[0]) * half, (y_c0[1] + y_c1[1]) * half];
        Self::with_fused(y_c0, y_c1, y_prime)
    }

    fn with_fused(y_c0: [F; 2], y_c1: [F; 2], y_prime: [F; 2]) -> Self {
        let p = softmax_rows(&Array2::from_shape_vec((1, 2), y_prime.to_vec()).expect("1x2"));
        Self {
            y_c0,
            y_c1,
            y_prime,
            probabilities: [p[[0, 0]], p[[0, 1]]],
        }
    }

    /// Argmax of the fused probabilities; an exact tie goes to the disorder class.
    pub fn predicted(&self) -> Label {
        predict_from_probabilities(self.probabilities)
    }

    pub fn p_disorder(&self) -> f64 {
        self.probabilities[1].as_f64()
    }
}

pub fn predict_from_probabilities<F: Real>(p: [F; 2]) -> Label {
    if p[1] >= p[0] {
        Label::Disorder
    } else {
        Label::Normal
    }
}

/// Tape handles produced by a batched forward pass.
#[derive(Debug, Clone, Copy)]
pub struct BatchForward {
    /// 2B×2: row `2b` is the normal-prior head of sample `b`, row `2b+1` the disorder-prior head.
    pub logits: Var,
    /// B×2 mean of each sample's two heads.
    pub fused: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MentalPerceiver {
    pub config: ModelConfig,
    pub audio_proj: Linear,
    pub priors: CategoryPriorPair,
    pub encoder: AttentionParams,
    pub latents: Vec<AttentionParams>,
    pub decoder: AttentionParams,
    pub head: Linear,
}

impl MentalPerceiver {
    /// Registers every parameter into a fresh store seeded from `config.seed`.
    pub fn build<F: Real>(config: &ModelConfig, priors: &CategoryPriors) -> Result<(Self, ParamStore<F>)> {
        config.validate()?;
        if priors.width() != config.input_width {
            return Err(Error::config(format!(
                "category priors have width {}, model.input_width is {}",
                priors.width(),
                config.input_width
            )));
        }
        let mut params = ParamStore::new(config.seed);
        let init = Init::DEFAULT;
        let audio_proj = Linear::register(&mut params, "fusion.audio_proj", config.audio_width, config.input_width, init)?;
        params.init(TEXT_TAG, 1, config.input_width, init)?;
        params.init(AUDIO_TAG, 1, config.input_width, init)?;
        let prior_pair = CategoryPriorPair::register(&mut params, priors, config.latent_width, init)?;
        let encoder = AttentionParams::register(
            &mut params,
            "encoder",
            AttentionShape {
                query_width: config.latent_width,
                kv_width: config.input_width,
                heads: config.heads,
                self_attention: false,
                zero_init_residual: config.zero_init_residual,
            },
        )?;
        let latents = (0..config.depth)
            .map(|i| {
                AttentionParams::register(
                    &mut params,
                    &format!("latent.{i}"),
                    AttentionShape {
                        query_width: config.latent_width,
                        kv_width: config.latent_width,
                        heads: config.heads,
                        self_attention: true,
                        zero_init_residual: config.zero_init_residual,
                    },
                )
            })
            .collect::<Result<Vec<_>>>()?;
        params.init(QUERY_ARRAY, 2, config.query_width, init)?;
        let decoder = AttentionParams::register(
            &mut params,
            "decoder",
            AttentionShape {
                query_width: config.query_width,
                kv_width: config.latent_width,
                heads: config.heads,
                self_attention: false,
                zero_init_residual: config.zero_init_residual,
            },
        )?;
        let head = Linear::register(&mut params, "decoder.head", config.output_width, 2, init)?;
        Ok((
            Self {
                config: config.clone(),
                audio_proj,
                priors: prior_pair,
                encoder,
                latents,
                decoder,
                head,
            },
            params,
        ))
    }

    /// Checks that a store (e.g. one loaded from disk) holds every tensor this
    /// model reads, with matching shapes and trainable flags.
    pub fn check_params<F: Real, G: Real>(&self, reference: &ParamStore<G>, params: &ParamStore<F>) -> Result<()> {
        for (name, p) in reference.iter() {
            let q = params
                .get(name)
                .ok_or_else(|| Error::data(format!("missing parameter `{name}`")))?;
            if q.value.dim() != p.value.dim() || q.trainable != p.trainable {
                return Err(Error::data(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    q.value.dim(),
                    p.value.dim()
                )));
            }
        }
        Ok(())
    }

    /// Builds the fused input rows of every sample and the row range each occupies.
    ///
    /// Text rows come first within a sample, then projected audio rows; both get
    /// sinusoidal position features and a learned per-modality tag.
    pub fn fuse<F: Real>(&self, tape: &mut Tape<'_, F>, inputs: &[&FeatureInput<F>]) -> Result<(Var, Vec<Range<usize>>)> {
        let dx = self.config.input_width;
        let da = self.config.audio_width;
        let mut text_rows = Vec::new();
        let mut audio_rows = Vec::new();
        for (i, input) in inputs.iter().enumerate() {
            if input.text.is_none() && input.audio.is_none() {
                return Err(Error::data(format!("sample {i} has neither text nor audio features")));
            }
            if let Some(t) = &input.text {
                if t.ncols() != dx {
                    return Err(Error::data(format!("text features have width {}, expected {dx}", t.ncols())));
                }
                let mut t = t.clone();
                t += &sinusoidal_positions(t.nrows(), dx);
                text_rows.push(t);
            }
            if let Some(a) = &input.audio {
                if a.ncols() != da {
                    return Err(Error::data(format!("audio frames have width {}, expected {da}", a.ncols())));
                }
                audio_rows.push(a.clone());
            }
            if input.rows() == 0 {
                return Err(Error::data(format!("sample {i} has no feature rows")));
            }
        }

        let mut parts = Vec::new();
        let total_text: usize = text_rows.iter().map(|t| t.nrows()).sum();
        if !text_rows.is_empty() {
            let views: Vec<_> = text_rows.iter().map(|t| t.view()).collect();
            let stacked = ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::data(e.to_string()))?;
            let t = tape.constant(stacked)?;
            let tag = tape.param(TEXT_TAG)?;
            parts.push(tape.add_row(t, tag)?);
        }
        if !audio_rows.is_empty() {
            let views: Vec<_> = audio_rows.iter().map(|a| a.view()).collect();
            let stacked = ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::data(e.to_string()))?;
            let pos_blocks: Vec<_> = audio_rows.iter().map(|a| sinusoidal_positions::<F>(a.nrows(), dx)).collect();
            let pos_views: Vec<_> = pos_blocks.iter().map(|p| p.view()).collect();
            let pos = ndarray::concatenate(ndarray::Axis(0), &pos_views).map_err(|e| Error::data(e.to_string()))?;
            let a = tape.constant(stacked)?;
            let projected = self.audio_proj.forward(tape, a)?;
            let pos = tape.constant(pos)?;
            let with_pos = tape.add(projected, pos)?;
            let tag = tape.param(AUDIO_TAG)?;
            parts.push(tape.add_row(with_pos, tag)?);
        }
        let all = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };

        // reorder into sample-major layout: sample b's text rows, then its audio rows
        let mut order = Vec::with_capacity(tape.shape(all).0);
        let mut ranges = Vec::with_capacity(inputs.len());
        let (mut text_cursor, mut audio_cursor) = (0, total_text);
        for input in inputs {
            let start = order.len();
            if let Some(t) = &input.text {
                order.extend(text_cursor..text_cursor + t.nrows());
                text_cursor += t.nrows();
            }
            if let Some(a) = &input.audio {
                order.extend(audio_cursor..audio_cursor + a.nrows());
                audio_cursor += a.nrows();
            }
            ranges.push(start..order.len());
        }
        let x = tape.gather_rows(all, order)?;
        Ok((x, ranges))
    }

    /// Prior-query cross-attention into the input; `p` is the 2×D prior embedding.
    pub fn encode<F: Real>(&self, tape: &mut Tape<'_, F>, p: Var, x: Var, samples: &[Range<usize>]) -> Result<Var> {
        if samples.is_empty() {
            return Err(Error::data("empty batch"));
        }
        if let Some(i) = samples.iter().position(|r| r.is_empty()) {
            return Err(Error::data(format!("sample {i} has an empty feature sequence")));
        }
        let queries = tape.tile_rows(p, samples.len())?;
        let segments = Segments {
            query: (0..samples.len()).map(|b| 2 * b..2 * b + 2).collect(),
            key: samples.to_vec(),
        };
        self.encoder.forward(tape, queries, x, &segments)
    }

    /// The latent self-attention stack over `batch` stacked 2-row latents.
    pub fn process<F: Real>(&self, tape: &mut Tape<'_, F>, z: Var, batch: usize) -> Result<Var> {
        let segments = Segments::uniform(batch, 2, 2);
        let mut z = z;
        for block in &self.latents {
            z = block.forward(tape, z, z, &segments)?;
        }
        Ok(z)
    }

    pub fn decode<F: Real>(&self, tape: &mut Tape<'_, F>, z: Var, batch: usize) -> Result<BatchForward> {
        let q = tape.param(QUERY_ARRAY)?;
        let queries = tape.tile_rows(q, batch)?;
        let y = self.decoder.forward(tape, queries, z, &Segments::uniform(batch, 2, 2))?;
        let logits = self.head.forward(tape, y)?;
        let fused = tape.pair_mean(logits)?;
        Ok(BatchForward { logits, fused })
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<'_, F>, inputs: &[&FeatureInput<F>]) -> Result<BatchForward> {
        let p = self.priors.forward(tape)?;
        let (x, samples) = self.fuse(tape, inputs)?;
        let z = self.encode(tape, p, x, &samples)?;
        let z = self.process(tape, z, inputs.len())?;
        self.decode(tape, z, inputs.len())
    }

    pub fn outputs<F: Real>(&self, tape: &Tape<'_, F>, fwd: &BatchForward) -> Vec<ClassWiseOutput<F>> {
        let logits = tape.value(fwd.logits);
        let fused = tape.value(fwd.fused);
        (0..fused.nrows())
            .map(|b| {
                ClassWiseOutput::with_fused(
                    [logits[[2 * b, 0]], logits[[2 * b, 1]]],
                    [logits[[2 * b + 1, 0]], logits[[2 * b + 1, 1]]],
                    [fused[[b, 0]], fused[[b, 1]]],
                )
            })
            .collect()
    }

    pub fn predict_batch<F: Real>(&self, params: &ParamStore<F>, inputs: &[&FeatureInput<F>]) -> Result<Vec<ClassWiseOutput<F>>> {
        let mut tape = Tape::new(params);
        let fwd = self.forward(&mut tape, inputs)?;
        Ok(self.outputs(&tape, &fwd))
    }

    pub fn predict<F: Real>(&self, params: &ParamStore<F>, input: &FeatureInput<F>) -> Result<ClassWiseOutput<F>> {
        Ok(self.predict_batch(params, &[input])?.remove(0))
    }
}

/// Transformer-style sine/cosine position features, `rows × width`.
pub fn sinusoidal_positions<F: Real>(rows: usize, width: usize) -> Array2<F> {
    Array2::from_shape_fn((rows, width), |(pos, j)| {
        let pair = (j / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / width as f64);
        F::from_f64_lossy(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}
