use std::borrow::Cow;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use super::{mel_spectrogram, read_wav, Audio, Label, ParticipantRecord};
use crate::error::{Error, Result};
use crate::model::FeatureInput;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentConfig {
    pub window_s: f64,
    pub overlap_s: f64,
    /// Shortest trailing partial window that is still emitted.
    pub min_tail_s: f64,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            window_s: 60.0,
            overlap_s: 10.0,
            min_tail_s: 5.0,
        }
    }
}

impl SegmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.window_s > self.overlap_s && self.overlap_s >= 0.0) || !self.window_s.is_finite() {
            return Err(Error::config(format!(
                "segment window {} s must exceed overlap {} s >= 0",
                self.window_s, self.overlap_s
            )));
        }
        if !(self.min_tail_s >= 0.0) {
            return Err(Error::config("min_tail_s must be non-negative"));
        }
        Ok(())
    }

    pub fn stride_s(&self) -> f64 {
        self.window_s - self.overlap_s
    }
}

/// Window boundaries `[start, end)` in seconds for a recording of `duration_s`.
pub fn segment_windows(duration_s: f64, cfg: &SegmentConfig) -> Result<Vec<(f64, f64)>> {
    cfg.validate()?;
    if !(duration_s > 0.0) || !duration_s.is_finite() {
        return Err(Error::data(format!("duration {duration_s} s must be positive")));
    }
    let stride = cfg.stride_s();
    let mut out = Vec::new();
    for k in 0.. {
        let start = k as f64 * stride;
        if start >= duration_s {
            break;
        }
        let end = (start + cfg.window_s).min(duration_s);
        let partial = end - start < cfg.window_s;
        if k > 0 && partial && end - start < cfg.min_tail_s {
            break;
        }
        out.push((start, end));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSegment {
    pub participant_id: String,
    pub start_s: f64,
    pub end_s: f64,
    pub label: Label,
    pub features: FeatureInput<f32>,
}

/// Rows of a matrix spanning `duration_s` that fall inside `[start, end)`,
/// by proportional share of the timeline. Never empty.
fn slice_rows(m: &Array2<f32>, duration_s: f64, start: f64, end: f64) -> Array2<f32> {
    let n = m.nrows();
    let lo = ((start / duration_s * n as f64).floor() as usize).min(n - 1);
    let hi = ((end / duration_s * n as f64).ceil() as usize).clamp(lo + 1, n);
    m.slice(s![lo..hi, ..]).to_owned()
}

pub fn segment(record: &ParticipantRecord, cfg: &SegmentConfig) -> Result<Vec<LabeledSegment>> {
    let windows = segment_windows(record.duration_s, cfg)
        .map_err(|e| match e {
            Error::Data(m) => Error::data(format!("{}: {m}", record.participant_id)),
            other => other,
        })?;
    let mel: Option<Cow<'_, Array2<f32>>> = match &record.audio {
        Some(Audio::Mel(m)) => Some(Cow::Borrowed(m)),
        Some(Audio::Wav { path, sample_rate }) => {
            let (samples, rate) = read_wav(path)?;
            if rate != *sample_rate {
                return Err(Error::data(format!(
                    "{}: file sample rate {rate} differs from declared {sample_rate}",
                    record.participant_id
                )));
            }
            Some(Cow::Owned(mel_spectrogram(&samples, rate)?))
        }
        None => None,
    };
    Ok(windows
        .into_iter()
        .map(|(start, end)| LabeledSegment {
            participant_id: record.participant_id.clone(),
            start_s: start,
            end_s: end,
            label: record.label,
            features: FeatureInput {
                text: record
                    .text_features
                    .as_ref()
                    .map(|t| slice_rows(t, record.duration_s, start, end)),
                audio: mel.as_deref().map(|m| slice_rows(m, record.duration_s, start, end)),
            },
        })
        .collect())
}

/// Mean disorder probability over a participant's segments; class 1 iff the mean is at least 0.5.
pub fn aggregate_participant(segment_probs: &[[f64; 2]]) -> Result<(Label, [f64; 2])> {
    if segment_probs.is_empty() {
        return Err(Error::data("cannot aggregate zero segments"));
    }
    let mean = segment_probs.iter().map(|p| p[1]).sum::<f64>() / segment_probs.len() as f64;
    let label = if mean >= 0.5 { Label::Disorder } else { Label::Normal };
    Ok((label, [1.0 - mean, mean]))
}
