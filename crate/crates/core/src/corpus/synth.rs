use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Audio, Corpus, Label, ParticipantRecord, Split};
use crate::error::{Error, Result};

/// Class-conditional Gaussian corpus description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub normal: usize,
    pub disorder: usize,
    /// Distance between class means in within-class standard deviations.
    pub separation: f64,
    pub text_width: usize,
    pub audio_width: usize,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    pub text_rows_per_s: f64,
    pub audio_rows_per_s: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            normal: 100,
            disorder: 100,
            separation: 4.0,
            text_width: 768,
            audio_width: 80,
            min_duration_s: 30.0,
            max_duration_s: 150.0,
            text_rows_per_s: 0.2,
            audio_rows_per_s: 0.5,
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// `total` participants of which `round(total * rate)` are positive.
    pub fn with_positive_rate(total: usize, rate: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::config(format!("positive rate {rate} outside [0, 1]")));
        }
        let disorder = (total as f64 * rate).round() as usize;
        Ok(Self {
            normal: total - disorder,
            disorder,
            ..Self::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.normal == 0 || self.disorder == 0 {
            return Err(Error::config("synthetic corpus needs at least one participant per class"));
        }
        if !(self.separation >= 0.0) || !self.separation.is_finite() {
            return Err(Error::config("separation must be a non-negative number"));
        }
        if self.text_width == 0 && self.audio_width == 0 {
            return Err(Error::config("at least one modality width must be positive"));
        }
        if !(self.min_duration_s > 0.0 && self.max_duration_s >= self.min_duration_s) {
            return Err(Error::config("duration range must satisfy 0 < min <= max"));
        }
        if !(self.text_rows_per_s > 0.0 && self.audio_rows_per_s > 0.0) {
            return Err(Error::config("row rates must be positive"));
        }
        Ok(())
    }
}

fn unit_direction(rng: &mut ChaCha8Rng, width: usize) -> Array1<f64> {
    loop {
        let v = Array1::from_shape_fn(width, |_| rng.sample::<f64, _>(StandardNormal));
        let norm = v.dot(&v).sqrt();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

fn class_rows(rng: &mut ChaCha8Rng, rows: usize, mean: &Array1<f64>) -> Array2<f32> {
    Array2::from_shape_fn((rows, mean.len()), |(_, j)| {
        (mean[j] + rng.sample::<f64, _>(StandardNormal)) as f32
    })
}

/// Counts per split for one class, 8:1:1 with at least one training member.
fn split_counts(n: usize) -> [usize; 3] {
    let val = (n as f64 * 0.1).round() as usize;
    let test = (n as f64 * 0.1).round() as usize;
    let train = n.saturating_sub(val + test).max(1);
    let val = val.min(n - train);
    [train, val, n - train - val]
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let text_dir = unit_direction(&mut rng, spec.text_width.max(1));
    let audio_dir = unit_direction(&mut rng, spec.audio_width.max(1));

    let mut labels: Vec<Label> = std::iter::repeat_n(Label::Normal, spec.normal)
        .chain(std::iter::repeat_n(Label::Disorder, spec.disorder))
        .collect();
    labels.shuffle(&mut rng);

    // stratified 8:1:1 split assignment per class
    let mut splits = vec![Split::Train; labels.len()];
    for class in [Label::Normal, Label::Disorder] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        let [train, val, _] = split_counts(members.len());
        for (k, &i) in members.iter().enumerate() {
            splits[i] = if k < train {
                Split::Train
            } else if k < train + val {
                Split::Validation
            } else {
                Split::Test
            };
        }
    }

    let mut records = Vec::with_capacity(labels.len());
    for (i, (&label, &split)) in labels.iter().zip(&splits).enumerate() {
        let sign = if label == Label::Disorder { 0.5 } else { -0.5 };
        let duration_s = if spec.max_duration_s > spec.min_duration_s {
            rng.random_range(spec.min_duration_s..spec.max_duration_s)
        } else {
            spec.min_duration_s
        };
        let duration_s = (duration_s * 10.0).round() / 10.0;
        let text_features = (spec.text_width > 0).then(|| {
            let rows = ((duration_s * spec.text_rows_per_s).round() as usize).max(1);
            class_rows(&mut rng, rows, &(&text_dir * (sign * spec.separation)))
        });
        let audio = (spec.audio_width > 0).then(|| {
            let rows = ((duration_s * spec.audio_rows_per_s).round() as usize).max(1);
            Audio::Mel(class_rows(&mut rng, rows, &(&audio_dir * (sign * spec.separation))))
        });
        records.push(ParticipantRecord {
            participant_id: format!("synth-{i:04}"),
            label,
            split,
            duration_s,
            text_features,
            audio,
        });
    }
    Corpus::new(records)
}
