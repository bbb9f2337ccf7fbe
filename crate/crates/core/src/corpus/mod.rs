//! Corpus records, the line-delimited corpus file, windowed segmentation,
//! audio featurization and the synthetic corpus generator.

mod mel;
mod segment;
mod synth;

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic_with;

pub use mel::{mel_spectrogram, read_wav, MelFrontend, LOG_FLOOR, MEL_BANDS, SUPPORTED_SAMPLE_RATES};
pub use segment::{aggregate_participant, segment, segment_windows, LabeledSegment, SegmentConfig};
pub use synth::{generate_synthetic, SynthSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Label {
    Normal = 0,
    Disorder = 1,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        self as u8
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l as u8
    }
}

impl TryFrom<u8> for Label {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Label::Normal),
            1 => Ok(Label::Disorder),
            other => Err(Error::data(format!("label {other} is not 0 or 1"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" | "valid" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::data(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Audio {
    /// Precomputed mel frames, A×80.
    Mel(Array2<f32>),
    /// 16-bit mono PCM file still to be featurized.
    Wav { path: PathBuf, sample_rate: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticipantRecord {
    pub participant_id: String,
    pub label: Label,
    pub split: Split,
    pub duration_s: f64,
    /// Precomputed transcript embeddings, T×768.
    pub text_features: Option<Array2<f32>>,
    pub audio: Option<Audio>,
}

impl ParticipantRecord {
    pub fn mel(&self) -> Option<&Array2<f32>> {
        match &self.audio {
            Some(Audio::Mel(m)) => Some(m),
            _ => None,
        }
    }

    fn validate(&self) -> Result<()> {
        let id = &self.participant_id;
        if !(self.duration_s > 0.0) || !self.duration_s.is_finite() {
            return Err(Error::data(format!("{id}: duration must be positive")));
        }
        if self.text_features.is_none() && self.audio.is_none() {
            return Err(Error::data(format!("{id}: record has neither text nor audio")));
        }
        if let Some(t) = &self.text_features {
            if t.nrows() == 0 || t.ncols() == 0 {
                return Err(Error::data(format!("{id}: empty text_features")));
            }
        }
        if let Some(Audio::Mel(m)) = &self.audio {
            if m.nrows() == 0 || m.ncols() == 0 {
                return Err(Error::data(format!("{id}: empty audio_mel")));
            }
        }
        Ok(())
    }
}

/// One line of the corpus file.
#[derive(Debug, Serialize, Deserialize)]
struct RecordLine {
    participant_id: String,
    label: u8,
    split: String,
    duration_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text_features: Option<Vec<Vec<f32>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    audio_mel: Option<Vec<Vec<f32>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    audio_wav_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sample_rate: Option<u32>,
}

fn to_matrix(id: &str, field: &str, rows: Vec<Vec<f32>>) -> Result<Array2<f32>> {
    let cols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::data(format!("{id}: ragged `{field}` rows")));
    }
    let n = rows.len();
    Array2::from_shape_vec((n, cols), rows.into_iter().flatten().collect())
        .map_err(|e| Error::data(format!("{id}: `{field}`: {e}")))
}

fn to_rows(m: &Array2<f32>) -> Vec<Vec<f32>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

impl RecordLine {
    fn into_record(self, base: &Path) -> Result<ParticipantRecord> {
        let id = self.participant_id;
        let label = Label::try_from(self.label).map_err(|e| Error::data(format!("{id}: {e}")))?;
        let split = self.split.parse().map_err(|e| Error::data(format!("{id}: {e}")))?;
        let text_features = self
            .text_features
            .map(|rows| to_matrix(&id, "text_features", rows))
            .transpose()?;
        let audio = match (self.audio_mel, self.audio_wav_path) {
            (Some(_), Some(_)) => {
                return Err(Error::data(format!("{id}: both audio_mel and audio_wav_path given")));
            }
            (Some(rows), None) => Some(Audio::Mel(to_matrix(&id, "audio_mel", rows)?)),
            (None, Some(p)) => {
                let sample_rate = self
                    .sample_rate
                    .ok_or_else(|| Error::data(format!("{id}: audio_wav_path without sample_rate")))?;
                let path = PathBuf::from(p);
                let path = if path.is_relative() { base.join(path) } else { path };
                Some(Audio::Wav { path, sample_rate })
            }
            (None, None) => None,
        };
        let rec = ParticipantRecord {
            participant_id: id,
            label,
            split,
            duration_s: self.duration_s,
            text_features,
            audio,
        };
        rec.validate()?;
        Ok(rec)
    }

    fn from_record(rec: &ParticipantRecord) -> Self {
        let (audio_mel, audio_wav_path, sample_rate) = match &rec.audio {
            Some(Audio::Mel(m)) => (Some(to_rows(m)), None, None),
            Some(Audio::Wav { path, sample_rate }) => (None, Some(path.display().to_string()), Some(*sample_rate)),
            None => (None, None, None),
        };
        Self {
            participant_id: rec.participant_id.clone(),
            label: rec.label.as_u8(),
            split: rec.split.as_str().to_owned(),
            duration_s: rec.duration_s,
            text_features: rec.text_features.as_ref().map(to_rows),
            audio_mel,
            audio_wav_path,
            sample_rate,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub records: Vec<ParticipantRecord>,
}

impl Corpus {
    pub fn new(records: Vec<ParticipantRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            r.validate()?;
            if !seen.insert(r.participant_id.as_str()) {
                return Err(Error::data(format!("duplicate participant_id `{}`", r.participant_id)));
            }
        }
        Ok(Self { records })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: RecordLine = serde_json::from_str(&line)
                .map_err(|e| Error::data(format!("{}:{}: {e}", path.display(), i + 1)))?;
            records.push(parsed.into_record(&base)?);
        }
        Self::new(records)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic_with(path, |w| {
            for rec in &self.records {
                serde_json::to_writer(&mut *w, &RecordLine::from_record(rec)).map_err(|e| Error::Json {
                    context: rec.participant_id.clone(),
                    source: e,
                })?;
                w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
            }
            Ok(())
        })
    }

    /// Records of one split, ordered by participant id.
    pub fn split(&self, split: Split) -> Vec<&ParticipantRecord> {
        let mut v: Vec<_> = self.records.iter().filter(|r| r.split == split).collect();
        v.sort_by(|a, b| a.participant_id.cmp(&b.participant_id));
        v
    }

    /// Replaces every WAV reference with its mel frames.
    pub fn featurize(&mut self) -> Result<usize> {
        let mut converted = 0;
        for rec in &mut self.records {
            if let Some(Audio::Wav { path, sample_rate }) = &rec.audio {
                let (samples, rate) = read_wav(path)?;
                if rate != *sample_rate {
                    return Err(Error::data(format!(
                        "{}: file sample rate {rate} differs from declared {sample_rate}",
                        rec.participant_id
                    )));
                }
                rec.audio = Some(Audio::Mel(mel_spectrogram(&samples, rate)?));
                converted += 1;
            }
        }
        Ok(converted)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, split: Split) -> ParticipantRecord {
        ParticipantRecord {
            participant_id: id.into(),
            label: Label::Disorder,
            split,
            duration_s: 12.5,
            text_features: Some(Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f32 * 0.25)),
            audio: Some(Audio::Mel(Array2::from_elem((5, 2), -1.5))),
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let corpus = Corpus::new(vec![record("b", Split::Test), record("a", Split::Train)]).unwrap();
        corpus.save(&path).unwrap();
        assert_eq!(Corpus::load(&path).unwrap(), corpus);
        assert_eq!(corpus.split(Split::Train)[0].participant_id, "a");
    }

    #[test]
    fn rejects_bad_records() {
        assert!(Corpus::new(vec![record("a", Split::Train), record("a", Split::Test)]).is_err());
        let mut r = record("x", Split::Train);
        r.duration_s = 0.0;
        assert!(matches!(Corpus::new(vec![r]), Err(Error::Data(_))));
        let mut r = record("x", Split::Train);
        r.text_features = None;
        r.audio = None;
        assert!(Corpus::new(vec![r]).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, r#"{"participant_id":"q","label":3,"split":"train","duration_s":1,"audio_mel":[[1.0]]}"#).unwrap();
        assert!(matches!(Corpus::load(&path), Err(Error::Data(_))));
        std::fs::write(&path, r#"{"participant_id":"q","label":0,"split":"train","duration_s":1,"text_features":[[1.0],[1.0,2.0]]}"#).unwrap();
        assert!(matches!(Corpus::load(&path), Err(Error::Data(_))));
    }

    #[test]
    fn relative_wav_paths_resolve_against_the_corpus_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(
            &path,
            r#"{"participant_id":"w","label":1,"split":"test","duration_s":1,"audio_wav_path":"w.wav","sample_rate":16000}"#,
        )
        .unwrap();
        let c = Corpus::load(&path).unwrap();
        assert_eq!(
            c.records[0].audio,
            Some(Audio::Wav {
                path: dir.path().join("w.wav"),
                sample_rate: 16000
            })
        );
    }
}
