use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub const MEL_BANDS: usize = 80;
pub const SUPPORTED_SAMPLE_RATES: [u32; 4] = [8000, 16000, 44100, 48000];
/// Natural log of the magnitude floor.
pub const LOG_FLOOR: f64 = -23.025_850_929_940_457;
const MAG_FLOOR: f64 = 1e-10;
const MAX_FREQ_HZ: f64 = 8000.0;

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Frame, window and filterbank geometry for one sample rate.
pub struct MelFrontend {
    pub sample_rate: u32,
    pub frame_len: usize,
    pub hop: usize,
    pub n_fft: usize,
    window: Vec<f64>,
    /// MEL_BANDS × (n_fft/2 + 1)
    filters: Array2<f64>,
    centers_hz: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl MelFrontend {
    pub fn new(sample_rate: u32) -> Result<Self> {
        if !SUPPORTED_SAMPLE_RATES.contains(&sample_rate) {
            return Err(Error::data(format!(
                "unsupported sample rate {sample_rate} (expected one of {SUPPORTED_SAMPLE_RATES:?})"
            )));
        }
        let sr = sample_rate as f64;
        let frame_len = (0.025 * sr).floor() as usize;
        let hop = (0.010 * sr).floor() as usize;
        let n_fft = frame_len.next_power_of_two();
        // periodic Hann
        let window = (0..frame_len)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / frame_len as f64).cos())
            .collect();

        let bins = n_fft / 2 + 1;
        let top = MAX_FREQ_HZ.min(sr / 2.0);
        let (lo, hi) = (hz_to_mel(0.0), hz_to_mel(top));
        let edges: Vec<f64> = (0..MEL_BANDS + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (MEL_BANDS + 1) as f64))
            .collect();
        let mut filters = Array2::zeros((MEL_BANDS, bins));
        for m in 0..MEL_BANDS {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..bins {
                let f = k as f64 * sr / n_fft as f64;
                let w = if f > l && f <= c {
                    (f - l) / (c - l)
                } else if f > c && f < r {
                    (r - f) / (r - c)
                } else {
                    0.0
                };
                filters[[m, k]] = w;
            }
        }
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Ok(Self {
            sample_rate,
            frame_len,
            hop,
            n_fft,
            window,
            filters,
            centers_hz: edges[1..=MEL_BANDS].to_vec(),
            fft,
        })
    }

    pub fn band_centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn frame_count(&self, samples: usize) -> Option<usize> {
        (samples >= self.frame_len).then(|| 1 + (samples - self.frame_len) / self.hop)
    }

    pub fn compute(&self, samples: &[f32]) -> Result<Array2<f32>> {
        let frames = self.frame_count(samples.len()).ok_or_else(|| {
            Error::data(format!(
                "waveform of {} samples is shorter than one {}-sample frame",
                samples.len(),
                self.frame_len
            ))
        })?;
        let bins = self.n_fft / 2 + 1;
        let mut out = Array2::zeros((frames, MEL_BANDS));
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        let mut mag = vec![0.0; bins];
        for t in 0..frames {
            let frame = &samples[t * self.hop..t * self.hop + self.frame_len];
            for (i, slot) in buf.iter_mut().enumerate() {
                let v = if i < self.frame_len {
                    frame[i] as f64 * self.window[i]
                } else {
                    0.0
                };
                *slot = Complex::new(v, 0.0);
            }
            self.fft.process(&mut buf);
            for (m, c) in mag.iter_mut().zip(&buf) {
                *m = c.norm();
            }
            for b in 0..MEL_BANDS {
                let e: f64 = self.filters.row(b).iter().zip(&mag).map(|(w, m)| w * m).sum();
                out[[t, b]] = e.max(MAG_FLOOR).ln() as f32;
            }
        }
        Ok(out)
    }
}

/// Log-mel frames (A×80) of a mono waveform.
pub fn mel_spectrogram(samples: &[f32], sample_rate: u32) -> Result<Array2<f32>> {
    MelFrontend::new(sample_rate)?.compute(samples)
}

/// Reads a 16-bit signed mono PCM WAV file, scaling samples to [-1, 1).
pub fn read_wav(path: &Path) -> Result<(Vec<f32>, u32)> {
    let reader = hound::WavReader::open(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::data(format!(
            "{}: expected 16-bit mono PCM, found {} channel(s) at {} bits",
            path.display(),
            spec.channels,
            spec.bits_per_sample
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    Ok((samples, spec.sample_rate))
}
