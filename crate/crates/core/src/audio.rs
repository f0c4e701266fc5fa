//! Log-mel spectrograms and their alignment to video clips.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AudioTrack {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioTrack {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidDspConfig("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(Error::InvalidDspConfig(format!("sample {i} is not a finite value in [-1, 1]")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn silence(n: usize, sample_rate: u32) -> Self {
        Self { samples: vec![0.0; n], sample_rate }
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Reads PCM-16 or float-32 WAVE; multi-channel input is averaged.
    pub fn read_wav(path: impl AsRef<Path>) -> Result<Self> {
        let mut reader = hound::WavReader::open(path)?;
        let spec = reader.spec();
        let channels = spec.channels.max(1) as usize;
        let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
            (hound::SampleFormat::Int, 16) => {
                reader.samples::<i16>().map(|s| s.map(|v| v as f32 / 32768.0)).collect::<Result<_, _>>()?
            }
            (hound::SampleFormat::Float, 32) => reader.samples::<f32>().collect::<Result<_, _>>()?,
            (fmt, bits) => {
                return Err(Error::InvalidDspConfig(format!("unsupported WAVE encoding {fmt:?}/{bits} bit")));
            }
        };
        let samples = interleaved
            .chunks(channels)
            .map(|frame| frame.iter().sum::<f32>() / channels as f32)
            .collect();
        AudioTrack::new(samples, spec.sample_rate)
    }

    /// Writes mono float-32 WAVE, which round-trips samples exactly.
    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(path, spec)?;
        for &s in &self.samples {
            w.write_sample(s)?;
        }
        w.finalize()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    /// Power floor applied before the log.
    pub floor: f64,
    /// Optional first-order high-pass cutoff in Hz, applied before the STFT.
    pub high_pass_hz: Option<f64>,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self { n_fft: 1024, hop: 441, n_mels: 64, fmin: 30.0, fmax: 8000.0, floor: 1e-10, high_pass_hz: None }
    }
}

impl MelConfig {
    fn validate(&self, track: &AudioTrack) -> Result<()> {
        let nyquist = track.sample_rate as f64 / 2.0;
        let bad = |m: String| Err(Error::InvalidDspConfig(m));
        if self.n_fft < 2 || self.hop == 0 || self.n_mels == 0 {
            return bad("n_fft >= 2, hop > 0 and n_mels > 0 required".into());
        }
        if self.n_fft > track.samples.len() {
            return bad(format!("n_fft {} exceeds {} samples", self.n_fft, track.samples.len()));
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= nyquist) {
            return bad(format!("need 0 <= fmin < fmax <= {nyquist}, got {}..{}", self.fmin, self.fmax));
        }
        if !(self.floor > 0.0) {
            return bad("floor must be positive".into());
        }
        if let Some(hz) = self.high_pass_hz {
            if !(hz > 0.0 && hz < nyquist) {
                return bad(format!("high-pass cutoff {hz} outside (0, {nyquist})"));
            }
        }
        Ok(())
    }

    pub fn log_floor(&self) -> f64 {
        self.floor.ln()
    }
}

/// Log-mel power, `n_mels x n_frames`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub n_mels: usize,
    pub n_frames: usize,
    pub values: Vec<f64>,
    /// Start time of each analysis frame in seconds.
    pub frame_times: Vec<f64>,
    pub config: MelConfig,
    pub sample_rate: u32,
}

impl Spectrogram {
    pub fn get(&self, mel: usize, frame: usize) -> f64 {
        self.values[mel * self.n_frames + frame]
    }

    pub fn column(&self, frame: usize) -> Vec<f64> {
        (0..self.n_mels).map(|m| self.get(m, frame)).collect()
    }

    /// Rows are frames: `time,m0,m1,...`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::from("time");
        for m in 0..self.n_mels {
            out.push_str(&format!(",m{m}"));
        }
        out.push('\n');
        for f in 0..self.n_frames {
            out.push_str(&format!("{}", self.frame_times[f]));
            for m in 0..self.n_mels {
                out.push_str(&format!(",{}", self.get(m, f)));
            }
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// `QFSPEC f32 <n_mels> <n_frames>\n` then little-endian `f32`, row-major.
    pub fn write_raw(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "QFSPEC f32 {} {}", self.n_mels, self.n_frames)?;
        for v in &self.values {
            f.write_all(&(*v as f32).to_le_bytes())?;
        }
        f.flush()?;
        Ok(())
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let (min_log_hz, min_log_mel) = (1000.0, 1000.0 / f_sp);
    let logstep = 6.4f64.ln() / 27.0;
    if hz >= min_log_hz {
        min_log_mel + (hz / min_log_hz).ln() / logstep
    } else {
        hz / f_sp
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let (min_log_hz, min_log_mel) = (1000.0, 1000.0 / f_sp);
    let logstep = 6.4f64.ln() / 27.0;
    if mel >= min_log_mel {
        min_log_hz * (logstep * (mel - min_log_mel)).exp()
    } else {
        mel * f_sp
    }
}

/// Center frequencies of the `n_mels` bands.
pub fn mel_centers(cfg: &MelConfig) -> Vec<f64> {
    mel_edges(cfg)[1..=cfg.n_mels].to_vec()
}

fn mel_edges(cfg: &MelConfig) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// Triangular filters with area normalization, `n_mels x (n_fft/2 + 1)`.
pub fn mel_filterbank(cfg: &MelConfig, sample_rate: u32) -> Vec<Vec<f64>> {
    let edges = mel_edges(cfg);
    let n_bins = cfg.n_fft / 2 + 1;
    (0..cfg.n_mels)
        .map(|m| {
            let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let norm = 2.0 / (hi - lo);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * sample_rate as f64 / cfg.n_fft as f64;
                    let up = (f - lo) / (c - lo);
                    let down = (hi - f) / (hi - c);
                    up.min(down).max(0.0) * norm
                })
                .collect()
        })
        .collect()
}

pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

fn high_pass(samples: &[f32], cutoff: f64, sample_rate: u32) -> Vec<f64> {
    let dt = 1.0 / sample_rate as f64;
    let rc = 1.0 / (2.0 * PI * cutoff);
    let a = rc / (rc + dt);
    let mut out = Vec::with_capacity(samples.len());
    let (mut prev_x, mut prev_y) = (0.0f64, 0.0f64);
    for &s in samples {
        let x = s as f64;
        let y = a * (prev_y + x - prev_x);
        out.push(y);
        prev_x = x;
        prev_y = y;
    }
    out
}

/// Number of analysis frames without centering.
pub fn n_stft_frames(n_samples: usize, n_fft: usize, hop: usize) -> usize {
    if n_samples < n_fft {
        0
    } else {
        1 + (n_samples - n_fft) / hop
    }
}

/// One-sided Hann-windowed power spectra, one row of `n_fft/2 + 1` bins per
/// frame. The one-sided bins are not doubled.
pub fn stft_power(signal: &[f64], n_fft: usize, hop: usize) -> Vec<Vec<f64>> {
    let window = hann(n_fft);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    (0..n_stft_frames(signal.len(), n_fft, hop))
        .map(|f| {
            let start = f * hop;
            for i in 0..n_fft {
                buf[i] = Complex::new(signal[start + i] * window[i], 0.0);
            }
            fft.process(&mut buf);
            buf[..n_fft / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
        })
        .collect()
}

/// Hann-windowed power STFT, mel filterbank, then `ln(max(power, floor))`.
pub fn log_mel(track: &AudioTrack, cfg: &MelConfig) -> Result<Spectrogram> {
    cfg.validate(track)?;
    let signal: Vec<f64> = match cfg.high_pass_hz {
        Some(hz) => high_pass(&track.samples, hz, track.sample_rate),
        None => track.samples.iter().map(|&s| s as f64).collect(),
    };
    let power = stft_power(&signal, cfg.n_fft, cfg.hop);
    let bank = mel_filterbank(cfg, track.sample_rate);
    let n_frames = power.len();
    let mut values = vec![0.0; cfg.n_mels * n_frames];
    for (f, spec) in power.iter().enumerate() {
        for (m, filt) in bank.iter().enumerate() {
            let p: f64 = filt.iter().zip(spec).map(|(w, s)| w * s).sum();
            values[m * n_frames + f] = p.max(cfg.floor).ln();
        }
    }
    let frame_times = (0..n_frames).map(|f| (f * cfg.hop) as f64 / track.sample_rate as f64).collect();
    Ok(Spectrogram { n_mels: cfg.n_mels, n_frames, values, frame_times, config: *cfg, sample_rate: track.sample_rate })
}

/// Nominal number of spectrogram columns covering `n_frames` video frames.
pub fn window_width(spec: &Spectrogram, fps: f64, n_frames: usize) -> usize {
    let cols = n_frames as f64 * spec.sample_rate as f64 / (fps * spec.config.hop as f64);
    // exact multiples stay exact; tiny float excess must not add a column
    (cols - 1e-9).ceil() as usize
}

/// Columns whose start times fall in `[t0/fps, (t0+T)/fps)`, padded
/// symmetrically with the log floor to the nominal width. Returns an
/// `n_mels x W` row-major matrix.
pub fn clip_window(spec: &Spectrogram, fps: f64, t0: usize, n_frames: usize) -> Result<(Vec<f64>, usize)> {
    if !(fps > 0.0) || n_frames == 0 {
        return Err(Error::InvalidDspConfig("fps and clip length must be positive".into()));
    }
    let sr = spec.sample_rate as f64;
    let hop = spec.config.hop as f64;
    let audio_frames = spec.frame_times.len();
    let duration = if audio_frames == 0 {
        0.0
    } else {
        ((audio_frames - 1) as f64 * hop + spec.config.n_fft as f64) / sr
    };
    let end = (t0 + n_frames) as f64 / fps;
    if end > duration + 1e-9 {
        return Err(Error::WindowOutOfBounds(format!(
            "frames {t0}..{} end at {end:.4}s but audio covers {duration:.4}s",
            t0 + n_frames
        )));
    }
    // column i is inside when t0*sr <= i*hop*fps < (t0+T)*sr
    let lo = t0 as f64 * sr;
    let hi = (t0 + n_frames) as f64 * sr;
    let cols: Vec<usize> = (0..audio_frames)
        .filter(|&i| {
            let x = i as f64 * hop * fps;
            x >= lo && x < hi
        })
        .collect();
    let w = window_width(spec, fps, n_frames);
    let cols = &cols[..cols.len().min(w)];
    let left = (w - cols.len()) / 2;
    let floor = spec.config.log_floor();
    let mut out = vec![floor; spec.n_mels * w];
    for (j, &c) in cols.iter().enumerate() {
        for m in 0..spec.n_mels {
            out[m * w + left + j] = spec.get(m, c);
        }
    }
    Ok((out, w))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, amp: f64, secs: f64, sr: u32) -> AudioTrack {
        let n = (secs * sr as f64) as usize;
        let s = (0..n).map(|i| (amp * (2.0 * PI * freq * i as f64 / sr as f64).sin()) as f32).collect();
        AudioTrack::new(s, sr).unwrap()
    }

    #[test]
    fn silence_is_uniform_floor() {
        let cfg = MelConfig::default();
        let spec = log_mel(&AudioTrack::silence(44100, 44100), &cfg).unwrap();
        assert_eq!(spec.n_frames, 1 + (44100 - 1024) / 441);
        assert!(spec.values.iter().all(|&v| v == cfg.floor.ln()));
    }

    #[test]
    fn tone_lands_in_its_band() {
        let cfg = MelConfig::default();
        let centers = mel_centers(&cfg);
        for band in [30, 40, 50, 60] {
            let spec = log_mel(&tone(centers[band], 1.0, 0.5, 44100), &cfg).unwrap();
            for f in 2..spec.n_frames - 2 {
                let col = spec.column(f);
                let arg = (0..cfg.n_mels).max_by(|&a, &b| col[a].total_cmp(&col[b])).unwrap();
                assert_eq!(arg, band, "frame {f}");
            }
        }
    }

    #[test]
    fn parseval_on_windowed_frames() {
        let track = tone(440.0, 0.3, 0.1, 44100);
        let x: Vec<f64> = track.samples.iter().map(|&s| s as f64 + 0.01).collect();
        let n_fft = 1024;
        let w = hann(n_fft);
        for (f, row) in stft_power(&x, n_fft, 441).iter().enumerate() {
            let energy: f64 = (0..n_fft).map(|i| (x[f * 441 + i] * w[i]).powi(2)).sum();
            let half = n_fft / 2;
            let two_sided = row[0] + row[half] + 2.0 * row[1..half].iter().sum::<f64>();
            assert!((two_sided / n_fft as f64 - energy).abs() < 1e-6 * energy);
        }
    }

    #[test]
    fn amplitude_scaling_shifts_by_two_log_a() {
        let cfg = MelConfig::default();
        let base = tone(1500.0, 0.2, 0.3, 44100);
        let a = 3.0;
        let scaled = AudioTrack::new(base.samples.iter().map(|&s| (s as f64 * a) as f32).collect(), 44100).unwrap();
        let s0 = log_mel(&base, &cfg).unwrap();
        let s1 = log_mel(&scaled, &cfg).unwrap();
        let floor = cfg.floor.ln();
        let mut checked = 0;
        for (v0, v1) in s0.values.iter().zip(&s1.values) {
            // far enough above the floor that the additive floor is negligible
            if *v0 > floor + 16.0 {
                assert!((v1 - v0 - 2.0 * a.ln()).abs() < 1e-5, "{v0} {v1}");
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn filterbank_shape() {
        let cfg = MelConfig::default();
        let bank = mel_filterbank(&cfg, 44100);
        for filt in &bank {
            let peak = filt.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            assert!(filt[..peak].windows(2).all(|w| w[0] <= w[1]));
            assert!(filt[peak..].windows(2).all(|w| w[0] >= w[1]));
        }
        let df = 44100.0 / 1024.0;
        let edges = mel_edges(&cfg);
        for k in 0..bank[0].len() {
            let f = k as f64 * df;
            if f > edges[1] && f < edges[cfg.n_mels] {
                assert!(bank.iter().map(|b| b[k]).sum::<f64>() > 0.0, "bin {k}");
            }
        }
    }

    #[test]
    fn trailing_padding_is_ignored() {
        let cfg = MelConfig::default();
        let t = tone(700.0, 0.5, 0.2, 44100);
        let n = n_stft_frames(t.samples.len(), 1024, 441);
        let used = (n - 1) * 441 + 1024;
        let trimmed = AudioTrack::new(t.samples[..used].to_vec(), 44100).unwrap();
        let mut padded = trimmed.clone();
        padded.samples.extend(std::iter::repeat(0.25).take(300));
        assert_eq!(log_mel(&trimmed, &cfg).unwrap().values, log_mel(&padded, &cfg).unwrap().values);
    }

    #[test]
    fn clip_window_geometry() {
        let cfg = MelConfig::default();
        let spec = log_mel(&tone(300.0, 0.5, 2.0, 44100), &cfg).unwrap();
        let (a, w) = clip_window(&spec, 25.0, 0, 5).unwrap();
        assert_eq!(w, 20);
        assert_eq!(a.len(), 64 * 20);
        assert!(spec.frame_times[0] >= 0.0);
        let (b, _) = clip_window(&spec, 25.0, 1, 5).unwrap();
        // a 1-frame slide moves 4 columns, leaving 16 shared
        let shared = 20 - 4;
        for m in 0..64 {
            assert_eq!(&a[m * 20 + 4..m * 20 + 20], &b[m * 20..m * 20 + shared]);
        }
        let err = clip_window(&spec, 25.0, 48, 5).unwrap_err();
        assert!(err.to_string().starts_with("window out of bounds"));
    }

    #[test]
    fn bad_configs_rejected() {
        let t = AudioTrack::silence(2048, 44100);
        for cfg in [
            MelConfig { n_fft: 4096, ..Default::default() },
            MelConfig { fmin: 9000.0, ..Default::default() },
            MelConfig { fmax: 30000.0, ..Default::default() },
        ] {
            assert!(log_mel(&t, &cfg).unwrap_err().to_string().starts_with("invalid dsp config"));
        }
    }

    #[test]
    fn wav_round_trip_and_mixdown() {
        let dir = tempfile::tempdir().unwrap();
        let t = tone(220.0, 0.4, 0.05, 16000);
        t.write_wav(dir.path().join("a.wav")).unwrap();
        assert_eq!(AudioTrack::read_wav(dir.path().join("a.wav")).unwrap(), t);

        let spec = hound::WavSpec { channels: 2, sample_rate: 8000, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
        let path = dir.path().join("s.wav");
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for (l, r) in [(16384i16, 0i16), (-16384, -16384)] {
            w.write_sample(l).unwrap();
            w.write_sample(r).unwrap();
        }
        w.finalize().unwrap();
        let mono = AudioTrack::read_wav(&path).unwrap();
        assert_eq!(mono.samples, vec![0.25, -0.5]);
    }

    #[test]
    fn high_pass_removes_dc() {
        let t = AudioTrack::new(vec![0.5; 44100], 44100).unwrap();
        let cfg = MelConfig { high_pass_hz: Some(20.0), ..Default::default() };
        let plain = log_mel(&t, &MelConfig::default()).unwrap();
        let filtered = log_mel(&t, &cfg).unwrap();
        let last = plain.n_frames - 1;
        assert!(filtered.get(0, last) < plain.get(0, last) - 5.0);
    }
}
