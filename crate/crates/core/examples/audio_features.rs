//! Log-mel features: a tone, its loudness shift, and per-clip windows.

use std::f64::consts::TAU;

use quadfit::audio::{clip_window, log_mel, mel_centers, AudioTrack, MelConfig};

fn main() -> quadfit::Result<()> {
    let sr = 44100;
    let tone = |amp: f64| -> quadfit::Result<AudioTrack> {
        let s = (0..sr).map(|i| (amp * (TAU * 1000.0 * i as f64 / sr as f64).sin()) as f32).collect();
        AudioTrack::new(s, sr as u32)
    };
    let cfg = MelConfig::default();
    let spec = log_mel(&tone(0.5)?, &cfg)?;
    let col = spec.column(spec.n_frames / 2);
    let (peak, _) = col.iter().enumerate().fold((0, f64::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
    println!("1 kHz tone peaks in mel band {peak} (center {:.0} Hz)", mel_centers(&cfg)[peak]);

    let louder = log_mel(&tone(1.0)?, &cfg)?;
    let shift = louder.get(peak, spec.n_frames / 2) - spec.get(peak, spec.n_frames / 2);
    println!("doubling amplitude shifts log power by {shift:.4} (2 ln 2 = {:.4})", 2.0 * 2f64.ln());

    let silent = log_mel(&AudioTrack::silence(sr, sr as u32), &cfg)?;
    println!("silence sits at the floor {:.3}: {}", cfg.log_floor(), silent.values.iter().all(|&v| v == cfg.log_floor()));

    let (window, width) = clip_window(&spec, 25.0, 10, 5)?;
    println!("5 frames at 25 fps from frame 10: {} mels x {width} columns ({} values)", spec.n_mels, window.len());
    Ok(())
}
