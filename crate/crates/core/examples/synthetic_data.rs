//! Synthetic gait sequences: generation, augmentation, the on-disk layout and
//! sliding-window clips.

use quadfit::body::toy::toy_quadruped;
use quadfit::data::{
    apply_occluder, color_jitter, keypoint_noise, load_clips, save_sequence, synth_sequence, Gait, OccluderSpec,
    SynthConfig,
};

fn main() -> quadfit::Result<()> {
    let model = toy_quadruped();
    let cfg = SynthConfig { gait: Gait::Canter, n_frames: 25, seed: 7, ..Default::default() };
    let seq = synth_sequence(&model, &cfg)?;
    println!("{}: {} frames, {} keypoints, audio {}", seq.id, seq.len(), seq.n_keypoints(), seq.audio.is_some());

    let motion = quadfit::data::synth::motion_for(&cfg);
    let contacts = motion.contacts(0.0, 1.0);
    println!("{:.2} Hz stride; first hoof contacts {:?}", motion.freq, &contacts[..contacts.len().min(4)]);

    let occluded = apply_occluder(&seq, &model, &OccluderSpec::legs(3))?;
    let hidden: usize = occluded.conf.iter().flatten().filter(|&&c| c == 0.0).count();
    println!("leg occluder hides {hidden} keypoint observations");
    let jittered = color_jitter(&keypoint_noise(&seq, 2.0, 1)?, 0.4, 2)?;

    let dir = std::env::temp_dir().join("quadfit-example-seq");
    save_sequence(&jittered, &dir)?;
    let clips = load_clips(&dir, 5)?;
    println!("saved to {}; reloaded as {} five-frame clips", dir.display(), clips.len());
    Ok(())
}
