//! Train the three regressors on a handful of synthetic clips and compare
//! them on clean and leg-occluded test clips. Pass an epoch count to train
//! longer, e.g. `cargo run --release --example fusion_training -- 300`.

use quadfit::body::toy::toy_quadruped;
use quadfit::data::{apply_occluder, keypoint_noise, synth_gait, ClipRecord, Gait, OccluderSpec};
use quadfit::fusion::{evaluate_pmpjpe, predict, train, TrainConfig, Variant};

fn main() -> quadfit::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(40);
    let model = toy_quadruped();
    let clip = |seed: u64| -> quadfit::Result<ClipRecord> {
        let c = synth_gait(&model, Gait::ALL[(seed % 3) as usize], 5, 25.0, seed)?;
        keypoint_noise(&c, 2.0, seed)
    };
    let train_set: Vec<_> = (100..112).map(clip).collect::<quadfit::Result<_>>()?;
    let clean: Vec<_> = (500..506).map(clip).collect::<quadfit::Result<_>>()?;
    let occluded: Vec<_> = clean
        .iter()
        .enumerate()
        .map(|(i, c)| apply_occluder(c, &model, &OccluderSpec::legs(i as u64)))
        .collect::<quadfit::Result<_>>()?;

    let bl = model.body_length();
    for variant in Variant::ALL {
        let cfg = TrainConfig { variant, epochs, lr: 1e-3, occlusion_prob: 0.5, ..Default::default() };
        let run = train(&model, &train_set, &cfg)?;
        let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64 / bl;
        println!(
            "{variant:<14} loss {:.3} -> {:.3}; P-MPJPE / body length: clean {:.3}, occluded {:.3}",
            run.trace[0].total,
            run.trace[epochs - 1].total,
            mean(evaluate_pmpjpe(&run.params, &model, &clean)?),
            mean(evaluate_pmpjpe(&run.params, &model, &occluded)?),
        );
        if variant == Variant::ModelFusion {
            let with = predict(&run.params, &clean[0])?;
            let without = predict(&run.params, &clean[0].without_audio())?;
            println!("model fusion without audio gives the same visual pose: {}", with.pose == without.pose);
        }
    }
    Ok(())
}
