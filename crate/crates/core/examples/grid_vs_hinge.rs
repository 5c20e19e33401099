//! Trains a grid-loss and a plain hinge-loss detector on the same windows,
//! then compares recall on partially occluded faces and the correlation of
//! their last-layer activations.

use gridloss::data::{negative_windows, positive_windows, synth_generate, SynthConfig};
use gridloss::detector::{LossKind, ModelConfig};
use gridloss::eval::{model_correlation, occlusion_experiment, positive_crops, CorrelationMode, OcclusionConfig};
use gridloss::trainer::{train, TrainConfig};

fn main() -> gridloss::Result<()> {
    let data = synth_generate(&SynthConfig { num_pos: 200, num_neg: 40, ..SynthConfig::default() })?;
    let pos = positive_windows(&data.train_images)?;
    let neg = negative_windows(&data.train_images, 10, 0)?;
    let cfg = |loss| TrainConfig {
        epochs: 3,
        model: ModelConfig { loss, block_n: 4, ..ModelConfig::default() },
        ..TrainConfig::default()
    };
    let grid = train(&pos, &neg, &cfg(LossKind::Grid))?;
    let hinge = train(&pos, &neg, &cfg(LossKind::Hinge))?;

    let test_pos: Vec<_> = data.test_images.iter().filter(|i| !i.faces.is_empty()).cloned().collect();
    let anchors: Vec<_> = data.test_images.iter().filter(|i| i.faces.is_empty()).map(|i| i.image.clone()).collect();
    let crops = positive_crops(&test_pos)?;
    for fraction in [0.0, 0.3, 0.5] {
        let oc = OcclusionConfig { fraction, ..OcclusionConfig::default() };
        let (g, h) = occlusion_experiment(&grid, &hinge, &crops, &anchors, &oc)?;
        println!("occluded {fraction:.1}: grid recall {g:.3}, hinge recall {h:.3}");
    }

    let windows = positive_windows(&test_pos)?;
    let cg = model_correlation(&grid, &windows, CorrelationMode::PerLocation)?;
    let ch = model_correlation(&hinge, &windows, CorrelationMode::PerLocation)?;
    println!("sum of |corr| over filter pairs: grid {cg:.3}, hinge {ch:.3}");
    Ok(())
}
