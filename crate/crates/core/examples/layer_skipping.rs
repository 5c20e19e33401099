//! Times dense scanning (8 scales per octave) against computing only 2 and
//! resampling the rest, on a VGA-sized scene.

use gridloss::cli::{bench_image, time_detection};
use gridloss::detector::{DetectConfig, DetectorModel, ModelConfig};
use gridloss::features::{level_count, PyramidConfig};

fn main() -> gridloss::Result<()> {
    let image = bench_image(640, 480, 0)?;
    let mut model = DetectorModel::new(ModelConfig::default())?;
    model.fold();
    let mut secs = Vec::new();
    for spo in [8, 2] {
        let pyramid = PyramidConfig { scales_per_octave: spo, ..PyramidConfig::default() };
        let cfg = DetectConfig { pyramid, ..DetectConfig::default() };
        let t = time_detection(&image, &model, &cfg, 3)?;
        println!("{spo} scales per octave: {} levels, {:.3} s", level_count(480, 640, pyramid), t);
        secs.push(t);
    }
    println!("speed-up {:.2}x", secs[0] / secs[1]);
    Ok(())
}
