//! Computes aggregate channel features of a synthetic scene and prints the
//! pyramid it would be scanned over.

use gridloss::data::{synth_generate, SynthConfig};
use gridloss::features::{build_pyramid, compute_channels, PyramidConfig};

const NAMES: [&str; 10] = ["L", "U", "V", "|grad|", "o0", "o1", "o2", "o3", "o4", "o5"];

fn main() -> gridloss::Result<()> {
    let data = synth_generate(&SynthConfig { num_pos: 4, num_neg: 0, ..SynthConfig::default() })?;
    let im = &data.train_images[0];
    let (_, rows, cols) = im.image.dims3()?;
    println!("{} ({rows}x{cols} px, {} faces)", im.path, im.faces.len());

    let ch = compute_channels(&im.image)?;
    let plane = ch.rows() * ch.cols();
    for (k, name) in NAMES.iter().enumerate() {
        let v = &ch.channels.data()[k * plane..(k + 1) * plane];
        let mean = v.iter().sum::<f64>() / plane as f64;
        let max = v.iter().cloned().fold(f64::MIN, f64::max);
        println!("  {name:>6}: mean {mean:.4} max {max:.4}");
    }

    for cfg in [PyramidConfig::default(), PyramidConfig::DENSE] {
        let p = build_pyramid(&im.image, cfg)?;
        let cells: usize = p.levels.iter().map(|l| l.rows() * l.cols()).sum();
        println!("{} scales per octave: {} levels, {cells} cells", cfg.scales_per_octave, p.levels.len());
        for l in p.levels.iter().take(3) {
            println!("  scale {:.3}: {}x{}", l.scale, l.rows(), l.cols());
        }
    }
    Ok(())
}
