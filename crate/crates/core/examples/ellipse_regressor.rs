//! Fits the ellipse regressor with both objectives and compares the mean
//! overlap against simply inscribing an ellipse in the detection box.

use gridloss::data::{synth_generate, Jitter, SynthConfig};
use gridloss::regressor::*;

fn mean_overlap(model: Option<&RegressorModel>, test: &[RegressorSample]) -> gridloss::Result<f64> {
    let mut total = 0.0;
    for s in test {
        let e = match model {
            Some(m) => regress(m, &s.input)?,
            None => Ellipse::inscribed(&PATCH_FACE),
        };
        total += overlap_voc(&Shape::Ellipse(e), &Shape::Ellipse(s.gt));
    }
    Ok(total / test.len() as f64)
}

fn main() -> gridloss::Result<()> {
    let data = synth_generate(&SynthConfig { num_pos: 120, num_neg: 0, ..SynthConfig::default() })?;
    let train = regressor_samples(&data.train_images, 2, Jitter::REGRESSOR, 1)?;
    let test = regressor_samples(&data.test_images, 2, Jitter::REGRESSOR, 2)?;
    println!("{} training and {} test windows", train.len(), test.len());
    println!("inscribed ellipse: {:.4}", mean_overlap(None, &test)?);
    for loss in [RegressorLoss::Sse, RegressorLoss::Num] {
        let cfg = RegressorConfig { loss, epochs: 6, ..RegressorConfig::default() };
        let (m, hist) = train_regressor_with_history(&train, &cfg)?;
        println!(
            "{loss}: train loss {:.4} -> {:.4}, test overlap {:.4}",
            hist[0],
            hist[hist.len() - 1],
            mean_overlap(Some(&m), &test)?
        );
    }
    Ok(())
}
