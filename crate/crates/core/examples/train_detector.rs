//! Trains a small grid-loss detector on the toy corpus with hard-negative
//! mining, then reports its TPR at a few false-positive counts.

use gridloss::data::{negative_windows, positive_windows, synth_generate, SynthConfig};
use gridloss::detector::{DetectConfig, ModelConfig};
use gridloss::eval::{evaluate_images, tpr_at_fp, MatchMode};
use gridloss::trainer::{train_with_bootstrap, TrainConfig};

fn main() -> gridloss::Result<()> {
    let data = synth_generate(&SynthConfig { num_pos: 150, num_neg: 30, ..SynthConfig::default() })?;
    let pos = positive_windows(&data.train_images)?;
    let neg = negative_windows(&data.train_images, 8, 0)?;
    let neg_images: Vec<_> = data.train_images.iter().filter(|i| i.faces.is_empty()).map(|i| i.image.clone()).collect();
    println!("{} positive and {} negative windows", pos.len(), neg.len());

    let cfg = TrainConfig {
        epochs: 3,
        bootstrap_rounds: 1,
        negatives_per_round: 500,
        model: ModelConfig { filters: vec![4, 4], block_n: 4, ..ModelConfig::default() },
        ..TrainConfig::default()
    };
    let (model, report) = train_with_bootstrap(&pos, &neg, &neg_images, &cfg)?;
    for (k, h) in report.history.iter().enumerate() {
        println!("stage {k}: val loss {:?}, kept epoch {}", h.val_loss.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>(), h.best_epoch);
    }
    println!("mined per round: {:?}", report.mined);

    let dc = DetectConfig { score_threshold: f64::NEG_INFINITY, ..DetectConfig::default() };
    let (results, total) = evaluate_images(&model, None, &data.test_images, &dc, MatchMode::Discrete)?;
    let curve = tpr_at_fp(&results, total, &[0, 5, 20, 50]);
    for (fp, tpr) in &curve.points {
        println!("TPR at {fp:>2} FP: {tpr:.3}");
    }
    Ok(())
}
