//! Trains nothing: builds a random per-block classifier, folds it into one
//! holistic classifier and checks the two score every map identically.

use gridloss::grid_loss::{GridClassifier, GridSpec};
use gridloss::rng;
use gridloss::tensor::Tensor;
use rand::Rng;

fn main() -> gridloss::Result<()> {
    let spec = GridSpec::new(4, 8, 12, 12, 1.0)?;
    let mut r = rng::rng(7, 0);
    let mut g = GridClassifier::zeros(spec);
    for w in &mut g.block_weights {
        w.iter_mut().for_each(|v| *v = r.random_range(-1.0..1.0));
    }
    g.block_biases.iter_mut().for_each(|b| *b = r.random_range(-1.0..1.0));
    println!("{} blocks of {} weights, margin {:.4}", spec.num_blocks(), spec.block_len(0), spec.margin());

    let folded = g.fold_back();
    let x = Tensor::from_vec(&[8, 12, 12], (0..8 * 144).map(|_| r.random_range(0.0..1.0)).collect())?;
    let blocks: f64 = g.block_scores(&x)?.iter().sum();
    let whole = folded.score(&x)?;
    println!("sum of block scores {blocks:.12}");
    println!("folded score        {whole:.12}");

    let parts = g.forward(&x, 1.0)?;
    println!(
        "positive-label loss {:.4} = holistic {:.4} + local {:?}",
        parts.total,
        parts.holistic_term,
        parts.local_terms.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>()
    );
    Ok(())
}
