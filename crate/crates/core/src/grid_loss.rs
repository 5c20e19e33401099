//! Grid loss: the last convolution map is cut into non-overlapping spatial
//! blocks, each block gets its own linear classifier with a hinge loss of
//! margin `1/N`, and a holistic hinge loss is applied to the sum of the
//! block scores.
//!
//! Because the holistic classifier is exactly the concatenation of the
//! block weight vectors (with the block biases summed), the trained layer
//! folds back into one ordinary linear classifier:
//!
//! ```text
//! l = max(0, 1 - y (w.x + b)) + lambda * sum_i max(0, 1/N - y (w_i.f_i + b_i))
//! w = [w_1 .. w_N],  b = sum_i b_i
//! ```

use std::ops::Range;

use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

/// Block layout over an `f x r x c` feature map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    /// Block side length in cells.
    pub n: usize,
    pub f: usize,
    pub r: usize,
    pub c: usize,
    /// Weight of the local (per-block) terms.
    pub lambda: f64,
}

impl GridSpec {
    pub fn new(n: usize, f: usize, r: usize, c: usize, lambda: f64) -> Result<Self> {
        if n == 0 || f == 0 || r == 0 || c == 0 {
            return invalid(format!("grid dims must be positive (n={n}, f={f}, r={r}, c={c})"));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return invalid(format!("lambda must be finite and non-negative, got {lambda}"));
        }
        Ok(GridSpec { n, f, r, c, lambda })
    }

    pub fn block_rows(&self) -> usize {
        self.r.div_ceil(self.n)
    }

    pub fn block_cols(&self) -> usize {
        self.c.div_ceil(self.n)
    }

    /// `N = ceil(r/n) * ceil(c/n)`.
    pub fn num_blocks(&self) -> usize {
        self.block_rows() * self.block_cols()
    }

    /// Per-block margin `1/N`.
    pub fn margin(&self) -> f64 {
        1.0 / self.num_blocks() as f64
    }

    pub fn map_len(&self) -> usize {
        self.f * self.r * self.c
    }

    /// Row and column ranges of block `i` (row-major block order). Edge
    /// blocks take whatever cells remain.
    pub fn block_extent(&self, i: usize) -> (Range<usize>, Range<usize>) {
        let (bi, bj) = (i / self.block_cols(), i % self.block_cols());
        let rows = bi * self.n..((bi + 1) * self.n).min(self.r);
        let cols = bj * self.n..((bj + 1) * self.n).min(self.c);
        (rows, cols)
    }

    pub fn block_len(&self, i: usize) -> usize {
        let (rows, cols) = self.block_extent(i);
        self.f * rows.len() * cols.len()
    }

    /// Flat map indices (`[f, r, c]` row-major) covered by block `i`, in the
    /// order the block vector is laid out: channel, then row, then column.
    pub fn block_indices(&self, i: usize) -> Vec<usize> {
        let (rows, cols) = self.block_extent(i);
        let mut out = Vec::with_capacity(self.block_len(i));
        for ch in 0..self.f {
            for row in rows.clone() {
                for col in cols.clone() {
                    out.push((ch * self.r + row) * self.c + col);
                }
            }
        }
        out
    }

    fn check_map(&self, x: &Tensor) -> Result<()> {
        if x.shape() != [self.f, self.r, self.c] {
            return shape_err(format!(
                "feature map {:?} does not match grid [{}, {}, {}]",
                x.shape(),
                self.f,
                self.r,
                self.c
            ));
        }
        Ok(())
    }
}

/// Vectorizes each `f x n x n` block of `x` (edge blocks may be smaller).
pub fn partition_blocks(x: &Tensor, n: usize) -> Result<Vec<Vec<f64>>> {
    let (f, r, c) = x.dims3()?;
    let spec = GridSpec::new(n, f, r, c, 0.0)?;
    Ok((0..spec.num_blocks())
        .map(|i| spec.block_indices(i).into_iter().map(|k| x.data()[k]).collect())
        .collect())
}

/// Per-block linear classifiers over a partitioned feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct GridClassifier {
    pub spec: GridSpec,
    pub block_weights: Vec<Vec<f64>>,
    pub block_biases: Vec<f64>,
}

/// Value of the combined objective and its parts for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub holistic_term: f64,
    pub local_terms: Vec<f64>,
    pub global_score: f64,
    pub block_scores: Vec<f64>,
}

/// Gradients of the grid loss for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct GridGrads {
    pub block_weights: Vec<Vec<f64>>,
    pub block_biases: Vec<f64>,
    /// Gradient with respect to the feature map, shaped like it.
    pub x: Tensor,
}

/// Folded holistic classifier: one weight per map cell plus one bias.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldedClassifier {
    /// Shape `[f, r, c]`.
    pub weights: Tensor,
    pub bias: f64,
}

impl FoldedClassifier {
    pub fn score(&self, x: &Tensor) -> Result<f64> {
        if x.shape() != self.weights.shape() {
            return shape_err(format!("{:?} vs {:?}", x.shape(), self.weights.shape()));
        }
        Ok(self.weights.dot(x) + self.bias)
    }
}

impl GridClassifier {
    pub fn zeros(spec: GridSpec) -> Self {
        let n = spec.num_blocks();
        GridClassifier {
            spec,
            block_weights: (0..n).map(|i| vec![0.0; spec.block_len(i)]).collect(),
            block_biases: vec![0.0; n],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.spec.num_blocks();
        if self.block_weights.len() != n || self.block_biases.len() != n {
            return shape_err(format!("grid classifier needs {n} blocks"));
        }
        for (i, w) in self.block_weights.iter().enumerate() {
            if w.len() != self.spec.block_len(i) {
                return shape_err(format!(
                    "block {i} has {} weights, expected {}",
                    w.len(),
                    self.spec.block_len(i)
                ));
            }
        }
        Ok(())
    }

    pub fn block_scores(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.spec.check_map(x)?;
        let data = x.data();
        Ok((0..self.spec.num_blocks())
            .map(|i| {
                let idx = self.spec.block_indices(i);
                let w = &self.block_weights[i];
                self.block_biases[i] + idx.iter().zip(w).map(|(&k, wv)| wv * data[k]).sum::<f64>()
            })
            .collect())
    }

    /// Evaluates the combined holistic + local hinge objective.
    pub fn forward(&self, x: &Tensor, y: f64) -> Result<LossBreakdown> {
        let block_scores = self.block_scores(x)?;
        let global_score: f64 = block_scores.iter().sum();
        let m = self.spec.margin();
        let holistic_term = (1.0 - y * global_score).max(0.0);
        let local_terms: Vec<f64> = block_scores.iter().map(|s| (m - y * s).max(0.0)).collect();
        let total = holistic_term + self.spec.lambda * local_terms.iter().sum::<f64>();
        Ok(LossBreakdown {
            total,
            holistic_term,
            local_terms,
            global_score,
            block_scores,
        })
    }

    /// Subgradient of [`GridClassifier::forward`]'s total, zero at hinge kinks.
    pub fn backward(&self, x: &Tensor, y: f64) -> Result<GridGrads> {
        self.backward_scaled(x, y, 1.0)
    }

    /// Backward pass of `scale * total`.
    pub fn backward_scaled(&self, x: &Tensor, y: f64, scale: f64) -> Result<GridGrads> {
        let fwd = self.forward(x, y)?;
        let spec = &self.spec;
        let m = spec.margin();
        let holistic_active = 1.0 - y * fwd.global_score > 0.0;
        let data = x.data();
        let mut gx = vec![0.0; data.len()];
        let mut gw = Vec::with_capacity(spec.num_blocks());
        let mut gb = Vec::with_capacity(spec.num_blocks());
        for i in 0..spec.num_blocks() {
            // d total / d s_i
            let mut coef = 0.0;
            if holistic_active {
                coef -= y;
            }
            if spec.lambda != 0.0 && m - y * fwd.block_scores[i] > 0.0 {
                coef -= spec.lambda * y;
            }
            coef *= scale;
            let idx = spec.block_indices(i);
            let w = &self.block_weights[i];
            if coef == 0.0 {
                gw.push(vec![0.0; idx.len()]);
            } else {
                gw.push(idx.iter().map(|&k| coef * data[k]).collect());
                for (&k, wv) in idx.iter().zip(w) {
                    gx[k] += coef * wv;
                }
            }
            gb.push(coef);
        }
        Ok(GridGrads {
            block_weights: gw,
            block_biases: gb,
            x: Tensor::from_vec(x.shape(), gx)?,
        })
    }

    /// Concatenates the block weights back into map layout and sums the
    /// biases. The result scores any input exactly as `forward` does.
    pub fn fold_back(&self) -> FoldedClassifier {
        let spec = &self.spec;
        let mut w = vec![0.0; spec.map_len()];
        for i in 0..spec.num_blocks() {
            for (&k, &v) in spec.block_indices(i).iter().zip(&self.block_weights[i]) {
                w[k] = v;
            }
        }
        FoldedClassifier {
            weights: Tensor::from_vec(&[spec.f, spec.r, spec.c], w).expect("grid spec dims are positive"),
            bias: self.block_biases.iter().sum(),
        }
    }

    /// Inverse of [`GridClassifier::fold_back`] for a given block layout.
    /// The folded bias is split evenly over the blocks.
    pub fn from_folded(folded: &FoldedClassifier, spec: GridSpec) -> Result<Self> {
        spec.check_map(&folded.weights)?;
        let n = spec.num_blocks();
        Ok(GridClassifier {
            spec,
            block_weights: (0..n)
                .map(|i| spec.block_indices(i).into_iter().map(|k| folded.weights.data()[k]).collect())
                .collect(),
            block_biases: vec![folded.bias / n as f64; n],
        })
    }

    pub fn num_params(&self) -> usize {
        self.block_weights.iter().map(Vec::len).sum::<usize>() + self.block_biases.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn classifier_with_scores(scores: &[f64], lambda: f64) -> (GridClassifier, Tensor) {
        // 1 channel, 2x2 map, 1x1 blocks: block i sees cell i with weight 1.
        let spec = GridSpec::new(1, 1, 2, 2, lambda).unwrap();
        let mut g = GridClassifier::zeros(spec);
        for w in &mut g.block_weights {
            w[0] = 1.0;
        }
        (g, Tensor::from_vec(&[1, 2, 2], scores.to_vec()).unwrap())
    }

    #[test]
    fn exact_tiling() {
        let x = Tensor::filled(&[3, 4, 4], 1.0);
        let blocks = partition_blocks(&x, 2).unwrap();
        assert_eq!(blocks.len(), 4);
        assert!(blocks.iter().all(|b| b.len() == 12));
    }

    #[test]
    fn ragged_tiling() {
        let spec = GridSpec::new(2, 1, 5, 5, 1.0).unwrap();
        assert_eq!(spec.num_blocks(), 9);
        let (rows, cols) = spec.block_extent(8);
        assert_eq!((rows.len(), cols.len()), (1, 1));
        let mut seen = vec![0; spec.map_len()];
        for i in 0..spec.num_blocks() {
            for k in spec.block_indices(i) {
                seen[k] += 1;
            }
        }
        assert!(seen.iter().all(|&s| s == 1));
        assert!((spec.margin() - 1.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn single_block_is_whole_map() {
        let x = Tensor::from_vec(&[2, 3, 3], (0..18).map(f64::from).collect()).unwrap();
        let blocks = partition_blocks(&x, 7).unwrap();
        assert_eq!(blocks.len(), 1);
        assert_eq!(blocks[0], x.data());
    }

    #[test]
    fn hand_evaluated_loss() {
        let (g, x) = classifier_with_scores(&[0.5, 0.3, -0.1, 0.4], 1.0);
        let l = g.forward(&x, 1.0).unwrap();
        assert!((l.global_score - 1.1).abs() < 1e-12);
        assert_eq!(l.holistic_term, 0.0);
        let want = [0.0, 0.0, 0.35, 0.0];
        for (a, b) in l.local_terms.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((l.total - 0.35).abs() < 1e-12);
    }

    #[test]
    fn satisfied_negative_has_zero_loss() {
        let (g, x) = classifier_with_scores(&[-0.5, -0.3, -0.25, -0.4], 1.0);
        let l = g.forward(&x, -1.0).unwrap();
        assert_eq!(l.total, 0.0);
        let grads = g.backward(&x, -1.0).unwrap();
        assert!(grads.block_biases.iter().all(|&v| v == 0.0));
        assert!(grads.x.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn only_active_part_gets_gradient() {
        let (g, x) = classifier_with_scores(&[0.5, 0.3, -0.1, 0.4], 1.0);
        let grads = g.backward(&x, 1.0).unwrap();
        assert_eq!(grads.block_biases, vec![0.0, 0.0, -1.0, 0.0]);
        assert_eq!(grads.x.data(), [0.0, 0.0, -1.0, 0.0]);
        assert_eq!(grads.block_weights[2], vec![0.1]);
        assert_eq!(grads.block_weights[0], vec![0.0]);
    }

    #[test]
    fn fold_back_trivial_cases() {
        let spec = GridSpec::new(4, 2, 3, 3, 1.0).unwrap();
        let mut g = GridClassifier::zeros(spec);
        g.block_weights[0] = (0..18).map(|v| v as f64 * 0.1).collect();
        g.block_biases[0] = 0.3;
        let f = g.fold_back();
        assert_eq!(f.weights.data(), &g.block_weights[0][..]);
        assert_eq!(f.bias, 0.3);

        let spec = GridSpec::new(1, 1, 2, 2, 1.0).unwrap();
        let mut g = GridClassifier::zeros(spec);
        g.block_biases = vec![0.1; 4];
        let f = g.fold_back();
        assert!(f.weights.data().iter().all(|&v| v == 0.0));
        assert!((f.bias - 0.4).abs() < 1e-15);
    }

    #[test]
    fn from_folded_inverts_fold_back_weights() {
        let spec = GridSpec::new(2, 2, 5, 3, 1.0).unwrap();
        let mut g = GridClassifier::zeros(spec);
        for (i, w) in g.block_weights.iter_mut().enumerate() {
            for (k, v) in w.iter_mut().enumerate() {
                *v = (i * 31 + k) as f64 * 0.01;
            }
        }
        let back = GridClassifier::from_folded(&g.fold_back(), spec).unwrap();
        assert_eq!(back.block_weights, g.block_weights);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let g = GridClassifier::zeros(GridSpec::new(2, 1, 4, 4, 1.0).unwrap());
        assert!(g.forward(&Tensor::zeros(&[1, 4, 5]), 1.0).is_err());
        assert!(GridSpec::new(0, 1, 4, 4, 1.0).is_err());
    }
}
