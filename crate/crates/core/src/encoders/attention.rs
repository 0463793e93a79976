use crate::autograd::Tensor;

/// Temporal attention weights laid out `[batch, G, T, spatial...]`, with the
/// `[batch, T]` mask they were computed under.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps {
    pub weights: Tensor,
    pub mask: Vec<bool>,
}

impl AttentionMaps {
    pub fn new(weights: Tensor, mask: Vec<bool>) -> Self {
        assert!(weights.rank() >= 3, "attention maps are [batch, G, T, ...]");
        let s = weights.shape();
        assert_eq!(mask.len(), s[0] * s[2], "mask must be [batch, T]");
        Self { weights, mask }
    }

    pub fn heads(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn steps(&self) -> usize {
        self.weights.shape()[2]
    }

    fn spatial(&self) -> usize {
        self.weights.shape()[3..].iter().product()
    }

    /// Largest `|Σ_t a − 1|` over all heads and pixels.
    pub fn max_normalization_error(&self) -> f64 {
        let s = self.weights.shape();
        let (b, g, t, p) = (s[0], s[1], s[2], self.spatial());
        let mut worst: f64 = 0.0;
        for bi in 0..b {
            for gi in 0..g {
                for pi in 0..p {
                    let total: f64 = (0..t)
                        .map(|ti| self.weights.data()[((bi * g + gi) * t + ti) * p + pi])
                        .sum();
                    worst = worst.max((total - 1.0).abs());
                }
            }
        }
        worst
    }

    /// Largest absolute weight at a masked step.
    pub fn max_masked_weight(&self) -> f64 {
        let s = self.weights.shape();
        let (b, g, t, p) = (s[0], s[1], s[2], self.spatial());
        let mut worst: f64 = 0.0;
        for bi in 0..b {
            for ti in (0..t).filter(|&ti| !self.mask[bi * t + ti]) {
                for gi in 0..g {
                    for pi in 0..p {
                        worst = worst.max(self.weights.data()[((bi * g + gi) * t + ti) * p + pi].abs());
                    }
                }
            }
        }
        worst
    }

    pub fn min_weight(&self) -> f64 {
        self.weights.data().iter().copied().fold(f64::INFINITY, f64::min)
    }
}
