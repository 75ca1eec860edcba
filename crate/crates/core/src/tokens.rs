use crate::error::{ComeError, Result};
use crate::numerics::Mat;

/// Token features for a batch of samples, with the source of every token.
///
/// Rows are grouped by sample: rows `[s·T, (s+1)·T)` belong to sample `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub features: Mat,
    pub sources: Vec<usize>,
    pub tokens_per_sample: usize,
}

impl TokenBatch {
    pub fn new(features: Mat, sources: Vec<usize>, tokens_per_sample: usize) -> Result<Self> {
        if sources.len() != features.rows() {
            return Err(ComeError::shape(
                "TokenBatch::new",
                format!("{} source ids", features.rows()),
                sources.len(),
            ));
        }
        if tokens_per_sample == 0 || !features.rows().is_multiple_of(tokens_per_sample) {
            return Err(ComeError::InvalidArgument(format!(
                "{} tokens do not split into samples of {tokens_per_sample}",
                features.rows()
            )));
        }
        Ok(TokenBatch {
            features,
            sources,
            tokens_per_sample,
        })
    }

    /// A batch where every token is its own sample and has source 0.
    pub fn unlabeled(features: Mat) -> Self {
        let n = features.rows();
        TokenBatch {
            features,
            sources: vec![0; n],
            tokens_per_sample: 1,
        }
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn width(&self) -> usize {
        self.features.cols()
    }

    pub fn samples(&self) -> usize {
        self.len() / self.tokens_per_sample
    }

    /// Same sources and grouping, new features.
    pub fn with_features(&self, features: Mat) -> TokenBatch {
        debug_assert_eq!(features.rows(), self.len());
        TokenBatch {
            features,
            sources: self.sources.clone(),
            tokens_per_sample: self.tokens_per_sample,
        }
    }
}
