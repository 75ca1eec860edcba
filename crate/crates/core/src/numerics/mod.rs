//! Dense linear algebra and the numeric primitives everything else builds on.

mod gradcheck;
mod mat;
mod ops;
mod optim;
mod rng;

pub use gradcheck::{grad_check, GradCheckReport};
pub use mat::{dot, sq_dist, Mat};
pub use ops::{cv_squared, cv_squared_grad, normal_cdf, normal_pdf, softmax};
pub(crate) use ops::{softmax_backward, softmax_in_place};
pub use optim::{adamw_step, AdamWConfig, OptState};
pub use rng::{Seeds, Stream, StreamRng};

use sha2::{Digest, Sha256};

/// A structured collection of named parameter matrices.
///
/// The same type doubles as its own gradient container: `zeroed()` gives a
/// gradient accumulator with identical layout, and [`visit`](Parameters::visit)
/// order is the canonical flattening order used by the optimizer, the
/// checkpoint writer and the gradient checker.
pub trait Parameters {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Mat));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Mat));

    fn zeroed(&self) -> Self
    where
        Self: Clone,
    {
        let mut z = self.clone();
        z.visit_mut(&mut |_, m| m.fill(0.0));
        z
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, m| n += m.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit(&mut |_, m| out.extend_from_slice(m.data()));
        out
    }

    /// Overwrites every entry from `flat` in visit order.
    fn assign_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        self.visit_mut(&mut |_, m| {
            let n = m.len();
            m.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        });
        assert_eq!(off, flat.len(), "assign_flat length");
    }

    fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |n, _| out.push(n.to_string()));
        out
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, m| ok &= m.is_finite());
        ok
    }

    /// SHA-256 over names, shapes and little-endian `f64` bits.
    fn digest(&self) -> String {
        let mut h = Sha256::new();
        self.visit(&mut |name, m| {
            h.update(name.as_bytes());
            h.update((m.rows() as u64).to_le_bytes());
            h.update((m.cols() as u64).to_le_bytes());
            for x in m.data() {
                h.update(x.to_le_bytes());
            }
        });
        hex::encode(h.finalize())
    }
}

/// Uniform in `±sqrt(3 / fan_in)`, i.e. unit-variance-preserving for a
/// linear map applied to unit-variance inputs.
pub fn scaled_uniform(rows: usize, cols: usize, fan_in: usize, rng: &mut impl rand::Rng) -> Mat {
    let a = (3.0 / fan_in.max(1) as f64).sqrt();
    Mat::from_fn(rows, cols, |_, _| rng.random_range(-a..a))
}
