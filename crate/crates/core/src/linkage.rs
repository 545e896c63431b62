//! Exchangeable linkage error (ELE) model.
//!
//! Within a linkage block every record links to its true counterpart with
//! probability `lambda` and to any specific wrong record of the same
//! (area, block) cell with the common probability
//! `gamma = (1 - lambda) / (N - 1)`. Linkage is impossible across blocks or
//! across areas. Everything in this module is expressed per cell: the cell
//! covariance corrections, the expected permutation rows for sampled units,
//! a permutation sampler whose marginals match the ELE probabilities
//! exactly, and audit-sample estimation of `lambda`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::Result;

/// Correct-linkage probabilities and audit counts for one block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockSpec {
    pub block_id: String,
    /// Correct-linkage probability `lambda` in `[0, 1]`.
    pub lambda: f64,
    /// Variance of an estimated `lambda`, when it was estimated.
    pub var_lambda: Option<f64>,
}

/// A realization of the latent permutation for one cell.
#[derive(Debug, Clone)]
pub struct PermutationDraw {
    /// `perm[j] = k` means observed slot `j` receives the true value of
    /// unit `k`; a bijection on `0..n_pop`.
    pub perm: Vec<usize>,
}

impl PermutationDraw {
    pub fn is_identity(&self) -> bool {
        self.perm.iter().enumerate().all(|(j, &k)| j == k)
    }

    pub fn fixed_points(&self) -> usize {
        self.perm.iter().enumerate().filter(|(j, &k)| *j == k).count()
    }
}

/// Audit counts for one block: `m` verified links of which `correct` were right.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditSample {
    pub block_id: String,
    pub m: usize,
    pub correct: usize,
}

/// Which variance is attached to an audit-estimated `lambda`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaVarianceMode {
    /// No variance: `lambda` treated as known.
    None,
    /// Binomial proportion variance `lambda(1-lambda)/m`.
    Binomial,
    /// Compatibility form scaled by the block sample size instead of the
    /// audit size: `n_q * lambda(1-lambda)`.
    BlockSampleScaled,
}

/// Wrong-link probability `gamma = (1 - lambda) / (N - 1)` for a cell of
/// `n_pop` population units.
///
/// Cells with a single unit admit no wrong link; callers must treat their
/// `lambda` as 1 instead of calling this.
pub fn gamma(lambda: f64, n_pop: usize) -> Result<f64> {
    if n_pop < 2 {
        return Err(Error::DegenerateCell { n_pop });
    }
    Ok((1.0 - lambda) / (n_pop as f64 - 1.0))
}

/// `gamma` with the single-unit cell convention applied: a cell of size one
/// always links correctly, so the wrong-link probability is zero.
pub fn gamma_or_degenerate(lambda: f64, n_pop: usize) -> f64 {
    if n_pop < 2 {
        0.0
    } else {
        (1.0 - lambda) / (n_pop as f64 - 1.0)
    }
}

/// Expected sampled rows of the latent permutation matrix,
/// `T = [(lambda - gamma) I | 0] + gamma 1 1'`, an `n_sample x n_pop`
/// matrix under the convention that the sampled units occupy the first
/// `n_sample` positions of the cell. Every row sums to one.
pub fn expected_sampled_permutation(
    n_sample: usize,
    n_pop: usize,
    lambda: f64,
) -> Result<DMatrix<f64>> {
    if n_sample > n_pop {
        return Err(Error::DimensionMismatch {
            what: "expected_sampled_permutation",
            expected: n_pop,
            got: n_sample,
        });
    }
    let (lam, gam) = if n_pop < 2 {
        (1.0, 0.0)
    } else {
        (lambda, gamma(lambda, n_pop)?)
    };
    let mut t = DMatrix::from_element(n_sample, n_pop, gam);
    for j in 0..n_sample {
        t[(j, j)] += lam - gam;
    }
    Ok(t)
}

/// Linkage-corrected design matrix
/// `X* = (lambda - gamma) X_s + gamma N 1 xbar'`, where `xbar` holds the
/// population column means of the cell. With `lambda = 1` this is the
/// identity map on `X_s`.
pub fn corrected_design(
    x_s: &DMatrix<f64>,
    xbar_pop: &DVector<f64>,
    lambda: f64,
    n_pop: usize,
) -> Result<DMatrix<f64>> {
    if xbar_pop.len() != x_s.ncols() {
        return Err(Error::DimensionMismatch {
            what: "corrected_design",
            expected: x_s.ncols(),
            got: xbar_pop.len(),
        });
    }
    let (lam, gam) = if n_pop < 2 {
        (1.0, 0.0)
    } else {
        (lambda, gamma(lambda, n_pop)?)
    };
    let mut out = x_s * (lam - gam);
    let shift = gam * n_pop as f64;
    for j in 0..out.nrows() {
        for k in 0..out.ncols() {
            out[(j, k)] += shift * xbar_pop[k];
        }
    }
    Ok(out)
}

/// Diagonal of the linkage-error variance approximation for one cell:
/// `v_j = (1 - lambda) (lambda (f_j - fbar)^2 + fbar2 - fbar^2)`,
/// where `fbar` and `fbar2` are the block-level averages of the fitted
/// values and of their squares.
pub fn linkage_variance_diag(
    f_s: &DVector<f64>,
    fbar: f64,
    fbar2: f64,
    lambda: f64,
) -> Result<DVector<f64>> {
    let spread = fbar2 - fbar * fbar;
    if spread < -1e-9 * fbar2.abs().max(1.0) {
        return Err(Error::MomentError {
            fbar2,
            fbar_sq: fbar * fbar,
        });
    }
    let spread = spread.max(0.0);
    Ok(f_s.map(|f| (1.0 - lambda) * (lambda * (f - fbar).powi(2) + spread)))
}

/// Draw a cell permutation consistent with the ELE probabilities.
///
/// Units are marked "mislinked" independently with probability
/// `1 - lambda` and the marked set is rearranged by a uniform random
/// derangement of itself. A marked set of size one is resolved by a fair
/// coin: unmark it, or grow the set by one uniformly chosen unmarked unit.
/// That tie-break keeps the expected number of mislinked units at
/// `N (1 - lambda)` exactly, so `P(perm[j] = j) = lambda` holds without any
/// finite-N edge effect and the off-diagonal marginals equal `gamma`.
pub fn sample_ele_permutation<R: Rng + ?Sized>(
    n_pop: usize,
    lambda: f64,
    rng: &mut R,
) -> PermutationDraw {
    let mut perm: Vec<usize> = (0..n_pop).collect();
    if n_pop < 2 || lambda >= 1.0 {
        return PermutationDraw { perm };
    }
    let mut marked: Vec<usize> = (0..n_pop)
        .filter(|_| rng.gen::<f64>() < 1.0 - lambda)
        .collect();
    if marked.len() == 1 {
        if rng.gen::<f64>() < 0.5 {
            marked.clear();
        } else {
            let lone = marked[0];
            let mut extra = rng.gen_range(0..n_pop - 1);
            if extra >= lone {
                extra += 1;
            }
            marked.push(extra);
        }
    }
    if marked.len() >= 2 {
        let deranged = uniform_derangement(&marked, rng);
        for (slot, src) in marked.iter().zip(deranged.iter()) {
            perm[*slot] = *src;
        }
    }
    PermutationDraw { perm }
}

/// Uniform derangement of `items` by rejection from uniform shuffles;
/// acceptance tends to 1/e, and size two is a forced swap.
fn uniform_derangement<R: Rng + ?Sized>(items: &[usize], rng: &mut R) -> Vec<usize> {
    let k = items.len();
    debug_assert!(k >= 2);
    if k == 2 {
        return vec![items[1], items[0]];
    }
    let mut cand: Vec<usize> = items.to_vec();
    loop {
        // Fisher-Yates shuffle.
        for i in (1..k).rev() {
            let j = rng.gen_range(0..=i);
            cand.swap(i, j);
        }
        if cand.iter().zip(items.iter()).all(|(c, o)| c != o) {
            return cand;
        }
    }
}

/// Per-block audit estimates `lambda_hat = correct / m` with the variance
/// implied by `mode`. The block-sample-scaled mode needs the number of
/// sampled units in the block, supplied through `block_sample_sizes`
/// (matched by position).
pub fn estimate_lambda_audit(
    audits: &[AuditSample],
    mode: LambdaVarianceMode,
    block_sample_sizes: Option<&[usize]>,
) -> Result<Vec<BlockSpec>> {
    audits
        .iter()
        .enumerate()
        .map(|(idx, a)| {
            if a.m == 0 {
                return Err(Error::NoAudit {
                    block: a.block_id.clone(),
                });
            }
            if a.correct > a.m {
                return Err(Error::InvalidInput(format!(
                    "block {}: correct links {} exceed audit size {}",
                    a.block_id, a.correct, a.m
                )));
            }
            let lambda = a.correct as f64 / a.m as f64;
            let var = match mode {
                LambdaVarianceMode::None => None,
                LambdaVarianceMode::Binomial => Some(lambda * (1.0 - lambda) / a.m as f64),
                LambdaVarianceMode::BlockSampleScaled => {
                    let n_q = block_sample_sizes
                        .and_then(|s| s.get(idx))
                        .copied()
                        .ok_or_else(|| {
                            Error::InvalidInput(format!(
                                "block {}: block sample size required for the scaled variance",
                                a.block_id
                            ))
                        })?;
                    Some(n_q as f64 * lambda * (1.0 - lambda))
                }
            };
            Ok(BlockSpec {
                block_id: a.block_id.clone(),
                lambda,
                var_lambda: var,
            })
        })
        .collect()
}
