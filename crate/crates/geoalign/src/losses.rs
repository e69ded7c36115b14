//! The training objectives: symmetric global contrastive alignment,
//! region-phrase alignment, hard-negative alignment, visual intra-view
//! consistency, hierarchical textual consistency, and their weighted
//! two-stage composition.
//!
//! Every loss takes raw (un-normalized) embeddings and normalizes
//! internally, so cosine similarity is a plain dot product of unit rows.

use serde::{Deserialize, Serialize};

use crate::autograd::{Result, Tape, Tensor, TensorError};

const NORM_EPS: f64 = 1e-8;
const DUP_MASK_NEG: f64 = -1e30;

/// All embeddings entering the objective for one batch.
///
/// `t_neg` packs, per region, the positive phrase embedding at slot 0
/// followed by its hard negatives. `tau` is the already-clamped scalar
/// temperature (a tape leaf during training so its gradient reaches the
/// log-temperature parameter).
#[derive(Debug, Clone)]
pub struct BatchEmbeddings {
    pub v_g: Tensor,
    pub t_b: Tensor,
    pub t_d: Tensor,
    pub v_r: Tensor,
    pub t_r: Tensor,
    pub t_neg: Tensor,
    pub v_crop: Tensor,
    pub tau: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "stage1")]
    StageI,
    #[serde(rename = "stage2")]
    StageII,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage::StageI => write!(f, "stage1"),
            Stage::StageII => write!(f, "stage2"),
        }
    }
}

/// Term weights with stage gating.
///
/// Stage I trains only the global term. Stage II trains the region and
/// consistency terms and by default drops the standalone global term
/// because the hierarchical objective already contains the same
/// brief-caption alignment; `keep_global` reinstates it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossWeights {
    pub stage: Stage,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
    /// Mask denominator rows whose target embedding duplicates the positive
    /// (identical phrases in one batch) out of the region-phrase softmax.
    pub mask_duplicate_phrases: bool,
}

impl LossWeights {
    pub fn stage_i() -> Self {
        LossWeights {
            stage: Stage::StageI,
            lambda1: 1.0,
            lambda2: 0.0,
            lambda3: 0.0,
            lambda4: 0.0,
            lambda5: 0.0,
            mask_duplicate_phrases: true,
        }
    }

    pub fn stage_ii(keep_global: bool) -> Self {
        LossWeights {
            stage: Stage::StageII,
            lambda1: if keep_global { 1.0 } else { 0.0 },
            lambda2: 1.0,
            lambda3: 1.0,
            lambda4: 1.0,
            lambda5: 1.0,
            mask_duplicate_phrases: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ls = [
            self.lambda1,
            self.lambda2,
            self.lambda3,
            self.lambda4,
            self.lambda5,
        ];
        if ls.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(TensorError::InvalidArg {
                op: "loss_weights",
                msg: format!("negative or non-finite lambda in {ls:?}"),
            });
        }
        Ok(())
    }
}

/// Unweighted per-term values plus the weighted total, for step logging.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub global: f64,
    pub rpa: f64,
    pub hna: f64,
    pub vic: f64,
    pub htc: f64,
}

fn rows_of(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [n, d] => Ok((*n, *d)),
        sh => Err(TensorError::InvalidShape {
            op,
            shape: sh.to_vec(),
            expected: "rank-2 [n, d] embedding matrix".into(),
        }),
    }
}

/// Logits for both softmax directions: cosine similarities over temperature,
/// with an optional symmetric additive mask.
fn similarity_logits(
    tape: &Tape,
    a: &Tensor,
    b: &Tensor,
    tau: &Tensor,
    mask: Option<&Tensor>,
) -> Result<Tensor> {
    let a_n = tape.l2_normalize_rows(a, NORM_EPS)?;
    let b_n = tape.l2_normalize_rows(b, NORM_EPS)?;
    let sims = tape.matmul(&a_n, &tape.transpose(&b_n)?)?;
    let logits = tape.mul_by_scalar_tensor(&sims, &tape.recip(tau)?)?;
    match mask {
        Some(m) => Ok(tape.add(&logits, m)?),
        None => Ok(logits),
    }
}

fn diagonal_mean(tape: &Tape, log_probs: &Tensor) -> Result<Tensor> {
    let n = log_probs.shape()[0];
    let idx: Vec<usize> = (0..n).map(|i| i * n + i).collect();
    let diag = tape.index_select(log_probs, idx, vec![n])?;
    tape.mean_all(&diag)
}

fn info_nce_masked(
    tape: &Tape,
    a: &Tensor,
    b: &Tensor,
    tau: &Tensor,
    mask: Option<&Tensor>,
) -> Result<Tensor> {
    let (n_a, d_a) = rows_of(a, "info_nce_symmetric")?;
    let (n_b, d_b) = rows_of(b, "info_nce_symmetric")?;
    if n_a != n_b || d_a != d_b {
        return Err(TensorError::ShapeMismatch {
            op: "info_nce_symmetric",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    if n_a == 0 {
        return Ok(tape.constant(&Tensor::scalar(0.0)));
    }
    let logits = similarity_logits(tape, a, b, tau, mask)?;
    let fwd = diagonal_mean(tape, &tape.log_softmax_rows(&logits)?)?;
    let bwd = diagonal_mean(tape, &tape.log_softmax_rows(&tape.transpose(&logits)?)?)?;
    tape.mul_scalar(&tape.add(&fwd, &bwd)?, -0.5)
}

/// Symmetric InfoNCE over matched rows of `a` and `b`:
/// `-(1/2n) Σ [log p(bᵢ|aᵢ) + log p(aᵢ|bᵢ)]` with row-softmax over
/// cosine similarity divided by the temperature.
pub fn info_nce_symmetric(tape: &Tape, a: &Tensor, b: &Tensor, tau: &Tensor) -> Result<Tensor> {
    info_nce_masked(tape, a, b, tau, None)
}

/// Symmetric InfoNCE with duplicate-target masking: candidates whose `b`
/// row is bitwise identical to the query's own target are false negatives
/// (identical captions in one batch) and are dropped from the denominator.
pub fn info_nce_dedup(tape: &Tape, a: &Tensor, b: &Tensor, tau: &Tensor) -> Result<Tensor> {
    let mask = duplicate_mask(b);
    info_nce_masked(tape, a, b, tau, mask.as_ref())
}

/// Symmetric additive mask removing duplicate-phrase false negatives:
/// off-diagonal entries whose target rows are bitwise identical.
fn duplicate_mask(t_r: &Tensor) -> Option<Tensor> {
    let (k, d) = (t_r.shape()[0], t_r.shape()[1]);
    let data = t_r.data();
    let mut mask = vec![0.0; k * k];
    let mut any = false;
    for i in 0..k {
        for j in (i + 1)..k {
            let same = data[i * d..(i + 1) * d]
                .iter()
                .zip(&data[j * d..(j + 1) * d])
                .all(|(a, b)| a.to_bits() == b.to_bits());
            if same {
                mask[i * k + j] = DUP_MASK_NEG;
                mask[j * k + i] = DUP_MASK_NEG;
                any = true;
            }
        }
    }
    any.then(|| Tensor::from_vec(vec![k, k], mask).expect("mask shape"))
}

/// Region-phrase alignment: symmetric InfoNCE over the flattened region
/// embeddings and their phrase embeddings. Empty batches contribute zero.
pub fn rpa_loss(
    tape: &Tape,
    v_r: &Tensor,
    t_r: &Tensor,
    tau: &Tensor,
    mask_duplicates: bool,
) -> Result<Tensor> {
    let (k, _) = rows_of(v_r, "rpa_loss")?;
    if k == 0 {
        return Ok(tape.constant(&Tensor::scalar(0.0)));
    }
    let mask = if mask_duplicates {
        duplicate_mask(t_r)
    } else {
        None
    };
    info_nce_masked(tape, v_r, t_r, tau, mask.as_ref())
}

/// Hard-negative alignment: per region, softmax over that region's own
/// candidate set only (positive at slot 0), no cross-region terms.
pub fn hna_loss(tape: &Tape, v_r: &Tensor, t_neg: &Tensor, tau: &Tensor) -> Result<Tensor> {
    let (k, d) = rows_of(v_r, "hna_loss")?;
    let (kn, q, dn) = match t_neg.shape() {
        [k, q, d] => (*k, *q, *d),
        sh => {
            return Err(TensorError::InvalidShape {
                op: "hna_loss",
                shape: sh.to_vec(),
                expected: "rank-3 [K, Q, d] candidate tensor".into(),
            })
        }
    };
    if k == 0 {
        return Ok(tape.constant(&Tensor::scalar(0.0)));
    }
    if kn != k || dn != d {
        return Err(TensorError::ShapeMismatch {
            op: "hna_loss",
            lhs: v_r.shape().to_vec(),
            rhs: t_neg.shape().to_vec(),
        });
    }
    if q < 2 {
        return Err(TensorError::InvalidArg {
            op: "hna_loss",
            msg: format!("Q = {q} candidates, need the positive plus at least one negative"),
        });
    }
    let v_n = tape.l2_normalize_rows(v_r, NORM_EPS)?;
    let c_n = tape.l2_normalize_rows(t_neg, NORM_EPS)?;
    let cand_flat = tape.reshape(&c_n, vec![k * q, d])?;
    let mut per_region = Vec::with_capacity(k);
    for r in 0..k {
        let vk = tape.slice_rows(&v_n, r, r + 1)?;
        let ck = tape.slice_rows(&cand_flat, r * q, (r + 1) * q)?;
        per_region.push(tape.matmul(&vk, &tape.transpose(&ck)?)?);
    }
    let sims = {
        let refs: Vec<&Tensor> = per_region.iter().collect();
        tape.concat_rows(&refs)?
    };
    let logits = tape.mul_by_scalar_tensor(&sims, &tape.recip(tau)?)?;
    let log_probs = tape.log_softmax_rows(&logits)?;
    let positives = tape.index_select(&log_probs, (0..k).map(|r| r * q).collect(), vec![k])?;
    tape.mul_scalar(&tape.mean_all(&positives)?, -1.0)
}

/// Visual intra-view consistency: mean cosine distance between the ROI-view
/// and crop-view embeddings of each region. Range `[0, 2]`.
pub fn vic_loss(tape: &Tape, v_r: &Tensor, v_crop: &Tensor) -> Result<Tensor> {
    let (k, d) = rows_of(v_r, "vic_loss")?;
    let (kc, dc) = rows_of(v_crop, "vic_loss")?;
    if k != kc || d != dc {
        return Err(TensorError::ShapeMismatch {
            op: "vic_loss",
            lhs: v_r.shape().to_vec(),
            rhs: v_crop.shape().to_vec(),
        });
    }
    if k == 0 {
        return Ok(tape.constant(&Tensor::scalar(0.0)));
    }
    let a = tape.l2_normalize_rows(v_r, NORM_EPS)?;
    let b = tape.l2_normalize_rows(v_crop, NORM_EPS)?;
    let cos = tape.row_sum(&tape.mul(&a, &b)?)?;
    let mean_cos = tape.mean_all(&cos)?;
    tape.add_scalar(&tape.neg(&mean_cos)?, 1.0)
}

/// Hierarchical textual consistency: mean of the concise-level and
/// detail-level symmetric InfoNCE terms against the global embedding.
/// `mask_duplicates` applies duplicate-caption masking per level.
pub fn htc_loss(
    tape: &Tape,
    v_g: &Tensor,
    t_b: &Tensor,
    t_d: &Tensor,
    tau: &Tensor,
    mask_duplicates: bool,
) -> Result<Tensor> {
    let nce = if mask_duplicates {
        info_nce_dedup
    } else {
        info_nce_symmetric
    };
    let concise = nce(tape, v_g, t_b, tau)?;
    let detail = nce(tape, v_g, t_d, tau)?;
    tape.mul_scalar(&tape.add(&concise, &detail)?, 0.5)
}

/// Weighted two-stage objective. Terms with zero weight are skipped
/// entirely; the breakdown reports every evaluated term un-weighted.
pub fn total_loss(
    tape: &Tape,
    batch: &BatchEmbeddings,
    weights: &LossWeights,
) -> Result<(Tensor, LossBreakdown)> {
    weights.validate()?;
    let mut total = tape.constant(&Tensor::scalar(0.0));
    let mut breakdown = LossBreakdown {
        total: 0.0,
        global: 0.0,
        rpa: 0.0,
        hna: 0.0,
        vic: 0.0,
        htc: 0.0,
    };
    let add_term = |tape: &Tape,
                        total: &mut Tensor,
                        lambda: f64,
                        term: Tensor,
                        slot: &mut f64|
     -> Result<()> {
        *slot = term.item();
        *total = tape.add(total, &tape.mul_scalar(&term, lambda)?)?;
        Ok(())
    };
    if weights.lambda1 > 0.0 {
        let term = if weights.mask_duplicate_phrases {
            info_nce_dedup(tape, &batch.v_g, &batch.t_b, &batch.tau)?
        } else {
            info_nce_symmetric(tape, &batch.v_g, &batch.t_b, &batch.tau)?
        };
        add_term(tape, &mut total, weights.lambda1, term, &mut breakdown.global)?;
    }
    if weights.lambda2 > 0.0 {
        let term = rpa_loss(
            tape,
            &batch.v_r,
            &batch.t_r,
            &batch.tau,
            weights.mask_duplicate_phrases,
        )?;
        add_term(tape, &mut total, weights.lambda2, term, &mut breakdown.rpa)?;
    }
    if weights.lambda3 > 0.0 {
        let k = batch.v_r.shape()[0];
        let term = if k == 0 {
            tape.constant(&Tensor::scalar(0.0))
        } else {
            hna_loss(tape, &batch.v_r, &batch.t_neg, &batch.tau)?
        };
        add_term(tape, &mut total, weights.lambda3, term, &mut breakdown.hna)?;
    }
    if weights.lambda4 > 0.0 {
        let term = vic_loss(tape, &batch.v_r, &batch.v_crop)?;
        add_term(tape, &mut total, weights.lambda4, term, &mut breakdown.vic)?;
    }
    if weights.lambda5 > 0.0 {
        let term = htc_loss(
            tape,
            &batch.v_g,
            &batch.t_b,
            &batch.t_d,
            &batch.tau,
            weights.mask_duplicate_phrases,
        )?;
        add_term(tape, &mut total, weights.lambda5, term, &mut breakdown.htc)?;
    }
    breakdown.total = total.item();
    Ok((total, breakdown))
}

#[cfg(test)]
#[path = "losses_tests.rs"]
mod tests;
