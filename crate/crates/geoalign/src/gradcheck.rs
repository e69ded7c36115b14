//! Central-finite-difference gradient checking.
//!
//! Every differentiable operation and loss in this crate is validated
//! against this harness; it is also what the `gradcheck` CLI subcommand
//! runs. The function under test is re-executed on a fresh tape for every
//! probe, so the analytic path and the numeric path stay independent.

use rand::Rng;

use crate::autograd::{Result, Tape, Tensor};
use crate::losses::{
    hna_loss, htc_loss, info_nce_symmetric, rpa_loss, total_loss, vic_loss, BatchEmbeddings,
    LossWeights,
};
use crate::rng::{randn_tensor, stream_rng};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Default maximum relative error.
pub const FD_TOL: f64 = 1e-5;
/// Relative errors are measured against `max(|analytic|, |numeric|, floor)`
/// so near-zero gradients are compared at a sensible absolute scale.
pub const REL_FLOOR: f64 = 1e-3;

/// A scalar-valued function of several tensor inputs, expressed with tape
/// ops. The harness decides which inputs are watched.
pub type ScalarFn<'a> = &'a dyn Fn(&Tape, &[Tensor]) -> Result<Tensor>;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// (input index, element index) of the worst element.
    pub worst: (usize, usize),
}

impl GradCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Compare analytic gradients of `f` w.r.t. every input against central
/// finite differences with step `h`.
pub fn check_gradients(f: ScalarFn, inputs: &[Tensor], h: f64) -> Result<GradCheck> {
    let tape = Tape::new();
    let watched: Vec<Tensor> = inputs.iter().map(|t| tape.watch(t)).collect();
    let root = f(&tape, &watched)?;
    if !root.is_scalar() {
        return Err(crate::autograd::TensorError::NonScalarRoot {
            shape: root.shape().to_vec(),
        });
    }
    let grads = tape.backward(&root)?;

    let mut max_rel_err = 0.0;
    let mut worst = (0, 0);
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(&watched[i]);
        for j in 0..input.numel() {
            let fd = central_diff(f, inputs, i, j, h)?;
            let an = analytic.map_or(0.0, |g| g.data()[j]);
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(REL_FLOOR);
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = (i, j);
            }
        }
    }
    Ok(GradCheck { max_rel_err, worst })
}

fn central_diff(f: ScalarFn, inputs: &[Tensor], i: usize, j: usize, h: f64) -> Result<f64> {
    let plus = eval_perturbed(f, inputs, i, j, h)?;
    let minus = eval_perturbed(f, inputs, i, j, -h)?;
    Ok((plus - minus) / (2.0 * h))
}

fn eval_perturbed(f: ScalarFn, inputs: &[Tensor], i: usize, j: usize, delta: f64) -> Result<f64> {
    let mut probe: Vec<Tensor> = inputs.to_vec();
    let mut data = probe[i].data().to_vec();
    data[j] += delta;
    probe[i] = Tensor::from_vec(probe[i].shape().to_vec(), data)?;
    let tape = Tape::new();
    let root = f(&tape, &probe)?;
    Ok(root.item())
}

// ── loss gradient suite ─────────────────────────────────────────────────

/// The losses whose gradients the suite verifies against finite
/// differences, with respect to every embedding tensor and the temperature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Global,
    Rpa,
    Hna,
    Vic,
    Htc,
    Total,
}

impl LossKind {
    pub fn all() -> [LossKind; 6] {
        [
            LossKind::Global,
            LossKind::Rpa,
            LossKind::Hna,
            LossKind::Vic,
            LossKind::Htc,
            LossKind::Total,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Global => "global",
            LossKind::Rpa => "rpa",
            LossKind::Hna => "hna",
            LossKind::Vic => "vic",
            LossKind::Htc => "htc",
            LossKind::Total => "total",
        }
    }

    pub fn parse(s: &str) -> Option<LossKind> {
        LossKind::all().into_iter().find(|k| k.name() == s)
    }
}

/// Result of one loss's gradient check over many random instances.
#[derive(Debug, Clone)]
pub struct LossGradReport {
    pub name: &'static str,
    pub trials: usize,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl LossGradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

fn random_tau(rng: &mut impl Rng) -> Tensor {
    Tensor::scalar(rng.gen_range(0.05..0.9))
}

/// Check one loss on `trials` random instances with dims drawn from
/// N ≤ 4, K ≤ 3, Q ≤ 4, d ≤ 8.
pub fn check_loss(kind: LossKind, trials: usize, seed: u64) -> Result<LossGradReport> {
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let mut rng = stream_rng(seed, &format!("gradcheck.{}", kind.name()), trial as u64);
        let n = rng.gen_range(1..=4);
        let k = rng.gen_range(1..=3);
        let q = rng.gen_range(2..=4);
        let d = rng.gen_range(2..=8);
        let emb = |rng: &mut rand_chacha::ChaCha8Rng, rows: usize| {
            randn_tensor(rng, &[rows, d], 1.0)
        };
        let check = match kind {
            LossKind::Global => check_gradients(
                &|t, xs| info_nce_symmetric(t, &xs[0], &xs[1], &xs[2]),
                &[emb(&mut rng, n), emb(&mut rng, n), random_tau(&mut rng)],
                FD_STEP,
            )?,
            LossKind::Rpa => check_gradients(
                &|t, xs| rpa_loss(t, &xs[0], &xs[1], &xs[2], true),
                &[emb(&mut rng, k), emb(&mut rng, k), random_tau(&mut rng)],
                FD_STEP,
            )?,
            LossKind::Hna => check_gradients(
                &|t, xs| hna_loss(t, &xs[0], &xs[1], &xs[2]),
                &[
                    emb(&mut rng, k),
                    randn_tensor(&mut rng, &[k, q, d], 1.0),
                    random_tau(&mut rng),
                ],
                FD_STEP,
            )?,
            LossKind::Vic => check_gradients(
                &|t, xs| vic_loss(t, &xs[0], &xs[1]),
                &[emb(&mut rng, k), emb(&mut rng, k)],
                FD_STEP,
            )?,
            LossKind::Htc => check_gradients(
                &|t, xs| htc_loss(t, &xs[0], &xs[1], &xs[2], &xs[3], true),
                &[
                    emb(&mut rng, n),
                    emb(&mut rng, n),
                    emb(&mut rng, n),
                    random_tau(&mut rng),
                ],
                FD_STEP,
            )?,
            LossKind::Total => {
                let weights = LossWeights {
                    mask_duplicate_phrases: true,
                    ..LossWeights::stage_ii(true)
                };
                check_gradients(
                    &|t, xs| {
                        let batch = BatchEmbeddings {
                            v_g: xs[0].clone(),
                            t_b: xs[1].clone(),
                            t_d: xs[2].clone(),
                            v_r: xs[3].clone(),
                            t_r: xs[4].clone(),
                            t_neg: xs[5].clone(),
                            v_crop: xs[6].clone(),
                            tau: xs[7].clone(),
                        };
                        Ok(total_loss(t, &batch, &weights)?.0)
                    },
                    &[
                        emb(&mut rng, n),
                        emb(&mut rng, n),
                        emb(&mut rng, n),
                        emb(&mut rng, k),
                        emb(&mut rng, k),
                        randn_tensor(&mut rng, &[k, q, d], 1.0),
                        emb(&mut rng, k),
                        random_tau(&mut rng),
                    ],
                    FD_STEP,
                )?
            }
        };
        worst = worst.max(check.max_rel_err);
    }
    Ok(LossGradReport {
        name: kind.name(),
        trials,
        max_rel_err: worst,
        tol: FD_TOL,
    })
}

/// Run the gradient suite over the requested losses.
pub fn run_loss_gradchecks(
    kinds: &[LossKind],
    trials: usize,
    seed: u64,
) -> Result<Vec<LossGradReport>> {
    kinds.iter().map(|&k| check_loss(k, trials, seed)).collect()
}
