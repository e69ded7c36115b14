//! Loss implementations against independent naive double-loop oracles.

mod common;

use common::{candidates_of, naive_hna, naive_htc, naive_info_nce, naive_rpa, naive_vic, rows_of};
use geoalign::autograd::{Tape, Tensor};
use geoalign::losses::{
    hna_loss, htc_loss, info_nce_symmetric, rpa_loss, total_loss, vic_loss, BatchEmbeddings,
    LossWeights,
};
use geoalign::rng::{randn_tensor, stream_rng};
use rand::Rng;

const TOL: f64 = 1e-12;

struct Instance {
    v_g: Tensor,
    t_b: Tensor,
    t_d: Tensor,
    v_r: Tensor,
    t_r: Tensor,
    t_neg: Tensor,
    v_crop: Tensor,
    tau: f64,
}

fn instance(seed: u64) -> Instance {
    let mut rng = stream_rng(seed, "oracle-instance", 0);
    let n = rng.gen_range(1..=5);
    let k = rng.gen_range(1..=4);
    let q = rng.gen_range(2..=4);
    let d = rng.gen_range(2..=8);
    Instance {
        v_g: randn_tensor(&mut rng, &[n, d], 1.0),
        t_b: randn_tensor(&mut rng, &[n, d], 1.0),
        t_d: randn_tensor(&mut rng, &[n, d], 1.0),
        v_r: randn_tensor(&mut rng, &[k, d], 1.0),
        t_r: randn_tensor(&mut rng, &[k, d], 1.0),
        t_neg: randn_tensor(&mut rng, &[k, q, d], 1.0),
        v_crop: randn_tensor(&mut rng, &[k, d], 1.0),
        tau: rng.gen_range(0.05..0.9),
    }
}

#[test]
fn info_nce_matches_naive_oracle_on_50_instances() {
    for seed in 0..50 {
        let inst = instance(seed);
        let tape = Tape::new();
        let got = info_nce_symmetric(&tape, &inst.v_g, &inst.t_b, &Tensor::scalar(inst.tau))
            .unwrap()
            .item();
        let want = naive_info_nce(&rows_of(&inst.v_g), &rows_of(&inst.t_b), inst.tau);
        assert!((got - want).abs() <= TOL, "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn rpa_matches_naive_oracle_on_50_instances() {
    for seed in 100..150 {
        let inst = instance(seed);
        let tape = Tape::new();
        let got = rpa_loss(&tape, &inst.v_r, &inst.t_r, &Tensor::scalar(inst.tau), true)
            .unwrap()
            .item();
        let want = naive_rpa(&rows_of(&inst.v_r), &rows_of(&inst.t_r), inst.tau, true);
        assert!((got - want).abs() <= TOL, "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn rpa_duplicate_masking_matches_the_naive_oracle() {
    for seed in 200..220 {
        let mut inst = instance(seed);
        let k = inst.v_r.shape()[0];
        if k < 2 {
            continue;
        }
        // Force regions 0 and 1 to share a phrase embedding.
        let d = inst.t_r.shape()[1];
        let mut data = inst.t_r.data().to_vec();
        let (head, tail) = data.split_at_mut(d);
        tail[..d].copy_from_slice(head);
        inst.t_r = Tensor::from_vec(vec![k, d], data).unwrap();

        for mask in [true, false] {
            let tape = Tape::new();
            let got = rpa_loss(&tape, &inst.v_r, &inst.t_r, &Tensor::scalar(inst.tau), mask)
                .unwrap()
                .item();
            let want = naive_rpa(&rows_of(&inst.v_r), &rows_of(&inst.t_r), inst.tau, mask);
            assert!(
                (got - want).abs() <= TOL,
                "seed {seed} mask {mask}: {got} vs {want}"
            );
        }
    }
}

#[test]
fn hna_matches_naive_oracle_on_50_instances() {
    for seed in 300..350 {
        let inst = instance(seed);
        let tape = Tape::new();
        let got = hna_loss(&tape, &inst.v_r, &inst.t_neg, &Tensor::scalar(inst.tau))
            .unwrap()
            .item();
        let want = naive_hna(&rows_of(&inst.v_r), &candidates_of(&inst.t_neg), inst.tau);
        assert!((got - want).abs() <= TOL, "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn vic_matches_naive_oracle_on_50_instances() {
    for seed in 400..450 {
        let inst = instance(seed);
        let tape = Tape::new();
        let got = vic_loss(&tape, &inst.v_r, &inst.v_crop).unwrap().item();
        let want = naive_vic(&rows_of(&inst.v_r), &rows_of(&inst.v_crop));
        assert!((got - want).abs() <= TOL, "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn htc_matches_naive_oracle_on_50_instances() {
    for seed in 500..550 {
        let inst = instance(seed);
        let tape = Tape::new();
        let got = htc_loss(
            &tape,
            &inst.v_g,
            &inst.t_b,
            &inst.t_d,
            &Tensor::scalar(inst.tau),
            true,
        )
        .unwrap()
        .item();
        let want = naive_htc(
            &rows_of(&inst.v_g),
            &rows_of(&inst.t_b),
            &rows_of(&inst.t_d),
            inst.tau,
        );
        assert!((got - want).abs() <= TOL, "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn total_matches_the_sum_of_naive_oracles_on_50_instances() {
    for seed in 600..650 {
        let inst = instance(seed);
        let batch = BatchEmbeddings {
            v_g: inst.v_g.clone(),
            t_b: inst.t_b.clone(),
            t_d: inst.t_d.clone(),
            v_r: inst.v_r.clone(),
            t_r: inst.t_r.clone(),
            t_neg: inst.t_neg.clone(),
            v_crop: inst.v_crop.clone(),
            tau: Tensor::scalar(inst.tau),
        };
        let weights = LossWeights::stage_ii(false);
        let tape = Tape::new();
        let (total, _) = total_loss(&tape, &batch, &weights).unwrap();
        let want = naive_rpa(&rows_of(&inst.v_r), &rows_of(&inst.t_r), inst.tau, true)
            + naive_hna(&rows_of(&inst.v_r), &candidates_of(&inst.t_neg), inst.tau)
            + naive_vic(&rows_of(&inst.v_r), &rows_of(&inst.v_crop))
            + naive_htc(
                &rows_of(&inst.v_g),
                &rows_of(&inst.t_b),
                &rows_of(&inst.t_d),
                inst.tau,
            );
        assert!(
            (total.item() - want).abs() <= TOL,
            "seed {seed}: {} vs {want}",
            total.item()
        );
    }
}
