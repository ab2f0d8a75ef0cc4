//! In-batch contrastive losses over raw inner products.
//!
//! Mention vectors are laid out so that `c[2k]` and `c[2k + 1]` share the
//! entity whose reference vector is `r[k]`.

use serde::{Deserialize, Serialize};

use crate::encoder::linalg::dot;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mention_pair_loss: f64,
    pub reference_loss: f64,
    pub joint: f64,
}

impl LossBreakdown {
    pub fn new(mention_pair_loss: f64, reference_loss: f64, alpha: f64, beta: f64) -> Self {
        LossBreakdown {
            mention_pair_loss,
            reference_loss,
            joint: alpha * mention_pair_loss + beta * reference_loss,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.mention_pair_loss.is_finite() && self.reference_loss.is_finite() && self.joint.is_finite()
    }
}

/// Gradients of a loss with respect to the mention and reference vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorGrads {
    pub mentions: Vec<Vec<f64>>,
    pub references: Vec<Vec<f64>>,
}

impl VectorGrads {
    fn zeros(n_mentions: usize, n_refs: usize, dim: usize) -> Self {
        VectorGrads {
            mentions: vec![vec![0.0; dim]; n_mentions],
            references: vec![vec![0.0; dim]; n_refs],
        }
    }
}

/// Log-sum-exp of `z` skipping index `skip`, shifted by the maximum.
fn log_sum_exp(z: &[f64], skip: Option<usize>) -> f64 {
    let max = z
        .iter()
        .enumerate()
        .filter(|&(k, _)| Some(k) != skip)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = z
        .iter()
        .enumerate()
        .filter(|&(k, _)| Some(k) != skip)
        .map(|(_, &v)| (v - max).exp())
        .sum();
    max + sum.ln()
}

/// `−log[exp(cᵢ·cⱼ/τ) / Σ_{k≠i} exp(cᵢ·cₖ/τ)]`.
pub fn info_nce_pair_loss(i: usize, j: usize, c: &[Vec<f64>], tau: f64) -> f64 {
    assert!(i != j, "anchor and positive must differ");
    let z: Vec<f64> = c.iter().map(|ck| dot(&c[i], ck) / tau).collect();
    log_sum_exp(&z, Some(i)) - z[j]
}

/// Mean of the two directional pair losses over every entity slot.
pub fn mention_pair_loss(c: &[Vec<f64>], tau: f64) -> f64 {
    mention_pair_loss_with_grad(c, tau).0
}

pub fn mention_pair_loss_with_grad(c: &[Vec<f64>], tau: f64) -> (f64, Vec<Vec<f64>>) {
    let n2 = c.len();
    assert!(n2 >= 2 && n2 % 2 == 0, "need an even number of mention vectors");
    let dim = c[0].len();
    let mut grads = vec![vec![0.0; dim]; n2];
    let mut total = 0.0;
    let inv = 1.0 / n2 as f64;
    for i in 0..n2 {
        let j = i ^ 1;
        let z: Vec<f64> = c.iter().map(|ck| dot(&c[i], ck) / tau).collect();
        let lse = log_sum_exp(&z, Some(i));
        total += lse - z[j];
        for k in 0..n2 {
            if k == i {
                continue;
            }
            let p = (z[k] - lse).exp();
            let g = inv * (p - if k == j { 1.0 } else { 0.0 }) / tau;
            if g == 0.0 {
                continue;
            }
            for d in 0..dim {
                grads[i][d] += g * c[k][d];
                grads[k][d] += g * c[i][d];
            }
        }
    }
    (total * inv, grads)
}

/// `−log[exp(cᵢ·r_j/π) / Σ_k exp(cᵢ·r_k/π)]`, every reference in the denominator.
pub fn info_nce_reference_loss(i: usize, j: usize, c: &[Vec<f64>], r: &[Vec<f64>], pi: f64) -> f64 {
    let z: Vec<f64> = r.iter().map(|rk| dot(&c[i], rk) / pi).collect();
    log_sum_exp(&z, None) - z[j]
}

pub fn mention_reference_loss(c: &[Vec<f64>], r: &[Vec<f64>], pi: f64) -> f64 {
    mention_reference_loss_with_grad(c, r, pi).0
}

pub fn mention_reference_loss_with_grad(
    c: &[Vec<f64>],
    r: &[Vec<f64>],
    pi: f64,
) -> (f64, VectorGrads) {
    let n2 = c.len();
    assert_eq!(n2, 2 * r.len(), "expected two mentions per reference");
    let dim = c[0].len();
    let mut grads = VectorGrads::zeros(n2, r.len(), dim);
    let inv = 1.0 / n2 as f64;
    let mut total = 0.0;
    for i in 0..n2 {
        let pos = i / 2;
        let z: Vec<f64> = r.iter().map(|rk| dot(&c[i], rk) / pi).collect();
        let lse = log_sum_exp(&z, None);
        total += lse - z[pos];
        for (k, rk) in r.iter().enumerate() {
            let p = (z[k] - lse).exp();
            let g = inv * (p - if k == pos { 1.0 } else { 0.0 }) / pi;
            for d in 0..dim {
                grads.mentions[i][d] += g * rk[d];
                grads.references[k][d] += g * c[i][d];
            }
        }
    }
    (total * inv, grads)
}

/// `α·ℒ + β·ℒ′` with gradients of the joint objective.
pub fn joint_loss_with_grad(
    c: &[Vec<f64>],
    r: &[Vec<f64>],
    tau: f64,
    pi: f64,
    alpha: f64,
    beta: f64,
) -> (LossBreakdown, VectorGrads) {
    let (l_pair, g_pair) = mention_pair_loss_with_grad(c, tau);
    let (l_ref, g_ref) = mention_reference_loss_with_grad(c, r, pi);
    let mut grads = g_ref;
    for (gm, gp) in grads.mentions.iter_mut().zip(&g_pair) {
        for (a, b) in gm.iter_mut().zip(gp) {
            *a = alpha * b + beta * *a;
        }
    }
    for gr in grads.references.iter_mut() {
        for a in gr.iter_mut() {
            *a *= beta;
        }
    }
    (LossBreakdown::new(l_pair, l_ref, alpha, beta), grads)
}

pub fn joint_loss(
    c: &[Vec<f64>],
    r: &[Vec<f64>],
    tau: f64,
    pi: f64,
    alpha: f64,
    beta: f64,
) -> LossBreakdown {
    LossBreakdown::new(
        mention_pair_loss(c, tau),
        mention_reference_loss(c, r, pi),
        alpha,
        beta,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[&[f64]]) -> Vec<Vec<f64>> {
        xs.iter().map(|x| x.to_vec()).collect()
    }

    #[test]
    fn degenerate_pair_is_zero() {
        let c = v(&[&[0.3, -1.2], &[2.0, 0.5]]);
        assert_eq!(info_nce_pair_loss(0, 1, &c, 1.0), 0.0);
        assert_eq!(mention_pair_loss(&c, 1.0), 0.0);
    }

    #[test]
    fn uniform_similarities() {
        let c = vec![vec![1.0, 0.0]; 4];
        assert!((info_nce_pair_loss(0, 1, &c, 1.0) - 3f64.ln()).abs() < 1e-12);
        assert!((mention_pair_loss(&c, 1.0) - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn fixed_vectors_value() {
        // ln(1 + 2/e), evaluated with mpmath at 30 digits
        let expected = 0.551_444_713_932_051_1_f64;
        let c = v(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0]]);
        assert!((info_nce_pair_loss(0, 1, &c, 1.0) - expected).abs() < 1e-9);
    }

    #[test]
    fn reference_loss_closed_forms() {
        let c = v(&[&[0.4, 1.0], &[-2.0, 0.1]]);
        let r = v(&[&[3.0, -1.0]]);
        assert_eq!(mention_reference_loss(&c, &r, 1.0), 0.0);

        let c = v(&[&[0.4, 1.0], &[-2.0, 0.1], &[1.0, 1.0], &[0.0, 0.3], &[5.0, 1.0], &[0.2, 0.2]]);
        let r = vec![vec![0.7, 0.7]; 3];
        assert!((mention_reference_loss(&c, &r, 0.5) - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn joint_weights() {
        let c = v(&[&[0.4, 1.0], &[-2.0, 0.1], &[1.0, 1.0], &[0.0, 0.3]]);
        let r = v(&[&[0.1, 0.9], &[0.5, -0.5]]);
        let only_pair = joint_loss(&c, &r, 1.0, 1.0, 1.0, 0.0);
        assert_eq!(only_pair.joint, only_pair.mention_pair_loss);
        let only_ref = joint_loss(&c, &r, 1.0, 1.0, 0.0, 1.0);
        assert_eq!(only_ref.joint, only_ref.reference_loss);
        let half = joint_loss(&c, &r, 1.0, 1.0, 0.5, 0.5);
        assert!((half.joint - 0.5 * (half.mention_pair_loss + half.reference_loss)).abs() < 1e-15);
    }

    #[test]
    fn vector_gradients_match_finite_differences() {
        let c = v(&[&[0.4, 1.0, -0.3], &[-0.9, 0.1, 0.8], &[1.0, 1.0, 0.0], &[0.0, 0.3, -1.1]]);
        let r = v(&[&[0.1, 0.9, 0.2], &[0.5, -0.5, 0.4]]);
        let (_, grads) = joint_loss_with_grad(&c, &r, 0.7, 1.3, 0.6, 0.4);
        let f = |c: &[Vec<f64>], r: &[Vec<f64>]| joint_loss(c, r, 0.7, 1.3, 0.6, 0.4).joint;
        let h = 1e-6;
        for i in 0..c.len() {
            for d in 0..3 {
                let (mut cp, mut cm) = (c.clone(), c.clone());
                cp[i][d] += h;
                cm[i][d] -= h;
                let fd = (f(&cp, &r) - f(&cm, &r)) / (2.0 * h);
                assert!((fd - grads.mentions[i][d]).abs() < 1e-8);
            }
        }
        for k in 0..r.len() {
            for d in 0..3 {
                let (mut rp, mut rm) = (r.clone(), r.clone());
                rp[k][d] += h;
                rm[k][d] -= h;
                let fd = (f(&c, &rp) - f(&c, &rm)) / (2.0 * h);
                assert!((fd - grads.references[k][d]).abs() < 1e-8);
            }
        }
    }
}
