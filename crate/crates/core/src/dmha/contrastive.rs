use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};

const NORM_FLOOR: f64 = 1e-12;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("cosine of lengths {} and {}", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Common-space transforms of a functional/structural embedding pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CommonSpacePair {
    pub z_star: Vec<f64>,
    pub z_plus: Vec<f64>,
}

pub fn fsa_common(z_f: &[f64], z_s: &[f64]) -> Result<CommonSpacePair> {
    if z_f.len() != z_s.len() {
        return Err(Error::Dimension(format!("z_F has {} entries, z_S {}", z_f.len(), z_s.len())));
    }
    Ok(CommonSpacePair {
        z_star: z_f.iter().zip(z_s).map(|(a, b)| a * b).collect(),
        z_plus: z_f.iter().zip(z_s).map(|(a, b)| a + b).collect(),
    })
}

/// Loss value and gradients w.r.t. the anchor and positive batches.
#[derive(Debug, Clone)]
pub struct ContrastiveGrad {
    pub loss: f64,
    pub d_anchor: Vec<Vec<f64>>,
    pub d_positive: Vec<Vec<f64>>,
}

fn check_batch(anchor: &[Vec<f64>], positive: &[Vec<f64>], tau: f64) -> Result<usize> {
    if !(tau > 0.0) {
        return Err(Error::Temperature(tau));
    }
    if anchor.is_empty() || anchor.len() != positive.len() {
        return Err(Error::Dimension(format!(
            "contrastive batches of {} and {} embeddings",
            anchor.len(),
            positive.len()
        )));
    }
    let d = anchor[0].len();
    if anchor.iter().chain(positive).any(|v| v.len() != d) {
        return Err(Error::Dimension("embeddings differ in length".into()));
    }
    Ok(d)
}

/// NT-Xent over the `2N` embeddings `anchor ++ positive`. For anchor `i`
/// the positive is `positive[i]` and the denominator runs over every other
/// embedding in the batch. With `symmetric` the positives act as anchors
/// too and the loss averages over all `2N` anchors.
///
/// Norms are floored at 1e-12, so zero vectors give finite values here; the
/// public loss functions reject them instead.
pub fn contrastive_with_grad(anchor: &[Vec<f64>], positive: &[Vec<f64>], tau: f64, symmetric: bool) -> Result<ContrastiveGrad> {
    check_batch(anchor, positive, tau)?;
    let n = anchor.len();
    let all: Vec<&Vec<f64>> = anchor.iter().chain(positive).collect();
    let m = 2 * n;
    let norms: Vec<f64> = all.iter().map(|v| norm(v).max(NORM_FLOOR)).collect();
    let units: Vec<Vec<f64>> = all.iter().zip(&norms).map(|(v, nv)| v.iter().map(|x| x / nv).collect()).collect();
    let mut sim = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            sim[i * m + j] = units[i].iter().zip(&units[j]).map(|(a, b)| a * b).sum::<f64>() / tau;
        }
    }
    let anchors: Vec<usize> = if symmetric { (0..m).collect() } else { (0..n).collect() };
    let scale = 1.0 / anchors.len() as f64;
    // coefficient matrix dL/dS
    let mut coef = vec![0.0; m * m];
    let mut loss = 0.0;
    for &a in &anchors {
        let p = if a < n { a + n } else { a - n };
        let row = &sim[a * m..(a + 1) * m];
        let mx = (0..m).filter(|&j| j != a).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..m).filter(|&j| j != a).map(|j| (row[j] - mx).exp()).sum();
        loss += scale * (mx + z.ln() - row[p]);
        for j in (0..m).filter(|&j| j != a) {
            coef[a * m + j] += scale * (row[j] - mx).exp() / z;
        }
        coef[a * m + p] -= scale;
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("contrastive loss".into()));
    }
    // S = U U^T / tau, so dL/dU = (C + C^T) U / tau
    let d = units[0].len();
    let mut grads = Vec::with_capacity(m);
    for i in 0..m {
        let mut gu = vec![0.0; d];
        for j in 0..m {
            let c = (coef[i * m + j] + coef[j * m + i]) / tau;
            if c != 0.0 {
                for (gk, uk) in gu.iter_mut().zip(&units[j]) {
                    *gk += c * uk;
                }
            }
        }
        let dot: f64 = gu.iter().zip(&units[i]).map(|(a, b)| a * b).sum();
        grads.push(gu.iter().zip(&units[i]).map(|(gk, uk)| (gk - uk * dot) / norms[i]).collect());
    }
    let d_positive = grads.split_off(n);
    Ok(ContrastiveGrad {
        loss: loss.max(0.0),
        d_anchor: grads,
        d_positive,
    })
}

fn reject_zero(batches: [&[Vec<f64>]; 2]) -> Result<()> {
    if batches.iter().flat_map(|b| b.iter()).any(|v| norm(v) == 0.0) {
        return Err(Error::ZeroVector);
    }
    Ok(())
}

/// Dynamic-static alignment loss with `(Z_d[i], Z_s[i])` as positives.
pub fn dsa_loss(z_d: &[Vec<f64>], z_s: &[Vec<f64>], tau: f64, symmetric: bool) -> Result<f64> {
    check_batch(z_d, z_s, tau)?;
    reject_zero([z_d, z_s])?;
    Ok(contrastive_with_grad(z_d, z_s, tau, symmetric)?.loss)
}

/// Functional-structural alignment loss with `Z_star` as anchor.
pub fn fsa_loss(star: &[Vec<f64>], plus: &[Vec<f64>], tau: f64, symmetric: bool) -> Result<f64> {
    check_batch(star, plus, tau)?;
    reject_zero([star, plus])?;
    Ok(contrastive_with_grad(star, plus, tau, symmetric)?.loss)
}

/// Records the contrastive loss of two batches of embedding nodes.
pub fn contrastive_node(g: &mut Graph, anchor: &[Var], positive: &[Var], tau: f64, symmetric: bool) -> Result<Var> {
    let fetch = |vs: &[Var]| vs.iter().map(|&v| g.value(v).data().to_vec()).collect::<Vec<_>>();
    let (a, p) = (fetch(anchor), fetch(positive));
    let r = contrastive_with_grad(&a, &p, tau, symmetric)?;
    let inputs: Vec<Var> = anchor.iter().chain(positive).copied().collect();
    let grads = r.d_anchor.into_iter().chain(r.d_positive).collect();
    Ok(g.scalar_fn(&inputs, r.loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let v = [0.3, -1.2, 2.0];
        let a: Vec<f64> = v.iter().map(|x| 2.0 * x).collect();
        let b: Vec<f64> = v.iter().map(|x| 3.0 * x).collect();
        assert!((cosine_sim(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_sim(&[1.0, 2.0, 2.0], &[2.0, 1.0, 2.0]).unwrap() - 8.0 / 9.0).abs() < 1e-12);
        assert!(matches!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroVector)));
    }

    #[test]
    fn common_space_examples() {
        let p = fsa_common(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(p.z_star, vec![3.0, 8.0]);
        assert_eq!(p.z_plus, vec![4.0, 6.0]);
        let p = fsa_common(&[0.0, 0.0], &[3.0, 4.0]).unwrap();
        assert_eq!(p.z_star, vec![0.0, 0.0]);
        assert_eq!(p.z_plus, vec![3.0, 4.0]);
        let p = fsa_common(&[1.0, 1.0], &[1.0, 1.0]).unwrap();
        assert!((cosine_sim(&p.z_star, &p.z_plus).unwrap() - 1.0).abs() < 1e-12);
        assert!(fsa_common(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn single_pair_is_zero() {
        let a = vec![vec![0.3, -0.7, 1.1]];
        let b = vec![vec![2.0, 0.1, -0.4]];
        assert_eq!(dsa_loss(&a, &b, 0.5, true).unwrap(), 0.0);
        assert_eq!(fsa_loss(&a, &b, 0.5, false).unwrap(), 0.0);
    }

    #[test]
    fn closed_form_two_pairs() {
        // positives identical, other-sample sims 0
        let zd = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let zs = zd.clone();
        let expected = -(1f64.exp() / (1f64.exp() + 2.0)).ln();
        assert!((expected - 0.5514).abs() < 1e-4);
        assert!((dsa_loss(&zd, &zs, 1.0, true).unwrap() - expected).abs() < 1e-12);
        assert!((dsa_loss(&zd, &zs, 1.0, false).unwrap() - expected).abs() < 1e-12);
        // other-sample sims -1
        let star = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        let plus = star.clone();
        let expected = -(1f64.exp() / (1f64.exp() + 2.0 * (-1f64).exp())).ln();
        assert!((expected - 0.2395).abs() < 1e-4);
        assert!((fsa_loss(&star, &plus, 1.0, true).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn bad_inputs() {
        let a = vec![vec![1.0, 0.0]];
        assert!(matches!(dsa_loss(&a, &a, 0.0, true), Err(Error::Temperature(_))));
        assert!(matches!(dsa_loss(&a, &[vec![0.0, 0.0]], 1.0, true), Err(Error::ZeroVector)));
        assert!(dsa_loss(&a, &[], 1.0, true).is_err());
    }

    fn batch(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(0.1f64..2.0, d).prop_map(|mut v| {
            v[0] = -v[0];
            v
        }), n)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn scale_invariance(a in batch(3, 4), b in batch(3, 4), c in prop::collection::vec(0.01f64..100.0, 6), sym in any::<bool>()) {
            let base = dsa_loss(&a, &b, 0.5, sym).unwrap();
            let a2: Vec<Vec<f64>> = a.iter().zip(&c).map(|(v, s)| v.iter().map(|x| x * s).collect()).collect();
            let b2: Vec<Vec<f64>> = b.iter().zip(&c[3..]).map(|(v, s)| v.iter().map(|x| x * s).collect()).collect();
            prop_assert!((dsa_loss(&a2, &b2, 0.5, sym).unwrap() - base).abs() < 1e-8);
            prop_assert!((fsa_loss(&a2, &b2, 0.5, sym).unwrap() - fsa_loss(&a, &b, 0.5, sym).unwrap()).abs() < 1e-8);
        }

        #[test]
        fn nonnegative_and_symmetric(a in batch(4, 3), b in batch(4, 3)) {
            let l = fsa_loss(&a, &b, 0.5, true).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert!((fsa_loss(&b, &a, 0.5, true).unwrap() - l).abs() < 1e-12);
        }

        #[test]
        fn gradient_matches_differences(a in batch(3, 4), b in batch(3, 4), sym in any::<bool>()) {
            let r = contrastive_with_grad(&a, &b, 0.5, sym).unwrap();
            let h = 1e-6;
            for which in 0..2 {
                for i in 0..3 {
                    for k in 0..4 {
                        let eval = |delta: f64| {
                            let (mut a2, mut b2) = (a.clone(), b.clone());
                            if which == 0 { a2[i][k] += delta } else { b2[i][k] += delta }
                            contrastive_with_grad(&a2, &b2, 0.5, sym).unwrap().loss
                        };
                        let num = (eval(h) - eval(-h)) / (2.0 * h);
                        let ana = if which == 0 { r.d_anchor[i][k] } else { r.d_positive[i][k] };
                        let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
                        prop_assert!(rel < 1e-4, "{which} {i} {k}: {ana} vs {num}");
                    }
                }
            }
        }
    }

    #[test]
    fn decreasing_in_positive_similarity() {
        // anchor fixed, positive rotated towards it; negatives fixed
        let anchor = |_: f64| vec![vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]];
        let pos = |t: f64| vec![vec![t.cos(), t.sin(), 0.0], vec![0.0, 1.0, 0.2]];
        let mut prev = f64::INFINITY;
        for step in 0..20 {
            let t = 1.5 - step as f64 * 0.07;
            let l = contrastive_with_grad(&anchor(t), &pos(t), 0.5, false).unwrap().loss;
            assert!(l < prev, "loss not decreasing at t = {t}");
            prev = l;
        }
    }
}
