use ndarray::Array2;
use rand::Rng;

use crate::autograd::{Graph, Linear, ParamStore, Var};
use crate::error::{Error, Result};

use super::interaction::to_tensor;

/// Residual projector: `W2 relu(W1 u + b1) + b2 + Ws u`, where `u` is the
/// concatenation of the token means of both domains.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub hidden: Linear,
    pub out: Linear,
    pub shortcut: Linear,
}

impl Classifier {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize, n_classes: usize) -> Self {
        Self {
            hidden: Linear::new(store, rng, &format!("{name}.hidden"), 2 * d, d, true),
            out: Linear::new(store, rng, &format!("{name}.out"), d, n_classes, true),
            shortcut: Linear::new(store, rng, &format!("{name}.shortcut"), 2 * d, n_classes, false),
        }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, g_c: Var, g_r: Var) -> Var {
        let pc = g.mean_rows(g_c);
        let pr = g.mean_rows(g_r);
        let u = g.concat(&[pc, pr]);
        self.apply_pooled(g, store, u)
    }

    pub fn apply_pooled(&self, g: &mut Graph, store: &ParamStore, u: Var) -> Var {
        let h = self.hidden.apply(g, store, u);
        let h = g.relu(h);
        let main = self.out.apply(g, store, h);
        let short = self.shortcut.apply(g, store, u);
        g.add(main, short)
    }

    /// Zeroes the output layer and the shortcut.
    pub fn zero_final(&self, store: &mut ParamStore) {
        for id in self.out.param_ids().into_iter().chain(self.shortcut.param_ids()) {
            store.get_mut(id).data_mut().fill(0.0);
        }
    }
}

/// Plain-value logits from the fused domain tokens.
pub fn classify(head: &Classifier, store: &ParamStore, g_c: &Array2<f64>, g_r: &Array2<f64>) -> Result<Vec<f64>> {
    let width = store.get(head.hidden.w).shape()[1];
    if g_c.ncols() + g_r.ncols() != width {
        return Err(Error::Dimension(format!("pooled width {} vs projector input {width}", g_c.ncols() + g_r.ncols())));
    }
    let mut g = Graph::new();
    let c = g.constant(to_tensor(g_c));
    let r = g.constant(to_tensor(g_r));
    let logits = head.apply(&mut g, store, c, r);
    Ok(g.value(logits).data().to_vec())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn check_logits(logits: &[f64], label: usize) -> Result<()> {
    if label >= logits.len() {
        return Err(Error::Dimension(format!("label {label} with {} logits", logits.len())));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    Ok(())
}

pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    check_logits(logits, label)?;
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + logits.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

/// Records `weight * CE(logits, label)`.
pub fn cross_entropy_node(g: &mut Graph, logits: Var, label: usize, weight: f64) -> Result<Var> {
    let l = g.value(logits).data().to_vec();
    let value = cross_entropy(&l, label)? * weight;
    let mut grad = softmax(&l);
    grad[label] -= 1.0;
    grad.iter_mut().for_each(|v| *v *= weight);
    Ok(g.scalar_fn(&[logits], value, vec![grad]))
}

/// Cross-entropy plus the two alignment terms, unweighted.
pub fn total_loss(logits: &[f64], label: usize, dsa: f64, fsa: f64) -> Result<f64> {
    for (name, v) in [("dsa", dsa), ("fsa", fsa)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} loss component {v}")));
        }
    }
    Ok(cross_entropy(logits, label)? + dsa + fsa)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn zero_final_layer_gives_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let head = Classifier::new(&mut store, &mut rng, "head", 4, 2);
        head.zero_final(&mut store);
        let logits = classify(&head, &store, &random(2, 4, 1), &random(2, 4, 2)).unwrap();
        assert_eq!(logits, vec![0.0, 0.0]);
        assert_eq!(softmax(&logits), vec![0.5, 0.5]);
    }

    #[test]
    fn logits_have_class_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let head = Classifier::new(&mut store, &mut rng, "head", 4, 3);
        assert_eq!(classify(&head, &store, &random(2, 4, 1), &random(2, 4, 2)).unwrap().len(), 3);
        assert!(classify(&head, &store, &random(2, 3, 1), &random(2, 4, 2)).is_err());
    }

    #[test]
    fn shift_response_is_lipschitz_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let head = Classifier::new(&mut store, &mut rng, "head", 4, 2);
        // Lipschitz bound of the map u -> logits in the 2-norm
        let op_norm = |id| {
            let t = store.get(id);
            t.data().iter().map(|v| v * v).sum::<f64>().sqrt()
        };
        let lip = op_norm(head.out.w) * op_norm(head.hidden.w) + op_norm(head.shortcut.w);
        let (gc, gr) = (random(3, 4, 5), random(3, 4, 6));
        let base = classify(&head, &store, &gc, &gr).unwrap();
        for c in [0.01, 0.1, 1.0] {
            let shifted = classify(&head, &store, &gc.mapv(|v| v + c), &gr.mapv(|v| v + c)).unwrap();
            let diff = base.iter().zip(&shifted).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let shift_norm = (8.0 * c * c as f64).sqrt();
            assert!(diff <= lip * shift_norm + 1e-12, "{diff} > {}", lip * shift_norm);
        }
    }

    #[test]
    fn argmax_invariant_to_constant_shift() {
        let logits = [0.3, -1.2, 2.4];
        let p = softmax(&logits);
        let q = softmax(&logits.map(|v| v + 7.5));
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn total_loss_examples() {
        let ce = cross_entropy(&[0.0, 0.0], 1).unwrap();
        assert!((ce - 2f64.ln()).abs() < 1e-12);
        // components 0.3 + 0.2 + 0.1
        let logits = [0.0, (0.3f64.exp() - 1.0).ln() + 0.0];
        let ce = cross_entropy(&logits, 0).unwrap();
        assert!((ce - 0.3).abs() < 1e-12);
        assert!((total_loss(&logits, 0, 0.2, 0.1).unwrap() - 0.6).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for m in [1.0, 5.0, 10.0, 40.0] {
            let l = total_loss(&[m, 0.0], 0, 0.0, 0.0).unwrap();
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-15);
        assert!(total_loss(&[0.0, 0.0], 0, f64::NAN, 0.0).is_err());
        assert!(total_loss(&[0.0, 0.0], 2, 0.0, 0.0).is_err());
    }
}
