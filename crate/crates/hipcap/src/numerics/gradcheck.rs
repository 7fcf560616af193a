//! Finite-difference verification of analytic gradients.
//!
//! The checker treats the model as a black-box scalar function of its
//! parameter store: it asks the caller to rebuild the forward graph from a
//! (possibly perturbed) store, reads the loss, and compares the tape's
//! analytic gradient against central differences, one scalar parameter at a
//! time. This is the ground truth every layer in the crate is tested
//! against.

use crate::error::Result;
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::tensor::ParamStore;

/// Outcome of checking one parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    /// Worst relative error across the tensor's scalars.
    pub max_rel_err: f64,
    /// Flat index of the worst scalar.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Full report for a gradient check run.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    /// The offending parameter, if any scalar exceeded the tolerance.
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .filter(|p| p.max_rel_err > self.tolerance)
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    pub fn passed(&self) -> bool {
        self.worst().is_none()
    }
}

/// Relative error with a unit floor, so zero/tiny gradients compare sanely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1.0f64.max(analytic.abs()).max(numeric.abs())
}

/// Checks analytic gradients of `f` against central differences.
///
/// `f` must rebuild the forward computation from scratch on the graph it is
/// given, pulling every parameter it uses from the store, and return the
/// scalar loss node. `epsilon` is the finite-difference step (1e-6 is a good
/// default at f64 precision).
pub fn grad_check<F>(store: &ParamStore, mut f: F, epsilon: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    // analytic pass
    let mut graph = Graph::new();
    let loss = f(&mut graph, store)?;
    let analytic: Vec<(String, Vec<f64>)> = graph.param_grads(loss)?;

    let mut work = store.clone();
    let mut params = Vec::with_capacity(analytic.len());
    for (name, grad) in &analytic {
        let len = grad.len();
        let mut check = ParamCheck {
            name: name.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: if len > 0 { grad[0] } else { 0.0 },
            numeric: 0.0,
        };
        for i in 0..len {
            let original = work.get(name).expect("param exists").values()[i];
            let plus = {
                set_scalar(&mut work, name, i, original + epsilon);
                eval(&mut f, &work)?
            };
            let minus = {
                set_scalar(&mut work, name, i, original - epsilon);
                eval(&mut f, &work)?
            };
            set_scalar(&mut work, name, i, original);
            let numeric = (plus - minus) / (2.0 * epsilon);
            let err = rel_err(grad[i], numeric);
            if err >= check.max_rel_err {
                check.max_rel_err = err;
                check.worst_index = i;
                check.analytic = grad[i];
                check.numeric = numeric;
            }
        }
        params.push(check);
    }
    Ok(GradCheckReport { params, tolerance })
}

fn eval<F>(f: &mut F, store: &ParamStore) -> Result<f64>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    let mut graph = Graph::new();
    let loss = f(&mut graph, store)?;
    Ok(graph.value(loss)[0])
}

fn set_scalar(store: &mut ParamStore, name: &str, index: usize, value: f64) {
    let t = store.get_mut(name).expect("param exists");
    t.values_mut()[index] = value;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;

    #[test]
    fn rel_err_uses_unit_floor() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!((rel_err(1e-9, 2e-9) - 1e-9).abs() < 1e-18);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn half_p_squared_at_three() {
        // f(p) = 0.5 p^2, f'(3) = 3
        let mut store = ParamStore::new();
        store.insert("p", Tensor::scalar(3.0)).unwrap();
        let report = grad_check(
            &store,
            |g, s| {
                let p = g.param(s, "p")?;
                let sq = g.hadamard(p, p)?;
                g.scale(sq, 0.5)
            },
            1e-6,
            1e-8,
        )
        .unwrap();
        assert!(report.passed());
        let check = &report.params[0];
        assert!((check.analytic - 3.0).abs() < 1e-12 || check.max_rel_err < 1e-8);
        assert!(report.max_rel_err() < 1e-8);
    }

    #[test]
    fn constant_function_reports_zero_error() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let report = grad_check(
            &store,
            |g, s| {
                let _ = g.param(s, "p")?;
                Ok(g.scalar(7.0))
            },
            1e-6,
            1e-10,
        )
        .unwrap();
        assert!(report.passed());
        assert_eq!(report.max_rel_err(), 0.0);
    }

    #[test]
    fn quadratic_gradient_passes() {
        // f(p) = sum(tanh(p) * tanh(p))
        let mut store = ParamStore::new();
        store.insert("p", Tensor::vector(vec![0.3, -1.2, 2.0])).unwrap();
        let report = grad_check(
            &store,
            |g, s| {
                let p = g.param(s, "p")?;
                let t = g.tanh(p)?;
                let sq = g.hadamard(t, t)?;
                g.sum_elements(sq)
            },
            1e-6,
            1e-7,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err());
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        // f(p) = 2p but pretend the derivative is 3 by scaling after the
        // loss is read: easiest corruption is an inconsistent forward.
        let mut store = ParamStore::new();
        store.insert("p", Tensor::scalar(1.0)).unwrap();
        let mut first = true;
        let report = grad_check(
            &store,
            move |g, s| {
                let p = g.param(s, "p")?;
                // analytic pass sees 3p, numeric passes see 2p
                let k = if std::mem::take(&mut first) { 3.0 } else { 2.0 };
                g.scale(p, k)
            },
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed());
        let worst = report.worst().unwrap();
        assert_eq!(worst.name, "p");
        assert!((worst.analytic - 3.0).abs() < 1e-9);
        assert!((worst.numeric - 2.0).abs() < 1e-6);
    }

    #[test]
    fn every_op_kind_survives_a_joint_check() {
        let mut store = ParamStore::new();
        store
            .insert("w", Tensor::matrix(3, 4, (0..12).map(|i| 0.1 * i as f64 - 0.5).collect()).unwrap())
            .unwrap();
        store.insert("b", Tensor::vector(vec![0.1, -0.2, 0.3])).unwrap();
        store.insert("x", Tensor::vector(vec![0.5, -0.5, 0.25, 1.0])).unwrap();
        store.insert("mixw", Tensor::vector(vec![0.2, -0.4, 0.9])).unwrap();
        store
            .insert("emb", Tensor::matrix(2, 3, vec![0.3, -0.1, 0.2, 0.7, 0.0, -0.6]).unwrap())
            .unwrap();

        let report = grad_check(
            &store,
            |g, s| {
                let w = g.param(s, "w")?;
                let b = g.param(s, "b")?;
                let x = g.param(s, "x")?;
                let mixw = g.param(s, "mixw")?;
                let emb = g.param(s, "emb")?;

                let a = g.affine(w, x, Some(b))?; // [3]
                let sg = g.sigmoid(a)?;
                let th = g.tanh(a)?;
                let re = g.relu(a)?;
                let weights = g.softmax(mixw)?;
                let mixed = g.mix(weights, &[sg, th, re])?;
                let e0 = g.row(emb, 0)?;
                let e1 = g.row(emb, 1)?;
                let cat = g.concat(&[mixed, e0])?; // [6]
                let first3 = g.slice(cat, 0, 3)?;
                let summed = g.add(&[first3, e1])?;
                let scaled = g.scale(summed, 0.7)?;
                let had = g.hadamard(scaled, th)?;
                let ls = g.log_softmax(had)?;
                let pick = g.slice(ls, 1, 1)?;
                let total = g.sum_elements(had)?;
                let joined = g.concat(&[pick, total])?;
                g.sum_elements(joined)
            },
            1e-6,
            1e-7,
        )
        .unwrap();
        assert!(report.passed(), "worst: {:?}", report.worst());
    }
}
