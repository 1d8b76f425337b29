//! Central-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, OpKind, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct CheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Caps the number of checked entries per leaf (evenly strided).
    pub max_entries_per_leaf: Option<usize>,
    #[doc(hidden)]
    pub fault: Option<(OpKind, f64)>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_entries_per_leaf: None,
            fault: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LeafReport {
    pub leaf: usize,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub leaves: Vec<LeafReport>,
    /// max over leaves and entries of `|analytic - numeric| / max(1, |numeric|)`.
    pub max_rel_err: f64,
    pub non_finite: bool,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        !self.non_finite && self.max_rel_err < tolerance
    }
}

/// Compares the reverse-mode gradient of the scalar built by `f` against
/// central differences, perturbing each entry of each leaf in turn.
///
/// `f` receives a fresh graph and one variable per entry of `leaves` and
/// must be deterministic (reseed any randomness inside it).
pub fn finite_diff_check<F>(mut f: F, leaves: &[Tensor], opts: &CheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut graph = Graph::new();
    if let Some((kind, factor)) = opts.fault {
        graph.inject_vjp_fault(kind, factor);
    }
    let vars: Vec<Var> = leaves.iter().map(|t| graph.param(t.clone())).collect();
    let out = f(&mut graph, &vars)?;
    let mut non_finite = !graph.value(out).all_finite();
    let grads = graph.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(leaves)
        .map(|(&v, t)| grads.get(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();
    drop(grads);
    drop(graph);

    let mut eval = |point: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = point.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if v.len() != 1 {
            return Err(Error::Invalid {
                op: "finite_diff_check",
                detail: "function output is not scalar".into(),
            });
        }
        Ok(v.data()[0])
    };

    let mut point = leaves.to_vec();
    let mut reports = Vec::with_capacity(leaves.len());
    let mut overall: f64 = 0.0;
    for l in 0..point.len() {
        let len = point[l].len();
        let entries: Vec<usize> = match opts.max_entries_per_leaf {
            Some(cap) if cap < len => (0..cap).map(|j| j * len / cap).collect(),
            _ => (0..len).collect(),
        };
        let mut report = LeafReport {
            leaf: l,
            checked: entries.len(),
            max_rel_err: 0.0,
            worst_entry: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &i in &entries {
            let x = point[l].data()[i];
            point[l].data_mut()[i] = x + opts.step;
            let up = eval(&point)?;
            point[l].data_mut()[i] = x - opts.step;
            let down = eval(&point)?;
            point[l].data_mut()[i] = x;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic[l][i];
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            if !err.is_finite() {
                non_finite = true;
            }
            if err > report.max_rel_err || !err.is_finite() {
                report.max_rel_err = err;
                report.worst_entry = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        overall = overall.max(report.max_rel_err);
        if report.max_rel_err.is_nan() {
            overall = f64::NAN;
        }
        reports.push(report);
    }
    Ok(GradCheckReport {
        leaves: reports,
        max_rel_err: if non_finite { f64::INFINITY } else { overall },
        non_finite,
    })
}
