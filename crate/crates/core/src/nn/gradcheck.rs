//! Central finite-difference gradient checks.

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (tensor index, coordinate) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compare two gradient sets coordinate by coordinate.
pub fn compare(analytic: &[Vec<f64>], numeric: &[Vec<Option<f64>>], tol: f64) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        tol,
    };
    for (ti, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        for (j, (av, nv)) in a.iter().zip(n).enumerate() {
            let Some(nv) = nv else { continue };
            let e = relative_error(*av, *nv);
            report.checked += 1;
            if report.worst.is_none() || e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst = Some((ti, j));
            }
        }
    }
    report
}

fn coords(len: usize, max_per_tensor: Option<usize>) -> Vec<usize> {
    match max_per_tensor {
        Some(k) if k < len => {
            let step = len as f64 / k as f64;
            (0..k).map(|i| (i as f64 * step) as usize).collect()
        }
        _ => (0..len).collect(),
    }
}

/// Gradient of a scalar function of graph inputs, analytic and numeric.
pub fn input_gradients<F>(inputs: &[Tensor], eps: f64, f: &F) -> Result<(Vec<Vec<f64>>, Vec<Vec<Option<f64>>>)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();
    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for ti in 0..inputs.len() {
        let mut col = Vec::with_capacity(inputs[ti].len());
        for j in 0..inputs[ti].len() {
            let orig = work[ti].data()[j];
            work[ti].data_mut()[j] = orig + eps;
            let fp = eval(&work)?;
            work[ti].data_mut()[j] = orig - eps;
            let fm = eval(&work)?;
            work[ti].data_mut()[j] = orig;
            col.push(Some((fp - fm) / (2.0 * eps)));
        }
        numeric.push(col);
    }
    Ok((analytic, numeric))
}

/// Check the gradient of `f` with respect to every input coordinate.
pub fn check_inputs<F>(inputs: &[Tensor], eps: f64, tol: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (a, n) = input_gradients(inputs, eps, &f)?;
    Ok(compare(&a, &n, tol))
}

/// Gradient of a scalar model loss with respect to the parameters in `store`.
/// With `max_per_tensor`, only that many evenly spaced coordinates per
/// parameter tensor get a numeric estimate.
pub fn param_gradients<F>(
    store: &ParamStore,
    eps: f64,
    max_per_tensor: Option<usize>,
    f: &F,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<Option<f64>>>)>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    g.backward(out)?;
    let analytic = g.param_grads(store);
    let mut work = store.clone();
    let mut numeric = Vec::with_capacity(store.len());
    for id in store.ids() {
        let len = store.get(id).len();
        let mut col = vec![None; len];
        for j in coords(len, max_per_tensor) {
            let orig = work.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + eps;
            let mut gp = Graph::new();
            let op = f(&mut gp, &work)?;
            let fp = gp.value(op).item();
            work.get_mut(id).data_mut()[j] = orig - eps;
            let mut gm = Graph::new();
            let om = f(&mut gm, &work)?;
            let fm = gm.value(om).item();
            work.get_mut(id).data_mut()[j] = orig;
            col[j] = Some((fp - fm) / (2.0 * eps));
        }
        numeric.push(col);
    }
    Ok((analytic, numeric))
}

pub fn check_params<F>(store: &ParamStore, eps: f64, tol: f64, max_per_tensor: Option<usize>, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let (a, n) = param_gradients(store, eps, max_per_tensor, &f)?;
    Ok(compare(&a, &n, tol))
}
