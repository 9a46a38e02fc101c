use super::dense::Tensor;
use super::error::{Result, TensorError};
use super::graph::{Graph, Var};
use crate::exec;

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// (parameter index, flat coordinate) of the largest relative error.
    pub worst: (usize, usize),
    pub coords_checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Probe half-width; must lie in `[1e-6, 1e-4]`.
    pub eps: f64,
    pub tol: f64,
    /// Denominator floor: coordinates whose gradient magnitude is below this
    /// are compared on an absolute scale.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
        }
    }
}

/// Relative error used by the checker.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Check `f`'s reverse-mode gradient against `(f(θ+εe) − f(θ−εe)) / 2ε`
/// at every coordinate of every parameter tensor.
///
/// `f` receives a fresh graph and the parameters bound as tracked leaves, in
/// order, and must return a scalar. Always double-wide.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Sync + Send,
{
    grad_check_with(
        f,
        params,
        GradCheckOptions {
            eps,
            tol,
            ..GradCheckOptions::default()
        },
    )
}

pub fn grad_check_with<F>(f: F, params: &[Tensor<f64>], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Sync + Send,
{
    if !(1e-6..=1e-4).contains(&opts.eps) {
        return Err(TensorError::Invalid(format!(
            "grad_check: eps {} outside [1e-6, 1e-4]",
            opts.eps
        )));
    }
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if !v.is_scalar() {
            return Err(TensorError::NonScalarOutput(v.shape().to_vec()));
        }
        Ok(v.item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| match g.grad(v) {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; p.numel()],
        })
        .collect();

    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..p.numel()).map(move |j| (i, j)))
        .collect();
    let numeric = exec::map_indexed(coords.len(), |c| -> Result<f64> {
        let (i, j) = coords[c];
        let mut probe = params.to_vec();
        let base = probe[i].data()[j];
        probe[i].data_mut()[j] = base + opts.eps;
        let plus = eval(&probe)?;
        probe[i].data_mut()[j] = base - opts.eps;
        let minus = eval(&probe)?;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(TensorError::NonFinite(format!(
                "objective at parameter {i} coordinate {j}: f(+)={plus}, f(-)={minus}"
            )));
        }
        Ok((plus - minus) / (2.0 * opts.eps))
    });

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: (0, 0),
        coords_checked: coords.len(),
        tol: opts.tol,
    };
    for (&(i, j), num) in coords.iter().zip(numeric) {
        let num = num?;
        let a = analytic[i][j];
        let rel = relative_error(a, num, opts.floor);
        report.max_abs_error = report.max_abs_error.max((a - num).abs());
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = (i, j);
        }
    }
    Ok(report)
}
