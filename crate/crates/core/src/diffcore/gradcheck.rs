use super::graph::{Graph, Var};
use super::tensor::Tensor;
use super::DiffError;

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input index, element index)` of the worst element.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// `|a − n| / max(|a|, |n|, 1e-6)`; the floor bounds the absolute error on near-zero entries.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn evaluate<F>(inputs: &[Tensor<f64>], build: &F) -> Result<f64, DiffError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, DiffError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(DiffError::NonScalar {
            shape: v.shape().to_vec(),
        });
    }
    Ok(v.data()[0])
}

/// Checks every element of every input of a scalar-valued graph.
///
/// `build` receives one learnable leaf per input and returns the scalar output.
/// Numeric derivatives use the fourth-order central stencil
/// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`.
pub fn grad_check<F>(inputs: &[Tensor<f64>], h: f64, build: F) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, DiffError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            let mut at = |delta: f64| -> Result<f64, DiffError> {
                work[i].data_mut()[j] = x0 + delta;
                let v = evaluate(&work, &build);
                work[i].data_mut()[j] = x0;
                v
            };
            let numeric =
                (-at(2.0 * h)? + 8.0 * at(h)? - 8.0 * at(-h)? + at(-2.0 * h)?) / (12.0 * h);
            let a = analytic[i][j];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = err.max(report.max_rel_err);
                report.worst = Some((i, j));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
