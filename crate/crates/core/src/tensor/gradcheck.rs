use super::{Graph, Tensor, TensorError, Var};
use crate::scalar::Scalar;

/// Denominator floor for [`relative_error`]; below it the comparison is
/// effectively absolute.
pub const REL_ERR_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// Parameter holding the worst entry.
    pub worst_param: String,
    pub worst_index: usize,
    pub entries_checked: usize,
    pub tolerance: f64,
    pub pass: bool,
}

/// Compare tape gradients against central finite differences.
///
/// `loss` receives a fresh graph and one leaf per parameter (in order) and
/// must return a scalar. Every entry of every parameter is perturbed by
/// `±h`; the parameters are restored before returning.
pub fn finite_diff_check<T: Scalar>(
    names: &[String],
    params: &mut [Tensor<T>],
    loss: impl Fn(&mut Graph<T>, &[Var]) -> Result<Var, TensorError>,
    h: f64,
    tolerance: f64,
) -> Result<FdReport, TensorError> {
    assert_eq!(names.len(), params.len(), "one name per parameter");
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let l = loss(&mut g, &vars)?;
    let grads = g.backward(l)?;
    let analytic: Vec<Tensor<T>> = vars.iter().map(|&v| grads.get(v).clone()).collect();

    let eval = |params: &[Tensor<T>]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
        let l = loss(&mut g, &vars)?;
        Ok(g.value(l).item().as_f64())
    };

    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        entries_checked: 0,
        tolerance,
        pass: true,
    };
    let step = T::lit(h);
    for pi in 0..params.len() {
        for j in 0..params[pi].len() {
            let orig = params[pi].data()[j];
            params[pi].data_mut()[j] = orig + step;
            let fp = eval(params)?;
            params[pi].data_mut()[j] = orig - step;
            let fm = eval(params)?;
            params[pi].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let err = relative_error(analytic[pi].data()[j].as_f64(), numeric);
            report.entries_checked += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst_param = names[pi].clone();
                report.worst_index = j;
            }
        }
    }
    report.pass = report.max_rel_error < tolerance;
    Ok(report)
}
