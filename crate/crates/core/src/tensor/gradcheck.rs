use super::{Result, Tape, Tensor, Var};

/// Outcome of comparing backward gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Worst `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    /// `(input index, flat coordinate)` where the worst error occurred.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are compared absolutely instead of amplifying rounding noise.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Checks the gradient of the scalar `f` at `params` against central
/// differences with step `fd_eps`, over every coordinate of every input.
pub fn grad_check<F>(f: F, params: &[Tensor], fd_eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| tape.grad(*v).unwrap()).collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = inputs.iter().map(|p| t.constant(p.clone())).collect();
        let out = f(&mut t, &vs)?;
        Ok(t.value(out).item())
    };

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    for (pi, grad) in analytic.iter().enumerate() {
        for k in 0..grad.numel() {
            let orig = work[pi].data()[k];
            work[pi].data_mut()[k] = orig + fd_eps;
            let plus = eval(&work)?;
            work[pi].data_mut()[k] = orig - fd_eps;
            let minus = eval(&work)?;
            work[pi].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * fd_eps);
            let a = grad.data()[k];
            let denom = a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            let err = (a - numeric).abs() / denom;
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = err;
                report.worst = Some((pi, k));
            }
        }
    }
    Ok(report)
}
