//! Central-difference verification of tape gradients, always at f64.
//!
//! Each parameter coordinate is perturbed by +/-eps and the loss re-evaluated.
//! If the two perturbed passes take different branches (pooling argmax flip,
//! relu/clip boundary crossing) the finite difference spans a kink and says
//! nothing about the analytic gradient, so the coordinate is reported as
//! excluded instead of checked.

use super::{Tape, Tensor, ValueId};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub worst_rel_err: f64,
    /// Parameter name and flat coordinate of the worst error.
    pub worst_at: Option<(String, usize)>,
    pub n_checked: usize,
    /// Coordinates skipped because perturbation crossed a branch boundary.
    pub excluded: Vec<(String, usize)>,
}

impl GradCheckReport {
    pub fn summary(&self) -> String {
        let at = match &self.worst_at {
            Some((name, i)) => format!("{name}[{i}]"),
            None => "-".to_string(),
        };
        format!(
            "checked {} coords, excluded {}, worst rel err {:.3e} at {}",
            self.n_checked,
            self.excluded.len(),
            self.worst_rel_err,
            at
        )
    }
}

/// Compare tape gradients of a scalar loss against central differences.
///
/// `build` must construct the same graph each call from the given leaves,
/// one per entry of `params`, in order. `eps` must lie in [1e-7, 1e-3].
pub fn grad_check<'e, F>(
    params: &[(String, Tensor<f64>)],
    eps: f64,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'e, f64>, &[ValueId]) -> Result<ValueId>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::invalid(format!(
            "grad_check: eps {eps} outside [1e-7, 1e-3]"
        )));
    }
    let mut work: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();

    // analytic pass
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = work.iter().map(|t| tape.leaf(t)).collect();
    let loss = build(&mut tape, &ids)?;
    if tape.values(loss).len() != 1 {
        return Err(Error::invalid("grad_check: loss must be scalar"));
    }
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(&work)
        .map(|(&id, t)| match tape.grad(id) {
            Some(g) => g.to_vec(),
            None => vec![0.0; t.numel()],
        })
        .collect();
    drop(tape);

    let eval = |work: &[Tensor<f64>]| -> Result<(f64, u64)> {
        let mut t = Tape::inference();
        let ids: Vec<ValueId> = work.iter().map(|w| t.leaf(w)).collect();
        let loss = build(&mut t, &ids)?;
        Ok((t.values(loss)[0], t.signature()))
    };

    let mut report = GradCheckReport {
        worst_rel_err: 0.0,
        worst_at: None,
        n_checked: 0,
        excluded: Vec::new(),
    };
    for pi in 0..params.len() {
        for ci in 0..work[pi].numel() {
            let orig = work[pi].values[ci];
            work[pi].values[ci] = orig + eps;
            let (f_plus, sig_plus) = eval(&work)?;
            work[pi].values[ci] = orig - eps;
            let (f_minus, sig_minus) = eval(&work)?;
            work[pi].values[ci] = orig;
            if sig_plus != sig_minus {
                report.excluded.push((params[pi].0.clone(), ci));
                continue;
            }
            let fd = (f_plus - f_minus) / (2.0 * eps);
            let g = analytic[pi][ci];
            // Central differences carry absolute noise around ulp(loss)/eps, so
            // relative comparison is meaningless once both sides sit below that
            // scale; the denominator floor turns those into absolute checks.
            let denom = g.abs().max(fd.abs()).max(1e-7);
            let err = (g - fd).abs() / denom;
            report.n_checked += 1;
            if err > report.worst_rel_err {
                report.worst_rel_err = err;
                report.worst_at = Some((params[pi].0.clone(), ci));
            }
        }
    }
    Ok(report)
}
