use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_relative_error: f64,
    /// `(input index, flat element index)` of the worst coordinate.
    pub worst_index: (usize, usize),
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_relative_error < tol
    }
}

/// Compares tape gradients of a scalar function against central differences.
///
/// `f` receives a fresh tape and one trainable leaf per input and must return
/// a scalar node. The relative error per coordinate uses the denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_difference_check<F>(
    op_name: &str,
    f: F,
    inputs: &[Tensor],
    h: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::InvalidShape {
            op: "finite_difference_check",
            detail: format!("step must be positive, got {h}"),
        });
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.numel() != 1 {
            return Err(Error::NonScalarLoss(v.shape().to_vec()));
        }
        let x = v.item();
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("{op_name} produced {x}")));
        }
        Ok(x)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).item().is_finite() {
        return Err(Error::NonFinite(format!("{op_name} forward")));
    }
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let mut report = GradCheckReport {
        op_name: op_name.to_string(),
        max_relative_error: 0.0,
        worst_index: (0, 0),
    };
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for idx in 0..input.numel() {
            let orig = input.data()[idx];
            probe[k].data_mut()[idx] = orig + h;
            let plus = eval(&probe)?;
            probe[k].data_mut()[idx] = orig - h;
            let minus = eval(&probe)?;
            probe[k].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[k].data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst_index = (k, idx);
            }
        }
    }
    Ok(report)
}
