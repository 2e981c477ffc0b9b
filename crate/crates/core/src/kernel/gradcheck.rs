use super::{KernelError, Tape, Tensor, Var};

/// Wraps a tape-built scalar function into a value-and-gradient objective.
pub fn tape_objective<F>(f: F) -> impl Fn(&[Tensor]) -> Result<(f64, Vec<Tensor>), KernelError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, KernelError>,
{
    move |point: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = point.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        if !tape.value(out).is_scalar() {
            return Err(KernelError::Contract(format!(
                "objective must be scalar-valued, got shape {:?}",
                tape.value(out).shape()
            )));
        }
        let value = tape.value(out).data()[0];
        tape.backward(out)?;
        Ok((value, vars.iter().map(|&v| tape.grad_tensor(v)).collect()))
    }
}

/// Maximum relative error between the analytic gradient and central
/// differences, `|a − c| / max(1e-8, |a| + |c|)`, over every entry of `point`.
pub fn grad_check<F>(objective: F, point: &[Tensor], step: f64) -> Result<f64, KernelError>
where
    F: Fn(&[Tensor]) -> Result<(f64, Vec<Tensor>), KernelError>,
{
    if !(step > 0.0) {
        return Err(KernelError::Parameter(format!("finite-difference step must be positive, got {step}")));
    }
    let (_, analytic) = objective(point)?;
    if analytic.len() != point.len() {
        return Err(KernelError::Contract("objective returned a gradient list of the wrong length".into()));
    }
    let mut work = point.to_vec();
    let mut worst: f64 = 0.0;
    for (p, grad) in analytic.iter().enumerate() {
        if grad.shape() != point[p].shape() {
            return Err(KernelError::Dimension(format!(
                "gradient {:?} for parameter {:?}",
                grad.shape(),
                point[p].shape()
            )));
        }
        for e in 0..point[p].numel() {
            let orig = point[p].data()[e];
            work[p].data_mut()[e] = orig + step;
            let (plus, _) = objective(&work)?;
            work[p].data_mut()[e] = orig - step;
            let (minus, _) = objective(&work)?;
            work[p].data_mut()[e] = orig;
            let central = (plus - minus) / (2.0 * step);
            let a = grad.data()[e];
            let rel = (a - central).abs() / (a.abs() + central.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
