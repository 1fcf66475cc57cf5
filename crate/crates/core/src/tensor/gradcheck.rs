use super::{Tape, Tensor, TensorError, Var};

/// Compares the tape gradient of a scalar function against central
/// differences and returns the worst coordinate error
/// `|g_analytic - g_fd| / max(1, |g_fd|)`.
///
/// `f` receives a fresh tape and the probe variable for `x`. It must be
/// deterministic; two evaluations at the same point that disagree make the
/// oracle invalid and produce a contract error.
pub fn finite_diff_check<F, E>(f: F, x: &Tensor, eps: f64) -> Result<f64, E>
where
    F: Fn(&Tape, Var) -> Result<Var, E>,
    E: From<TensorError>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(TensorError::Domain {
            op: "finite_diff_check",
            reason: format!("eps must be positive, got {eps}"),
        }
        .into());
    }
    let probe = x.detached().with_requires_grad(true);

    let tape = Tape::new();
    let xv = tape.leaf(&probe);
    let loss = f(&tape, xv)?;
    let grads = tape.backward(loss)?;
    let analytic = grads.wrt(xv).expect("probe requires grad");

    let eval = |t: &Tensor| -> Result<f64, E> {
        let tape = Tape::new();
        let v = tape.leaf(t);
        let out = f(&tape, v)?;
        let value = tape.value(out);
        if value.numel() != 1 {
            return Err(
                TensorError::Contract(format!("function under check returned shape {:?}", value.shape())).into(),
            );
        }
        Ok(value.item())
    };

    let base = x.detached();
    let f0 = eval(&base)?;
    if f0.to_bits() != eval(&base)?.to_bits() {
        return Err(TensorError::Contract("function is not deterministic at fixed input".into()).into());
    }

    let mut worst: f64 = 0.0;
    let mut shifted = base.clone();
    for i in 0..base.numel() {
        let orig = base.data()[i];
        shifted.data_mut()[i] = orig + eps;
        let plus = eval(&shifted)?;
        shifted.data_mut()[i] = orig - eps;
        let minus = eval(&shifted)?;
        shifted.data_mut()[i] = orig;
        let fd = (plus - minus) / (2.0 * eps);
        let err = (analytic.data()[i] - fd).abs() / fd.abs().max(1.0);
        worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
    }
    Ok(worst)
}
