use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Magnitude below which a derivative is compared absolutely.
///
/// Central differences carry round-off of order `eps * |f| / h`, about 1e-10
/// for O(10) losses at `h = 1e-4`; exactly-zero gradients (a bias followed by
/// instance norm) would otherwise report that noise as a large relative error.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    /// `max_i |analytic_i - numeric_i| / max(GRADCHECK_FLOOR, |numeric_i|)`.
    pub max_rel_error: f64,
    /// Coordinate where the maximum was attained.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Coordinates whose `x ± h` probes would have crossed a relu or l1 kink.
    pub kinks_crossed: usize,
}

/// Compare the tape gradient of a scalar function against central differences.
///
/// `f` receives a fresh tape and the input leaf and must return a scalar.
/// Probes replay the relu / leaky relu / l1 branches taken at `x`, so the
/// difference quotient measures the same linear piece the backward pass
/// differentiates even when `x ± h` straddles a kink.
pub fn gradcheck<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let scalar = |tape: &Tape<f64>, out: Var| {
        tape.value(out)
            .item()
            .ok_or_else(|| Error::NonScalarLoss(tape.value(out).shape().to_vec()))
    };

    let mut tape = Tape::recording_branches();
    let v = tape.param(x.clone());
    let out = f(&mut tape, v)?;
    let pattern = tape.branch_pattern().unwrap_or_default().to_vec();
    tape.backward(out)?;
    let analytic = tape
        .grad(v)
        .map(|g| g.data().to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let replay = |input: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::replaying_branches(pattern.clone());
        let v = tape.constant(input);
        let out = f(&mut tape, v)?;
        if tape.replay_diverged() {
            return Err(Error::InvalidArgument(
                "gradcheck function executed a different op sequence on a probe".into(),
            ));
        }
        scalar(&tape, out)
    };
    let crosses = |input: Tensor<f64>| -> Result<bool> {
        let mut tape = Tape::recording_branches();
        let v = tape.constant(input);
        f(&mut tape, v)?;
        Ok(tape.branch_pattern().unwrap_or_default() != pattern.as_slice())
    };

    let mut numeric = Vec::with_capacity(x.numel());
    let mut kinks_crossed = 0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = replay(probe.clone())?;
        let mut crossed = crosses(probe.clone())?;
        probe.data_mut()[i] = orig - h;
        let down = replay(probe.clone())?;
        crossed |= crosses(probe.clone())?;
        probe.data_mut()[i] = orig;
        kinks_crossed += usize::from(crossed);
        numeric.push((up - down) / (2.0 * h));
    }

    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(GRADCHECK_FLOOR))
        .enumerate()
        .fold((0, 0.0f64), |best, (i, e)| if e > best.1 { (i, e) } else { best });

    Ok(GradcheckReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
        kinks_crossed,
    })
}
