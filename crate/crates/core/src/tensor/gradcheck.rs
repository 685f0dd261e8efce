use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Analytic-vs-numeric agreement for one input tensor.
#[derive(Clone, Debug, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`; zero when both vanish.
    pub rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn worst(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, e| m.max(e.rel_error))
    }
}

/// Reduces a non-scalar output to a scalar with fixed pseudo-random weights,
/// so that gradients which cancel under a plain sum (batch norm) are still probed.
fn scalarize(tape: &mut Tape, out: Var) -> Result<Var> {
    if tape.value(out).numel() == 1 {
        return Ok(out);
    }
    let shape = tape.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
    let weights = Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0));
    let w = tape.constant(weights);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn evaluate<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = f(&mut tape, &vars)?;
    let loss = scalarize(&mut tape, out)?;
    Ok(tape.value(loss).item())
}

/// Compares the tape's gradients against central finite differences for every
/// named input.
///
/// `f` builds the subgraph from leaf handles in the order given by `inputs`.
/// Failures are reported in the returned data, not as errors.
pub fn grad_check<F>(inputs: &[(&str, Tensor)], epsilon: f64, tolerance: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let loss = scalarize(&mut tape, out)?;
    tape.backward(loss)?;

    let mut point: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut entries = Vec::with_capacity(inputs.len());
    for (k, (name, value)) in inputs.iter().enumerate() {
        let analytic = tape
            .grad(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(value.shape()));
        let mut numeric = Vec::with_capacity(value.numel());
        for i in 0..value.numel() {
            let orig = point[k].data()[i];
            point[k].data_mut()[i] = orig + epsilon;
            let plus = evaluate(&point, &f)?;
            point[k].data_mut()[i] = orig - epsilon;
            let minus = evaluate(&point, &f)?;
            point[k].data_mut()[i] = orig;
            numeric.push((plus - minus) / (2.0 * epsilon));
        }
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        let mut max_abs: f64 = 0.0;
        for (a, n) in analytic.data().iter().zip(&numeric) {
            diff2 += (a - n) * (a - n);
            a2 += a * a;
            n2 += n * n;
            max_abs = max_abs.max((a - n).abs());
        }
        let denom = a2.max(n2).sqrt();
        let rel_error = if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom };
        entries.push(GradCheckEntry {
            name: name.to_string(),
            rel_error,
            max_abs_error: max_abs,
            passed: rel_error.is_finite() && rel_error <= tolerance,
        });
    }
    Ok(GradCheckReport {
        epsilon,
        tolerance,
        entries,
    })
}
