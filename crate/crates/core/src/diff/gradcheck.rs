use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Op, Tape, Tensor, Var};
use crate::error::Result;

const PERTURBATION: f64 = 1e-4;
const MAX_ENTRIES: usize = 64;
/// Magnitude below which gradients are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(|e| e.max_rel_error >= self.tolerance)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares reverse-mode gradients of `loss` against five-point central
/// finite differences for every parameter and named input of the tape.
///
/// `inputs` are bound first (see [`Tape::forward_eval`]); up to 64 entries
/// per leaf are probed, chosen by a fixed seed.
pub fn check_gradients(
    tape: &mut Tape,
    loss: Var,
    inputs: &[(&str, Tensor)],
    tolerance: f64,
) -> Result<GradCheckReport> {
    tape.forward_eval(inputs)?;
    let grads = tape.backward(loss)?;
    let mut leaves: Vec<(String, Var)> = tape
        .param_vars()
        .into_iter()
        .map(|(id, v)| (format!("param#{}", id.index()), v))
        .collect();
    leaves.extend(tape.input_vars());
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let mut entries = Vec::with_capacity(leaves.len());
    for (name, var) in leaves {
        let analytic = grads.wrt(tape, var);
        let n = analytic.len();
        let picks: Vec<usize> = if n <= MAX_ENTRIES {
            (0..n).collect()
        } else {
            let mut p = sample(&mut rng, n, MAX_ENTRIES).into_vec();
            p.sort_unstable();
            p
        };
        let mut worst = 0.0f64;
        for &i in &picks {
            let original = tape.value(var).data()[i];
            let h = PERTURBATION;
            let p1 = probe(tape, var, i, original + h, loss)?;
            let m1 = probe(tape, var, i, original - h, loss)?;
            let p2 = probe(tape, var, i, original + 2.0 * h, loss)?;
            let m2 = probe(tape, var, i, original - 2.0 * h, loss)?;
            probe(tape, var, i, original, loss)?;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
        let name = match tape.op(var) {
            Op::Input(n) => n.clone(),
            _ => name,
        };
        entries.push(GradCheckEntry {
            name,
            checked: picks.len(),
            max_rel_error: worst,
        });
    }
    Ok(GradCheckReport { tolerance, entries })
}

fn probe(tape: &mut Tape, var: Var, index: usize, value: f64, loss: Var) -> Result<f64> {
    tape.leaf_value_mut(var).data_mut()[index] = value;
    tape.replay_from(var.index() + 1)?;
    tape.value(loss).item()
}
