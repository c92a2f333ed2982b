//! Central finite-difference oracle for tape gradients.
//!
//! The oracle only evaluates forward values, so it stays independent of the
//! adjoint code it checks.

use super::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Worst element of a gradient comparison.
#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Denominator floor for the element-wise relative error
/// `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub const REL_FLOOR: f64 = 1e-3;

/// Compares reverse-mode gradients of the scalar `f(inputs)` against central
/// differences with step `h`, for every element of every input.
pub fn check<G>(inputs: &[Tensor<f64>], h: f64, f: G) -> Result<GradReport>
where
    G: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(&t.clone().with_grad(true)))
        .collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::Contract("gradient check needs a scalar function".into()));
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or(vec![0.0; t.numel()], |g| g.to_vec()))
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::no_grad();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.leaf(x)).collect();
        let o = f(&mut t, &vs)?;
        Ok(t.value(o)[0])
    };

    let mut worst = GradReport {
        max_rel_err: 0.0,
        input: 0,
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ii, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let orig = t.data()[j];
            work[ii].data_mut()[j] = orig + h;
            let fp = eval(&work)?;
            work[ii].data_mut()[j] = orig - h;
            let fm = eval(&work)?;
            work[ii].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ii][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > worst.max_rel_err || rel.is_nan() {
                worst = GradReport {
                    max_rel_err: rel,
                    input: ii,
                    index: j,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(worst)
}

/// Same comparison for every trainable parameter of `store`, where `f`
/// reads its parameters through [`Tape::param`].
pub fn check_store<G>(store: &ParamStore<f64>, h: f64, f: G) -> Result<GradReport>
where
    G: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut base = store.clone();
    base.zero_grad();
    let mut tape = Tape::new();
    let out = f(&mut tape, &base)?;
    if tape.value(out).len() != 1 {
        return Err(Error::Contract("gradient check needs a scalar function".into()));
    }
    tape.backward(out)?;
    base.accumulate_grads(&tape)?;
    drop(tape);

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut t = Tape::no_grad();
        let o = f(&mut t, s)?;
        Ok(t.value(o)[0])
    };
    let mut worst = GradReport {
        max_rel_err: 0.0,
        input: 0,
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let names = base.trainable_names();
    let mut work = base.clone();
    for (ii, name) in names.iter().enumerate() {
        let t = base.get(name)?;
        let analytic = t.grad.clone().unwrap_or_else(|| vec![0.0; t.numel()]);
        for (j, &a) in analytic.iter().enumerate() {
            let orig = t.data()[j];
            work.get_mut(name)?.data_mut()[j] = orig + h;
            let fp = eval(&work)?;
            work.get_mut(name)?.data_mut()[j] = orig - h;
            let fm = eval(&work)?;
            work.get_mut(name)?.data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > worst.max_rel_err || rel.is_nan() {
                worst = GradReport {
                    max_rel_err: rel,
                    input: ii,
                    index: j,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(worst)
}

/// Weighted sum `Σ w ⊙ x` with fixed pseudo-random weights, turning any
/// tensor-valued op into a scalar with non-degenerate gradients.
pub fn probe(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let n = tape.value(x).len();
    let shape = tape.shape(x).to_vec();
    let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let w: Vec<f64> = (0..n)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect();
    let wv = tape.constant(&shape, w)?;
    let prod = tape.mul(x, wv)?;
    Ok(tape.sum(prod))
}
