use super::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Relative error with the denominator floored at `1e-8`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Checks `backward` for a scalar function of one tensor.
///
/// `f` records its computation on the given tape starting from the input
/// variable and returns the scalar output. It is called once with a
/// grad-enabled input and `2 · numel` more times with perturbed constants.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, step: T) -> Result<GradCheck>
where
    T: Real,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    tape.backward(out)?;
    let analytic: Vec<f64> = tape
        .grad(xv)
        .ok_or_else(|| Error::contract("grad_check: input received no gradient"))?
        .data()
        .iter()
        .map(|v| to_f64(*v))
        .collect();

    let eval = |probe: Tensor<T>| -> Result<T> {
        let mut tape = Tape::new();
        let v = tape.constant(probe);
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).data()[0])
    };

    let two_h = step + step;
    let mut numeric = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] = plus.data()[i] + step;
        let mut minus = x.clone();
        minus.data_mut()[i] = minus.data()[i] - step;
        let d = (eval(plus)? - eval(minus)?) / two_h;
        numeric.push(to_f64(d));
    }

    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });

    Ok(GradCheck {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}

fn to_f64<T: Real>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}
