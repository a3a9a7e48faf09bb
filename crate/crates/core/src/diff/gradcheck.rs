//! Central-difference gradient checking.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub h: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Denominator floor so near-zero gradients compare absolutely.
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-5,
            tol: 1e-6,
            abs_floor: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InputCheck {
    pub index: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Element indices where either gradient was NaN or infinite.
    pub non_finite: Vec<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub inputs: Vec<InputCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs
            .iter()
            .map(|c| c.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.inputs
            .iter()
            .all(|c| c.non_finite.is_empty() && c.max_rel_error < self.tol)
    }
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares tape gradients of the scalar function `f` against central
/// differences for every element of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor], track: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|t| {
                let t = if track {
                    t.clone().with_grad()
                } else {
                    t.clone()
                };
                tape.leaf(&t)
            })
            .collect();
        let out = f(&mut tape, &vars)?;
        let value = tape.scalar(out);
        if !track {
            return Ok((value, Vec::new()));
        }
        let grads = tape.backward(out)?;
        let per_input = vars
            .iter()
            .zip(values)
            .map(|(v, t)| {
                grads
                    .get(*v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.len()])
            })
            .collect();
        Ok((value, per_input))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut checks = Vec::with_capacity(inputs.len());

    for (index, analytic) in analytic.into_iter().enumerate() {
        let mut numeric = vec![0.0; analytic.len()];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let orig = work[index].values()[e];
            work[index].values_mut()[e] = orig + cfg.h;
            let (plus, _) = eval(&work, false)?;
            work[index].values_mut()[e] = orig - cfg.h;
            let (minus, _) = eval(&work, false)?;
            work[index].values_mut()[e] = orig;
            *slot = (plus - minus) / (2.0 * cfg.h);
        }
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        let mut non_finite = Vec::new();
        for (e, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            if !a.is_finite() || !n.is_finite() {
                non_finite.push(e);
                continue;
            }
            max_abs = max_abs.max((a - n).abs());
            max_rel = max_rel.max(relative_error(*a, *n, cfg.abs_floor));
        }
        checks.push(InputCheck {
            index,
            max_rel_error: max_rel,
            max_abs_error: max_abs,
            non_finite,
            analytic,
            numeric,
        });
    }
    Ok(GradCheckReport {
        inputs: checks,
        tol: cfg.tol,
    })
}
