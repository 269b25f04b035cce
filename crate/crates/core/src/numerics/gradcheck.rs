//! Central-difference gradient verification for tape-built functions.

use super::tape::{Tape, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (parameter slot, flat index) of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

/// Compare reverse-mode gradients of `build` against central differences.
///
/// `build` receives one leaf per entry of `thetas` (with the given shapes)
/// and must return a scalar root. `step` is the finite-difference half-step.
/// Relative error per coordinate is `|a - n| / max(1e-8, |n|)`.
pub fn gradcheck<B>(
    build: B,
    thetas: &[(Vec<f64>, usize, usize)],
    step: f64,
) -> GradCheckReport
where
    B: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |values: &[Vec<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values
            .iter()
            .zip(thetas)
            .map(|(v, (_, r, c))| tape.param(std::sync::Arc::new(v.clone()), *r, *c))
            .collect();
        let root = build(&mut tape, &vars);
        tape.scalar_value(root)
    };

    // Analytic gradients.
    let mut tape = Tape::new();
    let vars: Vec<Var> = thetas
        .iter()
        .map(|(v, r, c)| tape.param(std::sync::Arc::new(v.clone()), *r, *c))
        .collect();
    let root = build(&mut tape, &vars);
    let grads = tape.backward(root).expect("gradcheck backward failed");

    let base: Vec<Vec<f64>> = thetas.iter().map(|(v, _, _)| v.clone()).collect();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };

    for (slot, (theta, _, _)) in thetas.iter().enumerate() {
        let g = grads
            .get(vars[slot])
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; theta.len()]);
        for i in 0..theta.len() {
            let mut plus = base.clone();
            plus[slot][i] += step;
            let mut minus = base.clone();
            minus[slot][i] -= step;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
            let rel = (g[i] - numeric).abs() / f64::max(1e-8, numeric.abs());
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (slot, i);
                report.analytic = g[i];
                report.numeric = numeric;
            }
        }
    }
    report
}

/// Convenience wrapper for a single flat parameter vector.
pub fn gradcheck_single<B>(build: B, theta: &[f64], rows: usize, cols: usize, step: f64) -> GradCheckReport
where
    B: Fn(&mut Tape<f64>, Var) -> Var,
{
    gradcheck(
        |tape, vars| build(tape, vars[0]),
        &[(theta.to_vec(), rows, cols)],
        step,
    )
}
