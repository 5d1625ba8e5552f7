use super::{Graph, Real, Tensor, Var};
use crate::error::Result;

/// Outcome of a central-difference gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|a - n| / max(|a|, |n|, 1e-8)` over checked coordinates.
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Coordinates whose perturbation flipped a ReLU mask or max-pool
    /// argmax, where the function is not differentiable along the step.
    pub skipped: usize,
    /// Largest autodiff gradient magnitude seen.
    pub max_abs_grad: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_error <= tolerance
    }
}

fn autodiff<T, F>(f: &mut F, input: &Tensor<T>) -> Result<(Vec<f64>, u64)>
where
    T: Real,
    F: FnMut(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut graph = Graph::tracking_decisions();
    let x = graph.leaf(input.clone().requiring_grad());
    let out = f(&mut graph, x)?;
    graph.backward(out)?;
    let grad = graph
        .grad(x)
        .map(|g| g.iter().map(|v| v.as_f64()).collect())
        .unwrap_or_else(|| vec![0.0; input.numel()]);
    Ok((grad, graph.decision_signature()))
}

fn compare<T, F>(mut f: F, input: &Tensor<T>, h: f64, analytic: &[f64], signature: u64) -> Result<GradCheckReport>
where
    T: Real,
    F: FnMut(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut eval = |data: Vec<T>| -> Result<(T, u64)> {
        let mut g = Graph::tracking_decisions();
        let v = g.leaf(Tensor::new(input.shape().to_vec(), data)?);
        let out = f(&mut g, v)?;
        Ok((g.value(out)[0], g.decision_signature()))
    };
    let (_, base) = eval(input.data().to_vec())?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: None,
        checked: 0,
        skipped: 0,
        max_abs_grad: analytic.iter().fold(0.0, |m, a| m.max(a.abs())),
    };
    for i in 0..input.numel() {
        let mut plus = input.data().to_vec();
        let mut minus = input.data().to_vec();
        plus[i] = plus[i] + T::of(h);
        minus[i] = minus[i] - T::of(h);
        // the step actually representable at this precision
        let span = plus[i] - minus[i];
        let (fp, sp) = eval(plus)?;
        let (fm, sm) = eval(minus)?;
        if sp != base || sm != base || base != signature {
            report.skipped += 1;
            continue;
        }
        // difference taken before narrowing, or a wide oracle gains nothing
        let numeric = ((fp - fm) / span).as_f64();
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        report.checked += 1;
        if report.worst_index.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = Some(i);
        }
    }
    Ok(report)
}

/// Compares the autodiff gradient of `f` at `input` with central
/// differences `(f(x+h) - f(x-h)) / 2h`, coordinate by coordinate.
///
/// `f` receives a fresh graph and the input variable and returns a scalar.
pub fn grad_check<T, F>(mut f: F, input: &Tensor<T>, h: f64) -> Result<GradCheckReport>
where
    T: Real,
    F: FnMut(&mut Graph<T>, Var) -> Result<Var>,
{
    let (analytic, signature) = autodiff(&mut f, input)?;
    compare(f, input, h, &analytic, signature)
}

/// Checks the autodiff gradient of `engine` against central differences of
/// `oracle`, the same function evaluated in a wider type `O` at the same
/// point.
///
/// Differences in the engine's own precision cannot resolve small
/// derivatives: the rounding error of `f(x±h)` divided by `2h` swamps them.
pub fn grad_check_mixed<A, O, FA, FO>(mut engine: FA, oracle: FO, input: &Tensor<A>, h: f64) -> Result<GradCheckReport>
where
    A: Real,
    O: Real,
    FA: FnMut(&mut Graph<A>, Var) -> Result<Var>,
    FO: FnMut(&mut Graph<O>, Var) -> Result<Var>,
{
    let (analytic, signature) = autodiff(&mut engine, input)?;
    let wide: Tensor<O> = input.cast();
    let mut report = compare(oracle, &wide, h, &analytic, signature)?;
    // the wide baseline may sit on the other side of a kink
    if report.checked == 0 && report.skipped > 0 {
        report.max_rel_error = f64::INFINITY;
    }
    Ok(report)
}
