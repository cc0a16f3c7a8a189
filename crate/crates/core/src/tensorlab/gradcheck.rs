//! Central finite-difference verification of analytic gradients.

/// A scalar objective over named groups of flat parameters, with an
/// analytic gradient to check.
pub trait GradProblem {
    fn group_names(&self) -> Vec<String>;
    fn initial(&self) -> Vec<Vec<f64>>;
    fn value(&self, groups: &[Vec<f64>]) -> f64;
    fn gradient(&self, groups: &[Vec<f64>]) -> Vec<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub op_name: String,
    pub max_rel_error: f64,
    pub per_parameter_errors: Vec<(String, f64)>,
}

/// Norm-wise relative error `|a - n| / max(|a|, |n|)`; zero when both vanish.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

pub fn check_gradients(op_name: &str, problem: &dyn GradProblem, eps: f64) -> GradReport {
    let base = problem.initial();
    let analytic = problem.gradient(&base);
    let mut per = Vec::new();
    let mut work = base.clone();
    for (g, name) in problem.group_names().into_iter().enumerate() {
        let mut numeric = vec![0.0; base[g].len()];
        for i in 0..base[g].len() {
            let x = base[g][i];
            work[g][i] = x + eps;
            let fp = problem.value(&work);
            work[g][i] = x - eps;
            let fm = problem.value(&work);
            work[g][i] = x;
            numeric[i] = (fp - fm) / (2.0 * eps);
        }
        per.push((name, rel_error(&analytic[g], &numeric)));
    }
    let max_rel_error = per.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    GradReport {
        op_name: op_name.to_string(),
        max_rel_error,
        per_parameter_errors: per,
    }
}
