use super::{value_and_grad, Gradients, ParamStore, Tape, Var};
use crate::error::Result;

/// Entries compared per tensor; larger tensors are sampled at an even stride.
const MAX_ENTRIES_PER_PARAM: usize = 24;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compares reverse-mode gradients with central differences of step `h`.
///
/// The relative error per entry is
/// `|analytic - fd| / max(|analytic|, |fd|, 1e-12)`.
pub fn finite_diff_check(
    params: &ParamStore<f64>,
    computation: impl Fn(&mut Tape<'_, f64>) -> Result<Var>,
    h: f64,
) -> Result<GradCheckReport> {
    let (_, analytic) = value_and_grad(params, &computation)?;
    check_against(params, &computation, &analytic, h)
}

/// Same as [`finite_diff_check`] with caller-supplied analytic gradients.
pub fn check_against(
    params: &ParamStore<f64>,
    computation: impl Fn(&mut Tape<'_, f64>) -> Result<Var>,
    analytic: &Gradients<f64>,
    h: f64,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut probe = params.clone();
    let names: Vec<String> = params.trainable_names().map(str::to_owned).collect();
    for name in names {
        let Some(grad) = analytic.get(&name) else {
            continue;
        };
        let base = params.value(&name)?.clone();
        let n = base.len();
        let picks = n.min(MAX_ENTRIES_PER_PARAM);
        for s in 0..picks {
            let flat = s * n / picks;
            let eval = |probe: &mut ParamStore<f64>, delta: f64| -> Result<f64> {
                let mut w = base.clone();
                w.as_slice_mut().expect("standard layout")[flat] += delta;
                probe.set(&name, w)?;
                let mut tape = Tape::new(probe);
                let out = computation(&mut tape)?;
                Ok(tape.scalar(out))
            };
            let plus = eval(&mut probe, h)?;
            let minus = eval(&mut probe, -h)?;
            let fd = (plus - minus) / (2.0 * h);
            let a = grad.as_slice().expect("standard layout")[flat];
            let denom = a.abs().max(fd.abs()).max(1e-12);
            let err = (a - fd).abs() / denom;
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), flat));
            }
        }
        probe.set(&name, base)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Init, Mlp};
    use ndarray::Array2;

    fn mlp_loss<'a>(mlp: &'a Mlp, x: &Array2<f64>) -> impl Fn(&mut Tape<'_, f64>) -> Result<Var> + 'a {
        let x = x.clone();
        move |t| {
            let xv = t.constant(x.clone())?;
            let y = mlp.forward(t, xv)?;
            let sq = t.mul(y, y)?;
            t.sum(sq)
        }
    }

    fn random_mlp() -> (ParamStore<f64>, Mlp, Array2<f64>) {
        let mut params = ParamStore::<f64>::new(5);
        let mlp = Mlp::register(&mut params, "mlp", 4, 6, Init::TruncatedNormal { std: 0.5 }).unwrap();
        let x = Array2::from_shape_fn((3, 4), |(i, j)| ((i * 4 + j) as f64 * 0.37).sin());
        (params, mlp, x)
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let (params, mlp, x) = random_mlp();
        let report = finite_diff_check(&params, mlp_loss(&mlp, &x), 1e-5).unwrap();
        assert!(report.checked > 0);
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn doubled_gradients_are_caught() {
        let (params, mlp, x) = random_mlp();
        let f = mlp_loss(&mlp, &x);
        let (_, mut analytic) = value_and_grad(&params, &f).unwrap();
        analytic.scale(2.0);
        let report = check_against(&params, &f, &analytic, 1e-5).unwrap();
        assert!((report.max_rel_error - 0.5).abs() < 1e-4, "{report:?}");
        assert!(!report.passes(1e-4));
    }

    #[test]
    fn no_trainable_parameters_is_vacuous() {
        let mut params = ParamStore::<f64>::new(0);
        params.insert("c", Array2::ones((2, 2)), false).unwrap();
        let report = finite_diff_check(
            &params,
            |t| {
                let c = t.param("c")?;
                t.sum(c)
            },
            1e-5,
        )
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
        assert_eq!(report.checked, 0);
        assert!(report.worst.is_none());
    }
}
