//! Central finite-difference checks of tape gradients.

use super::{Mlp, Parameterized, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Gradients smaller than this in magnitude are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

/// Outcome of one or more gradient checks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Where the largest error occurred.
    pub worst: String,
}

impl GradReport {
    fn record(&mut self, analytic: f64, numeric: f64, at: impl FnOnce() -> String) {
        self.checked += 1;
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        if err > self.max_rel_err || self.checked == 1 {
            self.max_rel_err = err.max(self.max_rel_err);
            self.worst = at();
        }
    }

    pub fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }
}

fn scalar_of(tape: &Tape<'_, f64>, v: Var) -> Result<f64> {
    let s = tape.scalar(v)?;
    if s.is_finite() {
        Ok(s)
    } else {
        Err(Error::NonFinite("loss under finite differences".into()))
    }
}

/// Compares d loss / d `theta` for the loss built by `f` with central differences of step `h`.
pub fn check_input<F>(theta: &Tensor<f64>, h: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape<'_, f64>, Var) -> Result<Var>,
{
    let eval = |t: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let p = tape.input(t);
        let l = f(&mut tape, p)?;
        scalar_of(&tape, l)
    };
    let with = theta.clone().with_grad();
    let mut tape = Tape::new();
    let p = tape.param(&with);
    let l = f(&mut tape, p)?;
    let grads = tape.backward(l)?;
    let g = grads.get_or_zeros(p, theta.numel());
    let mut report = GradReport::default();
    for i in 0..theta.numel() {
        let mut up = theta.clone();
        up.data_mut()[i] += h;
        let mut dn = theta.clone();
        dn.data_mut()[i] -= h;
        let fd = (eval(&up)? - eval(&dn)?) / (2.0 * h);
        report.record(g[i], fd, || format!("input[{i}]"));
    }
    Ok(report)
}

/// Checks the gradients of every parameter of `model` under the loss `f(tape, output, input)`.
pub fn check_mlp_params<F>(model: &Mlp<f64>, x: &Tensor<f64>, h: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape<'_, f64>, Var, Var) -> Result<Var>,
{
    let rng = crate::harness::stream(0, "gradcheck/unused");
    let eval = |m: &Mlp<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.input(x);
        let tr = m.forward(&mut tape, xv, false, &mut rng.clone())?;
        let l = f(&mut tape, tr.output, xv)?;
        scalar_of(&tape, l)
    };
    let mut work = model.clone();
    work.zero_grad();
    let grads = {
        let mut tape = Tape::new();
        let xv = tape.input(x);
        let tr = model.forward(&mut tape, xv, false, &mut rng.clone())?;
        let l = f(&mut tape, tr.output, xv)?;
        let g = tape.backward(l)?;
        work.accumulate_grads(&tr, &g)?;
        work.params().iter().map(|p| p.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.numel()])).collect::<Vec<_>>()
    };
    let mut report = GradReport::default();
    for (k, analytic) in grads.iter().enumerate() {
        for i in 0..analytic.len() {
            let mut up = model.clone();
            up.params_mut()[k].data_mut()[i] += h;
            let mut dn = model.clone();
            dn.params_mut()[k].data_mut()[i] -= h;
            let fd = (eval(&up)? - eval(&dn)?) / (2.0 * h);
            report.record(analytic[i], fd, || format!("param {k}[{i}]"));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Activation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn detects_a_wrong_gradient() {
        let x = Tensor::matrix(1, 3, vec![0.2, -0.4, 0.9]).unwrap();
        let ok = check_input(&x, 1e-6, |t, p| {
            let s = t.tanh(p);
            Ok(t.sum(s))
        })
        .unwrap();
        assert!(ok.max_rel_err < 1e-6 && ok.checked == 3);
        // detach hides the dependence from the tape but not from the differences
        let bad = check_input(&x, 1e-6, |t, p| {
            let d = t.detach(p);
            let s = t.tanh(d);
            let s = t.add(s, p)?;
            Ok(t.sum(s))
        })
        .unwrap();
        assert!(bad.max_rel_err > 0.1);
    }

    #[test]
    fn mlp_parameters_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Mlp::<f64>::new(&[3, 4, 2], Activation::Tanh, Activation::Identity, 0.0, &mut rng).unwrap();
        let x = Tensor::matrix(2, 3, vec![0.1, 0.5, -0.3, 0.8, -0.6, 0.2]).unwrap();
        let r = check_mlp_params(&m, &x, 1e-6, |t, out, _| t.softmax_cross_entropy(out, vec![1.0, 0.0, 0.3, 0.7], 1.0)).unwrap();
        assert_eq!(r.checked, m.num_params());
        assert!(r.max_rel_err < 1e-5, "{r:?}");
    }
}
