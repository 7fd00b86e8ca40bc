//! Central finite-difference verification of reverse-mode gradients.

use crate::autodiff::{GradMode, Graph, Var};
use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Magnitudes below this are compared on an absolute scale.
pub const DEFAULT_FLOOR: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub step: f64,
    pub floor: f64,
    /// Perturbs one analytic coordinate before comparing; used to prove the check can fail.
    pub corrupt: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            floor: DEFAULT_FLOOR,
            corrupt: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub worst: Option<Mismatch>,
    pub coordinates: usize,
}

impl GradcheckReport {
    fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64, floor: f64) {
        let err = relative_error(analytic, numeric, floor);
        self.coordinates += 1;
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = err.max(self.max_rel_error);
            self.worst = Some(Mismatch {
                name: name.to_string(),
                index,
                analytic,
                numeric,
            });
        }
    }

    fn empty() -> Self {
        Self {
            max_rel_error: 0.0,
            worst: None,
            coordinates: 0,
        }
    }
}

fn scalar_of(g: &Graph<f64>, v: Var) -> f64 {
    g.value(v).data()[0]
}

/// Max relative error between the reverse-mode gradient of scalar `f` at `x` and
/// central differences `(f(x+h) - f(x-h)) / 2h`.
pub fn gradcheck<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    Ok(gradcheck_with(f, x, &GradcheckOptions { step: h, ..Default::default() })?.max_rel_error)
}

pub fn gradcheck_with<F>(f: F, x: &Tensor<f64>, opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new(GradMode::All);
    let xv = g.variable(x.clone());
    let out = f(&mut g, xv)?;
    let grads = g.backward(out)?;
    let mut analytic = grads
        .get(&g, xv)
        .map(|t| t.into_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);
    if opts.corrupt {
        analytic[0] += 1e-2 * (1.0 + analytic[0].abs());
    }

    let eval = |t: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new(GradMode::None);
        let v = g.input(t);
        let out = f(&mut g, v)?;
        Ok(scalar_of(&g, out))
    };
    let mut report = GradcheckReport::empty();
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[i] += opts.step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= opts.step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * opts.step);
        report.record("x", i, a, numeric, opts.floor);
    }
    Ok(report)
}

/// Checks the gradient of `f` with respect to every scalar of every parameter in `store`.
pub fn gradcheck_params<F>(
    store: &ParamStore<f64>,
    f: F,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new(GradMode::All);
    let out = f(&mut g, store)?;
    let grads = g.backward(out)?;
    let mut analytic_store = store.clone();
    grads.write_param_grads(&g, &mut analytic_store);

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(GradMode::None);
        let out = f(&mut g, s)?;
        Ok(scalar_of(&g, out))
    };

    let mut report = GradcheckReport::empty();
    let mut probe = store.clone();
    let mut corrupted = !opts.corrupt;
    for id in store.ids() {
        let p = analytic_store.param(id);
        let n = p.tensor.numel();
        let mut analytic = p
            .grad
            .as_ref()
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        if !corrupted {
            analytic[0] += 1e-2 * (1.0 + analytic[0].abs());
            corrupted = true;
        }
        for (i, &a) in analytic.iter().enumerate() {
            let orig = store.tensor(id).data()[i];
            probe.param_mut(id).tensor.data_mut()[i] = orig + opts.step;
            let up = eval(&probe)?;
            probe.param_mut(id).tensor.data_mut()[i] = orig - opts.step;
            let down = eval(&probe)?;
            probe.param_mut(id).tensor.data_mut()[i] = orig;
            report.record(&p.name, i, a, (up - down) / (2.0 * opts.step), opts.floor);
        }
    }
    Ok(report)
}
