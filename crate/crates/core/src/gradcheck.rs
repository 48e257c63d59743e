//! Central finite-difference verification of reverse-mode gradients.

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Denominator floor for relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-7;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates with relative error at or below `tight`.
    pub within_tight: usize,
    pub max_rel: f64,
    pub worst: String,
    pub tight: f64,
}

impl GradCheckReport {
    fn new(tight: f64) -> Self {
        Self {
            tight,
            ..Default::default()
        }
    }

    fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let rel = relative_error(analytic, numeric);
        self.checked += 1;
        if rel <= self.tight {
            self.within_tight += 1;
        }
        if rel > self.max_rel {
            self.max_rel = rel;
            self.worst = format!("{} (analytic {analytic:e}, numeric {numeric:e})", label());
        }
    }

    pub fn tight_fraction(&self) -> f64 {
        if self.checked == 0 {
            return 1.0;
        }
        self.within_tight as f64 / self.checked as f64
    }

    /// `fraction` of coordinates within the tight tolerance and all within
    /// `loose`.
    pub fn passes(&self, fraction: f64, loose: f64) -> bool {
        self.checked > 0 && self.tight_fraction() >= fraction && self.max_rel <= loose
    }

    pub fn merge(mut self, other: GradCheckReport) -> Self {
        self.checked += other.checked;
        self.within_tight += other.within_tight;
        if other.max_rel > self.max_rel {
            self.max_rel = other.max_rel;
            self.worst = other.worst;
        }
        self
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares every parameter coordinate's backward gradient against
/// `(f(p + h) - f(p - h)) / 2h`. `stride` > 1 checks every stride-th
/// coordinate of each parameter.
pub fn check_params<F>(store: &ParamStore, loss: F, step: f64, tight: f64, stride: usize) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&mut Graph<'g>) -> Result<Var>,
{
    let grads = {
        let mut g = Graph::new(store);
        let l = loss(&mut g)?;
        let grads = g.backward(l)?;
        store
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let id = store.find(p.name()).expect("own name");
                debug_assert_eq!(id.index(), i);
                grads
                    .param(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.value().shape().to_vec()))
            })
            .collect::<Vec<_>>()
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference(s);
        let l = loss(&mut g)?;
        Ok(g.value(l).item())
    };
    let mut work = store.clone();
    let mut report = GradCheckReport::new(tight);
    let names: Vec<String> = store.iter().map(|p| p.name().to_string()).collect();
    for (pi, name) in names.iter().enumerate() {
        let id = work.find(name).expect("own name");
        let n = work.value(id).len();
        for j in (0..n).step_by(stride.max(1)) {
            let orig = work.value(id).data()[j];
            work.get_mut(id).value_mut().data_mut()[j] = orig + step;
            let up = eval(&work)?;
            work.get_mut(id).value_mut().data_mut()[j] = orig - step;
            let down = eval(&work)?;
            work.get_mut(id).value_mut().data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            report.record(|| format!("{name}[{j}]"), grads[pi].data()[j], numeric);
        }
    }
    Ok(report)
}

/// Like [`check_params`], for the gradient with respect to an input tensor.
pub fn check_input<F>(store: &ParamStore, input: &Tensor, loss: F, step: f64, tight: f64) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&mut Graph<'g>, Var) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let x = g.input(input.clone());
        let l = loss(&mut g, x)?;
        let grads = g.backward(l)?;
        grads
            .wrt(x)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()))
    };
    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::inference(store);
        let x = g.constant(t.clone());
        let l = loss(&mut g, x)?;
        Ok(g.value(l).item())
    };
    let mut work = input.clone();
    let mut report = GradCheckReport::new(tight);
    for j in 0..input.len() {
        let orig = work.data()[j];
        work.data_mut()[j] = orig + step;
        let up = eval(&work)?;
        work.data_mut()[j] = orig - step;
        let down = eval(&work)?;
        work.data_mut()[j] = orig;
        report.record(|| format!("input[{j}]"), analytic.data()[j], (up - down) / (2.0 * step));
    }
    Ok(report)
}
