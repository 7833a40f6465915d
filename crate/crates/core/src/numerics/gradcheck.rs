//! Central finite-difference verification of tape gradients.

use super::autograd::{Tape, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub h: f64,
    /// Maximum allowed relative error.
    pub tol: f64,
    /// Denominator floor: the error is `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Check at most this many evenly strided elements per parameter.
    pub max_elems_per_param: Option<usize>,
    /// Perturbs one analytic gradient entry; a negative control for the harness.
    pub corrupt: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { h: 1e-3, tol: 1e-4, floor: 1e-6, max_elems_per_param: None, corrupt: false }
    }
}

impl GradCheckOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self { tol, ..Self::default() }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    /// Elements whose ±h step changed a ReLU, abs, max/min or clamp branch.
    pub skipped: usize,
    pub max_rel_error: f64,
    /// Element index of the worst entry.
    pub worst_index: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tol: f64,
}

impl GradCheckReport {
    /// Within tolerance, with at least one element compared and no more
    /// than a quarter of the visited elements skipped at kinks.
    pub fn passed(&self) -> bool {
        let checked = self.checked();
        self.max_rel_error <= self.tol && checked > 0 && self.skipped() * 3 <= checked
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.params.iter().map(|p| p.skipped).sum()
    }

    /// Parameters sorted by descending error.
    pub fn worst(&self, n: usize) -> Vec<&ParamCheck> {
        let mut v: Vec<&ParamCheck> = self.params.iter().collect();
        v.sort_by(|a, b| b.max_rel_error.total_cmp(&a.max_rel_error));
        v.truncate(n);
        v
    }
}

fn eval<F>(loss_fn: &F, store: &ParamStore) -> Result<(f64, u64)>
where
    F: Fn(&mut Tape, &ParamStore) -> Var,
{
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, store);
    let v = tape.value(loss).item();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {v}")));
    }
    Ok((v, tape.branch_signature()))
}

/// Compares analytic gradients of `loss_fn` against central differences
/// `(f(θ+h) − f(θ−h)) / 2h` for every parameter the loss reads.
///
/// An element is skipped when either step lands on a different branch of a
/// non-smooth operation than the base point, since the difference quotient
/// then spans a kink. Skips are counted in the report.
pub fn grad_check<F>(name: &str, store: &ParamStore, loss_fn: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Var,
{
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, store);
    let base = tape.value(loss).item();
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("{name}: loss evaluated to {base}")));
    }
    let base_sig = tape.branch_signature();
    let records = tape.backward(loss).param_grads(&tape, store);
    let mut corrupt_pending = opts.corrupt;

    let mut work = store.clone();
    let mut params = Vec::with_capacity(records.len());
    let mut overall: f64 = 0.0;
    for rec in &records {
        let n = rec.grad.len();
        let stride = opts.max_elems_per_param.map_or(1, |m| n.div_ceil(m.max(1)).max(1));
        let mut worst = 0.0f64;
        let mut worst_index = 0;
        let mut checked = 0;
        let mut skipped = 0;
        for e in (0..n).step_by(stride) {
            let orig = work.get(rec.param).data()[e];
            work.get_mut(rec.param).data_mut()[e] = orig + opts.h;
            let (plus, sig_plus) = eval(&loss_fn, &work)?;
            work.get_mut(rec.param).data_mut()[e] = orig - opts.h;
            let (minus, sig_minus) = eval(&loss_fn, &work)?;
            work.get_mut(rec.param).data_mut()[e] = orig;
            if sig_plus != base_sig || sig_minus != base_sig {
                skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.h);
            let mut analytic = rec.grad.data()[e];
            if corrupt_pending {
                analytic = analytic * 1.5 + 1.0;
                corrupt_pending = false;
            }
            let denom = analytic.abs().max(numeric.abs()).max(opts.floor);
            let err = (analytic - numeric).abs() / denom;
            if err > worst {
                worst = err;
                worst_index = e;
            }
            checked += 1;
        }
        overall = overall.max(worst);
        params.push(ParamCheck {
            name: store.name(rec.param).to_string(),
            checked,
            skipped,
            max_rel_error: worst,
            worst_index,
        });
    }
    Ok(GradCheckReport { name: name.to_string(), params, max_rel_error: overall, tol: opts.tol })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::nn::Linear;
    use crate::numerics::params::Init;
    use crate::numerics::tensor::Tensor;

    fn linear_fixture() -> (ParamStore, Linear, Tensor) {
        let mut store = ParamStore::new();
        let mut init = Init::new(3);
        let lin = Linear::new(&mut store, &mut init, "lin", 4, 3);
        *store.get_mut(lin.bias) = init.normal(&[3], 1.0);
        let x = init.normal(&[5, 4], 1.0);
        (store, lin, x)
    }

    #[test]
    fn linear_layer_passes() {
        let (store, lin, x) = linear_fixture();
        let w = Tensor::matrix(5, 3, (0..15).map(|i| (i as f64 * 0.3).sin()).collect()).unwrap();
        let report = grad_check(
            "linear",
            &store,
            |t, s| {
                let xv = t.constant(x.clone());
                let y = lin.apply(t, s, xv);
                let wv = t.constant(w.clone());
                let p = t.mul(y, wv);
                t.sum(p)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(report.max_rel_error < 1e-6);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let (store, lin, x) = linear_fixture();
        let opts = GradCheckOptions { corrupt: true, ..Default::default() };
        let report = grad_check(
            "linear",
            &store,
            |t, s| {
                let xv = t.constant(x.clone());
                let y = lin.apply(t, s, xv);
                t.sum(y)
            },
            &opts,
        )
        .unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn steps_across_a_relu_kink_are_skipped() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Tensor::new(&[4], vec![2e-4, 0.7, -0.4, 1.3]).unwrap());
        let report = grad_check(
            "relu",
            &store,
            |t, s| {
                let x = t.param(s, a);
                let r = t.relu(x);
                let sq = t.mul(r, r);
                t.sum(sq)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.params[0].skipped, 1);
        assert_eq!(report.params[0].checked, 3);
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn mostly_skipped_report_fails() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Tensor::new(&[2], vec![1e-4, -1e-4]).unwrap());
        let report = grad_check(
            "relu",
            &store,
            |t, s| {
                let x = t.param(s, a);
                let r = t.relu(x);
                t.sum(r)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.skipped(), 2);
        assert!(!report.passed());
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let (store, lin, x) = linear_fixture();
        let res = grad_check(
            "bad",
            &store,
            |t, s| {
                let xv = t.constant(x.clone());
                let y = lin.apply(t, s, xv);
                let z = t.scale(y, f64::INFINITY);
                t.sum(z)
            },
            &GradCheckOptions::default(),
        );
        assert!(matches!(res, Err(Error::NonFinite(_))));
    }
}
