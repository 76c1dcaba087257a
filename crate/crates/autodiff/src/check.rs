//! Finite-difference verification of reverse-mode gradients.

use crate::error::{AdError, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{ParamBinding, ParamStore};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Outcome of one gradient comparison.
#[derive(Clone, Debug)]
pub struct FdReport {
    pub max_abs_err: f64,
    /// Max over coordinates of |ad - fd| / max(|ad|, |fd|), taken only where
    /// the absolute error exceeds `atol`.
    pub max_rel_err: f64,
    /// (parameter name, flat coordinate, reverse-mode value, finite-difference value)
    pub worst: Option<(String, usize, f64, f64)>,
    pub coords_checked: usize,
    pub pass: bool,
}

impl FdReport {
    fn empty() -> Self {
        FdReport {
            max_abs_err: 0.0,
            max_rel_err: 0.0,
            worst: None,
            coords_checked: 0,
            pass: true,
        }
    }

    fn record(&mut self, name: &str, coord: usize, ad: f64, fd: f64, rtol: f64, atol: f64) {
        let abs = (ad - fd).abs();
        let rel = if abs <= atol {
            0.0
        } else {
            abs / ad.abs().max(fd.abs()).max(atol)
        };
        if abs > self.max_abs_err {
            self.max_abs_err = abs;
        }
        if rel >= self.max_rel_err {
            self.max_rel_err = rel;
            self.worst = Some((name.to_string(), coord, ad, fd));
        }
        if abs > atol + rtol * ad.abs().max(fd.abs()) {
            self.pass = false;
        }
        self.coords_checked += 1;
    }
}

/// Check d f(x) / dx for a scalar-valued graph function of one tensor.
pub fn finite_diff_check<F>(f: F, x: &Tensor, rtol: f64, atol: f64) -> Result<FdReport>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let id = g.leaf(t.clone());
        let out = f(&mut g, id)?;
        let v = g.value(out);
        if !v.is_scalar() {
            return Err(AdError::NonScalarLoss(v.shape().to_vec()));
        }
        let y = v.item();
        if !y.is_finite() {
            return Err(AdError::NonFinite("finite_diff_check evaluation".into()));
        }
        Ok(y)
    };
    eval(x)?;

    let mut g = Graph::new();
    let id = g.leaf(x.clone());
    let out = f(&mut g, id)?;
    g.backward(out)?;
    let ad = g
        .grad(id)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut report = FdReport::empty();
    let mut probe = x.clone();
    for k in 0..x.numel() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + FD_STEP;
        let up = eval(&probe)?;
        probe.data_mut()[k] = orig - FD_STEP;
        let down = eval(&probe)?;
        probe.data_mut()[k] = orig;
        let fd = (up - down) / (2.0 * FD_STEP);
        report.record("x", k, ad.data()[k], fd, rtol, atol);
    }
    Ok(report)
}

/// Check gradients with respect to every tensor in a parameter store for a
/// scalar-valued graph function built from bound parameters.
pub fn finite_diff_check_params<F>(
    build: F,
    params: &ParamStore,
    rtol: f64,
    atol: f64,
) -> Result<FdReport>
where
    F: Fn(&mut Graph, &ParamBinding) -> Result<NodeId>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let binding = store.bind(&mut g);
        let out = build(&mut g, &binding)?;
        let v = g.value(out);
        if !v.is_scalar() {
            return Err(AdError::NonScalarLoss(v.shape().to_vec()));
        }
        let y = v.item();
        if !y.is_finite() {
            return Err(AdError::NonFinite("finite_diff_check evaluation".into()));
        }
        Ok(y)
    };
    eval(params)?;

    let mut g = Graph::new();
    let binding = params.bind(&mut g);
    let out = build(&mut g, &binding)?;
    g.backward(out)?;
    let ad_grads = binding.gradients(&g, params)?;

    let mut report = FdReport::empty();
    let mut probe = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for (pi, name) in names.iter().enumerate() {
        let numel = params.get(name).expect("name from store").numel();
        for k in 0..numel {
            let orig = probe.get(name).expect("name from store").data()[k];
            probe.get_mut(name).expect("name from store").data_mut()[k] = orig + FD_STEP;
            let up = eval(&probe)?;
            probe.get_mut(name).expect("name from store").data_mut()[k] = orig - FD_STEP;
            let down = eval(&probe)?;
            probe.get_mut(name).expect("name from store").data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * FD_STEP);
            report.record(name, k, ad_grads[pi].data()[k], fd, rtol, atol);
        }
    }
    Ok(report)
}
