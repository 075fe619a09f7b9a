//! Central finite-difference gradient checking.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Denominator floor for the relative error. Below it the comparison is
/// effectively absolute (`|a - n| / floor`).
///
/// With eps = 1e-5 and an O(1) loss, rounding alone puts about 1e-10 of noise
/// on a central difference, so smaller components cannot be resolved to a
/// relative 1e-4 and are compared absolutely instead.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_error <= self.tol)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(move |e| e.max_rel_error > self.tol)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    libm::fabs(a - n) / libm::fabs(a).max(libm::fabs(n)).max(RELATIVE_ERROR_FLOOR)
}

fn eval_loss<F>(store: &ParamStore, f: &mut F) -> Result<f64>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.item(loss)
}

/// Analytic gradients of `f` for `ids`, computed by one backward pass.
///
/// Existing gradients in `store` are cleared first. Fails when two forward
/// evaluations disagree.
pub fn analytic_gradients<F>(store: &mut ParamStore, ids: &[ParamId], f: &mut F) -> Result<(f64, Vec<Tensor>)>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    store.zero_grads();
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let first = g.item(loss)?;
    g.backward(loss, store)?;
    let second = eval_loss(store, f)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    let grads = ids
        .iter()
        .map(|&id| {
            store
                .grad(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(store.value(id).shape()))
        })
        .collect();
    Ok((first, grads))
}

/// Compares supplied analytic gradients against central differences of `f`.
pub fn compare_gradients<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    analytic: &[Tensor],
    f: F,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let coords: Vec<Vec<usize>> = ids.iter().map(|&id| (0..store.value(id).len()).collect()).collect();
    compare_gradients_at(store, ids, analytic, &coords, f, eps, tol)
}

/// Like [`compare_gradients`] but only perturbs `coords[i]` of `ids[i]`.
/// The reported `worst_index` is a flat index into the tensor.
pub fn compare_gradients_at<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    analytic: &[Tensor],
    coords: &[Vec<usize>],
    mut f: F,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    if coords.len() != ids.len() {
        return Err(Error::InvalidArgument(alloc::format!(
            "{} coordinate lists for {} parameters",
            coords.len(),
            ids.len()
        )));
    }
    let mut entries = Vec::with_capacity(ids.len());
    for ((&id, grad), ks) in ids.iter().zip(analytic).zip(coords) {
        let mut entry = GradCheckEntry {
            name: store.get(id).name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for (n, &k) in ks.iter().enumerate() {
            if k >= store.value(id).len() {
                return Err(Error::InvalidArgument(alloc::format!("coordinate {k} outside {}", entry.name)));
            }
            let orig = store.value(id).data()[k];
            store.get_mut(id).value.data_mut()[k] = orig + eps;
            let plus = eval_loss(store, &mut f);
            store.get_mut(id).value.data_mut()[k] = orig - eps;
            let minus = eval_loss(store, &mut f);
            store.get_mut(id).value.data_mut()[k] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let a = grad.data()[k];
            let err = relative_error(a, numeric);
            if err > entry.max_rel_error || n == 0 {
                entry.max_rel_error = err;
                entry.worst_index = k;
                entry.analytic = a;
                entry.numeric = numeric;
            }
        }
        entries.push(entry);
    }
    Ok(GradCheckReport { entries, tol })
}

/// Checks the backward pass of `f` against central finite differences for
/// every element of the parameters in `ids`.
pub fn check_gradients<F>(store: &mut ParamStore, ids: &[ParamId], mut f: F, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let (_, analytic) = analytic_gradients(store, ids, &mut f)?;
    compare_gradients(store, ids, &analytic, f, eps, tol)
}

/// [`check_gradients`] restricted to chosen flat coordinates of each parameter.
pub fn check_gradients_at<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    coords: &[Vec<usize>],
    mut f: F,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let (_, analytic) = analytic_gradients(store, ids, &mut f)?;
    compare_gradients_at(store, ids, &analytic, coords, f, eps, tol)
}
