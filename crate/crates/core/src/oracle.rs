//! Executable forms of the seen-prediction projection and the refinement
//! relation between classifiers.
//!
//! All claims are about finite probe sets: `g(X_train)` is the set of tuples
//! `g` produces on the supplied training inputs.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::metrics::Classifier;
use crate::tensor::Tensor;
use crate::Combo;

/// A deterministic classifier with a human-readable description.
#[derive(Clone)]
pub struct ClassifierHandle {
    pub description: String,
    inner: Arc<dyn Classifier>,
}

impl std::fmt::Debug for ClassifierHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClassifierHandle")
            .field("description", &self.description)
            .finish_non_exhaustive()
    }
}

struct PointFn<F>(F);

impl<F> Classifier for PointFn<F>
where
    F: Fn(&[f64]) -> Combo + Send + Sync,
{
    fn predict(&self, inputs: &Tensor) -> Result<Vec<Combo>> {
        Ok((0..inputs.rows()).map(|i| (self.0)(inputs.row(i))).collect())
    }
}

impl ClassifierHandle {
    pub fn new(description: impl Into<String>, clf: impl Classifier + 'static) -> Self {
        Self {
            description: description.into(),
            inner: Arc::new(clf),
        }
    }

    /// Wraps a per-input function.
    pub fn from_fn<F>(description: impl Into<String>, f: F) -> Self
    where
        F: Fn(&[f64]) -> Combo + Send + Sync + 'static,
    {
        Self::new(description, PointFn(f))
    }
}

impl Classifier for ClassifierHandle {
    fn predict(&self, inputs: &Tensor) -> Result<Vec<Combo>> {
        self.inner.predict(inputs)
    }
}

struct Projected {
    g: ClassifierHandle,
    seen: BTreeSet<Combo>,
    anchor: Combo,
}

impl Classifier for Projected {
    fn predict(&self, inputs: &Tensor) -> Result<Vec<Combo>> {
        let mut out = self.g.predict(inputs)?;
        for p in &mut out {
            if !self.seen.contains(p) {
                p.clone_from(&self.anchor);
            }
        }
        Ok(out)
    }
}

/// `f(x) = g(x)` when `g(x)` is among `g`'s training outputs, otherwise
/// `g(x')` for the first training input `x'`.
pub fn project_to_seen(g: &ClassifierHandle, x_train: &Tensor) -> Result<ClassifierHandle> {
    if x_train.rows() == 0 {
        return Err(Error::Validation("projection needs training inputs".into()));
    }
    let outputs = g.predict(x_train)?;
    let anchor = outputs
        .first()
        .cloned()
        .ok_or_else(|| Error::Validation("projection needs training inputs".into()))?;
    let seen: BTreeSet<Combo> = outputs.into_iter().collect();
    Ok(ClassifierHandle::new(
        format!("seen-projection of {}", g.description),
        Projected {
            g: g.clone(),
            seen,
            anchor,
        },
    ))
}

/// The set `g(X)` over the given inputs.
pub fn output_set(g: &dyn Classifier, inputs: &Tensor) -> Result<BTreeSet<Combo>> {
    Ok(g.predict(inputs)?.into_iter().collect())
}

/// Two probe indices with equal `g` outputs but different `f` outputs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RefinementViolation {
    pub first: usize,
    pub second: usize,
}

/// Checks that `g(a) = g(b)` implies `f(a) = f(b)` on every probe pair.
/// Returns the first violating pair in probe order.
pub fn refinement_check(
    f: &dyn Classifier,
    g: &dyn Classifier,
    probes: &Tensor,
) -> Result<Option<RefinementViolation>> {
    let fo = f.predict(probes)?;
    let go = g.predict(probes)?;
    let mut first_of: BTreeMap<&Combo, usize> = BTreeMap::new();
    for (i, gy) in go.iter().enumerate() {
        match first_of.get(gy) {
            Some(&j) if fo[j] != fo[i] => {
                return Ok(Some(RefinementViolation { first: j, second: i }));
            }
            Some(_) => {}
            None => {
                first_of.insert(gy, i);
            }
        }
    }
    Ok(None)
}

/// Number of probes whose prediction is not a training combination.
pub fn seen_label_check(
    f: &dyn Classifier,
    probes: &Tensor,
    y_train: &BTreeSet<Combo>,
) -> Result<usize> {
    Ok(f.predict(probes)?.iter().filter(|p| !y_train.contains(*p)).count())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> Tensor {
        let mut data = Vec::with_capacity(2 * n * n);
        for i in 0..n {
            for j in 0..n {
                data.push(i as f64 / (n - 1) as f64 * 2.0 - 1.0);
                data.push(j as f64 / (n - 1) as f64 * 2.0 - 1.0);
            }
        }
        Tensor::new(vec![n * n, 2], data).unwrap()
    }

    fn quadrant() -> ClassifierHandle {
        ClassifierHandle::from_fn("quadrant", |x| vec![usize::from(x[0] > 0.0), usize::from(x[1] < 0.0)])
    }

    #[test]
    fn seen_only_g_is_fixed_point() {
        let g = quadrant();
        let train = Tensor::from_rows(&[&[0.5, 0.5], &[-0.5, -0.5], &[0.5, -0.5], &[-0.5, 0.5]]);
        let f = project_to_seen(&g, &train).unwrap();
        let probes = grid(25);
        assert_eq!(f.predict(&probes).unwrap(), g.predict(&probes).unwrap());
    }

    #[test]
    fn unseen_output_maps_to_anchor() {
        let g = quadrant();
        let train = Tensor::from_rows(&[&[-0.5, 0.5], &[0.5, 0.5], &[-0.5, -0.5]]);
        let f = project_to_seen(&g, &train).unwrap();
        let x0 = Tensor::from_rows(&[&[0.5, -0.5]]);
        assert_eq!(g.predict(&x0).unwrap(), vec![vec![1, 1]]);
        assert_eq!(f.predict(&x0).unwrap(), vec![vec![0, 0]]);
    }

    #[test]
    fn grid_outputs_within_training_outputs() {
        let g = ClassifierHandle::from_fn("stripes", |x| vec![((x[0] + 1.0) * 3.0) as usize, usize::from(x[1] > 0.3)]);
        let train = Tensor::from_rows(&[&[-0.9, 0.0], &[0.1, 0.9], &[0.8, -0.2]]);
        let f = project_to_seen(&g, &train).unwrap();
        let seen = output_set(&g, &train).unwrap();
        let image = output_set(&f, &grid(100)).unwrap();
        assert!(image.is_subset(&seen), "{image:?} vs {seen:?}");
    }

    #[test]
    fn refinement_reflexive_and_violation() {
        let probes = grid(10);
        let g = quadrant();
        assert_eq!(refinement_check(&g, &g, &probes).unwrap(), None);
        let parity = ClassifierHandle::from_fn("parity", |x| vec![((x[0] * 4.5 + 4.5).round() as usize) % 2]);
        let constant = ClassifierHandle::from_fn("constant", |_| vec![0]);
        let v = refinement_check(&parity, &constant, &probes).unwrap().unwrap();
        let (a, b) = (probes.row(v.first), probes.row(v.second));
        assert_ne!(parity.predict(&Tensor::from_rows(&[a])).unwrap(), parity.predict(&Tensor::from_rows(&[b])).unwrap());
    }

    #[test]
    fn seen_label_counts() {
        let g = quadrant();
        let y_train: BTreeSet<Combo> = [vec![0, 0], vec![1, 0], vec![0, 1]].into();
        let test_probes = Tensor::from_rows(&[&[0.2, -0.3], &[0.9, -0.9]]);
        assert_eq!(seen_label_check(&g, &test_probes, &y_train).unwrap(), 2);
        let train = Tensor::from_rows(&[&[0.5, 0.5], &[-0.5, 0.5], &[-0.5, -0.5]]);
        let f = project_to_seen(&g, &train).unwrap();
        assert_eq!(seen_label_check(&f, &grid(30), &y_train).unwrap(), 0);
    }

    #[test]
    fn empty_training_set_rejected() {
        let g = quadrant();
        let empty = Tensor::zeros(&[0, 2]);
        assert!(project_to_seen(&g, &empty).is_err());
    }
}
