//! Parameter storage shared by all models.
//!
//! Every layer owns its parameter arrays as [`Param`] values; models expose
//! them through the [`HasParams`] visitor so that optimizers, checkpointing
//! and parameter counting all see one flat, deterministically ordered list of
//! named arrays.

use ndarray::ArrayD;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Floating point element type for model tensors.
///
/// Training and checkpoints use `f32`; gradient checking instantiates the
/// same code with `f64`.
pub trait Real: ndarray::NdFloat + num_traits::FromPrimitive + std::iter::Sum {
    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// Convenience conversion from `f64` (panics only for non-finite exotic
    /// cases that never occur for the constants used here).
    fn from_f64c(x: f64) -> Self {
        Self::from_f64(x).expect("f64 constant representable")
    }
}

impl Real for f32 {
    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}

impl Real for f64 {
    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}

/// How a named array participates in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer and included in parameter counts.
    Trainable,
    /// Batch-norm running statistics: serialized but never optimized and
    /// excluded from parameter counts.
    RunningStat,
}

/// A single named tensor of a model plus its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<F> {
    pub value: ArrayD<F>,
    /// Allocated lazily on the first backward pass.
    pub grad: Option<ArrayD<F>>,
    pub kind: ParamKind,
}

impl<F: Real> Param<F> {
    pub fn trainable(value: ArrayD<F>) -> Self {
        Param {
            value,
            grad: None,
            kind: ParamKind::Trainable,
        }
    }

    pub fn running_stat(value: ArrayD<F>) -> Self {
        Param {
            value,
            grad: None,
            kind: ParamKind::RunningStat,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Param::trainable(ArrayD::zeros(shape.to_vec()))
    }

    pub fn ones(shape: &[usize]) -> Self {
        Param::trainable(ArrayD::ones(shape.to_vec()))
    }

    /// He fan-in normal initialization for conv / linear kernels.
    pub fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let value = ArrayD::from_shape_simple_fn(shape.to_vec(), || {
            F::std_normal(rng) * F::from_f64c(std)
        });
        Param::trainable(value)
    }

    pub fn accumulate(&mut self, g: &ArrayD<F>) {
        match &mut self.grad {
            Some(acc) => *acc += g,
            None => self.grad = Some(g.clone()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Visitor over the named parameters of a layer or model.
///
/// Implementations must visit parameters in a fixed order with unique names;
/// everything that iterates parameters (optimizers, serialization, counting)
/// relies on that for determinism.
pub trait HasParams<F: Real> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>));

    fn zero_grads(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }
}

pub(crate) fn join_name(prefix: &str, local: &str) -> String {
    if prefix.is_empty() {
        local.to_string()
    } else {
        format!("{prefix}.{local}")
    }
}

/// A flat snapshot of a model's named arrays.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore<F> {
    entries: Vec<(String, ArrayD<F>, ParamKind)>,
}

impl<F: Real> ParameterStore<F> {
    pub fn from_model(model: &impl HasParams<F>) -> Self {
        let mut entries = Vec::new();
        model.visit("", &mut |name, p| {
            entries.push((name.to_string(), p.value.clone(), p.kind));
        });
        debug_assert!(unique_names(&entries), "parameter names must be unique");
        ParameterStore { entries }
    }

    pub fn entries(&self) -> &[(String, ArrayD<F>, ParamKind)] {
        &self.entries
    }

    pub fn push(&mut self, name: String, value: ArrayD<F>, kind: ParamKind) {
        self.entries.push((name, value, kind));
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<F>> {
        self.entries
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, v, _)| v)
    }

    /// Exact number of scalar entries across all trainable arrays.
    /// Running statistics are excluded.
    pub fn count_parameters(&self) -> usize {
        self.entries
            .iter()
            .filter(|(_, _, k)| *k == ParamKind::Trainable)
            .map(|(_, v, _)| v.len())
            .sum()
    }

    /// Write this snapshot back into a model, matching arrays by name.
    pub fn load_into(&self, model: &mut impl HasParams<F>) -> Result<()> {
        let mut missing = Vec::new();
        model.visit_mut("", &mut |name, p| {
            match self.entries.iter().find(|(n, _, _)| n == name) {
                Some((_, v, _)) if v.shape() == p.value.shape() => {
                    p.value.assign(v);
                }
                Some((n, v, _)) => missing.push(format!(
                    "{n}: shape {:?} in store, {:?} in model",
                    v.shape(),
                    p.value.shape()
                )),
                None => missing.push(format!("{name}: absent from store")),
            }
        });
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "parameter mismatch: {}",
                missing.join("; ")
            )))
        }
    }
}

fn unique_names<F>(entries: &[(String, ArrayD<F>, ParamKind)]) -> bool {
    let mut names: Vec<&str> = entries.iter().map(|(n, _, _)| n.as_str()).collect();
    names.sort_unstable();
    names.windows(2).all(|w| w[0] != w[1])
}

/// Convenience for the common "count the model's parameters" question.
pub fn count_parameters<F: Real>(model: &impl HasParams<F>) -> usize {
    let mut n = 0;
    model.visit("", &mut |_, p| {
        if p.kind == ParamKind::Trainable {
            n += p.len();
        }
    });
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Toy {
        w: Param<f64>,
        b: Param<f64>,
        stat: Param<f64>,
    }

    impl HasParams<f64> for Toy {
        fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<f64>)) {
            f(&join_name(prefix, "w"), &self.w);
            f(&join_name(prefix, "b"), &self.b);
            f(&join_name(prefix, "stat"), &self.stat);
        }
        fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<f64>)) {
            f(&join_name(prefix, "w"), &mut self.w);
            f(&join_name(prefix, "b"), &mut self.b);
            f(&join_name(prefix, "stat"), &mut self.stat);
        }
    }

    fn toy() -> Toy {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Toy {
            w: Param::he_normal(&[8, 3, 3, 3], 27, &mut rng),
            b: Param::trainable(ArrayD::zeros(vec![8])),
            stat: Param::running_stat(ArrayD::zeros(vec![8])),
        }
    }

    #[test]
    fn count_excludes_running_stats() {
        let t = toy();
        assert_eq!(count_parameters(&t), 8 * 3 * 3 * 3 + 8);
    }

    #[test]
    fn conv_with_bias_example_count() {
        // single 3x3 conv, 3 -> 8 channels with bias
        let t = toy();
        let store = ParameterStore::from_model(&t);
        assert_eq!(store.count_parameters(), 3 * 3 * 3 * 8 + 8);
    }

    #[test]
    fn empty_store_counts_zero() {
        let store = ParameterStore::<f64>::default();
        assert_eq!(store.count_parameters(), 0);
    }

    #[test]
    fn store_roundtrip() {
        let t = toy();
        let store = ParameterStore::from_model(&t);
        let mut t2 = toy();
        t2.w.value.fill(0.0);
        store.load_into(&mut t2).unwrap();
        assert_eq!(t.w.value, t2.w.value);
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let t = toy();
        let mut store = ParameterStore::from_model(&t);
        store.entries[0].1 = ArrayD::zeros(vec![2, 2]);
        let mut t2 = toy();
        assert!(store.load_into(&mut t2).is_err());
    }
}
