//! Named parameter groups, their tape bindings and the checkpoint format.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::scalar::Scalar;

pub const CHECKPOINT_FORMAT: &str = "permtpp-params";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("checkpoint format {found:?} version {version} is not supported")]
    Version { found: String, version: u32 },
    #[error("checkpoint kind {found:?}, expected {expected:?}")]
    Kind { found: String, expected: String },
    #[error("parameter {name}: shape {found:?} does not match expected {expected:?}")]
    Shape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("parameter {name}: {len} values for shape {shape:?}")]
    Length {
        name: String,
        len: usize,
        shape: Vec<usize>,
    },
    #[error("parameter {0} missing from checkpoint")]
    Missing(String),
    #[error("parameter {0} present in checkpoint but unknown to the model")]
    Unexpected(String),
    #[error("parameter {0} holds a non-finite value")]
    NonFinite(String),
}

/// A dense trainable array.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub values: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            values: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], x: T) -> Self {
        Self {
            shape: shape.to_vec(),
            values: vec![x; shape.iter().product()],
        }
    }

    /// Gaussian entries with standard deviation `std`.
    pub fn normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("std must be finite and nonnegative");
        Self {
            shape: shape.to_vec(),
            values: (0..shape.iter().product::<usize>())
                .map(|_| T::lit(dist.sample(rng)))
                .collect(),
        }
    }

    /// Scaled by `1/sqrt(fan_in)` where `fan_in` is the leading dimension.
    pub fn glorot<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let fan_in = shape.first().copied().unwrap_or(1).max(1) as f64;
        Self::normal(shape, 1.0 / fan_in.sqrt(), rng)
    }

    pub fn tensor(&self) -> Tensor<T> {
        Tensor::new(&self.shape, self.values.clone()).expect("param shape invariant")
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

/// A fixed, ordered set of named parameters.
pub trait ParamGroup<T: Scalar> {
    /// Checkpoint `kind` tag.
    const KIND: &'static str;

    fn named(&self) -> Vec<(&'static str, &Param<T>)>;
    fn named_mut(&mut self) -> Vec<(&'static str, &mut Param<T>)>;

    fn num_values(&self) -> usize {
        self.named().iter().map(|(_, p)| p.numel()).sum()
    }

    fn all_finite(&self) -> bool {
        self.named()
            .iter()
            .all(|(_, p)| p.values.iter().all(|v| v.is_finite()))
    }
}

/// Declares a parameter struct, its tape-bound counterpart and the glue
/// between them.
macro_rules! param_group {
    (
        $(#[$meta:meta])*
        $vis:vis struct $name:ident / $vars:ident, kind = $kind:literal {
            $( $(#[$fmeta:meta])* $field:ident ),* $(,)?
        }
    ) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        $vis struct $name<T> {
            $( $(#[$fmeta])* pub $field: $crate::params::Param<T>, )*
        }

        /// Tensors bound to one tape for one forward pass.
        #[allow(dead_code)]
        #[derive(Clone, Debug)]
        $vis struct $vars<T> {
            $( pub $field: $crate::autodiff::Tensor<T>, )*
        }

        impl<T: $crate::scalar::Scalar> $crate::params::ParamGroup<T> for $name<T> {
            const KIND: &'static str = $kind;

            fn named(&self) -> Vec<(&'static str, &$crate::params::Param<T>)> {
                vec![ $( (stringify!($field), &self.$field), )* ]
            }

            fn named_mut(&mut self) -> Vec<(&'static str, &mut $crate::params::Param<T>)> {
                vec![ $( (stringify!($field), &mut self.$field), )* ]
            }
        }

        #[allow(dead_code)]
        impl<T: $crate::scalar::Scalar> $name<T> {
            /// Tracked leaves on `tape`.
            pub fn bind(&self, tape: &$crate::autodiff::Tape<T>) -> $vars<T> {
                $vars { $( $field: tape.leaf(&self.$field.tensor()), )* }
            }

            /// Untracked constants (frozen parameters).
            pub fn constants(&self) -> $vars<T> {
                $vars { $( $field: self.$field.tensor(), )* }
            }
        }

        #[allow(dead_code)]
        impl<T: $crate::scalar::Scalar> $vars<T> {
            /// Per-parameter gradients in declaration order; zeros where the
            /// loss did not depend on a parameter.
            pub fn gradients(&self, grads: &$crate::autodiff::Gradients<T>) -> Vec<Vec<T>> {
                vec![ $( grads.get_or_zeros(&self.$field), )* ]
            }
        }
    };
}

pub(crate) use param_group;

/// Flat per-parameter gradient list matching [`ParamGroup::named`] order.
pub type GroupGrads<T> = Vec<Vec<T>>;

pub fn add_grads<T: Scalar>(acc: &mut GroupGrads<T>, other: &GroupGrads<T>) {
    for (a, b) in acc.iter_mut().zip(other) {
        for (x, &y) in a.iter_mut().zip(b) {
            *x = *x + y;
        }
    }
}

pub fn scale_grads<T: Scalar>(acc: &mut GroupGrads<T>, c: T) {
    acc.iter_mut().flatten().for_each(|x| *x = *x * c);
}

pub fn zero_grads<T: Scalar, G: ParamGroup<T>>(group: &G) -> GroupGrads<T> {
    group
        .named()
        .iter()
        .map(|(_, p)| vec![T::zero(); p.numel()])
        .collect()
}

/// Central finite-difference gradient of `f` with respect to every value
/// of `group`, in [`ParamGroup::named`] order.
pub fn finite_difference<T, G, E, F>(group: &G, h: T, f: F) -> Result<GroupGrads<T>, E>
where
    T: Scalar,
    G: ParamGroup<T> + Clone,
    F: Fn(&G) -> Result<T, E>,
{
    let mut probe = group.clone();
    let sizes: Vec<usize> = group.named().iter().map(|(_, p)| p.numel()).collect();
    let two_h = h + h;
    let mut out = Vec::with_capacity(sizes.len());
    for (k, &size) in sizes.iter().enumerate() {
        let mut g = Vec::with_capacity(size);
        for j in 0..size {
            let x0 = probe.named()[k].1.values[j];
            probe.named_mut()[k].1.values[j] = x0 + h;
            let up = f(&probe)?;
            probe.named_mut()[k].1.values[j] = x0 - h;
            let down = f(&probe)?;
            probe.named_mut()[k].1.values[j] = x0;
            g.push((up - down) / two_h);
        }
        out.push(g);
    }
    Ok(out)
}

/// Largest `|a - b| / max(|a|, |b|, 1e-8)` over all entries.
pub fn max_relative_error<T: Scalar>(a: &GroupGrads<T>, b: &GroupGrads<T>) -> T {
    let floor = T::lit(1e-8);
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(T::zero(), T::max)
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct StoredParam {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// On-disk checkpoint: a version-tagged map `name -> {shape, values}`
/// with values in row-major order.
#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub kind: String,
    /// Free-form hyperparameters needed to rebuild the model.
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
    pub params: BTreeMap<String, StoredParam>,
}

impl Checkpoint {
    pub fn from_group<T: Scalar, G: ParamGroup<T>>(group: &G) -> Self {
        let params = group
            .named()
            .into_iter()
            .map(|(name, p)| {
                (
                    name.to_string(),
                    StoredParam {
                        shape: p.shape.clone(),
                        values: p.values.iter().map(|v| v.as_f64()).collect(),
                    },
                )
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            kind: G::KIND.into(),
            meta: BTreeMap::new(),
            params,
        }
    }

    /// Copies stored values into `group`, whose shapes define what is
    /// expected. Any missing, extra or reshaped entry is rejected.
    pub fn fill_group<T: Scalar, G: ParamGroup<T>>(&self, group: &mut G) -> Result<(), CheckpointError> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version {
                found: self.format.clone(),
                version: self.version,
            });
        }
        if self.kind != G::KIND {
            return Err(CheckpointError::Kind {
                found: self.kind.clone(),
                expected: G::KIND.into(),
            });
        }
        let mut named = group.named_mut();
        for key in self.params.keys() {
            if !named.iter().any(|(n, _)| n == key) {
                return Err(CheckpointError::Unexpected(key.clone()));
            }
        }
        for (name, param) in named.iter_mut() {
            let stored = self
                .params
                .get(*name)
                .ok_or_else(|| CheckpointError::Missing(name.to_string()))?;
            if stored.shape != param.shape {
                return Err(CheckpointError::Shape {
                    name: name.to_string(),
                    found: stored.shape.clone(),
                    expected: param.shape.clone(),
                });
            }
            if stored.values.len() != param.numel() {
                return Err(CheckpointError::Length {
                    name: name.to_string(),
                    len: stored.values.len(),
                    shape: stored.shape.clone(),
                });
            }
            if stored.values.iter().any(|v| !v.is_finite()) {
                return Err(CheckpointError::NonFinite(name.to_string()));
            }
            param.values = stored.values.iter().map(|&v| T::lit(v)).collect();
        }
        Ok(())
    }

    pub fn meta_usize(&self, key: &str) -> Option<usize> {
        self.meta.get(key)?.as_u64().map(|v| v as usize)
    }

    pub fn meta_f64(&self, key: &str) -> Option<f64> {
        self.meta.get(key)?.as_f64()
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let text = serde_json::to_string_pretty(self)?;
        crate::io_util::write_atomic(path, text.as_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = std::fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}
