//! Named parameter tensors and the weight store shared by supernets and
//! standalone networks.
//!
//! Tensor names are stable: "stem", "head", and "edge{k}/op{o}" for the
//! parameterized op `o` on edge `k`. Stem and head are dense maps stored as
//! (out, in+1) with the bias in the last column; edge ops carry exactly the
//! vocabulary's parameter shape.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::net::IoDims;
use crate::rng;
use crate::space::{OpKind, SearchSpace};

pub const STEM: &str = "stem";
pub const HEAD: &str = "head";

pub fn edge_tensor_name(edge: usize, op: usize) -> String {
    format!("edge{edge}/op{op}")
}

/// Weight-decay treatment of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WdMode {
    /// Decay every element.
    Full,
    /// Decay nothing (diag_scale gains).
    None,
    /// Decay all but the last column (the bias of a dense map).
    SkipLastColumn,
}

/// How a tensor is filled at init time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    /// Weights ~ N(0, 1/fan_in) from stream "init/<name>"; when `bias_col`
    /// is set the last column is zero and consumes no draws.
    DenseFanIn { fan_in: usize, bias_col: bool },
    /// All ones (diag_scale).
    Ones,
}

/// Everything needed to create, decay, and validate one named tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: InitKind,
    pub wd: WdMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn elem_count(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered map from tensor name to tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    tensors: BTreeMap<String, Tensor>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: String, tensor: Tensor) {
        self.tensors.insert(name, tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    /// Fetch a tensor and confirm its shape.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<&Tensor> {
        let t = self.get(name).ok_or_else(|| Error::MissingTensor {
            name: name.to_string(),
        })?;
        if t.shape != shape {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                expected: shape.to_vec(),
                got: t.shape.clone(),
            });
        }
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }
}

/// Spec for the stem map (input -> hidden, bias column appended).
pub fn stem_spec(space: &SearchSpace, dims: IoDims) -> TensorSpec {
    TensorSpec {
        name: STEM.into(),
        shape: vec![space.hidden(), dims.input + 1],
        init: InitKind::DenseFanIn {
            fan_in: dims.input,
            bias_col: true,
        },
        wd: WdMode::SkipLastColumn,
    }
}

/// Spec for the head map (hidden -> classes, bias column appended).
pub fn head_spec(space: &SearchSpace, dims: IoDims) -> TensorSpec {
    TensorSpec {
        name: HEAD.into(),
        shape: vec![dims.classes, space.hidden() + 1],
        init: InitKind::DenseFanIn {
            fan_in: space.hidden(),
            bias_col: true,
        },
        wd: WdMode::SkipLastColumn,
    }
}

/// Spec for one parameterized edge op; None for zero/identity.
pub fn edge_op_spec(space: &SearchSpace, edge: usize, op: usize) -> Option<TensorSpec> {
    let desc = space.vocab().op(op)?;
    match desc.kind {
        OpKind::Zero | OpKind::Identity => None,
        OpKind::LinearRelu | OpKind::LinearTanh => Some(TensorSpec {
            name: edge_tensor_name(edge, op),
            shape: desc.param_shape.clone(),
            init: InitKind::DenseFanIn {
                fan_in: space.hidden(),
                bias_col: false,
            },
            wd: WdMode::Full,
        }),
        OpKind::DiagScale => Some(TensorSpec {
            name: edge_tensor_name(edge, op),
            shape: desc.param_shape.clone(),
            init: InitKind::Ones,
            wd: WdMode::None,
        }),
    }
}

/// Specs for every tensor a network over `allowed` needs: stem, head, and
/// one tensor per parameterized (edge, op) pair, in edge order.
pub fn specs_for(space: &SearchSpace, dims: IoDims, allowed: &[Vec<usize>]) -> Vec<TensorSpec> {
    let mut specs = vec![stem_spec(space, dims), head_spec(space, dims)];
    for (edge, ops) in allowed.iter().enumerate() {
        for &op in ops {
            if let Some(spec) = edge_op_spec(space, edge, op) {
                specs.push(spec);
            }
        }
    }
    specs
}

/// Fill one tensor per its init policy, drawing from "init/<name>".
pub fn init_tensor(spec: &TensorSpec, master_seed: u64) -> Tensor {
    let mut t = Tensor::zeros(spec.shape.clone());
    match spec.init {
        InitKind::Ones => t.data.fill(1.0),
        InitKind::DenseFanIn { fan_in, bias_col } => {
            let mut rng = rng::stream(master_seed, &format!("init/{}", spec.name));
            let std = (1.0 / fan_in as f64).sqrt();
            let cols = *spec.shape.last().unwrap();
            for (i, w) in t.data.iter_mut().enumerate() {
                if bias_col && (i + 1) % cols == 0 {
                    continue; // bias stays zero and consumes no draws
                }
                let z: f64 = rng.sample(StandardNormal);
                *w = (z * std) as f32;
            }
        }
    }
    t
}

/// Build a store holding every spec'd tensor.
pub fn init_store(specs: &[TensorSpec], master_seed: u64) -> WeightStore {
    let mut store = WeightStore::new();
    for spec in specs {
        store.insert(spec.name.clone(), init_tensor(spec, master_seed));
    }
    store
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::SearchSpace;

    #[test]
    fn init_is_deterministic_per_name() {
        let spec = TensorSpec {
            name: "edge0/op2".into(),
            shape: vec![4, 4],
            init: InitKind::DenseFanIn {
                fan_in: 4,
                bias_col: false,
            },
            wd: WdMode::Full,
        };
        let a = init_tensor(&spec, 3);
        let b = init_tensor(&spec, 3);
        assert_eq!(a.data, b.data);
        let c = init_tensor(&spec, 4);
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn bias_column_is_zero_and_unsampled() {
        let spec = TensorSpec {
            name: "stem".into(),
            shape: vec![3, 5],
            init: InitKind::DenseFanIn {
                fan_in: 4,
                bias_col: true,
            },
            wd: WdMode::SkipLastColumn,
        };
        let t = init_tensor(&spec, 0);
        for r in 0..3 {
            assert_eq!(t.data[r * 5 + 4], 0.0);
        }
        // Weight part matches a bias-free draw of the same name and width.
        let flat = TensorSpec {
            name: "stem".into(),
            shape: vec![3, 4],
            init: InitKind::DenseFanIn {
                fan_in: 4,
                bias_col: false,
            },
            wd: WdMode::Full,
        };
        let f = init_tensor(&flat, 0);
        for r in 0..3 {
            assert_eq!(&t.data[r * 5..r * 5 + 4], &f.data[r * 4..(r + 1) * 4]);
        }
    }

    #[test]
    fn spec_list_covers_exactly_parameterized_ops() {
        let space = SearchSpace::standard(3, 5, 16).unwrap();
        let dims = IoDims {
            input: 8,
            classes: 4,
        };
        let allowed: Vec<Vec<usize>> = vec![(0..5).collect(); 3];
        let specs = specs_for(&space, dims, &allowed);
        // stem + head + 3 edges x 3 parameterized ops.
        assert_eq!(specs.len(), 11);
        assert_eq!(specs[0].name, "stem");
        assert_eq!(specs[0].shape, vec![16, 9]);
        assert_eq!(specs[1].name, "head");
        assert_eq!(specs[1].shape, vec![4, 17]);
        assert!(specs.iter().any(|s| s.name == "edge2/op4"));
        assert!(!specs.iter().any(|s| s.name.ends_with("op0")));
        assert!(!specs.iter().any(|s| s.name.ends_with("op1")));
    }

    #[test]
    fn diag_scale_initializes_to_ones() {
        let space = SearchSpace::standard(3, 5, 8).unwrap();
        let spec = edge_op_spec(&space, 1, 4).unwrap();
        let t = init_tensor(&spec, 9);
        assert_eq!(t.shape, vec![8]);
        assert!(t.data.iter().all(|&v| v == 1.0));
        assert_eq!(spec.wd, WdMode::None);
    }
}
