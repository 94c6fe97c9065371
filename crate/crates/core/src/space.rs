//! Search-space combinatorics: op vocabulary, complete-DAG edge layout,
//! regions (per-edge allowed-op subsets), architectures, and the string
//! codec.
//!
//! Nodes are numbered 1..=n. The edge set is every ordered pair (i, j) with
//! i < j, listed lexicographically; that listing is the canonical edge order
//! used everywhere (tensors, encodings, iteration).

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Behavior of an edge operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Zero,
    Identity,
    LinearRelu,
    LinearTanh,
    DiagScale,
}

impl OpKind {
    /// Parameter shape for hidden width `h`; empty for parameterless kinds.
    pub fn param_shape(self, h: usize) -> Vec<usize> {
        match self {
            OpKind::Zero | OpKind::Identity => vec![],
            OpKind::LinearRelu | OpKind::LinearTanh => vec![h, h],
            OpKind::DiagScale => vec![h],
        }
    }

    pub fn is_parameterized(self) -> bool {
        !matches!(self, OpKind::Zero | OpKind::Identity)
    }
}

/// One operation in the vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpDesc {
    pub id: usize,
    pub name: String,
    pub kind: OpKind,
    pub param_shape: Vec<usize>,
}

/// Ordered list of candidate operations, shared by every edge.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpVocab {
    ops: Vec<OpDesc>,
}

impl OpVocab {
    /// Validates ids are the positions 0..m and names are unique.
    pub fn new(ops: Vec<OpDesc>) -> Result<Self> {
        if ops.is_empty() {
            return Err(Error::InvalidSpace("op vocabulary is empty".into()));
        }
        for (i, op) in ops.iter().enumerate() {
            if op.id != i {
                return Err(Error::InvalidSpace(format!(
                    "op id {} at position {i}; ids must be contiguous from 0",
                    op.id
                )));
            }
            if ops[..i].iter().any(|o| o.name == op.name) {
                return Err(Error::InvalidSpace(format!("duplicate op name {}", op.name)));
            }
        }
        Ok(Self { ops })
    }

    /// The standard five-op vocabulary for hidden width `h`:
    /// zero, identity, linear_relu, linear_tanh, diag_scale.
    pub fn standard(h: usize) -> Self {
        Self::with_size(5, h).expect("standard vocabulary is valid")
    }

    /// A vocabulary of `m` ops: a prefix of the standard order for m <= 5,
    /// extended with extra parameterized ops ("linear_relu_b", ...) beyond.
    pub fn with_size(m: usize, h: usize) -> Result<Self> {
        let base = [
            ("zero", OpKind::Zero),
            ("identity", OpKind::Identity),
            ("linear_relu", OpKind::LinearRelu),
            ("linear_tanh", OpKind::LinearTanh),
            ("diag_scale", OpKind::DiagScale),
        ];
        let extra = [
            ("linear_relu_b", OpKind::LinearRelu),
            ("linear_tanh_b", OpKind::LinearTanh),
            ("diag_scale_b", OpKind::DiagScale),
        ];
        if m == 0 || m > base.len() + extra.len() {
            return Err(Error::InvalidSpace(format!("unsupported vocabulary size {m}")));
        }
        let ops = base
            .iter()
            .chain(extra.iter())
            .take(m)
            .enumerate()
            .map(|(id, (name, kind))| OpDesc {
                id,
                name: (*name).into(),
                kind: *kind,
                param_shape: kind.param_shape(h),
            })
            .collect();
        Self::new(ops)
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn op(&self, id: usize) -> Option<&OpDesc> {
        self.ops.get(id)
    }

    pub fn ops(&self) -> &[OpDesc] {
        &self.ops
    }
}

/// A complete-DAG cell space: n nodes, every (i, j) pair with i < j an edge,
/// the same vocabulary on each edge, hidden width h.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSpace {
    nodes: usize,
    hidden: usize,
    vocab: OpVocab,
}

impl SearchSpace {
    pub fn new(nodes: usize, hidden: usize, vocab: OpVocab) -> Result<Self> {
        if nodes < 2 {
            return Err(Error::InvalidSpace(format!(
                "need at least 2 nodes, got {nodes}"
            )));
        }
        if hidden == 0 {
            return Err(Error::InvalidSpace("hidden width must be positive".into()));
        }
        for op in vocab.ops() {
            let want = op.kind.param_shape(hidden);
            if op.param_shape != want {
                return Err(Error::InvalidSpace(format!(
                    "op {} has param shape {:?}, expected {:?} for h={hidden}",
                    op.name, op.param_shape, want
                )));
            }
        }
        Ok(Self { nodes, hidden, vocab })
    }

    /// Standard vocabulary space.
    pub fn standard(nodes: usize, ops: usize, hidden: usize) -> Result<Arc<Self>> {
        Ok(Arc::new(Self::new(nodes, hidden, OpVocab::with_size(ops, hidden)?)?))
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn vocab(&self) -> &OpVocab {
        &self.vocab
    }

    pub fn num_ops(&self) -> usize {
        self.vocab.len()
    }

    pub fn num_edges(&self) -> usize {
        self.nodes * (self.nodes - 1) / 2
    }

    /// Endpoints (i, j) of edge `k` in canonical order, 1-based nodes.
    pub fn edge(&self, k: usize) -> (usize, usize) {
        debug_assert!(k < self.num_edges());
        let mut rest = k;
        for i in 1..self.nodes {
            let row = self.nodes - i;
            if rest < row {
                return (i, i + 1 + rest);
            }
            rest -= row;
        }
        unreachable!("edge index out of range")
    }

    /// Canonical index of edge (i, j); None unless 1 <= i < j <= n.
    pub fn edge_index(&self, i: usize, j: usize) -> Option<usize> {
        if i == 0 || i >= j || j > self.nodes {
            return None;
        }
        let before = (i - 1) * self.nodes - (i - 1) * i / 2;
        Some(before + (j - i - 1))
    }

    /// All edges in canonical order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.num_edges()).map(|k| self.edge(k)).collect()
    }
}

/// True when the two handles denote the same space.
pub(crate) fn same_space(a: &Arc<SearchSpace>, b: &Arc<SearchSpace>) -> bool {
    Arc::ptr_eq(a, b) || **a == **b
}

/// A rectangular sub-region of a space: a non-empty allowed-op subset on
/// every edge. A region with all subsets singleton is an architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    space: Arc<SearchSpace>,
    allowed: Vec<Vec<usize>>,
}

impl Region {
    /// The full space as a region.
    pub fn root(space: Arc<SearchSpace>) -> Self {
        let all: Vec<usize> = (0..space.num_ops()).collect();
        let allowed = vec![all; space.num_edges()];
        Self { space, allowed }
    }

    /// A region from explicit per-edge allowed sets. Sets are sorted and
    /// must be non-empty, duplicate-free, and within the vocabulary.
    pub fn new(space: Arc<SearchSpace>, mut allowed: Vec<Vec<usize>>) -> Result<Self> {
        if allowed.len() != space.num_edges() {
            return Err(Error::InvalidSpace(format!(
                "region has {} edge sets, space has {} edges",
                allowed.len(),
                space.num_edges()
            )));
        }
        for (k, set) in allowed.iter_mut().enumerate() {
            set.sort_unstable();
            set.dedup();
            if set.is_empty() {
                return Err(Error::InvalidSpace(format!("edge {k} allows no ops")));
            }
            if *set.last().unwrap() >= space.num_ops() {
                return Err(Error::InvalidSpace(format!(
                    "edge {k} allows op {} outside the vocabulary",
                    set.last().unwrap()
                )));
            }
        }
        Ok(Self { space, allowed })
    }

    pub fn space(&self) -> &Arc<SearchSpace> {
        &self.space
    }

    pub fn allowed(&self, k: usize) -> &[usize] {
        &self.allowed[k]
    }

    pub fn allowed_all(&self) -> &[Vec<usize>] {
        &self.allowed
    }

    /// Number of architectures in the region; saturates at u128::MAX.
    pub fn size(&self) -> u128 {
        self.allowed
            .iter()
            .map(|s| s.len() as u128)
            .try_fold(1u128, |acc, m| acc.checked_mul(m))
            .unwrap_or(u128::MAX)
    }

    pub fn is_singleton(&self) -> bool {
        self.allowed.iter().all(|s| s.len() == 1)
    }

    /// Edges whose allowed set still has more than one op.
    pub fn compound_edges(&self) -> Vec<usize> {
        (0..self.allowed.len())
            .filter(|&k| self.allowed[k].len() > 1)
            .collect()
    }

    /// The single architecture of a fully-fixed region, if it is one.
    pub fn fixed_architecture(&self) -> Option<Architecture> {
        if !self.is_singleton() {
            return None;
        }
        let choice = self.allowed.iter().map(|s| s[0]).collect();
        Some(Architecture {
            space: Arc::clone(&self.space),
            choice,
        })
    }

    /// Split on a compound edge: one child per allowed op, in ascending op
    /// id order; children partition the region.
    pub fn split(&self, edge: usize) -> Result<Vec<Region>> {
        if edge >= self.allowed.len() {
            return Err(Error::InvalidSpace(format!(
                "edge {edge} out of range ({} edges)",
                self.allowed.len()
            )));
        }
        if self.allowed[edge].len() < 2 {
            return Err(Error::AlreadySplit { edge });
        }
        Ok(self.allowed[edge]
            .iter()
            .map(|&op| {
                let mut allowed = self.allowed.clone();
                allowed[edge] = vec![op];
                Region {
                    space: Arc::clone(&self.space),
                    allowed,
                }
            })
            .collect())
    }

    /// Membership test; errors when the architecture belongs to a
    /// different space.
    pub fn contains(&self, arch: &Architecture) -> Result<bool> {
        if !same_space(&self.space, &arch.space) {
            return Err(Error::SpaceMismatch);
        }
        Ok(self
            .allowed
            .iter()
            .zip(&arch.choice)
            .all(|(set, op)| set.binary_search(op).is_ok()))
    }

    /// True when every allowed set of `self` is contained in `other`'s.
    pub fn is_subset_of(&self, other: &Region) -> Result<bool> {
        if !same_space(&self.space, &other.space) {
            return Err(Error::SpaceMismatch);
        }
        Ok(self
            .allowed
            .iter()
            .zip(&other.allowed)
            .all(|(a, b)| a.iter().all(|op| b.binary_search(op).is_ok())))
    }

    /// One architecture drawn uniformly: an independent uniform op pick per
    /// edge, consuming exactly one draw per edge in edge order.
    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Architecture {
        let choice = self
            .allowed
            .iter()
            .map(|ops| ops[rng.random_range(0..ops.len())])
            .collect();
        Architecture {
            space: Arc::clone(&self.space),
            choice,
        }
    }

    /// Exhaustive iterator in odometer order (edge 0 varies fastest,
    /// ascending op id within an edge). Errors above the caller's cap.
    pub fn enumerate(&self, cap: u128) -> Result<RegionIter> {
        let size = self.size();
        if size > cap {
            return Err(Error::EnumerationTooLarge { size, cap });
        }
        Ok(RegionIter {
            region: self.clone(),
            digits: vec![0; self.allowed.len()],
            remaining: size as u64,
        })
    }
}

/// Iterator over a region's architectures in odometer order.
#[derive(Debug)]
pub struct RegionIter {
    region: Region,
    digits: Vec<usize>,
    remaining: u64,
}

impl Iterator for RegionIter {
    type Item = Architecture;

    fn next(&mut self) -> Option<Architecture> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let choice: Vec<usize> = self
            .digits
            .iter()
            .zip(self.region.allowed.iter())
            .map(|(&d, set)| set[d])
            .collect();
        for (digit, set) in self.digits.iter_mut().zip(self.region.allowed.iter()) {
            *digit += 1;
            if *digit < set.len() {
                break;
            }
            *digit = 0;
        }
        Some(Architecture {
            space: Arc::clone(&self.region.space),
            choice,
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.remaining as usize, Some(self.remaining as usize))
    }
}

impl ExactSizeIterator for RegionIter {}

/// One op choice per edge.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    space: Arc<SearchSpace>,
    choice: Vec<usize>,
}

impl Architecture {
    pub fn new(space: Arc<SearchSpace>, choice: Vec<usize>) -> Result<Self> {
        if choice.len() != space.num_edges() {
            return Err(Error::ArchLength {
                expected: space.num_edges(),
                got: choice.len(),
            });
        }
        for (k, &op) in choice.iter().enumerate() {
            if op >= space.num_ops() {
                return Err(Error::ArchParse {
                    edge: k,
                    detail: format!("op id {op} outside vocabulary of {}", space.num_ops()),
                });
            }
        }
        Ok(Self { space, choice })
    }

    pub fn space(&self) -> &Arc<SearchSpace> {
        &self.space
    }

    pub fn choice(&self) -> &[usize] {
        &self.choice
    }

    pub fn op_at(&self, edge: usize) -> usize {
        self.choice[edge]
    }

    /// The architecture as a singleton region.
    pub fn as_region(&self) -> Region {
        Region {
            space: Arc::clone(&self.space),
            allowed: self.choice.iter().map(|&op| vec![op]).collect(),
        }
    }

    /// Canonical string form: op ids in edge order joined by '|'.
    pub fn encode(&self) -> String {
        let parts: Vec<String> = self.choice.iter().map(|op| op.to_string()).collect();
        parts.join("|")
    }

    /// Inverse of [`encode`]; diagnostics name the offending edge.
    pub fn decode(space: &Arc<SearchSpace>, text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.split('|').collect();
        if parts.len() != space.num_edges() {
            return Err(Error::ArchLength {
                expected: space.num_edges(),
                got: parts.len(),
            });
        }
        let mut choice = Vec::with_capacity(parts.len());
        for (k, part) in parts.iter().enumerate() {
            let op: usize = part.parse().map_err(|_| Error::ArchParse {
                edge: k,
                detail: format!("token {part:?} is not an op id"),
            })?;
            choice.push(op);
        }
        Self::new(Arc::clone(space), choice)
    }

    /// True when some path of non-zero ops connects node 1 to node n.
    pub fn reachable(&self) -> bool {
        let n = self.space.nodes();
        let mut reach = vec![false; n + 1];
        reach[1] = true;
        for j in 2..=n {
            for i in 1..j {
                let k = self.space.edge_index(i, j).unwrap();
                let kind = self.space.vocab().op(self.choice[k]).unwrap().kind;
                if kind != OpKind::Zero && reach[i] {
                    reach[j] = true;
                    break;
                }
            }
        }
        reach[n]
    }
}
