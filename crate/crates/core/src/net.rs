//! Reference network kernels: forward, cross-entropy loss, and reverse-mode
//! gradients for masked (single architecture) and mixture (softmax-weighted)
//! cell networks.
//!
//! Semantics: v_1 = stem(x); v_j = sum over incoming edges (i, j) of the
//! edge output applied to v_i; logits = head(v_n). All arithmetic is f32
//! with a fixed accumulation order (nodes ascending, edges in canonical
//! order, row-major loops) and no fused multiply-add, so a (seed, config)
//! pair reproduces bit-identical results within a build. Hot reductions
//! split into a fixed number of independent accumulator lanes for
//! instruction-level parallelism; the lane assignment never varies, so
//! determinism holds. Loss and accuracy reductions accumulate per-row f32
//! values into f64.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::space::{Architecture, OpKind, Region, SearchSpace};
use crate::store::{self, Tensor, TensorSpec, WeightStore, HEAD, STEM};

/// Input/output dimensions a network is wired for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IoDims {
    pub input: usize,
    pub classes: usize,
}

/// Dense row-major f32 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// New matrix holding the given rows in order.
    pub fn gather_rows(&self, idx: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(idx.len(), self.cols);
        for (r, &src) in idx.iter().enumerate() {
            out.data[r * self.cols..(r + 1) * self.cols].copy_from_slice(self.row(src));
        }
        out
    }

    fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    fn add_scaled(&mut self, other: &Matrix, scale: f32) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * *b;
        }
    }
}

/// Numerically stable softmax over one slice.
pub fn softmax(xs: &[f32]) -> Vec<f32> {
    let max = xs.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = xs.iter().map(|&x| (x - max).exp()).collect();
    let sum: f32 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[derive(Debug, Clone)]
enum NetKind {
    Masked { choice: Vec<usize> },
    Mixture { allowed: Vec<Vec<usize>>, alpha: Vec<Vec<f32>> },
}

/// A runnable network: either one architecture with every other op masked
/// out, or the full mixture over a region with softmax(alpha) edge weights.
#[derive(Debug, Clone)]
pub struct NetworkDef {
    space: Arc<SearchSpace>,
    dims: IoDims,
    kind: NetKind,
}

/// Gradients keyed like the weight store, plus d(loss)/d(alpha) for
/// mixture networks. Tensors absent from every active path hold zeros;
/// parameterless ops have no entry at all.
#[derive(Debug, Clone)]
pub struct Grads {
    pub tensors: BTreeMap<String, Tensor>,
    pub alpha: Option<Vec<Vec<f32>>>,
}

impl NetworkDef {
    /// Network of a single architecture.
    pub fn masked(arch: &Architecture, dims: IoDims) -> Self {
        Self {
            space: Arc::clone(arch.space()),
            dims,
            kind: NetKind::Masked {
                choice: arch.choice().to_vec(),
            },
        }
    }

    /// Softmax-weighted mixture over a region; alpha must align with the
    /// region's allowed sets.
    pub fn mixture(region: &Region, alpha: &[Vec<f32>], dims: IoDims) -> Result<Self> {
        if alpha.len() != region.allowed_all().len() {
            return Err(Error::InvalidConfig(format!(
                "alpha has {} edges, region has {}",
                alpha.len(),
                region.allowed_all().len()
            )));
        }
        for (k, (a, set)) in alpha.iter().zip(region.allowed_all()).enumerate() {
            if a.len() != set.len() {
                return Err(Error::InvalidConfig(format!(
                    "alpha[{k}] has {} entries, edge allows {}",
                    a.len(),
                    set.len()
                )));
            }
        }
        Ok(Self {
            space: Arc::clone(region.space()),
            dims,
            kind: NetKind::Mixture {
                allowed: region.allowed_all().to_vec(),
                alpha: alpha.to_vec(),
            },
        })
    }

    pub fn space(&self) -> &Arc<SearchSpace> {
        &self.space
    }

    pub fn dims(&self) -> IoDims {
        self.dims
    }

    pub fn is_mixture(&self) -> bool {
        matches!(self.kind, NetKind::Mixture { .. })
    }

    /// Specs of every tensor this network reads.
    pub fn tensor_specs(&self) -> Vec<TensorSpec> {
        let allowed: Vec<Vec<usize>> = match &self.kind {
            NetKind::Masked { choice } => choice.iter().map(|&op| vec![op]).collect(),
            NetKind::Mixture { allowed, .. } => allowed.clone(),
        };
        store::specs_for(&self.space, self.dims, &allowed)
    }

    /// Per-edge (op id, coefficient) pairs: the chosen op at weight 1 for a
    /// masked net, softmax(alpha) over the allowed set for a mixture.
    fn entries(&self) -> Vec<Vec<(usize, f32)>> {
        match &self.kind {
            NetKind::Masked { choice } => choice.iter().map(|&op| vec![(op, 1.0)]).collect(),
            NetKind::Mixture { allowed, alpha } => allowed
                .iter()
                .zip(alpha)
                .map(|(ops, a)| {
                    let coeffs = softmax(a);
                    ops.iter().copied().zip(coeffs).collect()
                })
                .collect(),
        }
    }

    fn check_batch(&self, x: &Matrix, y: Option<&[usize]>) -> Result<()> {
        if x.cols() != self.dims.input {
            return Err(Error::InvalidConfig(format!(
                "batch has {} input columns, network expects {}",
                x.cols(),
                self.dims.input
            )));
        }
        if x.rows() == 0 {
            return Err(Error::InvalidConfig("empty batch".into()));
        }
        if let Some(y) = y {
            if y.len() != x.rows() {
                return Err(Error::InvalidConfig(format!(
                    "{} labels for {} rows",
                    y.len(),
                    x.rows()
                )));
            }
            if let Some(&bad) = y.iter().find(|&&l| l >= self.dims.classes) {
                return Err(Error::InvalidConfig(format!(
                    "label {bad} outside {} classes",
                    self.dims.classes
                )));
            }
        }
        Ok(())
    }

    /// Logits for a batch.
    pub fn forward(&self, weights: &WeightStore, x: &Matrix) -> Result<Matrix> {
        Ok(self.run_forward(weights, x)?.logits)
    }

    /// Mean cross-entropy over the batch.
    pub fn loss(&self, weights: &WeightStore, x: &Matrix, y: &[usize]) -> Result<f64> {
        self.check_batch(x, Some(y))?;
        let state = self.run_forward(weights, x)?;
        Ok(cross_entropy(&state.logits, y).0)
    }

    /// Exact-match accuracy; argmax ties resolve to the lowest class index.
    pub fn accuracy(&self, weights: &WeightStore, x: &Matrix, y: &[usize]) -> Result<f64> {
        self.check_batch(x, Some(y))?;
        let logits = self.forward(weights, x)?;
        let mut correct = 0u64;
        for (r, &label) in y.iter().enumerate() {
            if argmax(logits.row(r)) == label {
                correct += 1;
            }
        }
        Ok(correct as f64 / y.len() as f64)
    }

    /// Mean cross-entropy and gradients for every referenced tensor (and
    /// alpha when the network is a mixture).
    pub fn loss_and_grad(
        &self,
        weights: &WeightStore,
        x: &Matrix,
        y: &[usize],
    ) -> Result<(f64, Grads)> {
        self.check_batch(x, Some(y))?;
        let state = self.run_forward(weights, x)?;
        let (loss, probs) = cross_entropy(&state.logits, y);
        self.backward(weights, x, y, state, probs).map(|g| (loss, g))
    }

    fn run_forward(&self, weights: &WeightStore, x: &Matrix) -> Result<ForwardState> {
        self.check_batch(x, None)?;
        let n = self.space.nodes();
        let h = self.space.hidden();
        let batch = x.rows();
        let entries = self.entries();

        let stem = weights.expect(STEM, &[h, self.dims.input + 1])?;
        let head = weights.expect(HEAD, &[self.dims.classes, h + 1])?;

        let mut nodes: Vec<Matrix> = Vec::with_capacity(n);
        nodes.push(affine(stem, x));
        let mut caches: Vec<Vec<OpCache>> =
            (0..self.space.num_edges()).map(|_| Vec::new()).collect();

        for j in 2..=n {
            let mut acc = Matrix::zeros(batch, h);
            for i in 1..j {
                let k = self.space.edge_index(i, j).unwrap();
                let vi = &nodes[i - 1];
                let mut edge_caches = Vec::with_capacity(entries[k].len());
                for &(op, coeff) in &entries[k] {
                    let kind = self.op_kind(op);
                    let cache = match kind {
                        OpKind::Zero => OpCache::default(),
                        OpKind::Identity => {
                            acc.add_scaled(vi, coeff);
                            OpCache::default()
                        }
                        OpKind::LinearRelu | OpKind::LinearTanh => {
                            let w = weights.expect(&store::edge_tensor_name(k, op), &[h, h])?;
                            let pre = matmul(w, vi);
                            let out = activate(&pre, kind);
                            acc.add_scaled(&out, coeff);
                            OpCache {
                                pre: Some(pre),
                                out: Some(out),
                            }
                        }
                        OpKind::DiagScale => {
                            let s = weights.expect(&store::edge_tensor_name(k, op), &[h])?;
                            let out = diag_apply(&s.data, vi);
                            acc.add_scaled(&out, coeff);
                            OpCache {
                                pre: None,
                                out: Some(out),
                            }
                        }
                    };
                    edge_caches.push(cache);
                }
                caches[k] = edge_caches;
            }
            nodes.push(acc);
        }

        let logits = affine(head, &nodes[n - 1]);
        Ok(ForwardState {
            nodes,
            caches,
            logits,
            entries,
        })
    }

    fn backward(
        &self,
        weights: &WeightStore,
        x: &Matrix,
        y: &[usize],
        state: ForwardState,
        probs: Matrix,
    ) -> Result<Grads> {
        let n = self.space.nodes();
        let h = self.space.hidden();
        let batch = x.rows();
        let inv_b = 1.0f32 / batch as f32;

        let mut grads = Grads {
            tensors: self
                .tensor_specs()
                .into_iter()
                .map(|s| (s.name, Tensor::zeros(s.shape)))
                .collect(),
            alpha: match &self.kind {
                NetKind::Mixture { alpha, .. } => {
                    Some(alpha.iter().map(|a| vec![0.0; a.len()]).collect())
                }
                NetKind::Masked { .. } => None,
            },
        };

        // d(loss)/d(logits) = (softmax - onehot) / batch.
        let mut glogits = probs;
        for (r, &label) in y.iter().enumerate() {
            let base = r * glogits.cols();
            glogits.data_mut()[base + label] -= 1.0;
        }
        for v in glogits.data_mut() {
            *v *= inv_b;
        }

        let head = weights.expect(HEAD, &[self.dims.classes, h + 1])?;
        {
            let ghead = grads.tensors.get_mut(HEAD).unwrap();
            affine_grad(ghead, &glogits, &state.nodes[n - 1]);
        }
        let mut gnodes: Vec<Matrix> = (0..n).map(|_| Matrix::zeros(batch, h)).collect();
        gnodes[n - 1] = affine_input_grad(head, &glogits);

        for j in (2..=n).rev() {
            let gj = std::mem::replace(&mut gnodes[j - 1], Matrix::zeros(0, 0));
            for i in 1..j {
                let k = self.space.edge_index(i, j).unwrap();
                let vi = &state.nodes[i - 1];
                let mixture_coeffs: Option<Vec<f32>> = match &self.kind {
                    NetKind::Mixture { .. } => {
                        Some(state.entries[k].iter().map(|&(_, c)| c).collect())
                    }
                    NetKind::Masked { .. } => None,
                };
                let mut dcoeff: Vec<f32> = Vec::new();
                for (e, &(op, coeff)) in state.entries[k].iter().enumerate() {
                    let kind = self.op_kind(op);
                    let cache = &state.caches[k][e];
                    if mixture_coeffs.is_some() {
                        // d(loss)/d(coeff) = <op output, d(loss)/d(v_j)>.
                        let d = match kind {
                            OpKind::Zero => 0.0,
                            OpKind::Identity => dot(vi, &gj),
                            _ => dot(cache.out.as_ref().unwrap(), &gj),
                        };
                        dcoeff.push(d);
                    }
                    match kind {
                        OpKind::Zero => {}
                        OpKind::Identity => {
                            gnodes[i - 1].add_scaled(&gj, coeff);
                        }
                        OpKind::LinearRelu | OpKind::LinearTanh => {
                            let name = store::edge_tensor_name(k, op);
                            let w = weights.expect(&name, &[h, h])?;
                            let mut dpre = Matrix::zeros(batch, h);
                            {
                                let pre = cache.pre.as_ref().unwrap();
                                let out = cache.out.as_ref().unwrap();
                                for idx in 0..dpre.data.len() {
                                    let gate = match kind {
                                        OpKind::LinearRelu => {
                                            if pre.data[idx] > 0.0 {
                                                1.0
                                            } else {
                                                0.0
                                            }
                                        }
                                        OpKind::LinearTanh => {
                                            let t = out.data[idx];
                                            1.0 - t * t
                                        }
                                        _ => unreachable!(),
                                    };
                                    dpre.data[idx] = coeff * gj.data[idx] * gate;
                                }
                            }
                            let gw = grads.tensors.get_mut(&name).unwrap();
                            matmul_grad(gw, &dpre, vi);
                            let back = matmul_transposed(w, &dpre);
                            gnodes[i - 1].add_assign(&back);
                        }
                        OpKind::DiagScale => {
                            let name = store::edge_tensor_name(k, op);
                            let s = weights.expect(&name, &[h])?;
                            {
                                let gs = grads.tensors.get_mut(&name).unwrap();
                                let c64 = f64::from(coeff);
                                let mut scratch = vec![0.0f64; h];
                                for b in 0..batch {
                                    let (grow, vrow) = (gj.row(b), vi.row(b));
                                    for (sv, (gv, vv)) in
                                        scratch.iter_mut().zip(grow.iter().zip(vrow))
                                    {
                                        *sv += f64::from(*gv) * f64::from(*vv);
                                    }
                                }
                                for (gv, sv) in gs.data.iter_mut().zip(&scratch) {
                                    *gv += (c64 * *sv) as f32;
                                }
                            }
                            for b in 0..batch {
                                let base = b * h;
                                for q in 0..h {
                                    gnodes[i - 1].data[base + q] +=
                                        coeff * gj.data[base + q] * s.data[q];
                                }
                            }
                        }
                    }
                }
                if let Some(coeffs) = mixture_coeffs {
                    // Softmax jacobian: d(alpha_o) = c_o (dcoeff_o - sum c dcoeff).
                    let weighted: f64 = coeffs
                        .iter()
                        .zip(&dcoeff)
                        .map(|(c, d)| f64::from(*c) * f64::from(*d))
                        .sum();
                    let ga = &mut grads.alpha.as_mut().unwrap()[k];
                    for (o, (c, d)) in coeffs.iter().zip(&dcoeff).enumerate() {
                        ga[o] += (f64::from(*c) * (f64::from(*d) - weighted)) as f32;
                    }
                }
            }
        }

        {
            let gstem = grads.tensors.get_mut(STEM).unwrap();
            affine_grad(gstem, &gnodes[0], x);
        }
        Ok(grads)
    }

    fn op_kind(&self, op: usize) -> OpKind {
        self.space.vocab().op(op).expect("op id validated").kind
    }
}

#[derive(Debug, Default)]
struct OpCache {
    pre: Option<Matrix>,
    out: Option<Matrix>,
}

struct ForwardState {
    nodes: Vec<Matrix>,
    caches: Vec<Vec<OpCache>>,
    logits: Matrix,
    entries: Vec<Vec<(usize, f32)>>,
}

/// Dot product with four fixed-order independent accumulators: the same
/// result every run, but the chains let the compiler keep several FP adds
/// in flight instead of serializing on one.
fn dot4(a: &[f32], b: &[f32]) -> f32 {
    let n = a.len();
    let (mut s0, mut s1, mut s2, mut s3) = (0.0f32, 0.0f32, 0.0f32, 0.0f32);
    let mut i = 0;
    while i + 4 <= n {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
        i += 4;
    }
    let mut rest = 0.0f32;
    while i < n {
        rest += a[i] * b[i];
        i += 1;
    }
    ((s0 + s2) + (s1 + s3)) + rest
}

/// y = W[:, :in] x + W[:, in] for W stored as (out, in+1).
fn affine(w: &Tensor, x: &Matrix) -> Matrix {
    let out_dim = w.shape[0];
    let in_dim = w.shape[1] - 1;
    debug_assert_eq!(x.cols(), in_dim);
    let mut out = Matrix::zeros(x.rows(), out_dim);
    for b in 0..x.rows() {
        let xrow = x.row(b);
        let orow = &mut out.data[b * out_dim..(b + 1) * out_dim];
        for (p, ov) in orow.iter_mut().enumerate() {
            let wrow = &w.data[p * (in_dim + 1)..p * (in_dim + 1) + in_dim + 1];
            *ov = dot4(&wrow[..in_dim], xrow) + wrow[in_dim];
        }
    }
    out
}

// Backward reductions accumulate in f64 and round once per element.
// Forward stays pure f32 (it defines the model); gradients only feed the
// optimizer and the finite-difference check, where f32 partial sums would
// lose several digits to cancellation across the batch.

/// Accumulate affine gradients: dW[p][q] += sum_b g[b][p] x[b][q], bias
/// column dW[p][in] += sum_b g[b][p]. Sums run over b ascending into an f64
/// scratch row so the inner loop is contiguous and per-column independent.
fn affine_grad(gw: &mut Tensor, g: &Matrix, x: &Matrix) {
    let in_dim = gw.shape[1] - 1;
    let mut scratch = vec![0.0f64; in_dim];
    for (p, grow) in gw.data.chunks_exact_mut(in_dim + 1).enumerate() {
        scratch.iter_mut().for_each(|v| *v = 0.0);
        let mut bias = 0.0f64;
        for b in 0..g.rows() {
            let gv = f64::from(g.at(b, p));
            let xrow = x.row(b);
            for (sv, xv) in scratch.iter_mut().zip(xrow) {
                *sv += gv * f64::from(*xv);
            }
            bias += gv;
        }
        for (gv, sv) in grow[..in_dim].iter_mut().zip(&scratch) {
            *gv += *sv as f32;
        }
        grow[in_dim] += bias as f32;
    }
}

/// dx[b][q] = sum_p g[b][p] W[p][q] for the affine map (bias ignored).
fn affine_input_grad(w: &Tensor, g: &Matrix) -> Matrix {
    let out_dim = w.shape[0];
    let in_dim = w.shape[1] - 1;
    let mut dx = Matrix::zeros(g.rows(), in_dim);
    let mut scratch = vec![0.0f64; in_dim];
    for b in 0..g.rows() {
        scratch.iter_mut().for_each(|v| *v = 0.0);
        let grow = g.row(b);
        for (p, gp) in grow.iter().take(out_dim).enumerate() {
            let gv = f64::from(*gp);
            let wrow = &w.data[p * (in_dim + 1)..p * (in_dim + 1) + in_dim];
            for (sv, wv) in scratch.iter_mut().zip(wrow) {
                *sv += gv * f64::from(*wv);
            }
        }
        let drow = &mut dx.data[b * in_dim..(b + 1) * in_dim];
        for (dv, sv) in drow.iter_mut().zip(&scratch) {
            *dv = *sv as f32;
        }
    }
    dx
}

/// pre = x W^T for a square weight (h, h): pre[b][p] = sum_q W[p][q] x[b][q].
fn matmul(w: &Tensor, x: &Matrix) -> Matrix {
    let h = w.shape[0];
    let mut out = Matrix::zeros(x.rows(), h);
    for b in 0..x.rows() {
        let xrow = x.row(b);
        let orow = &mut out.data[b * h..(b + 1) * h];
        for (p, ov) in orow.iter_mut().enumerate() {
            *ov = dot4(&w.data[p * h..(p + 1) * h], xrow);
        }
    }
    out
}

/// Accumulate dW[p][q] += sum_b dpre[b][p] x[b][q].
fn matmul_grad(gw: &mut Tensor, dpre: &Matrix, x: &Matrix) {
    let h = gw.shape[0];
    let mut scratch = vec![0.0f64; h];
    for (p, grow) in gw.data.chunks_exact_mut(h).enumerate() {
        scratch.iter_mut().for_each(|v| *v = 0.0);
        for b in 0..dpre.rows() {
            let gv = f64::from(dpre.at(b, p));
            for (sv, xv) in scratch.iter_mut().zip(x.row(b)) {
                *sv += gv * f64::from(*xv);
            }
        }
        for (gv, sv) in grow.iter_mut().zip(&scratch) {
            *gv += *sv as f32;
        }
    }
}

/// dx[b][q] = sum_p dpre[b][p] W[p][q].
fn matmul_transposed(w: &Tensor, dpre: &Matrix) -> Matrix {
    let h = w.shape[0];
    let mut dx = Matrix::zeros(dpre.rows(), h);
    let mut scratch = vec![0.0f64; h];
    for b in 0..dpre.rows() {
        scratch.iter_mut().for_each(|v| *v = 0.0);
        let grow = dpre.row(b);
        for (p, gp) in grow.iter().enumerate() {
            let gv = f64::from(*gp);
            for (sv, wv) in scratch.iter_mut().zip(&w.data[p * h..(p + 1) * h]) {
                *sv += gv * f64::from(*wv);
            }
        }
        let drow = &mut dx.data[b * h..(b + 1) * h];
        for (dv, sv) in drow.iter_mut().zip(&scratch) {
            *dv = *sv as f32;
        }
    }
    dx
}

fn activate(pre: &Matrix, kind: OpKind) -> Matrix {
    let mut out = pre.clone();
    match kind {
        OpKind::LinearRelu => {
            for v in out.data.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        OpKind::LinearTanh => {
            for v in out.data.iter_mut() {
                *v = v.tanh();
            }
        }
        _ => unreachable!("activation only for linear ops"),
    }
    out
}

fn diag_apply(s: &[f32], x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for b in 0..x.rows() {
        let row = &mut out.data[b * x.cols..(b + 1) * x.cols];
        for (v, g) in row.iter_mut().zip(s) {
            *v *= *g;
        }
    }
    out
}

fn dot(a: &Matrix, b: &Matrix) -> f32 {
    let n = a.data.len();
    let (mut s0, mut s1, mut s2, mut s3) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut i = 0;
    while i + 4 <= n {
        s0 += f64::from(a.data[i]) * f64::from(b.data[i]);
        s1 += f64::from(a.data[i + 1]) * f64::from(b.data[i + 1]);
        s2 += f64::from(a.data[i + 2]) * f64::from(b.data[i + 2]);
        s3 += f64::from(a.data[i + 3]) * f64::from(b.data[i + 3]);
        i += 4;
    }
    let mut rest = 0.0f64;
    while i < n {
        rest += f64::from(a.data[i]) * f64::from(b.data[i]);
        i += 1;
    }
    (((s0 + s2) + (s1 + s3)) + rest) as f32
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy (natural log) and the softmax probabilities.
fn cross_entropy(logits: &Matrix, y: &[usize]) -> (f64, Matrix) {
    let c = logits.cols();
    let mut probs = Matrix::zeros(logits.rows(), c);
    let mut total = 0.0f64;
    for (r, &label) in y.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        let prow = &mut probs.data[r * c..(r + 1) * c];
        for (p, &l) in prow.iter_mut().zip(row) {
            *p = (l - max).exp();
            sum += *p;
        }
        for p in prow.iter_mut() {
            *p /= sum;
        }
        let loss_r = sum.ln() + max - row[label];
        total += f64::from(loss_r);
    }
    (total / y.len() as f64, probs)
}

// ---------------------------------------------------------------------------
// Gradient checking against central finite differences.
//
// The finite-difference side evaluates the loss through an f64 twin of the
// forward pass: with f32 evaluation the quantization noise at eps = 1e-3
// would swamp the 1e-4 tolerance. Coordinates whose +/-eps perturbation
// flips any relu gate are resampled; a central difference across a kink
// does not estimate the one-sided gradient.
// ---------------------------------------------------------------------------

const GRAD_CHECK_COORDS: usize = 50;
const GRAD_CHECK_EPS: f64 = 1e-3;
const GRAD_CHECK_BATCH: usize = 16;

/// Worst relative error between analytic gradients and f64 central
/// differences over 50 sampled coordinates, with weights drawn from the
/// standard init policy at `seed`. The error is normwise: each difference
/// is divided by max(|analytic|, |fd|, infinity norm of the gradient).
pub fn grad_check(def: &NetworkDef, seed: u64) -> Result<f64> {
    let specs = def.tensor_specs();
    let weights = store::init_store(&specs, seed);

    let mut xr = rng::stream(seed, "gradcheck/x");
    let mut x = Matrix::zeros(GRAD_CHECK_BATCH, def.dims.input);
    for v in x.data.iter_mut() {
        let z: f64 = xr.sample(StandardNormal);
        *v = z as f32;
    }
    let mut yr = rng::stream(seed, "gradcheck/y");
    let y: Vec<usize> = (0..GRAD_CHECK_BATCH)
        .map(|_| yr.random_range(0..def.dims.classes))
        .collect();

    let (_, grads) = def.loss_and_grad(&weights, &x, &y)?;

    // Normwise scale: coordinates that nearly cancel sit below the f32
    // forward-noise floor (~1e-7 of the summed term scale), so componentwise
    // relative error cannot be resolved there. Differences are normalized by
    // the gradient's infinity norm instead.
    let mut gmax = 0.0f64;
    for t in grads.tensors.values() {
        for &v in &t.data {
            gmax = gmax.max(f64::from(v).abs());
        }
    }
    if let Some(alpha) = &grads.alpha {
        for a in alpha {
            for &v in a {
                gmax = gmax.max(f64::from(v).abs());
            }
        }
    }
    let norm_scale = gmax.max(1e-6);

    // f64 images of weights, alpha, and inputs for the FD evaluations.
    let mut w64: BTreeMap<String, Vec<f64>> = weights
        .iter()
        .map(|(name, t)| (name.clone(), t.data.iter().map(|&v| f64::from(v)).collect()))
        .collect();
    let mut a64: Option<Vec<Vec<f64>>> = match &def.kind {
        NetKind::Mixture { alpha, .. } => Some(
            alpha
                .iter()
                .map(|a| a.iter().map(|&v| f64::from(v)).collect())
                .collect(),
        ),
        NetKind::Masked { .. } => None,
    };
    let x64: Vec<f64> = x.data.iter().map(|&v| f64::from(v)).collect();

    // Flat coordinate space: tensors in store order, then alpha entries.
    let tensor_sizes: Vec<(String, usize)> = weights
        .iter()
        .map(|(name, t)| (name.clone(), t.elem_count()))
        .collect();
    let weight_total: usize = tensor_sizes.iter().map(|(_, s)| s).sum();
    let alpha_total: usize = a64
        .as_ref()
        .map(|a| a.iter().map(Vec::len).sum())
        .unwrap_or(0);
    let total = weight_total + alpha_total;

    let mut crng = rng::stream(seed, "gradcheck/coords");
    let mut worst = 0.0f64;
    let mut found = 0usize;
    let mut attempts = 0usize;
    while found < GRAD_CHECK_COORDS && attempts < 40 * GRAD_CHECK_COORDS {
        attempts += 1;
        let c = crng.random_range(0..total);
        let analytic;
        let fd;
        if c < weight_total {
            let mut rest = c;
            let mut name = "";
            for (n, s) in &tensor_sizes {
                if rest < *s {
                    name = n;
                    break;
                }
                rest -= s;
            }
            analytic = f64::from(grads.tensors[name].data[rest]);
            let orig = w64.get(name).unwrap()[rest];
            w64.get_mut(name).unwrap()[rest] = orig + GRAD_CHECK_EPS;
            let (lp, gp) = loss_f64(def, &w64, a64.as_ref(), &x64, x.rows(), &y);
            w64.get_mut(name).unwrap()[rest] = orig - GRAD_CHECK_EPS;
            let (lm, gm) = loss_f64(def, &w64, a64.as_ref(), &x64, x.rows(), &y);
            w64.get_mut(name).unwrap()[rest] = orig;
            if gp != gm {
                continue;
            }
            fd = (lp - lm) / (2.0 * GRAD_CHECK_EPS);
        } else {
            let mut rest = c - weight_total;
            let alpha = a64.as_mut().unwrap();
            let (mut k, mut o) = (0, 0);
            for (kk, a) in alpha.iter().enumerate() {
                if rest < a.len() {
                    k = kk;
                    o = rest;
                    break;
                }
                rest -= a.len();
            }
            analytic = f64::from(grads.alpha.as_ref().unwrap()[k][o]);
            let orig = alpha[k][o];
            alpha[k][o] = orig + GRAD_CHECK_EPS;
            let (lp, gp) = loss_f64(def, &w64, Some(alpha), &x64, x.rows(), &y);
            alpha[k][o] = orig - GRAD_CHECK_EPS;
            let (lm, gm) = loss_f64(def, &w64, Some(alpha), &x64, x.rows(), &y);
            alpha[k][o] = orig;
            if gp != gm {
                continue;
            }
            fd = (lp - lm) / (2.0 * GRAD_CHECK_EPS);
        }
        let scale = analytic.abs().max(fd.abs()).max(norm_scale);
        let rel = (analytic - fd).abs() / scale;
        if rel > worst {
            worst = rel;
        }
        found += 1;
    }
    Ok(worst)
}

/// f64 twin of the forward pass; returns (loss, relu gate pattern).
fn loss_f64(
    def: &NetworkDef,
    w64: &BTreeMap<String, Vec<f64>>,
    a64: Option<&Vec<Vec<f64>>>,
    x64: &[f64],
    batch: usize,
    y: &[usize],
) -> (f64, Vec<bool>) {
    let n = def.space.nodes();
    let h = def.space.hidden();
    let d = def.dims.input;
    let c = def.dims.classes;
    let mut gates = Vec::new();

    let entries: Vec<Vec<(usize, f64)>> = match &def.kind {
        NetKind::Masked { choice } => choice.iter().map(|&op| vec![(op, 1.0)]).collect(),
        NetKind::Mixture { allowed, .. } => {
            let alpha = a64.expect("mixture network needs alpha image");
            allowed
                .iter()
                .zip(alpha)
                .map(|(ops, a)| {
                    let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = a.iter().map(|&v| (v - max).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    ops.iter().copied().zip(exps.into_iter().map(|e| e / sum)).collect()
                })
                .collect()
        }
    };

    let stem = &w64[STEM];
    let mut nodes: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut v0 = vec![0.0f64; batch * h];
    for b in 0..batch {
        for p in 0..h {
            let wrow = &stem[p * (d + 1)..(p + 1) * (d + 1)];
            let mut acc = 0.0f64;
            for q in 0..d {
                acc += wrow[q] * x64[b * d + q];
            }
            v0[b * h + p] = acc + wrow[d];
        }
    }
    nodes.push(v0);

    for j in 2..=n {
        let mut acc = vec![0.0f64; batch * h];
        for i in 1..j {
            let k = def.space.edge_index(i, j).unwrap();
            let vi = nodes[i - 1].clone();
            for &(op, coeff) in &entries[k] {
                match def.op_kind(op) {
                    OpKind::Zero => {}
                    OpKind::Identity => {
                        for (a, v) in acc.iter_mut().zip(&vi) {
                            *a += coeff * v;
                        }
                    }
                    kind @ (OpKind::LinearRelu | OpKind::LinearTanh) => {
                        let w = &w64[&store::edge_tensor_name(k, op)];
                        for b in 0..batch {
                            for p in 0..h {
                                let wrow = &w[p * h..(p + 1) * h];
                                let mut pre = 0.0f64;
                                for q in 0..h {
                                    pre += wrow[q] * vi[b * h + q];
                                }
                                let out = match kind {
                                    OpKind::LinearRelu => {
                                        gates.push(pre > 0.0);
                                        if pre > 0.0 {
                                            pre
                                        } else {
                                            0.0
                                        }
                                    }
                                    _ => pre.tanh(),
                                };
                                acc[b * h + p] += coeff * out;
                            }
                        }
                    }
                    OpKind::DiagScale => {
                        let s = &w64[&store::edge_tensor_name(k, op)];
                        for b in 0..batch {
                            for q in 0..h {
                                acc[b * h + q] += coeff * s[q] * vi[b * h + q];
                            }
                        }
                    }
                }
            }
        }
        nodes.push(acc);
    }

    let head = &w64[HEAD];
    let vn = &nodes[n - 1];
    let mut total = 0.0f64;
    for (b, &label) in y.iter().enumerate() {
        let mut logits = vec![0.0f64; c];
        for (p, l) in logits.iter_mut().enumerate() {
            let wrow = &head[p * (h + 1)..(p + 1) * (h + 1)];
            let mut acc = 0.0f64;
            for q in 0..h {
                acc += wrow[q] * vn[b * h + q];
            }
            *l = acc + wrow[h];
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
        total += sum.ln() + max - logits[label];
    }
    (total / batch as f64, gates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{OpDesc, OpVocab};

    fn dims() -> IoDims {
        IoDims {
            input: 8,
            classes: 4,
        }
    }

    fn space3() -> Arc<SearchSpace> {
        SearchSpace::standard(3, 5, 16).unwrap()
    }

    fn random_batch(seed: u64, rows: usize, d: usize, c: usize) -> (Matrix, Vec<usize>) {
        let mut xr = rng::stream(seed, "test/x");
        let mut x = Matrix::zeros(rows, d);
        for v in x.data_mut().iter_mut() {
            let z: f64 = xr.sample(StandardNormal);
            *v = z as f32;
        }
        let mut yr = rng::stream(seed, "test/y");
        let y = (0..rows).map(|_| yr.random_range(0..c)).collect();
        (x, y)
    }

    #[test]
    fn uniform_logits_cost_ln_classes() {
        let s = space3();
        let a = Architecture::decode(&s, "0|0|0").unwrap();
        let def = NetworkDef::masked(&a, dims());
        // All weights zero: logits are the zero head bias everywhere.
        let mut w = WeightStore::new();
        for spec in def.tensor_specs() {
            w.insert(spec.name.clone(), Tensor::zeros(spec.shape.clone()));
        }
        let (x, y) = random_batch(1, 32, 8, 4);
        let loss = def.loss(&w, &x, &y).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-6);
        assert!(loss >= 0.0);
    }

    #[test]
    fn identity_paths_double_the_stem() {
        let s = space3();
        let a = Architecture::decode(&s, "1|1|1").unwrap();
        let def = NetworkDef::masked(&a, dims());
        let w = store::init_store(&def.tensor_specs(), 11);
        let (x, _) = random_batch(2, 8, 8, 4);
        let logits = def.forward(&w, &x).unwrap();

        // v3 = v1 + v2 where v2 = v1, so the head sees stem(x) + stem(x).
        let stem_out = affine(w.get(STEM).unwrap(), &x);
        let mut doubled = stem_out.clone();
        doubled.add_assign(&stem_out);
        let manual = affine(w.get(HEAD).unwrap(), &doubled);
        assert_eq!(logits.data(), manual.data());
    }

    #[test]
    fn zeroed_linear_weights_match_zero_op() {
        let s = space3();
        let with_linear = Architecture::decode(&s, "2|0|1").unwrap();
        let with_zero = Architecture::decode(&s, "0|0|1").unwrap();
        let def_a = NetworkDef::masked(&with_linear, dims());
        let def_b = NetworkDef::masked(&with_zero, dims());
        let mut w = store::init_store(&def_a.tensor_specs(), 5);
        w.get_mut("edge0/op2").unwrap().data.fill(0.0);
        let (x, _) = random_batch(3, 16, 8, 4);
        let la = def_a.forward(&w, &x).unwrap();
        let lb = def_b.forward(&w, &x).unwrap();
        assert_eq!(la.data(), lb.data());
    }

    #[test]
    fn masked_grads_cover_exactly_active_tensors() {
        let s = space3();
        let a = Architecture::decode(&s, "2|0|4").unwrap();
        let def = NetworkDef::masked(&a, dims());
        let w = store::init_store(&def.tensor_specs(), 3);
        let (x, y) = random_batch(4, 8, 8, 4);
        let (loss, grads) = def.loss_and_grad(&w, &x, &y).unwrap();
        assert!(loss.is_finite() && loss >= 0.0);
        let names: Vec<&String> = grads.tensors.keys().collect();
        assert_eq!(names, vec!["edge0/op2", "edge2/op4", "head", "stem"]);
        assert!(grads.alpha.is_none());
    }

    #[test]
    fn all_zero_architecture_trains_only_the_head_bias() {
        let s = space3();
        let a = Architecture::decode(&s, "0|0|0").unwrap();
        let def = NetworkDef::masked(&a, dims());
        let w = store::init_store(&def.tensor_specs(), 3);
        let (x, _) = random_batch(4, 8, 8, 4);
        // Unbalanced labels: a class hit exactly batch/classes times would
        // receive a legitimately zero bias gradient.
        let y = vec![0, 0, 0, 0, 1, 1, 1, 2];
        let (_, grads) = def.loss_and_grad(&w, &x, &y).unwrap();
        // v_n is zero, so only the head bias column sees gradient.
        let ghead = &grads.tensors["head"];
        for p in 0..4 {
            for q in 0..16 {
                assert_eq!(ghead.data[p * 17 + q], 0.0);
            }
            assert!(ghead.data[p * 17 + 16] != 0.0);
        }
        let gstem = &grads.tensors["stem"];
        assert!(gstem.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mixture_alpha_grad_is_zero_under_symmetry() {
        // Two identity ops produce identical outputs; the softmax jacobian
        // then cancels exactly.
        let vocab = OpVocab::new(vec![
            OpDesc {
                id: 0,
                name: "identity_a".into(),
                kind: OpKind::Identity,
                param_shape: vec![],
            },
            OpDesc {
                id: 1,
                name: "identity_b".into(),
                kind: OpKind::Identity,
                param_shape: vec![],
            },
        ])
        .unwrap();
        let s = Arc::new(SearchSpace::new(2, 16, vocab).unwrap());
        let region = Region::root(s);
        let alpha = vec![vec![0.0, 0.0]];
        let def = NetworkDef::mixture(&region, &alpha, dims()).unwrap();
        let w = store::init_store(&def.tensor_specs(), 7);
        let (x, y) = random_batch(9, 8, 8, 4);
        let (_, grads) = def.loss_and_grad(&w, &x, &y).unwrap();
        let ga = &grads.alpha.unwrap()[0];
        assert_eq!(ga, &vec![0.0, 0.0]);
    }

    #[test]
    fn mixture_rejects_misaligned_alpha() {
        let s = space3();
        let region = Region::root(s);
        let alpha = vec![vec![0.0; 5], vec![0.0; 4], vec![0.0; 5]];
        assert!(NetworkDef::mixture(&region, &alpha, dims()).is_err());
    }

    #[test]
    fn grad_check_two_node_net() {
        let s = SearchSpace::standard(2, 5, 16).unwrap();
        for op in 0..5 {
            let a = Architecture::new(Arc::clone(&s), vec![op]).unwrap();
            let def = NetworkDef::masked(&a, dims());
            let worst = grad_check(&def, 17 + op as u64).unwrap();
            assert!(
                worst <= 1e-4,
                "op {op}: worst relative error {worst:.3e}"
            );
        }
    }

    #[test]
    fn grad_check_identity_only_is_near_exact() {
        let s = space3();
        let a = Architecture::decode(&s, "1|1|1").unwrap();
        let def = NetworkDef::masked(&a, dims());
        let worst = grad_check(&def, 23).unwrap();
        assert!(worst <= 1e-6, "worst relative error {worst:.3e}");
    }

    #[test]
    fn grad_check_mixture_uniform_alpha() {
        let s = space3();
        let region = Region::root(s);
        let alpha: Vec<Vec<f32>> = region.allowed_all().iter().map(|a| vec![0.0; a.len()]).collect();
        let def = NetworkDef::mixture(&region, &alpha, dims()).unwrap();
        let worst = grad_check(&def, 29).unwrap();
        assert!(worst <= 1e-4, "worst relative error {worst:.3e}");
    }

    #[test]
    fn accuracy_breaks_ties_toward_lower_class() {
        let logits = Matrix::from_vec(1, 4, vec![0.5, 0.5, 0.1, 0.5]);
        assert_eq!(argmax(logits.row(0)), 0);
    }
}
