//! Ground truth and measurement: an exhaustive train-from-scratch oracle
//! over a region, tie-aware Kendall rank correlation between proxy and true
//! scores, per-level correlation reports for a supernet tree, and
//! best-so-far series for search traces.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SplitId};
use crate::error::{Error, Result};
use crate::optim::TrainHyper;
use crate::rng;
use crate::search::SearchTrace;
use crate::space::{Architecture, Region};
use crate::supernet::{Supernet, TrainMode};
use crate::tree::SupernetTree;

/// Default ceiling on how many architectures one oracle run may train.
pub const DEFAULT_ORACLE_CAP: u128 = 1296;

/// One fully trained architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRecord {
    pub encoding: String,
    pub valid_acc: f64,
    pub test_acc: f64,
    pub reachable: bool,
    pub train_epochs: usize,
}

/// Exhaustive ground truth for a region, keyed by architecture encoding.
/// Records sit in region enumeration order.
#[derive(Debug, Clone)]
pub struct OracleTable {
    records: Vec<OracleRecord>,
    index: BTreeMap<String, usize>,
    dataset_seed: u64,
    hyper: TrainHyper,
}

impl OracleTable {
    pub fn new(dataset_seed: u64, hyper: TrainHyper) -> Self {
        Self {
            records: Vec::new(),
            index: BTreeMap::new(),
            dataset_seed,
            hyper,
        }
    }

    /// Rebuild a table from stored records (CSV loading); duplicates and
    /// out-of-range accuracies are rejected.
    pub fn from_records(
        dataset_seed: u64,
        hyper: TrainHyper,
        records: Vec<OracleRecord>,
    ) -> Result<Self> {
        let mut table = Self::new(dataset_seed, hyper);
        for record in records {
            table.insert(record)?;
        }
        Ok(table)
    }

    pub fn insert(&mut self, record: OracleRecord) -> Result<()> {
        for (name, acc) in [("valid", record.valid_acc), ("test", record.test_acc)] {
            if !(0.0..=1.0).contains(&acc) {
                return Err(Error::InvalidConfig(format!(
                    "{name} accuracy {acc} for {} is outside [0, 1]",
                    record.encoding
                )));
            }
        }
        if self.index.contains_key(&record.encoding) {
            return Err(Error::InvalidConfig(format!(
                "duplicate oracle record for {}",
                record.encoding
            )));
        }
        self.index.insert(record.encoding.clone(), self.records.len());
        self.records.push(record);
        Ok(())
    }

    pub fn get(&self, encoding: &str) -> Option<&OracleRecord> {
        self.index.get(encoding).map(|&i| &self.records[i])
    }

    pub fn records(&self) -> &[OracleRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dataset_seed(&self) -> u64 {
        self.dataset_seed
    }

    pub fn hyper(&self) -> &TrainHyper {
        &self.hyper
    }
}

/// Train every architecture of `region` from scratch and record final
/// accuracies. Per-architecture seeds come from the "oracle/<encoding>"
/// stream of `hyper.seed`, so any subset can be reproduced independently.
/// Records already present in `resume` are carried over untouched.
pub fn train_oracle(
    region: &Region,
    ds: &Dataset,
    hyper: &TrainHyper,
    cap: u128,
    resume: Option<&OracleTable>,
) -> Result<OracleTable> {
    let size = region.size();
    if size > cap {
        return Err(Error::OracleCapExceeded { size, cap });
    }
    if let Some(prev) = resume {
        if prev.dataset_seed != ds.config.seed || prev.hyper != *hyper {
            return Err(Error::InvalidConfig(
                "resume table was built with a different dataset seed or schedule".into(),
            ));
        }
    }
    let mut table = OracleTable::new(ds.config.seed, *hyper);
    for arch in region.enumerate(size)? {
        let encoding = arch.encode();
        if let Some(record) = resume.and_then(|prev| prev.get(&encoding)) {
            table.insert(record.clone())?;
            continue;
        }
        table.insert(train_arch(&arch, ds, hyper)?)?;
    }
    Ok(table)
}

/// Oracle-style training of one architecture (also the retraining step of
/// top-K selection, so a retrained arch reproduces its oracle record).
/// Safe to call from several threads at once: each call derives its own
/// seed from the encoding and shares nothing mutable.
pub fn train_arch(arch: &Architecture, ds: &Dataset, hyper: &TrainHyper) -> Result<OracleRecord> {
    let encoding = arch.encode();
    let master = rng::stream_seed(hyper.seed, &format!("oracle/{encoding}"));
    let mut net = Supernet::init(arch.as_region(), ds.dims(), master, TrainMode::SinglePath);
    net.train(ds, hyper, TrainMode::SinglePath)?;
    Ok(OracleRecord {
        valid_acc: net.mask_eval(arch, ds, SplitId::Valid)?,
        test_acc: net.mask_eval(arch, ds, SplitId::Test)?,
        reachable: arch.reachable(),
        train_epochs: hyper.epochs,
        encoding,
    })
}

/// Pair counts behind a tau-b value. Tie counts exclude pairs tied on both
/// sides, matching the tau-b denominator terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauCounts {
    pub concordant: u64,
    pub discordant: u64,
    pub ties_x: u64,
    pub ties_y: u64,
    pub tau: f64,
}

/// Kendall's tau-b of two score vectors.
pub fn kendall_tau(xs: &[f64], ys: &[f64]) -> Result<f64> {
    kendall_tau_counts(xs, ys).map(|c| c.tau)
}

/// Tau-b with full pair accounting, O(n log n): sort by x (y within x
/// ties), count discordant pairs as y-inversions with a merge sort, and
/// read tie groups off sorted runs.
pub fn kendall_tau_counts(xs: &[f64], ys: &[f64]) -> Result<TauCounts> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch {
            x: xs.len(),
            y: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(Error::InsufficientData {
            len: xs.len(),
            min: 2,
        });
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig("scores must be finite".into()));
    }

    let n = xs.len();
    let n0 = pairs(n as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        xs[a]
            .total_cmp(&xs[b])
            .then_with(|| ys[a].total_cmp(&ys[b]))
    });

    // Tie mass: n1 = pairs tied in x, n2 = pairs tied in y, n3 = both.
    let mut n1 = 0u64;
    let mut n3 = 0u64;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && xs[order[j]] == xs[order[i]] {
            j += 1;
        }
        n1 += pairs((j - i) as u64);
        let mut k = i;
        while k < j {
            let mut l = k;
            while l < j && ys[order[l]] == ys[order[k]] {
                l += 1;
            }
            n3 += pairs((l - k) as u64);
            k = l;
        }
        i = j;
    }

    let mut y_sorted: Vec<f64> = order.iter().map(|&i| ys[i]).collect();
    let mut buf = vec![0.0f64; n];
    let discordant = count_inversions(&mut y_sorted, &mut buf);
    // y_sorted is now fully sorted; read n2 off its runs.
    let mut n2 = 0u64;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && y_sorted[j] == y_sorted[i] {
            j += 1;
        }
        n2 += pairs((j - i) as u64);
        i = j;
    }

    if n0 == n1 || n0 == n2 {
        return Err(Error::UndefinedTau);
    }
    let concordant_signed =
        n0 as i128 - n1 as i128 - n2 as i128 + n3 as i128 - discordant as i128;
    debug_assert!(concordant_signed >= 0);
    let concordant = concordant_signed as u64;

    let denom = (((n0 - n1) as f64) * ((n0 - n2) as f64)).sqrt();
    let tau = (concordant as f64 - discordant as f64) / denom;
    Ok(TauCounts {
        concordant,
        discordant,
        ties_x: n1 - n3,
        ties_y: n2 - n3,
        tau,
    })
}

fn pairs(k: u64) -> u64 {
    k * k.saturating_sub(1) / 2
}

/// Merge sort that counts strict inversions (i < j with a[i] > a[j]).
fn count_inversions(a: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = a.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut inv = {
        let (left, right) = a.split_at_mut(mid);
        let (lbuf, rbuf) = buf.split_at_mut(mid);
        count_inversions(left, lbuf) + count_inversions(right, rbuf)
    };
    let (mut i, mut j) = (0, mid);
    for slot in buf[..n].iter_mut() {
        if i < mid && (j >= n || a[i] <= a[j]) {
            *slot = a[i];
            i += 1;
        } else {
            // a[j] jumps over every remaining left element.
            inv += (mid - i) as u64;
            *slot = a[j];
            j += 1;
        }
    }
    a.copy_from_slice(&buf[..n]);
    inv
}

/// Rank-correlation summary of one tree level against the oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub level: usize,
    pub supernet_count: usize,
    pub split_edges: Vec<usize>,
    pub seed: u64,
    pub tau: f64,
    pub concordant: u64,
    pub discordant: u64,
    pub ties_x: u64,
    pub ties_y: u64,
    pub cost_epochs: usize,
}

/// Route every oracle architecture to its level-`level` supernet, score it
/// by masked validation accuracy, and correlate against true validation
/// accuracy. Cost counts every epoch spent producing that level.
pub fn correlation_report(
    tree: &SupernetTree,
    ds: &Dataset,
    oracle: &OracleTable,
    level: usize,
) -> Result<CorrelationReport> {
    let supernets = tree.level(level)?;
    let root_region = tree.root().region();
    if oracle.len() as u128 != root_region.size() {
        return Err(Error::InvalidConfig(format!(
            "oracle covers {} of {} architectures in the tree's root region",
            oracle.len(),
            root_region.size()
        )));
    }
    let space = root_region.space();
    let mut proxy = Vec::with_capacity(oracle.len());
    let mut truth = Vec::with_capacity(oracle.len());
    for record in oracle.records() {
        let arch = Architecture::decode(space, &record.encoding)?;
        let supernet = tree.route_at(&arch, level)?;
        proxy.push(supernet.mask_eval(&arch, ds, SplitId::Valid)?);
        truth.push(record.valid_acc);
    }
    let counts = kendall_tau_counts(&proxy, &truth)?;
    Ok(CorrelationReport {
        level,
        supernet_count: supernets.len(),
        split_edges: tree.split_history()[..level].to_vec(),
        seed: tree.seed(),
        tau: counts.tau,
        concordant: counts.concordant,
        discordant: counts.discordant,
        ties_x: counts.ties_x,
        ties_y: counts.ties_y,
        cost_epochs: tree.cost_epochs(level)?,
    })
}

/// series[i] = best true validation accuracy among the first i+1 sampled
/// architectures; non-decreasing by construction.
pub fn best_so_far_trace(trace: &SearchTrace, oracle: &OracleTable) -> Result<Vec<f64>> {
    let mut best = f64::NEG_INFINITY;
    let mut series = Vec::with_capacity(trace.steps.len());
    for step in &trace.steps {
        let record = oracle.get(&step.encoding).ok_or_else(|| Error::MissingTruth {
            encoding: step.encoding.clone(),
        })?;
        best = best.max(record.valid_acc);
        series.push(best);
    }
    Ok(series)
}
