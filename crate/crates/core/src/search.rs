//! Search drivers over an architecture region through a pluggable, memoized
//! evaluator: random sampling, regularized (aging) evolution, REINFORCE
//! with an EMA baseline, gradient-based selection from mixture supernets,
//! and final top-K retraining.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::collections::VecDeque;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SplitId};
use crate::error::{Error, Result};
use crate::eval::{self, OracleTable};
use crate::rng;
use crate::space::{Architecture, Region, SearchSpace};
use crate::supernet::Supernet;
use crate::tree::SupernetTree;
use crate::optim::TrainHyper;

/// Where proxy scores come from. Every variant scores an architecture by
/// validation accuracy: the oracle looks up ground truth, one_shot masks a
/// single supernet, few_shot routes to the responsible leaf of a tree.
enum Source<'a> {
    Oracle(&'a OracleTable),
    OneShot {
        supernet: &'a Supernet,
        ds: &'a Dataset,
    },
    FewShot {
        tree: &'a SupernetTree,
        ds: &'a Dataset,
    },
}

/// Memoizing proxy evaluator. Repeated queries for one architecture return
/// the first computed score, so a search sees a pure function.
pub struct Evaluator<'a> {
    source: Source<'a>,
    memo: RefCell<BTreeMap<String, f64>>,
}

impl<'a> Evaluator<'a> {
    pub fn oracle(table: &'a OracleTable) -> Self {
        Self::new(Source::Oracle(table))
    }

    pub fn one_shot(supernet: &'a Supernet, ds: &'a Dataset) -> Self {
        Self::new(Source::OneShot { supernet, ds })
    }

    pub fn few_shot(tree: &'a SupernetTree, ds: &'a Dataset) -> Self {
        Self::new(Source::FewShot { tree, ds })
    }

    fn new(source: Source<'a>) -> Self {
        Self {
            source,
            memo: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.source {
            Source::Oracle(_) => "oracle",
            Source::OneShot { .. } => "one_shot",
            Source::FewShot { .. } => "few_shot",
        }
    }

    /// Proxy score f(S_A) for one architecture, memoized.
    pub fn proxy(&self, arch: &Architecture) -> Result<f64> {
        let encoding = arch.encode();
        if let Some(&score) = self.memo.borrow().get(&encoding) {
            return Ok(score);
        }
        let score = match &self.source {
            Source::Oracle(table) => {
                table
                    .get(&encoding)
                    .ok_or(Error::MissingTruth {
                        encoding: encoding.clone(),
                    })?
                    .valid_acc
            }
            Source::OneShot { supernet, ds } => supernet.mask_eval(arch, ds, SplitId::Valid)?,
            Source::FewShot { tree, ds } => {
                tree.route(arch)?.mask_eval(arch, ds, SplitId::Valid)?
            }
        };
        self.memo.borrow_mut().insert(encoding, score);
        Ok(score)
    }
}

/// Knobs shared by all search drivers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub sample_budget: usize,
    /// How many proxy-best candidates the final retraining considers.
    pub k: usize,
    /// Evolution population size (P).
    pub population: usize,
    /// Evolution tournament size (S).
    pub tournament: usize,
    pub reinforce_lr: f64,
    pub baseline_decay: f64,
    /// Random search only: draw a permutation prefix instead of sampling
    /// with replacement (budget must then fit the region).
    pub random_without_replacement: bool,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            sample_budget: 50,
            k: 5,
            population: 20,
            tournament: 5,
            reinforce_lr: 0.05,
            baseline_decay: 0.9,
            random_without_replacement: false,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tournament < 1
            || self.tournament > self.population
            || self.population > self.sample_budget
        {
            return Err(Error::InvalidSearchConfig(format!(
                "need 1 <= tournament ({}) <= population ({}) <= sample_budget ({})",
                self.tournament, self.population, self.sample_budget
            )));
        }
        if self.k < 1 {
            return Err(Error::InvalidSearchConfig("k must be at least 1".into()));
        }
        if !(self.reinforce_lr > 0.0 && self.reinforce_lr.is_finite()) {
            return Err(Error::InvalidSearchConfig(format!(
                "reinforce_lr must be positive, got {}",
                self.reinforce_lr
            )));
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return Err(Error::InvalidSearchConfig(format!(
                "baseline_decay must lie in [0, 1), got {}",
                self.baseline_decay
            )));
        }
        Ok(())
    }
}

/// One evaluated architecture in a search run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    /// 1-based, contiguous.
    pub index: usize,
    pub encoding: String,
    pub proxy_score: f64,
}

/// Full record of a search run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub algorithm: String,
    pub seed: u64,
    pub config: SearchConfig,
    pub steps: Vec<TraceStep>,
}

impl SearchTrace {
    fn new(algorithm: &str, config: &SearchConfig) -> Self {
        Self {
            algorithm: algorithm.into(),
            seed: config.seed,
            config: config.clone(),
            steps: Vec::with_capacity(config.sample_budget),
        }
    }

    fn push(&mut self, encoding: String, proxy_score: f64) {
        self.steps.push(TraceStep {
            index: self.steps.len() + 1,
            encoding,
            proxy_score,
        });
    }
}

/// Uniform sampling, with replacement by default; the without-replacement
/// option draws a shuffled prefix of the whole region instead.
pub fn random_search(
    region: &Region,
    evaluator: &Evaluator,
    config: &SearchConfig,
) -> Result<SearchTrace> {
    config.validate()?;
    let mut r = rng::stream(config.seed, "search/random");
    let mut trace = SearchTrace::new("random", config);
    if config.random_without_replacement {
        let size = region.size();
        if (config.sample_budget as u128) > size {
            return Err(Error::InvalidSearchConfig(format!(
                "budget {} exceeds the region's {} architectures and replacement is off",
                config.sample_budget, size
            )));
        }
        let mut all: Vec<Architecture> = region.enumerate(size)?.collect();
        for i in (1..all.len()).rev() {
            let j = r.random_range(0..=i);
            all.swap(i, j);
        }
        for arch in all.into_iter().take(config.sample_budget) {
            let score = evaluator.proxy(&arch)?;
            trace.push(arch.encode(), score);
        }
    } else {
        for _ in 0..config.sample_budget {
            let arch = region.sample(&mut r);
            let score = evaluator.proxy(&arch)?;
            trace.push(arch.encode(), score);
        }
    }
    Ok(trace)
}

/// Regularized (aging) evolution: tournament selection over a sliding
/// population, single-edge mutation, oldest member evicted each cycle.
pub fn rea_search(
    region: &Region,
    evaluator: &Evaluator,
    config: &SearchConfig,
) -> Result<SearchTrace> {
    config.validate()?;
    let compound = region.compound_edges();
    if compound.is_empty() {
        return Err(Error::InvalidSearchConfig(
            "evolution needs at least one edge with two or more ops".into(),
        ));
    }
    let mut r = rng::stream(config.seed, "search/rea");
    let mut trace = SearchTrace::new("rea", config);
    let mut population: VecDeque<(Architecture, f64)> =
        VecDeque::with_capacity(config.population);

    for _ in 0..config.population {
        let arch = region.sample(&mut r);
        let score = evaluator.proxy(&arch)?;
        trace.push(arch.encode(), score);
        population.push_back((arch, score));
    }

    while trace.steps.len() < config.sample_budget {
        // Tournament: S distinct population slots, winner = highest score,
        // ties to the oldest member.
        let mut slots: Vec<usize> = (0..population.len()).collect();
        for t in 0..config.tournament {
            let j = t + r.random_range(0..slots.len() - t);
            slots.swap(t, j);
        }
        let mut entrants = slots[..config.tournament].to_vec();
        entrants.sort_unstable();
        let mut winner = entrants[0];
        for &slot in &entrants[1..] {
            if population[slot].1 > population[winner].1 {
                winner = slot;
            }
        }

        // Mutate exactly one compound edge to a different op.
        let parent = population[winner].0.clone();
        let edge = compound[r.random_range(0..compound.len())];
        let ops = region.allowed(edge);
        let current = ops
            .iter()
            .position(|&op| op == parent.op_at(edge))
            .expect("population members stay inside the region");
        let mut pick = r.random_range(0..ops.len() - 1);
        if pick >= current {
            pick += 1;
        }
        let mut choice = parent.choice().to_vec();
        choice[edge] = ops[pick];
        let child = Architecture::new(Arc::clone(region.space()), choice)?;

        let score = evaluator.proxy(&child)?;
        trace.push(child.encode(), score);
        population.push_back((child, score));
        population.pop_front();
    }
    Ok(trace)
}

/// REINFORCE over an independent per-edge categorical policy with an EMA
/// baseline. Returns the trace; the final policy state is internal.
pub fn reinforce_search(
    region: &Region,
    evaluator: &Evaluator,
    config: &SearchConfig,
) -> Result<SearchTrace> {
    reinforce_with_policy(region, evaluator, config).map(|(trace, _)| trace)
}

/// Worker sharing the policy state with tests.
fn reinforce_with_policy(
    region: &Region,
    evaluator: &Evaluator,
    config: &SearchConfig,
) -> Result<(SearchTrace, Vec<Vec<f64>>)> {
    config.validate()?;
    let mut r = rng::stream(config.seed, "search/reinforce");
    let mut trace = SearchTrace::new("reinforce", config);
    let edges = region.space().num_edges();
    let mut theta: Vec<Vec<f64>> = (0..edges)
        .map(|k| vec![0.0; region.allowed(k).len()])
        .collect();
    let mut baseline = 0.0f64;

    for _ in 0..config.sample_budget {
        let mut choice = Vec::with_capacity(edges);
        let mut picks = Vec::with_capacity(edges);
        for (k, theta_k) in theta.iter().enumerate() {
            let probs = softmax64(theta_k);
            let u: f64 = r.random();
            let mut cumulative = 0.0;
            let mut pick = probs.len() - 1;
            for (o, p) in probs.iter().enumerate() {
                cumulative += p;
                if u < cumulative {
                    pick = o;
                    break;
                }
            }
            picks.push(pick);
            choice.push(region.allowed(k)[pick]);
        }
        let arch = Architecture::new(Arc::clone(region.space()), choice)?;
        let reward = evaluator.proxy(&arch)?;
        trace.push(arch.encode(), reward);

        // Baseline moves first, then the policy gradient uses the fresh
        // advantage.
        baseline = config.baseline_decay * baseline + (1.0 - config.baseline_decay) * reward;
        let advantage = reward - baseline;
        for (k, theta_k) in theta.iter_mut().enumerate() {
            let probs = softmax64(theta_k);
            for (o, t) in theta_k.iter_mut().enumerate() {
                let indicator = if o == picks[k] { 1.0 } else { 0.0 };
                *t += config.reinforce_lr * advantage * (indicator - probs[o]);
            }
        }
    }
    Ok((trace, theta))
}

fn softmax64(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

/// Differentiable-NAS selection over a mixture-trained tree: take the leaf
/// with the lowest recorded validation loss (ties to the lowest index),
/// then the per-edge argmax of its mixture logits (softmax is monotone, so
/// argmax over alpha itself; ties to the lowest op id).
pub fn gradient_select(tree: &SupernetTree) -> Result<Architecture> {
    let leaves = tree.leaves();
    let mut best: Option<(usize, f64)> = None;
    for (index, leaf) in leaves.iter().enumerate() {
        let loss = match (leaf.val_loss(), leaf.alpha()) {
            (Some(loss), Some(_)) => loss,
            _ => return Err(Error::UntrainedSupernet { index }),
        };
        if best.is_none_or(|(_, held)| loss < held) {
            best = Some((index, loss));
        }
    }
    let (index, _) = best.expect("trees hold at least the root");
    let leaf = &leaves[index];
    let alpha = leaf.alpha().expect("checked above");
    let region = leaf.region();
    let mut choice = Vec::with_capacity(alpha.len());
    for (k, logits) in alpha.iter().enumerate() {
        let mut pick = 0;
        for (o, &v) in logits.iter().enumerate().skip(1) {
            if v > logits[pick] {
                pick = o;
            }
        }
        choice.push(region.allowed(k)[pick]);
    }
    Architecture::new(Arc::clone(region.space()), choice)
}

/// One retrained top-K candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainRecord {
    pub encoding: String,
    pub proxy_score: f64,
    pub valid_acc: f64,
    pub test_acc: f64,
}

/// Retrain the K proxy-best distinct architectures of a trace from scratch
/// (oracle schedule and seeds) and pick the winner by test accuracy; ties
/// go to the better proxy rank. Returns the winner and all K records in
/// rank order.
pub fn topk_retrain(
    space: &Arc<SearchSpace>,
    trace: &SearchTrace,
    k: usize,
    ds: &Dataset,
    hyper: &TrainHyper,
) -> Result<(Architecture, Vec<RetrainRecord>)> {
    if k < 1 {
        return Err(Error::InvalidSearchConfig("k must be at least 1".into()));
    }
    let mut first_seen: BTreeMap<&str, usize> = BTreeMap::new();
    let mut candidates: Vec<(&TraceStep, usize)> = Vec::new();
    for step in &trace.steps {
        if first_seen.insert(&step.encoding, step.index).is_none() {
            candidates.push((step, step.index));
        }
    }
    if candidates.len() < k {
        return Err(Error::InsufficientCandidates {
            have: candidates.len(),
            need: k,
        });
    }
    candidates.sort_by(|(a, ai), (b, bi)| {
        b.proxy_score
            .total_cmp(&a.proxy_score)
            .then_with(|| ai.cmp(bi))
    });
    candidates.truncate(k);

    let mut records = Vec::with_capacity(k);
    let mut winner = 0usize;
    for (rank, (step, _)) in candidates.iter().enumerate() {
        let arch = Architecture::decode(space, &step.encoding)?;
        let oracle = eval::train_arch(&arch, ds, hyper)?;
        records.push(RetrainRecord {
            encoding: step.encoding.clone(),
            proxy_score: step.proxy_score,
            valid_acc: oracle.valid_acc,
            test_acc: oracle.test_acc,
        });
        if records[rank].test_acc > records[winner].test_acc {
            winner = rank;
        }
    }
    let arch = Architecture::decode(space, &records[winner].encoding)?;
    Ok((arch, records))
}
