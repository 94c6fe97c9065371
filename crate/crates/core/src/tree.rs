//! Budgeted recursive supernet splitting: train a root supernet, then
//! repeatedly pick a compound edge, split every leaf region along it, seed
//! each child by transfer from its parent, and train the children. The
//! result keeps every level, from the single root down to the finest leaf
//! partition, so rank correlation can be reported at 1, m, m^2, ...
//! supernets out of one run.

use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::optim::TrainHyper;
use crate::rng;
use crate::space::{Architecture, Region, SearchSpace};
use crate::supernet::{Supernet, TrainMode};

/// Epoch-denominated budget for one pipeline run. The split loop stops
/// before any round whose full child training would push spent epochs past
/// `total_epoch_budget`; an optional wall-clock cap is checked at the same
/// decision points (and makes runs machine-dependent, so it defaults off).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BudgetConfig {
    pub total_epoch_budget: usize,
    pub wall_clock_secs: Option<f64>,
    pub root_epochs: usize,
    pub child_epochs: usize,
    /// Fixed split order. `None` draws uniformly among still-compound
    /// edges from the "split-edge" stream of `seed`.
    pub split_edges: Option<Vec<usize>>,
    pub seed: u64,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            total_epoch_budget: 600,
            wall_clock_secs: None,
            root_epochs: 300,
            child_epochs: 50,
            split_edges: None,
            seed: 0,
        }
    }
}

impl BudgetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_epoch_budget < self.root_epochs {
            return Err(Error::InvalidBudget(format!(
                "total budget {} is below root_epochs {}",
                self.total_epoch_budget, self.root_epochs
            )));
        }
        if self.root_epochs == 0 {
            return Err(Error::InvalidBudget("root_epochs must be positive".into()));
        }
        if self.child_epochs == 0 {
            return Err(Error::InvalidBudget("child_epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Trained supernet hierarchy. Level `l` holds the supernets after `l`
/// splits; level 0 is the root alone. `split_history[l]` is the edge that
/// refines level `l` into level `l + 1`.
#[derive(Debug)]
pub struct SupernetTree {
    levels: Vec<Vec<Supernet>>,
    split_history: Vec<usize>,
    spent_epochs: usize,
    seed: u64,
}

impl SupernetTree {
    /// Rebuild a tree from loaded parts, revalidating every structural
    /// invariant (used by checkpoint loading).
    pub fn from_parts(
        levels: Vec<Vec<Supernet>>,
        split_history: Vec<usize>,
        spent_epochs: usize,
        seed: u64,
    ) -> Result<Self> {
        if levels.is_empty() || levels[0].len() != 1 {
            return Err(Error::InvalidConfig(
                "tree needs a root level with exactly one supernet".into(),
            ));
        }
        if split_history.len() + 1 != levels.len() {
            return Err(Error::InvalidConfig(format!(
                "{} split edges cannot produce {} levels",
                split_history.len(),
                levels.len()
            )));
        }
        for (l, &edge) in split_history.iter().enumerate() {
            let parents = &levels[l];
            let children = &levels[l + 1];
            let mut expect = 0usize;
            for parent in parents {
                let regions = parent.region().split(edge)?;
                for region in regions {
                    let child = children.get(expect).ok_or_else(|| {
                        Error::InvalidConfig(format!("level {} is truncated", l + 1))
                    })?;
                    if *child.region() != region {
                        return Err(Error::InvalidConfig(format!(
                            "level {} supernet {} does not partition its parent",
                            l + 1,
                            expect
                        )));
                    }
                    expect += 1;
                }
            }
            if expect != children.len() {
                return Err(Error::InvalidConfig(format!(
                    "level {} holds {} supernets, expected {}",
                    l + 1,
                    children.len(),
                    expect
                )));
            }
        }
        let trained: usize = levels
            .iter()
            .flat_map(|level| level.iter().map(Supernet::trained_epochs))
            .sum();
        if trained != spent_epochs {
            return Err(Error::InvalidConfig(format!(
                "spent_epochs {} does not match trained totals {}",
                spent_epochs, trained
            )));
        }
        Ok(Self {
            levels,
            split_history,
            spent_epochs,
            seed,
        })
    }

    pub fn levels(&self) -> &[Vec<Supernet>] {
        &self.levels
    }

    /// The budget seed the tree was grown from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn level(&self, l: usize) -> Result<&[Supernet]> {
        self.levels
            .get(l)
            .map(Vec::as_slice)
            .ok_or(Error::InvalidLevel {
                level: l,
                depth: self.levels.len(),
            })
    }

    /// Number of levels (root counts as one).
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn split_history(&self) -> &[usize] {
        &self.split_history
    }

    pub fn spent_epochs(&self) -> usize {
        self.spent_epochs
    }

    pub fn root(&self) -> &Supernet {
        &self.levels[0][0]
    }

    pub fn leaves(&self) -> &[Supernet] {
        self.levels.last().expect("tree has at least the root")
    }

    /// Epochs spent producing levels 0..=l (training above that level is
    /// excluded). The full tree cost equals `spent_epochs`.
    pub fn cost_epochs(&self, l: usize) -> Result<usize> {
        if l >= self.levels.len() {
            return Err(Error::InvalidLevel {
                level: l,
                depth: self.levels.len(),
            });
        }
        Ok(self.levels[..=l]
            .iter()
            .flat_map(|level| level.iter().map(Supernet::trained_epochs))
            .sum())
    }

    /// The unique supernet at level `l` whose region contains `a`.
    pub fn route_at(&self, a: &Architecture, l: usize) -> Result<&Supernet> {
        let level = self.level(l)?;
        let root = self.levels[0][0].region();
        if !root.contains(a)? {
            return Err(Error::OutOfRegion {
                encoding: a.encode(),
            });
        }
        // Walk the split history: at each level the child index appends the
        // position of the architecture's op within the parent's allowed set.
        let mut index = 0usize;
        for (d, &edge) in self.split_history[..l].iter().enumerate() {
            let parent = &self.levels[d][index];
            let allowed = parent.region().allowed(edge);
            let pos = allowed
                .iter()
                .position(|&op| op == a.op_at(edge))
                .expect("containment was checked against the root");
            index = index * allowed.len() + pos;
        }
        Ok(&level[index])
    }

    /// The unique deepest-level (leaf) supernet whose region contains `a`.
    pub fn route(&self, a: &Architecture) -> Result<&Supernet> {
        self.route_at(a, self.levels.len() - 1)
    }
}

/// Train the root, then split and cascade until the budget refuses the
/// next round. Each supernet trains under its own master seed derived from
/// `budget.seed` and its tree position, so sibling trainings stay
/// independent and any (seed, budget, mode) pair rebuilds the same tree.
pub fn run_pipeline(
    space: &Arc<SearchSpace>,
    ds: &Dataset,
    budget: &BudgetConfig,
    mode: TrainMode,
) -> Result<SupernetTree> {
    budget.validate()?;
    if let Some(edges) = &budget.split_edges {
        let mut seen = vec![false; space.num_edges()];
        for &edge in edges {
            if edge >= space.num_edges() {
                return Err(Error::InvalidBudget(format!(
                    "split edge {} out of range for {} edges",
                    edge,
                    space.num_edges()
                )));
            }
            if seen[edge] {
                return Err(Error::AlreadySplit { edge });
            }
            seen[edge] = true;
        }
    }

    let started = Instant::now();
    let dims = ds.dims();
    let mut edge_rng = rng::stream(budget.seed, "split-edge");

    let root_seed = rng::stream_seed(budget.seed, "supernet/0/0");
    let mut root = Supernet::init(Region::root(Arc::clone(space)), dims, root_seed, mode);
    let mut hyper = TrainHyper::supernet_root(root_seed);
    hyper.epochs = budget.root_epochs;
    root.train(ds, &hyper, mode)?;

    let mut levels = vec![vec![root]];
    let mut split_history = Vec::new();
    let mut spent = budget.root_epochs;

    loop {
        let leaves = levels.last().expect("levels start with the root");
        let compound = leaves[0].region().compound_edges();
        let edge = match &budget.split_edges {
            Some(list) => match list.get(split_history.len()) {
                Some(&edge) => edge,
                None => break,
            },
            None => {
                if compound.is_empty() {
                    break;
                }
                // Cost is decided before the draw: every compound edge has
                // the same op count here, so the round's cost does not
                // depend on which edge wins.
                let fanout = leaves[0].region().allowed(compound[0]).len();
                let cost = leaves.len() * fanout * budget.child_epochs;
                if spent + cost > budget.total_epoch_budget {
                    break;
                }
                if over_wall_clock(&started, budget) {
                    break;
                }
                compound[edge_rng.random_range(0..compound.len())]
            }
        };
        let fanout = leaves[0].region().allowed(edge).len();
        if fanout < 2 {
            return Err(Error::AlreadySplit { edge });
        }
        let cost = leaves.len() * fanout * budget.child_epochs;
        if spent + cost > budget.total_epoch_budget {
            break;
        }
        if over_wall_clock(&started, budget) {
            break;
        }

        let level = levels.len();
        let mut children = Vec::with_capacity(leaves.len() * fanout);
        for parent in leaves {
            for region in parent.region().split(edge)? {
                let index = children.len();
                let seed = rng::stream_seed(budget.seed, &format!("supernet/{level}/{index}"));
                let mut child = Supernet::transfer_from(parent, region, seed)?;
                let mut hyper = TrainHyper::supernet_child(seed);
                hyper.epochs = budget.child_epochs;
                child.train(ds, &hyper, mode)?;
                spent += budget.child_epochs;
                children.push(child);
            }
        }
        levels.push(children);
        split_history.push(edge);
    }

    Ok(SupernetTree {
        levels,
        split_history,
        spent_epochs: spent,
        seed: budget.seed,
    })
}

fn over_wall_clock(started: &Instant, budget: &BudgetConfig) -> bool {
    budget
        .wall_clock_secs
        .is_some_and(|cap| started.elapsed().as_secs_f64() >= cap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetConfig;
    use crate::space::SearchSpace;

    fn tiny_dataset() -> Dataset {
        // train = one default batch, so every epoch is a single step.
        let config = DatasetConfig {
            sizes: [128, 32, 32],
            ..DatasetConfig::default()
        };
        Dataset::generate(config).unwrap()
    }

    fn tiny_budget(total: usize, root: usize, child: usize) -> BudgetConfig {
        BudgetConfig {
            total_epoch_budget: total,
            root_epochs: root,
            child_epochs: child,
            ..BudgetConfig::default()
        }
    }

    #[test]
    fn default_budget_shape_scales_down() {
        // Same proportions as the stock 300/50/600 setup: one split fits,
        // the second does not.
        let space = SearchSpace::standard(3, 5, 8).unwrap();
        let ds = tiny_dataset();
        let budget = tiny_budget(12, 6, 1);
        let tree = run_pipeline(&space, &ds, &budget, TrainMode::SinglePath).unwrap();
        assert_eq!(tree.depth(), 2);
        assert_eq!(tree.levels()[0].len(), 1);
        assert_eq!(tree.levels()[1].len(), 5);
        assert_eq!(tree.spent_epochs(), 6 + 5);
        assert_eq!(tree.split_history().len(), 1);
        assert_eq!(tree.cost_epochs(0).unwrap(), 6);
        assert_eq!(tree.cost_epochs(1).unwrap(), 11);
    }

    #[test]
    fn explicit_split_list_reaches_twenty_five_leaves() {
        let space = SearchSpace::standard(3, 5, 8).unwrap();
        let ds = tiny_dataset();
        let mut budget = tiny_budget(1000, 1, 1);
        budget.split_edges = Some(vec![0, 1]);
        let tree = run_pipeline(&space, &ds, &budget, TrainMode::SinglePath).unwrap();
        assert_eq!(tree.depth(), 3);
        assert_eq!(tree.levels()[1].len(), 5);
        assert_eq!(tree.levels()[2].len(), 25);
        assert_eq!(tree.split_history(), &[0, 1]);
        assert_eq!(tree.spent_epochs(), 1 + 5 + 25);
    }

    #[test]
    fn budget_equal_to_root_gives_one_shot() {
        let space = SearchSpace::standard(3, 5, 8).unwrap();
        let ds = tiny_dataset();
        let budget = tiny_budget(2, 2, 1);
        let tree = run_pipeline(&space, &ds, &budget, TrainMode::SinglePath).unwrap();
        assert_eq!(tree.depth(), 1);
        assert_eq!(tree.spent_epochs(), 2);
        let arch = Architecture::new(Arc::clone(&space), vec![0, 0, 0]).unwrap();
        let routed = tree.route(&arch).unwrap();
        assert!(!routed.region().is_singleton());
        assert_eq!(routed.region().size(), 125);
    }

    #[test]
    fn routing_partitions_the_space_evenly() {
        let space = SearchSpace::standard(3, 5, 8).unwrap();
        let ds = tiny_dataset();
        let mut budget = tiny_budget(100, 1, 1);
        budget.split_edges = Some(vec![1]);
        let tree = run_pipeline(&space, &ds, &budget, TrainMode::SinglePath).unwrap();
        let mut counts = vec![0usize; 5];
        let root = Region::root(Arc::clone(&space));
        for arch in root.enumerate(1000).unwrap() {
            let leaf = tree.route(&arch).unwrap();
            assert!(leaf.region().contains(&arch).unwrap());
            // Split was on edge 1, so the leaf index equals that edge's op.
            let idx = tree.levels()[1]
                .iter()
                .position(|s| std::ptr::eq(s, leaf))
                .unwrap();
            assert_eq!(idx, arch.op_at(1));
            counts[idx] += 1;
        }
        assert_eq!(counts, vec![25; 5]);
    }

    #[test]
    fn leaf_regions_are_disjoint_and_cover_the_root() {
        let space = SearchSpace::standard(3, 5, 8).unwrap();
        let ds = tiny_dataset();
        let mut budget = tiny_budget(100, 1, 1);
        budget.split_edges = Some(vec![2, 0]);
        let tree = run_pipeline(&space, &ds, &budget, TrainMode::SinglePath).unwrap();
        let total: u128 = tree.leaves().iter().map(|s| s.region().size()).sum();
        assert_eq!(total, 125);
        let root = Region::root(Arc::clone(&space));
        for arch in root.enumerate(1000).unwrap() {
            let holders = tree
                .leaves()
                .iter()
                .filter(|s| s.region().contains(&arch).unwrap())
                .count();
            assert_eq!(holders, 1);
        }
    }

    #[test]
    fn pipeline_is_deterministic() {
        let space = SearchSpace::standard(3, 5, 8).unwrap();
        let ds = tiny_dataset();
        let budget = tiny_budget(20, 2, 1);
        let a = run_pipeline(&space, &ds, &budget, TrainMode::SinglePath).unwrap();
        let b = run_pipeline(&space, &ds, &budget, TrainMode::SinglePath).unwrap();
        assert_eq!(a.split_history(), b.split_history());
        assert_eq!(a.spent_epochs(), b.spent_epochs());
        for (la, lb) in a.levels().iter().zip(b.levels()) {
            assert_eq!(la.len(), lb.len());
            for (sa, sb) in la.iter().zip(lb) {
                assert_eq!(sa.val_loss(), sb.val_loss());
                for (name, tensor) in sa.weights().iter() {
                    assert_eq!(tensor.data, sb.weights().expect(name, &tensor.shape).unwrap().data);
                }
            }
        }
    }

    #[test]
    fn different_seeds_pick_different_split_sequences() {
        // With 6 edges and several rounds, two seeds agreeing on the whole
        // history would be a (1/6)^k coincidence; pin one case.
        let space = SearchSpace::standard(4, 2, 8).unwrap();
        let ds = tiny_dataset();
        let mut histories = Vec::new();
        for seed in 0..4u64 {
            let mut budget = tiny_budget(200, 1, 1);
            budget.seed = seed;
            let tree = run_pipeline(&space, &ds, &budget, TrainMode::SinglePath).unwrap();
            histories.push(tree.split_history().to_vec());
        }
        assert!(histories.iter().any(|h| h != &histories[0]));
    }

    #[test]
    fn rejects_bad_budgets_and_bad_split_lists() {
        let space = SearchSpace::standard(3, 5, 8).unwrap();
        let ds = tiny_dataset();
        let budget = tiny_budget(1, 2, 1);
        match run_pipeline(&space, &ds, &budget, TrainMode::SinglePath) {
            Err(Error::InvalidBudget(_)) => {}
            other => panic!("expected InvalidBudget, got {other:?}"),
        }

        let mut budget = tiny_budget(100, 1, 1);
        budget.split_edges = Some(vec![0, 0]);
        match run_pipeline(&space, &ds, &budget, TrainMode::SinglePath) {
            Err(Error::AlreadySplit { edge: 0 }) => {}
            other => panic!("expected AlreadySplit, got {other:?}"),
        }

        let mut budget = tiny_budget(100, 1, 1);
        budget.split_edges = Some(vec![7]);
        match run_pipeline(&space, &ds, &budget, TrainMode::SinglePath) {
            Err(Error::InvalidBudget(_)) => {}
            other => panic!("expected InvalidBudget, got {other:?}"),
        }
    }

    #[test]
    fn random_draw_splits_every_edge_eventually() {
        // Unlimited budget with random edge choice must exhaust all three
        // edges exactly once (draws never repeat a fixed edge).
        let space = SearchSpace::standard(3, 2, 8).unwrap();
        let ds = tiny_dataset();
        let budget = tiny_budget(10_000, 1, 1);
        let tree = run_pipeline(&space, &ds, &budget, TrainMode::SinglePath).unwrap();
        assert_eq!(tree.depth(), 4);
        let mut history = tree.split_history().to_vec();
        history.sort_unstable();
        assert_eq!(history, vec![0, 1, 2]);
        assert_eq!(tree.leaves().len(), 8);
        assert!(tree.leaves().iter().all(|s| s.region().is_singleton()));
    }

    #[test]
    fn from_parts_validates_structure() {
        let space = SearchSpace::standard(3, 2, 8).unwrap();
        let ds = tiny_dataset();
        let mut budget = tiny_budget(100, 1, 1);
        budget.split_edges = Some(vec![1]);
        let tree = run_pipeline(&space, &ds, &budget, TrainMode::SinglePath).unwrap();
        let spent = tree.spent_epochs();
        let SupernetTree {
            levels,
            split_history,
            ..
        } = tree;

        // Intact parts round-trip.
        let rebuilt = SupernetTree::from_parts(levels, split_history.clone(), spent, 0).unwrap();
        assert_eq!(rebuilt.split_history(), &split_history[..]);

        // A truncated level is rejected.
        let SupernetTree { mut levels, .. } = rebuilt;
        levels[1].pop();
        match SupernetTree::from_parts(levels, split_history, spent, 0) {
            Err(Error::InvalidConfig(_)) => {}
            other => panic!("expected InvalidConfig, got {other:?}"),
        }
    }

    #[test]
    fn transfer_children_start_from_parent_weights() {
        let space = SearchSpace::standard(3, 5, 8).unwrap();
        let ds = tiny_dataset();
        let mut budget = tiny_budget(100, 3, 1);
        budget.split_edges = Some(vec![0]);
        let tree = run_pipeline(&space, &ds, &budget, TrainMode::SinglePath).unwrap();
        // Children trained one epoch from transferred weights; their stems
        // should sit near the root's trained stem, not near a fresh init.
        let root_stem = tree.root().weights().expect("stem", &[8, 9]).unwrap();
        for child in &tree.levels()[1] {
            let stem = child.weights().expect("stem", &[8, 9]).unwrap();
            let drift: f32 = root_stem
                .data
                .iter()
                .zip(&stem.data)
                .map(|(a, b)| (a - b).abs())
                .sum();
            assert!(drift < 1.0, "child stem drifted {drift} from the parent");
        }
    }
}
