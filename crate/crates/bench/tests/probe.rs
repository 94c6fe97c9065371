//! Manual timing probes, run with `cargo test -p fsnas-bench -- --ignored --nocapture`.

use std::sync::Arc;
use std::time::Instant;

use fsnas_core::{
    train_oracle, Dataset, DatasetConfig, Region, SearchSpace, Supernet, TrainHyper, TrainMode,
};

#[test]
#[ignore]
fn probe_oracle_one_arch() {
    let space = SearchSpace::standard(3, 5, 16).unwrap();
    let ds = Dataset::generate(DatasetConfig::default()).unwrap();
    let region = Region::root(Arc::clone(&space));
    let sub: Vec<_> = region.enumerate(125).unwrap().take(4).collect();
    let hyper = TrainHyper::oracle(0);
    let t0 = Instant::now();
    for arch in &sub {
        let mut net = Supernet::init(arch.as_region(), ds.dims(), 1, TrainMode::SinglePath);
        net.train(&ds, &hyper, TrainMode::SinglePath).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "4 oracle archs at 150 epochs: {dt:.2}s total, {:.2}s each, 125 archs ~ {:.0}s",
        dt / 4.0,
        dt / 4.0 * 125.0
    );
}

#[test]
#[ignore]
fn probe_root_supernet() {
    let space = SearchSpace::standard(3, 5, 16).unwrap();
    let ds = Dataset::generate(DatasetConfig::default()).unwrap();
    let hyper = TrainHyper::supernet_root(0);
    let t0 = Instant::now();
    let mut net = Supernet::init(
        Region::root(Arc::clone(&space)),
        ds.dims(),
        1,
        TrainMode::SinglePath,
    );
    net.train(&ds, &hyper, TrainMode::SinglePath).unwrap();
    println!(
        "root 300 epochs single-path: {:.2}s",
        t0.elapsed().as_secs_f64()
    );

    let t0 = Instant::now();
    let mut net = Supernet::init(
        Region::root(Arc::clone(&space)),
        ds.dims(),
        1,
        TrainMode::Mixture,
    );
    net.train(&ds, &hyper, TrainMode::Mixture).unwrap();
    println!(
        "root 300 epochs mixture: {:.2}s",
        t0.elapsed().as_secs_f64()
    );

    let t0 = Instant::now();
    let oracle_hyper = TrainHyper::oracle(0);
    let arch = Region::root(Arc::clone(&space))
        .enumerate(125)
        .unwrap()
        .nth(88)
        .unwrap();
    let table_region = arch.as_region();
    let _ = train_oracle(&table_region, &ds, &oracle_hyper, 10, None).unwrap();
    println!("one train_oracle arch: {:.2}s", t0.elapsed().as_secs_f64());
}

/// Dry run of the benchmark study: oracle, per-seed trees, per-level tau,
/// and search efficiency. Prints everything the study asserts.
#[test]
#[ignore]
fn probe_benchmark_trends() {
    use fsnas_core::search::{rea_search, reinforce_search, Evaluator, SearchConfig};
    use fsnas_core::{correlation_report, BudgetConfig, SupernetTree};

    let space = SearchSpace::standard(3, 5, 16).unwrap();
    let ds = Dataset::generate(DatasetConfig::default()).unwrap();
    let region = Region::root(Arc::clone(&space));

    let t0 = Instant::now();
    let oracle = train_oracle(&region, &ds, &TrainHyper::oracle(0), 125, None).unwrap();
    println!("oracle 125 archs: {:.1}s", t0.elapsed().as_secs_f64());
    let best = oracle
        .records()
        .iter()
        .max_by(|a, b| a.valid_acc.total_cmp(&b.valid_acc))
        .unwrap();
    println!("oracle best: {} valid={}", best.encoding, best.valid_acc);
    let accs: Vec<f64> = oracle.records().iter().map(|r| r.valid_acc).collect();
    let distinct: std::collections::BTreeSet<u64> = accs.iter().map(|a| a.to_bits()).collect();
    println!("distinct valid accs: {} of 125", distinct.len());

    let t0 = Instant::now();
    let mut trees = Vec::new();
    for seed in 0..5u64 {
        let budget = BudgetConfig {
            total_epoch_budget: 1800,
            root_epochs: 300,
            child_epochs: 50,
            split_edges: None,
            wall_clock_secs: None,
            seed,
        };
        trees.push(
            fsnas_core::run_pipeline(&space, &ds, &budget, TrainMode::SinglePath).unwrap(),
        );
    }
    println!("5 trees at 1800 epochs: {:.1}s", t0.elapsed().as_secs_f64());

    let median = |mut v: Vec<f64>| -> f64 {
        v.sort_by(f64::total_cmp);
        if v.len() % 2 == 1 {
            v[v.len() / 2]
        } else {
            0.5 * (v[v.len() / 2 - 1] + v[v.len() / 2])
        }
    };

    let t0 = Instant::now();
    let mut med = Vec::new();
    for level in 0..3 {
        let taus: Vec<f64> = trees
            .iter()
            .map(|t| correlation_report(t, &ds, &oracle, level).unwrap().tau)
            .collect();
        println!("level {level} taus: {taus:?}");
        med.push(median(taus));
    }
    println!(
        "median taus by level: {med:?} (reports {:.1}s)",
        t0.elapsed().as_secs_f64()
    );

    // Search efficiency: level-1 prefix tree vs root-only one-shot.
    let tree0 = &trees[0];
    let prefix = SupernetTree::from_parts(
        tree0.levels()[..2].to_vec(),
        tree0.split_history()[..1].to_vec(),
        tree0.cost_epochs(1).unwrap(),
        tree0.seed(),
    )
    .unwrap();
    let root = &tree0.levels()[0][0];

    let t0 = Instant::now();
    for algo in ["rea", "reinforce"] {
        let mut one_best = Vec::new();
        let mut few_best = Vec::new();
        for seed in 0..20u64 {
            let config = SearchConfig {
                sample_budget: 50,
                seed,
                ..SearchConfig::default()
            };
            for (kind, evaluator) in [
                ("one", Evaluator::one_shot(root, &ds)),
                ("few", Evaluator::few_shot(&prefix, &ds)),
            ] {
                let trace = match algo {
                    "rea" => rea_search(&region, &evaluator, &config).unwrap(),
                    _ => reinforce_search(&region, &evaluator, &config).unwrap(),
                };
                let best = trace
                    .steps
                    .iter()
                    .filter_map(|s| oracle.get(&s.encoding))
                    .map(|r| r.valid_acc)
                    .fold(f64::NEG_INFINITY, f64::max);
                match kind {
                    "one" => one_best.push(best),
                    _ => few_best.push(best),
                }
            }
        }
        println!(
            "{algo}: one-shot median {:.4}, few-shot median {:.4}",
            median(one_best.clone()),
            median(few_best.clone())
        );
    }
    println!("search sweeps: {:.1}s", t0.elapsed().as_secs_f64());

    // REA with the oracle itself: how often does 60 evals find an optimum?
    let top = best.valid_acc;
    let optima: Vec<&str> = oracle
        .records()
        .iter()
        .filter(|r| r.valid_acc == top)
        .map(|r| r.encoding.as_str())
        .collect();
    let mut hits = 0;
    for seed in 0..20u64 {
        let config = SearchConfig {
            sample_budget: 60,
            seed,
            ..SearchConfig::default()
        };
        let evaluator = Evaluator::oracle(&oracle);
        let trace = rea_search(&region, &evaluator, &config).unwrap();
        if trace.steps.iter().any(|s| optima.contains(&s.encoding.as_str())) {
            hits += 1;
        }
    }
    println!("rea-on-oracle optimum hits: {hits}/20 (optima {optima:?})");
}
