//! Subcommand implementations. Each command reads what it needs from the
//! output directory and leaves one primary artifact behind, so a full
//! experiment is a sequence of invocations over the same --out.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use fsnas_core::search::{
    gradient_select, random_search, rea_search, reinforce_search, topk_retrain, Evaluator,
    SearchTrace, TraceStep,
};
use fsnas_core::space::Region;
use fsnas_core::{
    correlation_report, train_arch, train_oracle, Architecture, Dataset, OracleRecord,
    OracleTable, SupernetTree,
};

use crate::checkpoint;
use crate::config::ExperimentConfig;

pub const ORACLE_CSV: &str = "oracle.csv";
pub const CORRELATION_CSV: &str = "correlation.csv";
pub const TRACE_CSV: &str = "trace.csv";

/// Everything a command needs beyond its own flags.
pub struct Ctx {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub jobs: usize,
}

impl Ctx {
    fn dataset(&self) -> Result<Dataset> {
        Ok(Dataset::generate(self.config.build_dataset_config())?)
    }

    fn tree_dir(&self, seed: u64) -> PathBuf {
        self.out.join(format!("tree-s{seed}"))
    }
}

pub fn gen_space(ctx: &Ctx) -> Result<()> {
    let space = ctx.config.build_space()?;
    let size = Region::root(Arc::clone(&space)).size();
    println!("edges={} architectures={}", space.num_edges(), size);
    Ok(())
}

pub fn train_oracle_cmd(ctx: &Ctx) -> Result<()> {
    let space = ctx.config.build_space()?;
    let ds = ctx.dataset()?;
    let hyper = ctx.config.build_oracle_hyper(ctx.seed);
    let cap = ctx.config.training.oracle.cap;
    let region = Region::root(space);

    let path = ctx.out.join(ORACLE_CSV);
    let resume = if path.exists() {
        Some(read_oracle_csv(&path, ds.config.seed, hyper)?)
    } else {
        None
    };
    let done_before = resume.as_ref().map_or(0, OracleTable::len);

    let table = if ctx.jobs > 1 {
        train_oracle_parallel(&region, &ds, &hyper, cap, resume.as_ref(), ctx.jobs)?
    } else {
        train_oracle(&region, &ds, &hyper, cap, resume.as_ref())?
    };

    std::fs::create_dir_all(&ctx.out)?;
    write_oracle_csv(&path, &table)?;
    println!(
        "oracle architectures={} new={} file={}",
        table.len(),
        table.len() - done_before,
        path.display()
    );
    Ok(())
}

/// Same contract as the sequential trainer: architectures in enumeration
/// order, each trained under its own encoding-derived seed. Work is dealt
/// round-robin to `jobs` threads and merged back in order, so the table
/// is identical whatever the thread count.
fn train_oracle_parallel(
    region: &Region,
    ds: &Dataset,
    hyper: &fsnas_core::TrainHyper,
    cap: u128,
    resume: Option<&OracleTable>,
    jobs: usize,
) -> Result<OracleTable> {
    let size = region.size();
    if size > cap {
        bail!("space holds {size} architectures, cap is {cap}");
    }
    let mut done: Vec<Option<OracleRecord>> = Vec::new();
    let mut pending: Vec<(usize, Architecture)> = Vec::new();
    for (i, arch) in region.enumerate(size)?.enumerate() {
        match resume.and_then(|t| t.get(&arch.encode())) {
            Some(record) => done.push(Some(record.clone())),
            None => {
                done.push(None);
                pending.push((i, arch));
            }
        }
    }

    let results: Vec<(usize, fsnas_core::Result<OracleRecord>)> = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for w in 0..jobs {
            let chunk: Vec<(usize, Architecture)> = pending
                .iter()
                .skip(w)
                .step_by(jobs)
                .map(|(i, a)| (*i, a.clone()))
                .collect();
            handles.push(scope.spawn(move || {
                chunk
                    .into_iter()
                    .map(|(i, arch)| (i, train_arch(&arch, ds, hyper)))
                    .collect::<Vec<_>>()
            }));
        }
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("oracle worker panicked"))
            .collect()
    });
    for (i, result) in results {
        done[i] = Some(result?);
    }

    let records = done
        .into_iter()
        .map(|r| r.expect("architecture neither resumed nor trained"))
        .collect();
    Ok(OracleTable::from_records(ds.config.seed, *hyper, records)?)
}

pub fn train_tree(ctx: &Ctx) -> Result<()> {
    let space = ctx.config.build_space()?;
    let ds = ctx.dataset()?;
    let budget = ctx.config.build_budget(ctx.seed);
    let tree = fsnas_core::run_pipeline(&space, &ds, &budget, ctx.config.split.mode)?;

    let dir = ctx.tree_dir(budget.seed);
    checkpoint::save_tree(&tree, &dir)?;
    println!(
        "tree seed={} depth={} leaves={} spent_epochs={} dir={}",
        budget.seed,
        tree.depth(),
        tree.leaves().len(),
        tree.spent_epochs(),
        dir.display()
    );
    Ok(())
}

pub fn eval_corr(ctx: &Ctx) -> Result<()> {
    let ds = ctx.dataset()?;
    let oracle = require_oracle(ctx, &ds)?;

    let mut tree_dirs = find_tree_dirs(&ctx.out)?;
    if tree_dirs.is_empty() {
        bail!(
            "no tree checkpoints under {}; run train-tree first",
            ctx.out.display()
        );
    }
    tree_dirs.sort_by_key(|(seed, _)| *seed);

    let mut rows = Vec::new();
    for (_, dir) in &tree_dirs {
        let tree = checkpoint::load_tree(dir)?;
        for level in 0..tree.depth() {
            rows.push(correlation_report(&tree, &ds, &oracle, level)?);
        }
    }
    rows.sort_by_key(|r| (r.seed, r.level));

    let path = ctx.out.join(CORRELATION_CSV);
    let mut writer = csv::Writer::from_path(&path)
        .with_context(|| format!("cannot write {}", path.display()))?;
    for r in &rows {
        writer.serialize(CorrelationRow {
            level: r.level,
            supernet_count: r.supernet_count,
            split_edges: join_edges(&r.split_edges),
            seed: r.seed,
            tau: r.tau,
            concordant: r.concordant,
            discordant: r.discordant,
            ties_x: r.ties_x,
            ties_y: r.ties_y,
            cost_epochs: r.cost_epochs,
        })?;
    }
    writer.flush()?;
    println!(
        "correlation trees={} rows={} file={}",
        tree_dirs.len(),
        rows.len(),
        path.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Algo {
    Random,
    Rea,
    Reinforce,
    Gradient,
}

impl Algo {
    fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "random" => Self::Random,
            "rea" => Self::Rea,
            "reinforce" => Self::Reinforce,
            "gradient" => Self::Gradient,
            other => bail!("unknown search algorithm {other:?} in config"),
        })
    }
}

pub fn search(ctx: &Ctx, algo: Option<Algo>) -> Result<()> {
    let space = ctx.config.build_space()?;
    let ds = ctx.dataset()?;
    let algo = match algo {
        Some(a) => a,
        None => Algo::parse(&ctx.config.search.algorithm)?,
    };
    let search_config = ctx.config.build_search(ctx.seed);
    let region = Region::root(Arc::clone(&space));

    // Truth for trace annotation, when an oracle table is around.
    let truth = read_truth_if_present(ctx)?;

    let tree_dir = ctx.tree_dir(ctx.config.split.seed);
    let tree: Option<SupernetTree> = if tree_dir.join("tree-manifest.json").exists() {
        Some(checkpoint::load_tree(&tree_dir)?)
    } else {
        None
    };
    let oracle_path = ctx.out.join(ORACLE_CSV);

    let trace = if algo == Algo::Gradient {
        let tree = tree.ok_or_else(|| {
            anyhow!(
                "gradient selection needs a mixture tree at {}; run train-tree first",
                tree_dir.display()
            )
        })?;
        let arch = gradient_select(&tree)?;
        let evaluator = Evaluator::few_shot(&tree, &ds);
        let proxy_score = evaluator.proxy(&arch)?;
        let mut trace = SearchTrace {
            algorithm: "gradient".into(),
            seed: search_config.seed,
            config: search_config,
            steps: Vec::new(),
        };
        trace.steps.push(TraceStep {
            index: 1,
            encoding: arch.encode(),
            proxy_score,
        });
        kind_line(&trace, "few_shot", truth.as_ref());
        trace
    } else {
        // Prefer the proxy the pipeline built; fall back to the oracle.
        let oracle_table;
        let evaluator = if let Some(tree) = &tree {
            Evaluator::few_shot(tree, &ds)
        } else if oracle_path.exists() {
            oracle_table = require_oracle(ctx, &ds)?;
            Evaluator::oracle(&oracle_table)
        } else {
            bail!(
                "no evaluator available under {}; run train-tree or train-oracle first",
                ctx.out.display()
            );
        };
        let trace = match algo {
            Algo::Random => random_search(&region, &evaluator, &search_config)?,
            Algo::Rea => rea_search(&region, &evaluator, &search_config)?,
            Algo::Reinforce => reinforce_search(&region, &evaluator, &search_config)?,
            Algo::Gradient => unreachable!("handled above"),
        };
        kind_line(&trace, evaluator.kind(), truth.as_ref());
        trace
    };

    std::fs::create_dir_all(&ctx.out)?;
    let path = ctx.out.join(TRACE_CSV);
    write_trace_csv(&path, &trace, truth.as_ref())?;
    println!("trace file={}", path.display());
    Ok(())
}

/// One summary line: algorithm, evaluator kind, step count, proxy best,
/// and the true best when an oracle table is present.
fn kind_line(trace: &SearchTrace, evaluator: &str, truth: Option<&BTreeMap<String, f64>>) {
    let best = trace
        .steps
        .iter()
        .max_by(|a, b| a.proxy_score.total_cmp(&b.proxy_score));
    let (best_enc, best_proxy) = match best {
        Some(s) => (s.encoding.as_str(), s.proxy_score),
        None => ("-", f64::NAN),
    };
    let mut line = format!(
        "search algo={} evaluator={} steps={} best_encoding={} best_proxy={}",
        trace.algorithm,
        evaluator,
        trace.steps.len(),
        best_enc,
        best_proxy
    );
    if let Some(truth) = truth {
        let best_true = trace
            .steps
            .iter()
            .filter_map(|s| truth.get(&s.encoding))
            .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        if best_true.is_finite() {
            line.push_str(&format!(" best_true={best_true}"));
        }
    }
    println!("{line}");
}

pub fn retrain(ctx: &Ctx, k: Option<usize>) -> Result<()> {
    let space = ctx.config.build_space()?;
    let ds = ctx.dataset()?;
    let k = k.unwrap_or(ctx.config.search.k);
    let hyper = ctx.config.build_oracle_hyper(ctx.seed);

    let path = ctx.out.join(TRACE_CSV);
    if !path.exists() {
        bail!("no trace at {}; run search first", path.display());
    }
    let steps = read_trace_csv(&path)?;
    let trace = SearchTrace {
        algorithm: "trace".into(),
        seed: 0,
        config: fsnas_core::SearchConfig::default(),
        steps,
    };

    let (winner, records) = topk_retrain(&space, &trace, k, &ds, &hyper)?;
    for (rank, r) in records.iter().enumerate() {
        println!(
            "rank={} encoding={} proxy={} valid={} test={}",
            rank + 1,
            r.encoding,
            r.proxy_score,
            r.valid_acc,
            r.test_acc
        );
    }
    let best = records
        .iter()
        .find(|r| r.encoding == winner.encode())
        .expect("winner is one of the records");
    println!("winner={} test_acc={}", winner.encode(), best.test_acc);
    Ok(())
}

pub fn report(ctx: &Ctx) -> Result<()> {
    let mut printed = false;

    let oracle_path = ctx.out.join(ORACLE_CSV);
    if oracle_path.exists() {
        let records = read_oracle_records(&oracle_path)?;
        if let Some(best) = records
            .iter()
            .max_by(|a, b| a.valid_acc.total_cmp(&b.valid_acc))
        {
            println!(
                "oracle architectures={} best_encoding={} best_valid={} best_test={}",
                records.len(),
                best.encoding,
                best.valid_acc,
                best.test_acc
            );
            printed = true;
        }
    }

    let corr_path = ctx.out.join(CORRELATION_CSV);
    if corr_path.exists() {
        let mut reader = csv::Reader::from_path(&corr_path)?;
        for row in reader.deserialize() {
            let r: CorrelationRow = row?;
            println!(
                "correlation seed={} level={} supernets={} tau={} cost_epochs={}",
                r.seed, r.level, r.supernet_count, r.tau, r.cost_epochs
            );
            printed = true;
        }
    }

    let trace_path = ctx.out.join(TRACE_CSV);
    if trace_path.exists() {
        let rows = read_trace_rows(&trace_path)?;
        if let Some(last) = rows.last() {
            let best_proxy = rows
                .iter()
                .map(|r| r.proxy_score)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut line = format!("search steps={} best_proxy={}", rows.len(), best_proxy);
            if let Some(v) = last.best_true_so_far {
                line.push_str(&format!(" best_true={v}"));
            }
            println!("{line}");
            printed = true;
        }
    }

    if !printed {
        bail!("nothing to report under {}", ctx.out.display());
    }
    Ok(())
}

fn find_tree_dirs(out: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let mut dirs = Vec::new();
    let entries = match std::fs::read_dir(out) {
        Ok(e) => e,
        Err(_) => return Ok(dirs),
    };
    for entry in entries {
        let entry = entry?;
        if !entry.file_type()?.is_dir() {
            continue;
        }
        let name = entry.file_name();
        let Some(seed) = name
            .to_str()
            .and_then(|n| n.strip_prefix("tree-s"))
            .and_then(|s| s.parse::<u64>().ok())
        else {
            continue;
        };
        if entry.path().join("tree-manifest.json").exists() {
            dirs.push((seed, entry.path()));
        }
    }
    Ok(dirs)
}

fn require_oracle(ctx: &Ctx, ds: &Dataset) -> Result<OracleTable> {
    let path = ctx.out.join(ORACLE_CSV);
    if !path.exists() {
        bail!(
            "no oracle table at {}; run train-oracle first",
            path.display()
        );
    }
    read_oracle_csv(&path, ds.config.seed, ctx.config.build_oracle_hyper(None))
}

fn read_truth_if_present(ctx: &Ctx) -> Result<Option<BTreeMap<String, f64>>> {
    let path = ctx.out.join(ORACLE_CSV);
    if !path.exists() {
        return Ok(None);
    }
    let map = read_oracle_records(&path)?
        .into_iter()
        .map(|r| (r.encoding, r.valid_acc))
        .collect();
    Ok(Some(map))
}

fn read_oracle_records(path: &Path) -> Result<Vec<OracleRecord>> {
    let mut reader =
        csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut records = Vec::new();
    for row in reader.deserialize() {
        let r: OracleRecord = row.with_context(|| format!("bad row in {}", path.display()))?;
        records.push(r);
    }
    Ok(records)
}

/// Rebuilds the table assuming the CSV was produced under the current
/// config's dataset seed and oracle schedule (resume contract).
fn read_oracle_csv(path: &Path, dataset_seed: u64, hyper: fsnas_core::TrainHyper) -> Result<OracleTable> {
    Ok(OracleTable::from_records(
        dataset_seed,
        hyper,
        read_oracle_records(path)?,
    )?)
}

fn write_oracle_csv(path: &Path, table: &OracleTable) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .with_context(|| format!("cannot write {}", path.display()))?;
    for record in table.records() {
        writer.serialize(record)?;
    }
    writer.flush()?;
    Ok(())
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct CorrelationRow {
    level: usize,
    supernet_count: usize,
    split_edges: String,
    seed: u64,
    tau: f64,
    concordant: u64,
    discordant: u64,
    ties_x: u64,
    ties_y: u64,
    cost_epochs: usize,
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct TraceRow {
    step: usize,
    encoding: String,
    proxy_score: f64,
    true_score: Option<f64>,
    best_true_so_far: Option<f64>,
}

fn join_edges(edges: &[usize]) -> String {
    edges
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("|")
}

fn write_trace_csv(
    path: &Path,
    trace: &SearchTrace,
    truth: Option<&BTreeMap<String, f64>>,
) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .with_context(|| format!("cannot write {}", path.display()))?;
    let mut best: Option<f64> = None;
    for step in &trace.steps {
        let true_score = truth.and_then(|t| t.get(&step.encoding)).copied();
        if let Some(v) = true_score {
            best = Some(best.map_or(v, |b| b.max(v)));
        }
        writer.serialize(TraceRow {
            step: step.index,
            encoding: step.encoding.clone(),
            proxy_score: step.proxy_score,
            true_score,
            best_true_so_far: best,
        })?;
    }
    writer.flush()?;
    Ok(())
}

fn read_trace_rows(path: &Path) -> Result<Vec<TraceRow>> {
    let mut reader =
        csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut rows = Vec::new();
    for row in reader.deserialize() {
        let r: TraceRow = row.with_context(|| format!("bad row in {}", path.display()))?;
        rows.push(r);
    }
    Ok(rows)
}

fn read_trace_csv(path: &Path) -> Result<Vec<TraceStep>> {
    Ok(read_trace_rows(path)?
        .into_iter()
        .map(|r| TraceStep {
            index: r.step,
            encoding: r.encoding,
            proxy_score: r.proxy_score,
        })
        .collect())
}
