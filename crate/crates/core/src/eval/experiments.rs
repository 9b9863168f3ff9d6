//! Experiment harnesses: ablations, reasoning-step sweeps, training-order
//! comparisons and convergence curves, all as seeded plan variants.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use mmm_autodiff::Real;
use serde::{Deserialize, Serialize};

use crate::error::{usage, MmmError, Result};
use crate::eval::report::evaluate;
use crate::man::ClassifierKind;
use crate::train::data::PreparedSplit;
use crate::train::plan::{StageKind, StageSpec, TaskKind, TrainPlan};
use crate::train::trainer::{Pipeline, RunOptions};

/// A base plan plus the roles its datasets play.
///
/// The base plan is the full configuration: a coarse-tuning stage on `aux`
/// followed by a multi-task stage on `source` and `target`. Accuracy is
/// always measured on the dev split of `target`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub plan: TrainPlan,
    pub aux: String,
    pub source: String,
    pub target: String,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub k_list: Vec<usize>,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        self.plan.validate()?;
        for (role, name, kind) in [
            ("aux", &self.aux, TaskKind::Pair),
            ("source", &self.source, TaskKind::Mcqa),
            ("target", &self.target, TaskKind::Mcqa),
        ] {
            match self.plan.dataset(name) {
                Some(d) if d.kind == kind => {}
                Some(_) => return usage(format!("{role} dataset {name} has the wrong task kind")),
                None => return usage(format!("{role} dataset {name} is not declared in the plan")),
            }
        }
        if self.plan.dataset(&self.target).and_then(|d| d.dev.as_ref()).is_none() {
            return usage(format!("target dataset {} needs a dev split", self.target));
        }
        self.main_stage()?;
        Ok(())
    }

    /// The stage that trains the target dataset; its hyperparameters are
    /// reused by every in-domain stage the harnesses build.
    fn main_stage(&self) -> Result<&StageSpec> {
        self.plan
            .stages
            .iter()
            .find(|s| s.datasets.contains(&self.target))
            .ok_or_else(|| MmmError::Usage(format!("no stage trains target dataset {}", self.target)))
    }

    fn coarse_stage(&self) -> Option<&StageSpec> {
        self.plan.stages.iter().find(|s| s.kind == StageKind::CoarseTune)
    }

    fn in_domain(&self, name: &str, kind: StageKind, datasets: &[&String]) -> Result<StageSpec> {
        let mut s = self.main_stage()?.clone();
        s.name = name.to_string();
        s.kind = kind;
        s.datasets = datasets.iter().map(|d| d.to_string()).collect();
        s.dev = datasets.contains(&&self.target).then(|| self.target.clone());
        Ok(s)
    }

    fn coarse(&self) -> StageSpec {
        self.coarse_stage().cloned().unwrap_or_else(|| {
            let mut s = self.main_stage().expect("validated").clone();
            s.name = "coarse-tune".into();
            s.kind = StageKind::CoarseTune;
            s.datasets = vec![self.aux.clone()];
            s.dev = None;
            s
        })
    }

    fn with_stages(&self, stages: Vec<StageSpec>) -> TrainPlan {
        let mut plan = self.plan.clone();
        plan.stages = stages;
        plan
    }

    fn full(&self) -> Result<TrainPlan> {
        let multi = self.in_domain("multi-task", StageKind::MultiTask, &[&self.source, &self.target])?;
        Ok(self.with_stages(vec![self.coarse(), multi]))
    }

    /// Ablation rows: full, then one component removed at a time.
    pub fn ablation_plans(&self) -> Result<Vec<(String, TrainPlan)>> {
        let full = self.full()?;
        let no_multi = self.with_stages(vec![
            self.coarse(),
            self.in_domain("single-task", StageKind::SingleTask, &[&self.target])?,
        ]);
        let no_coarse = self.with_stages(vec![full.stages[1].clone()]);
        let mut no_man = full.clone();
        no_man.model.classifier = ClassifierKind::Fcnn;
        let mut no_norm = full.clone();
        for d in &mut no_norm.datasets {
            d.speaker_normalization = false;
        }
        Ok(vec![
            ("full".into(), full),
            ("-multi-task".into(), no_multi),
            ("-coarse-tune".into(), no_coarse),
            ("-man".into(), no_man),
            ("-speaker-norm".into(), no_norm),
        ])
    }

    /// Training-order rows: sequential, multi-task, merged three-way, staged.
    pub fn order_plans(&self) -> Result<Vec<(String, TrainPlan)>> {
        let (s, t, a) = (&self.source, &self.target, &self.aux);
        Ok(vec![
            (
                format!("{s}->{t}"),
                self.with_stages(vec![
                    self.in_domain("source", StageKind::SingleTask, &[s])?,
                    self.in_domain("target", StageKind::SingleTask, &[t])?,
                ]),
            ),
            (
                format!("{{{s},{t}}}"),
                self.with_stages(vec![self.in_domain("multi-task", StageKind::MultiTask, &[s, t])?]),
            ),
            (
                format!("{{{s},{t},{a}}}"),
                self.with_stages(vec![self.in_domain("merged", StageKind::MultiTask, &[a, s, t])?]),
            ),
            (format!("{a}->{{{s},{t}}}"), self.full()?),
        ])
    }

    /// One plan per reasoning-step count; 0 selects the feed-forward head.
    pub fn sweep_plans(&self, k_list: &[usize]) -> Result<Vec<(String, TrainPlan)>> {
        if k_list.is_empty() {
            return usage("reasoning-step list is empty");
        }
        let full = self.full()?;
        Ok(k_list
            .iter()
            .map(|&k| {
                let mut plan = full.clone();
                plan.model.classifier = if k == 0 {
                    ClassifierKind::Fcnn
                } else {
                    ClassifierKind::Man { steps: k }
                };
                (format!("K={k}"), plan)
            })
            .collect())
    }

    /// Convergence rows: with and without the coarse-tuning stage.
    pub fn convergence_plans(&self) -> Result<Vec<(String, TrainPlan)>> {
        let full = self.full()?;
        let scratch = self.with_stages(vec![full.stages[1].clone()]);
        Ok(vec![("coarse-tuned".into(), full), ("no-coarse-tune".into(), scratch)])
    }
}

/// Trains `plan` under `seed` and returns the target dev accuracy.
pub fn run_cell<T: Real>(plan: &TrainPlan, seed: u64, target: &str, base_dir: &Path) -> Result<f64> {
    let mut plan = plan.clone();
    plan.seed = seed;
    let mut p = Pipeline::<T>::new(plan, base_dir)?;
    p.run(&RunOptions::default())?;
    let idx = p
        .plan
        .dataset_index(target)
        .ok_or_else(|| MmmError::Usage(format!("unknown target {target}")))?;
    match &p.data[idx].dev {
        Some(PreparedSplit::Mcqa(dev)) => Ok(evaluate(&p.model, target, dev)?.accuracy),
        _ => usage(format!("target {target} has no multi-choice dev split")),
    }
}

/// Accuracies of already-trained (plan, seed, precision) triples, so a plan
/// that appears in several tables (the full configuration, for one) is
/// trained once.
#[derive(Clone, Debug, Default)]
pub struct CellCache {
    done: BTreeMap<String, f64>,
    hits: usize,
}

impl CellCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Cells answered without training.
    pub fn hits(&self) -> usize {
        self.hits
    }

    pub fn len(&self) -> usize {
        self.done.len()
    }

    pub fn is_empty(&self) -> bool {
        self.done.is_empty()
    }

    fn run<T: Real>(&mut self, plan: &TrainPlan, seed: u64, target: &str, base_dir: &Path) -> Result<f64> {
        let mut keyed = plan.clone();
        keyed.seed = seed;
        let key = format!("{}|{target}|{}", T::NAME, serde_json::to_string(&keyed)?);
        if let Some(&acc) = self.done.get(&key) {
            self.hits += 1;
            return Ok(acc);
        }
        let acc = run_cell::<T>(plan, seed, target, base_dir)?;
        self.done.insert(key, acc);
        Ok(acc)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub row: String,
    pub column: String,
    pub seed: u64,
    pub accuracy: f64,
}

/// Accuracies of named configurations (rows) on named columns over seeds,
/// with the plan behind every (row, column) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentTable {
    pub title: String,
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    pub seeds: Vec<u64>,
    pub target: String,
    pub cells: Vec<Cell>,
    /// Keyed by `row/column`.
    pub plans: BTreeMap<String, TrainPlan>,
}

fn plan_key(row: &str, column: &str) -> String {
    format!("{row}/{column}")
}

impl ExperimentTable {
    pub fn plan(&self, row: &str, column: &str) -> Option<&TrainPlan> {
        self.plans.get(&plan_key(row, column))
    }

    pub fn values(&self, row: &str, column: &str) -> Vec<f64> {
        self.cells
            .iter()
            .filter(|c| c.row == row && c.column == column)
            .map(|c| c.accuracy)
            .collect()
    }

    /// Mean and sample standard deviation over seeds.
    pub fn stats(&self, row: &str, column: &str) -> Option<(f64, f64)> {
        let v = self.values(row, column);
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = if v.len() > 1 {
            v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Some((mean, var.sqrt()))
    }

    /// Re-trains one cell from its recorded plan and seed.
    pub fn rerun<T: Real>(&self, row: &str, column: &str, seed: u64, base_dir: &Path) -> Result<f64> {
        let plan = self
            .plan(row, column)
            .ok_or_else(|| MmmError::Usage(format!("no cell {row}/{column}")))?;
        run_cell::<T>(plan, seed, &self.target, base_dir)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,column,seed,accuracy\n");
        for c in &self.cells {
            let _ = writeln!(out, "{},{},{},{}", c.row, c.column, c.seed, c.accuracy);
        }
        out
    }

    pub fn render(&self) -> String {
        let width = self.rows.iter().map(String::len).max().unwrap_or(0).max(6);
        let mut out = format!(
            "{} (dev accuracy on {}, seeds {:?})\n",
            self.title, self.target, self.seeds
        );
        let _ = write!(out, "{:width$}", "");
        for c in &self.columns {
            let _ = write!(out, "  {c:>15}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{r:width$}");
            for c in &self.columns {
                match self.stats(r, c) {
                    Some((m, s)) => {
                        let _ = write!(out, "  {:>7.4} ± {:<5.3}", m, s);
                    }
                    None => {
                        let _ = write!(out, "  {:>15}", "-");
                    }
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        std::fs::write(dir.join(format!("{stem}.txt")), self.render())?;
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

fn seeds_of(spec: &ExperimentSpec, seeds: Option<&[u64]>) -> Result<Vec<u64>> {
    let seeds = seeds.map(<[u64]>::to_vec).unwrap_or_else(|| spec.seeds.clone());
    if seeds.is_empty() {
        return usage("no seeds given");
    }
    Ok(seeds)
}

/// Runs every (configuration, seed) pair; configurations become rows of a
/// single column named after the target, or columns of a single row when
/// `as_columns` is set.
fn run_table<T: Real>(
    title: &str,
    spec: &ExperimentSpec,
    configs: Vec<(String, TrainPlan)>,
    seeds: Vec<u64>,
    as_columns: bool,
    base_dir: &Path,
    cache: &mut CellCache,
) -> Result<ExperimentTable> {
    spec.validate()?;
    let mut table = ExperimentTable {
        title: title.to_string(),
        rows: Vec::new(),
        columns: Vec::new(),
        seeds: seeds.clone(),
        target: spec.target.clone(),
        cells: Vec::new(),
        plans: BTreeMap::new(),
    };
    for (name, plan) in configs {
        plan.validate()?;
        let (row, column) = if as_columns {
            (spec.target.clone(), name)
        } else {
            (name, spec.target.clone())
        };
        if !table.rows.contains(&row) {
            table.rows.push(row.clone());
        }
        if !table.columns.contains(&column) {
            table.columns.push(column.clone());
        }
        for &seed in &seeds {
            let accuracy = cache.run::<T>(&plan, seed, &spec.target, base_dir)?;
            table.cells.push(Cell {
                row: row.clone(),
                column: column.clone(),
                seed,
                accuracy,
            });
        }
        table.plans.insert(plan_key(&row, &column), plan);
    }
    Ok(table)
}

pub fn run_ablation<T: Real>(
    spec: &ExperimentSpec,
    seeds: Option<&[u64]>,
    base_dir: &Path,
    cache: &mut CellCache,
) -> Result<ExperimentTable> {
    let seeds = seeds_of(spec, seeds)?;
    run_table::<T>("ablation", spec, spec.ablation_plans()?, seeds, false, base_dir, cache)
}

pub fn sweep_reasoning_steps<T: Real>(
    spec: &ExperimentSpec,
    k_list: &[usize],
    seeds: Option<&[u64]>,
    base_dir: &Path,
    cache: &mut CellCache,
) -> Result<ExperimentTable> {
    let seeds = seeds_of(spec, seeds)?;
    run_table::<T>(
        "reasoning steps",
        spec,
        spec.sweep_plans(k_list)?,
        seeds,
        true,
        base_dir,
        cache,
    )
}

pub fn compare_training_orders<T: Real>(
    spec: &ExperimentSpec,
    seeds: Option<&[u64]>,
    base_dir: &Path,
    cache: &mut CellCache,
) -> Result<ExperimentTable> {
    let seeds = seeds_of(spec, seeds)?;
    run_table::<T>(
        "training order",
        spec,
        spec.order_plans()?,
        seeds,
        false,
        base_dir,
        cache,
    )
}

/// Stage-2 training-loss curves with and without coarse-tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub steps: u64,
    pub window: u64,
    /// `(config, seed, per-step losses)`
    pub curves: Vec<(String, u64, Vec<f64>)>,
}

impl ConvergenceReport {
    /// Mean over seeds of the mean loss in the last `window` steps.
    pub fn final_loss(&self, config: &str) -> Option<f64> {
        let per_seed: Vec<f64> = self
            .curves
            .iter()
            .filter(|(c, _, _)| c == config)
            .map(|(_, _, l)| {
                let w = (self.window as usize).min(l.len()).max(1);
                l[l.len() - w..].iter().sum::<f64>() / w as f64
            })
            .collect();
        (!per_seed.is_empty()).then(|| per_seed.iter().sum::<f64>() / per_seed.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("config,seed,step,loss\n");
        for (c, seed, losses) in &self.curves {
            for (i, l) in losses.iter().enumerate() {
                let _ = writeln!(out, "{c},{seed},{},{l}", i + 1);
            }
        }
        out
    }
}

/// Trains each convergence configuration for `steps` steps of its
/// in-domain stage (after a full coarse-tuning stage where present) and
/// records the per-step training loss. The learning-rate schedule is the
/// one the full stage would use.
pub fn convergence_curves<T: Real>(
    spec: &ExperimentSpec,
    seeds: Option<&[u64]>,
    steps: u64,
    window: u64,
    base_dir: &Path,
) -> Result<ConvergenceReport> {
    spec.validate()?;
    let seeds = seeds_of(spec, seeds)?;
    let mut curves = Vec::new();
    for (name, plan) in spec.convergence_plans()? {
        let last = plan.stages.len() - 1;
        let stage_name = plan.stages[last].name.clone();
        for &seed in &seeds {
            let mut plan = plan.clone();
            plan.seed = seed;
            let mut p = Pipeline::<T>::new(plan, base_dir)?;
            p.run(&RunOptions {
                stop_at: Some((last, steps)),
                ..RunOptions::default()
            })?;
            let losses: Vec<f64> = p
                .metrics
                .iter()
                .filter(|r| r.stage == stage_name)
                .map(|r| r.loss)
                .collect();
            curves.push((name.clone(), seed, losses));
        }
    }
    Ok(ConvergenceReport { steps, window, curves })
}
