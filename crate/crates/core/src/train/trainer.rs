//! Staged training: coarse-tuning, multi-task and single-task stages run in
//! order over one shared model, with resumable mid-stage state.

use std::path::{Path, PathBuf};

use mmm_autodiff::{clip_global_norm, Adam, Grads, Graph, LrSchedule, OptimizerState, Real};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{usage, MmmError, Result};
use crate::eval::report::{evaluate, evaluate_pairs};
use crate::model::Model;
use crate::train::checkpoint::{load_checkpoint, save_checkpoint};
use crate::train::data::{build_plan_vocab, load_datasets, Instance, PreparedDataset, PreparedSplit};
use crate::train::derive_seed;
use crate::train::early_stop::{EarlyStopping, StopDecision};
use crate::train::metrics::{write_metrics_csv, MetricsRow};
use crate::train::mixture::DatasetMixture;
use crate::train::plan::{StageSpec, TaskKind, TrainPlan};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: [u8; 32],
    stream: u64,
    word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        let pos = self
            .word_pos
            .parse()
            .map_err(|_| MmmError::Checkpoint(format!("bad rng position {}", self.word_pos)))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Endless shuffled pass over a dataset; reshuffles when exhausted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ShuffledIter {
    order: Vec<usize>,
    pos: usize,
}

impl ShuffledIter {
    fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, pos: 0 }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StageProgress {
    stage: usize,
    step: u64,
    total_steps: u64,
    rng: RngState,
    iters: Vec<ShuffledIter>,
    early: Option<EarlyStopping>,
}

struct ActiveStage<T> {
    index: usize,
    step: u64,
    total_steps: u64,
    rng: ChaCha8Rng,
    iters: Vec<ShuffledIter>,
    early: Option<EarlyStopping>,
    /// Indices into the plan's datasets.
    datasets: Vec<usize>,
    mixture: DatasetMixture,
    dev: Option<usize>,
    schedule: LrSchedule,
    optimizer: OptimizerState<T>,
    grads: Grads<T>,
}

/// Outcome of one finished stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub name: String,
    pub steps: u64,
    pub total_steps: u64,
    pub stopped_early: bool,
    /// Dev accuracy at the last evaluation.
    pub dev_dataset: Option<String>,
    pub dev_acc: Option<f64>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PipelineState {
    plan: TrainPlan,
    next_stage: usize,
    metrics: Vec<MetricsRow>,
    reports: Vec<StageReport>,
    progress: Option<StageProgress>,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Directory for per-stage checkpoints and the metrics CSV.
    pub out_dir: Option<PathBuf>,
    /// Pause after this many optimizer steps in this call.
    pub step_budget: Option<u64>,
    /// Pause once stage `.0` (0-based) has taken `.1` steps.
    pub stop_at: Option<(usize, u64)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunStatus {
    Finished,
    Paused,
}

/// A training run over a plan: model, packed data, log and progress.
pub struct Pipeline<T: Real> {
    pub plan: TrainPlan,
    pub model: Model<T>,
    pub data: Vec<PreparedDataset>,
    pub metrics: Vec<MetricsRow>,
    pub reports: Vec<StageReport>,
    next_stage: usize,
    active: Option<ActiveStage<T>>,
    adam: Adam,
}

fn steps_per_epoch(size: usize, batch: usize) -> u64 {
    size.div_ceil(batch) as u64
}

impl<T: Real> Pipeline<T> {
    /// Loads every dataset (relative file paths resolve against `base_dir`),
    /// builds the vocabulary and a fresh encoder.
    pub fn new(plan: TrainPlan, base_dir: &Path) -> Result<Self> {
        plan.validate()?;
        let loaded = load_datasets(&plan, base_dir)?;
        let vocab = build_plan_vocab(&loaded, plan.min_freq);
        let config = plan.model.to_config(derive_seed(plan.seed, "encoder"));
        let model = Model::new(config, vocab)?;
        let data = loaded
            .iter()
            .map(|d| PreparedDataset::new(&model, d))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            plan,
            model,
            data,
            metrics: Vec::new(),
            reports: Vec::new(),
            next_stage: 0,
            active: None,
            adam: Adam::default(),
        })
    }

    pub fn is_finished(&self) -> bool {
        self.active.is_none() && self.next_stage >= self.plan.stages.len()
    }

    /// Global optimizer steps taken so far, over all stages.
    pub fn steps_taken(&self) -> usize {
        self.metrics.len()
    }

    /// Runs stages until the plan is done or the step budget is spent.
    pub fn run(&mut self, opts: &RunOptions) -> Result<RunStatus> {
        let mut budget = opts.step_budget;
        loop {
            if self.active.is_none() {
                if self.next_stage >= self.plan.stages.len() {
                    break;
                }
                self.begin_stage(self.next_stage)?;
                self.next_stage += 1;
            }
            let at_stop =
                matches!((opts.stop_at, &self.active), (Some((i, n)), Some(st)) if st.index == i && st.step >= n);
            if budget == Some(0) || at_stop {
                return Ok(RunStatus::Paused);
            }
            let stage_done = self.step()?;
            budget = budget.map(|b| b - 1);
            if stage_done {
                self.finish_stage(opts)?;
            }
        }
        if let Some(dir) = &opts.out_dir {
            std::fs::create_dir_all(dir)?;
            write_metrics_csv(dir.join("metrics.csv"), &self.metrics)?;
        }
        Ok(RunStatus::Finished)
    }

    fn begin_stage(&mut self, index: usize) -> Result<()> {
        let stage = self.plan.stages[index].clone();
        let datasets: Vec<usize> = stage
            .datasets
            .iter()
            .map(|n| self.plan.dataset_index(n).expect("validated plan"))
            .collect();
        let kinds: Vec<TaskKind> = datasets.iter().map(|&i| self.plan.datasets[i].kind).collect();
        let needs_choice = kinds.contains(&TaskKind::Mcqa);
        let needs_pair = kinds.contains(&TaskKind::Pair);
        // heads survive a boundary only if the next stage uses them
        if !needs_pair {
            self.model.drop_pair_head();
        }
        if !needs_choice {
            self.model.drop_choice_head();
        }
        if needs_choice && self.model.choice.is_none() {
            let kind = self.plan.model.classifier;
            self.model
                .reset_choice_head(kind, derive_seed(self.plan.seed, "choice-head"));
        }
        if needs_pair && self.model.pair.is_none() {
            self.model.reset_pair_head(derive_seed(self.plan.seed, "pair-head"));
        }

        let sizes: Vec<usize> = datasets.iter().map(|&i| self.data[i].train.len()).collect();
        let mixture = DatasetMixture::new(&sizes)?;
        let largest = *sizes.iter().max().expect("non-empty stage");
        let total_steps = stage
            .max_steps
            .unwrap_or(stage.epochs as u64 * steps_per_epoch(largest, stage.batch_size));
        let schedule = LrSchedule::new(stage.lr_max, total_steps, stage.warmup)?;
        let seed = stage
            .seed
            .unwrap_or_else(|| derive_seed(self.plan.seed, &format!("stage-{index}")));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let iters = datasets
            .iter()
            .map(|&i| ShuffledIter::new(self.data[i].instances.len(), &mut rng))
            .collect();
        let dev = self.stage_dev(&stage, &datasets);
        self.active = Some(ActiveStage {
            index,
            step: 0,
            total_steps,
            rng,
            iters,
            early: stage.patience.map(EarlyStopping::new),
            datasets,
            mixture,
            dev,
            schedule,
            optimizer: OptimizerState::new(&self.model.store),
            grads: Grads::zeros_like(&self.model.store),
        });
        Ok(())
    }

    fn stage_dev(&self, stage: &StageSpec, datasets: &[usize]) -> Option<usize> {
        match &stage.dev {
            Some(name) => self.plan.dataset_index(name).filter(|&i| self.data[i].dev.is_some()),
            None => datasets.iter().rev().copied().find(|&i| self.data[i].dev.is_some()),
        }
    }

    fn instance_loss(
        &self,
        g: &mut Graph<T>,
        ds: usize,
        inst: Instance,
        rng: &mut ChaCha8Rng,
    ) -> Result<mmm_autodiff::Var> {
        match &self.data[ds].train {
            PreparedSplit::Mcqa(v) => {
                let ex = &v[inst.example];
                let logits = self.model.snippet_logits(g, &ex.snippets[inst.snippet], true, rng)?;
                Ok(g.cross_entropy(logits, ex.label.expect("checked at load"))?)
            }
            PreparedSplit::Pair(v) => {
                let p = &v[inst.example];
                let logits = self.model.pair_logits(g, &p.seq, true, rng)?;
                Ok(g.cross_entropy(logits, p.label)?)
            }
        }
    }

    /// One optimizer step; returns whether the stage is complete.
    fn step(&mut self) -> Result<bool> {
        let mut st = self.active.take().expect("active stage");
        let result = self.step_inner(&mut st);
        self.active = Some(st);
        result
    }

    fn step_inner(&mut self, st: &mut ActiveStage<T>) -> Result<bool> {
        let stage = self.plan.stages[st.index].clone();
        let j = if st.datasets.len() > 1 {
            st.mixture.sample_task(&mut st.rng)
        } else {
            0
        };
        let ds = st.datasets[j];
        let name = self.data[ds].name.clone();
        st.step += 1;

        st.grads.fill_zero();
        let batch = stage.batch_size;
        let inv = T::of(1.0 / batch as f64);
        let mut total = 0.0;
        for _ in 0..batch {
            let idx = st.iters[j].next(&mut st.rng);
            let inst = self.data[ds].instances[idx];
            let mut g = Graph::new();
            let loss = self.instance_loss(&mut g, ds, inst, &mut st.rng).map_err(|e| match e {
                MmmError::Autodiff(mmm_autodiff::AutodiffError::NonFinite(op)) => MmmError::Numeric(format!(
                    "stage {} step {} dataset {name}: non-finite values in {op}",
                    stage.name, st.step
                )),
                e => e,
            })?;
            let value = g.scalar(loss).as_f64();
            if !value.is_finite() {
                return Err(MmmError::Numeric(format!(
                    "stage {} step {} dataset {name}: loss is {value}",
                    stage.name, st.step
                )));
            }
            total += value;
            g.backward(loss)?;
            g.accumulate_param_grads(&mut st.grads, inv)?;
        }
        let loss = total / batch as f64;
        clip_global_norm(&mut st.grads, stage.clip_norm());
        let lr = st.schedule.lr_at(st.step)?;
        self.adam
            .step(&mut self.model.store, &st.grads, &mut st.optimizer, lr)?;

        let mut done = st.step >= st.total_steps;
        let due = stage.eval_every.is_some_and(|e| st.step.is_multiple_of(e)) || done;
        let mut dev_acc = None;
        if due {
            if let Some(dev) = st.dev {
                let acc = self.dev_accuracy(dev)?;
                dev_acc = Some(acc);
                if let Some(early) = &mut st.early {
                    if early.update(acc) == StopDecision::Stop {
                        done = true;
                    }
                }
            }
        }
        self.metrics.push(MetricsRow {
            step: st.step,
            stage: stage.name.clone(),
            dataset: name,
            loss,
            lr,
            dev_acc,
        });
        Ok(done)
    }

    pub fn dev_accuracy(&self, dataset: usize) -> Result<f64> {
        let d = &self.data[dataset];
        let Some(dev) = &d.dev else {
            return usage(format!("dataset {} has no dev split", d.name));
        };
        let report = match dev {
            PreparedSplit::Mcqa(v) => evaluate(&self.model, &d.name, v)?,
            PreparedSplit::Pair(v) => evaluate_pairs(&self.model, &d.name, v)?,
        };
        Ok(report.accuracy)
    }

    fn finish_stage(&mut self, opts: &RunOptions) -> Result<()> {
        let st = self.active.take().expect("active stage");
        let stage = &self.plan.stages[st.index];
        let dev_acc = self.metrics.iter().rev().take(st.step as usize).find_map(|r| r.dev_acc);
        let checkpoint = match &opts.out_dir {
            Some(dir) => {
                let path = dir.join(format!("stage{}-{}.ckpt", st.index + 1, stage.name));
                save_checkpoint(&path, &self.model, None, None)?;
                Some(path)
            }
            None => None,
        };
        self.reports.push(StageReport {
            name: stage.name.clone(),
            steps: st.step,
            total_steps: st.total_steps,
            stopped_early: st.step < st.total_steps,
            dev_dataset: st.dev.map(|i| self.data[i].name.clone()),
            dev_acc,
            checkpoint,
        });
        Ok(())
    }

    /// Saves model, optimizer and loop state so [`Pipeline::resume`] can
    /// continue exactly where this run stands.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let progress = self.active.as_ref().map(|st| StageProgress {
            stage: st.index,
            step: st.step,
            total_steps: st.total_steps,
            rng: RngState::capture(&st.rng),
            iters: st.iters.clone(),
            early: st.early.clone(),
        });
        let state = PipelineState {
            plan: self.plan.clone(),
            next_stage: self.next_stage,
            metrics: self.metrics.clone(),
            reports: self.reports.clone(),
            progress,
        };
        let state = serde_json::to_value(&state)?;
        let optimizer = self.active.as_ref().map(|st| &st.optimizer);
        save_checkpoint(path, &self.model, optimizer, Some(&state))
    }

    /// Restores a run saved with [`Pipeline::save`]; datasets are reloaded
    /// from the embedded plan relative to `base_dir`.
    pub fn resume(path: impl AsRef<Path>, base_dir: &Path) -> Result<Self> {
        let ck = load_checkpoint::<T>(path)?;
        let Some(state) = ck.state else {
            return Err(MmmError::Checkpoint("checkpoint carries no training state".into()));
        };
        let state: PipelineState =
            serde_json::from_value(state).map_err(|e| MmmError::Checkpoint(format!("bad training state: {e}")))?;
        let loaded = load_datasets(&state.plan, base_dir)?;
        if build_plan_vocab(&loaded, state.plan.min_freq) != ck.model.vocab {
            return Err(MmmError::Checkpoint(
                "datasets no longer match the checkpoint vocabulary".into(),
            ));
        }
        let model = ck.model;
        let data = loaded
            .iter()
            .map(|d| PreparedDataset::new(&model, d))
            .collect::<Result<Vec<_>>>()?;
        let mut pipeline = Self {
            plan: state.plan,
            model,
            data,
            metrics: state.metrics,
            reports: state.reports,
            next_stage: state.next_stage,
            active: None,
            adam: Adam::default(),
        };
        if let Some(p) = state.progress {
            let Some(optimizer) = ck.optimizer else {
                return Err(MmmError::Checkpoint(
                    "mid-stage checkpoint lacks optimizer state".into(),
                ));
            };
            let stage = pipeline.plan.stages[p.stage].clone();
            let datasets: Vec<usize> = stage
                .datasets
                .iter()
                .map(|n| pipeline.plan.dataset_index(n).expect("validated plan"))
                .collect();
            let sizes: Vec<usize> = datasets.iter().map(|&i| pipeline.data[i].train.len()).collect();
            let dev = pipeline.stage_dev(&stage, &datasets);
            pipeline.active = Some(ActiveStage {
                index: p.stage,
                step: p.step,
                total_steps: p.total_steps,
                rng: p.rng.restore()?,
                iters: p.iters,
                early: p.early,
                mixture: DatasetMixture::new(&sizes)?,
                datasets,
                dev,
                schedule: LrSchedule::new(stage.lr_max, p.total_steps, stage.warmup)?,
                optimizer,
                grads: Grads::zeros_like(&pipeline.model.store),
            });
        }
        Ok(pipeline)
    }
}

/// Runs a whole plan and returns the finished pipeline.
pub fn run_pipeline<T: Real>(plan: TrainPlan, base_dir: &Path, opts: &RunOptions) -> Result<Pipeline<T>> {
    let mut p = Pipeline::new(plan, base_dir)?;
    p.run(opts)?;
    Ok(p)
}
