use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use mmm::data::{gen_synthetic_mcqa, gen_synthetic_nli, load_mcqa_json, load_pair_json, write_json, SyntheticSpec};
use mmm::eval::{
    compare_training_orders, convergence_curves, evaluate, evaluate_pairs, run_ablation, sweep_reasoning_steps,
    CellCache, EvalReport, ExperimentSpec, ExperimentTable,
};
use mmm::grad_suite::{run_gradient_suite, GRADIENT_TOLERANCE};
use mmm::train::{
    checkpoint_precision, load_checkpoint, write_metrics_csv, Pipeline, RunOptions, RunStatus, TrainPlan,
};
use mmm::{MmmError, Result};
use mmm_autodiff::Real;
use serde::de::DeserializeOwned;

use crate::{ConvergeArgs, EvalArgs, ExperimentArgs, GradcheckArgs, Kind, Precision, SweepArgs, SynthArgs, TrainArgs};

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let load = |msg: String| MmmError::Load {
        path: path.display().to_string(),
        msg,
    };
    let text = fs::read_to_string(path).map_err(|e| load(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| load(e.to_string()))
}

/// Relative dataset paths in a config resolve against its directory.
fn base_dir(config: &Path) -> PathBuf {
    match config.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn precision_of(name: &str) -> Result<Precision> {
    match name {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        other => Err(MmmError::Checkpoint(format!("unknown precision {other}"))),
    }
}

pub fn train(a: &TrainArgs) -> Result<ExitCode> {
    match a.resume.as_deref().map(checkpoint_precision).transpose()? {
        Some(p) => match precision_of(&p)? {
            Precision::F32 => train_as::<f32>(a),
            Precision::F64 => train_as::<f64>(a),
        },
        None => match a.precision {
            Precision::F32 => train_as::<f32>(a),
            Precision::F64 => train_as::<f64>(a),
        },
    }
}

fn train_as<T: Real>(a: &TrainArgs) -> Result<ExitCode> {
    let base = base_dir(&a.config);
    let mut pipeline = match &a.resume {
        Some(ck) => Pipeline::<T>::resume(ck, &base)?,
        None => {
            let mut plan: TrainPlan = read_json(&a.config)?;
            if let Some(seed) = a.seed {
                plan.seed = seed;
            }
            Pipeline::<T>::new(plan, &base)?
        }
    };
    let opts = RunOptions {
        out_dir: Some(a.out.clone()),
        step_budget: a.max_steps,
        stop_at: None,
    };
    let status = pipeline.run(&opts)?;
    fs::create_dir_all(&a.out)?;
    write_metrics_csv(a.out.join("metrics.csv"), &pipeline.metrics)?;
    fs::write(a.out.join("stages.json"), serde_json::to_vec_pretty(&pipeline.reports)?)?;
    let ck = match status {
        RunStatus::Finished => a.out.join("final.ckpt"),
        RunStatus::Paused => a.out.join("resume.ckpt"),
    };
    pipeline.save(&ck)?;
    for r in &pipeline.reports {
        match (&r.dev_dataset, r.dev_acc) {
            (Some(d), Some(acc)) => println!("{}: {} steps, dev accuracy on {d} {acc:.4}", r.name, r.steps),
            _ => println!("{}: {} steps", r.name, r.steps),
        }
    }
    match status {
        RunStatus::Finished => println!("finished; checkpoint {}", ck.display()),
        RunStatus::Paused => println!(
            "paused after {} steps; resume from {}",
            pipeline.steps_taken(),
            ck.display()
        ),
    }
    Ok(ExitCode::SUCCESS)
}

pub fn eval(a: &EvalArgs) -> Result<ExitCode> {
    match precision_of(&checkpoint_precision(&a.checkpoint)?)? {
        Precision::F32 => eval_as::<f32>(a),
        Precision::F64 => eval_as::<f64>(a),
    }
}

fn eval_as<T: Real>(a: &EvalArgs) -> Result<ExitCode> {
    let model = load_checkpoint::<T>(&a.checkpoint)?.model;
    let name = a
        .data
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data".into());
    let report: EvalReport = match a.kind {
        Kind::Mcqa => {
            let mut examples = load_mcqa_json(&a.data)?;
            if a.speaker_normalization {
                examples = examples.iter().map(|e| e.speaker_normalized()).collect();
            }
            let prepared = examples
                .iter()
                .map(|e| model.prepare_mcqa(e))
                .collect::<Result<Vec<_>>>()?;
            evaluate(&model, &name, &prepared)?
        }
        Kind::Nli => {
            let pairs = load_pair_json(&a.data)?;
            let prepared = pairs
                .iter()
                .map(|p| model.prepare_pair(p))
                .collect::<Result<Vec<_>>>()?;
            evaluate_pairs(&model, &name, &prepared)?
        }
    };
    println!(
        "{}: accuracy {:.4} ({}/{})",
        report.dataset, report.accuracy, report.correct, report.total
    );
    if let Some(out) = &a.out {
        fs::create_dir_all(out)?;
        fs::write(
            out.join(format!("eval-{name}.json")),
            serde_json::to_vec_pretty(&report)?,
        )?;
    }
    Ok(ExitCode::SUCCESS)
}

type Harness = fn(&ExperimentSpec, Option<&[u64]>, &Path, &mut CellCache) -> Result<ExperimentTable>;

fn run_harness(a: &ExperimentArgs, stem: &str, f32_run: Harness, f64_run: Harness) -> Result<ExitCode> {
    let spec: ExperimentSpec = read_json(&a.config)?;
    let base = base_dir(&a.config);
    let seeds = (!a.seed.is_empty()).then_some(a.seed.as_slice());
    let mut cache = CellCache::new();
    let table = match a.precision {
        Precision::F32 => f32_run(&spec, seeds, &base, &mut cache)?,
        Precision::F64 => f64_run(&spec, seeds, &base, &mut cache)?,
    };
    table.write(&a.out, stem)?;
    print!("{}", table.render());
    Ok(ExitCode::SUCCESS)
}

pub fn ablate(a: &ExperimentArgs) -> Result<ExitCode> {
    run_harness(a, "ablation", run_ablation::<f32>, run_ablation::<f64>)
}

pub fn compare_orders(a: &ExperimentArgs) -> Result<ExitCode> {
    run_harness(
        a,
        "orders",
        compare_training_orders::<f32>,
        compare_training_orders::<f64>,
    )
}

pub fn sweep_k(a: &SweepArgs) -> Result<ExitCode> {
    let spec: ExperimentSpec = read_json(&a.exp.config)?;
    let k_list = if a.k.is_empty() {
        spec.k_list.clone()
    } else {
        a.k.clone()
    };
    let base = base_dir(&a.exp.config);
    let seeds = (!a.exp.seed.is_empty()).then_some(a.exp.seed.as_slice());
    let mut cache = CellCache::new();
    let table = match a.exp.precision {
        Precision::F32 => sweep_reasoning_steps::<f32>(&spec, &k_list, seeds, &base, &mut cache)?,
        Precision::F64 => sweep_reasoning_steps::<f64>(&spec, &k_list, seeds, &base, &mut cache)?,
    };
    table.write(&a.exp.out, "sweep_k")?;
    print!("{}", table.render());
    Ok(ExitCode::SUCCESS)
}

pub fn converge(a: &ConvergeArgs) -> Result<ExitCode> {
    let spec: ExperimentSpec = read_json(&a.exp.config)?;
    let base = base_dir(&a.exp.config);
    let seeds = (!a.exp.seed.is_empty()).then_some(a.exp.seed.as_slice());
    let report = match a.exp.precision {
        Precision::F32 => convergence_curves::<f32>(&spec, seeds, a.steps, a.window, &base)?,
        Precision::F64 => convergence_curves::<f64>(&spec, seeds, a.steps, a.window, &base)?,
    };
    fs::create_dir_all(&a.exp.out)?;
    fs::write(a.exp.out.join("convergence.csv"), report.to_csv())?;
    for config in ["coarse-tuned", "no-coarse-tune"] {
        if let Some(l) = report.final_loss(config) {
            println!(
                "{config}: mean loss over the last {} of {} steps {l:.4}",
                a.window, a.steps
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<ExitCode> {
    let seeds: Vec<u64> = match a.seed {
        Some(s) => vec![s],
        None => (1..=a.seeds).collect(),
    };
    let suite = run_gradient_suite(&seeds)?;
    if let Some(out) = &a.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("gradcheck.json"), serde_json::to_vec_pretty(&suite)?)?;
    }
    let worst = suite.worst();
    println!(
        "{} cases, max relative error {:.3e}{}",
        suite.cases.len(),
        suite.max_rel_err(),
        worst
            .map(|w| format!(" ({} seed {} at {})", w.name, w.seed, w.worst_at))
            .unwrap_or_default()
    );
    if suite.passed() {
        println!("PASS (< {GRADIENT_TOLERANCE:e})");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("FAIL (>= {GRADIENT_TOLERANCE:e})");
        Ok(ExitCode::from(2))
    }
}

pub fn synth_gen(a: &SynthArgs) -> Result<ExitCode> {
    let mut spec: SyntheticSpec = read_json(&a.spec)?;
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let kind = match a.kind {
        Kind::Mcqa => "mcqa",
        Kind::Nli => "nli",
    };
    let name = a.name.clone().unwrap_or_else(|| format!("{kind}.json"));
    fs::create_dir_all(&a.out)?;
    let path = a.out.join(&name);
    let written = match a.kind {
        Kind::Mcqa => {
            let examples = gen_synthetic_mcqa(&spec)?;
            write_json(&path, &examples)?;
            examples.len()
        }
        Kind::Nli => {
            let pairs = gen_synthetic_nli(&spec)?;
            write_json(&path, &pairs)?;
            pairs.len()
        }
    };
    println!("wrote {written} {kind} examples to {}", path.display());
    Ok(ExitCode::SUCCESS)
}
