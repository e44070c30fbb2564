use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use svf_core::analysis::{alignment, presence_stratified_sparsity, training_dynamics, Dynamics, Side};
use svf_core::io::{
    head_label, lm_decompose, load_dump, load_run, read_json, toy_decomposition_rows, train_to_dir, write_csv, write_decomposition_csv,
    write_json, write_run_summary, LmDecomposeOptions, PairSpec, Report, RunMeta,
};
use svf_core::sweeps::{run_sweep, summary_rows, AxisRegistry, CellConfig, SweepSpec};
use svf_core::theory::{VerdictStatus, VerifierRegistry, VerifyOptions};
use svf_core::trainer::{Checkpoint, RunRecord};

use crate::{Analyze, Command, DynamicsKind, Failure, Lm, RunArgs, SideArg, SweepArgs, TrainArgs, VerifyArgs};

type Outcome = Result<(), Failure>;

pub fn run(command: Command) -> Outcome {
    match command {
        Command::Train(a) => train(a),
        Command::Analyze(a) => analyze(a),
        Command::Sweep(a) => sweep(a),
        Command::VerifyTheorems(a) => verify(a),
        Command::Lm(Lm::Decompose {
            dump,
            pairs,
            rotate,
            seed,
            exclude_positions,
            out,
        }) => lm(
            &dump,
            &pairs,
            LmDecomposeOptions {
                rotate,
                seed,
                exclude_positions,
            },
            &out,
        ),
    }
}

fn done(written: &[PathBuf], extra: serde_json::Value) {
    let files: Vec<String> = written.iter().map(|p| p.display().to_string()).collect();
    println!("{}", json!({ "written": files, "summary": extra }));
}

fn train(a: TrainArgs) -> Outcome {
    let mut cfg: CellConfig = match (&a.config, a.resume) {
        (Some(p), _) => read_json(p)?,
        (None, true) => {
            let meta: RunMeta = read_json(&a.out.join("run.json"))?;
            CellConfig {
                model: meta.model,
                train: meta.train,
                spec: meta.spec,
            }
        }
        (None, false) => CellConfig::default(),
    };
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    cfg.validate()?;
    let run = train_to_dir(&cfg.model, &cfg.spec, &cfg.train, &a.out, a.resume)?;
    let last = run.last();
    done(
        &[a.out.clone()],
        json!({ "step": last.step, "recon": last.loss.recon, "attn": last.loss.attn, "total": last.loss.total }),
    );
    Ok(())
}

fn pick_step<'a>(run: &'a RunRecord, step: &str) -> Result<&'a Checkpoint, Failure> {
    match step {
        "last" => Ok(run.last()),
        "first" => Ok(run.first()),
        n => {
            let n: usize = n
                .parse()
                .map_err(|_| Failure::usage(format!("--step must be `first`, `last` or a number, got `{n}`")))?;
            Ok(run.at_step(n)?)
        }
    }
}

fn run_id(dir: &Path) -> String {
    dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into())
}

fn write_report<T: Serialize>(out: &Path, file: &str, kind: &str, data: T) -> Result<PathBuf, Failure> {
    let path = out.join(file);
    write_json(&path, &Report::new(kind, data))?;
    Ok(path)
}

fn analyze(a: Analyze) -> Outcome {
    match a {
        Analyze::Alignment(RunArgs { run, step, out }) => {
            let rec = load_run(&run)?;
            let ckpt = pick_step(&rec, &step)?;
            let report = alignment(&ckpt.params.universe, &ckpt.params.head, &rec.spec)?;
            let min_cos = report.min_pair_cos();
            let path = write_report(&out, "alignment.json", "alignment", json!({ "step": ckpt.step, "report": report }))?;
            done(&[path], json!({ "step": ckpt.step, "min_pair_cos": min_cos }));
        }
        Analyze::Decompose {
            run: RunArgs { run, step, out },
            contexts,
            seed,
            rotate,
        } => {
            let rec = load_run(&run)?;
            let ckpt = pick_step(&rec, &step)?;
            let rows = toy_decomposition_rows(&rec, ckpt, &run_id(&run), contexts, seed, rotate)?;
            let path = out.join("decomposition.csv");
            write_decomposition_csv(&path, &rows)?;
            done(&[path], json!({ "step": ckpt.step, "rows": rows.len() }));
        }
        Analyze::Sparsity { run, out, contexts, seed } => {
            let rec = load_run(&run)?;
            let strata = presence_stratified_sparsity(&rec, &rec.spec, contexts, seed)?;
            let path = write_report(&out, "sparsity.json", "presence-sparsity", &strata)?;
            done(&[path], json!({ "checkpoints": rec.checkpoints.len() }));
        }
        Analyze::Dynamics {
            run,
            out,
            kind,
            index,
            side,
            feature,
        } => {
            let rec = load_run(&run)?;
            let what = match kind {
                DynamicsKind::SvFeature => Dynamics::SvFeature,
                DynamicsKind::SvSelf => Dynamics::SvSelf {
                    index,
                    side: match side {
                        SideArg::Left => Side::Left,
                        SideArg::Right => Side::Right,
                    },
                },
                DynamicsKind::FeatureSelf => Dynamics::FeatureSelf { feature },
            };
            let matrix = training_dynamics(&rec, what)?;
            let steps: Vec<usize> = rec.checkpoints.iter().map(|c| c.step).collect();
            let path = write_report(&out, "dynamics.json", "dynamics", json!({ "what": what, "steps": steps, "matrix": matrix }))?;
            done(&[path], json!({ "shape": [matrix.rows(), matrix.cols()] }));
        }
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> Outcome {
    let mut spec = match (&a.spec, &a.axis) {
        (Some(p), _) => read_json::<SweepSpec>(p)?,
        (None, Some(axis)) => SweepSpec::for_axis(axis)?,
        (None, None) => return Err(Failure::usage("sweep needs --spec or --axis")),
    };
    if let Some(s) = a.steps {
        spec.base.train.steps = s;
        spec.base.train.checkpoint_every = s;
    }
    if a.workers.is_some() {
        spec.workers = a.workers;
    }
    let registry = AxisRegistry::default();
    spec.validate(&registry)?;
    let cells_dir = a.out.join("cells");
    let on_cell = |cell: &svf_core::sweeps::SweepCell, run: Option<&RunRecord>| {
        let dir = cells_dir.join(&cell.run_id);
        if let Some(run) = run {
            write_run_summary(&dir, run)?;
        }
        write_json(&dir.join("cell.json"), cell)
    };
    let mut cells = run_sweep(&spec, &registry, &on_cell)?;
    cells.sort_by(|x, y| x.axis_value.total_cmp(&y.axis_value).then(x.replicate.cmp(&y.replicate)));
    let summary = a.out.join("sweep_summary.csv");
    write_csv(&summary, &summary_rows(&cells))?;
    let all = a.out.join("sweep_cells.json");
    write_json(&all, &Report::new("sweep", json!({ "spec": spec, "cells": cells })))?;
    let failed: Vec<&str> = cells.iter().filter(|c| c.error.is_some()).map(|c| c.run_id.as_str()).collect();
    done(
        &[summary, all, cells_dir],
        json!({
            "cells": cells.len(),
            "failed": failed,
        }),
    );
    Ok(())
}

fn verify(a: VerifyArgs) -> Outcome {
    let registry = VerifierRegistry::default();
    if a.list {
        for name in registry.names() {
            println!("{name}\t{}", registry.get(name)?.summary());
        }
        return Ok(());
    }
    let opts = VerifyOptions {
        samples: a.samples,
        seed: a.seed,
        ..VerifyOptions::default()
    };
    let verdicts = registry.run(&a.only, &opts)?;
    if let Some(dir) = &a.out {
        write_json(&dir.join("verdicts.json"), &verdicts)?;
    }
    println!("{}", serde_json::to_string_pretty(&verdicts).map_err(svf_core::Error::from)?);
    eprintln!("{:<10} {:<44} {:<8} {:>12}", "theorem", "label", "status", "margin");
    for v in &verdicts {
        let status = match (&v.status, v.bound_satisfied()) {
            (VerdictStatus::NotApplicable { .. }, _) => "n/a",
            (VerdictStatus::Recorded, _) => "recorded",
            (_, Some(true)) => "pass",
            _ => "FAIL",
        };
        let margin = v.margin().map(|m| format!("{m:.3e}")).unwrap_or_else(|| "-".into());
        eprintln!("{:<10} {:<44} {:<8} {:>12}", v.theorem_id, v.label, status, margin);
    }
    let failed: Vec<String> = verdicts
        .iter()
        .filter(|v| v.bound_satisfied() == Some(false))
        .map(|v| format!("{} ({})", v.theorem_id, v.label))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::checks_failed(format!("bounds violated: {}", failed.join(", "))))
    }
}

fn lm(dumps: &[PathBuf], pairs: &Path, opts: LmDecomposeOptions, out: &Path) -> Outcome {
    let spec: PairSpec = read_json(pairs)?;
    let mut rows = Vec::new();
    let mut records = Vec::new();
    let mut notices = Vec::new();
    let mut heads = Vec::new();
    for path in dumps {
        let snap = load_dump(path)?;
        heads.push(head_label(&snap));
        let (recs, notes) = lm_decompose(&snap, &spec, &opts)?;
        for r in &recs {
            rows.extend(r.rows(&snap.manifest.model_name));
        }
        records.extend(recs);
        notices.extend(notes);
    }
    for p in &spec.pairs {
        if !heads.contains(&p.head) {
            notices.push(format!("{}: no dump for this head; pair ({}, {}) skipped", p.head, p.dest, p.source));
        }
    }
    for n in &notices {
        eprintln!("{}", json!({ "notice": n }));
    }
    fs::create_dir_all(out).map_err(|e| Failure::from(svf_core::Error::Io { path: out.into(), source: e }))?;
    let csv = out.join("lm_decomposition.csv");
    write_decomposition_csv(&csv, &rows)?;
    let js = write_report(out, "lm_records.json", "lm-decomposition", json!({ "records": records, "notices": notices }))?;
    done(&[csv, js], json!({ "records": records.len(), "skipped": notices.len() }));
    Ok(())
}
