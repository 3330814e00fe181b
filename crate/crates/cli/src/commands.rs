use std::path::Path;

use serde_json::{json, Value};
use wsicl::config::RunConfig;
use wsicl::dataset::{Dataset, FamilyRole};
use wsicl::error::{Error, Result};
use wsicl::eval::{
    context_size_sweep, efficiency_table, evaluate, interactive_predict, read_csv, render_user_prompts, reports_from_rows,
    sweep_rows, write_csv, PromptFile, SweepRow,
};
use wsicl::nn::checkpoint::load_checkpoint;
use wsicl::Model;
use wsicl::prompt::{simulate_prompts, PromptSpec};
use wsicl::train::train_loop;
use wsicl::volb;
use wsicl::volume::dice;

use crate::{Cli, Command, EvalArgs, InteractiveArgs, ModelData, SimulateArgs, SweepArgs, TrainArgs};

pub fn run(cli: &Cli) -> Result<Value> {
    let base = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let cfg = base.resolve(cli.seed, &cli.out)?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::GenData => gen_data(cfg, out),
        Command::SimulatePrompts(a) => simulate(cfg, out, a),
        Command::Train(a) => train(cfg, out, a),
        Command::Eval(a) => eval(cfg, out, a),
        Command::Sweep(a) => sweep(cfg, out, a),
        Command::Efficiency(a) => efficiency(cfg, out, &a.sweep),
        Command::Interactive(a) => interactive(cfg, out, a),
    }
}

fn create_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn gen_data(cfg: RunConfig, out: &Path) -> Result<Value> {
    let data = Dataset::write(&cfg.data, out)?;
    cfg.write_snapshot(out)?;
    let samples: usize = data.families().iter().map(|f| f.samples.len()).sum();
    Ok(json!({ "command": "gen-data", "families": data.families().len(), "samples": samples, "out": out }))
}

fn simulate(mut cfg: RunConfig, out: &Path, a: &SimulateArgs) -> Result<Value> {
    if let Some(t) = &a.prompt_type {
        cfg.eval.prompt_type = t.parse()?;
    }
    if let Some(p) = a.prompts {
        cfg.eval.prompts_per_image = p;
    }
    if a.no_jitter {
        cfg.eval.jitter = false;
    }
    if a.radius.is_some() {
        cfg.eval.point_radius = a.radius;
    }
    cfg.validate()?;
    let mask = volb::load_mask(&a.mask)?;
    let spec = PromptSpec {
        prompt_type: cfg.eval.prompt_type,
        prompts_per_image: cfg.eval.prompts_per_image,
        jitter_enabled: cfg.eval.jitter,
        rng_seed: cfg.eval.seed,
        point_radius: cfg.eval.point_radius,
    };
    let u = simulate_prompts::<f32>(&mask, &spec)?;
    create_dir(out)?;
    let path = out.join("prompt.volb");
    volb::save_volume(&path, u.volume())?;
    cfg.write_snapshot(out)?;
    let nonzero = u.data().iter().filter(|&&v| v > 0.0).count();
    Ok(json!({ "command": "simulate-prompts", "prompt": path, "nonzero_voxels": nonzero }))
}

fn open_data(cfg: &mut RunConfig, path: &Path) -> Result<Dataset> {
    let data = Dataset::open(path)?;
    cfg.data = data.manifest.config.clone();
    Ok(data)
}

fn train(mut cfg: RunConfig, out: &Path, a: &TrainArgs) -> Result<Value> {
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    let data = open_data(&mut cfg, &a.data)?;
    cfg.validate()?;
    cfg.write_snapshot(out)?;
    let every = cfg.train.checkpoint_interval.max(1);
    let outcome = train_loop(&data, &cfg.model, &cfg.train, Some(out), |r| {
        if (r.step + 1) % every == 0 {
            eprintln!("{}", json!({ "step": r.step + 1, "loss": r.loss }));
        }
    })?;
    let last = outcome.log.last().map(|r| r.loss);
    Ok(json!({ "command": "train", "steps": outcome.state.step, "final_loss": last, "checkpoint": out.join("checkpoint.json") }))
}

fn load_model(cfg: &mut RunConfig, inputs: &ModelData) -> Result<(Model, Dataset, Vec<usize>)> {
    let state: Model = load_checkpoint(&inputs.checkpoint)?;
    let data = open_data(cfg, &inputs.data)?;
    cfg.model = state.config.clone();
    cfg.eval.prompt_type = state.config.prompt_type;
    let role = match inputs.split.as_str() {
        "heldout" => FamilyRole::Heldout,
        "train" => FamilyRole::Train,
        other => return Err(Error::config("split", format!("expected `heldout` or `train`, got `{other}`"))),
    };
    let families = data.by_role(role);
    if families.is_empty() {
        return Err(Error::config("split", format!("dataset has no {} families", inputs.split)));
    }
    cfg.validate()?;
    Ok((state, data, families))
}

fn eval(mut cfg: RunConfig, out: &Path, a: &EvalArgs) -> Result<Value> {
    if let Some(r) = a.runs {
        cfg.eval.n_runs = r;
    }
    if let Some(l) = a.context_size {
        cfg.eval.context_size = l;
    }
    if let Some(p) = a.prompts {
        cfg.eval.prompts_per_image = p;
    }
    let (state, data, families) = load_model(&mut cfg, &a.inputs)?;
    let report = evaluate(&state, &data, &families, &cfg.eval)?;
    create_dir(out)?;
    write_csv(&out.join("eval.csv"), &sweep_rows(std::slice::from_ref(&report)))?;
    let path = out.join("eval.json");
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Json { path: path.clone(), source: e })?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    cfg.write_snapshot(out)?;
    Ok(json!({ "command": "eval", "mean_dice": report.mean, "std": report.std, "per_run": report.per_run }))
}

fn sweep(mut cfg: RunConfig, out: &Path, a: &SweepArgs) -> Result<Value> {
    if let Some(r) = a.runs {
        cfg.eval.n_runs = r;
    }
    if let Some(s) = &a.sizes {
        cfg.sweep.sizes = s.clone();
    }
    if let Some(p) = &a.prompt_counts {
        cfg.sweep.prompts = p.clone();
    }
    let (state, data, families) = load_model(&mut cfg, &a.inputs)?;
    let reports = context_size_sweep(&state, &data, &families, &cfg.sweep.sizes, &cfg.sweep.prompts, &cfg.eval)?;
    create_dir(out)?;
    let path = out.join("sweep.csv");
    write_csv(&path, &sweep_rows(&reports))?;
    cfg.write_snapshot(out)?;
    let cells: Vec<Value> =
        reports.iter().map(|r| json!({ "L": r.context_size, "P": r.prompts_per_image, "mean_dice": r.mean, "std": r.std })).collect();
    Ok(json!({ "command": "sweep", "csv": path, "cells": cells }))
}

fn efficiency(cfg: RunConfig, out: &Path, sweep_csv: &Path) -> Result<Value> {
    let rows: Vec<SweepRow> = read_csv(sweep_csv)?;
    if rows.is_empty() {
        return Err(Error::Format { path: sweep_csv.to_path_buf(), reason: "no sweep rows".into() });
    }
    let table = efficiency_table(&reports_from_rows(&rows), &cfg.efficiency)?;
    create_dir(out)?;
    let path = out.join("efficiency.csv");
    write_csv(&path, &table)?;
    cfg.write_snapshot(out)?;
    Ok(json!({ "command": "efficiency", "csv": path, "rows": table.len() }))
}

fn interactive(mut cfg: RunConfig, out: &Path, a: &InteractiveArgs) -> Result<Value> {
    let state: Model = load_checkpoint(&a.checkpoint)?;
    cfg.model = state.config.clone();
    cfg.data.shape = state.config.input_shape;
    cfg.validate()?;
    let x = volb::load_volume(&a.image)?;
    let raw = std::fs::read_to_string(&a.prompt).map_err(|e| Error::io(&a.prompt, e))?;
    let file: PromptFile = serde_json::from_str(&raw).map_err(|e| Error::Json { path: a.prompt.clone(), source: e })?;
    let u = render_user_prompts(x.shape(), &file.prompts, state.config.prompt_type)?;
    let pred = interactive_predict(&state, &x, &u)?;
    let mask = pred.scores.threshold(cfg.eval.threshold as f32);
    let score = match &a.reference {
        Some(p) => Some(dice(&mask, &volb::load_mask(p)?)?),
        None => None,
    };
    create_dir(out)?;
    volb::save_mask(&out.join("prediction.volb"), &mask)?;
    volb::save_volume(&out.join("scores.volb"), &pred.scores)?;
    let result = json!({
        "command": "interactive",
        "prompt_type": state.config.prompt_type,
        "prediction": out.join("prediction.volb"),
        "foreground_voxels": mask.count(),
        "dice": score,
    });
    let path = out.join("interactive.json");
    std::fs::write(&path, format!("{result:#}\n")).map_err(|e| Error::io(&path, e))?;
    cfg.write_snapshot(out)?;
    Ok(result)
}

