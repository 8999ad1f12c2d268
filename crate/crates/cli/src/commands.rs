use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde_json::{json, Value};

use bam_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use bam_core::merge::{keys, merge_k, recorded_fallbacks, task_vector, weight_change_norm, MergeMethod, MergePlan};
use bam_core::orchestrator::{line_search_c, run_bam_with, BamPlan, LedgerRecord, RunOptions};
use bam_core::slice::{
    compute_probabilities, manifest_name, materialize_slice, plan_curriculum, plan_iid, CorpusIndex, MixtureSpec,
    SliceMode,
};
use bam_core::toylab::{
    self, load_samples, prepare_experiment, variance_reduction_trial, ExperimentConfig, NoisyTaskVectorEnsemble,
    OptimizerConfig, ToyModel, ToyTrainer,
};

use crate::exit::usage;
use crate::{
    BamCommand, Command, EvalArgs, GenArgs, InitArgs, LinesearchArgs, MergeArgs, NormArgs, RunArgs, SliceArgs,
    TaskVectorArgs, ToylabCommand, TrainArgs, VarianceArgs, SCHEMA_VERSION,
};

pub struct Report {
    pub json: Value,
    pub human: String,
}

impl Report {
    pub fn to_json(&self, command: &str) -> Value {
        let mut doc = json!({
            "schema_version": SCHEMA_VERSION,
            "command": command,
            "ok": true,
        });
        if let (Some(doc), Value::Object(body)) = (doc.as_object_mut(), &self.json) {
            doc.extend(body.clone());
        }
        doc
    }
}

pub fn dispatch(cmd: &Command) -> (&'static str, Result<Report>) {
    match cmd {
        Command::Merge(a) => ("merge", merge(a)),
        Command::Slice(a) => ("slice", slice(a)),
        Command::Bam(BamCommand::Run(a)) => ("bam run", bam_run(a)),
        Command::Bam(BamCommand::Linesearch(a)) | Command::Linesearch(a) => ("linesearch", linesearch(a)),
        Command::Eval(a) => ("eval", eval(a)),
        Command::TaskVector(a) => ("task-vector", task_vector_cmd(a)),
        Command::Norm(a) => ("norm", norm(a)),
        Command::Toylab(ToylabCommand::Gen(a)) => ("toylab gen", toylab_gen(a)),
        Command::Toylab(ToylabCommand::Init(a)) => ("toylab init", toylab_init(a)),
        Command::Toylab(ToylabCommand::Train(a)) => ("toylab train", toylab_train(a)),
        Command::Toylab(ToylabCommand::Eval(a)) => ("toylab eval", eval(a)),
        Command::Toylab(ToylabCommand::Variance(a)) => ("toylab variance", toylab_variance(a)),
    }
}

fn load(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).with_context(|| format!("loading {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn merge(a: &MergeArgs) -> Result<Report> {
    let method = MergeMethod::from(a.method);
    if method != MergeMethod::Linear && a.base.is_none() {
        return Err(usage(format!("--method {method} requires --base")));
    }
    let base = a.base.as_deref().map(load).transpose()?;
    let operands = a.operands.iter().map(|p| load(p)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Checkpoint> = operands.iter().collect();
    let plan = MergePlan::new(method).with_coefficient(a.coeff).with_angle_scope(a.angle_scope.into());
    let merged = merge_k(&refs, base.as_ref(), &plan)?;
    save_checkpoint(&merged, &a.out)?;

    let fallbacks = recorded_fallbacks(&merged);
    let change = base.as_ref().map(|b| weight_change_norm(&merged, b)).transpose()?;
    let composition = merged.metadata.get(keys::COMPOSITION).cloned();
    let warnings = merged.metadata.get(keys::WARNINGS).cloned();
    let hash = merged.content_hash();

    let mut human = format!("wrote {} ({} tensors)\nhash {hash}\n", a.out.display(), merged.len());
    if let Some(c) = &composition {
        writeln!(human, "composition {c}")?;
    }
    writeln!(human, "fallbacks {}", fallbacks.len())?;
    for t in &fallbacks {
        writeln!(human, "  {t}")?;
    }
    if let Some(w) = &warnings {
        writeln!(human, "warnings {w}")?;
    }
    if let Some(ch) = &change {
        writeln!(human, "weight change vs base {:.6e}", ch.global)?;
    }
    Ok(Report {
        json: json!({
            "out": a.out,
            "hash": hash,
            "method": method,
            "c": a.coeff,
            "operands": a.operands.len(),
            "composition": composition,
            "fallback_count": fallbacks.len(),
            "fallback_tensors": fallbacks,
            "warnings": warnings,
            "weight_change_vs_base": change.map(|c| c.global),
        }),
        human,
    })
}

fn slice(a: &SliceArgs) -> Result<Report> {
    let mix = MixtureSpec::load(&a.mix)?;
    let corpus = CorpusIndex::load_dir(&a.corpus)?;
    let probabilities = compute_probabilities(&mix)?;
    let mode = SliceMode::from(a.mode);
    let plan = match mode {
        SliceMode::Iid => plan_iid(&mix, &corpus, a.n, a.seed)?,
        SliceMode::Curriculum => plan_curriculum(&mix, &corpus, a.n, a.seed, a.replay_light, a.replay_heavy)?,
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    plan.save(a.out.join("plan.json"))?;
    let mut slices = Vec::new();
    let mut human = String::from("dataset probabilities\n");
    for (name, p) in &probabilities {
        writeln!(human, "  {name:<24} {:>8.4}%", 100.0 * p)?;
    }
    writeln!(human, "slice  docs  tokens  replay")?;
    for i in 1..=plan.n_slices {
        let manifest = a.out.join(manifest_name(i));
        let report = materialize_slice(&plan, i, &corpus, &manifest, None)?;
        let spec = plan.slice(i)?;
        writeln!(human, "{i:>5} {:>5} {:>7} {:>7.4}", report.documents, report.tokens, spec.replay_fraction)?;
        slices.push(json!({
            "index": i,
            "manifest": manifest,
            "documents": report.documents,
            "tokens": report.tokens,
            "replay_tokens": spec.replay_tokens,
            "replay_fraction": spec.replay_fraction,
        }));
    }
    if !plan.unused.is_empty() {
        writeln!(human, "unused replay instances {}", plan.unused.len())?;
    }
    Ok(Report {
        json: json!({
            "plan": a.out.join("plan.json"),
            "mode": mode,
            "probabilities": probabilities,
            "slices": slices,
            "unused_instances": plan.unused.len(),
        }),
        human,
    })
}

fn bam_run(a: &RunArgs) -> Result<Report> {
    let mut plan = BamPlan::load(&a.plan)?;
    if let Some(dir) = &a.checkpoint_dir {
        plan.checkpoint_dir = dir.clone();
    }
    let trainer = ToyTrainer::new();
    let outcome =
        run_bam_with(&plan, &trainer, RunOptions { resume: a.resume, stop_after_merges: a.stop_after_merges })?;
    let final_hash = outcome.checkpoint.content_hash();
    let merges: Vec<Value> = outcome
        .ledger
        .records
        .iter()
        .filter_map(|r| match r {
            LedgerRecord::Merge { iteration, after_position, hash, weight_change_from_original, eval, .. } => {
                Some(json!({
                    "iteration": iteration,
                    "after_position": after_position,
                    "hash": hash,
                    "weight_change_from_original": weight_change_from_original,
                    "eval": eval,
                }))
            }
            _ => None,
        })
        .collect();

    let mut human = format!(
        "{} after {} merges\nledger {}\ncheckpoint {}\nhash {final_hash}\n",
        if outcome.complete { "complete" } else { "stopped" },
        merges.len(),
        outcome.ledger_path.display(),
        outcome.checkpoint_path.display(),
    );
    for m in &merges {
        writeln!(
            human,
            "  merge {} after slice position {}: |Δθ| from base {:.6}",
            m["iteration"], m["after_position"], m["weight_change_from_original"]
        )?;
    }
    Ok(Report {
        json: json!({
            "complete": outcome.complete,
            "ledger": outcome.ledger_path,
            "checkpoint": outcome.checkpoint_path,
            "final_hash": final_hash,
            "merges": merges,
        }),
        human,
    })
}

fn linesearch(a: &LinesearchArgs) -> Result<Report> {
    let base = load(&a.base)?;
    let branches = a.branches.iter().map(|p| load(p)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Checkpoint> = branches.iter().collect();
    let method = MergeMethod::from(a.method);
    let scope = a.angle_scope.into();
    let trainer = ToyTrainer::new();
    let result = line_search_c(&refs, &base, method, scope, &a.grid, &a.eval_set, &trainer)?;
    if let Some(out) = &a.out {
        let plan = MergePlan::new(method).with_coefficient(result.best_c).with_angle_scope(scope);
        save_checkpoint(&merge_k(&refs, Some(&base), &plan)?, out)?;
    }
    let mut human = String::from("     c        nll  accuracy\n");
    for row in &result.table {
        let mark = if row.c == result.best_c { " *" } else { "" };
        writeln!(human, "{:>6.3} {:>10.6} {:>9.4}{mark}", row.c, row.nll, row.accuracy)?;
    }
    writeln!(human, "best c = {} (nll {:.6})", result.best_c, result.best_nll)?;
    Ok(Report {
        json: json!({
            "method": method,
            "best_c": result.best_c,
            "best_nll": result.best_nll,
            "table": result.table,
            "out": a.out,
        }),
        human,
    })
}

fn eval(a: &EvalArgs) -> Result<Report> {
    let ckpt = load(&a.ckpt)?;
    let samples = load_samples(&a.eval_set)?;
    let m = toylab::evaluate(&ckpt, &samples)?;
    Ok(Report {
        json: json!({ "nll": m.nll, "accuracy": m.accuracy, "samples": samples.len() }),
        human: format!("nll {:.6}\naccuracy {:.4}\nsamples {}\n", m.nll, m.accuracy, samples.len()),
    })
}

fn task_vector_cmd(a: &TaskVectorArgs) -> Result<Report> {
    let finetuned = load(&a.finetuned)?;
    let base = load(&a.base)?;
    let tv = task_vector(&finetuned, &base)?;
    save_checkpoint(&tv.to_checkpoint(), &a.out)?;
    let norm = tv.norm();
    Ok(Report {
        json: json!({ "out": a.out, "base_ref": tv.base_ref, "norm": norm }),
        human: format!("wrote {}\nbase {}\nnorm {norm:.6e}\n", a.out.display(), tv.base_ref),
    })
}

fn norm(a: &NormArgs) -> Result<Report> {
    let change = weight_change_norm(&load(&a.after)?, &load(&a.before)?)?;
    let mut human = format!("global {:.6e}\n", change.global);
    for (name, n) in &change.per_tensor {
        writeln!(human, "  {name:<32} {n:.6e}")?;
    }
    Ok(Report { json: json!({ "global": change.global, "per_tensor": change.per_tensor }), human })
}

fn toylab_gen(a: &GenArgs) -> Result<Report> {
    let mut cfg: ExperimentConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.n {
        cfg.n = n;
    }
    if let Some(k) = a.k {
        cfg.k = k;
    }
    if let Some(m) = a.method {
        cfg.merge_method = m.into();
    }
    if let Some(m) = a.slice_mode {
        cfg.slice_mode = m.into();
    }
    if let Some(s) = a.steps {
        cfg.optimizer.total_steps = s;
    }
    if cfg.k == 0 || cfg.k > cfg.n {
        return Err(usage(format!("--k must satisfy 1 <= K <= N, got K={} N={}", cfg.k, cfg.n)));
    }
    let exp = prepare_experiment(&cfg, &a.out)?;
    let plan_path = a.out.join("plan.json");
    let config_path = a.out.join("experiment.json");
    fs::write(&config_path, serde_json::to_string_pretty(&cfg)?)
        .with_context(|| format!("writing {}", config_path.display()))?;
    let source = toylab::evaluate(&exp.base, &exp.pair.source_eval)?;
    let target = toylab::evaluate(&exp.base, &exp.pair.target_eval)?;
    Ok(Report {
        json: json!({
            "plan": plan_path,
            "config": config_path,
            "base": exp.base_path,
            "base_hash": exp.base.content_hash(),
            "source_eval": exp.source_eval,
            "target_eval": exp.target_eval,
            "cross_domain_accuracy": exp.pair.cross_domain_accuracy,
            "base_source": source,
            "base_target": target,
        }),
        human: format!(
            "plan {}\nbase {}\nsource-only model on target: accuracy {:.3}\nbase model: source nll {:.4} acc {:.3}, target nll {:.4} acc {:.3}\n",
            plan_path.display(),
            exp.base_path.display(),
            exp.pair.cross_domain_accuracy,
            source.nll,
            source.accuracy,
            target.nll,
            target.accuracy
        ),
    })
}

fn toylab_init(a: &InitArgs) -> Result<Report> {
    let model = ToyModel::init(a.arch.into(), a.input_dim, a.hidden_dim, a.n_classes, a.seed);
    let ckpt = model.to_checkpoint();
    save_checkpoint(&ckpt, &a.out)?;
    let hash = ckpt.content_hash();
    Ok(Report {
        json: json!({ "out": a.out, "hash": hash, "parameters": model.n_params() }),
        human: format!("wrote {} ({} parameters)\nhash {hash}\n", a.out.display(), model.n_params()),
    })
}

fn toylab_train(a: &TrainArgs) -> Result<Report> {
    let mut cfg: OptimizerConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => OptimizerConfig::default(),
    };
    if let Some(s) = a.steps {
        cfg.total_steps = s;
    }
    if let Some(lr) = a.max_lr {
        cfg.max_lr = lr;
    }
    if a.half_lr {
        cfg = cfg.half_lr();
    }
    let base = load(&a.base)?;
    let samples = match (&a.manifest, &a.data) {
        (Some(m), _) => ToyTrainer::new().slice_samples(&bam_core::slice::load_manifest(m)?)?,
        (None, Some(d)) => load_samples(d)?,
        (None, None) => return Err(usage("one of --manifest or --data is required")),
    };
    let trained = toylab::train(&base, &samples, &cfg, a.seed)?;
    save_checkpoint(&trained, &a.out)?;
    let hash = trained.content_hash();
    let change = weight_change_norm(&trained, &base)?.global;
    Ok(Report {
        json: json!({
            "out": a.out,
            "hash": hash,
            "steps": cfg.total_steps,
            "max_lr": cfg.max_lr,
            "samples": samples.len(),
            "weight_change": change,
        }),
        human: format!(
            "wrote {}\nhash {hash}\n{} steps on {} samples, |Δθ| = {change:.6}\n",
            a.out.display(),
            cfg.total_steps,
            samples.len()
        ),
    })
}

fn toylab_variance(a: &VarianceArgs) -> Result<Report> {
    let ensemble = NoisyTaskVectorEnsemble::new(a.d, a.sigma, a.k, a.trials, a.seed);
    let r = variance_reduction_trial(&ensemble, a.k)?;
    let mut human = format!("K = {}  ratio {:.4}  expected 1/sqrt(K) = {:.4}\n", r.k, r.ratio, r.expected);
    if r.zero_noise {
        human.push_str("sigma = 0: ratio defined as 1\n");
    }
    Ok(Report { json: serde_json::to_value(r)?, human })
}
