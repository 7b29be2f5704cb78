use std::path::{Path, PathBuf};

use log::info;
use taskdistill::distill::{
    kmin, run_distillation, split_setup, DistillError, DistillReport, MetaEpochStats, MetaSetup, SyntheticDataset,
};
use taskdistill::env::CartPole;
use taskdistill::eval::{
    export_dataset_view, kshot_eval, make_distribution, policy_eval, random_baseline as uniform_baseline,
    EvalError, EvalReport, Variant,
};
use taskdistill::ppo::{reward_curve_csv, train_rl_baseline, EpochStats, PpoError};

use crate::artifacts::{load_manifest, Run, Timing};
use crate::config::RunConfig;
use crate::CliError;

fn numerical(e: DistillError) -> CliError {
    match e {
        DistillError::InvalidConfig(m) => CliError::Config(m),
        DistillError::Dataset(d) => CliError::Input(d.to_string()),
        other => CliError::Numerical(other.to_string()),
    }
}

fn eval_error(e: EvalError) -> CliError {
    match e {
        EvalError::Distill(d) => numerical(d),
        EvalError::Env(e) => CliError::Config(e.to_string()),
        other => CliError::Config(other.to_string()),
    }
}

fn ppo_error(e: PpoError) -> CliError {
    match e {
        PpoError::InvalidHyperparams(m) => CliError::Config(m),
        other => CliError::Numerical(other.to_string()),
    }
}

fn init_workers(cfg: &RunConfig) {
    // a second call in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build_global();
}

fn curve_csv(curve: &[MetaEpochStats]) -> String {
    let mut out = String::from(MetaEpochStats::CSV_HEADER);
    out.push('\n');
    for s in curve {
        out.push_str(&s.csv_row());
        out.push('\n');
    }
    out
}

fn json<T: serde::Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s.into_bytes()
}

fn read_dataset(path: &Path) -> Result<SyntheticDataset, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    SyntheticDataset::from_json(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn setup_for(cfg: &RunConfig, seed: u64) -> Result<MetaSetup, CliError> {
    match cfg.distill.split_layer {
        Some(l) => split_setup(&cfg.env, l, seed).map_err(numerical),
        None => Ok(MetaSetup::plain(&cfg.env, make_distribution(Variant::Lambda, &cfg.env))),
    }
}

fn distill_timing(report: &DistillReport, seconds: f64) -> Timing {
    let iterations = report.meta_epochs_run;
    Timing {
        total_seconds: seconds,
        iterations,
        seconds_per_iteration: seconds / iterations.max(1) as f64,
        datapoints: report.curve.iter().map(|s| s.transitions).sum(),
        models: 0,
        seconds_per_model: 0.0,
    }
}

/// `distill` and `encoder-rollback`.
pub fn distill(cfg: &RunConfig, command: &str) -> Result<(), CliError> {
    cfg.validate()?;
    init_workers(cfg);
    let mut run = Run::open(command, cfg)?;
    let dc = cfg.distill_config();
    run.seed("distill", dc.seed);
    run.start()?;
    let setup = setup_for(cfg, dc.seed)?;
    let mut curve = Vec::new();
    let result = run_distillation(&cfg.env, setup, &dc, |s, _| {
        if s.epoch % 50 == 0 {
            info!(
                "meta-epoch {:5}  reward {:7.2}  moving average {:7.2}  inner lr {:.4}",
                s.epoch, s.mean_reward, s.moving_average, s.inner_lr
            );
        }
        curve.push(s.clone());
        true
    });
    match result {
        Ok(out) => {
            let timing = distill_timing(&out.report, run.elapsed());
            run.write("dataset.json", out.dataset.to_json().as_bytes())?;
            run.write("reward_curve.csv", out.report.curve_csv().as_bytes())?;
            run.write("distill_report.json", &json(&out.report))?;
            info!(
                "best moving-average reward {:.2} at meta-epoch {}; {} meta-epochs run",
                out.report.best_window_reward, out.report.best_epoch, out.report.meta_epochs_run
            );
            if out.report.did_not_learn {
                run.finish("did-not-learn", None, Some(timing))?;
                return Err(CliError::DidNotLearn {
                    best: out.report.best_window_reward,
                    random: out.report.random_baseline,
                });
            }
            run.finish("ok", None, Some(timing))
        }
        Err(e) => {
            run.write("reward_curve.partial.csv", curve_csv(&curve).as_bytes())?;
            let err = numerical(e);
            let status = if matches!(err, CliError::Numerical(_)) {
                "numerical-failure"
            } else {
                "failed"
            };
            run.finish(status, Some(err.to_string()), None)?;
            Err(err)
        }
    }
}

fn write_eval(run: &mut Run, prefix: &str, report: &EvalReport) -> Result<(), CliError> {
    run.write(&format!("{prefix}.csv"), report.to_csv().as_bytes())?;
    run.write(&format!("{prefix}_summary.txt"), report.summary().as_bytes())?;
    Ok(())
}

pub fn eval(cfg: &RunConfig, dataset_path: &Path) -> Result<(), CliError> {
    cfg.validate()?;
    init_workers(cfg);
    let dataset = read_dataset(dataset_path)?;
    let mut run = Run::open("eval", cfg)?;
    run.input("dataset", dataset_path);
    let protocol = cfg.eval_protocol();
    run.seed("eval", protocol.seed);
    run.start()?;
    match kshot_eval(&dataset, &protocol) {
        Ok(report) => {
            let seconds = run.elapsed();
            write_eval(&mut run, "eval_report", &report)?;
            info!("{}", report.summary().trim_end().replace('\n', "; "));
            run.finish(
                "ok",
                None,
                Some(Timing {
                    total_seconds: seconds,
                    iterations: 0,
                    seconds_per_iteration: 0.0,
                    datapoints: report.rewards.iter().flatten().map(|&r| r as usize).sum(),
                    models: report.n_agents,
                    seconds_per_model: seconds / report.n_agents as f64,
                }),
            )
        }
        Err(e) => {
            let err = eval_error(e);
            run.finish("failed", Some(err.to_string()), None)?;
            Err(err)
        }
    }
}

pub fn rl_baseline(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.validate()?;
    init_workers(cfg);
    let mut run = Run::open("rl-baseline", cfg)?;
    let seed = run.seed("rl-baseline", cfg.stage_seed("rl-baseline", 0));
    let eval_seed = run.seed("rl-baseline-eval", cfg.stage_seed("rl-baseline-eval", 0));
    run.start()?;
    let env = CartPole::new(cfg.env.clone()).map_err(|e| CliError::Config(e.to_string()))?;
    let actor = make_distribution(Variant::Lambda, &cfg.env)
        .with_seed(cfg.stage_seed("rl-actor", 0))
        .sample(0);
    let b = &cfg.baseline;
    let mut checkpoints: Vec<(usize, f64)> = Vec::new();
    let mut eval_failure = None;
    let result = train_rl_baseline(&env, actor, &cfg.ppo, b.epochs, seed, |s: &EpochStats, policy| {
        if s.epoch % 50 == 0 {
            info!("epoch {:5}  reward {:7.2}", s.epoch, s.mean_reward);
        }
        if b.eval_every == 0 || (s.epoch + 1) % b.eval_every != 0 {
            return true;
        }
        match policy_eval(&env, policy, b.eval_episodes, eval_seed) {
            Ok(r) => {
                info!("checkpoint after epoch {}: evaluation mean {:.2}", s.epoch, r.mean);
                checkpoints.push((s.epoch, r.mean));
                r.mean < b.target_reward
            }
            Err(e) => {
                eval_failure = Some(e);
                false
            }
        }
    });
    let outcome = result.map_err(ppo_error).and_then(|r| match eval_failure.take() {
        Some(e) => Err(eval_error(e)),
        None => Ok(r),
    });
    let trained = match outcome {
        Ok(t) => t,
        Err(err) => {
            run.finish("failed", Some(err.to_string()), None)?;
            return Err(err);
        }
    };
    let report = policy_eval(&env, &trained.actor, b.eval_episodes, eval_seed).map_err(eval_error)?;
    let seconds = run.elapsed();
    run.write("baseline_curve.csv", reward_curve_csv(&trained.curve).as_bytes())?;
    if b.eval_every > 0 {
        let mut csv = String::from("epoch,eval_mean_reward\n");
        for (e, m) in &checkpoints {
            csv.push_str(&format!("{e},{m}\n"));
        }
        run.write("baseline_checkpoints.csv", csv.as_bytes())?;
    }
    write_eval(&mut run, "baseline_eval", &report)?;
    run.write("baseline_policy.json", &json(&trained.actor))?;
    info!("final policy evaluation mean {:.2} ± {:.2}", report.mean, report.std);
    let iterations = trained.curve.len();
    run.finish(
        "ok",
        None,
        Some(Timing {
            total_seconds: seconds,
            iterations,
            seconds_per_iteration: seconds / iterations.max(1) as f64,
            datapoints: trained.curve.iter().map(|s| s.transitions).sum(),
            models: 1,
            seconds_per_model: seconds,
        }),
    )
}

pub fn random_baseline(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.validate()?;
    let mut run = Run::open("random-baseline", cfg)?;
    let seed = run.seed("random-baseline", cfg.stage_seed("random-baseline", 0));
    run.start()?;
    let report = uniform_baseline(&cfg.env, cfg.eval.random_episodes, seed).map_err(eval_error)?;
    let mut csv = String::from("episode,reward\n");
    for (i, r) in report.rewards[0].iter().enumerate() {
        csv.push_str(&format!("{i},{r}\n"));
    }
    run.write("random_baseline_episodes.csv", csv.as_bytes())?;
    run.write("random_baseline_summary.txt", report.summary().as_bytes())?;
    info!("random agent mean {:.2} ± {:.2}", report.mean, report.std);
    run.finish("ok", None, None)
}

pub fn kmin_sweep(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.validate()?;
    init_workers(cfg);
    let mut run = Run::open("kmin-sweep", cfg)?;
    let protocol = cfg.eval_protocol();
    run.seed("eval", protocol.seed);
    for &k in &cfg.sweep.k_values {
        run.seed(&format!("distill-k{k}"), cfg.stage_seed("distill", k as u64));
    }
    run.start()?;
    let predicted = kmin(cfg.env.n_actions()).map_err(numerical)?;
    let mut csv = String::from(
        "k,predicted_kmin,mean_reward,std_reward,success,converged,did_not_learn,meta_epochs,best_window_reward,status\n",
    );
    let mut successes = Vec::new();
    for &k in &cfg.sweep.k_values {
        let mut dc = cfg.distill_config();
        dc.k = k;
        dc.seed = cfg.stage_seed("distill", k as u64);
        info!("distilling k = {k}");
        let row = run_distillation(&cfg.env, setup_for(cfg, dc.seed)?, &dc, |_, _| true)
            .map_err(|e| e.to_string())
            .and_then(|out| {
                let report = kshot_eval(&out.dataset, &protocol).map_err(|e| e.to_string())?;
                Ok((out, report))
            });
        match row {
            Ok((out, report)) => {
                run.write(&format!("dataset_k{k}.json"), out.dataset.to_json().as_bytes())?;
                let success = report.mean >= cfg.sweep.success_reward;
                if success {
                    successes.push(k);
                }
                info!("k = {k}: k-shot mean {:.2}", report.mean);
                csv.push_str(&format!(
                    "{k},{predicted},{},{},{success},{},{},{},{},ok\n",
                    report.mean,
                    report.std,
                    out.report.converged,
                    out.report.did_not_learn,
                    out.report.meta_epochs_run,
                    out.report.best_window_reward
                ));
            }
            Err(msg) => {
                log::warn!("k = {k} failed: {msg}");
                let msg = msg.replace([',', '\n'], ";");
                csv.push_str(&format!("{k},{predicted},,,false,,,,,failed: {msg}\n"));
            }
        }
    }
    run.write("kmin_sweep.csv", csv.as_bytes())?;
    let empirical = successes.iter().min().map_or("none".to_string(), usize::to_string);
    let summary = format!(
        "dimensions: {}\naction classes: {}\npredicted k_min: {predicted}\nempirical k_min (mean >= {}): {empirical}\n",
        cfg.env.n_dims,
        cfg.env.n_actions(),
        cfg.sweep.success_reward
    );
    run.write("kmin_sweep_summary.txt", summary.as_bytes())?;
    run.finish("ok", None, None)
}

pub fn export_view(cfg: &RunConfig, dataset_path: &Path) -> Result<(), CliError> {
    let dataset = read_dataset(dataset_path)?;
    let mut run = Run::open("export-view", cfg)?;
    run.input("dataset", dataset_path);
    run.start()?;
    run.write("dataset_view.csv", export_dataset_view(&dataset).as_bytes())?;
    run.finish("ok", None, None)
}

pub fn cost_report(cfg: &RunConfig, manifests: &[PathBuf]) -> Result<(), CliError> {
    let mut loaded = Vec::new();
    for p in manifests {
        let m = load_manifest(p)?;
        if m.timing.is_none() {
            return Err(CliError::Input(format!("{}: manifest has no timing record", p.display())));
        }
        loaded.push(m);
    }
    let mut run = Run::open("cost-report", cfg)?;
    for (i, p) in manifests.iter().enumerate() {
        run.input(&format!("manifest{i}"), p);
    }
    run.start()?;
    let timing_of = |cmd: &str| {
        loaded
            .iter()
            .find(|m| m.command == cmd)
            .and_then(|m| m.timing.clone())
    };
    let rl_per_model = timing_of("rl-baseline").map(|t| t.seconds_per_model);
    let kshot_per_model = timing_of("eval").map(|t| t.seconds_per_model);
    let mut csv = String::from(
        "kind,seconds_per_iteration,iterations,datapoints,total_seconds,kshot_seconds_per_model,break_even_models\n",
    );
    for m in &loaded {
        let t = m.timing.as_ref().expect("checked above");
        let kshot = if m.command == "eval" {
            t.seconds_per_model.to_string()
        } else {
            String::new()
        };
        let break_even = match (m.command.as_str(), rl_per_model, kshot_per_model) {
            ("distill" | "encoder-rollback", Some(rl), Some(ks)) => {
                let saved = rl - ks;
                if saved > 0.0 {
                    (t.total_seconds / saved).max(0.0).to_string()
                } else {
                    "inf".to_string()
                }
            }
            _ => String::new(),
        };
        csv.push_str(&format!(
            "{},{},{},{},{},{kshot},{break_even}\n",
            m.command, t.seconds_per_iteration, t.iterations, t.datapoints, t.total_seconds
        ));
    }
    run.write("cost_report.csv", csv.as_bytes())?;
    run.finish("ok", None, None)
}
