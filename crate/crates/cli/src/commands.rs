use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::ArgMatches;
use log::info;
use rcgrl::analysis::{self, evaluate, granger_prune, sweep_svg, sweep_u, ConfounderRatio, SweepRow};
use rcgrl::synth::generate;
use rcgrl::trainer::{checkpoint, restore, save_history, Trainer};
use rcgrl::{load_dataset, save_dataset, Dataset, Mode, Split};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{config_error, resolve, RunConfig};

/// Output directory of one invocation.
struct RunDir {
    path: PathBuf,
}

impl RunDir {
    /// `<root>/<command>-<config hash>-<UTC timestamp>`, unless `--run-dir`
    /// names the directory outright.
    fn create(m: &ArgMatches, command: &str, cfg: &RunConfig) -> Result<Self> {
        let text = serde_json::to_string_pretty(cfg)?;
        let path = match m.get_one::<String>("run-dir") {
            Some(p) => PathBuf::from(p),
            None => {
                let root = std::env::var_os("RCGRL_RUNS_DIR").map_or_else(|| PathBuf::from("runs"), PathBuf::from);
                let hash = Sha256::digest(format!("{command}\n{text}").as_bytes());
                let hex: String = hash.iter().take(6).map(|b| format!("{b:02x}")).collect();
                let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
                root.join(format!("{command}-{hex}-{stamp}"))
            }
        };
        std::fs::create_dir_all(&path).with_context(|| format!("creating run directory {}", path.display()))?;
        std::fs::write(path.join("config.json"), text + "\n")?;
        info!("writing to {}", path.display());
        Ok(RunDir { path })
    }

    fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }
}

fn require<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| config_error(format!("missing `{key}`: pass --{key} or set it in the config file")))
}

fn load(cfg: &RunConfig) -> Result<Dataset> {
    Ok(load_dataset(require(&cfg.data, "data")?)?)
}

fn report(command: &str, dir: &RunDir, extra: serde_json::Value) {
    let mut line = json!({ "command": command, "run_dir": dir.path });
    if let (Some(obj), serde_json::Value::Object(more)) = (line.as_object_mut(), extra) {
        obj.extend(more);
    }
    println!("{line}");
}

pub fn generate_cmd(m: &ArgMatches) -> Result<()> {
    let cfg = resolve(m, &["generate"])?;
    let dir = RunDir::create(m, "generate", &cfg)?;
    let ds = generate(&cfg.generate)?;
    let out = m.get_one::<String>("out").map_or_else(|| dir.file("dataset.jsonl"), PathBuf::from);
    save_dataset(&ds, &out)?;
    let table = rcgrl::synth::bias_report(&ds)?;
    let rows: Vec<_> = table
        .iter()
        .map(|((split, class, conf), n)| json!({"split": split, "class": class, "confounder": conf, "count": n}))
        .collect();
    std::fs::write(dir.file("bias_report.json"), serde_json::to_string_pretty(&rows)? + "\n")?;
    report("generate", &dir, json!({ "dataset": out, "graphs": ds.graphs.len() }));
    Ok(())
}

pub fn train_cmd(m: &ArgMatches) -> Result<()> {
    let cfg = resolve(m, &["train"])?;
    let ds = load(&cfg)?;
    let dir = RunDir::create(m, "train", &cfg)?;
    let mut trainer = Trainer::new(&ds, cfg.train.clone())?;
    let history = trainer.run()?;
    save_history(&history, dir.file("metrics.csv"))?;
    let state = trainer.into_state();
    checkpoint(&cfg.train, &state, dir.file("checkpoint.json"))?;
    report(
        "train",
        &dir,
        json!({
            "epochs": state.epoch,
            "best_epoch": state.best_epoch,
            "best_val_accuracy": state.best_val,
            "checkpoint": dir.file("checkpoint.json"),
        }),
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalRow {
    split: Split,
    total: usize,
    correct: usize,
    accuracy: f64,
    loss: f64,
    roc_auc: Option<f64>,
    kept_confounder_fraction: Option<f64>,
}

pub fn eval_cmd(m: &ArgMatches) -> Result<()> {
    let cfg = resolve(m, &["analysis"])?;
    let ck = restore(require(&cfg.checkpoint, "checkpoint")?)?;
    let ds = load(&cfg)?;
    let dir = RunDir::create(m, "eval", &cfg)?;
    let graphs = ds.split(cfg.analysis.split);
    let rec = evaluate(&ck.state.best_params, &ck.config.pipeline(), &graphs, ds.num_classes)?;
    let row = EvalRow {
        split: cfg.analysis.split,
        total: rec.total,
        correct: rec.correct,
        accuracy: rec.accuracy,
        loss: rec.loss,
        roc_auc: rec.roc_auc,
        kept_confounder_fraction: rec.confounder_ratio,
    };
    analysis::save_csv(std::slice::from_ref(&row), dir.file("metrics.csv"))?;
    report("eval", &dir, serde_json::to_value(&row)?);
    Ok(())
}

#[derive(Serialize)]
struct ConfounderRow {
    split: Split,
    drop_fraction: f64,
    random_baseline: f64,
    kept_confounder_fraction: f64,
    causal_recall: f64,
    removal_precision: f64,
    causal_edges: usize,
    causal_kept: usize,
    noncausal_edges: usize,
    noncausal_kept: usize,
}

pub fn analyze_cmd(m: &ArgMatches) -> Result<()> {
    let cfg = resolve(m, &["analysis"])?;
    let ck = restore(require(&cfg.checkpoint, "checkpoint")?)?;
    let ds = load(&cfg)?;
    let dir = RunDir::create(m, "analyze", &cfg)?;
    let graphs = ds.split(cfg.analysis.split);
    let params = &ck.state.best_params;
    let mut summary = json!({});

    let has_masks = !graphs.is_empty() && graphs.iter().all(|g| g.causal_edge_mask.is_some());
    if ck.config.mode == Mode::Rcgrl && has_masks {
        let p = ck.config.drop_fraction;
        let ratio = analysis::confounder_ratio(&params.phi, &graphs, p)?;
        let ConfounderRatio {
            kept_confounder_fraction,
            causal_recall,
            removal_precision,
            causal_edges,
            causal_kept,
            noncausal_edges,
            noncausal_kept,
        } = ratio;
        let row = ConfounderRow {
            split: cfg.analysis.split,
            drop_fraction: p,
            random_baseline: 1.0 - p,
            kept_confounder_fraction,
            causal_recall,
            removal_precision,
            causal_edges,
            causal_kept,
            noncausal_edges,
            noncausal_kept,
        };
        analysis::save_csv(std::slice::from_ref(&row), dir.file("confounder.csv"))?;
        summary["kept_confounder_fraction"] = json!(ratio.kept_confounder_fraction);
        summary["causal_recall"] = json!(ratio.causal_recall);
        summary["removal_precision"] = json!(ratio.removal_precision);
    }

    let prune = granger_prune(&params.theta, &graphs, cfg.analysis.budget)?;
    analysis::save_csv(&prune.rows, dir.file("granger.csv"))?;
    summary["complete_accuracy"] = json!(prune.complete_accuracy);
    summary["pruned_accuracy"] = json!(prune.pruned_accuracy);
    report("analyze", &dir, summary);
    Ok(())
}

pub fn sweep_cmd(m: &ArgMatches) -> Result<()> {
    let cfg = resolve(m, &["train", "analysis"])?;
    let ds = load(&cfg)?;
    let dir = RunDir::create(m, "sweep-u", &cfg)?;
    let rows = sweep_u(&ds, &cfg.train, &cfg.analysis.u_values)?;
    analysis::save_csv(&rows, dir.file("sweep.csv"))?;
    std::fs::write(dir.file("sweep.svg"), sweep_svg(&rows))?;
    report("sweep-u", &dir, json!({ "rows": rows }));
    Ok(())
}

pub fn compare_cmd(m: &ArgMatches) -> Result<()> {
    let cfg = resolve(m, &["train", "analysis"])?;
    if cfg.analysis.seeds == 0 {
        return Err(config_error("--seeds must be at least 1"));
    }
    let ds = load(&cfg)?;
    let dir = RunDir::create(m, "compare", &cfg)?;
    let seeds: Vec<u64> = (0..cfg.analysis.seeds).collect();
    let (summary, runs) = analysis::compare(&ds, &cfg.train, &cfg.analysis.modes, &seeds)?;
    analysis::save_csv(&summary, dir.file("compare.csv"))?;
    analysis::save_csv(&runs, dir.file("runs.csv"))?;
    println!("{:<8} {:>6} {:>16}", "mode", "runs", "test accuracy");
    for row in &summary {
        println!(
            "{:<8} {:>6} {:>16}",
            row.mode.as_str(),
            row.runs,
            format!("{:.2}±{:.2}", 100.0 * row.mean, 100.0 * row.std)
        );
    }
    report("compare", &dir, json!({ "summary": summary }));
    Ok(())
}

pub fn plot_cmd(m: &ArgMatches) -> Result<()> {
    let input = m.get_one::<String>("input").expect("required by clap");
    let mut reader = csv::Reader::from_path(input).with_context(|| format!("reading {input}"))?;
    let rows: Vec<SweepRow> = reader
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| rcgrl::Error::Csv(e))?;
    if rows.is_empty() {
        return Err(rcgrl::Error::Data(format!("{input} has no rows")).into());
    }
    let out = match m.get_one::<String>("out") {
        Some(p) => PathBuf::from(p),
        None => Path::new(input).with_extension("svg"),
    };
    std::fs::write(&out, sweep_svg(&rows)).with_context(|| format!("writing {}", out.display()))?;
    println!("{}", json!({ "command": "plot", "output": out }));
    Ok(())
}
