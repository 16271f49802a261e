//! Run configuration: a JSON file with `generate`, `train` and `analysis`
//! sections plus input paths, overridden key by key with `--kebab-case`
//! flags.

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, ArgMatches};
use log::warn;
use rcgrl::synth::GenConfig;
use rcgrl::trainer::{Mode, TrainConfig};
use rcgrl::Split;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Bad configuration or usage (exit code 2).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Split used by eval / analyze.
    pub split: Split,
    /// Undirected edges the pruning search may remove per graph.
    pub budget: usize,
    pub u_values: Vec<usize>,
    /// `compare` trains seeds `0..seeds`.
    pub seeds: u64,
    pub modes: Vec<Mode>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            split: Split::Test,
            budget: 5,
            u_values: vec![0, 1, 2, 3, 4],
            seeds: 5,
            modes: vec![Mode::Rcgrl, Mode::Erm],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub generate: GenConfig,
    pub train: TrainConfig,
    pub analysis: AnalysisConfig,
    /// Dataset file (JSON Lines).
    pub data: Option<PathBuf>,
    /// Checkpoint to evaluate or analyse.
    pub checkpoint: Option<PathBuf>,
}

/// Top-level keys that are plain paths rather than sections.
pub const PATH_KEYS: [&str; 2] = ["data", "checkpoint"];

fn defaults() -> Value {
    serde_json::to_value(RunConfig::default()).expect("default config serialises")
}

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

fn arg_id(section: &str, key: &str) -> String {
    format!("{section}.{key}")
}

/// Whether a default value can be given on the command line.
fn flaggable(v: &Value) -> bool {
    match v {
        Value::Array(items) => items.iter().all(|x| !x.is_object() && !x.is_array()),
        Value::Object(_) => false,
        _ => true,
    }
}

fn show(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Array(items) if flaggable(v) => items.iter().map(show).collect::<Vec<_>>().join(","),
        Value::Array(items) => {
            let names: Vec<String> = items
                .iter()
                .map(|x| x.get("name").map_or_else(|| x.to_string(), show))
                .collect();
            format!("[{}]", names.join(", "))
        }
        Value::Null => "none".into(),
        other => other.to_string(),
    }
}

/// One flag per key of `section`; keys that only a config file can hold
/// are listed in the returned footer instead.
pub fn section_flags(section: &str) -> (Vec<Arg>, Vec<String>) {
    let all = defaults();
    let mut args = Vec::new();
    let mut file_only = Vec::new();
    for (key, value) in all[section].as_object().expect("section is an object") {
        if !flaggable(value) {
            file_only.push(format!("  {section}.{key} [default: {}]", show(value)));
            continue;
        }
        let mut arg = Arg::new(arg_id(section, key))
            .long(flag_name(key))
            .value_name("VALUE")
            .help(format!("{section}.{key} [default: {}]", show(value)));
        if value.is_boolean() {
            arg = arg.num_args(0..=1).default_missing_value("true");
        }
        if section == "generate" && key == "n_graphs" {
            arg = arg.visible_alias("n");
        }
        args.push(arg.action(ArgAction::Set));
    }
    (args, file_only)
}

pub fn path_flag(key: &str, help: &str) -> Arg {
    Arg::new(key.to_string())
        .long(flag_name(key))
        .value_name("PATH")
        .help(format!("{help} (config key `{key}`)"))
        .action(ArgAction::Set)
}

/// Parses a flag value using the default's JSON type as a guide: JSON
/// literals pass through, comma lists become arrays, anything else is a
/// string.
fn parse_flag(raw: &str, default: &Value) -> Value {
    let text = if default.is_array() && !raw.trim_start().starts_with('[') {
        format!("[{raw}]")
    } else {
        raw.to_string()
    };
    if let Ok(v) = serde_json::from_str::<Value>(&text) {
        if !(default.is_array() && v.as_array().is_some_and(|a| a.is_empty()) && !raw.is_empty()) {
            return v;
        }
    }
    if default.is_array() {
        Value::Array(raw.split(',').map(|s| Value::String(s.trim().to_string())).collect())
    } else {
        Value::String(raw.to_string())
    }
}

fn read_file(path: &Path) -> anyhow::Result<Map<String, Value>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| config_error(format!("cannot read config file {}: {e}", path.display())))?;
    match serde_json::from_str::<Value>(&text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(config_error(format!("config file {} is not a JSON object", path.display()))),
        Err(e) => Err(config_error(format!("config file {}: {e}", path.display()))),
    }
}

/// Layers defaults, the optional config file and the flags of `sections`
/// (plus the path keys) into one validated config. Flags win over the
/// file, with a warning when they disagree.
pub fn resolve(matches: &ArgMatches, sections: &[&str]) -> anyhow::Result<RunConfig> {
    let mut root = defaults();
    let file = match matches.get_one::<String>("config") {
        Some(p) => read_file(Path::new(p))?,
        None => Map::new(),
    };
    let root_map = root.as_object_mut().unwrap();
    for (key, value) in &file {
        match (root_map.get_mut(key), value) {
            (Some(Value::Object(section)), Value::Object(given)) => {
                for (k, v) in given {
                    section.insert(k.clone(), v.clone());
                }
            }
            _ => {
                root_map.insert(key.clone(), value.clone());
            }
        }
    }

    let base = defaults();
    for section in sections {
        for (key, default) in base[*section].as_object().unwrap() {
            let Some(raw) = matches.try_get_one::<String>(&arg_id(section, key)).ok().flatten() else {
                continue;
            };
            let value = parse_flag(raw, default);
            if let Some(old) = file.get(*section).and_then(|s| s.get(key)) {
                if old != &value {
                    warn!(
                        "--{} {} overrides {section}.{key} = {} from the config file",
                        flag_name(key),
                        show(&value),
                        show(old)
                    );
                }
            }
            root[*section][key] = value;
        }
    }
    for key in PATH_KEYS {
        if let Some(raw) = matches.try_get_one::<String>(key).ok().flatten() {
            if let Some(old) = file.get(key).and_then(Value::as_str) {
                if old != raw {
                    warn!("--{key} {raw} overrides {key} = {old} from the config file");
                }
            }
            root[key] = Value::String(raw.clone());
        }
    }

    let cfg: RunConfig = serde_json::from_value(root).map_err(|e| config_error(format!("invalid config: {e}")))?;
    cfg.train.validate()?;
    cfg.generate.validate()?;
    Ok(cfg)
}
