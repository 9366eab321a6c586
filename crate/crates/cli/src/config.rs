use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Arg, ArgAction, ArgMatches, Command};

/// One configuration key. `default: None` means unset unless given.
#[derive(Debug, Clone, Copy)]
pub struct Key {
    pub name: &'static str,
    pub default: Option<&'static str>,
    pub flag: bool,
    pub help: &'static str,
}

const fn key(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key { name, default: Some(default), flag: false, help }
}

const fn opt(name: &'static str, help: &'static str) -> Key {
    Key { name, default: None, flag: false, help }
}

const fn flag(name: &'static str, help: &'static str) -> Key {
    Key { name, default: Some("false"), flag: true, help }
}

const COMMON: &[Key] = &[
    opt("seed", "random seed"),
    opt("out", "output directory (default: $LMN_OUT or ./lmn_out)"),
    key("threads", "1", "worker threads over episodes"),
];

const MEMORY: &[Key] = &[
    key("capacity", "1", "memory cells per label (T)"),
    key("lambda", "10", "kernel sharpness"),
    key("delta", "0.5", "read-weight exponent"),
    key("margin", "0.5", "write margin in log-probability units"),
    key("decay", "0.99", "alpha decay on merge"),
    opt("global_capacity", "total cells for the global LRU policy (default T*V)"),
    key("policy", "label_partitioned", "label_partitioned | write_always_global_lru"),
];

const GEN_DATA: &[Key] = &[
    key("task", "repeat_markov", "repeat_markov | label_stream"),
    key("num_labels", "500", "vocabulary or class count"),
    key("episodes", "200", "training episodes"),
    key("test_episodes", "50", "test episodes"),
    key("val_episodes", "0", "validation episodes (0 = none)"),
    key("min_len", "80", "shortest token episode"),
    key("max_len", "120", "longest token episode"),
    key("repeat_bias", "0.7", "probability of drawing from the home set"),
    key("seen", "25", "seen classes"),
    key("unseen", "10", "unseen classes"),
    key("train_len", "20", "draws per training episode"),
    key("picks", "5", "classes per test episode"),
    key("draws", "10", "draws per test episode"),
    flag("test_unseen_only", "test episodes use unseen classes only"),
    key("cluster_dim", "16", "feature dimension"),
    key("cluster_spread", "0.25", "per-coordinate cluster std"),
    key("center_scale", "1.0", "per-coordinate center std"),
    key("min_separation", "4.0", "minimum center distance in spreads"),
];

const TRAIN_PCN: &[Key] = &[
    opt("train", "training dataset (default <out>/train.jsonl)"),
    key("embed_dim", "16", "token embedding width (stateful)"),
    key("hidden_dim", "32", "hidden width d"),
    key("epochs", "20", "training epochs"),
    key("lr", "0.001", "Adam learning rate"),
    key("batch_size", "16", "examples per update (stateless)"),
];

const TRAIN_COMBINER: &[Key] = &[
    opt("pcn", "PCN checkpoint (default <out>/pcn.ckpt)"),
    opt("train", "combiner training episodes (default <out>/val.jsonl)"),
    key("epochs", "5", "training epochs"),
    key("lr", "0.01", "Adam learning rate"),
    key("state_dim", "8", "gate recurrent state size k"),
    opt("theta", "fixed theta (default: selected on the training episodes)"),
    opt("init_bias", "initial gate bias (default logit(theta))"),
];

const RUN: &[Key] = &[
    opt("pcn", "PCN checkpoint (default <out>/pcn.ckpt)"),
    opt("combiner", "combiner checkpoint"),
    opt("test", "evaluation dataset (default <out>/test.jsonl)"),
    opt("theta", "fixed theta (default: from the combiner checkpoint, else 0.5)"),
    flag("persist_memory", "keep memory across episodes"),
    flag("second_occurrence_only", "count only second occurrences"),
    flag("trained_rows_only", "pcn_only argmax over trained rows only"),
];

const RUN_ONLINE: &[Key] = &[key("mode", "lmn_fixed", "pcn_only | memory_only | lmn_fixed | lmn")];

const ABLATE: &[Key] = &[
    opt("modes", "comma-separated modes (default: all available)"),
    key("policies", "label_partitioned,write_always_global_lru", "comma-separated write policies"),
];

const GRADCHECK: &[Key] = &[
    key("instances", "20", "random instances per suite"),
    key("eps", "1e-5", "finite-difference step"),
    key("tol", "1e-4", "maximum relative error"),
];

pub const COMMANDS: &[(&str, &str)] = &[
    ("gen-data", "generate synthetic datasets"),
    ("train-pcn", "train the primary classification network"),
    ("train-combiner", "select fixed theta and train the recurrent combiner"),
    ("run-online", "run the online protocol and write a trace and report"),
    ("ablate", "compare modes and write policies"),
    ("gradcheck", "check analytic gradients against finite differences"),
];

pub fn keys_for(command: &str) -> Vec<Key> {
    let groups: &[&[Key]] = match command {
        "gen-data" => &[COMMON, GEN_DATA],
        "train-pcn" => &[COMMON, TRAIN_PCN],
        "train-combiner" => &[COMMON, MEMORY, TRAIN_COMBINER],
        "run-online" => &[COMMON, MEMORY, RUN, RUN_ONLINE],
        "ablate" => &[COMMON, MEMORY, RUN, ABLATE],
        "gradcheck" => &[COMMON, GRADCHECK],
        _ => &[],
    };
    groups.iter().flat_map(|g| g.iter().copied()).collect()
}

fn kebab(name: &str) -> String {
    name.replace('_', "-")
}

pub fn cli() -> Command {
    let mut app = Command::new("lmn")
        .about("Labeled memory network experiments")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for &(name, about) in COMMANDS {
        let mut sub = Command::new(name).about(about).arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("key = value configuration file"),
        );
        for k in keys_for(name) {
            let mut arg = Arg::new(k.name).long(kebab(k.name)).help(k.help);
            arg = if k.flag {
                arg.num_args(0..=1)
                    .default_missing_value("true")
                    .value_name("BOOL")
                    .action(ArgAction::Set)
            } else {
                arg.value_name("VALUE")
            };
            sub = sub.arg(arg);
        }
        app = app.subcommand(sub);
    }
    app
}

/// Fully resolved key/value configuration of one command.
#[derive(Debug, Clone)]
pub struct Config {
    pub command: String,
    values: BTreeMap<String, String>,
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("config line {}: expected `key = value`", i + 1))?;
        let k = k.trim();
        if k.is_empty() {
            bail!("config line {}: empty key", i + 1);
        }
        out.push((k.to_owned(), v.trim().to_owned()));
    }
    Ok(out)
}

impl Config {
    /// Defaults, then the config file, then flags.
    pub fn resolve(command: &str, m: &ArgMatches) -> Result<Self> {
        let keys = keys_for(command);
        let mut values = BTreeMap::new();
        for k in &keys {
            if let Some(d) = k.default {
                values.insert(k.name.to_owned(), d.to_owned());
            }
        }
        if let Some(path) = m.get_one::<String>("config") {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config file {path}"))?;
            for (k, v) in parse_config_text(&text)? {
                if k == "command" {
                    if v != command {
                        bail!("config key `command`: file is for `{v}`, not `{command}`");
                    }
                    continue;
                }
                if !keys.iter().any(|x| x.name == k) {
                    bail!("config key `{k}` is not valid for `{command}`");
                }
                values.insert(k, v);
            }
        }
        for k in &keys {
            if let Some(v) = m.get_one::<String>(k.name) {
                values.insert(k.name.to_owned(), v.clone());
            }
        }
        if !values.contains_key("out") {
            let out = std::env::var("LMN_OUT").unwrap_or_else(|_| "lmn_out".to_owned());
            values.insert("out".to_owned(), out);
        }
        Ok(Self {
            command: command.to_owned(),
            values,
        })
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str).filter(|v| !v.is_empty())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.raw(key)
            .ok_or_else(|| anyhow!("missing required key `{key}` (--{})", kebab(key)))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.require(key)?;
        v.parse()
            .map_err(|e| anyhow!("config key `{key}`: cannot parse `{v}`: {e}"))
    }

    pub fn parse_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(_) => self.parse(key).map(Some),
        }
    }

    pub fn flag(&self, key: &str) -> Result<bool> {
        match self.raw(key).unwrap_or("false") {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            v => bail!("config key `{key}`: expected true or false, got `{v}`"),
        }
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse("seed")
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.raw("out").unwrap_or("lmn_out"))
    }

    /// `key` as a path, or `<out>/<fallback>`.
    pub fn path_or(&self, key: &str, fallback: &str) -> PathBuf {
        self.raw(key)
            .map(PathBuf::from)
            .unwrap_or_else(|| self.out_dir().join(fallback))
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("command = {}\n", self.command);
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Pins a derived value so the echoed configuration replays the run.
    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.values.insert(key.to_owned(), value.into());
    }
}

pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    use std::io::Write;
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .with_context(|| format!("creating a temporary file in {}", dir.display()))?;
    tmp.write_all(contents)?;
    tmp.persist(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blank_lines() {
        let kv = parse_config_text("# top\n\nseed = 3 # inline\n  lr=0.5\n").unwrap();
        assert_eq!(kv, vec![("seed".into(), "3".into()), ("lr".into(), "0.5".into())]);
        assert!(parse_config_text("novalue\n").is_err());
    }

    #[test]
    fn flags_override_file_and_file_overrides_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.cfg");
        std::fs::write(&f, "epochs = 7\nlr = 0.1\n").unwrap();
        let m = cli()
            .try_get_matches_from(["lmn", "train-pcn", "--config", f.to_str().unwrap(), "--lr", "0.2"])
            .unwrap();
        let (_, sub) = m.subcommand().unwrap();
        let c = Config::resolve("train-pcn", sub).unwrap();
        assert_eq!(c.parse::<usize>("epochs").unwrap(), 7);
        assert_eq!(c.parse::<f64>("lr").unwrap(), 0.2);
        assert_eq!(c.parse::<usize>("hidden_dim").unwrap(), 32);
    }

    #[test]
    fn foreign_file_key_is_rejected_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.cfg");
        std::fs::write(&f, "modes = lmn\n").unwrap();
        let m = cli()
            .try_get_matches_from(["lmn", "train-pcn", "--config", f.to_str().unwrap()])
            .unwrap();
        let err = Config::resolve("train-pcn", m.subcommand().unwrap().1).unwrap_err();
        assert!(err.to_string().contains("`modes`"));
    }

    #[test]
    fn bare_boolean_flag_means_true() {
        let m = cli()
            .try_get_matches_from(["lmn", "run-online", "--persist-memory", "--seed", "1"])
            .unwrap();
        let c = Config::resolve("run-online", m.subcommand().unwrap().1).unwrap();
        assert!(c.flag("persist_memory").unwrap());
        assert!(!c.flag("second_occurrence_only").unwrap());
    }
}
