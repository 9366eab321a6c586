mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use serde_json::json;

use config::{cli, write_atomic, Config};
use lmn_core::combiner::{
    checkpoint_combiner, checkpoint_theta, combiner_checkpoint, combiner_train, CombinerTrainConfig,
    RnnCombiner,
};
use lmn_core::data::{
    gen_label_episodes, gen_label_stream, gen_repeat_markov, load_jsonl_with_vocab, save_jsonl,
    ClusterSpec, DatasetKind, DatasetMeta, EpisodeDataset, GeneratorSpec,
};
use lmn_core::eval::ablate;
use lmn_core::memory::{MemoryConfig, WritePolicy};
use lmn_core::numcore::AdamConfig;
use lmn_core::online::{
    default_theta_grid, format_trace, run_stream, select_fixed_theta, Combiners, Mode, RunOptions,
};
use lmn_core::pcn::{
    pcn_load, pcn_save, pcn_train, read_checkpoint, write_checkpoint_atomic, PcnMode, PcnModel,
    PcnShape, PcnTrainConfig,
};
use lmn_core::selfcheck::run_gradcheck_suites;

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let result = Config::resolve(name, sub).and_then(dispatch);
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cfg: Config) -> Result<ExitCode> {
    match cfg.command.as_str() {
        "gen-data" => gen_data(cfg),
        "train-pcn" => train_pcn(cfg),
        "train-combiner" => train_combiner_cmd(cfg),
        "run-online" => run_online(cfg),
        "ablate" => ablate_cmd(cfg),
        "gradcheck" => gradcheck(cfg),
        other => bail!("unknown command `{other}`"),
    }
    .map(|()| ExitCode::SUCCESS)
    .or_else(|e| match e.downcast_ref::<GradcheckFailed>() {
        Some(_) => Ok(ExitCode::from(1)),
        None => Err(e),
    })
}

#[derive(Debug)]
struct GradcheckFailed;

impl std::fmt::Display for GradcheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("gradient check failed")
    }
}

impl std::error::Error for GradcheckFailed {}

fn prepare_out(cfg: &Config) -> Result<PathBuf> {
    let out = cfg.out_dir();
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out)
}

fn echo_config(cfg: &Config, out: &Path) -> Result<()> {
    write_atomic(&out.join("config.resolved"), cfg.to_text().as_bytes())
}

fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

fn save_dataset(ds: &EpisodeDataset, path: &Path) -> Result<()> {
    save_jsonl(ds, path).with_context(|| format!("writing {}", path.display()))?;
    DatasetMeta::of(ds).save(&meta_path(path))?;
    Ok(())
}

/// Loads a dataset, using its `.meta.json` sidecar for the label table and
/// seen/unseen split when present.
fn load_dataset(path: &Path) -> Result<EpisodeDataset> {
    let meta_file = meta_path(path);
    let ds = if meta_file.exists() {
        let meta = DatasetMeta::load(&meta_file)
            .with_context(|| format!("reading {}", meta_file.display()))?;
        let ds = load_jsonl_with_vocab(path, meta.vocab()?)
            .with_context(|| format!("reading {}", path.display()))?;
        ensure!(
            ds.num_labels() == meta.labels.len(),
            "{} uses labels missing from {}",
            path.display(),
            meta_file.display()
        );
        meta.annotate(ds)?
    } else {
        load_jsonl_with_vocab(path, Default::default())
            .with_context(|| format!("reading {}", path.display()))?
    };
    Ok(ds)
}

fn generator_spec(cfg: &Config) -> Result<GeneratorSpec> {
    let cluster = ClusterSpec {
        dim: cfg.parse("cluster_dim")?,
        spread: cfg.parse("cluster_spread")?,
        center_scale: cfg.parse("center_scale")?,
        min_separation: cfg.parse("min_separation")?,
    };
    Ok(GeneratorSpec {
        seed: cfg.seed()?,
        num_labels: cfg.parse("num_labels")?,
        episodes: cfg.parse("episodes")?,
        min_len: cfg.parse("min_len")?,
        max_len: cfg.parse("max_len")?,
        repeat_bias: cfg.parse("repeat_bias")?,
        seen: cfg.parse("seen")?,
        unseen: cfg.parse("unseen")?,
        train_len: cfg.parse("train_len")?,
        test_episodes: cfg.parse("test_episodes")?,
        picks: cfg.parse("picks")?,
        draws: cfg.parse("draws")?,
        test_unseen_only: cfg.flag("test_unseen_only")?,
        cluster,
    })
}

fn gen_data(cfg: Config) -> Result<()> {
    let spec = generator_spec(&cfg)?;
    let val_episodes: usize = cfg.parse("val_episodes")?;
    let out = prepare_out(&cfg)?;
    let mut written = Vec::new();
    match cfg.require("task")? {
        "repeat_markov" => {
            let split = |seed: u64, episodes: usize| {
                gen_repeat_markov(&GeneratorSpec {
                    seed,
                    episodes,
                    ..spec.clone()
                })
            };
            written.push(("train", split(spec.seed, spec.episodes)?));
            written.push(("test", split(spec.seed + 1, spec.test_episodes)?));
            if val_episodes > 0 {
                written.push(("val", split(spec.seed + 2, val_episodes)?));
            }
        }
        "label_stream" => {
            let stream = gen_label_stream(&spec)?;
            written.push(("train", stream.train));
            written.push(("test", stream.test));
            if val_episodes > 0 {
                written.push(("val", gen_label_episodes(&spec, val_episodes, 0)?));
            }
        }
        t => bail!("config key `task`: unknown task `{t}` (repeat_markov | label_stream)"),
    }
    for (name, ds) in &written {
        let path = out.join(format!("{name}.jsonl"));
        save_dataset(ds, &path)?;
        println!("{name}: {} episodes, {} steps -> {}", ds.episodes().len(), ds.total_steps(), path.display());
    }
    echo_config(&cfg, &out)
}

fn train_pcn(mut cfg: Config) -> Result<()> {
    let seed = cfg.seed()?;
    let out = prepare_out(&cfg)?;
    let train_path = pin_path(&mut cfg, "train", "train.jsonl");
    let ds = load_dataset(&train_path)?;
    let shape = match ds.kind() {
        DatasetKind::TokenSequences => PcnShape {
            mode: PcnMode::Stateful,
            num_classes: ds.num_labels(),
            input_dim: cfg.parse("embed_dim")?,
            hidden_dim: cfg.parse("hidden_dim")?,
        },
        DatasetKind::LabeledVectors => PcnShape {
            mode: PcnMode::Stateless,
            num_classes: ds.num_labels(),
            input_dim: ds.feature_dim().context("dataset has no feature vectors")?,
            hidden_dim: cfg.parse("hidden_dim")?,
        },
    };
    let mut model = PcnModel::<f64>::new(shape, seed, &ds.unseen_labels())?;
    let train_cfg = PcnTrainConfig {
        epochs: cfg.parse("epochs")?,
        adam: AdamConfig {
            lr: cfg.parse("lr")?,
            ..AdamConfig::default()
        },
        seed,
        batch_size: cfg.parse("batch_size")?,
    };
    let report = pcn_train(&mut model, &ds, &train_cfg)?;
    let ckpt = out.join("pcn.ckpt");
    pcn_save(&model, &ckpt)?;
    let summary = json!({
        "initial_loss": report.initial_loss,
        "epoch_losses": report.epoch_losses,
        "checksum": model.checksum(),
    });
    write_atomic(&out.join("train_pcn.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    println!(
        "trained {} epochs, loss {:.6} -> {:.6}; wrote {}",
        report.epoch_losses.len(),
        report.initial_loss,
        report.epoch_losses.last().copied().unwrap_or(report.initial_loss),
        ckpt.display()
    );
    echo_config(&cfg, &out)
}

fn memory_config(cfg: &Config) -> Result<MemoryConfig> {
    let mem = MemoryConfig {
        capacity: cfg.parse("capacity")?,
        lambda: cfg.parse("lambda")?,
        delta: cfg.parse("delta")?,
        margin: cfg.parse("margin")?,
        decay: cfg.parse("decay")?,
        global_capacity: cfg.parse_opt("global_capacity")?,
    };
    mem.validate()?;
    Ok(mem)
}

fn policy(cfg: &Config) -> Result<WritePolicy> {
    WritePolicy::parse(cfg.require("policy")?).context("config key `policy`")
}

fn train_combiner_cmd(mut cfg: Config) -> Result<()> {
    let seed = cfg.seed()?;
    let out = prepare_out(&cfg)?;
    let pcn = load_pcn(&pin_path(&mut cfg, "pcn", "pcn.ckpt"))?;
    let ds = load_dataset(&pin_path(&mut cfg, "train", "val.jsonl"))?;
    let mem = memory_config(&cfg)?;
    let policy = policy(&cfg)?;
    let threads: usize = cfg.parse("threads")?;
    let theta = match cfg.parse_opt::<f64>("theta")? {
        Some(t) => t,
        None => {
            let opts = RunOptions {
                memory: mem,
                policy,
                threads,
                seed,
                ..RunOptions::default()
            };
            let (t, scores) = select_fixed_theta(&pcn, &ds, &opts, &default_theta_grid())?;
            for (g, lp) in scores {
                println!("theta {g:.2}: logppl {lp:.6}");
            }
            cfg.set("theta", t.to_string());
            t
        }
    };
    let init_bias = match cfg.parse_opt::<f64>("init_bias")? {
        Some(b) => b,
        None => (theta / (1.0 - theta)).ln(),
    };
    let train_cfg = CombinerTrainConfig {
        epochs: cfg.parse("epochs")?,
        adam: AdamConfig {
            lr: cfg.parse("lr")?,
            ..AdamConfig::default()
        },
        seed,
        state_dim: cfg.parse("state_dim")?,
        init_bias,
        policy,
    };
    let (comb, report) = combiner_train(&pcn, &mem, &ds, &train_cfg)?;
    let ckpt = out.join("combiner.ckpt");
    write_checkpoint_atomic(&combiner_checkpoint(&pcn, Some(&comb), theta)?, &ckpt)?;
    let summary = json!({ "theta_fixed": theta, "init_bias": init_bias, "epoch_losses": report.epoch_losses });
    write_atomic(&out.join("train_combiner.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    println!("theta_fixed {theta}; combiner losses {:?}; wrote {}", report.epoch_losses, ckpt.display());
    echo_config(&cfg, &out)
}

/// Resolves an input path and records it in the echoed configuration.
fn pin_path(cfg: &mut Config, key: &str, fallback: &str) -> PathBuf {
    let p = cfg.path_or(key, fallback);
    cfg.set(key, p.to_string_lossy());
    p
}

fn load_pcn(path: &Path) -> Result<PcnModel<f64>> {
    pcn_load(path).with_context(|| format!("reading {}", path.display()))
}

struct Loaded {
    pcn: PcnModel<f64>,
    rnn: Option<RnnCombiner<f64>>,
    theta: f64,
    ds: EpisodeDataset,
    opts: RunOptions,
}

fn load_run(cfg: &mut Config) -> Result<Loaded> {
    let seed = cfg.seed()?;
    let pcn = load_pcn(&pin_path(cfg, "pcn", "pcn.ckpt"))?;
    let (rnn, stored_theta) = match cfg.raw("combiner") {
        Some(p) => {
            let ck = read_checkpoint(Path::new(p)).with_context(|| format!("reading {p}"))?;
            ensure!(
                ck.to_pcn::<f64>()?.checksum() == pcn.checksum(),
                "combiner checkpoint {p} was trained against a different PCN"
            );
            let rnn = checkpoint_combiner::<f64>(&ck)?;
            if let Some(c) = &rnn {
                ensure!(c.embed_dim() == pcn.hidden_dim(), "combiner width does not match the PCN");
            }
            (rnn, checkpoint_theta(&ck)?)
        }
        None => (None, None),
    };
    let theta = cfg.parse_opt("theta")?.or(stored_theta).unwrap_or(0.5);
    let ds = load_dataset(&pin_path(cfg, "test", "test.jsonl"))?;
    let opts = RunOptions {
        memory: memory_config(cfg)?,
        policy: policy(cfg)?,
        persist_memory: cfg.flag("persist_memory")?,
        threads: cfg.parse("threads")?,
        seed,
        trained_rows: cfg.flag("trained_rows_only")?.then(|| ds.seen_mask()),
        second_occurrence_only: cfg.flag("second_occurrence_only")?,
    };
    Ok(Loaded {
        pcn,
        rnn,
        theta,
        ds,
        opts,
    })
}

fn run_online(mut cfg: Config) -> Result<()> {
    let mode = Mode::parse(cfg.require("mode")?).context("config key `mode`")?;
    let l = load_run(&mut cfg)?;
    if mode == Mode::Lmn && l.rnn.is_none() {
        bail!("mode lmn needs a trained combiner (key `combiner`)");
    }
    cfg.set("theta", l.theta.to_string());
    let out = prepare_out(&cfg)?;
    let combiners = Combiners {
        fixed_theta: l.theta,
        rnn: l.rnn.as_ref(),
    };
    let res = run_stream(&l.pcn, &combiners, &l.ds, mode, &l.opts)?;
    write_atomic(&out.join("trace.tsv"), format_trace(&res.traces).as_bytes())?;
    let text = res.report.to_text();
    write_atomic(&out.join("report.txt"), text.as_bytes())?;
    write_atomic(
        &out.join("report.json"),
        serde_json::to_string_pretty(&res.report)?.as_bytes(),
    )?;
    print!("{text}");
    echo_config(&cfg, &out)
}

fn ablate_cmd(mut cfg: Config) -> Result<()> {
    let l = load_run(&mut cfg)?;
    let modes = match cfg.raw("modes") {
        Some(list) => list
            .split(',')
            .map(|m| Mode::parse(m.trim()))
            .collect::<lmn_core::Result<Vec<_>>>()
            .context("config key `modes`")?,
        None => Mode::ALL
            .into_iter()
            .filter(|&m| m != Mode::Lmn || l.rnn.is_some())
            .collect(),
    };
    if modes.contains(&Mode::Lmn) && l.rnn.is_none() {
        bail!("mode lmn needs a trained combiner (key `combiner`)");
    }
    let policies = cfg
        .require("policies")?
        .split(',')
        .map(|p| WritePolicy::parse(p.trim()))
        .collect::<lmn_core::Result<Vec<_>>>()
        .context("config key `policies`")?;
    cfg.set("theta", l.theta.to_string());
    cfg.set("modes", modes.iter().map(|m| m.name()).collect::<Vec<_>>().join(","));
    let out = prepare_out(&cfg)?;
    let combiners = Combiners {
        fixed_theta: l.theta,
        rnn: l.rnn.as_ref(),
    };
    let table = ablate(&l.pcn, &combiners, &l.ds, &modes, &policies, &l.opts)?;
    let text = table.to_text();
    write_atomic(&out.join("table.txt"), text.as_bytes())?;
    write_atomic(&out.join("table.csv"), table.to_csv().as_bytes())?;
    write_atomic(&out.join("table.json"), serde_json::to_string_pretty(&table)?.as_bytes())?;
    print!("{text}");
    echo_config(&cfg, &out)
}

fn gradcheck(cfg: Config) -> Result<()> {
    let seed = cfg.parse_opt("seed")?.unwrap_or(0);
    let results = run_gradcheck_suites(
        seed,
        cfg.parse("instances")?,
        cfg.parse("eps")?,
        cfg.parse("tol")?,
    )?;
    let mut ok = true;
    for r in &results {
        println!(
            "{:<14} instances {:>3}  max_rel_error {:.3e}  {}",
            r.name,
            r.instances,
            r.max_rel_error,
            if r.passed() { "ok" } else { "FAIL" }
        );
        if !r.passed() {
            println!("  worst: {}", r.worst);
            ok = false;
        }
    }
    if ok {
        Ok(())
    } else {
        Err(GradcheckFailed.into())
    }
}
