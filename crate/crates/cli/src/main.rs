use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use tale_core::eval::{accuracy, speedup};
use tale_core::persist::{self, TrajectoryFile};
use tale_core::probe::{deletion_mi_delta, mi_profile, ProbeConfig};
use tale_core::report;
use tale_core::search::{self, Clock, Fingerprint, ModelScorer, RunOptions, TaleConfig, ThresholdMode};
use tale_core::select::{self, SelectionReport, SpeedupSource};
use tale_core::task::{generate, TaskDataset, TaskKind, TaskSpec};
use tale_core::train::{self, RegimeSettings, TrainConfig};
use tale_core::{Exec, LayerMask, ModelConfig, TransformerModel};

#[derive(Parser)]
#[command(name = "tale", version, about = "Task-aware greedy layer elimination on toy transformers")]
struct Cli {
    /// Seed for task generation, initialization and training.
    #[arg(long, global = true, env = "TALE_SEED", default_value_t = 0)]
    seed: u64,
    /// Worker threads (1 runs everything sequentially).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a toy model on a synthetic task.
    Train {
        #[arg(long)]
        task: TaskKind,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run greedy layer elimination and write the trajectory.
    Prune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        task: TaskKind,
        #[arg(long, default_value_t = 0.0)]
        epsilon: f64,
        #[arg(long, default_value_t = ThresholdMode::RelativeCurrent)]
        mode: ThresholdMode,
        #[arg(long)]
        out: PathBuf,
        /// Per-iteration CSV; defaults to the trajectory path with a .csv extension.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Continue the trajectory already stored at --out.
        #[arg(long)]
        resume: bool,
        /// Stop after this many new iterations.
        #[arg(long)]
        max_iterations: Option<usize>,
        /// Also record wall-clock speedups (not byte-reproducible).
        #[arg(long)]
        measure_speedup: bool,
    },
    /// Pick operating points from a trajectory.
    Select {
        #[arg(long)]
        traj: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long)]
        use_measured_speedup: bool,
        /// JSON report path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Per-layer logit-lens accuracy curve.
    Lens {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        task: TaskKind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Probe-estimated mutual information at every layer boundary.
    Mi {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        task: TaskKind,
        #[arg(long)]
        mask: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        probe: ProbeArgs,
    },
    /// MI at layer ℓ+1 before and after deleting layer ℓ.
    MiDelta {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        task: TaskKind,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        probe: ProbeArgs,
    },
    /// The six prune/finetune regimes.
    Regimes {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        task: TaskKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        epsilon: f64,
        #[arg(long, default_value_t = ThresholdMode::RelativeCurrent)]
        mode: ThresholdMode,
        /// TOML file whose [train] table configures finetuning.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Layers deleted in at least a fraction of the given trajectories.
    Common {
        #[arg(long, value_delimiter = ',', required = true)]
        trajs: Vec<PathBuf>,
        #[arg(long, default_value_t = 0.75)]
        fraction: f64,
        #[arg(long, value_enum, default_value_t = Selection::Best)]
        selection: Selection,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-draw one block at half the initialization scale.
    InjectNoise {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        layer: usize,
        /// Defaults to --seed + 1.
        #[arg(long)]
        noise_seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy of a (masked) model on one split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        task: TaskKind,
        #[arg(long)]
        mask: Option<String>,
        #[arg(long, value_enum, default_value_t = SplitName::Test)]
        split: SplitName,
    },
    /// Dump a generated split as `tokens<TAB>label` lines.
    Dataset {
        #[arg(long)]
        task: TaskKind,
        #[arg(long, value_enum, default_value_t = SplitName::Train)]
        split: SplitName,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args, Clone, Copy)]
struct ProbeArgs {
    #[arg(long, default_value_t = ProbeConfig::default().reg)]
    reg: f64,
    #[arg(long, default_value_t = ProbeConfig::default().iterations)]
    iterations: usize,
}

impl From<ProbeArgs> for ProbeConfig {
    fn from(a: ProbeArgs) -> Self {
        ProbeConfig {
            reg: a.reg,
            iterations: a.iterations,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Selection {
    Best,
    Bsba,
    Final,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ModelSection {
    n_layers: usize,
    d_model: usize,
    n_heads: usize,
    d_ff: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let c = train::reference_model_config(&TaskSpec::default_for(TaskKind::CopyLast, 0), train::FIXTURE_LAYERS, 0);
        ModelSection {
            n_layers: c.n_layers,
            d_model: c.d_model,
            n_heads: c.n_heads,
            d_ff: c.d_ff,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    model: ModelSection,
    train: TrainConfig,
}

fn read_config(path: Option<&Path>) -> Result<ConfigFile> {
    let Some(path) = path else { return Ok(ConfigFile::default()) };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).map_err(|e| tale_core::Error::Config(format!("{}: {e}", path.display())).into())
}

fn dataset(kind: TaskKind, seed: u64) -> Result<TaskDataset> {
    Ok(generate(&TaskSpec::default_for(kind, seed))?)
}

fn load_model(path: &Path) -> Result<(TransformerModel, String)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let model = persist::model_from_bytes(&bytes).with_context(|| format!("loading {}", path.display()))?;
    Ok((model, persist::sha256_hex(&bytes)))
}

fn write(path: &Path, content: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, content).with_context(|| format!("writing {}", path.display()))
}

fn json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn emit(out: Option<&Path>, content: &str) -> Result<()> {
    match out {
        Some(p) => write(p, content),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn parse_mask(s: Option<&str>, n_layers: usize) -> Result<LayerMask> {
    Ok(s.map_or_else(|| Ok(LayerMask::empty()), |s| LayerMask::parse(s, n_layers))?)
}

/// Record timestamps come from `SOURCE_DATE_EPOCH` (seconds) when set.
fn clock() -> Result<Clock> {
    match std::env::var("SOURCE_DATE_EPOCH") {
        Ok(s) => {
            let secs: u64 = s
                .trim()
                .parse()
                .map_err(|_| tale_core::Error::Input(format!("SOURCE_DATE_EPOCH={s:?} is not an integer")))?;
            Ok(Clock::Fixed(secs * 1000))
        }
        Err(_) => Ok(Clock::System),
    }
}

fn check_task(model: &TransformerModel, ds: &TaskDataset) -> Result<()> {
    let spec = &ds.spec;
    let cfg = model.config();
    if cfg.vocab_size != spec.vocab_size() || cfg.max_seq_len < spec.seq_len {
        return Err(tale_core::Error::Input(format!(
            "model (vocab {}, max_seq_len {}) does not fit task {} (vocab {}, seq_len {})",
            cfg.vocab_size,
            cfg.max_seq_len,
            spec.kind,
            spec.vocab_size(),
            spec.seq_len
        ))
        .into());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn prune(
    seed: u64,
    exec: Exec,
    model_path: &Path,
    task: TaskKind,
    epsilon: f64,
    mode: ThresholdMode,
    out: &Path,
    csv: Option<&Path>,
    resume: bool,
    max_iterations: Option<usize>,
    measure: bool,
) -> Result<()> {
    let (model, model_hash) = load_model(model_path)?;
    let ds = dataset(task, seed)?;
    check_task(&model, &ds)?;
    let fp = Fingerprint {
        model_hash,
        task_hash: ds.spec.fingerprint(),
    };
    let scorer = ModelScorer {
        model: &model,
        split: &ds.val,
        spec: &ds.spec,
    };
    let opts = RunOptions {
        exec,
        clock: clock()?,
        max_iterations,
    };
    let save = |t: &search::PruneTrajectory| -> tale_core::Result<()> {
        persist::save_trajectory(&TrajectoryFile::new(t, &ds.spec), out)
    };
    let mut traj = if resume {
        let file = persist::load_trajectory(out).with_context(|| format!("resuming {}", out.display()))?;
        if file.header.epsilon != epsilon || file.header.mode != mode {
            bail!(tale_core::Error::Input(format!(
                "stored run used epsilon {} mode {}, not epsilon {epsilon} mode {mode}",
                file.header.epsilon, file.header.mode
            )));
        }
        let traj = file.trajectory();
        if traj.fingerprint != fp {
            bail!(tale_core::Error::Integrity(
                "trajectory was recorded for a different model or task".into()
            ));
        }
        traj
    } else {
        let t = search::start(&scorer, fp, TaleConfig { epsilon, mode }, opts.clock)?;
        save(&t)?;
        t
    };
    search::run(&mut traj, &scorer, &opts, save)?;
    if measure {
        for r in &mut traj.records {
            let m = speedup(&model, &r.mask, &ds.val.subset(0..ds.val.len().min(64)), 3, 1)?;
            r.speedup_measured = Some(m.measured);
        }
        save(&traj)?;
    }
    let csv_path = csv.map_or_else(|| out.with_extension("csv"), Path::to_path_buf);
    write(&csv_path, report::trajectory_csv(&traj))?;
    let last = traj.last();
    eprintln!(
        "iterations: {}  deleted: {}  accuracy: {:.4}  terminated: {}",
        last.iteration,
        last.mask,
        last.accuracy,
        traj.is_terminated()
    );
    Ok(())
}

fn common(trajs: &[PathBuf], fraction: f64, selection: Selection, out: Option<&Path>) -> Result<()> {
    let mut sets: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
    for p in trajs {
        let file = persist::load_trajectory(p).with_context(|| format!("loading {}", p.display()))?;
        let recs = &file.records;
        let idx = match selection {
            Selection::Best => select::best_model(recs)?,
            Selection::Bsba => select::bsba(recs)?,
            Selection::Final => recs.len() - 1,
        };
        sets.insert(p.display().to_string(), recs[idx].mask.iter().collect());
    }
    let layers = select::common_layers(&sets, fraction)?;
    #[derive(Serialize)]
    struct Common<'a> {
        fraction: f64,
        n_tasks: usize,
        deletion_sets: &'a BTreeMap<String, BTreeSet<usize>>,
        layers: BTreeSet<usize>,
    }
    emit(
        out,
        &json(&Common {
            fraction,
            n_tasks: sets.len(),
            deletion_sets: &sets,
            layers,
        }),
    )
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    let exec = match cli.threads {
        Some(0) => bail!(tale_core::Error::Input("--threads must be >= 1".into())),
        Some(1) => Exec::Sequential,
        Some(_n) => {
            #[cfg(feature = "parallel")]
            rayon::ThreadPoolBuilder::new()
                .num_threads(_n)
                .build_global()
                .context("configuring the thread pool")?;
            Exec::Parallel
        }
        None => Exec::Parallel,
    };
    match cli.cmd {
        Cmd::Train { task, config, out } => {
            let cfg = read_config(config.as_deref())?;
            let ds = dataset(task, seed)?;
            let model_cfg = ModelConfig {
                n_layers: cfg.model.n_layers,
                d_model: cfg.model.d_model,
                n_heads: cfg.model.n_heads,
                d_ff: cfg.model.d_ff,
                vocab_size: ds.spec.vocab_size(),
                max_seq_len: ds.spec.seq_len,
                seed,
            };
            let tc = TrainConfig { seed, ..cfg.train };
            let outcome = train::train_toy(model_cfg, &ds, &tc)?;
            persist::save_model(&outcome.model, &out)?;
            let val = accuracy(&outcome.model, &LayerMask::empty(), &ds.val, &ds.spec, exec)?;
            eprintln!(
                "final loss {:.6}  val accuracy {:.4}  {:.1}s",
                outcome.report.final_loss, val.accuracy, outcome.report.wall_seconds
            );
        }
        Cmd::Prune {
            model,
            task,
            epsilon,
            mode,
            out,
            csv,
            resume,
            max_iterations,
            measure_speedup,
        } => prune(
            seed,
            exec,
            &model,
            task,
            epsilon,
            mode,
            &out,
            csv.as_deref(),
            resume,
            max_iterations,
            measure_speedup,
        )?,
        Cmd::Select {
            traj,
            lambda,
            use_measured_speedup,
            out,
            csv,
        } => {
            let file = persist::load_trajectory(&traj).with_context(|| format!("loading {}", traj.display()))?;
            let source = if use_measured_speedup {
                SpeedupSource::Measured
            } else {
                SpeedupSource::Proxy
            };
            let rep = SelectionReport::build(file.header.task.kind.name(), &file.trajectory(), lambda, source)?;
            emit(out.as_deref(), &json(&rep))?;
            if let Some(csv) = csv {
                write(&csv, report::selection_csv(&[rep]))?;
            }
        }
        Cmd::Lens { model, task, out } => {
            let (m, _) = load_model(&model)?;
            let ds = dataset(task, seed)?;
            check_task(&m, &ds)?;
            write(&out, report::lens_csv(&report::lens_curve(&m, &ds.val, &ds.spec)?))?;
        }
        Cmd::Mi {
            model,
            task,
            mask,
            out,
            probe,
        } => {
            let (m, _) = load_model(&model)?;
            let ds = dataset(task, seed)?;
            check_task(&m, &ds)?;
            let mask = parse_mask(mask.as_deref(), m.n_layers())?;
            write(&out, report::mi_csv(&mi_profile(&m, &mask, &ds, probe.into(), exec)?))?;
        }
        Cmd::MiDelta {
            model,
            task,
            layer,
            out,
            probe,
        } => {
            let (m, _) = load_model(&model)?;
            let ds = dataset(task, seed)?;
            check_task(&m, &ds)?;
            let d = deletion_mi_delta(&m, layer, &ds, probe.into())?;
            #[derive(Serialize)]
            struct Delta {
                layer: usize,
                before_bits: f64,
                after_bits: f64,
                delta_bits: f64,
            }
            emit(
                out.as_deref(),
                &json(&Delta {
                    layer: d.layer,
                    before_bits: d.before_bits,
                    after_bits: d.after_bits,
                    delta_bits: d.delta(),
                }),
            )?;
        }
        Cmd::Regimes {
            model,
            task,
            out,
            epsilon,
            mode,
            config,
        } => {
            let (m, _) = load_model(&model)?;
            let ds = dataset(task, seed)?;
            check_task(&m, &ds)?;
            let tc = TrainConfig {
                seed,
                ..read_config(config.as_deref())?.train
            };
            let settings = RegimeSettings { epsilon, mode, exec };
            write(&out, report::regimes_csv(&train::run_matrix(&m, &ds, settings, &tc)?))?;
        }
        Cmd::Common {
            trajs,
            fraction,
            selection,
            out,
        } => common(&trajs, fraction, selection, out.as_deref())?,
        Cmd::InjectNoise {
            model,
            layer,
            noise_seed,
            out,
        } => {
            let (m, _) = load_model(&model)?;
            let noisy = train::inject_noise_layer(&m, layer, noise_seed.unwrap_or(seed.wrapping_add(1)))?;
            persist::save_model(&noisy, &out)?;
        }
        Cmd::Eval {
            model,
            task,
            mask,
            split,
        } => {
            let (m, _) = load_model(&model)?;
            let ds = dataset(task, seed)?;
            check_task(&m, &ds)?;
            let mask = parse_mask(mask.as_deref(), m.n_layers())?;
            let s = match split {
                SplitName::Train => &ds.train,
                SplitName::Val => &ds.val,
                SplitName::Test => &ds.test,
            };
            print!("{}", json(&accuracy(&m, &mask, s, &ds.spec, exec)?));
        }
        Cmd::Dataset { task, split, out } => {
            let ds = dataset(task, seed)?;
            let s = match split {
                SplitName::Train => &ds.train,
                SplitName::Val => &ds.val,
                SplitName::Test => &ds.test,
            };
            write(&out, s.to_records())?;
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use tale_core::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                _ if e.is_format() => 3,
                E::Training(_) | E::DegenerateTask(_) => 1,
                _ => 2,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
