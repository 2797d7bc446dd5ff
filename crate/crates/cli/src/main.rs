use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fats_core::bench::{report_from_summary, run_experiment, ExperimentConfig};
use fats_core::checkpoint::Checkpoint;
use fats_core::data::{generate_synthetic, parse_requests, FederatedDataset, SyntheticSpec, Uid, UnlearnRequest};
use fats_core::engine::{train, NoObserver};
use fats_core::lab::{
    enumerate_history_distribution, equivalence_exact, equivalence_test_mc, retrain_pipeline_digest,
    unlearn_pipeline_digest, unlearned_history_distribution, Binning, EquivalenceReport,
};
use fats_core::objective::{global_loss, Centroid, LossKind};
use fats_core::params::HyperParams;
use fats_core::rng::trial_seed;
use fats_core::unlearning::{StreamEntry, StreamReport, UnlearningSession};

const DATA_FILE: &str = "data.txt";
const CHECKPOINT_FILE: &str = "checkpoint.txt";
const LOSS_KEY: &str = "loss";

#[derive(Parser)]
#[command(name = "fats", version, about = "Federated training with exact unlearning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or import) the configured dataset and write it as text.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train once and write a state directory (data.txt, checkpoint.txt).
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Repeat index whose seed is used.
        #[arg(long, default_value_t = 0)]
        run: u64,
        /// State directory; defaults to the config's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Delete one sample or one client and update the state directory.
    Unlearn {
        #[arg(long)]
        state: PathBuf,
        #[command(flatten)]
        target: Target,
        /// Issue iteration; defaults to T.
        #[arg(long)]
        issue: Option<usize>,
    },
    /// Serve a request file in order and update the state directory.
    Stream {
        #[arg(long)]
        state: PathBuf,
        /// One request per line: `sample <client> <uid> <t_u>` or `client <client> - <t_u>`.
        #[arg(long)]
        requests: PathBuf,
        /// Outcome table; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check that unlearning matches retraining on a small federation.
    Verify(VerifyArgs),
    /// Run a full experiment from a config.
    Bench {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Average a summary.csv over runs.
    Report {
        /// A summary.csv file or the directory holding it.
        path: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override a config field, e.g. `--set training.total_iters=200`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg =
            ExperimentConfig::load(&self.config).with_context(|| format!("loading {}", self.config.display()))?;
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .with_context(|| format!("override `{o}` is not KEY=VALUE"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct Target {
    /// Sample to delete, as CLIENT:UID.
    #[arg(long, value_name = "CLIENT:UID")]
    sample: Option<String>,
    /// Client to delete.
    #[arg(long, value_name = "CLIENT")]
    client: Option<usize>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Suite {
    Exact,
    Mc,
    All,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, value_enum, default_value_t = Suite::Exact)]
    suite: Suite,
    #[arg(long, default_value_t = 2)]
    clients: usize,
    #[arg(long, default_value_t = 2)]
    samples: usize,
    #[arg(long, default_value_t = 2)]
    iters: usize,
    #[arg(long, default_value_t = 1)]
    local_iters: usize,
    #[arg(long, default_value_t = 1)]
    clients_per_round: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 100_000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = config.load()?;
            let ds = cfg.build_dataset()?;
            write(&out, &ds.to_text())?;
            println!(
                "wrote {} clients, {} points to {}",
                ds.num_clients(),
                ds.num_points(),
                out.display()
            );
        }
        Command::Train { config, run, out } => {
            let cfg = config.load()?;
            let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
            let ds = cfg.build_dataset()?;
            let kind = cfg.loss_kind();
            let model = kind.build(ds.dim());
            let (hyper, _) = cfg.resolve_hyper(&ds, model.as_ref(), trial_seed(cfg.seed, run))?;
            let (theta, store) = train(&hyper, &ds, model.as_ref(), &mut NoObserver)?;
            let fp = store.footprint();
            let mut ck = Checkpoint::new(hyper.clone(), store, &ds);
            ck.meta.insert(LOSS_KEY.into(), kind.name().into());
            save_state(&dir, &ds, &ck)?;
            println!(
                "trained T={} E={} K={} b={} eta={:e} storage={}; loss {:e}; store {} server words; state in {}",
                hyper.total_iters,
                hyper.local_iters,
                hyper.clients_per_round,
                hyper.batch_size,
                hyper.learning_rate,
                hyper.storage.name(),
                global_loss(model.as_ref(), theta.as_slice(), &ds),
                fp.server_words,
                dir.display()
            );
        }
        Command::Unlearn { state, target, issue } => {
            let (ds, ck, kind) = load_state(&state)?;
            let t_u = issue.unwrap_or(ck.hyper.total_iters);
            let req = match (&target.sample, target.client) {
                (Some(s), _) => {
                    let (c, u) = s.split_once(':').with_context(|| format!("`{s}` is not CLIENT:UID"))?;
                    UnlearnRequest::sample(c.parse().context("client id")?, u.parse::<Uid>().context("uid")?, t_u)
                }
                (None, Some(c)) => UnlearnRequest::client(c, t_u),
                (None, None) => unreachable!("clap enforces a target"),
            };
            let model = kind.build(ds.dim());
            let mut session = UnlearningSession::new(ck.hyper.clone(), ds, ck.store, model.as_ref());
            let recompute_bound = session.recompute_bound(&req);
            let outcome = session.unlearn(&req)?;
            let report = StreamReport {
                entries: vec![StreamEntry {
                    request: req,
                    result: Ok(outcome),
                }],
                recompute_bound,
            };
            print!("{}", report.to_csv());
            finish_session(&state, session, kind)?;
        }
        Command::Stream { state, requests, out } => {
            let (ds, ck, kind) = load_state(&state)?;
            let text = std::fs::read_to_string(&requests).with_context(|| format!("reading {}", requests.display()))?;
            let reqs = parse_requests(&text)?;
            let model = kind.build(ds.dim());
            let mut session = UnlearningSession::new(ck.hyper.clone(), ds, ck.store, model.as_ref());
            let report = session.process_stream(&reqs);
            match &out {
                Some(p) => write(p, &report.to_csv())?,
                None => print!("{}", report.to_csv()),
            }
            eprintln!(
                "{} requests, {} recomputes (bound {:.3}), {} retrained iterations, {} errors",
                reqs.len(),
                report.recomputes(),
                report.recompute_bound,
                report.retrained_iterations(),
                report.errors()
            );
            finish_session(&state, session, kind)?;
        }
        Command::Verify(args) => return verify(&args),
        Command::Bench { config } => {
            let cfg = config.load()?;
            let summary = run_experiment(&cfg)?;
            println!("metrics  {}", summary.metrics_path.display());
            println!("outcomes {}", summary.outcomes_path.display());
            println!("summary  {}", summary.summary_path.display());
        }
        Command::Report { path } => {
            let file = if path.is_dir() { path.join("summary.csv") } else { path };
            let text = std::fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
            println!("column,mean");
            for (k, v) in report_from_summary(&text)? {
                println!("{k},{v:e}");
            }
        }
    }
    Ok(true)
}

fn verify(a: &VerifyArgs) -> Result<bool> {
    let hyper = HyperParams::explicit(
        a.clients,
        a.samples,
        a.iters,
        a.local_iters,
        a.clients_per_round,
        a.batch,
        0.1,
        a.seed,
    )?;
    let ds = generate_synthetic(&SyntheticSpec {
        clients: a.clients,
        samples_per_client: a.samples,
        dim: 2,
        classes: 2,
        beta: 0.5,
        seed: a.seed,
    })?;
    let first = &ds.clients()[0];
    let requests = [
        (
            "sample",
            UnlearnRequest::sample(first.client_id, first.points[0].uid, a.iters),
        ),
        (
            "client",
            UnlearnRequest::client(ds.clients()[a.clients - 1].client_id, a.iters),
        ),
    ];
    let model = Centroid { dim: 2 };
    let mut ok = true;
    println!("test,mode,statistic,p_value,verdict");
    for (name, req) in &requests {
        let reduced = reduce(&ds, req)?;
        if matches!(a.suite, Suite::Exact | Suite::All) {
            let unlearned = unlearned_history_distribution(&hyper, &ds, req)?;
            let retrained = enumerate_history_distribution(&hyper, &reduced)?;
            ok &= emit(&format!("{name}_exact"), &equivalence_exact(&unlearned, &retrained));
        }
        if matches!(a.suite, Suite::Mc | Suite::All) {
            let retrain = |s| retrain_pipeline_digest(&hyper, &reduced, &model, s);
            let good = equivalence_test_mc(
                |s| unlearn_pipeline_digest(&hyper, &ds, &model, req, false, s),
                retrain,
                a.trials,
                Binning::Categorical,
                a.seed,
            )?;
            ok &= emit(&format!("{name}_mc"), &good);
            // The mutant keeps the old history; the test must reject it.
            match equivalence_test_mc(
                |s| unlearn_pipeline_digest(&hyper, &ds, &model, req, true, s),
                retrain,
                a.trials,
                Binning::Categorical,
                trial_seed(a.seed, 1),
            ) {
                Ok(r) => {
                    println!("{}", r.record(&format!("{name}_mc_mutant")));
                    ok &= !r.pass;
                }
                Err(e) => println!("{name}_mc_mutant,chi_square,,,rejected ({e})"),
            }
        }
    }
    Ok(ok)
}

fn emit(name: &str, r: &EquivalenceReport) -> bool {
    println!("{}", r.record(name));
    r.pass
}

fn reduce(ds: &FederatedDataset, req: &UnlearnRequest) -> Result<FederatedDataset> {
    Ok(match req.uid {
        Some(u) => ds.remove_sample(req.client, u)?,
        None => ds.remove_client(req.client)?,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn save_state(dir: &Path, ds: &FederatedDataset, ck: &Checkpoint) -> Result<()> {
    write(&dir.join(DATA_FILE), &ds.to_text())?;
    write(&dir.join(CHECKPOINT_FILE), &ck.to_text())
}

fn load_state(dir: &Path) -> Result<(FederatedDataset, Checkpoint, LossKind)> {
    let data_path = dir.join(DATA_FILE);
    let text = std::fs::read_to_string(&data_path).with_context(|| format!("reading {}", data_path.display()))?;
    let ds = FederatedDataset::from_text(&text)?;
    let ck = Checkpoint::load_for(dir.join(CHECKPOINT_FILE), &ds)?;
    let kind = match ck.meta.get(LOSS_KEY) {
        Some(k) => LossKind::parse(k).with_context(|| format!("unknown loss `{k}` in checkpoint"))?,
        None => bail!("checkpoint has no `{LOSS_KEY}` entry"),
    };
    Ok((ds, ck, kind))
}

fn finish_session(dir: &Path, session: UnlearningSession<'_>, kind: LossKind) -> Result<()> {
    let (hyper, ds, store, _) = session.into_parts();
    let mut ck = Checkpoint::new(hyper, store, &ds);
    ck.meta.insert(LOSS_KEY.into(), kind.name().into());
    save_state(dir, &ds, &ck)
}
