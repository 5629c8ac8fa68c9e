//! Command-line harness: `train`, `eval`, `equiv-check`, `gradcheck` and
//! `prox-bench`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use ndarray::ArrayD;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::data::{gen_two_moons, load_idx, Dataset, Split, Standardizer};
use crate::error::{Error, Result};
use crate::gradsuite::{run_suite, SUITE_EPSILON, SUITE_TOLERANCE};
use crate::instances::{diagonally_dominant_metric, gaussian, unit_norm_dictionary};
use crate::metric::Regularizer;
use crate::net::model::init_dense;
use crate::net::{ActivationKind, Layer, Model, ModelFile};
use crate::qprox::{qprox_oracle, qprox_rnn, reparameterize_with_depth, ProxProblem};
use crate::sdl::{check_equivalence_with, DEFAULT_MAX_ITER, DEFAULT_SOLVER_TOL};
use crate::train::{accuracy, train_loop, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const METRICS_FILE: &str = "metrics.csv";
pub const MODEL_FILE: &str = "model.bin";
pub const PROX_BENCH_FILE: &str = "prox_bench.csv";
pub const EQUIV_FILE: &str = "equiv.csv";

#[derive(Debug, Parser)]
#[command(name = "detrame", about = "Q-metric prox layers: training and verification tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct CommonArgs {
    /// Configuration file (`key = value` lines, `[section]` headers).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write metrics.csv and model.bin.
    Train(CommonArgs),
    /// Report test accuracy of a saved model.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Model file; defaults to <out>/model.bin.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Compare sparse coding with the metric prox of transformed signals.
    EquivCheck(CommonArgs),
    /// Finite-difference check of every gradient.
    Gradcheck(CommonArgs),
    /// Accuracy and timing of the unrolled prox against the oracle.
    ProxBench(CommonArgs),
}

/// Parses `argv` (program name first) and runs the command. Returns the
/// process exit code: 0 on success, 1 on runtime failure, 2 on usage or
/// configuration errors.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval { common, model } => cmd_eval(&common, model.as_deref()),
        Command::EquivCheck(a) => cmd_equiv(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::ProxBench(a) => cmd_prox_bench(&a),
    };
    match result {
        Ok(code) => code,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

fn load_config(args: &CommonArgs, known: &[(&str, &[&str])]) -> Result<Config> {
    let cfg = match &args.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    cfg.check_known(known)?;
    Ok(cfg)
}

fn seed_of(args: &CommonArgs, cfg: &Config) -> Result<u64> {
    match args.seed {
        Some(s) => Ok(s),
        None => cfg.get_or("", "seed", 0u64),
    }
}

fn out_dir(args: &CommonArgs) -> Result<PathBuf> {
    let dir = args.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

const EXPERIMENT_KEYS: &[(&str, &[&str])] = &[
    ("", &["seed"]),
    (
        "data",
        &[
            "source",
            "n_train",
            "n_test",
            "noise",
            "train_images",
            "train_labels",
            "test_images",
            "test_labels",
            "class_count",
            "standardize",
        ],
    ),
    ("model", &["hidden", "activation", "tt_max", "init"]),
    (
        "train",
        &[
            "epochs",
            "batch_size",
            "learning_rate",
            "decay",
            "decay_epochs",
            "momentum",
            "lambda",
            "beta",
            "alpha",
        ],
    ),
    ("output", &["wall_time"]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Random,
    Dictionary,
}

/// Everything `train` and `eval` derive from a configuration file.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub seed: u64,
    cfg: Config,
    hidden: Vec<usize>,
    activation: ActivationKind,
    init: Init,
    standardize: bool,
    pub train: TrainConfig,
    pub wall_time: bool,
    data_seeds: (u64, u64),
    init_seed: u64,
}

impl Experiment {
    pub fn from_config(cfg: Config, seed: u64) -> Result<Self> {
        cfg.check_known(EXPERIMENT_KEYS)?;
        // every random stream derives from the single seed, drawn in a fixed order
        let mut master = ChaCha8Rng::seed_from_u64(seed);
        let data_seeds = (master.next_u64(), master.next_u64());
        let init_seed = master.next_u64();
        let shuffle_seed = master.next_u64();

        let activation = match cfg.raw("model", "activation").unwrap_or("qmetric") {
            "qmetric" => ActivationKind::QMetric,
            "relu" => ActivationKind::PlainRelu,
            other => return Err(Error::Config(format!("model.activation: unknown value {other:?}"))),
        };
        let init = match cfg.raw("model", "init").unwrap_or("random") {
            "random" => Init::Random,
            "dictionary" => Init::Dictionary,
            other => return Err(Error::Config(format!("model.init: unknown value {other:?}"))),
        };
        if init == Init::Dictionary && activation != ActivationKind::QMetric {
            return Err(Error::Config(
                "model.init = dictionary requires activation = qmetric".into(),
            ));
        }
        let hidden = cfg.list("model", "hidden")?.unwrap_or_else(|| vec![16, 16]);
        if hidden.contains(&0) {
            return Err(Error::Config("model.hidden widths must be positive".into()));
        }
        let defaults = TrainConfig::default();
        let train = TrainConfig {
            learning_rate: cfg.get_or("train", "learning_rate", defaults.learning_rate)?,
            decay: cfg.get_or("train", "decay", defaults.decay)?,
            decay_epochs: cfg.list("train", "decay_epochs")?.unwrap_or_default(),
            epochs: cfg.get_or("train", "epochs", defaults.epochs)?,
            batch_size: cfg.get_or("train", "batch_size", defaults.batch_size)?,
            seed: shuffle_seed,
            momentum: cfg.get_or("train", "momentum", defaults.momentum)?,
            tt_max: cfg.get_or("model", "tt_max", defaults.tt_max)?,
            lambda: cfg.get_or("train", "lambda", defaults.lambda)?,
            beta: cfg.get_or("train", "beta", defaults.beta)?,
            alpha: cfg.get_or("train", "alpha", defaults.alpha)?,
            dataset: cfg.raw("data", "source").unwrap_or("two_moons").to_string(),
        };
        train.validate()?;
        if init == Init::Dictionary {
            Regularizer::new(train.lambda, train.beta).map_err(|e| Error::Config(e.to_string()))?;
            if !(train.alpha > 0.0) {
                return Err(Error::Config("train.alpha must be positive".into()));
            }
        }
        Ok(Self {
            seed,
            hidden,
            activation,
            init,
            standardize: cfg.get_or("data", "standardize", true)?,
            wall_time: cfg.get_or("output", "wall_time", false)?,
            train,
            data_seeds,
            init_seed,
            cfg,
        })
    }

    /// Raw train and test splits.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        match self.cfg.raw("data", "source").unwrap_or("two_moons") {
            "two_moons" => {
                let n_train = self.cfg.get_or("data", "n_train", 250usize)?;
                let n_test = self.cfg.get_or("data", "n_test", 250usize)?;
                let noise = self.cfg.get_or("data", "noise", 0.1f64)?;
                if n_train == 0 || n_test == 0 || !(noise >= 0.0) {
                    return Err(Error::Config(
                        "two_moons needs n_train, n_test >= 1 and noise >= 0".into(),
                    ));
                }
                Ok((
                    gen_two_moons(n_train, noise, self.data_seeds.0, Split::Train)?,
                    gen_two_moons(n_test, noise, self.data_seeds.1, Split::Test)?,
                ))
            }
            "idx" => {
                let path = |key: &str| -> Result<&str> {
                    self.cfg
                        .raw("data", key)
                        .ok_or_else(|| Error::Config(format!("data.{key} is required for idx data")))
                };
                let classes = self.cfg.get_or("data", "class_count", 10usize)?;
                Ok((
                    load_idx(path("train_images")?, path("train_labels")?, classes, Split::Train)?,
                    load_idx(path("test_images")?, path("test_labels")?, classes, Split::Test)?,
                ))
            }
            other => Err(Error::Config(format!("data.source: unknown value {other:?}"))),
        }
    }

    pub fn build_model(&self, input_dim: usize, classes: usize) -> Result<Model> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.init_seed);
        match self.init {
            Init::Random => Model::mlp(
                input_dim,
                &self.hidden,
                classes,
                self.activation,
                self.train.tt_max,
                &mut rng,
            ),
            Init::Dictionary => {
                let reg = Regularizer::new(self.train.lambda, self.train.beta)?;
                let mut layers = Vec::with_capacity(self.hidden.len());
                let mut prev = input_dim;
                for &width in &self.hidden {
                    let dict = unit_norm_dictionary(prev, width, self.train.alpha, &mut rng)?;
                    layers.push(Layer::from_dictionary(&dict, reg, self.train.tt_max)?);
                    prev = width;
                }
                Model::new(vec![input_dim], layers, init_dense(prev, classes, &mut rng))
            }
        }
    }
}

fn experiment(args: &CommonArgs) -> Result<Experiment> {
    let cfg = load_config(args, EXPERIMENT_KEYS)?;
    let seed = seed_of(args, &cfg)?;
    Experiment::from_config(cfg, seed)
}

fn standardize(train: Dataset, test: Dataset) -> Result<(Dataset, Dataset, Standardizer)> {
    let x = train
        .features()
        .as_flat()
        .ok_or_else(|| Error::Shape("standardization needs flat features".into()))?;
    let s = Standardizer::fit(x)?;
    let train = train.map_features(|f| s.apply_signal(f))?;
    let test = test.map_features(|f| s.apply_signal(f))?;
    Ok((train, test, s))
}

fn cmd_train(args: &CommonArgs) -> Result<i32> {
    let exp = experiment(args)?;
    let out = out_dir(args)?;
    let (train, test) = exp.datasets()?;
    let (train, test, norm) = if exp.standardize {
        let (a, b, s) = standardize(train, test)?;
        (a, b, Some(s))
    } else {
        (train, test, None)
    };
    let input_dim = train.features().sample_shape()[0];
    let mut model = exp.build_model(input_dim, train.class_count())?;

    let outcome = train_loop(&mut model, &train, &test, &exp.train);
    let (history, failure) = match outcome {
        Ok(h) => (h, None),
        Err(f) => (f.history.clone(), Some(f)),
    };
    history.write_csv(out.join(METRICS_FILE), exp.wall_time)?;
    if let Some(f) = failure {
        eprintln!("error: {f}");
        return Ok(EXIT_FAILURE);
    }
    let mut file = ModelFile::new(model);
    if let Some(s) = norm {
        file.extras.push(("norm.mean".into(), s.mean.clone().into_dyn()));
        file.extras.push(("norm.std".into(), s.std.clone().into_dyn()));
    }
    file.save(out.join(MODEL_FILE))?;
    if let Some(last) = history.last() {
        println!(
            "epoch {}: train_loss={:.6} train_acc={:.4} test_acc={:.4}",
            last.epoch, last.train_loss, last.train_acc, last.test_acc
        );
    }
    Ok(EXIT_OK)
}

fn cmd_eval(args: &CommonArgs, model_path: Option<&Path>) -> Result<i32> {
    let exp = experiment(args)?;
    let path = match model_path {
        Some(p) => p.to_path_buf(),
        None => args.out.clone().unwrap_or_else(|| PathBuf::from(".")).join(MODEL_FILE),
    };
    let file = ModelFile::load(&path)?;
    let (_, test) = exp.datasets()?;
    let test = match (file.extra("norm.mean"), file.extra("norm.std")) {
        (Some(m), Some(s)) => {
            let to1 = |a: &ArrayD<f64>| {
                a.clone()
                    .into_dimensionality()
                    .map_err(|e| Error::ModelFormat(e.to_string()))
            };
            let norm = Standardizer {
                mean: to1(m)?,
                std: to1(s)?,
            };
            test.map_features(|f| norm.apply_signal(f))?
        }
        _ => test,
    };
    let acc = accuracy(&file.model, &test)?;
    let hits = (acc * test.len() as f64).round() as usize;
    println!("accuracy = {acc:.4} ({hits}/{}) on {}", test.len(), test.provenance());
    Ok(EXIT_OK)
}

const EQUIV_KEYS: &[(&str, &[&str])] = &[
    ("", &["seed"]),
    (
        "equiv",
        &[
            "instances",
            "m",
            "k",
            "n",
            "alpha",
            "lambda",
            "beta",
            "tol",
            "solver_tol",
            "max_iter",
            "linear_scale",
        ],
    ),
];

fn cmd_equiv(args: &CommonArgs) -> Result<i32> {
    let cfg = load_config(args, EQUIV_KEYS)?;
    let seed = seed_of(args, &cfg)?;
    let s = "equiv";
    let instances = cfg.get_or(s, "instances", 20usize)?;
    let m = cfg.get_or(s, "m", 8usize)?;
    let k = cfg.get_or(s, "k", 12usize)?;
    let n = cfg.get_or(s, "n", 4usize)?;
    let alpha = cfg.get_or(s, "alpha", 0.1f64)?;
    let tol = cfg.get_or(s, "tol", 1e-6f64)?;
    let solver_tol = cfg.get_or(s, "solver_tol", DEFAULT_SOLVER_TOL)?;
    let max_iter = cfg.get_or(s, "max_iter", DEFAULT_MAX_ITER)?;
    let linear_scale = cfg.get_or(s, "linear_scale", 0.0f64)?;
    let reg = Regularizer::new(cfg.get_or(s, "lambda", 0.05)?, cfg.get_or(s, "beta", 0.01)?)
        .map_err(|e| Error::Config(e.to_string()))?;
    if !(alpha > 0.0) || m == 0 || k == 0 || n == 0 {
        return Err(Error::Config("equiv: need alpha > 0 and positive m, k, n".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut rows = Vec::with_capacity(instances);
    for i in 0..instances {
        let mut dict = unit_norm_dictionary(m, k, alpha, &mut rng)?;
        if linear_scale != 0.0 {
            let d = crate::instances::gaussian_vec(k, &mut rng) * linear_scale;
            dict = crate::metric::Dictionary::new(dict.atoms().clone(), alpha, d)?;
        }
        let x = gaussian(m, n, &mut rng);
        let rep = check_equivalence_with(&dict, reg, x.view(), tol, solver_tol, max_iter)?;
        worst = worst.max(rep.max_discrepancy);
        rows.push((i, rep.max_discrepancy, rep.passed));
    }
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join(EQUIV_FILE))?;
        w.write_record(["instance", "max_discrepancy", "passed"])?;
        for (i, d, p) in &rows {
            w.write_record([i.to_string(), d.to_string(), p.to_string()])?;
        }
        w.flush()?;
    }
    let passed = worst <= tol;
    println!(
        "max discrepancy = {worst:.3e} over {instances} instances (tol {tol:e}): {}",
        if passed { "PASS" } else { "FAIL" }
    );
    Ok(if passed { EXIT_OK } else { EXIT_FAILURE })
}

const GRADCHECK_KEYS: &[(&str, &[&str])] = &[("", &["seed"]), ("gradcheck", &["epsilon", "tol"])];

fn cmd_gradcheck(args: &CommonArgs) -> Result<i32> {
    let cfg = load_config(args, GRADCHECK_KEYS)?;
    let seed = seed_of(args, &cfg)?;
    let eps = cfg.get_or("gradcheck", "epsilon", SUITE_EPSILON)?;
    let tol = cfg.get_or("gradcheck", "tol", SUITE_TOLERANCE)?;
    if !(eps > 0.0) {
        return Err(Error::Config("gradcheck.epsilon must be positive".into()));
    }
    let mut all = true;
    for entry in run_suite(eps, seed)? {
        let ok = entry.report.passes(tol);
        all &= ok;
        println!(
            "{:<24} max_rel_error={:.3e} ({} coords) {}",
            entry.name,
            entry.report.max_rel_error,
            entry.report.checked,
            if ok { "PASS" } else { "FAIL" }
        );
    }
    Ok(if all { EXIT_OK } else { EXIT_FAILURE })
}

const PROX_KEYS: &[(&str, &[&str])] = &[
    ("", &["seed"]),
    (
        "prox",
        &[
            "k",
            "n",
            "instances",
            "margin",
            "lambda",
            "beta",
            "tt_values",
            "oracle_tol",
        ],
    ),
];

fn cmd_prox_bench(args: &CommonArgs) -> Result<i32> {
    let cfg = load_config(args, PROX_KEYS)?;
    let seed = seed_of(args, &cfg)?;
    let s = "prox";
    let k = cfg.get_or(s, "k", 8usize)?;
    let n = cfg.get_or(s, "n", 16usize)?;
    let instances = cfg.get_or(s, "instances", 10usize)?;
    let margin = cfg.get_or(s, "margin", 1.1f64)?;
    let oracle_tol = cfg.get_or(s, "oracle_tol", 1e-12f64)?;
    let tt_values: Vec<usize> = cfg
        .list(s, "tt_values")?
        .unwrap_or_else(|| vec![1, 2, 3, 5, 10, 20, 50, 100, 200, 500]);
    let reg = Regularizer::new(cfg.get_or(s, "lambda", 0.05)?, cfg.get_or(s, "beta", 0.01)?)
        .map_err(|e| Error::Config(e.to_string()))?;
    if k == 0 || n == 0 || instances == 0 || tt_values.contains(&0) {
        return Err(Error::Config(
            "prox: k, n, instances and tt_values must be positive".into(),
        ));
    }
    let out = out_dir(args)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut problems = Vec::with_capacity(instances);
    let mut oracle_secs = 0.0;
    for _ in 0..instances {
        let q = diagonally_dominant_metric(k, margin, &mut rng)?;
        let prob = ProxProblem::new(gaussian(k, n, &mut rng), q, reg)?;
        let t = Instant::now();
        let sol = qprox_oracle(&prob, oracle_tol, 1_000_000);
        oracle_secs += t.elapsed().as_secs_f64();
        problems.push((prob, sol.u));
    }

    let mut w = csv::Writer::from_path(out.join(PROX_BENCH_FILE))?;
    w.write_record(["tt_max", "max_abs_err", "mean_abs_err", "rnn_ms", "oracle_ms"])?;
    for &tt in &tt_values {
        let mut max_err = 0.0f64;
        let mut sum_err = 0.0;
        let mut count = 0usize;
        let mut rnn_secs = 0.0;
        for (prob, reference) in &problems {
            let cell = reparameterize_with_depth(prob.metric(), reg, tt)?;
            let t = Instant::now();
            let u = qprox_rnn(prob, &cell)?;
            rnn_secs += t.elapsed().as_secs_f64();
            for (a, b) in u.iter().zip(reference.iter()) {
                let e = (a - b).abs();
                max_err = max_err.max(e);
                sum_err += e;
                count += 1;
            }
        }
        let per = 1e3 / instances as f64;
        w.write_record([
            tt.to_string(),
            max_err.to_string(),
            (sum_err / count as f64).to_string(),
            (rnn_secs * per).to_string(),
            (oracle_secs * per).to_string(),
        ])?;
        println!("tt_max={tt:<4} max_abs_err={max_err:.3e}");
    }
    w.flush()?;
    Ok(EXIT_OK)
}
