//! Command-line front end. Exit codes: 0 success, 1 validation error,
//! 2 numerical failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::{parse_kv_lines, ModelConfig, MODEL_KEYS};
use crate::data::{
    build_dataset, parse_interactions, read_prepared, write_prepared, ParseMode, Segment,
    SequenceDataset, SplitRatios,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, rank_of_target};
use crate::gradcheck::{GradCheckOptions, FD_STEP};
use crate::gradsuite::{micro_config, run_suite, DEFAULT_TOL};
use crate::model::{softmax, Model};
use crate::synth::{generate, write_log, Regime, RegimeSpec};
use crate::train::Trainer;

pub const THREADS_ENV: &str = "TTT4REC_THREADS";

#[derive(Parser, Debug)]
#[command(name = "ttt4rec", version, about = "Sequential recommendation with test-time training layers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Turn an interaction log into a split, indexed dataset.
    Prepare(PrepareArgs),
    /// Train a model described by a run config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the validation or test segment.
    Eval(EvalArgs),
    /// Rank items for one ad-hoc sequence.
    Recommend(RecommendArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic Markov-regime interaction log.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
pub struct PrepareArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "3:2:5")]
    pub ratios: String,
    #[arg(long, default_value_t = 5)]
    pub min_len: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Summary CSV path; defaults to `<out>.summary.csv`.
    #[arg(long)]
    pub summary: Option<PathBuf>,
    /// Fail on the first malformed row.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's `checkpoint`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub segment: String,
}

#[derive(Args, Debug)]
pub struct RecommendArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated item ids, oldest first.
    #[arg(long)]
    pub items: String,
    #[arg(long, default_value_t = 10)]
    pub top_k: usize,
    /// Prepared dataset holding the item vocabulary.
    #[arg(long, required_unless_present = "config")]
    pub dataset: Option<PathBuf>,
    /// Run config whose `data` names the vocabulary source.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// `key=value` overrides for the micro model.
    #[arg(long)]
    pub micro_config: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    pub tol: f64,
    #[arg(long, hide = true)]
    pub fault: Option<String>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub users: usize,
    #[arg(long, default_value_t = 200)]
    pub items: usize,
    #[arg(long, default_value_t = 60)]
    pub length: usize,
    #[arg(long, default_value_t = 2)]
    pub regimes: usize,
    /// Successors per item in each random regime.
    #[arg(long, default_value_t = 3)]
    pub fanout: usize,
    /// Comma-separated positions where the next regime takes over;
    /// defaults to evenly spaced points.
    #[arg(long)]
    pub switch: Option<String>,
    /// One deterministic cycle over all items instead of random regimes.
    #[arg(long)]
    pub cycle: bool,
}

/// Run configuration: model keys plus paths and dataset parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    pub report_dir: PathBuf,
    pub ratios: SplitRatios,
    pub min_seq_len: usize,
}

pub const RUN_KEYS: &[&str] = &["data", "checkpoint", "report_dir", "ratios", "min_seq_len"];

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            data: PathBuf::from("data/prepared.csv"),
            checkpoint: PathBuf::from("model.ckpt"),
            report_dir: PathBuf::from("reports"),
            ratios: SplitRatios::LIMITED_DATA,
            min_seq_len: 5,
        }
    }
}

impl RunConfig {
    /// Parses `key=value` lines; every bad or unknown key is reported.
    pub fn from_text(text: &str) -> Result<Self> {
        let pairs = parse_kv_lines(text).map_err(Error::Config)?;
        let mut cfg = RunConfig::default();
        let mut errors = Vec::new();
        for (line, k, v) in pairs {
            let res = match k.as_str() {
                "data" => {
                    cfg.data = PathBuf::from(&v);
                    Ok(())
                }
                "checkpoint" => {
                    cfg.checkpoint = PathBuf::from(&v);
                    Ok(())
                }
                "report_dir" => {
                    cfg.report_dir = PathBuf::from(&v);
                    Ok(())
                }
                "ratios" => v.parse().map(|r| cfg.ratios = r),
                "min_seq_len" => v
                    .parse()
                    .map(|n| cfg.min_seq_len = n)
                    .map_err(|_| format!("min_seq_len: expected an integer, got '{v}'")),
                _ => match cfg.model.set(&k, &v) {
                    Ok(true) => Ok(()),
                    Ok(false) => Err(format!("unknown key '{k}'")),
                    Err(e) => Err(e),
                },
            };
            if let Err(e) = res {
                errors.push(format!("line {line}: {e}"));
            }
        }
        errors.extend(cfg.model.problems());
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        RunConfig::from_text(&fs::read_to_string(path)?)
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut out = self.model.pairs();
        out.extend([
            ("data", self.data.display().to_string()),
            ("checkpoint", self.checkpoint.display().to_string()),
            ("report_dir", self.report_dir.display().to_string()),
            ("ratios", self.ratios.to_string()),
            ("min_seq_len", self.min_seq_len.to_string()),
        ]);
        out
    }

    pub fn to_text(&self) -> String {
        self.pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// The config as `# key=value` comment lines for output headers.
    pub fn header(&self) -> String {
        self.pairs().into_iter().map(|(k, v)| format!("# {k}={v}\n")).collect()
    }

    /// Loads `data` (prepared or raw) and fixes `n_items` to its vocabulary.
    pub fn dataset(&mut self) -> Result<SequenceDataset> {
        let ds = load_dataset(&self.data, self.ratios, self.min_seq_len)?;
        self.model.n_items = ds.n_items();
        Ok(ds)
    }
}

/// Every recognized run-config key.
pub fn all_keys() -> Vec<&'static str> {
    MODEL_KEYS.iter().chain(RUN_KEYS).copied().collect()
}

fn load_dataset(path: &Path, ratios: SplitRatios, min_len: usize) -> Result<SequenceDataset> {
    let text = fs::read_to_string(path)?;
    if text.starts_with("# ttt4rec-dataset") {
        read_prepared(path)
    } else {
        let log = parse_interactions(path, ParseMode::Lenient)?;
        build_dataset(&log.interactions, min_len, ratios)
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(vec![format!("{THREADS_ENV}: expected a positive integer, got '{v}'")]))?;
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

fn cmd_prepare(a: &PrepareArgs) -> Result<()> {
    let ratios: SplitRatios = a.ratios.parse().map_err(|e| Error::Config(vec![e]))?;
    let mode = if a.strict { ParseMode::Strict } else { ParseMode::Lenient };
    let log = parse_interactions(&a.input, mode)?;
    let ds = build_dataset(&log.interactions, a.min_len, ratios)?;
    let mut buf = Vec::new();
    write_prepared(&ds, &a.ratios, &mut buf)?;
    write_file(&a.out, &buf)?;
    let s = ds.summary();
    let summary = format!(
        "# input={}\n# ratios={}\n# min_len={}\nusers,items,interactions,mean_length,malformed\n{},{},{},{:.4},{}\n",
        a.input.display(),
        a.ratios,
        a.min_len,
        s.users,
        s.items,
        s.interactions,
        s.mean_length,
        log.malformed
    );
    let summary_path = a
        .summary
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.summary.csv", a.out.display())));
    write_file(&summary_path, summary.as_bytes())?;
    print!("{summary}");
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut run = RunConfig::load(&a.config)?;
    let ds = run.dataset()?;
    let mut model = Model::new(run.model.clone())?;
    model.round_to_f32();
    let mut trainer = Trainer::from_dataset(&model, &ds);
    let mut losses = format!("{}epoch,mean_loss,batches,targets\n", run.header());
    let mut norms = vec![0.0f64; model.tensors().len()];
    for _ in 0..run.model.epochs {
        let stats = trainer.epoch(&mut model)?;
        losses.push_str(&format!(
            "{},{},{},{}\n",
            stats.epoch, stats.mean_loss, stats.batches, stats.targets
        ));
        for (n, s) in norms.iter_mut().zip(&stats.grad_norms) {
            *n = n.max(*s);
        }
        eprintln!("epoch {} loss {:.6}", stats.epoch, stats.mean_loss);
    }
    model.round_to_f32();
    write_file(&run.checkpoint, &checkpoint::to_bytes(&model))?;
    write_file(&run.report_dir.join("train_loss.csv"), losses.as_bytes())?;
    let mut grads = format!("{}parameter,max_grad_norm\n", run.header());
    for (name, n) in model.names().iter().zip(&norms) {
        grads.push_str(&format!("{name},{n}\n"));
    }
    write_file(&run.report_dir.join("grad_norms.csv"), grads.as_bytes())?;
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let segment: Segment = a.segment.parse().map_err(|e| Error::Config(vec![e]))?;
    if segment == Segment::Train {
        return Err(Error::Config(vec!["segment must be val or test".into()]));
    }
    let mut run = RunConfig::load(&a.config)?;
    if let Some(p) = &a.checkpoint {
        run.checkpoint = p.clone();
    }
    let ds = run.dataset()?;
    let mut model = checkpoint::load_expecting(&run.checkpoint, &run.model)?;
    let cfg = model.config_mut();
    cfg.adapt_at_eval = run.model.adapt_at_eval;
    cfg.max_context = run.model.max_context;
    cfg.check_finite = run.model.check_finite;
    let report = evaluate(&model, &ds, segment)?;
    let mut buf = run.header().into_bytes();
    report.write_csv(&mut buf)?;
    write_file(&run.report_dir.join(format!("eval_{segment}.csv")), &buf)?;
    std::io::stdout().write_all(&buf)?;
    Ok(())
}

fn cmd_recommend(a: &RecommendArgs) -> Result<()> {
    let vocab_path = match (&a.dataset, &a.config) {
        (Some(p), _) => p.clone(),
        (None, Some(c)) => RunConfig::load(c)?.data,
        (None, None) => return Err(Error::Config(vec!["--dataset or --config is required".into()])),
    };
    let ds = read_prepared(&vocab_path)?;
    let model = checkpoint::load(&a.checkpoint)?;
    if model.config().n_items != ds.n_items() {
        return Err(Error::Config(vec![format!(
            "checkpoint scores {} items but the vocabulary has {}",
            model.config().n_items,
            ds.n_items()
        )]));
    }
    let index = ds.item_index();
    let mut items = Vec::new();
    let mut unknown = Vec::new();
    for id in a.items.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match index.get(id) {
            Some(&i) => items.push(i),
            None => unknown.push(format!("unknown item '{id}'")),
        }
    }
    if items.is_empty() && unknown.is_empty() {
        unknown.push("--items is empty".into());
    }
    if !unknown.is_empty() {
        return Err(Error::Config(unknown));
    }
    let logits = model.predict_scores(&items)?;
    let probs = softmax(&logits);
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by_key(|&j| (rank_of_target(&logits, j), j));
    let mut out = String::from("rank,item_id,probability\n");
    for (r, &j) in order.iter().take(a.top_k.min(logits.len())).enumerate() {
        out.push_str(&format!("{},{},{:.6}\n", r + 1, ds.vocab[j], probs[j]));
    }
    print!("{out}");
    Ok(())
}

/// Returns whether every check passed.
fn cmd_gradcheck(a: &GradcheckArgs) -> Result<bool> {
    let mut micro = micro_config();
    if let Some(p) = &a.micro_config {
        let mut errors = Vec::new();
        for (line, k, v) in parse_kv_lines(&fs::read_to_string(p)?).map_err(Error::Config)? {
            match micro.set(&k, &v) {
                Ok(true) => {}
                Ok(false) => errors.push(format!("line {line}: unknown key '{k}'")),
                Err(e) => errors.push(format!("line {line}: {e}")),
            }
        }
        errors.extend(micro.problems());
        if !errors.is_empty() {
            return Err(Error::Config(errors));
        }
    }
    let opts = GradCheckOptions {
        step: FD_STEP,
        tol: a.tol,
        fault: a.fault.clone(),
    };
    let reports = run_suite(&micro, &opts)?;
    let mut out = String::from("check,max_rel_error,max_abs_error,coords,status\n");
    for r in &reports {
        out.push_str(&format!(
            "{},{:.3e},{:.3e},{},{}\n",
            r.name,
            r.max_rel_error,
            r.max_abs_error,
            r.coords,
            if r.passed { "PASS" } else { "FAIL" }
        ));
    }
    print!("{out}");
    Ok(reports.iter().all(|r| r.passed))
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let mut problems = Vec::new();
    if a.items < 2 {
        problems.push("--items must be at least 2".to_string());
    }
    if a.regimes == 0 {
        problems.push("--regimes must be positive".to_string());
    }
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed ^ 0x5EED);
    let (regimes, switch_points) = if a.cycle {
        let order: Vec<usize> = (0..a.items).collect();
        (vec![Regime::cycle(&order, a.items)?], Vec::new())
    } else {
        let regimes: Vec<Regime> = (0..a.regimes)
            .map(|_| Regime::random(a.items, a.fanout, &mut rng))
            .collect();
        let points = match &a.switch {
            Some(s) => s
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Config(vec![format!("--switch: bad position '{p}'")]))
                })
                .collect::<Result<Vec<_>>>()?,
            None => (1..a.regimes).map(|r| r * a.length / a.regimes).collect(),
        };
        (regimes, points)
    };
    let spec = RegimeSpec {
        users: a.users,
        length: a.length,
        regimes,
        switch_points,
    };
    let log = generate(&spec, a.seed)?;
    let mut buf = Vec::new();
    write_log(&log, &mut buf)?;
    write_file(&a.out, &buf)?;
    eprintln!("wrote {} interactions for {} users", log.len(), a.users);
    Ok(())
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        2
    } else {
        1
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = configure_threads().and_then(|_| match &cli.command {
        Command::Prepare(a) => cmd_prepare(a).map(|_| true),
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Eval(a) => cmd_eval(a).map(|_| true),
        Command::Recommend(a) => cmd_recommend(a).map(|_| true),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Synth(a) => cmd_synth(a).map(|_| true),
    });
    match result {
        Ok(true) => 0,
        Ok(false) => {
            eprintln!("error: gradient check failed");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
