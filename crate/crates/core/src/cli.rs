//! Command-line entry point.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::analysis::{analysis_layers, compute_class_profiles, compute_filter_contributions, refine_pruning};
use crate::config::{EvaluatorConfig, RunConfig};
use crate::data::{load_dataset, Split};
use crate::error::{Error, Result};
use crate::eval::protocol::{serve, BuiltinServer};
use crate::eval::{BuiltinEvaluator, EvaluationResult, Evaluator, ExternalSession};
use crate::fixture::make_fixture;
use crate::model::{load_model, read_masks, save_model, weighted_sparsity, write_masks, ModelSnapshot};
use crate::retrain::{RetrainConfig, RetrainState, Retrainer};
use crate::search::{Search, SearchState};
use crate::structural::{
    channel_summary, start_structural, structural_iteration, StructuralConfig, StructuralRunState,
};
use crate::trace::write_trace_csv;

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MODEL: i32 = 3;
pub const EXIT_EVALUATOR: i32 = 4;

const DEFAULT_OUT: &str = "prunesearch-out";

#[derive(Debug, Parser)]
#[command(name = "prunesearch", version, about = "Layer-wise pruning search and retraining")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted-key override such as `search.iterations=50`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    /// Mask file applied to the model before running.
    #[arg(long, global = true)]
    pub masks: Option<PathBuf>,
    #[arg(long, global = true, env = "PRUNESEARCH_OUT")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Continue from `<out>/checkpoint.json`.
    #[arg(long, global = true)]
    pub resume: bool,
    /// Stop after this many iterations or epochs, leaving a checkpoint.
    #[arg(long, global = true)]
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Search per-layer sparsities without retraining.
    PruneSearch,
    /// Prune with one of the retraining schedules.
    PruneRetrain,
    /// Remove whole conv channels with retraining.
    PruneStructural,
    /// Filter activation analysis and refinement of a pruned model.
    AnalyzeFilters,
    /// Evaluate a (masked) model.
    Eval {
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Generate a synthetic dataset and train a fixture model.
    MakeFixture,
    /// Serve the evaluator protocol on stdin/stdout from the built-in engine.
    Serve,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Validation,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Validation => Split::Validation,
            SplitArg::Test => Split::Test,
        }
    }
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::PruneSearch => "prune-search",
            Command::PruneRetrain => "prune-retrain",
            Command::PruneStructural => "prune-structural",
            Command::AnalyzeFilters => "analyze-filters",
            Command::Eval { .. } => "eval",
            Command::MakeFixture => "make-fixture",
            Command::Serve => "serve",
        }
    }
}

/// Exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Bounds(_) => EXIT_CONFIG,
        e if e.is_model_error() => EXIT_MODEL,
        e if e.is_evaluator_error() => EXIT_EVALUATOR,
        _ => EXIT_OTHER,
    }
}

/// Parse arguments, run, and return the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Merge the config file, overrides and flags.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = RunConfig::load(cli.config.as_deref(), &cli.set)?;
    if let Some(m) = &cli.model {
        config.model = Some(m.clone());
    }
    if let Some(d) = &cli.dataset {
        config.dataset = Some(d.clone());
    }
    if let Some(m) = &cli.masks {
        config.masks = Some(m.clone());
    }
    if let Some(o) = &cli.out {
        config.out = Some(o.clone());
    }
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    config.search.seed = config.seed;
    config.retrain.seed = config.seed;
    config.structural.seed = config.seed;
    config.fixture.seed = config.seed;
    Ok(config)
}

pub fn run(cli: &Cli) -> Result<()> {
    let config = resolve_config(cli)?;
    let out = config.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let ctx = Context {
        config,
        out,
        resume: cli.resume,
        stop_after: cli.stop_after,
        started: Instant::now(),
        command: cli.command.name(),
    };
    match cli.command {
        Command::PruneSearch => ctx.prune_search(),
        Command::PruneRetrain => ctx.prune_retrain(),
        Command::PruneStructural => ctx.prune_structural(),
        Command::AnalyzeFilters => ctx.analyze_filters(),
        Command::Eval { split } => ctx.eval(split.into()),
        Command::MakeFixture => ctx.make_fixture(),
        Command::Serve => ctx.serve(),
    }
}

/// Versioned checkpoint document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Checkpoint {
    Search {
        state: Box<SearchState>,
    },
    Retrain {
        config: Box<RetrainConfig>,
        state: Box<RetrainState>,
    },
    Structural {
        config: StructuralConfig,
        state: Box<StructuralRunState>,
    },
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("documents serialize");
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct MaskTarget {
    target: f64,
    magnitude: bool,
}

/// Save a model container with its masks and their sparsity targets
/// alongside.
pub fn save_snapshot(model: &ModelSnapshot, dir: &Path) -> Result<()> {
    save_model(model, dir)?;
    write_masks(model.masks(), dir.join("masks.bin"))?;
    let targets: Vec<MaskTarget> = model
        .masks()
        .iter()
        .map(|m| MaskTarget {
            target: m.target(),
            magnitude: m.is_magnitude(),
        })
        .collect();
    write_json(&dir.join("mask_targets.json"), &targets)
}

pub fn load_snapshot(dir: &Path) -> Result<ModelSnapshot> {
    let mut model = load_model(dir)?;
    let masks = dir.join("masks.bin");
    if masks.exists() {
        let mut masks = read_masks(&masks)?;
        let targets_path = dir.join("mask_targets.json");
        if targets_path.exists() {
            let text = std::fs::read_to_string(&targets_path).map_err(|e| Error::io(&targets_path, e))?;
            let targets: Vec<MaskTarget> = serde_json::from_str(&text).map_err(|e| Error::Corrupt {
                path: targets_path.clone(),
                reason: e.to_string(),
            })?;
            if targets.len() != masks.len() {
                return Err(Error::Corrupt {
                    path: targets_path,
                    reason: "target count does not match the mask file".into(),
                });
            }
            masks = masks
                .into_iter()
                .zip(targets)
                .map(|(m, t)| m.with_target(t.target, t.magnitude))
                .collect();
        }
        model.set_masks(masks)?;
    }
    Ok(model)
}

fn sparsity_map(model: &ModelSnapshot) -> BTreeMap<String, f64> {
    model
        .layers()
        .iter()
        .zip(model.masks())
        .map(|(l, m)| (l.name().to_string(), m.sparsity()))
        .collect()
}

struct Context {
    config: RunConfig,
    out: PathBuf,
    resume: bool,
    stop_after: Option<usize>,
    started: Instant,
    command: &'static str,
}

impl Context {
    fn ensure_out(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))
    }

    fn checkpoint_path(&self) -> PathBuf {
        self.out.join("checkpoint.json")
    }

    fn model(&self) -> Result<ModelSnapshot> {
        let path = self
            .config
            .model
            .as_ref()
            .ok_or_else(|| Error::Config("no model given (--model or `model`)".into()))?;
        let mut model = load_model(path)?;
        if let Some(m) = &self.config.masks {
            model.set_masks(read_masks(m)?)?;
        }
        Ok(model)
    }

    fn evaluator(&self, model: &ModelSnapshot) -> Result<Box<dyn Evaluator>> {
        match &self.config.evaluator {
            EvaluatorConfig::Builtin(cfg) => {
                let path = self
                    .config
                    .dataset
                    .as_ref()
                    .ok_or_else(|| Error::Config("the built-in evaluator needs --dataset".into()))?;
                let data = load_dataset(path, self.config.validation_fraction)?;
                Ok(Box::new(BuiltinEvaluator::new(data, cfg.clone())))
            }
            EvaluatorConfig::External(cfg) => Ok(Box::new(ExternalSession::connect(cfg, model)?)),
        }
    }

    fn read_checkpoint(&self) -> Result<Checkpoint> {
        let path = self.checkpoint_path();
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Corrupt {
            path,
            reason: e.to_string(),
        })
    }

    fn write_report(
        &self,
        model: &ModelSnapshot,
        baseline: &EvaluationResult,
        final_result: &EvaluationResult,
        details: Value,
    ) -> Result<()> {
        let report = json!({
            "command": self.command,
            "seed": self.config.seed,
            "weighted_sparsity": weighted_sparsity(model),
            "sparsities": sparsity_map(model),
            "baseline": baseline,
            "final": final_result,
            "drop": baseline.top1 - final_result.top1,
            "wall_time_s": self.started.elapsed().as_secs_f64(),
            "details": details,
        });
        write_json(&self.out.join("report.json"), &report)
    }

    fn should_stop(&self, done_here: usize) -> bool {
        self.stop_after.is_some_and(|n| done_here >= n)
    }

    fn prune_search(&self) -> Result<()> {
        let model = self.model()?;
        let mut evaluator = self.evaluator(&model)?;
        self.ensure_out()?;
        let mut search = if self.resume {
            match self.read_checkpoint()? {
                Checkpoint::Search { state } => Search::resume(&model, *state)?,
                _ => return Err(Error::Precondition("checkpoint is not from prune-search".into())),
            }
        } else {
            Search::new(&model, evaluator.as_mut(), self.config.search.clone())?
        };
        let save = |s: &Search| -> Result<()> {
            write_json(
                &self.checkpoint_path(),
                &Checkpoint::Search {
                    state: Box::new(s.state().clone()),
                },
            )?;
            write_trace_csv(self.out.join("trace.csv"), s.trace())
        };
        let mut done = 0;
        while !search.is_done() {
            if self.should_stop(done) {
                save(&search)?;
                eprintln!("stopped after {done} iterations at iteration {}", search.iteration());
                return Ok(());
            }
            search.step(evaluator.as_mut())?;
            done += 1;
            if search.iteration() % self.config.checkpoint_every == 0 {
                save(&search)?;
            }
        }
        save(&search)?;
        let outcome = search.outcome();
        let best = search.best_model()?;
        write_masks(best.masks(), self.out.join("masks.bin"))?;
        let final_result = evaluator.evaluate(&best, self.config.search.split)?;
        self.write_report(
            &best,
            &outcome.baseline,
            &final_result,
            json!({
                "iterations": search.iteration(),
                "best": outcome.best,
                "ranked_list": outcome.ranked.entries(),
            }),
        )?;
        eprintln!(
            "weighted sparsity {:.4}, top-1 {:.2} (baseline {:.2})",
            weighted_sparsity(&best),
            final_result.top1,
            outcome.baseline.top1
        );
        Ok(())
    }

    fn prune_retrain(&self) -> Result<()> {
        let model = self.model()?;
        let mut evaluator = self.evaluator(&model)?;
        self.ensure_out()?;
        let ck_dir = self.out.join("checkpoint");
        let mut retrainer = if self.resume {
            match self.read_checkpoint()? {
                Checkpoint::Retrain { config, state } => {
                    let current = load_snapshot(&ck_dir.join("model"))?;
                    let best_dir = ck_dir.join("best");
                    let best = if best_dir.exists() { Some(load_snapshot(&best_dir)?) } else { None };
                    Retrainer::resume(*config, *state, current, best)?
                }
                _ => return Err(Error::Precondition("checkpoint is not from prune-retrain".into())),
            }
        } else {
            Retrainer::new(model, evaluator.as_mut(), self.config.retrain.clone())?
        };
        let save = |r: &Retrainer| -> Result<()> {
            save_snapshot(r.model(), &ck_dir.join("model"))?;
            if let Some(b) = r.best_model() {
                save_snapshot(b, &ck_dir.join("best"))?;
            }
            write_json(
                &self.checkpoint_path(),
                &Checkpoint::Retrain {
                    config: Box::new(r.config().clone()),
                    state: Box::new(r.state().clone()),
                },
            )?;
            write_trace_csv(self.out.join("trace.csv"), &r.state().trace)
        };
        let mut done = 0;
        while !retrainer.is_done() {
            if self.should_stop(done) {
                save(&retrainer)?;
                eprintln!("stopped after {done} epochs");
                return Ok(());
            }
            retrainer.step_epoch(evaluator.as_mut())?;
            done += 1;
            if retrainer.state().epoch % self.config.checkpoint_every == 0 {
                save(&retrainer)?;
            }
        }
        save(&retrainer)?;
        let report = retrainer.report();
        let result = retrainer.result_model();
        save_snapshot(result, &self.out.join("model"))?;
        write_masks(result.masks(), self.out.join("masks.bin"))?;
        self.write_report(
            result,
            &report.baseline,
            &report.final_result,
            json!({
                "mode": report.mode,
                "epochs": report.epochs,
                "epoch_losses": report.epoch_losses,
            }),
        )?;
        eprintln!(
            "weighted sparsity {:.4}, top-1 {:.2} (baseline {:.2})",
            report.weighted_sparsity, report.final_result.top1, report.baseline.top1
        );
        Ok(())
    }

    fn prune_structural(&self) -> Result<()> {
        let mut model = self.model()?;
        let mut evaluator = self.evaluator(&model)?;
        self.ensure_out()?;
        let ck_dir = self.out.join("checkpoint");
        let (config, mut state) = if self.resume {
            match self.read_checkpoint()? {
                Checkpoint::Structural { config, state } => {
                    model = load_snapshot(&ck_dir.join("model"))?;
                    (config, *state)
                }
                _ => return Err(Error::Precondition("checkpoint is not from prune-structural".into())),
            }
        } else {
            let config = self.config.structural.clone();
            let state = start_structural(&model, evaluator.as_mut(), &config)?;
            (config, state)
        };
        let save = |model: &ModelSnapshot, state: &StructuralRunState| -> Result<()> {
            save_snapshot(model, &ck_dir.join("model"))?;
            write_json(
                &self.checkpoint_path(),
                &Checkpoint::Structural {
                    config: config.clone(),
                    state: Box::new(state.clone()),
                },
            )?;
            write_trace_csv(self.out.join("trace.csv"), &state.trace)
        };
        let mut done = 0;
        while !state.finished {
            if self.should_stop(done) {
                save(&model, &state)?;
                eprintln!("stopped after {done} iterations");
                return Ok(());
            }
            structural_iteration(&mut model, evaluator.as_mut(), &config, &mut state)?;
            done += 1;
            if state.iteration % self.config.checkpoint_every == 0 {
                save(&model, &state)?;
            }
        }
        save(&model, &state)?;
        save_snapshot(&model, &self.out.join("model"))?;
        write_masks(model.masks(), self.out.join("masks.bin"))?;
        let final_result = evaluator.evaluate(&model, Split::Test)?;
        let baseline = EvaluationResult {
            top1: state.baseline_top1,
            top5: None,
            samples: final_result.samples,
        };
        let summary = channel_summary(&model);
        self.write_report(
            &model,
            &baseline,
            &final_result,
            json!({
                "iterations": state.iteration,
                "removed_channels": state.removed_channels,
                "summary": summary,
            }),
        )?;
        eprintln!(
            "removed {:.1}% of conv channels, top-1 {:.2} (baseline {:.2})",
            100.0 * summary.channel_fraction_removed,
            final_result.top1,
            state.baseline_top1
        );
        Ok(())
    }

    fn analyze_filters(&self) -> Result<()> {
        let mut model = self.model()?;
        let mut evaluator = self.evaluator(&model)?;
        self.ensure_out()?;
        let cfg = &self.config.analysis;
        let layers = cfg.layers.clone().unwrap_or_else(|| analysis_layers(&model));
        let baseline = evaluator.evaluate(&model, cfg.split)?;
        let contributions = compute_filter_contributions(&model, evaluator.as_mut(), &layers)?;
        let profiles = compute_class_profiles(&model, evaluator.as_mut(), &layers)?;
        write_json(&self.out.join("contributions.json"), &contributions)?;
        write_json(&self.out.join("profiles.json"), &profiles)?;
        let outcome = refine_pruning(
            &mut model,
            evaluator.as_mut(),
            &contributions,
            &profiles,
            cfg.tau,
            cfg.budget,
            cfg.split,
        )?;
        write_masks(model.masks(), self.out.join("masks.bin"))?;
        let final_result = evaluator.evaluate(&model, cfg.split)?;
        self.write_report(&model, &baseline, &final_result, serde_json::to_value(&outcome).expect("serializes"))?;
        eprintln!(
            "weighted sparsity {:.4} -> {:.4}{}",
            outcome.before_sparsity,
            outcome.after_sparsity,
            if outcome.reverted { " (reverted)" } else { "" }
        );
        Ok(())
    }

    fn eval(&self, split: Split) -> Result<()> {
        let model = self.model()?;
        let mut evaluator = self.evaluator(&model)?;
        let result = evaluator.evaluate(&model, split)?;
        self.ensure_out()?;
        self.write_report(&model, &result, &result, json!({ "split": split }))?;
        let mut stdout = std::io::stdout();
        let _ = writeln!(
            stdout,
            "top1 {} top5 {} weighted_sparsity {}",
            result.top1,
            result.top5.map_or_else(|| "-".to_string(), |v| v.to_string()),
            weighted_sparsity(&model)
        );
        Ok(())
    }

    fn make_fixture(&self) -> Result<()> {
        self.config.fixture.validate()?;
        let meta = make_fixture(&self.config.fixture, &self.out)?;
        eprintln!(
            "fixture with {} parameters, baseline top-1 {:.2}",
            meta.parameters, meta.baseline.top1
        );
        Ok(())
    }

    fn serve(&self) -> Result<()> {
        let model = self.model()?;
        let path = self
            .config
            .dataset
            .as_ref()
            .ok_or_else(|| Error::Config("serve needs --dataset".into()))?;
        let data = load_dataset(path, self.config.validation_fraction)?;
        let builtin = match &self.config.evaluator {
            EvaluatorConfig::Builtin(cfg) => cfg.clone(),
            EvaluatorConfig::External(_) => {
                return Err(Error::Config("serve runs the built-in evaluator".into()))
            }
        };
        let mut server = BuiltinServer::new(model, BuiltinEvaluator::new(data, builtin), self.config.retrain.learning_rate);
        let stdin = std::io::stdin();
        serve(&mut server, BufReader::new(stdin.lock()), std::io::stdout().lock())
            .map_err(|e| Error::io("<stdio>", e))
    }
}
