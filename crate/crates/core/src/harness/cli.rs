//! Command line front end.
//!
//! Every command reads the scenario file (if given), applies flag overrides,
//! resolves it, and works inside the `--out` directory:
//!
//! | command | reads | writes |
//! |---|---|---|
//! | `gen-data` | | `dataset.csv`, `marginals.json` |
//! | `train-scorer` | dataset | `scorer.bin` |
//! | `train-recommender` | scorer | `recommender.bin`, `recommender_training.csv` |
//! | `train-predictor` | scorer, generator | `predictor.bin`, `predictor_training.csv` |
//! | `evaluate` | scorer, generator, goal policy | `eval_steps.csv`, `eval_summary.csv`, `eval_generators.csv` |
//! | `sweep` | scorer, generator | `sweep/` |
//! | `horizon-study` | scorer, generator | `horizon/` |
//! | `report` | any of the above | `report/` |

use std::ffi::OsString;
use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Parser, Subcommand};

use super::config::{stage_seed, ExperimentConfig, GoalChoice, STAGE_COMPARISON};
use super::eval::{compare_generators, comparison_candidates, run_evaluation, write_comparison, write_steps, write_summary, EvalSetup};
use super::report::emit_report;
use super::sweep::{run_horizon_study, run_pareto_sweep, write_training, SweepSetup};
use crate::baselines::Generator;
use crate::error::{Error, Result};
use crate::predictor::{train_predictor, CounterfactualSource, GoalPolicy, Predictor};
use crate::recommender::{train_recommender, write_diagnostics, Recommender};
use crate::scorer::{generate_dataset, train_score_model, FeatureMarginals, LabeledDataset, ScoreModel};

#[derive(Debug, Parser)]
#[command(name = "recourse", about = "Hierarchical recourse simulation and training")]
pub struct Cli {
    /// Master seed; overrides the file value.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Scenario file (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Full-size training budgets.
    #[arg(long = "paper-scale", global = true)]
    pub full_scale: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    GenData,
    TrainScorer,
    TrainRecommender,
    TrainPredictor,
    Evaluate,
    Sweep,
    HorizonStudy,
    Report,
}

/// Loads and resolves the scenario with flag overrides applied.
pub fn scenario(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.full_scale {
        cfg.apply_full_scale();
    }
    cfg.resolve()?;
    Ok(cfg)
}

struct Run {
    cfg: ExperimentConfig,
    dir: PathBuf,
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn marginals(&self) -> Result<Arc<FeatureMarginals>> {
        Ok(Arc::new(FeatureMarginals::load_json(&self.path("marginals.json"))?))
    }

    fn model(&self) -> Result<Arc<ScoreModel>> {
        Ok(Arc::new(ScoreModel::load(&self.path("scorer.bin"))?))
    }

    fn source(&self, generator: Generator) -> Result<CounterfactualSource> {
        Ok(match generator {
            Generator::Ours => CounterfactualSource::Learned(Arc::new(Recommender::load(&self.path("recommender.bin"))?)),
            Generator::Ustun => CounterfactualSource::Ustun,
            Generator::Wachter => CounterfactualSource::Wachter(self.cfg.wachter.clone()),
            Generator::Dice => CounterfactualSource::Dice(self.cfg.dice.clone()),
        })
    }

    fn goals(&self) -> Result<GoalPolicy> {
        Ok(match self.cfg.goal_policy {
            GoalChoice::Trivial => GoalPolicy::Trivial,
            GoalChoice::Trained => GoalPolicy::Learned(Arc::new(Predictor::load(&self.path("predictor.bin"))?)),
        })
    }

    fn eval_setup(&self, goals: GoalPolicy) -> Result<EvalSetup> {
        Ok(EvalSetup {
            env: self.cfg.env.clone(),
            model: self.model()?,
            marginals: self.marginals()?,
            goals,
            source: self.source(self.cfg.generator)?,
            reward: self.cfg.reward.clone(),
        })
    }

    fn sweep_setup(&self) -> Result<SweepSetup> {
        Ok(SweepSetup {
            model: self.model()?,
            marginals: self.marginals()?,
            source: self.source(self.cfg.generator)?,
            predictor: self.cfg.predictor.clone(),
            eval: self.eval_setup(GoalPolicy::Trivial)?,
            episodes: self.cfg.evaluation.episodes,
            threads: self.cfg.sweep.threads,
        })
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>> {
        Ok(BufWriter::new(File::create(self.path(name))?))
    }
}

/// Executes one command.
pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = scenario(cli)?;
    std::fs::create_dir_all(&cli.out)?;
    let run = Run { cfg, dir: cli.out.clone() };
    std::fs::write(run.path("config.resolved.toml"), run.cfg.to_toml_string())?;
    match cli.command {
        Command::GenData => {
            let data = generate_dataset(&run.cfg.dataset)?;
            data.write_csv(run.create("dataset.csv")?)?;
            data.marginals.save_json(&run.path("marginals.json"))?;
            log::info!("wrote {} examples", data.len());
        }
        Command::TrainScorer => {
            let path = run.path("dataset.csv");
            if !path.exists() {
                return Err(Error::MissingCheckpoint(path));
            }
            let data = LabeledDataset::read_csv(File::open(&path)?, (*run.marginals()?).clone())?;
            let model = train_score_model(&data, run.cfg.scorer.epochs, run.cfg.scorer.lr)?;
            log::info!("score model training accuracy {:.4}", model.accuracy(&data));
            model.save(&run.path("scorer.bin"))?;
        }
        Command::TrainRecommender => {
            let (model, marginals) = (run.model()?, run.marginals()?);
            let (rec, diag) = train_recommender(&model, &marginals, &run.cfg.recommender)?;
            rec.save(&run.path("recommender.bin"))?;
            write_diagnostics(&diag, run.create("recommender_training.csv")?)?;
            log::info!("difficulty estimate error {:.4}", rec.estimator.total_error(&run.cfg.recommender.behavior.difficulties));
        }
        Command::TrainPredictor => {
            let (model, marginals) = (run.model()?, run.marginals()?);
            let source = run.source(run.cfg.generator)?;
            let (pred, rows) = train_predictor(&model, &marginals, &source, &run.cfg.predictor)?;
            pred.save(&run.path("predictor.bin"))?;
            write_training(&run.path("predictor_training.csv"), &rows)?;
        }
        Command::Evaluate => {
            let setup = run.eval_setup(run.goals()?)?;
            let eval = run_evaluation(&setup, run.cfg.evaluation.episodes)?;
            write_steps(&eval.steps, run.create("eval_steps.csv")?)?;
            write_summary(&eval.summary, run.create("eval_summary.csv")?)?;
            let compare = &run.cfg.evaluation.compare;
            if !compare.is_empty() && run.cfg.evaluation.comparison_candidates > 0 {
                let seed = stage_seed(run.cfg.seed, STAGE_COMPARISON);
                let cands = comparison_candidates(
                    &setup.model,
                    &setup.marginals,
                    &run.cfg.recommender,
                    run.cfg.evaluation.comparison_candidates,
                    seed,
                )?;
                let sources = compare.iter().map(|&g| run.source(g)).collect::<Result<Vec<_>>>()?;
                let rows = compare_generators(&setup.model, &cands, &run.cfg.env.behavior.difficulties, &sources)?;
                write_comparison(&rows, run.create("eval_generators.csv")?)?;
            }
            for r in &eval.summary {
                log::info!("{}: mean {:?} std {:?}", r.metric, r.mean, r.std);
            }
        }
        Command::Sweep => {
            let dir = run.path("sweep");
            std::fs::create_dir_all(&dir)?;
            let points = run_pareto_sweep(&run.sweep_setup()?, &run.cfg.sweep.grid, Some(&dir))?;
            let failed = points.iter().filter(|p| p.failed).count();
            log::info!("sweep finished: {} points, {failed} failed", points.len());
        }
        Command::HorizonStudy => {
            let dir = run.path("horizon");
            std::fs::create_dir_all(&dir)?;
            let s = &run.cfg.sweep;
            run_horizon_study(&run.sweep_setup()?, &s.grid, &s.horizons, s.rr_target, s.rr_tolerance, Some(&dir))?;
        }
        Command::Report => {
            let files = emit_report(&run.dir, &run.path("report"))?;
            log::info!("wrote {} report files", files.len());
        }
    }
    Ok(())
}

/// Parses arguments, runs, and maps the outcome to a process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
