//! Command-line front end: each subcommand reads a config plus artifacts
//! from a stack directory and writes artifacts and a JSON report back.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use shapegrasp::error::{Error, Result};
use shapegrasp::grasp::{read_grasp_dataset, write_grasp_dataset, CriticModel, CriticTrainLog, InputMode};
use shapegrasp::harness::{
    ablate_views, domain_shift, eval_policy, grasp_dataset, train_critic_model, train_shape_model,
    training_episodes, AblationReport, DomainShiftReport, ExperimentConfig, GraspMetrics, Policy, Report,
};
use shapegrasp::scenesim::{generate_episodes, read_episodes, write_episodes};
use shapegrasp::shapepred::{eval_shape_iou, ShapeDataset, ShapeEval, ShapeNetModel, ShapeTrainLog, ViewRegime};
use shapegrasp::tensor::{read_checkpoint, write_checkpoint, ParamSet};

pub const TRAIN_EPISODES_DIR: &str = "episodes/train";
pub const EVAL_EPISODES_DIR: &str = "episodes/eval";
pub const GRASP_DATA_DIR: &str = "grasp_data";
pub const SHAPE_CKPT: &str = "shape.ckpt";

pub fn critic_ckpt(mode: InputMode) -> String {
    format!("critic-{mode}.ckpt")
}

#[derive(Debug, Parser)]
#[command(name = "shapegrasp", version, about = "Shape prediction and grasp critic experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub args: CommonArgs,
}

#[derive(Debug, Default, Clone, clap::Args)]
pub struct CommonArgs {
    /// TOML config; omitted keys take the built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Stack directory for inputs and outputs; defaults to the config's
    /// data root.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub trials: Option<usize>,
    /// Shape view regime: 1, 2, 4 or full.
    #[arg(long, global = true)]
    pub views: Option<String>,
    /// full-cloud or partial-2.5d.
    #[arg(long, global = true)]
    pub input_mode: Option<String>,
    /// Trial-view depth noise; for domain-shift, the noisy arm's noise.
    #[arg(long, global = true)]
    pub noise_sigma: Option<f64>,
    #[arg(long, global = true)]
    pub hole_probability: Option<f64>,
    /// Build grasp data from ground-truth clouds instead of predictions.
    #[arg(long, global = true)]
    pub oracle_cloud: bool,
    #[arg(long, global = true, value_enum, default_value_t = PolicyKind::Critic)]
    pub policy: PolicyKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum PolicyKind {
    #[default]
    Critic,
    Oracle,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Render the training and held-out episode datasets.
    GenData,
    /// Train the shape predictor on the training episodes.
    TrainShape,
    /// Bounding-box and mask IOU of the shape predictor on held-out episodes.
    EvalShape,
    /// Label heuristic grasps for critic training.
    GenGraspData,
    /// Train the grasp critic for the configured input mode.
    TrainCritic,
    /// Run grasp trials with a policy.
    EvalGrasp,
    /// Train and score one shape model per view regime.
    AblateViews,
    /// Clean versus noisy trials for both critic input modes.
    DomainShift,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainShape => "train-shape",
            Command::EvalShape => "eval-shape",
            Command::GenGraspData => "gen-grasp-data",
            Command::TrainCritic => "train-critic",
            Command::EvalGrasp => "eval-grasp",
            Command::AblateViews => "ablate-views",
            Command::DomainShift => "domain-shift",
        }
    }
}

/// Process exit code for an error category.
pub fn exit_code(e: &Error) -> i32 {
    match e.category() {
        "validation" => 2,
        "path" => 3,
        "format" => 4,
        "data" => 5,
        "training" => 6,
        _ => 1,
    }
}

/// Config file plus flag overrides, validated.
pub fn resolve_config(command: Command, a: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(t) = a.trials {
        cfg.eval.trials = t;
    }
    if let Some(v) = &a.views {
        cfg.shape.regime = v.parse().map_err(|_| Error::config("shape.regime", format!("unknown view regime {v:?}")))?;
    }
    if let Some(m) = &a.input_mode {
        cfg.eval.input_mode = m.parse()?;
    }
    if command == Command::DomainShift {
        if let Some(s) = a.noise_sigma {
            cfg.noise.sigma = s;
        }
        if let Some(h) = a.hole_probability {
            cfg.noise.hole_probability = h;
        }
    } else {
        if let Some(s) = a.noise_sigma {
            cfg.eval.noise_sigma = s;
        }
        if let Some(h) = a.hole_probability {
            cfg.eval.hole_probability = h;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Files one command wrote, relative to the stack directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub report: PathBuf,
    pub artifacts: Vec<PathBuf>,
    pub summary: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenDataMetrics {
    pub train_episodes: usize,
    pub noisy_train_episodes: usize,
    pub eval_episodes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainShapeMetrics {
    pub regime: ViewRegime,
    pub objects: usize,
    pub samples: usize,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalShapeMetrics {
    pub regime: ViewRegime,
    pub objects: usize,
    pub eval: ShapeEval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraspDataMetrics {
    pub oracle_cloud: bool,
    pub objects: usize,
    pub records: usize,
    pub success_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainCriticMetrics {
    pub input_mode: InputMode,
    pub records: usize,
    pub final_loss: f64,
    pub final_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalGraspMetrics {
    pub input_mode: Option<InputMode>,
    pub noise_sigma: f64,
    pub hole_probability: f64,
    pub grasp: GraspMetrics,
}

#[derive(Serialize)]
struct Timing<'a> {
    command: &'a str,
    seconds: f64,
}

fn stack_dir(cfg: &ExperimentConfig, a: &CommonArgs) -> PathBuf {
    a.out.clone().unwrap_or_else(|| cfg.data_root())
}

fn save_params(path: &Path, params: &ParamSet) -> Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(params, &mut w)?;
    w.flush()?;
    Ok(())
}

fn load_params(path: &Path) -> Result<ParamSet> {
    if !path.is_file() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    read_checkpoint(BufReader::new(File::open(path)?), path)
}

fn load_shape(cfg: &ExperimentConfig, dir: &Path) -> Result<ShapeNetModel> {
    ShapeNetModel::from_params(cfg.shape_net_config(), load_params(&dir.join(SHAPE_CKPT))?)
}

fn load_critic(cfg: &ExperimentConfig, dir: &Path, mode: InputMode) -> Result<CriticModel> {
    CriticModel::from_checkpoint_params(cfg.critic_config(), mode, load_params(&dir.join(critic_ckpt(mode)))?)
}

fn load_episode_dir(dir: &Path) -> Result<Vec<shapegrasp::scenesim::Episode>> {
    if !dir.is_dir() {
        return Err(Error::MissingArtifact(dir.to_path_buf()));
    }
    read_episodes(dir)
}

fn shape_log_csv(log: &ShapeTrainLog) -> String {
    let mut s = String::from("epoch,step,loss,bbox,mask,clamp,reg\n");
    for e in &log.epochs {
        let _ = writeln!(s, "{},{},{},{},{},{},{}", e.epoch, e.step, e.loss, e.bbox, e.mask, e.clamp, e.reg);
    }
    s
}

fn critic_log_csv(log: &CriticTrainLog) -> String {
    let mut s = String::from("epoch,loss,accuracy\n");
    for e in &log.epochs {
        let _ = writeln!(s, "{},{},{}", e.epoch, e.loss, e.accuracy);
    }
    s
}

fn ablation_csv(r: &AblationReport) -> String {
    let mut s = String::from("regime,bbox_iou,mask_iou,same_view_iou,cross_view_iou,pairs\n");
    for g in &r.regimes {
        let e = &g.eval;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            g.regime, e.bbox_iou, e.mask_iou, e.same_view_iou, e.cross_view_iou, e.pairs
        );
    }
    s
}

struct Writer<'a> {
    dir: &'a Path,
    written: Vec<PathBuf>,
}

impl Writer<'_> {
    fn text(&mut self, name: &str, body: &str) -> Result<()> {
        let p = self.dir.join(name);
        if let Some(d) = p.parent() {
            fs::create_dir_all(d)?;
        }
        fs::write(&p, body)?;
        self.written.push(PathBuf::from(name));
        Ok(())
    }
}

/// Runs one subcommand to completion.
pub fn run(command: Command, args: &CommonArgs) -> Result<Outcome> {
    let cfg = resolve_config(command, args)?;
    let dir = stack_dir(&cfg, args);
    fs::create_dir_all(&dir)?;
    let started = Instant::now();
    let mut w = Writer {
        dir: &dir,
        written: Vec::new(),
    };
    let name = command.name();
    let (report, summary) = match command {
        Command::GenData => {
            let n = cfg.data.train_episodes;
            write_episodes(&dir.join(TRAIN_EPISODES_DIR), &training_episodes(&cfg, 0, n)?)?;
            w.written.push(TRAIN_EPISODES_DIR.into());
            let held_out = generate_episodes(cfg.eval_seed_base(), cfg.data.eval_episodes, &cfg.episode_config(false))?;
            write_episodes(&dir.join(EVAL_EPISODES_DIR), &held_out)?;
            w.written.push(EVAL_EPISODES_DIR.into());
            let m = GenDataMetrics {
                train_episodes: n,
                noisy_train_episodes: (0..n).filter(|&i| shapegrasp::harness::is_noisy(i, n, cfg.data.noisy_fraction)).count(),
                eval_episodes: held_out.len(),
            };
            let s = format!("{} training and {} held-out episodes", m.train_episodes, m.eval_episodes);
            (Report::new(name, &cfg, m).to_json()?, s)
        }
        Command::TrainShape => {
            let eps = load_episode_dir(&dir.join(TRAIN_EPISODES_DIR))?;
            let data = ShapeDataset::build(&eps, &cfg.shape_data_config(false))?;
            drop(eps);
            let (model, log) = train_shape_model(&cfg, &data, cfg.shape.regime)?;
            save_params(&dir.join(SHAPE_CKPT), &model.params)?;
            w.written.push(SHAPE_CKPT.into());
            w.text("train-shape.csv", &shape_log_csv(&log))?;
            let m = TrainShapeMetrics {
                regime: cfg.shape.regime,
                objects: data.len(),
                samples: log.samples,
                final_loss: log.epochs.last().map_or(f64::NAN, |e| e.loss),
            };
            let s = format!("regime {} final loss {:.4}", m.regime, m.final_loss);
            (Report::new(name, &cfg, m).to_json()?, s)
        }
        Command::EvalShape => {
            let model = load_shape(&cfg, &dir)?;
            let eps = load_episode_dir(&dir.join(EVAL_EPISODES_DIR))?;
            let data = ShapeDataset::build(&eps, &cfg.shape_data_config(true))?;
            let m = EvalShapeMetrics {
                regime: cfg.shape.regime,
                objects: data.len(),
                eval: eval_shape_iou(&model, &data)?,
            };
            let s = format!("bbox IOU {:.4} mask IOU {:.4}", m.eval.bbox_iou, m.eval.mask_iou);
            (Report::new(name, &cfg, m).to_json()?, s)
        }
        Command::GenGraspData => {
            let shape = if args.oracle_cloud { None } else { Some(load_shape(&cfg, &dir)?) };
            let data = grasp_dataset(&cfg, shape.as_ref())?;
            write_grasp_dataset(&dir.join(GRASP_DATA_DIR), &data)?;
            w.written.push(GRASP_DATA_DIR.into());
            let m = GraspDataMetrics {
                oracle_cloud: args.oracle_cloud,
                objects: data.clouds.len(),
                records: data.records.len(),
                success_rate: data.success_rate(),
            };
            let s = format!("{} grasps on {} objects, {:.3} successful", m.records, m.objects, m.success_rate);
            (Report::new(name, &cfg, m).to_json()?, s)
        }
        Command::TrainCritic => {
            let mode = cfg.eval.input_mode;
            let data = read_grasp_dataset(&dir.join(GRASP_DATA_DIR))?;
            let (critic, log) = train_critic_model(&cfg, &data, mode)?;
            let ckpt = critic_ckpt(mode);
            save_params(&dir.join(&ckpt), &critic.to_checkpoint_params()?)?;
            w.written.push(ckpt.into());
            w.text(&format!("train-critic-{mode}.csv"), &critic_log_csv(&log))?;
            let last = log.epochs.last();
            let m = TrainCriticMetrics {
                input_mode: mode,
                records: data.records.len(),
                final_loss: last.map_or(f64::NAN, |e| e.loss),
                final_accuracy: last.map_or(f64::NAN, |e| e.accuracy),
            };
            let s = format!("{mode} critic loss {:.4} accuracy {:.3}", m.final_loss, m.final_accuracy);
            (Report::new(&format!("{name}-{mode}"), &cfg, m).to_json()?, s)
        }
        Command::EvalGrasp => {
            let mode = cfg.eval.input_mode;
            let critic;
            let shape;
            let policy = match args.policy {
                PolicyKind::Oracle => Policy::OracleScorer,
                PolicyKind::Random => Policy::Random,
                PolicyKind::Critic => {
                    critic = load_critic(&cfg, &dir, mode)?;
                    shape = match mode {
                        InputMode::FullCloud => Some(load_shape(&cfg, &dir)?),
                        InputMode::Partial25D => None,
                    };
                    Policy::Critic {
                        critic: &critic,
                        shape: shape.as_ref(),
                    }
                }
            };
            let (grasp, trials) = eval_policy(&cfg, policy)?;
            let mut lines = String::new();
            for t in &trials {
                lines.push_str(&serde_json::to_string(t)?);
                lines.push('\n');
            }
            w.text(&format!("eval-grasp-{}.trials.jsonl", grasp.policy), &lines)?;
            let m = EvalGraspMetrics {
                input_mode: (args.policy == PolicyKind::Critic).then_some(mode),
                noise_sigma: cfg.eval.noise_sigma,
                hole_probability: cfg.eval.hole_probability,
                grasp,
            };
            let s = format!(
                "{}: {}/{} successes, rate {:.3} [{:.3}, {:.3}]",
                m.grasp.policy, m.grasp.successes, m.grasp.trials, m.grasp.success_rate, m.grasp.wilson_low, m.grasp.wilson_high
            );
            (Report::new(&format!("{name}-{}", m.grasp.policy), &cfg, m).to_json()?, s)
        }
        Command::AblateViews => {
            let r = ablate_views(&cfg, &[ViewRegime::One, ViewRegime::Two, ViewRegime::Four, ViewRegime::Full])?;
            w.text("ablate-views.csv", &ablation_csv(&r))?;
            let s = r
                .regimes
                .iter()
                .map(|g| format!("IOU({}) {:.4}", g.regime, g.eval.bbox_iou))
                .collect::<Vec<_>>()
                .join(", ");
            (Report::<AblationReport>::new(name, &cfg, r).to_json()?, s)
        }
        Command::DomainShift => {
            let shape = load_shape(&cfg, &dir)?;
            let full = load_critic(&cfg, &dir, InputMode::FullCloud)?;
            let partial = load_critic(&cfg, &dir, InputMode::Partial25D)?;
            let r = domain_shift(&cfg, &shape, &full, &partial)?;
            let s = format!(
                "full-cloud {:.3} -> {:.3}, partial {:.3} -> {:.3}, gap {:+.3}",
                r.full_cloud.clean.success_rate,
                r.full_cloud.noisy.success_rate,
                r.partial.clean.success_rate,
                r.partial.noisy.success_rate,
                r.robustness_gap
            );
            (Report::<DomainShiftReport>::new(name, &cfg, r).to_json()?, s)
        }
    };
    let stem = report_stem(command, &cfg, args);
    let report_name = format!("{stem}.json");
    w.text(&report_name, &report)?;
    let timing = serde_json::to_string_pretty(&Timing {
        command: name,
        seconds: started.elapsed().as_secs_f64(),
    })?;
    w.text(&format!("{stem}.timing.json"), &(timing + "\n"))?;
    Ok(Outcome {
        report: report_name.into(),
        artifacts: w.written,
        summary,
    })
}

fn report_stem(command: Command, cfg: &ExperimentConfig, args: &CommonArgs) -> String {
    match command {
        Command::TrainCritic => format!("train-critic-{}", cfg.eval.input_mode),
        Command::EvalGrasp => match args.policy {
            PolicyKind::Critic => format!("eval-grasp-critic-{}", cfg.eval.input_mode),
            PolicyKind::Oracle => "eval-grasp-oracle".into(),
            PolicyKind::Random => "eval-grasp-random".into(),
        },
        c => c.name().into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args() -> CommonArgs {
        CommonArgs::default()
    }

    #[test]
    fn flags_override_the_config() {
        let a = CommonArgs {
            seed: Some(9),
            trials: Some(12),
            views: Some("2".into()),
            input_mode: Some("partial-2.5d".into()),
            noise_sigma: Some(0.003),
            ..args()
        };
        let c = resolve_config(Command::EvalGrasp, &a).unwrap();
        assert_eq!((c.seed, c.eval.trials, c.shape.regime), (9, 12, ViewRegime::Two));
        assert_eq!(c.eval.input_mode, InputMode::Partial25D);
        assert_eq!(c.eval.noise_sigma, 0.003);
        let d = resolve_config(Command::DomainShift, &a).unwrap();
        assert_eq!((d.noise.sigma, d.eval.noise_sigma), (0.003, 0.0));
    }

    #[test]
    fn bad_flags_are_validation_errors() {
        let e = resolve_config(Command::EvalShape, &CommonArgs { views: Some("3".into()), ..args() }).unwrap_err();
        assert_eq!(exit_code(&e), 2);
        let e = resolve_config(Command::EvalGrasp, &CommonArgs { noise_sigma: Some(-1.0), ..args() }).unwrap_err();
        assert_eq!(exit_code(&e), 2, "{e}");
    }

    #[test]
    fn missing_inputs_are_path_errors() {
        let tmp = tempfile::tempdir().unwrap();
        let a = CommonArgs {
            out: Some(tmp.path().to_path_buf()),
            ..args()
        };
        for c in [Command::TrainShape, Command::EvalShape, Command::TrainCritic, Command::DomainShift] {
            let e = run(c, &a).unwrap_err();
            assert_eq!(exit_code(&e), 3, "{c:?}: {e}");
        }
    }

    #[test]
    fn every_command_has_a_distinct_name() {
        let all = [
            Command::GenData,
            Command::TrainShape,
            Command::EvalShape,
            Command::GenGraspData,
            Command::TrainCritic,
            Command::EvalGrasp,
            Command::AblateViews,
            Command::DomainShift,
        ];
        let names: std::collections::HashSet<_> = all.iter().map(|c| c.name()).collect();
        assert_eq!(names.len(), all.len());
        Cli::parse_from(["shapegrasp", "eval-grasp", "--trials", "3", "--policy", "random"]);
    }
}
