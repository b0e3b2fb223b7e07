//! The `myoband` command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use myoband::harness::{
    breakdown_by_speed, build_corpus_features, corpus_features_from_recordings, run_benchmark, sweep_intensity, BenchmarkSpec,
    CorpusSpec, ResultGrid, SweepSpec,
};
use myoband::models::{train, Hyper, ModelKind};
use myoband::online::{online_training_set, run_online_session, OnlineConfig, OnlineEvent};
use myoband::preprocess::{ClassSet, PreprocessConfig, Preprocessor, SplitKind};
use myoband::quality::{quality_report, report_csv};
use myoband::recording::{paradigm_schedule, read_recording, session_path, write_recording, Recording, Schedule};
use myoband::synth::{synth_session_with, SessionParams, SimulatedWristband, SubjectBehavior};

use crate::config::{ServiceConfig, ENV_CONFIG};
use crate::http;
use crate::session::Controller;

#[derive(Debug, Parser)]
#[command(name = "myoband", version, about = "Simulated sEMG wristband workbench")]
pub struct Cli {
    /// TOML service configuration.
    #[arg(long, global = true, env = ENV_CONFIG)]
    pub config: Option<PathBuf>,
    /// Overrides the configured data directory.
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Benchmark grid and intensity sweep.
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Synthetic recordings.
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Run the HTTP and stream service.
    Serve {
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        bind: Option<String>,
    },
    /// Signal-quality metrics.
    #[command(subcommand)]
    Quality(QualityCommand),
    /// Online decoding tests.
    #[command(subcommand)]
    Online(OnlineCommand),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Sd,
    Cd,
    Cs,
}

impl From<SplitArg> for SplitKind {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Sd => SplitKind::SingleDay,
            SplitArg::Cd => SplitKind::CrossDay,
            SplitArg::Cs => SplitKind::CrossSubject,
        }
    }
}

fn parse_model(s: &str) -> Result<ModelKind, String> {
    ModelKind::parse(s).ok_or_else(|| format!("unknown model {s:?}; use lda, nb, knn, svm or rf"))
}

fn parse_classes(s: &str) -> Result<ClassSet, String> {
    s.parse().ok().and_then(ClassSet::from_count).ok_or_else(|| format!("classes must be 6 or 12, got {s:?}"))
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    #[arg(long, default_value_t = 10)]
    pub subjects: u32,
    /// Read `S??/D?/session.dat` from the data directory instead of synthesizing.
    #[arg(long)]
    pub from_data: bool,
}

#[derive(Debug, Subcommand)]
pub enum BenchCommand {
    /// Evaluate models over splits, windows and class sets; each axis
    /// defaults to all values.
    Run {
        #[arg(long, value_enum)]
        split: Vec<SplitArg>,
        #[arg(long, value_parser = parse_classes)]
        classes: Vec<ClassSet>,
        #[arg(long, value_parser = ["250", "500", "750"])]
        window: Vec<String>,
        #[arg(long, value_parser = parse_model)]
        model: Vec<ModelKind>,
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Output directory; defaults to `<data dir>/bench`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the tables of a finished run.
    Report {
        /// Directory holding `results.json`; defaults to `<data dir>/bench`.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Accuracy against contraction intensity.
    Sweep {
        #[arg(long, default_value = "lda", value_parser = parse_model)]
        model: ModelKind,
        #[arg(long, default_value_t = 250)]
        window: u32,
        #[arg(long, default_value = "12", value_parser = parse_classes)]
        classes: ClassSet,
        #[arg(long, default_value_t = 10)]
        subjects: u32,
    },
}

#[derive(Debug, Subcommand)]
pub enum SynthCommand {
    /// Write synthetic sessions into the data directory.
    Generate {
        #[arg(long, default_value_t = 10)]
        subjects: u32,
        #[arg(long, default_value_t = 2)]
        days: u32,
        /// Electrode rotation per day after the first.
        #[arg(long, default_value_t = 1)]
        shift: usize,
        /// Blocks per session, from the start of the paradigm.
        #[arg(long, default_value_t = 12)]
        blocks: usize,
    },
}

#[derive(Debug, Subcommand)]
pub enum QualityCommand {
    /// SNR, SMR and Omega per force mode, as `mean (std)` over subjects.
    Report {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Blocks per synthesized session.
        #[arg(long, default_value_t = 4)]
        blocks: usize,
        /// Also write the CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum OnlineCommand {
    /// Cued online test against a simulated subject.
    Simulate {
        #[arg(long, default_value_t = 1)]
        subject: u32,
        #[arg(long, default_value = "rf", value_parser = parse_model)]
        model: ModelKind,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 250.0)]
        window: f64,
        #[arg(long, default_value_t = 250.0)]
        step: f64,
        #[arg(long, default_value = "6", value_parser = parse_classes)]
        classes: ClassSet,
        /// Calibration blocks from the subject's day-1 session.
        #[arg(long, default_value_t = 12)]
        train_blocks: usize,
        /// Speed relative to real time; `inf` runs unpaced.
        #[arg(long, default_value_t = f64::INFINITY)]
        rate: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Print the session as JSON.
        #[arg(long)]
        json: bool,
    },
}

impl Cli {
    pub fn service_config(&self) -> anyhow::Result<ServiceConfig> {
        let mut cfg = ServiceConfig::load(self.config.as_deref(), |k| std::env::var(k).ok())?;
        if let Some(d) = &self.data_dir {
            cfg.data_dir = d.clone();
        }
        Ok(cfg)
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = cli.service_config()?;
    match cli.command {
        Command::Bench(b) => bench(&cfg, b),
        Command::Synth(SynthCommand::Generate { subjects, days, shift, blocks }) => generate(&cfg, subjects, days, shift, blocks),
        Command::Serve { port, bind } => {
            let mut cfg = cfg;
            if let Some(p) = port {
                cfg.port = p;
            }
            if let Some(b) = bind {
                cfg.bind = b;
            }
            serve(cfg)
        }
        Command::Quality(QualityCommand::Report { corpus, blocks, out }) => quality(&cfg, &corpus, blocks, out.as_deref()),
        Command::Online(o) => online(&cfg, o),
    }
}

fn schedule_blocks(blocks: usize) -> anyhow::Result<Schedule> {
    let mut s = paradigm_schedule();
    if blocks == 0 || blocks > s.blocks.len() {
        bail!("blocks must be in 1..={}", s.blocks.len());
    }
    s.blocks.truncate(blocks);
    Ok(s)
}

/// Every `S??/D?/session.dat` under `dir`, in path order.
pub fn find_sessions(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let subjects = fs::read_dir(dir).with_context(|| format!("read {}", dir.display()))?;
    for s in subjects {
        let s = s?.path();
        if !s.is_dir() {
            continue;
        }
        for d in fs::read_dir(&s)? {
            let dat = d?.path().join("session.dat");
            if dat.is_file() {
                out.push(dat);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn load_sessions(dir: &Path, max_subject: u32, day: Option<u32>) -> anyhow::Result<Vec<Recording>> {
    let mut recs = Vec::new();
    for path in find_sessions(dir)? {
        let rec = read_recording(&path)?;
        if rec.meta.subject_id <= max_subject && day.map_or(true, |d| rec.meta.day_id == d) {
            recs.push(rec);
        }
    }
    if recs.is_empty() {
        bail!("no sessions found under {}", dir.display());
    }
    Ok(recs)
}

fn bench(cfg: &ServiceConfig, cmd: BenchCommand) -> anyhow::Result<()> {
    let pre_cfg = PreprocessConfig::default();
    let pre = Preprocessor::new(pre_cfg.clone())?;
    match cmd {
        BenchCommand::Run { split, classes, window, model, corpus, out } => {
            let defaults = BenchmarkSpec::default();
            let spec = BenchmarkSpec {
                models: if model.is_empty() { defaults.models } else { model },
                splits: if split.is_empty() { defaults.splits } else { split.into_iter().map(Into::into).collect() },
                windows_ms: if window.is_empty() { defaults.windows_ms } else { window.iter().map(|w| w.parse().expect("validated")).collect() },
                classes: if classes.is_empty() { defaults.classes } else { classes },
                ..defaults
            };
            let t = Instant::now();
            let (features, corpus_spec) = if corpus.from_data {
                let recs = load_sessions(&cfg.data_dir, corpus.subjects, None)?;
                (corpus_features_from_recordings(&recs, &pre, &spec.windows_ms)?, None)
            } else {
                let cs = CorpusSpec { n_subjects: corpus.subjects, synth: cfg.synth()?, ..CorpusSpec::default() };
                (build_corpus_features(&cs, &paradigm_schedule(), &pre, &spec.windows_ms, None)?, Some(cs))
            };
            eprintln!("features ready in {:.1} s", t.elapsed().as_secs_f64());
            let grid = run_benchmark(&features, &spec, &pre_cfg, corpus_spec.as_ref())?;
            let dir = out.unwrap_or_else(|| cfg.data_dir.join("bench"));
            grid.write_outputs(&dir)?;
            print!("{}", grid.to_table_csv());
            eprintln!("wrote {} ({:.1} s)", dir.display(), t.elapsed().as_secs_f64());
            Ok(())
        }
        BenchCommand::Report { dir } => {
            let dir = dir.unwrap_or_else(|| cfg.data_dir.join("bench"));
            let path = dir.join("results.json");
            let text = fs::read_to_string(&path).with_context(|| format!("read {}", path.display()))?;
            let grid: ResultGrid = serde_json::from_str(&text).with_context(|| format!("parse {}", path.display()))?;
            print!("{}", report(&grid));
            Ok(())
        }
        BenchCommand::Sweep { model, window, classes, subjects } => {
            let spec = SweepSpec { model, window_ms: window, classes, subjects: (1..=subjects).collect(), ..SweepSpec::default() };
            let sweep = sweep_intensity(&cfg.synth()?, &spec, &pre, &Hyper::default())?;
            print!("{}", sweep.to_csv());
            println!("spearman_rho,{:.4}\nconcave,{}", sweep.spearman_rho, sweep.is_concave());
            Ok(())
        }
    }
}

/// Accuracy table followed by the per-speed breakdown of every cell.
pub fn report(grid: &ResultGrid) -> String {
    let mut out = grid.to_table_csv();
    out.push_str("\nmodel,split,window_ms,classes,mixed,0km/h,4km/h,6km/h,8km/h,max_gap,pooled_std\n");
    for cell in &grid.cells {
        if cell.summary.is_none() {
            continue;
        }
        let b = breakdown_by_speed(cell);
        let speeds: Vec<String> = [0u8, 4, 6, 8]
            .iter()
            .map(|s| b.per_speed.get(s).map_or("absent".to_string(), |v| v.paper_format(4)))
            .collect();
        out.push_str(&format!(
            "{},{},{},{},{},{},{:.4},{:.4}\n",
            cell.key.model,
            cell.key.split.abbrev(),
            cell.key.window_ms,
            cell.key.classes.count(),
            b.mixed.paper_format(4),
            speeds.join(","),
            b.max_gap(),
            b.pooled_std()
        ));
    }
    out
}

fn generate(cfg: &ServiceConfig, subjects: u32, days: u32, shift: usize, blocks: usize) -> anyhow::Result<()> {
    let synth = cfg.synth()?;
    let schedule = schedule_blocks(blocks)?;
    let spec = CorpusSpec { n_subjects: subjects, days, day2_shift: shift, synth: synth.clone() };
    for p in spec.sessions() {
        let rec = synth_session_with(&synth, &schedule, p)?;
        let path = session_path(&cfg.data_dir, p.subject_id, p.day_id);
        write_recording(&rec, &path)?;
        println!("{} rows={} shift={}", path.display(), rec.rows(), p.wearing_shift);
    }
    Ok(())
}

fn quality(cfg: &ServiceConfig, corpus: &CorpusArgs, blocks: usize, out: Option<&Path>) -> anyhow::Result<()> {
    let pre = Preprocessor::new(PreprocessConfig::default())?;
    let recs = if corpus.from_data {
        load_sessions(&cfg.data_dir, corpus.subjects, Some(1))?
    } else {
        let synth = cfg.synth()?;
        let schedule = schedule_blocks(blocks)?;
        (1..=corpus.subjects)
            .map(|s| synth_session_with(&synth, &schedule, SessionParams { subject_id: s, day_id: 1, wearing_shift: 0 }))
            .collect::<Result<Vec<_>, _>>()?
    };
    let csv = report_csv(&quality_report(&recs, &pre)?);
    if let Some(p) = out {
        fs::write(p, &csv).with_context(|| format!("write {}", p.display()))?;
    }
    print!("{csv}");
    Ok(())
}

fn online(cfg: &ServiceConfig, cmd: OnlineCommand) -> anyhow::Result<()> {
    let OnlineCommand::Simulate { subject, model, trials, window, step, classes, train_blocks, rate, seed, json } = cmd;
    let synth = cfg.synth()?;
    let oc = OnlineConfig { window_ms: window, step_ms: step, n_trials: trials, classes, seed, ..OnlineConfig::default() };
    let p = SessionParams { subject_id: subject, day_id: 1, wearing_shift: 0 };
    let rec = synth_session_with(&synth, &schedule_blocks(train_blocks)?, p)?;
    let (x, y) = online_training_set(std::slice::from_ref(&rec), oc.window_ms, oc.step_ms, oc.classes, &oc.preprocess)?;
    let trained = train(model, x.view(), &y, &Hyper::default(), seed)?;
    let mut band = SimulatedWristband::new(&synth, p, 0, SubjectBehavior::default(), rate)?;
    let session = run_online_session(&mut band, &trained, &oc, &mut |e| {
        if let (false, OnlineEvent::TrialResult(t)) = (json, e) {
            println!(
                "trial {:>3} cued {:>2} predicted {:>4} dt {}",
                t.trial,
                t.cued_mode,
                t.predicted_mode.map_or("-".into(), |m| m.to_string()),
                t.delta_t_s.map_or("timeout".into(), |d| format!("{d:.3} s"))
            );
        }
    })?;
    if json {
        println!("{}", serde_json::to_string_pretty(&session)?);
    } else {
        let s = &session.summary;
        println!(
            "{model}: accuracy {:.3} ({}/{}), mean dt {}, latency mean {:.3} ms max {:.3} ms (budget {} ms){}",
            s.accuracy,
            s.correct,
            s.n_trials,
            s.mean_delta_t_s.map_or("n/a".into(), |d| format!("{d:.3} s")),
            s.latency.mean_ms,
            s.latency.max_ms,
            s.latency.budget_ms,
            s.aborted.as_ref().map_or(String::new(), |a| format!(", aborted: {a}"))
        );
    }
    Ok(())
}

fn serve(cfg: ServiceConfig) -> anyhow::Result<()> {
    let synth = cfg.synth()?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((cfg.bind.as_str(), cfg.port))
            .await
            .with_context(|| format!("bind {}:{}", cfg.bind, cfg.port))?;
        tracing::info!("listening on {} (data dir {})", listener.local_addr()?, cfg.data_dir.display());
        let controller = Controller::new(cfg, synth);
        http::serve(controller, listener, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
        Ok(())
    })
}
