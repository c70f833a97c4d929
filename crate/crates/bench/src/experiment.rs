//! Full incremental runs over a synthetic schedule, and ablation sweeps.

use std::io::Write;
use std::time::Instant;

use ifss_core::eaus::UpdateTrace;
use ifss_core::membank::ClassId;
use ifss_core::pipeline::{train_base, train_base_cycling, Learner, Model, TrainLog};

use crate::config::{EmbeddingConfig, ExperimentConfig, Role, Scope, StrategyConfig, StrategyKind};
use crate::metrics::{label_from_mask, miou, IouAccumulator};
use crate::schedule::{build_schedule_split, render_refs, SessionSchedule};
use crate::taxonomy::{gen_taxonomy, render_sample, Taxonomy};
use crate::{mix_seed, BenchError, Context, Result};

pub const REPORT_HEADER: [&str; 8] = ["session", "class_id", "group", "iou", "base_miou", "new_miou", "mean_miou", "ms_per_frame"];
pub const ABLATION_HEADER: [&str; 7] = ["axis", "setting", "repeat", "base_miou", "new_miou", "mean_miou", "ms_per_frame"];

#[derive(Clone, Debug, PartialEq)]
pub struct ClassEval {
    pub class_id: ClassId,
    pub group: usize,
    /// Session in which the class was introduced.
    pub learned_in: usize,
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionEval {
    pub session: usize,
    pub classes: Vec<ClassEval>,
    pub ms_per_frame: f64,
}

impl SessionEval {
    fn miou_where(&self, keep: impl Fn(&ClassEval) -> bool) -> Option<f64> {
        miou(self.classes.iter().filter(|c| keep(c)).map(|c| c.iou))
    }

    /// Classes of the base session.
    pub fn base_miou(&self) -> Option<f64> {
        self.miou_where(|c| c.learned_in == 0)
    }

    /// Every class introduced after the base session.
    pub fn new_miou(&self) -> Option<f64> {
        self.miou_where(|c| c.learned_in > 0)
    }

    /// Classes known before this session began.
    pub fn prior_miou(&self) -> Option<f64> {
        self.miou_where(|c| c.learned_in < self.session)
    }

    /// Classes introduced in this session.
    pub fn latest_miou(&self) -> Option<f64> {
        self.miou_where(|c| c.learned_in == self.session)
    }

    pub fn mean_miou(&self) -> Option<f64> {
        self.miou_where(|_| true)
    }
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub seed: u64,
    pub sessions: Vec<SessionEval>,
    pub train_log: TrainLog,
    /// Strategy trace of every session, base session first.
    pub traces: Vec<UpdateTrace>,
}

impl RunReport {
    pub fn last(&self) -> &SessionEval {
        self.sessions.last().expect("runs evaluate at least the base session")
    }
}

/// Final-session aggregates of one run or averaged over runs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub base_miou: Option<f64>,
    pub new_miou: Option<f64>,
    pub mean_miou: Option<f64>,
    pub ms_per_frame: f64,
}

impl Summary {
    fn of(s: &SessionEval) -> Self {
        Self {
            base_miou: s.base_miou(),
            new_miou: s.new_miou(),
            mean_miou: s.mean_miou(),
            ms_per_frame: s.ms_per_frame,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub runs: Vec<RunReport>,
    /// Whether CSV output carries the wall-clock column.
    pub timing: bool,
}

fn mean_defined(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    miou(values)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.6}"))
}

impl EvalReport {
    pub fn summaries(&self) -> Vec<Summary> {
        self.runs.iter().map(|r| Summary::of(r.last())).collect()
    }

    /// Arithmetic mean over runs of the final-session aggregates.
    pub fn summary(&self) -> Summary {
        self.session_summary(self.runs[0].sessions.len() - 1, |s| (s.base_miou(), s.new_miou()))
    }

    fn session_summary(&self, session: usize, split: impl Fn(&SessionEval) -> (Option<f64>, Option<f64>)) -> Summary {
        let evals: Vec<&SessionEval> = self.runs.iter().map(|r| &r.sessions[session]).collect();
        Summary {
            base_miou: mean_defined(evals.iter().map(|s| split(s).0)),
            new_miou: mean_defined(evals.iter().map(|s| split(s).1)),
            mean_miou: mean_defined(evals.iter().map(|s| s.mean_miou())),
            ms_per_frame: evals.iter().map(|s| s.ms_per_frame).sum::<f64>() / evals.len() as f64,
        }
    }

    /// One row per (session, class) with the class IoU averaged over runs,
    /// then aggregate rows: `all` splits base-session classes from every
    /// later class, `latest` splits earlier classes from the classes of the
    /// session itself.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(REPORT_HEADER)?;
        let first = &self.runs[0];
        for (si, session) in first.sessions.iter().enumerate() {
            for (ci, class) in session.classes.iter().enumerate() {
                let iou = mean_defined(self.runs.iter().map(|r| r.sessions[si].classes[ci].iou));
                w.write_record([si.to_string(), class.class_id.0.to_string(), class.group.to_string(), cell(iou), String::new(), String::new(), String::new(), String::new()])?;
            }
            let mut aggregates = vec![("all", self.session_summary(si, |s| (s.base_miou(), s.new_miou())))];
            if si > 0 {
                aggregates.push(("latest", self.session_summary(si, |s| (s.prior_miou(), s.latest_miou()))));
            }
            for (label, s) in aggregates {
                let ms = if self.timing { format!("{:.3}", s.ms_per_frame) } else { String::new() };
                w.write_record([si.to_string(), label.into(), String::new(), String::new(), cell(s.base_miou), cell(s.new_miou), cell(s.mean_miou), ms])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

/// Taxonomy shared by every repeat of a configuration.
pub fn experiment_taxonomy(cfg: &ExperimentConfig) -> Result<Taxonomy> {
    gen_taxonomy(cfg.seed, &cfg.taxonomy)
}

/// Schedule of one repeat: the class split follows the configured seed, the
/// rendered samples follow the repeat.
pub fn repeat_schedule(cfg: &ExperimentConfig, tax: &Taxonomy, repeat: usize) -> Result<SessionSchedule> {
    build_schedule_split(tax, &cfg.schedule_spec(), cfg.seed, repeat_seed(cfg, repeat))
}

pub fn repeat_seed(cfg: &ExperimentConfig, repeat: usize) -> u64 {
    mix_seed(cfg.seed, &[0x7e9, repeat as u64])
}

/// Initialises and trains a model on the base session of `schedule`.
pub fn train_base_model(cfg: &ExperimentConfig, tax: &Taxonomy, schedule: &SessionSchedule, seed: u64) -> Result<(Model, TrainLog)> {
    let data = render_refs(tax, &schedule.sessions[0].support)?;
    let mut model = Model::init(&cfg.model_config(), seed).context(|| "model initialisation".into())?;
    let log = train_base(&mut model, &data, &cfg.train_config(), &cfg.learn_config(), seed).context(|| "base training".into())?;
    Ok((model, log))
}

fn evaluate(learner: &Learner, tax: &Taxonomy, schedule: &SessionSchedule, session: usize, timing_passes: usize) -> Result<SessionEval> {
    let classes = schedule.query_space(session);
    let queries = schedule.sessions[session]
        .query
        .iter()
        .map(|r| {
            let class = tax.class(r.class_id).expect("schedule classes come from the taxonomy");
            Ok((r.class_id, render_sample(class, r.seed)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut acc = IouAccumulator::new();
    let mut best = f64::INFINITY;
    for pass in 0..timing_passes.max(1) {
        let start = Instant::now();
        for (class_id, sample) in &queries {
            let pred = learner
                .predict(&sample.image)
                .context(|| format!("session {session} query of class {class_id}"))?;
            if pass == 0 {
                acc.add(&pred, &label_from_mask(&sample.mask, *class_id), &classes)?;
            }
        }
        best = best.min(start.elapsed().as_secs_f64() * 1e3 / queries.len() as f64);
    }
    Ok(SessionEval {
        session,
        classes: classes
            .iter()
            .map(|&c| ClassEval {
                class_id: c,
                group: tax.group_of(c).expect("schedule classes come from the taxonomy"),
                learned_in: schedule.session_of(c).expect("queried classes belong to a session"),
                iou: acc.iou(c),
            })
            .collect(),
        ms_per_frame: best,
    })
}

/// Runs every session of one repeat with a trained model.
pub fn run_sessions(cfg: &ExperimentConfig, tax: &Taxonomy, schedule: &SessionSchedule, model: Model, timing_passes: usize) -> Result<(Learner, Vec<SessionEval>, Vec<UpdateTrace>)> {
    let mut learner = Learner::new(model, cfg.learn_config());
    let mut evals = Vec::with_capacity(schedule.sessions.len());
    let mut traces = Vec::with_capacity(schedule.sessions.len());
    for (si, session) in schedule.sessions.iter().enumerate() {
        let supports = render_refs(tax, &session.support)?;
        let trace = if si == 0 {
            learner.learn_base(&supports)
        } else {
            learner.learn_session(&supports)
        }
        .context(|| format!("learning session {si}"))?;
        traces.push(trace);
        evals.push(evaluate(&learner, tax, schedule, si, timing_passes)?);
    }
    Ok((learner, evals, traces))
}

fn run_with(cfg: &ExperimentConfig, pretrained: Option<&Model>, timing_passes: usize) -> Result<EvalReport> {
    cfg.validate()?;
    let tax = experiment_taxonomy(cfg)?;
    let mut runs = Vec::with_capacity(cfg.repeats);
    for repeat in 0..cfg.repeats {
        let seed = repeat_seed(cfg, repeat);
        let schedule = repeat_schedule(cfg, &tax, repeat)?;
        let (model, train_log) = match pretrained {
            Some(m) => (m.clone(), TrainLog::default()),
            None => train_base_model(cfg, &tax, &schedule, seed)?,
        };
        let (_, sessions, traces) = run_sessions(cfg, &tax, &schedule, model, timing_passes)?;
        runs.push(RunReport {
            seed,
            sessions,
            train_log,
            traces,
        });
    }
    Ok(EvalReport { runs, timing: cfg.timing })
}

/// Base training followed by every incremental session, repeated
/// `cfg.repeats` times with distinct seeds.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<EvalReport> {
    run_with(cfg, None, 1)
}

/// Like [`run_experiment`] but every repeat starts from `model` instead of
/// training one.
pub fn run_experiment_with_model(cfg: &ExperimentConfig, model: &Model) -> Result<EvalReport> {
    if model.embed_dim() != cfg.embed_dim || model.casm.iterations != cfg.iterations {
        return Err(BenchError::Config("model does not match embed_dim or iterations of the config".into()));
    }
    run_with(cfg, Some(model), 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Embeddings,
    Strategy,
    Iterations,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Embeddings => "embeddings",
            AblationAxis::Strategy => "strategy",
            AblationAxis::Iterations => "iterations",
        }
    }
}

/// Timed passes over the query set per session in the iteration sweep; the
/// fastest pass is reported.
pub const SWEEP_TIMING_PASSES: usize = 3;

/// Configurations swept along `axis`, everything else held at `base`.
pub fn ablation_settings(base: &ExperimentConfig, axis: AblationAxis) -> Vec<(String, ExperimentConfig)> {
    let with = |f: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match axis {
        AblationAxis::Embeddings => {
            use Role::*;
            [
                ("hyper-only", Updated, Removed),
                ("category-only", Removed, Updated),
                ("both-updated", Updated, Updated),
                ("keep-category", Updated, Kept),
                ("keep-hyper", Kept, Updated),
            ]
            .into_iter()
            .map(|(name, hyper, category)| (name.to_string(), with(&|c| c.embeddings = EmbeddingConfig { hyper, category })))
            .collect()
        }
        AblationAxis::Strategy => {
            let mut rows = vec![(
                "non-update".to_string(),
                with(&|c| {
                    c.strategy = StrategyConfig {
                        kind: StrategyKind::NonUpdate,
                        scope: Scope::Both,
                    }
                }),
            )];
            for (kname, kind) in [("lt", StrategyKind::Lt), ("eaus", StrategyKind::Eaus)] {
                for (sname, scope) in [("base", Scope::Base), ("new", Scope::New), ("both", Scope::Both)] {
                    rows.push((format!("{kname}-{sname}"), with(&|c| c.strategy = StrategyConfig { kind, scope })));
                }
            }
            rows
        }
        AblationAxis::Iterations => (0..=5).map(|t| (format!("T={t}"), with(&|c| c.iterations = t))).collect(),
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub setting: String,
    pub report: EvalReport,
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, setting: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.setting == setting)
    }

    /// Final-session aggregates per repeat, then their mean, for each
    /// setting. Timing is written for the iteration sweep or when enabled.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(ABLATION_HEADER)?;
        for row in &self.rows {
            let timed = self.axis == AblationAxis::Iterations || row.report.timing;
            let per_repeat = row.report.summaries().into_iter().enumerate().map(|(i, s)| (i.to_string(), s));
            for (label, s) in per_repeat.chain([("mean".to_string(), row.report.summary())]) {
                let ms = if timed { format!("{:.3}", s.ms_per_frame) } else { String::new() };
                w.write_record([self.axis.name().into(), row.setting.clone(), label, cell(s.base_miou), cell(s.new_miou), cell(s.mean_miou), ms])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Where the base model of each ablation setting comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationTraining {
    /// Every setting trains its own model for every repeat.
    PerSetting,
    /// One model per repeat, trained with episodes cycling through the
    /// settings of the axis, then evaluated under each setting.
    Shared,
}

/// Trains the shared model of one repeat for the given settings.
pub fn train_shared_model(settings: &[(String, ExperimentConfig)], tax: &Taxonomy, schedule: &SessionSchedule, seed: u64) -> Result<(Model, TrainLog)> {
    let base = &settings.first().ok_or_else(|| BenchError::Config("no ablation settings".into()))?.1;
    let data = render_refs(tax, &schedule.sessions[0].support)?;
    let mut model = Model::init(&base.model_config(), seed).context(|| "model initialisation".into())?;
    let variants: Vec<_> = settings.iter().map(|(_, c)| (c.learn_config(), c.iterations)).collect();
    let log = train_base_cycling(&mut model, &data, &base.train_config(), &variants, seed).context(|| "shared base training".into())?;
    Ok((model, log))
}

/// Runs every setting of `axis` with all repeats of `base`.
pub fn ablation_run(base: &ExperimentConfig, axis: AblationAxis, training: AblationTraining) -> Result<AblationTable> {
    run_settings(base, axis, ablation_settings(base, axis), training)
}

/// Runs the named subset of the settings of `axis`, in the given order.
pub fn ablation_run_subset(base: &ExperimentConfig, axis: AblationAxis, names: &[&str], training: AblationTraining) -> Result<AblationTable> {
    let mut all = ablation_settings(base, axis);
    let settings = names
        .iter()
        .map(|name| {
            let i = all
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| BenchError::Config(format!("{} axis has no setting {name:?}", axis.name())))?;
            Ok(all.remove(i))
        })
        .collect::<Result<Vec<_>>>()?;
    run_settings(base, axis, settings, training)
}

fn run_settings(base: &ExperimentConfig, axis: AblationAxis, settings: Vec<(String, ExperimentConfig)>, training: AblationTraining) -> Result<AblationTable> {
    base.validate()?;
    let passes = if axis == AblationAxis::Iterations { SWEEP_TIMING_PASSES } else { 1 };
    let rows = match training {
        AblationTraining::PerSetting => settings
            .into_iter()
            .map(|(setting, cfg)| {
                Ok(AblationRow {
                    report: run_with(&cfg, None, passes)?,
                    setting,
                })
            })
            .collect::<Result<Vec<_>>>()?,
        AblationTraining::Shared => {
            let tax = experiment_taxonomy(base)?;
            let mut runs: Vec<Vec<RunReport>> = vec![Vec::with_capacity(base.repeats); settings.len()];
            for repeat in 0..base.repeats {
                let seed = repeat_seed(base, repeat);
                let schedule = repeat_schedule(base, &tax, repeat)?;
                let (model, train_log) = train_shared_model(&settings, &tax, &schedule, seed)?;
                for ((_, cfg), out) in settings.iter().zip(&mut runs) {
                    let mut m = model.clone();
                    m.casm.iterations = cfg.iterations;
                    let (_, sessions, traces) = run_sessions(cfg, &tax, &schedule, m, passes)?;
                    out.push(RunReport {
                        seed,
                        sessions,
                        train_log: train_log.clone(),
                        traces,
                    });
                }
            }
            settings
                .into_iter()
                .zip(runs)
                .map(|((setting, cfg), runs)| AblationRow {
                    setting,
                    report: EvalReport { runs, timing: cfg.timing },
                })
                .collect()
        }
    };
    Ok(AblationTable { axis, rows })
}
