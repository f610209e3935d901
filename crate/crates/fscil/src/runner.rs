//! Subcommand implementations and the run directory layout.
//!
//! ```text
//! <out>/config.toml            resolved configuration
//! <out>/data/{train,eval,conditions}.csv
//! <out>/checkpoints/{encoder,denoiser}.bin
//! <out>/prototypes.csv         prototype store of the primary track
//! <out>/reports/session_{i}.json
//! <out>/summary.json
//! <out>/training.json          loss curves of the base session
//! <out>/timing.json            wall-clock seconds per stage
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fscil_core::protocol::{generate_dataset, train_base_models, BaseTraining, Dataset, FrozenModels, Pipeline, Track};
use fscil_core::prototypes::PrototypeConfig;
use serde::Serialize;

use crate::checkpoint;
use crate::config::{DataSource, RunConfig};
use crate::csvio;
use crate::error::{Error, Result};
use crate::parallel;
use crate::report::{self, Seeds, SessionFile, Summary, TrackSummary};

pub const CONFIG_FILE: &str = "config.toml";
pub const DATA_DIR: &str = "data";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const ENCODER_FILE: &str = "encoder.bin";
pub const DENOISER_FILE: &str = "denoiser.bin";
pub const PROTOTYPES_FILE: &str = "prototypes.csv";
pub const REPORTS_DIR: &str = "reports";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TRAINING_FILE: &str = "training.json";
pub const TIMING_FILE: &str = "timing.json";
pub const PLOT_FILE: &str = "plot_data.csv";
pub const ABLATION_DIR: &str = "ablation";

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_config(out: &Path, cfg: &RunConfig) -> Result<()> {
    let path = out.join(CONFIG_FILE);
    std::fs::write(&path, cfg.to_toml_string()).map_err(|e| Error::io(&path, e))
}

/// Synthetic data from the config's generator, or the dataset in `data.dir`.
pub fn load_or_generate(cfg: &RunConfig) -> Result<Dataset> {
    let protocol = cfg.protocol_spec();
    let dataset = match cfg.data.source {
        DataSource::Synthetic => {
            generate_dataset(&cfg.synthetic_spec(), &protocol, cfg.seed)
                .map_err(Error::stage(format!("data generation (seed {})", cfg.seed)))?
                .dataset
        }
        DataSource::File => {
            let dir = cfg.data.dir.as_deref().expect("validated");
            let d = csvio::load_dataset(dir)?;
            if d.sample_dim != cfg.dims.sample_dim || d.conditions.dim() != cfg.dims.condition_dim {
                return Err(Error::Config(format!(
                    "dataset in {} has sample_dim {} and condition_dim {}, config says {} and {}",
                    dir.display(),
                    d.sample_dim,
                    d.conditions.dim(),
                    cfg.dims.sample_dim,
                    cfg.dims.condition_dim
                )));
            }
            d
        }
    };
    dataset.validate(&protocol).map_err(|e| match e {
        fscil_core::Error::Config(m) => Error::Config(m),
        other => Error::stage("dataset validation")(other),
    })?;
    Ok(dataset)
}

/// `gen-data`: writes the dataset and condition files into `out`. Returns the
/// written paths with their row counts.
pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<Vec<(PathBuf, usize)>> {
    cfg.validate()?;
    let dataset = generate_dataset(&cfg.synthetic_spec(), &cfg.protocol_spec(), cfg.seed)
        .map_err(|e| match e {
            fscil_core::Error::Config(m) => Error::Config(m),
            other => Error::stage(format!("data generation (seed {})", cfg.seed))(other),
        })?
        .dataset;
    mkdir(out)?;
    let counts = csvio::save_dataset(out, &dataset)?;
    write_config(out, cfg)?;
    Ok([csvio::TRAIN_FILE, csvio::EVAL_FILE, csvio::CONDITIONS_FILE]
        .iter()
        .zip(counts)
        .map(|(f, n)| (out.join(f), n))
        .collect())
}

#[derive(Debug, Default, Serialize)]
struct Timing {
    seconds: BTreeMap<String, f64>,
}

impl Timing {
    fn record<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.seconds.insert(stage.into(), start.elapsed().as_secs_f64());
        out
    }
}

#[derive(Serialize)]
struct TrainingFile<'a> {
    encoder_loss: &'a [f64],
    encoder_train_accuracy: f64,
    denoiser_loss: &'a [f64],
}

/// Dataset and frozen models a run works from.
pub struct Prepared {
    pub dataset: Dataset,
    pub models: FrozenModels,
    pub training: Option<BaseTraining>,
}

/// Loads data and checkpoints from an earlier run in `out` when present,
/// otherwise generates data and trains. New artifacts are written to `out`.
fn prepare(cfg: &RunConfig, out: &Path, reuse: bool, timing: &mut Timing) -> Result<Prepared> {
    let ckpt = out.join(CHECKPOINT_DIR);
    let data_dir = out.join(DATA_DIR);
    let (enc_path, den_path) = (ckpt.join(ENCODER_FILE), ckpt.join(DENOISER_FILE));
    if reuse && enc_path.is_file() && den_path.is_file() && data_dir.is_dir() {
        let dataset = csvio::load_dataset(&data_dir)?;
        dataset
            .validate(&cfg.protocol_spec())
            .map_err(Error::stage("reused dataset validation"))?;
        let encoder = checkpoint::load_encoder(&enc_path)?;
        let denoiser = checkpoint::load_denoiser(&den_path)?;
        let schedule = denoiser.denoiser().schedule().clone();
        let models = FrozenModels {
            encoder,
            denoiser,
            schedule,
            sampling_steps: cfg.schedule.sampling_steps,
        };
        return Ok(Prepared {
            dataset,
            models,
            training: None,
        });
    }

    let dataset = timing.record("data", || load_or_generate(cfg))?;
    mkdir(&data_dir)?;
    csvio::save_dataset(&data_dir, &dataset)?;
    let (models, training) = timing
        .record("base_training", || {
            train_base_models(&dataset, &cfg.protocol_spec(), &cfg.pipeline_config(), cfg.seed)
        })
        .map_err(Error::stage(format!("base session training (seed {})", cfg.seed)))?;
    mkdir(&ckpt)?;
    checkpoint::save_encoder(&enc_path, &models.encoder)?;
    checkpoint::save_denoiser(&den_path, &models.denoiser)?;
    report::write_json(
        &out.join(TRAINING_FILE),
        &TrainingFile {
            encoder_loss: &training.encoder_loss,
            encoder_train_accuracy: training.encoder_train_accuracy,
            denoiser_loss: &training.denoiser_loss,
        },
    )?;
    Ok(Prepared {
        dataset,
        models,
        training: Some(training),
    })
}

/// Runs every session for each of `configs`, sharing one set of estimates per
/// session. Exemplars are generated once, with the largest `n_generated` any
/// track needs in that session.
pub fn drive_tracks(pipeline: &Pipeline<'_>, configs: &[PrototypeConfig]) -> Result<Vec<Track>> {
    let mut tracks = configs.iter().cloned().map(Track::new).collect::<fscil_core::Result<Vec<_>>>()?;
    for session in 0..pipeline.protocol().num_sessions() {
        let mut needed = configs.iter().filter(|c| c.needs_generation(session)).map(|c| c.n_generated);
        let n = needed.next().unwrap_or(0);
        if needed.any(|m| m != n) {
            return Err(Error::Config("tracks sharing estimates must use the same n_generated".into()));
        }
        let estimates = parallel::session_estimates(pipeline, session, n)
            .map_err(Error::stage(format!("prototype estimation, session {session}")))?;
        for track in &mut tracks {
            pipeline
                .apply_session(track, &estimates)
                .map_err(Error::stage(format!("session {session}")))?;
        }
    }
    Ok(tracks)
}

fn summarize(
    cfg: &RunConfig,
    pipeline: &Pipeline<'_>,
    tracks: &[Track],
    encoder_train_accuracy: f64,
) -> Result<Summary> {
    let (fused, real, gen) = (&tracks[0], &tracks[1], &tracks[2]);
    let mut map = BTreeMap::new();
    map.insert(report::PRIMARY.to_string(), TrackSummary::new(fused, Some(real))?);
    map.insert(report::REAL_ONLY.to_string(), TrackSummary::new(real, None)?);
    map.insert(report::GENERATIVE_ONLY.to_string(), TrackSummary::new(gen, Some(real))?);
    let steps = pipeline.check_contract(fused)?;
    Ok(Summary {
        seeds: seeds(cfg, pipeline),
        checksums: pipeline.frozen_checksums().into(),
        optimizer_steps_since_freeze: steps,
        encoder_train_accuracy,
        tracks: map,
        config: cfg.clone(),
    })
}

fn seeds(cfg: &RunConfig, pipeline: &Pipeline<'_>) -> Seeds {
    Seeds {
        master: cfg.seed,
        generation: pipeline.generation_seed(),
    }
}

/// The three tracks every run drives: fused at `alpha`, then the real-only and
/// generative-only baselines.
pub fn track_configs(cfg: &RunConfig, alpha: f64) -> [PrototypeConfig; 3] {
    [cfg.prototype_config_for(alpha), cfg.real_only_config(), cfg.generative_only_config()]
}

/// Verifies the models on disk still hash to the values frozen in memory.
fn verify_checkpoints(out: &Path, pipeline: &Pipeline<'_>) -> Result<()> {
    let ckpt = out.join(CHECKPOINT_DIR);
    let enc = checkpoint::load_encoder(&ckpt.join(ENCODER_FILE))?;
    let den = checkpoint::load_denoiser(&ckpt.join(DENOISER_FILE))?;
    let frozen = pipeline.frozen_checksums();
    if enc.checksum() != frozen.encoder || den.checksum() != frozen.denoiser {
        return Err(Error::Core(fscil_core::Error::Contract(
            "saved checkpoints differ from the frozen models".into(),
        )));
    }
    Ok(())
}

/// `run`: base session, all incremental sessions and both baselines.
pub fn run(cfg: &RunConfig, out: &Path) -> Result<Summary> {
    cfg.validate()?;
    mkdir(out)?;
    write_config(out, cfg)?;
    let mut timing = Timing::default();
    let prepared = prepare(cfg, out, false, &mut timing)?;
    let training = prepared.training.as_ref().expect("fresh training");
    let pipeline = Pipeline::new(&prepared.dataset, cfg.protocol_spec(), prepared.models, cfg.seed)
        .map_err(Error::stage("binding frozen models"))?;

    let tracks = timing.record("sessions", || drive_tracks(&pipeline, &track_configs(cfg, cfg.prototypes.alpha)))?;
    verify_checkpoints(out, &pipeline)?;
    let summary = summarize(cfg, &pipeline, &tracks, training.encoder_train_accuracy)?;

    csvio::save_prototypes(&out.join(PROTOTYPES_FILE), &tracks[0].store)?;
    let reports_dir = out.join(REPORTS_DIR);
    mkdir(&reports_dir)?;
    for r in &tracks[0].reports {
        let file = SessionFile::new(r, summary.seeds, summary.checksums.clone(), cfg);
        report::write_json(&reports_dir.join(format!("session_{}.json", r.session)), &file)?;
    }
    report::write_json(&out.join(SUMMARY_FILE), &summary)?;
    report::write_json(&out.join(TIMING_FILE), &timing)?;
    Ok(summary)
}

/// One row of the alpha sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub alpha: f64,
    pub avg: f64,
    pub last: f64,
    pub last_new_acc: Option<f64>,
}

pub fn alpha_dir_name(alpha: f64) -> String {
    format!("alpha_{alpha}")
}

/// `ablate-alpha`: the protocol once per alpha over the same frozen models and
/// the same recorded shots. Reuses `out/checkpoints` and `out/data` from an
/// earlier `run` when present. Each alpha gets its own summary under
/// `out/ablation/alpha_{a}/summary.json`; the table goes to
/// `out/ablation/ablation.csv`.
pub fn ablate_alpha(cfg: &RunConfig, out: &Path, alphas: &[f64]) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    if alphas.is_empty() {
        return Err(Error::Config("alpha list is empty".into()));
    }
    if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::Config(format!("alpha {a} lies outside [0, 1]")));
    }
    mkdir(out)?;
    let mut timing = Timing::default();
    let prepared = prepare(cfg, out, true, &mut timing)?;
    if prepared.training.is_some() {
        write_config(out, cfg)?;
    }
    let pipeline = Pipeline::new(&prepared.dataset, cfg.protocol_spec(), prepared.models, cfg.seed)
        .map_err(Error::stage("binding frozen models"))?;
    let encoder_acc = match &prepared.training {
        Some(t) => t.encoder_train_accuracy,
        None => read_encoder_accuracy(out)?,
    };

    let mut configs = vec![cfg.real_only_config(), cfg.generative_only_config()];
    configs.extend(alphas.iter().map(|&a| cfg.prototype_config_for(a)));
    let tracks = drive_tracks(&pipeline, &configs)?;
    let ablation = out.join(ABLATION_DIR);
    mkdir(&ablation)?;
    let mut rows = Vec::new();
    for (&alpha, fused) in alphas.iter().zip(&tracks[2..]) {
        let mut alpha_cfg = cfg.clone();
        alpha_cfg.prototypes.alpha = alpha;
        let trio = [fused.clone(), tracks[0].clone(), tracks[1].clone()];
        let summary = summarize(&alpha_cfg, &pipeline, &trio, encoder_acc)?;
        let dir = ablation.join(alpha_dir_name(alpha));
        mkdir(&dir)?;
        report::write_json(&dir.join(SUMMARY_FILE), &summary)?;
        let p = summary.primary();
        rows.push(AblationRow {
            alpha,
            avg: p.avg,
            last: p.last,
            last_new_acc: p.last_new_acc(),
        });
    }
    let path = ablation.join("ablation.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::format(&path, e.to_string()))?;
    w.write_record(["alpha", "avg", "last", "last_new_acc"])
        .map_err(|e| Error::format(&path, e.to_string()))?;
    for r in &rows {
        w.write_record([
            r.alpha.to_string(),
            r.avg.to_string(),
            r.last.to_string(),
            r.last_new_acc.map_or(String::new(), |v| v.to_string()),
        ])
        .map_err(|e| Error::format(&path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    std::fs::write(ablation.join("ablation.txt"), ablation_table(&rows)).map_err(|e| Error::io(&ablation, e))?;
    Ok(rows)
}

fn read_encoder_accuracy(out: &Path) -> Result<f64> {
    let path = out.join(TRAINING_FILE);
    let v: serde_json::Value = report::read_json(&path)?;
    v.get("encoder_train_accuracy")
        .and_then(|a| a.as_f64())
        .ok_or_else(|| Error::format(&path, "missing encoder_train_accuracy"))
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!("{:>6}  {:>7}  {:>7}  {:>8}\n", "alpha", "Avg", "Last", "New");
    for r in rows {
        s.push_str(&format!(
            "{:>6}  {:>7.2}  {:>7.2}  {:>8}\n",
            r.alpha,
            r.avg,
            r.last,
            report::pct(r.last_new_acc)
        ));
    }
    s
}

/// Output of `report`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub sessions: Vec<report::SessionMetrics>,
    pub avg: f64,
    pub text: String,
}

/// `report`: reads `reports/session_{i}.json`, prints a one-row session table and
/// writes `plot_data.csv` with one row per session.
pub fn report(dir: &Path) -> Result<ReportTable> {
    let reports_dir = dir.join(REPORTS_DIR);
    if !reports_dir.is_dir() {
        return Err(Error::format(dir, "no reports directory; is this a run directory?"));
    }
    let mut sessions = Vec::new();
    loop {
        let path = reports_dir.join(format!("session_{}.json", sessions.len()));
        if !path.exists() {
            break;
        }
        let file: SessionFile = report::read_json(&path)?;
        if file.metrics.session != sessions.len() {
            return Err(Error::format(&path, format!("holds session {}", file.metrics.session)));
        }
        sessions.push(file.metrics);
    }
    if sessions.is_empty() {
        return Err(Error::format(&reports_dir, "contains no session reports"));
    }
    let totals: Vec<f64> = sessions.iter().map(|s| s.total_acc).collect();
    let agg = fscil_core::classifier::aggregate_totals(&totals, None)?;

    let mut header = String::from("Method ");
    let mut row = String::from("fused  ");
    for s in &sessions {
        header.push_str(&format!(" {:>6}", s.session));
        row.push_str(&format!(" {:>6.2}", s.total_acc));
    }
    header.push_str(&format!(" {:>6}", "Avg"));
    row.push_str(&format!(" {:>6.2}", agg.avg));
    let text = format!("{header}\n{row}\n");

    let path = dir.join(PLOT_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::format(&path, e.to_string()))?;
    w.write_record(["session", "total", "base", "new"])
        .map_err(|e| Error::format(&path, e.to_string()))?;
    for s in &sessions {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        w.write_record([s.session.to_string(), s.total_acc.to_string(), opt(s.base_acc), opt(s.new_acc)])
            .map_err(|e| Error::format(&path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(ReportTable {
        sessions,
        avg: agg.avg,
        text,
    })
}
