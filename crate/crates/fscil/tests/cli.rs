use std::path::Path;
use std::process::Command;

use fscil::config::{DataSource, RunConfig};
use fscil::report::{self, SessionFile, Summary};
use fscil::{checkpoint, csvio, parallel, runner, Error};
use fscil_core::protocol::{FrozenModels, Pipeline};

const TINY: &str = r#"
seed = 3

[schedule]
steps = 100
sampling_steps = 10

[dims]
sample_dim = 16
feature_dim = 8
condition_dim = 4

[protocol]
base_classes = 4
train_per_base_class = 40
eval_per_class = 20
sessions = [{ ways = 2, shots = 3 }, { ways = 0, shots = 1 }, { ways = 2, shots = 3 }]

[encoder]
hidden = [16]
epochs = 5

[denoiser]
hidden = [32]
time_width = 8
condition_width = 4
epochs = 3
iters_per_epoch = 20

[prototypes]
n_generated = 8
"#;

fn tiny() -> RunConfig {
    RunConfig::from_toml_str(TINY).unwrap()
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fscil"))
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("cfg.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn summary_bytes(dir: &Path) -> Vec<u8> {
    std::fs::read(dir.join(runner::SUMMARY_FILE)).unwrap()
}

#[test]
fn gen_data_writes_loadable_files_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let written = runner::gen_data(&tiny(), &a).unwrap();
    runner::gen_data(&tiny(), &b).unwrap();
    let counts: Vec<usize> = written.iter().map(|(_, n)| *n).collect();
    assert_eq!(counts, vec![4 * 40 + 4 * 3, 8 * 20, 8]);
    for (path, _) in &written {
        let name = path.file_name().unwrap();
        assert_eq!(std::fs::read(path).unwrap(), std::fs::read(b.join(name)).unwrap());
    }
    let conditions = csvio::load_conditions(&a.join(csvio::CONDITIONS_FILE)).unwrap();
    assert_eq!(conditions.len(), 8);
    assert_eq!(conditions.dim(), 4);
    let dataset = csvio::load_dataset(&a).unwrap();
    dataset.validate(&tiny().protocol_spec()).unwrap();
}

#[test]
fn condition_dim_above_sample_dim_exits_with_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[dims]\nsample_dim = 4\ncondition_dim = 8\n");
    let out = bin()
        .args(["--config", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap(), "gen-data"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("condition_dim"), "{stderr}");
}

#[test]
fn unknown_config_key_exits_with_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[prototypes]\nalpah = 0.5\n");
    let out = bin().args(["--config", cfg.to_str().unwrap(), "run"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpah"));
}

#[test]
fn cli_run_then_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out_dir = tmp.path().join("run");
    let out = bin()
        .args(["--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap(), "--threads", "2", "run"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let summary: Summary = report::read_json(&out_dir.join(runner::SUMMARY_FILE)).unwrap();
    for track in summary.tracks.values() {
        assert_eq!(track.sessions.len(), 4);
    }
    assert_eq!(summary.optimizer_steps_since_freeze, 0);
    for name in ["config.toml", "prototypes.csv", "checkpoints/encoder.bin", "checkpoints/denoiser.bin"] {
        assert!(out_dir.join(name).is_file(), "{name}");
    }

    let out = bin().args(["report", out_dir.to_str().unwrap()]).output().unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("Avg"), "{stdout}");
    let plot = std::fs::read_to_string(out_dir.join(runner::PLOT_FILE)).unwrap();
    assert_eq!(plot.lines().count(), 1 + 4);

    let table = runner::report(&out_dir).unwrap();
    assert_eq!(table.avg, summary.primary().avg);
    let totals: Vec<f64> = table.sessions.iter().map(|s| s.total_acc).collect();
    assert_eq!(fscil_core::classifier::aggregate_totals(&totals, None).unwrap().avg, table.avg);
}

#[test]
fn report_on_empty_directory_fails() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(runner::report(tmp.path()).is_err());
    std::fs::create_dir(tmp.path().join(runner::REPORTS_DIR)).unwrap();
    assert!(runner::report(tmp.path()).is_err());
    let out = bin().args(["report", tmp.path().to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    std::fs::write(tmp.path().join(runner::REPORTS_DIR).join("session_0.json"), "{ not json").unwrap();
    let err = runner::report(tmp.path()).unwrap_err().to_string();
    assert!(err.contains("session_0.json"), "{err}");
}

#[test]
fn seed_changes_outputs_and_repeats_reproduce() {
    let tmp = tempfile::tempdir().unwrap();
    let mut other = tiny();
    other.seed = 4;
    runner::run(&tiny(), &tmp.path().join("a")).unwrap();
    runner::run(&tiny(), &tmp.path().join("b")).unwrap();
    runner::run(&other, &tmp.path().join("c")).unwrap();
    assert_eq!(summary_bytes(&tmp.path().join("a")), summary_bytes(&tmp.path().join("b")));
    assert_ne!(summary_bytes(&tmp.path().join("a")), summary_bytes(&tmp.path().join("c")));
}

#[test]
fn config_echo_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let first = tmp.path().join("first");
    runner::run(&tiny(), &first).unwrap();
    let echoed = RunConfig::load(&first.join(runner::CONFIG_FILE)).unwrap();
    assert_eq!(echoed, tiny());
    let second = tmp.path().join("second");
    runner::run(&echoed, &second).unwrap();
    assert_eq!(summary_bytes(&first), summary_bytes(&second));
}

#[test]
fn empty_session_repeats_previous_evaluation() {
    let tmp = tempfile::tempdir().unwrap();
    runner::run(&tiny(), tmp.path()).unwrap();
    let load = |i: usize| -> SessionFile {
        report::read_json(&tmp.path().join(runner::REPORTS_DIR).join(format!("session_{i}.json"))).unwrap()
    };
    let (before, empty) = (load(1), load(2));
    assert_eq!(before.per_class, empty.per_class);
    assert_eq!(before.metrics.total_acc, empty.metrics.total_acc);
    assert_eq!(before.metrics.new_acc, empty.metrics.new_acc);
}

#[test]
fn file_source_matches_synthetic_source() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    runner::gen_data(&tiny(), &data).unwrap();
    let mut from_file = tiny();
    from_file.data.source = DataSource::File;
    from_file.data.dir = Some(data);
    let a = runner::run(&tiny(), &tmp.path().join("synthetic")).unwrap();
    let b = runner::run(&from_file, &tmp.path().join("file")).unwrap();
    assert_eq!(a.tracks, b.tracks);
    assert_eq!(a.checksums, b.checksums);
}

#[test]
fn alpha_sweep_matches_run_and_rejects_out_of_range() {
    let tmp = tempfile::tempdir().unwrap();
    let run = runner::run(&tiny(), tmp.path()).unwrap();
    let alphas = [0.0, 0.25, 0.5, 0.75, 1.0];
    let rows = runner::ablate_alpha(&tiny(), tmp.path(), &alphas).unwrap();
    assert_eq!(rows.len(), 5);
    for row in &rows {
        let s: Summary = report::read_json(
            &tmp.path()
                .join(runner::ABLATION_DIR)
                .join(runner::alpha_dir_name(row.alpha))
                .join(runner::SUMMARY_FILE),
        )
        .unwrap();
        assert_eq!(s.primary().avg, row.avg);
        assert_eq!(s.primary().last_new_acc(), row.last_new_acc);
        assert_eq!(s.checksums, run.checksums);
    }
    let half = &rows[2];
    assert_eq!(half.avg, run.primary().avg);
    assert_eq!(half.last_new_acc, run.primary().last_new_acc());
    let table = std::fs::read_to_string(tmp.path().join(runner::ABLATION_DIR).join("ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 6);

    assert!(matches!(runner::ablate_alpha(&tiny(), tmp.path(), &[0.5, 1.5]), Err(Error::Config(_))));
    let out = bin()
        .args(["--out", tmp.path().to_str().unwrap(), "ablate-alpha", "--alphas", "0.2,-0.1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn parallel_estimates_equal_serial_estimates() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny();
    runner::run(&cfg, tmp.path()).unwrap();
    let ckpt = tmp.path().join(runner::CHECKPOINT_DIR);
    let dataset = csvio::load_dataset(&tmp.path().join(runner::DATA_DIR)).unwrap();
    let denoiser = checkpoint::load_denoiser(&ckpt.join(runner::DENOISER_FILE)).unwrap();
    let models = FrozenModels {
        encoder: checkpoint::load_encoder(&ckpt.join(runner::ENCODER_FILE)).unwrap(),
        schedule: denoiser.denoiser().schedule().clone(),
        denoiser,
        sampling_steps: cfg.schedule.sampling_steps,
    };
    let pipeline = Pipeline::new(&dataset, cfg.protocol_spec(), models, cfg.seed).unwrap();
    let proto = cfg.prototype_config();
    for session in 0..pipeline.protocol().num_sessions() {
        let serial = pipeline.session_estimates(session, &proto).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let par = pool.install(|| parallel::session_estimates(&pipeline, session, proto.n_generated)).unwrap();
        assert_eq!(serial, par, "session {session}");
    }
}
