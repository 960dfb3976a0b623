use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndarray::{s, Array1, Array2};

use pulsekit::algorithms::{AlgorithmKind, Denoisers, ModelKind};
use pulsekit::checkpoint::Checkpoint;
use pulsekit::config::Config;
use pulsekit::data::{
    condition_all, fold_from_tags, generate_synthetic, load_manifest_splits, load_records, make_dataset, record_to_csv,
    save_record, write_manifest, ConditionedRecord, Fold, LabeledRecord, Protocol, SplitSpec, SplitTag, WindowConfig,
};
use pulsekit::denoiser::Network;
use pulsekit::error::{Error, Result};
use pulsekit::eval::{
    bland_altman, bland_altman_csv, compute_metrics, evaluate, protocol_pairs, score_recovered, Evaluation,
    MetricsReport, RecoveredRecord, SegmentScore,
};
use pulsekit::training::{train, TrainOutput, TrainPair};

#[derive(Parser)]
#[command(
    name = "pulsekit",
    version,
    about = "Pulse recovery from multi-region intensity traces"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (record files plus a manifest).
    Generate(Common),
    /// Train denoisers and write a checkpoint and a training log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Manifest, record directory or single record file.
        #[arg(long)]
        data: PathBuf,
    },
    /// Write recovered waveforms and spectra for every record.
    Denoise {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelSource,
        #[arg(long)]
        data: PathBuf,
    },
    /// Score heart-rate estimates against the reference.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelSource,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Score previously written `denoise` output instead of running a model.
        #[arg(long, conflicts_with_all = ["checkpoint", "data"])]
        recovered: Option<PathBuf>,
        #[arg(long)]
        protocol: Option<Protocol>,
    },
    /// Run the gradient gate and the solver checks.
    Selftest {
        #[command(flatten)]
        common: Common,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    algorithm: Option<AlgorithmKind>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Test-time iteration budget (outer rounds, or solver iterations for DE-Prox).
    #[arg(long)]
    test_iters: Option<usize>,
    #[arg(long)]
    no_noise_term: bool,
    #[arg(long)]
    model_x: Option<ModelKind>,
    #[arg(long)]
    model_e: Option<ModelKind>,
}

#[derive(Args, Clone)]
struct ModelSource {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

impl Common {
    fn resolve(&self, base: Option<Config>) -> Result<Config> {
        let mut cfg = match (&self.config, base) {
            (Some(p), _) => Config::load(p)?,
            (None, Some(b)) => b,
            (None, None) => Config::default(),
        };
        if let Some(a) = self.algorithm {
            cfg.algorithm = a;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if self.no_noise_term {
            cfg.noise_term = false;
        }
        if self.model_x.is_some() {
            cfg.model_x = self.model_x;
        }
        if self.model_e.is_some() {
            cfg.model_e = self.model_e;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn common_fs(records: &[LabeledRecord]) -> Result<f64> {
    let fs = records
        .first()
        .ok_or_else(|| Error::Config("no records found".into()))?
        .fs;
    if let Some(r) = records.iter().find(|r| r.fs != fs) {
        return Err(Error::Config(format!(
            "records disagree on sample rate: {} Hz and {} Hz ({})",
            fs, r.fs, r.subject_id
        )));
    }
    Ok(fs)
}

fn is_manifest(path: &Path) -> bool {
    path.is_file() && !path.extension().is_some_and(|x| x == "csv")
}

/// Training fold from a manifest's tags, or a seeded subject split.
fn training_fold(path: &Path, cfg: &Config) -> Result<(Fold, f64)> {
    let wc = cfg.window_config();
    if is_manifest(path) {
        let tagged = load_manifest_splits(path)?;
        let recs: Vec<LabeledRecord> = tagged.iter().map(|t| t.1.clone()).collect();
        let fs = common_fs(&recs)?;
        return Ok((fold_from_tags(&tagged, &wc)?, fs));
    }
    let recs = load_records(path)?;
    let fs = common_fs(&recs)?;
    let mut folds = make_dataset(&recs, &wc, &cfg.split(), cfg.seed)?;
    Ok((folds.remove(0), fs))
}

/// Test-tagged records of a manifest (all of them if none is tagged), or
/// every record of a directory or file.
fn scoring_records(path: &Path, wc: &WindowConfig) -> Result<(Vec<ConditionedRecord>, f64)> {
    let recs: Vec<LabeledRecord> = if is_manifest(path) {
        let tagged = load_manifest_splits(path)?;
        let has_test = tagged.iter().any(|t| t.0 == SplitTag::Test);
        tagged
            .into_iter()
            .filter(|t| !has_test || t.0 == SplitTag::Test)
            .map(|t| t.1)
            .collect()
    } else {
        load_records(path)?
    };
    let fs = common_fs(&recs)?;
    Ok((condition_all(&recs, wc)?, fs))
}

fn denoisers_from(ck: &Checkpoint, cfg: &Config) -> Result<Denoisers> {
    let get = |name: &str| -> Result<Network> {
        ck.networks
            .get(name)
            .cloned()
            .map(Network::Mlp)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint has no network {name:?}")))
    };
    if cfg.algorithm == AlgorithmKind::IstaOracle {
        return Ok(pulsekit::algorithms::ista_denoisers(cfg.ista_threshold));
    }
    Ok(Denoisers {
        r: get("r")?,
        q: get("q")?,
    })
}

/// Configuration and networks from a checkpoint, or fresh ISTA maps.
fn load_model(common: &Common, src: &ModelSource) -> Result<(Config, Denoisers)> {
    match &src.checkpoint {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let stored: Config = ck
                .meta
                .get("config")
                .cloned()
                .map(serde_json::from_value)
                .transpose()?
                .ok_or_else(|| Error::Checkpoint("checkpoint carries no configuration".into()))?;
            // only run-time settings may be overridden
            let mut cfg = stored;
            if let Some(p) = &common.config {
                let over = Config::load(p)?;
                cfg.protocol = over.protocol;
            }
            let nets = denoisers_from(&ck, &cfg)?;
            Ok((cfg, nets))
        }
        None => {
            let cfg = common.resolve(None)?;
            if cfg.algorithm != AlgorithmKind::IstaOracle {
                return Err(Error::Config(format!(
                    "--checkpoint is required for the {} algorithm",
                    cfg.algorithm.name()
                )));
            }
            let nets = cfg.init_denoisers(cfg.fs)?;
            Ok((cfg, nets))
        }
    }
}

fn apply_test_iters(cfg: &Config, test_iters: Option<usize>) -> pulsekit::algorithms::AlgorithmConfig {
    let algo = cfg.algorithm_config();
    match test_iters {
        Some(t) => algo.with_test_iters(t),
        None => algo,
    }
}

fn cmd_generate(common: &Common) -> Result<()> {
    let cfg = common.resolve(None)?;
    fs::create_dir_all(&common.out)?;
    let records = generate_synthetic(&cfg.synthetic())?;
    let mut subjects: Vec<String> = records.iter().map(|r| r.subject_id.clone()).collect();
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    subjects.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed));
    let n = subjects.len();
    let SplitSpec::Fractions { train, val } = cfg.split() else {
        unreachable!("config splits are fractions")
    };
    let n_train = ((train * n as f64).round() as usize).clamp(1, n);
    let n_val = ((val * n as f64).round() as usize).min(n - n_train);
    let tag_of = |id: &str| {
        let pos = subjects.iter().position(|s| s == id).expect("generated subject");
        if pos < n_train {
            SplitTag::Train
        } else if pos < n_train + n_val {
            SplitTag::Val
        } else {
            SplitTag::Test
        }
    };
    let mut entries = Vec::new();
    for r in &records {
        let file = format!("{}.csv", r.subject_id);
        save_record(r, &common.out.join(&file))?;
        entries.push((file, tag_of(&r.subject_id)));
    }
    write_manifest(&common.out.join("manifest.txt"), &entries)?;
    fs::write(common.out.join("config.toml"), cfg.to_toml())?;
    eprintln!("wrote {} records to {}", records.len(), common.out.display());
    Ok(())
}

fn pairs_of(windows: &[pulsekit::data::Window]) -> Vec<TrainPair> {
    windows.iter().map(|w| w.pair()).collect()
}

fn cmd_train(common: &Common, data: &Path) -> Result<()> {
    let cfg = common.resolve(None)?;
    if cfg.algorithm == AlgorithmKind::IstaOracle {
        return Err(Error::Config("the ISTA oracle has no trainable parameters".into()));
    }
    let (fold, fs) = training_fold(data, &cfg)?;
    let wc = cfg.window_config();
    let train_set = pairs_of(&fold.train_windows(&wc)?);
    let val_set = pairs_of(&fold.val_windows(&wc)?);
    let model = cfg.signal_model(fs)?;
    let nets = cfg.init_denoisers(fs)?;
    eprintln!(
        "training {} on {} windows ({} validation), {} parameters",
        cfg.algorithm.name(),
        train_set.len(),
        val_set.len(),
        cfg.param_count(fs)
    );
    fs::create_dir_all(&common.out)?;
    fs::write(common.out.join("config.toml"), cfg.to_toml())?;
    let meta = serde_json::json!({
        "config": serde_json::to_value(&cfg)?,
        "fs": fs,
        "param_count": cfg.param_count(fs),
    });
    let output = TrainOutput {
        dir: common.out.clone(),
        meta,
    };
    let val = (!val_set.is_empty()).then_some(val_set.as_slice());
    train(
        &model,
        &cfg.algorithm_config(),
        &cfg.train_config(),
        nets,
        &train_set,
        val,
        Some(&output),
    )?;
    eprintln!("checkpoint written to {}", common.out.join("model.ckpt").display());
    Ok(())
}

fn spectra_csv(rec: &RecoveredRecord, cfg: &Config) -> Result<String> {
    use std::fmt::Write as _;
    let grid = cfg.grid(rec.fs)?;
    let k = rec.spectra.first().map(|s| s.ncols()).unwrap_or(0);
    let mut out = String::from("window,freq_hz");
    for c in 1..=k {
        let _ = write!(out, ",region_{c}");
    }
    out.push('\n');
    for (w, spec) in rec.spectra.iter().enumerate() {
        for n in 0..spec.nrows() {
            let _ = write!(out, "{w},{}", grid.frequency(n));
            for c in 0..k {
                let _ = write!(out, ",{}", spec[[n, c]]);
            }
            out.push('\n');
        }
    }
    Ok(out)
}

fn recovered_as_record(rec: &RecoveredRecord) -> LabeledRecord {
    LabeledRecord {
        regions: rec.waveform(),
        ppg: rec.ppg.clone(),
        hr_series: None,
        fs: rec.fs,
        subject_id: rec.subject_id.clone(),
    }
}

fn run_evaluation(common: &Common, src: &ModelSource, data: &Path, protocol: Protocol) -> Result<(Config, Evaluation)> {
    let (cfg, nets) = load_model(common, src)?;
    let wc = cfg.window_config();
    let (records, fs) = scoring_records(data, &wc)?;
    let model = cfg.signal_model(fs)?;
    let algo = apply_test_iters(&cfg, common.test_iters);
    let ev = evaluate(&model, &algo, &nets, &records, protocol, &wc, cfg.batch_size)?;
    Ok((cfg, ev))
}

fn cmd_denoise(common: &Common, src: &ModelSource, data: &Path) -> Result<()> {
    let (cfg, ev) = run_evaluation(common, src, data, Protocol::Plain)?;
    // spectra go one level down so the output directory re-ingests as records
    let spectra_dir = common.out.join("spectra");
    fs::create_dir_all(&spectra_dir)?;
    for rec in &ev.recovered {
        fs::write(
            common.out.join(format!("{}.csv", rec.subject_id)),
            record_to_csv(&recovered_as_record(rec)),
        )?;
        fs::write(
            spectra_dir.join(format!("{}.csv", rec.subject_id)),
            spectra_csv(rec, &cfg)?,
        )?;
    }
    eprintln!(
        "wrote {} recovered records to {}",
        ev.recovered.len(),
        common.out.display()
    );
    Ok(())
}

fn write_reports(out: &Path, report: &MetricsReport, scores: &[SegmentScore], pairs: &[(f64, f64)]) -> Result<()> {
    use std::fmt::Write as _;
    fs::create_dir_all(out)?;
    let ba = bland_altman(pairs)?;
    let doc = serde_json::json!({
        "mae_bpm": report.mae_bpm,
        "rmse_bpm": report.rmse_bpm,
        "pte6_pct": report.pte6_pct,
        "pearson_rho": report.pearson_rho,
        "n_windows": report.n_windows,
        "bland_altman": ba,
    });
    fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&doc)? + "\n")?;
    fs::write(out.join("bland_altman.csv"), bland_altman_csv(pairs))?;
    let mut seg = String::from("subject,start_s,gt_bpm,pred_bpm\n");
    for s in scores {
        let _ = writeln!(seg, "{},{},{},{}", s.subject_id, s.start_s, s.gt_bpm, s.pred_bpm);
    }
    fs::write(out.join("segments.csv"), seg)?;
    println!("{}", report.summary());
    println!(
        "Bland-Altman: mean {:.3} bpm, limits [{:.3}, {:.3}]",
        ba.mean_diff_bpm, ba.loa_low, ba.loa_high
    );
    Ok(())
}

/// Scores `denoise` output: each record's region columns are the
/// reconstructions laid end to end, the ppg column the conditioned reference.
fn score_recovered_dir(dir: &Path, cfg: &Config, protocol: Protocol) -> Result<Vec<SegmentScore>> {
    let wc = cfg.window_config();
    let mut scores = Vec::new();
    for rec in load_records(dir)? {
        let win = cfg.window_samples(rec.fs);
        let n = rec.len() / win;
        let windows: Vec<Array2<f64>> = (0..n)
            .map(|w| rec.regions.slice(s![w * win..(w + 1) * win, ..]).to_owned())
            .collect();
        let rr = RecoveredRecord {
            subject_id: rec.subject_id.clone(),
            fs: rec.fs,
            windows,
            spectra: Vec::new(),
            ppg: Array1::from(rec.ppg.to_vec()),
        };
        scores.extend(score_recovered(&rr, protocol, &wc)?);
    }
    Ok(scores)
}

fn cmd_eval(
    common: &Common,
    src: &ModelSource,
    data: Option<&Path>,
    recovered: Option<&Path>,
    protocol: Option<Protocol>,
) -> Result<()> {
    if let Some(dir) = recovered {
        let cfg = common.resolve(None)?;
        let protocol = protocol.unwrap_or(cfg.protocol);
        let scores = score_recovered_dir(dir, &cfg, protocol)?;
        let pairs = protocol_pairs(&scores, protocol);
        let report = compute_metrics(&pairs)?;
        return write_reports(&common.out, &report, &scores, &pairs);
    }
    let data = data.ok_or_else(|| Error::Config("eval needs --data or --recovered".into()))?;
    let base_protocol = match &src.checkpoint {
        Some(_) => None,
        None => Some(common.resolve(None)?.protocol),
    };
    let protocol = protocol.or(base_protocol).unwrap_or(Protocol::Plain);
    let (_, ev) = run_evaluation(common, src, data, protocol)?;
    let pairs = protocol_pairs(&ev.scores, protocol);
    write_reports(&common.out, &ev.report, &ev.scores, &pairs)
}

fn cmd_selftest(common: &Common, inject_fault: bool) -> Result<bool> {
    if inject_fault {
        pulsekit::denoiser::set_fault_injection(true);
    }
    let cfg = common.resolve(None)?;
    let results = pulsekit::selftest::run_selftest(&cfg)?;
    let mut ok = true;
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        ok &= r.passed;
    }
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    match &cli.command {
        Command::Generate(c) => cmd_generate(c).map(|_| true),
        Command::Train { common, data } => cmd_train(common, data).map(|_| true),
        Command::Denoise { common, model, data } => cmd_denoise(common, model, data).map(|_| true),
        Command::Eval {
            common,
            model,
            data,
            recovered,
            protocol,
        } => cmd_eval(common, model, data.as_deref(), recovered.as_deref(), *protocol).map(|_| true),
        Command::Selftest { common, inject_fault } => cmd_selftest(common, *inject_fault),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: self-test failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
