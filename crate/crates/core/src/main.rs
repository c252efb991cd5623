use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use opg_fpad::evaluation::{emit_report, EvalReport, MetricsFile};
use opg_fpad::ingest::{make_synthetic_fixture_with, scan_dataset, FixtureSpec, LayoutSpec};
use opg_fpad::opg::{build_opg, build_or_load_opg, cache_root_from_env, contact_sheet, generate_patches, OpgBundle};
use opg_fpad::patching::{denormalize_value, PatchStore};
use opg_fpad::protocols::{
    cross_sensor_matrix, evaluate_sections, run_protocol, train_sections, with_workers, ExperimentSpec, OpgSource,
    ProtocolSpec, RunOptions, TrainedSections,
};
use opg_fpad::{DatasetManifest, Error, RunConfig};

#[derive(Parser)]
#[command(name = "opg-fpad", version, about = "Fingerprint presentation-attack detection toolkit")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Section-level parallelism; 0 means min(9, cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Index a dataset directory into a manifest and print its counts.
    Scan {
        root: PathBuf,
        /// JSON directory-naming layout.
        #[arg(long)]
        layout: Option<PathBuf>,
        /// Where to write the manifest.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic multi-sensor dataset for trying the pipeline.
    Fixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        sensors: usize,
        #[arg(long, default_value_t = 6)]
        per_class: usize,
    },
    /// Train the nine section generators with one sensor held out.
    TrainOpg {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        holdout: String,
        /// Bundle directory; optional when OPG_FPAD_CACHE is set.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample patches from one section generator and tile a contact sheet.
    GenPatches {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        section: usize,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the nine section classifiers on one sensor's training split.
    TrainClf {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        sensor: String,
        /// Augment with generated spoof patches from --bundle.
        #[arg(long)]
        use_opg: bool,
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// Sensor the bundle must hold out (the future test sensor);
        /// defaults to --sensor.
        #[arg(long)]
        holdout: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a sensor's test split with trained classifiers.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        /// Test sensor.
        #[arg(long)]
        sensor: String,
        /// Directory given to train-clf --out.
        #[arg(long)]
        checkpoints: PathBuf,
        /// Sensor the classifiers were trained on; defaults to --sensor.
        #[arg(long)]
        train_sensor: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Also write det.svg.
        #[arg(long)]
        det: bool,
    },
    /// Run a whole protocol from an experiment file or from flags.
    Run {
        #[arg(long, conflicts_with_all = ["manifest", "sensor", "test_sensor", "matrix"])]
        experiment: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Training sensor (and test sensor for intra-sensor runs).
        #[arg(long)]
        sensor: Option<String>,
        /// Test sensor of a cross-sensor run.
        #[arg(long)]
        test_sensor: Option<String>,
        /// Every ordered pair of sensors plus the average.
        #[arg(long)]
        matrix: bool,
        /// Augment spoofs with generated patches; on unless set to false.
        #[arg(long)]
        use_opg: Option<bool>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        det: bool,
    },
}

fn load_config(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json value serializes"));
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.2}"))
}

fn print_report(report: &EvalReport, format: Format, header: &str) {
    let m = &report.metrics;
    match format {
        Format::Json => print_json(&serde_json::to_value(MetricsFile::of(report)).expect("metrics serialize")),
        Format::Text => {
            println!("{header}");
            println!("  samples        {}", report.per_sample_scores.len());
            println!("  no minutiae    {}", report.n_no_minutiae);
            println!("  BPCER          {}", pct(m.bpcer));
            println!("  APCER          {}", pct(m.apcer));
            println!("  APCER known    {}", pct(m.apcer_known));
            println!("  APCER unknown  {}", pct(m.apcer_unknown));
            println!("  ACE            {}", pct(m.ace));
            println!("  accuracy       {}", pct(m.accuracy));
        }
    }
}

fn scan(root: &Path, layout: Option<&Path>, out: &Path, format: Format) -> anyhow::Result<()> {
    let layout = match layout {
        Some(p) => LayoutSpec::load(p)?,
        None => LayoutSpec::default(),
    };
    let report = scan_dataset(root, &layout)?;
    report.manifest.save(out)?;
    for (path, why) in &report.skipped {
        log::warn!("skipped {}: {why}", path.display());
    }
    print_counts(&report.manifest, format);
    Ok(())
}

fn print_counts(m: &DatasetManifest, format: Format) {
    let counts = m.material_counts();
    match format {
        Format::Json => {
            let rows: Vec<_> = counts
                .iter()
                .map(|((s, split, mat), n)| json!({"sensor": s, "split": split, "material": mat, "count": n}))
                .collect();
            print_json(&json!({"sensors": m.sensors, "counts": rows}));
        }
        Format::Text => {
            println!("{:<16} {:<6} {:<16} {:>6}", "sensor", "split", "material", "count");
            for ((s, split, mat), n) in &counts {
                println!("{s:<16} {split:<6} {mat:<16} {n:>6}");
            }
        }
    }
}

fn train_opg(manifest: &Path, holdout: &str, out: Option<&Path>, cfg: &RunConfig) -> anyhow::Result<()> {
    let m = DatasetManifest::load(manifest)?;
    let cache = cache_root_from_env();
    if out.is_none() && cache.is_none() {
        return Err(Error::Config("give --out or set OPG_FPAD_CACHE".into()).into());
    }
    let bundle = with_workers(cfg, || {
        let mut store = PatchStore::default();
        match &cache {
            Some(root) => build_or_load_opg(&m, holdout, &mut store, cfg, Some(root)).map(|(b, hit)| {
                if hit {
                    log::info!("cache hit: skipped training for held-out sensor {holdout}");
                }
                b
            }),
            None => build_opg(&m, holdout, &mut store, cfg),
        }
    })??;
    if let Some(dir) = out {
        bundle.save(dir)?;
        println!("bundle written to {}", dir.display());
    }
    let p = &bundle.provenance;
    println!(
        "held out {}; trained on {:?}; section patches {:?}",
        p.held_out_sensor, p.training_sensors, p.section_patch_counts
    );
    Ok(())
}

fn gen_patches(bundle: &Path, section: usize, count: usize, out: &Path, seed: u64) -> anyhow::Result<()> {
    let b = OpgBundle::load(bundle, None)?;
    let patches = generate_patches(&b, section, count, seed)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (i, p) in patches.iter().enumerate() {
        let n = p.size() as u32;
        let img = image::GrayImage::from_fn(n, n, |x, y| {
            image::Luma([denormalize_value(p.values()[(y * n + x) as usize])])
        });
        img.save(out.join(format!("patch_{i:04}.png")))?;
    }
    if let Some(sheet) = contact_sheet(&patches) {
        sheet.save(out.join("contact_sheet.png"))?;
    }
    println!("{} patches for section {section} in {}", patches.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_clf(
    manifest: &Path,
    sensor: &str,
    use_opg: bool,
    bundle: Option<&Path>,
    holdout: Option<&str>,
    out: &Path,
    cfg: &RunConfig,
    format: Format,
) -> anyhow::Result<()> {
    let m = DatasetManifest::load(manifest)?;
    if !m.has_sensor(sensor) {
        return Err(Error::Protocol(format!("sensor {sensor:?} is not in the manifest")).into());
    }
    let holdout = holdout.unwrap_or(sensor);
    let bundle = match (use_opg, bundle) {
        (false, _) => None,
        (true, Some(dir)) if dir.join("provenance.json").exists() => {
            let b = OpgBundle::load(dir, Some(cfg))?;
            if b.held_out_sensor != holdout {
                return Err(Error::Protocol(format!(
                    "bundle holds out {} but the test sensor is {holdout}",
                    b.held_out_sensor
                ))
                .into());
            }
            Some(b)
        }
        (true, _) => return Err(Error::Protocol("--use-opg needs an existing --bundle directory".into()).into()),
    };
    let models = with_workers(cfg, || {
        train_sections(&m, sensor, bundle.as_ref(), &mut PatchStore::default(), cfg)
    })??;
    models.save(out, cfg)?;
    cfg.save(&out.join(sensor).join("config.json"))?;
    match format {
        Format::Json => print_json(&json!({"sensor": sensor, "augmentation": models.augmentation})),
        Format::Text => {
            println!("classifiers for {sensor} written to {}", out.join(sensor).display());
            for a in &models.augmentation {
                println!(
                    "  section {}: live {} spoof {} generated {}",
                    a.section, a.live, a.spoof, a.generated
                );
            }
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    manifest: &Path,
    sensor: &str,
    checkpoints: &Path,
    train_sensor: Option<&str>,
    out: &Path,
    det: bool,
    cfg: &RunConfig,
    format: Format,
) -> anyhow::Result<()> {
    let m = DatasetManifest::load(manifest)?;
    let train_sensor = train_sensor.unwrap_or(sensor);
    let models = TrainedSections::load(checkpoints, train_sensor, cfg)?;
    let report = with_workers(cfg, || evaluate_sections(&models, &m, sensor, &mut PatchStore::default(), cfg))??;
    emit_report(&report, out, det)?;
    let header = if train_sensor == sensor {
        format!("intra-sensor {sensor}")
    } else {
        format!(
            "cross-sensor {train_sensor} -> {sensor}: accuracy {}",
            pct(report.metrics.accuracy)
        )
    };
    print_report(&report, format, &header);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run(
    experiment: Option<&Path>,
    manifest: Option<&Path>,
    sensor: Option<&str>,
    test_sensor: Option<&str>,
    matrix: bool,
    use_opg: Option<bool>,
    out: Option<PathBuf>,
    det: bool,
    common: &Common,
) -> anyhow::Result<()> {
    let opg = match cache_root_from_env() {
        Some(root) => OpgSource::TrainCached(root),
        None => OpgSource::Train,
    };
    let opts = RunOptions { opg, out: out.clone(), det_plot: det };
    if let Some(path) = experiment {
        let spec = ExperimentSpec::load(path)?;
        let mut cfg = spec.config()?;
        if let Some(s) = common.seed {
            cfg.seed = s;
        }
        if let Some(w) = common.workers {
            cfg.workers = w;
        }
        let m = DatasetManifest::load(&spec.dataset)?;
        let pspec = spec.protocol_spec();
        let result = run_protocol(&m, &pspec, &cfg, &opts)?;
        if let Some(root) = &out {
            spec.save(&pspec.run_dir(root).join("experiment.json"))?;
        }
        print_report(&result.report, common.format, &describe(&pspec));
        return Ok(());
    }
    let cfg = load_config(common)?;
    let Some(manifest) = manifest else {
        return Err(Error::Config("give --experiment or --manifest".into()).into());
    };
    let m = DatasetManifest::load(manifest)?;
    if matrix {
        let mx = cross_sensor_matrix(&m, &cfg, use_opg.unwrap_or(true), &opts)?;
        match common.format {
            Format::Json => print_json(&serde_json::to_value(&mx)?),
            Format::Text => {
                println!("{:<16} {:<16} {:>9}", "train", "test", "accuracy");
                for r in &mx.rows {
                    println!("{:<16} {:<16} {:>9}", r.train_sensor, r.test_sensor, pct(r.accuracy));
                }
                println!("{:<16} {:<16} {:>9}", "average", "", pct(mx.average));
            }
        }
        return Ok(());
    }
    let Some(sensor) = sensor else {
        return Err(Error::Config("--sensor is required".into()).into());
    };
    let pspec = match test_sensor {
        Some(t) if t != sensor => ProtocolSpec::cross(sensor, t, use_opg.unwrap_or(true)),
        _ => ProtocolSpec::intra(sensor, use_opg.unwrap_or(true)),
    };
    let result = run_protocol(&m, &pspec, &cfg, &opts)?;
    if let Some(root) = &out {
        let spec = ExperimentSpec {
            dataset: manifest.to_path_buf(),
            protocol: pspec.kind,
            train_sensor: pspec.train_sensor.clone(),
            test_sensor: pspec.test_sensor.clone(),
            use_opg: pspec.use_opg,
            config_overrides: serde_json::to_value(&cfg)?,
        };
        spec.save(&pspec.run_dir(root).join("experiment.json"))?;
    }
    print_report(&result.report, common.format, &describe(&pspec));
    Ok(())
}

fn describe(p: &ProtocolSpec) -> String {
    format!(
        "{} train {} test {}{}",
        p.kind.as_str(),
        p.train_sensor,
        p.test_sensor,
        if p.use_opg { " with generated spoofs" } else { "" }
    )
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let common = &cli.common;
    match cli.command {
        Command::Scan { root, layout, out } => scan(&root, layout.as_deref(), &out, common.format),
        Command::Fixture { out, sensors, per_class } => {
            let cfg = load_config(common)?;
            let m = make_synthetic_fixture_with(&FixtureSpec::new(cfg.seed, sensors, per_class), &out)?;
            println!("fixture written to {}", out.display());
            print_counts(&m, common.format);
            Ok(())
        }
        Command::TrainOpg { manifest, holdout, out } => {
            train_opg(&manifest, &holdout, out.as_deref(), &load_config(common)?)
        }
        Command::GenPatches {
            bundle,
            section,
            count,
            out,
        } => gen_patches(&bundle, section, count, &out, common.seed.unwrap_or(0)),
        Command::TrainClf {
            manifest,
            sensor,
            use_opg,
            bundle,
            holdout,
            out,
        } => train_clf(
            &manifest,
            &sensor,
            use_opg,
            bundle.as_deref(),
            holdout.as_deref(),
            &out,
            &load_config(common)?,
            common.format,
        ),
        Command::Evaluate {
            manifest,
            sensor,
            checkpoints,
            train_sensor,
            out,
            det,
        } => evaluate(
            &manifest,
            &sensor,
            &checkpoints,
            train_sensor.as_deref(),
            &out,
            det,
            &load_config(common)?,
            common.format,
        ),
        Command::Run {
            experiment,
            manifest,
            sensor,
            test_sensor,
            matrix,
            use_opg,
            out,
            det,
        } => run(
            experiment.as_deref(),
            manifest.as_deref(),
            sensor.as_deref(),
            test_sensor.as_deref(),
            matrix,
            use_opg,
            out,
            det,
            common,
        ),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.downcast_ref::<Error>().is_some_and(Error::is_usage);
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
