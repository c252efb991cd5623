//! End-to-end evaluation scenarios: intra-sensor (known and unknown
//! materials, both expressed through manifest flags) and cross-sensor.
//!
//! A run patches the training images, optionally augments every section's
//! spoof patches with as many generated ones from the generator bundle
//! whose held-out sensor is the test sensor, trains the nine section
//! classifiers, scores the test images and reports metrics.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{
    build_section_classifier, predict_patches, train_section_classifier, write_history, EpochStats,
    SectionClassifier,
};
use crate::config::RunConfig;
use crate::domain::{paths_fingerprint, DatasetManifest, GrayImage, PatchLabel, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::evaluation::{emit_report, fuse_scores, EvalReport, SampleScore};
use crate::opg::{build_or_load_opg, generate_patches, opg_training_records, OpgBundle, OpgProvenance};
use crate::patching::{group_by_section, image_patches, PatchStore, SECTIONS};
use crate::rng::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    IntraSensor,
    CrossSensor,
}

impl ProtocolKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProtocolKind::IntraSensor => "intra_sensor",
            ProtocolKind::CrossSensor => "cross_sensor",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSpec {
    pub kind: ProtocolKind,
    pub train_sensor: String,
    pub test_sensor: String,
    pub use_opg: bool,
    /// Must equal `test_sensor` when `use_opg` is set.
    pub opg_holdout: Option<String>,
}

impl ProtocolSpec {
    pub fn intra(sensor: &str, use_opg: bool) -> Self {
        ProtocolSpec {
            kind: ProtocolKind::IntraSensor,
            train_sensor: sensor.into(),
            test_sensor: sensor.into(),
            use_opg,
            opg_holdout: use_opg.then(|| sensor.to_string()),
        }
    }

    pub fn cross(train: &str, test: &str, use_opg: bool) -> Self {
        ProtocolSpec {
            kind: ProtocolKind::CrossSensor,
            train_sensor: train.into(),
            test_sensor: test.into(),
            use_opg,
            opg_holdout: use_opg.then(|| test.to_string()),
        }
    }

    pub fn validate(&self, manifest: &DatasetManifest) -> Result<()> {
        for s in [&self.train_sensor, &self.test_sensor] {
            if !manifest.has_sensor(s) {
                return Err(Error::Protocol(format!("sensor {s:?} is not in the manifest")));
            }
        }
        match self.kind {
            ProtocolKind::IntraSensor if self.train_sensor != self.test_sensor => {
                return Err(Error::Protocol("intra-sensor runs train and test on one sensor".into()))
            }
            ProtocolKind::CrossSensor if self.train_sensor == self.test_sensor => {
                return Err(Error::Protocol(format!(
                    "cross-sensor run needs two different sensors, got {} twice",
                    self.train_sensor
                )))
            }
            _ => {}
        }
        if self.use_opg && self.opg_holdout.as_deref() != Some(self.test_sensor.as_str()) {
            return Err(Error::Protocol(format!(
                "the generator bundle must hold out the test sensor {} (got {:?})",
                self.test_sensor, self.opg_holdout
            )));
        }
        Ok(())
    }

    /// Results subdirectory: `<protocol>/<sensors>`.
    pub fn run_dir(&self, root: &Path) -> PathBuf {
        let sensors = match self.kind {
            ProtocolKind::IntraSensor => self.test_sensor.clone(),
            ProtocolKind::CrossSensor => format!("{}__{}", self.train_sensor, self.test_sensor),
        };
        root.join(self.kind.as_str()).join(sensors)
    }
}

/// On-disk experiment description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    /// Manifest path.
    pub dataset: PathBuf,
    pub protocol: ProtocolKind,
    pub train_sensor: String,
    pub test_sensor: String,
    pub use_opg: bool,
    /// Partial `RunConfig` applied over the defaults.
    #[serde(default)]
    pub config_overrides: serde_json::Value,
}

impl ExperimentSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn protocol_spec(&self) -> ProtocolSpec {
        match self.protocol {
            ProtocolKind::IntraSensor => ProtocolSpec::intra(&self.test_sensor, self.use_opg),
            ProtocolKind::CrossSensor => ProtocolSpec::cross(&self.train_sensor, &self.test_sensor, self.use_opg),
        }
    }

    /// Defaults with the overrides applied, validated.
    pub fn config(&self) -> Result<RunConfig> {
        let mut base = serde_json::to_value(RunConfig::default()).expect("config serializes");
        if let (Some(b), Some(o)) = (base.as_object_mut(), self.config_overrides.as_object()) {
            for (k, v) in o {
                b.insert(k.clone(), v.clone());
            }
        } else if !self.config_overrides.is_null() {
            return Err(Error::Config("config_overrides must be a JSON object".into()));
        }
        let cfg: RunConfig = serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Where a run's generator bundle comes from.
#[derive(Clone, Debug, Default)]
pub enum OpgSource {
    /// Train one (reusing the cache directory when given).
    #[default]
    Train,
    TrainCached(PathBuf),
    /// Use a prebuilt bundle directory; missing is a protocol error.
    Bundle(PathBuf),
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub opg: OpgSource,
    /// Experiment root; when set, checkpoints, histories and reports are
    /// written under `<root>/<protocol>/<sensors>/`.
    pub out: Option<PathBuf>,
    pub det_plot: bool,
}

/// Spoof and generated patch counts of one section's training set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionAugmentation {
    pub section: usize,
    pub live: usize,
    pub spoof: usize,
    pub generated: usize,
}

/// Nine trained section classifiers; sections without both classes in
/// training stay empty and their patches are not scored.
#[derive(Clone, Debug)]
pub struct TrainedSections {
    pub train_sensor: String,
    pub classifiers: Vec<Option<SectionClassifier>>,
    pub histories: Vec<Vec<EpochStats>>,
    pub augmentation: Vec<SectionAugmentation>,
    /// Every image path whose pixels influenced training, including the
    /// generator bundle's training images.
    pub training_paths: BTreeSet<String>,
}

/// Run `f` on a pool of `cfg.workers` threads (`min(9, cores)` when 0).
pub fn with_workers<R: Send>(cfg: &RunConfig, f: impl FnOnce() -> R + Send) -> Result<R> {
    let n = if cfg.workers == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get()).min(SECTIONS)
    } else {
        cfg.workers
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {n} workers: {e}")))?;
    Ok(pool.install(f))
}

/// Train split of one sensor.
fn train_records<'a>(manifest: &'a DatasetManifest, sensor: &'a str) -> Vec<&'a SampleRecord> {
    manifest.select(Some(sensor), Some(Split::Train), None).collect()
}

fn test_records<'a>(manifest: &'a DatasetManifest, sensor: &'a str) -> Vec<&'a SampleRecord> {
    manifest.select(Some(sensor), Some(Split::Test), None).collect()
}

/// Train the section classifiers on `train_sensor`'s training split.
///
/// With a bundle, each section's spoof patches are joined by exactly as many
/// generated patches; the counts are logged and returned.
pub fn train_sections(
    manifest: &DatasetManifest,
    train_sensor: &str,
    bundle: Option<&OpgBundle>,
    store: &mut PatchStore,
    cfg: &RunConfig,
) -> Result<TrainedSections> {
    let records = train_records(manifest, train_sensor);
    if records.is_empty() {
        return Err(Error::Protocol(format!("sensor {train_sensor} has no training images")));
    }
    store.extend(records.iter().copied(), cfg)?;
    let mut training_paths: BTreeSet<String> = records.iter().map(|r| r.path.clone()).collect();
    if let Some(b) = bundle {
        for r in opg_training_records(manifest, &b.held_out_sensor)? {
            training_paths.insert(r.path.clone());
        }
    }
    let sections = group_by_section(store.patches_of(records.iter().copied())?);

    let mut plan = Vec::with_capacity(SECTIONS);
    let mut augmentation = Vec::with_capacity(SECTIONS);
    for (j, patches) in sections.into_iter().enumerate() {
        let (live, spoof): (Vec<_>, Vec<_>) = patches.into_iter().partition(|p| p.label() == PatchLabel::Live);
        let generated = match bundle {
            Some(b) => generate_patches(b, j, spoof.len(), derive_seed(cfg.seed, &format!("augment/{train_sensor}")))?,
            None => Vec::new(),
        };
        if bundle.is_some() {
            log::info!(
                "augmentation section {j}: spoof {} generated {}{}",
                spoof.len(),
                generated.len(),
                if generated.len() == spoof.len() { "" } else { " MISMATCH" }
            );
        }
        augmentation.push(SectionAugmentation {
            section: j,
            live: live.len(),
            spoof: spoof.len(),
            generated: generated.len(),
        });
        plan.push((j, live, spoof, generated));
    }

    let trained: Vec<Result<(Option<SectionClassifier>, Vec<EpochStats>)>> = plan
        .into_par_iter()
        .map(|(j, live, spoof, generated)| {
            if live.is_empty() || spoof.is_empty() {
                log::warn!(
                    "section {j}: {} live and {} spoof training patches; section left untrained",
                    live.len(),
                    spoof.len()
                );
                return Ok((None, Vec::new()));
            }
            let mut clf = build_section_classifier(j, cfg)?;
            let hist = train_section_classifier(&mut clf, &live, &spoof, &generated, cfg, false)?;
            Ok((Some(clf), hist))
        })
        .collect();
    let mut classifiers = Vec::with_capacity(SECTIONS);
    let mut histories = Vec::with_capacity(SECTIONS);
    for r in trained {
        let (c, h) = r?;
        classifiers.push(c);
        histories.push(h);
    }
    Ok(TrainedSections {
        train_sensor: train_sensor.to_string(),
        classifiers,
        histories,
        augmentation,
        training_paths,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SectionsManifest {
    train_sensor: String,
    trained: Vec<bool>,
    augmentation: Vec<SectionAugmentation>,
    training_paths: BTreeSet<String>,
}

impl TrainedSections {
    /// Write `<dir>/<sensor>/section_<j>.ckpt`, a history CSV per section and
    /// an index file.
    pub fn save(&self, dir: &Path, cfg: &RunConfig) -> Result<()> {
        let base = dir.join(&self.train_sensor);
        std::fs::create_dir_all(&base).map_err(|e| Error::io(&base, e))?;
        for (j, c) in self.classifiers.iter().enumerate() {
            if let Some(c) = c {
                c.save(&base.join(format!("section_{j}.ckpt")), cfg)?;
            }
            write_history(&base.join(format!("section_{j}_history.csv")), &self.histories[j])?;
        }
        let index = SectionsManifest {
            train_sensor: self.train_sensor.clone(),
            trained: self.classifiers.iter().map(Option::is_some).collect(),
            augmentation: self.augmentation.clone(),
            training_paths: self.training_paths.clone(),
        };
        let path = base.join("sections.json");
        let text = serde_json::to_string_pretty(&index).map_err(|e| Error::json(&path, e))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path, train_sensor: &str, cfg: &RunConfig) -> Result<Self> {
        let base = dir.join(train_sensor);
        let path = base.join("sections.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: SectionsManifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        let mut classifiers = Vec::with_capacity(SECTIONS);
        for (j, &t) in index.trained.iter().enumerate() {
            classifiers.push(if t {
                Some(SectionClassifier::load(&base.join(format!("section_{j}.ckpt")), j, cfg)?)
            } else {
                None
            });
        }
        if classifiers.len() != SECTIONS {
            return Err(Error::Checkpoint {
                path,
                reason: format!("{} sections listed", classifiers.len()),
            });
        }
        Ok(TrainedSections {
            train_sensor: index.train_sensor,
            classifiers,
            histories: vec![Vec::new(); SECTIONS],
            augmentation: index.augmentation,
            training_paths: index.training_paths,
        })
    }
}

/// Fail if any test image was used in training.
pub fn leakage_guard(training_paths: &BTreeSet<String>, test: &[&SampleRecord]) -> Result<()> {
    let leaked: Vec<&str> = test
        .iter()
        .filter(|r| training_paths.contains(&r.path))
        .map(|r| r.path.as_str())
        .collect();
    if leaked.is_empty() {
        Ok(())
    } else {
        Err(Error::Protocol(format!(
            "{} test image(s) were used in training, first {}",
            leaked.len(),
            leaked[0]
        )))
    }
}

/// Score `test_sensor`'s test split. Each patch goes to its own section's
/// classifier; an image without scored patches gets no score.
pub fn evaluate_sections(
    models: &TrainedSections,
    manifest: &DatasetManifest,
    test_sensor: &str,
    store: &mut PatchStore,
    cfg: &RunConfig,
) -> Result<EvalReport> {
    let records = test_records(manifest, test_sensor);
    if records.is_empty() {
        return Err(Error::Protocol(format!("sensor {test_sensor} has no test images")));
    }
    leakage_guard(&models.training_paths, &records)?;
    store.extend(records.iter().copied(), cfg)?;

    // Batch every section's patches, remembering which image each came from.
    let mut per_section: Vec<(Vec<crate::domain::Patch>, Vec<usize>)> = vec![(Vec::new(), Vec::new()); SECTIONS];
    for (i, r) in records.iter().enumerate() {
        for p in store.get(&r.path).unwrap_or_default() {
            let s = p.section();
            if models.classifiers[s].is_some() {
                per_section[s].0.push(p.clone());
                per_section[s].1.push(i);
            }
        }
    }
    let scored: Vec<Result<Vec<f64>>> = per_section
        .par_iter()
        .enumerate()
        .map(|(j, (patches, _))| match &models.classifiers[j] {
            Some(c) if !patches.is_empty() => predict_patches(c, patches),
            _ => Ok(Vec::new()),
        })
        .collect();
    let mut by_image: Vec<Vec<f64>> = vec![Vec::new(); records.len()];
    for ((_, owners), scores) in per_section.iter().zip(scored) {
        for (&i, s) in owners.iter().zip(scores?) {
            by_image[i].push(s);
        }
    }
    let samples = records
        .iter()
        .zip(by_image)
        .map(|(r, s)| SampleScore {
            sample_id: r.path.clone(),
            score: fuse_scores(&s).ok(),
            label: r.label,
            material: r.material.clone(),
            known_material: r.known_material,
        })
        .collect();
    Ok(EvalReport::from_scores(samples, cfg.score_threshold))
}

/// Fused liveness score of one image, or `None` when none of its patches
/// reached a trained section.
pub fn score_image(models: &TrainedSections, image: &GrayImage, cfg: &RunConfig) -> Result<Option<f64>> {
    // The label only tags the patches; it plays no part in scoring.
    let patches = image_patches(image, PatchLabel::Live, cfg)?;
    let mut scores = Vec::new();
    for (j, group) in group_by_section(patches).iter().enumerate() {
        if let (Some(c), false) = (&models.classifiers[j], group.is_empty()) {
            scores.extend(predict_patches(c, group)?);
        }
    }
    Ok(fuse_scores(&scores).ok())
}

/// Everything one protocol run produced.
#[derive(Clone, Debug)]
pub struct ProtocolRun {
    pub spec: ProtocolSpec,
    pub report: EvalReport,
    pub augmentation: Vec<SectionAugmentation>,
    pub opg_provenance: Option<OpgProvenance>,
    /// Digest of the training image paths, generator data included.
    pub training_fingerprint: String,
    pub out_dir: Option<PathBuf>,
}

fn obtain_bundle(
    manifest: &DatasetManifest,
    holdout: &str,
    store: &mut PatchStore,
    cfg: &RunConfig,
    source: &OpgSource,
) -> Result<OpgBundle> {
    let bundle = match source {
        OpgSource::Train => build_or_load_opg(manifest, holdout, store, cfg, None)?.0,
        OpgSource::TrainCached(root) => build_or_load_opg(manifest, holdout, store, cfg, Some(root))?.0,
        OpgSource::Bundle(dir) => {
            if !dir.join("provenance.json").exists() {
                return Err(Error::Protocol(format!(
                    "no generator bundle at {} for held-out sensor {holdout}",
                    dir.display()
                )));
            }
            OpgBundle::load(dir, Some(cfg))?
        }
    };
    let p = &bundle.provenance;
    if bundle.held_out_sensor != holdout || p.training_sensors.iter().any(|s| s == holdout) || p.held_out_overlap != 0 {
        return Err(Error::Protocol(format!(
            "generator bundle holds out {} but the test sensor is {holdout}",
            bundle.held_out_sensor
        )));
    }
    Ok(bundle)
}

/// Run one protocol end to end.
pub fn run_protocol(
    manifest: &DatasetManifest,
    spec: &ProtocolSpec,
    cfg: &RunConfig,
    opts: &RunOptions,
) -> Result<ProtocolRun> {
    spec.validate(manifest)?;
    cfg.validate()?;
    with_workers(cfg, || {
        let mut store = PatchStore::default();
        let bundle = if spec.use_opg {
            Some(obtain_bundle(manifest, &spec.test_sensor, &mut store, cfg, &opts.opg)?)
        } else {
            None
        };
        let models = train_sections(manifest, &spec.train_sensor, bundle.as_ref(), &mut store, cfg)?;
        let report = evaluate_sections(&models, manifest, &spec.test_sensor, &mut store, cfg)?;
        let out_dir = opts.out.as_ref().map(|root| spec.run_dir(root));
        if let Some(dir) = &out_dir {
            models.save(dir, cfg)?;
            emit_report(&report, dir, opts.det_plot)?;
            cfg.save(&dir.join("config.json"))?;
            let path = dir.join("augmentation.json");
            let text = serde_json::to_string_pretty(&models.augmentation).map_err(|e| Error::json(&path, e))?;
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            if let Some(b) = &bundle {
                let path = dir.join("opg_provenance.json");
                let text = serde_json::to_string_pretty(&b.provenance).map_err(|e| Error::json(&path, e))?;
                std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            }
        }
        Ok(ProtocolRun {
            spec: spec.clone(),
            report,
            augmentation: models.augmentation,
            opg_provenance: bundle.map(|b| b.provenance),
            training_fingerprint: paths_fingerprint(models.training_paths.iter().map(String::as_str)),
            out_dir,
        })
    })?
}

pub fn run_intra_sensor(
    manifest: &DatasetManifest,
    sensor: &str,
    cfg: &RunConfig,
    use_opg: bool,
    opts: &RunOptions,
) -> Result<ProtocolRun> {
    run_protocol(manifest, &ProtocolSpec::intra(sensor, use_opg), cfg, opts)
}

pub fn run_cross_sensor(
    manifest: &DatasetManifest,
    train_sensor: &str,
    test_sensor: &str,
    cfg: &RunConfig,
    use_opg: bool,
    opts: &RunOptions,
) -> Result<ProtocolRun> {
    run_protocol(manifest, &ProtocolSpec::cross(train_sensor, test_sensor, use_opg), cfg, opts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossRow {
    pub train_sensor: String,
    pub test_sensor: String,
    pub accuracy: Option<f64>,
}

/// Every ordered pair of distinct sensors, plus the mean accuracy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossMatrix {
    pub rows: Vec<CrossRow>,
    pub average: Option<f64>,
}

pub fn cross_sensor_matrix(
    manifest: &DatasetManifest,
    cfg: &RunConfig,
    use_opg: bool,
    opts: &RunOptions,
) -> Result<CrossMatrix> {
    let mut rows = Vec::new();
    for a in &manifest.sensors {
        for b in &manifest.sensors {
            if a != b {
                let run = run_cross_sensor(manifest, a, b, cfg, use_opg, opts)?;
                rows.push(CrossRow {
                    train_sensor: a.clone(),
                    test_sensor: b.clone(),
                    accuracy: run.report.metrics.accuracy,
                });
            }
        }
    }
    let accs: Vec<f64> = rows.iter().filter_map(|r| r.accuracy).collect();
    let average = (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64);
    Ok(CrossMatrix { rows, average })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{make_synthetic_fixture_with, FixtureSpec};

    fn tiny() -> RunConfig {
        RunConfig {
            patch_size: 32,
            max_patches_per_image: 6,
            noise_dim: 8,
            gen_channels: 8,
            critic_channels: 4,
            gan_epochs: 1,
            critic_steps: 2,
            growth_rate: 4,
            block_layers: vec![2, 2],
            stem_channels: 8,
            head_dense: (16, 8),
            batch_size: 16,
            clf_epochs: 1,
            learning_rate: 1e-3,
            workers: 2,
            ..Default::default()
        }
    }

    fn fixture(sensors: usize) -> (tempfile::TempDir, DatasetManifest) {
        let dir = tempfile::tempdir().unwrap();
        let m = make_synthetic_fixture_with(&FixtureSpec::new(3, sensors, 3), dir.path()).unwrap();
        (dir, m)
    }

    #[test]
    fn specs_enforce_holdout_and_sensor_rules() {
        let (_d, m) = fixture(2);
        let (a, b) = (m.sensors[0].as_str(), m.sensors[1].as_str());
        assert!(ProtocolSpec::intra(a, true).validate(&m).is_ok());
        assert!(ProtocolSpec::cross(a, b, true).validate(&m).is_ok());
        assert!(ProtocolSpec::cross(a, a, false).validate(&m).is_err());
        let mut s = ProtocolSpec::cross(a, b, true);
        s.opg_holdout = Some(a.into());
        assert!(matches!(s.validate(&m), Err(Error::Protocol(_))));
        assert!(ProtocolSpec::intra("ghost", false).validate(&m).is_err());
        let err = run_cross_sensor(&m, a, a, &tiny(), false, &RunOptions::default()).unwrap_err();
        assert!(err.is_usage());
    }

    #[test]
    fn leakage_guard_catches_shared_paths() {
        let (_d, m) = fixture(1);
        let test: Vec<&SampleRecord> = m.select(None, Some(Split::Test), None).collect();
        let mut train: BTreeSet<String> = m
            .select(None, Some(Split::Train), None)
            .map(|r| r.path.clone())
            .collect();
        assert!(leakage_guard(&train, &test).is_ok());
        train.insert(test[0].path.clone());
        assert!(leakage_guard(&train, &test).is_err());
    }

    #[test]
    fn missing_bundle_is_a_protocol_error() {
        let (_d, m) = fixture(2);
        let opts = RunOptions {
            opg: OpgSource::Bundle(PathBuf::from("/nonexistent/bundle")),
            ..Default::default()
        };
        let err = run_intra_sensor(&m, &m.sensors[0], &tiny(), true, &opts).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)), "{err}");
    }

    #[test]
    fn intra_sensor_run_with_generator_augmentation() {
        let (_d, m) = fixture(2);
        let out = tempfile::tempdir().unwrap();
        let opts = RunOptions {
            out: Some(out.path().to_path_buf()),
            det_plot: true,
            ..Default::default()
        };
        let run = run_intra_sensor(&m, &m.sensors[0], &tiny(), true, &opts).unwrap();
        let n_test = m.select(Some(&m.sensors[0]), Some(Split::Test), None).count();
        assert_eq!(run.report.per_sample_scores.len(), n_test);
        assert!(run.report.metrics.accuracy.is_some());
        assert!(run.report.metrics.apcer_known.is_some() && run.report.metrics.apcer_unknown.is_some());
        for a in &run.augmentation {
            assert_eq!(a.generated, a.spoof);
        }
        let prov = run.opg_provenance.unwrap();
        assert_eq!(prov.training_sensors, vec![m.sensors[1].clone()]);
        let dir = run.out_dir.unwrap();
        assert!(dir.join("metrics.json").exists());
        assert!(dir.join("det.svg").exists());
        assert!(dir.join(&m.sensors[0]).join("sections.json").exists());

        let cfg = tiny();
        let models = TrainedSections::load(&dir, &m.sensors[0], &cfg).unwrap();
        let report = evaluate_sections(&models, &m, &m.sensors[0], &mut PatchStore::default(), &cfg).unwrap();
        assert_eq!(report.metrics, run.report.metrics);
        for s in report.per_sample_scores.iter().take(4) {
            let image = crate::ingest::load_image(Path::new(&s.sample_id)).unwrap();
            let single = score_image(&models, &image, &cfg).unwrap();
            match (single, s.score) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-6, "{a} vs {b}"),
                (a, b) => assert_eq!(a, b),
            }
        }
    }

    #[test]
    fn cross_matrix_covers_ordered_pairs() {
        let (_d, m) = fixture(2);
        let mx = cross_sensor_matrix(&m, &tiny(), false, &RunOptions::default()).unwrap();
        assert_eq!(mx.rows.len(), 2);
        assert!(mx.rows.iter().all(|r| r.accuracy.is_some_and(|a| (0.0..=100.0).contains(&a))));
        let mean = mx.rows.iter().map(|r| r.accuracy.unwrap()).sum::<f64>() / 2.0;
        assert_eq!(mx.average, Some(mean));
    }

    #[test]
    fn experiment_spec_applies_overrides() {
        let spec = ExperimentSpec {
            dataset: "m.json".into(),
            protocol: ProtocolKind::CrossSensor,
            train_sensor: "a".into(),
            test_sensor: "b".into(),
            use_opg: true,
            config_overrides: serde_json::json!({"patch_size": 32, "clf_epochs": 3}),
        };
        let cfg = spec.config().unwrap();
        assert_eq!((cfg.patch_size, cfg.clf_epochs, cfg.gan_epochs), (32, 3, 125));
        assert_eq!(spec.protocol_spec().opg_holdout.as_deref(), Some("b"));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.json");
        spec.save(&p).unwrap();
        assert_eq!(ExperimentSpec::load(&p).unwrap(), spec);
        let bad = ExperimentSpec {
            config_overrides: serde_json::json!({"no_such_field": 1}),
            ..spec
        };
        assert!(bad.config().is_err());
    }
}
