//! Score fusion, APCER/BPCER/ACE metrics, DET curves and report files.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::Label;
use crate::error::{Error, Result};

/// Mean of the patch scores of one fingerprint.
pub fn fuse_scores(patch_scores: &[f64]) -> Result<f64> {
    if patch_scores.is_empty() {
        return Err(Error::NoMinutiae("empty patch score list".into()));
    }
    Ok(patch_scores.iter().sum::<f64>() / patch_scores.len() as f64)
}

/// Live iff `score > threshold`.
pub fn classify(score: f64, threshold: f64) -> Label {
    if score > threshold {
        Label::Live
    } else {
        Label::Spoof
    }
}

/// `(apcer + bpcer) / 2`.
pub fn ace(apcer: f64, bpcer: f64) -> f64 {
    (apcer + bpcer) / 2.0
}

/// `100 - ace`.
pub fn accuracy_from_ace(ace: f64) -> f64 {
    100.0 - ace
}

/// One scored test fingerprint. `score` is absent when no minutiae
/// survived; such samples are predicted spoof.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub sample_id: String,
    pub score: Option<f64>,
    pub label: Label,
    pub material: String,
    pub known_material: bool,
}

impl SampleScore {
    pub fn predict(&self, threshold: f64) -> Label {
        self.score.map_or(Label::Spoof, |s| classify(s, threshold))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub predicted: Label,
    pub truth: Label,
    pub material: String,
    pub known_material: bool,
}

/// Error rates in percent. A rate is absent when its class is empty;
/// ACE and accuracy need both. The known/unknown APCER split is present
/// only when the test spoofs contain both kinds of material.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub apcer: Option<f64>,
    pub bpcer: Option<f64>,
    pub ace: Option<f64>,
    pub accuracy: Option<f64>,
    pub apcer_known: Option<f64>,
    pub apcer_unknown: Option<f64>,
    pub n_live: usize,
    pub n_spoof: usize,
    pub n_spoof_known: usize,
    pub n_spoof_unknown: usize,
}

fn rate(wrong: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| wrong as f64 / total as f64 * 100.0)
}

pub fn compute_metrics(predictions: &[Prediction]) -> Metrics {
    let (mut live, mut live_wrong) = (0, 0);
    let (mut known, mut known_wrong, mut unknown, mut unknown_wrong) = (0, 0, 0, 0);
    for p in predictions {
        let wrong = p.predicted != p.truth;
        match (p.truth, p.known_material) {
            (Label::Live, _) => {
                live += 1;
                live_wrong += wrong as usize;
            }
            (Label::Spoof, true) => {
                known += 1;
                known_wrong += wrong as usize;
            }
            (Label::Spoof, false) => {
                unknown += 1;
                unknown_wrong += wrong as usize;
            }
        }
    }
    let apcer = rate(known_wrong + unknown_wrong, known + unknown);
    let bpcer = rate(live_wrong, live);
    let ace_v = apcer.zip(bpcer).map(|(a, b)| ace(a, b));
    let split = known > 0 && unknown > 0;
    Metrics {
        apcer,
        bpcer,
        ace: ace_v,
        accuracy: ace_v.map(accuracy_from_ace),
        apcer_known: if split { rate(known_wrong, known) } else { None },
        apcer_unknown: if split { rate(unknown_wrong, unknown) } else { None },
        n_live: live,
        n_spoof: known + unknown,
        n_spoof_known: known,
        n_spoof_unknown: unknown,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    pub threshold: f64,
    pub apcer: f64,
    pub bpcer: f64,
}

/// `n + 1` evenly spaced thresholds from 0 to 1.
pub fn default_thresholds(n: usize) -> Vec<f64> {
    (0..=n).map(|i| i as f64 / n as f64).collect()
}

/// APCER and BPCER at each threshold, classifying with the strict rule.
/// Needs both classes present.
pub fn det_curve(samples: &[SampleScore], thresholds: &[f64]) -> Result<Vec<DetPoint>> {
    let n_live = samples.iter().filter(|s| s.label == Label::Live).count();
    let n_spoof = samples.len() - n_live;
    if n_live == 0 || n_spoof == 0 {
        return Err(Error::Config("DET curve needs both live and spoof samples".into()));
    }
    Ok(thresholds
        .iter()
        .map(|&t| {
            let mut fa = 0;
            let mut fr = 0;
            for s in samples {
                match (s.label, s.predict(t)) {
                    (Label::Spoof, Label::Live) => fa += 1,
                    (Label::Live, Label::Spoof) => fr += 1,
                    _ => {}
                }
            }
            DetPoint {
                threshold: t,
                apcer: 100.0 * fa as f64 / n_spoof as f64,
                bpcer: 100.0 * fr as f64 / n_live as f64,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub metrics: Metrics,
    /// Test samples that had no usable minutiae.
    pub n_no_minutiae: usize,
    pub per_sample_scores: Vec<SampleScore>,
    pub det_points: Vec<DetPoint>,
}

impl EvalReport {
    pub fn from_scores(samples: Vec<SampleScore>, threshold: f64) -> Self {
        let preds: Vec<Prediction> = samples
            .iter()
            .map(|s| Prediction {
                predicted: s.predict(threshold),
                truth: s.label,
                material: s.material.clone(),
                known_material: s.known_material,
            })
            .collect();
        let det_points = det_curve(&samples, &default_thresholds(100)).unwrap_or_default();
        EvalReport {
            threshold,
            metrics: compute_metrics(&preds),
            n_no_minutiae: samples.iter().filter(|s| s.score.is_none()).count(),
            per_sample_scores: samples,
            det_points,
        }
    }
}

/// What goes into `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub threshold: f64,
    #[serde(flatten)]
    pub metrics: Metrics,
    pub n_samples: usize,
    pub n_no_minutiae: usize,
}

impl MetricsFile {
    pub fn of(report: &EvalReport) -> Self {
        MetricsFile {
            threshold: report.threshold,
            metrics: report.metrics.clone(),
            n_samples: report.per_sample_scores.len(),
            n_no_minutiae: report.n_no_minutiae,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(format!("{other:?}")),
        },
    }
}

/// Write `metrics.json`, `scores.csv` and `det.csv` under `out`, plus
/// `det.svg` when `det_plot` is set and the curve is defined.
pub fn emit_report(report: &EvalReport, out: &Path, det_plot: bool) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mpath = out.join("metrics.json");
    let text = serde_json::to_string_pretty(&MetricsFile::of(report)).map_err(|e| Error::json(&mpath, e))?;
    std::fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;

    let spath = out.join("scores.csv");
    let mut w = csv::Writer::from_path(&spath).map_err(|e| csv_err(&spath, e))?;
    w.write_record(["sample_id", "score", "label", "material", "known_material", "prediction"])
        .map_err(|e| csv_err(&spath, e))?;
    for s in &report.per_sample_scores {
        w.write_record([
            s.sample_id.clone(),
            s.score.map_or(String::new(), |v| format!("{v:.6}")),
            s.label.to_string(),
            s.material.clone(),
            s.known_material.to_string(),
            s.predict(report.threshold).to_string(),
        ])
        .map_err(|e| csv_err(&spath, e))?;
    }
    w.flush().map_err(|e| Error::io(&spath, e))?;

    let dpath = out.join("det.csv");
    let mut w = csv::Writer::from_path(&dpath).map_err(|e| csv_err(&dpath, e))?;
    w.write_record(["threshold", "apcer", "bpcer"]).map_err(|e| csv_err(&dpath, e))?;
    for p in &report.det_points {
        w.write_record([format!("{:.4}", p.threshold), format!("{:.6}", p.apcer), format!("{:.6}", p.bpcer)])
            .map_err(|e| csv_err(&dpath, e))?;
    }
    w.flush().map_err(|e| Error::io(&dpath, e))?;

    if det_plot && !report.det_points.is_empty() {
        let svg = out.join("det.svg");
        std::fs::write(&svg, det_svg(&report.det_points, report.threshold)).map_err(|e| Error::io(&svg, e))?;
    }
    Ok(())
}

/// DET plot: APCER on x, BPCER on y, both 0 to 100 %, with the operating
/// threshold marked.
pub fn det_svg(points: &[DetPoint], threshold: f64) -> String {
    const W: f64 = 420.0;
    const M: f64 = 50.0;
    let px = |a: f64| M + a / 100.0 * (W - 2.0 * M);
    let py = |b: f64| W - M - b / 100.0 * (W - 2.0 * M);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{W}" viewBox="0 0 {W} {W}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for i in 0..=5 {
        let v = i as f64 * 20.0;
        let _ = writeln!(s, r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#ddd"/>"##, px(v), py(0.0), px(v), py(100.0));
        let _ = writeln!(s, r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#ddd"/>"##, px(0.0), py(v), px(100.0), py(v));
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">{v}</text>"#, px(v), py(0.0) + 14.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{v}</text>"#, px(0.0) - 4.0, py(v) + 3.0);
    }
    let _ = writeln!(s, r#"<rect x="{M}" y="{M}" width="{0}" height="{0}" fill="none" stroke="black"/>"#, W - 2.0 * M);
    let pts: Vec<String> = points.iter().map(|p| format!("{:.2},{:.2}", px(p.apcer), py(p.bpcer))).collect();
    let _ = writeln!(s, r##"<polyline points="{}" fill="none" stroke="#c0392b" stroke-width="2"/>"##, pts.join(" "));
    if let Some(op) = points.iter().min_by(|a, b| (a.threshold - threshold).abs().total_cmp(&(b.threshold - threshold).abs())) {
        let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="black"/>"#, px(op.apcer), py(op.bpcer));
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">APCER (%)</text>"#, W / 2.0, W - 12.0);
    let _ = writeln!(s, r#"<text x="14" y="{:.1}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {:.1})">BPCER (%)</text>"#, W / 2.0, W / 2.0);
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(id: &str, score: Option<f64>, label: Label, known: bool) -> SampleScore {
        SampleScore {
            sample_id: id.into(),
            score,
            label,
            material: if label == Label::Live { "live".into() } else { "m".into() },
            known_material: known,
        }
    }

    #[test]
    fn fusion_examples() {
        assert!((fuse_scores(&[0.2, 0.8, 0.8]).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(fuse_scores(&[0.37]).unwrap(), 0.37);
        assert_eq!(fuse_scores(&[0.5; 7]).unwrap(), 0.5);
        assert!(matches!(fuse_scores(&[]), Err(Error::NoMinutiae(_))));
    }

    #[test]
    fn threshold_is_strict() {
        assert_eq!(classify(0.51, 0.5), Label::Live);
        assert_eq!(classify(0.5, 0.5), Label::Spoof);
        assert_eq!(classify(0.49, 0.5), Label::Spoof);
    }

    #[test]
    fn apcer_arithmetic() {
        let preds: Vec<Prediction> = (0..200)
            .map(|i| Prediction {
                predicted: if i < 10 { Label::Live } else { Label::Spoof },
                truth: Label::Spoof,
                material: "m".into(),
                known_material: true,
            })
            .collect();
        let m = compute_metrics(&preds);
        assert_eq!(m.apcer, Some(5.0));
        assert_eq!(m.bpcer, None);
        assert_eq!(m.ace, None);
        assert_eq!(m.apcer_known, None);
    }

    #[test]
    fn four_sample_det_point() {
        let s = vec![
            sample("a", Some(0.9), Label::Live, true),
            sample("b", Some(0.4), Label::Live, true),
            sample("c", Some(0.6), Label::Spoof, true),
            sample("d", Some(0.1), Label::Spoof, true),
        ];
        let d = det_curve(&s, &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!((d[0].apcer, d[0].bpcer), (100.0, 0.0));
        assert_eq!((d[1].apcer, d[1].bpcer), (50.0, 50.0));
        assert_eq!((d[2].apcer, d[2].bpcer), (0.0, 100.0));
    }

    #[test]
    fn missing_score_is_a_spoof_prediction() {
        let s = sample("x", None, Label::Live, true);
        assert_eq!(s.predict(0.0), Label::Spoof);
        let r = EvalReport::from_scores(vec![s, sample("y", Some(0.9), Label::Spoof, true)], 0.5);
        assert_eq!(r.n_no_minutiae, 1);
        assert_eq!(r.metrics.bpcer, Some(100.0));
        assert_eq!(r.metrics.apcer, Some(100.0));
    }

    #[test]
    fn report_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = vec![
            sample("a,1", Some(0.9), Label::Live, true),
            sample("b", Some(0.3), Label::Spoof, true),
            sample("c", Some(0.7), Label::Spoof, false),
            sample("d", None, Label::Spoof, false),
        ];
        let r = EvalReport::from_scores(s, 0.5);
        emit_report(&r, dir.path(), true).unwrap();
        let back = MetricsFile::load(&dir.path().join("metrics.json")).unwrap();
        assert_eq!(back, MetricsFile::of(&r));
        let mut rd = csv::Reader::from_path(dir.path().join("scores.csv")).unwrap();
        assert_eq!(rd.records().count(), 4);
        let svg = std::fs::read_to_string(dir.path().join("det.svg")).unwrap();
        assert!(svg.contains("<polyline") && svg.contains("APCER"));
        assert_eq!(
            csv::Reader::from_path(dir.path().join("det.csv")).unwrap().records().count(),
            101
        );
    }

    /// Confusion-matrix oracle: count each cell separately, then apply the
    /// error-rate definitions.
    fn oracle(preds: &[Prediction]) -> (Option<f64>, Option<f64>, Option<f64>, Option<f64>) {
        let cell = |t: Label, p: Label, known: Option<bool>| {
            preds
                .iter()
                .filter(|x| x.truth == t && x.predicted == p && known.is_none_or(|k| x.known_material == k))
                .count() as f64
        };
        let (tp_live, fn_live) = (cell(Label::Live, Label::Live, None), cell(Label::Live, Label::Spoof, None));
        let (tn, fp) = (cell(Label::Spoof, Label::Spoof, None), cell(Label::Spoof, Label::Live, None));
        let apcer = (tn + fp > 0.0).then(|| fp / (tn + fp) * 100.0);
        let bpcer = (tp_live + fn_live > 0.0).then(|| fn_live / (tp_live + fn_live) * 100.0);
        let kk = cell(Label::Spoof, Label::Spoof, Some(true)) + cell(Label::Spoof, Label::Live, Some(true));
        let uu = cell(Label::Spoof, Label::Spoof, Some(false)) + cell(Label::Spoof, Label::Live, Some(false));
        let (ak, au) = if kk > 0.0 && uu > 0.0 {
            (
                Some(cell(Label::Spoof, Label::Live, Some(true)) / kk * 100.0),
                Some(cell(Label::Spoof, Label::Live, Some(false)) / uu * 100.0),
            )
        } else {
            (None, None)
        };
        (apcer, bpcer, ak, au)
    }

    fn arb_prediction() -> impl Strategy<Value = Prediction> {
        (any::<bool>(), any::<bool>(), any::<bool>()).prop_map(|(t, p, k)| {
            let truth = if t { Label::Live } else { Label::Spoof };
            Prediction {
                predicted: if p { Label::Live } else { Label::Spoof },
                truth,
                material: if t { "live".into() } else { "m".into() },
                known_material: t || k,
            }
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn metrics_match_confusion_oracle(preds in proptest::collection::vec(arb_prediction(), 0..60)) {
            let m = compute_metrics(&preds);
            let (a, b, ak, au) = oracle(&preds);
            prop_assert_eq!(m.apcer, a);
            prop_assert_eq!(m.bpcer, b);
            prop_assert_eq!(m.apcer_known, ak);
            prop_assert_eq!(m.apcer_unknown, au);
            if let (Some(a), Some(b)) = (a, b) {
                let ace_v = m.ace.unwrap();
                prop_assert!((ace_v - (a + b) / 2.0).abs() < 1e-9);
                prop_assert!((m.accuracy.unwrap() - (100.0 - ace_v)).abs() < 1e-9);
            }
            if let (Some(k), Some(u), Some(all)) = (m.apcer_known, m.apcer_unknown, m.apcer) {
                let (nk, nu) = (m.n_spoof_known as f64, m.n_spoof_unknown as f64);
                prop_assert!(((nk * k + nu * u) / (nk + nu) - all).abs() < 1e-9);
            }
            for v in [m.apcer, m.bpcer, m.ace, m.accuracy].into_iter().flatten() {
                prop_assert!((0.0..=100.0).contains(&v));
            }
        }
    }

    proptest! {
        #[test]
        fn det_is_monotone_with_fixed_endpoints(
            live in proptest::collection::vec(0.001f64..0.999, 1..30),
            spoof in proptest::collection::vec(0.001f64..0.999, 1..30),
        ) {
            let mut s: Vec<SampleScore> = live.iter().map(|&v| sample("l", Some(v), Label::Live, true)).collect();
            s.extend(spoof.iter().map(|&v| sample("s", Some(v), Label::Spoof, true)));
            let d = det_curve(&s, &default_thresholds(200)).unwrap();
            prop_assert_eq!((d[0].apcer, d[0].bpcer), (100.0, 0.0));
            let last = d.last().unwrap();
            prop_assert_eq!((last.apcer, last.bpcer), (0.0, 100.0));
            for w in d.windows(2) {
                prop_assert!(w[1].apcer <= w[0].apcer);
                prop_assert!(w[1].bpcer >= w[0].bpcer);
            }
        }
    }
}
