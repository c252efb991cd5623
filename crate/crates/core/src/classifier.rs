//! Per-section DenseNet classifiers with an 8-layer binary head.
//!
//! Backbone: a 7×7 stride-2 stem convolution and 2×2 average pooling, then
//! dense blocks separated by transitions (1×1 convolution to
//! `compression × channels`, 2×2 average pooling). Each composite layer is
//! BN-ReLU-Conv1×1 (bottleneck, `bottleneck_width × growth` channels)
//! followed by BN-ReLU-Conv3×3 (`growth` channels), and its output is
//! concatenated onto its input. A 96×96 patch ends at a 3×3 feature map.
//!
//! Head: global average pooling, batch norm, dropout, dense (ReLU), dense
//! (ReLU), batch norm, dropout, dense (sigmoid). Activations count as part
//! of their dense layer, as in most framework summaries.

use std::collections::BTreeMap;
use std::path::Path;
use std::rc::Rc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::domain::{Patch, PatchLabel};
use crate::error::{Error, Result};
use crate::netcore::{
    load_checkpoint, save_checkpoint, Adam, AdamConfig, Bound, ForwardCtx, Graph, Init, LayerSpec,
    Network, ParamStore, Stage, Tensor,
};
use crate::rng::{derive_seed, seeded_rng};

/// The head as it must read, layer by layer.
pub const HEAD_LAYERS: [&str; 8] = [
    "Pooling",
    "Batch-Normalization",
    "Dropout",
    "Dense",
    "Dense",
    "Batch-Normalization",
    "Dropout",
    "Dense",
];

fn conv(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> LayerSpec {
    LayerSpec::Conv2d {
        in_ch,
        out_ch,
        kernel,
        stride,
        pad,
        bias: false,
        init: Init::He,
    }
}

pub fn densenet_network(cfg: &RunConfig) -> Network {
    let k = cfg.growth_rate;
    let mut stages = vec![
        Stage::Layer(conv(1, cfg.stem_channels, 7, 2, 3)),
        Stage::Layer(LayerSpec::BatchNorm {
            channels: cfg.stem_channels,
        }),
        Stage::Layer(LayerSpec::Relu),
        Stage::Layer(LayerSpec::AvgPool { kernel: 2 }),
    ];
    let mut ch = cfg.stem_channels;
    for (b, &n) in cfg.block_layers.iter().enumerate() {
        let layers = (0..n)
            .map(|i| {
                let c = ch + i * k;
                let mid = cfg.bottleneck_width * k;
                vec![
                    LayerSpec::BatchNorm { channels: c },
                    LayerSpec::Relu,
                    conv(c, mid, 1, 1, 0),
                    LayerSpec::BatchNorm { channels: mid },
                    LayerSpec::Relu,
                    conv(mid, k, 3, 1, 1),
                ]
            })
            .collect();
        stages.push(Stage::DenseBlock { layers });
        ch += n * k;
        if b + 1 < cfg.block_layers.len() {
            let out = ((ch as f64 * cfg.compression).floor() as usize).max(1);
            stages.push(Stage::Layer(LayerSpec::BatchNorm { channels: ch }));
            stages.push(Stage::Layer(LayerSpec::Relu));
            stages.push(Stage::Layer(conv(ch, out, 1, 1, 0)));
            stages.push(Stage::Layer(LayerSpec::AvgPool { kernel: 2 }));
            ch = out;
        }
    }
    stages.push(Stage::Layer(LayerSpec::BatchNorm { channels: ch }));
    stages.push(Stage::Layer(LayerSpec::Relu));

    let (d1, d2) = cfg.head_dense;
    let rate = cfg.head_dropout;
    for l in [
        LayerSpec::GlobalAvgPool,
        LayerSpec::BatchNorm { channels: ch },
        LayerSpec::Dropout { rate },
        LayerSpec::Dense {
            in_units: ch,
            out_units: d1,
            init: Init::He,
        },
        LayerSpec::Relu,
        LayerSpec::Dense {
            in_units: d1,
            out_units: d2,
            init: Init::He,
        },
        LayerSpec::Relu,
        LayerSpec::BatchNorm { channels: d2 },
        LayerSpec::Dropout { rate },
        LayerSpec::Dense {
            in_units: d2,
            out_units: 1,
            init: Init::Xavier,
        },
        LayerSpec::Sigmoid,
    ] {
        stages.push(Stage::Layer(l));
    }
    Network {
        name: "densenet".into(),
        input: vec![1, cfg.patch_size, cfg.patch_size],
        stages,
    }
}

/// Head layer names from the global pooling stage on, with activations
/// folded into the dense layer they follow. Errors if an activation follows
/// anything other than a dense layer.
pub fn head_layer_names(net: &Network) -> Result<Vec<&'static str>> {
    let start = net
        .stages
        .iter()
        .position(|s| matches!(s, Stage::Layer(LayerSpec::GlobalAvgPool)))
        .ok_or_else(|| Error::Config("network has no pooling head".into()))?;
    let mut names = Vec::new();
    let mut prev = None;
    for s in &net.stages[start..] {
        let Stage::Layer(l) = s else {
            return Err(Error::Config("dense block inside the head".into()));
        };
        let name = match l {
            LayerSpec::GlobalAvgPool | LayerSpec::AvgPool { .. } => "Pooling",
            LayerSpec::BatchNorm { .. } => "Batch-Normalization",
            LayerSpec::Dropout { .. } => "Dropout",
            LayerSpec::Dense { .. } => "Dense",
            LayerSpec::Relu | LayerSpec::Sigmoid | LayerSpec::Tanh | LayerSpec::LeakyRelu { .. } => {
                if prev != Some("Dense") {
                    return Err(Error::Config(format!("activation {} not after a dense layer", l.kind())));
                }
                continue;
            }
            other => return Err(Error::Config(format!("unexpected head layer {}", other.kind()))),
        };
        names.push(name);
        prev = Some(name);
    }
    Ok(names)
}

/// `(channels in, channels out)` of every dense block.
pub fn dense_block_channels(net: &Network) -> Result<Vec<(usize, usize)>> {
    let shapes = net.stage_shapes()?;
    let mut out = Vec::new();
    let mut input = net.input.clone();
    for (s, shape) in net.stages.iter().zip(&shapes) {
        if matches!(s, Stage::DenseBlock { .. }) {
            out.push((input[0], shape[0]));
        }
        input = shape.clone();
    }
    Ok(out)
}

/// One section's model.
#[derive(Clone, Debug)]
pub struct SectionClassifier {
    pub section: usize,
    pub network: Network,
    pub params: ParamStore<f32>,
}

/// Fresh classifier for `section`; initialization depends only on the seed
/// and the section.
pub fn build_section_classifier(section: usize, cfg: &RunConfig) -> Result<SectionClassifier> {
    if section > 8 {
        return Err(Error::Config(format!("section {section} outside 0..=8")));
    }
    let network = densenet_network(cfg);
    let mut rng = seeded_rng(derive_seed(cfg.seed, &format!("clf/init/section{section}")));
    let params = network.init_params(&mut rng)?;
    Ok(SectionClassifier {
        section,
        network,
        params,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    /// Training-mode accuracy over the epoch's batches, in `[0, 1]`.
    pub accuracy: f64,
}

impl SectionClassifier {
    /// The network up to the final logit (the trailing sigmoid removed).
    fn logit_network(&self) -> Network {
        let mut net = self.network.clone();
        if matches!(net.stages.last(), Some(Stage::Layer(LayerSpec::Sigmoid))) {
            net.stages.pop();
        }
        net
    }

    fn check_patch(&self, p: &Patch) -> Result<()> {
        if p.section() != self.section {
            return Err(Error::SectionRouting {
                patch: p.section(),
                classifier: self.section,
            });
        }
        let want = self.network.input[1];
        if p.size() != want {
            return Err(Error::Shape {
                layer: format!("{}.input", self.network.name),
                expected: vec![1, want, want],
                got: vec![1, p.size(), p.size()],
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, cfg: &RunConfig) -> Result<()> {
        let mut tags = BTreeMap::new();
        tags.insert("role".into(), "classifier".into());
        tags.insert("section".into(), self.section.to_string());
        save_checkpoint(path, &self.params, cfg, tags)
    }

    pub fn load(path: &Path, section: usize, cfg: &RunConfig) -> Result<Self> {
        let (params, meta) = load_checkpoint(path, Some(cfg), false)?;
        if meta.tags.get("section").map(String::as_str) != Some(section.to_string().as_str()) {
            return Err(Error::Incompatible {
                path: path.to_path_buf(),
                reason: format!("checkpoint is not for section {section}"),
            });
        }
        let network = densenet_network(cfg);
        let want: Vec<(String, Vec<usize>)> = network
            .init_params::<f32, _>(&mut seeded_rng(0))?
            .named_arrays()
            .into_iter()
            .map(|(n, _, t)| (n, t.shape().to_vec()))
            .collect();
        let got: Vec<(String, Vec<usize>)> = params
            .named_arrays()
            .into_iter()
            .map(|(n, _, t)| (n, t.shape().to_vec()))
            .collect();
        if want != got {
            return Err(Error::Incompatible {
                path: path.to_path_buf(),
                reason: "parameter table does not match the configured network".into(),
            });
        }
        Ok(SectionClassifier {
            section,
            network,
            params,
        })
    }
}

fn stack(patches: &[&Patch], size: usize) -> Tensor<f32> {
    let mut v = Vec::with_capacity(patches.len() * size * size);
    for p in patches {
        v.extend_from_slice(p.values());
    }
    Tensor::from_vec(&[patches.len(), 1, size, size], v)
}

/// Train on live (target 1), spoof and generated (target 0) patches.
///
/// When generated patches are supplied their count must equal the spoof
/// count unless `allow_count_mismatch` is set, in which case a warning is
/// logged. Zero epochs leave the parameters untouched.
pub fn train_section_classifier(
    clf: &mut SectionClassifier,
    live: &[Patch],
    spoof: &[Patch],
    generated: &[Patch],
    cfg: &RunConfig,
    allow_count_mismatch: bool,
) -> Result<Vec<EpochStats>> {
    if live.is_empty() || spoof.is_empty() {
        return Err(Error::Config(format!(
            "section {} needs live and spoof patches (got {} live, {} spoof)",
            clf.section,
            live.len(),
            spoof.len()
        )));
    }
    if !generated.is_empty() && generated.len() != spoof.len() {
        if !allow_count_mismatch {
            return Err(Error::Protocol(format!(
                "section {}: {} generated patches for {} spoof patches",
                clf.section,
                generated.len(),
                spoof.len()
            )));
        }
        log::warn!(
            "section {}: {} generated patches for {} spoof patches; proceeding",
            clf.section,
            generated.len(),
            spoof.len()
        );
    }
    let all: Vec<&Patch> = live.iter().chain(spoof).chain(generated).collect();
    for p in &all {
        clf.check_patch(p)?;
    }
    for (name, set, want) in [
        ("live", live, PatchLabel::Live),
        ("spoof", spoof, PatchLabel::Spoof),
        ("generated", generated, PatchLabel::Generated),
    ] {
        if let Some(p) = set.iter().find(|p| p.label() != want) {
            return Err(Error::Config(format!("{:?} patch passed as {name}", p.label())));
        }
    }

    let net = clf.logit_network();
    let size = clf.network.input[1];
    let mut rng = seeded_rng(derive_seed(cfg.seed, &format!("clf/train/section{}", clf.section)));
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.learning_rate,
            beta1: cfg.clf_betas.0,
            beta2: cfg.clf_betas.1,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
        },
        &clf.params,
    );
    let mut order: Vec<usize> = (0..all.len()).collect();
    let mut history = Vec::with_capacity(cfg.clf_epochs);
    for epoch in 0..cfg.clf_epochs {
        order.shuffle(&mut rng);
        let mut batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        // A lone sample makes batch statistics degenerate; fold it back in.
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
            batches.pop();
        }
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for idx in batches {
            let members: Vec<&Patch> = idx.iter().map(|&i| all[i]).collect();
            let targets: Vec<f32> = members.iter().map(|p| p.label().target()).collect();
            let g = Graph::new();
            let bound = Bound::bind(&g, &clf.params);
            let x = g.constant(stack(&members, size));
            let mut ctx = ForwardCtx::new(true, &mut rng);
            let z = net.forward(&g, &clf.params, &bound, x, &mut ctx)?;
            let updates = std::mem::take(&mut ctx.bn_updates);
            let logits = g.value(z);
            let loss = g.bce_with_logits(z, Rc::new(Tensor::from_vec(&[members.len(), 1], targets.clone())));
            let lv = g.value(loss).item() as f64;
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!(
                    "classifier loss for section {} in epoch {epoch}",
                    clf.section
                )));
            }
            correct += logits
                .data()
                .iter()
                .zip(&targets)
                .filter(|(&z, &t)| (z > 0.0) == (t > 0.5))
                .count();
            let grads = g.backward(loss, &bound.ordered(&clf.params))?;
            drop(g);
            opt.step(&mut clf.params, &grads)?;
            clf.params.apply_bn_updates(&updates);
            loss_sum += lv * members.len() as f64;
            seen += members.len();
        }
        let row = EpochStats {
            epoch,
            loss: loss_sum / seen as f64,
            accuracy: correct as f64 / seen as f64,
        };
        log::debug!(
            "section {} epoch {epoch}: loss {:.4} acc {:.3}",
            clf.section,
            row.loss,
            row.accuracy
        );
        history.push(row);
    }
    Ok(history)
}

/// Liveness scores of patches of this classifier's section, in inference
/// mode.
pub fn predict_patches(clf: &SectionClassifier, patches: &[Patch]) -> Result<Vec<f64>> {
    for p in patches {
        clf.check_patch(p)?;
    }
    let size = clf.network.input[1];
    let mut out = Vec::with_capacity(patches.len());
    let mut rng = seeded_rng(0);
    for chunk in patches.chunks(64) {
        let members: Vec<&Patch> = chunk.iter().collect();
        let g = Graph::no_grad();
        let bound = Bound::from_pairs(
            clf.params
                .params()
                .map(|(n, t)| (n.to_string(), g.constant(t.clone()))),
        );
        let x = g.constant(stack(&members, size));
        let y = clf
            .network
            .forward(&g, &clf.params, &bound, x, &mut ForwardCtx::new(false, &mut rng))?;
        out.extend(g.value(y).data().iter().map(|&v| v as f64));
    }
    Ok(out)
}

pub fn predict_patch(clf: &SectionClassifier, patch: &Patch) -> Result<f64> {
    Ok(predict_patches(clf, std::slice::from_ref(patch))?[0])
}

pub fn write_history(path: &Path, rows: &[EpochStats]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let io = |e: csv::Error| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        reason: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
