//! Per-section WGAN-GP spoof-patch generators trained leave-one-sensor-out.
//!
//! Each section gets its own generator, trained on the spoof training
//! patches of that section pooled over every sensor except the held-out one.
//! The vanilla GAN minimax objective is superseded here by the Wasserstein
//! critic loss with a gradient penalty on interpolates.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::domain::{hex, paths_fingerprint, DatasetManifest, Label, Patch, PatchLabel, PatchOrigin, Split};
use crate::error::{Error, Result};
use crate::netcore::{
    load_checkpoint, save_checkpoint, Adam, AdamConfig, Bound, ForwardCtx, Graph, Init, LayerSpec,
    Network, ParamStore, Scalar, Stage, Tensor, Var,
};
use crate::patching::{PatchStore, SECTIONS};
use crate::rng::{derive_seed, seeded_rng, SeededRng};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const CACHE_ENV: &str = "OPG_FPAD_CACHE";

/// Dense projection of the noise to a `patch/16` square map, then four
/// stride-2 transposed convolutions halving the channels each time, ending
/// in one tanh channel.
pub fn generator_network(cfg: &RunConfig) -> Network {
    let s0 = cfg.patch_size / 16;
    let c = cfg.gen_channels;
    let mut stages = vec![
        Stage::Layer(LayerSpec::Dense {
            in_units: cfg.noise_dim,
            out_units: c * s0 * s0,
            init: Init::He,
        }),
        Stage::Layer(LayerSpec::Relu),
        Stage::Layer(LayerSpec::Reshape {
            shape: vec![c, s0, s0],
        }),
    ];
    let mut ch = c;
    for i in 0..4 {
        let last = i == 3;
        let out = if last { 1 } else { (ch / 2).max(1) };
        stages.push(Stage::Layer(LayerSpec::TransposedConv2d {
            in_ch: ch,
            out_ch: out,
            kernel: 4,
            stride: 2,
            pad: 1,
            bias: true,
            init: if last { Init::Xavier } else { Init::He },
        }));
        stages.push(Stage::Layer(if last { LayerSpec::Tanh } else { LayerSpec::Relu }));
        ch = out;
    }
    Network {
        name: "generator".into(),
        input: vec![cfg.noise_dim],
        stages,
    }
}

/// Four stride-2 convolutions with leaky ReLU, doubling the channels, then a
/// linear score. No normalization layers: the gradient penalty is defined
/// per sample.
pub fn critic_network(cfg: &RunConfig) -> Network {
    let p = cfg.patch_size;
    let mut stages = Vec::new();
    let (mut ch, mut out) = (1, cfg.critic_channels);
    for _ in 0..4 {
        stages.push(Stage::Layer(LayerSpec::Conv2d {
            in_ch: ch,
            out_ch: out,
            kernel: 4,
            stride: 2,
            pad: 1,
            bias: true,
            init: Init::He,
        }));
        stages.push(Stage::Layer(LayerSpec::LeakyRelu { slope: LEAKY_SLOPE }));
        ch = out;
        out *= 2;
    }
    let s = p / 16;
    stages.push(Stage::Layer(LayerSpec::Reshape {
        shape: vec![ch * s * s],
    }));
    stages.push(Stage::Layer(LayerSpec::Dense {
        in_units: ch * s * s,
        out_units: 1,
        init: Init::Xavier,
    }));
    Network {
        name: "critic".into(),
        input: vec![1, p, p],
        stages,
    }
}

/// Terms of one critic objective evaluation.
#[derive(Clone, Copy, Debug)]
pub struct CriticTerms {
    /// `mean C(fake) - mean C(real) + lambda * penalty`.
    pub loss: Var,
    /// `mean C(real) - mean C(fake)`.
    pub wasserstein: Var,
    pub penalty: Var,
}

/// `mean over samples of (||grad_x C(x)||_2 - 1)^2` at the interpolates
/// `eps * real + (1 - eps) * fake`, one `eps` per sample. The result stays
/// differentiable with respect to the critic's parameters.
pub fn gradient_penalty<T, F>(g: &Graph<T>, critic: &F, real: Var, fake: Var, eps: &[f64]) -> Result<Var>
where
    T: Scalar,
    F: Fn(&Graph<T>, Var) -> Result<Var>,
{
    let shape = g.shape(real);
    if shape != g.shape(fake) {
        return Err(Error::Shape {
            layer: "gradient_penalty".into(),
            expected: shape,
            got: g.shape(fake),
        });
    }
    let n = shape[0];
    if eps.len() != n {
        return Err(Error::Shape {
            layer: "gradient_penalty.eps".into(),
            expected: vec![n],
            got: vec![eps.len()],
        });
    }
    let per = shape[1..].iter().product::<usize>();
    let (rv, fv) = (g.value(real), g.value(fake));
    let mixed: Vec<T> = rv
        .data()
        .iter()
        .zip(fv.data())
        .enumerate()
        .map(|(i, (&r, &f))| {
            let e = T::from_f64(eps[i / per]);
            e * r + (T::one() - e) * f
        })
        .collect();
    let x_hat = g.leaf(Tensor::from_vec(&shape, mixed));
    let scores = critic(g, x_hat)?;
    let total = g.sum(scores);
    let grad = g.grad(total, &[x_hat], true)?[0];
    let flat = g.reshape(grad, &[n, per]);
    let norm = g.sqrt(g.sum_last(g.square(flat)));
    let dev = g.add_scalar(norm, T::from_f64(-1.0));
    Ok(g.mean(g.square(dev)))
}

pub fn critic_loss<T, F>(
    g: &Graph<T>,
    critic: &F,
    real: Var,
    fake: Var,
    gp_lambda: f64,
    eps: &[f64],
) -> Result<CriticTerms>
where
    T: Scalar,
    F: Fn(&Graph<T>, Var) -> Result<Var>,
{
    let on_real = g.mean(critic(g, real)?);
    let on_fake = g.mean(critic(g, fake)?);
    let wasserstein = g.sub(on_real, on_fake);
    let penalty = gradient_penalty(g, critic, real, fake, eps)?;
    let loss = g.add(
        g.scale(wasserstein, T::from_f64(-1.0)),
        g.scale(penalty, T::from_f64(gp_lambda)),
    );
    Ok(CriticTerms {
        loss,
        wasserstein,
        penalty,
    })
}

/// `-mean C(fake)`.
pub fn generator_loss<T, F>(g: &Graph<T>, critic: &F, fake: Var) -> Result<Var>
where
    T: Scalar,
    F: Fn(&Graph<T>, Var) -> Result<Var>,
{
    let s = g.mean(critic(g, fake)?);
    Ok(g.scale(s, T::from_f64(-1.0)))
}

/// One row of the per-epoch training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochTelemetry {
    pub epoch: usize,
    pub critic_loss: f64,
    /// Absent when no generator update happened during the epoch.
    pub generator_loss: Option<f64>,
    pub wasserstein: f64,
    pub penalty: f64,
}

pub fn write_telemetry(path: &Path, rows: &[EpochTelemetry]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_telemetry(path: &Path) -> Result<Vec<EpochTelemetry>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: e.position().map_or(0, |p| p.line() as usize),
        reason: e.to_string(),
    }
}

/// A trained generator/critic pair and its training log.
#[derive(Clone, Debug)]
pub struct Wgan {
    pub generator: ParamStore<f32>,
    pub critic: ParamStore<f32>,
    pub history: Vec<EpochTelemetry>,
}

fn noise(n: usize, dim: usize, rng: &mut SeededRng) -> Tensor<f32> {
    Tensor::randn(&[n, dim], 1.0, rng)
}

fn constants(g: &Graph<f32>, store: &ParamStore<f32>) -> Bound {
    Bound::from_pairs(
        store
            .params()
            .map(|(n, t)| (n.to_string(), g.constant(t.clone()))),
    )
}

/// Run the generator without recording gradients.
fn sample_fakes(
    net: &Network,
    store: &ParamStore<f32>,
    z: Tensor<f32>,
    rng: &mut SeededRng,
) -> Result<Tensor<f32>> {
    let g = Graph::no_grad();
    let bound = constants(&g, store);
    let zv = g.constant(z);
    let out = net.forward(&g, store, &bound, zv, &mut ForwardCtx::new(false, rng))?;
    Ok((*g.value(out)).clone())
}

fn gather(data: &[f32], per: usize, idx: &[usize], shape_tail: &[usize]) -> Tensor<f32> {
    let mut v = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        v.extend_from_slice(&data[i * per..(i + 1) * per]);
    }
    let mut shape = vec![idx.len()];
    shape.extend_from_slice(shape_tail);
    Tensor::from_vec(&shape, v)
}

/// Train one WGAN-GP on spoof patches of a single section.
///
/// Each epoch is one shuffled pass over the patches in batches of
/// `batch_size`; every batch is one critic update and every
/// `critic_steps`-th critic update is followed by a generator update. The
/// run is deterministic for a given `cfg.seed`. On a non-finite loss the
/// generator from the last finite epoch is written to `abort_checkpoint`
/// (when given) and an error is returned.
pub fn train_wgan(patches: &[Patch], cfg: &RunConfig, abort_checkpoint: Option<&Path>) -> Result<Wgan> {
    if patches.is_empty() {
        return Err(Error::Config("no spoof patches to train a WGAN on".into()));
    }
    let p = cfg.patch_size;
    for q in patches {
        if q.size() != p || q.label() == PatchLabel::Live {
            return Err(Error::Config(format!(
                "WGAN input must be spoof patches of size {p}; got a {:?} patch of size {}",
                q.label(),
                q.size()
            )));
        }
    }
    let mut rng = seeded_rng(cfg.seed);
    let gen_net = generator_network(cfg);
    let critic_net = critic_network(cfg);
    let mut gen = gen_net.init_params::<f32, _>(&mut rng)?;
    let mut critic = critic_net.init_params::<f32, _>(&mut rng)?;
    let adam = AdamConfig {
        lr: cfg.learning_rate,
        beta1: cfg.gan_betas.0,
        beta2: cfg.gan_betas.1,
        eps: 1e-8,
        weight_decay: cfg.weight_decay,
    };
    let mut gen_opt = Adam::new(adam, &gen);
    let mut critic_opt = Adam::new(adam, &critic);

    let per = p * p;
    let data: Vec<f32> = patches.iter().flat_map(|q| q.values().iter().copied()).collect();
    let tail = [1, p, p];
    let mut order: Vec<usize> = (0..patches.len()).collect();
    let mut history = Vec::with_capacity(cfg.gan_epochs);
    let mut last_good = gen.clone();
    let mut critic_updates = 0usize;

    for epoch in 0..cfg.gan_epochs {
        order.shuffle(&mut rng);
        let (mut c_sum, mut w_sum, mut gp_sum, mut c_n) = (0.0, 0.0, 0.0, 0usize);
        let (mut g_sum, mut g_n) = (0.0, 0usize);
        let mut failed = None;
        for batch in order.chunks(cfg.batch_size) {
            let b = batch.len();
            let real = gather(&data, per, batch, &tail);
            let fake = sample_fakes(&gen_net, &gen, noise(b, cfg.noise_dim, &mut rng), &mut rng)?;
            let eps: Vec<f64> = (0..b).map(|_| rng.gen::<f64>()).collect();

            let g = Graph::new();
            let bound = Bound::bind(&g, &critic);
            let critic_fn = |g: &Graph<f32>, x: Var| -> Result<Var> {
                let mut scratch = seeded_rng(0);
                critic_net.forward(g, &critic, &bound, x, &mut ForwardCtx::new(true, &mut scratch))
            };
            let (rv, fv) = (g.constant(real), g.constant(fake));
            let terms = critic_loss(&g, &critic_fn, rv, fv, cfg.gp_lambda, &eps)?;
            let (loss, w, gp) = (
                g.value(terms.loss).item() as f64,
                g.value(terms.wasserstein).item() as f64,
                g.value(terms.penalty).item() as f64,
            );
            if !(loss.is_finite() && w.is_finite() && gp.is_finite()) {
                failed = Some("critic loss");
                break;
            }
            let grads = g.backward(terms.loss, &bound.ordered(&critic))?;
            drop(g);
            critic_opt.step(&mut critic, &grads)?;
            c_sum += loss;
            w_sum += w;
            gp_sum += gp;
            c_n += 1;
            critic_updates += 1;

            if critic_updates.is_multiple_of(cfg.critic_steps) {
                let g = Graph::new();
                let gb = Bound::bind(&g, &gen);
                let cb = constants(&g, &critic);
                let z = g.constant(noise(cfg.batch_size, cfg.noise_dim, &mut rng));
                let fake = gen_net.forward(&g, &gen, &gb, z, &mut ForwardCtx::new(true, &mut rng))?;
                let critic_fn = |g: &Graph<f32>, x: Var| -> Result<Var> {
                    let mut scratch = seeded_rng(0);
                    critic_net.forward(g, &critic, &cb, x, &mut ForwardCtx::new(true, &mut scratch))
                };
                let loss = generator_loss(&g, &critic_fn, fake)?;
                let lv = g.value(loss).item() as f64;
                if !lv.is_finite() {
                    failed = Some("generator loss");
                    break;
                }
                let grads = g.backward(loss, &gb.ordered(&gen))?;
                drop(g);
                gen_opt.step(&mut gen, &grads)?;
                g_sum += lv;
                g_n += 1;
            }
        }
        if failed.is_none() && !(gen.all_finite() && critic.all_finite()) {
            failed = Some("parameters");
        }
        if let Some(what) = failed {
            let mut msg = format!("non-finite {what} in WGAN epoch {epoch}");
            if let Some(path) = abort_checkpoint {
                let mut tags = BTreeMap::new();
                tags.insert("role".into(), "generator".into());
                tags.insert("epochs_completed".into(), epoch.to_string());
                save_checkpoint(path, &last_good, cfg, tags)?;
                msg.push_str(&format!("; last finite generator saved to {}", path.display()));
            }
            return Err(Error::NonFinite(msg));
        }
        let row = EpochTelemetry {
            epoch,
            critic_loss: c_sum / c_n as f64,
            generator_loss: (g_n > 0).then(|| g_sum / g_n as f64),
            wasserstein: w_sum / c_n as f64,
            penalty: gp_sum / c_n as f64,
        };
        log::debug!(
            "wgan epoch {epoch}: critic {:.4} W {:.4} gp {:.4}",
            row.critic_loss,
            row.wasserstein,
            row.penalty
        );
        history.push(row);
        last_good = gen.clone();
    }
    Ok(Wgan {
        generator: gen,
        critic,
        history,
    })
}

/// Where a bundle's training data came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpgProvenance {
    pub dataset: String,
    pub held_out_sensor: String,
    pub training_sensors: Vec<String>,
    /// Digest of the spoof training image paths the generators saw.
    pub training_fingerprint: String,
    pub training_images: usize,
    /// Images of the held-out sensor found among the training images;
    /// always zero for a bundle that was built.
    pub held_out_overlap: usize,
    pub section_patch_counts: Vec<usize>,
    /// Sections whose pool was empty; their generators are untrained.
    pub untrained_sections: Vec<usize>,
    pub config: RunConfig,
}

/// Nine section generators trained without one sensor.
#[derive(Clone, Debug)]
pub struct OpgBundle {
    pub held_out_sensor: String,
    pub generators: Vec<ParamStore<f32>>,
    pub provenance: OpgProvenance,
    pub telemetry: Vec<Vec<EpochTelemetry>>,
}

const PROVENANCE_FILE: &str = "provenance.json";

fn section_ckpt(dir: &Path, j: usize) -> PathBuf {
    dir.join(format!("section_{j}.ckpt"))
}

impl OpgBundle {
    pub fn config(&self) -> &RunConfig {
        &self.provenance.config
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (j, gen) in self.generators.iter().enumerate() {
            let mut tags = BTreeMap::new();
            tags.insert("role".into(), "generator".into());
            tags.insert("section".into(), j.to_string());
            tags.insert("held_out_sensor".into(), self.held_out_sensor.clone());
            save_checkpoint(&section_ckpt(dir, j), gen, self.config(), tags)?;
        }
        for (j, rows) in self.telemetry.iter().enumerate() {
            write_telemetry(&dir.join(format!("section_{j}_telemetry.csv")), rows)?;
        }
        let path = dir.join(PROVENANCE_FILE);
        let text = serde_json::to_string_pretty(&self.provenance).map_err(|e| Error::json(&path, e))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Load a bundle directory. With `expected`, the generators' architecture
    /// must match that config.
    pub fn load(dir: &Path, expected: Option<&RunConfig>) -> Result<Self> {
        let path = dir.join(PROVENANCE_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let provenance: OpgProvenance = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        let mut generators = Vec::with_capacity(SECTIONS);
        let mut telemetry = Vec::with_capacity(SECTIONS);
        for j in 0..SECTIONS {
            let (store, meta) = load_checkpoint(&section_ckpt(dir, j), expected, false)?;
            if meta.tags.get("held_out_sensor") != Some(&provenance.held_out_sensor) {
                return Err(Error::Incompatible {
                    path: section_ckpt(dir, j),
                    reason: "generator was trained for a different held-out sensor".into(),
                });
            }
            generators.push(store);
            let tpath = dir.join(format!("section_{j}_telemetry.csv"));
            telemetry.push(if tpath.exists() { read_telemetry(&tpath)? } else { Vec::new() });
        }
        Ok(OpgBundle {
            held_out_sensor: provenance.held_out_sensor.clone(),
            generators,
            provenance,
            telemetry,
        })
    }
}

/// Digest of every setting that changes what a bundle learns.
pub fn opg_config_hash(cfg: &RunConfig) -> String {
    let key = serde_json::json!({
        "arch": cfg.compat_hash(),
        "seed": cfg.seed,
        "quality_threshold": cfg.quality_threshold,
        "segment_block": cfg.segment_block,
        "segment_var_threshold": cfg.segment_var_threshold,
        "min_minutia_distance": cfg.min_minutia_distance,
        "max_patches_per_image": cfg.max_patches_per_image,
        "gan_epochs": cfg.gan_epochs,
        "learning_rate": cfg.learning_rate,
        "weight_decay": cfg.weight_decay,
        "gp_lambda": cfg.gp_lambda,
        "critic_steps": cfg.critic_steps,
        "batch_size": cfg.batch_size,
        "gan_betas": cfg.gan_betas,
    });
    hex(&Sha256::digest(key.to_string().as_bytes()))
}

/// Spoof training records of every sensor but `held_out`, after checking
/// that leave-one-out is possible.
pub fn opg_training_records<'a>(
    manifest: &'a DatasetManifest,
    held_out: &str,
) -> Result<Vec<&'a crate::domain::SampleRecord>> {
    if manifest.sensors.len() < 2 {
        return Err(Error::Protocol(format!(
            "leave-one-out impossible: the manifest has {} sensor(s)",
            manifest.sensors.len()
        )));
    }
    if !manifest.has_sensor(held_out) {
        return Err(Error::Protocol(format!("held-out sensor {held_out:?} is not in the manifest")));
    }
    Ok(manifest
        .select(None, Some(Split::Train), Some(Label::Spoof))
        .filter(|r| r.sensor_id != held_out)
        .collect())
}

/// Train the nine section generators for one held-out sensor.
///
/// Missing records are patched into `store` first. Fails with a protocol
/// error when any training image also belongs to the held-out sensor.
pub fn build_opg(
    manifest: &DatasetManifest,
    held_out: &str,
    store: &mut PatchStore,
    cfg: &RunConfig,
) -> Result<OpgBundle> {
    let records = opg_training_records(manifest, held_out)?;
    store.extend(records.iter().copied(), cfg)?;

    let held_paths: BTreeSet<&str> = manifest
        .select(Some(held_out), None, None)
        .map(|r| r.path.as_str())
        .collect();
    let overlap = records.iter().filter(|r| held_paths.contains(r.path.as_str())).count();
    if overlap > 0 {
        return Err(Error::Protocol(format!(
            "{overlap} OPG training image(s) also belong to held-out sensor {held_out}"
        )));
    }
    let patches = store.patches_of(records.iter().copied())?;
    if patches.iter().any(|p| held_paths.contains(p.source())) {
        return Err(Error::Protocol(format!(
            "a patch from held-out sensor {held_out} reached OPG training"
        )));
    }
    let sections = crate::patching::group_by_section(patches);
    let counts: Vec<usize> = sections.iter().map(Vec::len).collect();
    log::info!("OPG hold-out {held_out}: section patch counts {counts:?}");

    // Generator, telemetry and whether it was trained, per section.
    type Trained = (ParamStore<f32>, Vec<EpochTelemetry>, bool);
    let trained: Vec<Result<Trained>> = sections
        .par_iter()
        .enumerate()
        .map(|(j, pool)| {
            let section_cfg = RunConfig {
                seed: derive_seed(cfg.seed, &format!("opg/{held_out}/section{j}")),
                ..cfg.clone()
            };
            if pool.is_empty() {
                log::warn!("OPG hold-out {held_out}: section {j} has no spoof patches; generator left untrained");
                let mut rng = seeded_rng(section_cfg.seed);
                let gen = generator_network(cfg).init_params::<f32, _>(&mut rng)?;
                return Ok((gen, Vec::new(), false));
            }
            let w = train_wgan(pool, &section_cfg, None)?;
            Ok((w.generator, w.history, true))
        })
        .collect();
    let mut generators = Vec::with_capacity(SECTIONS);
    let mut telemetry = Vec::with_capacity(SECTIONS);
    let mut untrained = Vec::new();
    for (j, r) in trained.into_iter().enumerate() {
        let (gen, hist, ok) = r?;
        if !ok {
            untrained.push(j);
        }
        generators.push(gen);
        telemetry.push(hist);
    }
    let training_sensors: BTreeSet<String> = records.iter().map(|r| r.sensor_id.clone()).collect();
    Ok(OpgBundle {
        held_out_sensor: held_out.to_string(),
        generators,
        provenance: OpgProvenance {
            dataset: manifest.name.clone(),
            held_out_sensor: held_out.to_string(),
            training_sensors: training_sensors.into_iter().collect(),
            training_fingerprint: paths_fingerprint(records.iter().map(|r| r.path.as_str())),
            training_images: records.len(),
            held_out_overlap: overlap,
            section_patch_counts: counts,
            untrained_sections: untrained,
            config: cfg.clone(),
        },
        telemetry,
    })
}

/// Cache directory from `OPG_FPAD_CACHE`, if set.
pub fn cache_root_from_env() -> Option<PathBuf> {
    std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

/// Bundle directory for a (training set, hold-out, config) key.
pub fn cache_dir(root: &Path, manifest: &DatasetManifest, held_out: &str, cfg: &RunConfig) -> Result<PathBuf> {
    let records = opg_training_records(manifest, held_out)?;
    let fp = paths_fingerprint(records.iter().map(|r| r.path.as_str()));
    let key = hex(&Sha256::digest(format!("{fp}/{held_out}/{}", opg_config_hash(cfg)).as_bytes()));
    let name = if manifest.name.is_empty() { "dataset" } else { manifest.name.as_str() };
    Ok(root.join(format!("{name}-{held_out}-{}", &key[..16])))
}

/// Load the cached bundle for this key, or build and cache it. Returns the
/// bundle and whether it came from the cache.
pub fn build_or_load_opg(
    manifest: &DatasetManifest,
    held_out: &str,
    store: &mut PatchStore,
    cfg: &RunConfig,
    cache_root: Option<&Path>,
) -> Result<(OpgBundle, bool)> {
    let Some(root) = cache_root else {
        return Ok((build_opg(manifest, held_out, store, cfg)?, false));
    };
    let dir = cache_dir(root, manifest, held_out, cfg)?;
    if dir.join(PROVENANCE_FILE).exists() {
        match OpgBundle::load(&dir, Some(cfg)) {
            Ok(b) if b.provenance.held_out_overlap == 0 && b.held_out_sensor == held_out => {
                log::info!("reusing cached OPG bundle {}", dir.display());
                return Ok((b, true));
            }
            Ok(_) => log::warn!("cached bundle {} failed provenance checks; retraining", dir.display()),
            Err(e) => log::warn!("cached bundle {} unreadable ({e}); retraining", dir.display()),
        }
    }
    let bundle = build_opg(manifest, held_out, store, cfg)?;
    bundle.save(&dir)?;
    Ok((bundle, false))
}

/// Draw `count` spoof patches for `section` from its generator.
pub fn generate_patches(bundle: &OpgBundle, section: usize, count: usize, seed: u64) -> Result<Vec<Patch>> {
    if section >= SECTIONS {
        return Err(Error::Config(format!("section {section} outside 0..=8")));
    }
    let cfg = bundle.config();
    let net = generator_network(cfg);
    let store = &bundle.generators[section];
    let mut rng = seeded_rng(derive_seed(seed, &format!("generate/section{section}")));
    let p = cfg.patch_size;
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let b = (count - out.len()).min(cfg.batch_size.max(1));
        let z = noise(b, cfg.noise_dim, &mut rng);
        let fakes = sample_fakes(&net, store, z, &mut rng)?;
        if !fakes.all_finite() {
            return Err(Error::NonFinite(format!("generator output for section {section}")));
        }
        for chunk in fakes.data().chunks_exact(p * p) {
            let values = chunk.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
            out.push(Patch::new(
                p,
                values,
                section as u8,
                PatchLabel::Generated,
                PatchOrigin::Synthetic,
                "",
            )?);
        }
    }
    Ok(out)
}

/// Tile patches into a square grid image, `ceil(sqrt(n))` per side.
pub fn contact_sheet(patches: &[Patch]) -> Option<image::GrayImage> {
    let first = patches.first()?;
    let p = first.size() as u32;
    let side = (patches.len() as f64).sqrt().ceil() as u32;
    let mut img = image::GrayImage::new(side * p, side * p);
    for (i, patch) in patches.iter().enumerate() {
        let (gx, gy) = (i as u32 % side, i as u32 / side);
        for (k, &v) in patch.values().iter().enumerate() {
            let (x, y) = (k as u32 % p, k as u32 / p);
            img.put_pixel(gx * p + x, gy * p + y, image::Luma([crate::patching::denormalize_value(v)]));
        }
    }
    Some(img)
}
