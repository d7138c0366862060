//! End-to-end stages shared by the command-line tool and the test suites.
//!
//! Each stage is a pure function of the run configuration and its inputs.
//! Trained parameters and stored hyperparameters are rounded to `f32`, and a
//! model reloaded from a checkpoint is identical to the one kept in memory.

use std::path::{Path, PathBuf};

use crate::checkpoint::{snap_to_f32, Checkpoint};
use crate::codec::{train_codec, Codec, CodecWeights};
use crate::config::{RunConfig, SegmentRule};
use crate::diffusion::{
    make_schedule, sample, train_diffusion, DenoiserParams, DiffusionSample, LatentNorm, LossWeights, NoiseSchedule,
    TrainConfig,
};
use crate::embedder::{train_embedder, ConditionEmbedding, Embedder, EmbedderConfig, EmbedderWeights};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricReport, Threshold};
use crate::phantom::{generate_phantom, VolumePair};
use crate::scan::ScanMode;
use crate::tokens::TokenGrid;
use crate::volume::{assemble_slices, extract_slices, load_volume, save_volume, Axis, Volume3D};

pub const CODEC_FILE: &str = "codec.ckpt";
pub const EMBEDDER_FILE: &str = "embedder.ckpt";
pub const DIFFUSION_FILE: &str = "diffusion.ckpt";

pub fn generate_pairs(cfg: &RunConfig) -> Result<Vec<VolumePair>> {
    (0..cfg.n_pairs).map(|i| generate_phantom(&cfg.phantom_spec(i))).collect()
}

/// File names of pair `index` inside the data directory.
pub fn pair_paths(dir: &Path, index: usize) -> [PathBuf; 3] {
    ["non_angio", "angio", "mask"].map(|kind| dir.join(format!("pair_{index:03}_{kind}.vvol")))
}

pub fn save_pairs(pairs: &[VolumePair], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, p) in pairs.iter().enumerate() {
        let [a, b, c] = pair_paths(dir, i);
        save_volume(&p.non_angio, a)?;
        save_volume(&p.angio, b)?;
        save_volume(&p.vessel_mask, c)?;
    }
    Ok(())
}

pub fn load_pairs(dir: &Path, indices: std::ops::Range<usize>) -> Result<Vec<VolumePair>> {
    indices
        .map(|i| {
            let [a, b, c] = pair_paths(dir, i);
            Ok(VolumePair { non_angio: load_volume(a)?, angio: load_volume(b)?, vessel_mask: load_volume(c)? })
        })
        .collect()
}

/// Fits the codec on the angiographic and non-angiographic z-slices.
pub fn fit_codec(cfg: &RunConfig, pairs: &[VolumePair]) -> Result<Codec> {
    let slices: Vec<_> = pairs
        .iter()
        .flat_map(|p| extract_slices(&p.non_angio, Axis::Z).into_iter().chain(extract_slices(&p.angio, Axis::Z)))
        .collect();
    let mut codec =
        train_codec(&slices, cfg.patch, cfg.channels, cfg.codec_epochs, cfg.codec_lr, cfg.codec_ema_decay)?.codec;
    for w in [&mut codec.live, &mut codec.shadow] {
        w.tensors_mut().into_iter().for_each(|t| snap_to_f32(t));
    }
    codec.ema_decay = codec.ema_decay as f32 as f64;
    Ok(codec)
}

pub struct TrainedEmbedder {
    pub embedder: Embedder,
    /// Final contrastive loss, carried into the total diffusion loss.
    pub infonce: f64,
}

pub fn fit_embedder(cfg: &RunConfig, pairs: &[VolumePair], codec: &Codec) -> Result<TrainedEmbedder> {
    let ecfg = EmbedderConfig {
        embed_channels: cfg.embed_channels,
        epochs: cfg.embedder_epochs,
        lr: cfg.embedder_lr,
        tau: cfg.tau,
        ema_decay: cfg.embedder_ema_decay,
        mask_weight: cfg.mask_loss_weight,
        seed: cfg.seed,
    };
    let run = train_embedder(pairs, codec, &ecfg)?;
    let mut embedder = run.embedder;
    for w in [&mut embedder.live, &mut embedder.shadow] {
        w.tensors_mut().into_iter().for_each(snap_to_f32);
    }
    embedder.tau = embedder.tau as f32 as f64;
    embedder.ema_decay = embedder.ema_decay as f32 as f64;
    let infonce = run.infonce.last().copied().unwrap_or(0.0) as f32 as f64;
    Ok(TrainedEmbedder { embedder, infonce })
}

/// Denoiser with the latent standardization and schedule it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionModel {
    pub params: DenoiserParams,
    pub norm: LatentNorm,
    pub schedule: NoiseSchedule,
    pub infonce: f64,
}

pub fn schedule_for(cfg: &RunConfig) -> Result<NoiseSchedule> {
    make_schedule(cfg.diffusion_steps, cfg.alpha_start, cfg.alpha_end)
}

pub fn encode_volume(v: &Volume3D, codec: &Codec) -> Result<Vec<TokenGrid>> {
    extract_slices(v, Axis::Z).iter().map(|s| codec.encode_slice(s)).collect()
}

pub fn condition_volume(non_angio: &Volume3D, codec: &Codec, embedder: &Embedder) -> Result<Vec<ConditionEmbedding>> {
    encode_volume(non_angio, codec)?.iter().map(|z| embedder.embed_slice(z)).collect()
}

pub fn fit_diffusion(
    cfg: &RunConfig,
    pairs: &[VolumePair],
    codec: &Codec,
    embedder: &TrainedEmbedder,
) -> Result<(DiffusionModel, Vec<f64>)> {
    let latents = pairs.iter().map(|p| encode_volume(&p.angio, codec)).collect::<Result<Vec<_>>>()?;
    let mut norm = LatentNorm::fit(&latents.concat())?;
    snap_to_f32(&mut norm.mean);
    snap_to_f32(&mut norm.std);
    let data = pairs
        .iter()
        .zip(&latents)
        .map(|(p, z)| {
            Ok(DiffusionSample {
                cond: condition_volume(&p.non_angio, codec, &embedder.embedder)?,
                target: z.iter().map(|g| norm.normalize(g)).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let schedule = schedule_for(cfg)?;
    let tcfg = TrainConfig {
        steps: cfg.train_steps,
        lr: cfg.diffusion_lr,
        weights: LossWeights::new(cfg.weight_info, cfg.weight_diff, cfg.weight_scan)?,
        n_blocks: cfg.blocks,
        lambda: cfg.lambda,
        attn_weight: cfg.attn_mask_weight,
        attn_radius: cfg.attn_radius,
        mode: cfg.scan_mode,
        l_info: embedder.infonce,
        seed: cfg.seed,
    };
    let run = train_diffusion(&data, &schedule, &tcfg)?;
    let mut params = run.params;
    params.tensors_mut().into_iter().for_each(snap_to_f32);
    params.attn_weight = params.attn_weight as f32 as f64;
    Ok((DiffusionModel { params, norm, schedule, infonce: embedder.infonce }, run.losses))
}

/// Synthesizes an angiographic volume from a non-angiographic one.
pub fn synthesize(
    non_angio: &Volume3D,
    codec: &Codec,
    embedder: &Embedder,
    model: &DiffusionModel,
    seed: u64,
) -> Result<Volume3D> {
    let cond = condition_volume(non_angio, codec, embedder)?;
    let latents = sample(&model.params, &cond, &model.schedule, model.params.channels, seed)?;
    let slices = latents
        .iter()
        .map(|z| codec.decode_slice(&model.norm.denormalize(z)))
        .collect::<Result<Vec<_>>>()?;
    assemble_slices(&slices, Axis::Z, non_angio.spacing())
}

pub fn threshold(rule: SegmentRule) -> Threshold {
    match rule {
        SegmentRule::Otsu => Threshold::Otsu,
        SegmentRule::Fixed(t) => Threshold::Fixed(t),
    }
}

pub fn evaluate_volumes(cfg: &RunConfig, synth: &Volume3D, truth: &Volume3D) -> Result<MetricReport> {
    evaluate(synth, truth, cfg.data_range, threshold(cfg.segment))
}

fn config_entry(ck: &mut Checkpoint, cfg: &RunConfig) -> Result<()> {
    ck.insert_text("config.text", &cfg.to_text())
}

/// Config snapshot stored in a checkpoint.
pub fn checkpoint_config(ck: &Checkpoint) -> Result<RunConfig> {
    RunConfig::parse(&ck.text("config.text")?)
}

const CODEC_NAMES: [&str; 4] = ["enc_w", "enc_b", "dec_w", "dec_b"];

pub fn codec_to_checkpoint(codec: &Codec, cfg: &RunConfig) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new();
    ck.insert_scalar("codec.patch", codec.live.patch as f64)?;
    ck.insert_scalar("codec.channels", codec.live.channels as f64)?;
    ck.insert_scalar("codec.ema_decay", codec.ema_decay)?;
    for (which, w) in [("live", &codec.live), ("shadow", &codec.shadow)] {
        for (name, t) in CODEC_NAMES.iter().zip(w.tensors()) {
            ck.insert(&format!("codec.{which}.{name}"), &[t.len()], t)?;
        }
    }
    config_entry(&mut ck, cfg)?;
    Ok(ck)
}

pub fn codec_from_checkpoint(ck: &Checkpoint) -> Result<Codec> {
    let (patch, channels) = (ck.count("codec.patch")?, ck.count("codec.channels")?);
    let mut weights = [CodecWeights::zeros(patch, channels), CodecWeights::zeros(patch, channels)];
    for (which, w) in ["live", "shadow"].iter().zip(weights.iter_mut()) {
        for (name, t) in CODEC_NAMES.iter().zip(w.tensors_mut()) {
            *t = ck.values(&format!("codec.{which}.{name}"), t.len())?;
        }
    }
    let [live, shadow] = weights;
    Ok(Codec { live, shadow, ema_decay: ck.scalar("codec.ema_decay")? })
}

pub fn embedder_to_checkpoint(e: &TrainedEmbedder, cfg: &RunConfig) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new();
    ck.insert_scalar("embedder.latent_channels", e.embedder.live.latent_channels as f64)?;
    ck.insert_scalar("embedder.embed_channels", e.embedder.live.embed_channels as f64)?;
    ck.insert_scalar("embedder.tau", e.embedder.tau)?;
    ck.insert_scalar("embedder.ema_decay", e.embedder.ema_decay)?;
    ck.insert_scalar("embedder.infonce", e.infonce)?;
    for (which, w) in [("live", &e.embedder.live), ("shadow", &e.embedder.shadow)] {
        for (name, t) in EmbedderWeights::tensor_names().iter().zip(w.tensors()) {
            ck.insert(&format!("embedder.{which}.{name}"), &[t.len()], t)?;
        }
    }
    config_entry(&mut ck, cfg)?;
    Ok(ck)
}

pub fn embedder_from_checkpoint(ck: &Checkpoint) -> Result<TrainedEmbedder> {
    let (c, ce) = (ck.count("embedder.latent_channels")?, ck.count("embedder.embed_channels")?);
    let mut weights = [EmbedderWeights::zeros(c, ce), EmbedderWeights::zeros(c, ce)];
    for (which, w) in ["live", "shadow"].iter().zip(weights.iter_mut()) {
        for (name, t) in EmbedderWeights::tensor_names().iter().zip(w.tensors_mut()) {
            let len = t.len();
            t.copy_from_slice(&ck.values(&format!("embedder.{which}.{name}"), len)?);
        }
    }
    let [live, shadow] = weights;
    let mut embedder = Embedder::new(live, ck.scalar("embedder.tau")?, ck.scalar("embedder.ema_decay")?)?;
    embedder.shadow = shadow;
    Ok(TrainedEmbedder { embedder, infonce: ck.scalar("embedder.infonce")? })
}

pub fn diffusion_to_checkpoint(m: &DiffusionModel, cfg: &RunConfig) -> Result<Checkpoint> {
    let p = &m.params;
    let mut ck = Checkpoint::new();
    ck.insert_scalar("denoiser.channels", p.channels as f64)?;
    ck.insert_scalar("denoiser.blocks", p.blocks.len() as f64)?;
    ck.insert_scalar("denoiser.attn_weight", p.attn_weight)?;
    ck.insert_scalar("denoiser.attn_radius", p.attn_radius as f64)?;
    ck.insert_scalar("denoiser.tree_scan", if p.mode == ScanMode::Tree { 1.0 } else { 0.0 })?;
    ck.insert_scalar("denoiser.infonce", m.infonce)?;
    for (name, t) in p.tensor_names().iter().zip(p.tensors()) {
        ck.insert(&format!("denoiser.{name}"), &[t.len()], t)?;
    }
    ck.insert("norm.mean", &[m.norm.mean.len()], &m.norm.mean)?;
    ck.insert("norm.std", &[m.norm.std.len()], &m.norm.std)?;
    ck.insert("schedule.alpha", &[m.schedule.steps()], m.schedule.alphas())?;
    config_entry(&mut ck, cfg)?;
    Ok(ck)
}

/// The schedule is rebuilt from the stored config; the serialized copy is
/// checked against it at `f32` precision.
pub fn diffusion_from_checkpoint(ck: &Checkpoint) -> Result<DiffusionModel> {
    let cfg = checkpoint_config(ck)?;
    let c = ck.count("denoiser.channels")?;
    let n_b = ck.count("denoiser.blocks")?;
    let schedule = schedule_for(&cfg)?;
    let stored = ck.values("schedule.alpha", schedule.steps())?;
    if stored.iter().zip(schedule.alphas()).any(|(a, b)| *a != *b as f32 as f64) {
        return Err(Error::Checkpoint("stored schedule disagrees with the config snapshot".into()));
    }
    let mode = if ck.scalar("denoiser.tree_scan")? == 1.0 { ScanMode::Tree } else { ScanMode::Identity };
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut params = DenoiserParams::init(
        c,
        &schedule,
        n_b,
        1.0,
        ck.scalar("denoiser.attn_weight")?,
        ck.count("denoiser.attn_radius")?,
        mode,
        &mut rng,
    )?;
    let names = params.tensor_names();
    for (name, t) in names.iter().zip(params.tensors_mut()) {
        let len = t.len();
        t.copy_from_slice(&ck.values(&format!("denoiser.{name}"), len)?);
    }
    params.validate()?;
    Ok(DiffusionModel {
        params,
        norm: LatentNorm { mean: ck.values("norm.mean", c)?, std: ck.values("norm.std", c)? },
        schedule,
        infonce: ck.scalar("denoiser.infonce")?,
    })
}
