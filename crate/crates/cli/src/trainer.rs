//! Training and evaluation driver. Batches are grouped by clip length so a
//! whole batch shares one tape, the presentation order is a pure function of
//! (seed, epoch), and the only carried rng is the augmentation stream, whose
//! position travels inside checkpoints. Together those make an interrupted
//! run bit-identical to an uninterrupted one.

use anyhow::{bail, Context, Result};
use ccformer_model::losses::{bce_loss, bcl_loss, dice_loss, total_loss};
use ccformer_model::metrics::{argmax_channels, binarize_logits, class_mask, fscore, jaccard};
use ccformer_model::model::{forward, CcformerParams};
use ccformer_model::params::{Ctx, ParamId, ParamStore};
use ccformer_tensor::{Scalar, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::checkpoint::{self, Checkpoint, RngState};
use crate::config::{Config, Precision};
use crate::data::{self, augment_flip, Clip, Manifest};
use crate::optim::AdamW;

/// Stream id of the carried augmentation rng.
const AUG_STREAM: u64 = 0x4147;
/// Epoch schedules draw from `EPOCH_STREAM_BASE + epoch`, fresh each epoch.
const EPOCH_STREAM_BASE: u64 = 0x4550_4F00;

#[derive(Debug)]
pub struct TrainOutcome {
    pub steps: u64,
    pub final_checkpoint: PathBuf,
    pub final_loss: f64,
    pub train: EvalReport,
    pub val: EvalReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Frame-weighted mean Jaccard over the split; macro over foreground
    /// classes in semantic mode.
    pub mj: f64,
    pub mf: f64,
    /// One `(M_J, M_F)` row per clip.
    pub per_clip: Vec<(f64, f64)>,
    /// Foreground classes only, index 0 = class 1. Empty in binary mode.
    pub per_class: Vec<(f64, f64)>,
}

pub fn train(cfg: &Config, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    match cfg.train.precision {
        Precision::F32 => train_typed::<f32>(cfg, resume),
        Precision::F64 => train_typed::<f64>(cfg, resume),
    }
}

pub fn eval_checkpoint(ckpt: &Path, data_dir: &Path, export: Option<&Path>) -> Result<EvalReport> {
    let cfg = checkpoint::read_config(ckpt)?;
    match cfg.train.precision {
        Precision::F32 => eval_ckpt_typed::<f32>(ckpt, data_dir, export),
        Precision::F64 => eval_ckpt_typed::<f64>(ckpt, data_dir, export),
    }
}

struct Prepared<T: Scalar> {
    frames: Tensor<T>,
    audio: Tensor<T>,
    target: Tensor<T>,
    gt_labels: Vec<usize>,
    len: usize,
}

/// Slices a stored clip to its true length and builds the loss target:
/// `[L,1,H,W]` binary foreground or `[L,C,H,W]` one-hot with channel 0 the
/// background. Padding frames never reach the model.
fn prepare_clip<T: Scalar>(clip: &Clip, n_class: usize) -> Result<Prepared<T>> {
    let l = clip.true_len();
    if l == 0 {
        bail!("clip has no valid frames");
    }
    let fsh = clip.frames.shape();
    let (h, w) = (fsh[2], fsh[3]);
    let cast = |src: &[f32]| -> Vec<T> { src.iter().map(|&v| T::of_f64(v as f64)).collect() };
    let frames = Tensor::from_vec(vec![l, 3, h, w], cast(&clip.frames.data()[..l * 3 * h * w]))?;
    let d_a = clip.audio.shape()[1];
    let audio = Tensor::from_vec(vec![l, d_a], cast(&clip.audio.data()[..l * d_a]))?;
    let masks = &clip.masks.data()[..l * h * w];
    let gt_labels: Vec<usize> = masks.iter().map(|&v| v as usize).collect();
    if let Some(&bad) = gt_labels.iter().find(|&&c| c >= n_class.max(2)) {
        bail!("mask label {bad} out of range for {n_class} classes");
    }
    let target = if n_class == 1 {
        let data = gt_labels
            .iter()
            .map(|&c| if c > 0 { T::one() } else { T::zero() })
            .collect();
        Tensor::from_vec(vec![l, 1, h, w], data)?
    } else {
        let mut one_hot = vec![T::zero(); l * n_class * h * w];
        for f in 0..l {
            for p in 0..h * w {
                let c = gt_labels[f * h * w + p];
                one_hot[(f * n_class + c) * h * w + p] = T::one();
            }
        }
        Tensor::from_vec(vec![l, n_class, h, w], one_hot)?
    };
    Ok(Prepared { frames, audio, target, gt_labels, len: l })
}

fn batches_per_epoch(lens: &[usize], batch: usize) -> u64 {
    let mut groups: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in lens {
        *groups.entry(l).or_default() += 1;
    }
    groups.values().map(|&n| n.div_ceil(batch) as u64).sum()
}

/// Deterministic epoch schedule: clips grouped by true length, groups
/// shuffled and chunked, then the batch list shuffled. Every batch holds
/// equal-length clips so they stack on one tape.
fn build_schedule(seed: u64, epoch: u64, lens: &[usize], batch: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(EPOCH_STREAM_BASE.wrapping_add(epoch));
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in lens.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    let mut batches = Vec::new();
    for (_, mut idxs) in groups {
        idxs.shuffle(&mut rng);
        for chunk in idxs.chunks(batch) {
            batches.push(chunk.to_vec());
        }
    }
    batches.shuffle(&mut rng);
    batches
}

fn check_manifest(cfg: &Config, m: &Manifest, dir: &Path) -> Result<()> {
    let at = dir.display();
    if m.mode != cfg.data.mode.label() {
        bail!("dataset at {at} is `{}`, config wants `{}`", m.mode, cfg.data.mode.label());
    }
    if m.canvas != cfg.data.canvas {
        bail!("dataset at {at} has canvas {}, config wants {}", m.canvas, cfg.data.canvas);
    }
    if m.t != cfg.frames() {
        bail!("dataset at {at} has {} frames per clip, config wants {}", m.t, cfg.frames());
    }
    if m.d_a != cfg.model.d_a {
        bail!("dataset at {at} has {}-dim audio, config wants {}", m.d_a, cfg.model.d_a);
    }
    if m.n_class != cfg.n_class() {
        bail!("dataset at {at} has {} classes, config wants {}", m.n_class, cfg.n_class());
    }
    Ok(())
}

fn build_model<T: Scalar>(cfg: &Config) -> Result<(CcformerParams, ParamStore<T>)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let params = CcformerParams::new(&mut store, &mut rng, cfg.model_config())?;
    Ok((params, store))
}

struct StepStats {
    loss: f64,
    sup: f64,
    bcl: f64,
}

fn train_step<T: Scalar>(
    cfg: &Config,
    params: &CcformerParams,
    store: &mut ParamStore<T>,
    opt: &mut AdamW,
    clips: &[Clip],
    batch: &[usize],
    aug_rng: &mut ChaCha8Rng,
    warned_singleton: &mut bool,
) -> Result<StepStats> {
    let n_class = cfg.n_class();
    let ids: Vec<ParamId> = store.ids().collect();
    let mut tape = Tape::new();
    let (total, leases, stats) = {
        let mut ctx = Ctx::new(&mut tape, store, true);
        let mut sup_terms: Vec<Var> = Vec::with_capacity(batch.len());
        let mut pairs: Vec<(Var, Var)> = Vec::new();
        for &ci in batch {
            let presented = augment_flip(&clips[ci], cfg.train.flip_p, aug_rng)?;
            let prep = prepare_clip::<T>(&presented, n_class)?;
            let fv = ctx.tape.constant(&prep.frames);
            let fa = ctx.tape.constant(&prep.audio);
            let tgt = ctx.tape.constant(&prep.target);
            let out = forward(&mut ctx, params, fv, fa)?;
            let mut terms = Vec::new();
            if n_class == 1 {
                for lg in out.aux_logits.iter().copied().chain(std::iter::once(out.logits)) {
                    let up = ctx.tape.upsample_bilinear2d(lg, 8)?;
                    terms.push(dice_loss(&mut ctx, up, tgt)?);
                }
            } else {
                let up = ctx.tape.upsample_bilinear2d(out.logits, 8)?;
                terms.push(bce_loss(&mut ctx, up, tgt)?);
            }
            sup_terms.push(total_loss(&mut ctx, &terms, None, 0.0)?);
            if let Some(pair) = out.bcl_pair {
                pairs.push(pair);
            }
        }
        let mut sup = sup_terms[0];
        for &term in &sup_terms[1..] {
            sup = ctx.tape.add(sup, term)?;
        }
        let sup = ctx.tape.scale(sup, T::of_f64(1.0 / batch.len() as f64));
        let bcl = if pairs.len() >= 2 {
            let stack = |ctx: &mut Ctx<T>, side: &[Var]| -> Result<Var> {
                let mut rows = Vec::with_capacity(side.len());
                for &v in side {
                    let sh = ctx.tape.shape(v).to_vec();
                    rows.push(ctx.tape.reshape(v, vec![1, sh[0], sh[1]])?);
                }
                Ok(ctx.tape.concat(&rows, 0)?)
            };
            let a: Vec<Var> = pairs.iter().map(|&(a, _)| a).collect();
            let b: Vec<Var> = pairs.iter().map(|&(_, b)| b).collect();
            let sa = stack(&mut ctx, &a)?;
            let sb = stack(&mut ctx, &b)?;
            let proj = params.bcl.as_ref().expect("pairs imply projector");
            let pa = proj.apply(&mut ctx, sa)?;
            let pb = proj.apply(&mut ctx, sb)?;
            let include = cfg.model.bcl.include_positive_in_denominator;
            Some(bcl_loss(&mut ctx, pa, pb, cfg.train.tau, include)?)
        } else {
            if pairs.len() == 1 && !*warned_singleton {
                eprintln!("warning: singleton batch, contrastive term skipped");
                *warned_singleton = true;
            }
            None
        };
        let total = match bcl {
            Some(b) => {
                let weighted = ctx.tape.scale(b, T::of_f64(cfg.train.lambda));
                ctx.tape.add(sup, weighted)?
            }
            None => sup,
        };
        let leases: Vec<Var> = ids.iter().map(|&id| ctx.p(id)).collect();
        let stats = StepStats {
            loss: ctx.tape.data(total)[0].to_f64_lossy(),
            sup: ctx.tape.data(sup)[0].to_f64_lossy(),
            bcl: bcl.map_or(0.0, |b| ctx.tape.data(b)[0].to_f64_lossy()),
        };
        (total, leases, stats)
    };
    if !stats.loss.is_finite() {
        bail!("non-finite loss {}", stats.loss);
    }
    let grads: Vec<Tensor<T>> = {
        let g = tape.backward(total)?;
        leases.iter().map(|&v| g.wrt(v)).collect()
    };
    drop(tape);
    opt.apply(store, &grads)?;
    Ok(stats)
}

/// Runs the model over every clip of a split and scores the upsampled
/// predictions. Frames are weighted equally across the whole split.
fn eval_split<T: Scalar>(
    params: &CcformerParams,
    store: &ParamStore<T>,
    clips: &[Clip],
    n_class: usize,
    export: Option<&Path>,
) -> Result<EvalReport> {
    if clips.is_empty() {
        bail!("cannot evaluate an empty split");
    }
    let fg = n_class.saturating_sub(1).max(1);
    let mut per_clip = Vec::with_capacity(clips.len());
    let mut mj_sum = 0.0;
    let mut mf_sum = 0.0;
    let mut class_sums = vec![(0.0, 0.0); if n_class > 1 { n_class - 1 } else { 0 }];
    let mut frames_total = 0usize;
    for (i, clip) in clips.iter().enumerate() {
        let prep = prepare_clip::<T>(clip, n_class)?;
        let l = prep.len;
        let sh = clip.frames.shape();
        let (h, w) = (sh[2], sh[3]);
        let logits: Tensor<T> = {
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&mut tape, store, false);
            let fv = ctx.tape.constant(&prep.frames);
            let fa = ctx.tape.constant(&prep.audio);
            let out = forward(&mut ctx, params, fv, fa)?;
            let up = ctx.tape.upsample_bilinear2d(out.logits, 8)?;
            Tensor::from_vec(ctx.tape.shape(up).to_vec(), ctx.tape.data(up).to_vec())?
        };
        let (cj, cf) = if n_class == 1 {
            let bin = binarize_logits(&logits);
            let pred = Tensor::from_vec(vec![l, h, w], bin.data().to_vec())?;
            let gt_data: Vec<T> = prep
                .gt_labels
                .iter()
                .map(|&c| if c > 0 { T::one() } else { T::zero() })
                .collect();
            let gt = Tensor::from_vec(vec![l, h, w], gt_data)?;
            (jaccard(&pred, &gt)?, fscore(&pred, &gt)?)
        } else {
            let labels = argmax_channels(&logits)?;
            let shape = [l, h, w];
            let mut jc = 0.0;
            let mut fc = 0.0;
            for c in 1..n_class {
                let pm: Tensor<T> = class_mask(&labels, &shape, c)?;
                let gm: Tensor<T> = class_mask(&prep.gt_labels, &shape, c)?;
                let j = jaccard(&pm, &gm)?;
                let f = fscore(&pm, &gm)?;
                jc += j;
                fc += f;
                class_sums[c - 1].0 += j * l as f64;
                class_sums[c - 1].1 += f * l as f64;
            }
            (jc / fg as f64, fc / fg as f64)
        };
        per_clip.push((cj, cf));
        mj_sum += cj * l as f64;
        mf_sum += cf * l as f64;
        frames_total += l;
        if let Some(dir) = export {
            data::write_prediction(dir, i, &host_probs(&logits, n_class))?;
        }
    }
    let denom = frames_total as f64;
    Ok(EvalReport {
        mj: mj_sum / denom,
        mf: mf_sum / denom,
        per_clip,
        per_class: class_sums.iter().map(|&(j, f)| (j / denom, f / denom)).collect(),
    })
}

/// Sigmoid per pixel for one class, channel softmax otherwise.
fn host_probs<T: Scalar>(logits: &Tensor<T>, n_class: usize) -> Tensor<f32> {
    let sh = logits.shape().to_vec();
    let data = logits.data();
    let mut out = vec![0f32; data.len()];
    if n_class == 1 {
        for (o, v) in out.iter_mut().zip(data) {
            *o = (1.0 / (1.0 + (-v.to_f64_lossy()).exp())) as f32;
        }
    } else {
        let (t, c, hw) = (sh[0], sh[1], sh[2] * sh[3]);
        for f in 0..t {
            for p in 0..hw {
                let at = |cl: usize| data[(f * c + cl) * hw + p].to_f64_lossy();
                let mx = (0..c).map(at).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..c).map(|cl| (at(cl) - mx).exp()).sum();
                for cl in 0..c {
                    out[(f * c + cl) * hw + p] = ((at(cl) - mx).exp() / z) as f32;
                }
            }
        }
    }
    Tensor::from_vec(sh, out).expect("same shape")
}

fn rng_state(cfg: &Config, rng: &ChaCha8Rng) -> RngState {
    RngState {
        seed: cfg.train.seed,
        stream: rng.get_stream(),
        word_pos: rng.get_word_pos(),
    }
}

fn train_typed<T: Scalar>(cfg: &Config, resume: Option<&Path>) -> Result<TrainOutcome> {
    let root = Path::new(&cfg.data.dir);
    let train_dir = root.join("train");
    let val_dir = root.join("val");
    let (m_train, train_clips) =
        data::load_dataset(&train_dir).with_context(|| "loading the training split")?;
    check_manifest(cfg, &m_train, &train_dir)?;
    let (m_val, val_clips) =
        data::load_dataset(&val_dir).with_context(|| "loading the held-out split")?;
    check_manifest(cfg, &m_val, &val_dir)?;

    let (params, mut store) = build_model::<T>(cfg)?;
    let mut opt = AdamW::for_store(cfg.train.lr, cfg.train.weight_decay, &store);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    aug_rng.set_stream(AUG_STREAM);
    let mut start_step: u64 = 0;
    if let Some(path) = resume {
        let ckpt: Checkpoint<T> = checkpoint::load(path)?;
        ckpt.require_config(cfg)?;
        ckpt.restore_params(&mut store)?;
        ckpt.restore_optimizer(&mut opt)?;
        start_step = ckpt.step;
        aug_rng = ChaCha8Rng::seed_from_u64(ckpt.rng.seed);
        aug_rng.set_stream(ckpt.rng.stream);
        aug_rng.set_word_pos(ckpt.rng.word_pos);
        println!("[train] resumed from {} at step {start_step}", path.display());
    }

    let lens: Vec<usize> = train_clips.iter().map(Clip::true_len).collect();
    let b = cfg.batch_size();
    let bpe = batches_per_epoch(&lens, b);
    let total_steps = (cfg.train.epochs as u64 * bpe).min(cfg.train.max_steps.unwrap_or(u64::MAX));
    if start_step > total_steps {
        bail!("checkpoint is at step {start_step}, past the configured {total_steps}");
    }
    let out_dir = PathBuf::from(&cfg.train.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    println!(
        "[train] {} clips, {} held out, {} batches/epoch, {} steps total",
        train_clips.len(),
        val_clips.len(),
        bpe,
        total_steps
    );

    let n_class = cfg.n_class();
    let mut warned_singleton = false;
    let mut cur_epoch = u64::MAX;
    let mut schedule: Vec<Vec<usize>> = Vec::new();
    let mut last_loss = f64::NAN;
    let mut saved_final = false;
    for step in start_step..total_steps {
        let epoch = step / bpe;
        if epoch != cur_epoch {
            schedule = build_schedule(cfg.train.seed, epoch, &lens, b);
            cur_epoch = epoch;
        }
        let batch = &schedule[(step % bpe) as usize];
        let stats = train_step(
            cfg,
            &params,
            &mut store,
            &mut opt,
            &train_clips,
            batch,
            &mut aug_rng,
            &mut warned_singleton,
        )
        .with_context(|| format!("training step {step}"))?;
        last_loss = stats.loss;
        let done = step + 1;
        println!(
            "[train] step {done}/{total_steps} epoch {epoch} loss {:.6} sup {:.6} bcl {:.6}",
            stats.loss, stats.sup, stats.bcl
        );
        if cfg.train.eval_every > 0 && done % cfg.train.eval_every as u64 == 0 && done != total_steps
        {
            let report = eval_split(&params, &store, &val_clips, n_class, None)?;
            println!("[eval] step {done} split val M_J {:.4} M_F {:.4}", report.mj, report.mf);
        }
        let periodic = cfg.train.ckpt_every > 0 && done % cfg.train.ckpt_every as u64 == 0;
        if periodic || done == total_steps {
            let snap = Checkpoint::capture(cfg, done, rng_state(cfg, &aug_rng), &store, &opt);
            if periodic {
                checkpoint::save(&out_dir.join(format!("ckpt_{done:06}.cckp")), &snap)?;
            }
            if done == total_steps {
                checkpoint::save(&out_dir.join("last.cckp"), &snap)?;
                saved_final = true;
            }
        }
    }
    if !saved_final {
        let snap = Checkpoint::capture(cfg, total_steps, rng_state(cfg, &aug_rng), &store, &opt);
        checkpoint::save(&out_dir.join("last.cckp"), &snap)?;
    }

    let train_report = eval_split(&params, &store, &train_clips, n_class, None)?;
    let val_report = eval_split(&params, &store, &val_clips, n_class, None)?;
    println!(
        "[final] split train M_J {:.4} M_F {:.4}",
        train_report.mj, train_report.mf
    );
    println!("[final] split val M_J {:.4} M_F {:.4}", val_report.mj, val_report.mf);
    for (c, &(j, f)) in val_report.per_class.iter().enumerate() {
        println!("[final] split val class {} M_J {j:.4} M_F {f:.4}", c + 1);
    }
    Ok(TrainOutcome {
        steps: total_steps,
        final_checkpoint: out_dir.join("last.cckp"),
        final_loss: last_loss,
        train: train_report,
        val: val_report,
    })
}

fn eval_ckpt_typed<T: Scalar>(
    ckpt_path: &Path,
    data_dir: &Path,
    export: Option<&Path>,
) -> Result<EvalReport> {
    let ckpt: Checkpoint<T> = checkpoint::load(ckpt_path)?;
    let cfg = &ckpt.config;
    let (manifest, clips) = data::load_dataset(data_dir)?;
    check_manifest(cfg, &manifest, data_dir)?;
    let (params, mut store) = build_model::<T>(cfg)?;
    ckpt.restore_params(&mut store)?;
    let report = eval_split(&params, &store, &clips, cfg.n_class(), export)?;
    for (i, &(j, f)) in report.per_clip.iter().enumerate() {
        println!("[eval] clip {i:04} M_J {j:.4} M_F {f:.4}");
    }
    for (c, &(j, f)) in report.per_class.iter().enumerate() {
        println!("[eval] class {} M_J {j:.4} M_F {f:.4}", c + 1);
    }
    println!("[eval] overall M_J {:.4} M_F {:.4}", report.mj, report.mf);
    Ok(report)
}
