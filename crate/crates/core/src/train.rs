//! Three-stage training protocol over stratified cross-validation folds:
//! supervised pretraining on a source domain, main multi-task training with
//! a temporary encoder freeze, and a final fusion-only fit.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::AugmentPolicy;
use crate::data::{Dataset, FoldSplit, Grade, GradedSample};
use crate::ensemble::round_to_grade;
use crate::error::{Error, Result};
use crate::losses::{stage_loss, SmoothingConfig, StageLossSet};
use crate::metrics::qwk;
use crate::nn::{
    backward, forward, save_checkpoint, BlockId, Mode, ThreeHeadModel,
};
use crate::optim::{DecayConfig, LrSchedule, OptimKind, Optimizer};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::GRADE_CAP;

/// Which stochastic augmentations a training stage applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugmentMode {
    /// No augmentation; every epoch sees the raw pixels.
    None,
    /// Label-preserving geometric ops only (flips, transposes, rotations).
    /// These match the deterministic TTA group, so models trained this way
    /// are approximately invariant to the TTA transforms.
    Geometric,
    /// Geometric plus photometric ops (brightness, contrast, noise, cutout,
    /// shift, scale).
    Full,
}

impl AugmentMode {
    pub(crate) fn policy(self, seed: u64) -> Option<AugmentPolicy> {
        match self {
            AugmentMode::None => None,
            AugmentMode::Geometric => Some(AugmentPolicy::geometric(seed)),
            AugmentMode::Full => Some(AugmentPolicy::default_training(seed)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub augment: AugmentMode,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub pretrain: StageConfig,
    pub main: StageConfig,
    /// Epochs of the fusion-only stage (full-batch gradient descent).
    pub posttrain_epochs: usize,
    pub posttrain_lr: f64,
    /// Encoder stays frozen for this many epochs at the start of main
    /// training.
    pub freeze_epochs: usize,
    pub n_folds: usize,
    pub holdout_fraction: f64,
    pub smoothing: SmoothingConfig,
    pub seed: u64,
    /// Worker threads for the per-fold loop; 1 runs folds sequentially.
    pub jobs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            pretrain: StageConfig {
                epochs: 20,
                batch_size: 32,
                lr_max: 0.1,
                lr_min: 1e-3,
                weight_decay: 1e-4,
                augment: AugmentMode::Geometric,
            },
            main: StageConfig {
                epochs: 75,
                batch_size: 32,
                lr_max: 5e-3,
                lr_min: 2e-5,
                weight_decay: 1e-4,
                augment: AugmentMode::Geometric,
            },
            posttrain_epochs: 5,
            posttrain_lr: 0.05,
            freeze_epochs: 5,
            n_folds: 5,
            holdout_fraction: 0.2,
            smoothing: SmoothingConfig::default_training(),
            seed: 42,
            jobs: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, s) in [("pretrain", &self.pretrain), ("main", &self.main)] {
            if s.epochs == 0 || s.batch_size == 0 {
                return Err(Error::Config(format!(
                    "{name}: epochs and batch_size must be positive"
                )));
            }
            if !(s.lr_max > 0.0 && s.lr_min >= 0.0 && s.lr_min <= s.lr_max) {
                return Err(Error::Config(format!(
                    "{name}: need 0 <= lr_min <= lr_max and lr_max > 0"
                )));
            }
            if s.weight_decay < 0.0 {
                return Err(Error::Config(format!("{name}: negative weight decay")));
            }
        }
        if self.posttrain_epochs == 0 || self.posttrain_lr <= 0.0 {
            return Err(Error::Config(
                "posttrain needs positive epochs and learning rate".into(),
            ));
        }
        if self.n_folds < 2 {
            return Err(Error::Config("n_folds must be >= 2".into()));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be >= 1".into()));
        }
        self.smoothing.validate()
    }
}

/// One manifest row; fold is absent for the shared pretraining stage.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub stage: String,
    pub fold: Option<usize>,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_qwk: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug, Default)]
pub struct RunManifest {
    pub records: Vec<EpochRecord>,
}

impl RunManifest {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,fold,epoch,train_loss,val_qwk,lr\n");
        for r in &self.records {
            let fold = r.fold.map(|f| f.to_string()).unwrap_or_default();
            let vq = r.val_qwk.map(|q| format!("{q:.6}")).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{:.6},{},{:.6}",
                r.stage, fold, r.epoch, r.train_loss, vq, r.lr
            )
            .unwrap();
        }
        out
    }
}

/// Stack equally sized images into one [N, 3, H, W] batch.
pub fn batch_tensor<S: Scalar>(samples: &[&GradedSample<S>]) -> Result<(Tensor<S>, Vec<Grade>)> {
    if samples.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let (h, w) = (samples[0].pixels.shape()[1], samples[0].pixels.shape()[2]);
    let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut grades = Vec::with_capacity(samples.len());
    for s in samples {
        if s.pixels.shape() != [3, h, w] {
            return Err(Error::Data(format!(
                "sample '{}' has shape {:?}, expected {:?}",
                s.id,
                s.pixels.shape(),
                [3, h, w]
            )));
        }
        data.extend_from_slice(s.pixels.data());
        grades.push(s.grade);
    }
    Ok((Tensor::from_vec(&[samples.len(), 3, h, w], data), grades))
}

/// Fused-head grade predictions in evaluation mode, no TTA.
pub fn predict_grades<S: Scalar>(
    model: &ThreeHeadModel<S>,
    samples: &[&GradedSample<S>],
) -> Result<Vec<Grade>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(samples.len());
    // Batched to bound memory on large validation sets.
    for chunk in samples.chunks(64) {
        let (batch, _) = batch_tensor(chunk)?;
        let (head_outs, _) = forward(model, batch, Mode::Eval, &mut rng)?;
        for h in head_outs {
            out.push(round_to_grade(h.fused.as_f64().clamp(0.0, GRADE_CAP))?);
        }
    }
    Ok(out)
}

/// QWK of the fused head against truth.
pub fn validation_qwk<S: Scalar>(
    model: &ThreeHeadModel<S>,
    samples: &[&GradedSample<S>],
) -> Result<f64> {
    let pred = predict_grades(model, samples)?;
    let t: Vec<u8> = samples.iter().map(|s| s.grade.value()).collect();
    let p: Vec<u8> = pred.iter().map(|g| g.value()).collect();
    qwk(&t, &p, 5)
}

struct EpochContext<'a> {
    losses: &'a StageLossSet,
    smoothing: &'a SmoothingConfig,
    batch_size: usize,
    lr: f64,
    decay: DecayConfig,
    policy: Option<&'a mut AugmentPolicy>,
    used_ids: &'a mut BTreeSet<String>,
}

/// One pass over the training samples: shuffle, batch, forward, loss,
/// backward, optimizer step. Returns the sample-weighted mean batch loss.
fn run_epoch<S: Scalar>(
    model: &mut ThreeHeadModel<S>,
    optimizer: &mut Optimizer<S>,
    samples: &[&GradedSample<S>],
    ctx: &mut EpochContext<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut loss_sum = 0.0;
    let mut n_seen = 0usize;
    for chunk in order.chunks(ctx.batch_size) {
        let picked: Vec<&GradedSample<S>> = chunk.iter().map(|&i| samples[i]).collect();
        for s in &picked {
            ctx.used_ids.insert(s.id.clone());
        }
        let (batch, grades) = if let Some(policy) = ctx.policy.as_deref_mut() {
            let mut augmented = Vec::with_capacity(picked.len());
            for s in &picked {
                augmented.push(GradedSample {
                    id: s.id.clone(),
                    pixels: policy.sample_augmentation(&s.pixels)?,
                    grade: s.grade,
                });
            }
            let refs: Vec<&GradedSample<S>> = augmented.iter().collect();
            batch_tensor(&refs)?
        } else {
            batch_tensor(&picked)?
        };
        let (_, cache) = forward(model, batch, Mode::Train, rng)?;
        let (loss, d_cls, d_reg, d_ord) = stage_loss(
            &cache.cls_raw,
            &cache.reg_raw,
            &cache.ord_raw,
            &grades,
            ctx.losses,
            ctx.smoothing,
            rng,
        )?;
        let grads = backward(model, &cache, d_cls, d_reg, d_ord)?;
        optimizer.step(model, &grads, ctx.lr, &ctx.decay)?;
        loss_sum += loss.as_f64() * grades.len() as f64;
        n_seen += grades.len();
    }
    Ok(loss_sum / n_seen as f64)
}

/// Supervised pretraining: SGD with momentum, cosine-annealed learning
/// rate, cross-entropy / binary cross-entropy / MAE, no label smoothing.
pub fn pretrain<S: Scalar>(
    model: &mut ThreeHeadModel<S>,
    samples: &[&GradedSample<S>],
    cfg: &StageConfig,
    seed: u64,
    manifest: &mut RunManifest,
    used_ids: &mut BTreeSet<String>,
) -> Result<()> {
    let mut optimizer = Optimizer::new(OptimKind::Sgd { momentum: 0.9 });
    let schedule = LrSchedule { lr_max: cfg.lr_max, lr_min: cfg.lr_min, period: cfg.epochs as u64 };
    let losses = StageLossSet::pretrain();
    let smoothing = SmoothingConfig::none();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut policy = cfg.augment.policy(seed ^ 0x5eed);
    model.set_frozen(BlockId::Encoder, false);
    model.set_frozen(BlockId::ClsHead, false);
    model.set_frozen(BlockId::RegHead, false);
    model.set_frozen(BlockId::OrdHead, false);
    model.set_frozen(BlockId::Fusion, true);
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr_at(epoch as u64);
        let mut ctx = EpochContext {
            losses: &losses,
            smoothing: &smoothing,
            batch_size: cfg.batch_size,
            lr,
            decay: DecayConfig { wd: cfg.weight_decay },
            policy: policy.as_mut(),
            used_ids,
        };
        let train_loss = run_epoch(model, &mut optimizer, samples, &mut ctx, &mut rng)?;
        manifest.records.push(EpochRecord {
            stage: "pretrain".into(),
            fold: None,
            epoch,
            train_loss,
            val_qwk: None,
            lr,
        });
    }
    Ok(())
}

/// Main multi-task stage: heads re-initialized, encoder frozen for the
/// first `freeze_epochs`, RAdam with cosine annealing, focal losses with
/// label smoothing. Keeps the epoch state with the best validation QWK
/// (earliest epoch wins ties).
pub fn main_train<S: Scalar>(
    model: &mut ThreeHeadModel<S>,
    train: &[&GradedSample<S>],
    val: &[&GradedSample<S>],
    cfg: &StageConfig,
    freeze_epochs: usize,
    smoothing: &SmoothingConfig,
    seed: u64,
    fold: usize,
    manifest: &mut RunManifest,
    used_ids: &mut BTreeSet<String>,
) -> Result<f64> {
    model.reinit_heads(seed)?;
    let mut optimizer = Optimizer::new(OptimKind::radam_default());
    let schedule = LrSchedule { lr_max: cfg.lr_max, lr_min: cfg.lr_min, period: cfg.epochs as u64 };
    let losses = StageLossSet::main();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut policy = cfg.augment.policy(seed ^ 0xa06);
    model.set_frozen(BlockId::ClsHead, false);
    model.set_frozen(BlockId::RegHead, false);
    model.set_frozen(BlockId::OrdHead, false);
    model.set_frozen(BlockId::Fusion, true);
    let mut best_qwk = f64::NEG_INFINITY;
    let mut best_state: Option<ThreeHeadModel<S>> = None;
    for epoch in 0..cfg.epochs {
        model.set_frozen(BlockId::Encoder, epoch < freeze_epochs);
        let lr = schedule.lr_at(epoch as u64);
        let mut ctx = EpochContext {
            losses: &losses,
            smoothing,
            batch_size: cfg.batch_size,
            lr,
            decay: DecayConfig { wd: cfg.weight_decay },
            policy: policy.as_mut(),
            used_ids,
        };
        let train_loss = run_epoch(model, &mut optimizer, train, &mut ctx, &mut rng)?;
        let val_qwk = validation_qwk(model, val)?;
        if val_qwk > best_qwk {
            best_qwk = val_qwk;
            best_state = Some(model.clone());
        }
        manifest.records.push(EpochRecord {
            stage: "main".into(),
            fold: Some(fold),
            epoch,
            train_loss,
            val_qwk: Some(val_qwk),
            lr,
        });
    }
    *model = best_state.expect("at least one epoch ran");
    model.set_frozen(BlockId::Encoder, false);
    Ok(best_qwk)
}

/// Fusion-only fit: with every network block frozen, run full-batch
/// gradient descent on the mean squared error of the fused score against
/// the true grade, starting from equal weights and zero bias. Only the
/// four fusion parameters change.
pub fn posttrain_fusion<S: Scalar>(
    model: &mut ThreeHeadModel<S>,
    samples: &[&GradedSample<S>],
    epochs: usize,
    lr: f64,
    fold: usize,
    manifest: &mut RunManifest,
    used_ids: &mut BTreeSet<String>,
) -> Result<()> {
    for block in [BlockId::Encoder, BlockId::ClsHead, BlockId::RegHead, BlockId::OrdHead] {
        if !model.is_frozen(block) {
            return Err(Error::Protocol(format!(
                "fusion stage requires {block:?} to be frozen"
            )));
        }
    }
    model.set_frozen(BlockId::Fusion, false);
    model.fusion_w = [S::of_f64(1.0 / 3.0); 3];
    model.fusion_b = S::zero();

    // Head scalars are fixed while everything upstream is frozen, so
    // compute them once in evaluation mode.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut feats: Vec<[f64; 3]> = Vec::with_capacity(samples.len());
    let mut targets: Vec<f64> = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(64) {
        for s in chunk {
            used_ids.insert(s.id.clone());
        }
        let (batch, grades) = batch_tensor(chunk)?;
        let (outs, _) = forward(model, batch, Mode::Eval, &mut rng)?;
        for (h, g) in outs.iter().zip(&grades) {
            feats.push([
                h.cls_scalar.as_f64(),
                h.reg_scalar.as_f64().clamp(0.0, GRADE_CAP),
                h.ord_scalar.as_f64(),
            ]);
            targets.push(g.value() as f64);
        }
    }
    let n = feats.len() as f64;
    let mut w = [model.fusion_w[0].as_f64(), model.fusion_w[1].as_f64(), model.fusion_w[2].as_f64()];
    let mut b = model.fusion_b.as_f64();
    for epoch in 0..epochs {
        let mut dw = [0.0; 3];
        let mut db = 0.0;
        let mut loss = 0.0;
        for (x, &y) in feats.iter().zip(&targets) {
            let fused = w[0] * x[0] + w[1] * x[1] + w[2] * x[2] + b;
            let err = fused - y;
            loss += err * err;
            for k in 0..3 {
                dw[k] += 2.0 * err * x[k];
            }
            db += 2.0 * err;
        }
        loss /= n;
        for k in 0..3 {
            w[k] -= lr * dw[k] / n;
        }
        b -= lr * db / n;
        manifest.records.push(EpochRecord {
            stage: "posttrain".into(),
            fold: Some(fold),
            epoch,
            train_loss: loss,
            val_qwk: None,
            lr,
        });
    }
    model.fusion_w = [S::of_f64(w[0]), S::of_f64(w[1]), S::of_f64(w[2])];
    model.fusion_b = S::of_f64(b);
    model.set_frozen(BlockId::Fusion, true);
    Ok(())
}

#[derive(Debug)]
pub struct CvOutcome {
    pub fold_qwks: Vec<f64>,
    pub mean_qwk: f64,
    pub std_qwk: f64,
    pub split: FoldSplit,
    pub checkpoints: Vec<PathBuf>,
    pub manifest: RunManifest,
}

fn select<'a, S: Scalar>(dataset: &'a Dataset<S>, ids: &[String]) -> Vec<&'a GradedSample<S>> {
    ids.iter().map(|id| dataset.by_id(id).expect("id from this dataset")).collect()
}

struct FoldResult {
    fold: usize,
    qwk: f64,
    manifest: RunManifest,
    used_ids: BTreeSet<String>,
    checkpoints: Vec<PathBuf>,
}

fn run_fold<S: Scalar>(
    pretrained: &ThreeHeadModel<S>,
    main_data: &Dataset<S>,
    split: &FoldSplit,
    fold: usize,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<FoldResult> {
    let train_ids = split.training_ids(fold);
    let val_ids = split.fold_ids(fold);
    let train = select(main_data, &train_ids);
    let val = select(main_data, &val_ids);
    let fold_seed = cfg.seed.wrapping_add(1000 * (fold as u64 + 1));
    let mut manifest = RunManifest::default();
    let mut used_ids = BTreeSet::new();
    let mut model = pretrained.clone();
    let qwk = main_train(
        &mut model,
        &train,
        &val,
        &cfg.main,
        cfg.freeze_epochs,
        &cfg.smoothing,
        fold_seed,
        fold,
        &mut manifest,
        &mut used_ids,
    )?;
    let main_ckpt = out_dir.join(format!("stage_main_fold_{fold}.ckpt"));
    save_checkpoint(&model, &main_ckpt)?;

    for block in [BlockId::Encoder, BlockId::ClsHead, BlockId::RegHead, BlockId::OrdHead] {
        model.set_frozen(block, true);
    }
    posttrain_fusion(
        &mut model,
        &train,
        cfg.posttrain_epochs,
        cfg.posttrain_lr,
        fold,
        &mut manifest,
        &mut used_ids,
    )?;
    let post_ckpt = out_dir.join(format!("stage_post_fold_{fold}.ckpt"));
    save_checkpoint(&model, &post_ckpt)?;
    Ok(FoldResult { fold, qwk, manifest, used_ids, checkpoints: vec![main_ckpt, post_ckpt] })
}

/// Full protocol: pretrain once on the source domain, then per fold of the
/// target domain run main training (validating on the held-out fold) and
/// the fusion fit. The holdout split of the target domain is never touched;
/// a post-hoc audit of every id that entered a training batch enforces
/// this.
pub fn run_cv<S: Scalar>(
    pretrain_data: &Dataset<S>,
    main_data: &Dataset<S>,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<CvOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let split = crate::data::split_folds(main_data, cfg.n_folds, cfg.holdout_fraction, cfg.seed)?;

    let mut manifest = RunManifest::default();
    let mut used_ids = BTreeSet::new();
    let mut model = ThreeHeadModel::<S>::new_default(cfg.seed)?;
    let pre_samples: Vec<&GradedSample<S>> = pretrain_data.samples.iter().collect();
    pretrain(&mut model, &pre_samples, &cfg.pretrain, cfg.seed, &mut manifest, &mut used_ids)?;
    let pre_ckpt = out_dir.join("stage_pretrain.ckpt");
    save_checkpoint(&model, &pre_ckpt)?;

    let folds: Vec<usize> = (0..cfg.n_folds).collect();
    let mut results: Vec<FoldResult> = Vec::with_capacity(cfg.n_folds);
    if cfg.jobs <= 1 {
        for &fold in &folds {
            results.push(run_fold(&model, main_data, &split, fold, cfg, out_dir)?);
        }
    } else {
        let chunks: Vec<Vec<usize>> = folds
            .chunks(cfg.n_folds.div_ceil(cfg.jobs))
            .map(|c| c.to_vec())
            .collect();
        let model_ref = &model;
        let split_ref = &split;
        let collected: Vec<Result<Vec<FoldResult>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunks
                .iter()
                .map(|chunk| {
                    scope.spawn(move || {
                        chunk
                            .iter()
                            .map(|&fold| {
                                run_fold(model_ref, main_data, split_ref, fold, cfg, out_dir)
                            })
                            .collect()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("fold worker panicked")).collect()
        });
        for group in collected {
            results.extend(group?);
        }
        results.sort_by_key(|r| r.fold);
    }

    let mut checkpoints = vec![pre_ckpt];
    let mut fold_qwks = Vec::with_capacity(cfg.n_folds);
    for r in results {
        fold_qwks.push(r.qwk);
        manifest.records.extend(r.manifest.records);
        used_ids.extend(r.used_ids);
        checkpoints.extend(r.checkpoints);
    }

    // Holdout hygiene: no id reserved for the final evaluation may ever
    // have entered a training batch of the target domain.
    for id in &split.holdout_ids {
        if used_ids.contains(id) {
            return Err(Error::Protocol(format!(
                "holdout sample '{id}' was used during training"
            )));
        }
    }

    let mean_qwk = fold_qwks.iter().sum::<f64>() / fold_qwks.len() as f64;
    let var = fold_qwks.iter().map(|q| (q - mean_qwk).powi(2)).sum::<f64>()
        / fold_qwks.len() as f64;
    let outcome = CvOutcome {
        fold_qwks,
        mean_qwk,
        std_qwk: var.sqrt(),
        split,
        checkpoints,
        manifest,
    };
    std::fs::write(out_dir.join("run_manifest.csv"), outcome.manifest.to_csv())
        .map_err(|e| Error::io(out_dir, e))?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticConfig;
    use crate::nn::load_checkpoint;

    fn tiny_dataset(n: usize, seed: u64) -> Dataset<f64> {
        let mut cfg = SyntheticConfig::domain_a(n, seed);
        cfg.image_size = 16;
        crate::data::generate_synthetic(&cfg).unwrap()
    }

    fn tiny_config() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.pretrain.epochs = 2;
        cfg.pretrain.batch_size = 8;
        cfg.pretrain.augment = AugmentMode::None;
        cfg.main.epochs = 3;
        cfg.main.batch_size = 8;
        cfg.main.augment = AugmentMode::None;
        cfg.freeze_epochs = 1;
        cfg.n_folds = 2;
        cfg.holdout_fraction = 0.2;
        cfg.posttrain_epochs = 2;
        cfg
    }

    #[test]
    fn batch_tensor_stacks_and_rejects_mismatch() {
        let ds = tiny_dataset(5, 7);
        let refs: Vec<&GradedSample<f64>> = ds.samples.iter().collect();
        let (batch, grades) = batch_tensor(&refs).unwrap();
        assert_eq!(batch.shape(), &[5, 3, 16, 16]);
        assert_eq!(grades.len(), 5);
        assert_eq!(batch.data()[0], ds.samples[0].pixels.data()[0]);

        let other = {
            let mut cfg = SyntheticConfig::domain_a(5, 3);
            cfg.image_size = 8;
            crate::data::generate_synthetic::<f64>(&cfg).unwrap()
        };
        let mixed = vec![&ds.samples[0], &other.samples[0]];
        assert!(batch_tensor(&mixed).is_err());
    }

    #[test]
    fn pretrain_records_cosine_lrs_and_changes_weights() {
        let ds = tiny_dataset(16, 1);
        let refs: Vec<&GradedSample<f64>> = ds.samples.iter().collect();
        let mut model = ThreeHeadModel::<f64>::new_default(0).unwrap();
        let before = model.encoder.clone();
        let mut manifest = RunManifest::default();
        let mut used = BTreeSet::new();
        let cfg = tiny_config();
        pretrain(&mut model, &refs, &cfg.pretrain, 0, &mut manifest, &mut used).unwrap();
        assert_eq!(manifest.records.len(), 2);
        assert_eq!(manifest.records[0].lr, cfg.pretrain.lr_max);
        assert!(manifest.records[1].lr < manifest.records[0].lr);
        assert_ne!(model.encoder, before);
        assert_eq!(used.len(), 16);
        assert!(manifest.records.iter().all(|r| r.train_loss.is_finite()));
    }

    #[test]
    fn pretrain_is_deterministic() {
        let ds = tiny_dataset(12, 5);
        let refs: Vec<&GradedSample<f64>> = ds.samples.iter().collect();
        let cfg = tiny_config();
        let mut run = || {
            let mut model = ThreeHeadModel::<f64>::new_default(9).unwrap();
            let mut manifest = RunManifest::default();
            let mut used = BTreeSet::new();
            pretrain(&mut model, &refs, &cfg.pretrain, 3, &mut manifest, &mut used).unwrap();
            (model, manifest.to_csv())
        };
        let (m1, c1) = run();
        let (m2, c2) = run();
        assert_eq!(c1, c2);
        assert_eq!(m1.encoder, m2.encoder);
        assert_eq!(m1.cls_head, m2.cls_head);
    }

    #[test]
    fn main_train_freezes_encoder_then_unfreezes() {
        let ds = tiny_dataset(20, 2);
        let refs: Vec<&GradedSample<f64>> = ds.samples.iter().collect();
        let (train, val) = refs.split_at(14);
        let mut model = ThreeHeadModel::<f64>::new_default(1).unwrap();
        let encoder_before = model.encoder.clone();

        // With freeze_epochs == epochs the encoder must never move.
        let mut cfg = tiny_config();
        cfg.main.epochs = 2;
        let mut manifest = RunManifest::default();
        let mut used = BTreeSet::new();
        main_train(
            &mut model, train, val, &cfg.main, 2, &cfg.smoothing, 11, 0, &mut manifest, &mut used,
        )
        .unwrap();
        assert_eq!(model.encoder, encoder_before);

        // An unfrozen epoch must move the encoder. Exercised at the epoch
        // level because main_train returns the best-validation snapshot,
        // which may legitimately be a frozen-encoder epoch.
        let mut model = ThreeHeadModel::<f64>::new_default(1).unwrap();
        model.set_frozen(BlockId::Encoder, false);
        model.set_frozen(BlockId::Fusion, true);
        let mut optimizer = Optimizer::new(OptimKind::radam_default());
        let losses = StageLossSet::main();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = EpochContext {
            losses: &losses,
            smoothing: &cfg.smoothing,
            batch_size: cfg.main.batch_size,
            lr: cfg.main.lr_max,
            decay: DecayConfig { wd: cfg.main.weight_decay },
            policy: None,
            used_ids: &mut used,
        };
        run_epoch(&mut model, &mut optimizer, train, &mut ctx, &mut rng).unwrap();
        assert_ne!(model.encoder, encoder_before);
        assert!(manifest.records.iter().all(|r| r.val_qwk.is_some()));
    }

    #[test]
    fn main_train_reinits_heads() {
        let ds = tiny_dataset(12, 8);
        let refs: Vec<&GradedSample<f64>> = ds.samples.iter().collect();
        let (train, val) = refs.split_at(8);
        let mut model = ThreeHeadModel::<f64>::new_default(3).unwrap();
        let heads_before = model.cls_head.clone();
        let mut cfg = tiny_config();
        cfg.main.epochs = 1;
        cfg.main.lr_max = 0.0000001; // heads change by re-init, not by training
        cfg.main.lr_min = 0.0;
        let mut manifest = RunManifest::default();
        let mut used = BTreeSet::new();
        main_train(
            &mut model, train, val, &cfg.main, 1, &cfg.smoothing, 77, 0, &mut manifest, &mut used,
        )
        .unwrap();
        assert_ne!(model.cls_head, heads_before);
    }

    #[test]
    fn posttrain_touches_only_fusion() {
        let ds = tiny_dataset(10, 4);
        let refs: Vec<&GradedSample<f64>> = ds.samples.iter().collect();
        let mut model = ThreeHeadModel::<f64>::new_default(6).unwrap();
        for b in [BlockId::Encoder, BlockId::ClsHead, BlockId::RegHead, BlockId::OrdHead] {
            model.set_frozen(b, true);
        }
        let encoder = model.encoder.clone();
        let heads = (model.cls_head.clone(), model.reg_head.clone(), model.ord_head.clone());
        let mut manifest = RunManifest::default();
        let mut used = BTreeSet::new();
        posttrain_fusion(&mut model, &refs, 5, 0.05, 0, &mut manifest, &mut used).unwrap();
        assert_eq!(model.encoder, encoder);
        assert_eq!(model.cls_head, heads.0);
        assert_eq!(model.reg_head, heads.1);
        assert_eq!(model.ord_head, heads.2);
        assert_ne!(model.fusion_w, [1.0 / 3.0; 3]);
        assert_eq!(manifest.records.len(), 5);
        // Loss must not increase with tiny steps on a quadratic objective.
        let l0 = manifest.records[0].train_loss;
        let l_last = manifest.records[4].train_loss;
        assert!(l_last <= l0 + 1e-12, "{l_last} > {l0}");
    }

    #[test]
    fn posttrain_requires_frozen_network() {
        let ds = tiny_dataset(6, 4);
        let refs: Vec<&GradedSample<f64>> = ds.samples.iter().collect();
        let mut model = ThreeHeadModel::<f64>::new_default(6).unwrap();
        // Encoder left unfrozen.
        for b in [BlockId::ClsHead, BlockId::RegHead, BlockId::OrdHead] {
            model.set_frozen(b, true);
        }
        let mut manifest = RunManifest::default();
        let mut used = BTreeSet::new();
        let err =
            posttrain_fusion(&mut model, &refs, 1, 0.05, 0, &mut manifest, &mut used).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
    }

    #[test]
    fn run_cv_writes_checkpoints_and_respects_holdout() {
        let pre = tiny_dataset(16, 10);
        let main_ds = {
            let mut c = SyntheticConfig::domain_b(30, 11);
            c.image_size = 16;
            // Uniform grades so every class survives the holdout split at
            // this tiny sample size.
            c.class_proportions = [0.2; 5];
            crate::data::generate_synthetic::<f64>(&c).unwrap()
        };
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let out = run_cv(&pre, &main_ds, &cfg, dir.path()).unwrap();
        assert_eq!(out.fold_qwks.len(), 2);
        assert_eq!(out.checkpoints.len(), 5); // pretrain + 2 per fold
        for ckpt in &out.checkpoints {
            assert!(ckpt.exists());
            load_checkpoint::<f64>(ckpt).unwrap();
        }
        assert!(dir.path().join("run_manifest.csv").exists());
        // The holdout must be disjoint from every fold assignment.
        for id in &out.split.holdout_ids {
            assert!(!out.split.assignments.contains_key(id));
        }
        assert_eq!(out.split.holdout_ids.len(), 6); // round(0.2 * 30)
        let mean = out.fold_qwks.iter().sum::<f64>() / 2.0;
        assert!((out.mean_qwk - mean).abs() < 1e-12);
    }

    #[test]
    fn run_cv_parallel_matches_sequential() {
        let pre = tiny_dataset(12, 20);
        let main_ds = {
            let mut c = SyntheticConfig::domain_b(40, 21);
            c.image_size = 16;
            c.class_proportions = [0.2; 5];
            crate::data::generate_synthetic::<f64>(&c).unwrap()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config();
        let seq = run_cv(&pre, &main_ds, &cfg, d1.path()).unwrap();
        cfg.jobs = 2;
        let par = run_cv(&pre, &main_ds, &cfg, d2.path()).unwrap();
        assert_eq!(seq.fold_qwks, par.fold_qwks);
        assert_eq!(seq.manifest.to_csv(), par.manifest.to_csv());
        let a = std::fs::read(d1.path().join("stage_post_fold_0.ckpt")).unwrap();
        let b = std::fs::read(d2.path().join("stage_post_fold_0.ckpt")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_config();
        cfg.main.lr_min = 1.0;
        cfg.main.lr_max = 0.5;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.n_folds = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.jobs = 0;
        assert!(cfg.validate().is_err());
        assert!(tiny_config().validate().is_ok());
    }
}
