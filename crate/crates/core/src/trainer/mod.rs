//! Task training and the sequential multi-task protocol.
//!
//! One optimizer step consumes `accumulation_steps` micro-batches. Each
//! micro-batch loss is weighted by its share of the group, so the summed
//! gradient is that of the group mean regardless of how it was split. After
//! clipping and AdamW, dynamic mode applies the ℓ1 proximal step
//! `wᵢ ← sign(wᵢ)·max(|wᵢ| − τᵢ, 0)` to every importance weight, and prunes
//! once at the end of the task.
//!
//! With [`ShrinkRule::Preconditioned`] (the default) `τᵢ = λ·lr/(√v̂ᵢ + ε)`,
//! AdamW's own step size for `wᵢ`, so the prox is taken in the optimizer's
//! metric and `wᵢ` settles at zero exactly when its mean loss gradient is
//! below `λ`. [`ShrinkRule::Scalar`] uses `τ = λ·lr` for every direction.
//! Shrinkage starts after `shrink_warmup_epochs`: with `b = 0` at init the
//! loss gradient on `w` starts at zero and would otherwise fail that test
//! before the adapter has learned anything.

mod adamw;
mod augment;
mod config;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use adamw::{decays, AdamW, BETA1, BETA2, EPS};
pub use augment::Augment;
pub use config::{Mode, ShrinkRule, TrainConfig, CONFIG_KEYS};

use crate::adapter::PruneReport;
use crate::checkpoint::{checkpoint_to_model, model_to_checkpoint, Checkpoint, RunExtras};
use crate::error::{Error, Result};
use crate::glyphgen::GlyphDataset;
use crate::metrics::{confusion, forgetting, EvalReport};
use crate::model::{layer_id, GlyphTransformer, LoraPart, ParamKey};
use crate::real::Real;
use crate::tensor::{global_grad_clip, Graph};

const EVAL_BATCH: usize = 64;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable sub-seed for a purpose tag and indices.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix(seed), |acc, &p| splitmix(acc ^ p))
}

const TAG_HEAD: u64 = 1;
const TAG_ADAPT: u64 = 2;
const TAG_SPLIT: u64 = 3;
const TAG_SHUFFLE: u64 = 4;
const TAG_AUG: u64 = 5;

/// Image `i` of `ds` as model input, augmented when `aug` is given.
fn sample_pixels<T: Real>(ds: &GlyphDataset, i: usize, aug: Option<(&Augment, u64)>, out: &mut Vec<T>) {
    match aug {
        Some((a, seed)) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            out.extend(a.apply(ds.image(i), ds.width, &mut rng).into_iter().map(T::from_f64));
        }
        None => out.extend(ds.image(i).iter().map(|&p| T::from_f64(p as f64 / 255.0))),
    }
}

/// Sets up `model` for task `task`: fresh head, trainable set per mode, and
/// fresh adapters in the adapter modes.
pub fn prepare_task<T: Real>(
    model: &mut GlyphTransformer<T>,
    n_classes: usize,
    config: &TrainConfig,
    task: usize,
) -> Result<()> {
    config.validate()?;
    model.reset_head(n_classes, derive_seed(config.seed, &[TAG_HEAD, task as u64]))?;
    model.set_backbone_trainable(config.mode == Mode::FullFt);
    if config.mode.uses_adapters() {
        model.attach_adapters(
            config.targets,
            config.rank,
            config.alpha,
            derive_seed(config.seed, &[TAG_ADAPT, task as u64]),
        )?;
        if config.freeze_importance {
            for (_, _, ad) in model.adapters_mut() {
                ad.set_importance_trainable(false);
            }
        }
    }
    Ok(())
}

/// Seeded 90/10 split of `0..n` into (train, validation) indices.
pub fn train_val_split(n: usize, seed: u64, task: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::Data(format!("need at least 2 training samples, got {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_SPLIT, task as u64])));
    let n_val = (n / 10).max(1);
    let val = idx.split_off(n - n_val);
    Ok((idx, val))
}

/// Runs forward/backward over `samples` in micro-batches of `micro_batch`
/// and adds the gradient of the mean loss into the model. Returns the mean
/// loss. `aug_seed(i)` gives the augmentation seed of sample `i`.
pub fn accumulate_gradients<T: Real>(
    model: &mut GlyphTransformer<T>,
    data: &GlyphDataset,
    samples: &[usize],
    micro_batch: usize,
    augment: Option<&Augment>,
    aug_seed: impl Fn(usize) -> u64,
) -> Result<f64> {
    let total = samples.len();
    let mut loss_sum = 0.0;
    let mut pixels = Vec::new();
    for chunk in samples.chunks(micro_batch.max(1)) {
        pixels.clear();
        for &i in chunk {
            sample_pixels(data, i, augment.map(|a| (a, aug_seed(i))), &mut pixels);
        }
        let labels: Vec<usize> = chunk.iter().map(|&i| data.label(i)).collect();
        let mut g = Graph::new();
        let fw = model.forward(&mut g, &pixels, chunk.len())?;
        let ce = g.cross_entropy(fw.logits, &labels)?;
        let loss = g.mul_scalar(ce, T::from_f64(chunk.len() as f64 / total as f64));
        loss_sum += g.value(loss)[0].as_f64();
        let grads = g.backward(loss)?;
        model.accumulate_grads(&grads, &fw.bindings)?;
    }
    Ok(loss_sum)
}

/// Predicted class per sample, argmax with ties to the lower index.
pub fn predict<T: Real>(model: &GlyphTransformer<T>, data: &GlyphDataset, indices: &[usize]) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(indices.len());
    let mut pixels = Vec::new();
    for chunk in indices.chunks(EVAL_BATCH) {
        pixels.clear();
        for &i in chunk {
            sample_pixels(data, i, None, &mut pixels);
        }
        let logits = model.logits(&pixels, chunk.len())?;
        let c = logits.shape()[1];
        for row in logits.data().chunks(c) {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            preds.push(best);
        }
    }
    Ok(preds)
}

/// Accuracy, macro recall and macro F1 of `model` on all of `data`.
pub fn evaluate<T: Real>(model: &GlyphTransformer<T>, data: &GlyphDataset) -> Result<EvalReport> {
    model.check_classes(data.n_classes)?;
    if data.is_empty() {
        return Err(Error::Evaluation("empty evaluation set".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let preds = predict(model, data, &idx)?;
    let labels: Vec<usize> = idx.iter().map(|&i| data.label(i)).collect();
    let mut report = EvalReport::from_confusion(&confusion(&preds, &labels, data.n_classes)?)?;
    report.active_ranks = active_ranks(model);
    Ok(report)
}

fn subset_accuracy<T: Real>(model: &GlyphTransformer<T>, data: &GlyphDataset, idx: &[usize]) -> Result<f64> {
    let preds = predict(model, data, idx)?;
    let hits = preds.iter().zip(idx).filter(|(p, &i)| **p == data.label(i)).count();
    Ok(hits as f64 / idx.len() as f64)
}

/// `(layer id, active rank)` for every attached adapter.
pub fn active_ranks<T: Real>(model: &GlyphTransformer<T>) -> Vec<(String, usize)> {
    model.adapters().map(|(l, s, ad)| (layer_id(l, s), ad.active_rank())).collect()
}

/// Outcome of [`train_task`].
#[derive(Debug, Clone, PartialEq)]
pub struct TaskResult {
    /// Mean loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    /// Validation accuracy after each epoch.
    pub val_accuracy: Vec<f64>,
    /// Epoch (0-based) whose parameters were kept.
    pub best_epoch: usize,
    pub steps: usize,
    pub trainable_params: usize,
    pub prune_reports: Vec<PruneReport>,
    pub active_ranks: Vec<(String, usize)>,
}

/// Trains the prepared `model` on `data` (see [`prepare_task`]).
pub fn train_task<T: Real>(
    model: &mut GlyphTransformer<T>,
    data: &GlyphDataset,
    config: &TrainConfig,
    task: usize,
) -> Result<TaskResult> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    model.check_classes(data.n_classes)?;
    let (train_idx, val_idx) = train_val_split(data.len(), config.seed, task)?;
    let trainable_params = model.trainable_param_count();
    let mut opt = AdamW::new(config.lr, config.weight_decay);
    let group = config.effective_batch();
    let tau_scale = if config.mode == Mode::Dynamic { config.lambda } else { 0.0 };

    let mut step_losses = Vec::new();
    let mut val_accuracy = Vec::new();
    let mut best: Option<(f64, usize, GlyphTransformer<T>)> = None;
    let mut since_best = 0;
    let mut order = train_idx.clone();
    'epochs: for epoch in 0..config.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[TAG_SHUFFLE, task as u64, epoch as u64]));
        order.shuffle(&mut rng);
        let aug_seed = |i: usize| derive_seed(config.seed, &[TAG_AUG, task as u64, epoch as u64, i as u64]);
        let mut capped = false;
        for samples in order.chunks(group) {
            let loss = accumulate_gradients(
                model,
                data,
                samples,
                config.micro_batch,
                config.augment.as_ref(),
                aug_seed,
            )?;
            let step = step_losses.len() + 1;
            if !loss.is_finite() {
                return Err(Error::NanLoss { step });
            }
            global_grad_clip(&mut model.trainable_mut(), config.clip_norm);
            opt.step_model(model)?;
            if tau_scale > 0.0 && epoch >= config.shrink_warmup_epochs {
                for (l, s, ad) in model.adapters_mut() {
                    match config.shrink {
                        ShrinkRule::Scalar => {
                            ad.soft_shrink_weights(tau_scale * config.lr)?;
                        }
                        ShrinkRule::Preconditioned => {
                            if let Some(lr_eff) = opt.effective_lr(ParamKey::Lora(l, s, LoraPart::W)) {
                                let taus: Vec<f64> = lr_eff.iter().map(|e| tau_scale * e).collect();
                                ad.soft_shrink_each(&taus)?;
                            }
                        }
                    }
                }
            }
            for (_, _, ad) in model.adapters_mut() {
                ad.enforce_mask();
            }
            step_losses.push(loss);
            if config.max_steps.is_some_and(|m| step_losses.len() >= m) {
                capped = true;
                break;
            }
        }
        let acc = subset_accuracy(model, data, &val_idx)?;
        val_accuracy.push(acc);
        if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
            best = Some((acc, epoch, model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        if capped || since_best >= config.patience.max(1) {
            break 'epochs;
        }
    }
    let (_, best_epoch, snapshot) = best.expect("at least one epoch");
    *model = snapshot;

    let mut prune_reports = Vec::new();
    if config.mode == Mode::Dynamic {
        if let Some(eps) = config.prune_epsilon {
            for (l, s, ad) in model.adapters_mut() {
                prune_reports.push(ad.prune(eps, &layer_id(l, s))?);
            }
        }
    }
    model.zero_grad();
    Ok(TaskResult {
        steps: step_losses.len(),
        step_losses,
        val_accuracy,
        best_epoch,
        trainable_params,
        prune_reports,
        active_ranks: active_ranks(model),
    })
}

/// One task of a sequential run.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub name: String,
    pub train: GlyphDataset,
    pub test: GlyphDataset,
}

/// Per-task record of a sequential run.
#[derive(Debug, Clone)]
pub struct TaskLog {
    pub name: String,
    pub result: TaskResult,
    pub adapter_params: usize,
    pub checkpoint_bytes: usize,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct SequentialRunResult<T> {
    /// `r[t_eval][t_after]`, `None` above the diagonal.
    pub r: Vec<Vec<Option<f64>>>,
    /// Metrics of every task after the last one, with forgetting filled in.
    pub reports: Vec<EvalReport>,
    pub forgetting: Vec<f64>,
    pub tasks: Vec<TaskLog>,
    pub model: GlyphTransformer<T>,
    pub extras: RunExtras<T>,
}

/// Evaluates task `task` of a run: its head (and, without merging, its
/// adapters) on the current backbone.
pub fn evaluate_task<T: Real>(
    model: &GlyphTransformer<T>,
    extras: &RunExtras<T>,
    task: usize,
    data: &GlyphDataset,
) -> Result<EvalReport> {
    let mut m = model.clone();
    let head = extras
        .heads
        .get(&task)
        .ok_or_else(|| Error::Evaluation(format!("no head stored for task {task}")))?;
    m.replace_head(head.clone())?;
    if let Some(set) = extras.adapters.get(&task) {
        m.install_adapters(set.clone())?;
    }
    evaluate(&m, data)
}

/// Loads checkpoint `path` the way the sequential run evaluates: adapters
/// folded in when present.
pub fn load_for_replay<T: Real>(path: impl AsRef<Path>) -> Result<(GlyphTransformer<T>, RunExtras<T>)> {
    let (mut model, extras) = checkpoint_to_model(&Checkpoint::load(path)?)?;
    model.merge_adapters();
    Ok((model, extras))
}

/// Trains `tasks` in order on one backbone. After each task the adapters
/// are pruned and folded in (or set aside when `config.merge` is off), a
/// checkpoint is written to `out_dir` as `task<t>.dlra`, and every task seen
/// so far is re-evaluated.
pub fn train_sequential<T: Real>(
    tasks: &[TaskData],
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<SequentialRunResult<T>> {
    config.validate()?;
    let first = tasks.first().ok_or_else(|| Error::Config("no tasks given".into()))?;
    let mut mcfg = config.model;
    mcfg.n_classes = first.train.n_classes;
    for t in tasks {
        for ds in [&t.train, &t.test] {
            if ds.height != mcfg.image_side || ds.width != mcfg.image_side {
                return Err(Error::Config(format!(
                    "task {} has {}x{} images, model expects {}x{}",
                    t.name, ds.height, ds.width, mcfg.image_side, mcfg.image_side
                )));
            }
        }
        if t.train.n_classes != t.test.n_classes {
            return Err(Error::Data(format!("task {} train/test class counts differ", t.name)));
        }
    }
    let mut model = GlyphTransformer::<T>::init(mcfg, config.seed)?;
    let mut extras = RunExtras::default();
    let n = tasks.len();
    let mut r = vec![vec![None; n]; n];
    let mut logs = Vec::with_capacity(n);
    let mut last_reports = BTreeMap::new();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    for (t, task) in tasks.iter().enumerate() {
        let start = Instant::now();
        prepare_task(&mut model, task.train.n_classes, config, t)?;
        let result = train_task(&mut model, &task.train, config, t)?;
        let adapter_params = model.adapter_param_count();
        extras.heads.insert(t, model.head().clone());
        if !config.merge {
            let set = model.detach_adapters();
            if !set.is_empty() {
                extras.adapters.insert(t, set);
            }
        }
        let ck = model_to_checkpoint(&model, &extras)?;
        let bytes = ck.encode()?;
        if let Some(dir) = out_dir {
            std::fs::write(dir.join(format!("task{t}.dlra")), &bytes)?;
        }
        model.merge_adapters();
        for (j, tj) in tasks.iter().enumerate().take(t + 1) {
            let rep = evaluate_task(&model, &extras, j, &tj.test)?;
            r[j][t] = Some(rep.accuracy);
            last_reports.insert(j, rep);
        }
        model.replace_head(extras.heads[&t].clone())?;
        logs.push(TaskLog {
            name: task.name.clone(),
            result,
            adapter_params,
            checkpoint_bytes: bytes.len(),
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }
    let f = forgetting(&r)?;
    let reports = last_reports
        .into_iter()
        .map(|(j, mut rep)| {
            rep.forgetting = f.get(j).copied();
            rep.active_ranks = logs[j].result.active_ranks.clone();
            rep
        })
        .collect();
    if let Some(dir) = out_dir {
        std::fs::copy(dir.join(format!("task{}.dlra", n - 1)), dir.join("model.dlra"))?;
    }
    Ok(SequentialRunResult {
        r,
        reports,
        forgetting: f,
        tasks: logs,
        model,
        extras,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glyphgen::{generate_dataset, ScriptFamily, Split};
    use crate::model::GlyphTransformerConfig;

    fn small_config() -> TrainConfig {
        TrainConfig {
            model: GlyphTransformerConfig {
                d_model: 16,
                n_heads: 2,
                n_layers: 1,
                d_ff: 32,
                ..GlyphTransformerConfig::default()
            },
            max_epochs: 2,
            augment: None,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn split_is_ninety_ten_and_disjoint() {
        let (tr, va) = train_val_split(100, 3, 0).unwrap();
        assert_eq!((tr.len(), va.len()), (90, 10));
        let mut all: Vec<usize> = tr.iter().chain(&va).copied().collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert!(train_val_split(1, 0, 0).is_err());
    }

    #[test]
    fn adapter_modes_freeze_the_backbone() {
        let cfg = small_config();
        let mut m = GlyphTransformer::<f32>::init(cfg.model, 0).unwrap();
        prepare_task(&mut m, 10, &cfg, 0).unwrap();
        let mut frozen = true;
        m.visit(|k, t| {
            if k.is_backbone() {
                frozen &= !t.requires_grad();
            }
        });
        assert!(frozen);
        assert!(m.adapter_param_count() > 0);

        let full = TrainConfig {
            mode: Mode::FullFt,
            ..small_config()
        };
        let mut m = GlyphTransformer::<f32>::init(cfg.model, 0).unwrap();
        prepare_task(&mut m, 10, &full, 0).unwrap();
        assert_eq!(m.adapter_param_count(), 0);
        assert_eq!(m.trainable_param_count(), m.backbone_param_count() + 10 * 16 + 10);
    }

    #[test]
    fn empty_dataset_is_a_data_error() {
        let cfg = small_config();
        let fam = ScriptFamily::new(0).unwrap();
        let ds = generate_dataset(&fam, 2, 0, Split::Train).unwrap().subset(&[]);
        let mut m = GlyphTransformer::<f32>::init(cfg.model, 0).unwrap();
        prepare_task(&mut m, 10, &cfg, 0).unwrap();
        assert!(matches!(train_task(&mut m, &ds, &cfg, 0), Err(Error::Data(_))));
    }

    #[test]
    fn early_stopping_keeps_the_best_epoch() {
        let cfg = TrainConfig {
            max_epochs: 4,
            patience: 1,
            ..small_config()
        };
        let fam = ScriptFamily::new(0).unwrap();
        let ds = generate_dataset(&fam, 4, 0, Split::Train).unwrap();
        let mut m = GlyphTransformer::<f32>::init(cfg.model, 0).unwrap();
        prepare_task(&mut m, 10, &cfg, 0).unwrap();
        let res = train_task(&mut m, &ds, &cfg, 0).unwrap();
        let best = res.val_accuracy[res.best_epoch];
        assert!(res.val_accuracy.iter().all(|&a| a <= best));
        assert!(res.val_accuracy[..res.best_epoch].iter().all(|&a| a < best));
        assert!(res.val_accuracy.len() <= res.best_epoch + 2);
    }
}
