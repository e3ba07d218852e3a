//! Training loops and evaluation protocols.
//!
//! Everything here is deterministic in the run seed: shuffles, few-shot
//! splits, view sampling, and model initialization all draw from named
//! seed streams, so a rerun with the same config reproduces every metric
//! bit for bit (wall-clock time excepted).

use std::time::Instant;

use rand::seq::SliceRandom;

use crate::augment::{aug_spatial, make_view_pair, AugmentPolicy, Family};
use crate::autodiff::{cosine_lr, Param, Sgd, Tape, Tensor, ValueId};
use crate::config::Config;
use crate::contrastive::{aggregate_time_mean, nt_xent_tape, temporal_nt_xent};
use crate::error::{Error, Result};
use crate::event::LabeledEventDataset;
use crate::repr::{downsample, encode_histogram, normalize_slices, FrameSequence};
use crate::rng::{derive_seed, stream_rng};
use crate::snn::{
    build_backbone, build_classifier, build_projection_head, forward_features, forward_sequence,
    forward_step, ModelState, SnnModel,
};

/// One evaluation split: how the labeled training subset is chosen (`k`
/// examples per class, a stratified fraction of each class, or the whole
/// set when both are `None`), its index in the sweep, and the seed that
/// selects it.
#[derive(Debug, Clone, Copy)]
pub struct SplitSpec {
    pub k: Option<usize>,
    pub label_fraction: Option<f64>,
    pub split: usize,
    pub split_seed: u64,
}

impl SplitSpec {
    pub fn full(split: usize, split_seed: u64) -> SplitSpec {
        SplitSpec { k: None, label_fraction: None, split, split_seed }
    }

    fn label(&self) -> String {
        match (self.k, self.label_fraction) {
            (Some(k), _) => k.to_string(),
            (None, Some(f)) => format!("frac{f}"),
            (None, None) => "full".to_string(),
        }
    }
}

/// Outcome of one protocol run on one split.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub protocol: String,
    pub dataset: String,
    pub pretrain_dataset: String,
    pub k: String,
    pub split: usize,
    pub split_seed: u64,
    pub accuracy: f64,
    pub epochs: usize,
    pub wall_clock_s: f64,
}

/// Outcome of a pretraining run.
#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub dataset: String,
    pub epochs: usize,
    pub loss_curve: Vec<f64>,
    pub trained_params: usize,
    pub dead_embedding_rows: usize,
    pub wall_clock_s: f64,
}

/// Pretrained encoder with its projection head and training record.
#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub backbone: SnnModel,
    pub head: SnnModel,
    pub report: PretrainReport,
}

/// Accuracy aggregated over splits of one protocol. `degenerate` flags a
/// single-split summary, whose standard deviation of 0 is not informative.
#[derive(Debug, Clone)]
pub struct Summary {
    pub protocol: String,
    pub k: String,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub n_splits: usize,
    pub degenerate: bool,
}

/// Mean and sample standard deviation of per-split accuracies. All reports
/// must come from the same protocol at the same k.
pub fn aggregate(reports: &[RunReport]) -> Result<Summary> {
    let first = reports
        .first()
        .ok_or_else(|| Error::contract("cannot summarize zero runs"))?;
    for r in reports {
        if r.protocol != first.protocol || r.k != first.k {
            return Err(Error::contract(format!(
                "mixed runs in one summary: {}@k={} vs {}@k={}",
                first.protocol, first.k, r.protocol, r.k
            )));
        }
    }
    let n = reports.len();
    let mean = reports.iter().map(|r| r.accuracy).sum::<f64>() / n as f64;
    let std = if n > 1 {
        let ss = reports
            .iter()
            .map(|r| (r.accuracy - mean) * (r.accuracy - mean))
            .sum::<f64>();
        (ss / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(Summary {
        protocol: first.protocol.clone(),
        k: first.k.clone(),
        mean_acc: mean,
        std_acc: std,
        n_splits: n,
        degenerate: n == 1,
    })
}

/// The per-split seeds for a run: one derived stream per split index.
pub fn split_seeds(seed: u64, splits: usize) -> Vec<u64> {
    (0..splits)
        .map(|i| derive_seed(seed, "split", &[i as u64]))
        .collect()
}

/// Pick the labeled training subset for one split: `k` examples per class,
/// a stratified `label_fraction` of each class, or everything when neither
/// is set. Each class shuffles with its own stream so splits with different
/// seeds differ. Returned indices are grouped by class.
pub fn sample_few_shot(ds: &LabeledEventDataset, spec: &SplitSpec) -> Result<Vec<usize>> {
    if spec.k.is_some() && spec.label_fraction.is_some() {
        return Err(Error::config(
            "k and label_fraction are mutually exclusive ways to size a split",
        ));
    }
    if let Some(f) = spec.label_fraction {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::config(format!(
                "label_fraction must lie in (0, 1], got {f}"
            )));
        }
    }
    if spec.k.is_none() && spec.label_fraction.is_none() {
        return Ok((0..ds.len()).collect());
    }
    if spec.k == Some(0) {
        return Err(Error::config("k must be at least 1"));
    }
    let mut out = Vec::new();
    for (class, mut idxs) in ds.indices_by_class().into_iter().enumerate() {
        let take = match (spec.k, spec.label_fraction) {
            (Some(k), _) => {
                if idxs.len() < k {
                    return Err(Error::data(format!(
                        "class {} has {} samples, fewer than k={}",
                        class,
                        idxs.len(),
                        k
                    )));
                }
                k
            }
            (None, Some(f)) => (f * idxs.len() as f64).round() as usize,
            (None, None) => unreachable!(),
        };
        idxs.shuffle(&mut stream_rng(spec.split_seed, "fewshot", &[class as u64]));
        out.extend_from_slice(&idxs[..take]);
    }
    if out.is_empty() {
        return Err(Error::data("labeled split came out empty; fraction too small"));
    }
    Ok(out)
}

/// A fraction-sized prefix of one fixed shuffle of `0..n`, so smaller
/// fractions are strict subsets of larger ones. At least two indices are
/// kept (when available) so the subset can still form a contrastive batch.
pub fn fraction_prefix(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::data("cannot take a fraction of an empty dataset"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!(
            "fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, "fraction", &[]));
    let m = ((fraction * n as f64).round() as usize).max(2).min(n).max(1);
    order.truncate(m);
    Ok(order)
}

/// New dataset holding clones of the selected samples.
pub fn subset_dataset(
    ds: &LabeledEventDataset,
    indices: &[usize],
    tag: &str,
) -> Result<LabeledEventDataset> {
    let samples = indices.iter().map(|&i| ds.samples[i].clone()).collect();
    LabeledEventDataset::new(samples, ds.num_classes, format!("{}[{}]", ds.name, tag))
}

/// Class-stratified split into disjoint train and test datasets. Every
/// class contributes at least one test sample and keeps at least one
/// training sample.
pub fn holdout_split(
    ds: &LabeledEventDataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(LabeledEventDataset, LabeledEventDataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::config(format!(
            "holdout fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for (class, mut idxs) in ds.indices_by_class().into_iter().enumerate() {
        if idxs.len() < 2 {
            return Err(Error::data(format!(
                "class {class} needs at least two samples to hold out a test set"
            )));
        }
        idxs.shuffle(&mut stream_rng(seed, "holdout", &[class as u64]));
        let n_test = ((test_fraction * idxs.len() as f64).round() as usize).clamp(1, idxs.len() - 1);
        test_idx.extend_from_slice(&idxs[..n_test]);
        train_idx.extend_from_slice(&idxs[n_test..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((
        subset_dataset(ds, &train_idx, "train")?,
        subset_dataset(ds, &test_idx, "test")?,
    ))
}

/// Encode the selected streams as normalized histograms. `down` > 1 pools
/// raw counts by that factor first and normalizes afterwards, so encodings
/// of a larger sensor match the statistics of a natively smaller one.
pub fn encode_dataset(
    ds: &LabeledEventDataset,
    indices: &[usize],
    t_bins: usize,
    down: usize,
) -> Result<Vec<(FrameSequence, usize)>> {
    indices
        .iter()
        .map(|&i| {
            let (stream, label) = &ds.samples[i];
            let seq = if down <= 1 {
                encode_histogram(stream, t_bins, true)?
            } else {
                let mut s = downsample(&encode_histogram(stream, t_bins, false)?, down)?;
                normalize_slices(&mut s);
                s
            };
            Ok((seq, *label))
        })
        .collect()
}

/// Stack per-sample frame sequences into one batched tensor per time step.
pub fn stack_steps(seqs: &[&FrameSequence]) -> Result<Vec<Tensor>> {
    let first = seqs
        .first()
        .ok_or_else(|| Error::shape("stack_steps", "empty batch"))?;
    let (t_bins, h, w) = (first.t_bins(), first.height(), first.width());
    let plane = 2 * h * w;
    let n = seqs.len();
    let mut steps: Vec<Tensor> = (0..t_bins).map(|_| Tensor::zeros(&[n, 2, h, w])).collect();
    for (i, s) in seqs.iter().enumerate() {
        if s.t_bins() != t_bins || s.height() != h || s.width() != w {
            return Err(Error::shape("stack_steps", "mismatched frame dimensions in batch"));
        }
        let d = s.tensor().data();
        for (t, step) in steps.iter_mut().enumerate() {
            step.data_mut()[i * plane..(i + 1) * plane]
                .copy_from_slice(&d[t * plane..(t + 1) * plane]);
        }
    }
    Ok(steps)
}

fn onehot(labels: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &c) in labels.iter().enumerate() {
        t.data_mut()[i * classes + c] = 1.0;
    }
    t
}

/// Mean cross entropy of logits against integer labels.
fn nll_from_logits(
    tape: &mut Tape,
    logits: ValueId,
    labels: &[usize],
    classes: usize,
) -> Result<ValueId> {
    let logp = tape.log_softmax_rows(logits)?;
    let oh = tape.constant(onehot(labels, classes));
    let picked = tape.mul(logp, oh)?;
    let per_row = tape.sum_axis(picked, 1)?;
    let neg = tape.scale(per_row, -1.0);
    Ok(tape.mean_all(neg))
}

/// Index of the row maximum; ties go to the lowest index.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Sequential mean over per-step outputs, matching the tape-side
/// aggregation arithmetic exactly.
fn time_mean(steps: &[Tensor]) -> Result<Tensor> {
    let first = steps
        .first()
        .ok_or_else(|| Error::shape("time_mean", "no steps"))?;
    let mut acc = first.clone();
    for s in &steps[1..] {
        acc.add_assign(s)?;
    }
    let inv = 1.0 / steps.len() as f64;
    Ok(acc.map(|v| v * inv))
}

/// Time-averaged backbone features for every sequence, one row each.
pub fn extract_features(
    backbone: &SnnModel,
    seqs: &[&FrameSequence],
    batch: usize,
) -> Result<Tensor> {
    if seqs.is_empty() {
        return Err(Error::data("no sequences to featurize"));
    }
    let dim = backbone.out_dim;
    let mut out = Tensor::zeros(&[seqs.len(), dim]);
    let mut row = 0;
    for chunk in seqs.chunks(batch.max(1)) {
        let steps = stack_steps(chunk)?;
        let feats = forward_features(backbone, &steps)?;
        let mean = time_mean(&feats)?;
        out.data_mut()[row * dim..(row + chunk.len()) * dim].copy_from_slice(mean.data());
        row += chunk.len();
    }
    Ok(out)
}

fn classify_features(clf: &SnnModel, feats: &Tensor) -> Result<Vec<usize>> {
    let logits = forward_features(clf, std::slice::from_ref(feats))?
        .pop()
        .ok_or_else(|| Error::shape("classify", "classifier produced no output"))?;
    let classes = logits.shape()[1];
    Ok((0..logits.shape()[0])
        .map(|i| argmax(&logits.data()[i * classes..(i + 1) * classes]))
        .collect())
}

/// Accuracy of the classifier over backbone features of encoded samples.
pub fn evaluate(
    backbone: &SnnModel,
    clf: &SnnModel,
    data: &[(FrameSequence, usize)],
    batch: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::data("evaluation set is empty"));
    }
    let refs: Vec<&FrameSequence> = data.iter().map(|(s, _)| s).collect();
    let feats = extract_features(backbone, &refs, batch)?;
    let preds = classify_features(clf, &feats)?;
    let correct = preds
        .iter()
        .zip(data)
        .filter(|(p, (_, label))| *p == label)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// One SGD step: insert the flat parameter list as leaves, build the loss,
/// backpropagate, and update in place. `models` only delimits how the flat
/// list splits into per-model id groups handed to `build`. Returns the loss
/// and whatever count `build` reports (dead embedding rows, usually zero).
fn sgd_batch_step(
    models: &[&SnnModel],
    flat: &mut [Param],
    opt: &mut Sgd,
    lr: f64,
    build: impl FnOnce(&mut Tape, &[&[ValueId]]) -> Result<(ValueId, usize)>,
) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = flat.iter().map(|p| tape.leaf(p.value.clone())).collect();
    let mut groups: Vec<&[ValueId]> = Vec::with_capacity(models.len());
    let mut off = 0;
    for m in models {
        groups.push(&ids[off..off + m.params.len()]);
        off += m.params.len();
    }
    if off != ids.len() {
        return Err(Error::contract("flat parameter list does not match model group sizes"));
    }
    let (loss, extra) = build(&mut tape, &groups)?;
    let loss_val = tape.value(loss).item()?;
    if !loss_val.is_finite() {
        return Err(Error::contract(format!("training loss became non-finite: {loss_val}")));
    }
    let mut bag = tape.backward(loss)?;
    let grads: Vec<(String, Tensor)> = flat
        .iter()
        .zip(&ids)
        .map(|(p, &id)| {
            let g = bag
                .take(id)
                .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
            (p.name.clone(), g)
        })
        .collect();
    opt.step(flat, &grads, lr)?;
    Ok((loss_val, extra))
}

fn flat_params(models: &[&SnnModel]) -> Vec<Param> {
    models
        .iter()
        .flat_map(|m| m.params.iter().cloned())
        .collect()
}

fn write_back(flat: &[Param], model: &mut SnnModel, offset: usize) {
    for (p, src) in model.params.iter_mut().zip(&flat[offset..]) {
        p.value = src.value.clone();
    }
}

/// Contrastive pretraining: two stochastic views per sample, run through
/// the backbone and projection head, pulled together by the paired-view
/// loss. Returns the trained encoder; labels are never read.
pub fn pretrain(train: &LabeledEventDataset, cfg: &Config) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    if train.len() < 2 {
        return Err(Error::data("contrastive pretraining needs at least two samples"));
    }
    if cfg.augment.enabled.is_empty() {
        return Err(Error::config(
            "pretraining requires at least one enabled augmentation family",
        ));
    }
    let sensor = train.sensor();
    let (h, w) = (sensor.1 as usize, sensor.0 as usize);
    let t_bins = cfg.data.t_bins;
    let mut backbone = build_backbone(
        cfg.model.backbone,
        h,
        w,
        cfg.model.lif,
        derive_seed(cfg.seed, "model", &[0]),
    )?;
    let mut head = build_projection_head(
        backbone.out_dim,
        cfg.model.proj_dim,
        cfg.model.lif,
        derive_seed(cfg.seed, "model", &[1]),
    )?;
    let trained_params = backbone.param_count() + head.param_count();
    let mut flat = flat_params(&[&backbone, &head]);
    let mut opt = Sgd::new(&flat, cfg.pretrain.momentum, cfg.pretrain.weight_decay);
    let mut curve = Vec::with_capacity(cfg.pretrain.epochs);
    let mut dead_total = 0usize;
    for epoch in 0..cfg.pretrain.epochs {
        let lr = cosine_lr(cfg.pretrain.lr, epoch, cfg.pretrain.epochs);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream_rng(cfg.seed, "shuffle", &[epoch as u64]));
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.pretrain.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let mut views: Vec<FrameSequence> = Vec::with_capacity(2 * batch.len());
            for &idx in batch {
                let mut vrng = stream_rng(cfg.seed, "views", &[epoch as u64, idx as u64]);
                let pair = make_view_pair(&train.samples[idx].0, &cfg.augment, t_bins, &mut vrng, idx)?;
                views.push(pair.view_a);
                views.push(pair.view_b);
            }
            let refs: Vec<&FrameSequence> = views.iter().collect();
            let step_inputs = stack_steps(&refs)?;
            let (loss, dead) = sgd_batch_step(
                &[&backbone, &head],
                &mut flat,
                &mut opt,
                lr,
                |tape, groups| {
                    let step_ids: Vec<ValueId> =
                        step_inputs.iter().map(|t| tape.constant(t.clone())).collect();
                    let feat = forward_sequence(tape, &backbone, groups[0], &step_ids)?;
                    let proj = forward_sequence(tape, &head, groups[1], &feat)?;
                    let agg = aggregate_time_mean(tape, &proj)?;
                    let dead = tape.count_dead_rows(agg);
                    let loss = if cfg.pretrain.temporal_loss {
                        temporal_nt_xent(tape, &proj, cfg.pretrain.temperature)?
                    } else {
                        nt_xent_tape(tape, agg, cfg.pretrain.temperature)?
                    };
                    Ok((loss, dead))
                },
            )?;
            epoch_loss += loss;
            batches += 1;
            dead_total += dead;
        }
        if batches == 0 {
            return Err(Error::data(
                "no batches of size >= 2; dataset too small for this batch size",
            ));
        }
        curve.push(epoch_loss / batches as f64);
    }
    let nb = backbone.params.len();
    write_back(&flat, &mut backbone, 0);
    write_back(&flat, &mut head, nb);
    Ok(PretrainOutcome {
        backbone,
        head,
        report: PretrainReport {
            dataset: train.name.clone(),
            epochs: cfg.pretrain.epochs,
            loss_curve: curve,
            trained_params,
            dead_embedding_rows: dead_total,
            wall_clock_s: start.elapsed().as_secs_f64(),
        },
    })
}

/// Train backbone and classifier from random initialization on the split's
/// labeled subset. Spatial augmentation (when enabled) is re-drawn each
/// epoch over encodings cached once.
pub fn train_supervised(
    train: &LabeledEventDataset,
    test: &LabeledEventDataset,
    cfg: &Config,
    split: &SplitSpec,
) -> Result<RunReport> {
    cfg.validate()?;
    let start = Instant::now();
    let indices = sample_few_shot(train, split)?;
    let sensor = train.sensor();
    let (h, w) = (sensor.1 as usize, sensor.0 as usize);
    let init_seed = derive_seed(cfg.seed, "sup-init", &[split.split_seed]);
    let mut backbone = build_backbone(cfg.model.backbone, h, w, cfg.model.lif, init_seed)?;
    let mut clf = build_classifier(backbone.out_dim, train.num_classes)?;
    let base = encode_dataset(train, &indices, cfg.data.t_bins, 1)?;
    let spatial = cfg.augment.is_enabled(Family::Spatial).then(|| AugmentPolicy {
        enabled: vec![Family::Spatial],
        ..cfg.augment.clone()
    });
    let mut flat = flat_params(&[&backbone, &clf]);
    let mut opt = Sgd::new(&flat, cfg.downstream.momentum, cfg.downstream.weight_decay);
    for epoch in 0..cfg.downstream.epochs {
        let lr = cosine_lr(cfg.downstream.lr, epoch, cfg.downstream.epochs);
        let mut order: Vec<usize> = (0..base.len()).collect();
        order.shuffle(&mut stream_rng(split.split_seed, "sup-shuffle", &[epoch as u64]));
        for batch in order.chunks(cfg.downstream.batch_size) {
            let mut seqs = Vec::with_capacity(batch.len());
            let mut labels = Vec::with_capacity(batch.len());
            for &j in batch {
                let (seq, label) = &base[j];
                let seq = match &spatial {
                    Some(pol) => aug_spatial(
                        seq,
                        &mut stream_rng(split.split_seed, "sup-views", &[epoch as u64, j as u64]),
                        pol,
                    )?,
                    None => seq.clone(),
                };
                seqs.push(seq);
                labels.push(*label);
            }
            let refs: Vec<&FrameSequence> = seqs.iter().collect();
            let step_inputs = stack_steps(&refs)?;
            sgd_batch_step(&[&backbone, &clf], &mut flat, &mut opt, lr, |tape, groups| {
                let step_ids: Vec<ValueId> =
                    step_inputs.iter().map(|t| tape.constant(t.clone())).collect();
                let feat = forward_sequence(tape, &backbone, groups[0], &step_ids)?;
                let mean = aggregate_time_mean(tape, &feat)?;
                let mut st = ModelState::new(&clf);
                let logits = forward_step(tape, &clf, groups[1], mean, &mut st)?;
                Ok((nll_from_logits(tape, logits, &labels, train.num_classes)?, 0))
            })?;
        }
    }
    let nb = backbone.params.len();
    write_back(&flat, &mut backbone, 0);
    write_back(&flat, &mut clf, nb);
    let test_idx: Vec<usize> = (0..test.len()).collect();
    let encoded_test = encode_dataset(test, &test_idx, cfg.data.t_bins, 1)?;
    let accuracy = evaluate(&backbone, &clf, &encoded_test, cfg.downstream.batch_size)?;
    Ok(RunReport {
        protocol: "supervised".to_string(),
        dataset: train.name.clone(),
        pretrain_dataset: "none".to_string(),
        k: split.label(),
        split: split.split,
        split_seed: split.split_seed,
        accuracy,
        epochs: cfg.downstream.epochs,
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}

/// Train only a classifier on frozen backbone features. The backbone is
/// borrowed immutably, so its weights cannot change here by construction.
pub fn linear_probe(
    backbone: &SnnModel,
    pretrain_name: &str,
    train: &LabeledEventDataset,
    test: &LabeledEventDataset,
    cfg: &Config,
    split: &SplitSpec,
) -> Result<RunReport> {
    cfg.validate()?;
    let start = Instant::now();
    let indices = sample_few_shot(train, split)?;
    let enc_train = encode_dataset(train, &indices, cfg.data.t_bins, 1)?;
    let train_refs: Vec<&FrameSequence> = enc_train.iter().map(|(s, _)| s).collect();
    let feats = extract_features(backbone, &train_refs, cfg.downstream.batch_size)?;
    let labels: Vec<usize> = enc_train.iter().map(|(_, l)| *l).collect();
    let dim = backbone.out_dim;
    let mut clf = build_classifier(dim, train.num_classes)?;
    let mut flat = flat_params(&[&clf]);
    let mut opt = Sgd::new(&flat, cfg.downstream.momentum, cfg.downstream.weight_decay);
    for epoch in 0..cfg.downstream.epochs {
        let lr = cosine_lr(cfg.downstream.lr, epoch, cfg.downstream.epochs);
        let mut order: Vec<usize> = (0..labels.len()).collect();
        order.shuffle(&mut stream_rng(split.split_seed, "probe-shuffle", &[epoch as u64]));
        for batch in order.chunks(cfg.downstream.batch_size) {
            let mut rows = Tensor::zeros(&[batch.len(), dim]);
            let mut batch_labels = Vec::with_capacity(batch.len());
            for (bi, &j) in batch.iter().enumerate() {
                rows.data_mut()[bi * dim..(bi + 1) * dim]
                    .copy_from_slice(&feats.data()[j * dim..(j + 1) * dim]);
                batch_labels.push(labels[j]);
            }
            sgd_batch_step(&[&clf], &mut flat, &mut opt, lr, |tape, groups| {
                let x = tape.constant(rows.clone());
                let mut st = ModelState::new(&clf);
                let logits = forward_step(tape, &clf, groups[0], x, &mut st)?;
                Ok((nll_from_logits(tape, logits, &batch_labels, train.num_classes)?, 0))
            })?;
        }
    }
    write_back(&flat, &mut clf, 0);
    let test_idx: Vec<usize> = (0..test.len()).collect();
    let enc_test = encode_dataset(test, &test_idx, cfg.data.t_bins, 1)?;
    let test_refs: Vec<&FrameSequence> = enc_test.iter().map(|(s, _)| s).collect();
    let test_feats = extract_features(backbone, &test_refs, cfg.downstream.batch_size)?;
    let preds = classify_features(&clf, &test_feats)?;
    let correct = preds
        .iter()
        .zip(&enc_test)
        .filter(|(p, (_, label))| *p == label)
        .count();
    Ok(RunReport {
        protocol: "probe".to_string(),
        dataset: train.name.clone(),
        pretrain_dataset: pretrain_name.to_string(),
        k: split.label(),
        split: split.split,
        split_seed: split.split_seed,
        accuracy: correct as f64 / enc_test.len() as f64,
        epochs: cfg.downstream.epochs,
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}

/// Continue training a copy of the pretrained backbone together with a
/// fresh classifier on the split's labeled subset. `down` pools encodings
/// by that factor first so a larger target sensor can feed a backbone
/// built for a smaller one.
pub fn fine_tune(
    backbone_init: &SnnModel,
    pretrain_name: &str,
    train: &LabeledEventDataset,
    test: &LabeledEventDataset,
    cfg: &Config,
    split: &SplitSpec,
    down: usize,
) -> Result<RunReport> {
    cfg.validate()?;
    let start = Instant::now();
    let indices = sample_few_shot(train, split)?;
    let mut backbone = backbone_init.clone();
    let mut clf = build_classifier(backbone.out_dim, train.num_classes)?;
    let base = encode_dataset(train, &indices, cfg.data.t_bins, down)?;
    let mut flat = flat_params(&[&backbone, &clf]);
    let mut opt = Sgd::new(&flat, cfg.downstream.momentum, cfg.downstream.weight_decay);
    for epoch in 0..cfg.downstream.epochs {
        let lr = cosine_lr(cfg.downstream.lr, epoch, cfg.downstream.epochs);
        let mut order: Vec<usize> = (0..base.len()).collect();
        order.shuffle(&mut stream_rng(split.split_seed, "ft-shuffle", &[epoch as u64]));
        for batch in order.chunks(cfg.downstream.batch_size) {
            let refs: Vec<&FrameSequence> = batch.iter().map(|&j| &base[j].0).collect();
            let labels: Vec<usize> = batch.iter().map(|&j| base[j].1).collect();
            let step_inputs = stack_steps(&refs)?;
            sgd_batch_step(&[&backbone, &clf], &mut flat, &mut opt, lr, |tape, groups| {
                let step_ids: Vec<ValueId> =
                    step_inputs.iter().map(|t| tape.constant(t.clone())).collect();
                let feat = forward_sequence(tape, &backbone, groups[0], &step_ids)?;
                let mean = aggregate_time_mean(tape, &feat)?;
                let mut st = ModelState::new(&clf);
                let logits = forward_step(tape, &clf, groups[1], mean, &mut st)?;
                Ok((nll_from_logits(tape, logits, &labels, train.num_classes)?, 0))
            })?;
        }
    }
    let nb = backbone.params.len();
    write_back(&flat, &mut backbone, 0);
    write_back(&flat, &mut clf, nb);
    let test_idx: Vec<usize> = (0..test.len()).collect();
    let encoded_test = encode_dataset(test, &test_idx, cfg.data.t_bins, down)?;
    let accuracy = evaluate(&backbone, &clf, &encoded_test, cfg.downstream.batch_size)?;
    Ok(RunReport {
        protocol: "finetune".to_string(),
        dataset: train.name.clone(),
        pretrain_dataset: pretrain_name.to_string(),
        k: split.label(),
        split: split.split,
        split_seed: split.split_seed,
        accuracy,
        epochs: cfg.downstream.epochs,
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}

/// The evaluation splits a config describes: one spec per split index.
pub fn eval_splits(cfg: &Config) -> Vec<SplitSpec> {
    split_seeds(cfg.seed, cfg.eval.splits)
        .into_iter()
        .enumerate()
        .map(|(split, split_seed)| SplitSpec {
            k: cfg.eval.k.as_option(),
            label_fraction: cfg.eval.label_fraction,
            split,
            split_seed,
        })
        .collect()
}

/// Supervised baseline over all evaluation splits.
pub fn run_supervised(
    train: &LabeledEventDataset,
    test: &LabeledEventDataset,
    cfg: &Config,
) -> Result<(Vec<RunReport>, Summary)> {
    let reports: Vec<RunReport> = eval_splits(cfg)
        .iter()
        .map(|s| train_supervised(train, test, cfg, s))
        .collect::<Result<_>>()?;
    let summary = aggregate(&reports)?;
    Ok((reports, summary))
}

/// Linear probe over all evaluation splits.
pub fn run_probe(
    backbone: &SnnModel,
    pretrain_name: &str,
    train: &LabeledEventDataset,
    test: &LabeledEventDataset,
    cfg: &Config,
) -> Result<(Vec<RunReport>, Summary)> {
    let reports: Vec<RunReport> = eval_splits(cfg)
        .iter()
        .map(|s| linear_probe(backbone, pretrain_name, train, test, cfg, s))
        .collect::<Result<_>>()?;
    let summary = aggregate(&reports)?;
    Ok((reports, summary))
}

/// Fine-tuning over all evaluation splits.
pub fn run_finetune(
    backbone: &SnnModel,
    pretrain_name: &str,
    train: &LabeledEventDataset,
    test: &LabeledEventDataset,
    cfg: &Config,
) -> Result<(Vec<RunReport>, Summary)> {
    let reports: Vec<RunReport> = eval_splits(cfg)
        .iter()
        .map(|s| fine_tune(backbone, pretrain_name, train, test, cfg, s, 1))
        .collect::<Result<_>>()?;
    let summary = aggregate(&reports)?;
    Ok((reports, summary))
}

/// The pooling factor that maps the target sensor onto the sensor the
/// encoder was pretrained on: 1 when they match, otherwise the shared
/// integer ratio of both dimensions.
pub fn reconcile_factor(pretrain_sensor: (u16, u16), target_sensor: (u16, u16)) -> Result<usize> {
    if pretrain_sensor == target_sensor {
        return Ok(1);
    }
    let (pw, ph) = pretrain_sensor;
    let (tw, th) = target_sensor;
    if pw > 0 && ph > 0 && tw % pw == 0 && th % ph == 0 && tw / pw == th / ph {
        return Ok((tw / pw) as usize);
    }
    Err(Error::config(format!(
        "target sensor {tw}x{th} is not an integer multiple of pretraining sensor {pw}x{ph}"
    )))
}

/// Transfer outcome: the pretraining record plus fine-tuning results on
/// the target dataset.
#[derive(Debug, Clone)]
pub struct TransferOutcome {
    pub pretrain: PretrainOutcome,
    pub reports: Vec<RunReport>,
    pub summary: Summary,
}

/// Pretrain on one dataset, then fine-tune per split on another. The target
/// sensor must equal the pretraining sensor or be an integer multiple of it
/// (encodings are pooled down by the ratio).
pub fn run_transfer(
    pretrain_ds: &LabeledEventDataset,
    target_train: &LabeledEventDataset,
    target_test: &LabeledEventDataset,
    cfg: &Config,
) -> Result<TransferOutcome> {
    let outcome = pretrain(pretrain_ds, cfg)?;
    let down = reconcile_factor(pretrain_ds.sensor(), target_train.sensor())?;
    if target_test.sensor() != target_train.sensor() {
        return Err(Error::data("target train and test sensors differ"));
    }
    let reports: Vec<RunReport> = eval_splits(cfg)
        .iter()
        .map(|s| {
            fine_tune(
                &outcome.backbone,
                &pretrain_ds.name,
                target_train,
                target_test,
                cfg,
                s,
                down,
            )
        })
        .collect::<Result<_>>()?;
    let summary = aggregate(&reports)?;
    Ok(TransferOutcome { pretrain: outcome, reports, summary })
}

/// One fraction's results in a data-quantity sweep.
#[derive(Debug, Clone)]
pub struct FractionRun {
    pub fraction: f64,
    pub pretrain_samples: usize,
    pub pretrain: PretrainReport,
    pub reports: Vec<RunReport>,
    pub summary: Summary,
}

/// Pretrain on nested fractions of the training set, then fine-tune each
/// encoder per split with labels drawn from the full training set, so only
/// the quantity of pretraining data varies across runs.
pub fn run_data_quantity(
    train: &LabeledEventDataset,
    test: &LabeledEventDataset,
    cfg: &Config,
) -> Result<Vec<FractionRun>> {
    cfg.validate()?;
    let mut fractions = cfg.eval.fractions.clone();
    fractions.sort_by(f64::total_cmp);
    fractions.dedup();
    let splits = eval_splits(cfg);
    let mut out = Vec::with_capacity(fractions.len());
    for fraction in fractions {
        let idx = fraction_prefix(train.len(), fraction, cfg.seed)?;
        let sub = subset_dataset(train, &idx, &format!("{fraction}"))?;
        let pre = pretrain(&sub, cfg)?;
        let reports: Vec<RunReport> = splits
            .iter()
            .map(|s| fine_tune(&pre.backbone, &sub.name, train, test, cfg, s, 1))
            .collect::<Result<_>>()?;
        let summary = aggregate(&reports)?;
        out.push(FractionRun {
            fraction,
            pretrain_samples: sub.len(),
            pretrain: pre.report,
            reports,
            summary,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::synth_moving_shapes;

    fn small_cfg() -> Config {
        let mut cfg = Config::default();
        cfg.data.classes = 2;
        cfg.data.samples_per_class = 4;
        cfg.data.height = 8;
        cfg.data.width = 8;
        cfg.data.t_bins = 2;
        cfg.pretrain.epochs = 2;
        cfg.pretrain.batch_size = 4;
        cfg.downstream.epochs = 2;
        cfg.downstream.batch_size = 4;
        cfg.eval.splits = 2;
        cfg
    }

    fn small_ds(seed: u64) -> LabeledEventDataset {
        synth_moving_shapes(2, 4, (8, 8), 1000, seed).unwrap()
    }

    fn kspec(k: usize, split_seed: u64) -> SplitSpec {
        SplitSpec { k: Some(k), label_fraction: None, split: 0, split_seed }
    }

    fn report(acc: f64) -> RunReport {
        RunReport {
            protocol: "probe".into(),
            dataset: "d".into(),
            pretrain_dataset: "p".into(),
            k: "5".into(),
            split: 0,
            split_seed: 1,
            accuracy: acc,
            epochs: 1,
            wall_clock_s: 0.0,
        }
    }

    #[test]
    fn aggregate_matches_hand_computation() {
        let s = aggregate(&[report(0.2), report(0.4)]).unwrap();
        assert!((s.mean_acc - 0.3).abs() < 1e-15);
        assert!((s.std_acc - (0.02f64).sqrt()).abs() < 1e-12);
        assert_eq!(s.n_splits, 2);
    }

    #[test]
    fn aggregate_single_run_has_zero_std() {
        let s = aggregate(&[report(0.7)]).unwrap();
        assert_eq!(s.std_acc, 0.0);
        assert_eq!(s.n_splits, 1);
    }

    #[test]
    fn aggregate_rejects_mixed_protocols() {
        let mut other = report(0.5);
        other.protocol = "finetune".into();
        assert!(aggregate(&[report(0.5), other]).is_err());
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn few_shot_takes_exactly_k_per_class() {
        let ds = small_ds(3);
        let idx = sample_few_shot(&ds, &kspec(3, 42)).unwrap();
        assert_eq!(idx.len(), 6);
        let mut per_class = [0usize; 2];
        for &i in &idx {
            per_class[ds.samples[i].1] += 1;
        }
        assert_eq!(per_class, [3, 3]);
        let again = sample_few_shot(&ds, &kspec(3, 42)).unwrap();
        assert_eq!(idx, again);
        let other = sample_few_shot(&ds, &kspec(3, 43)).unwrap();
        assert_ne!(idx, other);
        assert!(sample_few_shot(&ds, &kspec(5, 42)).is_err());
        assert_eq!(sample_few_shot(&ds, &SplitSpec::full(0, 0)).unwrap().len(), 8);
    }

    #[test]
    fn label_fraction_is_stratified() {
        let ds = synth_moving_shapes(10, 10, (8, 8), 1000, 13).unwrap();
        let spec = SplitSpec { k: None, label_fraction: Some(0.1), split: 0, split_seed: 4 };
        let idx = sample_few_shot(&ds, &spec).unwrap();
        assert_eq!(idx.len(), 10);
        let mut per_class = [0usize; 10];
        for &i in &idx {
            per_class[ds.samples[i].1] += 1;
        }
        assert!(per_class.iter().all(|&c| c == 1));
        assert_eq!(spec.label(), "frac0.1");
        let both = SplitSpec { k: Some(2), label_fraction: Some(0.1), split: 0, split_seed: 4 };
        assert!(sample_few_shot(&ds, &both).is_err());
    }

    #[test]
    fn fraction_prefixes_nest() {
        let quarter = fraction_prefix(16, 0.25, 9).unwrap();
        let half = fraction_prefix(16, 0.5, 9).unwrap();
        let full = fraction_prefix(16, 1.0, 9).unwrap();
        assert_eq!(quarter.len(), 4);
        assert_eq!(half.len(), 8);
        assert_eq!(full.len(), 16);
        assert_eq!(&half[..4], &quarter[..]);
        assert_eq!(&full[..8], &half[..]);
        assert_eq!(fraction_prefix(16, 0.05, 9).unwrap().len(), 2);
    }

    #[test]
    fn holdout_split_is_disjoint_and_stratified() {
        let ds = synth_moving_shapes(2, 10, (8, 8), 1000, 5).unwrap();
        let (train, test) = holdout_split(&ds, 0.2, 7).unwrap();
        assert_eq!(train.len() + test.len(), ds.len());
        assert_eq!(test.len(), 4);
        for by in test.indices_by_class() {
            assert_eq!(by.len(), 2);
        }
        let (train2, test2) = holdout_split(&ds, 0.2, 7).unwrap();
        assert_eq!(train.len(), train2.len());
        for ((a, _), (b, _)) in train.samples.iter().zip(&train2.samples) {
            assert_eq!(a.events(), b.events());
        }
        assert_eq!(test.len(), test2.len());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[1.0, 2.0, 2.0]), 1);
        assert_eq!(argmax(&[-1.0, -3.0]), 0);
    }

    /// Uniform logits give cross entropy ln(C) for any labels.
    #[test]
    fn nll_of_uniform_logits_is_log_classes() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[4, 3]));
        let loss = nll_from_logits(&mut tape, logits, &[0, 1, 2, 0], 3).unwrap();
        let got = tape.value(loss).item().unwrap();
        assert!((got - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn pretrain_zero_epochs_returns_initial_weights() {
        let ds = small_ds(11);
        let mut cfg = small_cfg();
        cfg.pretrain.epochs = 0;
        let out = pretrain(&ds, &cfg).unwrap();
        let fresh = build_backbone(
            cfg.model.backbone,
            8,
            8,
            cfg.model.lif,
            derive_seed(cfg.seed, "model", &[0]),
        )
        .unwrap();
        for (a, b) in out.backbone.params.iter().zip(&fresh.params) {
            assert_eq!(a.value.data(), b.value.data());
        }
        assert!(out.report.loss_curve.is_empty());
    }

    #[test]
    fn pretrain_is_deterministic_and_updates_weights() {
        let ds = small_ds(11);
        let cfg = small_cfg();
        let a = pretrain(&ds, &cfg).unwrap();
        let b = pretrain(&ds, &cfg).unwrap();
        for (pa, pb) in a.backbone.params.iter().zip(&b.backbone.params) {
            assert_eq!(pa.value.data(), pb.value.data());
        }
        assert_eq!(a.report.loss_curve, b.report.loss_curve);
        assert_eq!(a.report.loss_curve.len(), 2);
        assert!(a.report.loss_curve.iter().all(|l| l.is_finite()));
        let fresh = build_backbone(
            cfg.model.backbone,
            8,
            8,
            cfg.model.lif,
            derive_seed(cfg.seed, "model", &[0]),
        )
        .unwrap();
        let moved = a
            .backbone
            .params
            .iter()
            .zip(&fresh.params)
            .any(|(p, f)| p.value.data() != f.value.data());
        assert!(moved, "two epochs of pretraining should move some weight");
    }

    #[test]
    fn probe_leaves_backbone_untouched_and_zero_epochs_matches_finetune() {
        let ds = small_ds(11);
        let test = small_ds(12);
        let mut cfg = small_cfg();
        cfg.pretrain.epochs = 1;
        let out = pretrain(&ds, &cfg).unwrap();
        let before: Vec<Vec<f64>> = out.backbone.params.iter().map(|p| p.value.data().to_vec()).collect();
        cfg.downstream.epochs = 0;
        let split = kspec(2, 99);
        let probe = linear_probe(&out.backbone, "pre", &ds, &test, &cfg, &split).unwrap();
        let after: Vec<Vec<f64>> = out.backbone.params.iter().map(|p| p.value.data().to_vec()).collect();
        assert_eq!(before, after);
        let ft = fine_tune(&out.backbone, "pre", &ds, &test, &cfg, &split, 1).unwrap();
        assert_eq!(probe.accuracy, ft.accuracy);
        let by_class = test.indices_by_class();
        let class0 = by_class[0].len() as f64 / test.len() as f64;
        assert!((probe.accuracy - class0).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_supervised_keeps_initial_weights() {
        let ds = small_ds(11);
        let test = small_ds(12);
        let mut cfg = small_cfg();
        cfg.downstream.lr = 0.0;
        cfg.downstream.epochs = 1;
        let split = kspec(2, 5);
        let rep = train_supervised(&ds, &test, &cfg, &split).unwrap();
        assert_eq!(rep.protocol, "supervised");
        let zero_clf = build_classifier(32, 2).unwrap();
        assert!(zero_clf.params.iter().all(|p| p.value.data().iter().all(|&v| v == 0.0)));
        let by_class = test.indices_by_class();
        let class0 = by_class[0].len() as f64 / test.len() as f64;
        assert!((rep.accuracy - class0).abs() < 1e-15);
    }

    #[test]
    fn supervised_memorizes_tiny_dataset() {
        let ds = small_ds(21);
        let mut cfg = small_cfg();
        cfg.augment.enabled.clear();
        cfg.downstream.epochs = 40;
        cfg.downstream.batch_size = 8;
        let split = SplitSpec::full(0, 1);
        let rep = train_supervised(&ds, &ds, &cfg, &split).unwrap();
        assert!(
            rep.accuracy >= 0.9,
            "expected near-perfect training accuracy, got {}",
            rep.accuracy
        );
    }

    #[test]
    fn finetune_is_deterministic() {
        let ds = small_ds(11);
        let test = small_ds(12);
        let mut cfg = small_cfg();
        cfg.pretrain.epochs = 1;
        let out = pretrain(&ds, &cfg).unwrap();
        let split = kspec(2, 31);
        let a = fine_tune(&out.backbone, "pre", &ds, &test, &cfg, &split, 1).unwrap();
        let b = fine_tune(&out.backbone, "pre", &ds, &test, &cfg, &split, 1).unwrap();
        assert_eq!(a.accuracy, b.accuracy);
        assert_eq!(a.k, "2");
        assert_eq!(a.pretrain_dataset, "pre");
    }

    #[test]
    fn reconcile_factor_accepts_integer_ratios_only() {
        assert_eq!(reconcile_factor((8, 8), (8, 8)).unwrap(), 1);
        assert_eq!(reconcile_factor((8, 8), (16, 16)).unwrap(), 2);
        assert_eq!(reconcile_factor((16, 8), (32, 16)).unwrap(), 2);
        assert!(reconcile_factor((8, 8), (12, 12)).is_err());
        assert!(reconcile_factor((8, 8), (16, 8)).is_err());
        assert!(reconcile_factor((8, 8), (16, 32)).is_err());
    }

    #[test]
    fn transfer_pools_larger_target_down() {
        let pre_ds = small_ds(41);
        let tgt = synth_moving_shapes(2, 3, (16, 16), 1000, 42).unwrap();
        let tgt_test = synth_moving_shapes(2, 2, (16, 16), 1000, 43).unwrap();
        let mut cfg = small_cfg();
        cfg.pretrain.epochs = 1;
        cfg.downstream.epochs = 1;
        cfg.eval.splits = 1;
        cfg.eval.k = crate::config::KOrFull::K(2);
        let out = run_transfer(&pre_ds, &tgt, &tgt_test, &cfg).unwrap();
        assert_eq!(out.reports.len(), 1);
        assert!(out.reports[0].accuracy >= 0.0 && out.reports[0].accuracy <= 1.0);
        assert_eq!(out.summary.protocol, "finetune");
    }

    #[test]
    fn data_quantity_runs_each_fraction() {
        let ds = synth_moving_shapes(2, 6, (8, 8), 1000, 51).unwrap();
        let test = small_ds(52);
        let mut cfg = small_cfg();
        cfg.pretrain.epochs = 1;
        cfg.downstream.epochs = 1;
        cfg.eval.splits = 1;
        cfg.eval.k = crate::config::KOrFull::K(2);
        cfg.eval.fractions = vec![1.0, 0.5, 0.5];
        let runs = run_data_quantity(&ds, &test, &cfg).unwrap();
        assert_eq!(runs.len(), 2);
        assert_eq!(runs[0].fraction, 0.5);
        assert_eq!(runs[1].fraction, 1.0);
        assert_eq!(runs[0].pretrain.dataset, "synth_c2_s51[0.5]");
    }
}
