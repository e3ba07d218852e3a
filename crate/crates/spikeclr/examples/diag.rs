//! scratch diagnostics, not part of the crate surface

use rand::seq::SliceRandom;
use spikeclr::augment::make_view_pair;
use spikeclr::autodiff::{cosine_lr, Param, Sgd, Tape, Tensor, ValueId};
use spikeclr::config::Config;
use spikeclr::contrastive::{aggregate_time_mean, cosine_sim_matrix, nt_xent_tape};
use spikeclr::event::synth_moving_shapes;
use spikeclr::repr::FrameSequence;
use spikeclr::rng::{derive_seed, stream_rng};
use spikeclr::snn::{build_backbone, build_projection_head, forward_sequence};
use spikeclr::train::stack_steps;

fn sim_stats(agg: &Tensor) -> (f64, f64, f64, usize) {
    let n2 = agg.shape()[0];
    let sim = cosine_sim_matrix(agg).unwrap();
    let (mut pos, mut npos) = (0.0, 0);
    let (mut neg, mut nneg) = (0.0, 0);
    for i in 0..n2 {
        for j in 0..n2 {
            if i == j {
                continue;
            }
            let s = sim.data()[i * n2 + j];
            if j == (i ^ 1) {
                pos += s;
                npos += 1;
            } else {
                neg += s;
                nneg += 1;
            }
        }
    }
    let d = agg.shape()[1];
    let mut dead = 0;
    let mut norm_sum = 0.0;
    for r in 0..n2 {
        let row = &agg.data()[r * d..(r + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        norm_sum += norm;
        if norm < 1e-9 {
            dead += 1;
        }
    }
    (pos / npos as f64, neg / nneg as f64, norm_sum / n2 as f64, dead)
}

fn run(cfg: &Config, label: &str, epochs: usize, freeze: &[usize]) -> spikeclr::Result<()> {
    let ds = synth_moving_shapes(
        cfg.data.classes,
        cfg.data.samples_per_class,
        (cfg.data.width, cfg.data.height),
        cfg.data.duration_us,
        derive_seed(cfg.seed, "data", &[0]),
    )?;
    let backbone = build_backbone(
        cfg.model.backbone,
        cfg.data.height as usize,
        cfg.data.width as usize,
        cfg.model.lif,
        derive_seed(cfg.seed, "model", &[0]),
    )?;
    let proj_dim = std::env::var("DIAG_PROJ_DIM")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(cfg.model.proj_dim);
    let head = build_projection_head(
        backbone.out_dim,
        proj_dim,
        cfg.model.lif,
        derive_seed(cfg.seed, "model", &[1]),
    )?;
    let mut flat: Vec<Param> = backbone
        .params
        .iter()
        .chain(head.params.iter())
        .cloned()
        .collect();
    let nb = backbone.params.len();
    if let Ok(off) = std::env::var("DIAG_HIDDEN_BIAS") {
        let v: f64 = off.parse().unwrap();
        let shape = flat[nb + 1].value.shape().to_vec();
        let n: usize = shape.iter().product();
        flat[nb + 1].value = Tensor::new(shape, vec![v; n]).unwrap();
    }
    if let Ok(off) = std::env::var("DIAG_CONV_BIAS") {
        let v: f64 = off.parse().unwrap();
        for p in flat.iter_mut().take(nb) {
            if p.name.ends_with(".b") {
                let shape = p.value.shape().to_vec();
                let n: usize = shape.iter().product();
                p.value = Tensor::new(shape, vec![v; n]).unwrap();
            }
        }
    }
    if let Ok(g) = std::env::var("DIAG_GAIN") {
        let g: f64 = g.parse().unwrap();
        for p in flat.iter_mut() {
            if p.name.ends_with(".w") {
                let shape = p.value.shape().to_vec();
                let data: Vec<f64> = p.value.data().iter().map(|v| v * g).collect();
                p.value = Tensor::new(shape, data).unwrap();
            }
        }
    }
    let mut opt = Sgd::new(&flat, cfg.pretrain.momentum, cfg.pretrain.weight_decay);
    println!("== {label} ==");
    let sched: usize = std::env::var("DIAG_SCHED")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(epochs);
    for epoch in 0..epochs {
        let lr = cosine_lr(cfg.pretrain.lr, epoch, sched);
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut stream_rng(cfg.seed, "shuffle", &[epoch as u64]));
        let mut stats = (0.0, 0.0, 0.0, 0usize);
        let mut eloss = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.pretrain.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let mut views: Vec<FrameSequence> = Vec::new();
            for &idx in batch {
                let mut vrng = stream_rng(cfg.seed, "views", &[epoch as u64, idx as u64]);
                let pair = make_view_pair(&ds.samples[idx].0, &cfg.augment, cfg.data.t_bins, &mut vrng, idx)?;
                views.push(pair.view_a);
                views.push(pair.view_b);
            }
            let refs: Vec<&FrameSequence> = views.iter().collect();
            let steps = stack_steps(&refs)?;
            let mut tape = Tape::new();
            let ids: Vec<ValueId> = flat.iter().map(|p| tape.leaf(p.value.clone())).collect();
            let step_ids: Vec<ValueId> = steps.iter().map(|t| tape.constant(t.clone())).collect();
            let feat = forward_sequence(&mut tape, &backbone, &ids[..nb], &step_ids)?;
            let proj = forward_sequence(&mut tape, &head, &ids[nb..], &feat)?;
            let agg = aggregate_time_mean(&mut tape, &proj)?;
            let (p, n, nm, dd) = sim_stats(tape.value(agg));
            stats.0 += p;
            stats.1 += n;
            stats.2 += nm;
            stats.3 += dd;
            let loss = nt_xent_tape(&mut tape, agg, cfg.pretrain.temperature)?;
            eloss += tape.value(loss).item()?;
            batches += 1;
            if std::env::var("DIAG_PROBE").is_ok() {
                continue;
            }
            let mut bag = tape.backward(loss)?;
            let mut grads: Vec<(String, Tensor)> = flat
                .iter()
                .zip(&ids)
                .map(|(pr, &id)| {
                    (pr.name.clone(), bag.take(id).unwrap_or_else(|| Tensor::zeros(pr.value.shape())))
                })
                .collect();
            for &off in freeze {
                let i = nb + off;
                grads[i].1 = Tensor::zeros(flat[i].value.shape());
            }
            opt.step(&mut flat, &grads, lr)?;
        }
        let b = batches as f64;
        let out_bias = &flat[flat.len() - 1].value;
        let bnorm = out_bias.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        println!(
            "  ep {epoch:>2} loss {:.4}  pos {:+.3} neg {:+.3} gap {:+.3}  |z| {:.3} |b| {:.3} dead {}",
            eloss / b,
            stats.0 / b,
            stats.1 / b,
            (stats.0 - stats.1) / b,
            stats.2 / b,
            bnorm,
            stats.3
        );
    }
    Ok(())
}

fn main() -> spikeclr::Result<()> {
    let mut cfg = Config::default();
    let epochs: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(5);
    let mut freeze: Vec<usize> = Vec::new();
    match std::env::args().nth(2).as_deref() {
        Some("tau02") => cfg.pretrain.temperature = 0.2,
        Some("tau01") => cfg.pretrain.temperature = 0.1,
        Some("tau1") => cfg.pretrain.temperature = 1.0,
        Some("mild") => {
            cfg.augment.crop_scale = (0.8, 1.0);
            cfg.augment.window_fraction = (0.7, 1.0);
            cfg.augment.brightness = (0.8, 1.2);
            cfg.augment.shift = (-0.05, 0.05);
        }
        Some("nobias") => freeze = vec![3],
        Some("nobias_all") => freeze = vec![1, 3],
        Some("nobias_mild") => {
            freeze = vec![3];
            cfg.augment.crop_scale = (0.8, 1.0);
            cfg.augment.window_fraction = (0.7, 1.0);
            cfg.augment.brightness = (0.8, 1.2);
            cfg.augment.shift = (-0.05, 0.05);
        }
        Some("nobias_tau02") => {
            freeze = vec![3];
            cfg.pretrain.temperature = 0.2;
        }
        Some("nobias_all_tau02") => {
            freeze = vec![1, 3];
            cfg.pretrain.temperature = 0.2;
        }
        Some("lr_low") => cfg.pretrain.lr = 0.01,
        Some("lr_high") => cfg.pretrain.lr = 0.2,
        Some("nowd") => cfg.pretrain.weight_decay = 0.0,
        _ => {}
    }
    if let Ok(v) = std::env::var("DIAG_FLIP") {
        cfg.augment.flip_prob = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("DIAG_CROP_LO") {
        cfg.augment.crop_scale.0 = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("DIAG_WINDOW_LO") {
        cfg.augment.window_fraction.0 = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("DIAG_BRIGHT") {
        let d: f64 = v.parse().unwrap();
        cfg.augment.brightness = (1.0 - d, 1.0 + d);
    }
    if let Ok(v) = std::env::var("DIAG_SHIFT") {
        let d: f64 = v.parse().unwrap();
        cfg.augment.shift = (-d, d);
    }
    if let Ok(v) = std::env::var("DIAG_TAU") {
        cfg.pretrain.temperature = v.parse().unwrap();
    }
    let label = std::env::args().nth(2).unwrap_or_else(|| "default".into());
    run(&cfg, &label, epochs, &freeze)
}
