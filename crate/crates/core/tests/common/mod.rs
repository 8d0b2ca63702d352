//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use flamefinder::imaging::{Label, RgbImage};
use flamefinder::model::{self, ModelParams, Upstream};
use flamefinder::pipeline::dataset::LabeledDataset;
use flamefinder::pipeline::train::{balance_seed, class_mean_prototypes, epoch_order, epoch_rng};
use flamefinder::pipeline::{augment, balance, TrainConfig};
use flamefinder::dml::PrototypePair;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn sq(v: f64) -> f64 {
    v * v
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| sq(x - y)).sum()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn own_other(protos: &PrototypePair, y: Label) -> (&[f64], &[f64]) {
    match y {
        Label::Flame => (&protos.flame, &protos.noflame),
        Label::NoFlame => (&protos.noflame, &protos.flame),
    }
}

/// Unweighted triplet-center loss and its embedding gradient.
pub fn vanilla_triplet(e: &[Vec<f64>], y: &[Label], protos: &PrototypePair, margin: f64) -> (f64, Vec<Vec<f64>>) {
    let m = e.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::new();
    for (ei, &yi) in e.iter().zip(y) {
        let (p, n) = own_other(protos, yi);
        let hinge = dist2(ei, p) - dist2(ei, n) + margin;
        if hinge > 0.0 {
            loss += hinge;
            grads.push(p.iter().zip(n).map(|(pj, nj)| (nj - pj) / m).collect());
        } else {
            grads.push(vec![0.0; ei.len()]);
        }
    }
    (loss / (2.0 * m), grads)
}

/// Unweighted center loss and its embedding gradient.
pub fn vanilla_center(e: &[Vec<f64>], y: &[Label], protos: &PrototypePair) -> (f64, Vec<Vec<f64>>) {
    let m = e.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::new();
    for (ei, &yi) in e.iter().zip(y) {
        let (p, _) = own_other(protos, yi);
        loss += dist2(ei, p);
        grads.push(ei.iter().zip(p).map(|(x, c)| (x - c) / m).collect());
    }
    (loss / (2.0 * m), grads)
}

/// Unweighted cosine triplet loss and its embedding gradient.
pub fn vanilla_cosine(e: &[Vec<f64>], y: &[Label], protos: &PrototypePair) -> (f64, Vec<Vec<f64>>) {
    let m = e.len() as f64;
    let mut sum = 0.0;
    let mut grads = Vec::new();
    for (ei, &yi) in e.iter().zip(y) {
        let (p, n) = own_other(protos, yi);
        sum += cos(ei, p) - cos(ei, n);
        let ne2: f64 = ei.iter().map(|x| x * x).sum();
        let ne = ne2.sqrt();
        // d cos(e, c) / de = c / (|e||c|) - cos(e, c) e / |e|²
        let dcos = |c: &[f64]| -> Vec<f64> {
            let nc = c.iter().map(|x| x * x).sum::<f64>().sqrt();
            let k = cos(ei, c);
            c.iter().zip(ei).map(|(cj, ej)| cj / (ne * nc) - k * ej / ne2).collect()
        };
        let (dp, dn) = (dcos(p), dcos(n));
        grads.push(dp.iter().zip(&dn).map(|(a, b)| -(a - b) / (2.0 * m)).collect());
    }
    (2.0 - sum / (2.0 * m), grads)
}

/// Flame segmentation written as one pass of plain loops.
pub fn seg_oracle(img: &RgbImage, tau_g: f64, tau_b: f64, alpha: f64, beta: f64, delta: f64) -> Vec<bool> {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let px: Vec<[f64; 3]> = img
        .pixels()
        .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
        .collect();
    let n = px.len() as f64;
    let mut mean = [0.0; 3];
    for p in &px {
        for c in 0..3 {
            mean[c] += p[c];
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let raw: Vec<bool> = px
        .iter()
        .map(|&[r, g, b]| {
            let c1 = r - mean[0] >= b - mean[2] && r - mean[0] >= g - mean[1];
            let c2 = g <= tau_g && b <= tau_b;
            let c3 = (r - g).abs() > alpha * g && (r - 2.0 * g).abs() < beta * r && (g - 2.0 * b).abs() > delta * g;
            c1 && c2 && c3
        })
        .collect();
    let at = |v: &Vec<bool>, x: i64, y: i64| x >= 0 && y >= 0 && x < w && y < h && v[(y * w + x) as usize];
    let inside = |x: i64, y: i64| x >= 0 && y >= 0 && x < w && y < h;

    let mut pruned = raw.clone();
    for y in 0..h {
        for x in 0..w {
            if !raw[(y * w + x) as usize] {
                continue;
            }
            let mut nbrs = 0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if (dx, dy) != (0, 0) && at(&raw, x + dx, y + dy) {
                        nbrs += 1;
                    }
                }
            }
            if nbrs == 0 {
                pruned[(y * w + x) as usize] = false;
            }
        }
    }
    let mut dilated = vec![false; pruned.len()];
    for y in 0..h {
        for x in 0..w {
            let mut any = false;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    any |= at(&pruned, x + dx, y + dy);
                }
            }
            dilated[(y * w + x) as usize] = any;
        }
    }
    let mut out = vec![false; pruned.len()];
    for y in 0..h {
        for x in 0..w {
            let mut all = true;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if inside(x + dx, y + dy) {
                        all &= at(&dilated, x + dx, y + dy);
                    }
                }
            }
            out[(y * w + x) as usize] = all;
        }
    }
    out
}

/// Random RGB image mixing uniform noise with flame-like and foliage-like pixels.
pub fn random_rgb(rng: &mut ChaCha8Rng, w: usize, h: usize) -> RgbImage {
    let mut data = Vec::with_capacity(w * h * 3);
    for _ in 0..w * h {
        let px: [u8; 3] = match rng.gen_range(0..3) {
            0 => [rng.gen(), rng.gen(), rng.gen()],
            1 => [rng.gen_range(200..=255), rng.gen_range(90..=150), rng.gen_range(0..=60)],
            _ => [rng.gen_range(10..=60), rng.gen_range(110..=170), rng.gen_range(20..=70)],
        };
        data.extend(px);
    }
    RgbImage::new(w, h, data).unwrap()
}

pub struct PlainRun {
    pub params: ModelParams,
    pub prototypes: Option<PrototypePair>,
    pub bce: Vec<f64>,
}

/// Mini-batch softmax classifier trained with heavy-ball SGD, no auxiliary terms.
///
/// Uses the same sampling stream as the trainer (shuffle, flips, mask dropout)
/// so the two can be compared bit for bit.
pub fn plain_classifier_loop(cfg: &TrainConfig, ds: &LabeledDataset) -> PlainRun {
    let (flame, noflame) = ds.class_counts();
    let data = if flame == noflame { ds.clone() } else { balance(ds, balance_seed(cfg.seed)).unwrap() };
    let mut params = model::init_params(cfg.seed, &cfg.model_config()).unwrap();
    let mut velocity: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.data.len()]).collect();
    let mut bce_log = Vec::new();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut rng = epoch_rng(cfg.seed, epoch);
        let order = epoch_order(data.len(), &mut rng);
        for idx in order.chunks(cfg.batch_size) {
            let inv_m = 1.0 / idx.len() as f64;
            let mut loss = 0.0;
            let mut grad: Vec<Vec<f64>> = velocity.iter().map(|v| vec![0.0; v.len()]).collect();
            let mut samples = Vec::new();
            for &i in idx {
                let p = augment(&data.patches[i], &mut rng);
                let mask = if cfg.use_lfe && !rng.gen_bool(cfg.lfe_dropout) {
                    p.mask_as_f64()
                } else {
                    vec![1.0; p.thermal.len()]
                };
                samples.push((p.thermal, mask, data.label(i)));
            }
            for (x, mask, y) in &samples {
                let trace = model::forward(x, mask, &params, false).unwrap();
                let t = y.index();
                loss -= trace.probs[t].max(f64::MIN_POSITIVE).ln();
                let mut g = trace.probs;
                g[t] -= 1.0;
                let up = Upstream {
                    logits: [g[0] * inv_m, g[1] * inv_m],
                    ..Upstream::default()
                };
                let gs = model::backward(&trace, &up, &params).unwrap();
                for (acc, t) in grad.iter_mut().zip(gs.tensors()) {
                    for (a, v) in acc.iter_mut().zip(t.data) {
                        *a += v;
                    }
                }
            }
            bce_log.push(loss * inv_m);
            for ((w, v), g) in params.tensors_mut().into_iter().zip(&mut velocity).zip(&grad) {
                for j in 0..w.len() {
                    v[j] = cfg.momentum * v[j] + g[j];
                    w[j] -= lr * v[j];
                }
            }
        }
    }
    let prototypes = class_mean_prototypes(&params, ds).unwrap();
    PlainRun {
        params,
        prototypes,
        bce: bce_log,
    }
}

/// Small labeled dataset of 8x8 patches with a hot square on flame samples.
pub fn toy_dataset(n: usize, seed: u64) -> LabeledDataset {
    use flamefinder::imaging::Patch;
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = LabeledDataset::default();
    for i in 0..n {
        let flame = i % 3 == 0;
        let mut thermal: Vec<f64> = (0..64).map(|_| rng.gen_range(0.1..0.3)).collect();
        let mut mask = vec![0u8; 64];
        if flame {
            let (ox, oy) = (rng.gen_range(0..6), rng.gen_range(0..6));
            for dy in 0..3 {
                for dx in 0..3 {
                    let j = (oy + dy) * 8 + ox + dx;
                    thermal[j] = rng.gen_range(0.8..1.0);
                    mask[j] = 1;
                }
            }
        }
        ds.push(
            Patch {
                grid_index: (i / 4, i % 4),
                size: 8,
                thermal,
                mask,
                label: Some(if flame { Label::Flame } else { Label::NoFlame }),
            },
            &format!("toy_{:03}", i / 4),
        );
    }
    ds
}

pub struct Batch {
    pub e: Vec<Vec<f64>>,
    pub labels: Vec<Label>,
    pub protos: PrototypePair,
    pub a: Vec<Vec<f64>>,
}

/// Random embeddings, labels with both classes present, prototypes and attention.
pub fn random_batch(rng: &mut ChaCha8Rng, m: usize, d: usize, scale: f64) -> Batch {
    let vec = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..d).map(|_| scale * rng.gen_range(-1.0..1.0)).collect() };
    let e = (0..m).map(|_| vec(rng)).collect();
    let protos = PrototypePair::new(vec(rng), vec(rng)).unwrap();
    let labels = (0..m)
        .map(|i| match i {
            0 => Label::Flame,
            1 => Label::NoFlame,
            _ if rng.gen_bool(0.5) => Label::Flame,
            _ => Label::NoFlame,
        })
        .collect();
    let a = (0..m).map(|_| (0..d).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
    Batch { e, labels, protos, a }
}

pub fn ones(m: usize, d: usize) -> Vec<Vec<f64>> {
    vec![vec![1.0; d]; m]
}

pub fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .fold(0.0, |m, (x, y)| f64::max(m, (x - y).abs()))
}
