//! Mini-batch SGD with jointly updated class prototypes.
//!
//! Each step runs forward passes, assembles the weighted objective, backpropagates
//! through the network, applies SGD with heavy-ball momentum to the weights and finally moves the
//! prototypes with the deltas computed before the weight update.
//!
//! Per-sample work runs on the rayon pool; gradients are summed in batch order,
//! so results do not depend on the number of worker threads.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::TrainConfig;
use super::dataset::{augment, balance, normalize, LabeledDataset};
use super::PipelineError;
use crate::checkpoint::Checkpoint;
use crate::dml::{self, AttentionWeights, DmlHyper, LossComponents, PrototypePair};
use crate::imaging::Label;
use crate::model::{self, ForwardTrace, ModelParams, Upstream};

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub bce: f64,
    pub rec: f64,
    pub tl: f64,
    pub cl: f64,
    pub cos: f64,
    pub total: f64,
    pub k: usize,
    pub k_prime: usize,
    pub proto_norm_flame: f64,
    pub proto_norm_noflame: f64,
}

pub const LOG_HEADER: &str = "step,bce,rec,tl,cl,cos,total,k,k_prime,proto_norm_flame,proto_norm_noflame";

/// Renders the log as CSV. Floats use the shortest exact representation.
pub fn log_csv(log: &[StepLog]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for r in log {
        out.push_str(&format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{},{},{:?},{:?}\n",
            r.step,
            r.bce,
            r.rec,
            r.tl,
            r.cl,
            r.cos,
            r.total,
            r.k,
            r.k_prime,
            r.proto_norm_flame,
            r.proto_norm_noflame
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepLog>,
}

/// A training sample after augmentation: normalized patch, LFE mask, label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub mask: Vec<f64>,
    pub label: Label,
}

/// Random stream for one epoch's shuffle and augmentation.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

pub fn epoch_order(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Seed used to oversample the minority class.
pub fn balance_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

/// Augments the indexed patches. With LFE on, each sample then draws whether
/// its mask is replaced by all ones (probability `lfe_dropout`).
pub fn make_batch(
    ds: &LabeledDataset,
    idx: &[usize],
    rng: &mut ChaCha8Rng,
    use_lfe: bool,
    lfe_dropout: f64,
) -> Vec<Sample> {
    idx.iter()
        .map(|&i| {
            let p = augment(&ds.patches[i], rng);
            let mask = if use_lfe && !rng.gen_bool(lfe_dropout) {
                p.mask_as_f64()
            } else {
                vec![1.0; p.thermal.len()]
            };
            Sample {
                x: p.thermal,
                mask,
                label: ds.label(i),
            }
        })
        .collect()
}

/// Sums per-sample gradients in order, starting from zero.
pub fn sum_grads(zero: ModelParams, grads: &[ModelParams]) -> ModelParams {
    grads.iter().fold(zero, |mut acc, g| {
        acc.add_assign(g);
        acc
    })
}

fn dml_active(h: &DmlHyper) -> bool {
    h.gamma1 > 0.0 || h.gamma2 > 0.0 || h.gamma3 > 0.0
}

/// Class means of inference-path embeddings over `ds`.
pub fn class_mean_prototypes(
    params: &ModelParams,
    ds: &LabeledDataset,
) -> Result<Option<PrototypePair>, PipelineError> {
    let ones = vec![1.0; params.config.pixels()];
    let embeddings: Vec<Vec<f64>> = ds
        .patches
        .par_iter()
        .map(|p| model::encode(&normalize(&p.thermal), &ones, params).map(|(e, _)| e.0))
        .collect::<Result<_, _>>()?;
    Ok(PrototypePair::from_class_means(&embeddings, &ds.labels()))
}

struct StepResult {
    breakdown: dml::LossBreakdown,
    grads: ModelParams,
}

fn step(
    cfg: &TrainConfig,
    params: &ModelParams,
    protos: &mut Option<PrototypePair>,
    batch: &[Sample],
) -> Result<StepResult, PipelineError> {
    let hyper = &cfg.hyper;
    let with_decoder = hyper.lambda > 0.0;
    let traces: Vec<ForwardTrace> = batch
        .par_iter()
        .map(|s| model::forward(&s.x, &s.mask, params, with_decoder))
        .collect::<Result<_, _>>()?;
    let labels: Vec<Label> = batch.iter().map(|s| s.label).collect();
    let probs: Vec<[f64; 2]> = traces.iter().map(|t| t.probs).collect();
    let (bce, bce_grads) = dml::loss_bce_weighted(&probs, &labels, [1.0, cfg.class_weight_flame])?;

    let (rec, rec_grads) = if with_decoder {
        let xs: Vec<Vec<f64>> = batch.iter().map(|s| s.x.clone()).collect();
        let xh: Vec<Vec<f64>> = traces
            .iter()
            .map(|t| t.reconstruction().map(<[f64]>::to_vec).unwrap_or_default())
            .collect();
        let (v, g) = dml::loss_rec_per_pixel(&xs, &xh)?;
        (v, Some(g))
    } else {
        (0.0, None)
    };

    let dim = cfg.c_d;
    let active = dml_active(hyper);
    let es: Vec<Vec<f64>> = traces.iter().map(|t| t.embedding.0.clone()).collect();
    if active && protos.is_none() {
        *protos = PrototypePair::from_class_means(&es, &labels);
    }
    let att: Vec<AttentionWeights> = traces
        .iter()
        .map(|t| match (&t.attention, cfg.use_attention) {
            (Some(a), true) => a.clone(),
            _ => AttentionWeights::ones(dim),
        })
        .collect();
    let a_tl: Vec<Vec<f64>> = att.iter().map(|a| a.tl.clone()).collect();
    let a_cl: Vec<Vec<f64>> = att.iter().map(|a| a.cl.clone()).collect();
    let a_cos: Vec<Vec<f64>> = att.iter().map(|a| a.cos.clone()).collect();

    let (mut tl, mut cl, mut cos) = (None, None, None);
    if let (true, Some(p)) = (active, protos.as_ref()) {
        if hyper.gamma1 > 0.0 {
            tl = Some(dml::loss_triplet(&es, &labels, p, &a_tl, hyper.margin)?);
        }
        if hyper.gamma3 > 0.0 {
            cl = Some(dml::loss_center(&es, &labels, p, &a_cl)?);
        }
        if hyper.gamma2 > 0.0 {
            cos = Some(dml::loss_cosine(&es, &labels, p, &a_cos)?);
        }
    }
    let metric_terms = tl.is_some() || cl.is_some() || cos.is_some();
    let breakdown = dml::total_loss(
        LossComponents {
            batch_size: batch.len(),
            bce,
            rec,
            tl,
            cl,
            cos,
        },
        hyper,
        dim,
    )?;

    let upstreams: Vec<Upstream> = (0..batch.len())
        .map(|i| Upstream {
            embedding: metric_terms.then(|| breakdown.grads_e[i].clone()),
            reconstruction: rec_grads
                .as_ref()
                .map(|g| g[i].iter().map(|v| hyper.lambda * v).collect()),
            logits: bce_grads[i],
            attention: (metric_terms && cfg.use_attention).then(|| {
                [
                    breakdown.grads_a[0][i].clone(),
                    breakdown.grads_a[1][i].clone(),
                    breakdown.grads_a[2][i].clone(),
                ]
            }),
        })
        .collect();
    let per_sample: Vec<ModelParams> = traces
        .par_iter()
        .zip(upstreams.par_iter())
        .map(|(t, u)| model::backward(t, u, params))
        .collect::<Result<_, _>>()?;
    Ok(StepResult {
        breakdown,
        grads: sum_grads(params.zeros_like(), &per_sample),
    })
}

/// Trains from scratch. The dataset is balanced internally when needed.
pub fn train(cfg: &TrainConfig, ds: &LabeledDataset) -> Result<TrainOutput, PipelineError> {
    cfg.validate()?;
    if let Some(p) = ds.patches.iter().find(|p| p.size != cfg.patch_size) {
        return Err(PipelineError::InvalidConfig(format!(
            "dataset patch size {} differs from patch_size {}",
            p.size, cfg.patch_size
        )));
    }
    let (flame, noflame) = ds.class_counts();
    if flame == 0 || noflame == 0 {
        return Err(PipelineError::SingleClassDataset);
    }
    let balanced = if flame == noflame {
        ds.clone()
    } else {
        balance(ds, balance_seed(cfg.seed))?
    };

    let mut params = model::init_params(cfg.seed, &cfg.model_config())?;
    let mut velocity = params.zeros_like();
    let mut protos: Option<PrototypePair> = None;
    let mut log = Vec::new();
    let mut step_no = 0;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut rng = epoch_rng(cfg.seed, epoch);
        let order = epoch_order(balanced.len(), &mut rng);
        for idx in order.chunks(cfg.batch_size) {
            let batch = make_batch(&balanced, idx, &mut rng, cfg.use_lfe, cfg.lfe_dropout);
            let StepResult { breakdown, grads } = step(cfg, &params, &mut protos, &batch)?;
            if !breakdown.total.is_finite() {
                return Err(PipelineError::DivergenceDetected { step: step_no });
            }
            velocity.momentum_update(cfg.momentum, &grads);
            params.apply_sgd(&velocity, lr)?;
            if dml_active(&cfg.hyper) {
                if let Some(p) = &protos {
                    protos = Some(dml::update_prototypes(p, &breakdown.delta_c, &cfg.hyper)?);
                }
            }
            let (nf, nn) = protos.as_ref().map_or((0.0, 0.0), PrototypePair::norms);
            log.push(StepLog {
                step: step_no,
                epoch,
                lr,
                bce: breakdown.bce,
                rec: breakdown.rec,
                tl: breakdown.tl,
                cl: breakdown.cl,
                cos: breakdown.cos,
                total: breakdown.total,
                k: breakdown.k,
                k_prime: breakdown.k_prime,
                proto_norm_flame: nf,
                proto_norm_noflame: nn,
            });
            step_no += 1;
        }
    }
    // Without metric learning the representatives are plain class means.
    if !dml_active(&cfg.hyper) || protos.is_none() {
        protos = class_mean_prototypes(&params, ds)?;
    }
    Ok(TrainOutput {
        checkpoint: Checkpoint {
            params,
            prototypes: protos,
        },
        log,
    })
}
