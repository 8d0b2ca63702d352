//! Finite-difference verification of the closed-form metric-learning derivatives.
//!
//! Nine targets are checked: the derivatives with respect to the embeddings
//! and the attention weights, and the prototype deltas, for each of the
//! triplet-center, center and cosine losses. Prototype deltas are averaged over
//! the active set rather than the batch, so they are compared against
//! `m / |active|` times the gradient of the active-set part of the loss.

use std::fmt::Write as _;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dml::{self, DmlError, PrototypePair, TermOutput};
use crate::imaging::Label;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    Triplet,
    Center,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wrt {
    Embedding,
    Attention,
    Prototypes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Target {
    pub loss: Loss,
    pub wrt: Wrt,
}

impl Target {
    pub const ALL: [Target; 9] = {
        use Loss::*;
        use Wrt::*;
        [
            Target { loss: Triplet, wrt: Embedding },
            Target { loss: Triplet, wrt: Attention },
            Target { loss: Triplet, wrt: Prototypes },
            Target { loss: Center, wrt: Embedding },
            Target { loss: Center, wrt: Attention },
            Target { loss: Center, wrt: Prototypes },
            Target { loss: Cosine, wrt: Embedding },
            Target { loss: Cosine, wrt: Attention },
            Target { loss: Cosine, wrt: Prototypes },
        ]
    };

    pub fn name(self) -> String {
        let loss = match self.loss {
            Loss::Triplet => "triplet",
            Loss::Center => "center",
            Loss::Cosine => "cosine",
        };
        let wrt = match self.wrt {
            Wrt::Embedding => "dL/de",
            Wrt::Attention => "dL/da",
            Wrt::Prototypes => "delta_C",
        };
        format!("{loss} {wrt}")
    }

    pub fn parse(s: &str) -> Option<Self> {
        let (loss, wrt) = s.split_once(':')?;
        let loss = match loss {
            "triplet" => Loss::Triplet,
            "center" => Loss::Center,
            "cosine" => Loss::Cosine,
            _ => return None,
        };
        let wrt = match wrt {
            "e" => Wrt::Embedding,
            "a" => Wrt::Attention,
            "c" => Wrt::Prototypes,
            _ => return None,
        };
        Some(Self { loss, wrt })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub trials: usize,
    pub seed: u64,
    pub dims: Vec<usize>,
    pub batch: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Corrupts the analytic value of one target, to exercise the failure path.
    pub fault: Option<Target>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            seed: 1,
            dims: vec![4, 64],
            batch: 8,
            step: 1e-5,
            tolerance: 1e-4,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetReport {
    pub target: Target,
    pub max_rel_err: f64,
    /// Embedding dimension at which the maximum occurred.
    pub worst_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub rows: Vec<TargetReport>,
    pub tolerance: f64,
    pub trials: usize,
    pub dims: Vec<usize>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.max_rel_err <= self.tolerance)
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "gradcheck: {} trials per dimension, C_d in {:?}, tolerance {:e}\n",
            self.trials, self.dims, self.tolerance
        );
        for r in &self.rows {
            let status = if r.max_rel_err <= self.tolerance { "ok" } else { "FAIL" };
            let _ = writeln!(
                out,
                "  {:<18} max rel err {:.3e} (C_d={})  {status}",
                r.target.name(),
                r.max_rel_err,
                r.worst_dim
            );
        }
        let _ = writeln!(out, "{}", if self.passed() { "PASS" } else { "FAIL" });
        out
    }
}

/// A random batch with every hinge and sign comfortably away from its switch point.
#[derive(Debug, Clone)]
pub struct Instance {
    pub e: Vec<Vec<f64>>,
    pub a: Vec<Vec<f64>>,
    pub labels: Vec<Label>,
    pub protos: PrototypePair,
    pub margin: f64,
}

const GAP: f64 = 1e-3;

impl Instance {
    pub fn random(rng: &mut ChaCha8Rng, m: usize, dim: usize) -> Self {
        loop {
            let vec = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect() };
            let mut labels: Vec<Label> = (0..m).map(|_| Label::from_index(rng.gen_range(0..2))).collect();
            labels[0] = Label::Flame;
            labels[m - 1] = Label::NoFlame;
            let inst = Self {
                e: (0..m).map(|_| vec(rng)).collect(),
                a: (0..m)
                    .map(|_| (0..dim).map(|_| rng.gen_range(0.1..1.0)).collect())
                    .collect(),
                protos: PrototypePair {
                    flame: vec(rng),
                    noflame: vec(rng),
                },
                labels,
                margin: rng.gen_range(0.0..2.0),
            };
            if inst.is_well_conditioned() {
                return inst;
            }
        }
    }

    fn is_well_conditioned(&self) -> bool {
        let norms_ok = self
            .e
            .iter()
            .chain([&self.protos.flame, &self.protos.noflame])
            .all(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt() > 0.1);
        if !norms_ok {
            return false;
        }
        let Ok(s) = dml::triplet_terms(&self.e, &self.labels, &self.protos, &self.a, self.margin) else {
            return false;
        };
        let Ok(b) = dml::cosine_brackets(&self.e, &self.labels, &self.protos, &self.a) else {
            return false;
        };
        s.iter().chain(&b).all(|v| v.abs() > GAP)
            && s.iter().any(|&v| v > 0.0)
            && b.iter().any(|&v| v < 0.0)
    }

    fn analytic(&self, loss: Loss) -> Result<TermOutput, DmlError> {
        match loss {
            Loss::Triplet => dml::loss_triplet(&self.e, &self.labels, &self.protos, &self.a, self.margin),
            Loss::Center => dml::loss_center(&self.e, &self.labels, &self.protos, &self.a),
            Loss::Cosine => dml::loss_cosine(&self.e, &self.labels, &self.protos, &self.a),
        }
    }

    fn value(&self, loss: Loss) -> Result<f64, DmlError> {
        Ok(self.analytic(loss)?.value)
    }

    /// Sum of per-sample terms over `active`, scaled like the full loss.
    fn active_value(&self, loss: Loss, active: &[bool]) -> Result<f64, DmlError> {
        let m = self.e.len() as f64;
        match loss {
            Loss::Triplet => {
                let s = dml::triplet_terms(&self.e, &self.labels, &self.protos, &self.a, self.margin)?;
                Ok(s.iter().zip(active).filter(|(_, &k)| k).map(|(v, _)| v).sum::<f64>() / (2.0 * m))
            }
            Loss::Cosine => {
                let b = dml::cosine_brackets(&self.e, &self.labels, &self.protos, &self.a)?;
                Ok(-b.iter().zip(active).filter(|(_, &k)| k).map(|(v, _)| v).sum::<f64>() / (2.0 * m))
            }
            Loss::Center => self.value(loss),
        }
    }

    fn active_set(&self, loss: Loss) -> Result<Vec<bool>, DmlError> {
        Ok(match loss {
            Loss::Triplet => dml::triplet_terms(&self.e, &self.labels, &self.protos, &self.a, self.margin)?
                .iter()
                .map(|&s| s > 0.0)
                .collect(),
            Loss::Cosine => dml::cosine_brackets(&self.e, &self.labels, &self.protos, &self.a)?
                .iter()
                .map(|&b| b < 0.0)
                .collect(),
            Loss::Center => vec![true; self.e.len()],
        })
    }
}

fn central_difference(
    inst: &Instance,
    h: f64,
    slot: impl Fn(&mut Instance) -> &mut f64,
    f: &impl Fn(&Instance) -> Result<f64, DmlError>,
) -> Result<f64, DmlError> {
    let mut plus = inst.clone();
    *slot(&mut plus) += h;
    let mut minus = inst.clone();
    *slot(&mut minus) -= h;
    Ok((f(&plus)? - f(&minus)?) / (2.0 * h))
}

/// `|x - y| / max(|x|, |y|)` in the Euclidean norm; zero when both vanish.
pub fn relative_error(x: &[f64], y: &[f64]) -> f64 {
    let diff = x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = x
        .iter()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
        .max(y.iter().map(|v| v * v).sum::<f64>().sqrt());
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

/// Analytic and numeric values for one target on one instance.
pub fn compare(inst: &Instance, target: Target, h: f64) -> Result<(Vec<f64>, Vec<f64>), DmlError> {
    let out = inst.analytic(target.loss)?;
    let (m, dim) = (inst.e.len(), inst.protos.dim());
    let loss = target.loss;
    let full = |x: &Instance| x.value(loss);
    let mut numeric = Vec::new();
    let analytic: Vec<f64> = match target.wrt {
        Wrt::Embedding => {
            for i in 0..m {
                for j in 0..dim {
                    numeric.push(central_difference(inst, h, |x| &mut x.e[i][j], &full)?);
                }
            }
            out.grad_e.concat()
        }
        Wrt::Attention => {
            for i in 0..m {
                for j in 0..dim {
                    numeric.push(central_difference(inst, h, |x| &mut x.a[i][j], &full)?);
                }
            }
            out.grad_a.concat()
        }
        Wrt::Prototypes => {
            let active = inst.active_set(loss)?;
            let k = active.iter().filter(|&&b| b).count();
            let scale = m as f64 / k.max(1) as f64;
            let restricted = |x: &Instance| x.active_value(loss, &active);
            for label in [Label::Flame, Label::NoFlame] {
                for j in 0..dim {
                    let d = central_difference(inst, h, |x| &mut x.protos.get_mut(label)[j], &restricted)?;
                    numeric.push(scale * d);
                }
            }
            [out.delta.flame, out.delta.noflame].concat()
        }
    };
    Ok((analytic, numeric))
}

pub fn run(cfg: &GradcheckConfig) -> Result<GradcheckReport, DmlError> {
    let mut rows: Vec<TargetReport> = Target::ALL
        .iter()
        .map(|&target| TargetReport {
            target,
            max_rel_err: 0.0,
            worst_dim: cfg.dims.first().copied().unwrap_or(0),
        })
        .collect();
    for &dim in &cfg.dims {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(dim as u64);
        for _ in 0..cfg.trials {
            let inst = Instance::random(&mut rng, cfg.batch, dim);
            for row in rows.iter_mut() {
                let (mut analytic, numeric) = compare(&inst, row.target, cfg.step)?;
                if cfg.fault == Some(row.target) {
                    analytic[0] = analytic[0] * 1.01 + 1e-3;
                }
                let err = relative_error(&analytic, &numeric);
                if err > row.max_rel_err || err.is_nan() {
                    row.max_rel_err = if err.is_nan() { f64::INFINITY } else { err };
                    row.worst_dim = dim;
                }
            }
        }
    }
    Ok(GradcheckReport {
        rows,
        tolerance: cfg.tolerance,
        trials: cfg.trials,
        dims: cfg.dims.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> GradcheckConfig {
        GradcheckConfig {
            trials: 5,
            ..GradcheckConfig::default()
        }
    }

    #[test]
    fn correct_build_passes() {
        let report = run(&quick()).unwrap();
        assert_eq!(report.rows.len(), 9);
        assert!(report.passed(), "{}", report.render());
    }

    #[test]
    fn injected_fault_fails() {
        for target in Target::ALL {
            let report = run(&GradcheckConfig {
                fault: Some(target),
                trials: 2,
                ..GradcheckConfig::default()
            })
            .unwrap();
            assert!(!report.passed(), "{}", target.name());
        }
    }

    #[test]
    fn instances_are_well_conditioned() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let inst = Instance::random(&mut rng, 8, 4);
            assert!(inst.is_well_conditioned());
        }
    }

    #[test]
    fn target_names_parse() {
        assert_eq!(
            Target::parse("cosine:c"),
            Some(Target {
                loss: Loss::Cosine,
                wrt: Wrt::Prototypes
            })
        );
        assert!(Target::parse("cosine:z").is_none());
        let report = run(&GradcheckConfig { trials: 1, ..quick() }).unwrap().render();
        for t in Target::ALL {
            assert!(report.contains(&t.name()));
        }
    }
}
