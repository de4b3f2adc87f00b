//! The finite-difference gradient suite over every differentiable operator
//! and over a small attention UNet end to end.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::models::{
    build_au_fc, build_model, model_grad_check, ArchitectureDescriptor, ModelKind,
};
use crate::nn::params::init_gate;
use crate::nn::{
    attention_gate, grad_check, GradCheckReport, Graph, NodeId, NormMode, ParamStore, Session,
    Tensor,
};

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Serialize)]
pub struct SuiteEntry {
    pub operator: String,
    pub trials: u64,
    pub max_rel_err: f64,
    /// Entries whose estimate came from a reduced step after the one-sided
    /// differences disagreed.
    pub refined: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub tolerance: f64,
    pub step: f64,
    pub entries: Vec<SuiteEntry>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }
}

fn rt(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn probe(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

type Builder = fn(&mut Graph<f64>, &[NodeId], &mut ChaCha8Rng) -> Result<NodeId>;

/// An operator check: input shapes and a scalar-valued composition.
struct OpCase {
    name: &'static str,
    shapes: &'static [&'static [usize]],
    build: Builder,
}

fn dot_out(g: &mut Graph<f64>, y: NodeId, rng: &mut ChaCha8Rng) -> Result<NodeId> {
    let p = probe(g.value(y).len(), rng);
    g.dot(y, &p)
}

fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "conv3x3",
            shapes: &[&[2, 2, 5, 5], &[3, 2, 3, 3], &[3]],
            build: |g, ids, r| {
                let y = g.conv2d(ids[0], ids[1], Some(ids[2]), 1, 1)?;
                dot_out(g, y, r)
            },
        },
        OpCase {
            name: "conv1x1",
            shapes: &[&[2, 3, 4, 4], &[2, 3, 1, 1], &[2]],
            build: |g, ids, r| {
                let y = g.conv2d(ids[0], ids[1], Some(ids[2]), 1, 0)?;
                dot_out(g, y, r)
            },
        },
        OpCase {
            name: "batch_norm_train",
            shapes: &[&[3, 2, 3, 3], &[2], &[2]],
            build: |g, ids, r| {
                let (y, _) = g.batch_norm(ids[0], ids[1], ids[2], NormMode::Train, None, 1e-5)?;
                dot_out(g, y, r)
            },
        },
        OpCase {
            name: "batch_norm_eval",
            shapes: &[&[3, 2, 3, 3], &[2], &[2]],
            build: |g, ids, r| {
                let (rm, rv) = ([0.3, -0.2], [1.7, 0.6]);
                let (y, _) = g.batch_norm(
                    ids[0],
                    ids[1],
                    ids[2],
                    NormMode::Eval,
                    Some((&rm, &rv)),
                    1e-5,
                )?;
                dot_out(g, y, r)
            },
        },
        OpCase {
            name: "relu",
            shapes: &[&[3, 7]],
            build: |g, ids, r| {
                let y = g.relu(ids[0]);
                dot_out(g, y, r)
            },
        },
        OpCase {
            name: "sigmoid",
            shapes: &[&[3, 7]],
            build: |g, ids, r| {
                let y = g.sigmoid(ids[0]);
                dot_out(g, y, r)
            },
        },
        OpCase {
            name: "max_pool2",
            shapes: &[&[2, 2, 4, 6]],
            build: |g, ids, r| {
                let y = g.max_pool2(ids[0])?;
                dot_out(g, y, r)
            },
        },
        OpCase {
            name: "up_conv2",
            shapes: &[&[2, 3, 3, 2], &[3, 2, 2, 2], &[2]],
            build: |g, ids, r| {
                let y = g.up_conv2(ids[0], ids[1], Some(ids[2]))?;
                dot_out(g, y, r)
            },
        },
        OpCase {
            name: "linear",
            shapes: &[&[3, 7], &[7, 4], &[4]],
            build: |g, ids, r| {
                let y = g.linear(ids[0], ids[1], Some(ids[2]))?;
                dot_out(g, y, r)
            },
        },
        OpCase {
            name: "concat+gate_mul+reshape",
            shapes: &[&[2, 2, 3, 3], &[2, 1, 3, 3], &[2, 1, 3, 3]],
            build: |g, ids, r| {
                let c = g.concat(ids[0], ids[1])?;
                let m = g.gate_mul(c, ids[2])?;
                let f = g.reshape(m, &[2, 27])?;
                dot_out(g, f, r)
            },
        },
        OpCase {
            name: "masked_mse+l2",
            shapes: &[&[2, 1, 4, 4], &[3, 3]],
            build: |g, ids, r| {
                let target = probe(32, r);
                let mask: Vec<bool> = (0..32).map(|i| i % 3 == 0).collect();
                let l = g.masked_mse(ids[0], &target, &mask)?;
                let p = g.weight_penalty(&[ids[1]], 0.3);
                g.add(l, p)
            },
        },
    ]
}

fn op_trial(case: &OpCase, trial: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
    let inputs: Vec<(String, Tensor<f64>)> = case
        .shapes
        .iter()
        .enumerate()
        .map(|(i, s)| (format!("in{i}"), rt(s, &mut rng)))
        .collect();
    let seed = rng.random::<u64>();
    grad_check(&inputs, FD_STEP, |g, ids| {
        (case.build)(g, ids, &mut ChaCha8Rng::seed_from_u64(seed))
    })
}

fn gate_trial(trial: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(2000 + trial);
    let mut store = ParamStore::<f64>::new();
    init_gate(&mut store, "g", 3, 2, 2, &mut rng)?;
    let names: Vec<String> = store.names().cloned().collect();
    // nonzero biases so every term of the gate is exercised
    for n in &names {
        let t = store.value(n)?.clone();
        store.get_mut(n)?.value = Tensor::from_fn(t.shape(), |_| rng.random_range(-0.5..0.5));
    }
    let mut inputs = vec![
        ("skip".to_string(), rt(&[2, 3, 3, 3], &mut rng)),
        ("gating".to_string(), rt(&[2, 2, 3, 3], &mut rng)),
    ];
    for n in &names {
        inputs.push((n.clone(), store.value(n)?.clone()));
    }
    let p = probe(2 * 3 * 9 + 2 * 9, &mut rng);
    grad_check(&inputs, FD_STEP, |graph, ids| {
        let mut s = Session::with_graph(std::mem::take(graph), &store, NormMode::Train, true);
        for (k, n) in names.iter().enumerate() {
            s.bind(n, ids[k + 2]);
        }
        let (xhat, u) = attention_gate(&mut s, ids[0], ids[1], "g")?;
        let f1 = s.graph.reshape(xhat, &[54])?;
        let f2 = s.graph.reshape(u, &[18])?;
        let a = s.graph.dot(f1, &p[..54])?;
        let b = s.graph.dot(f2, &p[54..])?;
        let l = s.graph.add(a, b)?;
        *graph = s.into_graph();
        Ok(l)
    })
}

fn model_trial(kind: ModelKind, trial: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(3000 + trial);
    let (desc, x) = if kind == ModelKind::AuFc {
        let desc = ArchitectureDescriptor {
            in_channels: 5,
            patch_size: 4,
            ..ArchitectureDescriptor::new(kind, 2, 2)
        };
        (desc, rt(&[3, 5], &mut rng))
    } else {
        let desc = ArchitectureDescriptor {
            in_channels: 3,
            patch_size: 8,
            ..ArchitectureDescriptor::new(kind, 2, 4)
        };
        (desc, rt(&[2, 3, 8, 8], &mut rng))
    };
    let model = if kind == ModelKind::AuFc {
        build_au_fc(desc, trial)?
    } else {
        build_model(desc, trial)?
    };
    model_grad_check(
        &desc,
        &model.params.cast::<f64>(),
        &x,
        rng.random(),
        FD_STEP,
    )
}

/// Run every check for `trials` seeds each. `progress` is called after each
/// operator completes.
pub fn gradient_suite(trials: u64, mut progress: impl FnMut(&SuiteEntry)) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut entries = Vec::new();
    let mut record =
        |name: &str, run: &mut dyn FnMut(u64) -> Result<GradCheckReport>| -> Result<()> {
            let (mut worst, mut refined) = (0.0f64, 0);
            for t in 0..trials {
                let r = run(t)?;
                worst = worst.max(r.max_rel_err());
                refined += r.refined();
            }
            let e = SuiteEntry {
                operator: name.to_string(),
                trials,
                max_rel_err: worst,
                refined,
                passed: worst < GRAD_TOLERANCE,
            };
            progress(&e);
            entries.push(e);
            Ok(())
        };
    for case in op_cases() {
        record(case.name, &mut |t| op_trial(&case, t))?;
    }
    record("attention_gate", &mut gate_trial)?;
    record("au_end_to_end", &mut |t| model_trial(ModelKind::Au, t))?;
    record("au_fc_end_to_end", &mut |t| model_trial(ModelKind::AuFc, t))?;
    Ok(SuiteReport {
        tolerance: GRAD_TOLERANCE,
        step: FD_STEP,
        entries,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_trial_of_each_operator_passes() {
        for case in op_cases() {
            let r = op_trial(&case, 0).unwrap();
            assert!(
                r.passes(GRAD_TOLERANCE),
                "{}: {}",
                case.name,
                r.max_rel_err()
            );
        }
        assert!(gate_trial(0).unwrap().passes(GRAD_TOLERANCE));
    }
}
