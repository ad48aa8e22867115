//! Central-difference verification of every network block and the composed
//! model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::loss::{combined_loss, LossConfig};
use crate::model::blocks::{self, ExpertVars, IntraVars, InterVars, MultiHeadVars};
use crate::model::{Model, ModelConfig};
use crate::tensor::{gradcheck_many, OpKind, Tape, Tensor, Var, DEFAULT_EPS};

pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockResult {
    pub block: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub rows: Vec<BlockResult>,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &BlockResult> {
        self.rows.iter().filter(|r| !r.passed)
    }
}

/// The model the suite checks by default: 4 frames of 16×3 samples,
/// width 8, two heads, two experts.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        window: 16,
        channels: 3,
        d_model: 8,
        heads: 2,
        experts: 2,
        classes: 3,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

struct Ctx {
    rng: ChaCha8Rng,
    fault: Option<OpKind>,
}

impl Ctx {
    fn random(&mut self, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |_| self.rng.random_range(-1.0..1.0))
    }

    /// Checks `f` after contracting its output with a fixed random tensor.
    fn check<F>(&mut self, inputs: Vec<Tensor>, out_shape: &[usize], f: F) -> Result<f64>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let weights = self.random(out_shape);
        let fault = self.fault;
        gradcheck_many(
            |tape, vars| {
                if let Some(k) = fault {
                    tape.inject_fault(k);
                }
                let out = f(tape, vars)?;
                let w = tape.leaf(&weights);
                let prod = tape.mul(out, w)?;
                Ok(tape.sum(prod))
            },
            &inputs,
            DEFAULT_EPS,
        )
    }
}

/// Runs the suite for `cfg` on a batch of `batch` frames. `fault` corrupts
/// one backward rule on every tape, to show that the checks catch it.
pub fn run_suite(cfg: &ModelConfig, batch: usize, seed: u64, fault: Option<OpKind>) -> Result<SuiteReport> {
    cfg.validate()?;
    let mut cx = Ctx {
        rng: ChaCha8Rng::seed_from_u64(seed),
        fault,
    };
    let (b, t, c, d) = (batch, cfg.window, cfg.channels, cfg.d_model);
    let (k, n, heads, classes) = (cfg.kernel, cfg.experts, cfg.heads, cfg.classes);
    let mut rows = Vec::new();
    let mut push = |name: &str, err: f64| {
        rows.push(BlockResult {
            block: name.to_string(),
            max_rel_error: err,
            passed: err < TOLERANCE,
        })
    };

    let inputs = vec![cx.random(&[b, t, c]), cx.random(&[k, c, d]), cx.random(&[d])];
    let err = cx.check(inputs, &[b, t, d], |tape, v| blocks::backbone(tape, v[0], &[(v[1], v[2])]))?;
    push("conv backbone", err);

    let ha = (d / 2).max(1);
    let inputs = vec![
        cx.random(&[b, t, d]),
        cx.random(&[d, ha]),
        cx.random(&[ha]),
        cx.random(&[ha, 1]),
        cx.random(&[1]),
    ];
    let err = cx.check(inputs, &[b, d], |tape, v| {
        let p = IntraVars {
            w1: v[1],
            b1: v[2],
            w2: v[3],
            b2: v[4],
        };
        Ok(blocks::intra_frame_attention(tape, v[0], &p)?.0)
    })?;
    push("intra-frame attention", err);

    let inputs = vec![cx.random(&[b, d]), cx.random(&[d, d]), cx.random(&[d, d]), cx.random(&[d, d])];
    let err = cx.check(inputs, &[b, d], |tape, v| {
        let p = InterVars {
            wq: v[1],
            wk: v[2],
            wv: v[3],
        };
        Ok(blocks::inter_frame_attention(tape, v[0], &p)?.0)
    })?;
    push("inter-frame attention", err);

    let inputs = vec![cx.random(&[b, d]), cx.random(&[b, d]), cx.random(&[1])];
    let err = cx.check(inputs, &[b, d], |tape, v| blocks::combine_attention(tape, v[0], v[1], v[2]))?;
    push("attention blend", err);

    let inputs = vec![
        cx.random(&[b, d]),
        cx.random(&[b, d]),
        cx.random(&[2 * d, d]),
        cx.random(&[d]),
        cx.random(&[d, d]),
        cx.random(&[d, d]),
        cx.random(&[d, d]),
        cx.random(&[d, d]),
        cx.random(&[d]),
    ];
    let err = cx.check(inputs, &[b, d], |tape, v| {
        let p = MultiHeadVars {
            wq: v[4],
            wk: v[5],
            wv: v[6],
            wo: v[7],
            bo: v[8],
        };
        Ok(blocks::multi_head_block(tape, v[0], v[1], v[2], v[3], &p, heads)?.1)
    })?;
    push("concat + multi-head attention", err);

    let inputs = vec![
        cx.random(&[b, d]),
        cx.random(&[b, d]),
        cx.random(&[b, d]),
        cx.random(&[d, d]),
        cx.random(&[d]),
    ];
    let err = cx.check(inputs, &[b, d], |tape, v| {
        Ok(blocks::gated_fusion(tape, v[0], v[1], v[2], v[3], v[4])?.0)
    })?;
    push("gated fusion", err);

    let mut inputs = vec![cx.random(&[b, d]), cx.random(&[d, n])];
    for _ in 0..n {
        inputs.extend([cx.random(&[d, d]), cx.random(&[d]), cx.random(&[d, d]), cx.random(&[d])]);
    }
    let err = cx.check(inputs, &[b, d], |tape, v| {
        let experts: Vec<ExpertVars> = v[2..]
            .chunks(4)
            .map(|e| ExpertVars {
                w1: e[0],
                b1: e[1],
                w2: e[2],
                b2: e[3],
            })
            .collect();
        Ok(blocks::moe_layer(tape, v[0], &experts, v[1])?.0)
    })?;
    push("mixture of experts", err);

    let labels: Vec<usize> = (0..b).map(|i| i % classes).collect();
    let loss_cfg = LossConfig::default();
    let logits = cx.random(&[b, classes]);
    let err = cx.check(vec![logits], &[1], |tape, v| combined_loss(tape, v[0], &labels, &loss_cfg))?;
    push("combined loss", err);

    let (model, store) = Model::new(cfg.clone(), seed)?;
    let mut inputs: Vec<Tensor> = store.iter().map(|p| p.tensor.clone()).collect();
    // Move biases and the blend off zero so every path carries gradient.
    for t in &mut inputs {
        t.data_mut().iter_mut().for_each(|v| *v += cx.rng.random_range(-0.2..0.2));
    }
    inputs.push(cx.random(&[b, t, c]));
    let err = cx.check(inputs, &[1], |tape, v| {
        let (params, x) = v.split_at(v.len() - 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let trace = model.forward_with(tape, params, x[0], false, &mut rng)?;
        combined_loss(tape, trace.logits, &labels, &loss_cfg)
    })?;
    push("composed model", err);

    Ok(SuiteReport {
        rows,
        tolerance: TOLERANCE,
    })
}
