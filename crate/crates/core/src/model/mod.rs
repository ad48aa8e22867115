//! The intra-/inter-frame attention network.
//!
//! Per batch of frames the forward pass runs: convolution backbone, mean
//! pooling, frame-level positional encoding, intra-frame attention over the
//! timesteps of each frame, inter-frame attention across the batch, a
//! sigmoid-blended combination of the two, concatenation with the pooled
//! embedding plus multi-head attention, a gated fusion with the encoded
//! input, a mixture of experts and a linear classifier.
//!
//! Components can be switched off for ablations; a disabled block passes
//! one of its operands through unchanged:
//!
//! | disabled        | replacement                                  |
//! |-----------------|----------------------------------------------|
//! | `pe`            | `x_pe = x_bar`                               |
//! | `intra`         | `a_com = a_inter`                            |
//! | `inter`         | `a_com = a_intra`                            |
//! | `intra`+`inter` | `a_com = x_pe`                               |
//! | `gate`          | `o_gated = a_mul`                            |
//! | `moe`           | `o_moe = o_gated`                            |
//!
//! `focal` is carried here for convenience but only affects the loss.

pub mod blocks;
mod params;

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use params::{Param, ParamId, ParamStore};

use crate::data::Frame;
use crate::error::{Error, Result};
use crate::seed::{rng_for, streams};
use crate::tensor::{Tape, Var};
use blocks::{ExpertVars, IntraVars, InterVars, MultiHeadVars};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Intra,
    Inter,
    Pe,
    Moe,
    Gate,
    Focal,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::Intra,
        Component::Inter,
        Component::Pe,
        Component::Moe,
        Component::Gate,
        Component::Focal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Intra => "intra",
            Component::Inter => "inter",
            Component::Pe => "pe",
            Component::Moe => "moe",
            Component::Gate => "gate",
            Component::Focal => "focal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.name() == s.trim())
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown component `{s}` (expected intra, inter, pe, moe, gate, focal)"
                ))
            })
    }
}

/// Set of switched-off components.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Disabled(BTreeSet<Component>);

impl Disabled {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn of(components: &[Component]) -> Self {
        Self(components.iter().copied().collect())
    }

    /// Parses a comma-separated list such as `intra,moe,gate`.
    pub fn parse_list(list: &str) -> Result<Self> {
        let mut set = BTreeSet::new();
        for part in list.split(',').filter(|p| !p.trim().is_empty()) {
            set.insert(Component::parse(part)?);
        }
        Ok(Self(set))
    }

    pub fn contains(&self, c: Component) -> bool {
        self.0.contains(&c)
    }

    pub fn enabled(&self, c: Component) -> bool {
        !self.contains(c)
    }
}

impl fmt::Display for Disabled {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = self.0.iter().map(|c| c.name()).collect();
        f.write_str(&names.join(","))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Samples per frame.
    pub window: usize,
    pub channels: usize,
    pub d_model: usize,
    pub heads: usize,
    pub experts: usize,
    pub classes: usize,
    pub dropout: f64,
    pub conv_blocks: usize,
    pub kernel: usize,
    pub disable: Disabled,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            window: 24,
            channels: 3,
            d_model: 128,
            heads: 8,
            experts: 8,
            classes: 6,
            dropout: 0.5,
            conv_blocks: 3,
            kernel: 5,
            disable: Disabled::none(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model < 2 {
            return fail(format!("d_model must be >= 2, got {}", self.d_model));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        if self.experts == 0 {
            return fail("at least one expert is required".into());
        }
        if self.classes < 2 {
            return fail(format!("classes must be >= 2, got {}", self.classes));
        }
        if self.kernel % 2 == 0 {
            return fail(format!("kernel width must be odd, got {}", self.kernel));
        }
        if self.window < self.kernel {
            return fail(format!(
                "window {} is shorter than the kernel width {}",
                self.window, self.kernel
            ));
        }
        if self.channels == 0 || self.conv_blocks == 0 {
            return fail("channels and conv_blocks must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    fn intra_hidden(&self) -> usize {
        (self.d_model / 2).max(1)
    }
}

#[derive(Debug, Clone)]
struct Layout {
    convs: Vec<(ParamId, ParamId)>,
    intra: [ParamId; 4],
    inter: [ParamId; 3],
    alpha: ParamId,
    att_proj: (ParamId, ParamId),
    mha: [ParamId; 5],
    gate: (ParamId, ParamId),
    experts: Vec<[ParamId; 4]>,
    moe_gate: ParamId,
    classifier: (ParamId, ParamId),
}

/// Intermediate values of one forward pass, as tape variables.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Tape variable for every parameter, indexed like the [`ParamStore`].
    pub params: Vec<Var>,
    pub features: Var,
    pub x_bar: Var,
    pub x_pe: Var,
    pub a_intra: Option<Var>,
    pub intra_weights: Option<Var>,
    pub a_inter: Option<Var>,
    pub inter_weights: Option<Var>,
    pub a_com: Var,
    pub x_att: Var,
    pub a_mul: Var,
    pub head_weights: Vec<Var>,
    pub gate: Option<Var>,
    /// What the gate interpolates against: the positionally encoded embedding.
    pub x_enhanced: Var,
    pub o_gated: Var,
    pub moe_weights: Option<Var>,
    pub o_moe: Var,
    pub logits: Var,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    layout: Layout,
}

impl Model {
    /// Builds the model and freshly initialized parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut rng = rng_for(seed, streams::INIT);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let k = config.kernel;

        let mut convs = Vec::with_capacity(config.conv_blocks);
        let mut c_in = config.channels;
        for i in 0..config.conv_blocks {
            let w = store.add_matrix(format!("conv{i}.weight"), &[k, c_in, d], k * c_in, &mut rng);
            let b = store.add_bias(format!("conv{i}.bias"), d);
            convs.push((w, b));
            c_in = d;
        }

        let ha = config.intra_hidden();
        let intra = [
            store.add_matrix("intra.w1", &[d, ha], d, &mut rng),
            store.add_bias("intra.b1", ha),
            store.add_matrix("intra.w2", &[ha, 1], ha, &mut rng),
            store.add_bias("intra.b2", 1),
        ];
        let inter = [
            store.add_matrix("inter.wq", &[d, d], d, &mut rng),
            store.add_matrix("inter.wk", &[d, d], d, &mut rng),
            store.add_matrix("inter.wv", &[d, d], d, &mut rng),
        ];
        let alpha = store.add("blend.alpha", crate::tensor::Tensor::zeros([1]), false);
        let att_proj = (
            store.add_matrix("concat.weight", &[2 * d, d], 2 * d, &mut rng),
            store.add_bias("concat.bias", d),
        );
        let mha = [
            store.add_matrix("mha.wq", &[d, d], d, &mut rng),
            store.add_matrix("mha.wk", &[d, d], d, &mut rng),
            store.add_matrix("mha.wv", &[d, d], d, &mut rng),
            store.add_matrix("mha.wo", &[d, d], d, &mut rng),
            store.add_bias("mha.bo", d),
        ];
        let gate = (
            store.add_matrix("gate.weight", &[d, d], d, &mut rng),
            store.add_bias("gate.bias", d),
        );
        let experts = (0..config.experts)
            .map(|i| {
                [
                    store.add_matrix(format!("expert{i}.w1"), &[d, d], d, &mut rng),
                    store.add_bias(format!("expert{i}.b1"), d),
                    store.add_matrix(format!("expert{i}.w2"), &[d, d], d, &mut rng),
                    store.add_bias(format!("expert{i}.b2"), d),
                ]
            })
            .collect();
        let moe_gate = store.add_matrix("moe.gate", &[d, config.experts], d, &mut rng);
        let classifier = (
            store.add_matrix("classifier.weight", &[d, config.classes], d, &mut rng),
            store.add_bias("classifier.bias", config.classes),
        );

        let layout = Layout {
            convs,
            intra,
            inter,
            alpha,
            att_proj,
            mha,
            gate,
            experts,
            moe_gate,
            classifier,
        };
        Ok((Self { config, layout }, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Stacks frames into a `[B, T, D]` input.
    pub fn batch_input(&self, tape: &mut Tape, frames: &[&Frame]) -> Result<Var> {
        let (t, d) = (self.config.window, self.config.channels);
        if frames.is_empty() {
            return Err(Error::Contract("forward needs at least one frame".into()));
        }
        let mut data = Vec::with_capacity(frames.len() * t * d);
        for f in frames {
            if f.window != t || f.channels != d {
                return Err(Error::Config(format!(
                    "frame of {}x{} does not match model input {t}x{d}",
                    f.window, f.channels
                )));
            }
            data.extend_from_slice(&f.data);
        }
        tape.constant([frames.len(), t, d], data)
    }

    /// Runs the network on one batch. Dropout after the backbone, after
    /// multi-head attention and after the mixture is active only when `training`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        frames: &[&Frame],
        training: bool,
        rng: &mut R,
    ) -> Result<ForwardTrace> {
        let input = self.batch_input(tape, frames)?;
        self.forward_input(tape, store, input, training, rng)
    }

    /// [`Model::forward`] on an already recorded `[B, T, D]` input variable.
    pub fn forward_input<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        input: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<ForwardTrace> {
        let params: Vec<Var> = store.iter().map(|p| tape.leaf(&p.tensor)).collect();
        self.forward_with(tape, &params, input, training, rng)
    }

    /// Forward pass on caller-provided parameter variables (in store order).
    pub fn forward_with<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        params: &[Var],
        input: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<ForwardTrace> {
        let cfg = &self.config;
        let off = |c| cfg.disable.contains(c);
        let v = |id: ParamId| params[id.0];
        let lay = &self.layout;
        let batch = tape.shape(input)[0];

        let convs: Vec<(Var, Var)> = lay.convs.iter().map(|&(w, b)| (v(w), v(b))).collect();
        let features = blocks::backbone(tape, input, &convs)?;
        let features = tape.dropout(features, cfg.dropout, training, rng)?;
        let x_bar = blocks::pool_frames(tape, features)?;

        let x_pe = if off(Component::Pe) {
            x_bar
        } else {
            let pe = blocks::positional_encoding(batch, cfg.d_model);
            let pe = tape.leaf(&pe);
            tape.add(x_bar, pe)?
        };

        let (a_intra, intra_weights) = if off(Component::Intra) {
            (None, None)
        } else {
            let [w1, b1, w2, b2] = lay.intra.map(v);
            let (a, w) = blocks::intra_frame_attention(tape, features, &IntraVars { w1, b1, w2, b2 })?;
            (Some(a), Some(w))
        };
        let (a_inter, inter_weights) = if off(Component::Inter) {
            (None, None)
        } else {
            let [wq, wk, wv] = lay.inter.map(v);
            let (a, w) = blocks::inter_frame_attention(tape, x_pe, &InterVars { wq, wk, wv })?;
            (Some(a), Some(w))
        };
        let a_com = match (a_inter, a_intra) {
            (Some(inter), Some(intra)) => blocks::combine_attention(tape, inter, intra, v(lay.alpha))?,
            (Some(inter), None) => inter,
            (None, Some(intra)) => intra,
            (None, None) => x_pe,
        };

        let [wq, wk, wv, wo, bo] = lay.mha.map(v);
        let (x_att, a_mul, head_weights) = blocks::multi_head_block(
            tape,
            x_bar,
            a_com,
            v(lay.att_proj.0),
            v(lay.att_proj.1),
            &MultiHeadVars { wq, wk, wv, wo, bo },
            cfg.heads,
        )?;
        let a_mul = tape.dropout(a_mul, cfg.dropout, training, rng)?;

        let x_enhanced = x_pe;
        let (o_gated, gate) = if off(Component::Gate) {
            (a_mul, None)
        } else {
            let (o, g) = blocks::gated_fusion(tape, a_mul, x_enhanced, x_att, v(lay.gate.0), v(lay.gate.1))?;
            (o, Some(g))
        };

        let (o_moe, moe_weights) = if off(Component::Moe) {
            (o_gated, None)
        } else {
            let experts: Vec<ExpertVars> = lay
                .experts
                .iter()
                .map(|e| {
                    let [w1, b1, w2, b2] = e.map(v);
                    ExpertVars { w1, b1, w2, b2 }
                })
                .collect();
            let (o, w) = blocks::moe_layer(tape, o_gated, &experts, v(lay.moe_gate))?;
            (o, Some(w))
        };
        let o_moe = tape.dropout(o_moe, cfg.dropout, training, rng)?;

        let logits = tape.matmul(o_moe, v(lay.classifier.0))?;
        let logits = tape.add(logits, v(lay.classifier.1))?;

        Ok(ForwardTrace {
            params: params.to_vec(),
            features,
            x_bar,
            x_pe,
            a_intra,
            intra_weights,
            a_inter,
            inter_weights,
            a_com,
            x_att,
            a_mul,
            head_weights,
            gate,
            x_enhanced,
            o_gated,
            moe_weights,
            o_moe,
            logits,
        })
    }

    /// Eval-mode logits `[B, C]` as a flat row-major vector.
    pub fn logits(&self, store: &ParamStore, frames: &[&Frame]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mut rng = rng_for(0, streams::DROPOUT);
        let trace = self.forward(&mut tape, store, frames, false, &mut rng)?;
        Ok(tape.value(trace.logits).to_vec())
    }
}

#[cfg(test)]
mod tests;
