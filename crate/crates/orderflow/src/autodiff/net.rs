//! Model parametrization: a shared MLP encoder with policy / flow heads and a
//! standalone log-Z scalar, or a tabular variant with one logit row per state.

use super::store::ParamStore;
use super::tape::{NodeId, Tape};
use super::LOGIT_CLIP;
use crate::env::{Env, State};
use crate::error::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    LeakyRelu,
}

impl Activation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "leaky-relu" => Ok(Activation::LeakyRelu),
            other => Err(Error::config(format!("unknown activation `{other}`"))),
        }
    }
    pub fn name(&self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::LeakyRelu => "leaky-relu",
        }
    }
}

const LEAKY_SLOPE: f64 = 0.01;

/// Architecture description. Head widths match the environment's maximal
/// action counts; the flow head is a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct NetSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub pf_width: usize,
    pub pb_width: usize,
    pub tabular: bool,
    /// Number of state rows in tabular mode.
    pub table_rows: usize,
    pub logz_init: f64,
}

impl NetSpec {
    /// Compact one-line form stored in checkpoint headers.
    pub fn descriptor(&self) -> String {
        if self.tabular {
            format!(
                "tabular:rows={},pf={},pb={},logz={}",
                self.table_rows, self.pf_width, self.pb_width, self.logz_init
            )
        } else {
            let hidden = self
                .hidden
                .iter()
                .map(|h| h.to_string())
                .collect::<Vec<_>>()
                .join(";");
            format!(
                "mlp:input={},hidden={},act={},pf={},pb={},logz={}",
                self.input,
                hidden,
                self.activation.name(),
                self.pf_width,
                self.pb_width,
                self.logz_init
            )
        }
    }
}

/// Tape node ids of one state's head evaluation.
#[derive(Debug, Clone, Copy)]
pub struct Heads {
    pub pf: NodeId,
    pub pb: NodeId,
    pub flow: NodeId,
}

/// Plain values of one state's head evaluation (sampling paths).
#[derive(Debug, Clone)]
pub struct HeadValues {
    pub pf: Vec<f64>,
    pub pb: Vec<f64>,
    pub flow: f64,
}

/// The learnable sampler: parameters plus the layout to interpret them.
#[derive(Debug, Clone)]
pub struct FlowModel {
    spec: NetSpec,
    pub params: ParamStore,
}

impl FlowModel {
    /// Build a model for an environment. `hidden` empty plus `tabular` true
    /// selects the tabular parametrization (enumerable environments only).
    pub fn for_env(
        env: &Env,
        tabular: bool,
        hidden: Vec<usize>,
        activation: Activation,
        logz_init: f64,
        seed: u64,
    ) -> Result<Self> {
        let pf_width = env.forward_width();
        let pb_width = env.backward_width();
        let spec = if tabular {
            NetSpec {
                input: 0,
                hidden: Vec::new(),
                activation,
                pf_width,
                pb_width,
                tabular: true,
                table_rows: env.state_count()?,
                logz_init,
            }
        } else {
            NetSpec {
                input: feature_width(env),
                hidden,
                activation,
                pf_width,
                pb_width,
                tabular: false,
                table_rows: 0,
                logz_init,
            }
        };
        Ok(Self::new(spec, seed))
    }

    pub fn new(spec: NetSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamStore::builder();
        if spec.tabular {
            b = b
                .slice("pf.table", vec![0.0; spec.table_rows * spec.pf_width])
                .slice("pb.table", vec![0.0; spec.table_rows * spec.pb_width])
                .slice("flow.table", vec![0.0; spec.table_rows]);
        } else {
            let mut widths = vec![spec.input];
            widths.extend_from_slice(&spec.hidden);
            for i in 1..widths.len() {
                let (fan_in, fan_out) = (widths[i - 1], widths[i]);
                b = b
                    .slice(&format!("enc.w{}", i - 1), gaussian(&mut rng, fan_out * fan_in, fan_in))
                    .slice(&format!("enc.b{}", i - 1), vec![0.0; fan_out]);
            }
            let enc_out = *widths.last().expect("at least the input layer");
            for (name, width) in [
                ("pf", spec.pf_width),
                ("pb", spec.pb_width),
                ("flow", 1usize),
            ] {
                b = b
                    .slice(&format!("{name}.w"), gaussian(&mut rng, width * enc_out, enc_out))
                    .slice(&format!("{name}.b"), vec![0.0; width]);
            }
        }
        let params = b.slice("logz", vec![spec.logz_init]).build();
        FlowModel { spec, params }
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn log_z(&self) -> f64 {
        self.params.slice("logz").expect("logz slice")[0]
    }

    pub fn log_z_node(&self, tape: &mut Tape) -> NodeId {
        let id = tape
            .param_slice(&self.params, "logz")
            .expect("logz slice exists");
        tape.index(id, 0)
    }

    /// Record head evaluation for one state on the tape.
    pub fn heads_tape(&self, tape: &mut Tape, env: &Env, s: &State) -> Heads {
        if self.spec.tabular {
            let row = env.state_index(s);
            let pf_r = self.params.range("pf.table").expect("pf table");
            let pb_r = self.params.range("pb.table").expect("pb table");
            let fl_r = self.params.range("flow.table").expect("flow table");
            let pf = tape.param(&self.params, pf_r.start + row * self.spec.pf_width, self.spec.pf_width);
            let pb = tape.param(&self.params, pb_r.start + row * self.spec.pb_width, self.spec.pb_width);
            let fl = tape.param(&self.params, fl_r.start + row, 1);
            let pf = tape.clamp(pf, -LOGIT_CLIP, LOGIT_CLIP);
            let pb = tape.clamp(pb, -LOGIT_CLIP, LOGIT_CLIP);
            let fl = tape.clamp(fl, -LOGIT_CLIP, LOGIT_CLIP);
            let flow = tape.index(fl, 0);
            Heads { pf, pb, flow }
        } else {
            let feats = featurize(env, s);
            let mut h = tape.constant(feats);
            let mut width = self.spec.input;
            for (i, &out) in self.spec.hidden.iter().enumerate() {
                let w = tape
                    .param_slice(&self.params, &format!("enc.w{i}"))
                    .expect("encoder weight");
                let b = tape
                    .param_slice(&self.params, &format!("enc.b{i}"))
                    .expect("encoder bias");
                let z = tape.affine(w, b, h, out, width);
                h = match self.spec.activation {
                    Activation::Relu => tape.relu(z),
                    Activation::LeakyRelu => tape.leaky_relu(z, LEAKY_SLOPE),
                };
                width = out;
            }
            let head = |tape: &mut Tape, name: &str, rows: usize| -> NodeId {
                let w = tape
                    .param_slice(&self.params, &format!("{name}.w"))
                    .expect("head weight");
                let b = tape
                    .param_slice(&self.params, &format!("{name}.b"))
                    .expect("head bias");
                let y = tape.affine(w, b, h, rows, width);
                tape.clamp(y, -LOGIT_CLIP, LOGIT_CLIP)
            };
            let pf = head(tape, "pf", self.spec.pf_width);
            let pb = head(tape, "pb", self.spec.pb_width);
            let fl = head(tape, "flow", 1);
            let flow = tape.index(fl, 0);
            Heads { pf, pb, flow }
        }
    }

    /// Plain head evaluation without a tape (sampling, ranking, diagnostics).
    /// Uses the same arithmetic as the tape path, so values agree bit-exactly.
    pub fn heads(&self, env: &Env, s: &State) -> HeadValues {
        if self.spec.tabular {
            let row = env.state_index(s);
            let clip = |v: f64| v.clamp(-LOGIT_CLIP, LOGIT_CLIP);
            let pf_r = self.params.range("pf.table").expect("pf table");
            let pb_r = self.params.range("pb.table").expect("pb table");
            let fl_r = self.params.range("flow.table").expect("flow table");
            let vals = self.params.values();
            let pf = vals[pf_r.start + row * self.spec.pf_width..]
                .iter()
                .take(self.spec.pf_width)
                .map(|&v| clip(v))
                .collect();
            let pb = vals[pb_r.start + row * self.spec.pb_width..]
                .iter()
                .take(self.spec.pb_width)
                .map(|&v| clip(v))
                .collect();
            HeadValues {
                pf,
                pb,
                flow: clip(vals[fl_r.start + row]),
            }
        } else {
            let mut h = featurize(env, s);
            let mut width = self.spec.input;
            for (i, &out) in self.spec.hidden.iter().enumerate() {
                let w = self.params.slice(&format!("enc.w{i}")).expect("weight");
                let b = self.params.slice(&format!("enc.b{i}")).expect("bias");
                let mut y = Vec::with_capacity(out);
                for r in 0..out {
                    let row = &w[r * width..(r + 1) * width];
                    let mut acc = 0.0;
                    for (wi, xi) in row.iter().zip(h.iter()) {
                        acc += wi * xi;
                    }
                    let z = b[r] + acc;
                    y.push(match self.spec.activation {
                        Activation::Relu => z.max(0.0),
                        Activation::LeakyRelu => {
                            if z >= 0.0 {
                                z
                            } else {
                                LEAKY_SLOPE * z
                            }
                        }
                    });
                }
                h = y;
                width = out;
            }
            let head = |name: &str, rows: usize| -> Vec<f64> {
                let w = self.params.slice(&format!("{name}.w")).expect("weight");
                let b = self.params.slice(&format!("{name}.b")).expect("bias");
                (0..rows)
                    .map(|r| {
                        let row = &w[r * width..(r + 1) * width];
                        let mut acc = 0.0;
                        for (wi, xi) in row.iter().zip(h.iter()) {
                            acc += wi * xi;
                        }
                        (b[r] + acc).clamp(-LOGIT_CLIP, LOGIT_CLIP)
                    })
                    .collect()
            };
            let flow = head("flow", 1)[0];
            HeadValues {
                pf: head("pf", self.spec.pf_width),
                pb: head("pb", self.spec.pb_width),
                flow,
            }
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f64> {
    // Box-Muller with He scaling.
    let scale = (2.0 / fan_in.max(1) as f64).sqrt();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        out.push(scale * r * theta.cos());
        if out.len() < n {
            out.push(scale * r * theta.sin());
        }
    }
    out
}

/// One-hot feature width for an environment.
pub fn feature_width(env: &Env) -> usize {
    let d = env.descriptor();
    match d.kind {
        crate::env::EnvKind::HyperGrid | crate::env::EnvKind::CosineGrid => {
            d.grid_dim * d.side + 1
        }
        crate::env::EnvKind::SeqPrependAppend => d.max_len * (d.alphabet + 1) + 1,
    }
}

/// One-hot encoding: per grid coordinate, or per sequence position with an
/// "empty" channel; the final entry flags augmented terminal states.
pub fn featurize(env: &Env, s: &State) -> Vec<f64> {
    let d = env.descriptor();
    let mut out = vec![0.0; feature_width(env)];
    match d.kind {
        crate::env::EnvKind::HyperGrid | crate::env::EnvKind::CosineGrid => {
            for (dim, &c) in s.cells.iter().enumerate() {
                out[dim * d.side + c as usize] = 1.0;
            }
        }
        crate::env::EnvKind::SeqPrependAppend => {
            let channels = d.alphabet + 1;
            for pos in 0..d.max_len {
                let ch = if pos < s.cells.len() {
                    s.cells[pos] as usize
                } else {
                    d.alphabet
                };
                out[pos * channels + ch] = 1.0;
            }
        }
    }
    if s.terminal {
        *out.last_mut().expect("nonempty features") = 1.0;
    }
    out
}
