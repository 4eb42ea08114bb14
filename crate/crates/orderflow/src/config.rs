//! Run configuration: a flat `section.key = value` text format with `#`
//! comments. Every field has a default; unknown or duplicate keys are
//! rejected by name, and the resolved configuration can be echoed back out
//! and re-parsed to the identical value.

use crate::autodiff::Activation;
use crate::env::{Env, EnvDescriptor, EnvKind, NamedObjective, ObjectiveSpec};
use crate::error::{Error, Result};
use crate::loss::{LossConfig, LossKind, Pairing, PbMode};
use crate::train::TrainPlan;
use sha2::{Digest, Sha256};
use std::collections::HashMap;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub tabular: bool,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub logz_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            tabular: false,
            hidden: vec![256, 256],
            activation: Activation::Relu,
            logz_init: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub candidates: usize,
    pub rounds: usize,
    /// Points per face edge of the reference-front discretization.
    pub ref_resolution: usize,
    /// Das-Dennis lattice density for the R2 weight vectors.
    pub r2_density: usize,
    /// Hypervolume reference point; empty means the origin.
    pub hv_ref: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            candidates: 1280,
            rounds: 10,
            ref_resolution: 64,
            r2_density: 23,
            hv_ref: Vec::new(),
        }
    }
}

/// The resolved configuration of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub env: EnvDescriptor,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainPlan,
    pub eval: EvalConfig,
    pub seed: u64,
    pub out: String,
}

impl PartialEq for TrainPlan {
    fn eq(&self, other: &Self) -> bool {
        self.echo_kv() == other.echo_kv()
    }
}

impl PartialEq for LossConfig {
    fn eq(&self, other: &Self) -> bool {
        self.echo_kv() == other.echo_kv()
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            env: EnvDescriptor::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainPlan::default(),
            eval: EvalConfig::default(),
            seed: 0,
            out: "runs/out".to_string(),
        }
    }
}

trait EchoKv {
    fn echo_kv(&self) -> Vec<(String, String)>;
}

fn join<T: ToString>(v: &[T], sep: &str) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(sep)
}

impl EchoKv for EnvDescriptor {
    fn echo_kv(&self) -> Vec<(String, String)> {
        let objectives = match &self.objectives {
            ObjectiveSpec::GridPlateau => "plateau".to_string(),
            ObjectiveSpec::GridCosine => "cosine".to_string(),
            ObjectiveSpec::Bag => "bag".to_string(),
            ObjectiveSpec::NGrams(_) => "ngram".to_string(),
            ObjectiveSpec::Named(ns) => join(&ns.iter().map(|n| n.name()).collect::<Vec<_>>(), ","),
        };
        let grams = match &self.objectives {
            ObjectiveSpec::NGrams(gs) => gs.join(","),
            _ => String::new(),
        };
        vec![
            ("env.kind".into(), self.kind.to_string()),
            ("env.dimension".into(), self.grid_dim.to_string()),
            ("env.side".into(), self.side.to_string()),
            ("env.r0".into(), self.r0.to_string()),
            ("env.alphabet".into(), self.alphabet.to_string()),
            ("env.max_len".into(), self.max_len.to_string()),
            ("env.objectives".into(), objectives),
            ("env.grams".into(), grams),
            ("env.seed".into(), self.seed.to_string()),
            ("env.enum_cap".into(), self.enum_cap.to_string()),
        ]
    }
}

impl EchoKv for ModelConfig {
    fn echo_kv(&self) -> Vec<(String, String)> {
        vec![
            (
                "model.kind".into(),
                if self.tabular { "tabular" } else { "mlp" }.into(),
            ),
            ("model.hidden".into(), join(&self.hidden, ",")),
            ("model.activation".into(), self.activation.name().into()),
            ("model.logz_init".into(), self.logz_init.to_string()),
        ]
    }
}

impl EchoKv for LossConfig {
    fn echo_kv(&self) -> Vec<(String, String)> {
        vec![
            ("loss.kind".into(), self.kind.name().into()),
            (
                "loss.order_preserving".into(),
                self.order_preserving.to_string(),
            ),
            ("loss.lambda_op".into(), self.lambda_op.to_string()),
            ("loss.lambda_kl".into(), self.lambda_kl.to_string()),
            ("loss.lambda_subtb".into(), self.lambda_subtb.to_string()),
            ("loss.beta".into(), self.beta.to_string()),
            ("loss.pb".into(), self.pb.name().into()),
            ("loss.pairing".into(), self.pairing.name().into()),
            ("loss.epsilon".into(), self.epsilon.to_string()),
            ("loss.temperature".into(), self.temperature.to_string()),
            (
                "loss.preference".into(),
                self.preference
                    .as_ref()
                    .map(|w| join(w, ","))
                    .unwrap_or_default(),
            ),
        ]
    }
}

impl EchoKv for TrainPlan {
    fn echo_kv(&self) -> Vec<(String, String)> {
        vec![
            ("train.n_init".into(), self.n_init.to_string()),
            ("train.n_round".into(), self.n_round.to_string()),
            ("train.n_new".into(), self.n_new.to_string()),
            ("train.n_off".into(), self.n_off.to_string()),
            ("train.n_off_per".into(), self.n_off_per.to_string()),
            ("train.batch_size".into(), self.batch_size.to_string()),
            ("train.alpha1".into(), self.alpha1.to_string()),
            ("train.alpha2".into(), self.alpha2.to_string()),
            ("train.prt".into(), self.prt.to_string()),
            (
                "train.replay_capacity".into(),
                self.replay_capacity.to_string(),
            ),
            ("train.warmup".into(), self.warmup.to_string()),
            (
                "train.replay_resample".into(),
                self.replay_resample.to_string(),
            ),
            (
                "train.tau".into(),
                self.tau.map(|t| t.to_string()).unwrap_or_default(),
            ),
            ("train.lr".into(), self.lr.to_string()),
            ("train.lr_logz".into(), self.lr_logz.to_string()),
            (
                "train.grad_clip".into(),
                self.grad_clip.map(|c| c.to_string()).unwrap_or_default(),
            ),
            (
                "train.checkpoint_every".into(),
                self.checkpoint_every.to_string(),
            ),
            (
                "train.recent_window".into(),
                self.recent_window.to_string(),
            ),
            ("train.l1_window".into(), self.l1_window.to_string()),
        ]
    }
}

impl EchoKv for EvalConfig {
    fn echo_kv(&self) -> Vec<(String, String)> {
        vec![
            ("eval.candidates".into(), self.candidates.to_string()),
            ("eval.rounds".into(), self.rounds.to_string()),
            (
                "eval.ref_resolution".into(),
                self.ref_resolution.to_string(),
            ),
            ("eval.r2_density".into(), self.r2_density.to_string()),
            ("eval.hv_ref".into(), join(&self.hv_ref, ",")),
        ]
    }
}

impl RunConfig {
    /// Canonical text form listing every resolved field.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.all_kv() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    fn all_kv(&self) -> Vec<(String, String)> {
        let mut kv = self.env.echo_kv();
        kv.extend(self.model.echo_kv());
        kv.extend(self.loss.echo_kv());
        kv.extend(self.train.echo_kv());
        kv.extend(self.eval.echo_kv());
        kv.push(("run.seed".into(), self.seed.to_string()));
        kv.push(("run.out".into(), self.out.clone()));
        kv
    }

    /// Short content hash of the canonical echo, stamped into output files.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.echo().as_bytes());
        let digest = h.finalize();
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut seen: HashMap<String, String> = HashMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if seen.insert(key.clone(), value).is_some() {
                return Err(Error::config(format!("duplicate key `{key}`")));
            }
        }
        Self::from_kv(seen)
    }

    fn from_kv(mut kv: HashMap<String, String>) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut take = |key: &str| kv.remove(key);

        // environment
        if let Some(v) = take("env.kind") {
            cfg.env.kind = match v.as_str() {
                "hypergrid" => EnvKind::HyperGrid,
                "cosine-grid" => EnvKind::CosineGrid,
                "seq-prepend-append" => EnvKind::SeqPrependAppend,
                other => return Err(Error::config(format!("unknown env.kind `{other}`"))),
            };
        }
        if let Some(v) = take("env.dimension") {
            cfg.env.grid_dim = parse_num(&v, "env.dimension")?;
        }
        if let Some(v) = take("env.side") {
            cfg.env.side = parse_num(&v, "env.side")?;
        }
        if let Some(v) = take("env.r0") {
            cfg.env.r0 = parse_num(&v, "env.r0")?;
        }
        if let Some(v) = take("env.alphabet") {
            cfg.env.alphabet = parse_num(&v, "env.alphabet")?;
        }
        if let Some(v) = take("env.max_len") {
            cfg.env.max_len = parse_num(&v, "env.max_len")?;
        }
        if let Some(v) = take("env.seed") {
            cfg.env.seed = parse_num(&v, "env.seed")?;
        }
        if let Some(v) = take("env.enum_cap") {
            cfg.env.enum_cap = parse_num(&v, "env.enum_cap")?;
        }
        let grams = take("env.grams");
        let objectives = take("env.objectives");
        cfg.env.objectives = match objectives.as_deref() {
            None | Some("") => default_objectives(cfg.env.kind),
            Some("plateau") => ObjectiveSpec::GridPlateau,
            Some("cosine") => ObjectiveSpec::GridCosine,
            Some("bag") => ObjectiveSpec::Bag,
            Some("ngram") => {
                let g = grams.clone().unwrap_or_default();
                let list: Vec<String> = g
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect();
                if list.is_empty() {
                    return Err(Error::config(
                        "env.objectives = ngram requires env.grams",
                    ));
                }
                ObjectiveSpec::NGrams(list)
            }
            Some(names) => {
                let list: Result<Vec<NamedObjective>> = names
                    .split(',')
                    .map(|s| NamedObjective::parse(s.trim()))
                    .collect();
                ObjectiveSpec::Named(list?)
            }
        };
        if matches!(cfg.env.objectives, ObjectiveSpec::NGrams(_)) {
            // grams consumed above
        } else if let Some(g) = grams {
            if !g.is_empty() {
                return Err(Error::config(
                    "env.grams is only meaningful with env.objectives = ngram",
                ));
            }
        }

        // model
        if let Some(v) = take("model.kind") {
            cfg.model.tabular = match v.as_str() {
                "tabular" => true,
                "mlp" => false,
                other => return Err(Error::config(format!("unknown model.kind `{other}`"))),
            };
        }
        if let Some(v) = take("model.hidden") {
            cfg.model.hidden = parse_list(&v, "model.hidden")?;
        }
        if let Some(v) = take("model.activation") {
            cfg.model.activation = Activation::parse(&v)?;
        }
        if let Some(v) = take("model.logz_init") {
            cfg.model.logz_init = parse_num(&v, "model.logz_init")?;
        }

        // loss
        if let Some(v) = take("loss.kind") {
            cfg.loss.kind = LossKind::parse(&v)?;
        }
        if let Some(v) = take("loss.order_preserving") {
            cfg.loss.order_preserving = parse_bool(&v, "loss.order_preserving")?;
        }
        if let Some(v) = take("loss.lambda_op") {
            cfg.loss.lambda_op = parse_num(&v, "loss.lambda_op")?;
        }
        if let Some(v) = take("loss.lambda_kl") {
            cfg.loss.lambda_kl = parse_num(&v, "loss.lambda_kl")?;
        }
        if let Some(v) = take("loss.lambda_subtb") {
            cfg.loss.lambda_subtb = parse_num(&v, "loss.lambda_subtb")?;
        }
        if let Some(v) = take("loss.beta") {
            cfg.loss.beta = parse_num(&v, "loss.beta")?;
        }
        if let Some(v) = take("loss.pb") {
            cfg.loss.pb = PbMode::parse(&v)?;
        }
        if let Some(v) = take("loss.pairing") {
            cfg.loss.pairing = Pairing::parse(&v)?;
        }
        if let Some(v) = take("loss.epsilon") {
            cfg.loss.epsilon = parse_num(&v, "loss.epsilon")?;
        }
        if let Some(v) = take("loss.temperature") {
            cfg.loss.temperature = parse_num(&v, "loss.temperature")?;
        }
        if let Some(v) = take("loss.preference") {
            cfg.loss.preference = if v.is_empty() {
                None
            } else {
                Some(parse_list(&v, "loss.preference")?)
            };
        }

        // train
        if let Some(v) = take("train.n_init") {
            cfg.train.n_init = parse_num(&v, "train.n_init")?;
        }
        if let Some(v) = take("train.n_round") {
            cfg.train.n_round = parse_num(&v, "train.n_round")?;
        }
        if let Some(v) = take("train.n_new") {
            cfg.train.n_new = parse_num(&v, "train.n_new")?;
        }
        if let Some(v) = take("train.n_off") {
            cfg.train.n_off = parse_num(&v, "train.n_off")?;
        }
        if let Some(v) = take("train.n_off_per") {
            cfg.train.n_off_per = parse_num(&v, "train.n_off_per")?;
        }
        if let Some(v) = take("train.batch_size") {
            cfg.train.batch_size = parse_num(&v, "train.batch_size")?;
        }
        if let Some(v) = take("train.alpha1") {
            cfg.train.alpha1 = parse_num(&v, "train.alpha1")?;
        }
        if let Some(v) = take("train.alpha2") {
            cfg.train.alpha2 = parse_num(&v, "train.alpha2")?;
        }
        if let Some(v) = take("train.prt") {
            cfg.train.prt = parse_bool(&v, "train.prt")?;
        }
        if let Some(v) = take("train.replay_capacity") {
            cfg.train.replay_capacity = parse_num(&v, "train.replay_capacity")?;
        }
        if let Some(v) = take("train.warmup") {
            cfg.train.warmup = parse_num(&v, "train.warmup")?;
        }
        if let Some(v) = take("train.replay_resample") {
            cfg.train.replay_resample = parse_bool(&v, "train.replay_resample")?;
        }
        if let Some(v) = take("train.tau") {
            cfg.train.tau = if v.is_empty() || v == "none" {
                None
            } else {
                Some(parse_num(&v, "train.tau")?)
            };
        }
        if let Some(v) = take("train.lr") {
            cfg.train.lr = parse_num(&v, "train.lr")?;
        }
        if let Some(v) = take("train.lr_logz") {
            cfg.train.lr_logz = parse_num(&v, "train.lr_logz")?;
        }
        if let Some(v) = take("train.grad_clip") {
            cfg.train.grad_clip = if v.is_empty() || v == "none" {
                None
            } else {
                Some(parse_num(&v, "train.grad_clip")?)
            };
        }
        if let Some(v) = take("train.checkpoint_every") {
            cfg.train.checkpoint_every = parse_num(&v, "train.checkpoint_every")?;
        }
        if let Some(v) = take("train.recent_window") {
            cfg.train.recent_window = parse_num(&v, "train.recent_window")?;
        }
        if let Some(v) = take("train.l1_window") {
            cfg.train.l1_window = parse_num(&v, "train.l1_window")?;
        }

        // eval
        if let Some(v) = take("eval.candidates") {
            cfg.eval.candidates = parse_num(&v, "eval.candidates")?;
        }
        if let Some(v) = take("eval.rounds") {
            cfg.eval.rounds = parse_num(&v, "eval.rounds")?;
        }
        if let Some(v) = take("eval.ref_resolution") {
            cfg.eval.ref_resolution = parse_num(&v, "eval.ref_resolution")?;
        }
        if let Some(v) = take("eval.r2_density") {
            cfg.eval.r2_density = parse_num(&v, "eval.r2_density")?;
        }
        if let Some(v) = take("eval.hv_ref") {
            cfg.eval.hv_ref = if v.is_empty() {
                Vec::new()
            } else {
                parse_list(&v, "eval.hv_ref")?
            };
        }

        // run
        if let Some(v) = take("run.seed") {
            cfg.seed = parse_num(&v, "run.seed")?;
        }
        if let Some(v) = take("run.out") {
            cfg.out = v;
        }

        if let Some(key) = kv.keys().next() {
            return Err(Error::config(format!("unknown key `{key}`")));
        }
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    /// Build and validate the environment this configuration describes.
    pub fn build_env(&self) -> Result<Env> {
        Env::new(self.env.clone())
    }

    /// Build the model for the environment; validates loss and plan too.
    pub fn build_model(&self, env: &Env) -> Result<crate::autodiff::FlowModel> {
        self.loss.validate(env)?;
        self.train.validate(env)?;
        crate::autodiff::FlowModel::for_env(
            env,
            self.model.tabular,
            self.model.hidden.clone(),
            self.model.activation,
            self.model.logz_init,
            self.seed,
        )
    }
}

fn default_objectives(kind: EnvKind) -> ObjectiveSpec {
    match kind {
        EnvKind::HyperGrid => ObjectiveSpec::GridPlateau,
        EnvKind::CosineGrid => ObjectiveSpec::GridCosine,
        EnvKind::SeqPrependAppend => ObjectiveSpec::NGrams(vec!["A".into()]),
    }
}

fn parse_num<T: std::str::FromStr>(v: &str, key: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("bad value `{v}` for `{key}`")))
}

fn parse_list<T: std::str::FromStr>(v: &str, key: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(s, key))
        .collect()
}

fn parse_bool(v: &str, key: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        other => Err(Error::config(format!("bad boolean `{other}` for `{key}`"))),
    }
}
