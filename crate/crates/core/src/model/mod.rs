//! Factorized-embedding transformer encoder with a single shared layer and
//! three pretraining heads.
//!
//! All weights of the encoder live in one layer (`encoder.*`) that is
//! applied `num_layers` times. Head tensors exist only for enabled
//! objectives, and the masked-LM decoder reuses the word embedding table.

mod params;

use std::collections::HashMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corruption::CorruptedExample;
use crate::numeric::{DType, Tape, Tensor, TensorError, Var, IGNORE_INDEX};

pub use params::ParameterSet;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    TokenIdOutOfRange { id: u32, vocab_size: usize },
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("tensor {name}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("duplicate tensor {0}")]
    DuplicateTensor(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which pretraining objectives are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Objectives {
    pub mlm: bool,
    pub sop: bool,
    pub wop: bool,
}

impl Default for Objectives {
    fn default() -> Self {
        Self::ALL
    }
}

impl Objectives {
    pub const ALL: Self = Self {
        mlm: true,
        sop: true,
        wop: true,
    };

    pub fn new(mlm: bool, sop: bool, wop: bool) -> Self {
        Self { mlm, sop, wop }
    }

    pub fn any(self) -> bool {
        self.mlm || self.sop || self.wop
    }

    /// `"MLM+SOP"` style label; `"none"` when nothing is enabled.
    pub fn label(self) -> String {
        let parts: Vec<&str> = [(self.mlm, "MLM"), (self.sop, "SOP"), (self.wop, "WOP")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

/// Per-objective multipliers applied when summing losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub mlm: f64,
    pub sop: f64,
    pub wop: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mlm: 1.0,
            sop: 1.0,
            wop: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlbertConfig {
    pub vocab_size: usize,
    pub embedding_size: usize,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    pub max_positions: usize,
    pub type_vocab_size: usize,
    pub seq_len: usize,
    pub dropout: f64,
    pub layer_norm_eps: f64,
    pub init_std: f64,
    pub dtype: DType,
    pub objectives: Objectives,
    pub loss_weights: LossWeights,
}

impl Default for AlbertConfig {
    fn default() -> Self {
        Self::base()
    }
}

impl AlbertConfig {
    pub fn base() -> Self {
        Self {
            vocab_size: 32000,
            embedding_size: 128,
            hidden_size: 768,
            num_layers: 12,
            num_heads: 12,
            ffn_size: 3072,
            max_positions: 512,
            type_vocab_size: 2,
            seq_len: 128,
            dropout: 0.1,
            layer_norm_eps: 1e-12,
            init_std: 0.02,
            dtype: DType::F32,
            objectives: Objectives::ALL,
            loss_weights: LossWeights::default(),
        }
    }

    pub fn large() -> Self {
        Self {
            hidden_size: 1024,
            num_heads: 16,
            ffn_size: 4096,
            ..Self::base()
        }
    }

    /// A test-scale configuration.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embedding_size: 8,
            hidden_size: 16,
            num_layers: 2,
            num_heads: 2,
            ffn_size: 64,
            max_positions: 16,
            seq_len: 16,
            ..Self::base()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads.max(1)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let extents = [
            ("vocab_size", self.vocab_size),
            ("embedding_size", self.embedding_size),
            ("hidden_size", self.hidden_size),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("ffn_size", self.ffn_size),
            ("max_positions", self.max_positions),
            ("type_vocab_size", self.type_vocab_size),
            ("seq_len", self.seq_len),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be at least 1")));
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(ModelError::InvalidConfig(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if self.seq_len > self.max_positions {
            return Err(ModelError::InvalidConfig(format!(
                "seq_len {} exceeds max_positions {}",
                self.seq_len, self.max_positions
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::InvalidConfig(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.layer_norm_eps >= 0.0 && self.layer_norm_eps.is_finite()) {
            return Err(ModelError::InvalidConfig("layer_norm_eps must be finite and non-negative".into()));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(ModelError::InvalidConfig("init_std must be positive".into()));
        }
        let w = self.loss_weights;
        if [w.mlm, w.sop, w.wop].iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(ModelError::InvalidConfig("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Embeddings,
    Encoder,
    Pooler,
    MlmHead,
    SopHead,
    WopHead,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

/// One entry of the parameter inventory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    init: Init,
    /// Position in the full inventory; keys the initializer stream so a
    /// tensor's initial value does not depend on which heads exist.
    slot: u64,
}

/// Tensor inventory for `cfg`, in canonical order. Heads of disabled
/// objectives are omitted.
pub fn schema(cfg: &AlbertConfig) -> Vec<ParamSpec> {
    use Init::*;
    use ParamGroup::*;
    let (v, e, h, f, p, tv) = (
        cfg.vocab_size,
        cfg.embedding_size,
        cfg.hidden_size,
        cfg.ffn_size,
        cfg.max_positions,
        cfg.type_vocab_size,
    );
    let full: Vec<(&'static str, Vec<usize>, ParamGroup, Init)> = vec![
        ("embeddings.word", vec![v, e], Embeddings, Normal),
        ("embeddings.position", vec![p, e], Embeddings, Normal),
        ("embeddings.token_type", vec![tv, e], Embeddings, Normal),
        ("embeddings.ln.gamma", vec![e], Embeddings, Ones),
        ("embeddings.ln.beta", vec![e], Embeddings, Zeros),
        ("embeddings.proj.weight", vec![e, h], Embeddings, Normal),
        ("embeddings.proj.bias", vec![h], Embeddings, Zeros),
        ("encoder.attn.query.weight", vec![h, h], Encoder, Normal),
        ("encoder.attn.query.bias", vec![h], Encoder, Zeros),
        ("encoder.attn.key.weight", vec![h, h], Encoder, Normal),
        ("encoder.attn.key.bias", vec![h], Encoder, Zeros),
        ("encoder.attn.value.weight", vec![h, h], Encoder, Normal),
        ("encoder.attn.value.bias", vec![h], Encoder, Zeros),
        ("encoder.attn.output.weight", vec![h, h], Encoder, Normal),
        ("encoder.attn.output.bias", vec![h], Encoder, Zeros),
        ("encoder.attn.ln.gamma", vec![h], Encoder, Ones),
        ("encoder.attn.ln.beta", vec![h], Encoder, Zeros),
        ("encoder.ffn.inner.weight", vec![h, f], Encoder, Normal),
        ("encoder.ffn.inner.bias", vec![f], Encoder, Zeros),
        ("encoder.ffn.outer.weight", vec![f, h], Encoder, Normal),
        ("encoder.ffn.outer.bias", vec![h], Encoder, Zeros),
        ("encoder.ffn.ln.gamma", vec![h], Encoder, Ones),
        ("encoder.ffn.ln.beta", vec![h], Encoder, Zeros),
        ("pooler.weight", vec![h, h], Pooler, Normal),
        ("pooler.bias", vec![h], Pooler, Zeros),
        ("mlm_head.dense.weight", vec![h, e], MlmHead, Normal),
        ("mlm_head.dense.bias", vec![e], MlmHead, Zeros),
        ("mlm_head.ln.gamma", vec![e], MlmHead, Ones),
        ("mlm_head.ln.beta", vec![e], MlmHead, Zeros),
        ("mlm_head.decoder_bias", vec![v], MlmHead, Zeros),
        ("sop_head.weight", vec![h, 2], SopHead, Normal),
        ("sop_head.bias", vec![2], SopHead, Zeros),
        ("wop_head.weight", vec![h, p], WopHead, Normal),
        ("wop_head.bias", vec![p], WopHead, Zeros),
    ];
    let o = cfg.objectives;
    full.into_iter()
        .enumerate()
        .filter(|(_, (_, _, group, _))| match group {
            MlmHead => o.mlm,
            SopHead => o.sop,
            WopHead => o.wop,
            _ => true,
        })
        .map(|(slot, (name, shape, group, init))| ParamSpec {
            name,
            shape,
            group,
            init,
            slot: slot as u64,
        })
        .collect()
}

/// Parameter totals per group.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub embeddings: usize,
    pub encoder: usize,
    pub pooler: usize,
    pub mlm_head: usize,
    pub sop_head: usize,
    pub wop_head: usize,
}

impl ParamCount {
    /// Embeddings, encoder and pooler.
    pub fn backbone(&self) -> usize {
        self.embeddings + self.encoder + self.pooler
    }

    pub fn heads(&self) -> usize {
        self.mlm_head + self.sop_head + self.wop_head
    }

    pub fn total(&self) -> usize {
        self.backbone() + self.heads()
    }
}

pub fn count_params(cfg: &AlbertConfig) -> ParamCount {
    let mut c = ParamCount::default();
    for spec in schema(cfg) {
        let n: usize = spec.shape.iter().product();
        let slot = match spec.group {
            ParamGroup::Embeddings => &mut c.embeddings,
            ParamGroup::Encoder => &mut c.encoder,
            ParamGroup::Pooler => &mut c.pooler,
            ParamGroup::MlmHead => &mut c.mlm_head,
            ParamGroup::SopHead => &mut c.sop_head,
            ParamGroup::WopHead => &mut c.wop_head,
        };
        *slot += n;
    }
    c
}

fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Weights from a normal distribution truncated at two standard
/// deviations, zero biases, unit layer-norm gains.
pub fn init_params(cfg: &AlbertConfig, seed: u64) -> Result<ParameterSet, ModelError> {
    cfg.validate()?;
    let mut set = ParameterSet::new();
    for spec in schema(cfg) {
        let n: usize = spec.shape.iter().product();
        let data = match spec.init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(spec.slot);
                (0..n).map(|_| truncated_normal(&mut rng, cfg.init_std)).collect()
            }
        };
        set.insert(spec.name, Tensor::new(spec.shape, data, cfg.dtype)?)?;
    }
    Ok(set)
}

/// Checks that `params` holds exactly the inventory of `cfg`.
pub fn check_params(params: &ParameterSet, cfg: &AlbertConfig) -> Result<(), ModelError> {
    let specs = schema(cfg);
    for spec in &specs {
        let t = params.tensor(spec.name)?;
        if t.shape() != spec.shape.as_slice() {
            return Err(ModelError::ShapeMismatch {
                name: spec.name.to_owned(),
                expected: spec.shape.clone(),
                found: t.shape().to_vec(),
            });
        }
    }
    if let Some(extra) = params.names().find(|n| !specs.iter().any(|s| s.name == *n)) {
        return Err(ModelError::InvalidConfig(format!("unexpected tensor {extra}")));
    }
    Ok(())
}

/// Loss and accuracy counts of one objective on one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveOutput {
    /// Mean cross-entropy over labeled positions; 0 when none are labeled.
    pub loss: f64,
    pub correct: usize,
    pub labeled: usize,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// Final encoder states `[B×T×H]`.
    pub hidden: Tensor,
    /// `[B×T×V]`
    pub mlm_logits: Option<Tensor>,
    /// `[B×2]`
    pub sop_logits: Option<Tensor>,
    /// `[B×T×P]`
    pub wop_logits: Option<Tensor>,
    pub mlm: Option<ObjectiveOutput>,
    pub sop: Option<ObjectiveOutput>,
    pub wop: Option<ObjectiveOutput>,
    /// Weighted sum of the enabled objective losses, in MLM, SOP, WOP order.
    pub total_loss: f64,
}

impl ForwardOutput {
    pub fn objectives(&self) -> [Option<&ObjectiveOutput>; 3] {
        [self.mlm.as_ref(), self.sop.as_ref(), self.wop.as_ref()]
    }
}

fn total_of(objs: [Option<&ObjectiveOutput>; 3]) -> f64 {
    let mut total = 0.0;
    for o in objs.into_iter().flatten() {
        total += o.weight * o.loss;
    }
    total
}

struct Inputs {
    b: usize,
    t: usize,
    ids: Vec<usize>,
    types: Vec<usize>,
    positions: Vec<usize>,
    keys: Vec<bool>,
    mlm: Vec<i64>,
    sop: Vec<i64>,
    wop: Vec<i64>,
}

impl Inputs {
    fn new(cfg: &AlbertConfig, batch: &[CorruptedExample]) -> Result<Self, ModelError> {
        let b = batch.len();
        let t = batch.first().map(CorruptedExample::seq_len).unwrap_or(0);
        if b == 0 || t == 0 {
            return Err(ModelError::InvalidBatch("empty batch".into()));
        }
        if t > cfg.max_positions {
            return Err(ModelError::InvalidBatch(format!(
                "sequence length {t} exceeds max_positions {}",
                cfg.max_positions
            )));
        }
        let mut inputs = Inputs {
            b,
            t,
            ids: Vec::with_capacity(b * t),
            types: Vec::with_capacity(b * t),
            positions: Vec::with_capacity(b * t),
            keys: Vec::with_capacity(b * t),
            mlm: Vec::with_capacity(b * t),
            sop: Vec::with_capacity(b),
            wop: Vec::with_capacity(b * t),
        };
        for (i, ex) in batch.iter().enumerate() {
            let lens = [
                ex.input_ids.len(),
                ex.token_type_ids.len(),
                ex.attention_mask.len(),
                ex.mlm_labels.len(),
                ex.wop_labels.len(),
            ];
            if lens.iter().any(|&l| l != t) {
                return Err(ModelError::InvalidBatch(format!(
                    "example {i} has field lengths {lens:?}, expected {t}"
                )));
            }
            for &id in &ex.input_ids {
                if id as usize >= cfg.vocab_size {
                    return Err(ModelError::TokenIdOutOfRange {
                        id,
                        vocab_size: cfg.vocab_size,
                    });
                }
                inputs.ids.push(id as usize);
            }
            for &ty in &ex.token_type_ids {
                if ty as usize >= cfg.type_vocab_size {
                    return Err(ModelError::InvalidBatch(format!("token type {ty} in example {i}")));
                }
                inputs.types.push(ty as usize);
            }
            inputs.positions.extend(0..t);
            inputs.keys.extend(ex.attention_mask.iter().map(|&m| m != 0));
            inputs.mlm.extend(&ex.mlm_labels);
            inputs.wop.extend(&ex.wop_labels);
            inputs.sop.push(ex.sop_label as i64);
        }
        Ok(inputs)
    }

    /// Attention mask over `[B·A × T × T]` scores: key `j` is visible iff
    /// it is not padding.
    fn score_mask(&self, heads: usize) -> Vec<bool> {
        let t = self.t;
        let mut mask = Vec::with_capacity(self.b * heads * t * t);
        for b in 0..self.b {
            let keys = &self.keys[b * t..(b + 1) * t];
            for _ in 0..heads * t {
                mask.extend_from_slice(keys);
            }
        }
        mask
    }
}

/// One forward computation recorded on a tape.
struct Graph<'a> {
    tape: Tape,
    cfg: &'a AlbertConfig,
    params: &'a ParameterSet,
    vars: HashMap<&'a str, Var>,
    track_grads: bool,
    rng: Option<&'a mut dyn RngCore>,
}

struct Heads {
    mlm_logits: Option<Var>,
    sop_logits: Option<Var>,
    wop_logits: Option<Var>,
    mlm: Option<ObjectiveOutput>,
    sop: Option<ObjectiveOutput>,
    wop: Option<ObjectiveOutput>,
    loss: Option<Var>,
}

impl<'a> Graph<'a> {
    fn new(
        params: &'a ParameterSet,
        cfg: &'a AlbertConfig,
        track_grads: bool,
        rng: Option<&'a mut dyn RngCore>,
    ) -> Self {
        Self {
            tape: Tape::new(),
            cfg,
            params,
            vars: HashMap::new(),
            track_grads,
            rng,
        }
    }

    fn param(&mut self, name: &'a str) -> Result<Var, ModelError> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self.params.tensor(name)?.clone();
        let v = if self.track_grads {
            self.tape.leaf(t.with_requires_grad(true))
        } else {
            self.tape.constant(t)
        };
        self.vars.insert(name, v);
        Ok(v)
    }

    fn dropout(&mut self, x: Var) -> Result<Var, ModelError> {
        let p = self.cfg.dropout;
        match &mut self.rng {
            Some(rng) => Ok(self.tape.dropout(x, p, true, &mut **rng)?),
            None => Ok(x),
        }
    }

    fn linear(&mut self, x: Var, weight: &'a str, bias: &'a str) -> Result<Var, ModelError> {
        let w = self.param(weight)?;
        let b = self.param(bias)?;
        let y = self.tape.matmul(x, w)?;
        Ok(self.tape.add_bias(y, b)?)
    }

    fn layer_norm(&mut self, x: Var, gamma: &'a str, beta: &'a str) -> Result<Var, ModelError> {
        let g = self.param(gamma)?;
        let b = self.param(beta)?;
        Ok(self.tape.layer_norm(x, g, b, self.cfg.layer_norm_eps)?)
    }

    /// `[B·T × H]` projected embeddings.
    fn embed(&mut self, inputs: &Inputs) -> Result<Var, ModelError> {
        let word = self.param("embeddings.word")?;
        let pos = self.param("embeddings.position")?;
        let ty = self.param("embeddings.token_type")?;
        let w = self.tape.gather_rows(word, &inputs.ids)?;
        let p = self.tape.gather_rows(pos, &inputs.positions)?;
        let t = self.tape.gather_rows(ty, &inputs.types)?;
        let x = self.tape.add(w, p)?;
        let x = self.tape.add(x, t)?;
        let x = self.layer_norm(x, "embeddings.ln.gamma", "embeddings.ln.beta")?;
        let x = self.dropout(x)?;
        self.linear(x, "embeddings.proj.weight", "embeddings.proj.bias")
    }

    /// `[B·T × H]` to `[B·A × T × d]`.
    fn split_heads(&mut self, x: Var, b: usize, t: usize) -> Result<Var, ModelError> {
        let (a, d) = (self.cfg.num_heads, self.cfg.head_dim());
        let x = self.tape.reshape(x, &[b, t, a, d])?;
        let x = self.tape.permute(x, &[0, 2, 1, 3])?;
        Ok(self.tape.reshape(x, &[b * a, t, d])?)
    }

    fn merge_heads(&mut self, x: Var, b: usize, t: usize) -> Result<Var, ModelError> {
        let (a, d) = (self.cfg.num_heads, self.cfg.head_dim());
        let x = self.tape.reshape(x, &[b, a, t, d])?;
        let x = self.tape.permute(x, &[0, 2, 1, 3])?;
        Ok(self.tape.reshape(x, &[b * t, a * d])?)
    }

    fn shared_layer(&mut self, h: Var, b: usize, t: usize, score_mask: &[bool]) -> Result<Var, ModelError> {
        let q = self.linear(h, "encoder.attn.query.weight", "encoder.attn.query.bias")?;
        let k = self.linear(h, "encoder.attn.key.weight", "encoder.attn.key.bias")?;
        let v = self.linear(h, "encoder.attn.value.weight", "encoder.attn.value.bias")?;
        let q = self.split_heads(q, b, t)?;
        let k = self.split_heads(k, b, t)?;
        let v = self.split_heads(v, b, t)?;
        let scores = self.tape.batch_matmul(q, k, true)?;
        let scores = self.tape.scale(scores, 1.0 / (self.cfg.head_dim() as f64).sqrt())?;
        let probs = self.tape.softmax(scores, Some(score_mask))?;
        let probs = self.dropout(probs)?;
        let ctx = self.tape.batch_matmul(probs, v, false)?;
        let ctx = self.merge_heads(ctx, b, t)?;
        let attn = self.linear(ctx, "encoder.attn.output.weight", "encoder.attn.output.bias")?;
        let attn = self.dropout(attn)?;
        let h = self.tape.add(h, attn)?;
        let h = self.layer_norm(h, "encoder.attn.ln.gamma", "encoder.attn.ln.beta")?;

        let f = self.linear(h, "encoder.ffn.inner.weight", "encoder.ffn.inner.bias")?;
        let f = self.tape.gelu(f)?;
        let f = self.linear(f, "encoder.ffn.outer.weight", "encoder.ffn.outer.bias")?;
        let f = self.dropout(f)?;
        let h = self.tape.add(h, f)?;
        self.layer_norm(h, "encoder.ffn.ln.gamma", "encoder.ffn.ln.beta")
    }

    fn encode(&mut self, inputs: &Inputs) -> Result<Var, ModelError> {
        let mask = inputs.score_mask(self.cfg.num_heads);
        let mut h = self.embed(inputs)?;
        for _ in 0..self.cfg.num_layers {
            h = self.shared_layer(h, inputs.b, inputs.t, &mask)?;
        }
        Ok(h)
    }

    fn objective(
        &mut self,
        logits: Var,
        labels: &[i64],
        weight: f64,
        losses: &mut Vec<Var>,
    ) -> Result<ObjectiveOutput, ModelError> {
        if labels.iter().all(|&l| l == IGNORE_INDEX) {
            return Ok(ObjectiveOutput {
                loss: 0.0,
                correct: 0,
                labeled: 0,
                weight,
            });
        }
        let (loss, ce) = self.tape.cross_entropy(logits, labels)?;
        losses.push(if weight == 1.0 { loss } else { self.tape.scale(loss, weight)? });
        Ok(ObjectiveOutput {
            loss: ce.loss,
            correct: ce.correct,
            labeled: ce.labeled,
            weight,
        })
    }

    fn heads(&mut self, h: Var, inputs: &Inputs) -> Result<Heads, ModelError> {
        let (o, w) = (self.cfg.objectives, self.cfg.loss_weights);
        let mut losses = Vec::new();
        let mut out = Heads {
            mlm_logits: None,
            sop_logits: None,
            wop_logits: None,
            mlm: None,
            sop: None,
            wop: None,
            loss: None,
        };
        if o.mlm {
            let x = self.linear(h, "mlm_head.dense.weight", "mlm_head.dense.bias")?;
            let x = self.tape.gelu(x)?;
            let x = self.layer_norm(x, "mlm_head.ln.gamma", "mlm_head.ln.beta")?;
            let word = self.param("embeddings.word")?;
            let decoder = self.tape.transpose(word)?;
            let bias = self.param("mlm_head.decoder_bias")?;
            let logits = self.tape.matmul(x, decoder)?;
            let logits = self.tape.add_bias(logits, bias)?;
            out.mlm = Some(self.objective(logits, &inputs.mlm, w.mlm, &mut losses)?);
            out.mlm_logits = Some(logits);
        }
        if o.sop {
            let cls: Vec<usize> = (0..inputs.b).map(|b| b * inputs.t).collect();
            let x = self.tape.gather_rows(h, &cls)?;
            let x = self.linear(x, "pooler.weight", "pooler.bias")?;
            let x = self.tape.tanh(x)?;
            let logits = self.linear(x, "sop_head.weight", "sop_head.bias")?;
            out.sop = Some(self.objective(logits, &inputs.sop, w.sop, &mut losses)?);
            out.sop_logits = Some(logits);
        }
        if o.wop {
            let logits = self.linear(h, "wop_head.weight", "wop_head.bias")?;
            out.wop = Some(self.objective(logits, &inputs.wop, w.wop, &mut losses)?);
            out.wop_logits = Some(logits);
        }
        let mut iter = losses.into_iter();
        if let Some(first) = iter.next() {
            let mut total = first;
            for l in iter {
                total = self.tape.add(total, l)?;
            }
            out.loss = Some(total);
        }
        Ok(out)
    }

    fn output(&self, h: Var, heads: &Heads, inputs: &Inputs) -> Result<ForwardOutput, ModelError> {
        let (b, t) = (inputs.b, inputs.t);
        let value3 = |v: Option<Var>| -> Result<Option<Tensor>, ModelError> {
            v.map(|v| {
                let x = self.tape.value(v);
                Ok(x.reshape(&[b, t, x.last_dim()])?)
            })
            .transpose()
        };
        let objs = [heads.mlm.as_ref(), heads.sop.as_ref(), heads.wop.as_ref()];
        Ok(ForwardOutput {
            hidden: self.tape.value(h).reshape(&[b, t, self.cfg.hidden_size])?,
            mlm_logits: value3(heads.mlm_logits)?,
            sop_logits: heads.sop_logits.map(|v| self.tape.value(v).clone()),
            wop_logits: value3(heads.wop_logits)?,
            mlm: heads.mlm,
            sop: heads.sop,
            wop: heads.wop,
            total_loss: total_of(objs),
        })
    }
}

/// Evaluation-mode forward pass (no dropout).
pub fn forward(
    params: &ParameterSet,
    cfg: &AlbertConfig,
    batch: &[CorruptedExample],
) -> Result<ForwardOutput, ModelError> {
    cfg.validate()?;
    let inputs = Inputs::new(cfg, batch)?;
    let mut g = Graph::new(params, cfg, false, None);
    let h = g.encode(&inputs)?;
    let heads = g.heads(h, &inputs)?;
    g.output(h, &heads, &inputs)
}

/// Forward pass plus gradients of the total loss with respect to every
/// parameter. Dropout is active iff `dropout_rng` is given.
pub fn loss_and_grads<'a>(
    params: &'a ParameterSet,
    cfg: &'a AlbertConfig,
    batch: &[CorruptedExample],
    dropout_rng: Option<&'a mut dyn RngCore>,
) -> Result<(ForwardOutput, ParameterSet), ModelError> {
    cfg.validate()?;
    let inputs = Inputs::new(cfg, batch)?;
    let mut g = Graph::new(params, cfg, true, dropout_rng);
    let h = g.encode(&inputs)?;
    let heads = g.heads(h, &inputs)?;
    let out = g.output(h, &heads, &inputs)?;
    let mut grads = params.zeros_like(cfg.dtype);
    if let Some(loss) = heads.loss {
        let tape_grads = g.tape.backward(loss)?;
        for (name, t) in grads.iter_mut() {
            if let Some(&v) = g.vars.get(name) {
                *t = tape_grads.get(v);
            }
        }
    }
    Ok((out, grads))
}

/// Projected embeddings `[B×T×H]`, evaluation mode.
pub fn embed(params: &ParameterSet, cfg: &AlbertConfig, batch: &[CorruptedExample]) -> Result<Tensor, ModelError> {
    let inputs = Inputs::new(cfg, batch)?;
    let mut g = Graph::new(params, cfg, false, None);
    let h = g.embed(&inputs)?;
    Ok(g.tape.value(h).reshape(&[inputs.b, inputs.t, cfg.hidden_size])?)
}

/// One application of the shared layer to `hidden` `[B×T×H]`, evaluation
/// mode. `attention_mask` has one entry per position, zero for padding.
pub fn shared_layer(
    params: &ParameterSet,
    cfg: &AlbertConfig,
    hidden: &Tensor,
    attention_mask: &[u8],
) -> Result<Tensor, ModelError> {
    let (b, t, h) = hidden.dims3()?;
    if h != cfg.hidden_size || attention_mask.len() != b * t {
        return Err(ModelError::InvalidBatch(format!(
            "hidden {:?} with {} mask entries",
            hidden.shape(),
            attention_mask.len()
        )));
    }
    let inputs = Inputs {
        b,
        t,
        ids: vec![],
        types: vec![],
        positions: vec![],
        keys: attention_mask.iter().map(|&m| m != 0).collect(),
        mlm: vec![],
        sop: vec![],
        wop: vec![],
    };
    let mut g = Graph::new(params, cfg, false, None);
    let x = g.tape.constant(hidden.reshape(&[b * t, h])?);
    let y = g.shared_layer(x, b, t, &inputs.score_mask(cfg.num_heads))?;
    Ok(g.tape.value(y).reshape(&[b, t, h])?)
}

/// Heads and losses on final encoder states `hidden` `[B×T×H]`, with labels
/// taken from `batch`.
pub fn heads(
    params: &ParameterSet,
    cfg: &AlbertConfig,
    hidden: &Tensor,
    batch: &[CorruptedExample],
) -> Result<ForwardOutput, ModelError> {
    let inputs = Inputs::new(cfg, batch)?;
    if hidden.shape() != [inputs.b, inputs.t, cfg.hidden_size] {
        return Err(ModelError::InvalidBatch(format!(
            "hidden {:?} does not match batch [{}, {}, {}]",
            hidden.shape(),
            inputs.b,
            inputs.t,
            cfg.hidden_size
        )));
    }
    let mut g = Graph::new(params, cfg, false, None);
    let h = g.tape.constant(hidden.reshape(&[inputs.b * inputs.t, cfg.hidden_size])?);
    let heads = g.heads(h, &inputs)?;
    g.output(h, &heads, &inputs)
}

/// Per-objective losses and accuracies. Disabled objectives are `None`;
/// so is the accuracy of an enabled objective that saw no labels.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveMetrics {
    pub loss_total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_mlm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_sop: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_wop: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acc_mlm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acc_sop: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acc_wop: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default)]
struct Tally {
    loss_sum: f64,
    correct: usize,
    labeled: usize,
    weight: f64,
    seen: bool,
}

/// Pools objective outputs over several batches. Losses are averaged with
/// weights proportional to each batch's labeled count.
#[derive(Clone, Debug, Default)]
pub struct MetricsAccumulator {
    outputs: Vec<[Option<ObjectiveOutput>; 3]>,
}

impl MetricsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, out: &ForwardOutput) {
        self.outputs.push([out.mlm, out.sop, out.wop]);
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn finish(&self) -> ObjectiveMetrics {
        let mut tallies = [Tally::default(); 3];
        for (i, tally) in tallies.iter_mut().enumerate() {
            let present: Vec<&ObjectiveOutput> = self.outputs.iter().filter_map(|o| o[i].as_ref()).collect();
            let labeled: usize = present.iter().map(|o| o.labeled).sum();
            tally.seen = !present.is_empty();
            tally.labeled = labeled;
            tally.correct = present.iter().map(|o| o.correct).sum();
            tally.weight = present.first().map_or(1.0, |o| o.weight);
            if labeled > 0 {
                tally.loss_sum = present
                    .iter()
                    .map(|o| o.labeled as f64 / labeled as f64 * o.loss)
                    .sum();
            }
        }
        let loss = |t: &Tally| t.seen.then_some(t.loss_sum);
        let acc = |t: &Tally| (t.seen && t.labeled > 0).then(|| t.correct as f64 / t.labeled as f64);
        let mut total = 0.0;
        for t in tallies.iter().filter(|t| t.seen) {
            total += t.weight * t.loss_sum;
        }
        ObjectiveMetrics {
            loss_total: total,
            loss_mlm: loss(&tallies[0]),
            loss_sop: loss(&tallies[1]),
            loss_wop: loss(&tallies[2]),
            acc_mlm: acc(&tallies[0]),
            acc_sop: acc(&tallies[1]),
            acc_wop: acc(&tallies[2]),
        }
    }
}

/// Metrics of a single forward pass.
pub fn compute_metrics(output: &ForwardOutput) -> ObjectiveMetrics {
    let mut acc = MetricsAccumulator::new();
    acc.add(output);
    acc.finish()
}
