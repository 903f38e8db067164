//! Small pre-norm transformer encoder for sentence-pair classification.
//!
//! Every attention head carries a mask scalar that multiplies its output
//! before the output projection, and every encoder weight matrix carries a
//! binary prune mask. Embedding tables are never maskable.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Param, ParamSet, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub num_classes: usize,
    /// Initialization seed. Set by the caller, never read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            max_seq_len: 32,
            embed_dim: 64,
            num_layers: 4,
            num_heads: 4,
            ffn_dim: 128,
            num_classes: 2,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("embed_dim", self.embed_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Closed-form parameter count:
    /// `(V + T) d + L (4 (d^2 + d) + 4 d + 2 d f + f + d) + 2 d + d K + K`.
    pub fn param_count(&self) -> usize {
        let (v, t, d, l, f, k) = (
            self.vocab_size,
            self.max_seq_len,
            self.embed_dim,
            self.num_layers,
            self.ffn_dim,
            self.num_classes,
        );
        (v + t) * d + l * (4 * (d * d + d) + 4 * d + 2 * d * f + f + d) + 2 * d + d * k + k
    }

    /// Number of prunable encoder weights: the four attention projections and
    /// the two feed-forward matrices of every layer.
    pub fn maskable_count(&self) -> usize {
        self.num_layers * (4 * self.embed_dim * self.embed_dim + 2 * self.embed_dim * self.ffn_dim)
    }

    pub(crate) fn to_pairs(self) -> Vec<(String, String)> {
        vec![
            ("vocab_size".into(), self.vocab_size.to_string()),
            ("max_seq_len".into(), self.max_seq_len.to_string()),
            ("embed_dim".into(), self.embed_dim.to_string()),
            ("num_layers".into(), self.num_layers.to_string()),
            ("num_heads".into(), self.num_heads.to_string()),
            ("ffn_dim".into(), self.ffn_dim.to_string()),
            ("num_classes".into(), self.num_classes.to_string()),
            ("seed".into(), self.seed.to_string()),
        ]
    }

    pub(crate) fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let get = |key: &str| -> Result<u64> {
            let raw = pairs
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v)
                .ok_or_else(|| Error::Format(format!("config key {key} missing")))?;
            raw.parse()
                .map_err(|_| Error::Format(format!("config key {key} has non-integer value {raw:?}")))
        };
        let cfg = Self {
            vocab_size: get("vocab_size")? as usize,
            max_seq_len: get("max_seq_len")? as usize,
            embed_dim: get("embed_dim")? as usize,
            num_layers: get("num_layers")? as usize,
            num_heads: get("num_heads")? as usize,
            ffn_dim: get("ffn_dim")? as usize,
            num_classes: get("num_classes")? as usize,
            seed: get("seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Indices of one encoder layer's parameters inside the [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct LayerSlots {
    ln1_gain: usize,
    ln1_bias: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_gain: usize,
    ln2_bias: usize,
    w_in: usize,
    b_in: usize,
    w_out: usize,
    b_out: usize,
}

const PARAMS_PER_LAYER: usize = 16;
const TOKEN_EMBEDDING: usize = 0;
const POSITION_EMBEDDING: usize = 1;

/// Token ids of a padded batch plus the key-validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub key_mask: Vec<bool>,
    pub batch: usize,
    pub seq: usize,
}

impl Batch {
    /// Right-pads every sequence with `pad_id` to the longest length.
    pub fn from_sequences(seqs: &[Vec<usize>], pad_id: usize) -> Result<Self> {
        let seq = seqs.iter().map(Vec::len).max().unwrap_or(0);
        if seqs.is_empty() || seq == 0 {
            return Err(Error::Input("batch has no tokens".into()));
        }
        let mut ids = Vec::with_capacity(seqs.len() * seq);
        let mut key_mask = Vec::with_capacity(seqs.len() * seq);
        for s in seqs {
            if s.is_empty() {
                return Err(Error::Input("empty sequence in batch".into()));
            }
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat(pad_id).take(seq - s.len()));
            key_mask.extend(std::iter::repeat(true).take(s.len()));
            key_mask.extend(std::iter::repeat(false).take(seq - s.len()));
        }
        Ok(Self {
            ids,
            key_mask,
            batch: seqs.len(),
            seq,
        })
    }
}

/// How the head mask enters a taped forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadMaskMode {
    /// Current mask values, no gradient.
    Constant,
    /// One differentiable copy per sample and head; the gradient of a summed
    /// loss with respect to entry `(b, h)` is the per-sample sensitivity.
    PerSample,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Record parameters as differentiable leaves (frozen ones stay constant).
    pub param_grads: bool,
    pub head_mask: HeadMaskMode,
}

impl ForwardOptions {
    pub const INFERENCE: Self = Self {
        param_grads: false,
        head_mask: HeadMaskMode::Constant,
    };
    pub const TRAINING: Self = Self {
        param_grads: true,
        head_mask: HeadMaskMode::Constant,
    };
}

/// Handles produced by [`TransformerClassifier::forward_on_tape`].
pub struct TapedForward {
    /// One leaf per parameter, in [`ParamSet`] order.
    pub params: Vec<Var>,
    /// Head-mask node for each layer.
    pub head_masks: Vec<Var>,
    pub logits: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerClassifier {
    config: ModelConfig,
    params: ParamSet,
    /// Row-major `[layer][head]` mask scalars.
    head_mask: Vec<f64>,
}

impl TransformerClassifier {
    /// Seeded initialization: uniform `±1/sqrt(fan_in)` for projections,
    /// unit-variance uniform for embeddings, zero biases, unit gains.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, f, k) = (config.embed_dim, config.ffn_dim, config.num_classes);
        let mut params = ParamSet::new();
        let emb_bound = 3f64.sqrt();
        params.push(Param::new(
            "embed.token",
            uniform(&mut rng, &[config.vocab_size, d], emb_bound),
        ));
        params.push(Param::new(
            "embed.position",
            uniform(&mut rng, &[config.max_seq_len, d], emb_bound),
        ));
        for l in 0..config.num_layers {
            let p = |s: &str| format!("layer{l}.{s}");
            let proj = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| {
                uniform(rng, &[rows, cols], 1.0 / (rows as f64).sqrt())
            };
            params.push(Param::new(p("ln1.gain"), Tensor::ones(&[d])));
            params.push(Param::new(p("ln1.bias"), Tensor::zeros(&[d])));
            for name in ["attn.q", "attn.k", "attn.v", "attn.o"] {
                params.push(Param::new(p(&format!("{name}.weight")), proj(&mut rng, d, d)).with_mask());
                params.push(Param::new(p(&format!("{name}.bias")), Tensor::zeros(&[d])));
            }
            params.push(Param::new(p("ln2.gain"), Tensor::ones(&[d])));
            params.push(Param::new(p("ln2.bias"), Tensor::zeros(&[d])));
            params.push(Param::new(p("ffn.in.weight"), proj(&mut rng, d, f)).with_mask());
            params.push(Param::new(p("ffn.in.bias"), Tensor::zeros(&[f])));
            params.push(Param::new(p("ffn.out.weight"), proj(&mut rng, f, d)).with_mask());
            params.push(Param::new(p("ffn.out.bias"), Tensor::zeros(&[d])));
        }
        params.push(Param::new("final_ln.gain", Tensor::ones(&[d])));
        params.push(Param::new("final_ln.bias", Tensor::zeros(&[d])));
        params.push(Param::new(
            "classifier.weight",
            uniform(&mut rng, &[d, k], 1.0 / (d as f64).sqrt()),
        ));
        params.push(Param::new("classifier.bias", Tensor::zeros(&[k])));

        Ok(Self {
            config,
            params,
            head_mask: vec![1.0; config.num_layers * config.num_heads],
        })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes
    /// against a fresh layout for `config`.
    pub fn from_parts(config: ModelConfig, params: ParamSet, head_mask: Vec<f64>) -> Result<Self> {
        let template = Self::new(config)?;
        if params.len() != template.params.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for (a, b) in template.params.iter().zip(params.iter()) {
            if a.name != b.name || a.value.shape() != b.value.shape() || a.mask.is_some() != b.mask.is_some() {
                return Err(Error::Format(format!("parameter layout mismatch at {}", b.name)));
            }
        }
        if head_mask.len() != config.num_layers * config.num_heads {
            return Err(Error::Format("head mask size mismatch".into()));
        }
        Ok(Self {
            config,
            params,
            head_mask,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn head_mask(&self, layer: usize, head: usize) -> f64 {
        self.head_mask[layer * self.config.num_heads + head]
    }

    pub fn set_head_mask(&mut self, layer: usize, head: usize, value: f64) {
        let h = self.config.num_heads;
        self.head_mask[layer * h + head] = value;
    }

    pub fn head_masks(&self) -> &[f64] {
        &self.head_mask
    }

    pub fn num_heads_total(&self) -> usize {
        self.head_mask.len()
    }

    /// Indices of the embedding tables.
    pub fn embedding_params(&self) -> [usize; 2] {
        [TOKEN_EMBEDDING, POSITION_EMBEDDING]
    }

    /// Indices of all prunable encoder weight matrices.
    pub fn maskable_params(&self) -> Vec<usize> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.mask.is_some())
            .map(|(i, _)| i)
            .collect()
    }

    /// Marks the embedding tables trainable or frozen.
    pub fn set_embeddings_trainable(&mut self, trainable: bool) {
        for i in self.embedding_params() {
            self.params.get_mut(i).trainable = trainable;
        }
    }

    /// Fraction of maskable encoder weights whose mask is 0.
    pub fn sparsity(&self) -> f64 {
        let (mut pruned, mut total) = (0usize, 0usize);
        for p in self.params.iter() {
            if let Some(mask) = &p.mask {
                total += mask.numel();
                pruned += mask.data().iter().filter(|&&m| m == 0.0).count();
            }
        }
        if total == 0 {
            0.0
        } else {
            pruned as f64 / total as f64
        }
    }

    fn layer_slots(&self, layer: usize) -> LayerSlots {
        let base = 2 + layer * PARAMS_PER_LAYER;
        LayerSlots {
            ln1_gain: base,
            ln1_bias: base + 1,
            wq: base + 2,
            bq: base + 3,
            wk: base + 4,
            bk: base + 5,
            wv: base + 6,
            bv: base + 7,
            wo: base + 8,
            bo: base + 9,
            ln2_gain: base + 10,
            ln2_bias: base + 11,
            w_in: base + 12,
            b_in: base + 13,
            w_out: base + 14,
            b_out: base + 15,
        }
    }

    fn tail_slot(&self) -> usize {
        2 + self.config.num_layers * PARAMS_PER_LAYER
    }

    /// Parameter indices of head `head` in `layer`: the query, key and value
    /// column blocks and the output-projection row block it owns.
    pub fn head_param_blocks(&self, layer: usize, head: usize) -> Vec<(usize, Vec<usize>)> {
        let s = self.layer_slots(layer);
        let d = self.config.embed_dim;
        let dh = self.config.head_dim();
        let cols: Vec<usize> = (0..d)
            .flat_map(|r| (head * dh..(head + 1) * dh).map(move |c| r * d + c))
            .collect();
        let rows: Vec<usize> = (head * dh * d..(head + 1) * dh * d).collect();
        let bias: Vec<usize> = (head * dh..(head + 1) * dh).collect();
        vec![
            (s.wq, cols.clone()),
            (s.bq, bias.clone()),
            (s.wk, cols.clone()),
            (s.bk, bias.clone()),
            (s.wv, cols),
            (s.bv, bias),
            (s.wo, rows),
        ]
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.seq > self.config.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {} exceeds max_seq_len {}",
                batch.seq, self.config.max_seq_len
            )));
        }
        if batch.ids.len() != batch.batch * batch.seq || batch.key_mask.len() != batch.ids.len() {
            return Err(Error::Input("batch buffers do not match batch x seq".into()));
        }
        if let Some(bad) = batch.ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} >= vocab_size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Records the forward pass on `tape` and returns the logits node
    /// (`batch x num_classes`).
    pub fn forward_on_tape(&self, tape: &mut Tape, batch: &Batch, opts: ForwardOptions) -> Result<TapedForward> {
        self.check_batch(batch)?;
        let cfg = &self.config;
        let (b, t, h) = (batch.batch, batch.seq, cfg.num_heads);

        let mut vars = Vec::with_capacity(self.params.len());
        for p in self.params.iter() {
            let leaf = tape.leaf(p.value.clone(), opts.param_grads && p.trainable);
            vars.push(leaf);
        }
        // Effective weights: value times prune mask.
        let mut eff = vars.clone();
        for (i, p) in self.params.iter().enumerate() {
            if let Some(mask) = &p.mask {
                eff[i] = tape.mask_mul(vars[i], mask.data())?;
            }
        }

        let positions: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
        let tok = tape.embedding(eff[TOKEN_EMBEDDING], &batch.ids)?;
        let pos = tape.embedding(eff[POSITION_EMBEDDING], &positions)?;
        let mut x = tape.add(tok, pos)?;

        let mut head_masks = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let s = self.layer_slots(l);
            let row = &self.head_mask[l * h..(l + 1) * h];
            let xi = match opts.head_mask {
                HeadMaskMode::Constant => tape.constant(Tensor::new(vec![h], row.to_vec())?),
                HeadMaskMode::PerSample => {
                    let data: Vec<f64> = (0..b).flat_map(|_| row.iter().copied()).collect();
                    tape.leaf(Tensor::new(vec![b, h], data)?, true)
                }
            };
            head_masks.push(xi);

            let hn = tape.layer_norm(x, eff[s.ln1_gain], eff[s.ln1_bias])?;
            let q = linear(tape, hn, eff[s.wq], eff[s.bq])?;
            let k = linear(tape, hn, eff[s.wk], eff[s.bk])?;
            let v = linear(tape, hn, eff[s.wv], eff[s.bv])?;
            let attn = tape.attention(q, k, v, xi, &batch.key_mask, b, h)?;
            let proj = linear(tape, attn, eff[s.wo], eff[s.bo])?;
            x = tape.add(x, proj)?;

            let hn = tape.layer_norm(x, eff[s.ln2_gain], eff[s.ln2_bias])?;
            let inner = linear(tape, hn, eff[s.w_in], eff[s.b_in])?;
            let act = tape.gelu(inner);
            let out = linear(tape, act, eff[s.w_out], eff[s.b_out])?;
            x = tape.add(x, out)?;
        }

        let tail = self.tail_slot();
        let first_rows: Vec<usize> = (0..b).map(|i| i * t).collect();
        let pooled = tape.select_rows(x, &first_rows)?;
        let pooled = tape.layer_norm(pooled, eff[tail], eff[tail + 1])?;
        let logits = linear(tape, pooled, eff[tail + 2], eff[tail + 3])?;
        Ok(TapedForward {
            params: vars,
            head_masks,
            logits,
        })
    }

    /// Logits for a batch without gradient bookkeeping.
    pub fn forward(&self, batch: &Batch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward_on_tape(&mut tape, batch, ForwardOptions::INFERENCE)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Copies gradients of the parameter leaves from `tape` into the
    /// parameter set, replacing any previous gradients.
    pub fn collect_grads(&mut self, tape: &mut Tape, taped: &TapedForward) {
        for (p, &v) in self.params.iter_mut().zip(&taped.params) {
            p.grad = tape
                .take_grad(v)
                .map(|g| Tensor::new(p.value.shape().to_vec(), g).expect("grad shape"));
            if p.trainable && p.grad.is_none() {
                p.grad = Some(Tensor::zeros(p.value.shape()));
            }
        }
    }
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.gen_range(-bound..bound);
    }
    t
}

/// Copy of `model` keeping only its first `keep_layers` encoder layers, with
/// embeddings, final norm and classifier carried over.
pub fn truncate_student(model: &TransformerClassifier, keep_layers: usize) -> Result<TransformerClassifier> {
    let cfg = model.config;
    if keep_layers == 0 {
        return Err(Error::Config("keep_layers must be positive".into()));
    }
    if keep_layers > cfg.num_layers {
        return Err(Error::Config(format!(
            "keep_layers {keep_layers} exceeds the model's {} layers",
            cfg.num_layers
        )));
    }
    let new_cfg = ModelConfig {
        num_layers: keep_layers,
        ..cfg
    };
    let mut params = ParamSet::new();
    let kept = 2 + keep_layers * PARAMS_PER_LAYER;
    for (i, p) in model.params.iter().enumerate() {
        if i < kept || i >= model.tail_slot() {
            let mut p = p.clone();
            p.grad = None;
            params.push(p);
        }
    }
    let head_mask = model.head_mask[..keep_layers * cfg.num_heads].to_vec();
    TransformerClassifier::from_parts(new_cfg, params, head_mask)
}
