//! Small post-norm transformer encoder with a pooled-CLS classifier head.
//!
//! Representations are addressable by [`LayerIndex`]: 0 is the token
//! embedding layer, `1..=n` the output of encoder layer `k`, and `n + 1`
//! the pooled sentence embedding. [`BoundEncoder::forward_to_layer`] and
//! [`BoundEncoder::forward_from_layer`] split the forward pass at any of
//! these points so that representations can be mixed in between.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

const LN_EPS: f64 = 1e-12;
const INIT_STD: f64 = 0.02;
const PARAMS_PER_LAYER: usize = 16;

pub const CHECKPOINT_FORMAT: &str = "mixup-encoder-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub n_classes: usize,
    pub dropout_rate: f64,
}

impl EncoderConfig {
    /// Desk-scale defaults for the given vocabulary and label count.
    pub fn desk(vocab_size: usize, n_classes: usize) -> Self {
        EncoderConfig {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 64,
            vocab_size,
            n_classes,
            dropout_rate: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.n_layers < 1 {
            return bad("n_layers must be >= 1".into());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.max_seq_len < 2 {
            return bad("max_seq_len must be >= 2".into());
        }
        if self.vocab_size == 0 || self.n_classes < 2 || self.d_ff == 0 {
            return bad("vocab_size, d_ff must be positive and n_classes >= 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0,1)", self.dropout_rate));
        }
        Ok(())
    }

    /// Index of the pooled sentence-embedding layer, `n + 1`.
    pub fn pooled_layer(&self) -> LayerIndex {
        LayerIndex(self.n_layers + 1)
    }
}

/// Where in the network a representation lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LayerIndex(pub usize);

impl LayerIndex {
    pub const INPUT: LayerIndex = LayerIndex(0);

    pub fn check(self, n_layers: usize) -> Result<Self> {
        if self.0 > n_layers + 1 {
            return Err(Error::Contract(format!(
                "layer index {} outside [0, {}]",
                self.0,
                n_layers + 1
            )));
        }
        Ok(self)
    }

    pub fn is_token_level(self, n_layers: usize) -> bool {
        self.0 <= n_layers
    }
}

/// Key mask for self-attention: `keep[b * len + t]` marks attendable positions.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    pub batch: usize,
    pub len: usize,
    pub keep: Vec<bool>,
}

impl AttentionMask {
    pub fn new(batch: usize, len: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != batch * len {
            return Err(Error::Dimension(format!(
                "mask has {} entries for [{batch}, {len}]",
                keep.len()
            )));
        }
        Ok(AttentionMask { batch, len, keep })
    }

    /// Every row attends to its first `lengths[b]` positions.
    pub fn from_lengths(lengths: &[usize], len: usize) -> Self {
        let keep = lengths
            .iter()
            .flat_map(|&l| (0..len).map(move |t| t < l))
            .collect();
        AttentionMask {
            batch: lengths.len(),
            len,
            keep,
        }
    }

    pub fn all(batch: usize, len: usize) -> Self {
        AttentionMask {
            batch,
            len,
            keep: vec![true; batch * len],
        }
    }

    pub fn row(&self, b: usize) -> &[bool] {
        &self.keep[b * self.len..(b + 1) * self.len]
    }
}

/// Training mode carries the dropout stream; evaluation disables dropout.
pub enum Phase<'r> {
    Eval,
    Train(&'r mut Rng),
}

impl Phase<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Phase::Train(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Canonical parameter names and shapes, in the fixed order used everywhere.
pub fn param_layout(cfg: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let (d, f) = (cfg.d_model, cfg.d_ff);
    let mut out = vec![
        ("embeddings.token".to_string(), vec![cfg.vocab_size, d]),
        ("embeddings.position".to_string(), vec![cfg.max_seq_len, d]),
    ];
    for i in 0..cfg.n_layers {
        let p = |s: &str| format!("layers.{i}.{s}");
        for proj in ["query", "key", "value", "output"] {
            out.push((p(&format!("attention.{proj}.weight")), vec![d, d]));
            out.push((p(&format!("attention.{proj}.bias")), vec![d]));
        }
        out.push((p("attention_norm.gamma"), vec![d]));
        out.push((p("attention_norm.beta"), vec![d]));
        out.push((p("ffn.in.weight"), vec![d, f]));
        out.push((p("ffn.in.bias"), vec![f]));
        out.push((p("ffn.out.weight"), vec![f, d]));
        out.push((p("ffn.out.bias"), vec![d]));
        out.push((p("ffn_norm.gamma"), vec![d]));
        out.push((p("ffn_norm.beta"), vec![d]));
    }
    out.push(("pooler.weight".to_string(), vec![d, d]));
    out.push(("pooler.bias".to_string(), vec![d]));
    out.push(("classifier.weight".to_string(), vec![d, cfg.n_classes]));
    out.push(("classifier.bias".to_string(), vec![cfg.n_classes]));
    out
}

/// Encoder, pooler and classifier parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    params: Vec<Param>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: EncoderConfig,
    params: Vec<Param>,
}

impl Encoder {
    /// Truncated-normal (std 0.02) weights, zero biases, unit norm gains.
    pub fn new(config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let params = param_layout(&config)
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let values = if name.ends_with(".gamma") {
                    vec![1.0; n]
                } else if name.ends_with(".bias") || name.ends_with(".beta") {
                    vec![0.0; n]
                } else {
                    (0..n).map(|_| rng.truncated_normal(INIT_STD)).collect()
                };
                Param {
                    name,
                    shape,
                    values,
                }
            })
            .collect();
        Ok(Encoder { config, params })
    }

    pub fn from_params(config: EncoderConfig, params: Vec<Param>) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(&config);
        if layout.len() != params.len() {
            return Err(Error::Validation(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in layout.iter().zip(&params) {
            if &p.name != name || &p.shape != shape {
                return Err(Error::Validation(format!(
                    "parameter {} {:?} does not match expected {name} {shape:?}",
                    p.name, p.shape
                )));
            }
            if p.values.len() != shape.iter().product::<usize>() {
                return Err(Error::Validation(format!(
                    "parameter {name} has wrong value count"
                )));
            }
        }
        Ok(Encoder { config, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    /// Sets the dropout rate used by subsequent training-mode passes.
    pub fn set_dropout_rate(&mut self, rate: f64) -> Result<()> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!(
                "dropout rate {rate} outside [0,1)"
            )));
        }
        self.config.dropout_rate = rate;
        Ok(())
    }

    /// Hex SHA-256 over parameter names, shapes and value bits.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for s in &p.shape {
                h.update((*s as u64).to_le_bytes());
            }
            for v in &p.values {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Creates fresh leaf tensors for one forward/backward pass.
    pub fn bind(&self) -> BoundEncoder<'_> {
        let leaves = self
            .params
            .iter()
            .map(|p| Tensor::leaf(p.values.clone(), p.shape.clone()).expect("layout-checked"))
            .collect();
        BoundEncoder {
            model: self,
            leaves,
        }
    }

    /// Binds parameters as constants; no gradient bookkeeping.
    pub fn bind_frozen(&self) -> BoundEncoder<'_> {
        let leaves = self
            .params
            .iter()
            .map(|p| Tensor::new(p.values.clone(), p.shape.clone()).expect("layout-checked"))
            .collect();
        BoundEncoder {
            model: self,
            leaves,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: self.params.clone(),
        };
        let text = serde_json::to_string(&file).map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: CheckpointFile = serde_json::from_str(&text)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                file.format,
                file.version
            )));
        }
        Encoder::from_params(file.config, file.params)
    }
}

/// Parameters bound as graph leaves for a single pass.
pub struct BoundEncoder<'m> {
    model: &'m Encoder,
    leaves: Vec<Tensor>,
}

struct LayerParams<'a> {
    p: &'a [Tensor],
}

impl LayerParams<'_> {
    fn q(&self) -> (&Tensor, &Tensor) {
        (&self.p[0], &self.p[1])
    }
    fn k(&self) -> (&Tensor, &Tensor) {
        (&self.p[2], &self.p[3])
    }
    fn v(&self) -> (&Tensor, &Tensor) {
        (&self.p[4], &self.p[5])
    }
    fn o(&self) -> (&Tensor, &Tensor) {
        (&self.p[6], &self.p[7])
    }
    fn norm1(&self) -> (&Tensor, &Tensor) {
        (&self.p[8], &self.p[9])
    }
    fn ffn_in(&self) -> (&Tensor, &Tensor) {
        (&self.p[10], &self.p[11])
    }
    fn ffn_out(&self) -> (&Tensor, &Tensor) {
        (&self.p[12], &self.p[13])
    }
    fn norm2(&self) -> (&Tensor, &Tensor) {
        (&self.p[14], &self.p[15])
    }
}

impl BoundEncoder<'_> {
    pub fn config(&self) -> &EncoderConfig {
        &self.model.config
    }

    pub fn leaves(&self) -> &[Tensor] {
        &self.leaves
    }

    /// Gradients in parameter order; zeros where a parameter was unused.
    pub fn grads(&self) -> Vec<Vec<f64>> {
        self.leaves
            .iter()
            .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
            .collect()
    }

    fn n_layers(&self) -> usize {
        self.model.config.n_layers
    }

    fn layer(&self, i: usize) -> LayerParams<'_> {
        let start = 2 + i * PARAMS_PER_LAYER;
        LayerParams {
            p: &self.leaves[start..start + PARAMS_PER_LAYER],
        }
    }

    fn head(&self, offset: usize) -> &Tensor {
        &self.leaves[2 + self.n_layers() * PARAMS_PER_LAYER + offset]
    }

    fn dropout(&self, x: Tensor, phase: &mut Phase) -> Result<Tensor> {
        match phase {
            Phase::Eval => Ok(x),
            Phase::Train(rng) => x.dropout(self.model.config.dropout_rate, rng),
        }
    }

    /// Token plus position embeddings: the layer-0 representation `[B, L, d]`.
    pub fn embed(&self, ids: &[usize], mask: &AttentionMask, phase: &mut Phase) -> Result<Tensor> {
        let (b, l) = (mask.batch, mask.len);
        if ids.len() != b * l {
            return Err(Error::Dimension(format!(
                "{} token ids for mask shape [{b}, {l}]",
                ids.len()
            )));
        }
        if l > self.config().max_seq_len {
            return Err(Error::Contract(format!(
                "sequence length {l} exceeds max_seq_len {}",
                self.config().max_seq_len
            )));
        }
        let tok = self.leaves[0].embedding(ids, &[b, l])?;
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..l).collect();
        let pos = self.leaves[1].embedding(&positions, &[b, l])?;
        self.dropout(tok.add(&pos)?, phase)
    }

    /// Self-attention probabilities `[B, H, L, L]` of encoder layer `i` (0-based).
    pub fn attention_probs(&self, x: &Tensor, i: usize, mask: &AttentionMask) -> Result<Tensor> {
        let (q, k, _) = self.qkv(x, i, mask)?;
        self.scores(&q, &k, mask)
    }

    fn qkv(&self, x: &Tensor, i: usize, mask: &AttentionMask) -> Result<(Tensor, Tensor, Tensor)> {
        let cfg = self.config();
        let (b, l, h) = (mask.batch, mask.len, cfg.n_heads);
        let dh = cfg.d_model / h;
        let lp = self.layer(i);
        let split = |(w, bias): (&Tensor, &Tensor)| -> Result<Tensor> {
            x.linear(w, bias)?
                .reshape(vec![b, l, h, dh])?
                .permute(&[0, 2, 1, 3])?
                .reshape(vec![b * h, l, dh])
        };
        Ok((split(lp.q())?, split(lp.k())?, split(lp.v())?))
    }

    fn scores(&self, q: &Tensor, k: &Tensor, mask: &AttentionMask) -> Result<Tensor> {
        let cfg = self.config();
        let (b, l, h) = (mask.batch, mask.len, cfg.n_heads);
        let dh = cfg.d_model / h;
        q.bmm(&k.transpose_last2()?)?
            .scale(1.0 / (dh as f64).sqrt())
            .reshape(vec![b, h, l, l])?
            .masked_softmax(&mask.keep)
    }

    fn encoder_layer(
        &self,
        x: &Tensor,
        i: usize,
        mask: &AttentionMask,
        phase: &mut Phase,
    ) -> Result<Tensor> {
        let cfg = self.config();
        let (b, l, h) = (mask.batch, mask.len, cfg.n_heads);
        let (d, dh) = (cfg.d_model, cfg.d_model / h);
        let lp = self.layer(i);

        let (q, k, v) = self.qkv(x, i, mask)?;
        let probs = self.scores(&q, &k, mask)?;
        let ctx = probs
            .reshape(vec![b * h, l, l])?
            .bmm(&v)?
            .reshape(vec![b, h, l, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(vec![b, l, d])?;
        let (wo, bo) = lp.o();
        let attn = self.dropout(ctx.linear(wo, bo)?, phase)?;
        let (g1, b1) = lp.norm1();
        let x = x.add(&attn)?.layer_norm(g1, b1, LN_EPS)?;

        let (w1, bi) = lp.ffn_in();
        let (w2, bo2) = lp.ffn_out();
        let ff = x.linear(w1, bi)?.gelu().linear(w2, bo2)?;
        let ff = self.dropout(ff, phase)?;
        let (g2, b2) = lp.norm2();
        x.add(&ff)?.layer_norm(g2, b2, LN_EPS)
    }

    fn check_hidden(&self, h: &Tensor, mask: &AttentionMask) -> Result<()> {
        let want = [mask.batch, mask.len, self.config().d_model];
        if h.shape() != want {
            return Err(Error::Contract(format!(
                "hidden state {:?} does not match expected {want:?}",
                h.shape()
            )));
        }
        Ok(())
    }

    /// Affine map plus tanh over the position-0 hidden state: `[B, L, d] -> [B, d]`.
    pub fn pool_cls(&self, h: &Tensor) -> Result<Tensor> {
        let s = h.shape();
        if s.len() != 3 {
            return Err(Error::Dimension(format!(
                "pool_cls expects [B, L, d], got {s:?}"
            )));
        }
        let (b, d) = (s[0], s[2]);
        h.index_select(1, &[0])?
            .reshape(vec![b, d])?
            .linear(self.head(0), self.head(1))?
            .tanh()
            .pipe(Ok)
    }

    /// Logits `[B, n_classes]` from sentence embeddings `[B, d]`.
    pub fn classify(&self, s: &Tensor) -> Result<Tensor> {
        s.linear(self.head(2), self.head(3))
    }

    /// Representation at layer `k`; `k = n + 1` yields the pooled embedding.
    pub fn forward_to_layer(
        &self,
        ids: &[usize],
        mask: &AttentionMask,
        k: LayerIndex,
        phase: &mut Phase,
    ) -> Result<Tensor> {
        let n = self.n_layers();
        k.check(n)?;
        let mut h = self.embed(ids, mask, phase)?;
        for i in 0..k.0.min(n) {
            h = self.encoder_layer(&h, i, mask, phase)?;
        }
        if k.0 == n + 1 {
            h = self.pool_cls(&h)?;
        }
        Ok(h)
    }

    /// Continues from a layer-`k` representation to the pooled sentence embedding.
    pub fn forward_from_layer(
        &self,
        h: &Tensor,
        k: LayerIndex,
        mask: &AttentionMask,
        phase: &mut Phase,
    ) -> Result<Tensor> {
        let n = self.n_layers();
        k.check(n)?;
        if k.0 == n + 1 {
            let want = [mask.batch, self.config().d_model];
            if h.shape() != want {
                return Err(Error::Contract(format!(
                    "pooled embedding {:?} does not match expected {want:?}",
                    h.shape()
                )));
            }
            return Ok(h.clone());
        }
        self.check_hidden(h, mask)?;
        let mut h = h.clone();
        for i in k.0..n {
            h = self.encoder_layer(&h, i, mask, phase)?;
        }
        self.pool_cls(&h)
    }

    /// Full forward pass to logits.
    pub fn logits(&self, ids: &[usize], mask: &AttentionMask, phase: &mut Phase) -> Result<Tensor> {
        let pooled = self.forward_to_layer(ids, mask, self.config().pooled_layer(), phase)?;
        self.classify(&pooled)
    }
}

trait Pipe: Sized {
    fn pipe<T>(self, f: impl FnOnce(Self) -> T) -> T {
        f(self)
    }
}

impl<T> Pipe for T {}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 8,
            vocab_size: 12,
            n_classes: 3,
            dropout_rate: 0.1,
        }
    }

    fn model() -> Encoder {
        Encoder::new(tiny(), &mut Rng::new(3)).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.max_seq_len = 1;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.n_layers = 0;
        assert!(c.validate().is_err());
        assert!(EncoderConfig::desk(1000, 2).validate().is_ok());
    }

    #[test]
    fn embed_shape_and_lookup() {
        let m = model();
        let bound = m.bind();
        let mask = AttentionMask::all(2, 3);
        let ids = [2, 5, 7, 2, 5, 7];
        let e = bound.embed(&ids, &mask, &mut Phase::Eval).unwrap();
        assert_eq!(e.shape(), &[2, 3, 8]);
        assert_eq!(&e.values()[..24], &e.values()[24..]);
        let tok = &m.params()[0].values;
        let pos = &m.params()[1].values;
        for (t, &id) in ids[..3].iter().enumerate() {
            for c in 0..8 {
                assert_eq!(e.values()[t * 8 + c], tok[id * 8 + c] + pos[t * 8 + c]);
            }
        }
    }

    #[test]
    fn embed_rejects_out_of_vocab() {
        let m = model();
        let err = m
            .bind()
            .embed(&[0, 12], &AttentionMask::all(1, 2), &mut Phase::Eval)
            .unwrap_err();
        assert!(matches!(err, Error::Vocabulary { id: 12, size: 12 }));
    }

    #[test]
    fn layer_index_range() {
        let m = model();
        let b = m.bind();
        let mask = AttentionMask::all(1, 2);
        assert!(matches!(
            b.forward_to_layer(&[2, 3], &mask, LayerIndex(4), &mut Phase::Eval),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn pooled_in_open_unit_interval() {
        let m = model();
        let b = m.bind();
        let mask = AttentionMask::all(2, 4);
        let p = b
            .forward_to_layer(
                &[2, 4, 5, 3, 2, 6, 6, 3],
                &mask,
                LayerIndex(3),
                &mut Phase::Eval,
            )
            .unwrap();
        assert_eq!(p.shape(), &[2, 8]);
        assert!(p.values().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn classify_zero_embedding_gives_bias() {
        let mut m = model();
        let n = m.params().len();
        m.params_mut()[n - 1].values = vec![0.1, -0.2, 0.3];
        let b = m.bind();
        let logits = b.classify(&Tensor::zeros(vec![2, 8])).unwrap();
        assert_eq!(logits.shape(), &[2, 3]);
        assert_eq!(logits.values(), &[0.1, -0.2, 0.3, 0.1, -0.2, 0.3]);
    }

    #[test]
    fn from_layer_rejects_wrong_shape() {
        let m = model();
        let b = m.bind();
        let mask = AttentionMask::all(1, 3);
        let h = Tensor::zeros(vec![1, 2, 8]);
        assert!(matches!(
            b.forward_from_layer(&h, LayerIndex(1), &mask, &mut Phase::Eval),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        m.save(&path).unwrap();
        let back = Encoder::load(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.param_hash(), m.param_hash());
    }

    #[test]
    fn layout_matches_param_count() {
        let cfg = tiny();
        assert_eq!(
            param_layout(&cfg).len(),
            2 + cfg.n_layers * PARAMS_PER_LAYER + 4
        );
    }
}
