//! The dual-stream translation model: a shared token embedding feeds both a
//! token-level stream and a semantic-unit stream (one fused vector per span,
//! produced by the attentive fusion layer); the streams are concatenated,
//! each with positional encoding restarting at zero, and run through a
//! standard post-norm transformer encoder. The decoder is the unmodified
//! baseline decoder with its output projection tied to the target embedding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Reduction, Var};
use crate::corpus::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::nn::{
    feed_forward, init, multi_head_attention, sinusoidal_pe, BoundParams, Parameters, LN_EPS,
};
use crate::tensor::{pool_rows, Scalar, Tensor};
use crate::wpe::SpanSet;

/// How the encoder input sequence is assembled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputMode {
    /// Token stream followed by the semantic-unit stream (the full model).
    TokenSemantic,
    /// Token stream duplicated.
    TokenDouble,
    /// Semantic stream duplicated.
    SemanticDouble,
    /// Plain baseline transformer input.
    TokenOnly,
    /// Semantic stream alone.
    SemanticOnly,
}

impl InputMode {
    pub const ALL: [InputMode; 5] = [
        InputMode::TokenSemantic,
        InputMode::TokenDouble,
        InputMode::SemanticDouble,
        InputMode::TokenOnly,
        InputMode::SemanticOnly,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            InputMode::TokenSemantic => "token+semantic",
            InputMode::TokenDouble => "token-x2",
            InputMode::SemanticDouble => "semantic-x2",
            InputMode::TokenOnly => "token-only",
            InputMode::SemanticOnly => "semantic-only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "token+semantic" => Ok(InputMode::TokenSemantic),
            "token-x2" => Ok(InputMode::TokenDouble),
            "semantic-x2" => Ok(InputMode::SemanticDouble),
            "token-only" => Ok(InputMode::TokenOnly),
            "semantic-only" => Ok(InputMode::SemanticOnly),
            other => Err(Error::Config(format!("unknown input mode {other:?}"))),
        }
    }

    /// Encoder sequence length for token length `l_tok` and span count
    /// `l_sem`.
    pub fn encoded_len(&self, l_tok: usize, l_sem: usize) -> usize {
        match self {
            InputMode::TokenSemantic => l_tok + l_sem,
            InputMode::TokenDouble => 2 * l_tok,
            InputMode::SemanticDouble => 2 * l_sem,
            InputMode::TokenOnly => l_tok,
            InputMode::SemanticOnly => l_sem,
        }
    }

    /// Whether this mode runs the fusion layer at all.
    pub fn uses_semantic_stream(&self) -> bool {
        !matches!(self, InputMode::TokenOnly | InputMode::TokenDouble)
    }
}

impl std::fmt::Display for InputMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ffn: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    /// Heads of the fusion layer's attention; defaults to `heads`.
    pub asf_heads: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub dropout: f64,
    pub input_mode: InputMode,
    pub max_span: usize,
    pub max_len: usize,
}

impl ModelConfig {
    /// Desk-scale defaults: small enough to train on a laptop CPU.
    pub fn desk(src_vocab: usize, tgt_vocab: usize) -> Self {
        ModelConfig {
            d_model: 64,
            d_ffn: 256,
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            asf_heads: 4,
            src_vocab,
            tgt_vocab,
            dropout: 0.1,
            input_mode: InputMode::TokenSemantic,
            max_span: 6,
            max_len: 256,
        }
    }

    /// The transformer-base recipe.
    pub fn paper_base(src_vocab: usize, tgt_vocab: usize) -> Self {
        ModelConfig {
            d_model: 512,
            d_ffn: 2048,
            enc_layers: 6,
            dec_layers: 6,
            heads: 8,
            asf_heads: 8,
            src_vocab,
            tgt_vocab,
            dropout: 0.1,
            input_mode: InputMode::TokenSemantic,
            max_span: 6,
            max_len: 1024,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return Err(Error::Config(format!(
                "d_model must be positive and even, got {}",
                self.d_model
            )));
        }
        for (heads, what) in [(self.heads, "heads"), (self.asf_heads, "asf_heads")] {
            if heads == 0 || self.d_model % heads != 0 {
                return Err(Error::Config(format!(
                    "d_model {} not divisible by {what} {heads}",
                    self.d_model
                )));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} not in [0,1)",
                self.dropout
            )));
        }
        if self.src_vocab < 5 || self.tgt_vocab < 5 {
            return Err(Error::Config("vocabulary smaller than the specials".into()));
        }
        if self.max_span == 0 || self.max_len == 0 {
            return Err(Error::Config(
                "max_span and max_len must be positive".into(),
            ));
        }
        Ok(())
    }

    /// `key=value` form used in checkpoint headers.
    pub fn to_kv(&self) -> String {
        format!(
            "d_model={} d_ffn={} enc_layers={} dec_layers={} heads={} asf_heads={} \
             src_vocab={} tgt_vocab={} dropout={} input_mode={} max_span={} max_len={}",
            self.d_model,
            self.d_ffn,
            self.enc_layers,
            self.dec_layers,
            self.heads,
            self.asf_heads,
            self.src_vocab,
            self.tgt_vocab,
            self.dropout,
            self.input_mode,
            self.max_span,
            self.max_len
        )
    }

    pub fn from_kv(s: &str) -> Result<Self> {
        let mut cfg = ModelConfig::desk(5, 5);
        for field in s.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad config field {field:?}")))?;
            let parse_usize = || {
                value
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad value for {key}: {value:?}")))
            };
            match key {
                "d_model" => cfg.d_model = parse_usize()?,
                "d_ffn" => cfg.d_ffn = parse_usize()?,
                "enc_layers" => cfg.enc_layers = parse_usize()?,
                "dec_layers" => cfg.dec_layers = parse_usize()?,
                "heads" => cfg.heads = parse_usize()?,
                "asf_heads" => cfg.asf_heads = parse_usize()?,
                "src_vocab" => cfg.src_vocab = parse_usize()?,
                "tgt_vocab" => cfg.tgt_vocab = parse_usize()?,
                "max_span" => cfg.max_span = parse_usize()?,
                "max_len" => cfg.max_len = parse_usize()?,
                "dropout" => {
                    cfg.dropout = value
                        .parse()
                        .map_err(|_| Error::Config(format!("bad dropout {value:?}")))?
                }
                "input_mode" => cfg.input_mode = InputMode::parse(value)?,
                other => return Err(Error::Config(format!("unknown config key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Architecture equality required for loading checkpoints; the input
    /// mode and dropout may differ between pretraining and finetuning.
    pub fn compatible_with(&self, other: &ModelConfig) -> bool {
        self.d_model == other.d_model
            && self.d_ffn == other.d_ffn
            && self.enc_layers == other.enc_layers
            && self.dec_layers == other.dec_layers
            && self.heads == other.heads
            && self.src_vocab == other.src_vocab
            && self.tgt_vocab == other.tgt_vocab
    }
}

/// Encoder output for one sentence.
#[derive(Clone, Debug)]
pub struct EncodedSource<F> {
    pub states: Tensor<F>,
    pub token_len: usize,
    pub span_count: usize,
}

impl<F: Scalar> EncodedSource<F> {
    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Dropout context for a forward pass: `disabled` for inference and
/// gradient checking, `for_step` for training.
pub struct DropoutCtx {
    rng: Option<ChaCha8Rng>,
    rate: f64,
}

impl DropoutCtx {
    pub fn disabled() -> Self {
        DropoutCtx {
            rng: None,
            rate: 0.0,
        }
    }

    /// Stream derived from (seed, step), so any step can be replayed
    /// without running the preceding ones.
    pub fn for_step(rate: f64, seed: u64, step: u64) -> Self {
        if rate == 0.0 {
            return DropoutCtx::disabled();
        }
        DropoutCtx {
            rng: Some(ChaCha8Rng::seed_from_u64(
                seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(step),
            )),
            rate,
        }
    }

    fn apply<F: Scalar>(&mut self, g: &mut Graph<F>, x: Var) -> Var {
        match &mut self.rng {
            Some(rng) => g.dropout(x, self.rate, rng),
            None => x,
        }
    }
}

/// The model: configuration plus named parameters.
#[derive(Clone, Debug)]
pub struct Su4mtModel<F: Scalar> {
    pub config: ModelConfig,
    pub params: Parameters<F>,
}

impl<F: Scalar> Su4mtModel<F> {
    /// Fresh deterministic initialization.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let mut p = Parameters::new();
        p.insert("enc.embed", init::embedding(config.src_vocab, d, &mut rng));
        p.insert("dec.embed", init::embedding(config.tgt_vocab, d, &mut rng));
        fn norm<F: Scalar>(p: &mut Parameters<F>, d: usize, name: &str) {
            p.insert(format!("{name}.gain"), Tensor::full(vec![d], F::one()));
            p.insert(format!("{name}.bias"), Tensor::zeros(vec![d]));
        }
        fn attn<F: Scalar>(p: &mut Parameters<F>, d: usize, rng: &mut ChaCha8Rng, name: &str) {
            for proj in ["wq", "wk", "wv", "wo"] {
                p.insert(format!("{name}.{proj}"), init::xavier(d, d, rng));
            }
        }
        fn ffn<F: Scalar>(
            p: &mut Parameters<F>,
            d: usize,
            d_ffn: usize,
            rng: &mut ChaCha8Rng,
            name: &str,
        ) {
            p.insert(format!("{name}.w1"), init::xavier(d, d_ffn, rng));
            p.insert(format!("{name}.b1"), Tensor::zeros(vec![d_ffn]));
            p.insert(format!("{name}.w2"), init::xavier(d_ffn, d, rng));
            p.insert(format!("{name}.b2"), Tensor::zeros(vec![d]));
        }
        for i in 0..config.enc_layers {
            attn(&mut p, d, &mut rng, &format!("enc.l{i}.attn"));
            norm(&mut p, d, &format!("enc.l{i}.ln1"));
            ffn(&mut p, d, config.d_ffn, &mut rng, &format!("enc.l{i}.ffn"));
            norm(&mut p, d, &format!("enc.l{i}.ln2"));
        }
        for i in 0..config.dec_layers {
            attn(&mut p, d, &mut rng, &format!("dec.l{i}.self"));
            norm(&mut p, d, &format!("dec.l{i}.ln1"));
            attn(&mut p, d, &mut rng, &format!("dec.l{i}.cross"));
            norm(&mut p, d, &format!("dec.l{i}.ln2"));
            ffn(&mut p, d, config.d_ffn, &mut rng, &format!("dec.l{i}.ffn"));
            norm(&mut p, d, &format!("dec.l{i}.ln3"));
        }
        attn(&mut p, d, &mut rng, "asf.attn");
        p.insert("asf.down.w", init::xavier(3 * d, d, &mut rng));
        p.insert("asf.down.b", Tensor::zeros(vec![d]));
        norm(&mut p, d, "asf.norm");
        norm(&mut p, d, "input_norm");
        Ok(Su4mtModel { config, params: p })
    }

    /// Parameters introduced by the semantic-unit machinery; everything
    /// else is shared with the baseline transformer.
    pub fn is_fusion_param(name: &str) -> bool {
        name.starts_with("asf.") || name.starts_with("input_norm.")
    }

    /// Whether the current input mode touches this parameter at all.
    pub fn param_active(&self, name: &str) -> bool {
        if name.starts_with("asf.") {
            self.config.input_mode.uses_semantic_stream()
        } else if name.starts_with("input_norm.") {
            self.config.input_mode != InputMode::TokenOnly
        } else {
            true
        }
    }

    /// Elementwise min, max and mean over a unit's token vectors, stacked
    /// in that fixed order as `[3, d]`.
    pub fn pool_features(unit: &Tensor<F>) -> Result<Tensor<F>> {
        if unit.rows() == 0 || unit.is_empty() {
            return Err(Error::ShapeMismatch("pooling over an empty unit".into()));
        }
        Ok(pool_rows(unit))
    }

    /// Fuses one unit's token vectors `[k, d]` into a single `[1, d]`
    /// semantic representation (standalone entry point; training uses the
    /// graph builder directly). Every unit length shares the same
    /// parameters, so singleton and phrase representations live in one
    /// vector space.
    pub fn asf_forward(&self, unit: &Tensor<F>) -> Result<Tensor<F>> {
        if unit.rows() == 0 || unit.is_empty() {
            return Err(Error::ShapeMismatch("fusing an empty unit".into()));
        }
        if unit.cols() != self.config.d_model {
            return Err(Error::ShapeMismatch(format!(
                "unit dim {} vs d_model {}",
                unit.cols(),
                self.config.d_model
            )));
        }
        let mut g = Graph::inference();
        let bound = self.params.bind(&mut g);
        let unit_var = g.leaf(unit.clone());
        let fused = self.asf_unit(&mut g, &bound, unit_var)?;
        Ok(g.value(fused).clone())
    }

    /// Graph builder for one unit: pooled 3-row query, attention over the
    /// unit's tokens, flatten to `[1, 3d]`, downsample, norm.
    fn asf_unit(&self, g: &mut Graph<F>, p: &BoundParams, unit: Var) -> Result<Var> {
        let d = self.config.d_model;
        let pooled = g.pool3(unit);
        let fused = multi_head_attention(
            g,
            pooled,
            unit,
            p.var("asf.attn.wq"),
            p.var("asf.attn.wk"),
            p.var("asf.attn.wv"),
            p.var("asf.attn.wo"),
            self.config.asf_heads,
            None,
        )?;
        let flat = g.reshape(fused, vec![1, 3 * d]);
        let down = g.matmul(flat, p.var("asf.down.w"));
        let down = g.add_bias(down, p.var("asf.down.b"));
        Ok(g.layer_norm(
            down,
            p.var("asf.norm.gain"),
            p.var("asf.norm.bias"),
            F::from_f64(LN_EPS),
        ))
    }

    /// Builds the encoder over one sentence and returns its output states.
    pub(crate) fn build_encoder(
        &self,
        g: &mut Graph<F>,
        p: &BoundParams,
        src_ids: &[u32],
        spans: &SpanSet,
        ctx: &mut DropoutCtx,
    ) -> Result<Var> {
        let cfg = &self.config;
        let d = cfg.d_model;
        let mode = cfg.input_mode;
        if spans.sentence_len() != src_ids.len() {
            return Err(Error::SpanMismatch(format!(
                "spans cover {} subwords but the sentence has {}",
                spans.sentence_len(),
                src_ids.len()
            )));
        }
        if let Some(bad) = spans.spans().iter().find(|s| s.len() > cfg.max_span) {
            return Err(Error::InvalidSpans(format!(
                "span {bad:?} exceeds max_span {}",
                cfg.max_span
            )));
        }
        if src_ids.is_empty() {
            return Err(Error::EmptyCorpus);
        }

        let emb = g.embedding(p.var("enc.embed"), src_ids)?;
        let emb = g.scale(emb, F::from_f64((d as f64).sqrt()));

        let token_stream = |g: &mut Graph<F>| -> Result<Var> {
            let pe = g.leaf(sinusoidal_pe(src_ids.len(), d, 0)?);
            Ok(g.add(emb, pe))
        };
        // One fused vector per span, in span order, positions restarting
        // from zero.
        let semantic_stream = |g: &mut Graph<F>, model: &Self| -> Result<Var> {
            let mut units = Vec::with_capacity(spans.len());
            for span in spans.spans() {
                let unit = g.slice_rows(emb, span.start, span.end);
                units.push(model.asf_unit(g, p, unit)?);
            }
            let sem = g.concat_rows(&units);
            let pe = g.leaf(sinusoidal_pe(spans.len(), d, 0)?);
            Ok(g.add(sem, pe))
        };

        let assembled = match mode {
            InputMode::TokenSemantic => {
                let tok = token_stream(g)?;
                let sem = semantic_stream(g, self)?;
                g.concat_rows(&[tok, sem])
            }
            InputMode::TokenDouble => {
                let tok = token_stream(g)?;
                g.concat_rows(&[tok, tok])
            }
            InputMode::SemanticDouble => {
                let sem = semantic_stream(g, self)?;
                g.concat_rows(&[sem, sem])
            }
            InputMode::TokenOnly => token_stream(g)?,
            InputMode::SemanticOnly => semantic_stream(g, self)?,
        };
        // Token-only input reduces to the plain baseline; every assembled
        // variant gets the stabilizing normalization.
        let mut x = if mode == InputMode::TokenOnly {
            assembled
        } else {
            g.layer_norm(
                assembled,
                p.var("input_norm.gain"),
                p.var("input_norm.bias"),
                F::from_f64(LN_EPS),
            )
        };
        x = ctx.apply(g, x);

        for i in 0..cfg.enc_layers {
            let name = format!("enc.l{i}");
            let attn = multi_head_attention(
                g,
                x,
                x,
                p.var(&format!("{name}.attn.wq")),
                p.var(&format!("{name}.attn.wk")),
                p.var(&format!("{name}.attn.wv")),
                p.var(&format!("{name}.attn.wo")),
                cfg.heads,
                None,
            )?;
            let attn = ctx.apply(g, attn);
            let res = g.add(x, attn);
            x = g.layer_norm(
                res,
                p.var(&format!("{name}.ln1.gain")),
                p.var(&format!("{name}.ln1.bias")),
                F::from_f64(LN_EPS),
            );
            let ff = feed_forward(
                g,
                x,
                p.var(&format!("{name}.ffn.w1")),
                p.var(&format!("{name}.ffn.b1")),
                p.var(&format!("{name}.ffn.w2")),
                p.var(&format!("{name}.ffn.b2")),
            );
            let ff = ctx.apply(g, ff);
            let res = g.add(x, ff);
            x = g.layer_norm(
                res,
                p.var(&format!("{name}.ln2.gain")),
                p.var(&format!("{name}.ln2.bias")),
                F::from_f64(LN_EPS),
            );
        }
        Ok(x)
    }

    /// Builds the decoder over a full prefix (teacher forcing) and returns
    /// next-token logits for every position, `[len, tgt_vocab]`.
    pub(crate) fn build_decoder_logits(
        &self,
        g: &mut Graph<F>,
        p: &BoundParams,
        enc_states: Var,
        prefix_ids: &[u32],
        ctx: &mut DropoutCtx,
    ) -> Result<Var> {
        let cfg = &self.config;
        let d = cfg.d_model;
        let len = prefix_ids.len();
        if len == 0 {
            return Err(Error::EmptyCorpus);
        }
        if len > cfg.max_len {
            return Err(Error::PrefixTooLong {
                len,
                max: cfg.max_len,
            });
        }
        let emb = g.embedding(p.var("dec.embed"), prefix_ids)?;
        let emb = g.scale(emb, F::from_f64((d as f64).sqrt()));
        let pe = g.leaf(sinusoidal_pe(len, d, 0)?);
        let mut x = g.add(emb, pe);
        x = ctx.apply(g, x);

        let causal: Vec<bool> = (0..len * len).map(|i| (i % len) <= (i / len)).collect();
        for i in 0..cfg.dec_layers {
            let name = format!("dec.l{i}");
            let self_attn = multi_head_attention(
                g,
                x,
                x,
                p.var(&format!("{name}.self.wq")),
                p.var(&format!("{name}.self.wk")),
                p.var(&format!("{name}.self.wv")),
                p.var(&format!("{name}.self.wo")),
                cfg.heads,
                Some(&causal),
            )?;
            let self_attn = ctx.apply(g, self_attn);
            let res = g.add(x, self_attn);
            x = g.layer_norm(
                res,
                p.var(&format!("{name}.ln1.gain")),
                p.var(&format!("{name}.ln1.bias")),
                F::from_f64(LN_EPS),
            );
            let cross = multi_head_attention(
                g,
                x,
                enc_states,
                p.var(&format!("{name}.cross.wq")),
                p.var(&format!("{name}.cross.wk")),
                p.var(&format!("{name}.cross.wv")),
                p.var(&format!("{name}.cross.wo")),
                cfg.heads,
                None,
            )?;
            let cross = ctx.apply(g, cross);
            let res = g.add(x, cross);
            x = g.layer_norm(
                res,
                p.var(&format!("{name}.ln2.gain")),
                p.var(&format!("{name}.ln2.bias")),
                F::from_f64(LN_EPS),
            );
            let ff = feed_forward(
                g,
                x,
                p.var(&format!("{name}.ffn.w1")),
                p.var(&format!("{name}.ffn.b1")),
                p.var(&format!("{name}.ffn.w2")),
                p.var(&format!("{name}.ffn.b2")),
            );
            let ff = ctx.apply(g, ff);
            let res = g.add(x, ff);
            x = g.layer_norm(
                res,
                p.var(&format!("{name}.ln3.gain")),
                p.var(&format!("{name}.ln3.bias")),
                F::from_f64(LN_EPS),
            );
        }
        // Output projection tied to the target embedding.
        Ok(g.matmul_bt(x, p.var("dec.embed")))
    }

    /// Scalar training loss for one sentence pair. `tgt_ids` carries
    /// neither BOS nor EOS; the teacher-forcing prefix and shifted targets
    /// are built here. Returns the loss node (summed over positions) and
    /// the number of target positions.
    pub(crate) fn build_pair_loss(
        &self,
        g: &mut Graph<F>,
        p: &BoundParams,
        src_ids: &[u32],
        spans: &SpanSet,
        tgt_ids: &[u32],
        smoothing: f64,
        ctx: &mut DropoutCtx,
    ) -> Result<(Var, usize)> {
        let enc = self.build_encoder(g, p, src_ids, spans, ctx)?;
        let mut prefix = Vec::with_capacity(tgt_ids.len() + 1);
        prefix.push(BOS);
        prefix.extend_from_slice(tgt_ids);
        let mut targets = Vec::with_capacity(tgt_ids.len() + 1);
        targets.extend_from_slice(tgt_ids);
        targets.push(EOS);
        let logits = self.build_decoder_logits(g, p, enc, &prefix, ctx)?;
        let loss = g.cross_entropy(logits, &targets, PAD, smoothing, Reduction::Sum)?;
        Ok((loss, targets.len()))
    }

    /// Encodes one sentence (inference).
    pub fn encode(&self, src_ids: &[u32], spans: &SpanSet) -> Result<EncodedSource<F>> {
        let mut g = Graph::inference();
        let bound = self.params.bind(&mut g);
        let mut ctx = DropoutCtx::disabled();
        let out = self.build_encoder(&mut g, &bound, src_ids, spans, &mut ctx)?;
        Ok(EncodedSource {
            states: g.value(out).clone(),
            token_len: src_ids.len(),
            span_count: spans.len(),
        })
    }

    /// Next-token probability distribution after a decoder prefix (which
    /// must start with BOS).
    pub fn decode_step(&self, prefix_ids: &[u32], enc: &EncodedSource<F>) -> Result<Vec<F>> {
        if prefix_ids.first() != Some(&BOS) {
            return Err(Error::Config("decoder prefix must start with <bos>".into()));
        }
        let mut g = Graph::inference();
        let bound = self.params.bind(&mut g);
        let enc_var = g.leaf(enc.states.clone());
        let mut ctx = DropoutCtx::disabled();
        let logits = self.build_decoder_logits(&mut g, &bound, enc_var, prefix_ids, &mut ctx)?;
        let last = g.slice_rows(logits, prefix_ids.len() - 1, prefix_ids.len());
        let probs = g.softmax_rows(last, None)?;
        Ok(g.value(probs).data().to_vec())
    }

    /// Translates one sentence by beam search with length-normalized
    /// log-probability; `beam == 1` is greedy decoding. The pure greedy
    /// rollout is always kept as a candidate, so widening the beam never
    /// returns a worse normalized score. Generation stops at EOS or after
    /// the length cap; returned ids exclude BOS/EOS.
    pub fn translate(&self, src_ids: &[u32], spans: &SpanSet, beam: usize) -> Result<Vec<u32>> {
        assert!(beam >= 1, "beam must be at least 1");
        let enc = self.encode(src_ids, spans)?;
        let max_len = self.config.max_len.min(2 * src_ids.len() + 16).max(4);

        let greedy = self.greedy_rollout(&enc, max_len)?;
        if beam == 1 {
            return Ok(greedy.ids);
        }

        #[derive(Clone)]
        struct Hyp {
            ids: Vec<u32>,
            logp: f64,
        }
        let norm = |h: &Hyp| h.logp / h.ids.len().max(1) as f64;

        let mut alive = vec![Hyp {
            ids: Vec::new(),
            logp: 0.0,
        }];
        let mut finished: Vec<Hyp> = Vec::new();
        for _ in 0..max_len {
            let mut candidates: Vec<Hyp> = Vec::new();
            for hyp in &alive {
                let mut prefix = Vec::with_capacity(hyp.ids.len() + 1);
                prefix.push(BOS);
                prefix.extend_from_slice(&hyp.ids);
                let probs = self.decode_step(&prefix, &enc)?;
                for (id, &p) in probs.iter().enumerate() {
                    let logp = hyp.logp + p.as_f64().max(f64::MIN_POSITIVE).ln();
                    let mut ids = hyp.ids.clone();
                    ids.push(id as u32);
                    candidates.push(Hyp { ids, logp });
                }
            }
            candidates.sort_by(|a, b| {
                b.logp
                    .partial_cmp(&a.logp)
                    .expect("finite log probabilities")
                    .then_with(|| a.ids.cmp(&b.ids))
            });
            candidates.truncate(beam);
            alive = Vec::new();
            for hyp in candidates {
                if hyp.ids.last() == Some(&EOS) {
                    finished.push(hyp);
                } else {
                    alive.push(hyp);
                }
            }
            if alive.is_empty() {
                break;
            }
        }
        finished.extend(alive);
        finished.push(Hyp {
            ids: {
                let mut ids = greedy.ids.clone();
                if greedy.ended_with_eos {
                    ids.push(EOS);
                }
                ids
            },
            logp: greedy.logp,
        });
        let best = finished
            .into_iter()
            .max_by(|a, b| {
                norm(a)
                    .partial_cmp(&norm(b))
                    .expect("finite scores")
                    .then_with(|| b.ids.cmp(&a.ids))
            })
            .expect("at least the greedy hypothesis");
        let mut ids = best.ids;
        if ids.last() == Some(&EOS) {
            ids.pop();
        }
        Ok(ids)
    }

    fn greedy_rollout(&self, enc: &EncodedSource<F>, max_len: usize) -> Result<GreedyResult> {
        let mut prefix = vec![BOS];
        let mut logp = 0.0;
        let mut ids = Vec::new();
        let mut ended_with_eos = false;
        for _ in 0..max_len {
            let probs = self.decode_step(&prefix, enc)?;
            let (argmax, p) = probs
                .iter()
                .enumerate()
                .max_by(|(_, a), (_, b)| a.partial_cmp(b).expect("finite probabilities"))
                .expect("non-empty vocabulary");
            logp += p.as_f64().max(f64::MIN_POSITIVE).ln();
            if argmax as u32 == EOS {
                ended_with_eos = true;
                break;
            }
            ids.push(argmax as u32);
            prefix.push(argmax as u32);
        }
        Ok(GreedyResult {
            ids,
            logp,
            ended_with_eos,
        })
    }
}

struct GreedyResult {
    ids: Vec<u32>,
    logp: f64,
    ended_with_eos: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wpe::{Span, SpanSet};
    use approx::assert_relative_eq;

    fn tiny_config(mode: InputMode) -> ModelConfig {
        let mut cfg = ModelConfig::desk(12, 14);
        cfg.d_model = 16;
        cfg.d_ffn = 32;
        cfg.heads = 2;
        cfg.asf_heads = 2;
        cfg.dropout = 0.0;
        cfg.input_mode = mode;
        cfg
    }

    fn spans_of(len: usize, multi: &[(usize, usize)]) -> SpanSet {
        SpanSet::from_multi_spans(
            multi.iter().map(|&(s, e)| Span::new(s, e)).collect(),
            len,
        )
        .unwrap()
    }

    #[test]
    fn pool_features_of_singleton_repeats_the_row() {
        let unit = Tensor::from_rows(&[&[1.0f64, -2.0, 3.0]]);
        let pooled = Su4mtModel::pool_features(&unit).unwrap();
        assert_eq!(pooled.shape(), &[3, 3]);
        for r in 0..3 {
            assert_eq!(pooled.row(r), unit.row(0));
        }
    }

    #[test]
    fn pool_features_hand_case() {
        let unit = Tensor::from_rows(&[&[0.0f64, 2.0], &[2.0, 0.0]]);
        let pooled = Su4mtModel::pool_features(&unit).unwrap();
        assert_eq!(pooled.row(0), &[0.0, 0.0]);
        assert_eq!(pooled.row(1), &[2.0, 2.0]);
        assert_eq!(pooled.row(2), &[1.0, 1.0]);
    }

    #[test]
    fn pool_features_order_invariant() {
        let a = Tensor::from_rows(&[&[1.0f64, 5.0], &[3.0, -1.0], &[0.0, 2.0]]);
        let b = Tensor::from_rows(&[&[0.0f64, 2.0], &[1.0, 5.0], &[3.0, -1.0]]);
        assert_eq!(
            Su4mtModel::pool_features(&a).unwrap(),
            Su4mtModel::pool_features(&b).unwrap()
        );
    }

    #[test]
    fn asf_output_shape_for_all_unit_lengths() {
        let model = Su4mtModel::<f64>::init(tiny_config(InputMode::TokenSemantic), 7).unwrap();
        for k in 1..=6 {
            let unit = Tensor::from_vec(
                vec![k, 16],
                (0..k * 16).map(|i| (i as f64 * 0.01).sin()).collect(),
            )
            .unwrap();
            let out = model.asf_forward(&unit).unwrap();
            assert_eq!(out.shape(), &[1, 16]);
        }
    }

    #[test]
    fn asf_zero_downsample_outputs_norm_bias() {
        let mut model =
            Su4mtModel::<f64>::init(tiny_config(InputMode::TokenSemantic), 7).unwrap();
        let d = model.config.d_model;
        model
            .params
            .set("asf.down.w", Tensor::zeros(vec![3 * d, d]));
        let bias: Vec<f64> = (0..d).map(|i| i as f64 * 0.5).collect();
        model.params.set(
            "asf.norm.bias",
            Tensor::from_vec(vec![d], bias.clone()).unwrap(),
        );
        let unit = Tensor::from_vec(vec![2, d], vec![0.3; 2 * d]).unwrap();
        let out = model.asf_forward(&unit).unwrap();
        for j in 0..d {
            assert_relative_eq!(out.at(0, j), bias[j], epsilon = 1e-9);
        }
    }

    #[test]
    fn asf_rejects_empty_unit() {
        let model = Su4mtModel::<f64>::init(tiny_config(InputMode::TokenSemantic), 7).unwrap();
        let unit = Tensor::<f64>::zeros(vec![0, 16]);
        assert!(model.asf_forward(&unit).is_err());
    }

    #[test]
    fn encoded_lengths_follow_the_mode_law() {
        let src: Vec<u32> = vec![4, 5, 6, 7, 8];
        let spans = spans_of(5, &[(0, 2), (3, 5)]); // units: [0,2) [2,3) [3,5)
        assert_eq!(spans.len(), 3);
        for mode in InputMode::ALL {
            let model = Su4mtModel::<f64>::init(tiny_config(mode), 3).unwrap();
            let enc = model.encode(&src, &spans).unwrap();
            assert_eq!(enc.len(), mode.encoded_len(5, 3), "{mode}");
            assert_eq!(enc.states.cols(), 16);
        }
    }

    #[test]
    fn all_singleton_token_semantic_doubles_length() {
        let model = Su4mtModel::<f64>::init(tiny_config(InputMode::TokenSemantic), 3).unwrap();
        let src: Vec<u32> = vec![4, 5, 6];
        let enc = model.encode(&src, &SpanSet::singletons(3)).unwrap();
        assert_eq!(enc.len(), 6);
    }

    #[test]
    fn encode_rejects_span_mismatch_and_bad_ids() {
        let model = Su4mtModel::<f64>::init(tiny_config(InputMode::TokenSemantic), 3).unwrap();
        assert!(matches!(
            model.encode(&[4, 5], &SpanSet::singletons(3)),
            Err(Error::SpanMismatch(_))
        ));
        assert!(matches!(
            model.encode(&[4, 999], &SpanSet::singletons(2)),
            Err(Error::UnknownTokenId { .. })
        ));
    }

    #[test]
    fn decode_step_distribution_sums_to_one() {
        let model = Su4mtModel::<f64>::init(tiny_config(InputMode::TokenSemantic), 5).unwrap();
        let enc = model.encode(&[4, 5, 6], &SpanSet::singletons(3)).unwrap();
        let probs = model.decode_step(&[BOS, 4], &enc).unwrap();
        assert_eq!(probs.len(), 14);
        assert_relative_eq!(probs.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        let again = model.decode_step(&[BOS, 4], &enc).unwrap();
        assert_eq!(probs, again);
    }

    #[test]
    fn decode_step_requires_bos_and_bounded_prefix() {
        let mut cfg = tiny_config(InputMode::TokenOnly);
        cfg.max_len = 4;
        let model = Su4mtModel::<f64>::init(cfg, 5).unwrap();
        let enc = model.encode(&[4, 5], &SpanSet::singletons(2)).unwrap();
        assert!(model.decode_step(&[4, 5], &enc).is_err());
        assert!(matches!(
            model.decode_step(&[BOS, 4, 5, 6, 7], &enc),
            Err(Error::PrefixTooLong { .. })
        ));
    }

    #[test]
    fn greedy_equals_iterated_argmax() {
        let model = Su4mtModel::<f64>::init(tiny_config(InputMode::TokenSemantic), 11).unwrap();
        let spans = SpanSet::singletons(3);
        let src = [4u32, 5, 6];
        let out = model.translate(&src, &spans, 1).unwrap();

        let enc = model.encode(&src, &spans).unwrap();
        let mut prefix = vec![BOS];
        let mut expect = Vec::new();
        for _ in 0..(2 * src.len() + 16) {
            let probs = model.decode_step(&prefix, &enc).unwrap();
            let argmax = probs
                .iter()
                .enumerate()
                .max_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap())
                .unwrap()
                .0 as u32;
            if argmax == EOS {
                break;
            }
            expect.push(argmax);
            prefix.push(argmax);
        }
        assert_eq!(out, expect);
    }

    #[test]
    fn one_token_source_terminates() {
        let model = Su4mtModel::<f64>::init(tiny_config(InputMode::TokenSemantic), 13).unwrap();
        let out = model.translate(&[4], &SpanSet::singletons(1), 2).unwrap();
        assert!(out.len() <= 2 + 16);
    }

    fn normalized_score(
        model: &Su4mtModel<f64>,
        src: &[u32],
        spans: &SpanSet,
        ids: &[u32],
    ) -> f64 {
        let enc = model.encode(src, spans).unwrap();
        let mut prefix = vec![BOS];
        let mut logp = 0.0;
        let mut count = 0usize;
        for &id in ids {
            let probs = model.decode_step(&prefix, &enc).unwrap();
            logp += probs[id as usize].max(f64::MIN_POSITIVE).ln();
            prefix.push(id);
            count += 1;
        }
        // Account for the EOS step the search scores when it finishes.
        let probs = model.decode_step(&prefix, &enc).unwrap();
        logp += probs[EOS as usize].max(f64::MIN_POSITIVE).ln();
        count += 1;
        logp / count as f64
    }

    #[test]
    fn wider_beam_never_scores_below_greedy() {
        for seed in [1u64, 2, 3, 4, 5] {
            let model =
                Su4mtModel::<f64>::init(tiny_config(InputMode::TokenSemantic), seed).unwrap();
            let spans = spans_of(4, &[(1, 3)]);
            let src = [4u32, 5, 6, 7];
            let greedy = model.translate(&src, &spans, 1).unwrap();
            let beamed = model.translate(&src, &spans, 4).unwrap();
            let gs = normalized_score(&model, &src, &spans, &greedy);
            let bs = normalized_score(&model, &src, &spans, &beamed);
            assert!(bs >= gs - 1e-9, "seed {seed}: beam {bs} < greedy {gs}");
        }
    }

    #[test]
    fn config_kv_roundtrip() {
        let cfg = tiny_config(InputMode::SemanticDouble);
        let parsed = ModelConfig::from_kv(&cfg.to_kv()).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn shared_fusion_parameters_are_flagged() {
        assert!(Su4mtModel::<f32>::is_fusion_param("asf.down.w"));
        assert!(Su4mtModel::<f32>::is_fusion_param("input_norm.gain"));
        assert!(!Su4mtModel::<f32>::is_fusion_param("enc.embed"));
        assert!(!Su4mtModel::<f32>::is_fusion_param("dec.l1.cross.wq"));
    }
}
