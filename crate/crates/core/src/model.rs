//! Encoder–decoder transformer, parameterized by encoding kind.
//!
//! Post-norm layer arrangement: each sub-layer output is dropped out, added
//! to the residual stream, then layer-normalized. Position information
//! enters either as an additive table at the embedding (the default) or, when
//! `rope_enabled` is set, as rotary block transforms applied to per-head
//! queries and keys inside every attention — never both.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TokenMatrix;
use crate::error::{Error, Result};
use crate::kernels::PeriodicKind;
use crate::pe::{build_table, PeConfig, PeTable};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Additive attention-mask value for silenced slots.
pub const MASK_NEG: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout_p: f64,
    pub max_len: usize,
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
    pub encoding: PeriodicKind,
    /// Multiply embeddings by √d_model before adding the position table
    /// (reference-implementation behavior; the plain equations omit it).
    pub embed_scaling: bool,
    /// Use rotary transforms in attention instead of the additive table.
    pub rope_enabled: bool,
    /// Frequency base shared by the table and the rotary schedule.
    pub pe_base: f64,
}

impl ModelConfig {
    /// Reduced configuration for laptop-scale experiments.
    pub fn desk(encoding: PeriodicKind, src_vocab_size: usize, tgt_vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            dropout_p: 0.1,
            max_len: 256,
            src_vocab_size,
            tgt_vocab_size,
            encoding,
            embed_scaling: true,
            rope_enabled: false,
            pe_base: 10000.0,
        }
    }

    /// Transformer base configuration: d_model 512, 6 layers, 8 heads,
    /// d_ff 2048, dropout 0.1.
    pub fn paper_base(encoding: PeriodicKind, src_vocab_size: usize, tgt_vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 512,
            n_layers: 6,
            n_heads: 8,
            d_ff: 2048,
            dropout_p: 0.1,
            max_len: 256,
            src_vocab_size,
            tgt_vocab_size,
            encoding,
            embed_scaling: true,
            rope_enabled: false,
            pe_base: 10000.0,
        }
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return Err(Error::config(format!(
                "d_model must be a positive even integer, got {}",
                self.d_model
            )));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.rope_enabled && self.d_k() % 2 != 0 {
            return Err(Error::config(format!(
                "rope needs an even per-head width, got d_k {}",
                self.d_k()
            )));
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.max_len == 0 {
            return Err(Error::config("n_layers, d_ff and max_len must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout_p
            )));
        }
        if self.src_vocab_size < 4 || self.tgt_vocab_size < 4 {
            return Err(Error::config("vocabularies must include the four specials"));
        }
        if !(self.pe_base > 1.0) || !self.pe_base.is_finite() {
            return Err(Error::config(format!(
                "pe_base must be a finite real > 1, got {}",
                self.pe_base
            )));
        }
        Ok(())
    }

    /// Number of learned scalars implied by this configuration.
    pub fn param_count(&self) -> usize {
        let (d, ff) = (self.d_model, self.d_ff);
        let linear = |i: usize, o: usize| i * o + o;
        let attn = 4 * linear(d, d);
        let norm = 2 * d;
        let ffn = linear(d, ff) + linear(ff, d);
        let enc_layer = attn + norm + ffn + norm;
        let dec_layer = attn + norm + attn + norm + ffn + norm;
        self.src_vocab_size * d
            + self.tgt_vocab_size * d
            + self.n_layers * (enc_layer + dec_layer)
            + linear(d, self.tgt_vocab_size)
    }
}

/// Forward pass mode; dropout is active only in `Train`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LinearParams<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct NormParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct AttnParams<T> {
    pub q: LinearParams<T>,
    pub k: LinearParams<T>,
    pub v: LinearParams<T>,
    pub o: LinearParams<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct EncoderLayerParams<T> {
    pub attn: AttnParams<T>,
    pub norm1: NormParams<T>,
    pub ff1: LinearParams<T>,
    pub ff2: LinearParams<T>,
    pub norm2: NormParams<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct DecoderLayerParams<T> {
    pub self_attn: AttnParams<T>,
    pub norm1: NormParams<T>,
    pub cross_attn: AttnParams<T>,
    pub norm2: NormParams<T>,
    pub ff1: LinearParams<T>,
    pub ff2: LinearParams<T>,
    pub norm3: NormParams<T>,
}

/// All learned parameters plus the two precomputed position tables.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    pub config: ModelConfig,
    pub(crate) src_embed: Tensor<T>,
    pub(crate) tgt_embed: Tensor<T>,
    pub(crate) encoder: Vec<EncoderLayerParams<T>>,
    pub(crate) decoder: Vec<DecoderLayerParams<T>>,
    pub(crate) out_proj: LinearParams<T>,
    pub(crate) src_pe: PeTable<T>,
    pub(crate) tgt_pe: PeTable<T>,
}

fn xavier<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<T> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| T::from_f64_lossy((rng.random::<f64>() * 2.0 - 1.0) * bound))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("xavier shape")
}

fn linear_init<T: Scalar>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> LinearParams<T> {
    LinearParams {
        w: xavier(rng, fan_in, fan_out),
        b: Tensor::zeros(vec![fan_out]),
    }
}

fn norm_init<T: Scalar>(d: usize) -> NormParams<T> {
    NormParams {
        gamma: Tensor::filled(vec![d], T::one()),
        beta: Tensor::zeros(vec![d]),
    }
}

fn attn_init<T: Scalar>(rng: &mut ChaCha8Rng, d: usize) -> AttnParams<T> {
    AttnParams {
        q: linear_init(rng, d, d),
        k: linear_init(rng, d, d),
        v: linear_init(rng, d, d),
        o: linear_init(rng, d, d),
    }
}

impl<T: Scalar> ModelState<T> {
    /// Seed-controlled initialization: uniform Xavier for linear and
    /// embedding weights, zeros for biases, ones/zeros for layer norms.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let src_embed = xavier(&mut rng, config.src_vocab_size, d);
        let tgt_embed = xavier(&mut rng, config.tgt_vocab_size, d);
        let encoder = (0..config.n_layers)
            .map(|_| EncoderLayerParams {
                attn: attn_init(&mut rng, d),
                norm1: norm_init(d),
                ff1: linear_init(&mut rng, d, config.d_ff),
                ff2: linear_init(&mut rng, config.d_ff, d),
                norm2: norm_init(d),
            })
            .collect();
        let decoder = (0..config.n_layers)
            .map(|_| DecoderLayerParams {
                self_attn: attn_init(&mut rng, d),
                norm1: norm_init(d),
                cross_attn: attn_init(&mut rng, d),
                norm2: norm_init(d),
                ff1: linear_init(&mut rng, d, config.d_ff),
                ff2: linear_init(&mut rng, config.d_ff, d),
                norm3: norm_init(d),
            })
            .collect();
        let out_proj = linear_init(&mut rng, d, config.tgt_vocab_size);
        let pe_cfg = PeConfig {
            d_model: d,
            max_len: config.max_len,
            base: config.pe_base,
            kind: config.encoding,
        };
        Ok(ModelState {
            src_pe: build_table(pe_cfg)?,
            tgt_pe: build_table(pe_cfg)?,
            config,
            src_embed,
            tgt_embed,
            encoder,
            decoder,
            out_proj,
        })
    }

    /// Visit every parameter tensor with a stable name, in a fixed order.
    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f("src_embed", &self.src_embed);
        f("tgt_embed", &self.tgt_embed);
        let visit_linear = |name: String, p: &LinearParams<T>, f: &mut dyn FnMut(&str, &Tensor<T>)| {
            f(&format!("{name}.w"), &p.w);
            f(&format!("{name}.b"), &p.b);
        };
        let visit_norm = |name: String, p: &NormParams<T>, f: &mut dyn FnMut(&str, &Tensor<T>)| {
            f(&format!("{name}.gamma"), &p.gamma);
            f(&format!("{name}.beta"), &p.beta);
        };
        let visit_attn = |name: String, p: &AttnParams<T>, f: &mut dyn FnMut(&str, &Tensor<T>)| {
            visit_linear(format!("{name}.q"), &p.q, f);
            visit_linear(format!("{name}.k"), &p.k, f);
            visit_linear(format!("{name}.v"), &p.v, f);
            visit_linear(format!("{name}.o"), &p.o, f);
        };
        for (i, layer) in self.encoder.iter().enumerate() {
            visit_attn(format!("enc{i}.attn"), &layer.attn, f);
            visit_norm(format!("enc{i}.norm1"), &layer.norm1, f);
            visit_linear(format!("enc{i}.ff1"), &layer.ff1, f);
            visit_linear(format!("enc{i}.ff2"), &layer.ff2, f);
            visit_norm(format!("enc{i}.norm2"), &layer.norm2, f);
        }
        for (i, layer) in self.decoder.iter().enumerate() {
            visit_attn(format!("dec{i}.self_attn"), &layer.self_attn, f);
            visit_norm(format!("dec{i}.norm1"), &layer.norm1, f);
            visit_attn(format!("dec{i}.cross_attn"), &layer.cross_attn, f);
            visit_norm(format!("dec{i}.norm2"), &layer.norm2, f);
            visit_linear(format!("dec{i}.ff1"), &layer.ff1, f);
            visit_linear(format!("dec{i}.ff2"), &layer.ff2, f);
            visit_norm(format!("dec{i}.norm3"), &layer.norm3, f);
        }
        visit_linear("out_proj".to_string(), &self.out_proj, f);
    }

    /// Mutable counterpart of [`visit_params`], same order and names.
    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        fn lin<T>(name: String, p: &mut LinearParams<T>, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
            f(&format!("{name}.w"), &mut p.w);
            f(&format!("{name}.b"), &mut p.b);
        }
        fn norm<T>(name: String, p: &mut NormParams<T>, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
            f(&format!("{name}.gamma"), &mut p.gamma);
            f(&format!("{name}.beta"), &mut p.beta);
        }
        fn attn<T>(name: String, p: &mut AttnParams<T>, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
            lin(format!("{name}.q"), &mut p.q, f);
            lin(format!("{name}.k"), &mut p.k, f);
            lin(format!("{name}.v"), &mut p.v, f);
            lin(format!("{name}.o"), &mut p.o, f);
        }
        f("src_embed", &mut self.src_embed);
        f("tgt_embed", &mut self.tgt_embed);
        for (i, layer) in self.encoder.iter_mut().enumerate() {
            attn(format!("enc{i}.attn"), &mut layer.attn, f);
            norm(format!("enc{i}.norm1"), &mut layer.norm1, f);
            lin(format!("enc{i}.ff1"), &mut layer.ff1, f);
            lin(format!("enc{i}.ff2"), &mut layer.ff2, f);
            norm(format!("enc{i}.norm2"), &mut layer.norm2, f);
        }
        for (i, layer) in self.decoder.iter_mut().enumerate() {
            attn(format!("dec{i}.self_attn"), &mut layer.self_attn, f);
            norm(format!("dec{i}.norm1"), &mut layer.norm1, f);
            attn(format!("dec{i}.cross_attn"), &mut layer.cross_attn, f);
            norm(format!("dec{i}.norm2"), &mut layer.norm2, f);
            lin(format!("dec{i}.ff1"), &mut layer.ff1, f);
            lin(format!("dec{i}.ff2"), &mut layer.ff2, f);
            norm(format!("dec{i}.norm3"), &mut layer.norm3, f);
        }
        lin("out_proj".into(), &mut self.out_proj, f);
    }

    /// Actual number of learned scalars; equals `config.param_count()`.
    pub fn param_count(&self) -> usize {
        let mut total = 0;
        self.visit_params(&mut |_, t| total += t.numel());
        total
    }
}

/// Parameter leaves registered on a tape for one forward pass, in
/// `visit_params` order.
pub struct BoundParams {
    pub vars: Vec<Var>,
    pub names: Vec<String>,
}

struct BoundLinear {
    w: Var,
    b: Var,
}

struct BoundNorm {
    gamma: Var,
    beta: Var,
}

struct BoundAttn {
    q: BoundLinear,
    k: BoundLinear,
    v: BoundLinear,
    o: BoundLinear,
}

struct BoundEncoderLayer {
    attn: BoundAttn,
    norm1: BoundNorm,
    ff1: BoundLinear,
    ff2: BoundLinear,
    norm2: BoundNorm,
}

struct BoundDecoderLayer {
    self_attn: BoundAttn,
    norm1: BoundNorm,
    cross_attn: BoundAttn,
    norm2: BoundNorm,
    ff1: BoundLinear,
    ff2: BoundLinear,
    norm3: BoundNorm,
}

struct BoundModel {
    src_embed: Var,
    tgt_embed: Var,
    encoder: Vec<BoundEncoderLayer>,
    decoder: Vec<BoundDecoderLayer>,
    out_proj: BoundLinear,
}

struct Binder<'a, T: Scalar> {
    tape: &'a mut Tape<T>,
    trainable: bool,
    vars: Vec<Var>,
    names: Vec<String>,
}

impl<'a, T: Scalar> Binder<'a, T> {
    fn bind(&mut self, name: String, t: &Tensor<T>) -> Result<Var> {
        let v = self.tape.leaf(t.clone(), self.trainable)?;
        self.vars.push(v);
        self.names.push(name);
        Ok(v)
    }

    fn linear(&mut self, name: &str, p: &LinearParams<T>) -> Result<BoundLinear> {
        Ok(BoundLinear {
            w: self.bind(format!("{name}.w"), &p.w)?,
            b: self.bind(format!("{name}.b"), &p.b)?,
        })
    }

    fn norm(&mut self, name: &str, p: &NormParams<T>) -> Result<BoundNorm> {
        Ok(BoundNorm {
            gamma: self.bind(format!("{name}.gamma"), &p.gamma)?,
            beta: self.bind(format!("{name}.beta"), &p.beta)?,
        })
    }

    fn attn(&mut self, name: &str, p: &AttnParams<T>) -> Result<BoundAttn> {
        Ok(BoundAttn {
            q: self.linear(&format!("{name}.q"), &p.q)?,
            k: self.linear(&format!("{name}.k"), &p.k)?,
            v: self.linear(&format!("{name}.v"), &p.v)?,
            o: self.linear(&format!("{name}.o"), &p.o)?,
        })
    }
}

/// Additive attention mask over keys: `[B·H, Tq, Tk]` with 0 at visible
/// slots and [`MASK_NEG`] at padded keys (and future keys when `causal`).
fn attention_mask<T: Scalar>(
    batch: usize,
    n_heads: usize,
    t_q: usize,
    t_k: usize,
    key_pad: &[bool],
    causal: bool,
) -> Tensor<T> {
    let neg = T::from_f64_lossy(MASK_NEG);
    let mut data = vec![T::zero(); batch * n_heads * t_q * t_k];
    let mut idx = 0;
    for b in 0..batch {
        for _h in 0..n_heads {
            for q in 0..t_q {
                for k in 0..t_k {
                    let masked = key_pad[b * t_k + k] || (causal && k > q);
                    data[idx] = if masked { neg } else { T::zero() };
                    idx += 1;
                }
            }
        }
    }
    Tensor::new(vec![batch * n_heads, t_q, t_k], data).expect("mask shape")
}

struct ForwardCtx<'r> {
    mode: Mode,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl<T: Scalar> ModelState<T> {
    fn maybe_dropout(&self, tape: &mut Tape<T>, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        if ctx.mode == Mode::Train && self.config.dropout_p > 0.0 {
            let rng = ctx.rng.as_deref_mut().ok_or_else(|| {
                Error::contract("train-mode forward requires a dropout RNG")
            })?;
            tape.dropout(x, self.config.dropout_p, rng)
        } else {
            Ok(x)
        }
    }

    /// Token embedding + positional injection + dropout for one side.
    fn embed(
        &self,
        tape: &mut Tape<T>,
        embed_table: Var,
        pe: &PeTable<T>,
        tokens: &TokenMatrix,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let (b, t) = (tokens.rows, tokens.cols);
        let mut x = tape.embedding_lookup(embed_table, &tokens.data, &[b, t])?;
        if self.config.embed_scaling {
            x = tape.scale(x, T::from_f64_lossy((self.config.d_model as f64).sqrt()))?;
        }
        if !self.config.rope_enabled {
            // tile table rows into [B, T, d] and add
            let d = self.config.d_model;
            let mut data = Vec::with_capacity(b * t * d);
            for _ in 0..b {
                data.extend_from_slice(&pe.values().data()[..t * d]);
            }
            let rows = tape.constant(Tensor::new(vec![b, t, d], data)?)?;
            x = tape.add(x, rows)?;
        }
        self.maybe_dropout(tape, x, ctx)
    }

    fn attention(
        &self,
        tape: &mut Tape<T>,
        p: &BoundAttn,
        x_q: Var,
        x_kv: Var,
        mask: &Tensor<T>,
    ) -> Result<Var> {
        let h = self.config.n_heads;
        let q = tape.matmul(x_q, p.q.w)?;
        let q = tape.add_bias(q, p.q.b)?;
        let k = tape.matmul(x_kv, p.k.w)?;
        let k = tape.add_bias(k, p.k.b)?;
        let v = tape.matmul(x_kv, p.v.w)?;
        let v = tape.add_bias(v, p.v.b)?;
        let mut qh = tape.split_heads(q, h)?;
        let mut kh = tape.split_heads(k, h)?;
        if self.config.rope_enabled {
            qh = tape.rope_apply(qh, self.config.encoding, self.config.pe_base)?;
            kh = tape.rope_apply(kh, self.config.encoding, self.config.pe_base)?;
        }
        let vh = tape.split_heads(v, h)?;
        let kt = tape.transpose_last(kh)?;
        let scores = tape.bmm(qh, kt)?;
        let scaled = tape.scale(scores, T::from_f64_lossy(1.0 / (self.config.d_k() as f64).sqrt()))?;
        let probs = tape.softmax_rows(scaled, Some(mask))?;
        let ctx_heads = tape.bmm(probs, vh)?;
        let merged = tape.merge_heads(ctx_heads, h)?;
        let out = tape.matmul(merged, p.o.w)?;
        tape.add_bias(out, p.o.b)
    }

    fn sublayer_finish(
        &self,
        tape: &mut Tape<T>,
        residual: Var,
        sublayer_out: Var,
        norm: &BoundNorm,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let dropped = self.maybe_dropout(tape, sublayer_out, ctx)?;
        let added = tape.add(residual, dropped)?;
        tape.layer_norm(added, norm.gamma, norm.beta, T::from_f64_lossy(LAYER_NORM_EPS))
    }

    fn feed_forward(
        &self,
        tape: &mut Tape<T>,
        ff1: &BoundLinear,
        ff2: &BoundLinear,
        x: Var,
    ) -> Result<Var> {
        let hidden = tape.matmul(x, ff1.w)?;
        let hidden = tape.add_bias(hidden, ff1.b)?;
        let hidden = tape.relu(hidden)?;
        let out = tape.matmul(hidden, ff2.w)?;
        tape.add_bias(out, ff2.b)
    }

    fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Result<(BoundModel, BoundParams)> {
        let mut binder = Binder {
            tape,
            trainable,
            vars: Vec::new(),
            names: Vec::new(),
        };
        let src_embed = binder.bind("src_embed".into(), &self.src_embed)?;
        let tgt_embed = binder.bind("tgt_embed".into(), &self.tgt_embed)?;
        let mut encoder = Vec::with_capacity(self.encoder.len());
        for (i, layer) in self.encoder.iter().enumerate() {
            encoder.push(BoundEncoderLayer {
                attn: binder.attn(&format!("enc{i}.attn"), &layer.attn)?,
                norm1: binder.norm(&format!("enc{i}.norm1"), &layer.norm1)?,
                ff1: binder.linear(&format!("enc{i}.ff1"), &layer.ff1)?,
                ff2: binder.linear(&format!("enc{i}.ff2"), &layer.ff2)?,
                norm2: binder.norm(&format!("enc{i}.norm2"), &layer.norm2)?,
            });
        }
        let mut decoder = Vec::with_capacity(self.decoder.len());
        for (i, layer) in self.decoder.iter().enumerate() {
            decoder.push(BoundDecoderLayer {
                self_attn: binder.attn(&format!("dec{i}.self_attn"), &layer.self_attn)?,
                norm1: binder.norm(&format!("dec{i}.norm1"), &layer.norm1)?,
                cross_attn: binder.attn(&format!("dec{i}.cross_attn"), &layer.cross_attn)?,
                norm2: binder.norm(&format!("dec{i}.norm2"), &layer.norm2)?,
                ff1: binder.linear(&format!("dec{i}.ff1"), &layer.ff1)?,
                ff2: binder.linear(&format!("dec{i}.ff2"), &layer.ff2)?,
                norm3: binder.norm(&format!("dec{i}.norm3"), &layer.norm3)?,
            });
        }
        let out_proj = binder.linear("out_proj", &self.out_proj)?;
        let bound = BoundModel {
            src_embed,
            tgt_embed,
            encoder,
            decoder,
            out_proj,
        };
        Ok((
            bound,
            BoundParams {
                vars: binder.vars,
                names: binder.names,
            },
        ))
    }

    fn check_lengths(&self, tokens: &TokenMatrix) -> Result<()> {
        if tokens.cols > self.config.max_len {
            return Err(Error::length(format!(
                "sequence length {} exceeds max_len {}",
                tokens.cols, self.config.max_len
            )));
        }
        Ok(())
    }

    fn encode_side(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundModel,
        src: &TokenMatrix,
        src_pad: &[bool],
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let (b, ts) = (src.rows, src.cols);
        let mask = attention_mask::<T>(b, self.config.n_heads, ts, ts, src_pad, false);
        let mut x = self.embed(tape, bound.src_embed, &self.src_pe, src, ctx)?;
        for layer in &bound.encoder {
            let attn_out = self.attention(tape, &layer.attn, x, x, &mask)?;
            x = self.sublayer_finish(tape, x, attn_out, &layer.norm1, ctx)?;
            let ff = self.feed_forward(tape, &layer.ff1, &layer.ff2, x)?;
            x = self.sublayer_finish(tape, x, ff, &layer.norm2, ctx)?;
        }
        Ok(x)
    }

    #[allow(clippy::too_many_arguments)]
    fn decode_side(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundModel,
        memory: Var,
        src_pad: &[bool],
        dec_in: &TokenMatrix,
        dec_pad: &[bool],
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let (b, tt) = (dec_in.rows, dec_in.cols);
        let ts = tape.value(memory).dim(1);
        let self_mask = attention_mask::<T>(b, self.config.n_heads, tt, tt, dec_pad, true);
        let cross_mask = attention_mask::<T>(b, self.config.n_heads, tt, ts, src_pad, false);
        let mut y = self.embed(tape, bound.tgt_embed, &self.tgt_pe, dec_in, ctx)?;
        for layer in &bound.decoder {
            let self_out = self.attention(tape, &layer.self_attn, y, y, &self_mask)?;
            y = self.sublayer_finish(tape, y, self_out, &layer.norm1, ctx)?;
            let cross_out = self.attention(tape, &layer.cross_attn, y, memory, &cross_mask)?;
            y = self.sublayer_finish(tape, y, cross_out, &layer.norm2, ctx)?;
            let ff = self.feed_forward(tape, &layer.ff1, &layer.ff2, y)?;
            y = self.sublayer_finish(tape, y, ff, &layer.norm3, ctx)?;
        }
        let logits = tape.matmul(y, bound.out_proj.w)?;
        tape.add_bias(logits, bound.out_proj.b)
    }

    /// Full encoder–decoder pass. Returns the `[B, T_dec, tgt_vocab]` logits
    /// var and the bound parameter registry for gradient collection.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        src: &TokenMatrix,
        src_pad: &[bool],
        dec_in: &TokenMatrix,
        dec_pad: &[bool],
        mode: Mode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, BoundParams)> {
        self.check_lengths(src)?;
        self.check_lengths(dec_in)?;
        let mut ctx = ForwardCtx { mode, rng };
        let (bound, params) = self.bind(tape, mode == Mode::Train)?;
        let memory = self.encode_side(tape, &bound, src, src_pad, &mut ctx)?;
        let logits = self.decode_side(tape, &bound, memory, src_pad, dec_in, dec_pad, &mut ctx)?;
        Ok((logits, params))
    }

    /// Greedy autoregressive decoding of one encoded source sequence
    /// (including its `<sos>`/`<eos>` brackets). Deterministic; stops at
    /// `<eos>` or after `max_steps` tokens; the output excludes specials.
    pub fn greedy_decode(&self, src: &[usize], max_steps: usize) -> Result<Vec<usize>> {
        Ok(self
            .greedy_decode_batch(std::slice::from_ref(&src.to_vec()), max_steps)?
            .remove(0))
    }

    /// Batched greedy decoding; one encoder pass, one decoder pass per step.
    pub fn greedy_decode_batch(
        &self,
        srcs: &[Vec<usize>],
        max_steps: usize,
    ) -> Result<Vec<Vec<usize>>> {
        use crate::data::{EOS, PAD, SOS};
        if srcs.is_empty() {
            return Ok(Vec::new());
        }
        let b = srcs.len();
        let ts = srcs.iter().map(|s| s.len()).max().unwrap();
        let mut src_data = Vec::with_capacity(b * ts);
        let mut src_pad = Vec::with_capacity(b * ts);
        for s in srcs {
            src_data.extend_from_slice(s);
            src_pad.extend(std::iter::repeat(false).take(s.len()));
            src_data.extend(std::iter::repeat(PAD).take(ts - s.len()));
            src_pad.extend(std::iter::repeat(true).take(ts - s.len()));
        }
        let src = TokenMatrix {
            rows: b,
            cols: ts,
            data: src_data,
        };
        self.check_lengths(&src)?;

        // encode once, reuse the memory tensor across steps
        let mut enc_tape = Tape::new();
        let memory_value = {
            let mut ctx = ForwardCtx {
                mode: Mode::Eval,
                rng: None,
            };
            let (bound, _) = self.bind(&mut enc_tape, false)?;
            let memory = self.encode_side(&mut enc_tape, &bound, &src, &src_pad, &mut ctx)?;
            enc_tape.value(memory).clone()
        };

        let mut prefixes: Vec<Vec<usize>> = vec![vec![SOS]; b];
        let mut done = vec![false; b];
        for _ in 0..max_steps {
            let tt = prefixes[0].len();
            if tt >= self.config.max_len {
                break;
            }
            let mut dec_data = Vec::with_capacity(b * tt);
            let mut dec_pad = Vec::with_capacity(b * tt);
            for p in &prefixes {
                dec_data.extend_from_slice(p);
                dec_pad.extend(p.iter().map(|&tok| tok == PAD));
            }
            let dec_in = TokenMatrix {
                rows: b,
                cols: tt,
                data: dec_data,
            };
            let mut tape = Tape::new();
            let mut ctx = ForwardCtx {
                mode: Mode::Eval,
                rng: None,
            };
            let (bound, _) = self.bind(&mut tape, false)?;
            let memory = tape.constant(memory_value.clone())?;
            let logits = self.decode_side(
                &mut tape, &bound, memory, &src_pad, &dec_in, &dec_pad, &mut ctx,
            )?;
            let lv = tape.value(logits);
            let vocab = self.config.tgt_vocab_size;
            for (bi, prefix) in prefixes.iter_mut().enumerate() {
                if done[bi] {
                    prefix.push(PAD);
                    continue;
                }
                let row = &lv.data()[(bi * tt + tt - 1) * vocab..(bi * tt + tt) * vocab];
                let mut best = 0usize;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                prefix.push(best);
                if best == EOS {
                    done[bi] = true;
                }
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(prefixes
            .into_iter()
            .map(|p| {
                p.into_iter()
                    .skip(1) // <sos>
                    .take_while(|&tok| tok != EOS && tok != PAD)
                    .collect()
            })
            .collect())
    }
}

/// Decoder input for teacher forcing: the target matrix minus its last
/// column, with the matching pad mask.
pub fn decoder_input(tgt: &TokenMatrix, tgt_pad: &[bool]) -> (TokenMatrix, Vec<bool>) {
    let cols = tgt.cols - 1;
    let mut data = Vec::with_capacity(tgt.rows * cols);
    let mut pad = Vec::with_capacity(tgt.rows * cols);
    for r in 0..tgt.rows {
        data.extend_from_slice(&tgt.row(r)[..cols]);
        pad.extend_from_slice(&tgt_pad[r * tgt.cols..r * tgt.cols + cols]);
    }
    (
        TokenMatrix {
            rows: tgt.rows,
            cols,
            data,
        },
        pad,
    )
}

/// Teacher-forcing targets: the target matrix shifted left by one, flattened
/// row-major (`<pad>` slots are ignored by the loss).
pub fn decoder_targets(tgt: &TokenMatrix) -> Vec<usize> {
    let cols = tgt.cols - 1;
    let mut out = Vec::with_capacity(tgt.rows * cols);
    for r in 0..tgt.rows {
        out.extend_from_slice(&tgt.row(r)[1..]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{EOS, PAD, SOS};

    fn tiny_config(encoding: PeriodicKind) -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            dropout_p: 0.0,
            max_len: 32,
            src_vocab_size: 12,
            tgt_vocab_size: 12,
            encoding,
            embed_scaling: true,
            rope_enabled: false,
            pe_base: 10000.0,
        }
    }

    fn matrix(rows: Vec<Vec<usize>>) -> (TokenMatrix, Vec<bool>) {
        let cols = rows.iter().map(|r| r.len()).max().unwrap();
        let mut data = Vec::new();
        let mut pad = Vec::new();
        for mut r in rows {
            while r.len() < cols {
                r.push(PAD);
            }
            pad.extend(r.iter().map(|&t| t == PAD));
            data.extend(r);
        }
        (
            TokenMatrix {
                rows: data.len() / cols,
                cols,
                data,
            },
            pad,
        )
    }

    fn forward_logits(state: &ModelState<f64>, src: &[Vec<usize>], tgt: &[Vec<usize>]) -> Tensor<f64> {
        let (src_m, src_pad) = matrix(src.to_vec());
        let (tgt_m, tgt_pad) = matrix(tgt.to_vec());
        let (dec_in, dec_pad) = decoder_input(&tgt_m, &tgt_pad);
        let mut tape = Tape::new();
        let (logits, _) = state
            .forward(&mut tape, &src_m, &src_pad, &dec_in, &dec_pad, Mode::Eval, None)
            .unwrap();
        tape.value(logits).clone()
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_config(PeriodicKind::Sinusoidal);
        assert!(cfg.validate().is_ok());
        cfg.n_heads = 3;
        assert!(cfg.validate().is_err()); // 16 % 3 != 0
        let mut cfg = tiny_config(PeriodicKind::Sinusoidal);
        cfg.dropout_p = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn presets_match_reference_scales() {
        let paper = ModelConfig::paper_base(PeriodicKind::Sinusoidal, 100, 100);
        assert_eq!(
            (paper.d_model, paper.n_layers, paper.n_heads, paper.d_ff),
            (512, 6, 8, 2048)
        );
        assert_eq!(paper.dropout_p, 0.1);
        let desk = ModelConfig::desk(PeriodicKind::Sinusoidal, 100, 100);
        assert_eq!(
            (desk.d_model, desk.n_layers, desk.n_heads, desk.d_ff),
            (64, 2, 4, 256)
        );
    }

    #[test]
    fn param_count_matches_config_formula() {
        let state = ModelState::<f64>::init(tiny_config(PeriodicKind::Triangular), 0).unwrap();
        assert_eq!(state.param_count(), state.config.param_count());
        let desk = ModelState::<f64>::init(
            ModelConfig::desk(PeriodicKind::Sinusoidal, 54, 54),
            1,
        )
        .unwrap();
        assert_eq!(desk.param_count(), desk.config.param_count());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = tiny_config(PeriodicKind::Square);
        let a = ModelState::<f64>::init(cfg, 5).unwrap();
        let b = ModelState::<f64>::init(cfg, 5).unwrap();
        assert_eq!(a, b);
        let c = ModelState::<f64>::init(cfg, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn bind_order_matches_visit_order() {
        let state = ModelState::<f64>::init(tiny_config(PeriodicKind::Sinusoidal), 0).unwrap();
        let mut tape = Tape::new();
        let (_, params) = state.bind(&mut tape, true).unwrap();
        let mut visit_names = Vec::new();
        state.visit_params(&mut |name, _| visit_names.push(name.to_string()));
        assert_eq!(params.names, visit_names);
        let mut mut_names = Vec::new();
        let mut state = state;
        state.visit_params_mut(&mut |name, _| mut_names.push(name.to_string()));
        assert_eq!(mut_names, visit_names);
    }

    #[test]
    fn forward_shapes_and_finiteness() {
        for kind in PeriodicKind::ALL {
            let state = ModelState::<f64>::init(tiny_config(kind), 3).unwrap();
            let logits = forward_logits(
                &state,
                &[vec![SOS, 5, 6, EOS], vec![SOS, 7, EOS]],
                &[vec![SOS, 8, 9, EOS], vec![SOS, 10, EOS]],
            );
            assert_eq!(logits.shape(), &[2, 3, 12]);
            assert!(logits.is_all_finite());
        }
    }

    #[test]
    fn causality_future_target_tokens_cannot_leak() {
        let state = ModelState::<f64>::init(tiny_config(PeriodicKind::Triangular), 9).unwrap();
        let src = vec![vec![SOS, 4, 5, 6, EOS]];
        let base = forward_logits(&state, &src, &[vec![SOS, 7, 8, 9, EOS]]);
        let perturbed = forward_logits(&state, &src, &[vec![SOS, 7, 8, 10, 11]]);
        // positions 0..=1 depend only on targets 0..=1, unchanged above
        let vocab = 12;
        for pos in 0..2 {
            for j in 0..vocab {
                let a = base.data()[pos * vocab + j];
                let b = perturbed.data()[pos * vocab + j];
                assert!((a - b).abs() <= 1e-9, "pos {pos} logit {j}: {a} vs {b}");
            }
        }
        // and the perturbed positions do change
        let tail_diff: f64 = (3 * vocab..4 * vocab)
            .map(|i| (base.data()[i] - perturbed.data()[i]).abs())
            .sum();
        assert!(tail_diff > 1e-6);
    }

    #[test]
    fn padding_region_content_is_irrelevant() {
        let state = ModelState::<f64>::init(tiny_config(PeriodicKind::Sawtooth), 2).unwrap();
        let tgt = vec![vec![SOS, 6, 7, EOS]];
        let (src_a, src_pad) = matrix(vec![vec![SOS, 4, EOS, PAD, PAD], vec![SOS, 4, 5, 6, EOS]]);
        // same batch, garbage tokens where the pad mask is set
        let mut src_b = src_a.clone();
        src_b.data[3] = 9;
        src_b.data[4] = 10;
        let (tgt_m, tgt_pad) = matrix(vec![tgt[0].clone(), tgt[0].clone()]);
        let (dec_in, dec_pad) = decoder_input(&tgt_m, &tgt_pad);

        let run = |src: &TokenMatrix| {
            let mut tape = Tape::new();
            let (logits, _) = state
                .forward(&mut tape, src, &src_pad, &dec_in, &dec_pad, Mode::Eval, None)
                .unwrap();
            tape.value(logits).clone()
        };
        let a = run(&src_a);
        let b = run(&src_b);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn zeroed_table_makes_token_order_irrelevant() {
        // contrast case for positional sensitivity: with the table zeroed
        // (and no rope), permuting source tokens cannot change the logits
        let mut state = ModelState::<f64>::init(tiny_config(PeriodicKind::Sinusoidal), 4).unwrap();
        for v in state.src_pe.values_mut().data_mut() {
            *v = 0.0;
        }
        for v in state.tgt_pe.values_mut().data_mut() {
            *v = 0.0;
        }
        let a = forward_logits(&state, &[vec![SOS, 4, 5, EOS]], &[vec![SOS, 7, EOS]]);
        let b = forward_logits(&state, &[vec![SOS, 5, 4, EOS]], &[vec![SOS, 7, EOS]]);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-9);
        }
        // and a repeated single token yields identical encoder rows at
        // every position
        let (src_m, src_pad) = matrix(vec![vec![5, 5, 5, 5]]);
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx {
            mode: Mode::Eval,
            rng: None,
        };
        let (bound, _) = state.bind(&mut tape, false).unwrap();
        let memory = state
            .encode_side(&mut tape, &bound, &src_m, &src_pad, &mut ctx)
            .unwrap();
        let mv = tape.value(memory);
        let d = state.config.d_model;
        for pos in 1..4 {
            for j in 0..d {
                let diff = (mv.data()[j] - mv.data()[pos * d + j]).abs();
                assert!(diff <= 1e-9, "position {pos} dim {j} differs by {diff}");
            }
        }
    }

    #[test]
    fn positional_sensitivity_with_every_encoding() {
        for kind in PeriodicKind::ALL {
            let state = ModelState::<f64>::init(tiny_config(kind), 6).unwrap();
            let a = forward_logits(&state, &[vec![SOS, 4, 5, EOS]], &[vec![SOS, 7, EOS]]);
            let b = forward_logits(&state, &[vec![SOS, 5, 4, EOS]], &[vec![SOS, 7, EOS]]);
            let diff: f64 = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y).abs())
                .sum();
            assert!(diff > 1e-6, "kind {kind}: swapping source tokens had no effect");
        }
    }

    #[test]
    fn rope_variant_runs_and_is_position_sensitive() {
        let mut cfg = tiny_config(PeriodicKind::Sinusoidal);
        cfg.rope_enabled = true;
        let state = ModelState::<f64>::init(cfg, 8).unwrap();
        let a = forward_logits(&state, &[vec![SOS, 4, 5, EOS]], &[vec![SOS, 7, EOS]]);
        let b = forward_logits(&state, &[vec![SOS, 5, 4, EOS]], &[vec![SOS, 7, EOS]]);
        assert!(a.is_all_finite());
        let diff: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(diff > 1e-6);
    }

    #[test]
    fn train_mode_without_rng_is_contract_error() {
        let mut cfg = tiny_config(PeriodicKind::Sinusoidal);
        cfg.dropout_p = 0.1;
        let state = ModelState::<f64>::init(cfg, 0).unwrap();
        let (src_m, src_pad) = matrix(vec![vec![SOS, 4, EOS]]);
        let (tgt_m, tgt_pad) = matrix(vec![vec![SOS, 5, EOS]]);
        let (dec_in, dec_pad) = decoder_input(&tgt_m, &tgt_pad);
        let mut tape = Tape::new();
        let out = state.forward(
            &mut tape, &src_m, &src_pad, &dec_in, &dec_pad, Mode::Train, None,
        );
        assert!(matches!(out, Err(Error::Contract(_))));
    }

    #[test]
    fn overlong_sequence_is_length_error() {
        let state = ModelState::<f64>::init(tiny_config(PeriodicKind::Sinusoidal), 0).unwrap();
        let long: Vec<usize> = std::iter::once(SOS)
            .chain(std::iter::repeat(4).take(40))
            .chain(std::iter::once(EOS))
            .collect();
        let (src_m, src_pad) = matrix(vec![long]);
        let (tgt_m, tgt_pad) = matrix(vec![vec![SOS, 5, EOS]]);
        let (dec_in, dec_pad) = decoder_input(&tgt_m, &tgt_pad);
        let mut tape = Tape::new();
        let out = state.forward(
            &mut tape, &src_m, &src_pad, &dec_in, &dec_pad, Mode::Eval, None,
        );
        assert!(matches!(out, Err(Error::Length(_))));
    }

    #[test]
    fn greedy_decode_terminates_and_respects_max_steps() {
        let state = ModelState::<f64>::init(tiny_config(PeriodicKind::Triangular), 12).unwrap();
        let out = state.greedy_decode(&[SOS, 4, 5, EOS], 0).unwrap();
        assert!(out.is_empty());
        let out = state.greedy_decode(&[SOS, 4, 5, EOS], 7).unwrap();
        assert!(out.len() <= 7);
        for &tok in &out {
            assert!(tok != PAD && tok != EOS);
        }
        // deterministic
        let again = state.greedy_decode(&[SOS, 4, 5, EOS], 7).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn batched_decode_matches_single_decode() {
        let state = ModelState::<f64>::init(tiny_config(PeriodicKind::Square), 13).unwrap();
        let srcs = vec![
            vec![SOS, 4, 5, 6, EOS],
            vec![SOS, 7, EOS],
            vec![SOS, 8, 9, EOS],
        ];
        let batched = state.greedy_decode_batch(&srcs, 10).unwrap();
        for (i, src) in srcs.iter().enumerate() {
            let single = state.greedy_decode(src, 10).unwrap();
            assert_eq!(batched[i], single, "sequence {i}");
        }
    }

    #[test]
    fn forward_works_in_single_precision() {
        let state = ModelState::<f32>::init(tiny_config(PeriodicKind::Triangular), 3).unwrap();
        let (src_m, src_pad) = matrix(vec![vec![SOS, 5, 6, EOS]]);
        let (tgt_m, tgt_pad) = matrix(vec![vec![SOS, 8, EOS]]);
        let (dec_in, dec_pad) = decoder_input(&tgt_m, &tgt_pad);
        let mut tape = Tape::<f32>::new();
        let (logits, _) = state
            .forward(&mut tape, &src_m, &src_pad, &dec_in, &dec_pad, Mode::Eval, None)
            .unwrap();
        assert_eq!(tape.value(logits).shape(), &[1, 2, 12]);
        assert!(tape.value(logits).is_all_finite());
    }

    #[test]
    fn decoder_input_and_targets_shift() {
        let (tgt, pad) = matrix(vec![vec![SOS, 5, 6, EOS], vec![SOS, 7, EOS, PAD]]);
        let (dec_in, dec_pad) = decoder_input(&tgt, &pad);
        assert_eq!(dec_in.row(0), &[SOS, 5, 6]);
        assert_eq!(dec_in.row(1), &[SOS, 7, EOS]);
        assert_eq!(dec_pad, vec![false, false, false, false, false, false]);
        let targets = decoder_targets(&tgt);
        assert_eq!(targets, vec![5, 6, EOS, 7, EOS, PAD]);
    }
}
