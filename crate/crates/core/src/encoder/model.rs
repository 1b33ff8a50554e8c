//! The transformer encoder: embeddings (optionally factorized), a stack of
//! attention + feed-forward blocks (optionally sharing one block's weights
//! across layers), manual reverse-mode backward passes, and task heads.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::tensor::{
    activate, activate_grad, dropout, dropout_backward, layer_norm, layer_norm_backward,
    matmul_into, matmul_nt_into, matmul_tn_acc, softmax_backward_row, softmax_unchecked,
    LayerNormCache, Real, Tensor,
};

const INIT_SIGMA: f64 = 0.02;
const LN_EPS: f64 = 1e-12;

/// Normal(0, sigma) truncated at two standard deviations, by resampling.
fn trunc_normal<T: Real>(rng: &mut ChaCha8Rng, sigma: f64) -> T {
    loop {
        let u1: f64 = 1.0 - rng.gen::<f64>();
        let u2: f64 = rng.gen();
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        if z.abs() <= 2.0 {
            return T::from_f64(z * sigma);
        }
    }
}

fn init_weight<T: Real>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let data = (0..rows * cols).map(|_| trunc_normal(rng, INIT_SIGMA)).collect();
    Tensor::from_vec(vec![rows, cols], data)
        .expect("sized from its own shape")
        .with_grad()
}

fn add_assign<T: Real>(dst: &mut [T], src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Dense affine map, weight stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Linear<T> {
    fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: init_weight(in_dim, out_dim, rng),
            bias: Tensor::zeros(vec![out_dim]).with_grad(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (rows, in_dim) = x.dims2()?;
        if in_dim != self.in_dim() {
            return Err(Error::Shape(format!(
                "linear expects {} input columns, got {in_dim}",
                self.in_dim()
            )));
        }
        let out_dim = self.out_dim();
        let mut out = vec![T::zero(); rows * out_dim];
        matmul_into(x.data(), self.weight.data(), rows, in_dim, out_dim, &mut out);
        let bias = self.bias.data();
        for r in 0..rows {
            let row = &mut out[r * out_dim..(r + 1) * out_dim];
            for (o, &b) in row.iter_mut().zip(bias) {
                *o = *o + b;
            }
        }
        Tensor::from_vec(vec![rows, out_dim], out)
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, d_out: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (rows, in_dim) = x.dims2()?;
        let out_dim = self.out_dim();
        matmul_tn_acc(
            x.data(),
            d_out.data(),
            rows,
            in_dim,
            out_dim,
            self.weight.grad_mut(),
        );
        let db = self.bias.grad_mut();
        for r in 0..rows {
            let row = &d_out.data()[r * out_dim..(r + 1) * out_dim];
            add_assign(db, row);
        }
        let mut d_x = vec![T::zero(); rows * in_dim];
        matmul_nt_into(d_out.data(), self.weight.data(), rows, out_dim, in_dim, &mut d_x);
        Tensor::from_vec(vec![rows, in_dim], d_x)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Real> LayerNormParams<T> {
    fn init(dim: usize) -> Self {
        Self {
            gamma: Tensor::filled(vec![dim], T::one()).with_grad(),
            beta: Tensor::zeros(vec![dim]).with_grad(),
        }
    }

    fn backward(
        &mut self,
        d_out: &Tensor<T>,
        input: &Tensor<T>,
        cache: &LayerNormCache<T>,
    ) -> Result<Tensor<T>> {
        let gamma_data = self.gamma.data().to_vec();
        let mut d_gamma = vec![T::zero(); gamma_data.len()];
        let mut d_beta = vec![T::zero(); gamma_data.len()];
        let d_in = layer_norm_backward(d_out, input, &gamma_data, cache, &mut d_gamma, &mut d_beta)?;
        self.gamma.accumulate_grad(&d_gamma);
        self.beta.accumulate_grad(&d_beta);
        Ok(d_in)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayer<T> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
    pub attn_norm: LayerNormParams<T>,
    pub ff_inner: Linear<T>,
    pub ff_outer: Linear<T>,
    pub ff_norm: LayerNormParams<T>,
}

impl<T: Real> EncoderLayer<T> {
    fn init(h: usize, f: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            query: Linear::init(h, h, rng),
            key: Linear::init(h, h, rng),
            value: Linear::init(h, h, rng),
            output: Linear::init(h, h, rng),
            attn_norm: LayerNormParams::init(h),
            ff_inner: Linear::init(h, f, rng),
            ff_outer: Linear::init(f, h, rng),
            ff_norm: LayerNormParams::init(h),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Embeddings<T> {
    pub token: Tensor<T>,
    pub position: Tensor<T>,
    pub segment: Tensor<T>,
    pub norm: LayerNormParams<T>,
    pub projection: Option<Linear<T>>,
}

/// A batch of encoded inputs flattened to `[batch * seq_len]` buffers.
#[derive(Debug, Clone)]
pub struct EncodedBatch {
    pub ids: Vec<u32>,
    pub mask: Vec<u8>,
    pub segments: Vec<u8>,
    pub labels: Vec<Option<u8>>,
    pub batch_size: usize,
    pub seq_len: usize,
}

impl EncodedBatch {
    /// Assembles a batch. With `trim`, the sequence axis shrinks to the
    /// longest attended prefix in the batch; outputs at attended positions
    /// are unchanged because padded keys never enter attention.
    pub fn from_inputs(inputs: &[&crate::tokenizer::EncodedInput], trim: bool) -> Result<Self> {
        let Some(first) = inputs.first() else {
            return Err(Error::Data("empty batch".into()));
        };
        let max_len = first.max_len();
        if inputs.iter().any(|i| i.max_len() != max_len) {
            return Err(Error::Shape("batch mixes input lengths".into()));
        }
        let seq_len = if trim {
            inputs.iter().map(|i| i.attended_len()).max().unwrap().max(1)
        } else {
            max_len
        };
        let mut ids = Vec::with_capacity(inputs.len() * seq_len);
        let mut mask = Vec::with_capacity(inputs.len() * seq_len);
        let mut segments = Vec::with_capacity(inputs.len() * seq_len);
        let mut labels = Vec::with_capacity(inputs.len());
        for input in inputs {
            ids.extend_from_slice(&input.ids[..seq_len]);
            mask.extend_from_slice(&input.attention_mask[..seq_len]);
            segments.extend_from_slice(&input.segment_ids[..seq_len]);
            labels.push(input.label);
        }
        Ok(Self {
            ids,
            mask,
            segments,
            labels,
            batch_size: inputs.len(),
            seq_len,
        })
    }
}

/// Hidden states, pooled `[CLS]` vector, and per-layer attention maps.
#[derive(Debug)]
pub struct EncoderOutput<T> {
    /// `[batch, seq_len, hidden]`
    pub hidden: Tensor<T>,
    /// `[batch, hidden]` — the hidden state at position 0.
    pub pooled: Tensor<T>,
    /// One `[batch, heads, seq_len, seq_len]` tensor per layer application,
    /// holding softmax probabilities (before attention dropout).
    pub attention: Vec<Tensor<T>>,
}

struct EmbeddingsTrace<T> {
    sum: Tensor<T>,
    ln_cache: LayerNormCache<T>,
    drop: Option<Vec<bool>>,
    /// Projection input (layer-normed embeddings); present when factorized.
    ln_out: Option<Tensor<T>>,
}

struct LayerTrace<T> {
    /// Input to the query/key/value projections.
    attn_in: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    /// Softmax probabilities before attention dropout, `[B*A*T*T]`.
    probs: Vec<T>,
    attn_drop: Option<Vec<bool>>,
    /// Concatenated per-head contexts; input to the output projection.
    ctx: Tensor<T>,
    proj_drop: Option<Vec<bool>>,
    /// Input that went through the attention-side layer norm
    /// (post-norm: the first residual sum; pre-norm: the layer input).
    ln1_in: Tensor<T>,
    ln1_cache: LayerNormCache<T>,
    /// Input to the feed-forward inner projection.
    ff_in: Tensor<T>,
    z: Tensor<T>,
    act: Tensor<T>,
    ff_drop: Option<Vec<bool>>,
    /// Input that went through the feed-forward-side layer norm
    /// (post-norm: the second residual sum; pre-norm: the mid stream).
    ln2_in: Tensor<T>,
    ln2_cache: LayerNormCache<T>,
}

/// Everything the backward pass needs from one forward pass.
pub struct ForwardTrace<T> {
    emb: EmbeddingsTrace<T>,
    layers: Vec<LayerTrace<T>>,
}

/// Encoder weights plus optional task heads.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: EncoderConfig,
    pub embeddings: Embeddings<T>,
    /// One entry when `share_layer_parameters`, else `num_layers` entries.
    pub layers: Vec<EncoderLayer<T>>,
    pub classifier: Option<Linear<T>>,
    pub mlm_head: Option<Linear<T>>,
    pub nsp_head: Option<Linear<T>>,
}

impl<T: Real> Model<T> {
    /// Initializes encoder weights from a truncated normal (sigma 0.02),
    /// zero biases, unit layer-norm gains. Deterministic given `seed`.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = config.embedding_size;
        let h = config.hidden_size;
        let embeddings = Embeddings {
            token: init_weight(config.vocab_size, e, &mut rng),
            position: init_weight(config.max_len, e, &mut rng),
            segment: init_weight(2, e, &mut rng),
            norm: LayerNormParams::init(e),
            projection: config.factorized().then(|| Linear::init(e, h, &mut rng)),
        };
        let block_count = if config.share_layer_parameters {
            1
        } else {
            config.num_layers
        };
        let layers = (0..block_count)
            .map(|_| EncoderLayer::init(h, config.feedforward_size, &mut rng))
            .collect();
        Ok(Self {
            config: config.clone(),
            embeddings,
            layers,
            classifier: None,
            mlm_head: None,
            nsp_head: None,
        })
    }

    /// Attaches the classification head (`H x num_classes`).
    pub fn attach_classifier(&mut self, num_classes: usize, seed: u64) -> Result<()> {
        if num_classes < 2 {
            return Err(Error::Config(format!(
                "classifier needs at least 2 classes, got {num_classes}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.classifier = Some(Linear::init(self.config.hidden_size, num_classes, &mut rng));
        Ok(())
    }

    /// Attaches the masked-token prediction head (`H x V`).
    pub fn attach_mlm_head(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.mlm_head = Some(Linear::init(
            self.config.hidden_size,
            self.config.vocab_size,
            &mut rng,
        ));
    }

    /// Attaches the binary next-sentence head (`H x 2`).
    pub fn attach_nsp_head(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.nsp_head = Some(Linear::init(self.config.hidden_size, 2, &mut rng));
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.classifier.as_ref().map(|c| c.out_dim())
    }

    /// Ordered `(name, tensor)` walk over every parameter.
    pub fn param_refs(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = Vec::new();
        let emb = &self.embeddings;
        out.push(("embeddings.token".into(), &emb.token));
        out.push(("embeddings.position".into(), &emb.position));
        out.push(("embeddings.segment".into(), &emb.segment));
        out.push(("embeddings.norm.gamma".into(), &emb.norm.gamma));
        out.push(("embeddings.norm.beta".into(), &emb.norm.beta));
        if let Some(p) = &emb.projection {
            out.push(("embeddings.projection.weight".into(), &p.weight));
            out.push(("embeddings.projection.bias".into(), &p.bias));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let base = format!("layers.{i}");
            for (suffix, t) in [
                ("attention.query.weight", &layer.query.weight),
                ("attention.query.bias", &layer.query.bias),
                ("attention.key.weight", &layer.key.weight),
                ("attention.key.bias", &layer.key.bias),
                ("attention.value.weight", &layer.value.weight),
                ("attention.value.bias", &layer.value.bias),
                ("attention.output.weight", &layer.output.weight),
                ("attention.output.bias", &layer.output.bias),
                ("attention.norm.gamma", &layer.attn_norm.gamma),
                ("attention.norm.beta", &layer.attn_norm.beta),
                ("feedforward.inner.weight", &layer.ff_inner.weight),
                ("feedforward.inner.bias", &layer.ff_inner.bias),
                ("feedforward.outer.weight", &layer.ff_outer.weight),
                ("feedforward.outer.bias", &layer.ff_outer.bias),
                ("feedforward.norm.gamma", &layer.ff_norm.gamma),
                ("feedforward.norm.beta", &layer.ff_norm.beta),
            ] {
                out.push((format!("{base}.{suffix}"), t));
            }
        }
        for (name, head) in [
            ("classifier", &self.classifier),
            ("mlm", &self.mlm_head),
            ("nsp", &self.nsp_head),
        ] {
            if let Some(linear) = head {
                out.push((format!("heads.{name}.weight"), &linear.weight));
                out.push((format!("heads.{name}.bias"), &linear.bias));
            }
        }
        out
    }

    /// Mutable walk in the same order as [`Model::param_refs`].
    pub fn param_refs_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = Vec::new();
        let emb = &mut self.embeddings;
        out.push(("embeddings.token".into(), &mut emb.token));
        out.push(("embeddings.position".into(), &mut emb.position));
        out.push(("embeddings.segment".into(), &mut emb.segment));
        out.push(("embeddings.norm.gamma".into(), &mut emb.norm.gamma));
        out.push(("embeddings.norm.beta".into(), &mut emb.norm.beta));
        if let Some(p) = &mut emb.projection {
            out.push(("embeddings.projection.weight".into(), &mut p.weight));
            out.push(("embeddings.projection.bias".into(), &mut p.bias));
        }
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let base = format!("layers.{i}");
            for (suffix, t) in [
                ("attention.query.weight", &mut layer.query.weight),
                ("attention.query.bias", &mut layer.query.bias),
                ("attention.key.weight", &mut layer.key.weight),
                ("attention.key.bias", &mut layer.key.bias),
                ("attention.value.weight", &mut layer.value.weight),
                ("attention.value.bias", &mut layer.value.bias),
                ("attention.output.weight", &mut layer.output.weight),
                ("attention.output.bias", &mut layer.output.bias),
                ("attention.norm.gamma", &mut layer.attn_norm.gamma),
                ("attention.norm.beta", &mut layer.attn_norm.beta),
                ("feedforward.inner.weight", &mut layer.ff_inner.weight),
                ("feedforward.inner.bias", &mut layer.ff_inner.bias),
                ("feedforward.outer.weight", &mut layer.ff_outer.weight),
                ("feedforward.outer.bias", &mut layer.ff_outer.bias),
                ("feedforward.norm.gamma", &mut layer.ff_norm.gamma),
                ("feedforward.norm.beta", &mut layer.ff_norm.beta),
            ] {
                out.push((format!("{base}.{suffix}"), t));
            }
        }
        for (name, head) in [
            ("classifier", &mut self.classifier),
            ("mlm", &mut self.mlm_head),
            ("nsp", &mut self.nsp_head),
        ] {
            if let Some(linear) = head {
                out.push((format!("heads.{name}.weight"), &mut linear.weight));
                out.push((format!("heads.{name}.bias"), &mut linear.bias));
            }
        }
        out
    }

    /// Total scalars in encoder-owned tensors (heads excluded); the live
    /// counterpart of [`super::config::count_parameters`].
    pub fn encoder_parameter_count(&self) -> u64 {
        self.param_refs()
            .iter()
            .filter(|(name, _)| !name.starts_with("heads."))
            .map(|(_, t)| t.len() as u64)
            .sum()
    }

    /// Total scalars including task heads.
    pub fn total_parameter_count(&self) -> u64 {
        self.param_refs().iter().map(|(_, t)| t.len() as u64).sum()
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.param_refs_mut() {
            t.zero_grad();
        }
    }

    /// Divides every accumulated gradient by `n` (gradient accumulation).
    pub fn scale_grads(&mut self, n: f64) {
        let inv = T::from_f64(1.0 / n);
        for (_, t) in self.param_refs_mut() {
            for g in t.grad_mut() {
                *g = *g * inv;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.param_refs().iter().all(|(_, t)| t.all_finite())
    }

    fn check_batch(&self, batch: &EncodedBatch) -> Result<()> {
        if batch.seq_len > self.config.max_len {
            return Err(Error::Shape(format!(
                "sequence length {} exceeds max_len {}",
                batch.seq_len, self.config.max_len
            )));
        }
        if let Some(&bad) = batch
            .ids
            .iter()
            .find(|&&id| id as usize >= self.config.vocab_size)
        {
            return Err(Error::Shape(format!(
                "token id {bad} >= vocab size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Runs the encoder. `rng` being `Some` selects training mode (dropout
    /// active); `None` is deterministic evaluation mode.
    pub fn forward(
        &self,
        batch: &EncodedBatch,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<EncoderOutput<T>> {
        self.run(batch, rng, false).map(|(out, _)| out)
    }

    /// Like [`Model::forward`] but records the caches backward needs.
    pub fn forward_trace(
        &self,
        batch: &EncodedBatch,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(EncoderOutput<T>, ForwardTrace<T>)> {
        self.run(batch, rng, true)
            .map(|(out, trace)| (out, trace.expect("requested trace")))
    }

    fn run(
        &self,
        batch: &EncodedBatch,
        mut rng: Option<&mut ChaCha8Rng>,
        record: bool,
    ) -> Result<(EncoderOutput<T>, Option<ForwardTrace<T>>)> {
        self.check_batch(batch)?;
        let b = batch.batch_size;
        let t_len = batch.seq_len;
        let rows = b * t_len;
        let e = self.config.embedding_size;
        let h = self.config.hidden_size;
        let p = self.config.dropout_p;

        // token + position + segment embeddings
        let mut sum = vec![T::zero(); rows * e];
        let tok = self.embeddings.token.data();
        let pos = self.embeddings.position.data();
        let seg = self.embeddings.segment.data();
        for r in 0..rows {
            let id = batch.ids[r] as usize;
            let t_pos = r % t_len;
            let s = batch.segments[r] as usize;
            let dst = &mut sum[r * e..(r + 1) * e];
            let tok_row = &tok[id * e..(id + 1) * e];
            let pos_row = &pos[t_pos * e..(t_pos + 1) * e];
            let seg_row = &seg[s * e..(s + 1) * e];
            for c in 0..e {
                dst[c] = tok_row[c] + pos_row[c] + seg_row[c];
            }
        }
        let sum = Tensor::from_vec(vec![rows, e], sum)?;
        let (mut normed, ln_cache) = layer_norm(
            &sum,
            self.embeddings.norm.gamma.data(),
            self.embeddings.norm.beta.data(),
            T::from_f64(LN_EPS),
        )?;
        let drop = dropout(normed.data_mut(), p, rng.as_deref_mut())?;
        let (mut x, ln_out) = match &self.embeddings.projection {
            Some(proj) => (proj.forward(&normed)?, Some(normed)),
            None => (normed, None),
        };
        let emb_trace = record.then(|| EmbeddingsTrace {
            sum,
            ln_cache,
            drop,
            ln_out,
        });

        let mut layer_traces = Vec::new();
        let mut attention_maps = Vec::new();
        for app in 0..self.config.num_layers {
            let layer = if self.config.share_layer_parameters {
                &self.layers[0]
            } else {
                &self.layers[app]
            };
            let (y, probs, trace) =
                self.layer_forward(layer, x, batch, rng.as_deref_mut(), record)?;
            attention_maps.push(Tensor::from_vec(
                vec![b, self.config.num_heads, t_len, t_len],
                probs,
            )?);
            if let Some(trace) = trace {
                layer_traces.push(trace);
            }
            x = y;
        }

        let mut pooled = vec![T::zero(); b * h];
        for bi in 0..b {
            pooled[bi * h..(bi + 1) * h]
                .copy_from_slice(&x.data()[bi * t_len * h..bi * t_len * h + h]);
        }
        let hidden = Tensor::from_vec(vec![b, t_len, h], x.data().to_vec())?;
        let output = EncoderOutput {
            hidden,
            pooled: Tensor::from_vec(vec![b, h], pooled)?,
            attention: attention_maps,
        };
        let trace = record.then(|| ForwardTrace {
            emb: emb_trace.expect("recorded"),
            layers: layer_traces,
        });
        Ok((output, trace))
    }

    #[allow(clippy::type_complexity)]
    fn layer_forward(
        &self,
        layer: &EncoderLayer<T>,
        x: Tensor<T>,
        batch: &EncodedBatch,
        mut rng: Option<&mut ChaCha8Rng>,
        record: bool,
    ) -> Result<(Tensor<T>, Vec<T>, Option<LayerTrace<T>>)> {
        let b = batch.batch_size;
        let t_len = batch.seq_len;
        let rows = b * t_len;
        let h = self.config.hidden_size;
        let heads = self.config.num_heads;
        let d = self.config.head_dim();
        let p = self.config.dropout_p;
        let scale = T::from_f64(1.0 / (d as f64).sqrt());
        let pre_norm = self.config.pre_norm;
        let eps = T::from_f64(LN_EPS);

        // pre-norm normalizes the layer input before attention
        let (attn_in, pre_ln1_cache) = if pre_norm {
            let (n1, c1) = layer_norm(
                &x,
                layer.attn_norm.gamma.data(),
                layer.attn_norm.beta.data(),
                eps,
            )?;
            (n1, Some(c1))
        } else {
            (x.clone(), None)
        };

        let q = layer.query.forward(&attn_in)?;
        let k = layer.key.forward(&attn_in)?;
        let v = layer.value.forward(&attn_in)?;

        let mut probs_all = vec![T::zero(); b * heads * t_len * t_len];
        let mut ctx = vec![T::zero(); rows * h];
        let mut q_s = vec![T::zero(); t_len * d];
        let mut k_s = vec![T::zero(); t_len * d];
        let mut v_s = vec![T::zero(); t_len * d];
        let mut scores = vec![T::zero(); t_len * t_len];
        let mut ctx_s = vec![T::zero(); t_len * d];
        let mut attn_drop_all: Option<Vec<bool>> = None;
        for bi in 0..b {
            let key_mask = &batch.mask[bi * t_len..(bi + 1) * t_len];
            for a in 0..heads {
                gather_head(q.data(), bi, a, t_len, h, d, &mut q_s);
                gather_head(k.data(), bi, a, t_len, h, d, &mut k_s);
                gather_head(v.data(), bi, a, t_len, h, d, &mut v_s);
                matmul_nt_into(&q_s, &k_s, t_len, d, t_len, &mut scores);
                for t1 in 0..t_len {
                    let row = &mut scores[t1 * t_len..(t1 + 1) * t_len];
                    for (s, &m) in row.iter_mut().zip(key_mask) {
                        *s = if m == 1 { *s * scale } else { T::neg_infinity() };
                    }
                    let soft = softmax_unchecked(row);
                    row.copy_from_slice(&soft);
                }
                let head_off = (bi * heads + a) * t_len * t_len;
                probs_all[head_off..head_off + t_len * t_len].copy_from_slice(&scores);
                // attention-probability dropout
                if let Some(r) = rng.as_deref_mut() {
                    if let Some(mask) = dropout(&mut scores, p, Some(r))? {
                        let all = attn_drop_all
                            .get_or_insert_with(|| vec![true; b * heads * t_len * t_len]);
                        all[head_off..head_off + t_len * t_len].copy_from_slice(&mask);
                    }
                }
                matmul_into(&scores, &v_s, t_len, t_len, d, &mut ctx_s);
                scatter_head(&ctx_s, bi, a, t_len, h, d, &mut ctx);
            }
        }
        let ctx = Tensor::from_vec(vec![rows, h], ctx)?;
        let mut attn_out = layer.output.forward(&ctx)?;
        let proj_drop = dropout(attn_out.data_mut(), p, rng.as_deref_mut())?;

        // first residual (pre-norm: the mid stream; post-norm: the ln1 input)
        let mut s1 = attn_out;
        add_assign(s1.data_mut(), x.data());

        let (ff_in, ln1_in, ln1_cache, ln2_in_pre, ln2_cache_pre) = if pre_norm {
            let (n2, c2) = layer_norm(
                &s1,
                layer.ff_norm.gamma.data(),
                layer.ff_norm.beta.data(),
                eps,
            )?;
            (n2, x, pre_ln1_cache.expect("pre-norm cache"), Some(s1), Some(c2))
        } else {
            let (h1, c1) = layer_norm(
                &s1,
                layer.attn_norm.gamma.data(),
                layer.attn_norm.beta.data(),
                eps,
            )?;
            (h1, s1, c1, None, None)
        };

        let z = layer.ff_inner.forward(&ff_in)?;
        let act_data: Vec<T> = z
            .data()
            .iter()
            .map(|&zv| activate(self.config.activation, zv))
            .collect();
        let act = Tensor::from_vec(vec![rows, self.config.feedforward_size], act_data)?;
        let mut f_out = layer.ff_outer.forward(&act)?;
        let ff_drop = dropout(f_out.data_mut(), p, rng.as_deref_mut())?;

        let (y, ln2_in, ln2_cache) = if pre_norm {
            let mid = ln2_in_pre.expect("pre-norm mid stream");
            let mut y = f_out;
            add_assign(y.data_mut(), mid.data());
            (y, mid, ln2_cache_pre.expect("pre-norm cache"))
        } else {
            let mut s2 = f_out;
            add_assign(s2.data_mut(), ff_in.data());
            let (y, c2) = layer_norm(
                &s2,
                layer.ff_norm.gamma.data(),
                layer.ff_norm.beta.data(),
                eps,
            )?;
            (y, s2, c2)
        };

        let trace = record.then(|| LayerTrace {
            attn_in,
            q,
            k,
            v,
            probs: probs_all.clone(),
            attn_drop: attn_drop_all,
            ctx,
            proj_drop,
            ln1_in,
            ln1_cache,
            ff_in,
            z,
            act,
            ff_drop,
            ln2_in,
            ln2_cache,
        });
        Ok((y, probs_all, trace))
    }

    /// Accumulates parameter gradients for one traced forward pass.
    ///
    /// `d_hidden` is the loss gradient w.r.t. the hidden states
    /// (`[batch, seq_len, hidden]`, may be omitted); `d_pooled` w.r.t. the
    /// pooled `[CLS]` vector. Shared layers accumulate gradients across all
    /// applications of the shared block.
    pub fn backward(
        &mut self,
        batch: &EncodedBatch,
        trace: &ForwardTrace<T>,
        d_hidden: Option<&Tensor<T>>,
        d_pooled: Option<&Tensor<T>>,
    ) -> Result<()> {
        let b = batch.batch_size;
        let t_len = batch.seq_len;
        let rows = b * t_len;
        let h = self.config.hidden_size;
        let mut d = vec![T::zero(); rows * h];
        if let Some(dh) = d_hidden {
            if dh.len() != rows * h {
                return Err(Error::Shape(format!(
                    "d_hidden has {} elements, expected {}",
                    dh.len(),
                    rows * h
                )));
            }
            d.copy_from_slice(dh.data());
        }
        if let Some(dp) = d_pooled {
            if dp.len() != b * h {
                return Err(Error::Shape(format!(
                    "d_pooled has {} elements, expected {}",
                    dp.len(),
                    b * h
                )));
            }
            for bi in 0..b {
                add_assign(
                    &mut d[bi * t_len * h..bi * t_len * h + h],
                    &dp.data()[bi * h..(bi + 1) * h],
                );
            }
        }
        let mut d = Tensor::from_vec(vec![rows, h], d)?;
        if trace.layers.len() != self.config.num_layers {
            return Err(Error::Shape(
                "trace does not match the model's layer count".into(),
            ));
        }
        let config = self.config.clone();
        for app in (0..config.num_layers).rev() {
            let idx = if config.share_layer_parameters { 0 } else { app };
            d = layer_backward(
                &mut self.layers[idx],
                &trace.layers[app],
                batch,
                &config,
                &d,
            )?;
        }
        self.embeddings_backward(batch, &trace.emb, d)
    }

    fn embeddings_backward(
        &mut self,
        batch: &EncodedBatch,
        trace: &EmbeddingsTrace<T>,
        d_x0: Tensor<T>,
    ) -> Result<()> {
        let t_len = batch.seq_len;
        let e = self.config.embedding_size;
        let mut d = match &mut self.embeddings.projection {
            Some(proj) => proj.backward(
                &d_x0,
                trace
                    .ln_out
                    .as_ref()
                    .expect("factorized trace stores the projection input"),
            )?,
            None => d_x0,
        };
        dropout_backward(d.data_mut(), trace.drop.as_ref(), self.config.dropout_p);
        let d_sum = self
            .embeddings
            .norm
            .backward(&d, &trace.sum, &trace.ln_cache)?;
        let token_grad = self.embeddings.token.grad_mut();
        for (r, &id) in batch.ids.iter().enumerate() {
            add_assign(
                &mut token_grad[id as usize * e..(id as usize + 1) * e],
                &d_sum.data()[r * e..(r + 1) * e],
            );
        }
        let pos_grad = self.embeddings.position.grad_mut();
        for r in 0..batch.ids.len() {
            let t_pos = r % t_len;
            add_assign(
                &mut pos_grad[t_pos * e..(t_pos + 1) * e],
                &d_sum.data()[r * e..(r + 1) * e],
            );
        }
        let seg_grad = self.embeddings.segment.grad_mut();
        for (r, &s) in batch.segments.iter().enumerate() {
            add_assign(
                &mut seg_grad[s as usize * e..(s as usize + 1) * e],
                &d_sum.data()[r * e..(r + 1) * e],
            );
        }
        Ok(())
    }
}

fn layer_backward<T: Real>(
    layer: &mut EncoderLayer<T>,
    trace: &LayerTrace<T>,
    batch: &EncodedBatch,
    config: &EncoderConfig,
    d_y: &Tensor<T>,
) -> Result<Tensor<T>> {
    let b = batch.batch_size;
    let t_len = batch.seq_len;
    let rows = b * t_len;
    let h = config.hidden_size;
    let heads = config.num_heads;
    let d_head = config.head_dim();
    let p = config.dropout_p;
    let scale = T::from_f64(1.0 / (d_head as f64).sqrt());
    let pre_norm = config.pre_norm;

    // --- feed-forward half ---
    // d_mid: gradient on the stream feeding both the FF branch and the
    // residual skip
    let d_mid = if pre_norm {
        d_y.clone()
    } else {
        layer
            .ff_norm
            .backward(d_y, &trace.ln2_in, &trace.ln2_cache)?
    };
    let mut d_ff_out = d_mid.clone();
    dropout_backward(d_ff_out.data_mut(), trace.ff_drop.as_ref(), p);
    let d_act = layer.ff_outer.backward(&d_ff_out, &trace.act)?;
    let mut d_z = d_act;
    for (dv, &zv) in d_z.data_mut().iter_mut().zip(trace.z.data()) {
        *dv = *dv * activate_grad(config.activation, zv);
    }
    let d_ff_in = layer.ff_inner.backward(&d_z, &trace.ff_in)?;

    let d_res = if pre_norm {
        // ff branch re-enters through ln2 (input: the mid stream)
        let mut d_a = layer
            .ff_norm
            .backward(&d_ff_in, &trace.ln2_in, &trace.ln2_cache)?;
        add_assign(d_a.data_mut(), d_mid.data());
        d_a
    } else {
        let mut d_h1 = d_mid;
        add_assign(d_h1.data_mut(), d_ff_in.data());
        layer
            .attn_norm
            .backward(&d_h1, &trace.ln1_in, &trace.ln1_cache)?
    };

    // --- attention half ---
    let mut d_attn_out = d_res.clone();
    dropout_backward(d_attn_out.data_mut(), trace.proj_drop.as_ref(), p);
    let d_ctx = layer.output.backward(&d_attn_out, &trace.ctx)?;

    let mut d_q = vec![T::zero(); rows * h];
    let mut d_k = vec![T::zero(); rows * h];
    let mut d_v = vec![T::zero(); rows * h];
    let drop_scale = T::from_f64(1.0 / (1.0 - p));
    let mut d_ctx_s = vec![T::zero(); t_len * d_head];
    let mut v_s = vec![T::zero(); t_len * d_head];
    let mut q_s = vec![T::zero(); t_len * d_head];
    let mut k_s = vec![T::zero(); t_len * d_head];
    let mut dropped = vec![T::zero(); t_len * t_len];
    let mut d_probs = vec![T::zero(); t_len * t_len];
    let mut d_scores = vec![T::zero(); t_len * t_len];
    let mut d_qs = vec![T::zero(); t_len * d_head];
    let mut d_ks = vec![T::zero(); t_len * d_head];
    let mut d_vs = vec![T::zero(); t_len * d_head];
    for bi in 0..b {
        for a in 0..heads {
            let head_off = (bi * heads + a) * t_len * t_len;
            let probs = &trace.probs[head_off..head_off + t_len * t_len];
            let drop_mask = trace
                .attn_drop
                .as_ref()
                .map(|m| &m[head_off..head_off + t_len * t_len]);
            // post-dropout probabilities as used in the forward pass
            match drop_mask {
                Some(mask) => {
                    for i in 0..probs.len() {
                        dropped[i] = if mask[i] { probs[i] * drop_scale } else { T::zero() };
                    }
                }
                None => dropped.copy_from_slice(probs),
            }
            gather_head(trace.v.data(), bi, a, t_len, h, d_head, &mut v_s);
            gather_head(trace.q.data(), bi, a, t_len, h, d_head, &mut q_s);
            gather_head(trace.k.data(), bi, a, t_len, h, d_head, &mut k_s);
            gather_head(d_ctx.data(), bi, a, t_len, h, d_head, &mut d_ctx_s);

            // d probs (post-dropout) = d_ctx x V^T ; d V = dropped^T x d_ctx
            matmul_nt_into(&d_ctx_s, &v_s, t_len, d_head, t_len, &mut d_probs);
            d_vs.fill(T::zero());
            matmul_tn_acc(&dropped, &d_ctx_s, t_len, t_len, d_head, &mut d_vs);

            if let Some(mask) = drop_mask {
                for i in 0..d_probs.len() {
                    d_probs[i] = if mask[i] { d_probs[i] * drop_scale } else { T::zero() };
                }
            }
            for t1 in 0..t_len {
                let range = t1 * t_len..(t1 + 1) * t_len;
                softmax_backward_row(
                    &probs[range.clone()],
                    &d_probs[range.clone()].to_vec(),
                    &mut d_scores[range],
                );
            }
            for s in d_scores.iter_mut() {
                *s = *s * scale;
            }
            matmul_into(&d_scores, &k_s, t_len, t_len, d_head, &mut d_qs);
            d_ks.fill(T::zero());
            matmul_tn_acc(&d_scores, &q_s, t_len, t_len, d_head, &mut d_ks);

            scatter_head(&d_qs, bi, a, t_len, h, d_head, &mut d_q);
            scatter_head(&d_ks, bi, a, t_len, h, d_head, &mut d_k);
            scatter_head(&d_vs, bi, a, t_len, h, d_head, &mut d_v);
        }
    }
    let d_q = Tensor::from_vec(vec![rows, h], d_q)?;
    let d_k = Tensor::from_vec(vec![rows, h], d_k)?;
    let d_v = Tensor::from_vec(vec![rows, h], d_v)?;
    let mut d_attn_in = layer.query.backward(&d_q, &trace.attn_in)?;
    add_assign(
        d_attn_in.data_mut(),
        layer.key.backward(&d_k, &trace.attn_in)?.data(),
    );
    add_assign(
        d_attn_in.data_mut(),
        layer.value.backward(&d_v, &trace.attn_in)?.data(),
    );

    let mut d_x = d_res;
    if pre_norm {
        // attention branch re-enters through ln1 (input: the layer input)
        let d_from_ln1 = layer
            .attn_norm
            .backward(&d_attn_in, &trace.ln1_in, &trace.ln1_cache)?;
        add_assign(d_x.data_mut(), d_from_ln1.data());
    } else {
        add_assign(d_x.data_mut(), d_attn_in.data());
    }
    Ok(d_x)
}

fn gather_head<T: Real>(
    src: &[T],
    b: usize,
    head: usize,
    t_len: usize,
    h: usize,
    d: usize,
    dst: &mut [T],
) {
    for t in 0..t_len {
        let row = (b * t_len + t) * h + head * d;
        dst[t * d..(t + 1) * d].copy_from_slice(&src[row..row + d]);
    }
}

fn scatter_head<T: Real>(
    src: &[T],
    b: usize,
    head: usize,
    t_len: usize,
    h: usize,
    d: usize,
    dst: &mut [T],
) {
    for t in 0..t_len {
        let row = (b * t_len + t) * h + head * d;
        dst[row..row + d].copy_from_slice(&src[t * d..(t + 1) * d]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::config::{preset, Preset, Scale};
    use crate::tokenizer::{encode, Vocab};

    fn tiny_config() -> EncoderConfig {
        let mut cfg = preset(Preset::BertBase, Scale::Tiny);
        cfg.vocab_size = 64;
        cfg.max_len = 16;
        cfg
    }

    fn vocab() -> Vocab {
        let corpus: Vec<Vec<String>> = vec![(0..40).map(|i| format!("w{i}")).collect()];
        Vocab::build(corpus, 64, 1, true).unwrap()
    }

    fn sample_batch(v: &Vocab, max_len: usize) -> EncodedBatch {
        let a = encode(&["w0", "w1", "w2", "w3", "w4"], v, max_len).unwrap();
        let b = encode(&["w5", "w6"], v, max_len).unwrap();
        let c = encode(&["w7"], v, max_len).unwrap();
        EncodedBatch::from_inputs(&[&a, &b, &c], false).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = tiny_config();
        let m1 = Model::<f32>::init(&cfg, 42).unwrap();
        let m2 = Model::<f32>::init(&cfg, 42).unwrap();
        for ((n1, t1), (_, t2)) in m1.param_refs().iter().zip(m2.param_refs().iter()) {
            assert_eq!(t1.data(), t2.data(), "{n1} differs between same-seed inits");
        }
        let m3 = Model::<f32>::init(&cfg, 43).unwrap();
        assert_ne!(
            m1.embeddings.token.data(),
            m3.embeddings.token.data(),
            "different seeds should differ"
        );
    }

    #[test]
    fn allocated_count_matches_closed_form() {
        use crate::encoder::config::count_parameters;
        for name in Preset::ALL {
            let mut cfg = preset(name, Scale::Tiny);
            cfg.vocab_size = 64;
            cfg.max_len = 16;
            let model = Model::<f32>::init(&cfg, 1).unwrap();
            assert_eq!(
                model.encoder_parameter_count(),
                count_parameters(&cfg),
                "{name:?}"
            );
        }
    }

    #[test]
    fn shared_variant_stores_one_block() {
        let mut cfg = tiny_config();
        cfg.share_layer_parameters = true;
        cfg.num_layers = 4;
        let model = Model::<f32>::init(&cfg, 5).unwrap();
        assert_eq!(model.layers.len(), 1);
        let unshared = Model::<f32>::init(&tiny_config(), 5).unwrap();
        assert_eq!(unshared.layers.len(), 2);
    }

    #[test]
    fn forward_shapes() {
        let mut cfg = tiny_config();
        cfg.max_len = 16;
        let model = Model::<f32>::init(&cfg, 7).unwrap();
        let batch = sample_batch(&vocab(), 16);
        let out = model.forward(&batch, None).unwrap();
        assert_eq!(out.hidden.shape(), &[3, 16, 64]);
        assert_eq!(out.pooled.shape(), &[3, 64]);
        assert_eq!(out.attention.len(), 2);
        assert_eq!(out.attention[0].shape(), &[3, 2, 16, 16]);
        // pooled equals the hidden row at position 0
        assert_eq!(&out.hidden.data()[..64], out.pooled.row(0));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let model = Model::<f32>::init(&tiny_config(), 7).unwrap();
        let batch = sample_batch(&vocab(), 16);
        let out = model.forward(&batch, None).unwrap();
        let t_len = batch.seq_len;
        for attn in &out.attention {
            for bi in 0..batch.batch_size {
                for head in 0..2 {
                    for t1 in 0..t_len {
                        if batch.mask[bi * t_len + t1] == 0 {
                            continue;
                        }
                        let off = ((bi * 2 + head) * t_len + t1) * t_len;
                        let row = &attn.data()[off..off + t_len];
                        let sum: f32 = row.iter().sum();
                        assert!((sum - 1.0).abs() < 1e-5, "row sums to {sum}");
                        // padded keys receive zero probability
                        for t2 in 0..t_len {
                            if batch.mask[bi * t_len + t2] == 0 {
                                assert_eq!(row[t2], 0.0);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn pad_positions_do_not_leak_into_attended_outputs() {
        let model = Model::<f64>::init(&tiny_config(), 9).unwrap();
        let v = vocab();
        let a = encode(&["w0", "w1", "w2"], &v, 12).unwrap();
        let batch = EncodedBatch::from_inputs(&[&a], false).unwrap();
        let out1 = model.forward(&batch, None).unwrap();

        let mut mutated = batch.clone();
        // flip every padded position's token id
        for r in 0..mutated.ids.len() {
            if mutated.mask[r] == 0 {
                mutated.ids[r] = 63;
            }
        }
        let out2 = model.forward(&mutated, None).unwrap();
        let attended = a.attended_len();
        let h = 64;
        for t in 0..attended {
            for c in 0..h {
                assert_eq!(
                    out1.hidden.data()[t * h + c],
                    out2.hidden.data()[t * h + c],
                    "attended output changed at t={t}"
                );
            }
        }
    }

    #[test]
    fn eval_forward_is_deterministic_and_training_seeded() {
        use rand::SeedableRng;
        let model = Model::<f32>::init(&tiny_config(), 11).unwrap();
        let batch = sample_batch(&vocab(), 16);
        let e1 = model.forward(&batch, None).unwrap();
        let e2 = model.forward(&batch, None).unwrap();
        assert_eq!(e1.hidden.data(), e2.hidden.data());

        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let t1 = model.forward(&batch, Some(&mut r1)).unwrap();
        let t2 = model.forward(&batch, Some(&mut r2)).unwrap();
        assert_eq!(t1.hidden.data(), t2.hidden.data());
        // dropout makes training output differ from evaluation
        assert_ne!(t1.hidden.data(), e1.hidden.data());
    }

    #[test]
    fn rejects_overlong_and_out_of_vocab() {
        let mut cfg = tiny_config();
        cfg.max_len = 4;
        let model = Model::<f32>::init(&cfg, 1).unwrap();
        let v = vocab();
        let long = encode(&["w0"; 10], &v, 12).unwrap();
        let batch = EncodedBatch::from_inputs(&[&long], false).unwrap();
        assert!(matches!(model.forward(&batch, None), Err(Error::Shape(_))));

        let mut cfg = tiny_config();
        cfg.vocab_size = 3;
        let model = Model::<f32>::init(&cfg, 1).unwrap();
        let short = encode(&["w0"], &v, 4).unwrap();
        let batch = EncodedBatch::from_inputs(&[&short], false).unwrap();
        assert!(matches!(model.forward(&batch, None), Err(Error::Shape(_))));
    }

    #[test]
    fn classifier_head_requires_two_classes() {
        let mut model = Model::<f32>::init(&tiny_config(), 1).unwrap();
        assert!(model.attach_classifier(1, 2).is_err());
        model.attach_classifier(5, 2).unwrap();
        assert_eq!(model.num_classes(), Some(5));
        // head adds H*C + C parameters on top of the encoder count
        assert_eq!(
            model.total_parameter_count(),
            model.encoder_parameter_count() + (64 * 5 + 5) as u64
        );
    }
}
