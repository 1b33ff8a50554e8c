//! Pretraining objectives: masked-token corruption (80/10/10), next-sentence
//! pair sampling, static/dynamic masking schedules, the joint pretraining
//! loop, and knowledge distillation.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{EncodedBatch, EncoderConfig, Model};
use crate::error::{Error, Result};
use crate::seeding::{derive_seed, rng_from};
use crate::tensor::{adam_step, cross_entropy, AdamState, Real, Tensor};
use crate::tokenizer::{encode, encode_pair, is_special_id, EncodedInput, Vocab, MASK_ID,
    NUM_SPECIAL_TOKENS};

// seed-stream roles
const ROLE_PAIRS: u64 = 1;
const ROLE_CORRUPT: u64 = 2;
const ROLE_SHUFFLE: u64 = 3;
const ROLE_DROPOUT: u64 = 4;
const ROLE_HEAD: u64 = 5;

/// What happened to one selected position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorruptionKind {
    /// Replaced with `[MASK]`.
    Mask,
    /// Replaced with a uniform-random non-special token.
    Random,
    /// Kept unchanged (but still predicted).
    Keep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Corruption {
    pub position: usize,
    pub kind: CorruptionKind,
}

/// One masked-LM training view of an encoded input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlmBatch {
    /// Ids after corruption (same layout as the source input).
    pub corrupted_ids: Vec<u32>,
    /// Original token id exactly at corrupted positions, `None` elsewhere.
    pub targets: Vec<Option<u32>>,
    /// Selected positions in ascending order, with the action taken.
    pub corruptions: Vec<Corruption>,
}

impl MlmBatch {
    pub fn is_empty(&self) -> bool {
        self.corruptions.is_empty()
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Applies masked-LM corruption to one encoded input.
///
/// `round(rate * eligible)` positions are selected (at least one whenever any
/// token is eligible); each becomes `[MASK]` / a random non-special token /
/// itself with the given split. Special-token positions are never eligible.
pub fn mlm_corrupt(
    encoded: &EncodedInput,
    vocab: &Vocab,
    rate: f64,
    split: (f64, f64, f64),
    rng: &mut ChaCha8Rng,
) -> Result<MlmBatch> {
    if !(0.0..1.0).contains(&rate) || rate == 0.0 {
        return Err(Error::Config(format!("mask rate {rate} outside (0, 1)")));
    }
    let (p_mask, p_random, p_keep) = split;
    if (p_mask + p_random + p_keep - 1.0).abs() > 1e-9
        || p_mask < 0.0
        || p_random < 0.0
        || p_keep < 0.0
    {
        return Err(Error::Config(format!("corruption split {split:?} must sum to 1")));
    }
    let eligible: Vec<usize> = encoded
        .ids
        .iter()
        .enumerate()
        .filter(|&(i, &id)| encoded.attention_mask[i] == 1 && !is_special_id(id))
        .map(|(i, _)| i)
        .collect();
    let mut corrupted_ids = encoded.ids.clone();
    let mut targets = vec![None; encoded.ids.len()];
    let mut corruptions = Vec::new();
    if eligible.is_empty() {
        return Ok(MlmBatch {
            corrupted_ids,
            targets,
            corruptions,
        });
    }
    let want = round_half_up(rate * eligible.len() as f64)
        .max(1)
        .min(eligible.len());
    let mut picked = rand::seq::index::sample(rng, eligible.len(), want).into_vec();
    picked.sort_unstable();
    for idx in picked {
        let position = eligible[idx];
        let original = encoded.ids[position];
        let roll: f64 = rng.gen();
        let kind = if roll < p_mask {
            corrupted_ids[position] = MASK_ID;
            CorruptionKind::Mask
        } else if roll < p_mask + p_random {
            let random_id =
                rng.gen_range(NUM_SPECIAL_TOKENS as u32..vocab.len() as u32);
            corrupted_ids[position] = random_id;
            CorruptionKind::Random
        } else {
            CorruptionKind::Keep
        };
        targets[position] = Some(original);
        corruptions.push(Corruption { position, kind });
    }
    Ok(MlmBatch {
        corrupted_ids,
        targets,
        corruptions,
    })
}

/// A pretraining corpus: documents of ordered sentences of tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub documents: Vec<Vec<Vec<String>>>,
}

impl Corpus {
    pub fn from_documents(documents: Vec<Vec<Vec<String>>>) -> Self {
        Self { documents }
    }

    /// Reads a UTF-8 corpus file: one sentence per line, blank line between
    /// documents. Tokens are whitespace-separated.
    pub fn from_file(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_text(&body))
    }

    pub fn from_text(body: &str) -> Self {
        let mut documents = Vec::new();
        let mut current: Vec<Vec<String>> = Vec::new();
        for line in body.lines() {
            if line.trim().is_empty() {
                if !current.is_empty() {
                    documents.push(std::mem::take(&mut current));
                }
            } else {
                current.push(line.split_whitespace().map(|t| t.to_string()).collect());
            }
        }
        if !current.is_empty() {
            documents.push(current);
        }
        Self { documents }
    }

    pub fn sentences(&self) -> impl Iterator<Item = &Vec<String>> {
        self.documents.iter().flatten()
    }

    pub fn sentence_count(&self) -> usize {
        self.documents.iter().map(|d| d.len()).sum()
    }
}

/// A next-sentence-prediction pair with provenance indices
/// (document, sentence) so adjacency claims stay checkable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NspPair {
    pub a_tokens: Vec<String>,
    pub b_tokens: Vec<String>,
    pub is_next: bool,
    pub a_source: (usize, usize),
    pub b_source: (usize, usize),
}

impl NspPair {
    /// True iff the provenance indices say B immediately follows A.
    pub fn provenance_adjacent(&self) -> bool {
        self.a_source.0 == self.b_source.0 && self.b_source.1 == self.a_source.1 + 1
    }
}

/// Samples one sentence pair: with probability 0.5 an adjacent pair
/// (`is_next`), otherwise B comes from a different document.
pub fn sample_nsp_pair(corpus: &Corpus, rng: &mut ChaCha8Rng) -> Result<NspPair> {
    let docs = &corpus.documents;
    let multi: Vec<usize> = docs
        .iter()
        .enumerate()
        .filter(|(_, d)| d.len() >= 2)
        .map(|(i, _)| i)
        .collect();
    if multi.is_empty() {
        return Err(Error::Data(
            "next-sentence sampling needs at least one document with 2+ sentences".into(),
        ));
    }
    if docs.len() < 2 {
        return Err(Error::Data(
            "next-sentence sampling needs at least two documents".into(),
        ));
    }
    if rng.gen_bool(0.5) {
        let doc_idx = multi[rng.gen_range(0..multi.len())];
        let sent_idx = rng.gen_range(0..docs[doc_idx].len() - 1);
        Ok(NspPair {
            a_tokens: docs[doc_idx][sent_idx].clone(),
            b_tokens: docs[doc_idx][sent_idx + 1].clone(),
            is_next: true,
            a_source: (doc_idx, sent_idx),
            b_source: (doc_idx, sent_idx + 1),
        })
    } else {
        let a_doc = rng.gen_range(0..docs.len());
        let a_sent = rng.gen_range(0..docs[a_doc].len());
        let mut b_doc = rng.gen_range(0..docs.len() - 1);
        if b_doc >= a_doc {
            b_doc += 1;
        }
        let b_sent = rng.gen_range(0..docs[b_doc].len());
        Ok(NspPair {
            a_tokens: docs[a_doc][a_sent].clone(),
            b_tokens: docs[b_doc][b_sent].clone(),
            is_next: false,
            a_source: (a_doc, a_sent),
            b_source: (b_doc, b_sent),
        })
    }
}

/// Pretraining hyperparameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PretrainConfig {
    pub mask_rate: f64,
    pub mask_split: (f64, f64, f64),
    pub nsp_enabled: bool,
    pub dynamic_masking: bool,
    pub batch_size: usize,
    pub max_steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            mask_rate: 0.15,
            mask_split: (0.8, 0.1, 0.1),
            nsp_enabled: true,
            dynamic_masking: false,
            batch_size: 16,
            max_steps: 200,
            learning_rate: 1e-4,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    /// Adopts the NSP / dynamic-masking flags an encoder config carries.
    pub fn for_encoder(mut self, encoder: &EncoderConfig) -> Self {
        self.nsp_enabled = encoder.nsp_enabled;
        self.dynamic_masking = encoder.dynamic_masking;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.mask_rate && self.mask_rate < 1.0) {
            return Err(Error::Config("mask_rate must lie in (0, 1)".into()));
        }
        let (a, b, c) = self.mask_split;
        if (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::Config("mask_split must sum to 1".into()));
        }
        if self.batch_size == 0 || self.max_steps == 0 {
            return Err(Error::Config("batch_size and max_steps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct PretrainStep {
    pub epoch: usize,
    pub step: usize,
    pub mlm_loss: f64,
    pub nsp_loss: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct PretrainRecord {
    pub steps: Vec<PretrainStep>,
    pub epochs_run: usize,
}

/// The fixed example set a pretraining run iterates over (pairs when NSP is
/// on, single sentences otherwise). Corruption is applied per epoch on top.
pub struct PretrainDataset {
    pub inputs: Vec<EncodedInput>,
    /// NSP label per input (1 = is_next), absent without NSP.
    pub nsp_labels: Option<Vec<u8>>,
}

impl PretrainDataset {
    pub fn build(
        corpus: &Corpus,
        vocab: &Vocab,
        max_len: usize,
        nsp_enabled: bool,
        seed: u64,
    ) -> Result<Self> {
        if corpus.sentence_count() == 0 {
            return Err(Error::Data("pretraining corpus is empty".into()));
        }
        if nsp_enabled {
            let mut rng = rng_from(seed, &[ROLE_PAIRS]);
            let count = corpus.sentence_count();
            let mut inputs = Vec::with_capacity(count);
            let mut labels = Vec::with_capacity(count);
            for _ in 0..count {
                let pair = sample_nsp_pair(corpus, &mut rng)?;
                let encoded = encode_pair(&pair.a_tokens, &pair.b_tokens, vocab, max_len)?;
                labels.push(u8::from(pair.is_next));
                inputs.push(encoded);
            }
            Ok(Self {
                inputs,
                nsp_labels: Some(labels),
            })
        } else {
            let inputs = corpus
                .sentences()
                .map(|s| encode(s, vocab, max_len))
                .collect::<Result<Vec<_>>>()?;
            Ok(Self {
                inputs,
                nsp_labels: None,
            })
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Corruptions for every example of one epoch.
///
/// Static masking reuses epoch 0's draws; dynamic masking redraws from
/// `seed xor epoch`, so the corruption set is a pure function of
/// (dataset, seed) or (dataset, seed, epoch) respectively.
pub fn corrupt_epoch(
    dataset: &PretrainDataset,
    vocab: &Vocab,
    config: &PretrainConfig,
    epoch: usize,
) -> Result<Vec<MlmBatch>> {
    let epoch_seed = if config.dynamic_masking {
        config.seed ^ epoch as u64
    } else {
        config.seed
    };
    dataset
        .inputs
        .iter()
        .enumerate()
        .map(|(i, input)| {
            let mut rng = rng_from(epoch_seed, &[ROLE_CORRUPT, i as u64]);
            mlm_corrupt(input, vocab, config.mask_rate, config.mask_split, &mut rng)
        })
        .collect()
}

/// Masked-LM logits at the corrupted positions of a batch.
///
/// Returns flat `(positions, targets, logits)` where `positions` index into
/// the `[batch * seq_len]` hidden rows.
fn mlm_logits<T: Real>(
    model: &Model<T>,
    hidden: &Tensor<T>,
    batch_inputs: &[(&EncodedInput, &MlmBatch)],
    seq_len: usize,
) -> Result<(Vec<usize>, Vec<u32>, Tensor<T>)> {
    let h = model.config.hidden_size;
    let head = model
        .mlm_head
        .as_ref()
        .ok_or_else(|| Error::Config("model has no masked-token head".into()))?;
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    for (bi, (_, mlm)) in batch_inputs.iter().enumerate() {
        for c in &mlm.corruptions {
            if c.position >= seq_len {
                continue; // trimmed away with the padding
            }
            positions.push(bi * seq_len + c.position);
            targets.push(mlm.targets[c.position].expect("target set at corruption"));
        }
    }
    let mut gathered = vec![T::zero(); positions.len() * h];
    for (r, &row) in positions.iter().enumerate() {
        gathered[r * h..(r + 1) * h].copy_from_slice(&hidden.data()[row * h..(row + 1) * h]);
    }
    let gathered = Tensor::from_vec(vec![positions.len(), h], gathered)?;
    let logits = head.forward(&gathered)?;
    Ok((positions, targets, logits))
}

fn batch_from_corrupted(
    inputs: &[(&EncodedInput, &MlmBatch)],
    nsp_labels: Option<&[u8]>,
) -> Result<EncodedBatch> {
    let corrupted: Vec<EncodedInput> = inputs
        .iter()
        .enumerate()
        .map(|(i, (input, mlm))| EncodedInput {
            ids: mlm.corrupted_ids.clone(),
            attention_mask: input.attention_mask.clone(),
            segment_ids: input.segment_ids.clone(),
            label: nsp_labels.map(|l| l[i]),
        })
        .collect();
    let refs: Vec<&EncodedInput> = corrupted.iter().collect();
    EncodedBatch::from_inputs(&refs, true)
}

/// Joint masked-LM (+ optional next-sentence) pretraining.
pub fn pretrain<T: Real>(
    model: &mut Model<T>,
    corpus: &Corpus,
    vocab: &Vocab,
    config: &PretrainConfig,
) -> Result<PretrainRecord> {
    config.validate()?;
    let dataset = PretrainDataset::build(
        corpus,
        vocab,
        model.config.max_len,
        config.nsp_enabled,
        config.seed,
    )?;
    if model.mlm_head.is_none() {
        model.attach_mlm_head(derive_seed(config.seed, &[ROLE_HEAD, 0]));
    }
    if config.nsp_enabled && model.nsp_head.is_none() {
        model.attach_nsp_head(derive_seed(config.seed, &[ROLE_HEAD, 1]));
    }
    let mut optimizer = AdamState::new(
        T::from_f64(config.learning_rate),
        T::from_f64(0.9),
        T::from_f64(0.99),
        T::from_f64(1e-8),
    );
    let mut steps = Vec::new();
    let mut step = 0usize;
    let mut epoch = 0usize;
    let mut static_corruptions: Option<Vec<MlmBatch>> = None;
    'outer: loop {
        let corruptions = if config.dynamic_masking {
            corrupt_epoch(&dataset, vocab, config, epoch)?
        } else {
            if static_corruptions.is_none() {
                static_corruptions = Some(corrupt_epoch(&dataset, vocab, config, 0)?);
            }
            static_corruptions.clone().expect("materialized above")
        };
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng_from(config.seed, &[ROLE_SHUFFLE, epoch as u64]));
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let pairs: Vec<(&EncodedInput, &MlmBatch)> = chunk
                .iter()
                .map(|&i| (&dataset.inputs[i], &corruptions[i]))
                .collect();
            let labels: Option<Vec<u8>> = dataset
                .nsp_labels
                .as_ref()
                .map(|l| chunk.iter().map(|&i| l[i]).collect());
            let batch = batch_from_corrupted(&pairs, labels.as_deref())?;
            let mut dropout_rng =
                rng_from(config.seed, &[ROLE_DROPOUT, epoch as u64, batch_idx as u64]);

            model.zero_grads();
            let (out, trace) = model.forward_trace(&batch, Some(&mut dropout_rng))?;

            // masked-token loss over corrupted positions
            let (positions, targets, logits) = mlm_logits(model, &out.hidden, &pairs, batch.seq_len)?;
            let mut mlm_loss = 0.0f64;
            let mut d_hidden = Tensor::zeros(vec![batch.batch_size * batch.seq_len,
                model.config.hidden_size]);
            if !positions.is_empty() {
                let v = model.config.vocab_size;
                let n = positions.len() as f64;
                let mut d_logits = vec![T::zero(); positions.len() * v];
                for (r, &target) in targets.iter().enumerate() {
                    let row = logits.row(r);
                    let (loss, probs) = cross_entropy(row, target as usize)?;
                    mlm_loss += loss.as_f64();
                    for c in 0..v {
                        let one_hot = if c == target as usize { 1.0 } else { 0.0 };
                        d_logits[r * v + c] = T::from_f64((probs[c].as_f64() - one_hot) / n);
                    }
                }
                mlm_loss /= n;
                let d_logits = Tensor::from_vec(vec![positions.len(), v], d_logits)?;
                let gathered = {
                    let h = model.config.hidden_size;
                    let mut g = vec![T::zero(); positions.len() * h];
                    for (r, &row) in positions.iter().enumerate() {
                        g[r * h..(r + 1) * h]
                            .copy_from_slice(&out.hidden.data()[row * h..(row + 1) * h]);
                    }
                    Tensor::from_vec(vec![positions.len(), h], g)?
                };
                let d_gathered = model
                    .mlm_head
                    .as_mut()
                    .expect("attached above")
                    .backward(&d_logits, &gathered)?;
                let h = model.config.hidden_size;
                for (r, &row) in positions.iter().enumerate() {
                    let dst = &mut d_hidden.data_mut()[row * h..(row + 1) * h];
                    for (d, &s) in dst.iter_mut().zip(&d_gathered.data()[r * h..(r + 1) * h]) {
                        *d = *d + s;
                    }
                }
            }

            // next-sentence loss on the pooled [CLS] vector
            let mut nsp_loss = 0.0f64;
            let mut d_pooled = None;
            if let Some(labels) = &labels {
                let head = model.nsp_head.as_ref().expect("attached above");
                let logits = head.forward(&out.pooled)?;
                let bsz = batch.batch_size;
                let mut d_logits = vec![T::zero(); bsz * 2];
                for (bi, &label) in labels.iter().enumerate() {
                    let (loss, probs) = cross_entropy(logits.row(bi), label as usize)?;
                    nsp_loss += loss.as_f64();
                    for c in 0..2 {
                        let one_hot = if c == label as usize { 1.0 } else { 0.0 };
                        d_logits[bi * 2 + c] =
                            T::from_f64((probs[c].as_f64() - one_hot) / bsz as f64);
                    }
                }
                nsp_loss /= bsz as f64;
                let d_logits = Tensor::from_vec(vec![bsz, 2], d_logits)?;
                d_pooled = Some(
                    model
                        .nsp_head
                        .as_mut()
                        .expect("attached above")
                        .backward(&d_logits, &out.pooled)?,
                );
            }

            let loss = mlm_loss + nsp_loss;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite pretraining loss at epoch {epoch}, step {step}"
                )));
            }
            model.backward(&batch, &trace, Some(&d_hidden), d_pooled.as_ref())?;
            let mut params: Vec<&mut Tensor<T>> =
                model.param_refs_mut().into_iter().map(|(_, t)| t).collect();
            adam_step(&mut params, &mut optimizer)?;

            steps.push(PretrainStep {
                epoch,
                step,
                mlm_loss,
                nsp_loss,
                loss,
            });
            step += 1;
            if step >= config.max_steps {
                break 'outer;
            }
        }
        epoch += 1;
    }
    Ok(PretrainRecord {
        steps,
        epochs_run: epoch + 1,
    })
}

/// Distillation hyperparameters on top of the shared pretraining knobs.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DistillConfig {
    pub temperature: f64,
    /// Weight of the soft (teacher-matching) term; `1 - alpha` weights the
    /// hard-label term.
    pub alpha: f64,
    pub pretrain: PretrainConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            temperature: 2.0,
            alpha: 0.5,
            pretrain: PretrainConfig {
                nsp_enabled: false,
                ..PretrainConfig::default()
            },
        }
    }
}

/// Student architecture derived from a teacher: half the depth.
pub fn default_student_config(teacher: &EncoderConfig) -> EncoderConfig {
    EncoderConfig {
        num_layers: (teacher.num_layers / 2).max(1),
        ..teacher.clone()
    }
}

fn log_softmax_f64(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|&x| x - max - log_sum).collect()
}

/// KL(p || q) from two logit rows at temperature `t`.
fn kl_from_logits(p_logits: &[f64], q_logits: &[f64], t: f64) -> f64 {
    let scaled_p: Vec<f64> = p_logits.iter().map(|&x| x / t).collect();
    let scaled_q: Vec<f64> = q_logits.iter().map(|&x| x / t).collect();
    let log_p = log_softmax_f64(&scaled_p);
    let log_q = log_softmax_f64(&scaled_q);
    log_p
        .iter()
        .zip(&log_q)
        .map(|(&lp, &lq)| lp.exp() * (lp - lq))
        .sum()
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct DistillStep {
    pub epoch: usize,
    pub step: usize,
    pub soft_loss: f64,
    pub hard_loss: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct DistillRecord {
    pub steps: Vec<DistillStep>,
}

/// Trains `student` to reproduce the teacher's masked-token behavior:
/// `alpha * T^2 * KL(teacher_T || student_T) + (1 - alpha) * hard CE`,
/// averaged over corrupted positions.
pub fn distill<T: Real>(
    teacher: &Model<T>,
    student: &mut Model<T>,
    corpus: &Corpus,
    vocab: &Vocab,
    config: &DistillConfig,
) -> Result<DistillRecord> {
    if teacher.config.vocab_size != student.config.vocab_size {
        return Err(Error::Config(format!(
            "teacher/student vocabulary mismatch: {} vs {}",
            teacher.config.vocab_size, student.config.vocab_size
        )));
    }
    if teacher.mlm_head.is_none() {
        return Err(Error::Config(
            "teacher has no masked-token head to distill from".into(),
        ));
    }
    if !(config.temperature > 0.0) {
        return Err(Error::Config("temperature must be positive".into()));
    }
    if !(0.0..=1.0).contains(&config.alpha) {
        return Err(Error::Config("alpha must lie in [0, 1]".into()));
    }
    let pc = &config.pretrain;
    pc.validate()?;
    let max_len = student.config.max_len.min(teacher.config.max_len);
    let dataset = PretrainDataset::build(corpus, vocab, max_len, false, pc.seed)?;
    if student.mlm_head.is_none() {
        student.attach_mlm_head(derive_seed(pc.seed, &[ROLE_HEAD, 2]));
    }
    let mut optimizer = AdamState::new(
        T::from_f64(pc.learning_rate),
        T::from_f64(0.9),
        T::from_f64(0.99),
        T::from_f64(1e-8),
    );
    let t = config.temperature;
    let alpha = config.alpha;
    let v = student.config.vocab_size;
    let h = student.config.hidden_size;
    let mut steps = Vec::new();
    let mut step = 0usize;
    let mut epoch = 0usize;
    let mut static_corruptions: Option<Vec<MlmBatch>> = None;
    'outer: loop {
        let corruptions = if pc.dynamic_masking {
            corrupt_epoch(&dataset, vocab, pc, epoch)?
        } else {
            if static_corruptions.is_none() {
                static_corruptions = Some(corrupt_epoch(&dataset, vocab, pc, 0)?);
            }
            static_corruptions.clone().expect("materialized above")
        };
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng_from(pc.seed, &[ROLE_SHUFFLE, epoch as u64]));
        for (batch_idx, chunk) in order.chunks(pc.batch_size).enumerate() {
            let pairs: Vec<(&EncodedInput, &MlmBatch)> = chunk
                .iter()
                .map(|&i| (&dataset.inputs[i], &corruptions[i]))
                .collect();
            let batch = batch_from_corrupted(&pairs, None)?;
            let mut dropout_rng =
                rng_from(pc.seed, &[ROLE_DROPOUT, epoch as u64, batch_idx as u64]);

            // teacher runs in evaluation mode
            let teacher_out = teacher.forward(&batch, None)?;
            let (positions, targets, teacher_logits) =
                mlm_logits(teacher, &teacher_out.hidden, &pairs, batch.seq_len)?;

            student.zero_grads();
            let (out, trace) = student.forward_trace(&batch, Some(&mut dropout_rng))?;
            let (s_positions, _, student_logits) =
                mlm_logits(student, &out.hidden, &pairs, batch.seq_len)?;
            debug_assert_eq!(positions, s_positions);
            if positions.is_empty() {
                continue;
            }
            let n = positions.len() as f64;
            let mut soft_loss = 0.0f64;
            let mut hard_loss = 0.0f64;
            let mut d_logits = vec![T::zero(); positions.len() * v];
            for r in 0..positions.len() {
                let t_row: Vec<f64> = teacher_logits.row(r).iter().map(|x| x.as_f64()).collect();
                let s_row: Vec<f64> = student_logits.row(r).iter().map(|x| x.as_f64()).collect();
                soft_loss += t * t * kl_from_logits(&t_row, &s_row, t);
                let scaled_t: Vec<f64> = t_row.iter().map(|&x| x / t).collect();
                let scaled_s: Vec<f64> = s_row.iter().map(|&x| x / t).collect();
                let p_t: Vec<f64> = log_softmax_f64(&scaled_t).iter().map(|&x| x.exp()).collect();
                let p_s: Vec<f64> = log_softmax_f64(&scaled_s).iter().map(|&x| x.exp()).collect();
                let target = targets[r] as usize;
                let (h_loss, hard_probs) = cross_entropy(
                    &s_row.iter().map(|&x| T::from_f64(x)).collect::<Vec<_>>(),
                    target,
                )?;
                hard_loss += h_loss.as_f64();
                for c in 0..v {
                    let soft_grad = alpha * t * (p_s[c] - p_t[c]);
                    let one_hot = if c == target { 1.0 } else { 0.0 };
                    let hard_grad = (1.0 - alpha) * (hard_probs[c].as_f64() - one_hot);
                    d_logits[r * v + c] = T::from_f64((soft_grad + hard_grad) / n);
                }
            }
            soft_loss /= n;
            hard_loss /= n;
            let loss = alpha * soft_loss + (1.0 - alpha) * hard_loss;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite distillation loss at epoch {epoch}, step {step}"
                )));
            }

            let d_logits = Tensor::from_vec(vec![positions.len(), v], d_logits)?;
            let gathered = {
                let mut g = vec![T::zero(); positions.len() * h];
                for (r, &row) in positions.iter().enumerate() {
                    g[r * h..(r + 1) * h]
                        .copy_from_slice(&out.hidden.data()[row * h..(row + 1) * h]);
                }
                Tensor::from_vec(vec![positions.len(), h], g)?
            };
            let d_gathered = student
                .mlm_head
                .as_mut()
                .expect("attached above")
                .backward(&d_logits, &gathered)?;
            let mut d_hidden =
                Tensor::zeros(vec![batch.batch_size * batch.seq_len, h]);
            for (r, &row) in positions.iter().enumerate() {
                let dst = &mut d_hidden.data_mut()[row * h..(row + 1) * h];
                for (d, &s) in dst.iter_mut().zip(&d_gathered.data()[r * h..(r + 1) * h]) {
                    *d = *d + s;
                }
            }
            student.backward(&batch, &trace, Some(&d_hidden), None)?;
            let mut params: Vec<&mut Tensor<T>> =
                student.param_refs_mut().into_iter().map(|(_, t_)| t_).collect();
            adam_step(&mut params, &mut optimizer)?;

            steps.push(DistillStep {
                epoch,
                step,
                soft_loss,
                hard_loss,
                loss,
            });
            step += 1;
            if step >= pc.max_steps {
                break 'outer;
            }
        }
        epoch += 1;
    }
    Ok(DistillRecord { steps })
}

/// Mean KL(teacher || student) over the corrupted positions of a fixed
/// evaluation pass (temperature 1, both models in evaluation mode).
pub fn mean_kl_to_teacher<T: Real>(
    teacher: &Model<T>,
    student: &Model<T>,
    corpus: &Corpus,
    vocab: &Vocab,
    config: &PretrainConfig,
) -> Result<f64> {
    let max_len = student.config.max_len.min(teacher.config.max_len);
    let dataset = PretrainDataset::build(corpus, vocab, max_len, false, config.seed)?;
    let corruptions = corrupt_epoch(&dataset, vocab, config, 0)?;
    let mut total = 0.0f64;
    let mut count = 0usize;
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(config.batch_size) {
        let pairs: Vec<(&EncodedInput, &MlmBatch)> = chunk
            .iter()
            .map(|&i| (&dataset.inputs[i], &corruptions[i]))
            .collect();
        let batch = batch_from_corrupted(&pairs, None)?;
        let teacher_out = teacher.forward(&batch, None)?;
        let student_out = student.forward(&batch, None)?;
        let (positions, _, t_logits) = mlm_logits(teacher, &teacher_out.hidden, &pairs, batch.seq_len)?;
        let (_, _, s_logits) = mlm_logits(student, &student_out.hidden, &pairs, batch.seq_len)?;
        for r in 0..positions.len() {
            let t_row: Vec<f64> = t_logits.row(r).iter().map(|x| x.as_f64()).collect();
            let s_row: Vec<f64> = s_logits.row(r).iter().map(|x| x.as_f64()).collect();
            total += kl_from_logits(&t_row, &s_row, 1.0);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Data("no corrupted positions to compare on".into()));
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{preset, Preset, Scale};
    use crate::seeding::rng_from;
    use proptest::prelude::*;

    fn vocab() -> Vocab {
        let corpus: Vec<Vec<String>> = vec![(0..50).map(|i| format!("w{i}")).collect()];
        Vocab::build(corpus, 100, 1, true).unwrap()
    }

    fn default_split() -> (f64, f64, f64) {
        (0.8, 0.1, 0.1)
    }

    #[test]
    fn selects_rounded_count() {
        let v = vocab();
        let tokens: Vec<String> = (0..20).map(|i| format!("w{i}")).collect();
        let encoded = encode(&tokens, &v, 32).unwrap();
        let mut rng = rng_from(7, &[]);
        let mlm = mlm_corrupt(&encoded, &v, 0.15, default_split(), &mut rng).unwrap();
        assert_eq!(mlm.corruptions.len(), 3); // round(0.15 * 20)
    }

    #[test]
    fn specials_only_input_yields_empty_batch() {
        let v = vocab();
        let encoded = encode(&Vec::<&str>::new(), &v, 8).unwrap();
        let mut rng = rng_from(7, &[]);
        let mlm = mlm_corrupt(&encoded, &v, 0.15, default_split(), &mut rng).unwrap();
        assert!(mlm.is_empty());
        assert_eq!(mlm.corrupted_ids, encoded.ids);
    }

    #[test]
    fn short_inputs_still_get_one_corruption() {
        let v = vocab();
        let encoded = encode(&["w0", "w1"], &v, 8).unwrap();
        let mut rng = rng_from(3, &[]);
        let mlm = mlm_corrupt(&encoded, &v, 0.15, default_split(), &mut rng).unwrap();
        assert_eq!(mlm.corruptions.len(), 1); // floor of one when eligible
    }

    #[test]
    fn corruption_statistics() {
        // ~27 eligible tokens x 1500 sequences > 4 * 10^4
        let v = vocab();
        let mut selected = 0usize;
        let mut eligible_total = 0usize;
        let mut kind_counts = [0usize; 3];
        for i in 0..1500u64 {
            let tokens: Vec<String> = (0..27).map(|j| format!("w{}", (i as usize + j) % 50)).collect();
            let encoded = encode(&tokens, &v, 32).unwrap();
            let mut rng = rng_from(11, &[i]);
            let mlm = mlm_corrupt(&encoded, &v, 0.15, default_split(), &mut rng).unwrap();
            eligible_total += 27;
            selected += mlm.corruptions.len();
            for c in &mlm.corruptions {
                match c.kind {
                    CorruptionKind::Mask => kind_counts[0] += 1,
                    CorruptionKind::Random => kind_counts[1] += 1,
                    CorruptionKind::Keep => kind_counts[2] += 1,
                }
                // never a special position
                assert!(!is_special_id(encoded.ids[c.position]));
            }
        }
        let frac = selected as f64 / eligible_total as f64;
        assert!((0.145..=0.155).contains(&frac), "selected fraction {frac}");
        let mask_frac = kind_counts[0] as f64 / selected as f64;
        let random_frac = kind_counts[1] as f64 / selected as f64;
        let keep_frac = kind_counts[2] as f64 / selected as f64;
        assert!((mask_frac - 0.8).abs() <= 0.01, "mask fraction {mask_frac}");
        assert!((random_frac - 0.1).abs() <= 0.01, "random fraction {random_frac}");
        assert!((keep_frac - 0.1).abs() <= 0.01, "keep fraction {keep_frac}");
    }

    proptest! {
        #[test]
        fn corruption_invariants(
            len in 1usize..24,
            seed in 0u64..1000,
        ) {
            let v = vocab();
            let tokens: Vec<String> = (0..len).map(|i| format!("w{}", i % 50)).collect();
            let encoded = encode(&tokens, &v, 32).unwrap();
            let mut rng = rng_from(seed, &[]);
            let mlm = mlm_corrupt(&encoded, &v, 0.15, (0.8, 0.1, 0.1), &mut rng).unwrap();
            // targets exactly at corruption positions
            let marked: Vec<usize> = mlm.targets.iter().enumerate()
                .filter(|(_, t)| t.is_some()).map(|(i, _)| i).collect();
            let listed: Vec<usize> = mlm.corruptions.iter().map(|c| c.position).collect();
            prop_assert_eq!(marked, listed);
            for c in &mlm.corruptions {
                // specials untouched, originals preserved as targets
                prop_assert!(!is_special_id(encoded.ids[c.position]));
                prop_assert_eq!(mlm.targets[c.position], Some(encoded.ids[c.position]));
                match c.kind {
                    CorruptionKind::Mask => prop_assert_eq!(mlm.corrupted_ids[c.position], MASK_ID),
                    CorruptionKind::Keep =>
                        prop_assert_eq!(mlm.corrupted_ids[c.position], encoded.ids[c.position]),
                    CorruptionKind::Random =>
                        prop_assert!(!is_special_id(mlm.corrupted_ids[c.position])),
                }
            }
            // non-selected positions are untouched
            for i in 0..encoded.ids.len() {
                if mlm.targets[i].is_none() {
                    prop_assert_eq!(mlm.corrupted_ids[i], encoded.ids[i]);
                }
            }
        }
    }

    fn two_doc_corpus() -> Corpus {
        Corpus::from_text("a b c\nd e f\n\ng h i\n")
    }

    #[test]
    fn forced_nsp_structure() {
        // one 2-sentence document plus one 1-sentence document
        let corpus = two_doc_corpus();
        let mut rng = rng_from(5, &[]);
        for _ in 0..200 {
            let pair = sample_nsp_pair(&corpus, &mut rng).unwrap();
            if pair.is_next {
                assert_eq!(pair.a_source, (0, 0));
                assert_eq!(pair.b_source, (0, 1));
                assert!(pair.provenance_adjacent());
            } else {
                assert_ne!(pair.a_source.0, pair.b_source.0);
                assert!(!pair.provenance_adjacent());
            }
        }
    }

    #[test]
    fn nsp_fraction_near_half() {
        let corpus = Corpus::from_text("a b\nc d\ne f\n\ng h\ni j\n\nk l\n");
        let mut rng = rng_from(13, &[]);
        let n = 10_000;
        let mut next = 0usize;
        for _ in 0..n {
            let pair = sample_nsp_pair(&corpus, &mut rng).unwrap();
            if pair.is_next {
                next += 1;
                assert!(pair.provenance_adjacent());
            }
        }
        let frac = next as f64 / n as f64;
        assert!((0.48..=0.52).contains(&frac), "is_next fraction {frac}");
    }

    #[test]
    fn degenerate_corpora_error() {
        let single = Corpus::from_text("a b c\n");
        let mut rng = rng_from(1, &[]);
        assert!(sample_nsp_pair(&single, &mut rng).is_err());
        // two docs but no adjacent pair anywhere
        let no_adjacent = Corpus::from_text("a b\n\nc d\n");
        assert!(sample_nsp_pair(&no_adjacent, &mut rng).is_err());
    }

    #[test]
    fn corpus_file_parsing() {
        let corpus = Corpus::from_text("a b\nc d\n\n\ne f\n");
        assert_eq!(corpus.documents.len(), 2);
        assert_eq!(corpus.documents[0].len(), 2);
        assert_eq!(corpus.documents[1].len(), 1);
        assert_eq!(corpus.sentence_count(), 3);
    }

    fn synthetic_corpus(sentences: usize) -> Corpus {
        // two "documents" of patterned sentences
        let mut docs = vec![Vec::new(), Vec::new()];
        for i in 0..sentences {
            let s: Vec<String> = (0..8).map(|j| format!("w{}", (3 * i + 2 * j) % 40)).collect();
            docs[i % 2].push(s);
        }
        Corpus::from_documents(docs)
    }

    fn tiny_model(seed: u64, nsp: bool, dynamic: bool) -> Model<f32> {
        let mut cfg = preset(Preset::BertBase, Scale::Tiny);
        cfg.vocab_size = 100;
        cfg.max_len = 24;
        cfg.num_layers = 1;
        cfg.nsp_enabled = nsp;
        cfg.dynamic_masking = dynamic;
        Model::init(&cfg, seed).unwrap()
    }

    #[test]
    fn static_masking_is_stable_across_epochs() {
        let v = vocab();
        let corpus = synthetic_corpus(30);
        let config = PretrainConfig {
            dynamic_masking: false,
            nsp_enabled: false,
            seed: 21,
            ..PretrainConfig::default()
        };
        let dataset = PretrainDataset::build(&corpus, &v, 24, false, 21).unwrap();
        let e0 = corrupt_epoch(&dataset, &v, &config, 0).unwrap();
        let e1 = corrupt_epoch(&dataset, &v, &config, 1).unwrap();
        assert_eq!(e0, e1);
    }

    #[test]
    fn dynamic_masking_differs_between_epochs() {
        // sentences with 20 eligible tokens select 3 positions each epoch;
        // the chance of redrawing the same set is 1/C(20,3), so nearly every
        // example must change
        let v = vocab();
        let docs: Vec<Vec<Vec<String>>> = (0..2)
            .map(|d| {
                (0..30)
                    .map(|i| {
                        (0..20)
                            .map(|j| format!("w{}", (d * 7 + 5 * i + 3 * j) % 40))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let corpus = Corpus::from_documents(docs);
        let config = PretrainConfig {
            dynamic_masking: true,
            nsp_enabled: false,
            seed: 21,
            ..PretrainConfig::default()
        };
        let dataset = PretrainDataset::build(&corpus, &v, 32, false, 21).unwrap();
        let e0 = corrupt_epoch(&dataset, &v, &config, 0).unwrap();
        let e1 = corrupt_epoch(&dataset, &v, &config, 1).unwrap();
        let differing = e0
            .iter()
            .zip(&e1)
            .filter(|(a, b)| {
                a.corruptions.iter().map(|c| c.position).collect::<Vec<_>>()
                    != b.corruptions.iter().map(|c| c.position).collect::<Vec<_>>()
            })
            .count();
        assert!(
            differing * 100 >= e0.len() * 99,
            "only {differing}/{} examples changed corruption",
            e0.len()
        );
    }

    #[test]
    fn pretraining_reduces_mlm_loss() {
        let v = vocab();
        let corpus = synthetic_corpus(40);
        let mut model = tiny_model(3, true, false);
        let config = PretrainConfig {
            batch_size: 8,
            max_steps: 60,
            learning_rate: 3e-3,
            seed: 3,
            ..PretrainConfig::default()
        }
        .for_encoder(&model.config.clone());
        let record = pretrain(&mut model, &corpus, &v, &config).unwrap();
        assert_eq!(record.steps.len(), 60);
        let first = record.steps.first().unwrap().mlm_loss;
        let last = record.steps.last().unwrap().mlm_loss;
        assert!(last < first, "mlm loss did not fall: {first} -> {last}");
        assert!(model.all_finite());
    }

    #[test]
    fn nsp_disabled_runs_without_pair_head() {
        let v = vocab();
        let corpus = synthetic_corpus(20);
        let mut model = tiny_model(5, false, true);
        let config = PretrainConfig {
            batch_size: 8,
            max_steps: 5,
            seed: 5,
            ..PretrainConfig::default()
        }
        .for_encoder(&model.config.clone());
        assert!(!config.nsp_enabled && config.dynamic_masking);
        pretrain(&mut model, &corpus, &v, &config).unwrap();
        assert!(model.nsp_head.is_none());
        assert!(model.mlm_head.is_some());
    }

    #[test]
    fn distillation_rejects_vocab_mismatch() {
        let v = vocab();
        let corpus = synthetic_corpus(10);
        let mut teacher = tiny_model(1, false, false);
        teacher.attach_mlm_head(9);
        let mut bad_cfg = default_student_config(&teacher.config);
        bad_cfg.vocab_size = 123;
        let mut student = Model::<f32>::init(&bad_cfg, 2).unwrap();
        let err = distill(&teacher, &mut student, &corpus, &v, &DistillConfig::default());
        assert!(err.is_err());
    }

    #[test]
    fn identical_logits_give_zero_kl() {
        assert!(kl_from_logits(&[0.3, -1.0, 2.0], &[0.3, -1.0, 2.0], 2.0).abs() < 1e-12);
        assert!(kl_from_logits(&[0.3, -1.0, 2.0], &[0.4, -1.0, 2.0], 1.0) > 0.0);
    }

    #[test]
    fn student_defaults_to_half_depth() {
        let mut teacher_cfg = preset(Preset::BertBase, Scale::Tiny);
        teacher_cfg.num_layers = 2;
        assert_eq!(default_student_config(&teacher_cfg).num_layers, 1);
        teacher_cfg.num_layers = 1;
        assert_eq!(default_student_config(&teacher_cfg).num_layers, 1);
    }
}
