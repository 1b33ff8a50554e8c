//! Finite-difference gradient oracle shared by the gradient tests and the
//! acceptance suite. Kept independent of the production backward pass: the
//! numeric side only ever calls `forward`.

use minibert::encoder::{EncodedBatch, EncoderConfig, Model};
use minibert::tensor::{cross_entropy, softmax, Tensor};
use minibert::tokenizer::{encode, Vocab};

pub const FD_STEP: f64 = 1e-5;

pub fn gradcheck_vocab() -> Vocab {
    let corpus: Vec<Vec<String>> = vec![(0..20).map(|i| format!("w{i}")).collect()];
    Vocab::build(corpus, 32, 1, true).unwrap()
}

/// Two examples of different lengths so masked attention is exercised.
pub fn gradcheck_batch(v: &Vocab) -> EncodedBatch {
    let a = encode(&["w0", "w1", "w2", "w3"], v, 8).unwrap().with_label(1);
    let b = encode(&["w4", "w5"], v, 8).unwrap().with_label(3);
    EncodedBatch::from_inputs(&[&a, &b], false).unwrap()
}

/// Mean classifier cross-entropy of the current weights (pure evaluation).
pub fn loss_value(model: &Model<f64>, batch: &EncodedBatch) -> f64 {
    let out = model.forward(batch, None).unwrap();
    let logits = model
        .classifier
        .as_ref()
        .unwrap()
        .forward(&out.pooled)
        .unwrap();
    let b = batch.batch_size;
    let mut total = 0.0;
    for bi in 0..b {
        let label = batch.labels[bi].unwrap() as usize;
        let (loss, _) = cross_entropy(logits.row(bi), label).unwrap();
        total += loss;
    }
    total / b as f64
}

/// One traced forward + backward, leaving gradients in the model.
pub fn accumulate_analytic(model: &mut Model<f64>, batch: &EncodedBatch) {
    model.zero_grads();
    let (out, trace) = model.forward_trace(batch, None).unwrap();
    let logits = model
        .classifier
        .as_ref()
        .unwrap()
        .forward(&out.pooled)
        .unwrap();
    let b = batch.batch_size;
    let c = model.num_classes().unwrap();
    let mut d_logits = vec![0.0f64; b * c];
    for bi in 0..b {
        let label = batch.labels[bi].unwrap() as usize;
        let probs = softmax(logits.row(bi)).unwrap();
        for ci in 0..c {
            let one_hot = if ci == label { 1.0 } else { 0.0 };
            d_logits[bi * c + ci] = (probs[ci] - one_hot) / b as f64;
        }
    }
    let d_logits = Tensor::from_vec(vec![b, c], d_logits).unwrap();
    let d_pooled = model
        .classifier
        .as_mut()
        .unwrap()
        .backward(&d_logits, &out.pooled)
        .unwrap();
    model.backward(batch, &trace, None, Some(&d_pooled)).unwrap();
}

/// Max relative error between the analytic gradient and central finite
/// differences over every parameter scalar of a freshly-initialized model.
pub fn max_gradient_error(config: &EncoderConfig, seed: u64) -> f64 {
    let v = gradcheck_vocab();
    let batch = gradcheck_batch(&v);
    let mut model = Model::<f64>::init(config, seed).unwrap();
    model.attach_classifier(5, seed ^ 0xC1A5).unwrap();
    accumulate_analytic(&mut model, &batch);
    let analytic: Vec<Vec<f64>> = model
        .param_refs()
        .iter()
        .map(|(_, t)| t.grad().unwrap().to_vec())
        .collect();

    let mut worst = 0.0f64;
    for pi in 0..analytic.len() {
        for j in 0..analytic[pi].len() {
            let orig = {
                let mut refs = model.param_refs_mut();
                let val = refs[pi].1.data_mut()[j];
                refs[pi].1.data_mut()[j] = val + FD_STEP;
                val
            };
            let up = loss_value(&model, &batch);
            {
                let mut refs = model.param_refs_mut();
                refs[pi].1.data_mut()[j] = orig - FD_STEP;
            }
            let down = loss_value(&model, &batch);
            {
                let mut refs = model.param_refs_mut();
                refs[pi].1.data_mut()[j] = orig;
            }
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[pi][j];
            // the floor keeps noise-level gradients (~ machine eps / h) from
            // dominating the relative error
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            let rel = (a - numeric).abs() / denom;
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}
