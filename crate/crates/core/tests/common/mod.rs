//! f64 reference implementations of the model's layers, written
//! independently of the library kernels, plus a central-difference gradient
//! checker built on them.

#![allow(dead_code)]

use codesum::decoder::DecoderParams;
use codesum::encoder::EncoderParams;
use codesum::codec::TargetEncoding;
use codesum::model::{Example, Model, ModelConfig};
use codesum::numerics::{ParamSet, Tape, Tensor, Var};
use codesum::vocab::{build_vocabulary, EnglishDictionary, Special, Vocabulary, WordCounts};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod bleu_oracle;

pub const FD_STEP: f64 = 1e-3;
/// Denominator floor for relative errors: gradients smaller than this are
/// compared on absolute error scaled by the floor.
pub const REL_FLOOR: f64 = 1e-3;
pub const GRAD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

// ---- layers ----

pub fn embed(table: &[f64], cols: usize, ids: &[usize]) -> Vec<f64> {
    ids.iter()
        .flat_map(|&i| table[i * cols..(i + 1) * cols].iter().copied())
        .collect()
}

/// `input` is `[len, d_in]`, `filters` `[w, d_in, d_out]`.
pub fn conv1d(input: &[f64], d_in: usize, filters: &[f64], w: usize, bias: &[f64]) -> Vec<f64> {
    let len = input.len() / d_in;
    let d_out = bias.len();
    let mut out = Vec::with_capacity((len + 1 - w) * d_out);
    for t in 0..=len - w {
        for o in 0..d_out {
            let mut s = bias[o];
            for k in 0..w {
                for i in 0..d_in {
                    s += input[(t + k) * d_in + i] * filters[(k * d_in + i) * d_out + o];
                }
            }
            out.push(s);
        }
    }
    out
}

pub fn relu(x: &[f64], pattern: &mut Vec<bool>) -> Vec<f64> {
    pattern.extend(x.iter().map(|&v| v > 0.0));
    x.iter().map(|&v| v.max(0.0)).collect()
}

pub fn pool(x: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for row in x.chunks(d) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

/// `weight` is `[d_in, d_out]`.
pub fn dense(x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let d_out = bias.len();
    (0..d_out)
        .map(|o| bias[o] + x.iter().enumerate().map(|(i, xi)| xi * weight[i * d_out + o]).sum::<f64>())
        .collect()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Gate order input, forget, candidate, output.
pub fn lstm(x: &[f64], h: &[f64], c: &[f64], w_x: &[f64], w_h: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = h.len();
    let z: Vec<f64> = (0..4 * n)
        .map(|j| {
            b[j] + x.iter().enumerate().map(|(i, v)| v * w_x[i * 4 * n + j]).sum::<f64>()
                + h.iter().enumerate().map(|(i, v)| v * w_h[i * 4 * n + j]).sum::<f64>()
        })
        .collect();
    let mut h_new = vec![0.0; n];
    let mut c_new = vec![0.0; n];
    for k in 0..n {
        let i = sigmoid(z[k]);
        let f = sigmoid(z[n + k]);
        let g = z[2 * n + k].tanh();
        let o = sigmoid(z[3 * n + k]);
        c_new[k] = f * c[k] + i * g;
        h_new[k] = o * c_new[k].tanh();
    }
    (h_new, c_new)
}

pub fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[target]
}

pub fn sum_squares(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

// ---- composed model ----

pub fn params_f64(params: &ParamSet) -> Vec<Vec<f64>> {
    params.iter().map(|(_, p)| to_f64(&p.tensor)).collect()
}

pub fn encoder_forward(p: &[Vec<f64>], enc: &EncoderParams, ids: &[usize], pattern: &mut Vec<bool>) -> Vec<f64> {
    let c = enc.config;
    let x = embed(&p[enc.byte_embedding.index()], c.embed_dim, ids);
    let x = conv1d(&x, c.embed_dim, &p[enc.conv1_filters.index()], c.conv1_width, &p[enc.conv1_bias.index()]);
    let x = relu(&x, pattern);
    let x = conv1d(&x, c.conv1_filters, &p[enc.conv2_filters.index()], c.conv2_width, &p[enc.conv2_bias.index()]);
    let x = relu(&x, pattern);
    let pooled = pool(&x, c.conv2_filters);
    dense(&pooled, &p[enc.projection.index()], &p[enc.projection_bias.index()])
}

/// Runs the decoder over `inputs` and returns the logits after each one.
pub fn decoder_logits(p: &[Vec<f64>], dec: &DecoderParams, thought: &[f64], inputs: &[usize]) -> Vec<Vec<f64>> {
    let h = dec.config.hidden;
    let mut state: Vec<(Vec<f64>, Vec<f64>)> = (0..dec.layers.len())
        .map(|l| (if l == 0 { thought.to_vec() } else { vec![0.0; h] }, vec![0.0; h]))
        .collect();
    let table = &p[dec.token_embedding.index()];
    let mut out = Vec::with_capacity(inputs.len());
    for &token in inputs {
        let mut x = table[token * h..(token + 1) * h].to_vec();
        for (layer, s) in dec.layers.iter().zip(state.iter_mut()) {
            let (hn, cn) = lstm(
                &x,
                &s.0,
                &s.1,
                &p[layer.input_weight.index()],
                &p[layer.recurrent_weight.index()],
                &p[layer.bias.index()],
            );
            x = hn.clone();
            *s = (hn, cn);
        }
        out.push(dense(&x, &p[dec.projection.index()], &p[dec.projection_bias.index()]));
    }
    out
}

pub fn decoder_loss(p: &[Vec<f64>], dec: &DecoderParams, thought: &[f64], target: &[usize]) -> f64 {
    let logits = decoder_logits(p, dec, thought, &target[..target.len() - 1]);
    let total: f64 = logits
        .iter()
        .zip(&target[1..])
        .map(|(l, &t)| cross_entropy(l, t))
        .sum();
    total / (target.len() - 1) as f64
}

/// Total log-probability of generating `tokens` after `start`.
pub fn sequence_log_prob(p: &[Vec<f64>], dec: &DecoderParams, thought: &[f64], start: usize, tokens: &[usize]) -> f64 {
    let mut inputs = vec![start];
    inputs.extend_from_slice(&tokens[..tokens.len().saturating_sub(1)]);
    decoder_logits(p, dec, thought, &inputs)
        .iter()
        .zip(tokens)
        .map(|(l, &t)| -cross_entropy(l, t))
        .sum()
}

pub fn model_loss(p: &[Vec<f64>], model: &Model, example: &Example, pattern: &mut Vec<bool>) -> f64 {
    let thought = encoder_forward(p, &model.encoder, &example.code_ids, pattern);
    decoder_loss(p, &model.decoder, &thought, example.target.ids())
}

/// Largest relative error between `analytic` and central differences of
/// `f` over every coordinate of `point`. `f` returns the loss and the ReLU
/// sign pattern; coordinates where the pattern flips inside the step are
/// skipped. Returns `(max error, checked, skipped)`.
pub fn check_gradient(
    point: &mut [f64],
    analytic: &[f64],
    mut f: impl FnMut(&[f64]) -> (f64, Vec<bool>),
) -> (f64, usize, usize) {
    assert_eq!(point.len(), analytic.len());
    let (_, base) = f(point);
    let mut worst: f64 = 0.0;
    let (mut checked, mut skipped) = (0, 0);
    for i in 0..point.len() {
        let orig = point[i];
        point[i] = orig + FD_STEP;
        let (plus, pp) = f(point);
        point[i] = orig - FD_STEP;
        let (minus, pm) = f(point);
        point[i] = orig;
        if pp != base || pm != base {
            skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        worst = worst.max(rel_error(analytic[i], numeric));
        checked += 1;
    }
    (worst, checked, skipped)
}

/// Checks every parameter of `model` on `example`. Returns the worst
/// relative error and the number of checked coordinates.
pub fn check_model_gradients(model: &Model, example: &Example) -> (f64, usize) {
    let (_, grads) = model.loss_and_gradients(example).unwrap();
    let base = params_f64(&model.params);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (id, p) in model.params.iter() {
        let analytic: Vec<f64> = match grads.get(id) {
            Some(g) => to_f64(g),
            None => vec![0.0; p.tensor.numel()],
        };
        let mut all = base.clone();
        let mut point = all[id.index()].clone();
        let (w, c, _) = check_gradient(&mut point, &analytic, |x| {
            all[id.index()].copy_from_slice(x);
            let mut pattern = Vec::new();
            let loss = model_loss(&all, model, example, &mut pattern);
            (loss, pattern)
        });
        worst = worst.max(w);
        checked += c;
    }
    (worst, checked)
}

/// Checks the gradient of a scalar loss with respect to every input tensor.
pub fn check_layer(
    inputs: &[Tensor],
    build: impl Fn(&mut Tape, &[Var]) -> Var,
    reference: impl Fn(&[Vec<f64>], &mut Vec<bool>) -> f64,
) -> f64 {
    let params = ParamSet::new();
    let mut tape = Tape::new(&params);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();

    let base: Vec<Vec<f64>> = inputs.iter().map(to_f64).collect();
    let mut worst: f64 = 0.0;
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*var)
            .map(to_f64)
            .unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        let mut all = base.clone();
        let mut point = all[k].clone();
        let (w, checked, _) = check_gradient(&mut point, &analytic, |x| {
            all[k].copy_from_slice(x);
            let mut pattern = Vec::new();
            (reference(&all, &mut pattern), pattern)
        });
        assert!(checked > 0, "input {k}: every coordinate skipped");
        worst = worst.max(w);
    }
    worst
}

/// Model with toy shapes and parameters drawn from ±0.3, plus one example.
pub fn tiny_model(seed: u64, layers: usize) -> (Model, Example) {
    let config = ModelConfig {
        char_embed_dim: 3,
        conv1_width: 3,
        conv1_filters: 4,
        conv2_width: 2,
        conv2_filters: 5,
        hidden: 6,
        layers,
    };
    let vocab_size = 10;
    let mut model = Model::initialized(config, vocab_size, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    for (_, p) in model.params.iter_mut() {
        for v in p.tensor.data_mut() {
            *v = r.random_range(-0.3..0.3);
        }
    }
    let code_len = r.random_range(5..=20);
    let code_ids = (0..code_len).map(|_| r.random_range(0..256)).collect();
    let target_len = r.random_range(2..=6);
    let target = (0..target_len).map(|_| r.random_range(0..vocab_size)).collect();
    let example = Example {
        code_ids,
        target: TargetEncoding::from_ids(target),
    };
    (model, example)
}

pub const BEAM_VOCAB: usize = 5;

/// Tiny model with parameters uniform in ±1 over a five-token vocabulary,
/// plus random code bytes to condition it on.
pub fn beam_model(seed: u64) -> (Model, Vec<usize>) {
    let config = ModelConfig {
        char_embed_dim: 4,
        conv1_width: 3,
        conv1_filters: 6,
        conv2_width: 3,
        conv2_filters: 6,
        hidden: 8,
        layers: 1,
    };
    let mut model = Model::initialized(config, BEAM_VOCAB, seed).unwrap();
    let mut r = rng(1000 + seed);
    for (_, p) in model.params.iter_mut() {
        for v in p.tensor.data_mut() {
            *v = r.random_range(-1.0..1.0);
        }
    }
    let code_ids = (0..r.random_range(5..20)).map(|_| r.random_range(0..256)).collect();
    (model, code_ids)
}

// ---- random text ----

const LETTERS: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";
const MARKS: &[u8] = b".,;:()'\"!-_/";

/// A word over a narrow alphabet.
pub fn random_word(rng: &mut ChaCha8Rng, alphabet: usize) -> String {
    let len = rng.random_range(1..=9);
    (0..len)
        .map(|_| LETTERS[rng.random_range(0..alphabet.min(LETTERS.len()))] as char)
        .collect()
}

/// Counts, dictionary, and vocabulary built from random words.
pub fn random_vocabulary(rng: &mut ChaCha8Rng) -> Vocabulary {
    let alphabet = rng.random_range(3..=12);
    let mut counts = WordCounts::new();
    for _ in 0..rng.random_range(5..60) {
        counts.add(&random_word(rng, alphabet), rng.random_range(1..30));
    }
    let dict_words: Vec<String> = (0..rng.random_range(1..20))
        .map(|_| {
            random_word(rng, alphabet)
                .chars()
                .filter(|c| c.is_ascii_lowercase())
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .chain(std::iter::once("a".to_owned()))
        .collect();
    let dict = EnglishDictionary::from_words(&dict_words).unwrap();
    build_vocabulary(&counts, &dict, rng.random_range(1..=20)).unwrap()
}

/// Mixed-case words, digits, punctuation, and irregular spacing.
pub fn random_comment(rng: &mut ChaCha8Rng) -> String {
    let mut out = String::new();
    for _ in 0..rng.random_range(0..15) {
        match rng.random_range(0..10) {
            0..=6 => {
                let word = random_word(rng, 36);
                if rng.random_bool(0.2) {
                    out.push_str(&word.to_uppercase());
                } else {
                    out.push_str(&word);
                }
            }
            7 | 8 => out.push(MARKS[rng.random_range(0..MARKS.len())] as char),
            _ => out.push_str(["\t", "  ", "\n"][rng.random_range(0..3)]),
        }
        if rng.random_bool(0.7) {
            out.push(' ');
        }
    }
    out
}

/// True when spell markers alternate begin/end, start outside a span, and
/// end outside one.
pub fn spans_balanced(ids: &[usize]) -> bool {
    let (begin, end) = (Special::BeginSpell as usize, Special::EndSpell as usize);
    let mut open = false;
    for &id in ids {
        if id == begin {
            if open {
                return false;
            }
            open = true;
        } else if id == end {
            if !open {
                return false;
            }
            open = false;
        }
    }
    !open
}
