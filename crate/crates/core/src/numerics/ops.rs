//! Forward kernels for the layers the model uses, plus the backward helpers
//! the tape calls. Reductions accumulate in f64; stored values are f32.

use super::{NumericsError, Tensor};

fn shape_err(msg: String) -> NumericsError {
    NumericsError::Shape(msg)
}

pub(crate) fn expect_rank(t: &Tensor, rank: usize, what: &str) -> Result<(), NumericsError> {
    if t.rank() != rank {
        return Err(shape_err(format!(
            "{what} must have rank {rank}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// Gradient accumulation target. Activation gradients are kept in f64,
/// parameter gradients in f32.
pub(crate) trait Accum: Copy + Default {
    fn add(&mut self, v: f64);
}

impl Accum for f64 {
    #[inline]
    fn add(&mut self, v: f64) {
        *self += v;
    }
}

impl Accum for f32 {
    #[inline]
    fn add(&mut self, v: f64) {
        *self += v as f32;
    }
}

/// `acc[j] += sum_i x[i] * w[i, j]` for a row-major `w` with `cols` columns.
#[inline]
pub(crate) fn matvec_acc(x: &[f32], w: &[f32], cols: usize, acc: &mut [f64]) {
    debug_assert_eq!(x.len() * cols, w.len());
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let xi = xi as f64;
        let row = &w[i * cols..(i + 1) * cols];
        for (a, &wij) in acc.iter_mut().zip(row) {
            *a += xi * wij as f64;
        }
    }
}

/// `out[i] += sum_j w[i, j] * g[j]`.
#[inline]
pub(crate) fn matvec_t_acc<A: Accum>(w: &[f32], cols: usize, g: &[f64], out: &mut [A]) {
    for (i, o) in out.iter_mut().enumerate() {
        let row = &w[i * cols..(i + 1) * cols];
        let s: f64 = row.iter().zip(g).map(|(&wij, &gj)| wij as f64 * gj).sum();
        o.add(s);
    }
}

/// `dw[i, j] += x[i] * g[j]`.
#[inline]
pub(crate) fn outer_acc<A: Accum>(x: &[f32], g: &[f64], dw: &mut [A]) {
    let cols = g.len();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let xi = xi as f64;
        let row = &mut dw[i * cols..(i + 1) * cols];
        for (d, &gj) in row.iter_mut().zip(g) {
            d.add(xi * gj);
        }
    }
}

/// Row lookup: output row `k` is row `ids[k]` of `table`.
pub fn embed_lookup(table: &Tensor, ids: &[usize]) -> Result<Tensor, NumericsError> {
    expect_rank(table, 2, "embedding table")?;
    if ids.is_empty() {
        return Err(shape_err("embedding lookup needs at least one id".into()));
    }
    let (vocab, dim) = (table.shape()[0], table.shape()[1]);
    let mut data = Vec::with_capacity(ids.len() * dim);
    for &id in ids {
        if id >= vocab {
            return Err(NumericsError::Index { index: id, bound: vocab });
        }
        data.extend_from_slice(table.row(id));
    }
    Ok(Tensor::from_parts_unchecked(vec![ids.len(), dim], data))
}

pub(crate) fn check_conv1d(
    input: &Tensor,
    filters: &Tensor,
    bias: &Tensor,
) -> Result<(usize, usize, usize, usize), NumericsError> {
    expect_rank(input, 2, "conv1d input")?;
    expect_rank(filters, 3, "conv1d filters")?;
    expect_rank(bias, 1, "conv1d bias")?;
    let (len, d_in) = (input.shape()[0], input.shape()[1]);
    let (width, f_in, d_out) = (filters.shape()[0], filters.shape()[1], filters.shape()[2]);
    if f_in != d_in || bias.shape()[0] != d_out {
        return Err(shape_err(format!(
            "conv1d input {:?}, filters {:?}, bias {:?} do not conform",
            input.shape(),
            filters.shape(),
            bias.shape()
        )));
    }
    if len < width {
        return Err(shape_err(format!(
            "conv1d input length {len} is shorter than filter width {width}"
        )));
    }
    Ok((len, d_in, width, d_out))
}

/// Valid (unpadded, stride 1) 1-D convolution over the time axis.
pub fn conv1d(input: &Tensor, filters: &Tensor, bias: &Tensor) -> Result<Tensor, NumericsError> {
    let (len, d_in, width, d_out) = check_conv1d(input, filters, bias)?;
    let out_len = len - width + 1;
    let window = width * d_in;
    let mut out = Vec::with_capacity(out_len * d_out);
    let mut acc = vec![0.0f64; d_out];
    for t in 0..out_len {
        for (a, &b) in acc.iter_mut().zip(bias.data()) {
            *a = b as f64;
        }
        // Rows t..t+width are contiguous and line up with the flattened
        // [width, d_in] leading axes of the filter bank.
        let x = &input.data()[t * d_in..t * d_in + window];
        matvec_acc(x, filters.data(), d_out, &mut acc);
        out.extend_from_slice(&acc);
    }
    Tensor::from_f64(vec![out_len, d_out], &out, "conv1d")
}

pub(crate) fn conv1d_backward<A: Accum, B: Accum, C: Accum>(
    input: &Tensor,
    filters: &Tensor,
    grad_out: &[f64],
    d_input: Option<&mut [A]>,
    d_filters: Option<&mut [B]>,
    d_bias: Option<&mut [C]>,
) {
    let (len, d_in) = (input.shape()[0], input.shape()[1]);
    let (width, d_out) = (filters.shape()[0], filters.shape()[2]);
    let out_len = len - width + 1;
    let window = width * d_in;
    if let Some(d_input) = d_input {
        for t in 0..out_len {
            let g = &grad_out[t * d_out..(t + 1) * d_out];
            matvec_t_acc(
                filters.data(),
                d_out,
                g,
                &mut d_input[t * d_in..t * d_in + window],
            );
        }
    }
    if let Some(d_filters) = d_filters {
        for t in 0..out_len {
            let g = &grad_out[t * d_out..(t + 1) * d_out];
            let x = &input.data()[t * d_in..t * d_in + window];
            outer_acc(x, g, d_filters);
        }
    }
    if let Some(d_bias) = d_bias {
        for t in 0..out_len {
            for (d, &g) in d_bias.iter_mut().zip(&grad_out[t * d_out..(t + 1) * d_out]) {
                d.add(g);
            }
        }
    }
}

pub fn relu(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::from_parts_unchecked(input.shape().to_vec(), data)
}

/// Sums `[L, d]` over the time axis into `[d]`.
pub fn sum_over_time_pool(input: &Tensor) -> Result<Tensor, NumericsError> {
    expect_rank(input, 2, "pooling input")?;
    let (len, dim) = (input.shape()[0], input.shape()[1]);
    let mut acc = vec![0.0f64; dim];
    for t in 0..len {
        for (a, &v) in acc.iter_mut().zip(input.row(t)) {
            *a += v as f64;
        }
    }
    Tensor::from_f64(vec![dim], &acc, "sum_over_time_pool")
}

pub(crate) fn check_dense(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
) -> Result<(usize, usize), NumericsError> {
    expect_rank(input, 1, "dense input")?;
    expect_rank(weight, 2, "dense weight")?;
    expect_rank(bias, 1, "dense bias")?;
    let (d_in, d_out) = (weight.shape()[0], weight.shape()[1]);
    if input.shape()[0] != d_in || bias.shape()[0] != d_out {
        return Err(shape_err(format!(
            "dense input {:?}, weight {:?}, bias {:?} do not conform",
            input.shape(),
            weight.shape(),
            bias.shape()
        )));
    }
    Ok((d_in, d_out))
}

/// `input · weight + bias` for a single vector.
pub fn dense(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor, NumericsError> {
    let (_, d_out) = check_dense(input, weight, bias)?;
    let mut acc: Vec<f64> = bias.data().iter().map(|&b| b as f64).collect();
    matvec_acc(input.data(), weight.data(), d_out, &mut acc);
    Tensor::from_f64(vec![d_out], &acc, "dense")
}

/// Weights of one LSTM cell. Gate blocks along the last axis are ordered
/// input, forget, candidate, output.
#[derive(Debug, Clone, Copy)]
pub struct LstmWeights<'a> {
    /// `[d_x, 4·d_h]`
    pub input: &'a Tensor,
    /// `[d_h, 4·d_h]`
    pub recurrent: &'a Tensor,
    /// `[4·d_h]`
    pub bias: &'a Tensor,
}

/// Post-activation gate values and the new cell state, kept for backward.
#[derive(Debug, Clone)]
pub(crate) struct LstmCache {
    pub input_gate: Vec<f64>,
    pub forget_gate: Vec<f64>,
    pub candidate: Vec<f64>,
    pub output_gate: Vec<f64>,
    pub cell_tanh: Vec<f64>,
}

pub(crate) fn check_lstm(
    x: &Tensor,
    h: &Tensor,
    c: &Tensor,
    w: &LstmWeights<'_>,
) -> Result<usize, NumericsError> {
    for (t, what) in [(x, "lstm input"), (h, "lstm hidden"), (c, "lstm cell")] {
        expect_rank(t, 1, what)?;
    }
    expect_rank(w.input, 2, "lstm input weight")?;
    expect_rank(w.recurrent, 2, "lstm recurrent weight")?;
    expect_rank(w.bias, 1, "lstm bias")?;
    let d_h = h.numel();
    let ok = c.numel() == d_h
        && w.input.shape() == [x.numel(), 4 * d_h]
        && w.recurrent.shape() == [d_h, 4 * d_h]
        && w.bias.numel() == 4 * d_h;
    if !ok {
        return Err(shape_err(format!(
            "lstm shapes do not conform: x {:?}, h {:?}, c {:?}, w_x {:?}, w_h {:?}, b {:?}",
            x.shape(),
            h.shape(),
            c.shape(),
            w.input.shape(),
            w.recurrent.shape(),
            w.bias.shape()
        )));
    }
    Ok(d_h)
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn lstm_forward(
    x: &Tensor,
    h: &Tensor,
    c: &Tensor,
    w: &LstmWeights<'_>,
) -> Result<(Vec<f64>, Vec<f64>, LstmCache), NumericsError> {
    let d_h = check_lstm(x, h, c, w)?;
    let mut z: Vec<f64> = w.bias.data().iter().map(|&b| b as f64).collect();
    matvec_acc(x.data(), w.input.data(), 4 * d_h, &mut z);
    matvec_acc(h.data(), w.recurrent.data(), 4 * d_h, &mut z);

    let input_gate: Vec<f64> = z[..d_h].iter().map(|&v| sigmoid(v)).collect();
    let forget_gate: Vec<f64> = z[d_h..2 * d_h].iter().map(|&v| sigmoid(v)).collect();
    let candidate: Vec<f64> = z[2 * d_h..3 * d_h].iter().map(|&v| v.tanh()).collect();
    let output_gate: Vec<f64> = z[3 * d_h..].iter().map(|&v| sigmoid(v)).collect();

    let mut c_new = Vec::with_capacity(d_h);
    let mut h_new = Vec::with_capacity(d_h);
    let mut cell_tanh = Vec::with_capacity(d_h);
    for k in 0..d_h {
        let cn = forget_gate[k] * c.data()[k] as f64 + input_gate[k] * candidate[k];
        let tc = cn.tanh();
        c_new.push(cn);
        cell_tanh.push(tc);
        h_new.push(output_gate[k] * tc);
    }
    let cache = LstmCache {
        input_gate,
        forget_gate,
        candidate,
        output_gate,
        cell_tanh,
    };
    Ok((h_new, c_new, cache))
}

/// One step of the standard LSTM recurrence. Returns `(h', c')`.
pub fn lstm_cell_step(
    x: &Tensor,
    h: &Tensor,
    c: &Tensor,
    weights: &LstmWeights<'_>,
) -> Result<(Tensor, Tensor), NumericsError> {
    let (h_new, c_new, _) = lstm_forward(x, h, c, weights)?;
    let d_h = h_new.len();
    Ok((
        Tensor::from_f64(vec![d_h], &h_new, "lstm_cell_step")?,
        Tensor::from_f64(vec![d_h], &c_new, "lstm_cell_step")?,
    ))
}

/// Gradient of the pre-activation vector `z` given upstream gradients on
/// `h'` and `c'`; also returns the gradient flowing to the previous cell state.
pub(crate) fn lstm_backward_gates(
    c_prev: &Tensor,
    cache: &LstmCache,
    d_h_new: &[f64],
    d_c_new: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let d_h = cache.cell_tanh.len();
    let mut dz = vec![0.0f64; 4 * d_h];
    let mut d_c_prev = vec![0.0f64; d_h];
    for k in 0..d_h {
        let (i, f, g, o, tc) = (
            cache.input_gate[k],
            cache.forget_gate[k],
            cache.candidate[k],
            cache.output_gate[k],
            cache.cell_tanh[k],
        );
        let dc = d_c_new[k] + d_h_new[k] * o * (1.0 - tc * tc);
        let d_o = d_h_new[k] * tc;
        dz[k] = dc * g * i * (1.0 - i);
        dz[d_h + k] = dc * c_prev.data()[k] as f64 * f * (1.0 - f);
        dz[2 * d_h + k] = dc * i * (1.0 - g * g);
        dz[3 * d_h + k] = d_o * o * (1.0 - o);
        d_c_prev[k] = dc * f;
    }
    (dz, d_c_prev)
}

/// Numerically stable log-softmax, in f64.
pub fn log_softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let log_z = max
        + logits
            .iter()
            .map(|&v| (v as f64 - max).exp())
            .sum::<f64>()
            .ln();
    logits.iter().map(|&v| v as f64 - log_z).collect()
}

/// `-log softmax(logits)[target]`.
pub fn softmax_cross_entropy(logits: &Tensor, target: usize) -> Result<f64, NumericsError> {
    expect_rank(logits, 1, "logits")?;
    if target >= logits.numel() {
        return Err(NumericsError::Index {
            index: target,
            bound: logits.numel(),
        });
    }
    Ok(-log_softmax(logits.data())[target])
}
