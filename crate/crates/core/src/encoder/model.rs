//! Forward pass, cached activations, and exact reverse-mode gradients.
//!
//! Block structure (pre-norm): H_{l} = H' + drop(FFN(LN2(H'))) where
//! H' = H_{l-1} + drop(Attn(LN1(H_{l-1}))). The hidden states H_0..H_L are
//! the residual stream; the final layer norm lives in the head path only,
//! so H_L itself is what downstream clustering sees.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;

use crate::clustering::LabelSequence;
use crate::error::{Error, Result};
use crate::features::{FeatureKind, FeatureSequence};
use crate::rng::rng_from;

use super::{EncoderConfig, HeadKind, MaskSpec, ParamVec};

const LN_EPS: f64 = 1e-5;
const SQRT_2_OVER_PI: f64 = 0.7978845608028654;
const GELU_C: f64 = 0.044715;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active, driven by this seed.
    Train { dropout_seed: u64 },
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

/// Interleaved sinusoidal positions: even dims sine, odd dims cosine.
fn position_table(t_len: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((t_len, d), |(t, j)| {
        let i = j - (j % 2);
        let angle = t as f64 / 10000f64.powf(i as f64 / d as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

#[derive(Debug, Clone)]
struct LnCache {
    /// Normalized rows (x − μ)·inv_std, before scale/bias.
    xhat: Array2<f64>,
    inv_std: Vec<f64>,
    /// Post scale/bias output.
    out: Array2<f64>,
}

fn layer_norm(x: &Array2<f64>, scale: ArrayView1<f64>, bias: ArrayView1<f64>) -> LnCache {
    let (t_len, d) = x.dim();
    let mut xhat = Array2::zeros((t_len, d));
    let mut out = Array2::zeros((t_len, d));
    let mut inv_std = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let row = x.row(t);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let istd = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(istd);
        for j in 0..d {
            let h = (row[j] - mean) * istd;
            xhat[(t, j)] = h;
            out[(t, j)] = scale[j] * h + bias[j];
        }
    }
    LnCache { xhat, inv_std, out }
}

/// dX for a layer norm, accumulating dScale/dBias into the given buffers.
fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    scale: ArrayView1<f64>,
    d_scale: &mut [f64],
    d_bias: &mut [f64],
) -> Array2<f64> {
    let (t_len, d) = dy.dim();
    let mut dx = Array2::zeros((t_len, d));
    for t in 0..t_len {
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for j in 0..d {
            let g = dy[(t, j)];
            let xh = cache.xhat[(t, j)];
            d_scale[j] += g * xh;
            d_bias[j] += g;
            let dxh = g * scale[j];
            m1 += dxh;
            m2 += dxh * xh;
        }
        m1 /= d as f64;
        m2 /= d as f64;
        let istd = cache.inv_std[t];
        for j in 0..d {
            let dxh = dy[(t, j)] * scale[j];
            dx[(t, j)] = (dxh - m1 - cache.xhat[(t, j)] * m2) * istd;
        }
    }
    dx
}

fn linear(x: &Array2<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let mut y = x.dot(&w);
    for mut row in y.rows_mut() {
        row += &b;
    }
    y
}

/// Inverted-dropout mask: entries are 1/(1−p) or 0.
fn dropout_mask<R: Rng>(t_len: usize, d: usize, p: f64, rng: &mut R) -> Array2<f64> {
    let keep = 1.0 - p;
    Array2::from_shape_fn((t_len, d), |_| {
        if rng.random::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    })
}

#[derive(Debug, Clone)]
struct LayerCache {
    ln1: LnCache,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Per-head attention probabilities, each T×T.
    probs: Vec<Array2<f64>>,
    /// Concatenated head outputs, before the output projection.
    attn_concat: Array2<f64>,
    attn_dropout: Option<Array2<f64>>,
    ln2: LnCache,
    /// FFN pre-activation.
    u: Array2<f64>,
    gact: Array2<f64>,
    ffn_dropout: Option<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Residual stream H_0..H_L.
    pub hidden_states: Vec<Array2<f64>>,
    /// T×K posterior logits.
    pub logits: Array2<f64>,
    mask_bools: Vec<bool>,
    /// Input features, kept for the input-projection gradient.
    input: Array2<f64>,
    embed_dropout: Option<Array2<f64>>,
    layers: Vec<LayerCache>,
    head_ln: LnCache,
    /// Cosine-head caches: raw cosines, row norms of G, codeword norms.
    head_cos: Option<(Array2<f64>, Vec<f64>, Vec<f64>)>,
}

impl ForwardTrace {
    pub fn t_len(&self) -> usize {
        self.logits.nrows()
    }
}

/// Run the encoder. Masked frames' projected embeddings are replaced by the
/// learned mask embedding before positions are added; dropout fires only in
/// [`Mode::Train`].
pub fn forward(
    params: &ParamVec,
    config: &EncoderConfig,
    features: &FeatureSequence,
    mask: &MaskSpec,
    mode: Mode,
) -> Result<ForwardTrace> {
    let x = &features.frames;
    let (t_len, d_in) = x.dim();
    if d_in != config.input_dim {
        return Err(Error::DimMismatch(format!(
            "feature dim {d_in} vs encoder input_dim {}",
            config.input_dim
        )));
    }
    if t_len == 0 {
        return Err(Error::config("cannot run the encoder on zero frames"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::config("non-finite values in encoder input"));
    }
    if let Some(&hi) = mask.indices().last() {
        if hi >= t_len {
            return Err(Error::Misaligned(format!("mask index {hi} >= T = {t_len}")));
        }
    }
    let d = config.dim;
    let h = config.heads;
    let dh = d / h;
    let mut rng = match mode {
        Mode::Eval => None,
        Mode::Train { dropout_seed } => Some(rng_from(dropout_seed)),
    };
    let p = config.dropout;
    let mut draw = |t_len: usize, cols: usize| -> Option<Array2<f64>> {
        rng.as_mut().map(|r| dropout_mask(t_len, cols, p, r))
    };

    // input projection with mask substitution, then positions
    let mask_bools = mask.as_bools(t_len);
    let mut h0 = linear(x, params.t2("input.w"), params.t1("input.b"));
    let mask_emb = params.t1("mask_emb");
    for (t, &m) in mask_bools.iter().enumerate() {
        if m {
            h0.row_mut(t).assign(&mask_emb);
        }
    }
    h0 += &position_table(t_len, d);
    let embed_dropout = draw(t_len, d);
    if let Some(dm) = &embed_dropout {
        h0 *= dm;
    }

    let mut hidden_states = vec![h0];
    let mut layers = Vec::with_capacity(config.layers);
    let scale = 1.0 / (dh as f64).sqrt();
    for l in 0..config.layers {
        let h_in = hidden_states.last().expect("nonempty");
        let ln1 = layer_norm(
            h_in,
            params.t1(&format!("layer{l}.ln1.scale")),
            params.t1(&format!("layer{l}.ln1.bias")),
        );
        let q = linear(&ln1.out, params.t2(&format!("layer{l}.attn.wq")), params.t1(&format!("layer{l}.attn.bq")));
        let k = linear(&ln1.out, params.t2(&format!("layer{l}.attn.wk")), params.t1(&format!("layer{l}.attn.bk")));
        let v = linear(&ln1.out, params.t2(&format!("layer{l}.attn.wv")), params.t1(&format!("layer{l}.attn.bv")));

        let mut probs = Vec::with_capacity(h);
        let mut attn_concat = Array2::zeros((t_len, d));
        for hh in 0..h {
            let cols = s![.., hh * dh..(hh + 1) * dh];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let mut scores = qh.dot(&kh.t());
            scores *= scale;
            // row-wise stable softmax
            for mut row in scores.rows_mut() {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for val in row.iter_mut() {
                    *val = (*val - max).exp();
                    sum += *val;
                }
                for val in row.iter_mut() {
                    *val /= sum;
                }
            }
            attn_concat.slice_mut(cols).assign(&scores.dot(&vh));
            probs.push(scores);
        }
        let mut o = linear(&attn_concat, params.t2(&format!("layer{l}.attn.wo")), params.t1(&format!("layer{l}.attn.bo")));
        let attn_dropout = draw(t_len, d);
        if let Some(dm) = &attn_dropout {
            o *= dm;
        }
        let h_mid = h_in + &o;

        let ln2 = layer_norm(
            &h_mid,
            params.t1(&format!("layer{l}.ln2.scale")),
            params.t1(&format!("layer{l}.ln2.bias")),
        );
        let u = linear(&ln2.out, params.t2(&format!("layer{l}.ffn.w1")), params.t1(&format!("layer{l}.ffn.b1")));
        let gact = u.mapv(gelu);
        let mut f = linear(&gact, params.t2(&format!("layer{l}.ffn.w2")), params.t1(&format!("layer{l}.ffn.b2")));
        let ffn_dropout = draw(t_len, d);
        if let Some(dm) = &ffn_dropout {
            f *= dm;
        }
        let h_out = &h_mid + &f;

        layers.push(LayerCache {
            ln1,
            q,
            k,
            v,
            probs,
            attn_concat,
            attn_dropout,
            ln2,
            u,
            gact,
            ffn_dropout,
        });
        hidden_states.push(h_out);
    }

    let head_ln = layer_norm(
        hidden_states.last().expect("nonempty"),
        params.t1("head.ln.scale"),
        params.t1("head.ln.bias"),
    );
    let (logits, head_cos) = match config.head {
        HeadKind::Linear => {
            (linear(&head_ln.out, params.t2("head.w"), params.t1("head.b")), None)
        }
        HeadKind::Cosine { temperature } => {
            let e = params.t2("head.codewords");
            let g = &head_ln.out;
            let g_norms: Vec<f64> =
                g.rows().into_iter().map(|r| r.dot(&r).sqrt().max(1e-12)).collect();
            let e_norms: Vec<f64> =
                e.rows().into_iter().map(|r| r.dot(&r).sqrt().max(1e-12)).collect();
            let mut cos = g.dot(&e.t());
            for t in 0..t_len {
                for k in 0..config.vocab {
                    cos[(t, k)] /= g_norms[t] * e_norms[k];
                }
            }
            let logits = cos.mapv(|c| c / temperature);
            (logits, Some((cos, g_norms, e_norms)))
        }
    };
    // non-finite logits are possible when training diverges; the training
    // loop treats them as divergence pressure rather than a hard error

    Ok(ForwardTrace {
        hidden_states,
        logits,
        mask_bools,
        input: x.clone(),
        embed_dropout,
        layers,
        head_ln,
        head_cos,
    })
}

/// Row-stable log-softmax cross-entropy over the masked frames:
/// loss = −(1/|M|)·Σ_{t∈M} log softmax(logits_t)[z_t]. Also counts masked
/// argmax hits. Returns (loss, masked_count, correct).
pub fn masked_cross_entropy(
    logits: &Array2<f64>,
    labels: &[u32],
    mask_bools: &[bool],
) -> (f64, usize, usize) {
    let mut loss = 0.0;
    let mut count = 0;
    let mut correct = 0;
    for (t, &m) in mask_bools.iter().enumerate() {
        if !m {
            continue;
        }
        let row = logits.row(t);
        let z = labels[t] as usize;
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss -= row[z] - lse;
        count += 1;
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .expect("nonempty row");
        if argmax == z {
            correct += 1;
        }
    }
    if count > 0 {
        loss /= count as f64;
    }
    (loss, count, correct)
}

#[derive(Debug)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: ParamVec,
    pub masked_count: usize,
    pub masked_correct: usize,
    /// True when M was empty: loss is defined 0 with zero grads.
    pub empty_mask: bool,
}

/// Masked cross-entropy and exact gradients for every parameter tensor.
pub fn loss_and_grad(
    params: &ParamVec,
    config: &EncoderConfig,
    trace: &ForwardTrace,
    labels: &LabelSequence,
    mask: &MaskSpec,
) -> Result<LossOutput> {
    let t_len = trace.t_len();
    if labels.labels.len() != t_len {
        return Err(Error::Misaligned(format!(
            "{} labels vs {t_len} frames",
            labels.labels.len()
        )));
    }
    if mask.as_bools(t_len) != trace.mask_bools {
        return Err(Error::Misaligned(
            "mask passed to loss_and_grad differs from the forward mask".into(),
        ));
    }
    let mut grads = ParamVec::zeros(params.layout.clone());
    let (loss, masked_count, masked_correct) =
        masked_cross_entropy(&trace.logits, &labels.labels, &trace.mask_bools);
    if masked_count == 0 {
        return Ok(LossOutput { loss: 0.0, grads, masked_count: 0, masked_correct: 0, empty_mask: true });
    }

    let k_vocab = config.vocab;
    // dLogits = (softmax − onehot)/|M| on masked rows
    let mut d_logits = Array2::zeros((t_len, k_vocab));
    let inv_m = 1.0 / masked_count as f64;
    for (t, &m) in trace.mask_bools.iter().enumerate() {
        if !m {
            continue;
        }
        let row = trace.logits.row(t);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for e in &mut exps {
            *e /= sum;
        }
        for k in 0..k_vocab {
            d_logits[(t, k)] = exps[k] * inv_m;
        }
        d_logits[(t, labels.labels[t] as usize)] -= inv_m;
    }

    // head
    let d = config.dim;
    let d_g: Array2<f64> = match config.head {
        HeadKind::Linear => {
            let w = params.t2("head.w");
            let dg = d_logits.dot(&w.t());
            grads.t2_mut("head.w").assign(&trace.head_ln.out.t().dot(&d_logits));
            grads.t1_mut("head.b").assign(&d_logits.sum_axis(Axis(0)));
            dg
        }
        HeadKind::Cosine { temperature } => {
            let (cos, g_norms, e_norms) = trace.head_cos.as_ref().expect("cosine cache");
            let e = params.t2("head.codewords");
            let g = &trace.head_ln.out;
            let mut dg = Array2::zeros((t_len, d));
            let mut d_e = Array2::zeros((k_vocab, d));
            for t in 0..t_len {
                if !trace.mask_bools[t] {
                    continue;
                }
                for k in 0..k_vocab {
                    let dl = d_logits[(t, k)] / temperature;
                    if dl == 0.0 {
                        continue;
                    }
                    let c = cos[(t, k)];
                    let gn = g_norms[t];
                    let en = e_norms[k];
                    for j in 0..d {
                        dg[(t, j)] += dl * (e[(k, j)] / (gn * en) - c * g[(t, j)] / (gn * gn));
                        d_e[(k, j)] += dl * (g[(t, j)] / (gn * en) - c * e[(k, j)] / (en * en));
                    }
                }
            }
            grads.t2_mut("head.codewords").assign(&d_e);
            dg
        }
    };

    // final layer norm (head path only)
    let d_hl = {
        let mut d_scale = vec![0.0; d];
        let mut d_bias = vec![0.0; d];
        let dx = layer_norm_backward(
            &d_g,
            &trace.head_ln,
            params.t1("head.ln.scale"),
            &mut d_scale,
            &mut d_bias,
        );
        grads.t1_mut("head.ln.scale").assign(&Array1::from(d_scale));
        grads.t1_mut("head.ln.bias").assign(&Array1::from(d_bias));
        dx
    };
    backward_from_hidden(params, config, trace, d_hl, &mut grads)?;

    Ok(LossOutput { loss, grads, masked_count, masked_correct, empty_mask: false })
}

/// Push a gradient on the final hidden state H_L back through every
/// transformer layer and the input projection, writing those tensors'
/// gradients into `grads` (head tensors are left untouched). This is the
/// shared trunk behind the pretraining loss and any downstream head.
pub fn backward_from_hidden(
    params: &ParamVec,
    config: &EncoderConfig,
    trace: &ForwardTrace,
    d_hidden: Array2<f64>,
    grads: &mut ParamVec,
) -> Result<()> {
    let t_len = trace.t_len();
    let d = config.dim;
    if d_hidden.dim() != (t_len, d) {
        return Err(Error::DimMismatch(format!(
            "upstream gradient {:?} does not match hidden states {}x{}",
            d_hidden.dim(),
            t_len,
            d
        )));
    }
    if !params.same_layout(grads) {
        return Err(Error::DimMismatch("backward_from_hidden: layouts differ".into()));
    }
    let mut d_hl = d_hidden;

    let h = config.heads;
    let dh = d / h;
    let scale = 1.0 / (dh as f64).sqrt();
    for l in (0..config.layers).rev() {
        let cache = &trace.layers[l];
        // FFN sublayer
        let mut d_f = d_hl.clone();
        if let Some(dm) = &cache.ffn_dropout {
            d_f *= dm;
        }
        let w2 = params.t2(&format!("layer{l}.ffn.w2"));
        let d_gact = d_f.dot(&w2.t());
        grads
            .t2_mut(&format!("layer{l}.ffn.w2"))
            .assign(&cache.gact.t().dot(&d_f));
        grads
            .t1_mut(&format!("layer{l}.ffn.b2"))
            .assign(&d_f.sum_axis(Axis(0)));
        let d_u = &d_gact * &cache.u.mapv(gelu_prime);
        let w1 = params.t2(&format!("layer{l}.ffn.w1"));
        let d_b = d_u.dot(&w1.t());
        grads
            .t2_mut(&format!("layer{l}.ffn.w1"))
            .assign(&cache.ln2.out.t().dot(&d_u));
        grads
            .t1_mut(&format!("layer{l}.ffn.b1"))
            .assign(&d_u.sum_axis(Axis(0)));
        let mut d_hmid = {
            let mut d_scale = vec![0.0; d];
            let mut d_bias = vec![0.0; d];
            let dx = layer_norm_backward(
                &d_b,
                &cache.ln2,
                params.t1(&format!("layer{l}.ln2.scale")),
                &mut d_scale,
                &mut d_bias,
            );
            grads.t1_mut(&format!("layer{l}.ln2.scale")).assign(&Array1::from(d_scale));
            grads.t1_mut(&format!("layer{l}.ln2.bias")).assign(&Array1::from(d_bias));
            dx
        };
        d_hmid += &d_hl; // residual branch

        // attention sublayer
        let mut d_o = d_hmid.clone();
        if let Some(dm) = &cache.attn_dropout {
            d_o *= dm;
        }
        let wo = params.t2(&format!("layer{l}.attn.wo"));
        let d_attn_concat = d_o.dot(&wo.t());
        grads
            .t2_mut(&format!("layer{l}.attn.wo"))
            .assign(&cache.attn_concat.t().dot(&d_o));
        grads
            .t1_mut(&format!("layer{l}.attn.bo"))
            .assign(&d_o.sum_axis(Axis(0)));

        let mut d_q = Array2::zeros((t_len, d));
        let mut d_k = Array2::zeros((t_len, d));
        let mut d_v = Array2::zeros((t_len, d));
        for hh in 0..h {
            let cols = s![.., hh * dh..(hh + 1) * dh];
            let probs = &cache.probs[hh];
            let d_attn_h = d_attn_concat.slice(cols);
            let vh = cache.v.slice(cols);
            let mut d_p = d_attn_h.dot(&vh.t());
            d_v.slice_mut(cols).assign(&probs.t().dot(&d_attn_h));
            // softmax backward per row
            for t in 0..t_len {
                let dot: f64 = (0..t_len).map(|s2| d_p[(t, s2)] * probs[(t, s2)]).sum();
                for s2 in 0..t_len {
                    d_p[(t, s2)] = probs[(t, s2)] * (d_p[(t, s2)] - dot);
                }
            }
            let qh = cache.q.slice(cols);
            let kh = cache.k.slice(cols);
            let mut d_qh = d_p.dot(&kh);
            d_qh *= scale;
            d_q.slice_mut(cols).assign(&d_qh);
            let mut d_kh = d_p.t().dot(&qh);
            d_kh *= scale;
            d_k.slice_mut(cols).assign(&d_kh);
        }
        let a = &cache.ln1.out;
        let wq = params.t2(&format!("layer{l}.attn.wq"));
        let wk = params.t2(&format!("layer{l}.attn.wk"));
        let wv = params.t2(&format!("layer{l}.attn.wv"));
        let mut d_a = d_q.dot(&wq.t());
        d_a += &d_k.dot(&wk.t());
        d_a += &d_v.dot(&wv.t());
        grads.t2_mut(&format!("layer{l}.attn.wq")).assign(&a.t().dot(&d_q));
        grads.t1_mut(&format!("layer{l}.attn.bq")).assign(&d_q.sum_axis(Axis(0)));
        grads.t2_mut(&format!("layer{l}.attn.wk")).assign(&a.t().dot(&d_k));
        grads.t1_mut(&format!("layer{l}.attn.bk")).assign(&d_k.sum_axis(Axis(0)));
        grads.t2_mut(&format!("layer{l}.attn.wv")).assign(&a.t().dot(&d_v));
        grads.t1_mut(&format!("layer{l}.attn.bv")).assign(&d_v.sum_axis(Axis(0)));
        let mut d_hin = {
            let mut d_scale = vec![0.0; d];
            let mut d_bias = vec![0.0; d];
            let dx = layer_norm_backward(
                &d_a,
                &cache.ln1,
                params.t1(&format!("layer{l}.ln1.scale")),
                &mut d_scale,
                &mut d_bias,
            );
            grads.t1_mut(&format!("layer{l}.ln1.scale")).assign(&Array1::from(d_scale));
            grads.t1_mut(&format!("layer{l}.ln1.bias")).assign(&Array1::from(d_bias));
            dx
        };
        d_hin += &d_hmid; // residual branch
        d_hl = d_hin;
    }

    // input projection / mask embedding
    let mut d_p = d_hl;
    if let Some(dm) = &trace.embed_dropout {
        d_p *= dm;
    }
    {
        let mut d_mask_emb = Array1::zeros(d);
        let mut d_w_in = Array2::zeros((config.input_dim, d));
        let mut d_b_in = Array1::zeros(d);
        for t in 0..t_len {
            let g = d_p.row(t);
            if trace.mask_bools[t] {
                d_mask_emb += &g;
            } else {
                let x = trace.input.row(t);
                for i in 0..config.input_dim {
                    for j in 0..d {
                        d_w_in[(i, j)] += x[i] * g[j];
                    }
                }
                d_b_in += &g;
            }
        }
        grads.t1_mut("mask_emb").assign(&d_mask_emb);
        grads.t2_mut("input.w").assign(&d_w_in);
        grads.t1_mut("input.b").assign(&d_b_in);
    }

    Ok(())
}

/// Eval-mode, unmasked hidden states H_l for a corpus, in corpus order.
pub fn extract_embeddings(
    params: &ParamVec,
    config: &EncoderConfig,
    features: &[FeatureSequence],
    layer: usize,
) -> Result<Vec<FeatureSequence>> {
    if layer > config.layers {
        return Err(Error::config(format!(
            "layer {layer} out of range: encoder has layers 0..={}",
            config.layers
        )));
    }
    features
        .par_iter()
        .map(|f| {
            let trace = forward(params, config, f, &MaskSpec::empty(), Mode::Eval)?;
            Ok(FeatureSequence {
                utterance_id: f.utterance_id.clone(),
                frames: trace.hidden_states[layer].clone(),
                frame_hop: f.frame_hop,
                frame_len: f.frame_len,
                kind: FeatureKind::LayerEmbedding(layer),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_params;

    fn tiny_config(head: HeadKind) -> EncoderConfig {
        EncoderConfig {
            layers: 2,
            dim: 8,
            heads: 2,
            ff_dim: 12,
            input_dim: 5,
            vocab: 7,
            mask_span: 2,
            mask_prob: 0.3,
            dropout: 0.1,
            head,
        }
    }

    fn random_features(t_len: usize, d_in: usize, seed: u64) -> FeatureSequence {
        let mut rng = rng_from(seed);
        FeatureSequence {
            utterance_id: format!("t{seed}"),
            frames: Array2::from_shape_fn((t_len, d_in), |_| rng.random::<f64>() * 2.0 - 1.0),
            frame_hop: 0.01,
            frame_len: 0.025,
            kind: FeatureKind::Mfcc,
        }
    }

    fn random_labels(t_len: usize, k: usize, seed: u64) -> LabelSequence {
        let mut rng = rng_from(seed);
        LabelSequence {
            utterance_id: "t".into(),
            labels: (0..t_len).map(|_| rng.random_range(0..k as u32)).collect(),
        }
    }

    /// Straight-line forward with no caching and no shared helpers: plain
    /// vector loops, eval mode, linear head. The duplicate-implementation
    /// oracle for `forward`.
    #[allow(clippy::needless_range_loop)]
    fn straightline_forward(
        params: &ParamVec,
        cfg: &EncoderConfig,
        x: &Array2<f64>,
        masked: &[bool],
    ) -> Vec<Vec<f64>> {
        let (t_len, _) = x.dim();
        let d = cfg.dim;
        let get2 = |n: &str| params.t2(n);
        let get1 = |n: &str| params.t1(n);
        let matvec = |w: ArrayView2<f64>, b: ArrayView1<f64>, v: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; w.ncols()];
            for j in 0..w.ncols() {
                let mut s = b[j];
                for i in 0..w.nrows() {
                    s += v[i] * w[(i, j)];
                }
                out[j] = s;
            }
            out
        };
        let ln = |v: &[f64], scale: ArrayView1<f64>, bias: ArrayView1<f64>| -> Vec<f64> {
            let n = v.len() as f64;
            let mu = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|a| (a - mu) * (a - mu)).sum::<f64>() / n;
            v.iter()
                .enumerate()
                .map(|(j, a)| scale[j] * (a - mu) / (var + 1e-5).sqrt() + bias[j])
                .collect()
        };
        // embed
        let mut hs: Vec<Vec<f64>> = (0..t_len)
            .map(|t| {
                let mut e = if masked[t] {
                    get1("mask_emb").to_vec()
                } else {
                    matvec(get2("input.w"), get1("input.b"), &x.row(t).to_vec())
                };
                for j in 0..d {
                    let i = j - (j % 2);
                    let ang = t as f64 / 10000f64.powf(i as f64 / d as f64);
                    e[j] += if j % 2 == 0 { ang.sin() } else { ang.cos() };
                }
                e
            })
            .collect();
        let h = cfg.heads;
        let dh = d / h;
        for l in 0..cfg.layers {
            let a: Vec<Vec<f64>> = hs
                .iter()
                .map(|row| {
                    ln(row, get1(&format!("layer{l}.ln1.scale")), get1(&format!("layer{l}.ln1.bias")))
                })
                .collect();
            let q: Vec<Vec<f64>> = a
                .iter()
                .map(|r| matvec(get2(&format!("layer{l}.attn.wq")), get1(&format!("layer{l}.attn.bq")), r))
                .collect();
            let k: Vec<Vec<f64>> = a
                .iter()
                .map(|r| matvec(get2(&format!("layer{l}.attn.wk")), get1(&format!("layer{l}.attn.bk")), r))
                .collect();
            let v: Vec<Vec<f64>> = a
                .iter()
                .map(|r| matvec(get2(&format!("layer{l}.attn.wv")), get1(&format!("layer{l}.attn.bv")), r))
                .collect();
            let mut concat = vec![vec![0.0; d]; t_len];
            for hh in 0..h {
                for t in 0..t_len {
                    let mut scores = vec![0.0; t_len];
                    for s2 in 0..t_len {
                        let mut dot = 0.0;
                        for j in 0..dh {
                            dot += q[t][hh * dh + j] * k[s2][hh * dh + j];
                        }
                        scores[s2] = dot / (dh as f64).sqrt();
                    }
                    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = scores.iter().map(|s2| (s2 - mx).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    for j in 0..dh {
                        let mut acc = 0.0;
                        for s2 in 0..t_len {
                            acc += exps[s2] / sum * v[s2][hh * dh + j];
                        }
                        concat[t][hh * dh + j] = acc;
                    }
                }
            }
            for t in 0..t_len {
                let o = matvec(get2(&format!("layer{l}.attn.wo")), get1(&format!("layer{l}.attn.bo")), &concat[t]);
                for j in 0..d {
                    hs[t][j] += o[j];
                }
            }
            let b: Vec<Vec<f64>> = hs
                .iter()
                .map(|row| {
                    ln(row, get1(&format!("layer{l}.ln2.scale")), get1(&format!("layer{l}.ln2.bias")))
                })
                .collect();
            for t in 0..t_len {
                let u = matvec(get2(&format!("layer{l}.ffn.w1")), get1(&format!("layer{l}.ffn.b1")), &b[t]);
                let g: Vec<f64> = u
                    .iter()
                    .map(|&a| {
                        0.5 * a
                            * (1.0
                                + ((2.0 / std::f64::consts::PI).sqrt()
                                    * (a + 0.044715 * a * a * a))
                                    .tanh())
                    })
                    .collect();
                let f = matvec(get2(&format!("layer{l}.ffn.w2")), get1(&format!("layer{l}.ffn.b2")), &g);
                for j in 0..d {
                    hs[t][j] += f[j];
                }
            }
        }
        hs.iter()
            .map(|row| {
                let g = ln(row, get1("head.ln.scale"), get1("head.ln.bias"));
                matvec(get2("head.w"), get1("head.b"), &g)
            })
            .collect()
    }

    #[test]
    fn forward_matches_straightline_oracle() {
        let cfg = tiny_config(HeadKind::Linear);
        let params = init_params(&cfg, 42).unwrap();
        let features = random_features(5, 5, 1);
        let mask = MaskSpec::new(vec![1, 3]);
        let trace = forward(&params, &cfg, &features, &mask, Mode::Eval).unwrap();
        let oracle = straightline_forward(&params, &cfg, &features.frames, &mask.as_bools(5));
        for t in 0..5 {
            for k in 0..cfg.vocab {
                let (a, b) = (trace.logits[(t, k)], oracle[t][k]);
                assert!((a - b).abs() < 1e-6, "logit ({t},{k}): {a} vs {b}");
            }
        }
    }

    #[test]
    fn depth_zero_is_head_of_norm_of_projection() {
        let cfg = EncoderConfig { layers: 0, ..tiny_config(HeadKind::Linear) };
        let params = init_params(&cfg, 3).unwrap();
        let features = random_features(4, 5, 2);
        let trace =
            forward(&params, &cfg, &features, &MaskSpec::empty(), Mode::Eval).unwrap();
        assert_eq!(trace.hidden_states.len(), 1);
        // hand-compose the three maps
        let oracle = straightline_forward(&params, &cfg, &features.frames, &[false; 4]);
        for t in 0..4 {
            for k in 0..cfg.vocab {
                assert!((trace.logits[(t, k)] - oracle[t][k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn mask_substitution_swaps_h0_row_exactly() {
        let cfg = tiny_config(HeadKind::Linear);
        let params = init_params(&cfg, 9).unwrap();
        let features = random_features(1, 5, 7);
        let unmasked =
            forward(&params, &cfg, &features, &MaskSpec::empty(), Mode::Eval).unwrap();
        let masked =
            forward(&params, &cfg, &features, &MaskSpec::new(vec![0]), Mode::Eval).unwrap();
        let pos = position_table(1, cfg.dim);
        let proj = linear(&features.frames, params.t2("input.w"), params.t1("input.b"));
        for j in 0..cfg.dim {
            let want_unmasked = proj[(0, j)] + pos[(0, j)];
            let want_masked = params.t1("mask_emb")[j] + pos[(0, j)];
            assert!((unmasked.hidden_states[0][(0, j)] - want_unmasked).abs() < 1e-12);
            assert!((masked.hidden_states[0][(0, j)] - want_masked).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_of_logits_sum_to_one() {
        let cfg = tiny_config(HeadKind::Linear);
        let params = init_params(&cfg, 12).unwrap();
        let features = random_features(6, 5, 3);
        let trace =
            forward(&params, &cfg, &features, &MaskSpec::new(vec![0, 2]), Mode::Eval).unwrap();
        for row in trace.logits.rows() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let total: f64 = row.iter().map(|v| (v - max).exp() / sum).sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn eval_forward_is_bit_stable() {
        let cfg = tiny_config(HeadKind::Linear);
        let params = init_params(&cfg, 5).unwrap();
        let features = random_features(7, 5, 8);
        let m = MaskSpec::new(vec![2, 3]);
        let a = forward(&params, &cfg, &features, &m, Mode::Eval).unwrap();
        let b = forward(&params, &cfg, &features, &m, Mode::Eval).unwrap();
        assert_eq!(a.logits, b.logits);
        for (x, y) in a.hidden_states.iter().zip(b.hidden_states.iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn uniform_logits_lose_ln_k_and_perfect_logits_lose_nothing() {
        let k = 7;
        let logits = Array2::zeros((4, k));
        let labels: Vec<u32> = vec![1, 2, 3, 4];
        let (loss, count, _) = masked_cross_entropy(&logits, &labels, &[true; 4]);
        assert_eq!(count, 4);
        assert!((loss - (k as f64).ln()).abs() < 1e-12);

        let mut sharp = Array2::from_elem((4, k), -1e4);
        for (t, &z) in labels.iter().enumerate() {
            sharp[(t, z as usize)] = 1e4;
        }
        let (loss, _, correct) = masked_cross_entropy(&sharp, &labels, &[true; 4]);
        assert!(loss.abs() < 1e-9);
        assert_eq!(correct, 4);
    }

    #[test]
    fn empty_mask_returns_flagged_zero_loss_and_zero_grads() {
        let cfg = tiny_config(HeadKind::Linear);
        let params = init_params(&cfg, 2).unwrap();
        let features = random_features(5, 5, 4);
        let mask = MaskSpec::empty();
        let trace = forward(&params, &cfg, &features, &mask, Mode::Eval).unwrap();
        let labels = random_labels(5, cfg.vocab, 1);
        let out = loss_and_grad(&params, &cfg, &trace, &labels, &mask).unwrap();
        assert!(out.empty_mask);
        assert_eq!(out.loss, 0.0);
        assert!(out.grads.data.iter().all(|&g| g == 0.0));
    }

    /// Central differences at step 1e-3, compared per parameter tensor:
    /// rel = ‖fd − an‖₂ / max(1e-6, ‖fd‖₂, ‖an‖₂) must stay under 1e-4.
    /// (Per-tensor, because single-coordinate fd truncation error O(h²·f''')
    /// can exceed 1e-4 of a small coordinate even for an exact gradient.)
    fn fd_check(cfg: &EncoderConfig, seed: u64, mode: Mode, mask: MaskSpec, t_len: usize) {
        let params = init_params(cfg, seed).unwrap();
        let features = random_features(t_len, cfg.input_dim, seed + 1);
        let labels = random_labels(t_len, cfg.vocab, seed + 2);
        let trace = forward(&params, cfg, &features, &mask, mode).unwrap();
        let out = loss_and_grad(&params, cfg, &trace, &labels, &mask).unwrap();
        let step = 1e-3;
        let loss_at = |p: &ParamVec| {
            let t = forward(p, cfg, &features, &mask, mode).unwrap();
            masked_cross_entropy(&t.logits, &labels.labels, &mask.as_bools(t_len)).0
        };
        let mut fd_all = vec![0.0; params.len()];
        for (i, slot) in fd_all.iter_mut().enumerate() {
            let mut plus = params.clone();
            plus.data[i] += step;
            let mut minus = params.clone();
            minus.data[i] -= step;
            *slot = (loss_at(&plus) - loss_at(&minus)) / (2.0 * step);
        }
        for e in params.layout.entries() {
            let an = &out.grads.data[e.offset..e.offset + e.len()];
            let fd = &fd_all[e.offset..e.offset + e.len()];
            let n_an = an.iter().map(|x| x * x).sum::<f64>().sqrt();
            let n_fd = fd.iter().map(|x| x * x).sum::<f64>().sqrt();
            let n_diff =
                an.iter().zip(fd).map(|(a, f)| (a - f) * (a - f)).sum::<f64>().sqrt();
            let rel = n_diff / n_an.max(n_fd).max(1e-6);
            assert!(rel < 1e-4, "tensor {} gradient mismatch: rel {rel:.3e}", e.name);
        }
    }

    #[test]
    fn gradients_match_finite_differences_linear_head() {
        let cfg = EncoderConfig { dropout: 0.0, ..tiny_config(HeadKind::Linear) };
        fd_check(&cfg, 11, Mode::Eval, MaskSpec::new(vec![0, 2, 4]), 5);
    }

    #[test]
    fn gradients_match_finite_differences_cosine_head() {
        let cfg =
            EncoderConfig { dropout: 0.0, ..tiny_config(HeadKind::Cosine { temperature: 0.1 }) };
        fd_check(&cfg, 13, Mode::Eval, MaskSpec::new(vec![1, 3]), 5);
    }

    #[test]
    fn gradients_match_finite_differences_under_fixed_dropout() {
        // dropout masks are a deterministic function of the seed, so the
        // dropped network is itself a fixed function fd can differentiate
        let cfg = tiny_config(HeadKind::Linear);
        fd_check(&cfg, 17, Mode::Train { dropout_seed: 99 }, MaskSpec::new(vec![0, 1, 4]), 5);
    }

    #[test]
    fn mask_emb_gets_no_gradient_without_masked_frames_and_all_when_fully_masked() {
        let cfg = EncoderConfig { dropout: 0.0, ..tiny_config(HeadKind::Linear) };
        let params = init_params(&cfg, 21).unwrap();
        let features = random_features(4, 5, 5);
        let labels = random_labels(4, cfg.vocab, 6);

        // one masked frame: substitution decouples the input projection at
        // that frame but grads still flow to it from unmasked frames
        let partial = MaskSpec::new(vec![1]);
        let trace = forward(&params, &cfg, &features, &partial, Mode::Eval).unwrap();
        let out = loss_and_grad(&params, &cfg, &trace, &labels, &partial).unwrap();
        assert!(out.grads.t1("mask_emb").iter().any(|&g| g != 0.0));

        // fully masked: the input projection is unused
        let full = MaskSpec::new(vec![0, 1, 2, 3]);
        let trace = forward(&params, &cfg, &features, &full, Mode::Eval).unwrap();
        let out = loss_and_grad(&params, &cfg, &trace, &labels, &full).unwrap();
        assert!(out.grads.t2("input.w").iter().all(|&g| g == 0.0));
        assert!(out.grads.t1("input.b").iter().all(|&g| g == 0.0));
    }

    #[test]
    fn extract_embeddings_is_repeatable_and_checks_layer_range() {
        let cfg = tiny_config(HeadKind::Linear);
        let params = init_params(&cfg, 30).unwrap();
        let features = vec![random_features(6, 5, 1), random_features(4, 5, 2)];
        let a = extract_embeddings(&params, &cfg, &features, 2).unwrap();
        let b = extract_embeddings(&params, &cfg, &features, 2).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a[0].kind, FeatureKind::LayerEmbedding(2));
        assert_eq!(a[0].frames, b[0].frames);
        assert_eq!(a[1].utterance_id, "t2");
        assert!(extract_embeddings(&params, &cfg, &features, 3).is_err());
    }

    #[test]
    fn layer_zero_embeddings_are_projected_inputs_plus_positions() {
        let cfg = tiny_config(HeadKind::Linear);
        let params = init_params(&cfg, 31).unwrap();
        let features = vec![random_features(3, 5, 9)];
        let emb = extract_embeddings(&params, &cfg, &features, 0).unwrap();
        let proj = linear(&features[0].frames, params.t2("input.w"), params.t1("input.b"));
        let pos = position_table(3, cfg.dim);
        for t in 0..3 {
            for j in 0..cfg.dim {
                assert!((emb[0].frames[(t, j)] - proj[(t, j)] - pos[(t, j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let cfg = tiny_config(HeadKind::Linear);
        let params = init_params(&cfg, 1).unwrap();
        let mut features = random_features(3, 5, 1);
        features.frames[(1, 2)] = f64::NAN;
        assert!(forward(&params, &cfg, &features, &MaskSpec::empty(), Mode::Eval).is_err());
    }

    #[test]
    fn out_of_range_mask_is_rejected() {
        let cfg = tiny_config(HeadKind::Linear);
        let params = init_params(&cfg, 1).unwrap();
        let features = random_features(3, 5, 1);
        assert!(forward(&params, &cfg, &features, &MaskSpec::new(vec![5]), Mode::Eval).is_err());
    }
}

