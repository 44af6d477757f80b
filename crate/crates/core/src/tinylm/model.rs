use super::{ActivationHook, Intervention, Weights};
use crate::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Feed-forward hidden activations at the final position, one vector per
/// layer, after any hook has been applied.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub layers: Vec<Vec<f64>>,
    pub sigma: Vec<f64>,
}

impl ActivationTrace {
    fn from_layers(layers: Vec<Vec<f64>>) -> Self {
        let sigma = layers.iter().map(|v| std_dev(v)).collect();
        Self { layers, sigma }
    }
}

fn std_dev(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
    out: Vec<f64>,
}

struct LayerCache {
    ln1: LnCache,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    ctx: Vec<f64>,
    ln2: LnCache,
    pre: Vec<f64>,
    act: Vec<f64>,
}

/// Everything the backward pass needs, plus the outputs of the forward pass.
pub struct ForwardCache {
    pub tokens: Vec<u32>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    /// Logits for every position, row-major `[T, vocab]`.
    pub logits: Vec<f64>,
    leaf_layers: Vec<bool>,
}

impl ForwardCache {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn position_logits(&self, t: usize) -> &[f64] {
        let v = self.logits.len() / self.tokens.len();
        &self.logits[t * v..(t + 1) * v]
    }

    pub fn last_logits(&self) -> &[f64] {
        self.position_logits(self.tokens.len() - 1)
    }

    /// Final-layer-norm output, row-major `[T, d_model]`.
    pub fn final_hidden(&self) -> &[f64] {
        &self.lnf.out
    }

    pub fn trace(&self) -> ActivationTrace {
        let t = self.tokens.len() - 1;
        let layers = self
            .layers
            .iter()
            .map(|lc| {
                let f = lc.act.len() / self.tokens.len();
                lc.act[t * f..(t + 1) * f].to_vec()
            })
            .collect();
        ActivationTrace::from_layers(layers)
    }
}

fn check_tokens(w: &Weights, tokens: &[u32]) -> Result<()> {
    let c = &w.config;
    if tokens.is_empty() {
        return Err(Error::input("empty token sequence"));
    }
    if tokens.len() > c.context_len {
        return Err(Error::input(format!(
            "sequence length {} exceeds context {}",
            tokens.len(),
            c.context_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= c.vocab_size) {
        return Err(Error::input(format!("token id {bad} >= vocab {}", c.vocab_size)));
    }
    Ok(())
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn layer_norm(x: &[f64], dim: usize, g: &[f64], b: &[f64]) -> LnCache {
    let rows = x.len() / dim;
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * dim..(r + 1) * dim];
        let mean = row.iter().sum::<f64>() / dim as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for i in 0..dim {
            let h = (row[i] - mean) * rs;
            xhat[r * dim + i] = h;
            out[r * dim + i] = g[i] * h + b[i];
        }
    }
    LnCache { xhat, rstd, out }
}

fn layer_norm_backward(dy: &[f64], c: &LnCache, dim: usize, g: &[f64], dg: &mut [f64], db: &mut [f64]) -> Vec<f64> {
    let rows = dy.len() / dim;
    let mut dx = vec![0.0; dy.len()];
    let mut dxhat = vec![0.0; dim];
    for r in 0..rows {
        let off = r * dim;
        let (mut sum, mut dot) = (0.0, 0.0);
        for i in 0..dim {
            let d = dy[off + i];
            dg[i] += d * c.xhat[off + i];
            db[i] += d;
            dxhat[i] = d * g[i];
            sum += dxhat[i];
            dot += dxhat[i] * c.xhat[off + i];
        }
        let n = dim as f64;
        for i in 0..dim {
            dx[off + i] = c.rstd[r] / n * (n * dxhat[i] - sum - c.xhat[off + i] * dot);
        }
    }
    dx
}

/// `y[n, out] = x[n, inp] @ w[inp, out] + b`.
fn linear(x: &[f64], inp: usize, w: &[f64], b: &[f64], out: usize) -> Vec<f64> {
    let n = x.len() / inp;
    let mut y = vec![0.0; n * out];
    for r in 0..n {
        let yr = &mut y[r * out..(r + 1) * out];
        yr.copy_from_slice(b);
        for (i, &xi) in x[r * inp..(r + 1) * inp].iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let wr = &w[i * out..(i + 1) * out];
            for (yj, wj) in yr.iter_mut().zip(wr) {
                *yj += xi * wj;
            }
        }
    }
    y
}

/// Accumulates weight/bias grads and returns `dx`.
fn linear_backward(dy: &[f64], x: &[f64], inp: usize, w: &[f64], out: usize, dw: &mut [f64], db: &mut [f64]) -> Vec<f64> {
    let n = x.len() / inp;
    let mut dx = vec![0.0; n * inp];
    for r in 0..n {
        let dyr = &dy[r * out..(r + 1) * out];
        for (bj, d) in db.iter_mut().zip(dyr) {
            *bj += d;
        }
        for i in 0..inp {
            let xi = x[r * inp + i];
            let wr = &w[i * out..(i + 1) * out];
            let dwr = &mut dw[i * out..(i + 1) * out];
            let mut acc = 0.0;
            for j in 0..out {
                dwr[j] += xi * dyr[j];
                acc += wr[j] * dyr[j];
            }
            dx[r * inp + i] = acc;
        }
    }
    dx
}

/// Runs the model and keeps every intermediate needed by [`backward`]. The
/// hook (if any) rewrites the feed-forward hidden activations at the final
/// position of each layer.
pub fn forward_cached(w: &Weights, tokens: &[u32], hook: Option<&dyn ActivationHook>) -> Result<ForwardCache> {
    check_tokens(w, tokens)?;
    let c = &w.config;
    let (t_len, d, f, v) = (tokens.len(), c.d_model, c.d_ff, c.vocab_size);
    let (nh, hd) = (c.n_heads, c.head_dim());
    let scale = 1.0 / (hd as f64).sqrt();

    let mut h = vec![0.0; t_len * d];
    for (t, &tok) in tokens.iter().enumerate() {
        let te = &w.tok_emb[tok as usize * d..(tok as usize + 1) * d];
        let pe = &w.pos_emb[t * d..(t + 1) * d];
        for i in 0..d {
            h[t * d + i] = te[i] + pe[i];
        }
    }

    let mut caches = Vec::with_capacity(c.n_layers);
    for (li, lw) in w.layers.iter().enumerate() {
        let ln1 = layer_norm(&h, d, &lw.ln1_g, &lw.ln1_b);
        let q = linear(&ln1.out, d, &lw.wq, &lw.bq, d);
        let k = linear(&ln1.out, d, &lw.wk, &lw.bk, d);
        let vv = linear(&ln1.out, d, &lw.wv, &lw.bv, d);
        let mut probs = vec![0.0; nh * t_len * t_len];
        let mut ctx = vec![0.0; t_len * d];
        for hh in 0..nh {
            let o = hh * hd;
            for t in 0..t_len {
                let row = &mut probs[(hh * t_len + t) * t_len..(hh * t_len + t + 1) * t_len];
                let mut mx = f64::NEG_INFINITY;
                for s in 0..=t {
                    let mut dot = 0.0;
                    for j in 0..hd {
                        dot += q[t * d + o + j] * k[s * d + o + j];
                    }
                    row[s] = dot * scale;
                    mx = mx.max(row[s]);
                }
                let mut z = 0.0;
                for p in row.iter_mut().take(t + 1) {
                    *p = (*p - mx).exp();
                    z += *p;
                }
                for s in 0..=t {
                    row[s] /= z;
                    for j in 0..hd {
                        ctx[t * d + o + j] += row[s] * vv[s * d + o + j];
                    }
                }
            }
        }
        let attn_out = linear(&ctx, d, &lw.wo, &lw.bo, d);
        for (hi, a) in h.iter_mut().zip(&attn_out) {
            *hi += a;
        }
        let ln2 = layer_norm(&h, d, &lw.ln2_g, &lw.ln2_b);
        let pre = linear(&ln2.out, d, &lw.w1, &lw.b1, f);
        let mut act: Vec<f64> = pre.iter().map(|&x| gelu(x)).collect();
        if let Some(hook) = hook {
            hook.apply(li, &mut act[(t_len - 1) * f..t_len * f]);
        }
        let ff_out = linear(&act, f, &lw.w2, &lw.b2, d);
        for (hi, a) in h.iter_mut().zip(&ff_out) {
            *hi += a;
        }
        caches.push(LayerCache {
            ln1,
            q,
            k,
            v: vv,
            probs,
            ctx,
            ln2,
            pre,
            act,
        });
    }

    let lnf = layer_norm(&h, d, &w.lnf_g, &w.lnf_b);
    let mut logits = vec![0.0; t_len * v];
    for t in 0..t_len {
        let z = &lnf.out[t * d..(t + 1) * d];
        for tok in 0..v {
            let e = &w.tok_emb[tok * d..(tok + 1) * d];
            logits[t * v + tok] = z.iter().zip(e).map(|(a, b)| a * b).sum();
        }
    }
    Ok(ForwardCache {
        tokens: tokens.to_vec(),
        layers: caches,
        lnf,
        logits,
        leaf_layers: (0..c.n_layers).map(|l| hook.is_some_and(|h| h.replaces(l))).collect(),
    })
}

/// Reverse-mode pass. `dlogits` is row-major `[T, vocab]`.
///
/// Returns parameter gradients and, per layer, the gradient with respect to
/// the final-position feed-forward activations as they left the hook. Layers
/// whose hook [replaces](ActivationHook::replaces) the activations are leaves:
/// their gradient is not pushed further down into the pre-activations.
pub fn backward(w: &Weights, cache: &ForwardCache, dlogits: &[f64]) -> (Weights, Vec<Vec<f64>>) {
    let c = &w.config;
    let (t_len, d, f, v) = (cache.tokens.len(), c.d_model, c.d_ff, c.vocab_size);
    let (nh, hd) = (c.n_heads, c.head_dim());
    let scale = 1.0 / (hd as f64).sqrt();
    let mut g = w.zeros_like();

    // tied head
    let mut dz = vec![0.0; t_len * d];
    for t in 0..t_len {
        let z = &cache.lnf.out[t * d..(t + 1) * d];
        for tok in 0..v {
            let dl = dlogits[t * v + tok];
            if dl == 0.0 {
                continue;
            }
            let e = &w.tok_emb[tok * d..(tok + 1) * d];
            let de = &mut g.tok_emb[tok * d..(tok + 1) * d];
            for i in 0..d {
                dz[t * d + i] += dl * e[i];
                de[i] += dl * z[i];
            }
        }
    }
    let mut dh = layer_norm_backward(&dz, &cache.lnf, d, &w.lnf_g, &mut g.lnf_g, &mut g.lnf_b);

    let mut dact_final = vec![Vec::new(); c.n_layers];
    for li in (0..c.n_layers).rev() {
        let lw = &w.layers[li];
        let lc = &cache.layers[li];
        let lg = &mut g.layers[li];

        // feed-forward branch
        let dact = linear_backward(&dh, &lc.act, f, &lw.w2, d, &mut lg.w2, &mut lg.b2);
        dact_final[li] = dact[(t_len - 1) * f..].to_vec();
        let mut dpre: Vec<f64> = dact.iter().zip(&lc.pre).map(|(da, &p)| da * gelu_grad(p)).collect();
        if cache.leaf_layers[li] {
            dpre[(t_len - 1) * f..].fill(0.0);
        }
        let dln2 = linear_backward(&dpre, &lc.ln2.out, d, &lw.w1, f, &mut lg.w1, &mut lg.b1);
        let dmid = layer_norm_backward(&dln2, &lc.ln2, d, &lw.ln2_g, &mut lg.ln2_g, &mut lg.ln2_b);
        for (a, b) in dh.iter_mut().zip(&dmid) {
            *a += b;
        }

        // attention branch
        let dctx = linear_backward(&dh, &lc.ctx, d, &lw.wo, d, &mut lg.wo, &mut lg.bo);
        let mut dq = vec![0.0; t_len * d];
        let mut dk = vec![0.0; t_len * d];
        let mut dv = vec![0.0; t_len * d];
        let mut dp = vec![0.0; t_len];
        for hh in 0..nh {
            let o = hh * hd;
            for t in 0..t_len {
                let p = &lc.probs[(hh * t_len + t) * t_len..(hh * t_len + t + 1) * t_len];
                let mut pdp = 0.0;
                for s in 0..=t {
                    let mut acc = 0.0;
                    for j in 0..hd {
                        acc += dctx[t * d + o + j] * lc.v[s * d + o + j];
                        dv[s * d + o + j] += p[s] * dctx[t * d + o + j];
                    }
                    dp[s] = acc;
                    pdp += p[s] * acc;
                }
                for s in 0..=t {
                    let ds = p[s] * (dp[s] - pdp) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for j in 0..hd {
                        dq[t * d + o + j] += ds * lc.k[s * d + o + j];
                        dk[s * d + o + j] += ds * lc.q[t * d + o + j];
                    }
                }
            }
        }
        let mut dln1 = linear_backward(&dq, &lc.ln1.out, d, &lw.wq, d, &mut lg.wq, &mut lg.bq);
        for (a, b) in dln1
            .iter_mut()
            .zip(linear_backward(&dk, &lc.ln1.out, d, &lw.wk, d, &mut lg.wk, &mut lg.bk))
        {
            *a += b;
        }
        for (a, b) in dln1
            .iter_mut()
            .zip(linear_backward(&dv, &lc.ln1.out, d, &lw.wv, d, &mut lg.wv, &mut lg.bv))
        {
            *a += b;
        }
        let dx = layer_norm_backward(&dln1, &lc.ln1, d, &lw.ln1_g, &mut lg.ln1_g, &mut lg.ln1_b);
        for (a, b) in dh.iter_mut().zip(&dx) {
            *a += b;
        }
    }

    for (t, &tok) in cache.tokens.iter().enumerate() {
        for i in 0..d {
            g.tok_emb[tok as usize * d + i] += dh[t * d + i];
            g.pos_emb[t * d + i] += dh[t * d + i];
        }
    }
    (g, dact_final)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| (x - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + logits.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lse).collect()
}

/// Next-token logits at the final position plus the activation trace.
pub fn forward(w: &Weights, tokens: &[u32]) -> Result<(Vec<f64>, ActivationTrace)> {
    let cache = forward_cached(w, tokens, None)?;
    Ok((cache.last_logits().to_vec(), cache.trace()))
}

pub fn forward_with_intervention(
    w: &Weights,
    tokens: &[u32],
    intervention: &Intervention,
) -> Result<(Vec<f64>, ActivationTrace)> {
    intervention.validate(&w.config)?;
    let cache = forward_cached(w, tokens, Some(intervention))?;
    Ok((cache.last_logits().to_vec(), cache.trace()))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding. The hook is re-applied at the final position of every
/// decode step. Stops after `max_new_tokens` or when `eos` is produced.
pub fn generate_greedy(
    w: &Weights,
    prompt: &[u32],
    max_new_tokens: usize,
    hook: Option<&dyn ActivationHook>,
    eos: Option<u32>,
) -> Result<Vec<u32>> {
    check_tokens(w, prompt)?;
    let mut seq = prompt.to_vec();
    for _ in 0..max_new_tokens {
        if seq.len() >= w.config.context_len {
            break;
        }
        let cache = forward_cached(w, &seq, hook)?;
        let next = argmax(cache.last_logits()) as u32;
        seq.push(next);
        if Some(next) == eos {
            break;
        }
    }
    Ok(seq)
}

/// Mean-pooled final hidden state over all prompt positions.
pub fn embed_input(w: &Weights, tokens: &[u32]) -> Result<Vec<f64>> {
    let cache = forward_cached(w, tokens, None)?;
    let d = w.config.d_model;
    let n = tokens.len();
    let mut out = vec![0.0; d];
    for t in 0..n {
        for (o, x) in out.iter_mut().zip(&cache.final_hidden()[t * d..(t + 1) * d]) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|o| *o /= n as f64);
    Ok(out)
}

/// Mean over positions of `log p(token[t+1] | token[..=t])`.
pub fn sequence_logprob(w: &Weights, tokens: &[u32]) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(Error::input("sequence_logprob needs at least 2 tokens"));
    }
    let cache = forward_cached(w, tokens, None)?;
    let n = tokens.len() - 1;
    let total: f64 = (0..n)
        .map(|t| log_softmax(cache.position_logits(t))[tokens[t + 1] as usize])
        .sum();
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::super::{ActivationSite, ModelConfig, PerturbationKind, SiteStrength};
    use super::*;

    fn cfg(n_layers: usize, d_model: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            context_len: 6,
            n_layers,
            d_model,
            n_heads: 2,
            d_ff: 6,
            seed: 5,
        }
    }

    /// Init with enough scale that every parameter matters to the loss.
    fn lively(c: ModelConfig) -> Weights {
        let mut w = Weights::init(c).unwrap();
        let mut rng = crate::rng::rng_from(&[77]);
        use rand::Rng;
        for buf in w.buffers_mut() {
            for x in buf.iter_mut() {
                *x += rng.random_range(-0.4..0.4);
            }
        }
        w
    }

    fn nll(w: &Weights, tokens: &[u32]) -> f64 {
        let cache = forward_cached(w, &tokens[..tokens.len() - 1], None).unwrap();
        let n = tokens.len() - 1;
        -(0..n)
            .map(|t| log_softmax(cache.position_logits(t))[tokens[t + 1] as usize])
            .sum::<f64>()
    }

    fn nll_grad(w: &Weights, tokens: &[u32]) -> Weights {
        let cache = forward_cached(w, &tokens[..tokens.len() - 1], None).unwrap();
        let v = w.config.vocab_size;
        let mut dl = vec![0.0; cache.logits.len()];
        for t in 0..tokens.len() - 1 {
            let p = softmax(cache.position_logits(t));
            for j in 0..v {
                dl[t * v + j] = p[j];
            }
            dl[t * v + tokens[t + 1] as usize] -= 1.0;
        }
        backward(w, &cache, &dl).0
    }

    #[test]
    fn weight_gradients_match_central_differences() {
        let w = lively(cfg(1, 8));
        let tokens = [1u32, 4, 7, 2, 9];
        let g = nll_grad(&w, &tokens);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (bi, buf) in w.buffers().iter().enumerate() {
            for i in (0..buf.len()).step_by(3) {
                let mut wp = w.clone();
                wp.buffers_mut()[bi][i] += h;
                let mut wm = w.clone();
                wm.buffers_mut()[bi][i] -= h;
                let num = (nll(&wp, &tokens) - nll(&wm, &tokens)) / (2.0 * h);
                let ana = g.buffers()[bi][i];
                let rel = (num - ana).abs() / (num.abs().max(ana.abs()).max(1e-6));
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn activation_gradients_match_central_differences() {
        let w = lively(cfg(2, 8));
        let tokens = [3u32, 1, 5, 8];
        let zero: Vec<Vec<f64>> = vec![vec![0.0; 6]; 2];
        // dact from backward of the last-position loss only
        let cache = forward_cached(&w, &tokens, Some(&ZeroHook)).unwrap();
        let v = w.config.vocab_size;
        let mut dl = vec![0.0; cache.logits.len()];
        let p = softmax(cache.last_logits());
        let t = tokens.len() - 1;
        dl[t * v..].copy_from_slice(&p);
        dl[t * v + 2] -= 1.0;
        let (_, dact) = backward(&w, &cache, &dl);
        let loss = |probe: &[Vec<f64>]| {
            struct Add<'a>(&'a [Vec<f64>]);
            impl ActivationHook for Add<'_> {
                fn apply(&self, layer: usize, acts: &mut [f64]) {
                    for (a, d) in acts.iter_mut().zip(&self.0[layer]) {
                        *a += d;
                    }
                }
            }
            let c = forward_cached(&w, &tokens, Some(&Add(probe))).unwrap();
            -log_softmax(c.last_logits())[2]
        };
        let h = 1e-5;
        for l in 0..2 {
            for i in 0..6 {
                let mut p = zero.clone();
                p[l][i] = h;
                let up = loss(&p);
                p[l][i] = -h;
                let dn = loss(&p);
                let num = (up - dn) / (2.0 * h);
                assert!((num - dact[l][i]).abs() < 1e-6 * (1.0 + num.abs()), "layer {l} neuron {i}: {num} vs {}", dact[l][i]);
            }
        }
    }

    struct ZeroHook;
    impl ActivationHook for ZeroHook {
        fn apply(&self, _layer: usize, _acts: &mut [f64]) {}
    }

    #[test]
    fn forward_is_deterministic() {
        let w = lively(cfg(2, 8));
        let a = forward(&w, &[1, 2, 3, 4]).unwrap();
        let b = forward(&w, &[1, 2, 3, 4]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.len(), 11);
        assert_eq!(a.1.layers.len(), 2);
        assert!(a.1.layers.iter().all(|l| l.len() == 6));
    }

    #[test]
    fn zero_weights_give_uniform_logits() {
        let w = Weights::zeros(cfg(2, 8));
        let (logits, _) = forward(&w, &[1, 2, 3]).unwrap();
        assert!(logits.iter().all(|&x| x == logits[0]));
    }

    #[test]
    fn uniform_model_logprob() {
        let c = ModelConfig {
            vocab_size: 256,
            ..cfg(2, 8)
        };
        let w = Weights::zeros(c);
        let lp = sequence_logprob(&w, &[5, 9, 200, 3]).unwrap();
        assert!((lp - (1.0f64 / 256.0).ln()).abs() < 1e-12);
        assert!(sequence_logprob(&w, &[5]).is_err());
    }

    #[test]
    fn input_errors() {
        let w = Weights::zeros(cfg(1, 8));
        assert!(forward(&w, &[]).is_err());
        assert!(forward(&w, &[11]).is_err());
        assert!(forward(&w, &[1; 7]).is_err());
    }

    #[test]
    fn zero_intervention_on_layer_zero() {
        let w = lively(cfg(2, 8));
        let iv = Intervention {
            sites: (0..6)
                .map(|n| SiteStrength {
                    site: ActivationSite::new(0, n),
                    strength: 1.0,
                })
                .collect(),
            kind: PerturbationKind::Zero,
            magnitude: 1.0,
            rng_seed: 0,
            layer_sigma: vec![],
        };
        let (_, trace) = forward_with_intervention(&w, &[1, 2, 3], &iv).unwrap();
        assert!(trace.layers[0].iter().all(|&x| x == 0.0));
        assert!(trace.layers[1].iter().any(|&x| x != 0.0));
    }

    #[test]
    fn generation_edges() {
        let w = lively(cfg(2, 8));
        assert_eq!(generate_greedy(&w, &[1, 2], 0, None, None).unwrap(), vec![1, 2]);
        let out = generate_greedy(&w, &[1, 2], 10, None, None).unwrap();
        assert_eq!(out.len(), 6, "clipped to context");
    }

    #[test]
    fn embedding_of_single_token_is_that_hidden_state() {
        let w = lively(cfg(2, 8));
        let e = embed_input(&w, &[4]).unwrap();
        let c = forward_cached(&w, &[4], None).unwrap();
        assert_eq!(e, c.final_hidden().to_vec());
    }

    #[test]
    fn softmax_normalizes() {
        let p = softmax(&[1000.0, -3.0, 2.5, 0.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let lp = log_softmax(&[0.0, 0.0]);
        assert!((lp[0] - 0.5f64.ln()).abs() < 1e-15);
    }
}
