//! Pre-norm decoder: token embedding (tied with the output head), `L`
//! blocks of rotary multi-head attention and a 4x GELU MLP, final layer
//! norm. Backward passes are written out by hand.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, Axis};

use super::config::ModelConfig;
use super::params::{BlockIds, Params};
use crate::attention::{causal_attention, causal_attention_backward, AttentionConfig, PositionalStrategy};
use crate::error::{HarpeError, Result};
use crate::rope::RopeTable;
use crate::Real;

const LN_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn lit<T: Real>(x: f64) -> T {
    T::from_f64(x).unwrap()
}

pub struct Transformer<T: Real> {
    config: ModelConfig,
    params: Params<T>,
    tables: Vec<RopeTable<T>>,
    context_len: usize,
}

/// Keys (already rotated) and values of every block for the positions
/// processed so far.
pub struct KvCache<T> {
    width: usize,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    len: usize,
}

impl<T: Real> KvCache<T> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

struct LnOut<T> {
    y: Array2<T>,
    xhat: Array2<T>,
    rstd: Array1<T>,
}

struct BlockActs<T> {
    ln1: LnOut<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    probs: Vec<Array2<T>>,
    attn: Array2<T>,
    ln2: LnOut<T>,
    pre: Array2<T>,
    act: Array2<T>,
}

struct Acts<T> {
    blocks: Vec<BlockActs<T>>,
    lnf: LnOut<T>,
}

impl<T: Real> Transformer<T> {
    /// Builds a model that accepts sequences up to `context_len`, using the
    /// strategy stored in `config`.
    pub fn new(config: ModelConfig, params: Params<T>, context_len: usize) -> Result<Self> {
        config.validate()?;
        if params.layout().total() != super::params::ParamLayout::for_config(&config).total() {
            return Err(HarpeError::invalid("parameter layout does not match config"));
        }
        let strategy = config.strategy.clone();
        let mut model = Self {
            config,
            params,
            tables: Vec::new(),
            context_len: 0,
        };
        model.set_positional(strategy, context_len)?;
        Ok(model)
    }

    /// Swaps the positional strategy and context length, keeping parameters.
    pub fn set_positional(&mut self, strategy: PositionalStrategy, context_len: usize) -> Result<()> {
        if context_len == 0 || context_len > self.config.max_context {
            return Err(HarpeError::invalid(format!(
                "context length {context_len} outside 1..={}",
                self.config.max_context
            )));
        }
        let attn = AttentionConfig::new(
            self.config.n_heads,
            self.config.head_dim,
            context_len,
            strategy.clone(),
        )?;
        self.tables = attn.tables(context_len)?;
        self.config.strategy = strategy;
        self.context_len = context_len;
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<T> {
        &mut self.params
    }

    pub fn into_params(self) -> Params<T> {
        self.params
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn new_cache(&self) -> KvCache<T> {
        KvCache {
            width: self.config.width,
            keys: vec![Vec::new(); self.config.n_layers],
            values: vec![Vec::new(); self.config.n_layers],
            len: 0,
        }
    }

    fn check_tokens(&self, tokens: &[u32], start: usize) -> Result<()> {
        if tokens.is_empty() {
            return Err(HarpeError::invalid("empty token sequence"));
        }
        if start + tokens.len() > self.context_len {
            return Err(HarpeError::ContextExceeded {
                len: start + tokens.len(),
                context: self.context_len,
            });
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab) {
            return Err(HarpeError::invalid(format!(
                "token {t} outside vocabulary of size {}",
                self.config.vocab
            )));
        }
        Ok(())
    }

    /// Logits `[seq, vocab]` for a fresh sequence.
    pub fn forward(&self, tokens: &[u32]) -> Result<Array2<T>> {
        let mut cache = self.new_cache();
        self.forward_cached(tokens, &mut cache)
    }

    /// Appends `tokens` after the positions already in `cache` and returns
    /// their logits.
    pub fn forward_cached(&self, tokens: &[u32], cache: &mut KvCache<T>) -> Result<Array2<T>> {
        self.check_tokens(tokens, cache.len)?;
        let (logits, _) = self.run(tokens, Some(cache), false);
        Ok(logits)
    }

    /// Greedy continuation of `prompt` for at most `max_new` tokens,
    /// stopping early after emitting `stop`.
    pub fn generate_greedy(&self, prompt: &[u32], max_new: usize, stop: Option<u32>) -> Result<Vec<u32>> {
        let mut cache = self.new_cache();
        let needed = prompt.len() + max_new.saturating_sub(1);
        if needed > self.context_len {
            return Err(HarpeError::ContextExceeded {
                len: needed,
                context: self.context_len,
            });
        }
        let mut out = Vec::with_capacity(max_new);
        if max_new == 0 {
            return Ok(out);
        }
        let mut logits = self.forward_cached(prompt, &mut cache)?;
        loop {
            let last = logits.row(logits.nrows() - 1);
            let next = argmax(last) as u32;
            out.push(next);
            if out.len() == max_new || Some(next) == stop {
                return Ok(out);
            }
            logits = self.forward_cached(&[next], &mut cache)?;
        }
    }

    /// Mean next-token cross-entropy in nats.
    pub fn loss(&self, tokens: &[u32], targets: &[u32]) -> Result<f64> {
        self.check_targets(tokens, targets)?;
        let logits = self.forward(tokens)?;
        Ok(cross_entropy(&logits, targets, None))
    }

    fn check_targets(&self, tokens: &[u32], targets: &[u32]) -> Result<()> {
        if tokens.len() != targets.len() {
            return Err(HarpeError::invalid(format!(
                "{} tokens but {} targets",
                tokens.len(),
                targets.len()
            )));
        }
        self.check_tokens(tokens, 0)?;
        if let Some(t) = targets.iter().find(|&&t| t as usize >= self.config.vocab) {
            return Err(HarpeError::invalid(format!("target {t} outside vocabulary")));
        }
        Ok(())
    }

    /// Mean cross-entropy of one sequence; adds `scale * d(loss)/d(param)`
    /// into `grads`.
    pub fn loss_and_grads(
        &self,
        tokens: &[u32],
        targets: &[u32],
        grads: &mut Params<T>,
        scale: f64,
    ) -> Result<f64> {
        self.check_targets(tokens, targets)?;
        let (logits, acts) = self.run(tokens, None, true);
        let acts = acts.expect("activations requested");
        let mut dlogits = Array2::<T>::zeros(logits.raw_dim());
        let loss = cross_entropy(&logits, targets, Some((&mut dlogits, scale)));
        self.backward(tokens, &acts, dlogits, grads);
        Ok(loss)
    }

    fn run(
        &self,
        tokens: &[u32],
        mut cache: Option<&mut KvCache<T>>,
        record: bool,
    ) -> (Array2<T>, Option<Acts<T>>) {
        let cfg = &self.config;
        let p = &self.params;
        let layout = p.layout().clone();
        let (n, w, hd) = (tokens.len(), cfg.width, cfg.head_dim);
        let start = cache.as_ref().map_or(0, |c| c.len);
        let scale = 1.0 / (hd as f64).sqrt();

        let emb = p.view2(layout.tok_emb);
        let mut x = Array2::<T>::zeros((n, w));
        for (mut row, &t) in x.rows_mut().into_iter().zip(tokens) {
            row.assign(&emb.row(t as usize));
        }

        let mut blocks = Vec::new();
        for (l, blk) in layout.blocks.iter().enumerate() {
            let ln1 = layer_norm(x.view(), p.view1(blk.ln1_gain), p.view1(blk.ln1_bias));
            let mut q = ln1.y.dot(&p.view2(blk.wq));
            let mut k = ln1.y.dot(&p.view2(blk.wk));
            let v = ln1.y.dot(&p.view2(blk.wv));
            for (h, table) in self.tables.iter().enumerate() {
                let cols = s![.., h * hd..(h + 1) * hd];
                table.apply(q.slice_mut(cols), start, false);
                table.apply(k.slice_mut(cols), start, false);
            }

            let mut attn = Array2::<T>::zeros((n, w));
            let mut probs = Vec::new();
            match cache.as_deref_mut() {
                Some(c) => {
                    c.keys[l].extend(k.iter().copied());
                    c.values[l].extend(v.iter().copied());
                    let total = start + n;
                    let keys = ArrayView2::from_shape((total, c.width), &c.keys[l][..]).unwrap();
                    let vals = ArrayView2::from_shape((total, c.width), &c.values[l][..]).unwrap();
                    for h in 0..cfg.n_heads {
                        let cols = s![.., h * hd..(h + 1) * hd];
                        let o = cached_attention(
                            q.slice(cols),
                            keys.slice(cols),
                            vals.slice(cols),
                            start,
                            scale,
                        );
                        attn.slice_mut(cols).assign(&o);
                    }
                }
                None => {
                    for h in 0..cfg.n_heads {
                        let cols = s![.., h * hd..(h + 1) * hd];
                        let (o, pr) =
                            causal_attention(q.slice(cols), k.slice(cols), v.slice(cols), scale);
                        attn.slice_mut(cols).assign(&o);
                        if record {
                            probs.push(pr);
                        }
                    }
                }
            }
            x += &attn.dot(&p.view2(blk.wo));

            let ln2 = layer_norm(x.view(), p.view1(blk.ln2_gain), p.view1(blk.ln2_bias));
            let mut pre = ln2.y.dot(&p.view2(blk.w_in));
            pre += &p.view1(blk.b_in);
            let act = pre.mapv(gelu);
            x += &act.dot(&p.view2(blk.w_out));
            x += &p.view1(blk.b_out);

            if record {
                blocks.push(BlockActs {
                    ln1,
                    q,
                    k,
                    v,
                    probs,
                    attn,
                    ln2,
                    pre,
                    act,
                });
            }
        }
        if let Some(c) = cache {
            c.len += n;
        }

        let lnf = layer_norm(x.view(), p.view1(layout.lnf_gain), p.view1(layout.lnf_bias));
        let logits = lnf.y.dot(&emb.t());
        let acts = record.then_some(Acts { blocks, lnf });
        (logits, acts)
    }

    fn backward(&self, tokens: &[u32], acts: &Acts<T>, dlogits: Array2<T>, grads: &mut Params<T>) {
        let cfg = &self.config;
        let p = &self.params;
        let layout = p.layout().clone();
        let hd = cfg.head_dim;
        let scale = 1.0 / (hd as f64).sqrt();
        let one = T::one();

        // tied output head
        general_mat_mul(one, &dlogits.t(), &acts.lnf.y, one, &mut grads.view2_mut(layout.tok_emb));
        let dlnf = dlogits.dot(&p.view2(layout.tok_emb));
        let mut dx = layer_norm_backward(
            dlnf.view(),
            &acts.lnf,
            p.view1(layout.lnf_gain),
            grads,
            layout.lnf_gain,
            layout.lnf_bias,
        );

        for (blk, a) in layout.blocks.iter().zip(&acts.blocks).rev() {
            self.mlp_backward(blk, a, &mut dx, grads);
            self.attn_backward(blk, a, &mut dx, grads, scale);
        }

        let mut demb = grads.view2_mut(layout.tok_emb);
        for (row, &t) in dx.rows().into_iter().zip(tokens) {
            let mut target = demb.row_mut(t as usize);
            target += &row;
        }
    }

    fn mlp_backward(&self, blk: &BlockIds, a: &BlockActs<T>, dx: &mut Array2<T>, grads: &mut Params<T>) {
        let p = &self.params;
        let one = T::one();
        grads.view1_mut(blk.b_out).add_assign_rows(dx.view());
        general_mat_mul(one, &a.act.t(), &*dx, one, &mut grads.view2_mut(blk.w_out));
        let mut dpre = dx.dot(&p.view2(blk.w_out).t());
        dpre.zip_mut_with(&a.pre, |d, &u| *d = *d * gelu_grad(u));
        grads.view1_mut(blk.b_in).add_assign_rows(dpre.view());
        general_mat_mul(one, &a.ln2.y.t(), &dpre, one, &mut grads.view2_mut(blk.w_in));
        let dln2 = dpre.dot(&p.view2(blk.w_in).t());
        let back = layer_norm_backward(
            dln2.view(),
            &a.ln2,
            p.view1(blk.ln2_gain),
            grads,
            blk.ln2_gain,
            blk.ln2_bias,
        );
        *dx += &back;
    }

    fn attn_backward(
        &self,
        blk: &BlockIds,
        a: &BlockActs<T>,
        dx: &mut Array2<T>,
        grads: &mut Params<T>,
        scale: f64,
    ) {
        let p = &self.params;
        let hd = self.config.head_dim;
        let one = T::one();
        general_mat_mul(one, &a.attn.t(), &*dx, one, &mut grads.view2_mut(blk.wo));
        let dattn = dx.dot(&p.view2(blk.wo).t());
        let mut dq = Array2::<T>::zeros(a.q.raw_dim());
        let mut dk = Array2::<T>::zeros(a.k.raw_dim());
        let mut dv = Array2::<T>::zeros(a.v.raw_dim());
        for (h, table) in self.tables.iter().enumerate() {
            let cols = s![.., h * hd..(h + 1) * hd];
            let (mut gq, mut gk, gv) = causal_attention_backward(
                a.q.slice(cols),
                a.k.slice(cols),
                a.v.slice(cols),
                a.probs[h].view(),
                dattn.slice(cols),
                scale,
            );
            table.apply(gq.view_mut(), 0, true);
            table.apply(gk.view_mut(), 0, true);
            dq.slice_mut(cols).assign(&gq);
            dk.slice_mut(cols).assign(&gk);
            dv.slice_mut(cols).assign(&gv);
        }
        let x_ln = &a.ln1.y;
        general_mat_mul(one, &x_ln.t(), &dq, one, &mut grads.view2_mut(blk.wq));
        general_mat_mul(one, &x_ln.t(), &dk, one, &mut grads.view2_mut(blk.wk));
        general_mat_mul(one, &x_ln.t(), &dv, one, &mut grads.view2_mut(blk.wv));
        let mut dln1 = dq.dot(&p.view2(blk.wq).t());
        general_mat_mul(one, &dk, &p.view2(blk.wk).t(), one, &mut dln1);
        general_mat_mul(one, &dv, &p.view2(blk.wv).t(), one, &mut dln1);
        let back = layer_norm_backward(
            dln1.view(),
            &a.ln1,
            p.view1(blk.ln1_gain),
            grads,
            blk.ln1_gain,
            blk.ln1_bias,
        );
        *dx += &back;
    }
}

trait AddRows<T> {
    fn add_assign_rows(self, m: ArrayView2<'_, T>);
}

impl<T: Real> AddRows<T> for ArrayViewMut1<'_, T> {
    fn add_assign_rows(mut self, m: ArrayView2<'_, T>) {
        for row in m.rows() {
            self += &row;
        }
    }
}

/// Attention of `n` new queries at positions `start..start + n` over all
/// cached keys `0..start + n`.
fn cached_attention<T: Real>(
    q: ArrayView2<'_, T>,
    keys: ArrayView2<'_, T>,
    vals: ArrayView2<'_, T>,
    start: usize,
    scale: f64,
) -> Array2<T> {
    let scale = lit::<T>(scale);
    let mut scores = q.dot(&keys.t());
    for (i, mut row) in scores.axis_iter_mut(Axis(0)).enumerate() {
        let visible = start + i + 1;
        let mut max = T::neg_infinity();
        for j in 0..visible {
            row[j] = row[j] * scale;
            max = max.max(row[j]);
        }
        let mut sum = T::zero();
        for j in 0..visible {
            let e = (row[j] - max).exp();
            row[j] = e;
            sum = sum + e;
        }
        let inv = sum.recip();
        for j in 0..visible {
            row[j] = row[j] * inv;
        }
        row.slice_mut(s![visible..]).fill(T::zero());
    }
    scores.dot(&vals)
}

fn layer_norm<T: Real>(x: ArrayView2<'_, T>, gain: ArrayView1<'_, T>, bias: ArrayView1<'_, T>) -> LnOut<T> {
    let (n, w) = x.dim();
    let inv_w = lit::<T>(1.0 / w as f64);
    let eps = lit::<T>(LN_EPS);
    let mut xhat = Array2::<T>::zeros((n, w));
    let mut rstd = Array1::<T>::zeros(n);
    for ((row, mut out), r) in x.rows().into_iter().zip(xhat.rows_mut()).zip(rstd.iter_mut()) {
        let mean = row.sum() * inv_w;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_w;
        *r = (var + eps).sqrt().recip();
        out.zip_mut_with(&row, |o, &v| *o = (v - mean) * *r);
    }
    let mut y = &xhat * &gain;
    y += &bias;
    LnOut { y, xhat, rstd }
}

fn layer_norm_backward<T: Real>(
    dy: ArrayView2<'_, T>,
    ln: &LnOut<T>,
    gain: ArrayView1<'_, T>,
    grads: &mut Params<T>,
    gain_id: usize,
    bias_id: usize,
) -> Array2<T> {
    let w = dy.ncols();
    let inv_w = lit::<T>(1.0 / w as f64);
    {
        let mut dg = grads.view1_mut(gain_id);
        for (dy_row, xh_row) in dy.rows().into_iter().zip(ln.xhat.rows()) {
            dg.zip_mut_with(&(&dy_row * &xh_row), |a, &b| *a = *a + b);
        }
    }
    grads.view1_mut(bias_id).add_assign_rows(dy);
    let mut dx = Array2::<T>::zeros(dy.raw_dim());
    for (((dy_row, xh_row), mut out), &r) in dy
        .rows()
        .into_iter()
        .zip(ln.xhat.rows())
        .zip(dx.rows_mut())
        .zip(ln.rstd.iter())
    {
        let dxhat = &dy_row * &gain;
        let mean_d = dxhat.sum() * inv_w;
        let mean_dx = dxhat.iter().zip(xh_row.iter()).map(|(&a, &b)| a * b).sum::<T>() * inv_w;
        for ((o, &d), &xh) in out.iter_mut().zip(dxhat.iter()).zip(xh_row.iter()) {
            *o = r * (d - mean_d - xh * mean_dx);
        }
    }
    dx
}

/// `tanh` through a single `exp`; saturates cleanly at both ends.
fn fast_tanh<T: Real>(x: T) -> T {
    let two = lit::<T>(2.0);
    T::one() - two / (T::one() + (two * x).exp())
}

fn gelu<T: Real>(u: T) -> T {
    let half = lit::<T>(0.5);
    let inner = lit::<T>(GELU_K) * (u + lit::<T>(GELU_C) * u * u * u);
    half * u * (T::one() + fast_tanh(inner))
}

fn gelu_grad<T: Real>(u: T) -> T {
    let half = lit::<T>(0.5);
    let k = lit::<T>(GELU_K);
    let c = lit::<T>(GELU_C);
    let t = fast_tanh(k * (u + c * u * u * u));
    half * (T::one() + t) + half * u * (T::one() - t * t) * k * (T::one() + lit::<T>(3.0) * c * u * u)
}

fn argmax<T: Real>(row: ArrayView1<'_, T>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy over rows. When `grad` is given, writes
/// `scale * (softmax - onehot) / rows` into it.
pub(crate) fn cross_entropy<T: Real>(
    logits: &Array2<T>,
    targets: &[u32],
    grad: Option<(&mut Array2<T>, f64)>,
) -> f64 {
    let n = logits.nrows();
    let mut total = 0.0f64;
    let mut grad = grad;
    for (i, row) in logits.rows().into_iter().enumerate() {
        let row64: Vec<f64> = row.iter().map(|v| v.to_f64().unwrap()).collect();
        let max = row64.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row64.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        let t = targets[i] as usize;
        total += lse - row64[t];
        if let Some((g, scale)) = grad.as_mut() {
            let f = *scale / n as f64;
            for (j, &v) in row64.iter().enumerate() {
                let prob = (v - lse).exp();
                let onehot = if j == t { 1.0 } else { 0.0 };
                g[[i, j]] = lit::<T>(f * (prob - onehot));
            }
        }
    }
    total / n as f64
}

/// Log-probabilities of each target under its row of logits, in `f64`.
pub fn target_log_probs<T: Real>(logits: &Array2<T>, targets: &[u32]) -> Vec<f64> {
    logits
        .rows()
        .into_iter()
        .zip(targets)
        .map(|(row, &t)| {
            let row64: Vec<f64> = row.iter().map(|v| v.to_f64().unwrap()).collect();
            let max = row64.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row64.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            row64[t as usize] - lse
        })
        .collect()
}
