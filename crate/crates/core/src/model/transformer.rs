use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, ModelError};
use super::ops::{acc_at_b, acc_colsum, add_bias, matmul, matmul_bt, Mat};
use super::params::{init_params, AttnIdx, FfnIdx, Layout, LnIdx, ModelParams};
use super::Scalar;

const LN_EPS: f64 = 1e-5;

/// Dropout masks are drawn only when a generator is supplied.
struct Dropout<'a> {
    rng: Option<&'a mut ChaCha8Rng>,
}

impl Dropout<'_> {
    fn mask<F: Scalar>(&mut self, n: usize, p: f64) -> Option<Vec<F>> {
        let rng = self.rng.as_mut()?;
        if p <= 0.0 {
            return None;
        }
        let keep = F::of(1.0 / (1.0 - p));
        Some(
            (0..n)
                .map(|_| if rng.random::<f64>() < p { F::zero() } else { keep })
                .collect(),
        )
    }
}

fn apply_mask<F: Scalar>(m: &mut Mat<F>, mask: &Option<Vec<F>>) {
    if let Some(mask) = mask {
        m.mul_mask(mask);
    }
}

#[derive(Debug, Clone)]
struct LnCache<F> {
    xhat: Mat<F>,
    inv_std: Vec<F>,
}

#[derive(Debug, Clone)]
struct AttnCache<F> {
    xq: Mat<F>,
    xkv: Mat<F>,
    q: Mat<F>,
    k: Mat<F>,
    v: Mat<F>,
    /// Softmax output per head, `Tq×Tk`.
    probs: Vec<Mat<F>>,
    /// Attention dropout masks per head.
    masks: Vec<Option<Vec<F>>>,
    concat: Mat<F>,
}

#[derive(Debug, Clone)]
struct FfnCache<F> {
    x: Mat<F>,
    h: Mat<F>,
}

#[derive(Debug, Clone)]
struct EncLayerCache<F> {
    ln1: LnCache<F>,
    attn: AttnCache<F>,
    drop1: Option<Vec<F>>,
    ln2: LnCache<F>,
    ffn: FfnCache<F>,
    drop2: Option<Vec<F>>,
}

#[derive(Debug, Clone)]
struct DecLayerCache<F> {
    ln1: LnCache<F>,
    self_attn: AttnCache<F>,
    drop1: Option<Vec<F>>,
    ln2: LnCache<F>,
    cross: AttnCache<F>,
    drop2: Option<Vec<F>>,
    ln3: LnCache<F>,
    ffn: FfnCache<F>,
    drop3: Option<Vec<F>>,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<F> {
    src: Vec<u32>,
    tgt_in: Vec<u32>,
    enc_embed_mask: Option<Vec<F>>,
    enc_layers: Vec<EncLayerCache<F>>,
    enc_ln: LnCache<F>,
    enc_out: Mat<F>,
    dec_embed_mask: Option<Vec<F>>,
    dec_layers: Vec<DecLayerCache<F>>,
    dec_ln: LnCache<F>,
    dec_out: Mat<F>,
}

impl<F> ForwardCache<F> {
    pub fn target_len(&self) -> usize {
        self.tgt_in.len()
    }
}

/// Encoder output together with the output of every encoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded<F> {
    /// Final (layer-normalized) encoder states, `T×d`.
    pub out: Mat<F>,
    /// Residual stream after each encoder layer.
    pub layers: Vec<Mat<F>>,
}

/// Encoder-decoder transformer: pre-norm layers, sinusoidal positions,
/// ReLU feed-forward blocks.
#[derive(Debug, Clone)]
pub struct Transformer<F> {
    pub config: ModelConfig,
    pub params: ModelParams<F>,
    layout: Layout,
    positions: Mat<F>,
}

fn sinusoidal<F: Scalar>(max_len: usize, d: usize) -> Mat<F> {
    let mut pe = Mat::zeros(max_len, d);
    for pos in 0..max_len {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe.data[pos * d + 2 * i] = F::of(angle.sin());
            pe.data[pos * d + 2 * i + 1] = F::of(angle.cos());
        }
    }
    pe
}

impl<F: Scalar> Transformer<F> {
    /// A freshly initialized model; initialization depends only on `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let (params, layout) = init_params::<F>(&config);
        let positions = sinusoidal(config.max_len, config.embed_dim);
        Ok(Transformer {
            config,
            params,
            layout,
            positions,
        })
    }

    /// Wraps existing parameters, checking them against the config's layout.
    pub fn with_params(config: ModelConfig, params: ModelParams<F>) -> Result<Self, ModelError> {
        let mut model = Self::new(config)?;
        model.params.check_same_layout(&params)?;
        model.params = params;
        Ok(model)
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn check_tokens(&self, toks: &[u32]) -> Result<(), ModelError> {
        if let Some(&id) = toks.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        if toks.len() > self.config.max_len {
            return Err(ModelError::TooLong {
                len: toks.len(),
                max: self.config.max_len,
            });
        }
        Ok(())
    }

    fn t(&self, i: usize) -> &[F] {
        &self.params.tensors[i].data
    }

    fn embed(&self, table: usize, toks: &[u32], drop: &mut Dropout) -> (Mat<F>, Option<Vec<F>>) {
        let d = self.config.embed_dim;
        let scale = F::of((d as f64).sqrt());
        let e = self.t(table);
        let mut x = Mat::zeros(toks.len(), d);
        for (p, &tok) in toks.iter().enumerate() {
            let erow = &e[tok as usize * d..(tok as usize + 1) * d];
            let prow = self.positions.row(p);
            for ((o, &ev), &pv) in x.row_mut(p).iter_mut().zip(erow).zip(prow) {
                *o = ev * scale + pv;
            }
        }
        let mask = drop.mask(x.data.len(), self.config.dropout);
        apply_mask(&mut x, &mask);
        (x, mask)
    }

    fn embed_backward(&self, table: usize, toks: &[u32], mask: &Option<Vec<F>>, dx: &Mat<F>, grads: &mut ModelParams<F>) {
        let d = self.config.embed_dim;
        let scale = F::of((d as f64).sqrt());
        let mut dx = dx.clone();
        apply_mask(&mut dx, mask);
        let g = &mut grads.tensors[table].data;
        for (p, &tok) in toks.iter().enumerate() {
            let grow = &mut g[tok as usize * d..(tok as usize + 1) * d];
            for (gv, &dv) in grow.iter_mut().zip(dx.row(p)) {
                *gv += dv * scale;
            }
        }
    }

    fn ln_forward(&self, idx: LnIdx, x: &Mat<F>) -> (Mat<F>, LnCache<F>) {
        let d = x.cols;
        let (g, b) = (self.t(idx.g), self.t(idx.b));
        let mut y = Mat::zeros(x.rows, d);
        let mut xhat = Mat::zeros(x.rows, d);
        let mut inv_std = Vec::with_capacity(x.rows);
        let n = F::of(d as f64);
        for i in 0..x.rows {
            let row = x.row(i);
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let inv = F::one() / (var + F::of(LN_EPS)).sqrt();
            inv_std.push(inv);
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat.data[i * d + j] = h;
                y.data[i * d + j] = h * g[j] + b[j];
            }
        }
        (y, LnCache { xhat, inv_std })
    }

    fn ln_backward(&self, idx: LnIdx, c: &LnCache<F>, dy: &Mat<F>, grads: &mut ModelParams<F>) -> Mat<F> {
        let d = dy.cols;
        let g = self.t(idx.g);
        let n = F::of(d as f64);
        let mut dx = Mat::zeros(dy.rows, d);
        {
            let dg = &mut grads.tensors[idx.g].data;
            for i in 0..dy.rows {
                for j in 0..d {
                    dg[j] += dy.data[i * d + j] * c.xhat.data[i * d + j];
                }
            }
        }
        acc_colsum(&mut grads.tensors[idx.b].data, dy);
        let mut dxhat = vec![F::zero(); d];
        for i in 0..dy.rows {
            let mut mean_dxhat = F::zero();
            let mut mean_dxhat_xhat = F::zero();
            for j in 0..d {
                dxhat[j] = dy.data[i * d + j] * g[j];
                mean_dxhat += dxhat[j];
                mean_dxhat_xhat += dxhat[j] * c.xhat.data[i * d + j];
            }
            mean_dxhat = mean_dxhat / n;
            mean_dxhat_xhat = mean_dxhat_xhat / n;
            for j in 0..d {
                let xh = c.xhat.data[i * d + j];
                dx.data[i * d + j] = c.inv_std[i] * (dxhat[j] - mean_dxhat - xh * mean_dxhat_xhat);
            }
        }
        dx
    }

    fn linear(&self, x: &Mat<F>, w: usize, b: usize) -> Mat<F> {
        let n = self.params.tensors[w].cols;
        let mut y = matmul(x, self.t(w), n);
        add_bias(&mut y, self.t(b));
        y
    }

    fn linear_backward(&self, x: &Mat<F>, dy: &Mat<F>, w: usize, b: usize, grads: &mut ModelParams<F>) -> Mat<F> {
        acc_at_b(&mut grads.tensors[w].data, x, dy);
        acc_colsum(&mut grads.tensors[b].data, dy);
        matmul_bt(dy, self.t(w), self.params.tensors[w].rows)
    }

    fn attn_forward(&self, idx: AttnIdx, xq: &Mat<F>, xkv: &Mat<F>, causal: bool, drop: &mut Dropout) -> (Mat<F>, AttnCache<F>) {
        let (tq, tk) = (xq.rows, xkv.rows);
        let h = self.config.heads;
        let dh = self.config.head_dim();
        let d = self.config.embed_dim;
        let q = self.linear(xq, idx.wq, idx.bq);
        let k = self.linear(xkv, idx.wk, idx.bk);
        let v = self.linear(xkv, idx.wv, idx.bv);
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let mut concat = Mat::zeros(tq, d);
        let mut probs = Vec::with_capacity(h);
        let mut masks = Vec::with_capacity(h);
        for head in 0..h {
            let off = head * dh;
            let mut p = Mat::zeros(tq, tk);
            for i in 0..tq {
                let qi = &q.row(i)[off..off + dh];
                let limit = if causal { i + 1 } else { tk };
                let mut max = F::neg_infinity();
                for j in 0..limit {
                    let kj = &k.row(j)[off..off + dh];
                    let s = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<F>() * scale;
                    p.data[i * tk + j] = s;
                    max = max.max(s);
                }
                let mut sum = F::zero();
                for j in 0..limit {
                    let e = (p.data[i * tk + j] - max).exp();
                    p.data[i * tk + j] = e;
                    sum += e;
                }
                for j in 0..limit {
                    p.data[i * tk + j] = p.data[i * tk + j] / sum;
                }
            }
            let mask = drop.mask::<F>(tq * tk, self.config.attention_dropout);
            let mut pd = p.clone();
            apply_mask(&mut pd, &mask);
            for i in 0..tq {
                for j in 0..tk {
                    let w = pd.data[i * tk + j];
                    if w == F::zero() {
                        continue;
                    }
                    let vj = &v.row(j)[off..off + dh];
                    let crow = &mut concat.data[i * d + off..i * d + off + dh];
                    for (c, &vv) in crow.iter_mut().zip(vj) {
                        *c += w * vv;
                    }
                }
            }
            probs.push(p);
            masks.push(mask);
        }
        let out = self.linear(&concat, idx.wo, idx.bo);
        (
            out,
            AttnCache {
                xq: xq.clone(),
                xkv: xkv.clone(),
                q,
                k,
                v,
                probs,
                masks,
                concat,
            },
        )
    }

    /// Returns gradients with respect to the query input and the key/value input.
    fn attn_backward(&self, idx: AttnIdx, c: &AttnCache<F>, dout: &Mat<F>, grads: &mut ModelParams<F>) -> (Mat<F>, Mat<F>) {
        let (tq, tk) = (c.xq.rows, c.xkv.rows);
        let dh = self.config.head_dim();
        let d = self.config.embed_dim;
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let dconcat = self.linear_backward(&c.concat, dout, idx.wo, idx.bo, grads);
        let mut dq = Mat::zeros(tq, d);
        let mut dk = Mat::zeros(tk, d);
        let mut dv = Mat::zeros(tk, d);
        for (head, p) in c.probs.iter().enumerate() {
            let off = head * dh;
            let mut pd = p.clone();
            apply_mask(&mut pd, &c.masks[head]);
            // dP' = dO · Vᵀ and dV = P'ᵀ · dO
            let mut dp = Mat::zeros(tq, tk);
            for i in 0..tq {
                let doi = &dconcat.row(i)[off..off + dh];
                for j in 0..tk {
                    let vj = &c.v.row(j)[off..off + dh];
                    dp.data[i * tk + j] = doi.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                    let w = pd.data[i * tk + j];
                    if w != F::zero() {
                        let dvj = &mut dv.data[j * d + off..j * d + off + dh];
                        for (g, &o) in dvj.iter_mut().zip(doi) {
                            *g += w * o;
                        }
                    }
                }
            }
            apply_mask(&mut dp, &c.masks[head]);
            for i in 0..tq {
                let prow = p.row(i);
                let dprow = &dp.data[i * tk..(i + 1) * tk];
                let dot: F = prow.iter().zip(dprow).map(|(&a, &b)| a * b).sum();
                for j in 0..tk {
                    let ds = prow[j] * (dprow[j] - dot) * scale;
                    if ds == F::zero() {
                        continue;
                    }
                    for x in 0..dh {
                        dq.data[i * d + off + x] += ds * c.k.data[j * d + off + x];
                        dk.data[j * d + off + x] += ds * c.q.data[i * d + off + x];
                    }
                }
            }
        }
        let dxq = self.linear_backward(&c.xq, &dq, idx.wq, idx.bq, grads);
        let mut dxkv = self.linear_backward(&c.xkv, &dk, idx.wk, idx.bk, grads);
        dxkv.add_assign(&self.linear_backward(&c.xkv, &dv, idx.wv, idx.bv, grads));
        (dxq, dxkv)
    }

    fn ffn_forward(&self, idx: FfnIdx, x: &Mat<F>) -> (Mat<F>, FfnCache<F>) {
        let mut h = self.linear(x, idx.w1, idx.b1);
        h.data.iter_mut().for_each(|v| *v = v.max(F::zero()));
        let y = self.linear(&h, idx.w2, idx.b2);
        (y, FfnCache { x: x.clone(), h })
    }

    fn ffn_backward(&self, idx: FfnIdx, c: &FfnCache<F>, dy: &Mat<F>, grads: &mut ModelParams<F>) -> Mat<F> {
        let mut dh = self.linear_backward(&c.h, dy, idx.w2, idx.b2, grads);
        for (g, &hv) in dh.data.iter_mut().zip(&c.h.data) {
            if hv <= F::zero() {
                *g = F::zero();
            }
        }
        self.linear_backward(&c.x, &dh, idx.w1, idx.b1, grads)
    }

    fn encode_inner(&self, src: &[u32], drop: &mut Dropout) -> (Encoded<F>, Option<Vec<F>>, Vec<EncLayerCache<F>>, LnCache<F>) {
        let p = self.config.dropout;
        let (mut x, emb_mask) = self.embed(self.layout.enc_embed, src, drop);
        let mut caches = Vec::with_capacity(self.config.layers);
        let mut layers = Vec::with_capacity(self.config.layers);
        for li in &self.layout.enc_layers {
            let (a, ln1) = self.ln_forward(li.ln1, &x);
            let (mut att, attn) = self.attn_forward(li.attn, &a, &a, false, drop);
            let drop1 = drop.mask(att.data.len(), p);
            apply_mask(&mut att, &drop1);
            x.add_assign(&att);
            let (c, ln2) = self.ln_forward(li.ln2, &x);
            let (mut f, ffn) = self.ffn_forward(li.ffn, &c);
            let drop2 = drop.mask(f.data.len(), p);
            apply_mask(&mut f, &drop2);
            x.add_assign(&f);
            layers.push(x.clone());
            caches.push(EncLayerCache {
                ln1,
                attn,
                drop1,
                ln2,
                ffn,
                drop2,
            });
        }
        let (out, enc_ln) = self.ln_forward(self.layout.enc_ln, &x);
        (Encoded { out, layers }, emb_mask, caches, enc_ln)
    }

    fn decode_inner(&self, enc_out: &Mat<F>, tgt_in: &[u32], drop: &mut Dropout) -> (Mat<F>, Option<Vec<F>>, Vec<DecLayerCache<F>>, LnCache<F>, Mat<F>) {
        let p = self.config.dropout;
        let (mut x, emb_mask) = self.embed(self.layout.dec_embed, tgt_in, drop);
        let mut caches = Vec::with_capacity(self.config.layers);
        for li in &self.layout.dec_layers {
            let (a, ln1) = self.ln_forward(li.ln1, &x);
            let (mut sa, self_attn) = self.attn_forward(li.self_attn, &a, &a, true, drop);
            let drop1 = drop.mask(sa.data.len(), p);
            apply_mask(&mut sa, &drop1);
            x.add_assign(&sa);
            let (b, ln2) = self.ln_forward(li.ln2, &x);
            let (mut ca, cross) = self.attn_forward(li.cross, &b, enc_out, false, drop);
            let drop2 = drop.mask(ca.data.len(), p);
            apply_mask(&mut ca, &drop2);
            x.add_assign(&ca);
            let (c, ln3) = self.ln_forward(li.ln3, &x);
            let (mut f, ffn) = self.ffn_forward(li.ffn, &c);
            let drop3 = drop.mask(f.data.len(), p);
            apply_mask(&mut f, &drop3);
            x.add_assign(&f);
            caches.push(DecLayerCache {
                ln1,
                self_attn,
                drop1,
                ln2,
                cross,
                drop2,
                ln3,
                ffn,
                drop3,
            });
        }
        let (out, dec_ln) = self.ln_forward(self.layout.dec_ln, &x);
        let logits = self.project(&out);
        (logits, emb_mask, caches, dec_ln, out)
    }

    fn project(&self, h: &Mat<F>) -> Mat<F> {
        match self.layout.out_proj {
            Some(w) => matmul(h, self.t(w), self.config.vocab_size),
            None => matmul_bt(h, self.t(self.layout.dec_embed), self.config.vocab_size),
        }
    }

    /// Runs the encoder without dropout.
    pub fn encode(&self, src: &[u32]) -> Result<Encoded<F>, ModelError> {
        if src.is_empty() {
            return Err(ModelError::EmptySource);
        }
        self.check_tokens(src)?;
        Ok(self.encode_inner(src, &mut Dropout { rng: None }).0)
    }

    /// Decoder logits for every position of `tgt_in` given encoder states, without dropout.
    pub fn decoder_logits(&self, enc: &Encoded<F>, tgt_in: &[u32]) -> Result<Mat<F>, ModelError> {
        self.check_tokens(tgt_in)?;
        Ok(self.decode_inner(&enc.out, tgt_in, &mut Dropout { rng: None }).0)
    }

    /// Teacher-forced forward pass. `tgt_in` is the bos-prefixed, right-shifted
    /// target. Dropout is active only when `rng` is given.
    pub fn forward(
        &self,
        src: &[u32],
        tgt_in: &[u32],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Mat<F>, ForwardCache<F>), ModelError> {
        if src.is_empty() {
            return Err(ModelError::EmptySource);
        }
        self.check_tokens(src)?;
        self.check_tokens(tgt_in)?;
        let mut drop = Dropout { rng };
        let (enc, enc_embed_mask, enc_layers, enc_ln) = self.encode_inner(src, &mut drop);
        let (logits, dec_embed_mask, dec_layers, dec_ln, dec_out) = self.decode_inner(&enc.out, tgt_in, &mut drop);
        Ok((
            logits,
            ForwardCache {
                src: src.to_vec(),
                tgt_in: tgt_in.to_vec(),
                enc_embed_mask,
                enc_layers,
                enc_ln,
                enc_out: enc.out,
                dec_embed_mask,
                dec_layers,
                dec_ln,
                dec_out,
            },
        ))
    }

    /// Accumulates into `grads` the gradient of a scalar loss whose gradient
    /// with respect to the logits of the recorded forward pass is `dlogits`.
    pub fn backward(&self, cache: &ForwardCache<F>, dlogits: &Mat<F>, grads: &mut ModelParams<F>) {
        let v = self.config.vocab_size;
        debug_assert_eq!((dlogits.rows, dlogits.cols), (cache.tgt_in.len(), v));
        let dh = match self.layout.out_proj {
            Some(w) => {
                acc_at_b(&mut grads.tensors[w].data, &cache.dec_out, dlogits);
                matmul_bt(dlogits, self.t(w), self.config.embed_dim)
            }
            None => {
                // logits = h · Eᵀ, so dE += dlogitsᵀ · h
                let e = self.layout.dec_embed;
                acc_at_b(&mut grads.tensors[e].data, dlogits, &cache.dec_out);
                matmul(dlogits, self.t(e), self.config.embed_dim)
            }
        };
        let mut dx = self.ln_backward(self.layout.dec_ln, &cache.dec_ln, &dh, grads);
        let mut denc = Mat::zeros(cache.enc_out.rows, cache.enc_out.cols);
        for (li, c) in self.layout.dec_layers.iter().zip(&cache.dec_layers).rev() {
            let mut df = dx.clone();
            apply_mask(&mut df, &c.drop3);
            let dc = self.ffn_backward(li.ffn, &c.ffn, &df, grads);
            dx.add_assign(&self.ln_backward(li.ln3, &c.ln3, &dc, grads));

            let mut dca = dx.clone();
            apply_mask(&mut dca, &c.drop2);
            let (db, de) = self.attn_backward(li.cross, &c.cross, &dca, grads);
            denc.add_assign(&de);
            dx.add_assign(&self.ln_backward(li.ln2, &c.ln2, &db, grads));

            let mut dsa = dx.clone();
            apply_mask(&mut dsa, &c.drop1);
            let (dq, dkv) = self.attn_backward(li.self_attn, &c.self_attn, &dsa, grads);
            let mut da = dq;
            da.add_assign(&dkv);
            dx.add_assign(&self.ln_backward(li.ln1, &c.ln1, &da, grads));
        }
        self.embed_backward(self.layout.dec_embed, &cache.tgt_in, &cache.dec_embed_mask, &dx, grads);

        let mut dx = self.ln_backward(self.layout.enc_ln, &cache.enc_ln, &denc, grads);
        for (li, c) in self.layout.enc_layers.iter().zip(&cache.enc_layers).rev() {
            let mut df = dx.clone();
            apply_mask(&mut df, &c.drop2);
            let dc = self.ffn_backward(li.ffn, &c.ffn, &df, grads);
            dx.add_assign(&self.ln_backward(li.ln2, &c.ln2, &dc, grads));

            let mut datt = dx.clone();
            apply_mask(&mut datt, &c.drop1);
            let (dq, dkv) = self.attn_backward(li.attn, &c.attn, &datt, grads);
            let mut da = dq;
            da.add_assign(&dkv);
            dx.add_assign(&self.ln_backward(li.ln1, &c.ln1, &da, grads));
        }
        self.embed_backward(self.layout.enc_embed, &cache.src, &cache.enc_embed_mask, &dx, grads);
    }

    /// Zero gradients shaped like the parameters.
    pub fn zero_grads(&self) -> ModelParams<F> {
        self.params.zeros_like()
    }
}
