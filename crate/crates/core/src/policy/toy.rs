//! Desk-scale language model trained by exact gradients.
//!
//! The next-token distribution after a context `x[..c]` is computed from two
//! feature vectors:
//!
//! * `u = (1/w) Σ_i mix[i] ⊙ emb[x[c-1-i]]` over the last `w` tokens, a
//!   slot-weighted mean of token embeddings;
//! * `g = (1/c) Σ_s ctx[x[s]]`, the mean of a second embedding table over
//!   the whole context, so that text far before the current position (such
//!   as accumulated knowledge) can shift behaviour.
//!
//! `[u; g]` feeds one tanh layer and a softmax output layer. Parameters live
//! in a single flat vector so optimizers and checkpoints stay trivial.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::vocab::{TokenId, Vocab};
use super::{log_softmax, Policy, PolicyError, Response, Source, TokenDistribution};
use crate::audit;

const CHECKPOINT_MAGIC: &str = "OELTOY 1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyConfig {
    /// Embedding width.
    pub d: usize,
    /// Hidden units.
    pub h: usize,
    /// Trailing window length.
    pub w: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig { d: 64, h: 128, w: 40 }
    }
}

/// Offsets of each parameter block inside the flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub v: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub emb: usize,
    pub mix: usize,
    pub ctx: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub total: usize,
}

impl Layout {
    pub fn new(config: ToyConfig, v: usize) -> Layout {
        let ToyConfig { d, h, w } = config;
        let emb = 0;
        let mix = emb + v * d;
        let ctx = mix + w * d;
        let w1 = ctx + v * d;
        let b1 = w1 + 2 * d * h;
        let w2 = b1 + h;
        let b2 = w2 + h * v;
        let total = b2 + v;
        Layout { v, d, h, w, emb, mix, ctx, w1, b1, w2, b2, total }
    }
}

#[derive(Clone)]
pub struct ToyModel {
    config: ToyConfig,
    layout: Layout,
    vocab: Arc<Vocab>,
    params: Vec<f64>,
}

impl fmt::Debug for ToyModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ToyModel")
            .field("config", &self.config)
            .field("vocab_size", &self.vocab.len())
            .field("params", &self.params.len())
            .finish()
    }
}

/// Activations of a forward pass over a run of positions.
#[derive(Debug, Clone)]
pub struct Forward {
    pub positions: Range<usize>,
    z: Vec<f64>,
    hid: Vec<f64>,
    /// `positions.len() * |V|` pre-softmax scores, row per position.
    pub logits: Vec<f64>,
}

impl Forward {
    pub fn logits_at(&self, i: usize) -> &[f64] {
        let v = self.logits.len() / self.positions.len().max(1);
        &self.logits[i * v..(i + 1) * v]
    }
}

impl ToyModel {
    pub fn zeros(vocab: Arc<Vocab>, config: ToyConfig) -> Self {
        let layout = Layout::new(config, vocab.len());
        ToyModel { config, layout, vocab, params: vec![0.0; layout.total] }
    }

    /// Small random initialisation, deterministic in `seed`.
    pub fn random(vocab: Arc<Vocab>, config: ToyConfig, seed: u64, scale: f64) -> Self {
        let mut model = ToyModel::zeros(vocab, config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = model.layout;
        let mut fill = |range: Range<usize>, s: f64, params: &mut [f64]| {
            for p in &mut params[range] {
                *p = rng.random_range(-s..s);
            }
        };
        let fan1 = (2 * l.d) as f64;
        fill(l.emb..l.mix, scale, &mut model.params);
        fill(l.mix..l.ctx, 1.0, &mut model.params);
        fill(l.ctx..l.w1, scale, &mut model.params);
        fill(l.w1..l.b1, 1.0 / fan1.sqrt(), &mut model.params);
        fill(l.w2..l.b2, 1.0 / (l.h as f64).sqrt(), &mut model.params);
        model
    }

    pub fn from_params(vocab: Arc<Vocab>, config: ToyConfig, params: Vec<f64>) -> Self {
        let layout = Layout::new(config, vocab.len());
        assert_eq!(params.len(), layout.total, "parameter vector does not match layout");
        ToyModel { config, layout, vocab, params }
    }

    pub fn config(&self) -> ToyConfig {
        self.config
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn vocab_arc(&self) -> Arc<Vocab> {
        self.vocab.clone()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Plain gradient step `θ ← θ − lr · grad`.
    pub fn sgd_update(&mut self, grad: &[f64], lr: f64) {
        for (p, g) in self.params.iter_mut().zip(grad) {
            *p -= lr * g;
        }
    }

    /// Digest of the parameters, used to prove a teacher never moved.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn ctx_row(&self, tok: TokenId) -> &[f64] {
        let l = &self.layout;
        let o = l.ctx + tok as usize * l.d;
        &self.params[o..o + l.d]
    }

    /// Features, hidden activations and logits at context length `c`.
    /// `gsum` is the sum of context embeddings over `tokens[..c]`.
    fn position(&self, tokens: &[TokenId], c: usize, gsum: &[f64], z: &mut [f64], hid: &mut [f64], logits: &mut [f64]) {
        let l = &self.layout;
        let (d, h, w, v) = (l.d, l.h, l.w, l.v);
        let p = &self.params;
        z.fill(0.0);
        let (u, g) = z.split_at_mut(d);
        for i in 0..w.min(c) {
            let tok = tokens[c - 1 - i] as usize;
            let m = &p[l.mix + i * d..l.mix + (i + 1) * d];
            let e = &p[l.emb + tok * d..l.emb + (tok + 1) * d];
            for k in 0..d {
                u[k] += m[k] * e[k];
            }
        }
        let inv_w = 1.0 / w as f64;
        u.iter_mut().for_each(|x| *x *= inv_w);
        let inv_c = if c > 0 { 1.0 / c as f64 } else { 0.0 };
        for k in 0..d {
            g[k] = gsum[k] * inv_c;
        }
        hid.copy_from_slice(&p[l.b1..l.b1 + h]);
        for (k, &zk) in z.iter().enumerate() {
            if zk == 0.0 {
                continue;
            }
            let row = &p[l.w1 + k * h..l.w1 + (k + 1) * h];
            for j in 0..h {
                hid[j] += zk * row[j];
            }
        }
        hid.iter_mut().for_each(|a| *a = a.tanh());
        logits.copy_from_slice(&p[l.b2..l.b2 + v]);
        for (j, &hj) in hid.iter().enumerate() {
            let row = &p[l.w2 + j * v..l.w2 + (j + 1) * v];
            for t in 0..v {
                logits[t] += hj * row[t];
            }
        }
    }

    /// Logits after each context length in `positions`, where position `c`
    /// predicts `tokens[c]`. Requires `1 <= positions.start` and
    /// `positions.end <= tokens.len() + 1`.
    pub fn forward(&self, tokens: &[TokenId], positions: Range<usize>) -> Forward {
        assert!(positions.start >= 1 && positions.end <= tokens.len() + 1);
        let l = &self.layout;
        let n = positions.len();
        let mut z = vec![0.0; n * 2 * l.d];
        let mut hid = vec![0.0; n * l.h];
        let mut logits = vec![0.0; n * l.v];
        let mut gsum = vec![0.0; l.d];
        for &tok in &tokens[..positions.start] {
            for (s, x) in gsum.iter_mut().zip(self.ctx_row(tok)) {
                *s += x;
            }
        }
        for (i, c) in positions.clone().enumerate() {
            self.position(
                tokens,
                c,
                &gsum,
                &mut z[i * 2 * l.d..(i + 1) * 2 * l.d],
                &mut hid[i * l.h..(i + 1) * l.h],
                &mut logits[i * l.v..(i + 1) * l.v],
            );
            if c < tokens.len() {
                for (s, x) in gsum.iter_mut().zip(self.ctx_row(tokens[c])) {
                    *s += x;
                }
            }
        }
        Forward { positions, z, hid, logits }
    }

    /// Accumulates `∂loss/∂θ` into `grad` given `∂loss/∂logits` for every
    /// position of `fwd` (row-major, same shape as `fwd.logits`).
    pub fn backward(&self, tokens: &[TokenId], fwd: &Forward, dlogits: &[f64], grad: &mut [f64]) {
        let l = &self.layout;
        let (d, h, w, v) = (l.d, l.h, l.w, l.v);
        let p = &self.params;
        assert_eq!(dlogits.len(), fwd.logits.len());
        assert_eq!(grad.len(), p.len());
        let start = fwd.positions.start;
        let mut dg_scaled = vec![0.0; fwd.positions.len() * d];
        let mut dhid = vec![0.0; h];
        let mut dz = vec![0.0; 2 * d];
        let inv_w = 1.0 / w as f64;
        for (i, c) in fwd.positions.clone().enumerate() {
            let dl = &dlogits[i * v..(i + 1) * v];
            if dl.iter().all(|&x| x == 0.0) {
                continue;
            }
            let hid = &fwd.hid[i * h..(i + 1) * h];
            let z = &fwd.z[i * 2 * d..(i + 1) * 2 * d];
            for t in 0..v {
                grad[l.b2 + t] += dl[t];
            }
            for j in 0..h {
                let row = &p[l.w2 + j * v..l.w2 + (j + 1) * v];
                let grow = &mut grad[l.w2 + j * v..l.w2 + (j + 1) * v];
                let hj = hid[j];
                let mut acc = 0.0;
                for t in 0..v {
                    grow[t] += hj * dl[t];
                    acc += row[t] * dl[t];
                }
                dhid[j] = acc * (1.0 - hj * hj);
            }
            for j in 0..h {
                grad[l.b1 + j] += dhid[j];
            }
            for k in 0..2 * d {
                let row = &p[l.w1 + k * h..l.w1 + (k + 1) * h];
                let grow = &mut grad[l.w1 + k * h..l.w1 + (k + 1) * h];
                let zk = z[k];
                let mut acc = 0.0;
                for j in 0..h {
                    grow[j] += zk * dhid[j];
                    acc += row[j] * dhid[j];
                }
                dz[k] = acc;
            }
            for slot in 0..w.min(c) {
                let tok = tokens[c - 1 - slot] as usize;
                #[allow(clippy::needless_range_loop)]
                for k in 0..d {
                    let du = dz[k] * inv_w;
                    let mi = l.mix + slot * d + k;
                    let ei = l.emb + tok * d + k;
                    grad[mi] += du * p[ei];
                    grad[ei] += du * p[mi];
                }
            }
            let inv_c = 1.0 / c as f64;
            for k in 0..d {
                dg_scaled[i * d + k] = dz[d + k] * inv_c;
            }
        }
        // Token s feeds the context mean of every position c > s.
        let mut acc = vec![0.0; d];
        let last = fwd.positions.end - 1;
        for s in (0..last).rev() {
            if s + 1 >= start {
                let i = s + 1 - start;
                for k in 0..d {
                    acc[k] += dg_scaled[i * d + k];
                }
            }
            let tok = tokens[s] as usize;
            let grow = &mut grad[l.ctx + tok * d..l.ctx + (tok + 1) * d];
            for k in 0..d {
                grow[k] += acc[k];
            }
        }
    }

    /// Logits at the end of `tokens` and a closure that accumulates the
    /// parameter gradient for a given upstream `∂loss/∂logits`.
    pub fn logits_and_grad<'a>(&'a self, tokens: &'a [TokenId]) -> (Vec<f64>, impl Fn(&[f64], &mut [f64]) + 'a) {
        let c = tokens.len();
        let fwd = self.forward(tokens, c..c + 1);
        let logits = fwd.logits.clone();
        (logits, move |dlogits: &[f64], grad: &mut [f64]| self.backward(tokens, &fwd, dlogits, grad))
    }

    pub fn next_logits(&self, tokens: &[TokenId]) -> Vec<f64> {
        let c = tokens.len();
        self.forward(tokens, c..c + 1).logits
    }

    /// Ancestral sampling at `temperature` until the end marker or
    /// `max_tokens`. Deterministic in `seed`.
    pub fn generate(&self, context: &[TokenId], temperature: f64, max_tokens: usize, seed: u64) -> Vec<TokenId> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.decode_with(context, max_tokens, |logits| {
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logits.iter().map(|&z| ((z - max) / temperature).exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut r = rng.random::<f64>() * total;
            for (t, &wt) in weights.iter().enumerate() {
                r -= wt;
                if r < 0.0 {
                    return t as TokenId;
                }
            }
            weights.iter().rposition(|&wt| wt > 0.0).unwrap_or(0) as TokenId
        })
    }

    /// Argmax decoding; ties go to the lower token id.
    pub fn greedy(&self, context: &[TokenId], max_tokens: usize) -> Vec<TokenId> {
        self.decode_with(context, max_tokens, |logits| {
            let mut best = 0;
            for t in 1..logits.len() {
                if logits[t] > logits[best] {
                    best = t;
                }
            }
            best as TokenId
        })
    }

    fn decode_with(
        &self,
        context: &[TokenId],
        max_tokens: usize,
        mut pick: impl FnMut(&[f64]) -> TokenId,
    ) -> Vec<TokenId> {
        let l = &self.layout;
        let end = self.vocab.end_id();
        let mut tokens = context.to_vec();
        let mut gsum = vec![0.0; l.d];
        for &tok in context {
            for (s, x) in gsum.iter_mut().zip(self.ctx_row(tok)) {
                *s += x;
            }
        }
        let mut z = vec![0.0; 2 * l.d];
        let mut hid = vec![0.0; l.h];
        let mut logits = vec![0.0; l.v];
        let mut out = Vec::new();
        while out.len() < max_tokens {
            self.position(&tokens, tokens.len(), &gsum, &mut z, &mut hid, &mut logits);
            let tok = pick(&logits);
            out.push(tok);
            tokens.push(tok);
            if tok == end {
                break;
            }
            for (s, x) in gsum.iter_mut().zip(self.ctx_row(tok)) {
                *s += x;
            }
        }
        out
    }

    fn full_logprobs_along(&self, context: &str, continuation: &[TokenId]) -> Vec<Vec<f64>> {
        let mut tokens = self.vocab.encode(context);
        let m = tokens.len();
        tokens.extend_from_slice(continuation);
        let fwd = self.forward(&tokens, m..m + continuation.len());
        (0..continuation.len()).map(|i| log_softmax(fwd.logits_at(i))).collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        #[derive(Serialize)]
        struct Header<'a> {
            config: ToyConfig,
            vocab_hash: &'a str,
            vocab_size: usize,
            num_params: usize,
        }
        let header = Header {
            config: self.config,
            vocab_hash: &self.vocab.hash(),
            vocab_size: self.vocab.len(),
            num_params: self.params.len(),
        };
        let mut bytes = Vec::with_capacity(self.params.len() * 8 + 256);
        writeln!(bytes, "{CHECKPOINT_MAGIC}")?;
        serde_json::to_writer(&mut bytes, &header).map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
        bytes.push(b'\n');
        for p in &self.params {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, &bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Loads a checkpoint written by [`ToyModel::save`]; the vocabulary hash
    /// must match.
    pub fn load(path: &Path, vocab: Arc<Vocab>) -> Result<ToyModel, PolicyError> {
        #[derive(Deserialize)]
        struct Header {
            config: ToyConfig,
            vocab_hash: String,
            vocab_size: usize,
            num_params: usize,
        }
        let bad = |msg: String| PolicyError::Checkpoint(format!("{}: {msg}", path.display()));
        let mut reader = BufReader::new(fs::File::open(path)?);
        let mut line = String::new();
        reader.read_line(&mut line)?;
        if line.trim_end() != CHECKPOINT_MAGIC {
            return Err(bad("not a toy checkpoint".into()));
        }
        line.clear();
        reader.read_line(&mut line)?;
        let header: Header = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if header.vocab_hash != vocab.hash() || header.vocab_size != vocab.len() {
            return Err(bad(format!(
                "vocab hash mismatch (checkpoint {}, runtime {})",
                header.vocab_hash,
                vocab.hash()
            )));
        }
        let layout = Layout::new(header.config, vocab.len());
        if layout.total != header.num_params {
            return Err(bad("parameter count does not match config".into()));
        }
        let mut raw = Vec::with_capacity(layout.total * 8);
        reader.read_to_end(&mut raw)?;
        if raw.len() != layout.total * 8 {
            return Err(bad(format!("expected {} parameter bytes, found {}", layout.total * 8, raw.len())));
        }
        let params: Vec<f64> =
            raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        if params.iter().any(|p| !p.is_finite()) {
            return Err(bad("non-finite parameter".into()));
        }
        audit::record_checkpoint_load(path);
        Ok(ToyModel { config: header.config, layout, vocab, params })
    }
}

impl Policy for ToyModel {
    fn tag(&self) -> String {
        format!("toy:{}", &self.param_hash()[..12])
    }

    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn sample_response(
        &self,
        context: &str,
        temperature: f64,
        max_tokens: usize,
        seed: u64,
    ) -> Result<Response, PolicyError> {
        let ctx = self.vocab.encode(context);
        let tokens = self.generate(&ctx, temperature, max_tokens, seed);
        Ok(Response::from_tokens(&self.vocab, tokens))
    }

    fn next_token_topk(&self, context: &str, k: usize) -> Result<TokenDistribution, PolicyError> {
        let logits = self.next_logits(&self.vocab.encode(context));
        Ok(TokenDistribution::top_k(&log_softmax(&logits), k, Source::Student))
    }

    fn topk_along(
        &self,
        context: &str,
        continuation: &[TokenId],
        k: usize,
    ) -> Result<Vec<TokenDistribution>, PolicyError> {
        Ok(self
            .full_logprobs_along(context, continuation)
            .iter()
            .map(|lp| TokenDistribution::top_k(lp, k, Source::Student))
            .collect())
    }

    fn score_sets(
        &self,
        context: &str,
        continuation: &[TokenId],
        sets: &[Vec<TokenId>],
    ) -> Result<Vec<Vec<f64>>, PolicyError> {
        assert_eq!(sets.len(), continuation.len());
        Ok(self
            .full_logprobs_along(context, continuation)
            .iter()
            .zip(sets)
            .map(|(lp, set)| set.iter().map(|&t| lp[t as usize]).collect())
            .collect())
    }
}
