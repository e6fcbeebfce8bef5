//! Differentiable toy policy: a linear-softmax model over sparse one-hot
//! features of a bounded token window, with exact closed-form log-prob
//! gradients, immutable snapshots, and checkpoint I/O.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forest::TokenId;

/// How the token window is embedded into feature rows.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// One one-hot block per window slot plus a bias row:
    /// `feature_dim = window * vocab + 1`.
    Positional,
    /// A single one-hot over the joint window context plus a bias row:
    /// `feature_dim = vocab^window + 1`. Can represent any function of the
    /// window, which the additive positional features cannot.
    Joint,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a policy checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    BadVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

/// Parameters of the toy policy.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    pub vocab_size: usize,
    pub window: usize,
    pub feature_kind: FeatureKind,
    pub bos: TokenId,
    /// Shape `(feature_dim, vocab_size)`; the last row is the bias.
    pub weights: Array2<f64>,
}

/// Frozen copy of the policy used as pi_old / pi_ref.
#[derive(Clone, Debug)]
pub struct PolicySnapshot {
    params: PolicyParams,
}

/// Sparse gradient with respect to [`PolicyParams::weights`]: only rows of
/// active features are present.
#[derive(Clone, Debug, Default)]
pub struct PolicyGrad {
    pub rows: BTreeMap<usize, Vec<f64>>,
}

impl PolicyGrad {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_scaled(&mut self, other: &PolicyGrad, scale: f64) {
        for (&row, vals) in &other.rows {
            let entry = self
                .rows
                .entry(row)
                .or_insert_with(|| vec![0.0; vals.len()]);
            for (e, v) in entry.iter_mut().zip(vals) {
                *e += scale * v;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for vals in self.rows.values_mut() {
            for v in vals {
                *v *= factor;
            }
        }
    }

    /// Dense view, for gradient checks.
    pub fn to_dense(&self, feature_dim: usize, vocab_size: usize) -> Array2<f64> {
        let mut out = Array2::zeros((feature_dim, vocab_size));
        for (&row, vals) in &self.rows {
            for (c, &v) in vals.iter().enumerate() {
                out[[row, c]] += v;
            }
        }
        out
    }
}

pub fn feature_dim(vocab_size: usize, window: usize, kind: FeatureKind) -> usize {
    match kind {
        FeatureKind::Positional => window * vocab_size + 1,
        FeatureKind::Joint => vocab_size.pow(window as u32) + 1,
    }
}

impl PolicyParams {
    /// Zero-initialized parameters (uniform next-token distribution).
    pub fn zeros(vocab_size: usize, window: usize, kind: FeatureKind, bos: TokenId) -> Self {
        let dim = feature_dim(vocab_size, window, kind);
        PolicyParams {
            vocab_size,
            window,
            feature_kind: kind,
            bos,
            weights: Array2::zeros((dim, vocab_size)),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.nrows()
    }

    /// Active feature rows for a prefix: one per window slot (positional) or
    /// one joint context row (joint), plus the bias row. The window is
    /// left-padded with BOS.
    pub fn features(&self, prefix: &[TokenId]) -> Vec<usize> {
        let n = self.window;
        let slot = |j: usize| -> usize {
            // Slot j holds the token at distance n - j from the end.
            let back = n - j;
            if prefix.len() >= back {
                prefix[prefix.len() - back].index()
            } else {
                self.bos.index()
            }
        };
        let mut rows = Vec::with_capacity(n + 1);
        match self.feature_kind {
            FeatureKind::Positional => {
                for j in 0..n {
                    rows.push(j * self.vocab_size + slot(j));
                }
            }
            FeatureKind::Joint => {
                let mut ctx = 0usize;
                for j in 0..n {
                    ctx = ctx * self.vocab_size + slot(j);
                }
                rows.push(ctx);
            }
        }
        rows.push(self.feature_dim() - 1); // bias
        rows
    }

    fn logits(&self, rows: &[usize]) -> Vec<f64> {
        let mut logits = vec![0.0; self.vocab_size];
        for &r in rows {
            let row = self.weights.row(r);
            for (l, &w) in logits.iter_mut().zip(row.iter()) {
                *l += w;
            }
        }
        logits
    }

    /// Full next-token probability vector; sums to 1 within 1e-12.
    pub fn distribution(&self, prefix: &[TokenId]) -> Vec<f64> {
        let rows = self.features(prefix);
        softmax(&self.logits(&rows))
    }

    /// Log-probabilities over the vocabulary (stable log-softmax).
    pub fn log_distribution(&self, prefix: &[TokenId]) -> Vec<f64> {
        let rows = self.features(prefix);
        log_softmax(&self.logits(&rows))
    }

    pub fn logprob(&self, prefix: &[TokenId], token: TokenId) -> f64 {
        self.log_distribution(prefix)[token.index()]
    }

    /// Log-prob of `token` and its exact gradient with respect to the
    /// parameters: `(onehot(token) - probs)` on each active feature row.
    pub fn logprob_and_grad(&self, prefix: &[TokenId], token: TokenId) -> (f64, PolicyGrad) {
        let mut grad = PolicyGrad::new();
        let logp = self.accumulate_logprob_grad(prefix, token, 1.0, &mut grad);
        (logp, grad)
    }

    /// Adds `scale * d logp / d theta` into `acc`; returns the log-prob.
    pub fn accumulate_logprob_grad(
        &self,
        prefix: &[TokenId],
        token: TokenId,
        scale: f64,
        acc: &mut PolicyGrad,
    ) -> f64 {
        let rows = self.features(prefix);
        let logp_all = log_softmax(&self.logits(&rows));
        for &r in &rows {
            let entry = acc
                .rows
                .entry(r)
                .or_insert_with(|| vec![0.0; self.vocab_size]);
            for (c, e) in entry.iter_mut().enumerate() {
                let onehot = if c == token.index() { 1.0 } else { 0.0 };
                *e += scale * (onehot - logp_all[c].exp());
            }
        }
        logp_all[token.index()]
    }

    pub fn snapshot(&self) -> PolicySnapshot {
        PolicySnapshot {
            params: self.clone(),
        }
    }

    /// Plain SGD: `theta <- theta - lr * grad`.
    pub fn sgd_step(&mut self, grad: &PolicyGrad, lr: f64) {
        assert!(lr > 0.0, "learning rate must be positive");
        for (&row, vals) in &grad.rows {
            let mut w = self.weights.row_mut(row);
            for (wv, &g) in w.iter_mut().zip(vals) {
                *wv -= lr * g;
            }
        }
    }

    /// FNV-1a over the raw weight bits plus the shape header. Used to pin a
    /// forest to the snapshot it was sampled under.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut mix = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        mix(&(self.vocab_size as u64).to_le_bytes());
        mix(&(self.window as u64).to_le_bytes());
        for &w in self.weights.iter() {
            mix(&w.to_bits().to_le_bytes());
        }
        h
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut buf: Vec<u8> = Vec::with_capacity(32 + self.weights.len() * 8);
        buf.extend_from_slice(b"TADV");
        buf.extend_from_slice(&1u32.to_le_bytes()); // format_version
        buf.extend_from_slice(&(self.vocab_size as u32).to_le_bytes());
        buf.extend_from_slice(&(self.window as u32).to_le_bytes());
        buf.push(match self.feature_kind {
            FeatureKind::Positional => 0,
            FeatureKind::Joint => 1,
        });
        buf.extend_from_slice(&self.bos.0.to_le_bytes());
        buf.extend_from_slice(&(self.feature_dim() as u64).to_le_bytes());
        for &w in self.weights.iter() {
            buf.extend_from_slice(&w.to_le_bytes());
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<PolicyParams, CheckpointError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8], CheckpointError> {
            if pos + n > bytes.len() {
                return Err(CheckpointError::Corrupt("truncated file".into()));
            }
            let s = &bytes[pos..pos + n];
            pos += n;
            Ok(s)
        };
        if take(4)? != b"TADV" {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != 1 {
            return Err(CheckpointError::BadVersion(version));
        }
        let vocab_size = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let window = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let kind = match take(1)?[0] {
            0 => FeatureKind::Positional,
            1 => FeatureKind::Joint,
            k => return Err(CheckpointError::Corrupt(format!("unknown feature kind {k}"))),
        };
        let bos = TokenId(u16::from_le_bytes(take(2)?.try_into().unwrap()));
        let dim = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        if dim != feature_dim(vocab_size, window, kind) {
            return Err(CheckpointError::Corrupt(format!(
                "feature_dim {dim} does not match vocab_size {vocab_size} / window {window}"
            )));
        }
        let mut weights = Array2::zeros((dim, vocab_size));
        for r in 0..dim {
            for c in 0..vocab_size {
                weights[[r, c]] = f64::from_le_bytes(take(8)?.try_into().unwrap());
            }
        }
        if pos != bytes.len() {
            return Err(CheckpointError::Corrupt("trailing bytes".into()));
        }
        Ok(PolicyParams {
            vocab_size,
            window,
            feature_kind: kind,
            bos,
            weights,
        })
    }
}

impl PolicySnapshot {
    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn vocab_size(&self) -> usize {
        self.params.vocab_size
    }

    pub fn distribution(&self, prefix: &[TokenId]) -> Vec<f64> {
        self.params.distribution(prefix)
    }

    pub fn log_distribution(&self, prefix: &[TokenId]) -> Vec<f64> {
        self.params.log_distribution(prefix)
    }

    pub fn content_hash(&self) -> u64 {
        self.params.content_hash()
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|l| l - log_z).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    const BOS: TokenId = TokenId(3);

    fn random_params(seed: u64, kind: FeatureKind) -> PolicyParams {
        let mut p = PolicyParams::zeros(4, 2, kind, BOS);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in p.weights.iter_mut() {
            *w = rng.gen_range(-1.0..1.0);
        }
        p
    }

    #[test]
    fn zero_weights_give_uniform() {
        let p = PolicyParams::zeros(4, 2, FeatureKind::Positional, BOS);
        let d = p.distribution(&[TokenId(1)]);
        for &pr in &d {
            assert!((pr - 0.25).abs() < 1e-15);
        }
        assert!((p.logprob(&[], TokenId(2)) + 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn distribution_normalized() {
        for kind in [FeatureKind::Positional, FeatureKind::Joint] {
            let p = random_params(7, kind);
            for prefix in [vec![], vec![TokenId(0)], vec![TokenId(2), TokenId(1)]] {
                let d = p.distribution(&prefix);
                let sum: f64 = d.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12, "sum {sum}");
            }
        }
    }

    #[test]
    fn large_logit_gives_near_point_mass() {
        let mut p = PolicyParams::zeros(4, 2, FeatureKind::Positional, BOS);
        let bias = p.feature_dim() - 1;
        p.weights[[bias, 2]] = 20.0;
        let d = p.distribution(&[]);
        assert!(d[2] > 0.999999);
        let entropy: f64 = d.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum();
        assert!(entropy < 1e-4);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for kind in [FeatureKind::Positional, FeatureKind::Joint] {
            let p = random_params(3, kind);
            let prefix = [TokenId(1), TokenId(2)];
            let token = TokenId(0);
            let (_, grad) = p.logprob_and_grad(&prefix, token);
            let dense = grad.to_dense(p.feature_dim(), p.vocab_size);
            let h = 1e-6;
            for r in 0..p.feature_dim() {
                for c in 0..p.vocab_size {
                    let mut plus = p.clone();
                    plus.weights[[r, c]] += h;
                    let mut minus = p.clone();
                    minus.weights[[r, c]] -= h;
                    let num = (plus.logprob(&prefix, token) - minus.logprob(&prefix, token))
                        / (2.0 * h);
                    let ana = dense[[r, c]];
                    let denom = ana.abs().max(num.abs()).max(1e-6);
                    assert!(
                        (ana - num).abs() / denom < 1e-6,
                        "{kind:?} r={r} c={c}: analytic {ana} vs numeric {num}"
                    );
                }
            }
        }
    }

    #[test]
    fn score_function_identity() {
        // sum_a pi(a|s) * d log pi(a|s) / d theta = 0
        let p = random_params(11, FeatureKind::Positional);
        let prefix = [TokenId(0), TokenId(3)];
        let probs = p.distribution(&prefix);
        let mut acc = PolicyGrad::new();
        for a in 0..p.vocab_size {
            p.accumulate_logprob_grad(&prefix, TokenId(a as u16), probs[a], &mut acc);
        }
        let dense = acc.to_dense(p.feature_dim(), p.vocab_size);
        for &v in dense.iter() {
            assert!(v.abs() < 1e-10, "score identity violated: {v}");
        }
    }

    #[test]
    fn snapshot_is_frozen() {
        let mut p = random_params(5, FeatureKind::Positional);
        let snap = p.snapshot();
        let before = snap.distribution(&[TokenId(1)]);
        p.weights[[0, 0]] += 10.0;
        let after = snap.distribution(&[TokenId(1)]);
        assert_eq!(before, after);
    }

    #[test]
    fn sgd_step_arithmetic() {
        let mut p = random_params(9, FeatureKind::Positional);
        let orig = p.clone();
        // Zero grad leaves params unchanged.
        p.sgd_step(&PolicyGrad::new(), 0.5);
        assert_eq!(p, orig);
        // lr = 1 with grad = theta zeroes the touched rows.
        let mut grad = PolicyGrad::new();
        grad.rows.insert(0, p.weights.row(0).to_vec());
        p.sgd_step(&grad, 1.0);
        for c in 0..p.vocab_size {
            assert_eq!(p.weights[[0, c]], 0.0);
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let p = random_params(13, FeatureKind::Joint);
        p.save_checkpoint(&path).unwrap();
        let q = PolicyParams::load_checkpoint(&path).unwrap();
        assert_eq!(p, q);
    }
}
