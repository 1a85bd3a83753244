//! Multi-head scaled dot-product attention and post-norm transformer sublayers.

use crate::embedding::LN_EPS;
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, RngState, Var};

/// Score given to blocked query–key pairs before the softmax.
pub const MASKED_SCORE: f64 = -1e9;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut RngState) -> Self {
        Self {
            w: store.normal(format!("{name}.w"), &[d_in, d_out], (d_in as f64).powf(-0.5), rng),
            b: store.zeros(format!("{name}.b"), &[d_out]),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.ones(format!("{name}.gain"), &[d]),
            bias: store.zeros(format!("{name}.bias"), &[d]),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

/// Which key positions each query may attend to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AttnMask {
    /// Per key, shared by all queries; true = visible.
    Keys(Vec<bool>),
    /// Query `t` sees keys `0..=t`.
    Causal,
}

impl AttnMask {
    pub fn all(n: usize) -> Self {
        AttnMask::Keys(vec![true; n])
    }

    /// Row-major `lq × lk` fill pattern (true = blocked), or `None` when nothing is blocked.
    fn blocked(&self, lq: usize, lk: usize) -> Result<Option<Vec<bool>>> {
        let out: Vec<bool> = match self {
            AttnMask::Keys(keys) => {
                if keys.len() != lk {
                    return Err(Error::dim("attention mask", &[keys.len()], &[lk]));
                }
                if keys.iter().all(|&k| k) {
                    return Ok(None);
                }
                (0..lq).flat_map(|_| keys.iter().map(|&k| !k)).collect()
            }
            AttnMask::Causal => (0..lq).flat_map(|q| (0..lk).map(move |k| k > q)).collect(),
        };
        Ok(Some(out))
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

/// Attention output and the per-head weight matrices.
pub struct AttentionOutput {
    pub out: Var,
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut RngState) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::input(format!("model width {d} is not divisible by {heads} heads")));
        }
        Ok(Self {
            heads,
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, rng),
        })
    }

    /// Queries from `x_q`, keys and values from `x_kv`; per head
    /// `softmax(Q Kᵀ / √d_k) V`, heads concatenated and projected.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x_q: Var, x_kv: Var, mask: &AttnMask) -> Result<AttentionOutput> {
        let (lq, d) = g.value(x_q).dims2()?;
        let (lk, dk_in) = g.value(x_kv).dims2()?;
        if d != dk_in {
            return Err(Error::dim("attention", g.shape(x_q), g.shape(x_kv)));
        }
        let blocked = mask.blocked(lq, lk)?;
        let q = self.q.forward(g, store, x_q)?;
        let k = self.k.forward(g, store, x_kv)?;
        let v = self.v.forward(g, store, x_kv)?;
        let dk = d / self.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice(q, 1, h * dk, (h + 1) * dk)?;
            let kh = g.slice(k, 1, h * dk, (h + 1) * dk)?;
            let vh = g.slice(v, 1, h * dk, (h + 1) * dk)?;
            let kt = g.transpose(kh)?;
            let s = g.matmul(qh, kt)?;
            let mut s = g.scale(s, scale);
            if let Some(b) = &blocked {
                s = g.masked_fill(s, b, MASKED_SCORE)?;
            }
            let w = g.softmax(s, 1)?;
            outs.push(g.matmul(w, vh)?);
            weights.push(w);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
        let out = self.o.forward(g, store, cat)?;
        Ok(AttentionOutput { out, weights })
    }
}

/// `LN(x_q + dropout(MHA(x_q, x_kv)))`.
#[derive(Clone, Debug)]
pub struct AttentionSublayer {
    pub attn: MultiHeadAttention,
    pub ln: LayerNorm,
}

impl AttentionSublayer {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut RngState) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, heads, rng)?,
            ln: LayerNorm::new(store, &format!("{name}.ln1"), d),
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x_q: Var, x_kv: Var, mask: &AttnMask) -> Result<Var> {
        let a = self.attn.forward(g, store, x_q, x_kv, mask)?.out;
        let a = g.dropout(a);
        let r = g.add(x_q, a)?;
        self.ln.forward(g, store, r)
    }
}

/// `LN(x + dropout(W₂ gelu(W₁ x)))` with a 4× inner width.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
    pub ln: LayerNorm,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut RngState) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.ffn1"), d, 4 * d, rng),
            fc2: Linear::new(store, &format!("{name}.ffn2"), 4 * d, d, rng),
            ln: LayerNorm::new(store, &format!("{name}.ln2"), d),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, store, h)?;
        let h = g.dropout(h);
        let r = g.add(x, h)?;
        self.ln.forward(g, store, r)
    }
}

/// Attention sublayer followed by a feed-forward sublayer. Self-attention
/// when queries and keys share a source, co-attention otherwise.
#[derive(Clone, Debug)]
pub struct Block {
    pub attn: AttentionSublayer,
    pub ffn: FeedForward,
}

impl Block {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut RngState) -> Result<Self> {
        Ok(Self {
            attn: AttentionSublayer::new(store, name, d, heads, rng)?,
            ffn: FeedForward::new(store, name, d, rng),
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x_q: Var, x_kv: Var, mask: &AttnMask) -> Result<Var> {
        let h = self.attn.forward(g, store, x_q, x_kv, mask)?;
        self.ffn.forward(g, store, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gradcheck, Tensor};

    fn mha(d: usize, heads: usize, seed: u64) -> (ParamStore, MultiHeadAttention) {
        let mut store = ParamStore::new();
        let m = MultiHeadAttention::new(&mut store, "a", d, heads, &mut RngState::new(seed)).unwrap();
        (store, m)
    }

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        gradcheck::random_tensor(shape, &mut RngState::new(seed))
    }

    #[test]
    fn single_token_gets_all_weight() {
        let (store, m) = mha(4, 2, 0);
        let mut g = Graph::new();
        let x = g.input(rand(&[1, 4], 1));
        let o = m.forward(&mut g, &store, x, x, &AttnMask::all(1)).unwrap();
        for w in o.weights {
            assert_eq!(g.value(w).data(), &[1.0]);
        }
    }

    #[test]
    fn masked_keys_get_no_weight_and_rows_sum_to_one() {
        let (store, m) = mha(8, 2, 2);
        let mut g = Graph::new();
        let x = g.input(rand(&[5, 8], 3));
        let mask = AttnMask::Keys(vec![false, false, true, false, false]);
        let o = m.forward(&mut g, &store, x, x, &mask).unwrap();
        for w in &o.weights {
            let t = g.value(*w);
            for r in 0..5 {
                assert_eq!(t.row(r)[2], 1.0);
                for k in [0, 1, 3, 4] {
                    assert!(t.row(r)[k] <= 1e-30);
                }
            }
        }
        let partial = AttnMask::Keys(vec![true, true, false, true, false]);
        let o = m.forward(&mut g, &store, x, x, &partial).unwrap();
        for w in &o.weights {
            for r in 0..5 {
                let row = g.value(*w).row(r);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(row[2] <= 1e-30 && row[4] <= 1e-30);
            }
        }
    }

    #[test]
    fn all_masked_keys_fall_back_to_uniform() {
        let (store, m) = mha(4, 1, 4);
        let mut g = Graph::new();
        let a = g.input(rand(&[2, 4], 5));
        let b = g.input(rand(&[3, 4], 6));
        let o = m.forward(&mut g, &store, a, b, &AttnMask::Keys(vec![false; 3])).unwrap();
        for &v in g.value(o.weights[0]).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn causal_mask_blocks_the_future() {
        let (store, m) = mha(4, 2, 7);
        let mut g = Graph::new();
        let x = g.input(rand(&[4, 4], 8));
        let o = m.forward(&mut g, &store, x, x, &AttnMask::Causal).unwrap();
        for w in o.weights {
            let t = g.value(w);
            for q in 0..4 {
                for k in q + 1..4 {
                    assert_eq!(t.row(q)[k], 0.0);
                }
            }
        }
    }

    #[test]
    fn co_attention_with_single_key_copies_its_value() {
        let (store, m) = mha(4, 2, 9);
        let mut g = Graph::new();
        let a = g.input(rand(&[3, 4], 10));
        let b = g.input(rand(&[1, 4], 11));
        let o = m.forward(&mut g, &store, a, b, &AttnMask::all(1)).unwrap();
        let t = g.value(o.out);
        assert_eq!(t.shape(), &[3, 4]);
        assert_eq!(t.row(0), t.row(1));
        assert_eq!(t.row(1), t.row(2));
    }

    #[test]
    fn self_attention_is_permutation_equivariant() {
        let mut store = ParamStore::new();
        let block = Block::new(&mut store, "b", 8, 2, &mut RngState::new(12)).unwrap();
        let x = rand(&[5, 8], 13);
        let mask = vec![true, true, false, true, true];
        let perm = [3, 0, 4, 1, 2];
        let px: Vec<&[f64]> = perm.iter().map(|&i| x.row(i)).collect();
        let px = Tensor::from_rows(&px);
        let pmask: Vec<bool> = perm.iter().map(|&i| mask[i]).collect();
        let mut g = Graph::new();
        let a = g.input(x);
        let ya = block.forward(&mut g, &store, a, a, &AttnMask::Keys(mask)).unwrap();
        let b = g.input(px);
        let yb = block.forward(&mut g, &store, b, b, &AttnMask::Keys(pmask)).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            for (u, v) in g.value(ya).row(i).iter().zip(g.value(yb).row(j)) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn head_count_must_divide_width() {
        let mut store = ParamStore::new();
        assert!(MultiHeadAttention::new(&mut store, "a", 6, 4, &mut RngState::new(0)).is_err());
    }

    #[test]
    fn co_attention_block_gradients() {
        let mut store = ParamStore::new();
        let block = Block::new(&mut store, "co", 8, 2, &mut RngState::new(14)).unwrap();
        let a = rand(&[3, 8], 15);
        let b = rand(&[4, 8], 16);
        let w = rand(&[3, 8], 17);
        let check = gradcheck::check_params(&store, None, |s, g| {
            let xa = g.input(a.clone());
            let xb = g.input(b.clone());
            let y = block.forward(g, s, xa, xb, &AttnMask::Keys(vec![true, false, true, true]))?;
            let wv = g.input(w.clone());
            let y = g.mul(y, wv)?;
            Ok(g.sum(y))
        });
        assert!(check.max_rel_err <= 1e-6, "{check:?}");
        let input_err = gradcheck::check_inputs(&[a.clone(), b.clone()], |g, v| {
            let y = block.forward(g, &store, v[0], v[1], &AttnMask::all(4))?;
            let wv = g.input(w.clone());
            let y = g.mul(y, wv)?;
            Ok(g.sum(y))
        });
        assert!(input_err <= 1e-6, "{input_err}");
    }
}
