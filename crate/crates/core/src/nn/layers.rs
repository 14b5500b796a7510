//! Transformer building blocks: linear maps, multi-head attention, the
//! post-norm self-attention encoder layer and the two-stream co-attention layer.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Linear {
    weight: String,
    bias: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(prefix: &str, d_in: usize, d_out: usize) -> Self {
        Self {
            weight: format!("{prefix}.weight"),
            bias: format!("{prefix}.bias"),
            d_in,
            d_out,
        }
    }

    pub fn init(&self, store: &mut ParamStore, std: f64, rng: &mut impl Rng) -> Result<()> {
        store.add_normal(&self.weight, &[self.d_in, self.d_out], std, rng)?;
        store.add_zeros(&self.bias, &[self.d_out])?;
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(&self.weight)?;
        let b = g.param(&self.bias)?;
        g.linear(x, w, b)
    }

    pub fn weight_name(&self) -> &str {
        &self.weight
    }

    pub fn bias_name(&self) -> &str {
        &self.bias
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gain: String,
    bias: String,
    width: usize,
}

impl LayerNorm {
    pub fn new(prefix: &str, width: usize) -> Self {
        Self {
            gain: format!("{prefix}.gain"),
            bias: format!("{prefix}.bias"),
            width,
        }
    }

    pub fn init(&self, store: &mut ParamStore) -> Result<()> {
        store.add_ones(&self.gain, &[self.width])?;
        store.add_zeros(&self.bias, &[self.width])?;
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gain = g.param(&self.gain)?;
        let bias = g.param(&self.bias)?;
        g.layer_norm(x, gain, bias)
    }
}

/// Output of [`multi_head_attention`]: the concatenated per-head context and
/// each head's attention matrix (`queries x keys`).
pub struct Attended {
    pub context: Var,
    pub weights: Vec<Var>,
}

/// Scaled dot-product attention over `heads` equal column slices of the
/// projected queries, keys and values.
pub fn multi_head_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    key_mask: Option<&[bool]>,
) -> Result<Attended> {
    let width = g.value(q).cols();
    if g.value(k).cols() != width || g.value(v).cols() != width {
        return Err(Error::shape("attention", "query/key/value widths differ"));
    }
    if g.value(k).rows() != g.value(v).rows() {
        return Err(Error::shape("attention", "key/value lengths differ"));
    }
    if heads == 0 || !width.is_multiple_of(heads) {
        return Err(Error::shape("attention", format!("{width} not divisible into {heads} heads")));
    }
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut contexts = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = if heads == 1 { q } else { g.slice_cols(q, lo, hi)? };
        let kh = if heads == 1 { k } else { g.slice_cols(k, lo, hi)? };
        let vh = if heads == 1 { v } else { g.slice_cols(v, lo, hi)? };
        let scores = g.matmul_bt(qh, kh)?;
        let scores = g.scale(scores, scale);
        let p = g.softmax(scores, key_mask)?;
        contexts.push(g.matmul(p, vh)?);
        weights.push(p);
    }
    let context = if heads == 1 {
        contexts[0]
    } else {
        g.concat_cols(&contexts)?
    };
    Ok(Attended { context, weights })
}

#[derive(Debug, Clone)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new(prefix: &str, width: usize, inner: usize) -> Self {
        Self {
            up: Linear::new(&format!("{prefix}.ffn_in"), width, inner),
            down: Linear::new(&format!("{prefix}.ffn_out"), inner, width),
        }
    }

    fn init(&self, store: &mut ParamStore, std: f64, rng: &mut impl Rng) -> Result<()> {
        self.up.init(store, std, rng)?;
        self.down.init(store, std, rng)
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

/// Post-norm self-attention block:
/// `x1 = LN(x + MHA(x)); out = LN(x1 + FFN(x1))`.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln_attn: LayerNorm,
    ffn: FeedForward,
    ln_ffn: LayerNorm,
    pub width: usize,
    pub heads: usize,
}

impl TransformerLayer {
    pub fn new(prefix: &str, width: usize, heads: usize, ffn_multiplier: usize) -> Self {
        Self {
            q: Linear::new(&format!("{prefix}.attn.q"), width, width),
            k: Linear::new(&format!("{prefix}.attn.k"), width, width),
            v: Linear::new(&format!("{prefix}.attn.v"), width, width),
            o: Linear::new(&format!("{prefix}.attn.o"), width, width),
            ln_attn: LayerNorm::new(&format!("{prefix}.ln_attn"), width),
            ffn: FeedForward::new(prefix, width, width * ffn_multiplier),
            ln_ffn: LayerNorm::new(&format!("{prefix}.ln_ffn"), width),
            width,
            heads,
        }
    }

    pub fn init(&self, store: &mut ParamStore, std: f64, rng: &mut impl Rng) -> Result<()> {
        for lin in [&self.q, &self.k, &self.v, &self.o] {
            lin.init(store, std, rng)?;
        }
        self.ln_attn.init(store)?;
        self.ffn.init(store, std, rng)?;
        self.ln_ffn.init(store)
    }

    /// `key_mask[j] == false` marks padding that no position may attend to.
    pub fn forward(&self, g: &mut Graph, x: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        Ok(self.forward_with_attention(g, x, key_mask)?.0)
    }

    pub fn forward_with_attention(
        &self,
        g: &mut Graph,
        x: Var,
        key_mask: Option<&[bool]>,
    ) -> Result<(Var, Vec<Var>)> {
        if g.value(x).cols() != self.width {
            return Err(Error::shape(
                "transformer_layer",
                format!("input width {} vs layer width {}", g.value(x).cols(), self.width),
            ));
        }
        if let Some(m) = key_mask {
            if m.len() != g.value(x).rows() {
                return Err(Error::shape("transformer_layer", "mask length"));
            }
        }
        let q = self.q.forward(g, x)?;
        let k = self.k.forward(g, x)?;
        let v = self.v.forward(g, x)?;
        let att = multi_head_attention(g, q, k, v, self.heads, key_mask)?;
        let proj = self.o.forward(g, att.context)?;
        let res = g.add(x, proj)?;
        let x1 = self.ln_attn.forward(g, res)?;
        let f = self.ffn.forward(g, x1)?;
        let res2 = g.add(x1, f)?;
        let out = self.ln_ffn.forward(g, res2)?;
        Ok((out, att.weights))
    }
}

/// One stream of a co-attention layer. Its queries read the other stream;
/// its keys/values (and its null slot) are read by the other stream.
#[derive(Debug, Clone)]
struct CoStream {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    null: String,
    ln_attn: LayerNorm,
    ffn: FeedForward,
    ln_ffn: LayerNorm,
    width: usize,
}

impl CoStream {
    fn new(prefix: &str, width: usize, attn_width: usize, ffn_multiplier: usize) -> Self {
        Self {
            q: Linear::new(&format!("{prefix}.q"), width, attn_width),
            k: Linear::new(&format!("{prefix}.k"), width, attn_width),
            v: Linear::new(&format!("{prefix}.v"), width, attn_width),
            o: Linear::new(&format!("{prefix}.o"), attn_width, width),
            null: format!("{prefix}.null"),
            ln_attn: LayerNorm::new(&format!("{prefix}.ln_attn"), width),
            ffn: FeedForward::new(prefix, width, width * ffn_multiplier),
            ln_ffn: LayerNorm::new(&format!("{prefix}.ln_ffn"), width),
            width,
        }
    }

    fn init(&self, store: &mut ParamStore, std: f64, rng: &mut impl Rng) -> Result<()> {
        for lin in [&self.q, &self.k, &self.v, &self.o] {
            lin.init(store, std, rng)?;
        }
        store.add_normal(&self.null, &[1, self.width], std, rng)?;
        self.ln_attn.init(store)?;
        self.ffn.init(store, std, rng)?;
        self.ln_ffn.init(store)
    }

    /// Keys and values this stream exposes. A stream with no valid position
    /// exposes its learned null slot instead.
    fn keys_values<'m>(&self, g: &mut Graph, x: Var, mask: &'m [bool]) -> Result<(Var, Var, Option<&'m [bool]>)> {
        if mask.iter().any(|&m| m) {
            Ok((self.k.forward(g, x)?, self.v.forward(g, x)?, Some(mask)))
        } else {
            let null = g.param(&self.null)?;
            Ok((self.k.forward(g, null)?, self.v.forward(g, null)?, None))
        }
    }

    fn finish(&self, g: &mut Graph, x: Var, context: Var) -> Result<Var> {
        let proj = self.o.forward(g, context)?;
        let res = g.add(x, proj)?;
        let x1 = self.ln_attn.forward(g, res)?;
        let f = self.ffn.forward(g, x1)?;
        let res2 = g.add(x1, f)?;
        self.ln_ffn.forward(g, res2)
    }
}

/// Two-stream co-attention: each stream's queries attend over the other
/// stream's keys and values in a shared attention space of width
/// `attn_width` (split into `heads`), followed by a per-stream feed-forward.
#[derive(Debug, Clone)]
pub struct CoAttentionLayer {
    text: CoStream,
    image: CoStream,
    pub heads: usize,
}

/// Result of one co-attention layer, with the cross-attention matrices.
pub struct CoAttended {
    pub text: Var,
    pub image: Var,
    /// Text queries over image keys, one matrix per head.
    pub text_weights: Vec<Var>,
    /// Image queries over text keys, one matrix per head.
    pub image_weights: Vec<Var>,
}

impl CoAttentionLayer {
    pub fn new(
        prefix: &str,
        text_width: usize,
        image_width: usize,
        attn_width: usize,
        heads: usize,
        ffn_multiplier: usize,
    ) -> Self {
        Self {
            text: CoStream::new(&format!("{prefix}.text"), text_width, attn_width, ffn_multiplier),
            image: CoStream::new(&format!("{prefix}.image"), image_width, attn_width, ffn_multiplier),
            heads,
        }
    }

    pub fn init(&self, store: &mut ParamStore, std: f64, rng: &mut impl Rng) -> Result<()> {
        self.text.init(store, std, rng)?;
        self.image.init(store, std, rng)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        text: Var,
        text_mask: &[bool],
        image: Var,
        image_mask: &[bool],
    ) -> Result<CoAttended> {
        if g.value(text).cols() != self.text.width || g.value(image).cols() != self.image.width {
            return Err(Error::shape("co_attention_layer", "stream width"));
        }
        if g.value(text).rows() != text_mask.len() || g.value(image).rows() != image_mask.len() {
            return Err(Error::shape("co_attention_layer", "mask length"));
        }
        let (tk, tv, tmask) = self.text.keys_values(g, text, text_mask)?;
        let (ik, iv, imask) = self.image.keys_values(g, image, image_mask)?;

        let tq = self.text.q.forward(g, text)?;
        let t_att = multi_head_attention(g, tq, ik, iv, self.heads, imask)?;
        let iq = self.image.q.forward(g, image)?;
        let i_att = multi_head_attention(g, iq, tk, tv, self.heads, tmask)?;

        let text_out = self.text.finish(g, text, t_att.context)?;
        let image_out = self.image.finish(g, image, i_att.context)?;
        Ok(CoAttended {
            text: text_out,
            image: image_out,
            text_weights: t_att.weights,
            image_weights: i_att.weights,
        })
    }
}
