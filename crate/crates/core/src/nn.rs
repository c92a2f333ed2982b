//! Transformer blocks: the causal decoder that plays the language model and
//! the small bidirectional encoders that stand in for pre-trained audio and
//! video front ends. All base weights are registered locked (frozen).

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{self, AttentionShapes, LoraConfig};
use crate::tensor::{AttnSegment, Float, KvPast, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub causal: bool,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

fn default_rope_base() -> f64 {
    10_000.0
}

fn default_norm_eps() -> f64 {
    1e-6
}

impl TransformerConfig {
    /// 4 layers, width 128, 4 heads, 4× feed-forward.
    pub fn toy(vocab_size: usize) -> Self {
        TransformerConfig {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            ffn_mult: 4,
            vocab_size,
            max_seq_len: 160,
            causal: true,
            rope_base: default_rope_base(),
            norm_eps: default_norm_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("transformer sizes must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if (self.d_model / self.n_heads) % 2 != 0 {
            return Err(Error::Config("rotary encoding needs an even head width".into()));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("vocab_size and max_seq_len must be positive".into()));
        }
        Ok(())
    }

    pub fn attention_shapes(&self) -> AttentionShapes {
        AttentionShapes::uniform(self.n_layers, self.d_model)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Video,
}

impl Modality {
    /// Encoder output rate in frames per second.
    pub fn frame_rate(self) -> f64 {
        match self {
            Modality::Audio => 50.0,
            Modality::Video => 25.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Video => "video",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub modality: Modality,
    pub d_in: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub max_frames: usize,
}

impl EncoderConfig {
    pub fn toy(modality: Modality, d_in: usize) -> Self {
        EncoderConfig {
            modality,
            d_in,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_mult: 2,
            max_frames: 64,
        }
    }

    pub fn prefix(&self) -> String {
        format!("enc.{}", self.modality.name())
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_model == 0 || self.n_layers == 0 || self.max_frames == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config("encoder width not divisible by heads".into()));
        }
        Ok(())
    }

    pub fn attention_shapes(&self) -> AttentionShapes {
        AttentionShapes::uniform(self.n_layers, self.d_model)
    }
}

/// Encoder features and their temporal resolution.
#[derive(Debug, Clone)]
pub struct EncoderOutput<F: Float> {
    pub features: Tensor<F>,
    pub frame_rate: f64,
}

/// Active (unmerged) adapters for one component.
#[derive(Debug, Clone, Copy)]
pub struct LoraBinding<'a> {
    pub cfg: &'a LoraConfig,
}

/// `x·Wᵀ (+ b) (+ LoRA delta)` for the linear layer `name` (`[out×in]`).
pub fn linear<F: Float>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    name: &str,
    x: Var,
    lora: Option<LoraBinding<'_>>,
    proj: &str,
) -> Result<Var> {
    let w = tape.param(store, &format!("{name}.weight"))?;
    let mut y = tape.matmul_nt(x, w)?;
    let bias = format!("{name}.bias");
    if store.contains(&bias) {
        let b = tape.param(store, &bias)?;
        y = tape.add_bias(y, b)?;
    }
    if let Some(l) = lora {
        if l.cfg.targets_projection(proj) {
            let d = lora::delta(tape, store, name, x, F::from_f64c(l.cfg.scale()))?;
            y = tape.add(y, d)?;
        }
    }
    Ok(y)
}

struct BlockSpec<'a> {
    prefix: &'a str,
    n_heads: usize,
    eps: f64,
    causal: bool,
    rope: Option<(&'a [usize], f64)>,
    lora: Option<LoraBinding<'a>>,
}

/// Pre-norm transformer block. Returns the block output together with the
/// (position-encoded) keys and values it attended with.
fn block_forward<F: Float>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    spec: &BlockSpec<'_>,
    x: Var,
    segs: Vec<AttnSegment<F>>,
) -> Result<(Var, Var, Var)> {
    let p = spec.prefix;
    let eps = F::from_f64c(spec.eps);
    let g1 = tape.param(store, &format!("{p}.attn_norm.g"))?;
    let h = tape.rms_norm(x, g1, eps)?;
    let mut q = linear(tape, store, &format!("{p}.attn.q"), h, spec.lora, "q")?;
    let mut k = linear(tape, store, &format!("{p}.attn.k"), h, spec.lora, "k")?;
    let v = linear(tape, store, &format!("{p}.attn.v"), h, spec.lora, "v")?;
    if let Some((pos, base)) = spec.rope {
        let base = F::from_f64c(base);
        q = tape.rope(q, spec.n_heads, pos, base)?;
        k = tape.rope(k, spec.n_heads, pos, base)?;
    }
    let a = tape.attention(q, k, v, spec.n_heads, segs, spec.causal)?;
    let o = linear(tape, store, &format!("{p}.attn.o"), a, spec.lora, "o")?;
    let x = tape.add(x, o)?;
    let g2 = tape.param(store, &format!("{p}.ffn_norm.g"))?;
    let h = tape.rms_norm(x, g2, eps)?;
    let up = linear(tape, store, &format!("{p}.ffn.up"), h, spec.lora, "up")?;
    let act = tape.silu(up);
    let down = linear(tape, store, &format!("{p}.ffn.down"), act, spec.lora, "down")?;
    Ok((tape.add(x, down)?, k, v))
}

fn init_block<F: Float, R: Rng + ?Sized>(
    store: &mut ParamStore<F>,
    prefix: &str,
    d: usize,
    ffn: usize,
    n_layers: usize,
    rng: &mut R,
) -> Result<()> {
    let std_in = 1.0 / (d as f64).sqrt();
    let std_out = std_in / (2.0 * n_layers as f64).sqrt();
    store.insert_locked(&format!("{prefix}.attn_norm.g"), ones(d))?;
    store.insert_locked(&format!("{prefix}.ffn_norm.g"), ones(d))?;
    for p in ["q", "k", "v"] {
        store.insert_locked(&format!("{prefix}.attn.{p}.weight"), Tensor::randn(&[d, d], std_in, rng))?;
    }
    store.insert_locked(&format!("{prefix}.attn.o.weight"), Tensor::randn(&[d, d], std_out, rng))?;
    store.insert_locked(&format!("{prefix}.ffn.up.weight"), Tensor::randn(&[ffn, d], std_in, rng))?;
    store.insert_locked(
        &format!("{prefix}.ffn.down.weight"),
        Tensor::randn(&[d, ffn], std_out * (d as f64 / ffn as f64).sqrt(), rng),
    )?;
    Ok(())
}

fn ones<F: Float>(n: usize) -> Tensor<F> {
    Tensor::new(&[n], vec![F::one(); n]).expect("shape")
}

/// Projection names adapted inside block `i` of a component.
pub fn block_targets(prefix: &str, n_layers: usize, cfg: &LoraConfig) -> Vec<String> {
    (0..n_layers)
        .flat_map(|i| {
            cfg.targets
                .iter()
                .map(move |t| format!("{prefix}.block{i}.attn.{t}"))
        })
        .collect()
}

// ------------------------------------------------------------------ decoder

/// Registers the frozen decoder weights under `llm.*`.
pub fn init_decoder<F: Float, R: Rng + ?Sized>(store: &mut ParamStore<F>, cfg: &TransformerConfig, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    let d = cfg.d_model;
    store.insert_locked("llm.embed", Tensor::randn(&[cfg.vocab_size, d], 1.0, rng))?;
    for i in 0..cfg.n_layers {
        init_block(store, &format!("llm.block{i}"), d, d * cfg.ffn_mult, cfg.n_layers, rng)?;
    }
    store.insert_locked("llm.norm.g", ones(d))?;
    store.insert_locked("llm.head.weight", Tensor::randn(&[cfg.vocab_size, d], 1.0 / (d as f64).sqrt(), rng))?;
    Ok(())
}

/// Attaches decoder adapters (`lora.llm.block{i}.attn.{q,v}.{A,B}`).
pub fn attach_decoder_lora<F: Float, R: Rng + ?Sized>(
    store: &mut ParamStore<F>,
    cfg: &TransformerConfig,
    lora_cfg: &LoraConfig,
    rng: &mut R,
) -> Result<()> {
    lora_cfg.validate()?;
    for target in block_targets("llm", cfg.n_layers, lora_cfg) {
        lora::attach(store, &target, cfg.d_model, cfg.d_model, lora_cfg.rank, rng)?;
    }
    Ok(())
}

pub fn embed_tokens<F: Float>(tape: &mut Tape<F>, store: &ParamStore<F>, ids: &[usize]) -> Result<Var> {
    let table = tape.param(store, "llm.embed")?;
    tape.embedding(table, ids)
}

/// Per-sequence decoder cache of position-encoded keys and values.
#[derive(Debug, Clone)]
pub struct DecodeCache<F: Float> {
    layers: Vec<(Arc<Vec<F>>, Arc<Vec<F>>)>,
    len: usize,
    version: u64,
}

impl<F: Float> DecodeCache<F> {
    /// Empty cache bound to the current parameter version of `store`.
    pub fn new(cfg: &TransformerConfig, store: &ParamStore<F>) -> Self {
        DecodeCache {
            layers: (0..cfg.n_layers)
                .map(|_| (Arc::new(Vec::new()), Arc::new(Vec::new())))
                .collect(),
            len: 0,
            version: store.version(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn past(&self, layer: usize) -> Option<KvPast<F>> {
        (self.len > 0).then(|| KvPast {
            k: self.layers[layer].0.clone(),
            v: self.layers[layer].1.clone(),
            len: self.len,
        })
    }
}

/// Runs the decoder over packed sequences of lengths `lens` (rows of `x`
/// in order) and returns next-token logits `[N×V]`.
///
/// With `caches`, sequence `i` continues from `caches[i]`: its positions
/// start at the cached length, it attends over the cached keys/values, and
/// the cache is extended in place.
pub fn decoder_forward<F: Float>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    cfg: &TransformerConfig,
    lora: Option<LoraBinding<'_>>,
    x: Var,
    lens: &[usize],
    mut caches: Option<&mut [DecodeCache<F>]>,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 || shape[1] != cfg.d_model {
        return Err(Error::Config(format!(
            "decoder expects embeddings of width {}, got shape {shape:?}",
            cfg.d_model
        )));
    }
    if lens.iter().sum::<usize>() != shape[0] || lens.contains(&0) {
        return Err(Error::Contract(format!(
            "sequence lengths {lens:?} do not tile {} rows",
            shape[0]
        )));
    }
    if let Some(c) = caches.as_deref() {
        if c.len() != lens.len() {
            return Err(Error::Contract("one cache per sequence required".into()));
        }
        if let Some(stale) = c.iter().find(|c| c.version != store.version()) {
            return Err(Error::Contract(format!(
                "decode cache built at parameter version {} used at version {}",
                stale.version,
                store.version()
            )));
        }
    }
    let offsets: Vec<usize> = match caches.as_deref() {
        Some(c) => c.iter().map(|c| c.len).collect(),
        None => vec![0; lens.len()],
    };
    let mut positions = Vec::with_capacity(shape[0]);
    for (&l, &o) in lens.iter().zip(&offsets) {
        if o + l > cfg.max_seq_len {
            return Err(Error::Capacity {
                len: o + l,
                max: cfg.max_seq_len,
            });
        }
        positions.extend(o..o + l);
    }

    let d = cfg.d_model;
    let mut h = x;
    for layer in 0..cfg.n_layers {
        let mut segs = Vec::with_capacity(lens.len());
        let mut start = 0;
        for (i, &l) in lens.iter().enumerate() {
            segs.push(AttnSegment {
                start,
                len: l,
                past: caches.as_deref().and_then(|c| c[i].past(layer)),
            });
            start += l;
        }
        let prefix = format!("llm.block{layer}");
        let spec = BlockSpec {
            prefix: &prefix,
            n_heads: cfg.n_heads,
            eps: cfg.norm_eps,
            causal: cfg.causal,
            rope: Some((&positions, cfg.rope_base)),
            lora,
        };
        let (out, k, v) = block_forward(tape, store, &spec, h, segs)?;
        if let Some(cs) = caches.as_deref_mut() {
            let (kv, vv) = (tape.value(k), tape.value(v));
            let mut start = 0;
            for (c, &l) in cs.iter_mut().zip(lens) {
                let (ck, cv) = &mut c.layers[layer];
                Arc::make_mut(ck).extend_from_slice(&kv[start * d..(start + l) * d]);
                Arc::make_mut(cv).extend_from_slice(&vv[start * d..(start + l) * d]);
                start += l;
            }
        }
        h = out;
    }
    if let Some(cs) = caches {
        for (c, &l) in cs.iter_mut().zip(lens) {
            c.len += l;
        }
    }
    let g = tape.param(store, "llm.norm.g")?;
    let h = tape.rms_norm(h, g, F::from_f64c(cfg.norm_eps))?;
    linear(tape, store, "llm.head", h, None, "head")
}

// ----------------------------------------------------------------- encoders

/// Registers the frozen encoder weights under `enc.<modality>.*`.
pub fn init_encoder<F: Float, R: Rng + ?Sized>(store: &mut ParamStore<F>, cfg: &EncoderConfig, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    let p = cfg.prefix();
    let d = cfg.d_model;
    store.insert_locked(
        &format!("{p}.input.weight"),
        Tensor::randn(&[d, cfg.d_in], 1.0 / (cfg.d_in as f64).sqrt(), rng),
    )?;
    store.insert_locked(&format!("{p}.input.bias"), Tensor::zeros(&[d]))?;
    store.insert_locked(&format!("{p}.pos"), Tensor::randn(&[cfg.max_frames, d], 0.5, rng))?;
    for i in 0..cfg.n_layers {
        init_block(store, &format!("{p}.block{i}"), d, d * cfg.ffn_mult, cfg.n_layers, rng)?;
    }
    store.insert_locked(&format!("{p}.norm.g"), ones(d))?;
    Ok(())
}

/// Attaches adapters to an encoder's attention projections. The encoder's
/// base weights stay locked.
pub fn attach_encoder_lora<F: Float, R: Rng + ?Sized>(
    store: &mut ParamStore<F>,
    cfg: &EncoderConfig,
    lora_cfg: &LoraConfig,
    rng: &mut R,
) -> Result<()> {
    lora_cfg.validate()?;
    for target in block_targets(&cfg.prefix(), cfg.n_layers, lora_cfg) {
        lora::attach(store, &target, cfg.d_model, cfg.d_model, lora_cfg.rank, rng)?;
    }
    Ok(())
}

/// Bidirectional encoder over packed utterances with learned absolute
/// positions. `x` holds raw features `[T×d_in]`.
pub fn encoder_forward<F: Float>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    cfg: &EncoderConfig,
    lora: Option<LoraBinding<'_>>,
    x: Var,
    lens: &[usize],
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 || shape[1] != cfg.d_in {
        return Err(Error::Config(format!(
            "{} encoder expects features of width {}, got {shape:?}",
            cfg.modality.name(),
            cfg.d_in
        )));
    }
    if lens.iter().sum::<usize>() != shape[0] || lens.contains(&0) {
        return Err(Error::Contract(format!("lengths {lens:?} do not tile {} rows", shape[0])));
    }
    let p = cfg.prefix();
    let mut pos_ids = Vec::with_capacity(shape[0]);
    for &l in lens {
        if l > cfg.max_frames {
            return Err(Error::Capacity {
                len: l,
                max: cfg.max_frames,
            });
        }
        pos_ids.extend(0..l);
    }
    let h = linear(tape, store, &format!("{p}.input"), x, None, "input")?;
    let table = tape.param(store, &format!("{p}.pos"))?;
    let pos = tape.embedding(table, &pos_ids)?;
    let mut h = tape.add(h, pos)?;
    for layer in 0..cfg.n_layers {
        let mut segs = Vec::with_capacity(lens.len());
        let mut start = 0;
        for &l in lens {
            segs.push(AttnSegment::new(start, l));
            start += l;
        }
        let prefix = format!("{p}.block{layer}");
        let spec = BlockSpec {
            prefix: &prefix,
            n_heads: cfg.n_heads,
            eps: 1e-6,
            causal: false,
            rope: None,
            lora,
        };
        h = block_forward(tape, store, &spec, h, segs)?.0;
    }
    let g = tape.param(store, &format!("{p}.norm.g"))?;
    tape.rms_norm(h, g, F::from_f64c(1e-6))
}

/// Encodes one utterance outside any training tape.
pub fn frozen_encoder_forward<F: Float>(
    store: &ParamStore<F>,
    cfg: &EncoderConfig,
    lora: Option<LoraBinding<'_>>,
    raw: &Tensor<F>,
) -> Result<EncoderOutput<F>> {
    let mut tape = Tape::no_grad();
    let x = tape.leaf(raw);
    let out = encoder_forward(&mut tape, store, cfg, lora, x, &[raw.rows()])?;
    Ok(EncoderOutput {
        features: tape.tensor(out),
        frame_rate: cfg.modality.frame_rate(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> TransformerConfig {
        TransformerConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            ffn_mult: 2,
            vocab_size: 11,
            max_seq_len: 32,
            causal: true,
            rope_base: 10_000.0,
            norm_eps: 1e-6,
        }
    }

    fn decoder(seed: u64) -> (TransformerConfig, ParamStore<f64>) {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_decoder(&mut store, &cfg, &mut rng).unwrap();
        (cfg, store)
    }

    fn logits(cfg: &TransformerConfig, store: &ParamStore<f64>, x: &Tensor<f64>, lens: &[usize]) -> Vec<f64> {
        let mut t = Tape::no_grad();
        let xv = t.leaf(x);
        let l = decoder_forward(&mut t, store, cfg, None, xv, lens, None).unwrap();
        t.value(l).to_vec()
    }

    #[test]
    fn causal_mask_is_exact() {
        let (cfg, store) = decoder(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::randn(&[9, 16], 1.0, &mut rng);
        let base = logits(&cfg, &store, &x, &[9]);
        for i in 0..8 {
            let mut y = x.clone();
            for v in &mut y.data_mut()[(i + 1) * 16..] {
                *v += 0.5;
            }
            let pert = logits(&cfg, &store, &y, &[9]);
            let v = cfg.vocab_size;
            assert_eq!(&base[..(i + 1) * v], &pert[..(i + 1) * v], "position {i}");
            assert_ne!(&base[(i + 1) * v..], &pert[(i + 1) * v..]);
        }
    }

    #[test]
    fn packed_sequences_do_not_leak() {
        let (cfg, store) = decoder(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::<f64>::randn(&[5, 16], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[7, 16], 1.0, &mut rng);
        let mut ab = a.data().to_vec();
        ab.extend_from_slice(b.data());
        let mut ba = b.data().to_vec();
        ba.extend_from_slice(a.data());
        let la = logits(&cfg, &store, &a, &[5]);
        let lb = logits(&cfg, &store, &b, &[7]);
        let lab = logits(&cfg, &store, &Tensor::new(&[12, 16], ab).unwrap(), &[5, 7]);
        let lba = logits(&cfg, &store, &Tensor::new(&[12, 16], ba).unwrap(), &[7, 5]);
        let v = cfg.vocab_size;
        let close = |x: &[f64], y: &[f64]| x.iter().zip(y).all(|(p, q)| (p - q).abs() < 1e-12);
        assert!(close(&lab[..5 * v], &la) && close(&lab[5 * v..], &lb));
        assert!(close(&lba[..7 * v], &lb) && close(&lba[7 * v..], &la));
        // Duplicating a sample reproduces its logits.
        let mut aa = a.data().to_vec();
        aa.extend_from_slice(a.data());
        let laa = logits(&cfg, &store, &Tensor::new(&[10, 16], aa).unwrap(), &[5, 5]);
        assert!(close(&laa[..5 * v], &laa[5 * v..]));
    }

    #[test]
    fn capacity_and_width_errors() {
        let (cfg, store) = decoder(5);
        let mut t = Tape::no_grad();
        let x = t.leaf(&Tensor::<f64>::zeros(&[33, 16]));
        assert!(matches!(
            decoder_forward(&mut t, &store, &cfg, None, x, &[33], None),
            Err(Error::Capacity { len: 33, max: 32 })
        ));
        let y = t.leaf(&Tensor::<f64>::zeros(&[3, 8]));
        assert!(matches!(
            decoder_forward(&mut t, &store, &cfg, None, y, &[3], None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn cached_decoding_matches_full_forward() {
        let (cfg, store) = decoder(6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::<f64>::randn(&[10, 16], 1.0, &mut rng);
        let full = logits(&cfg, &store, &x, &[10]);
        let mut cache = vec![DecodeCache::new(&cfg, &store)];
        let v = cfg.vocab_size;
        // Prefill 4 rows, then one row at a time.
        let mut t = Tape::no_grad();
        let pre = t.leaf(&Tensor::new(&[4, 16], x.data()[..64].to_vec()).unwrap());
        let l = decoder_forward(&mut t, &store, &cfg, None, pre, &[4], Some(&mut cache)).unwrap();
        for (a, b) in t.value(l).iter().zip(&full[..4 * v]) {
            assert!((a - b).abs() < 1e-10);
        }
        for i in 4..10 {
            let mut t = Tape::no_grad();
            let row = t.leaf(&Tensor::new(&[1, 16], x.row(i).to_vec()).unwrap());
            let l = decoder_forward(&mut t, &store, &cfg, None, row, &[1], Some(&mut cache)).unwrap();
            for (a, b) in t.value(l).iter().zip(&full[i * v..(i + 1) * v]) {
                assert!((a - b).abs() < 1e-10);
            }
        }
        assert_eq!(cache[0].len(), 10);
    }

    #[test]
    fn stale_cache_is_rejected() {
        let (cfg, mut store) = decoder(8);
        let mut cache = vec![DecodeCache::new(&cfg, &store)];
        store.get_mut("llm.norm.g").unwrap().data_mut()[0] = 2.0;
        let mut t = Tape::no_grad();
        let x = t.leaf(&Tensor::<f64>::zeros(&[1, 16]));
        assert!(matches!(
            decoder_forward(&mut t, &store, &cfg, None, x, &[1], Some(&mut cache)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn encoder_weights_are_locked() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::<f32>::new();
        let cfg = EncoderConfig::toy(Modality::Video, 8);
        init_encoder(&mut store, &cfg, &mut rng).unwrap();
        attach_encoder_lora(&mut store, &cfg, &LoraConfig::with_rank(4), &mut rng).unwrap();
        assert!(matches!(
            store.set_trainable("enc.video.block0.attn.q.weight", true),
            Err(Error::Policy(_))
        ));
        let trainable = store.trainable_names();
        assert!(trainable.iter().all(|n| n.starts_with("lora.enc.video.")));
        assert_eq!(trainable.len(), 2 * 2 * 2);
    }

    #[test]
    fn encoder_frame_rates() {
        assert_eq!(Modality::Audio.frame_rate() * 6.0 + Modality::Video.frame_rate() * 6.0, 450.0);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParamStore::<f32>::new();
        let cfg = EncoderConfig::toy(Modality::Audio, 8);
        init_encoder(&mut store, &cfg, &mut rng).unwrap();
        let raw = Tensor::randn(&[12, 8], 1.0, &mut rng);
        let out = frozen_encoder_forward(&store, &cfg, None, &raw).unwrap();
        assert_eq!(out.features.shape(), &[12, 64]);
        assert_eq!(out.frame_rate, 50.0);
        let again = frozen_encoder_forward(&store, &cfg, None, &raw).unwrap();
        assert_eq!(out.features.data(), again.features.data());
        let too_long = Tensor::randn(&[65, 8], 1.0, &mut rng);
        assert!(matches!(
            frozen_encoder_forward(&store, &cfg, None, &too_long),
            Err(Error::Capacity { .. })
        ));
    }
}
