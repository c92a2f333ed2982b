//! Low-rank adapters: `y = W·x + (α/r)·B·(A·x)` on selected projections.
//!
//! Inside a model, adapter matrices live in the [`ParamStore`] as
//! `lora.<target>.A` (`[r×d_in]`) and `lora.<target>.B` (`[d_out×r]`), where
//! `<target>` is the full name of the adapted linear layer. [`LoraAdapter`]
//! is the standalone form used for merging and checks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{gemm, Float, MatRef, ParamStore, Tape, Tensor, Var};

/// Standard deviation of the Gaussian used for `A`; `B` starts at zero.
pub const A_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Short projection names inside each attention block, e.g. `q`, `v`.
    pub targets: Vec<String>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig::with_rank(64)
    }
}

impl LoraConfig {
    /// Query/value targets with `alpha = 2r`.
    pub fn with_rank(rank: usize) -> Self {
        LoraConfig {
            rank,
            alpha: 2.0 * rank as f64,
            targets: vec!["q".into(), "v".into()],
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn targets_projection(&self, proj: &str) -> bool {
        self.targets.iter().any(|t| t == proj)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("LoRA rank must be positive".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config("LoRA alpha must be positive".into()));
        }
        Ok(())
    }
}

/// Input/output widths of the four attention projections, repeated over
/// `n_blocks` blocks. Used for parameter accounting at any scale.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionShapes {
    pub n_blocks: usize,
    /// `(name, d_in, d_out)` for each projection of one block.
    pub projections: Vec<(String, usize, usize)>,
}

impl AttentionShapes {
    /// Square q/k/v/o projections of width `d`.
    pub fn uniform(n_blocks: usize, d: usize) -> Self {
        AttentionShapes {
            n_blocks,
            projections: ["q", "k", "v", "o"]
                .iter()
                .map(|p| (p.to_string(), d, d))
                .collect(),
        }
    }

    /// 24-block, width-1024 encoder (AV-HuBERT Large layout).
    pub fn av_hubert_large() -> Self {
        Self::uniform(24, 1024)
    }

    /// 32-block decoder with 4096-wide queries and 8 grouped key/value
    /// heads of width 128 (Llama 3.1 8B layout).
    pub fn llama31_8b() -> Self {
        AttentionShapes {
            n_blocks: 32,
            projections: vec![
                ("q".into(), 4096, 4096),
                ("k".into(), 4096, 1024),
                ("v".into(), 4096, 1024),
                ("o".into(), 4096, 4096),
            ],
        }
    }
}

/// `Σ r·(d_in + d_out)` over every adapted projection.
pub fn count_lora_params(shapes: &AttentionShapes, cfg: &LoraConfig) -> Result<usize> {
    cfg.validate()?;
    let mut per_block = 0;
    for target in &cfg.targets {
        let (_, d_in, d_out) = shapes
            .projections
            .iter()
            .find(|(n, _, _)| n == target)
            .ok_or_else(|| Error::Config(format!("LoRA target {target} is not a projection of this model")))?;
        if cfg.rank > (*d_in).min(*d_out) {
            return Err(Error::Config(format!(
                "LoRA rank {} exceeds min({d_in}, {d_out}) for target {target}",
                cfg.rank
            )));
        }
        per_block += cfg.rank * (d_in + d_out);
    }
    Ok(shapes.n_blocks * per_block)
}

pub fn a_name(target: &str) -> String {
    format!("lora.{target}.A")
}

pub fn b_name(target: &str) -> String {
    format!("lora.{target}.B")
}

/// Registers zero-delta adapter parameters for `target` (a linear layer of
/// shape `[d_out×d_in]`).
pub fn attach<F: Float, R: Rng + ?Sized>(
    store: &mut ParamStore<F>,
    target: &str,
    d_in: usize,
    d_out: usize,
    rank: usize,
    rng: &mut R,
) -> Result<()> {
    if rank > d_in.min(d_out) {
        return Err(Error::Config(format!(
            "LoRA rank {rank} exceeds min({d_in}, {d_out}) for {target}"
        )));
    }
    store.insert(&a_name(target), Tensor::randn(&[rank, d_in], A_INIT_STD, rng), true)?;
    store.insert(&b_name(target), Tensor::zeros(&[d_out, rank]), true)?;
    Ok(())
}

/// Records `scale · (x·Aᵀ)·Bᵀ` for the adapter of `target`.
pub(crate) fn delta<F: Float>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    target: &str,
    x: Var,
    scale: F,
) -> Result<Var> {
    let a = tape.param(store, &a_name(target))?;
    let b = tape.param(store, &b_name(target))?;
    let xa = tape.matmul_nt(x, a)?;
    let xab = tape.matmul_nt(xa, b)?;
    Ok(tape.scale(xab, scale))
}

/// Adds (`sign = 1`) or removes (`sign = -1`) `scale·B·A` from the base
/// weight stored under `<target>.weight`.
pub(crate) fn fold_into_base<F: Float>(store: &mut ParamStore<F>, target: &str, scale: F, sign: F) -> Result<()> {
    let a = store.get(&a_name(target))?.clone();
    let b = store.get(&b_name(target))?.clone();
    let w = store.get_mut(&format!("{target}.weight"))?;
    fold(w, &a, &b, scale * sign)
}

fn fold<F: Float>(w: &mut Tensor<F>, a: &Tensor<F>, b: &Tensor<F>, coef: F) -> Result<()> {
    let (r, d_in) = (a.shape()[0], a.shape()[1]);
    let d_out = b.shape()[0];
    if w.shape() != [d_out, d_in] || b.shape() != [d_out, r] {
        return Err(shape_err("lora fold", w.shape(), &[d_out, d_in]));
    }
    gemm(
        coef,
        MatRef::dense(b.data(), d_out, r),
        MatRef::dense(a.data(), r, d_in),
        F::one(),
        w.data_mut(),
        d_in,
    );
    Ok(())
}

/// A single adapter bound to nothing; the base weight is passed explicitly.
#[derive(Debug, Clone)]
pub struct LoraAdapter<F: Float> {
    pub a: Tensor<F>,
    pub b: Tensor<F>,
    pub alpha: f64,
    pub merged: bool,
}

impl<F: Float> LoraAdapter<F> {
    pub fn new<R: Rng + ?Sized>(d_in: usize, d_out: usize, rank: usize, alpha: f64, rng: &mut R) -> Result<Self> {
        if rank == 0 || rank > d_in.min(d_out) {
            return Err(Error::Config(format!(
                "LoRA rank {rank} must be in 1..=min({d_in}, {d_out})"
            )));
        }
        Ok(LoraAdapter {
            a: Tensor::randn(&[rank, d_in], A_INIT_STD, rng).with_grad(true),
            b: Tensor::zeros(&[d_out, rank]).with_grad(true),
            alpha,
            merged: false,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn scale(&self) -> F {
        F::from_f64c(self.alpha / self.rank() as f64)
    }

    pub fn param_count(&self) -> usize {
        self.a.numel() + self.b.numel()
    }

    /// `x·Wᵀ + (α/r)·x·Aᵀ·Bᵀ` for rows of `x`. The base weight is recorded
    /// as a frozen leaf, so only `A` and `B` (and `x`) receive gradients.
    pub fn forward(&self, tape: &mut Tape<F>, x: Var, w: &Tensor<F>) -> Result<(Var, Var, Var)> {
        if self.merged {
            return Err(Error::State("adapter is merged; use the merged weight directly".into()));
        }
        let wv = tape.leaf(&w.clone().with_grad(false));
        let av = tape.leaf(&self.a);
        let bv = tape.leaf(&self.b);
        let base = tape.matmul_nt(x, wv)?;
        let xa = tape.matmul_nt(x, av)?;
        let xab = tape.matmul_nt(xa, bv)?;
        let d = tape.scale(xab, self.scale());
        Ok((tape.add(base, d)?, av, bv))
    }

    pub fn merge(&mut self, w: &mut Tensor<F>) -> Result<()> {
        if self.merged {
            return Err(Error::State("adapter already merged".into()));
        }
        fold(w, &self.a, &self.b, self.scale())?;
        self.merged = true;
        Ok(())
    }

    pub fn unmerge(&mut self, w: &mut Tensor<F>) -> Result<()> {
        if !self.merged {
            return Err(Error::State("adapter is not merged".into()));
        }
        fold(w, &self.a, &self.b, -self.scale())?;
        self.merged = false;
        Ok(())
    }
}
