//! Modality-specific connector: stack `K` consecutive encoder frames along
//! the feature axis, then `Linear → ReLU → Linear` into the decoder width.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Modality;
use crate::tensor::{Float, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectorConfig {
    /// Compression rate: encoder frames per decoder token.
    pub k: usize,
    pub d_enc: usize,
    pub d_hidden: usize,
    pub d_model: usize,
}

impl ProjectorConfig {
    /// Hidden width defaults to the decoder width.
    pub fn new(k: usize, d_enc: usize, d_model: usize) -> Self {
        ProjectorConfig {
            k,
            d_enc,
            d_hidden: d_model,
            d_model,
        }
    }

    pub fn input_width(&self) -> usize {
        self.k * self.d_enc
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Param("compression rate K must be at least 1".into()));
        }
        if self.d_enc == 0 || self.d_hidden == 0 || self.d_model == 0 {
            return Err(Error::Config("projector widths must be positive".into()));
        }
        Ok(())
    }

    /// `(K·d_enc)·d_hidden + d_hidden + d_hidden·d_model + d_model`.
    pub fn param_count(&self) -> usize {
        self.input_width() * self.d_hidden + self.d_hidden + self.d_hidden * self.d_model + self.d_model
    }
}

pub fn prefix(modality: Modality) -> String {
    format!("proj.{}", modality.name())
}

/// Number of tokens after compressing `frames` frames by `k`.
pub fn compressed_len(frames: usize, k: usize) -> usize {
    frames.div_ceil(k)
}

/// `⌈duration · frame_rate / K⌉`.
pub fn token_budget(duration_s: f64, frame_rate: f64, k: usize) -> Result<usize> {
    if !(duration_s > 0.0) || !(frame_rate > 0.0) || k == 0 {
        return Err(Error::Param(format!(
            "token budget needs positive inputs, got duration {duration_s}, rate {frame_rate}, K {k}"
        )));
    }
    let frames = (duration_s * frame_rate).round() as usize;
    Ok(compressed_len(frames, k))
}

/// `[T×d] → [⌈T/K⌉×K·d]`, zero-padding the final group.
pub fn stack_compress<F: Float>(tape: &mut Tape<F>, features: Var, k: usize) -> Result<Var> {
    tape.stack_compress(features, k)
}

/// Stack-compress a standalone tensor.
pub fn stack_compress_tensor<F: Float>(features: &Tensor<F>, k: usize) -> Result<Tensor<F>> {
    let mut t = Tape::no_grad();
    let x = t.leaf(features);
    let y = t.stack_compress(x, k)?;
    Ok(t.tensor(y))
}

/// Registers trainable projector weights under `proj.<modality>.*`.
pub fn init_projector<F: Float, R: Rng + ?Sized>(
    store: &mut ParamStore<F>,
    modality: Modality,
    cfg: &ProjectorConfig,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    let p = prefix(modality);
    let d_in = cfg.input_width();
    store.insert(
        &format!("{p}.fc1.weight"),
        Tensor::randn(&[cfg.d_hidden, d_in], 1.0 / (d_in as f64).sqrt(), rng),
        true,
    )?;
    store.insert(&format!("{p}.fc1.bias"), Tensor::zeros(&[cfg.d_hidden]), true)?;
    store.insert(
        &format!("{p}.fc2.weight"),
        Tensor::randn(&[cfg.d_model, cfg.d_hidden], 1.0 / (cfg.d_hidden as f64).sqrt(), rng),
        true,
    )?;
    store.insert(&format!("{p}.fc2.bias"), Tensor::zeros(&[cfg.d_model]), true)?;
    Ok(())
}

/// `Linear₂(ReLU(Linear₁(stacked)))`, applied row by row.
pub fn project<F: Float>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    modality: Modality,
    cfg: &ProjectorConfig,
    stacked: Var,
) -> Result<Var> {
    let width = *tape.shape(stacked).last().unwrap_or(&0);
    if width != cfg.input_width() {
        return Err(Error::Config(format!(
            "{} projector expects width K·d_enc = {}, got {width}",
            modality.name(),
            cfg.input_width()
        )));
    }
    let p = prefix(modality);
    let h = crate::nn::linear(tape, store, &format!("{p}.fc1"), stacked, None, "fc1")?;
    let h = tape.relu(h);
    crate::nn::linear(tape, store, &format!("{p}.fc2"), h, None, "fc2")
}

/// Compress then project: encoder features `[T×d_enc]` to tokens `[⌈T/K⌉×d_model]`.
pub fn tokens<F: Float>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    modality: Modality,
    cfg: &ProjectorConfig,
    features: Var,
) -> Result<Var> {
    let stacked = stack_compress(tape, features, cfg.k)?;
    project(tape, store, modality, cfg, stacked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn compression_examples() {
        let x = Tensor::<f64>::from_f64(&[5, 1], &[1., 2., 3., 4., 5.]).unwrap();
        let y = stack_compress_tensor(&x, 2).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[1., 2., 3., 4., 5., 0.]);
        let id = stack_compress_tensor(&x, 1).unwrap();
        assert_eq!(id.data(), x.data());
        assert_eq!(compressed_len(584, 5), 117);
        assert!(matches!(stack_compress_tensor(&x, 0), Err(Error::Param(_))));
    }

    #[test]
    fn length_law_exhaustive() {
        for t in 1..=200 {
            for k in 1..=8 {
                let x = Tensor::<f32>::zeros(&[t, 3]);
                let y = stack_compress_tensor(&x, k).unwrap();
                assert_eq!(y.shape(), &[t.div_ceil(k), 3 * k]);
            }
        }
    }

    #[test]
    fn budgets() {
        let a = token_budget(6.0, Modality::Audio.frame_rate(), 1).unwrap();
        let v = token_budget(6.0, Modality::Video.frame_rate(), 1).unwrap();
        assert_eq!(a + v, 450);
        assert_eq!(token_budget(6.0, 50.0, 4).unwrap() + token_budget(6.0, 25.0, 2).unwrap(), 150);
        assert_eq!(token_budget(6.0, 50.0, 5).unwrap(), 60);
        assert!(token_budget(0.0, 50.0, 1).is_err());
    }

    fn setup(k: usize) -> (ProjectorConfig, ParamStore<f64>) {
        let cfg = ProjectorConfig {
            k,
            d_enc: 3,
            d_hidden: 5,
            d_model: 4,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        init_projector(&mut store, Modality::Audio, &cfg, &mut rng).unwrap();
        (cfg, store)
    }

    #[test]
    fn rows_are_independent() {
        let (cfg, store) = setup(2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f64>::randn(&[4, 6], 1.0, &mut rng);
        let perm = [2usize, 0, 3, 1];
        let mut px = Vec::new();
        for &p in &perm {
            px.extend_from_slice(x.row(p));
        }
        let mut t = Tape::no_grad();
        let a = t.leaf(&x);
        let b = t.constant(&[4, 6], px).unwrap();
        let ya = project(&mut t, &store, Modality::Audio, &cfg, a).unwrap();
        let yb = project(&mut t, &store, Modality::Audio, &cfg, b).unwrap();
        let (ya, yb) = (t.tensor(ya), t.tensor(yb));
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(yb.row(i), ya.row(p));
        }
    }

    #[test]
    fn zero_in_zero_out() {
        let (cfg, store) = setup(2);
        let mut t = Tape::no_grad();
        let z = t.constant(&[3, 6], vec![0.0; 18]).unwrap();
        let y = project(&mut t, &store, Modality::Audio, &cfg, z).unwrap();
        assert!(t.value(y).iter().all(|&v| v == 0.0));
        let bad = t.constant(&[3, 5], vec![0.0; 15]).unwrap();
        assert!(matches!(
            project(&mut t, &store, Modality::Audio, &cfg, bad),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn param_count_matches_store() {
        let (cfg, store) = setup(3);
        assert_eq!(cfg.param_count(), store.count_trainable());
        assert_eq!(cfg.param_count(), 9 * 5 + 5 + 5 * 4 + 4);
    }

    #[test]
    fn projector_gradients() {
        for s in 0..10u64 {
            let (cfg, mut store) = setup(2);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + s);
            for (_, p) in store.iter_mut() {
                let shape = p.tensor.shape().to_vec();
                p.tensor = Tensor::randn(&shape, 1.0, &mut rng).with_grad(true);
            }
            let x = Tensor::<f64>::randn(&[5, 3], 1.0, &mut rng);
            let r = gradcheck::check_store(&store, 1e-5, |t, st| {
                let xv = t.leaf(&x);
                let y = tokens(t, st, Modality::Audio, &cfg, xv)?;
                gradcheck::probe(t, y, s)
            })
            .unwrap();
            assert!(r.max_rel_err < 1e-5, "{r:?}");
        }
    }
}
