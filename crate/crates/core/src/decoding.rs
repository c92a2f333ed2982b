//! Autoregressive generation over the response span.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{decoder_forward, embed_tokens, DecodeCache, LoraBinding, TransformerConfig};
use crate::tensor::{log_softmax_rows, Float, ParamStore, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LengthNorm {
    #[default]
    None,
    ByLength,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam_width: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub length_normalization: LengthNorm,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_width: 15,
            temperature: 0.6,
            max_new_tokens: 32,
            length_normalization: LengthNorm::None,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::Param("beam width must be at least 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Param(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::Param("max_new_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated ids, ending in EOS when `finished`.
    pub tokens: Vec<usize>,
    /// Cumulative temperature-scaled log-probability.
    pub log_score: f64,
    /// False when generation stopped at `max_new_tokens` without EOS.
    pub finished: bool,
}

impl Hypothesis {
    pub fn score(&self, norm: LengthNorm) -> f64 {
        match norm {
            LengthNorm::None => self.log_score,
            LengthNorm::ByLength => self.log_score / self.tokens.len().max(1) as f64,
        }
    }
}

/// A model that emits next-token logits and can be advanced one token at a
/// time from a state it owns.
pub trait StepModel {
    type State: Clone;

    fn vocab_size(&self) -> usize;

    fn eos(&self) -> usize;

    /// Logits for the first response token and the state after the prefix.
    fn start(&self) -> Result<(Vec<f64>, Self::State)>;

    /// Appends `tokens[i]` to `states[i]` and returns the next logits for
    /// each state.
    fn step(&self, states: &mut [Self::State], tokens: &[usize]) -> Result<Vec<Vec<f64>>>;
}

/// One advance of a single state.
pub fn incremental_step<M: StepModel>(model: &M, state: &M::State, token: usize) -> Result<(Vec<f64>, M::State)> {
    let mut states = vec![state.clone()];
    let mut logits = model.step(&mut states, &[token])?;
    Ok((logits.remove(0), states.remove(0)))
}

fn log_probs(logits: &[f64], tau: f64) -> Vec<f64> {
    log_softmax_rows(logits, logits.len(), tau)
}

/// Greedy decoding: the lowest-id argmax at every step.
pub fn greedy_decode<M: StepModel>(model: &M, cfg: &DecodeConfig) -> Result<Hypothesis> {
    cfg.validate()?;
    let (mut logits, mut state) = model.start()?;
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        log_score: 0.0,
        finished: false,
    };
    loop {
        let lp = log_probs(&logits, cfg.temperature);
        let mut best = 0;
        for (i, &v) in lp.iter().enumerate() {
            if v > lp[best] {
                best = i;
            }
        }
        hyp.tokens.push(best);
        hyp.log_score += lp[best];
        if best == model.eos() {
            hyp.finished = true;
            return Ok(hyp);
        }
        if hyp.tokens.len() == cfg.max_new_tokens {
            return Ok(hyp);
        }
        let (l, s) = incremental_step(model, &state, best)?;
        logits = l;
        state = s;
    }
}

/// Descending score, then lexicographically smaller token sequence.
fn rank(a: &(f64, &[usize]), b: &(f64, &[usize])) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(b.1))
}

/// Breadth-pruned beam search. Returns the completed hypotheses ranked by
/// normalized score. Hypotheses still live at `max_new_tokens` join the pool
/// flagged unfinished.
pub fn beam_search<M: StepModel>(model: &M, cfg: &DecodeConfig) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    let eos = model.eos();
    let norm = cfg.length_normalization;
    let (logits, state) = model.start()?;
    let mut live: Vec<(Hypothesis, M::State, Vec<f64>)> = vec![(
        Hypothesis {
            tokens: Vec::new(),
            log_score: 0.0,
            finished: false,
        },
        state,
        logits,
    )];
    let mut completed: Vec<Hypothesis> = Vec::new();

    for depth in 0..cfg.max_new_tokens {
        let mut cands: Vec<(f64, Vec<usize>, usize)> = Vec::with_capacity(live.len() * model.vocab_size());
        for (pi, (h, _, logits)) in live.iter().enumerate() {
            let lp = log_probs(logits, cfg.temperature);
            for (tok, &l) in lp.iter().enumerate() {
                let mut toks = h.tokens.clone();
                toks.push(tok);
                cands.push((h.log_score + l, toks, pi));
            }
        }
        cands.sort_by(|a, b| rank(&(a.0, &a.1), &(b.0, &b.1)));
        cands.truncate(cfg.beam_width);

        let mut next = Vec::new();
        for (score, tokens, pi) in cands {
            if tokens.last() == Some(&eos) {
                completed.push(Hypothesis {
                    tokens,
                    log_score: score,
                    finished: true,
                });
            } else {
                next.push((score, tokens, pi));
            }
        }
        if next.is_empty() {
            live.clear();
            break;
        }
        let last_step = depth + 1 == cfg.max_new_tokens;
        let prunable = norm == LengthNorm::None
            && completed
                .iter()
                .map(|h| h.log_score)
                .fold(f64::NEG_INFINITY, f64::max)
                >= next[0].0;
        if last_step {
            // The horizon stops a hypothesis just as it stops greedy decoding.
            completed.extend(next.into_iter().map(|(s, t, _)| Hypothesis {
                tokens: t,
                log_score: s,
                finished: false,
            }));
            live.clear();
            break;
        }
        if prunable {
            live.clear();
            break;
        }
        let mut states: Vec<M::State> = next.iter().map(|(_, _, pi)| live[*pi].1.clone()).collect();
        let toks: Vec<usize> = next.iter().map(|(_, t, _)| *t.last().expect("non-empty")).collect();
        let logits = model.step(&mut states, &toks)?;
        live = next
            .into_iter()
            .zip(states)
            .zip(logits)
            .map(|(((s, t, _), st), lg)| {
                (
                    Hypothesis {
                        tokens: t,
                        log_score: s,
                        finished: false,
                    },
                    st,
                    lg,
                )
            })
            .collect();
    }

    let mut out = if completed.is_empty() {
        live.into_iter().map(|(h, _, _)| h).take(1).collect()
    } else {
        completed
    };
    out.sort_by(|a, b| rank(&(a.score(norm), &a.tokens), &(b.score(norm), &b.tokens)));
    Ok(out)
}

/// Decoder-only LM continuing from fixed prefix embeddings.
#[derive(Debug, Clone)]
pub struct LmSession<'a, F: Float> {
    pub cfg: &'a TransformerConfig,
    pub store: &'a ParamStore<F>,
    pub lora: Option<LoraBinding<'a>>,
    /// Prefix embeddings `[T×d_model]`; may be empty (`T = 0`) only through
    /// [`LmSession::unconditional`].
    pub prefix: Tensor<F>,
    pub eos: usize,
}

impl<'a, F: Float> LmSession<'a, F> {
    /// Full forward over `prefix + tokens`; the logits at every position.
    pub fn full_logits(&self, tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::no_grad();
        let mut parts = vec![tape.leaf(&self.prefix)];
        if !tokens.is_empty() {
            parts.push(embed_tokens(&mut tape, self.store, tokens)?);
        }
        let x = tape.concat_rows(&parts)?;
        let n = tape.shape(x)[0];
        let logits = decoder_forward(&mut tape, self.store, self.cfg, self.lora, x, &[n], None)?;
        let v = self.cfg.vocab_size;
        Ok(tape
            .value(logits)
            .chunks(v)
            .map(|r| r.iter().map(|x| x.as_f64()).collect())
            .collect())
    }
}

impl<F: Float> StepModel for LmSession<'_, F> {
    type State = DecodeCache<F>;

    fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    fn eos(&self) -> usize {
        self.eos
    }

    fn start(&self) -> Result<(Vec<f64>, Self::State)> {
        let mut cache = DecodeCache::new(self.cfg, self.store);
        let mut tape = Tape::no_grad();
        let x = tape.leaf(&self.prefix);
        let n = self.prefix.rows();
        let logits = decoder_forward(
            &mut tape,
            self.store,
            self.cfg,
            self.lora,
            x,
            &[n],
            Some(std::slice::from_mut(&mut cache)),
        )?;
        let v = self.cfg.vocab_size;
        let last = tape.value(logits)[(n - 1) * v..].iter().map(|x| x.as_f64()).collect();
        Ok((last, cache))
    }

    fn step(&self, states: &mut [Self::State], tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        if states.len() != tokens.len() {
            return Err(Error::Contract("one token per decode state required".into()));
        }
        let mut tape = Tape::no_grad();
        let x = embed_tokens(&mut tape, self.store, tokens)?;
        let lens = vec![1; tokens.len()];
        let logits = decoder_forward(&mut tape, self.store, self.cfg, self.lora, x, &lens, Some(states))?;
        let v = self.cfg.vocab_size;
        Ok(tape
            .value(logits)
            .chunks(v)
            .map(|r| r.iter().map(|x| x.as_f64()).collect())
            .collect())
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::nn::init_decoder;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Random decoder with vocabulary `v` and a random prefix of length `p`.
    pub(crate) fn random_lm(v: usize, p: usize, seed: u64) -> (TransformerConfig, ParamStore<f64>, Tensor<f64>) {
        let cfg = TransformerConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            ffn_mult: 2,
            vocab_size: v,
            max_seq_len: 64,
            causal: true,
            rope_base: 10_000.0,
            norm_eps: 1e-6,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_decoder(&mut store, &cfg, &mut rng).unwrap();
        // Sharpen the head so the distributions are far from uniform.
        let head = store.get_mut("llm.head.weight").unwrap();
        head.data_mut().iter_mut().for_each(|x| *x *= 3.0);
        let prefix = Tensor::randn(&[p, 8], 1.0, &mut rng);
        (cfg, store, prefix)
    }

    /// Scripted model: logits depend only on the number of generated tokens.
    struct Scripted {
        table: Vec<Vec<f64>>,
        eos: usize,
    }

    impl StepModel for Scripted {
        type State = usize;
        fn vocab_size(&self) -> usize {
            self.table[0].len()
        }
        fn eos(&self) -> usize {
            self.eos
        }
        fn start(&self) -> Result<(Vec<f64>, usize)> {
            Ok((self.table[0].clone(), 0))
        }
        fn step(&self, states: &mut [usize], _tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
            Ok(states
                .iter_mut()
                .map(|s| {
                    *s += 1;
                    self.table[(*s).min(self.table.len() - 1)].clone()
                })
                .collect())
        }
    }

    fn onehot(v: usize, hot: usize) -> Vec<f64> {
        (0..v).map(|i| if i == hot { 50.0 } else { 0.0 }).collect()
    }

    #[test]
    fn forced_chain() {
        let m = Scripted {
            table: vec![onehot(4, 0), onehot(4, 1), onehot(4, 3)],
            eos: 3,
        };
        let h = greedy_decode(&m, &DecodeConfig::default()).unwrap();
        assert_eq!(h.tokens, vec![0, 1, 3]);
        assert!(h.finished);
        let b = beam_search(&m, &DecodeConfig::default()).unwrap();
        assert_eq!(b[0].tokens, vec![0, 1, 3]);
    }

    #[test]
    fn immediate_eos() {
        let logits = vec![0.0, 0.0, 30.0, 0.0];
        let m = Scripted {
            table: vec![logits.clone()],
            eos: 2,
        };
        let cfg = DecodeConfig::default();
        let b = beam_search(&m, &cfg).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].tokens, vec![2]);
        let lp = log_softmax_rows(&logits, 4, cfg.temperature)[2];
        assert_eq!(b[0].log_score, lp);
    }

    #[test]
    fn truncation_is_flagged() {
        let m = Scripted {
            table: vec![onehot(3, 0)],
            eos: 2,
        };
        let cfg = DecodeConfig {
            max_new_tokens: 5,
            ..Default::default()
        };
        let g = greedy_decode(&m, &cfg).unwrap();
        assert_eq!(g.tokens.len(), 5);
        assert!(!g.finished);
        let b = beam_search(&m, &DecodeConfig { beam_width: 1, ..cfg }).unwrap();
        assert_eq!(b.len(), 1);
        assert!(!b[0].finished);
        assert_eq!(b[0].tokens, g.tokens);
    }

    #[test]
    fn horizon_hypotheses_compete_with_finished_ones() {
        // EOS is cheap to reach but scores below running out the horizon.
        let row = vec![5.0, 0.0, 1.0];
        let m = Scripted {
            table: vec![row.clone()],
            eos: 2,
        };
        let cfg = DecodeConfig {
            beam_width: 3,
            max_new_tokens: 2,
            temperature: 1.0,
            ..Default::default()
        };
        let b = beam_search(&m, &cfg).unwrap();
        assert_eq!(b[0].tokens, vec![0, 0]);
        assert!(!b[0].finished);
        assert!(b.iter().any(|h| h.finished && h.tokens == vec![2]));
        let g = greedy_decode(&m, &cfg).unwrap();
        assert_eq!(b[0].log_score, g.log_score);
    }

    #[test]
    fn temperature_keeps_greedy_path() {
        for seed in 0..10 {
            let (cfg, store, prefix) = random_lm(6, 3, seed);
            let s = LmSession { cfg: &cfg, store: &store, lora: None, prefix, eos: 5 };
            let base = greedy_decode(&s, &DecodeConfig { max_new_tokens: 8, ..Default::default() }).unwrap();
            for tau in [0.1, 1.0, 3.0] {
                let d = DecodeConfig { temperature: tau, max_new_tokens: 8, ..Default::default() };
                assert_eq!(greedy_decode(&s, &d).unwrap().tokens, base.tokens);
            }
        }
    }

    #[test]
    fn incremental_matches_full_forward() {
        let (cfg, store, prefix) = random_lm(7, 4, 3);
        let s = LmSession { cfg: &cfg, store: &store, lora: None, prefix, eos: 6 };
        let trace = [1usize, 4, 0, 2, 2, 5, 3, 1, 0, 6];
        let full = s.full_logits(&trace).unwrap();
        let (mut lg, mut st) = s.start().unwrap();
        for (i, &t) in trace.iter().enumerate() {
            let want = &full[3 + i];
            assert!(lg.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-10));
            let (l, n) = incremental_step(&s, &st, t).unwrap();
            lg = l;
            st = n;
        }
        let want = full.last().unwrap();
        assert!(lg.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-10));
    }

    #[test]
    fn single_position_base_case() {
        let (cfg, store, prefix) = random_lm(5, 1, 8);
        let s = LmSession { cfg: &cfg, store: &store, lora: None, prefix, eos: 4 };
        let (lg, st) = s.start().unwrap();
        assert_eq!(st.len(), 1);
        assert_eq!(lg, s.full_logits(&[]).unwrap()[0]);
    }

    #[test]
    fn stale_state_rejected() {
        let (cfg, mut store, prefix) = random_lm(5, 2, 9);
        let st = {
            let s = LmSession { cfg: &cfg, store: &store, lora: None, prefix: prefix.clone(), eos: 4 };
            s.start().unwrap().1
        };
        store.get_mut("llm.norm.g").unwrap().data_mut()[0] += 1.0;
        let s = LmSession { cfg: &cfg, store: &store, lora: None, prefix, eos: 4 };
        assert!(matches!(incremental_step(&s, &st, 1), Err(Error::Contract(_))));
    }

    #[test]
    fn length_normalization_ranks_by_mean() {
        // Two-token path (0, EOS) with high per-token probability vs an
        // immediate EOS with lower probability.
        let m = Scripted {
            table: vec![vec![2.0, 0.0, 2.3], vec![0.0, 0.0, 9.0]],
            eos: 2,
        };
        let none = DecodeConfig { temperature: 1.0, ..Default::default() };
        let by_len = DecodeConfig { length_normalization: LengthNorm::ByLength, ..none.clone() };
        let a = beam_search(&m, &none).unwrap();
        let b = beam_search(&m, &by_len).unwrap();
        assert_eq!(a[0].tokens, vec![2]);
        assert_eq!(b[0].tokens, vec![0, 2]);
        for h in b.windows(2) {
            assert!(h[0].score(LengthNorm::ByLength) >= h[1].score(LengthNorm::ByLength));
        }
    }
}
