//! Hyperparameter search spaces and reproducible random sampling.

use cotlab_core::data::stream_rng;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Hyper, ModelKind};
use crate::error::{Error, Result};

/// How the PCP context width `u` is chosen for a feature width `w`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextRule {
    /// `u ∈ {w/2^i : w/2^i > m} ∪ {m}`.
    Halving,
    /// `u = w`.
    EqualWidth,
}

/// Candidate lists per hyperparameter. Lists irrelevant to a model kind
/// may be empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    pub batch_size: Vec<usize>,
    pub learning_rate: Vec<f64>,
    pub width: Vec<usize>,
    #[serde(default)]
    pub depth: Vec<usize>,
    #[serde(default = "default_rule")]
    pub context_rule: ContextRule,
    #[serde(default)]
    pub nt: Vec<usize>,
    /// Regimes `[lo, hi]`: a regime is picked uniformly, then `log₁₀ α₁`
    /// and `log₁₀ α₂` are drawn independently from `U(lo, hi)`.
    #[serde(default)]
    pub log10_alpha: Vec<[f64; 2]>,
    /// Embedding widths; both empty means no context embedding.
    #[serde(default)]
    pub embed_hidden: Vec<usize>,
    #[serde(default)]
    pub embed_output: Vec<usize>,
}

fn default_rule() -> ContextRule {
    ContextRule::Halving
}

fn pow2(lo: u32, hi: u32) -> Vec<usize> {
    (lo..=hi).map(|k| 1usize << k).collect()
}

/// The candidate context widths for feature width `w` and context size `m`.
pub fn context_widths(w: usize, m: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..usize::BITS).map(|i| w >> i).take_while(|&u| u > m && u > 0).collect();
    if !out.contains(&m) && m > 0 {
        out.push(m);
    }
    out
}

impl SearchSpace {
    /// Named presets: `default` is the general space, `uci` the tabular one,
    /// and `lfi` the tabular one with the larger batch sizes used for
    /// simulation-based inference (and `u = w` for PCP).
    pub fn preset(name: &str, kind: ModelKind) -> Result<Self> {
        let lr4 = vec![0.05, 0.01, 1e-3, 1e-4];
        let lr3 = vec![0.01, 0.005, 0.001];
        let uci_w = vec![32, 64, 128, 256, 512];
        let s = match (name, kind) {
            ("default", ModelKind::Pcp) => Self::pcp(pow2(5, 8), lr4, pow2(5, 9), ContextRule::Halving),
            ("default", ModelKind::Cot) => {
                let mut s = Self::cot(pow2(5, 10), lr4, pow2(5, 10), vec![[-1.0, 3.0], [2.0, 5.0]]);
                s.embed_hidden = pow2(5, 7);
                s.embed_output = pow2(5, 7);
                s
            }
            ("uci", ModelKind::Pcp) => Self::pcp(vec![32, 64], lr3, uci_w, ContextRule::Halving),
            ("uci", ModelKind::Cot) => Self::cot(vec![32, 64], lr3, uci_w, vec![[-1.0, 3.0]]),
            ("lfi", ModelKind::Pcp) => Self::pcp(vec![64, 128, 256], lr3, uci_w, ContextRule::EqualWidth),
            ("lfi", ModelKind::Cot) => Self::cot(vec![32, 64, 128, 256], lr3, uci_w, vec![[-1.0, 3.0]]),
            _ => return Err(Error::Validation(format!("unknown search space preset {name:?}"))),
        };
        Ok(s)
    }

    fn pcp(batch_size: Vec<usize>, learning_rate: Vec<f64>, width: Vec<usize>, context_rule: ContextRule) -> Self {
        Self {
            batch_size,
            learning_rate,
            width,
            depth: vec![2, 3, 4, 5, 6],
            context_rule,
            nt: vec![],
            log10_alpha: vec![],
            embed_hidden: vec![],
            embed_output: vec![],
        }
    }

    fn cot(batch_size: Vec<usize>, learning_rate: Vec<f64>, width: Vec<usize>, log10_alpha: Vec<[f64; 2]>) -> Self {
        Self {
            batch_size,
            learning_rate,
            width,
            depth: vec![],
            context_rule: ContextRule::Halving,
            nt: vec![8, 16],
            log10_alpha,
            embed_hidden: vec![],
            embed_output: vec![],
        }
    }

    pub fn validate(&self, kind: ModelKind) -> Result<()> {
        let empty = |what: &str| Err(Error::Validation(format!("search space has no {what} candidates")));
        if self.batch_size.is_empty() {
            return empty("batch_size");
        }
        if self.learning_rate.is_empty() {
            return empty("learning_rate");
        }
        if self.width.is_empty() {
            return empty("width");
        }
        match kind {
            ModelKind::Pcp if self.depth.is_empty() => return empty("depth"),
            ModelKind::Cot if self.nt.is_empty() => return empty("nt"),
            ModelKind::Cot if self.log10_alpha.is_empty() => return empty("log10_alpha"),
            _ => {}
        }
        if self.embed_hidden.is_empty() != self.embed_output.is_empty() {
            return Err(Error::Validation("embedding width lists must both be empty or both non-empty".into()));
        }
        let bad_int = self.batch_size.iter().chain(&self.width).chain(&self.nt).any(|&v| v == 0)
            || self.depth.iter().any(|&k| k < 2)
            || self.embed_hidden.iter().chain(&self.embed_output).any(|&v| v == 0);
        let bad_real = self.learning_rate.iter().any(|&v| !(v > 0.0) || !v.is_finite())
            || self.log10_alpha.iter().any(|[lo, hi]| !(lo <= hi) || !lo.is_finite() || !hi.is_finite());
        if bad_int || bad_real {
            return Err(Error::Validation("search space has out-of-range candidates".into()));
        }
        Ok(())
    }

    /// Whether `h` lies in this space for context size `m`.
    pub fn contains(&self, h: &Hyper, m: usize) -> bool {
        match *h {
            Hyper::Pcp { batch_size, learning_rate, width, context, depth } => {
                let u_ok = match self.context_rule {
                    ContextRule::Halving => context_widths(width, m).contains(&context),
                    ContextRule::EqualWidth => context == width,
                };
                self.batch_size.contains(&batch_size)
                    && self.learning_rate.contains(&learning_rate)
                    && self.width.contains(&width)
                    && self.depth.contains(&depth)
                    && u_ok
            }
            Hyper::Cot { batch_size, learning_rate, width, nt, alpha1, alpha2, embed } => {
                let in_regime = |a: f64| self.log10_alpha.iter().any(|[lo, hi]| (*lo - 1e-9..=*hi + 1e-9).contains(&a.log10()));
                let embed_ok = match embed {
                    None => self.embed_hidden.is_empty(),
                    Some([eh, eo]) => self.embed_hidden.contains(&eh) && self.embed_output.contains(&eo),
                };
                self.batch_size.contains(&batch_size)
                    && self.learning_rate.contains(&learning_rate)
                    && self.width.contains(&width)
                    && self.nt.contains(&nt)
                    && in_regime(alpha1)
                    && in_regime(alpha2)
                    && embed_ok
            }
        }
    }
}

/// `count` tuples for a model with context size `m`; tuple `i` is drawn
/// from its own stream of `seed`, so prefixes agree across counts.
pub fn sample_space(space: &SearchSpace, kind: ModelKind, m: usize, count: usize, seed: u64) -> Result<Vec<Hyper>> {
    space.validate(kind)?;
    Ok((0..count as u64)
        .map(|i| {
            let mut rng = stream_rng(seed, i);
            let batch_size = *pick(&mut rng, &space.batch_size);
            let learning_rate = *pick(&mut rng, &space.learning_rate);
            let width = *pick(&mut rng, &space.width);
            match kind {
                ModelKind::Pcp => {
                    let depth = *pick(&mut rng, &space.depth);
                    let context = match space.context_rule {
                        ContextRule::Halving => *pick(&mut rng, &context_widths(width, m)),
                        ContextRule::EqualWidth => width,
                    };
                    Hyper::Pcp { batch_size, learning_rate, width, context, depth }
                }
                ModelKind::Cot => {
                    let nt = *pick(&mut rng, &space.nt);
                    let [lo, hi] = *pick(&mut rng, &space.log10_alpha);
                    let alpha1 = 10f64.powf(rng.random_range(lo..=hi));
                    let alpha2 = 10f64.powf(rng.random_range(lo..=hi));
                    let embed = if space.embed_hidden.is_empty() {
                        None
                    } else {
                        Some([*pick(&mut rng, &space.embed_hidden), *pick(&mut rng, &space.embed_output)])
                    };
                    Hyper::Cot { batch_size, learning_rate, width, nt, alpha1, alpha2, embed }
                }
            }
        })
        .collect())
}

fn pick<'a, T, R: Rng>(rng: &mut R, items: &'a [T]) -> &'a T {
    &items[rng.random_range(0..items.len())]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn context_rule_examples() {
        assert_eq!(context_widths(32, 1), vec![32, 16, 8, 4, 2, 1]);
        assert_eq!(context_widths(32, 5), vec![32, 16, 8, 5]);
        assert_eq!(context_widths(64, 9), vec![64, 32, 16, 9]);
        assert_eq!(context_widths(4, 8), vec![8]);
    }

    #[test]
    fn zero_count_is_empty_and_prefixes_agree() {
        let s = SearchSpace::preset("default", ModelKind::Pcp).unwrap();
        assert!(sample_space(&s, ModelKind::Pcp, 2, 0, 1).unwrap().is_empty());
        let a = sample_space(&s, ModelKind::Pcp, 2, 5, 1).unwrap();
        let b = sample_space(&s, ModelKind::Pcp, 2, 8, 1).unwrap();
        assert_eq!(a[..], b[..5]);
    }

    #[test]
    fn empty_space_is_an_error() {
        let mut s = SearchSpace::preset("uci", ModelKind::Cot).unwrap();
        s.nt.clear();
        assert!(sample_space(&s, ModelKind::Cot, 1, 3, 0).is_err());
    }
}
