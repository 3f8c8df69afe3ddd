//! Strided sliding-window perplexity.

use crate::error::{HarpeError, Result};
use crate::model::{target_log_probs, Transformer};
use crate::Real;

/// Anything that can score next-token log-probabilities.
pub trait LanguageModel: Sync {
    /// Longest input accepted by [`LanguageModel::log_probs`].
    fn max_len(&self) -> usize;

    /// `log p(targets[i] | input[..=i])` for every `i`.
    fn log_probs(&self, input: &[u32], targets: &[u32]) -> Result<Vec<f64>>;
}

impl<T: Real> LanguageModel for Transformer<T> {
    fn max_len(&self) -> usize {
        self.context_len()
    }

    fn log_probs(&self, input: &[u32], targets: &[u32]) -> Result<Vec<f64>> {
        if input.len() != targets.len() {
            return Err(HarpeError::invalid("input and targets differ in length"));
        }
        let logits = self.forward(input)?;
        Ok(target_log_probs(&logits, targets))
    }
}

/// Summed negative log-likelihood over the scored tokens.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NllSum {
    pub total: f64,
    pub count: usize,
}

impl NllSum {
    pub fn mean(&self) -> f64 {
        self.total / self.count as f64
    }

    pub fn ppl(&self) -> f64 {
        self.mean().exp()
    }
}

/// Windows of `context` tokens advancing by `window`. The first window
/// scores every target it covers; each later one scores only targets not yet
/// scored (at most `window` of them, conditioned on at least
/// `context - window` earlier tokens). The last window is pulled back to end
/// at the final token, so every token after the first is scored exactly once.
pub fn sliding_window_nll(
    model: &dyn LanguageModel,
    tokens: &[u32],
    window: usize,
    context: usize,
) -> Result<NllSum> {
    if window == 0 || window > context {
        return Err(HarpeError::invalid(format!(
            "window {window} must lie in 1..={context}"
        )));
    }
    if tokens.len() <= context {
        return Err(HarpeError::invalid(format!(
            "corpus of {} tokens is shorter than one context of {context} plus a target",
            tokens.len()
        )));
    }
    if context > model.max_len() {
        return Err(HarpeError::ContextExceeded {
            len: context,
            context: model.max_len(),
        });
    }
    let last = tokens.len() - 1;
    let mut total = 0.0;
    let mut count = 0;
    // targets with index <= scored_to are done; target index 0 is never scored
    let mut scored_to = 0;
    let mut start = 0;
    loop {
        let end = (start + context).min(last);
        let begin = end - context;
        let lp = model.log_probs(&tokens[begin..end], &tokens[begin + 1..=end])?;
        let fresh = end - scored_to;
        for v in &lp[context - fresh..] {
            total -= v;
        }
        count += fresh;
        scored_to = end;
        if end == last {
            break;
        }
        start += window;
    }
    Ok(NllSum { total, count })
}

/// `exp(mean NLL)` of [`sliding_window_nll`].
pub fn sliding_window_ppl(
    model: &dyn LanguageModel,
    tokens: &[u32],
    window: usize,
    context: usize,
) -> Result<f64> {
    Ok(sliding_window_nll(model, tokens, window, context)?.ppl())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Records which targets each call scored.
    struct Probe {
        max: usize,
        calls: std::sync::Mutex<Vec<(usize, usize)>>,
    }

    impl LanguageModel for Probe {
        fn max_len(&self) -> usize {
            self.max
        }
        fn log_probs(&self, input: &[u32], _targets: &[u32]) -> Result<Vec<f64>> {
            self.calls.lock().unwrap().push((input[0] as usize, input.len()));
            Ok(vec![-1.0; input.len()])
        }
    }

    fn positions(n: u32) -> Vec<u32> {
        (0..n).collect()
    }

    #[test]
    fn every_target_scored_once() {
        for (n, w, c) in [(100, 10, 20), (101, 7, 20), (21, 5, 20), (64, 16, 16), (50, 1, 8)] {
            let p = Probe {
                max: c,
                calls: Default::default(),
            };
            let r = sliding_window_nll(&p, &positions(n), w, c).unwrap();
            assert_eq!(r.count, n as usize - 1, "{n} {w} {c}");
            assert!((r.mean() - 1.0).abs() < 1e-12);
            let calls = p.calls.lock().unwrap();
            assert!(calls.iter().all(|&(_, len)| len == c));
            assert_eq!(calls[0].0, 0);
            assert_eq!(calls.last().unwrap().0 + c, n as usize - 1);
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        let p = Probe {
            max: 16,
            calls: Default::default(),
        };
        assert!(sliding_window_nll(&p, &positions(16), 4, 16).is_err());
        assert!(sliding_window_nll(&p, &positions(40), 0, 16).is_err());
        assert!(sliding_window_nll(&p, &positions(40), 17, 16).is_err());
        assert!(matches!(
            sliding_window_nll(&p, &positions(40), 4, 32),
            Err(HarpeError::ContextExceeded { .. })
        ));
    }
}
