use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::{DistributionSource, ProbVector, Token, Vocab};
use crate::error::{invalid, Result};
use crate::Scalar;

/// Parameters of a synthetic Markov language model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkovSpec {
    pub vocab: usize,
    /// Context length, 1 or 2.
    pub order: usize,
    /// Logit temperature; below 1 lowers entropy.
    pub temperature: f64,
    /// Dirichlet concentration of the raw rows.
    pub alpha: f64,
    pub seed: u64,
}

impl Default for MarkovSpec {
    fn default() -> Self {
        Self {
            vocab: 50,
            order: 1,
            temperature: 1.0,
            alpha: 0.5,
            seed: 42,
        }
    }
}

/// Order-1 or order-2 Markov chain over a vocabulary.
///
/// Contexts shorter than the order are left-padded with a start symbol, so
/// the empty context selects a dedicated start row.
#[derive(Clone, Debug)]
pub struct MarkovLm<T> {
    vocab: Vocab,
    order: usize,
    rows: Vec<ProbVector<T>>,
}

impl<T: Scalar> MarkovLm<T> {
    /// Draws every row from `Dirichlet(alpha)` with a seeded generator, then
    /// applies the temperature.
    pub fn generate(spec: &MarkovSpec) -> Result<Self> {
        let vocab = Vocab::new(spec.vocab)?;
        check_order(spec.order)?;
        if !(spec.alpha > 0.0) || !spec.alpha.is_finite() {
            return invalid(format!("Dirichlet concentration must be positive, got {}", spec.alpha));
        }
        let gamma = Gamma::new(spec.alpha, 1.0)
            .map_err(|e| crate::Error::InvalidInput(format!("gamma: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let temperature = T::of(spec.temperature);
        let n_rows = row_count(vocab, spec.order);
        let mut rows = Vec::with_capacity(n_rows);
        for _ in 0..n_rows {
            let draws: Vec<f64> = (0..vocab.size()).map(|_| gamma.sample(&mut rng)).collect();
            let raw = ProbVector::normalized(draws.into_iter().map(T::of).collect())?;
            rows.push(raw.with_temperature(temperature)?);
        }
        Ok(Self {
            vocab,
            order: spec.order,
            rows,
        })
    }

    /// Builds a model from explicit rows indexed by context code; see
    /// [`MarkovLm::context_code`].
    pub fn from_rows(vocab: usize, order: usize, rows: Vec<ProbVector<T>>) -> Result<Self> {
        let vocab = Vocab::new(vocab)?;
        check_order(order)?;
        if rows.len() != row_count(vocab, order) {
            return invalid(format!(
                "order-{order} model over {} tokens needs {} rows, got {}",
                vocab.size(),
                row_count(vocab, order),
                rows.len()
            ));
        }
        if rows.iter().any(|r| r.len() != vocab.size()) {
            return invalid("row length does not match vocabulary size");
        }
        Ok(Self { vocab, order, rows })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Index of the row used after `context`. The start symbol has code `V`.
    pub fn context_code(&self, context: &[Token]) -> Result<usize> {
        let base = self.vocab.size() + 1;
        let mut code = 0usize;
        for j in 0..self.order {
            let sym = match context.len().checked_sub(self.order - j) {
                Some(pos) => {
                    let t = context[pos];
                    self.vocab.check(t)?;
                    t as usize
                }
                None => self.vocab.size(),
            };
            code = code * base + sym;
        }
        Ok(code)
    }

    pub fn row(&self, code: usize) -> &ProbVector<T> {
        &self.rows[code]
    }

    pub fn rows(&self) -> &[ProbVector<T>] {
        &self.rows
    }
}

impl<T: Scalar> DistributionSource<T> for MarkovLm<T> {
    fn vocab(&self) -> Vocab {
        self.vocab
    }

    fn next_distribution(&self, context: &[Token]) -> Result<ProbVector<T>> {
        if let Some(&bad) = context.iter().find(|&&t| (t as usize) >= self.vocab.size()) {
            return invalid(format!("token id {bad} outside vocabulary of size {}", self.vocab.size()));
        }
        Ok(self.rows[self.context_code(context)?].clone())
    }
}

fn check_order(order: usize) -> Result<()> {
    if order == 1 || order == 2 {
        Ok(())
    } else {
        invalid(format!("Markov order must be 1 or 2, got {order}"))
    }
}

fn row_count(vocab: Vocab, order: usize) -> usize {
    (vocab.size() + 1).pow(order as u32)
}
