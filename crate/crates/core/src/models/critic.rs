use super::backbone::{self, BackboneConfig};
use super::vocab::TokenId;
use super::{teacher_forced_ids, Model};
use crate::diffcore::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Token-level state-value model `V(s_t; b)`, read at the same positions
/// where the policy predicts each action.
#[derive(Clone, Debug)]
pub struct CriticModel {
    pub config: BackboneConfig,
    pub params: ParamStore,
}

impl Model for CriticModel {
    const KIND: &'static str = "critic";

    fn init(config: &BackboneConfig, vocab_size: usize, _extra: usize, rng: &mut Rng) -> Result<Self> {
        let mut params = ParamStore::new();
        backbone::init(&mut params, config, vocab_size, rng)?;
        params.insert("head.w", Tensor::zeros(vec![config.d_model, 1])?)?;
        params.insert("head.b", Tensor::zeros(vec![1])?)?;
        Ok(Self { config: config.clone(), params })
    }

    fn backbone(&self) -> &BackboneConfig {
        &self.config
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

impl CriticModel {
    pub fn new(config: &BackboneConfig, vocab_size: usize, rng: &mut Rng) -> Result<Self> {
        Self::init(config, vocab_size, 0, rng)
    }

    /// `[L]` values, one per response token.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        query: &[TokenId],
        behavior: &[TokenId],
        response: &[TokenId],
    ) -> Result<Var> {
        if response.is_empty() {
            return Err(Error::InvalidArgument("critic forward needs at least one response token".into()));
        }
        backbone::check_ids(response, self.vocab_size(), usize::MAX)?;
        let (ids, first) = teacher_forced_ids(query, behavior, response);
        let h = backbone::forward(tape, params, &self.config, &ids)?;
        let rows: Vec<usize> = (first..first + response.len()).collect();
        let h = tape.select_rows(h, &rows)?;
        let w = tape.param(params, "head.w")?;
        let b = tape.param(params, "head.b")?;
        let v = tape.matmul(h, w)?;
        let v = tape.add_row(v, b)?;
        tape.reshape(v, vec![response.len()])
    }

    pub fn values(&self, query: &[TokenId], behavior: &[TokenId], response: &[TokenId]) -> Result<Vec<f64>> {
        if response.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let v = self.forward(&mut tape, &self.params, query, behavior, response)?;
        Ok(tape.value(v).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;

    #[test]
    fn zero_head_values() {
        let c = CriticModel::new(&BackboneConfig::tiny(), 12, &mut SeedTree::new(1).stream("init")).unwrap();
        let v = c.values(&[4, 5], &[6], &[5, 5, 2]).unwrap();
        assert_eq!(v, vec![0.0; 3]);
    }
}
