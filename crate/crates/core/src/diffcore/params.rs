use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Format tag written at the top of every serialized parameter block.
pub const PARAMS_FORMAT: &str = "rlhb-params/1";

/// Named parameters of one model.
///
/// Iteration is sorted by name. `version` is bumped once per optimizer
/// step, which lets training loops prove update order and frozenness.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    version: u64,
}

/// Per-parameter gradients produced by one backward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<String, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.grads.get(name).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub(crate) fn add(&mut self, name: &str, g: &[f64]) {
        match self.grads.get_mut(name) {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => {
                self.grads.insert(name.to_string(), g.to_vec());
            }
        }
    }

    /// Merge another set of gradients into this one.
    pub fn merge(&mut self, other: &Gradients) {
        for (name, g) in other.iter() {
            self.add(name, g);
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::InvalidArgument(format!("invalid parameter name `{name}`")));
        }
        self.params.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params.get_mut(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    /// Add `grads` into the accumulators. Unknown names are an error.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (name, g) in grads.iter() {
            let t = self.get_mut(name)?;
            if t.len() != g.len() {
                return Err(Error::ShapeMismatch { op: "accumulate", lhs: t.shape().to_vec(), rhs: vec![g.len()] });
            }
            t.grad_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        Ok(())
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for t in self.params.values_mut() {
            t.grad_mut().iter_mut().for_each(|g| *g *= factor);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params.values().flat_map(|t| t.grad().iter()).map(|g| g * g).sum::<f64>().sqrt()
    }

    /// Rescale gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale_grads(max_norm / norm);
        }
        norm
    }

    /// Copy every parameter whose name starts with `prefix` from `src`.
    /// Returns how many tensors were copied.
    pub fn copy_prefix_from(&mut self, src: &ParamStore, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for (name, t) in src.iter().filter(|(n, _)| n.starts_with(prefix)) {
            let dst = self.get_mut(name)?;
            if dst.shape() != t.shape() {
                return Err(Error::ShapeMismatch { op: "copy_prefix_from", lhs: dst.shape().to_vec(), rhs: t.shape().to_vec() });
            }
            dst.data_mut().copy_from_slice(t.data());
            copied += 1;
        }
        Ok(copied)
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }

    /// Text serialization: a format tag, the version counter, then one line
    /// per parameter (`name dims values...`). Values use Rust's shortest
    /// round-trip float formatting, so reload is exact.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{PARAMS_FORMAT}");
        let _ = writeln!(out, "version {}", self.version);
        for (name, t) in &self.params {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            let _ = write!(out, "{name} {}", dims.join("x"));
            for v in t.data() {
                let _ = write!(out, " {v:?}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, reason: String| Error::Parse { path: "<params>".into(), line, reason };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, tag)) if tag == PARAMS_FORMAT => {}
            Some((_, tag)) => return Err(Error::VersionMismatch { expected: PARAMS_FORMAT.into(), found: tag.into() }),
            None => return Err(bad(1, "empty parameter block".into())),
        }
        let version = match lines.next() {
            Some((i, l)) => {
                l.strip_prefix("version ").and_then(|v| v.parse::<u64>().ok()).ok_or_else(|| bad(i + 1, "expected `version <n>`".into()))?
            }
            None => return Err(bad(2, "missing version line".into())),
        };
        let mut store = ParamStore { params: BTreeMap::new(), version };
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            let name = parts.next().unwrap_or_default();
            let dims = parts
                .next()
                .ok_or_else(|| bad(i + 1, "missing shape".into()))?
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| bad(i + 1, format!("bad shape: {e}")))?;
            let data = parts.map(|v| v.parse::<f64>()).collect::<Result<Vec<_>, _>>().map_err(|e| bad(i + 1, format!("bad value: {e}")))?;
            let t = Tensor::new(dims, data).map_err(|e| bad(i + 1, e.to_string()))?;
            store.insert(name, t).map_err(|e| bad(i + 1, e.to_string()))?;
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_is_value_exact() {
        let mut s = ParamStore::new();
        s.insert("b.w", Tensor::new(vec![2, 2], vec![0.1, -1e-300, 1.0 / 3.0, 7e12]).unwrap()).unwrap();
        s.insert("a", Tensor::new(vec![1], vec![f64::MIN_POSITIVE]).unwrap()).unwrap();
        s.bump_version();
        let back = ParamStore::from_text(&s.to_text()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.names().collect::<Vec<_>>(), vec!["a", "b.w"]);
    }

    #[test]
    fn wrong_tag_rejected() {
        let err = ParamStore::from_text("rlhb-params/0\nversion 0\n").unwrap_err();
        assert!(matches!(err, Error::VersionMismatch { .. }));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(vec![1]).unwrap()).unwrap();
        assert!(s.insert("w", Tensor::zeros(vec![1]).unwrap()).is_err());
    }
}
