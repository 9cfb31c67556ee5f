//! Named parameter storage, binding into a tape and weight serialization.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Weight-decay group a trainable parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecayGroup {
    /// Prototype weights of the angular-margin classification head.
    Head,
    Body,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Buffers (batch-norm running statistics) are stored and serialized
    /// like parameters but never receive gradients.
    pub trainable: bool,
    pub group: DecayGroup,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: &str, mut value: Tensor, trainable: bool, group: DecayGroup) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        if trainable {
            value.enable_grad();
        }
        self.params.push(Param {
            name: name.to_string(),
            value,
            trainable,
            group,
        });
        self.index.insert(name.to_string(), self.params.len() - 1);
        ParamId(self.params.len() - 1)
    }

    pub fn add(&mut self, name: &str, value: Tensor, group: DecayGroup) -> ParamId {
        self.insert(name, value, true, group)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor) -> ParamId {
        self.insert(name, value, false, DecayGroup::Body)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id_of(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.value.zero_grad();
        }
    }

    /// Adds tape gradients into the parameters' gradient buffers.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (slot, g) in grads.params() {
            let p = &mut self.params[slot];
            if p.trainable {
                p.value.accumulate_grad(g);
            }
        }
    }

    /// Writes `<stem>.manifest` (one `name shape` line per tensor after a
    /// version header) and `<stem>.bin` (the tensors in manifest order).
    pub fn save(&self, stem: &Path, version: &str) -> Result<()> {
        let mut manifest = BufWriter::new(File::create(stem.with_extension("manifest"))?);
        writeln!(manifest, "# freqsv-weights v1 {version}")?;
        let mut bin = BufWriter::new(File::create(stem.with_extension("bin"))?);
        for p in &self.params {
            let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
            let kind = if p.trainable { "param" } else { "buffer" };
            writeln!(manifest, "{} {} {}", p.name, kind, dims.join("x"))?;
            p.value.write_to(&mut bin)?;
        }
        manifest.flush()?;
        bin.flush()?;
        Ok(())
    }

    /// Loads weights saved by [`ParamStore::save`] into an identically
    /// structured store; names, shapes and the version tag must match.
    pub fn load(&mut self, stem: &Path, version: &str) -> Result<()> {
        let manifest = BufReader::new(File::open(stem.with_extension("manifest"))?);
        let mut lines = manifest.lines();
        let header = lines
            .next()
            .transpose()?
            .ok_or_else(|| Error::Format("empty weight manifest".into()))?;
        let expected = format!("# freqsv-weights v1 {version}");
        if header.trim() != expected {
            return Err(Error::Config(format!(
                "weight manifest header `{header}` does not match `{expected}`"
            )));
        }
        let mut bin = BufReader::new(File::open(stem.with_extension("bin"))?);
        let mut seen = 0;
        for line in lines {
            let line = line?;
            let mut parts = line.split_whitespace();
            let (Some(name), Some(_kind), Some(_dims)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Format(format!("bad manifest line `{line}`")));
            };
            let t = Tensor::read_from(&mut bin)?;
            let id = self
                .id_of(name)
                .ok_or_else(|| Error::Config(format!("unexpected tensor {name} in checkpoint")))?;
            let slot = &mut self.params[id.0];
            if slot.value.shape() != t.shape() {
                return Err(Error::Config(format!(
                    "tensor {name}: checkpoint shape {:?} vs model {:?}",
                    t.shape(),
                    slot.value.shape()
                )));
            }
            slot.value.data_mut().copy_from_slice(t.data());
            seen += 1;
        }
        if seen != self.params.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {seen} tensors, model has {}",
                self.params.len()
            )));
        }
        Ok(())
    }
}

/// Forward-pass context: the tape, the parameters and the mode.
pub struct Ctx<'t, 's> {
    pub tape: &'t Tape,
    pub store: &'s mut ParamStore,
    /// Batch statistics and running-stat updates in batch norm.
    pub train: bool,
    /// Parameters enter the tape as differentiable leaves when set,
    /// otherwise as constants.
    pub track: bool,
    bound: RefCell<HashMap<ParamId, Var<'t>>>,
}

impl<'t, 's> Ctx<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s mut ParamStore, train: bool) -> Self {
        Ctx {
            tape,
            store,
            train,
            track: train,
            bound: RefCell::new(HashMap::new()),
        }
    }

    /// Training-mode statistics while still recording parameter gradients,
    /// or inference with gradients, as the caller chooses.
    pub fn with_tracking(mut self, track: bool) -> Self {
        self.track = track;
        self
    }

    /// Binds a parameter into the tape once per context.
    pub fn p(&self, id: ParamId) -> Var<'t> {
        if let Some(v) = self.bound.borrow().get(&id) {
            return *v;
        }
        let p = self.store.param(id);
        let t = p.value.clone();
        let v = if self.track && p.trainable {
            self.tape.param(id.0, t)
        } else {
            self.tape.constant(t)
        };
        self.bound.borrow_mut().insert(id, v);
        v
    }
}

/// He-normal initialization helper.
pub struct Init<'r, R: Rng> {
    pub rng: &'r mut R,
}

impl<R: Rng> Init<'_, R> {
    pub fn he(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let std = (2.0 / fan_in as f64).sqrt();
        self.normal(shape, std)
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("finite std");
        Tensor::from_fn(shape, |_| dist.sample(self.rng))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("w");
        let mut a = ParamStore::new();
        a.add("x", Tensor::from_fn(&[2, 3], |i| i as f64 * 0.5), DecayGroup::Body);
        a.add_buffer("rm", Tensor::full(&[3], 1.25));
        a.save(&stem, "cfg-abc").unwrap();

        let mut b = ParamStore::new();
        b.add("x", Tensor::zeros(&[2, 3]), DecayGroup::Body);
        b.add_buffer("rm", Tensor::zeros(&[3]));
        b.load(&stem, "cfg-abc").unwrap();
        assert_eq!(b.by_name("x").unwrap().data(), a.by_name("x").unwrap().data());
        assert_eq!(b.by_name("rm").unwrap().data(), &[1.25; 3]);

        assert!(matches!(b.load(&stem, "cfg-other"), Err(Error::Config(_))));
        let manifest = std::fs::read_to_string(stem.with_extension("manifest")).unwrap();
        assert_eq!(manifest, "# freqsv-weights v1 cfg-abc\nx param 2x3\nrm buffer 3\n");
    }

    #[test]
    fn ctx_binds_once() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(2.0), DecayGroup::Body);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &mut store, true);
        let a = ctx.p(id);
        let b = ctx.p(id);
        assert_eq!(a.id(), b.id());
        assert!(a.requires_grad());
    }
}
