use std::collections::HashMap;
use std::io::{self, Read, Write};

use rand::Rng;

use super::{Tape, Tensor, Var};

/// Index of a parameter inside its [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

impl std::ops::Index<ParamId> for Vec<Var> {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self[id.0]
    }
}

impl std::ops::Index<ParamId> for [Var] {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self[id.0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Named, ordered collection of learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on a duplicate name, which is a model
    /// construction bug.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            value,
            grad: None,
        });
        ParamId(self.params.len() - 1)
    }

    /// Glorot-uniform initialised `[fan_in × fan_out]` matrix.
    pub fn add_glorot(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..limit)).collect();
        self.add(name, Tensor::new(vec![fan_in, fan_out], data).unwrap())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id_of(name).map(|id| self.get(id))
    }

    pub fn values(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Copies gradients from a tape after backward. Parameters bound as
    /// constants get no gradient.
    pub fn collect_grads(&mut self, tape: &Tape, bound: &[Var]) {
        for (p, v) in self.params.iter_mut().zip(bound) {
            p.grad = if tape.requires_grad(*v) { tape.grad(*v) } else { None };
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    /// Writes every parameter as a binary block, in registration order.
    pub fn write_blocks(&self, out: &mut impl Write) -> io::Result<()> {
        for p in &self.params {
            write_block(out, &p.name, &p.value)?;
        }
        Ok(())
    }
}

/// Serialises one named tensor: name length, name bytes, rank, dims, data.
/// All integers are little-endian `u64`, data little-endian `f64`.
pub fn write_block(out: &mut impl Write, name: &str, t: &Tensor) -> io::Result<()> {
    out.write_all(&(name.len() as u64).to_le_bytes())?;
    out.write_all(name.as_bytes())?;
    out.write_all(&(t.shape().len() as u64).to_le_bytes())?;
    for &d in t.shape() {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Size in bytes of the block [`write_block`] produces.
pub fn block_len(name: &str, t: &Tensor) -> usize {
    8 + name.len() + 8 + 8 * t.shape().len() + 8 * t.numel()
}

fn read_u64(inp: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    inp.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Inverse of [`write_block`]. Rejects absurd lengths before allocating.
pub fn read_block(inp: &mut impl Read, max_bytes: usize) -> io::Result<(String, Tensor)> {
    let bad = |msg: &str| io::Error::new(io::ErrorKind::InvalidData, msg.to_string());
    let name_len = read_u64(inp)? as usize;
    if name_len > max_bytes {
        return Err(bad("parameter name length exceeds block"));
    }
    let mut name = vec![0u8; name_len];
    inp.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|_| bad("parameter name is not UTF-8"))?;
    let rank = read_u64(inp)? as usize;
    if rank > 8 {
        return Err(bad("parameter rank too large"));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u64(inp)? as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|n| n.saturating_mul(8) <= max_bytes)
        .ok_or_else(|| bad("parameter data exceeds block"))?;
    let mut raw = vec![0u8; n * 8];
    inp.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let t = Tensor::new(shape, data).map_err(|e| bad(&e.to_string()))?;
    Ok((name, t))
}
