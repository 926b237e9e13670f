//! `RGKW` binary weight files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic   b"RGKW"
//! version u16 (= 1)
//! count   u32
//! count × tensor:
//!   name_len u16, name (UTF-8)
//!   dtype u8   0 = f32, 1 = i8, 2 = u8, 3 = i16, 4 = u16
//!   rank u8, dims u32 × rank
//!   data, product(dims) elements
//! ```
//!
//! Real parameters are stored as f32. Scales end in `.scale`, biases in
//! `.bias` and lookup tables in `.lut`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::featnet::{ChannelAffine, DenseLayer, FeatNetWeights};
use crate::quant::{weight_levels, ActivationTable, QuantizedLayer};
use crate::reagent::{ActorWeights, Head};

pub const MAGIC: &[u8; 4] = b"RGKW";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I8(Vec<i8>),
    U8(Vec<u8>),
    I16(Vec<i16>),
    U16(Vec<u16>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I8(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::I16(v) => v.len(),
            TensorData::U16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tag(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::I8(_) => 1,
            TensorData::U8(_) => 2,
            TensorData::I16(_) => 3,
            TensorData::U16(_) => 4,
        }
    }

    pub fn dtype_name(&self) -> &'static str {
        ["f32", "i8", "u8", "i16", "u16"][self.tag() as usize]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(name: impl Into<String>, dims: Vec<u32>, data: TensorData) -> Result<Self> {
        let name = name.into();
        let count: u64 = dims.iter().map(|&d| d as u64).product();
        if count != data.len() as u64 {
            return Err(Error::WeightFormat(format!(
                "tensor {name}: dims hold {count} elements but data has {}",
                data.len()
            )));
        }
        if name.len() > u16::MAX as usize || dims.len() > u8::MAX as usize {
            return Err(Error::WeightFormat(format!("tensor {name}: name or rank too long")));
        }
        Ok(Self { name, dims, data })
    }

    fn f32s(name: impl Into<String>, dims: Vec<u32>, values: impl IntoIterator<Item = f64>) -> Result<Self> {
        Self::new(
            name,
            dims,
            TensorData::F32(values.into_iter().map(|v| v as f32).collect()),
        )
    }

    fn scalar(name: impl Into<String>, v: f64) -> Result<Self> {
        Self::f32s(name, vec![1], [v])
    }

    fn flags(name: impl Into<String>, values: &[u8]) -> Result<Self> {
        Self::new(name, vec![values.len() as u32], TensorData::U8(values.to_vec()))
    }
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightFile {
    pub tensors: Vec<Tensor>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::WeightFormat(format!("truncated at byte {} (wanted {n} more)", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn elements<const N: usize, T>(&mut self, count: usize, f: fn([u8; N]) -> T) -> Result<Vec<T>> {
        let raw = self.take(
            count
                .checked_mul(N)
                .ok_or_else(|| Error::WeightFormat("tensor too large".into()))?,
        )?;
        Ok(raw
            .chunks_exact(N)
            .map(|c| f(c.try_into().expect("exact chunk")))
            .collect())
    }
}

impl WeightFile {
    pub fn push(&mut self, tensor: Tensor) {
        self.tensors.push(tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.data.tag());
            out.push(t.dims.len() as u8);
            for d in &t.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::I8(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::U8(v) => out.extend_from_slice(v),
                TensorData::I16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::U16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(4)? != MAGIC {
            return Err(Error::WeightFormat("bad magic".into()));
        }
        let version = c.u16()?;
        if version != VERSION {
            return Err(Error::WeightFormat(format!("unsupported version {version}")));
        }
        let count = c.u32()?;
        let mut file = WeightFile::default();
        for _ in 0..count {
            let name_len = c.u16()? as usize;
            let name = std::str::from_utf8(c.take(name_len)?)
                .map_err(|e| Error::WeightFormat(format!("tensor name is not UTF-8: {e}")))?
                .to_string();
            let tag = c.u8()?;
            let rank = c.u8()? as usize;
            let dims = (0..rank).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().map(|&d| d as usize).product();
            let data = match tag {
                0 => TensorData::F32(c.elements(n, f32::from_le_bytes)?),
                1 => TensorData::I8(c.elements(n, i8::from_le_bytes)?),
                2 => TensorData::U8(c.elements(n, u8::from_le_bytes)?),
                3 => TensorData::I16(c.elements(n, i16::from_le_bytes)?),
                4 => TensorData::U16(c.elements(n, u16::from_le_bytes)?),
                other => return Err(Error::WeightFormat(format!("tensor {name}: unknown dtype {other}"))),
            };
            file.push(Tensor::new(name, dims, data)?);
        }
        if c.pos != bytes.len() {
            return Err(Error::WeightFormat(format!("{} trailing bytes", bytes.len() - c.pos)));
        }
        Ok(file)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    fn lookup(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::WeightFormat(format!("missing tensor {name}")))
    }

    fn reals(&self, name: &str) -> Result<(Vec<f64>, &[u32])> {
        let t = self.lookup(name)?;
        match &t.data {
            TensorData::F32(v) => Ok((v.iter().map(|&x| x as f64).collect(), &t.dims)),
            other => Err(Error::WeightFormat(format!(
                "{name}: expected f32, found {}",
                other.dtype_name()
            ))),
        }
    }

    fn real_scalar(&self, name: &str) -> Result<f64> {
        match self.reals(name)?.0.as_slice() {
            [v] => Ok(*v),
            other => Err(Error::WeightFormat(format!(
                "{name}: expected one value, found {}",
                other.len()
            ))),
        }
    }

    fn bytes_of(&self, name: &str) -> Result<&[u8]> {
        match &self.lookup(name)?.data {
            TensorData::U8(v) => Ok(v),
            other => Err(Error::WeightFormat(format!(
                "{name}: expected u8, found {}",
                other.dtype_name()
            ))),
        }
    }

    fn matrix_dims(dims: &[u32], name: &str) -> Result<(usize, usize)> {
        match dims {
            [r, c] => Ok((*r as usize, *c as usize)),
            _ => Err(Error::WeightFormat(format!(
                "{name}: expected rank 2, found rank {}",
                dims.len()
            ))),
        }
    }

    fn put_dense(&mut self, prefix: &str, layer: &DenseLayer) -> Result<()> {
        self.push(Tensor::f32s(
            format!("{prefix}.weight"),
            vec![layer.rows() as u32, layer.cols() as u32],
            layer.weights().iter().copied(),
        )?);
        self.push(Tensor::f32s(
            format!("{prefix}.bias"),
            vec![layer.rows() as u32],
            layer.bias().iter().copied(),
        )?);
        Ok(())
    }

    fn dense(&self, prefix: &str) -> Result<DenseLayer> {
        let name = format!("{prefix}.weight");
        let (w, dims) = self.reals(&name)?;
        let (rows, cols) = Self::matrix_dims(dims, &name)?;
        DenseLayer::new(rows, cols, w, self.reals(&format!("{prefix}.bias"))?.0)
    }

    fn put_affine(&mut self, prefix: &str, a: &ChannelAffine) -> Result<()> {
        let n = vec![a.channels() as u32];
        self.push(Tensor::f32s(
            format!("{prefix}.scale"),
            n.clone(),
            a.scale().iter().copied(),
        )?);
        self.push(Tensor::f32s(format!("{prefix}.shift"), n, a.shift().iter().copied())?);
        Ok(())
    }

    fn affine(&self, prefix: &str) -> Result<ChannelAffine> {
        ChannelAffine::new(
            self.reals(&format!("{prefix}.scale"))?.0,
            self.reals(&format!("{prefix}.shift"))?.0,
        )
    }

    fn put_quantized(&mut self, prefix: &str, layer: &QuantizedLayer) -> Result<()> {
        let dims = vec![layer.rows() as u32, layer.cols() as u32];
        let data = if layer.weight_bits() <= 8 {
            TensorData::I8(layer.weights().iter().map(|&w| w as i8).collect())
        } else {
            TensorData::I16(layer.weights().to_vec())
        };
        let input = layer.input_table();
        self.push(Tensor::new(format!("{prefix}.weight"), dims, data)?);
        self.push(Tensor::scalar(format!("{prefix}.weight.scale"), layer.weight_scale())?);
        self.push(Tensor::flags(
            format!("{prefix}.weight.bits"),
            &[layer.weight_bits() as u8],
        )?);
        self.push(Tensor::f32s(
            format!("{prefix}.bias"),
            vec![layer.rows() as u32],
            layer.bias().iter().copied(),
        )?);
        self.push(Tensor::new(
            format!("{prefix}.input.lut"),
            vec![input.entries().len() as u32],
            TensorData::U16(input.entries().to_vec()),
        )?);
        self.push(Tensor::scalar(format!("{prefix}.input.scale"), input.scale())?);
        self.push(Tensor::flags(format!("{prefix}.input.bits"), &[input.bits() as u8])?);
        Ok(())
    }

    fn quantized(&self, prefix: &str) -> Result<QuantizedLayer> {
        let name = format!("{prefix}.weight");
        let t = self.lookup(&name)?;
        let (rows, cols) = Self::matrix_dims(&t.dims, &name)?;
        let weights: Vec<i16> = match &t.data {
            TensorData::I8(v) => v.iter().map(|&w| w as i16).collect(),
            TensorData::I16(v) => v.clone(),
            other => {
                return Err(Error::WeightFormat(format!(
                    "{name}: expected i8 or i16, found {}",
                    other.dtype_name()
                )))
            }
        };
        let single = |name: String| -> Result<u32> {
            match self.bytes_of(&name)? {
                [b] => Ok(*b as u32),
                _ => Err(Error::WeightFormat(format!("{name}: expected one value"))),
            }
        };
        let weight_bits = single(format!("{prefix}.weight.bits"))?;
        let input_bits = single(format!("{prefix}.input.bits"))?;
        let lut_name = format!("{prefix}.input.lut");
        let lut = match &self.lookup(&lut_name)?.data {
            TensorData::U16(v) => v.clone(),
            TensorData::U8(v) => v.iter().map(|&x| x as u16).collect(),
            other => {
                return Err(Error::WeightFormat(format!(
                    "{lut_name}: expected u16, found {}",
                    other.dtype_name()
                )))
            }
        };
        if !(2..=16).contains(&input_bits) {
            return Err(Error::WeightFormat(format!(
                "{prefix}: input bit width {input_bits} unsupported"
            )));
        }
        let levels = (1usize << input_bits) - 1;
        if lut.is_empty() || (lut.len() - 1) % levels != 0 {
            return Err(Error::WeightFormat(format!(
                "{lut_name}: length {} is not K·{levels} + 1",
                lut.len()
            )));
        }
        let granularity = (lut.len() - 1) / levels;
        let input = ActivationTable::new(
            input_bits,
            granularity,
            lut,
            self.real_scalar(&format!("{prefix}.input.scale"))?,
        )?;
        let weight_scale = self.real_scalar(&format!("{prefix}.weight.scale"))?;
        let combined = input.scale() * weight_scale / (input.levels() as f64 * weight_levels(weight_bits) as f64);
        QuantizedLayer::from_parts(
            rows,
            cols,
            weights,
            weight_bits,
            weight_scale,
            self.reals(&format!("{prefix}.bias"))?.0,
            combined,
            input,
        )
    }

    /// Adds the extractor under the `featnet.` prefix.
    pub fn put_featnet(&mut self, w: &FeatNetWeights) -> Result<()> {
        self.put_dense("featnet.conv1", w.conv1())?;
        self.put_affine("featnet.affine1", w.affine1())?;
        self.put_quantized("featnet.qconv2", w.qconv2())?;
        self.put_affine("featnet.affine2", w.affine2())?;
        self.put_quantized("featnet.qconv3", w.qconv3())?;
        self.put_affine("featnet.affine3", w.affine3())?;
        Ok(())
    }

    pub fn featnet(&self) -> Result<FeatNetWeights> {
        FeatNetWeights::new(
            self.dense("featnet.conv1")?,
            self.affine("featnet.affine1")?,
            self.quantized("featnet.qconv2")?,
            self.affine("featnet.affine2")?,
            self.quantized("featnet.qconv3")?,
            self.affine("featnet.affine3")?,
        )
    }

    fn actor_prefix(head: Head) -> &'static str {
        match head {
            Head::Translation => "actor.translation",
            Head::Rotation => "actor.rotation",
        }
    }

    pub fn put_actor(&mut self, head: Head, a: &ActorWeights) -> Result<()> {
        let p = Self::actor_prefix(head);
        self.put_quantized(&format!("{p}.fc1"), &a.fc1)?;
        if let Some(aff) = &a.affine1 {
            self.put_affine(&format!("{p}.affine1"), aff)?;
        }
        self.put_quantized(&format!("{p}.fc2"), &a.fc2)?;
        if let Some(aff) = &a.affine2 {
            self.put_affine(&format!("{p}.affine2"), aff)?;
        }
        self.put_dense(&format!("{p}.fc3"), &a.fc3)?;
        self.push(Tensor::flags(
            format!("{p}.relu"),
            &[a.relu1 as u8, a.relu2 as u8, a.relu3 as u8],
        )?);
        Ok(())
    }

    pub fn has_actor(&self, head: Head) -> bool {
        self.get(&format!("{}.fc1.weight", Self::actor_prefix(head))).is_some()
    }

    pub fn actor(&self, head: Head) -> Result<ActorWeights> {
        let p = Self::actor_prefix(head);
        let optional_affine = |name: String| -> Result<Option<ChannelAffine>> {
            if self.get(&format!("{name}.scale")).is_some() {
                self.affine(&name).map(Some)
            } else {
                Ok(None)
            }
        };
        let relu_name = format!("{p}.relu");
        let relu = match self.bytes_of(&relu_name)? {
            [a, b, c] => [*a != 0, *b != 0, *c != 0],
            _ => return Err(Error::WeightFormat(format!("{relu_name}: expected three flags"))),
        };
        Ok(ActorWeights {
            fc1: self.quantized(&format!("{p}.fc1"))?,
            affine1: optional_affine(format!("{p}.affine1"))?,
            relu1: relu[0],
            fc2: self.quantized(&format!("{p}.fc2"))?,
            affine2: optional_affine(format!("{p}.affine2"))?,
            relu2: relu[1],
            fc3: self.dense(&format!("{p}.fc3"))?,
            relu3: relu[2],
        })
    }

    /// Element count per dtype, for summaries.
    pub fn dtype_counts(&self) -> BTreeMap<&'static str, usize> {
        let mut out = BTreeMap::new();
        for t in &self.tensors {
            *out.entry(t.data.dtype_name()).or_insert(0) += t.data.len();
        }
        out
    }
}
