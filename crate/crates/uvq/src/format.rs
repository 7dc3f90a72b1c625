//! Binary file formats. All integers and floats are little-endian; tensor
//! values and codewords are stored as 32-bit floats.
//!
//! ```text
//! UVQW  weight bundle      magic, version, data seed, network
//! UVQK  codebook           magic, version, provenance, fingerprint, codewords
//! UVQC  compressed model   magic, version, data seed, universal reference or
//!                          embedded codebook, topology, quantized layers,
//!                          residual tensors
//! ```
//!
//! A network is its topology (name, input shape, layer list, blocks)
//! followed by named tensors. Decoders reject unknown magic or versions,
//! truncated input and trailing bytes.

use thiserror::Error;
use uvq_core::codebook::Codebook;
use uvq_core::nn::{
    BatchNorm, Block, Compress, Conv3x3, Dense, Layer, ParamId, ParamKind, TinyNet,
};
use uvq_core::storage::{
    packed_len, unpack_assignments, CompressedLayer, CompressedModel, UniversalRef,
};
use uvq_core::Tensor;

pub const VERSION: u32 = 1;
pub const BUNDLE_MAGIC: [u8; 4] = *b"UVQW";
pub const CODEBOOK_MAGIC: [u8; 4] = *b"UVQK";
pub const MODEL_MAGIC: [u8; 4] = *b"UVQC";

/// Largest tensor a decoder will allocate, in elements.
const MAX_TENSOR: usize = 1 << 26;

#[derive(Debug, Error, PartialEq)]
pub enum FormatError {
    #[error("not a {expected} file")]
    Magic { expected: &'static str },
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("input truncated at byte {0}")]
    Truncated(usize),
    #[error("{0} trailing bytes after the end of the file")]
    Trailing(usize),
    #[error("invalid content: {0}")]
    Invalid(String),
}

type Result<T> = std::result::Result<T, FormatError>;

fn invalid(msg: impl Into<String>) -> FormatError {
    FormatError::Invalid(msg.into())
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("value fits in u32");
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f32s(&mut self, vs: &[f64]) {
        for &v in vs {
            self.buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len());
        self.buf.extend_from_slice(b);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(FormatError::Truncated(self.buf.len()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or(FormatError::Truncated(self.buf.len()))?,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| invalid("string is not UTF-8"))
    }

    fn bytes(&mut self) -> Result<Vec<u8>> {
        let n = self.u32()?;
        Ok(self.take(n)?.to_vec())
    }

    fn header(&mut self, magic: [u8; 4], expected: &'static str) -> Result<()> {
        if self.take(4).map_err(|_| FormatError::Magic { expected })? != magic {
            return Err(FormatError::Magic { expected });
        }
        match self.u32()? as u32 {
            VERSION => Ok(()),
            v => Err(FormatError::Version(v)),
        }
    }

    fn finish(self) -> Result<()> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            n => Err(FormatError::Trailing(n)),
        }
    }
}

fn compress_code(c: Compress) -> u8 {
    match c {
        Compress::Keep => 0,
        Compress::Universal => 1,
        Compress::PerLayer => 2,
    }
}

fn compress_from(code: u8) -> Result<Compress> {
    match code {
        0 => Ok(Compress::Keep),
        1 => Ok(Compress::Universal),
        2 => Ok(Compress::PerLayer),
        c => Err(invalid(format!("unknown compression policy {c}"))),
    }
}

fn write_topology(w: &mut Writer, net: &TinyNet) {
    w.str(&net.name);
    w.u32(net.input_shape.len());
    for &s in &net.input_shape {
        w.u32(s);
    }
    w.u32(net.layers.len());
    for layer in &net.layers {
        match layer {
            Layer::Dense(l) => {
                w.u8(0);
                w.u32(l.weight.shape()[1]);
                w.u32(l.weight.shape()[0]);
                w.u8(l.bias.is_some() as u8);
                w.u8(compress_code(l.compress));
            }
            Layer::Conv3x3(l) => {
                w.u8(1);
                w.u32(l.weight.shape()[1]);
                w.u32(l.weight.shape()[0]);
                w.u32(l.height);
                w.u32(l.width);
                w.u8(l.bias.is_some() as u8);
                w.u8(compress_code(l.compress));
            }
            Layer::BatchNorm(l) => {
                w.u8(2);
                w.u32(l.gamma.len());
                w.f64(l.eps);
            }
            Layer::Relu => w.u8(3),
            Layer::Flatten => w.u8(4),
            Layer::Softmax => w.u8(5),
        }
    }
    w.u32(net.blocks.len());
    for b in &net.blocks {
        w.str(&b.name);
        w.u32(b.start);
        w.u32(b.end);
    }
}

fn read_topology(r: &mut Reader<'_>) -> Result<TinyNet> {
    let name = r.str()?;
    let rank = r.u32()?;
    let input_shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let count = r.u32()?;
    let mut layers = Vec::new();
    let bias = |on: u8, n: usize| -> Result<Option<Tensor>> {
        match on {
            0 => Ok(None),
            1 => Ok(Some(Tensor::zeros(&[n]))),
            v => Err(invalid(format!("bad bias flag {v}"))),
        }
    };
    let sized = |dims: &[usize]| -> Result<()> {
        let total = dims.iter().try_fold(1usize, |a, &b| a.checked_mul(b));
        match total {
            Some(t) if t <= MAX_TENSOR => Ok(()),
            _ => Err(invalid(format!("tensor of shape {dims:?} is too large"))),
        }
    };
    for _ in 0..count {
        let layer = match r.u8()? {
            0 => {
                let (i, o) = (r.u32()?, r.u32()?);
                sized(&[o, i])?;
                let b = bias(r.u8()?, o)?;
                Layer::Dense(Dense {
                    weight: Tensor::zeros(&[o, i]),
                    bias: b,
                    compress: compress_from(r.u8()?)?,
                })
            }
            1 => {
                let (ci, co, height, width) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
                sized(&[co, ci, 9])?;
                let b = bias(r.u8()?, co)?;
                Layer::Conv3x3(Conv3x3 {
                    weight: Tensor::zeros(&[co, ci, 3, 3]),
                    bias: b,
                    height,
                    width,
                    compress: compress_from(r.u8()?)?,
                })
            }
            2 => {
                let ch = r.u32()?;
                sized(&[ch])?;
                let eps = r.f64()?;
                Layer::BatchNorm(BatchNorm {
                    gamma: Tensor::zeros(&[ch]),
                    beta: Tensor::zeros(&[ch]),
                    running_mean: Tensor::zeros(&[ch]),
                    running_var: Tensor::zeros(&[ch]),
                    eps,
                })
            }
            3 => Layer::Relu,
            4 => Layer::Flatten,
            5 => Layer::Softmax,
            k => return Err(invalid(format!("unknown layer kind {k}"))),
        };
        layers.push(layer);
    }
    let nb = r.u32()?;
    let mut blocks = Vec::new();
    for _ in 0..nb {
        blocks.push(Block {
            name: r.str()?,
            start: r.u32()?,
            end: r.u32()?,
        });
    }
    let net = TinyNet {
        name,
        input_shape,
        layers,
        blocks,
    };
    net.validate().map_err(|e| invalid(e.to_string()))?;
    Ok(net)
}

fn write_tensors(w: &mut Writer, net: &TinyNet, skip: &[ParamId]) {
    let ids: Vec<ParamId> = net
        .param_ids()
        .into_iter()
        .filter(|id| !skip.contains(id))
        .collect();
    w.u32(ids.len());
    for id in ids {
        let t = net.param(id).unwrap();
        w.str(&id.name());
        w.u32(t.shape().len());
        for &s in t.shape() {
            w.u32(s);
        }
        w.f32s(t.data());
    }
}

/// Reads named tensors into a topology; every parameter except `skip` must
/// appear exactly once with its declared shape.
fn read_tensors(r: &mut Reader<'_>, net: &mut TinyNet, skip: &[ParamId]) -> Result<()> {
    let mut expected: Vec<ParamId> = net
        .param_ids()
        .into_iter()
        .filter(|id| !skip.contains(id))
        .collect();
    let count = r.u32()?;
    for _ in 0..count {
        let name = r.str()?;
        let id =
            ParamId::parse(&name).ok_or_else(|| invalid(format!("bad tensor name '{name}'")))?;
        let pos = expected
            .iter()
            .position(|e| *e == id)
            .ok_or_else(|| invalid(format!("unexpected tensor '{name}'")))?;
        expected.swap_remove(pos);
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let slot = net.param_mut(id).unwrap();
        if shape != slot.shape() {
            return Err(invalid(format!(
                "tensor '{name}' has shape {shape:?}, expected {:?}",
                slot.shape()
            )));
        }
        let data = r.f32s(slot.len())?;
        *slot = Tensor::new(shape, data).map_err(|e| invalid(e.to_string()))?;
    }
    if let Some(id) = expected.first() {
        return Err(invalid(format!("missing tensor '{}'", id.name())));
    }
    Ok(())
}

/// A trained network and the seed of the dataset it was trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightBundle {
    pub net: TinyNet,
    pub data_seed: u64,
}

pub fn encode_bundle(b: &WeightBundle) -> Vec<u8> {
    let mut w = Writer::default();
    w.buf.extend_from_slice(&BUNDLE_MAGIC);
    w.u32(VERSION as usize);
    w.u64(b.data_seed);
    write_topology(&mut w, &b.net);
    write_tensors(&mut w, &b.net, &[]);
    w.buf
}

pub fn decode_bundle(bytes: &[u8]) -> Result<WeightBundle> {
    let mut r = Reader::new(bytes);
    r.header(BUNDLE_MAGIC, "UVQW weight bundle")?;
    let data_seed = r.u64()?;
    let mut net = read_topology(&mut r)?;
    read_tensors(&mut r, &mut net, &[])?;
    r.finish()?;
    Ok(WeightBundle { net, data_seed })
}

/// How a universal codebook was produced.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CodebookMeta {
    pub bandwidth: f64,
    pub quota: u64,
    pub seed: u64,
    pub sources: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodebookFile {
    pub codebook: Codebook,
    pub meta: CodebookMeta,
}

fn write_codebook(w: &mut Writer, cb: &Codebook) {
    w.u32(cb.k());
    w.u32(cb.d());
    w.u64(cb.fingerprint());
    w.f32s(cb.as_slice());
}

fn read_codebook(r: &mut Reader<'_>) -> Result<Codebook> {
    let (k, d) = (r.u32()?, r.u32()?);
    let fingerprint = r.u64()?;
    let n = k
        .checked_mul(d)
        .filter(|&n| n <= MAX_TENSOR)
        .ok_or_else(|| invalid("codebook is too large"))?;
    let cb = Codebook::new(k, d, r.f32s(n)?).map_err(|e| invalid(e.to_string()))?;
    if cb.fingerprint() != fingerprint {
        return Err(invalid("codebook fingerprint mismatch"));
    }
    Ok(cb)
}

pub fn encode_codebook(f: &CodebookFile) -> Vec<u8> {
    let mut w = Writer::default();
    w.buf.extend_from_slice(&CODEBOOK_MAGIC);
    w.u32(VERSION as usize);
    w.f64(f.meta.bandwidth);
    w.u64(f.meta.quota);
    w.u64(f.meta.seed);
    w.u32(f.meta.sources.len());
    for s in &f.meta.sources {
        w.str(s);
    }
    write_codebook(&mut w, &f.codebook);
    w.buf
}

pub fn decode_codebook(bytes: &[u8]) -> Result<CodebookFile> {
    let mut r = Reader::new(bytes);
    r.header(CODEBOOK_MAGIC, "UVQK codebook")?;
    let bandwidth = r.f64()?;
    let quota = r.u64()?;
    let seed = r.u64()?;
    let n = r.u32()?;
    let sources = (0..n).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
    let codebook = read_codebook(&mut r)?;
    r.finish()?;
    Ok(CodebookFile {
        codebook,
        meta: CodebookMeta {
            bandwidth,
            quota,
            seed,
            sources,
        },
    })
}

/// A compressed model, optionally carrying its universal codebook.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedFile {
    pub model: CompressedModel,
    pub embedded: Option<Codebook>,
    pub data_seed: u64,
}

fn skipped(model: &CompressedModel) -> Vec<ParamId> {
    model
        .layers
        .iter()
        .map(|l| ParamId {
            layer: l.layer,
            kind: ParamKind::Weight,
        })
        .collect()
}

pub fn encode_model(f: &CompressedFile) -> Vec<u8> {
    let m = &f.model;
    let mut w = Writer::default();
    w.buf.extend_from_slice(&MODEL_MAGIC);
    w.u32(VERSION as usize);
    w.u64(f.data_seed);
    match (&m.universal, &f.embedded) {
        (None, _) => w.u8(0),
        (Some(u), None) => {
            w.u8(1);
            w.u32(u.k);
            w.u32(u.d);
            w.u64(u.fingerprint);
        }
        (Some(_), Some(cb)) => {
            w.u8(2);
            write_codebook(&mut w, cb);
        }
    }
    write_topology(&mut w, &m.net);
    w.u32(m.layers.len());
    for l in &m.layers {
        w.u32(l.layer);
        w.u32(l.rows);
        w.u32(l.cols);
        w.u32(l.d);
        w.u32(l.k);
        w.u32(l.cols.div_ceil(l.d) * l.d - l.cols);
        match &l.codebook {
            None => w.u8(0),
            Some(cb) => {
                w.u8(1);
                write_codebook(&mut w, cb);
            }
        }
        w.bytes(&l.packed);
    }
    write_tensors(&mut w, &m.net, &skipped(m));
    w.buf
}

fn read_layer(r: &mut Reader<'_>, net: &TinyNet) -> Result<CompressedLayer> {
    let (layer, rows, cols, d, k, pad) =
        (r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    if d == 0 || k == 0 {
        return Err(invalid("layer with zero k or d"));
    }
    if pad != cols.div_ceil(d) * d - cols {
        return Err(invalid(format!(
            "layer {layer}: pad {pad} inconsistent with {cols} columns"
        )));
    }
    let shape = net.layers.get(layer).and_then(|l| l.weight_matrix_shape());
    if shape != Some((rows, cols)) {
        return Err(invalid(format!(
            "layer {layer} is not a {rows}x{cols} weight layer"
        )));
    }
    let codebook = match r.u8()? {
        0 => None,
        1 => Some(read_codebook(r)?),
        t => return Err(invalid(format!("unknown layer codebook tag {t}"))),
    };
    if codebook.as_ref().is_some_and(|c| c.k() != k || c.d() != d) {
        return Err(invalid(format!(
            "layer {layer}: codebook shape differs from k, d"
        )));
    }
    let packed = r.bytes()?;
    let cl = CompressedLayer {
        layer,
        rows,
        cols,
        d,
        k,
        codebook,
        packed,
    };
    if cl.packed.len() != packed_len(cl.sub_vectors(), k) {
        return Err(invalid(format!(
            "layer {layer}: assignment stream has the wrong length"
        )));
    }
    unpack_assignments(&cl.packed, cl.sub_vectors(), k).map_err(|e| invalid(e.to_string()))?;
    Ok(cl)
}

pub fn decode_model(bytes: &[u8]) -> Result<CompressedFile> {
    let mut r = Reader::new(bytes);
    r.header(MODEL_MAGIC, "UVQC compressed model")?;
    let data_seed = r.u64()?;
    let (universal, embedded) = match r.u8()? {
        0 => (None, None),
        1 => {
            let (k, d, fingerprint) = (r.u32()?, r.u32()?, r.u64()?);
            (Some(UniversalRef { k, d, fingerprint }), None)
        }
        2 => {
            let cb = read_codebook(&mut r)?;
            (Some(UniversalRef::of(&cb)), Some(cb))
        }
        t => return Err(invalid(format!("unknown codebook reference {t}"))),
    };
    let mut net = read_topology(&mut r)?;
    let count = r.u32()?;
    let mut layers: Vec<CompressedLayer> = Vec::new();
    for _ in 0..count {
        let cl = read_layer(&mut r, &net)?;
        if layers.iter().any(|l| l.layer == cl.layer) {
            return Err(invalid(format!("layer {} quantized twice", cl.layer)));
        }
        if cl.codebook.is_none() && universal.is_none_or(|u| u.k != cl.k || u.d != cl.d) {
            return Err(invalid(format!(
                "layer {} refers to a missing or mismatched universal codebook",
                cl.layer
            )));
        }
        layers.push(cl);
    }
    let model_skip: Vec<ParamId> = layers
        .iter()
        .map(|l| ParamId {
            layer: l.layer,
            kind: ParamKind::Weight,
        })
        .collect();
    read_tensors(&mut r, &mut net, &model_skip)?;
    r.finish()?;
    Ok(CompressedFile {
        model: CompressedModel {
            net,
            layers,
            universal,
        },
        embedded,
        data_seed,
    })
}
