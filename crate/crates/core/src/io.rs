//! Binary artifacts: ID tables, trained models and downstream heads.
//!
//! Everything is little-endian. Real numbers are stored as f32, which is
//! what every tensor holds in memory, so a save/load cycle is lossless.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::downstream::{IdEmbedder, MlpHead, NodeIdTable};
use crate::error::{Error, Result};
use crate::nn::{Mlp, Parameters};
use crate::train::{NidModel, TrainConfig};
use crate::vq::Metric;

pub const ID_MAGIC: [u8; 4] = *b"NID1";
pub const ID_VERSION: u16 = 1;
/// magic + version + node count + L, M, K, packing.
pub const ID_HEADER_LEN: u64 = 4 + 2 + 8 + 4;
pub const PACK_NIBBLE: u8 = 0;
pub const PACK_BYTE: u8 = 1;

pub const MODEL_MAGIC: [u8; 4] = *b"NIDM";
pub const MODEL_VERSION: u16 = 1;
pub const HEAD_MAGIC: [u8; 4] = *b"NIDH";
pub const HEAD_VERSION: u16 = 1;

/// Payload bytes of one node: codes are nibble-packed when `K <= 16`.
pub fn id_bytes_per_node(width: usize, k: usize) -> u64 {
    if k <= 16 {
        width.div_ceil(2) as u64
    } else {
        width as u64
    }
}

/// Payload size of an ID file, excluding the header.
pub fn id_payload_len(num_nodes: usize, width: usize, k: usize) -> u64 {
    num_nodes as u64 * id_bytes_per_node(width, k)
}

/// Exact on-disk size of an ID file.
pub fn id_file_len(num_nodes: usize, width: usize, k: usize) -> u64 {
    ID_HEADER_LEN + id_payload_len(num_nodes, width, k)
}

fn small(v: usize, what: &str) -> Result<u8> {
    u8::try_from(v).map_err(|_| Error::Format(format!("{what} = {v} does not fit in a byte")))
}

pub fn write_ids(tbl: &NodeIdTable, mut w: impl Write) -> Result<()> {
    let width = tbl.width();
    let nibble = tbl.k <= 16;
    let mut head = Vec::with_capacity(ID_HEADER_LEN as usize);
    head.extend_from_slice(&ID_MAGIC);
    head.extend_from_slice(&ID_VERSION.to_le_bytes());
    head.extend_from_slice(&(tbl.num_nodes as u64).to_le_bytes());
    head.push(small(tbl.layers, "L")?);
    head.push(small(tbl.levels, "M")?);
    head.push(small(tbl.k, "K")?);
    head.push(if nibble { PACK_NIBBLE } else { PACK_BYTE });
    w.write_all(&head)?;
    let per = id_bytes_per_node(width, tbl.k) as usize;
    let mut buf = vec![0u8; per];
    for v in 0..tbl.num_nodes {
        let id = tbl.id(v);
        if nibble {
            buf.fill(0);
            for (p, &c) in id.iter().enumerate() {
                buf[p / 2] |= c << (4 * (p % 2));
            }
            w.write_all(&buf)?;
        } else {
            w.write_all(id)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_ids(mut r: impl Read) -> Result<NodeIdTable> {
    let mut head = [0u8; ID_HEADER_LEN as usize];
    r.read_exact(&mut head)?;
    if head[..4] != ID_MAGIC {
        return Err(Error::Format("not an ID file (bad magic)".into()));
    }
    let version = u16::from_le_bytes([head[4], head[5]]);
    if version != ID_VERSION {
        return Err(Error::Format(format!("unsupported ID file version {version}")));
    }
    let n = u64::from_le_bytes(head[6..14].try_into().expect("8 bytes")) as usize;
    let (layers, levels, k, packing) = (head[14] as usize, head[15] as usize, head[16] as usize, head[17]);
    let expect = if k <= 16 { PACK_NIBBLE } else { PACK_BYTE };
    if packing != expect {
        return Err(Error::Format(format!("packing {packing} inconsistent with K = {k}")));
    }
    let width = layers * levels;
    let per = id_bytes_per_node(width, k) as usize;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != n * per {
        return Err(Error::Format(format!(
            "payload is {} bytes, expected {}",
            payload.len(),
            n * per
        )));
    }
    let codes = if packing == PACK_NIBBLE {
        let mut codes = Vec::with_capacity(n * width);
        for node in payload.chunks_exact(per.max(1)).take(n) {
            for p in 0..width {
                codes.push((node[p / 2] >> (4 * (p % 2))) & 0x0f);
            }
            if width % 2 == 1 && node[per - 1] >> 4 != 0 {
                return Err(Error::Format("non-zero padding nibble".into()));
            }
        }
        codes
    } else {
        payload
    };
    NodeIdTable::new(layers, levels, k, codes)
}

pub fn save_ids(tbl: &NodeIdTable, path: impl AsRef<Path>) -> Result<()> {
    write_ids(tbl, BufWriter::new(File::create(path)?))
}

pub fn load_ids(path: impl AsRef<Path>) -> Result<NodeIdTable> {
    read_ids(BufReader::new(File::open(path)?))
}

struct Out<W: Write>(W);

impl<W: Write> Out<W> {
    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.0.write_all(b)?;
        Ok(())
    }

    fn u8(&mut self, v: u8) -> Result<()> {
        self.bytes(&[v])
    }

    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} overflows u32")))?;
        self.bytes(&v.to_le_bytes())
    }

    fn f32(&mut self, v: f32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    fn text(&mut self, s: &str) -> Result<()> {
        self.u32(s.len())?;
        self.bytes(s.as_bytes())
    }

    fn floats(&mut self, v: &[f32]) -> Result<()> {
        for &x in v {
            self.f32(x)?;
        }
        Ok(())
    }

    fn tensor(&mut self, t: &Tensor) -> Result<()> {
        self.u32(t.rows())?;
        self.u32(t.cols())?;
        self.floats(t.data())
    }
}

struct In<R: Read>(R);

impl<R: Read> In<R> {
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0.read_exact(&mut b)?;
        Ok(b)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.array()?) as usize)
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    fn text(&mut self) -> Result<String> {
        let n = self.u32()?;
        let mut b = vec![0u8; n];
        self.0.read_exact(&mut b)?;
        String::from_utf8(b).map_err(|_| Error::Format("text field is not UTF-8".into()))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f32>> {
        (0..n).map(|_| self.f32()).collect()
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rows = self.u32()?;
        let cols = self.u32()?;
        let data = self.floats(rows * cols)?;
        Tensor::from_vec(rows, cols, data)
    }

    /// Reads a tensor into `dst`, which fixes the expected shape.
    fn tensor_into(&mut self, dst: &mut Tensor, what: &'static str) -> Result<()> {
        let t = self.tensor()?;
        if t.shape() != dst.shape() {
            return Err(Error::ShapeMismatch {
                op: what,
                left: dst.shape(),
                right: t.shape(),
            });
        }
        *dst = t;
        Ok(())
    }

    fn magic(&mut self, want: [u8; 4], version: u16, what: &str) -> Result<()> {
        if self.array::<4>()? != want {
            return Err(Error::Format(format!("not a {what} file (bad magic)")));
        }
        let v = self.u16()?;
        if v != version {
            return Err(Error::Format(format!("unsupported {what} file version {v}")));
        }
        Ok(())
    }
}

fn metric_tag(m: Metric) -> u8 {
    match m {
        Metric::Cosine => 0,
        Metric::L2 => 1,
    }
}

/// Writes a trained model. `manifest` is free-form `key=value` text recorded
/// verbatim for reproducibility.
pub fn write_model(model: &NidModel, manifest: &str, w: impl Write) -> Result<()> {
    let mut o = Out(w);
    o.bytes(&MODEL_MAGIC)?;
    o.bytes(&MODEL_VERSION.to_le_bytes())?;
    o.text(&model.config.to_text())?;
    o.text(manifest)?;
    o.u32(model.encoder.d_in())?;
    match &model.head {
        Some(h) => {
            o.u8(1)?;
            let mut dims = vec![h.d_in()];
            dims.extend(h.layers.iter().map(|l| l.d_out()));
            o.u32(dims.len())?;
            for d in dims {
                o.u32(d)?;
            }
        }
        None => o.u8(0)?,
    }
    let params = model.trainable();
    o.u32(params.len())?;
    for p in params {
        o.tensor(p)?;
    }
    match &model.codebooks {
        Some(set) => {
            o.u8(1)?;
            o.u32(set.codebooks.len())?;
            for cb in &set.codebooks {
                o.u32(cb.k())?;
                o.u32(cb.dim())?;
                o.u8(metric_tag(cb.metric))?;
                o.floats(cb.vectors.data())?;
                o.floats(&cb.ema_count)?;
                o.floats(cb.ema_sum.data())?;
            }
        }
        None => o.u8(0)?,
    }
    o.0.flush()?;
    Ok(())
}

/// Reads a model written by [`write_model`]; returns it with its manifest.
pub fn read_model(r: impl Read) -> Result<(NidModel, String)> {
    let mut i = In(r);
    i.magic(MODEL_MAGIC, MODEL_VERSION, "model")?;
    let cfg = TrainConfig::from_text(&i.text()?)?;
    let manifest = i.text()?;
    let d_in = i.u32()?;
    let head_dims = match i.u8()? {
        0 => None,
        _ => {
            let n = i.u32()?;
            Some((0..n).map(|_| i.u32()).collect::<Result<Vec<_>>>()?)
        }
    };
    let mut model = NidModel::new(&cfg, d_in, head_dims)?;
    let count = i.u32()?;
    let mut params = model.trainable_mut();
    if count != params.len() {
        return Err(Error::Format(format!(
            "model stores {count} tensors, configuration implies {}",
            params.len()
        )));
    }
    for p in params.iter_mut() {
        i.tensor_into(p, "model tensor")?;
    }
    let has_codebooks = i.u8()? != 0;
    match (&mut model.codebooks, has_codebooks) {
        (Some(set), true) => {
            let n = i.u32()?;
            if n != set.codebooks.len() {
                return Err(Error::Format(format!(
                    "model stores {n} codebooks, configuration implies {}",
                    set.codebooks.len()
                )));
            }
            for cb in &mut set.codebooks {
                let (k, d) = (i.u32()?, i.u32()?);
                if (k, d) != (cb.k(), cb.dim()) {
                    return Err(Error::Format(format!(
                        "codebook is {k}×{d}, expected {}×{}",
                        cb.k(),
                        cb.dim()
                    )));
                }
                let tag = i.u8()?;
                if tag != metric_tag(cb.metric) {
                    return Err(Error::Format(format!("codebook metric tag {tag} disagrees with config")));
                }
                cb.vectors = Tensor::from_vec(k, d, i.floats(k * d)?)?;
                cb.ema_count = i.floats(k)?;
                cb.ema_sum = Tensor::from_vec(k, d, i.floats(k * d)?)?;
            }
        }
        (None, false) => {}
        _ => return Err(Error::Format("codebook presence disagrees with M".into())),
    }
    Ok((model, manifest))
}

pub fn save_model(model: &NidModel, manifest: &str, path: impl AsRef<Path>) -> Result<()> {
    write_model(model, manifest, BufWriter::new(File::create(path)?))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(NidModel, String)> {
    read_model(BufReader::new(File::open(path)?))
}

/// Writes a downstream head plus free-form `key=value` metadata (task kind,
/// pooling, class count).
pub fn write_head(head: &MlpHead, meta: &str, w: impl Write) -> Result<()> {
    let mut o = Out(w);
    o.bytes(&HEAD_MAGIC)?;
    o.bytes(&HEAD_VERSION.to_le_bytes())?;
    o.text(meta)?;
    match &head.embedder {
        IdEmbedder::OneHot { width, k } => {
            o.u8(0)?;
            o.u32(*width)?;
            o.u32(*k)?;
        }
        IdEmbedder::Learned { tables } => {
            o.u8(1)?;
            o.u32(tables.len())?;
            for t in tables {
                o.tensor(t)?;
            }
        }
    }
    o.f32(head.mlp.dropout_p)?;
    o.u32(head.mlp.layers.len())?;
    for p in head.mlp.params() {
        o.tensor(p)?;
    }
    o.0.flush()?;
    Ok(())
}

pub fn read_head(r: impl Read) -> Result<(MlpHead, String)> {
    let mut i = In(r);
    i.magic(HEAD_MAGIC, HEAD_VERSION, "head")?;
    let meta = i.text()?;
    let embedder = match i.u8()? {
        0 => IdEmbedder::OneHot {
            width: i.u32()?,
            k: i.u32()?,
        },
        1 => {
            let n = i.u32()?;
            IdEmbedder::Learned {
                tables: (0..n).map(|_| i.tensor()).collect::<Result<_>>()?,
            }
        }
        t => return Err(Error::Format(format!("unknown embedder tag {t}"))),
    };
    let dropout_p = i.f32()?;
    let n = i.u32()?;
    if n == 0 {
        return Err(Error::Format("head has no layers".into()));
    }
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let weight = i.tensor()?;
        let bias = i.tensor()?;
        if bias.shape() != (1, weight.cols()) {
            return Err(Error::Format("head bias shape disagrees with weight".into()));
        }
        layers.push(crate::nn::Linear { weight, bias });
    }
    for w in layers.windows(2) {
        if w[0].d_out() != w[1].d_in() {
            return Err(Error::Format("head layer widths do not chain".into()));
        }
    }
    Ok((
        MlpHead {
            embedder,
            mlp: Mlp { layers, dropout_p },
        },
        meta,
    ))
}

pub fn save_head(head: &MlpHead, meta: &str, path: impl AsRef<Path>) -> Result<()> {
    write_head(head, meta, BufWriter::new(File::create(path)?))
}

pub fn load_head(path: impl AsRef<Path>) -> Result<(MlpHead, String)> {
    read_head(BufReader::new(File::open(path)?))
}
