//! Feature fields over 3D positions: grid encoders plus small decoding heads.

pub mod hashgrid;
pub mod head;
mod stack;

use std::fs;
use std::path::Path;

use nalgebra::Vector3;

pub use hashgrid::{HashGrid, HashGridConfig};
pub use head::Mlp;
pub use stack::{Batch, Encoder, FieldConfig, FieldGradients, HashFieldStack, PointFeatures, PointGradient};

use crate::error::{Error, Result};

pub const FIELD_MAGIC: &[u8; 11] = b"SPLATFIELD1";

/// Level-block outputs of grid encoding at `x`.
pub fn encode(grid: &HashGrid, x: &Vector3<f64>) -> Vec<f64> {
    grid.encode(x)
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend((v as u32).to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend(v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated checkpoint while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Header, then every parameter buffer as little-endian f32 in declaration order.
pub fn save_checkpoint(stack: &HashFieldStack, path: &Path) -> Result<()> {
    let c = &stack.config;
    let mut w = Writer(FIELD_MAGIC.to_vec());
    let (kind, rows, bbox) = match &stack.language_encoder {
        Encoder::Hash(g) => (0, 0, (g.bbox_min, g.bbox_max)),
        Encoder::PerGaussian { dim, params } => (1, params.len() / dim, (Vector3::zeros(), Vector3::zeros())),
    };
    w.u32(kind);
    w.u32(c.grid.levels);
    w.u32(c.grid.base_resolution);
    w.f64(c.grid.growth);
    w.u32(c.grid.table_size);
    w.u32(c.grid.feats_per_level);
    w.u32(c.hidden);
    w.u32(c.d_clip);
    w.u32(c.d_inst);
    w.u32(c.d_reg);
    w.u32(c.scale_levels);
    w.u32(c.share_grids as usize);
    w.u32(rows);
    for v in bbox.0.iter().chain(bbox.1.iter()) {
        w.f64(*v);
    }
    let buffers = stack.buffers();
    w.u32(buffers.len());
    for b in &buffers {
        w.u32(b.len());
    }
    for b in &buffers {
        for v in b.iter() {
            w.0.extend((*v as f32).to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, w.0).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<HashFieldStack> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(FIELD_MAGIC.len(), "magic")? != FIELD_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "not a field checkpoint (bad magic)".into(),
        });
    }
    let kind = r.u32("encoder kind")?;
    let grid = HashGridConfig {
        levels: r.u32("levels")?,
        base_resolution: r.u32("base resolution")?,
        growth: r.f64("growth")?,
        table_size: r.u32("table size")?,
        feats_per_level: r.u32("features per level")?,
    };
    let config = FieldConfig {
        grid,
        hidden: r.u32("hidden width")?,
        d_clip: r.u32("d_clip")?,
        d_inst: r.u32("d_inst")?,
        d_reg: r.u32("d_reg")?,
        scale_levels: r.u32("scale levels")?,
        share_grids: r.u32("share flag")? != 0,
        per_gaussian: kind == 1,
        ..FieldConfig::default()
    };
    if kind > 1 {
        return Err(Error::Format {
            offset: FIELD_MAGIC.len() as u64,
            msg: format!("unknown encoder kind {kind}"),
        });
    }
    let rows = r.u32("per-gaussian rows")?;
    let mut b = [0.0; 6];
    for v in &mut b {
        *v = r.f64("bounding box")?;
    }
    let header_end = r.pos;
    config.validate().map_err(|e| Error::Format {
        offset: header_end as u64,
        msg: e.to_string(),
    })?;
    let bbox = (Vector3::new(b[0], b[1], b[2]), Vector3::new(b[3], b[4], b[5]));
    let mut stack = HashFieldStack::zeroed(config, bbox, rows)?;
    let count = r.u32("buffer count")?;
    let expected: Vec<usize> = stack.buffers().iter().map(|b| b.len()).collect();
    let mut lens = Vec::with_capacity(count);
    for _ in 0..count {
        lens.push(r.u32("buffer length")?);
    }
    if lens != expected {
        return Err(Error::Format {
            offset: header_end as u64,
            msg: format!("buffer sizes {lens:?} do not match the declared configuration {expected:?}"),
        });
    }
    for buf in stack.buffers_mut() {
        for v in buf.iter_mut() {
            *v = f32::from_le_bytes(r.take(4, "parameters")?.try_into().unwrap()) as f64;
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            msg: "trailing bytes after parameters".into(),
        });
    }
    Ok(stack)
}
