//! On-disk formats: `SPLATFMAP1` feature maps, PGM masks with concept
//! sidecars, the concept table, and a supervision directory tying them up.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{ConceptTable, SupervisionSet, ViewSupervision};
use crate::error::{Error, Result};
use crate::raster::image::{read_pnm, write_pgm};
use crate::raster::FeatureMap;
use crate::scene::{load_cameras, save_cameras};

pub const FMAP_MAGIC: &[u8; 10] = b"SPLATFMAP1";
pub const CONCEPT_MAGIC: &str = "#splatsense-concepts";
const HEADER_LEN: usize = 10 + 5 * 4;

/// Writes `maps[view][scale]`; every map must share one shape.
pub fn write_feature_maps(path: &Path, maps: &[Vec<FeatureMap>]) -> Result<()> {
    let scales = maps.first().map_or(0, Vec::len);
    let first = maps.first().and_then(|v| v.first());
    let (h, w, d) = first.map_or((0, 0, 0), |m| (m.height, m.width, m.dim));
    let mut buf = FMAP_MAGIC.to_vec();
    for v in [maps.len(), h, w, d, scales] {
        buf.extend((v as u32).to_le_bytes());
    }
    for (vi, view) in maps.iter().enumerate() {
        if view.len() != scales {
            return Err(Error::Shape(format!("view {vi} has {} scales, expected {scales}", view.len())));
        }
        for m in view {
            if (m.height, m.width, m.dim) != (h, w, d) {
                return Err(Error::Shape(format!("view {vi} map shape differs from the first map")));
            }
            for v in &m.data {
                buf.extend((*v as f32).to_le_bytes());
            }
        }
    }
    write_bytes(path, &buf)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads `maps[view][scale]`; `expected_dim` rejects a channel-count mismatch.
pub fn read_feature_maps(path: &Path, expected_dim: Option<usize>) -> Result<Vec<Vec<FeatureMap>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < FMAP_MAGIC.len() || &bytes[..FMAP_MAGIC.len()] != FMAP_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("{}: not a feature map file (bad magic)", path.display()),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: "truncated feature map header".into(),
        });
    }
    let field = |i: usize| u32::from_le_bytes(bytes[10 + 4 * i..14 + 4 * i].try_into().unwrap()) as usize;
    let (views, h, w, d, scales) = (field(0), field(1), field(2), field(3), field(4));
    if let Some(e) = expected_dim {
        if d != e {
            return Err(Error::Dimension(format!(
                "{} declares {d} channels, configuration expects {e}",
                path.display()
            )));
        }
    }
    let per_map = h * w * d;
    let need = HEADER_LEN as u64 + 4 * (views * scales * per_map) as u64;
    if (bytes.len() as u64) < need {
        // offset of the first value that is missing
        let complete = (bytes.len() - HEADER_LEN) / 4 * 4;
        return Err(Error::Format {
            offset: (HEADER_LEN + complete) as u64,
            msg: format!("payload truncated: {} bytes, header implies {need}", bytes.len()),
        });
    }
    if (bytes.len() as u64) > need {
        return Err(Error::Format {
            offset: need,
            msg: "trailing bytes after payload".into(),
        });
    }
    let mut pos = HEADER_LEN;
    let mut out = Vec::with_capacity(views);
    for _ in 0..views {
        let mut view = Vec::with_capacity(scales);
        for _ in 0..scales {
            let mut m = FeatureMap::zeros(w, h, d);
            for v in &mut m.data {
                *v = f32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as f64;
                pos += 4;
            }
            view.push(m);
        }
        out.push(view);
    }
    Ok(out)
}

pub fn write_concepts(path: &Path, table: &ConceptTable) -> Result<()> {
    let mut s = format!("{CONCEPT_MAGIC} v1 count={} dim={}\n", table.len(), table.dim());
    for (name, e) in table.names.iter().zip(&table.embeddings) {
        s.push_str(name);
        for v in e {
            let _ = write!(s, " {v}");
        }
        s.push('\n');
    }
    write_bytes(path, s.as_bytes())
}

pub fn read_concepts(path: &Path) -> Result<ConceptTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if !header.starts_with(CONCEPT_MAGIC) {
        return Err(Error::parse(path, 0, "missing concept table header"));
    }
    let mut names = Vec::new();
    let mut embeddings: Vec<Vec<f64>> = Vec::new();
    for (i, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
        let mut parts = line.split_whitespace();
        let name = parts.next().unwrap_or_default().to_string();
        let e: std::result::Result<Vec<f64>, _> = parts.map(str::parse::<f64>).collect();
        let e = e.map_err(|err| Error::parse(path, i, err.to_string()))?;
        if e.iter().any(|v| !v.is_finite()) {
            return Err(Error::parse(path, i, "non-finite embedding value"));
        }
        if let Some(first) = embeddings.first() {
            if first.len() != e.len() {
                return Err(Error::parse(path, i, "embedding dimension differs from record 0"));
            }
        }
        names.push(name);
        embeddings.push(e);
    }
    Ok(ConceptTable { names, embeddings })
}

/// Writes the label image as 8-bit PGM and the `id concept_name` sidecar.
pub fn write_mask(
    pgm: &Path,
    sidecar: &Path,
    width: usize,
    height: usize,
    mask: &[u32],
    mask_concept: &BTreeMap<u32, usize>,
    concepts: &ConceptTable,
) -> Result<()> {
    if let Some(&l) = mask.iter().find(|&&l| l > 255) {
        return Err(Error::Config(format!("mask label {l} does not fit in an 8-bit PGM")));
    }
    let bytes: Vec<u8> = mask.iter().map(|&l| l as u8).collect();
    if let Some(dir) = pgm.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_pgm(pgm, width, height, &bytes)?;
    let mut s = String::new();
    for (id, c) in mask_concept {
        let _ = writeln!(s, "{id} {}", concepts.names[*c]);
    }
    write_bytes(sidecar, s.as_bytes())
}

pub fn read_mask(pgm: &Path, sidecar: &Path, concepts: &ConceptTable) -> Result<(usize, usize, Vec<u32>, BTreeMap<u32, usize>)> {
    let (w, h, channels, px) = read_pnm(pgm)?;
    if channels != 1 {
        return Err(Error::Format {
            offset: 0,
            msg: format!("{}: mask must be a single-channel PGM", pgm.display()),
        });
    }
    let text = fs::read_to_string(sidecar).map_err(|e| Error::io(sidecar, e))?;
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let mut parts = line.split_whitespace();
        let id: u32 = parts
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::parse(sidecar, i, "expected `id concept_name`"))?;
        let name = parts.next().ok_or_else(|| Error::parse(sidecar, i, "missing concept name"))?;
        let c = concepts
            .id_of(name)
            .ok_or_else(|| Error::parse(sidecar, i, format!("unknown concept {name:?}")))?;
        map.insert(id, c);
    }
    Ok((w, h, px.into_iter().map(u32::from).collect(), map))
}

/// Directory layout: `cameras.txt`, `concepts.txt`, `rgb.fmap`,
/// `language.fmap`, `reg.fmap`, `masks/view_NNN.{pgm,txt}`.
pub fn save_supervision(dir: &Path, set: &SupervisionSet, concepts: &ConceptTable) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_cameras(&set.cameras, &dir.join("cameras.txt"))?;
    write_concepts(&dir.join("concepts.txt"), concepts)?;
    let rgb: Vec<Vec<FeatureMap>> = set.views.iter().map(|v| vec![v.rgb.clone()]).collect();
    write_feature_maps(&dir.join("rgb.fmap"), &rgb)?;
    let lang: Vec<Vec<FeatureMap>> = set.views.iter().map(|v| v.language.clone()).collect();
    write_feature_maps(&dir.join("language.fmap"), &lang)?;
    let reg: Vec<Vec<FeatureMap>> = set.views.iter().map(|v| vec![v.reg.clone()]).collect();
    write_feature_maps(&dir.join("reg.fmap"), &reg)?;
    for (i, v) in set.views.iter().enumerate() {
        write_mask(
            &dir.join(format!("masks/view_{i:03}.pgm")),
            &dir.join(format!("masks/view_{i:03}.txt")),
            set.width,
            set.height,
            &v.mask,
            &v.mask_concept,
            concepts,
        )?;
    }
    Ok(())
}

pub fn load_supervision(dir: &Path, d_clip: Option<usize>, d_reg: Option<usize>) -> Result<(SupervisionSet, ConceptTable)> {
    let cameras = load_cameras(&dir.join("cameras.txt"))?;
    let concepts = read_concepts(&dir.join("concepts.txt"))?;
    let rgb = read_feature_maps(&dir.join("rgb.fmap"), Some(3))?;
    let lang = read_feature_maps(&dir.join("language.fmap"), d_clip)?;
    let reg = read_feature_maps(&dir.join("reg.fmap"), d_reg)?;
    if rgb.len() != cameras.len() || lang.len() != cameras.len() || reg.len() != cameras.len() {
        return Err(Error::Shape(format!(
            "{} cameras, but maps hold {}/{}/{} views",
            cameras.len(),
            rgb.len(),
            lang.len(),
            reg.len()
        )));
    }
    let (width, height) = cameras.first().map_or((0, 0), |c| (c.width, c.height));
    let mut views = Vec::with_capacity(cameras.len());
    for (i, ((mut rgb, language), mut reg)) in rgb.into_iter().zip(lang).zip(reg).enumerate() {
        let (w, h, mask, mask_concept) = read_mask(
            &dir.join(format!("masks/view_{i:03}.pgm")),
            &dir.join(format!("masks/view_{i:03}.txt")),
            &concepts,
        )?;
        if (w, h) != (width, height) {
            return Err(Error::Shape(format!("mask {i} is {w}×{h}, cameras are {width}×{height}")));
        }
        views.push(ViewSupervision {
            mask,
            mask_concept,
            rgb: rgb.remove(0),
            language,
            reg: reg.remove(0),
        });
    }
    let set = SupervisionSet {
        width,
        height,
        cameras,
        views,
    };
    set.validate()?;
    Ok((set, concepts))
}
