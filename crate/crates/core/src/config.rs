//! Flat `key = value` run configuration covering training and decoding.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::cluster::{DecodeConfig, Extraction};
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

pub const CONFIG_MAGIC: &str = "#splatsense-config v1";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    /// Supervision directory written by `gen`.
    pub data: Option<PathBuf>,
    /// Run directory for checkpoints and reports.
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
            data: None,
            out: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let w = &mut t.weights;
        let f = &mut t.fields;
        let d = &mut self.decode;
        match key {
            "data" => self.data = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            "seed" => t.seed = parse(key, value)?,
            "iterations" => t.iterations = parse(key, value)?,
            "lr_gaussians" => t.lr_gaussians = parse(key, value)?,
            "lr_fields" => t.lr_fields = parse(key, value)?,
            "warmup_rgb_fraction" => t.warmup_rgb_fraction = parse(key, value)?,
            "geometry_from_semantics" => t.geometry_from_semantics = parse_bool(key, value)?,
            "train_opacity" => t.train_opacity = parse_bool(key, value)?,
            "freeze_geometry_after_warmup" => t.freeze_geometry_after_warmup = parse_bool(key, value)?,
            "views_per_step" => t.views_per_step = parse(key, value)?,
            "lambda_lang" => w.lambda_lang = parse(key, value)?,
            "lambda_inst" => w.lambda_inst = parse(key, value)?,
            "lambda_reg" => w.lambda_reg = parse(key, value)?,
            "gamma" => w.gamma = parse(key, value)?,
            "w_neg" => w.w_neg = parse(key, value)?,
            "huber_delta" => w.huber_delta = parse(key, value)?,
            "stop_grad_representatives" => w.stop_grad_representatives = parse_bool(key, value)?,
            "hash_levels" => f.grid.levels = parse(key, value)?,
            "hash_base_resolution" => f.grid.base_resolution = parse(key, value)?,
            "hash_growth" => f.grid.growth = parse(key, value)?,
            "hash_table_size" => f.grid.table_size = parse(key, value)?,
            "hash_feats_per_level" => f.grid.feats_per_level = parse(key, value)?,
            "head_hidden" => f.hidden = parse(key, value)?,
            "d_inst" => f.d_inst = parse(key, value)?,
            "share_grids" => f.share_grids = parse_bool(key, value)?,
            "per_gaussian" => f.per_gaussian = parse_bool(key, value)?,
            "init_bound" => f.init_bound = parse(key, value)?,
            "render_near" => t.render.near = parse(key, value)?,
            "render_blur" => t.render.blur = parse(key, value)?,
            "render_alpha_floor" => t.render.alpha_floor = parse(key, value)?,
            "render_alpha_cap" => t.render.alpha_cap = parse(key, value)?,
            "min_cluster_size" => d.min_cluster_size = parse(key, value)?,
            "min_samples" => d.min_samples = parse(key, value)?,
            "relevance_threshold" => d.relevance_threshold = parse(key, value)?,
            "relevance_sharpness" => d.relevance_sharpness = parse(key, value)?,
            "dbscan_eps" => d.dbscan_eps = if value == "auto" { None } else { Some(parse(key, value)?) },
            "dbscan_min_pts" => d.dbscan_min_pts = parse(key, value)?,
            "extraction" => {
                d.extraction = match value {
                    "eom" => Extraction::ExcessOfMass,
                    "leaf" => Extraction::Leaf,
                    _ => return Err(Error::Config(format!("extraction must be eom or leaf, got {value:?}"))),
                }
            }
            _ => return Err(Error::Usage(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a stable order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let w = &t.weights;
        let f = &t.fields;
        let d = &self.decode;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let mut v: Vec<(&'static str, String)> = Vec::new();
        if let Some(p) = path(&self.data) {
            v.push(("data", p));
        }
        if let Some(p) = path(&self.out) {
            v.push(("out", p));
        }
        v.extend([
            ("seed", t.seed.to_string()),
            ("iterations", t.iterations.to_string()),
            ("lr_gaussians", t.lr_gaussians.to_string()),
            ("lr_fields", t.lr_fields.to_string()),
            ("warmup_rgb_fraction", t.warmup_rgb_fraction.to_string()),
            ("geometry_from_semantics", t.geometry_from_semantics.to_string()),
            ("train_opacity", t.train_opacity.to_string()),
            ("freeze_geometry_after_warmup", t.freeze_geometry_after_warmup.to_string()),
            ("views_per_step", t.views_per_step.to_string()),
            ("lambda_lang", w.lambda_lang.to_string()),
            ("lambda_inst", w.lambda_inst.to_string()),
            ("lambda_reg", w.lambda_reg.to_string()),
            ("gamma", w.gamma.to_string()),
            ("w_neg", w.w_neg.to_string()),
            ("huber_delta", w.huber_delta.to_string()),
            ("stop_grad_representatives", w.stop_grad_representatives.to_string()),
            ("hash_levels", f.grid.levels.to_string()),
            ("hash_base_resolution", f.grid.base_resolution.to_string()),
            ("hash_growth", f.grid.growth.to_string()),
            ("hash_table_size", f.grid.table_size.to_string()),
            ("hash_feats_per_level", f.grid.feats_per_level.to_string()),
            ("head_hidden", f.hidden.to_string()),
            ("d_inst", f.d_inst.to_string()),
            ("share_grids", f.share_grids.to_string()),
            ("per_gaussian", f.per_gaussian.to_string()),
            ("init_bound", f.init_bound.to_string()),
            ("render_near", t.render.near.to_string()),
            ("render_blur", t.render.blur.to_string()),
            ("render_alpha_floor", t.render.alpha_floor.to_string()),
            ("render_alpha_cap", t.render.alpha_cap.to_string()),
            ("min_cluster_size", d.min_cluster_size.to_string()),
            ("min_samples", d.min_samples.to_string()),
            ("relevance_threshold", d.relevance_threshold.to_string()),
            ("relevance_sharpness", d.relevance_sharpness.to_string()),
            ("dbscan_eps", d.dbscan_eps.map_or_else(|| "auto".to_string(), |e| e.to_string())),
            ("dbscan_min_pts", d.dbscan_min_pts.to_string()),
            (
                "extraction",
                match d.extraction {
                    Extraction::ExcessOfMass => "eom".to_string(),
                    Extraction::Leaf => "leaf".to_string(),
                },
            ),
        ]);
        v
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, path: &Path, text: &str) -> Result<()> {
        for (record, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(path, record, format!("expected `key = value`, got {line:?}")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::default();
        c.apply_text(path, &text)?;
        Ok(c)
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("--set expects key=value, got {o:?}")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.decode.validate()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{CONFIG_MAGIC}\n");
        for (k, v) in self.entries() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn as_map(&self) -> BTreeMap<&'static str, String> {
        self.entries().into_iter().collect()
    }
}
