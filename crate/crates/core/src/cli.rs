//! Command-line entry points. Exit codes: 0 success, 1 usage or
//! configuration error, 2 data or format error, 3 numeric abort.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::cluster::{decode, write_decode, DecodeInputs};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evalquery::{
    ablation_table, evaluate_checkpoint, metrics_csv, run_ablation, select_decoded, DECODE_VARIANTS,
};
use crate::fields::{load_checkpoint, save_checkpoint, HashFieldStack};
use crate::raster::image::{write_pgm_unit, write_ppm};
use crate::raster::{Attributes, Frame, RenderOptions};
use crate::scene::{load_scene, save_scene, GaussianScene};
use crate::supervision::io::{load_supervision, save_supervision};
use crate::supervision::{generate_synthetic, ConceptTable, SceneSpec, SupervisionSet};
use crate::trainer::{build_fields, log_csv, train, TrainConfig};

pub const GT_SCENE: &str = "scene_gt.txt";
pub const INIT_SCENE: &str = "scene_init.txt";
pub const TRAIN_CFG: &str = "train.cfg";
pub const EFFECTIVE_CFG: &str = "effective.cfg";
pub const SCENE_FILE: &str = "scene.txt";
pub const FIELDS_FILE: &str = "fields.ckpt";

#[derive(Parser, Debug)]
#[command(name = "splatsense", about = "Open-vocabulary instance decoding over Gaussian scenes")]
struct Cli {
    /// Worker threads (1 is the determinism reference).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config override `key=value`; wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Supervision directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene with its supervision.
    Gen {
        #[arg(long, default_value = "default")]
        spec: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the scene and feature fields.
    Train(Common),
    /// Decode instances from a trained run.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        concept: Option<String>,
        #[arg(long)]
        embedding: Option<PathBuf>,
    },
    /// Select objects for a query and render their masks.
    Query {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "embedding", required_unless_present = "embedding")]
        concept: Option<String>,
        #[arg(long)]
        embedding: Option<PathBuf>,
    },
    /// Per-concept selection metrics of a trained run.
    EvalSelection(Common),
    /// Class-agnostic instance metrics of a trained run.
    EvalInstances(Common),
    /// Train every ablation variant and tabulate selection metrics.
    Ablate(Common),
    /// Render an RGB image (PPM) or the coverage (PGM) of one view.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        view: usize,
        #[arg(long, default_value = "rgb", value_parser = ["rgb", "alpha"])]
        what: String,
        /// Output image path.
        #[arg(long)]
        image: PathBuf,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) | Error::Config(_) => 1,
        Error::NonFinite { .. } => 3,
        _ => 2,
    }
}

/// Parses `argv` (program name first) and runs the command.
pub fn run(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.threads {
        Some(0) => Err(Error::Usage("--threads must be at least 1".into())),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(cli.command)),
            Err(e) => Err(Error::Usage(format!("cannot build thread pool: {e}"))),
        },
        None => dispatch(cli.command),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut c = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    c.apply_overrides(&common.set)?;
    if let Some(d) = &common.data {
        c.data = Some(d.clone());
    }
    if let Some(o) = &common.out {
        c.out = Some(o.clone());
    }
    c.validate()?;
    Ok(c)
}

fn data_dir(c: &RunConfig) -> Result<&Path> {
    c.data.as_deref().ok_or_else(|| Error::Usage("no supervision directory (set `data` or pass --data)".into()))
}

fn run_dir(c: &RunConfig) -> Result<&Path> {
    c.out.as_deref().ok_or_else(|| Error::Usage("no run directory (set `out` or pass --out)".into()))
}

struct Data {
    supervision: SupervisionSet,
    concepts: ConceptTable,
}

fn load_data(c: &RunConfig) -> Result<Data> {
    let (supervision, concepts) = load_supervision(data_dir(c)?, None, None)?;
    Ok(Data { supervision, concepts })
}

/// Field widths come from the supervision, not the config.
fn bind_to_data(train: &TrainConfig, data: &Data) -> TrainConfig {
    let mut t = train.clone();
    t.fields.d_clip = data.concepts.dim();
    t.fields.d_reg = data.supervision.views[0].reg.dim;
    t.fields.scale_levels = data.supervision.scale_levels();
    t
}

fn load_run(dir: &Path) -> Result<(GaussianScene, HashFieldStack)> {
    Ok((load_scene(&dir.join(SCENE_FILE))?, load_checkpoint(&dir.join(FIELDS_FILE))?))
}

fn read_embedding(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (record, line) in text.lines().filter(|l| !l.trim_start().starts_with('#')).enumerate() {
        for tok in line.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::parse(path, record, format!("invalid number {tok:?}")))?;
            out.push(v);
        }
    }
    Ok(out)
}

fn query_vector(data: &Data, concept: Option<&str>, embedding: Option<&Path>) -> Result<Option<(String, Vec<f64>)>> {
    match (concept, embedding) {
        (Some(name), _) => {
            let id = data
                .concepts
                .id_of(name)
                .ok_or_else(|| Error::Usage(format!("unknown concept {name:?}")))?;
            Ok(Some((name.to_string(), data.concepts.embeddings[id].clone())))
        }
        (None, Some(p)) => {
            let v = read_embedding(p)?;
            if v.len() != data.concepts.dim() {
                return Err(Error::Dimension(format!(
                    "query embedding has {} values, concepts have {}",
                    v.len(),
                    data.concepts.dim()
                )));
            }
            Ok(Some(("embedding".to_string(), v)))
        }
        (None, None) => Ok(None),
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Gen { spec, seed, out } => cmd_gen(&spec, seed, &out),
        Command::Train(common) => cmd_train(&common),
        Command::Decode { common, concept, embedding } => cmd_decode(&common, concept.as_deref(), embedding.as_deref()),
        Command::Query { common, concept, embedding } => cmd_query(&common, concept.as_deref(), embedding.as_deref()),
        Command::EvalSelection(common) => cmd_eval_selection(&common),
        Command::EvalInstances(common) => cmd_eval_instances(&common),
        Command::Ablate(common) => cmd_ablate(&common),
        Command::Render { common, view, what, image } => cmd_render(&common, view, &what, &image),
    }
}

fn cmd_gen(spec_name: &str, seed: u64, out: &Path) -> Result<()> {
    let spec = SceneSpec::named(spec_name)?;
    let data = generate_synthetic(&spec, seed)?;
    create_dir(out)?;
    save_supervision(out, &data.supervision, &data.concepts)?;
    save_scene(&data.gt_scene, &out.join(GT_SCENE))?;
    save_scene(&data.init_scene, &out.join(INIT_SCENE))?;
    let mut c = RunConfig::default();
    c.train.seed = seed;
    c.data = Some(out.to_path_buf());
    c.out = Some(out.join("run"));
    c.save(&out.join(TRAIN_CFG))?;
    println!(
        "generated {} primitives, {} views, {} concepts in {}",
        data.gt_scene.len(),
        data.supervision.views.len(),
        data.concepts.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train(common: &Common) -> Result<()> {
    let c = resolve(common)?;
    let data = load_data(&c)?;
    let out = run_dir(&c)?;
    let init = load_scene(&data_dir(&c)?.join(INIT_SCENE))?;
    let tc = bind_to_data(&c.train, &data);
    create_dir(out)?;
    c.save(&out.join(EFFECTIVE_CFG))?;
    let fields = build_fields(&tc, &init)?;
    let result = train(init, fields, &data.supervision, &tc)?;
    save_scene(&result.scene, &out.join(SCENE_FILE))?;
    save_checkpoint(&result.fields, &out.join(FIELDS_FILE))?;
    write_text(&out.join("log.csv"), &log_csv(&result.log))?;
    if let Some(last) = result.log.last() {
        println!("step {} total loss {:.6e}", last.step, last.total);
    }
    Ok(())
}

fn cmd_decode(common: &Common, concept: Option<&str>, embedding: Option<&Path>) -> Result<()> {
    let c = resolve(common)?;
    let out = run_dir(&c)?;
    let (scene, stack) = load_run(out)?;
    let query = if concept.is_some() || embedding.is_some() {
        query_vector(&load_data(&c)?, concept, embedding)?
    } else {
        None
    };
    let inputs = DecodeInputs::from_fields(&scene, &stack);
    let result = decode(&inputs, &c.decode, query.as_ref().map(|(_, q)| q.as_slice()), true)?;
    let name = query.as_ref().map_or_else(|| "decode.txt".to_string(), |(n, _)| format!("decode_{n}.txt"));
    write_decode(&out.join(&name), &result)?;
    c.save(&out.join(EFFECTIVE_CFG))?;
    println!("{} instances written to {}", result.clusters.len(), out.join(name).display());
    Ok(())
}

fn cmd_query(common: &Common, concept: Option<&str>, embedding: Option<&Path>) -> Result<()> {
    let c = resolve(common)?;
    let out = run_dir(&c)?;
    let data = load_data(&c)?;
    let (scene, stack) = load_run(out)?;
    let (name, q) = query_vector(&data, concept, embedding)?.ok_or_else(|| Error::Usage("query needs --concept or --embedding".into()))?;
    let inputs = DecodeInputs::from_fields(&scene, &stack);
    let r = select_decoded(&scene, &inputs, &q, &c.decode, &data.supervision.cameras, true)?;
    let dir = out.join(format!("query_{name}"));
    create_dir(&dir)?;
    let mut listing = String::from("#splatsense-query v1\n#instance size relevance\n");
    for (k, (members, rel)) in r.instances.iter().enumerate() {
        listing.push_str(&format!("{k} {} {rel:.6}\n", members.len()));
    }
    write_text(&dir.join("instances.txt"), &listing)?;
    for (v, m) in r.masks.iter().enumerate() {
        let px: Vec<f64> = m.iter().map(|&b| b as u8 as f64).collect();
        write_pgm_unit(&dir.join(format!("mask_{v:03}.pgm")), data.supervision.width, data.supervision.height, &px)?;
    }
    c.save(&dir.join(EFFECTIVE_CFG))?;
    println!("{} instances selected for {name}", r.instances.len());
    Ok(())
}

fn cmd_eval_selection(common: &Common) -> Result<()> {
    let c = resolve(common)?;
    let out = run_dir(&c)?;
    let data = load_data(&c)?;
    let (scene, stack) = load_run(out)?;
    let e = evaluate_checkpoint(&scene, &stack, &data.supervision, &data.concepts, &c.decode, &["full"])?;
    let report = &e.selection["full"];
    write_text(&out.join("selection.csv"), &metrics_csv(report))?;
    write_text(&out.join("selection_summary.txt"), &report.summary())?;
    c.save(&out.join(EFFECTIVE_CFG))?;
    print!("{}", report.summary());
    Ok(())
}

fn cmd_eval_instances(common: &Common) -> Result<()> {
    let c = resolve(common)?;
    let out = run_dir(&c)?;
    let (scene, stack) = load_run(out)?;
    let data = load_data(&c)?;
    let e = evaluate_checkpoint(&scene, &stack, &data.supervision, &data.concepts, &c.decode, &[])?;
    let summary = format!("{}ari = {:.6}\n", e.instances.summary(), e.ari);
    write_text(&out.join("instances.csv"), &metrics_csv(&e.instances))?;
    write_text(&out.join("instances_summary.txt"), &summary)?;
    c.save(&out.join(EFFECTIVE_CFG))?;
    print!("{summary}");
    Ok(())
}

fn cmd_ablate(common: &Common) -> Result<()> {
    let c = resolve(common)?;
    let data = load_data(&c)?;
    let out = run_dir(&c)?.join("ablation");
    let init = load_scene(&data_dir(&c)?.join(INIT_SCENE))?;
    create_dir(&out)?;
    c.save(&out.join(EFFECTIVE_CFG))?;
    let tc = bind_to_data(&c.train, &data);
    let report = run_ablation(&init, &data.supervision, &data.concepts, &tc, &c.decode)?;
    for (variant, r) in report.reports() {
        write_text(&out.join(format!("metrics_{variant}.csv")), &metrics_csv(r))?;
    }
    let table = ablation_table(&report.rows);
    let mut summary = table.clone();
    summary.push_str(&format!("ari = {:.6}\n", report.full.ari));
    for (name, k) in &report.full.query_instances {
        summary.push_str(&format!("instances[{name}] = {k}\n"));
    }
    write_text(&out.join("ablation.txt"), &summary)?;
    save_scene(&report.trained.scene, &out.join(SCENE_FILE))?;
    save_checkpoint(&report.trained.fields, &out.join(FIELDS_FILE))?;
    print!("{summary}");
    debug_assert_eq!(DECODE_VARIANTS.len() + 2, report.rows.len());
    Ok(())
}

fn cmd_render(common: &Common, view: usize, what: &str, image: &Path) -> Result<()> {
    let c = resolve(common)?;
    let (scene, _) = load_run(run_dir(&c)?)?;
    let data = load_data(&c)?;
    let cam = data
        .supervision
        .cameras
        .get(view)
        .ok_or_else(|| Error::Usage(format!("view {view} out of range ({} views)", data.supervision.cameras.len())))?;
    let map = Frame::new(&scene, cam, RenderOptions::default()).render(Attributes::Color)?;
    match what {
        "rgb" => write_ppm(image, &map),
        _ => write_pgm_unit(image, map.width, map.height, &map.accumulated_alpha),
    }
}
