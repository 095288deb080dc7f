//! Command-line entry points: `train`, `extract`, `eval`, `gradcheck` and
//! `make-scene`.
//!
//! Human-readable progress goes to standard output; failures are reported as
//! one JSON object on standard error. Exit codes: 0 success, 1 internal
//! error, 2 config, dataset or input error, 3 training divergence, 4 empty
//! mesh in `eval`, 5 gradcheck failure.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::ThreadPoolBuilder;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::error::Error;
use crate::geometry::{
    chamfer_meshes, chamfer_to_analytic, marching_cubes, read_mesh, sample_density_grid, write_mesh, EvalReport,
    Inside,
};
use crate::gradcheck::{run_gradcheck, GradcheckConfig};
use crate::losses::LossLog;
use crate::scenes::{export_blender, AnalyticShape, ShapeKind, SyntheticConfig};
use crate::trainer::{Preset, SceneSource, TrainConfig, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_EMPTY_MESH: i32 = 4;
pub const EXIT_GRADCHECK: i32 = 5;

/// Default Marching Cubes lattice resolution per axis.
pub const DEFAULT_RESOLUTION: usize = 128;
/// Default surface samples per mesh for Chamfer evaluation.
pub const DEFAULT_EVAL_SAMPLES: usize = 100_000;

#[derive(Parser, Debug)]
#[command(name = "spikefield", version, about = "Spiking-threshold density fields: train, extract, evaluate")]
pub struct Cli {
    /// Cap on worker threads.
    #[arg(long, global = true, env = "SPIKEFIELD_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a field and write checkpoint, log and run manifest.
    Train(TrainArgs),
    /// Extract a mesh at the learned threshold.
    Extract(ExtractArgs),
    /// Chamfer distance of a mesh to a reference.
    Eval(EvalArgs),
    /// Finite-difference checks of every differentiable op.
    Gradcheck(GradcheckArgs),
    /// Render a synthetic scene and export it in Blender format.
    MakeScene(MakeSceneArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Ablation preset: full, wo-round, wo-fix or baseline.
    #[arg(long)]
    pub preset: Option<String>,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output mesh; `.obj` or `.ply`. A JSON report is written next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Lattice points per axis.
    #[arg(long, default_value_t = DEFAULT_RESOLUTION)]
    pub resolution: usize,
    /// Level set; defaults to the checkpoint's learned threshold.
    #[arg(long)]
    pub level: Option<f64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub mesh: PathBuf,
    /// `analytic:<shape>[:key=value,...]` or `mesh:<path>`.
    #[arg(long)]
    pub reference: String,
    /// Surface samples per side.
    #[arg(long, default_value_t = DEFAULT_EVAL_SAMPLES)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random points per op.
    #[arg(long, default_value_t = 100)]
    pub points: usize,
    /// Harness self-test: corrupt the backward pass of this op.
    #[arg(long, value_name = "OP")]
    pub inject_fault: Option<String>,
}

#[derive(Args, Debug)]
pub struct MakeSceneArgs {
    /// Output directory for the Blender-format scene.
    #[arg(long)]
    pub out: PathBuf,
    /// Base synthetic-scene config (JSON); flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `sphere`, `torus` or `box`, optionally with `:key=value,...`.
    #[arg(long)]
    pub shape: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Training views.
    #[arg(long)]
    pub views: Option<usize>,
    /// Evaluation views.
    #[arg(long)]
    pub eval_views: Option<usize>,
    /// Image width and height in pixels; the focal length scales with it.
    #[arg(long)]
    pub size: Option<u32>,
}

/// A failure with its exit code and JSON payload.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub body: Value,
}

impl CliError {
    fn new(code: i32, kind: &str, message: impl Into<String>) -> Self {
        Self {
            code,
            body: json!({ "error": kind, "message": message.into() }),
        }
    }

    fn with(mut self, key: &str, value: Value) -> Self {
        self.body[key] = value;
        self
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config { key, .. } => CliError::new(EXIT_INPUT, "config", msg).with("key", json!(key)),
            Error::Divergence { iteration, stage, .. } => CliError::new(EXIT_DIVERGED, "divergence", msg)
                .with("iteration", json!(iteration))
                .with("stage", json!(stage)),
            Error::Io { ref path, .. } => {
                let p = path.display().to_string();
                CliError::new(EXIT_INPUT, "io", msg).with("path", json!(p))
            }
            Error::Input(_) => CliError::new(EXIT_INPUT, "input", msg),
            Error::Load(_) => CliError::new(EXIT_INPUT, "load", msg),
            Error::Checkpoint(_) => CliError::new(EXIT_INPUT, "checkpoint", msg),
            Error::NonFiniteDensity { .. } => CliError::new(EXIT_INTERNAL, "non_finite_density", msg),
            Error::Contract(_) => CliError::new(EXIT_INTERNAL, "internal", msg),
        }
    }
}

type CmdResult = std::result::Result<(), CliError>;

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, stdout: &mut (dyn Write + Send), stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{e}");
                return EXIT_OK;
            }
            let body = json!({ "error": "usage", "message": e.to_string() });
            let _ = writeln!(stderr, "{body}");
            return EXIT_INPUT;
        }
    };
    let result = match cli.threads {
        Some(0) => Err(CliError::new(EXIT_INPUT, "usage", "--threads must be at least 1")),
        Some(n) => match ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(cli.command, stdout)),
            Err(e) => Err(CliError::new(EXIT_INTERNAL, "internal", e.to_string())),
        },
        None => dispatch(cli.command, stdout),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let mut body = e.body;
            body["exit_code"] = json!(e.code);
            let _ = writeln!(stderr, "{body}");
            e.code
        }
    }
}

fn dispatch(cmd: Command, out: &mut (dyn Write + Send)) -> CmdResult {
    match cmd {
        Command::Train(a) => cmd_train(&a, out),
        Command::Extract(a) => cmd_extract(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Gradcheck(a) => cmd_gradcheck(&a, out),
        Command::MakeScene(a) => cmd_make_scene(&a, out),
    }
}

fn say(out: &mut dyn Write, line: impl std::fmt::Display) {
    let _ = writeln!(out, "{line}");
}

fn read_file(path: &Path) -> std::result::Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| Error::io(path, e).into())
}

fn write_file(path: &Path, bytes: &[u8]) -> CmdResult {
    fs::write(path, bytes).map_err(|e| CliError::from(Error::io(path, e)))
}

fn write_json(path: &Path, v: &impl Serialize) -> CmdResult {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    write_file(path, s.as_bytes())
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of a file's content framed like a git blob.
fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

fn collect_files(dir: &Path, base: &Path, out: &mut Vec<(String, PathBuf)>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect_files(&p, base, out)?;
        } else {
            let rel = p.strip_prefix(base).unwrap_or(&p).to_string_lossy().replace('\\', "/");
            out.push((rel, p));
        }
    }
    Ok(())
}

/// Tree hash over named blobs, sorted by name.
fn content_hash(config_bytes: &[u8], scene: &SceneSource) -> std::result::Result<String, CliError> {
    let mut entries = vec![("config".to_string(), blob_hash(config_bytes))];
    if let SceneSource::Blender { path, .. } = scene {
        let mut files = Vec::new();
        collect_files(path, path, &mut files).map_err(|e| CliError::from(Error::io(path, e)))?;
        for (name, p) in files {
            entries.push((format!("scene/{name}"), blob_hash(&read_file(&p)?)));
        }
    }
    entries.sort();
    let listing: String = entries.iter().map(|(n, h)| format!("{h} {n}\n")).collect();
    Ok(sha256_hex(listing.as_bytes()))
}

#[derive(Serialize)]
struct Manifest<'a> {
    status: &'a str,
    seed: u64,
    preset: Option<&'a str>,
    config_path: String,
    config_sha256: String,
    resolved_config_sha256: String,
    input_content_hash: String,
    iterations: u64,
    final_threshold: f64,
    checkpoint: Option<&'a str>,
    checkpoint_sha256: Option<String>,
    log: &'a str,
    version: &'a str,
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> CmdResult {
    let bytes = read_file(&a.config)?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|_| CliError::new(EXIT_INPUT, "config", format!("{} is not UTF-8", a.config.display())))?;
    let mut cfg = TrainConfig::from_json(&text)?;
    let preset = a.preset.as_deref().map(Preset::parse).transpose()?;
    if let Some(p) = preset {
        p.apply(&mut cfg);
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let dataset = cfg.scene.load(cfg.seed)?;
    let input_hash = content_hash(&bytes, &cfg.scene)?;
    fs::create_dir_all(&a.out).map_err(|e| CliError::from(Error::io(&a.out, e)))?;
    let resolved = serde_json::to_string_pretty(&cfg).expect("serializable");
    write_file(&a.out.join("config.json"), format!("{resolved}\n").as_bytes())?;

    let log_path = a.out.join("train_log.ndjson");
    let file = fs::File::create(&log_path).map_err(|e| CliError::from(Error::io(&log_path, e)))?;
    let mut log = LossLog::new(BufWriter::new(file));
    let seed = cfg.seed;
    let mut trainer = Trainer::new(cfg, dataset)?;
    say(
        out,
        format!("training {} iterations (seed {seed}) into {}", trainer.total_iterations(), a.out.display()),
    );
    let outcome = trainer.run(Some(&mut log));
    let mut inner = log.into_inner();
    inner.flush().map_err(|e| CliError::from(Error::io(&log_path, e)))?;

    let mut manifest = Manifest {
        status: "ok",
        seed,
        preset: preset.map(Preset::name),
        config_path: a.config.display().to_string(),
        config_sha256: sha256_hex(&bytes),
        resolved_config_sha256: sha256_hex(resolved.as_bytes()),
        input_content_hash: input_hash,
        iterations: trainer.state().iter,
        final_threshold: trainer.field().threshold(),
        checkpoint: None,
        checkpoint_sha256: None,
        log: "train_log.ndjson",
        version: env!("CARGO_PKG_VERSION"),
    };
    if let Err(e) = outcome {
        manifest.status = "diverged";
        write_json(&a.out.join("manifest.json"), &manifest)?;
        return Err(e.into());
    }
    let ck = checkpoint::to_bytes(trainer.field());
    write_file(&a.out.join("checkpoint.spkf"), &ck)?;
    manifest.checkpoint = Some("checkpoint.spkf");
    manifest.checkpoint_sha256 = Some(sha256_hex(&ck));
    write_json(&a.out.join("manifest.json"), &manifest)?;
    say(
        out,
        format!("done: threshold {:.6}, checkpoint {}", manifest.final_threshold, a.out.join("checkpoint.spkf").display()),
    );
    Ok(())
}

/// Path of the JSON report written next to an extracted mesh.
pub fn report_path(mesh: &Path) -> PathBuf {
    let mut s = mesh.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn cmd_extract(a: &ExtractArgs, out: &mut dyn Write) -> CmdResult {
    if a.resolution < 2 {
        return Err(CliError::new(EXIT_INPUT, "usage", "--resolution must be at least 2"));
    }
    crate::geometry::MeshFormat::from_path(&a.out)?;
    let field = checkpoint::load(&a.checkpoint)?;
    let level = a.level.unwrap_or_else(|| field.threshold());
    if !level.is_finite() {
        return Err(CliError::new(EXIT_INPUT, "usage", "--level must be finite"));
    }
    let grid = sample_density_grid(&field, [a.resolution; 3], field.scene_box())?;
    let mesh = marching_cubes(&grid, level, Inside::Above)?;
    write_mesh(&mesh, &a.out)?;
    let warning = mesh
        .is_empty()
        .then(|| format!("no density crossings at level {level}; the mesh is empty"));
    let report = EvalReport {
        chamfer: None,
        n_vertices: mesh.vertices.len(),
        n_triangles: mesh.triangles.len(),
        level: Some(level),
        resolution: Some(a.resolution),
        warning,
    };
    write_json(&report_path(&a.out), &report)?;
    if let Some(w) = &report.warning {
        say(out, format!("warning: {w}"));
    }
    say(
        out,
        format!(
            "extracted {} vertices, {} triangles at level {level} into {}",
            report.n_vertices,
            report.n_triangles,
            a.out.display()
        ),
    );
    Ok(())
}

fn parse_shape(spec: &str) -> std::result::Result<AnalyticShape, CliError> {
    let bad = |m: String| CliError::new(EXIT_INPUT, "reference", m);
    let (kind, params) = match spec.split_once(':') {
        Some((k, p)) => (k, p),
        None => (spec, ""),
    };
    let mut kv = std::collections::BTreeMap::new();
    for item in params.split(',').filter(|s| !s.is_empty()) {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| bad(format!("expected key=value, got `{item}`")))?;
        let v: f64 = v.parse().map_err(|_| bad(format!("`{k}` needs a number, got `{v}`")))?;
        kv.insert(k.to_string(), v);
    }
    let mut take = |keys: &[&str], default: f64| -> f64 {
        keys.iter().find_map(|k| kv.remove(*k)).unwrap_or(default)
    };
    let kind = match kind {
        "sphere" => ShapeKind::Sphere {
            radius: take(&["r", "radius"], 0.5),
        },
        "torus" => ShapeKind::Torus {
            major: take(&["major", "R"], 0.5),
            minor: take(&["minor", "r"], 0.2),
        },
        "box" => {
            let h = take(&["half"], 0.4);
            ShapeKind::Box {
                half: [take(&["hx"], h), take(&["hy"], h), take(&["hz"], h)],
            }
        }
        other => return Err(bad(format!("unknown shape `{other}`; use sphere, torus or box"))),
    };
    if let Some(k) = kv.keys().next() {
        return Err(bad(format!("unknown shape parameter `{k}`")));
    }
    let shape = AnalyticShape::new(kind);
    shape.validate()?;
    Ok(shape)
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> CmdResult {
    if a.samples == 0 {
        return Err(CliError::new(EXIT_INPUT, "usage", "--samples must be at least 1"));
    }
    enum Reference {
        Analytic(AnalyticShape),
        Mesh(crate::geometry::TriangleMesh),
    }
    let reference = if let Some(spec) = a.reference.strip_prefix("analytic:") {
        Reference::Analytic(parse_shape(spec)?)
    } else if let Some(path) = a.reference.strip_prefix("mesh:") {
        Reference::Mesh(read_mesh(Path::new(path))?)
    } else {
        return Err(CliError::new(
            EXIT_INPUT,
            "reference",
            format!("reference `{}` must start with analytic: or mesh:", a.reference),
        ));
    };
    let mesh = read_mesh(&a.mesh)?;
    // level and resolution come from the extraction report, when present
    let side = fs::read(report_path(&a.mesh))
        .ok()
        .and_then(|b| serde_json::from_slice::<EvalReport>(&b).ok());
    let mut report = EvalReport {
        chamfer: None,
        n_vertices: mesh.vertices.len(),
        n_triangles: mesh.triangles.len(),
        level: side.as_ref().and_then(|s| s.level),
        resolution: side.as_ref().and_then(|s| s.resolution),
        warning: None,
    };
    let empty_ref = matches!(&reference, Reference::Mesh(m) if m.is_empty());
    if mesh.is_empty() || empty_ref {
        let which = if mesh.is_empty() { "mesh" } else { "reference mesh" };
        report.warning = Some(format!("{which} has no triangles; Chamfer distance is undefined"));
        emit_report(a, &report, out)?;
        return Err(CliError::new(EXIT_EMPTY_MESH, "empty_mesh", report.warning.clone().unwrap())
            .with("report", serde_json::to_value(&report).expect("serializable")));
    }
    let cd = match &reference {
        Reference::Analytic(shape) => {
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(a.seed);
            chamfer_to_analytic(&mesh, shape, a.samples, &mut rng)?
        }
        Reference::Mesh(m) => chamfer_meshes(&mesh, m, a.samples, a.seed)?,
    };
    report.chamfer = Some(cd);
    emit_report(a, &report, out)
}

fn emit_report(a: &EvalArgs, report: &EvalReport, out: &mut dyn Write) -> CmdResult {
    if let Some(p) = &a.report {
        write_json(p, report)?;
    }
    say(out, serde_json::to_string(report).expect("serializable"));
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> CmdResult {
    if a.points == 0 {
        return Err(CliError::new(EXIT_INPUT, "usage", "--points must be at least 1"));
    }
    if let Some(op) = &a.inject_fault {
        if !crate::gradcheck::op_names().contains(&op.as_str()) {
            return Err(CliError::new(EXIT_INPUT, "usage", format!("unknown op `{op}`")));
        }
    }
    let start = std::time::Instant::now();
    let summary = run_gradcheck(&GradcheckConfig {
        seed: a.seed,
        points: a.points,
        fault: a.inject_fault.clone(),
        ..Default::default()
    })?;
    for op in &summary.ops {
        let status = if op.passed() { "ok" } else { "FAIL" };
        let mut line = format!(
            "{:<10} {:<18} {:>4} points  max rel err {:.2e}  {status}",
            op.suite, op.op, op.points, op.max_rel_err
        );
        if op.surrogate_points > 0 {
            line.push_str(&format!(
                "  ({} points with surrogate sites, {} expected mismatches)",
                op.surrogate_points, op.surrogate_mismatches
            ));
        }
        say(out, line);
    }
    for (suite, err) in summary.per_suite() {
        say(out, format!("suite {suite}: max rel err {err:.2e}"));
    }
    say(out, format!("finished in {:.2?}", start.elapsed()));
    if summary.passed() {
        return Ok(());
    }
    let failed = summary.failed_ops();
    Err(CliError::new(EXIT_GRADCHECK, "gradcheck", format!("gradient mismatch in {}", failed.join(", ")))
        .with("failed_ops", json!(failed)))
}

fn cmd_make_scene(a: &MakeSceneArgs, out: &mut dyn Write) -> CmdResult {
    let mut cfg = match &a.config {
        Some(p) => {
            let bytes = read_file(p)?;
            let de = &mut serde_json::Deserializer::from_slice(&bytes);
            serde_path_to_error::deserialize::<_, SyntheticConfig>(de).map_err(|e| {
                CliError::from(Error::Config {
                    key: e.path().to_string(),
                    message: e.inner().to_string(),
                })
            })?
        }
        None => SyntheticConfig::default(),
    };
    if let Some(s) = &a.shape {
        let shape = parse_shape(s)?;
        cfg.shape = AnalyticShape {
            sharpness: cfg.shape.sharpness,
            shell: cfg.shape.shell,
            ..shape
        };
    }
    if let Some(v) = a.views {
        cfg.n_train = v;
    }
    if let Some(v) = a.eval_views {
        cfg.n_eval = v;
    }
    if let Some(s) = a.size {
        if s == 0 {
            return Err(CliError::new(EXIT_INPUT, "usage", "--size must be at least 1"));
        }
        cfg.focal *= s as f64 / cfg.width as f64;
        cfg.width = s;
        cfg.height = s;
    }
    let source = SceneSource::Synthetic(cfg.clone());
    let ds = source.load(a.seed)?;
    fs::create_dir_all(&a.out).map_err(|e| CliError::from(Error::io(&a.out, e)))?;
    export_blender(&ds, &a.out)?;
    write_json(&a.out.join("scene_config.json"), &json!({ "seed": a.seed, "synthetic": cfg }))?;
    say(
        out,
        format!(
            "wrote {} training and {} evaluation views to {}",
            ds.split(crate::scenes::Split::Train).count(),
            ds.split(crate::scenes::Split::Eval).count(),
            a.out.display()
        ),
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_specs() {
        assert_eq!(parse_shape("sphere").unwrap(), AnalyticShape::sphere(0.5));
        assert_eq!(parse_shape("sphere:r=1").unwrap(), AnalyticShape::sphere(1.0));
        match parse_shape("torus:major=0.6,minor=0.1").unwrap().kind {
            ShapeKind::Torus { major, minor } => assert_eq!((major, minor), (0.6, 0.1)),
            k => panic!("{k:?}"),
        }
        match parse_shape("box:half=0.3,hz=0.1").unwrap().kind {
            ShapeKind::Box { half } => assert_eq!(half, [0.3, 0.3, 0.1]),
            k => panic!("{k:?}"),
        }
        assert!(parse_shape("cone").is_err());
        assert!(parse_shape("sphere:q=1").is_err());
        assert!(parse_shape("sphere:r=-1").is_err());
    }

    #[test]
    fn blob_hash_matches_git_framing() {
        let mut h = Sha256::new();
        h.update(b"blob 3\0abc");
        assert_eq!(blob_hash(b"abc"), hex::encode(h.finalize()));
    }

    #[test]
    fn usage_errors_exit_2_with_json() {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        let code = run(["spikefield", "train", "--bogus"], &mut o, &mut e);
        assert_eq!(code, EXIT_INPUT);
        let v: Value = serde_json::from_slice(&e).unwrap();
        assert_eq!(v["error"], "usage");
        let code = run(["spikefield", "--help"], &mut o, &mut e);
        assert_eq!(code, EXIT_OK);
    }
}
