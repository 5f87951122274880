use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use seamkit::eval::{atlas_svg, evaluate, evaluate_edges, Evaluation, SeamMetrics};
use seamkit::mesh::IndexedMesh;
use seamkit::prefs::{build_pairs, PairRecord, PairingMode};
use seamkit::project::{project_seams, SeamEdgeSet};
use seamkit::sampler::{to_xyz, ConditioningClouds};
use seamkit::token::{decode, tokenize, SeamSet, TokenSequence};
use seamkit_model::config::ModelConfig;
use seamkit_model::dpo::{dpo_train, DpoConfig, DpoPair};
use seamkit_model::model::init_params;
use seamkit_model::params::ParamStore;
use seamkit_model::pipeline::{condition_for, corpus_examples, generate_candidates, synthetic_corpus, CorpusMesh};
use seamkit_model::sample::SampleConfig;
use seamkit_model::train::{nll_loss, nll_train_step, Optimizer, OptimizerKind};

use crate::config::RunConfig;
use crate::output::{to_json_bytes, Outputs, RunManifest, Stopwatch};
use crate::{Cli, CliError, Command, Common, SeamSource};

const DEFAULT_POINTS: usize = 256;
const DEFAULT_CANDIDATES: usize = 5;
const DEFAULT_PRETRAIN_STEPS: usize = 100;
const DEFAULT_PRETRAIN_LR: f64 = 2e-3;
const CANDIDATES_FILE: &str = "candidates.jsonl";

struct Run {
    command: &'static str,
    config: RunConfig,
    seed: u64,
    inputs: Vec<String>,
    outputs: Outputs,
    watch: Stopwatch,
}

impl Run {
    fn new(command: &'static str, common: &Common) -> Result<Self, CliError> {
        let mut config = match &common.config {
            Some(path) => RunConfig::parse(&read_text(path)?)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = common.seed {
            config.set("seed", seed.to_string());
        }
        let seed = config.get("seed", 0u64)?;
        let mut inputs = Vec::new();
        if let Some(path) = &common.config {
            inputs.push(path.display().to_string());
        }
        Ok(Self {
            command,
            config,
            seed,
            inputs,
            outputs: Outputs::default(),
            watch: Stopwatch::start(),
        })
    }

    fn input(&mut self, path: &Path) {
        self.inputs.push(path.display().to_string());
    }

    /// Commits staged outputs, then the manifest (if any) which lists them.
    fn finish(mut self, manifest: Option<PathBuf>) -> Result<(), CliError> {
        self.watch.lap("write");
        let outputs = self.outputs.paths();
        self.outputs.commit()?;
        if let Some(path) = manifest {
            let m = RunManifest {
                command: self.command.to_string(),
                inputs: self.inputs,
                config_hash: self.config.hash(),
                seed: Some(self.seed),
                outputs,
                timings: self.watch.timings,
            };
            crate::output::write_atomic(&path, &to_json_bytes(&m))?;
        }
        Ok(())
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::input(format!("reading {}: {e}", path.display())))
}

fn load_mesh(path: &Path) -> Result<IndexedMesh, CliError> {
    IndexedMesh::from_obj_str(&read_text(path)?).map_err(|e| CliError::input(format!("parsing {}: {e}", path.display())))
}

fn load_seams(path: &Path) -> Result<SeamSet, CliError> {
    SeamSet::parse_text(&read_text(path)?).map_err(|e| CliError::input(format!("parsing {}: {e}", path.display())))
}

fn load_edges(path: &Path, mesh: &IndexedMesh) -> Result<SeamEdgeSet, CliError> {
    let edges =
        SeamEdgeSet::parse_text(&read_text(path)?).map_err(|e| CliError::input(format!("parsing {}: {e}", path.display())))?;
    if let Some((a, b)) = edges.edges().find(|&(a, b)| !mesh.has_edge(a, b)) {
        return Err(CliError::input(format!("{}: {a} {b} is not an edge of the mesh", path.display())));
    }
    Ok(edges)
}

fn load_checkpoint(path: &Path) -> Result<ParamStore, CliError> {
    let file = fs::File::open(path).map_err(|e| CliError::input(format!("reading {}: {e}", path.display())))?;
    ParamStore::read_checkpoint(std::io::BufReader::new(file))
        .map_err(|e| CliError::input(format!("loading {}: {e}", path.display())))
}

fn normalized(mesh: &IndexedMesh) -> Result<IndexedMesh, CliError> {
    mesh.normalize().map(|(m, _)| m).map_err(|e| CliError::stage("normalize", e))
}

fn default_manifest(common: &Common, output: &Path) -> PathBuf {
    common.manifest.clone().unwrap_or_else(|| {
        let mut name = output.as_os_str().to_owned();
        name.push(".manifest.json");
        PathBuf::from(name)
    })
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let common = &cli.common;
    match &cli.command {
        Command::Evaluate { mesh, source, svg } => {
            let mut run = Run::new("evaluate", common)?;
            let (_, eval) = evaluate_source(&mut run, mesh, source)?;
            let json = to_json_bytes(&eval.metrics);
            print!("{}", String::from_utf8_lossy(&json));
            if let Some(path) = &common.json_out {
                run.outputs.add(path, json);
            }
            if let Some(path) = svg {
                run.outputs.add(path, atlas_svg(&eval.atlas));
            }
            run.finish(common.manifest.clone())
        }
        Command::Tokenize { seams, output } => {
            let mut run = Run::new("tokenize", common)?;
            run.input(seams);
            let tokens = tokenize(&load_seams(seams)?).map_err(|e| CliError::input(format!("{}: {e}", seams.display())))?;
            run.outputs.add(output, tokens.to_text());
            run.finish(common.manifest.clone())
        }
        Command::Detokenize { tokens, output } => {
            let mut run = Run::new("detokenize", common)?;
            run.input(tokens);
            let bad = |e: seamkit::token::TokenError| CliError::input(format!("{}: {e}", tokens.display()));
            let seq = TokenSequence::parse_text(&read_text(tokens)?).map_err(bad)?;
            run.outputs.add(output, decode(&seq).map_err(bad)?.to_text());
            run.finish(common.manifest.clone())
        }
        Command::Project { mesh, seams, output } => {
            let mut run = Run::new("project", common)?;
            run.input(mesh);
            run.input(seams);
            let m = normalized(&load_mesh(mesh)?)?;
            let s = load_seams(seams)?;
            let projection = project_seams(&m, &s).map_err(|e| CliError::stage("project", e))?;
            for skip in &projection.skipped {
                log::warn!("segment {} skipped: {}", skip.segment, skip.reason);
            }
            run.watch.lap("project");
            run.outputs.add(output, projection.edges.to_text());
            run.finish(common.manifest.clone())
        }
        Command::Unwrap { mesh, source, output, svg } => {
            let mut run = Run::new("unwrap", common)?;
            let (original, eval) = evaluate_source(&mut run, mesh, source)?;
            run.outputs.add(output, eval.atlas.to_obj_string(&original));
            if let Some(path) = svg {
                run.outputs.add(path, atlas_svg(&eval.atlas));
            }
            if let Some(path) = &common.json_out {
                run.outputs.add(path, to_json_bytes(&eval.metrics));
            }
            run.finish(common.manifest.clone())
        }
        Command::SamplePoints { mesh, output, points } => {
            let mut run = Run::new("sample-points", common)?;
            run.input(mesh);
            let m = normalized(&load_mesh(mesh)?)?;
            let clouds = ConditioningClouds::sample(&m, *points, *points, run.seed).map_err(|e| CliError::stage("sample", e))?;
            if clouds.topo_truncated {
                log::warn!("topology cloud truncated: the mesh has fewer than {points} vertices and edge samples");
            }
            run.watch.lap("sample");
            let name = |suffix: &str| {
                let mut s = output.as_os_str().to_owned();
                s.push(suffix);
                PathBuf::from(s)
            };
            run.outputs.add(name(".topo.xyz"), to_xyz(&clouds.topo_points));
            run.outputs.add(name(".geom.xyz"), to_xyz(&clouds.geom_points));
            run.finish(common.manifest.clone())
        }
        Command::Pretrain { output } => pretrain(common, output),
        Command::Sample { mesh, checkpoint, output } => sample(common, mesh, checkpoint, output),
        Command::Prefpairs { candidates, output } => prefpairs(common, candidates, output),
        Command::Dpo { checkpoint, pairs, output } => dpo(common, checkpoint, pairs, output),
    }
}

/// Loads the mesh and runs the evaluation pipeline for the chosen seam source.
fn evaluate_source(run: &mut Run, mesh: &Path, source: &SeamSource) -> Result<(IndexedMesh, Evaluation), CliError> {
    run.input(mesh);
    let original = load_mesh(mesh)?;
    let result = if source.from_uv {
        let edges = original
            .extract_uv_seams()
            .map_err(|e| CliError::input(format!("{}: --from-uv: {e}", mesh.display())))?;
        evaluate_edges(&original, &edges)
    } else {
        match &source.seams {
            None if source.edges => return Err(CliError::input("--edges needs a seam file")),
            None => evaluate(&original, &SeamSet::default()),
            Some(path) if source.edges => {
                run.input(path);
                let edges = load_edges(path, &original)?;
                evaluate_edges(&original, &edges)
            }
            Some(path) => {
                run.input(path);
                evaluate(&original, &load_seams(path)?)
            }
        }
    };
    let eval = result.map_err(|e| CliError::stage(e.stage(), e))?;
    for skip in &eval.skipped {
        log::warn!("segment {} skipped: {}", skip.segment, skip.reason);
    }
    run.watch.lap("evaluate");
    Ok((original, eval))
}

fn model_config(config: &RunConfig, seed: u64) -> Result<ModelConfig, CliError> {
    let base = ModelConfig::desk();
    let c = ModelConfig {
        l: config.get("l", base.l)?,
        d: config.get("d", base.d)?,
        layers: config.get("layers", base.layers)?,
        heads: config.get("heads", base.heads)?,
        ffn_mult: config.get("ffn_mult", base.ffn_mult)?,
        max_segments: config.get("max_segments", base.max_segments)?,
        freeze_geometry: config.get("freeze_geometry", false)?,
        seed,
        ..base
    };
    c.validate().map_err(|e| CliError::input(format!("model config: {e}")))?;
    Ok(c)
}

fn optimizer_kind(config: &RunConfig) -> Result<OptimizerKind, CliError> {
    match config.raw("optimizer") {
        None => Ok(OptimizerKind::Adam),
        Some(s) => s.parse().map_err(CliError::input),
    }
}

/// Reference seams for a user mesh: its UV seams when it has UVs, otherwise
/// its sharp edges.
fn corpus_entry(path: &Path) -> Result<CorpusMesh, CliError> {
    let mesh = load_mesh(path)?;
    let name = path.display().to_string();
    if mesh.uv_corners().is_some() {
        let n = normalized(&mesh)?;
        let edges = n.extract_uv_seams().map_err(|e| CliError::input(format!("{name}: {e}")))?;
        let seams = seamkit_model::pipeline::edges_to_seams(&n, &edges).map_err(|e| CliError::stage("tokenize", e))?;
        Ok(CorpusMesh { name, mesh: n, seams })
    } else {
        CorpusMesh::from_sharp_edges(name, &mesh).map_err(|e| CliError::stage("normalize", e))
    }
}

#[derive(Debug, Serialize)]
struct PretrainReport {
    meshes: Vec<String>,
    steps: usize,
    initial_loss: f64,
    final_loss: f64,
}

fn pretrain(common: &Common, output: &Path) -> Result<(), CliError> {
    let mut run = Run::new("pretrain", common)?;
    let config = model_config(&run.config, run.seed)?;
    let steps = run.config.get("steps", DEFAULT_PRETRAIN_STEPS)?;
    let lr = run.config.get("lr", DEFAULT_PRETRAIN_LR)?;
    let points = run.config.get("points", DEFAULT_POINTS)?;
    let kind = optimizer_kind(&run.config)?;
    let corpus = match run.config.raw("meshes") {
        None | Some("") => synthetic_corpus(),
        Some(list) => {
            let paths: Vec<PathBuf> = list.split(',').map(|s| PathBuf::from(s.trim())).collect();
            for p in &paths {
                run.input(p);
            }
            paths.iter().map(|p| corpus_entry(p)).collect::<Result<_, _>>()?
        }
    };
    let examples = corpus_examples(&corpus, points, config.l, run.seed).map_err(|e| CliError::stage("condition", e))?;
    run.watch.lap("prepare");
    let mut params = init_params(&config);
    let mut opt = Optimizer::new(kind, lr, &params);
    let initial_loss = nll_loss(&params, &examples).map_err(|e| CliError::stage("train", e))?;
    for step in 0..steps {
        let loss = nll_train_step(&mut params, &examples, &mut opt).map_err(|e| CliError::stage("train", e))?;
        if step % 10 == 0 {
            log::info!("pretrain step {step}: nll {loss:.4}");
        }
    }
    let final_loss = nll_loss(&params, &examples).map_err(|e| CliError::stage("train", e))?;
    run.watch.lap("train");
    let report = PretrainReport {
        meshes: corpus.iter().map(|c| c.name.clone()).collect(),
        steps,
        initial_loss,
        final_loss,
    };
    println!("pretrained {} steps: nll {initial_loss:.4} -> {final_loss:.4}", steps);
    run.outputs.add(output, params.to_checkpoint_bytes());
    if let Some(path) = &common.json_out {
        run.outputs.add(path, to_json_bytes(&report));
    }
    run.finish(Some(default_manifest(common, output)))
}

/// One line of `candidates.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub index: usize,
    pub mesh: String,
    pub condition_seed: u64,
    pub points: usize,
    pub seed: u64,
    /// Seam file, relative to the candidates file.
    pub seams: String,
    pub segments: usize,
    pub repaired: bool,
    pub metrics: Option<SeamMetrics>,
    pub error: Option<String>,
}

fn sample(common: &Common, mesh_path: &Path, checkpoint: &Path, output: &Path) -> Result<(), CliError> {
    let mut run = Run::new("sample", common)?;
    run.input(mesh_path);
    run.input(checkpoint);
    let params = load_checkpoint(checkpoint)?;
    let count = run.config.get("count", DEFAULT_CANDIDATES)?;
    let points = run.config.get("points", DEFAULT_POINTS)?;
    let sampling = SampleConfig {
        temperature: run.config.get("temperature", 1.0)?,
        top_p: run.config.get("top_p", 1.0)?,
        seed: run.seed,
        max_tokens: None,
    };
    if !(sampling.temperature > 0.0) || !(sampling.top_p > 0.0 && sampling.top_p <= 1.0) {
        return Err(CliError::input("temperature must be positive and top_p in (0, 1]"));
    }
    let mesh = normalized(&load_mesh(mesh_path)?)?;
    // Absolute, so pair files stay usable from any working directory.
    let mesh_name = fs::canonicalize(mesh_path)
        .map_err(|e| CliError::input(format!("{}: {e}", mesh_path.display())))?
        .display()
        .to_string();
    let condition = condition_for(&mesh, points, params.config.l, run.seed).map_err(|e| CliError::stage("condition", e))?;
    let candidates = generate_candidates(&params, &mesh, &condition, count, run.seed, &sampling)
        .map_err(|e| CliError::stage("sample", e))?;
    run.watch.lap("sample");
    let mut lines = String::new();
    for (k, c) in candidates.iter().enumerate() {
        let file = format!("candidate_{k}.seams");
        run.outputs.add(output.join(&file), c.seams.to_text());
        let record = CandidateRecord {
            index: k,
            mesh: mesh_name.clone(),
            condition_seed: run.seed,
            points,
            seed: c.seed,
            seams: file,
            segments: c.seams.len(),
            repaired: c.sampled.repaired,
            metrics: c.metrics.as_ref().ok().copied(),
            error: c.metrics.as_ref().err().cloned(),
        };
        if let Some(e) = &record.error {
            log::warn!("candidate {k}: {e}");
        }
        lines.push_str(&serde_json::to_string(&record).expect("serializable"));
        lines.push('\n');
    }
    fs::create_dir_all(output).map_err(|e| CliError::input(format!("creating {}: {e}", output.display())))?;
    let list = output.join(CANDIDATES_FILE);
    println!("{} candidates written to {}", candidates.len(), list.display());
    run.outputs.add(&list, lines);
    run.finish(Some(default_manifest(common, &list)))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    read_text(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CliError::input(format!("{} line {}: {e}", path.display(), i + 1))))
        .collect()
}

fn prefpairs(common: &Common, lists: &[PathBuf], output: &Path) -> Result<(), CliError> {
    let mut run = Run::new("prefpairs", common)?;
    let mode: PairingMode = match run.config.raw("pairing") {
        None => PairingMode::Joint,
        Some(s) => s.parse().map_err(CliError::input)?,
    };
    let mut lines = String::new();
    let mut total = 0;
    for list in lists {
        run.input(list);
        let records: Vec<CandidateRecord> = read_jsonl(list)?;
        let dir = list.parent().unwrap_or(Path::new("."));
        let scored: Vec<&CandidateRecord> = records.iter().filter(|r| r.metrics.is_some()).collect();
        let metrics: Vec<SeamMetrics> = scored.iter().map(|r| r.metrics.expect("filtered")).collect();
        for p in build_pairs(&metrics, mode) {
            let (pos, neg) = (scored[p.positive], scored[p.negative]);
            if pos.mesh != neg.mesh || pos.condition_seed != neg.condition_seed || pos.points != neg.points {
                return Err(CliError::input(format!("{}: candidates come from different conditions", list.display())));
            }
            let record = PairRecord {
                mesh: pos.mesh.clone(),
                seed: pos.condition_seed,
                points: pos.points,
                positive: pos.index,
                negative: neg.index,
                positive_metrics: pos.metrics.expect("scored"),
                negative_metrics: neg.metrics.expect("scored"),
                positive_seams: read_text(&dir.join(&pos.seams))?,
                negative_seams: read_text(&dir.join(&neg.seams))?,
            };
            lines.push_str(&serde_json::to_string(&record).expect("serializable"));
            lines.push('\n');
            total += 1;
        }
    }
    run.watch.lap("pair");
    println!("{total} preference pairs ({mode:?})");
    run.outputs.add(output, lines);
    run.finish(Some(default_manifest(common, output)))
}

#[derive(Debug, Serialize)]
struct DpoSummary {
    pairs: usize,
    steps: usize,
    initial_loss: Option<f64>,
    final_loss: Option<f64>,
    final_accuracy: Option<f64>,
}

fn dpo(common: &Common, checkpoint: &Path, pairs_path: &Path, output: &Path) -> Result<(), CliError> {
    let mut run = Run::new("dpo", common)?;
    run.input(checkpoint);
    run.input(pairs_path);
    let reference = load_checkpoint(checkpoint)?.as_reference();
    let defaults = DpoConfig::default();
    let config = DpoConfig {
        beta: run.config.get("beta", defaults.beta)?,
        lr: run.config.get("lr", defaults.lr)?,
        steps: run.config.get("steps", defaults.steps)?,
        optimizer: optimizer_kind(&run.config)?,
        divergence_window: run.config.get("divergence_window", defaults.divergence_window)?,
    };
    config.validate().map_err(|e| CliError::input(e.to_string()))?;
    let records: Vec<PairRecord> = read_jsonl(pairs_path)?;
    let mut meshes: HashMap<String, IndexedMesh> = HashMap::new();
    let mut pairs = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        if !meshes.contains_key(&r.mesh) {
            let m = normalized(&load_mesh(Path::new(&r.mesh))?)?;
            meshes.insert(r.mesh.clone(), m);
        }
        let condition = condition_for(&meshes[&r.mesh], r.points, reference.config.l, r.seed)
            .map_err(|e| CliError::stage("condition", format!("pair {i}: {e}")))?;
        let tokens = |text: &str| -> Result<TokenSequence, CliError> {
            let seams = SeamSet::parse_text(text).map_err(|e| CliError::input(format!("pair {i}: {e}")))?;
            tokenize(&seams).map_err(|e| CliError::input(format!("pair {i}: {e}")))
        };
        pairs.push(DpoPair {
            condition,
            positive: tokens(&r.positive_seams)?,
            negative: tokens(&r.negative_seams)?,
        });
    }
    run.watch.lap("prepare");
    let mut policy = reference.clone();
    let report = dpo_train(&mut policy, &reference, &pairs, &config).map_err(|e| CliError::stage("dpo", e))?;
    run.watch.lap("train");
    let finite = |x: f64| x.is_finite().then_some(x);
    let summary = DpoSummary {
        pairs: pairs.len(),
        steps: report.steps,
        initial_loss: finite(report.initial_loss),
        final_loss: finite(report.final_loss),
        final_accuracy: finite(report.final_accuracy),
    };
    println!("{}", serde_json::to_string(&summary).expect("serializable"));
    run.outputs.add(output, policy.to_checkpoint_bytes());
    if let Some(path) = &common.json_out {
        run.outputs.add(path, to_json_bytes(&summary));
    }
    run.finish(Some(default_manifest(common, output)))
}
