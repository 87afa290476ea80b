//! The experiment commands. Each is a function of the config, the seed and
//! artifacts already in the output directory.

use std::fs;
use std::path::{Path, PathBuf};

use dualfuse_core::data::{generate_corpus, read_corpus, write_corpus, Corpus, Split};
use dualfuse_core::eval::{evaluate, DecodeOptions, EvalRow};
use dualfuse_core::fusion::{build_model, FusionDesign, Model, ModelConfig, ModelVariant, VariantKind};
use dualfuse_core::gradcheck::{fusion_suite, op_suite, CheckResult};
use dualfuse_core::noise::{NoiseBank, NoisePool, PoolManifest};
use dualfuse_core::params::{write_atomic, ParamStore};
use dualfuse_core::train::{init_from_stage1, train, TraceRow};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::results;

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    write_atomic(path, bytes).map_err(|e| match e {
        dualfuse_core::Error::Io(io) => CliError::io(path, io),
        other => other.into(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestFile {
    config_digest: String,
    #[serde(flatten)]
    manifest: PoolManifest,
}

#[derive(Clone, Debug)]
pub struct GenDataOutput {
    pub corpus: PathBuf,
    pub manifests: Vec<PathBuf>,
    pub digest: PathBuf,
}

/// Writes the corpus, one manifest per noise pool and the config digest.
pub fn gen_data(cfg: &ExperimentConfig) -> CliResult<GenDataOutput> {
    cfg.validate()?;
    ensure_dir(&cfg.out_dir)?;
    let digest = cfg.digest();
    let corpus = generate_corpus(&cfg.corpus)?;
    let corpus_path = cfg.corpus_path();
    write_corpus(&corpus, &corpus_path).map_err(|e| match e {
        dualfuse_core::Error::Io(io) => CliError::io(&corpus_path, io),
        other => other.into(),
    })?;

    let mut manifests = Vec::new();
    for pool in [NoisePool::A, NoisePool::B] {
        let bank = NoiseBank::new(pool, cfg.corpus.audio_dim, cfg.seed)?;
        let file = ManifestFile {
            config_digest: digest.clone(),
            manifest: bank.manifest(),
        };
        let path = cfg.manifest_path(pool);
        let mut text = serde_json::to_string_pretty(&file).map_err(|e| CliError::Usage(e.to_string()))?;
        text.push('\n');
        write_file(&path, text.as_bytes())?;
        manifests.push(path);
    }

    let digest_path = cfg.out_dir.join("config_digest.txt");
    write_file(&digest_path, format!("{digest}\n").as_bytes())?;
    let mut resolved = serde_json::to_string_pretty(cfg).map_err(|e| CliError::Usage(e.to_string()))?;
    resolved.push('\n');
    write_file(&cfg.out_dir.join("config.resolved.json"), resolved.as_bytes())?;

    Ok(GenDataOutput {
        corpus: corpus_path,
        manifests,
        digest: digest_path,
    })
}

/// Reads the corpus written by `gen_data` and checks it matches the config.
pub fn load_corpus(cfg: &ExperimentConfig) -> CliResult<Corpus> {
    let path = cfg.corpus_path();
    if !path.exists() {
        return Err(CliError::Dependency(format!(
            "corpus {} not found; run gen-data first",
            path.display()
        )));
    }
    let corpus = read_corpus(&path)?;
    if corpus.config != cfg.corpus {
        return Err(CliError::Dependency(format!(
            "corpus {} was generated from a different corpus config",
            path.display()
        )));
    }
    Ok(corpus)
}

/// Metadata stored next to every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub config_digest: String,
    pub label: String,
    pub variant: VariantKind,
    pub fusion_design: FusionDesign,
    pub visual_tap_block: usize,
    pub stage: u8,
    pub model: ModelConfig,
    pub params: usize,
    pub steps: usize,
    pub final_loss: Option<f64>,
}

impl Sidecar {
    pub fn model_variant(&self) -> ModelVariant {
        ModelVariant {
            kind: self.variant,
            fusion_design: self.fusion_design,
            visual_tap_block: self.visual_tap_block,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckpointPaths {
    pub params: PathBuf,
    pub sidecar: PathBuf,
    pub loss: PathBuf,
}

pub fn checkpoint_paths(cfg: &ExperimentConfig, variant: &ModelVariant, stage: u8) -> CheckpointPaths {
    let stem = format!("{}.stage{stage}", variant.label(&cfg.model));
    let dir = cfg.checkpoint_dir();
    CheckpointPaths {
        params: dir.join(format!("{stem}.ckpt")),
        sidecar: dir.join(format!("{stem}.json")),
        loss: dir.join(format!("{stem}.loss.csv")),
    }
}

pub fn parse_stage(stage: u8) -> CliResult<u8> {
    match stage {
        1 | 2 => Ok(stage),
        s => Err(CliError::Usage(format!("stage must be 1 or 2, got {s}"))),
    }
}

fn loss_csv(digest: &str, trace: &[TraceRow]) -> CliResult<Vec<u8>> {
    let mut out = format!("# config_digest={digest}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        let err = |e: csv::Error| CliError::Usage(e.to_string());
        w.write_record(["step", "lr", "loss"]).map_err(err)?;
        for r in trace {
            w.write_record([r.step.to_string(), r.lr.to_string(), r.loss.to_string()])
                .map_err(err)?;
        }
        w.flush().map_err(|e| CliError::io("<loss trace>", e))?;
    }
    Ok(out)
}

/// Loads a checkpoint and checks its sidecar against the requested variant
/// and the corpus it will meet.
pub fn load_checkpoint(cfg: &ExperimentConfig, variant: &ModelVariant, stage: u8) -> CliResult<(Model, Sidecar)> {
    let paths = checkpoint_paths(cfg, variant, stage);
    if !paths.params.exists() || !paths.sidecar.exists() {
        return Err(CliError::Dependency(format!(
            "stage-{stage} checkpoint {} not found; train it first",
            paths.params.display()
        )));
    }
    let text = fs::read_to_string(&paths.sidecar).map_err(|e| CliError::io(&paths.sidecar, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text)
        .map_err(|e| CliError::Dependency(format!("unreadable sidecar {}: {e}", paths.sidecar.display())))?;
    if sidecar.model_variant() != *variant || sidecar.stage != stage {
        return Err(CliError::Dependency(format!(
            "sidecar {} describes {} stage {}, not {} stage {stage}",
            paths.sidecar.display(),
            sidecar.label,
            sidecar.stage,
            variant.label(&cfg.model)
        )));
    }
    if sidecar.model.vocab != cfg.corpus.vocab {
        return Err(CliError::Dependency(format!(
            "checkpoint vocabulary {} does not match corpus vocabulary {}",
            sidecar.model.vocab, cfg.corpus.vocab
        )));
    }
    if sidecar.model != cfg.model {
        return Err(CliError::Dependency(format!(
            "checkpoint {} was built with a different model config",
            paths.params.display()
        )));
    }
    let mut model = build_model(*variant, &sidecar.model, cfg.seed)?;
    let store = ParamStore::load(&paths.params)?;
    model.params.load_exact(&store)?;
    Ok((model, sidecar))
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub paths: CheckpointPaths,
    pub sidecar: Sidecar,
    pub trace: Vec<TraceRow>,
}

/// Trains one variant for one stage and writes checkpoint, sidecar and
/// loss trace. Stage 1 trains the audio-only model; stage 2 starts from it.
pub fn train_stage(cfg: &ExperimentConfig, variant: ModelVariant, stage: u8) -> CliResult<TrainOutput> {
    cfg.validate()?;
    let stage = parse_stage(stage)?;
    if stage == 1 && variant.kind != VariantKind::AudioOnly {
        return Err(CliError::Usage(format!(
            "stage 1 trains audio_only; {} starts at stage 2",
            variant.kind
        )));
    }
    if variant.visual_tap_block > cfg.model.n_enc_visual {
        return Err(CliError::Usage(format!(
            "tap {} exceeds the {} visual encoder blocks",
            variant.visual_tap_block, cfg.model.n_enc_visual
        )));
    }
    let stage1 = if stage == 2 {
        let base = ModelVariant::standard(VariantKind::AudioOnly, &cfg.model);
        Some(load_checkpoint(cfg, &base, 1)?.0)
    } else {
        None
    };
    let corpus = load_corpus(cfg)?;

    let mut model = build_model(variant, &cfg.model, cfg.seed)?;
    if let Some(s1) = &stage1 {
        init_from_stage1(&mut model, s1)?;
    }
    let tcfg = if stage == 1 { &cfg.stage1 } else { &cfg.stage2 };
    let bank = match &tcfg.augmentation {
        Some(a) => Some(NoiseBank::new(a.pool, cfg.corpus.audio_dim, cfg.seed)?),
        None => None,
    };
    let trace = train(&mut model, &corpus.train, bank.as_ref(), tcfg)?;

    let digest = cfg.digest();
    let paths = checkpoint_paths(cfg, &variant, stage);
    ensure_dir(&cfg.checkpoint_dir())?;
    let sidecar = Sidecar {
        config_digest: digest.clone(),
        label: variant.label(&cfg.model),
        variant: variant.kind,
        fusion_design: variant.fusion_design,
        visual_tap_block: variant.visual_tap_block,
        stage,
        model: cfg.model.clone(),
        params: model.param_count(),
        steps: tcfg.steps,
        final_loss: trace.last().map(|r| r.loss),
    };
    write_file(&paths.params, &model.params.to_bytes())?;
    let mut text = serde_json::to_string_pretty(&sidecar).map_err(|e| CliError::Usage(e.to_string()))?;
    text.push('\n');
    write_file(&paths.sidecar, text.as_bytes())?;
    write_file(&paths.loss, &loss_csv(&digest, &trace)?)?;
    Ok(TrainOutput { paths, sidecar, trace })
}

/// Evaluation settings for one command invocation.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPlan {
    pub split: Split,
    pub pools: Vec<NoisePool>,
    pub snrs: Vec<f64>,
    pub decode: DecodeOptions,
}

impl EvalPlan {
    pub fn from_config(cfg: &ExperimentConfig, beam: Option<usize>) -> CliResult<Self> {
        let mut decode = cfg.eval.decode;
        if let Some(b) = beam {
            if b == 0 {
                return Err(CliError::Usage("beam must be at least 1".into()));
            }
            decode.beam = b;
        }
        Ok(Self {
            split: cfg.eval.split,
            pools: cfg.eval.pools.clone(),
            snrs: cfg.eval.snrs.clone(),
            decode,
        })
    }
}

/// Evaluates a loaded model. No files are touched.
pub fn evaluate_model(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    model: &Model,
    label: &str,
    plan: &EvalPlan,
) -> CliResult<Vec<EvalRow>> {
    let banks = plan
        .pools
        .iter()
        .map(|&p| NoiseBank::new(p, cfg.corpus.audio_dim, cfg.seed))
        .collect::<dualfuse_core::Result<Vec<_>>>()?;
    let refs: Vec<&NoiseBank> = banks.iter().collect();
    Ok(evaluate(
        model,
        label,
        corpus.split(plan.split),
        plan.split,
        &refs,
        &plan.snrs,
        &plan.decode,
        cfg.seed,
    )?)
}

/// Merges `rows` into the CSV at `path`, replacing rows for the same cell.
pub fn record_rows(cfg: &ExperimentConfig, path: &Path, rows: Vec<EvalRow>) -> CliResult<Vec<EvalRow>> {
    let digest = cfg.digest();
    let existing = if path.exists() {
        let file = results::read(path)?;
        if file.digest.as_deref() != Some(digest.as_str()) {
            return Err(CliError::Dependency(format!(
                "{} was produced under config digest {}, not {digest}",
                path.display(),
                file.digest.as_deref().unwrap_or("<none>")
            )));
        }
        file.rows
    } else {
        Vec::new()
    };
    let merged = results::merge(existing, rows);
    results::write(path, &digest, &merged)?;
    Ok(merged)
}

/// Evaluates a trained checkpoint and records its rows in the results file.
pub fn eval_checkpoint(
    cfg: &ExperimentConfig,
    variant: ModelVariant,
    stage: u8,
    plan: &EvalPlan,
) -> CliResult<Vec<EvalRow>> {
    cfg.validate()?;
    let stage = parse_stage(stage)?;
    let corpus = load_corpus(cfg)?;
    let (model, sidecar) = load_checkpoint(cfg, &variant, stage)?;
    let label = if stage == 1 {
        format!("{}_stage1", sidecar.label)
    } else {
        sidecar.label.clone()
    };
    let rows = evaluate_model(cfg, &corpus, &model, &label, plan)?;
    ensure_dir(&cfg.out_dir)?;
    record_rows(cfg, &cfg.results_path(), rows.clone())?;
    Ok(rows)
}

/// The design × tap grid of the ablation.
pub fn ablation_grid(cfg: &ModelConfig) -> Vec<ModelVariant> {
    [FusionDesign::Add, FusionDesign::Concat]
        .into_iter()
        .flat_map(|d| {
            (0..=cfg.n_enc_visual).map(move |tap| ModelVariant {
                kind: VariantKind::DualUse,
                fusion_design: d,
                visual_tap_block: tap,
            })
        })
        .collect()
}

/// A stage-2 checkpoint trained under the current config, reused if present.
fn trained_stage2(cfg: &ExperimentConfig, variant: ModelVariant) -> CliResult<Model> {
    let paths = checkpoint_paths(cfg, &variant, 2);
    if paths.sidecar.exists() {
        if let Ok((model, sidecar)) = load_checkpoint(cfg, &variant, 2) {
            if sidecar.config_digest == cfg.digest() {
                return Ok(model);
            }
        }
    }
    train_stage(cfg, variant, 2)?;
    Ok(load_checkpoint(cfg, &variant, 2)?.0)
}

/// Trains every dual-use fusion design and tap block and evaluates each at
/// clean and 0 dB pool A babble. Rows go to the ablation file.
pub fn ablate(cfg: &ExperimentConfig, beam: Option<usize>, mut progress: impl FnMut(&str)) -> CliResult<Vec<EvalRow>> {
    cfg.validate()?;
    let base = ModelVariant::standard(VariantKind::AudioOnly, &cfg.model);
    if !checkpoint_paths(cfg, &base, 1).params.exists() {
        return Err(CliError::Dependency(
            "ablation needs the stage-1 audio_only checkpoint; train it first".into(),
        ));
    }
    let corpus = load_corpus(cfg)?;
    let plan = EvalPlan {
        pools: vec![NoisePool::A],
        snrs: vec![0.0],
        ..EvalPlan::from_config(cfg, beam)?
    };
    let mut all = Vec::new();
    for variant in ablation_grid(&cfg.model) {
        let label = format!(
            "dual_use_{}_tap{}",
            variant.fusion_design.as_str(),
            variant.visual_tap_block
        );
        progress(&label);
        let model = trained_stage2(cfg, variant)?;
        let rows = evaluate_model(cfg, &corpus, &model, &label, &plan)?;
        all.extend(rows);
    }
    ensure_dir(&cfg.out_dir)?;
    record_rows(cfg, &cfg.ablation_path(), all.clone())?;
    Ok(all)
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }
}

/// Op suite on random instances plus end-to-end checks of the fusion
/// parameters of a dual-use model.
pub fn gradcheck(cfg: &ExperimentConfig, instances: usize) -> CliResult<GradcheckReport> {
    cfg.model.validate()?;
    let mut results = op_suite(instances, cfg.seed)?;
    results.extend(fusion_suite(&cfg.model, cfg.seed)?);
    Ok(GradcheckReport { results })
}
