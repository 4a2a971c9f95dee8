use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use crate::captioner::{Checkpoint, CounterfactualSample, ModelParams, SceneImage};
use crate::causal::{RegularizationConfig, Variant};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate, render_table, MetricsReport};
use crate::scenegen::{
    attach_cf_captions, build_biased_split, build_dataset, read_split, write_dataset, write_split,
    Dataset, Manifest, World,
};
use crate::trainer::{continue_nll, train_stage1, train_stage2, write_trace, TraceRecord};
use crate::vocab::TokenId;

/// Machine-readable outcome of one pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub run: String,
    pub stage: u8,
    pub variant: Option<Variant>,
    pub alpha: Option<f64>,
    pub world_hash: String,
    pub stage1_provenance: String,
    pub checkpoint_sha256: String,
    pub final_loss: f64,
    pub metrics: MetricsReport,
}

/// Experiment directory with its fixed layout.
#[derive(Debug, Clone)]
pub struct ExperimentDir {
    root: PathBuf,
}

impl ExperimentDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ExperimentDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn stage1(&self) -> PathBuf {
        self.root.join("stage1")
    }

    pub fn cf(&self) -> PathBuf {
        self.root.join("cf")
    }

    pub fn run(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Generates the world's splits.
pub fn generate_data(cfg: &ExperimentConfig) -> Result<(World, Manifest, Dataset)> {
    let world = cfg.validate()?;
    let data = match &cfg.bias {
        Some(bias) => build_biased_split(&world, bias)?,
        None => build_dataset(&world)?,
    };
    let manifest = Manifest::for_dataset(&world.config, cfg.bias.as_ref(), &world.vocab, &data);
    Ok((world, manifest, data))
}

fn pairs(data: &[crate::scenegen::SceneExample]) -> Vec<(&SceneImage, &[TokenId])> {
    data.iter().map(|e| (&e.image, e.caption.tokens.as_slice())).collect()
}

/// Everything downstream of stage 1 that TE and NDE runs share.
pub struct Prepared {
    pub world: World,
    pub data: Dataset,
    pub stage1: Checkpoint,
    pub stage1_trace: Vec<TraceRecord>,
    pub samples: Vec<CounterfactualSample>,
}

/// Writes the config and data, then trains stage 1 and decodes `S*` for the
/// training split unless matching artifacts already exist.
pub fn prepare(dir: &ExperimentDir, cfg: &ExperimentConfig) -> Result<Prepared> {
    let (world, manifest, data) = generate_data(cfg)?;
    write_dataset(&dir.data(), &manifest, &data)?;
    prepare_from(dir, cfg, world, &manifest, data)
}

/// As [`prepare`] with data already generated or loaded.
pub fn prepare_from(
    dir: &ExperimentDir,
    cfg: &ExperimentConfig,
    world: World,
    manifest: &Manifest,
    mut data: Dataset,
) -> Result<Prepared> {
    write_text(&dir.config(), &cfg.to_toml())?;
    let provenance = cfg.stage1_provenance();
    let ck_path = dir.stage1().join("checkpoint.json");
    let trace_path = dir.stage1().join("trace.jsonl");
    let cached = Checkpoint::load(&ck_path)
        .ok()
        .filter(|c| c.provenance.as_deref() == Some(provenance.as_str()));
    let (stage1, stage1_trace) = match cached {
        Some(ck) => {
            log::info!("reusing stage-1 checkpoint {}", ck_path.display());
            let trace = crate::trainer::read_trace(&trace_path)?;
            (ck, trace)
        }
        None => {
            let model = cfg.model.model_config(&world);
            let out = train_stage1(&model, &pairs(&data.train), &cfg.train.stage1)?;
            let mut ck = out.checkpoint;
            ck.provenance = Some(provenance.clone());
            ck.save(&ck_path)?;
            write_trace(&trace_path, &out.trace)?;
            (ck, out.trace)
        }
    };

    let cf_key = sha256_hex(format!("{provenance}{:?}", cfg.decode).as_bytes());
    let cf_train = dir.cf().join("train.jsonl");
    let cf_key_path = dir.cf().join("provenance");
    let reuse = fs::read_to_string(&cf_key_path).ok().as_deref() == Some(cf_key.as_str());
    if reuse {
        data.train = read_split(&cf_train, manifest)?;
    } else {
        attach_cf_captions(&stage1.params, &mut data.train, &cfg.decode)?;
        fs::create_dir_all(dir.cf()).map_err(|e| Error::io(dir.cf(), e))?;
        write_split(&cf_train, &data.train)?;
        write_text(&cf_key_path, &cf_key)?;
    }
    let samples = data
        .train
        .iter()
        .map(|e| e.counterfactual())
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared {
        world,
        data,
        stage1,
        stage1_trace,
        samples,
    })
}

/// Evaluates `params` on the test split and writes the run's artifacts.
fn finish_run(
    dir: &ExperimentDir,
    cfg: &ExperimentConfig,
    prep: &Prepared,
    run: &str,
    checkpoint: &Checkpoint,
    trace: &[TraceRecord],
) -> Result<Summary> {
    let out = dir.run(run);
    let ck_json = checkpoint.to_json();
    write_text(&out.join("checkpoint.json"), &ck_json)?;
    write_trace(&out.join("trace.jsonl"), trace)?;
    let metrics = evaluate(
        &checkpoint.params,
        &prep.data.test,
        &prep.world.vocab,
        cfg.bias.as_ref(),
        cfg.decode,
        &cfg.eval,
    )?;
    write_text(&out.join("metrics.json"), &(serde_json::to_string_pretty(&metrics).expect("serializes") + "\n"))?;
    write_text(&out.join("metrics.txt"), &render_table(&[(run, &metrics)]))?;
    let summary = Summary {
        run: run.to_string(),
        stage: checkpoint.stage.number(),
        variant: checkpoint.variant,
        alpha: checkpoint.alpha,
        world_hash: cfg.world.hash(),
        stage1_provenance: cfg.stage1_provenance(),
        checkpoint_sha256: sha256_hex(ck_json.as_bytes()),
        final_loss: trace.last().map_or(f64::NAN, |t| t.aggregate),
        metrics,
    };
    write_text(&out.join("summary.json"), &(serde_json::to_string_pretty(&summary).expect("serializes") + "\n"))?;
    Ok(summary)
}

pub fn run_name(variant: Option<Variant>) -> &'static str {
    variant.map_or("baseline", Variant::name)
}

/// Stage 2 with `variant` from the prepared stage-1 checkpoint, or the
/// stage-1 baseline alone when `variant` is `None`.
pub fn run_variant(
    dir: &ExperimentDir,
    cfg: &ExperimentConfig,
    prep: &Prepared,
    variant: Option<Variant>,
    run: &str,
    alpha: f64,
) -> Result<Summary> {
    match variant {
        None => finish_run(dir, cfg, prep, run, &prep.stage1, &prep.stage1_trace),
        Some(v) => {
            let reg = RegularizationConfig {
                alpha,
                ..cfg.regularization_config(v)
            };
            let out = train_stage2(&prep.stage1, &prep.samples, &cfg.train.stage2, &reg)?;
            finish_run(dir, cfg, prep, run, &out.checkpoint, &out.trace)
        }
    }
}

/// Data, stage 1, then either the baseline summary or one stage-2 variant.
pub fn run_pipeline(dir: &ExperimentDir, cfg: &ExperimentConfig, variant: Option<Variant>) -> Result<Summary> {
    let prep = prepare(dir, cfg)?;
    run_variant(dir, cfg, &prep, variant, run_name(variant), cfg.regularization.alpha)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub variant: Option<Variant>,
    pub alpha: f64,
    pub chair_s: f64,
    pub bleu4: f64,
    pub checkpoint_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Plain NLL continuation from stage 1 over the same batches.
    pub vanilla: SweepRow,
    /// Whether every alpha = 1 row reproduced the vanilla row exactly.
    pub alpha_one_matches_vanilla: bool,
}

impl SweepReport {
    pub fn series(&self, variant: Variant) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let rows: Vec<&SweepRow> = self.rows.iter().filter(|r| r.variant == Some(variant)).collect();
        (
            rows.iter().map(|r| r.alpha).collect(),
            rows.iter().map(|r| r.chair_s).collect(),
            rows.iter().map(|r| r.bleu4).collect(),
        )
    }
}

/// Stage 2 for each variant at each alpha, plus the vanilla continuation.
pub fn sweep_alpha(dir: &ExperimentDir, cfg: &ExperimentConfig, alphas: &[f64]) -> Result<SweepReport> {
    if alphas.is_empty() {
        return Err(Error::config("alphas", "sweep needs at least one alpha"));
    }
    for &a in alphas {
        if !(0.0..=1.0).contains(&a) {
            return Err(Error::config("alphas", format!("alpha {a} outside [0, 1]")));
        }
    }
    let prep = prepare(dir, cfg)?;
    let factual: Vec<(&SceneImage, &[TokenId])> = prep
        .samples
        .iter()
        .map(|s| (&s.factual_image, s.factual_caption.tokens.as_slice()))
        .collect();
    let (params, trace, _) = continue_nll(&prep.stage1.params, &factual, &cfg.train.stage2)?;
    let vanilla_ck = Checkpoint {
        stage: crate::captioner::Stage::Stage2,
        variant: None,
        alpha: Some(1.0),
        provenance: prep.stage1.provenance.clone(),
        params,
    };
    let vanilla_summary = finish_run(dir, cfg, &prep, "sweep/vanilla", &vanilla_ck, &trace)?;
    let vanilla = SweepRow {
        variant: None,
        alpha: 1.0,
        chair_s: vanilla_summary.metrics.chair_s,
        bleu4: vanilla_summary.metrics.bleu4,
        checkpoint_sha256: params_hash(&vanilla_ck.params),
    };
    let mut rows = Vec::new();
    for variant in [Variant::Te, Variant::Nde] {
        for &alpha in alphas {
            let run = format!("sweep/{}-{alpha}", variant.name());
            let reg = RegularizationConfig {
                alpha,
                ..cfg.regularization_config(variant)
            };
            let out = train_stage2(&prep.stage1, &prep.samples, &cfg.train.stage2, &reg)?;
            let s = finish_run(dir, cfg, &prep, &run, &out.checkpoint, &out.trace)?;
            rows.push(SweepRow {
                variant: Some(variant),
                alpha,
                chair_s: s.metrics.chair_s,
                bleu4: s.metrics.bleu4,
                checkpoint_sha256: params_hash(&out.checkpoint.params),
            });
        }
    }
    let alpha_one_matches_vanilla = rows
        .iter()
        .filter(|r| r.alpha == 1.0)
        .all(|r| r.checkpoint_sha256 == vanilla.checkpoint_sha256 && r.chair_s == vanilla.chair_s && r.bleu4 == vanilla.bleu4);
    let report = SweepReport {
        rows,
        vanilla,
        alpha_one_matches_vanilla,
    };
    let sweep_dir = dir.run("sweep");
    write_text(&sweep_dir.join("sweep.json"), &(serde_json::to_string_pretty(&report).expect("serializes") + "\n"))?;
    write_text(&sweep_dir.join("sweep.svg"), &super::plot::sweep_svg(&report))?;
    Ok(report)
}

/// Hash of the parameter values alone, independent of checkpoint tags.
pub fn params_hash(params: &ModelParams) -> String {
    let mut h = Sha256::new();
    for v in params.to_flat() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}
