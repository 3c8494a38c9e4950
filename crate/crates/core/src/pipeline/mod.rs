//! The command layer: single-purpose verbs over a shared configuration.
//!
//! Every command validates its whole configuration and its inputs before
//! writing anything. Files are written through a temp file and a rename.

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use config::{AlignSettings, EmbedderSetting, EvalSettings, PathsConfig, PipelineConfig, SynthesisConfig};

use crate::alignkit::{disfluency_profile, AlignError, DisfluencyProfile, Metric, ThresholdRule};
use crate::data::{
    feature_path, generate_synthetic_triplets, load_manifest, read_feature_container,
    write_feature_container, write_synthetic_corpus, DataError, FeatureKind, FeatureSequence,
    Manifest, PhoneCodebook, Role, Split, TripletRecord,
};
use crate::eval::{
    mos_from_entry, Asr, EvalError, EvalOutput, EvalReport, Evaluator, ExternalAsr, FrameEmbedder,
    MockAsr, ProjectionEmbedder,
};
use crate::features::{
    read_wav, write_wav, EmbedderKind, EmbedderRegistry, FeatureError, Waveform,
};
use crate::s2s::{
    load_checkpoint, load_pairs, run_phase, save_checkpoint, LossBreakdown, Phase, S2sError,
    TrainConfig,
};
use crate::synth::{vocoder_from_entry, GriffinLim, PpgToSpec, SpecPair, SynthError, SynthesisChain, Vocoder};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("utterance `{id}`: missing {role} audio {path}")]
    MissingAudio { id: String, role: Role, path: PathBuf },
    #[error("utterance `{id}`: missing input {path}")]
    MissingInput { id: String, path: PathBuf },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Model(#[from] S2sError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl PipelineError {
    /// Configuration problems are usage errors; everything else is a
    /// domain error.
    pub fn is_usage(&self) -> bool {
        matches!(self, PipelineError::Config(_))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes through a sibling temp file renamed into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn write_wav_atomic(w: &Waveform, path: &Path) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    write_wav(w, &tmp)?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn audio_path(manifest_path: &Path, record: &TripletRecord, role: Role) -> PathBuf {
    let p = record.path(role);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_path.parent().unwrap_or(Path::new(".")).join(p)
    }
}

fn load(cfg: &PipelineConfig) -> Result<Manifest, PipelineError> {
    cfg.validate()?;
    Ok(load_manifest(&cfg.paths.manifest)?)
}

fn griffin_lim(cfg: &PipelineConfig) -> Result<GriffinLim, PipelineError> {
    Ok(GriffinLim::new(cfg.mel.clone(), cfg.synthesis.griffin_lim_iterations, cfg.seed)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GenSummary {
    pub triplets: usize,
    pub files: usize,
}

/// Generates the synthetic corpus: Griffin-Lim audio for every role, then
/// the manifest, ground truth, codebook and the latent mel containers.
/// The containers are written last so they count as up to date for
/// [`extract`].
pub fn gen_synthetic(cfg: &PipelineConfig) -> Result<GenSummary, PipelineError> {
    cfg.validate()?;
    let synthetic = cfg.synthetic_config();
    let corpus = generate_synthetic_triplets(&synthetic)?;
    let vocoder = griffin_lim(cfg)?;
    let data_dir = cfg.paths.data_dir().to_path_buf();
    let mut files = 0;
    for t in &corpus.triplets {
        for role in Role::ALL {
            let wav = vocoder.vocode(t.features(role))?;
            write_wav_atomic(&wav, &audio_path(&cfg.paths.manifest, &t.record, role))?;
            files += 1;
        }
    }
    files += write_synthetic_corpus(&corpus, &data_dir, &cfg.paths.feature_dir)?.len();
    let meta = serde_json::to_vec_pretty(&synthetic).expect("synthetic config serializes");
    write_atomic(&data_dir.join("synthetic.json"), &meta)?;
    log::info!("generated {} triplets under {}", corpus.triplets.len(), data_dir.display());
    Ok(GenSummary {
        triplets: corpus.triplets.len(),
        files: files + 1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ExtractSummary {
    pub written: usize,
    pub skipped: usize,
}

fn up_to_date(container: &Path, audio: &Path) -> bool {
    let mtime = |p: &Path| fs::metadata(p).and_then(|m| m.modified()).ok();
    match (mtime(container), mtime(audio)) {
        (Some(c), Some(a)) => c >= a,
        _ => false,
    }
}

/// One container per (utterance, role, kind). Containers at least as new as
/// their audio are skipped unless `force` is set.
pub fn extract(
    cfg: &PipelineConfig,
    roles: &[Role],
    kinds: &[EmbedderKind],
    force: bool,
) -> Result<ExtractSummary, PipelineError> {
    let manifest = load(cfg)?;
    let registry = EmbedderRegistry::from_config(cfg.mel.clone(), &cfg.adapters)?;
    for kind in kinds {
        if !registry.has(*kind) {
            return Err(FeatureError::MissingBackend(*kind).into());
        }
    }
    let mut jobs = Vec::new();
    for record in &manifest.records {
        for &role in roles {
            let audio = audio_path(&cfg.paths.manifest, record, role);
            if !audio.is_file() {
                return Err(PipelineError::MissingAudio {
                    id: record.utterance_id.clone(),
                    role,
                    path: audio,
                });
            }
            jobs.push((record, role, audio));
        }
    }

    let mut summary = ExtractSummary::default();
    for (record, role, audio) in jobs {
        let mut wav = None;
        for &kind in kinds {
            let out = feature_path(
                &cfg.paths.feature_dir,
                &record.utterance_id,
                role,
                kind.feature_kind(),
            );
            if !force && up_to_date(&out, &audio) {
                summary.skipped += 1;
                continue;
            }
            if wav.is_none() {
                wav = Some(read_wav(&audio)?);
            }
            let spec = registry.spec_for(kind);
            let seq = registry.embed(wav.as_ref().expect("read above"), &spec)?;
            write_feature_container(&seq, &out)?;
            summary.written += 1;
        }
    }
    log::info!("extract: {} written, {} up to date", summary.written, summary.skipped);
    Ok(summary)
}

/// What `train` fits: a conversion phase or the PPG-to-Spec decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainTarget {
    Phase(Phase),
    PpgToSpec,
}

impl FromStr for TrainTarget {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "ppg_to_spec" {
            return Ok(TrainTarget::PpgToSpec);
        }
        Phase::from_str(s)
            .map(TrainTarget::Phase)
            .map_err(|_| {
                PipelineError::Config(format!(
                    "unknown training target `{s}` (expected a phase name or ppg_to_spec)"
                ))
            })
    }
}

impl TrainTarget {
    pub fn name(self) -> &'static str {
        match self {
            TrainTarget::Phase(p) => p.as_str(),
            TrainTarget::PpgToSpec => "ppg_to_spec",
        }
    }
}

pub fn checkpoint_path(cfg: &PipelineConfig, name: &str) -> PathBuf {
    cfg.paths.checkpoint_dir.join(format!("{name}.vsck"))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub steps: usize,
    pub pairs: usize,
    pub first_loss: f64,
    pub last_loss: f64,
}

#[derive(Serialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum LogLine<'a> {
    Run {
        target: &'a str,
        seed: u64,
        pairs: usize,
        train: &'a TrainConfig,
    },
    Step(&'a LossBreakdown),
    DecoderStep { step: usize, recon: f64 },
}

fn jsonl<T: Serialize>(lines: impl IntoIterator<Item = T>) -> Vec<u8> {
    let mut out = Vec::new();
    for line in lines {
        serde_json::to_writer(&mut out, &line).expect("log line serializes");
        out.push(b'\n');
    }
    out
}

/// Trains one target on the train split and writes its checkpoint and a
/// per-step JSON-lines log beside it.
pub fn train(cfg: &PipelineConfig, target: TrainTarget) -> Result<TrainSummary, PipelineError> {
    let manifest = load(cfg)?;
    let train_cfg = cfg.train_config();
    let ckpt_path = checkpoint_path(cfg, target.name());
    let log_path = cfg.paths.checkpoint_dir.join(format!("{}.log.jsonl", target.name()));
    let run = |pairs| LogLine::Run {
        target: target.name(),
        seed: cfg.seed,
        pairs,
        train: &train_cfg,
    };

    let (pairs, losses, log) = match target {
        TrainTarget::Phase(phase) => {
            let phase_cfg = cfg.phase(phase);
            phase_cfg.validate()?;
            let init = match phase.prerequisite() {
                Some(needs) => {
                    let path = checkpoint_path(cfg, needs.as_str());
                    if !path.is_file() {
                        return Err(S2sError::MissingPrerequisite { phase, needs }.into());
                    }
                    Some(load_checkpoint(&path)?)
                }
                None => None,
            };
            let pairs = load_pairs(&manifest, &cfg.paths.feature_dir, &phase_cfg, Split::Train)?;
            let outcome = run_phase(&phase_cfg, &cfg.model, &train_cfg, &pairs, init.as_ref())?;
            save_checkpoint(&outcome.checkpoint, &ckpt_path)?;
            let log = jsonl(
                std::iter::once(run(pairs.len()))
                    .chain(outcome.history.iter().map(LogLine::Step)),
            );
            let losses: Vec<f64> = outcome.history.iter().map(|h| h.recon).collect();
            (pairs.len(), losses, log)
        }
        TrainTarget::PpgToSpec => {
            let pairs = spec_pairs(cfg, &manifest)?;
            let mut decoder = PpgToSpec::new(PpgToSpec::default_config(), cfg.seed)?;
            let losses = decoder.train(&pairs, &train_cfg)?;
            save_checkpoint(&decoder.to_checkpoint()?, &ckpt_path)?;
            let log = jsonl(std::iter::once(run(pairs.len())).chain(
                losses
                    .iter()
                    .enumerate()
                    .map(|(step, &recon)| LogLine::DecoderStep { step, recon }),
            ));
            (pairs.len(), losses, log)
        }
    };
    write_atomic(&log_path, &log)?;
    Ok(TrainSummary {
        checkpoint: ckpt_path,
        log: log_path,
        steps: losses.len(),
        pairs,
        first_loss: losses.first().copied().unwrap_or(f64::NAN),
        last_loss: losses.last().copied().unwrap_or(f64::NAN),
    })
}

/// Frame-aligned (ppg_bnf, mel) pairs of the single target speaker, the
/// L1_SS recordings of the train split.
fn spec_pairs(cfg: &PipelineConfig, manifest: &Manifest) -> Result<Vec<SpecPair>, PipelineError> {
    manifest
        .split(Split::Train)
        .map(|r| {
            let read = |kind| {
                read_feature_container(feature_path(
                    &cfg.paths.feature_dir,
                    &r.utterance_id,
                    Role::L1SS,
                    kind,
                ))
            };
            let ppg = read(FeatureKind::PpgBnf)?;
            let mel = read(FeatureKind::Mel)?;
            let n = ppg.num_frames().min(mel.num_frames());
            let cut = |s: &FeatureSequence| {
                FeatureSequence::new(
                    s.data().slice(ndarray::s![..n, ..]).to_owned(),
                    s.stride_ms(),
                    s.kind(),
                )
            };
            Ok(SpecPair {
                ppg: cut(&ppg)?,
                mel: cut(&mel)?,
            })
        })
        .collect()
}

/// Metadata written beside converted outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvertRun {
    pub label: String,
    pub checkpoint: PathBuf,
    pub phase: Option<Phase>,
    pub source_role: Role,
    pub source_feature: FeatureKind,
    pub target: FeatureKind,
    pub split: Split,
    pub seed: u64,
    pub utterances: usize,
}

pub fn output_dir(cfg: &PipelineConfig, label: &str) -> PathBuf {
    cfg.paths.output_dir.join(label)
}

fn build_chain(cfg: &PipelineConfig, target: FeatureKind) -> Result<SynthesisChain, PipelineError> {
    let ppg_to_spec = match (target, &cfg.synthesis.ppg_to_spec) {
        (FeatureKind::PpgBnf, Some(path)) => {
            Some(PpgToSpec::from_checkpoint(&load_checkpoint(path)?)?)
        }
        _ => None,
    };
    let vocoder: Box<dyn Vocoder> = match &cfg.adapters.vocoder {
        None => Box::new(griffin_lim(cfg)?),
        entry => vocoder_from_entry(entry.as_ref(), &cfg.mel)?,
    };
    let chain = SynthesisChain {
        ppg_to_spec,
        vocoder,
    };
    chain.validate(target)?;
    Ok(chain)
}

/// Converts the source features of every utterance of `split` with the
/// checkpoint and renders them through the synthesis chain. Writes
/// `<id>.<target>.vshd`, `<id>.mel.vshd` and `<id>.wav` per utterance.
pub fn convert(
    cfg: &PipelineConfig,
    checkpoint: &Path,
    label: &str,
    split: Split,
) -> Result<ConvertRun, PipelineError> {
    let manifest = load(cfg)?;
    let ckpt = load_checkpoint(checkpoint)?;
    let model = ckpt.to_model()?;
    let target = model.target_kind();
    let phase = ckpt.last_phase();
    let (source_role, source_feature) = match phase {
        Some(p) => {
            let pc = cfg.phase(p);
            (pc.source_role, pc.source_feature)
        }
        None => (Role::L2R, FeatureKind::S3r),
    };
    let chain = build_chain(cfg, target)?;

    let records: Vec<_> = manifest.split(split).collect();
    if records.is_empty() {
        return Err(PipelineError::Config(format!("split `{split}` has no utterances")));
    }
    let mut sources = Vec::with_capacity(records.len());
    for r in &records {
        let path = feature_path(&cfg.paths.feature_dir, &r.utterance_id, source_role, source_feature);
        if !path.is_file() {
            return Err(PipelineError::MissingInput {
                id: r.utterance_id.clone(),
                path,
            });
        }
        sources.push((r.utterance_id.clone(), path));
    }

    let dir = output_dir(cfg, label);
    for (id, path) in &sources {
        let converted = model.convert(&read_feature_container(path)?)?;
        write_feature_container(&converted, dir.join(format!("{id}.{target}.vshd")))?;
        let mel = chain.to_mel(&converted)?;
        if target != FeatureKind::Mel {
            write_feature_container(&mel, dir.join(format!("{id}.mel.vshd")))?;
        }
        write_wav_atomic(&chain.vocoder.vocode(&mel)?, &dir.join(format!("{id}.wav")))?;
    }
    let run = ConvertRun {
        label: label.to_string(),
        checkpoint: checkpoint.to_path_buf(),
        phase,
        source_role,
        source_feature,
        target,
        split,
        seed: cfg.seed,
        utterances: sources.len(),
    };
    write_atomic(
        &dir.join("run.json"),
        &serde_json::to_vec_pretty(&run).expect("run metadata serializes"),
    )?;
    log::info!("converted {} utterances into {}", sources.len(), dir.display());
    Ok(run)
}

/// Where `eval` takes its outputs from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EvalSource {
    /// Outputs of `convert` under this label.
    System(String),
    /// The L1_S1 references themselves.
    References,
}

impl EvalSource {
    pub fn label(&self) -> &str {
        match self {
            EvalSource::System(l) => l,
            EvalSource::References => "L1_S1",
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalFiles {
    pub report: EvalReport,
    pub table: PathBuf,
    pub records: PathBuf,
}

fn build_evaluator(cfg: &PipelineConfig) -> Result<Evaluator, PipelineError> {
    let asr: Box<dyn Asr> = match cfg.eval.asr.backend.as_str() {
        "mock" => {
            let codebook = PhoneCodebook::from_feature_sequence(&read_feature_container(
                cfg.codebook_path(),
            )?)?;
            Box::new(MockAsr { codebook })
        }
        other => Box::new(ExternalAsr {
            backend: other.to_string(),
        }),
    };
    let embedder: Box<dyn FrameEmbedder> = match cfg.eval.embedder.backend.as_str() {
        "pseudo" => Box::new(ProjectionEmbedder {
            dim: cfg.eval.embedder.dim,
            seed: cfg.eval.embedder.seed,
        }),
        other => {
            return Err(EvalError::Backend {
                backend: other.to_string(),
                cause: "no runtime for external frame embedders is linked into this build".into(),
            }
            .into())
        }
    };
    Ok(Evaluator {
        asr,
        transcripts: cfg.eval.transcripts,
        embedder,
        mos: cfg.eval.mos.then(|| mos_from_entry(cfg.adapters.mos.as_ref())),
    })
}

/// Scores a system (or the references) on the configured split and writes
/// `<label>.tsv` and `<label>.jsonl` into the report directory. Missing and
/// failed utterances are listed in the report; callers decide the exit
/// status with [`EvalReport::has_failures`].
pub fn evaluate(cfg: &PipelineConfig, source: &EvalSource) -> Result<EvalFiles, PipelineError> {
    let manifest = load(cfg)?;
    let evaluator = build_evaluator(cfg)?;
    let split = cfg.eval.split;
    let label = source.label();

    let (target, dir) = match source {
        EvalSource::References => (FeatureKind::Mel, None),
        EvalSource::System(l) => {
            let dir = output_dir(cfg, l);
            let run_path = dir.join("run.json");
            let run: ConvertRun = serde_json::from_slice(&fs::read(&run_path).map_err(io_err(&run_path))?)
                .map_err(|e| PipelineError::Config(format!("{}: {e}", run_path.display())))?;
            (run.target, Some(dir))
        }
    };

    let mut references = BTreeMap::new();
    let mut outputs = BTreeMap::new();
    for r in manifest.split(split) {
        let id = &r.utterance_id;
        let ref_path = feature_path(&cfg.paths.feature_dir, id, Role::L1S1, FeatureKind::Mel);
        match read_feature_container(&ref_path) {
            Ok(seq) => {
                references.insert(id.clone(), seq);
            }
            Err(e) => log::warn!("no reference for {id}: {e}"),
        }
        let (mel_path, wav_path) = match &dir {
            None => (ref_path, audio_path(&cfg.paths.manifest, r, Role::L1S1)),
            Some(d) => (d.join(format!("{id}.mel.vshd")), d.join(format!("{id}.wav"))),
        };
        if !mel_path.is_file() {
            continue;
        }
        let mel = read_feature_container(&mel_path)?;
        let audio = if evaluator.mos.is_some() && wav_path.is_file() {
            Some(read_wav(&wav_path)?)
        } else {
            None
        };
        outputs.insert(id.clone(), EvalOutput { mel, audio });
    }

    let mut report = evaluator.evaluate(label, target, split, &manifest, &outputs, &references)?;
    report.seed = Some(cfg.seed);
    let table = cfg.paths.report_dir.join(format!("{label}.tsv"));
    let records = cfg.paths.report_dir.join(format!("{label}.jsonl"));
    write_atomic(&table, report.to_table().as_bytes())?;
    write_atomic(&records, report.to_jsonl().as_bytes())?;
    for w in report.warnings() {
        log::warn!("{w}");
    }
    Ok(EvalFiles {
        report,
        table,
        records,
    })
}

/// DTW disfluency profile between two feature files, written as JSON.
/// Without an explicit threshold the rule is resolved on this pair's own
/// per-step distances.
pub fn align(
    a: &Path,
    b: &Path,
    metric: Metric,
    threshold: Option<f64>,
    rule: ThresholdRule,
    out: &Path,
) -> Result<DisfluencyProfile, PipelineError> {
    let a = read_feature_container(a)?;
    let b = read_feature_container(b)?;
    if a.dim() != b.dim() {
        return Err(AlignError::DimMismatch(a.dim(), b.dim()).into());
    }
    let mut profile = disfluency_profile(&a, &b, metric, f64::INFINITY)?;
    let threshold = threshold.unwrap_or_else(|| rule.resolve(&profile.per_step_distance));
    profile.threshold = threshold;
    profile.segment_flags = profile.per_step_distance.iter().map(|d| *d > threshold).collect();
    write_atomic(
        out,
        &serde_json::to_vec_pretty(&profile).expect("profile serializes"),
    )?;
    Ok(profile)
}
