use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{s1_wer, speech_bert_score, Asr, EvalError, FrameEmbedder, MosPredictor, Tokenizer};
use crate::data::{FeatureKind, FeatureSequence, Manifest, Role, Split};
use crate::features::Waveform;

/// Metric columns of the human-readable table, in order.
pub const TABLE_HEADERS: [&str; 4] = ["S1-CER", "S1-WER", "UTMOS", "SpeechBERTScore"];

/// Where L1_S1 reference transcripts come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TranscriptProvider {
    /// Transcripts stored in the manifest.
    #[default]
    OracleManifest,
    /// Run the evaluator's recognizer over the reference features.
    Asr,
}

/// One converted utterance: its mel frames and, when a synthesis chain ran,
/// the waveform.
#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub mel: FeatureSequence,
    pub audio: Option<Waveform>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub s1_cer: f64,
    pub s1_wer: f64,
    pub mos: Option<f64>,
    pub speech_bert_score: f64,
    pub hypothesis: String,
    pub reference: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalAggregates {
    pub count: usize,
    pub s1_cer: f64,
    pub s1_wer: f64,
    pub mos: Option<f64>,
    pub speech_bert_score: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailedUtterance {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub system: String,
    pub target: FeatureKind,
    pub split: Split,
    pub asr: String,
    pub embedder: String,
    pub mos_backend: Option<String>,
    /// Root seed of the run that produced the outputs, when known.
    pub seed: Option<u64>,
    pub rows: Vec<EvalRow>,
    pub aggregates: Option<EvalAggregates>,
    /// Utterances of the split with no converted output.
    pub missing: Vec<String>,
    pub failed: Vec<FailedUtterance>,
}

#[derive(Serialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Record<'a> {
    Meta {
        system: &'a str,
        target: FeatureKind,
        split: Split,
        asr: &'a str,
        embedder: &'a str,
        mos_backend: Option<&'a str>,
        seed: Option<u64>,
    },
    Utterance(&'a EvalRow),
    Aggregate(&'a EvalAggregates),
    Missing { id: &'a str },
    Failed(&'a FailedUtterance),
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"))
}

impl EvalReport {
    /// True when some utterance of the split was not scored.
    pub fn has_failures(&self) -> bool {
        !self.missing.is_empty() || !self.failed.is_empty()
    }

    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !self.missing.is_empty() {
            out.push(format!(
                "{} utterance(s) without converted output: {}",
                self.missing.len(),
                self.missing.join(", ")
            ));
        }
        for f in &self.failed {
            out.push(format!("utterance {} failed: {}", f.id, f.reason));
        }
        out
    }

    /// Tab-separated table: `#` metadata lines, a header, one line per
    /// utterance, a `mean` line and a `# warning:` block.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# system\t{}", self.system);
        let _ = writeln!(s, "# target\t{}", self.target);
        let _ = writeln!(s, "# split\t{}", self.split);
        let _ = writeln!(s, "# asr\t{}", self.asr);
        let _ = writeln!(s, "# embedder\t{}", self.embedder);
        let _ = writeln!(s, "# mos\t{}", self.mos_backend.as_deref().unwrap_or("-"));
        if let Some(seed) = self.seed {
            let _ = writeln!(s, "# seed\t{seed}");
        }
        let _ = writeln!(s, "id\t{}", TABLE_HEADERS.join("\t"));
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{:.6}\t{:.6}\t{}\t{:.6}",
                r.id, r.s1_cer, r.s1_wer, cell(r.mos), r.speech_bert_score
            );
        }
        if let Some(a) = &self.aggregates {
            let _ = writeln!(
                s,
                "mean\t{:.6}\t{:.6}\t{}\t{:.6}",
                a.s1_cer, a.s1_wer, cell(a.mos), a.speech_bert_score
            );
        }
        for w in self.warnings() {
            let _ = writeln!(s, "# warning: {w}");
        }
        s
    }

    /// One JSON object per line, tagged by a `record` field.
    pub fn to_jsonl(&self) -> String {
        let mut records = vec![Record::Meta {
            system: &self.system,
            target: self.target,
            split: self.split,
            asr: &self.asr,
            embedder: &self.embedder,
            mos_backend: self.mos_backend.as_deref(),
            seed: self.seed,
        }];
        records.extend(self.rows.iter().map(Record::Utterance));
        records.extend(self.aggregates.iter().map(Record::Aggregate));
        records.extend(self.missing.iter().map(|id| Record::Missing { id }));
        records.extend(self.failed.iter().map(Record::Failed));
        let mut s = String::new();
        for r in records {
            s.push_str(&serde_json::to_string(&r).expect("report records serialize"));
            s.push('\n');
        }
        s
    }
}

pub struct Evaluator {
    /// Produces hypothesis transcripts, and references under
    /// [`TranscriptProvider::Asr`].
    pub asr: Box<dyn Asr>,
    pub transcripts: TranscriptProvider,
    pub embedder: Box<dyn FrameEmbedder>,
    pub mos: Option<Box<dyn MosPredictor>>,
}

impl Evaluator {
    /// Scores every utterance of `split` against its L1_S1 reference.
    /// `references` holds the L1_S1 mel frames by utterance id.
    ///
    /// A manifest that lacks L1_S1 transcripts under the oracle provider is
    /// rejected up front. Per-utterance problems are recorded in the report
    /// and the rest are still scored.
    pub fn evaluate(
        &self,
        system: &str,
        target: FeatureKind,
        split: Split,
        manifest: &Manifest,
        outputs: &BTreeMap<String, EvalOutput>,
        references: &BTreeMap<String, FeatureSequence>,
    ) -> Result<EvalReport, EvalError> {
        let records: Vec<_> = manifest.split(split).collect();
        if records.is_empty() {
            return Err(EvalError::Config(format!("split `{split}` has no utterances")));
        }
        if self.transcripts == TranscriptProvider::OracleManifest {
            if let Some(r) = records.iter().find(|r| r.transcript(Role::L1S1).is_none()) {
                return Err(EvalError::MissingTranscript {
                    id: r.utterance_id.clone(),
                    role: Role::L1S1,
                });
            }
        }

        let mut rows = Vec::new();
        let mut missing = Vec::new();
        let mut failed = Vec::new();
        for record in records {
            let id = &record.utterance_id;
            let Some(output) = outputs.get(id) else {
                missing.push(id.clone());
                continue;
            };
            let scored = references
                .get(id)
                .ok_or_else(|| EvalError::MissingReference(id.clone()))
                .and_then(|reference| {
                    let ref_text = match self.transcripts {
                        TranscriptProvider::OracleManifest => record
                            .transcript(Role::L1S1)
                            .expect("checked above")
                            .to_string(),
                        TranscriptProvider::Asr => self.asr.transcribe(reference)?,
                    };
                    self.score(id, output, reference, ref_text)
                });
            match scored {
                Ok(row) => rows.push(row),
                Err(e) => {
                    log::warn!("evaluation of {id} failed: {e}");
                    failed.push(FailedUtterance {
                        id: id.clone(),
                        reason: e.to_string(),
                    });
                }
            }
        }

        let aggregates = (!rows.is_empty()).then(|| {
            let n = rows.len() as f64;
            let mean = |f: &dyn Fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
            let mos: Vec<f64> = rows.iter().filter_map(|r| r.mos).collect();
            EvalAggregates {
                count: rows.len(),
                s1_cer: mean(&|r| r.s1_cer),
                s1_wer: mean(&|r| r.s1_wer),
                mos: (!mos.is_empty()).then(|| mos.iter().sum::<f64>() / mos.len() as f64),
                speech_bert_score: mean(&|r| r.speech_bert_score),
            }
        });
        Ok(EvalReport {
            system: system.to_string(),
            target,
            split,
            asr: self.asr.id().to_string(),
            embedder: self.embedder.id().to_string(),
            mos_backend: self.mos.as_ref().map(|m| m.id().to_string()),
            seed: None,
            rows,
            aggregates,
            missing,
            failed,
        })
    }

    fn score(
        &self,
        id: &str,
        output: &EvalOutput,
        reference: &FeatureSequence,
        ref_text: String,
    ) -> Result<EvalRow, EvalError> {
        let hypothesis = self.asr.transcribe(&output.mel)?;
        let s1_wer_v = s1_wer(&hypothesis, &ref_text, Tokenizer::Word)?;
        let s1_cer_v = s1_wer(&hypothesis, &ref_text, Tokenizer::Char)?;
        let sbs = speech_bert_score(
            &self.embedder.embed(&output.mel)?,
            &self.embedder.embed(reference)?,
        )?;
        let mos = match (&self.mos, &output.audio) {
            (Some(m), Some(audio)) => Some(m.predict(audio)?),
            _ => None,
        };
        Ok(EvalRow {
            id: id.to_string(),
            s1_cer: s1_cer_v,
            s1_wer: s1_wer_v,
            mos,
            speech_bert_score: sbs,
            hypothesis,
            reference: ref_text,
        })
    }
}
