use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use socratic_core::augment::{
    augment_corpus, build_preference_pairs, AugmentSettings, ClassifiedQuestion,
    GeneratedInvalidQuestion, PreferencePair, RuleBasedResponder,
};
use socratic_core::corpus::{
    ingest_transcripts, parse_corpus, render_prompt_with, serialize_corpus, split_turns_with, Dialogue,
};
use socratic_core::eval::{aggregate, macro_average, turn_metrics, MacroAverage, MetricReport, RougeL};
use socratic_core::llm_gateway::{Gateway, GatewayError, HttpProvider};
use socratic_core::tinylm::{greedy_decode, nucleus_sample, PolicyParams, Vocab};
use socratic_core::train::{train_dpo_with, train_sft_with, LossReport, TrainOutcome};

use crate::artifacts::*;
use crate::config::{AggregateMode, ConfigError, DecodeMode, PipelineConfig};

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Accept generations produced under different configurations.
    pub force: bool,
    /// Answer augmentation requests with the offline rule-based responder.
    pub mock: bool,
}

pub struct Pipeline {
    config: PipelineConfig,
    options: RunOptions,
    provenance: Provenance,
}

/// Row labels of the summary table, in display order.
pub fn method_order(k_return: usize) -> [String; 4] {
    [
        "SFT-Greedy".into(),
        "DPO-Greedy".into(),
        format!("SFT-Sample-{k_return}"),
        format!("DPO-Sample-{k_return}"),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub method: String,
    pub questions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnScore {
    pub dialogue_id: String,
    pub turn_index: usize,
    #[serde(flatten)]
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodScores {
    pub method: String,
    pub micro: MetricReport,
    #[serde(rename = "macro")]
    pub macro_: MacroAverage,
    pub turns: Vec<TurnScore>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrfTriple {
    pub p: f64,
    pub r: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: String,
    pub rouge_l: PrfTriple,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub weight: socratic_core::eval::RougeComponent,
    pub aggregate: AggregateMode,
    pub table: Vec<TableRow>,
    pub methods: Vec<MethodScores>,
}

#[derive(Serialize)]
struct ModelMeta<'a> {
    #[serde(flatten)]
    provenance: &'a Provenance,
    phase: &'static str,
    steps: usize,
    final_loss: f64,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, options: RunOptions) -> Self {
        let provenance = Provenance::new(&config.config_hash);
        Self {
            config,
            options,
            provenance,
        }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn output(&self, name: &str) -> PathBuf {
        self.config.output_dir.join(name)
    }

    fn corpus(&self) -> anyhow::Result<Vec<Dialogue>> {
        let path = &self.config.corpus_path;
        let bytes = read_text(path, "ingest")?;
        let mut dialogues = parse_corpus(&bytes).map_err(|e| ArtifactError {
            path: path.clone(),
            problem: e.to_string(),
            producer: "ingest",
        })?;
        dialogues.sort_by(|a, b| a.id().cmp(b.id()));
        Ok(dialogues)
    }

    fn gateway(&self) -> anyhow::Result<Gateway> {
        let g = &self.config.gateway;
        let gateway = if self.options.mock {
            Gateway::new(RuleBasedResponder)
        } else {
            let provider = HttpProvider::from_env(&g.endpoint_url, &g.api_key_env).map_err(|e| ConfigError(e.to_string()))?;
            let gateway = Gateway::new(provider);
            match &g.cache_dir {
                Some(dir) => gateway.with_cache_dir(dir),
                None => gateway,
            }
        };
        Ok(gateway.with_max_in_flight(g.max_in_flight))
    }

    fn augment_settings(&self) -> AugmentSettings {
        let g = &self.config.gateway;
        AugmentSettings {
            model_name: g.model_name.clone(),
            max_tokens: g.max_tokens,
            generation_temperature: g.generation_temperature,
            consistency_temperature: g.consistency_temperature,
            prompt_options: self.config.prompt,
        }
    }

    /// Tagged transcripts to the corpus document at `corpus_path`.
    pub fn ingest(&self) -> anyhow::Result<()> {
        let Some(dir) = &self.config.transcripts_dir else {
            return Err(ConfigError("at `transcripts_dir`: required by `ingest`".into()).into());
        };
        let dialogues = ingest_transcripts(dir).with_context(|| format!("ingesting {}", dir.display()))?;
        let mut doc: serde_json::Value = serde_json::from_str(&serialize_corpus(&dialogues))?;
        doc["meta"] = serde_json::to_value(&self.provenance)?;
        write_json(&self.config.corpus_path, &doc)?;
        eprintln!("ingest: {} dialogues -> {}", dialogues.len(), self.config.corpus_path.display());
        Ok(())
    }

    pub fn augment(&self) -> anyhow::Result<()> {
        self.augment_with(&self.gateway()?)
    }

    /// `augment` against a caller-supplied gateway.
    pub fn augment_with(&self, gateway: &Gateway) -> anyhow::Result<()> {
        let dialogues = self.corpus()?;
        let out = augment_corpus(&dialogues, gateway, &self.augment_settings())?;
        let records: Vec<_> = out.classified.iter().map(|q| Stamped::new(&self.provenance, q)).collect();
        write_records(&self.output(GENERATED_INVALID), &records)?;
        write_json(&self.output(CONSISTENCY_REPORT), &Stamped::new(&self.provenance, &out.report))?;
        let stats = gateway.stats();
        eprintln!(
            "augment: {} generated, {} kept ({:.1}%), {} network calls, {} cache hits",
            out.report.generated,
            out.report.kept,
            100.0 * out.report.kept_fraction,
            stats.network_calls,
            stats.cache_hits
        );
        for w in &out.report.warnings {
            eprintln!("augment: warning: {w}");
        }
        Ok(())
    }

    pub fn build_prefs(&self) -> anyhow::Result<()> {
        let dialogues = self.corpus()?;
        let classified: Vec<Stamped<ClassifiedQuestion>> =
            read_records(&self.output(GENERATED_INVALID), "augment")?;
        let mut kept: BTreeMap<(String, usize), Vec<GeneratedInvalidQuestion>> = BTreeMap::new();
        for q in classified.into_iter().map(|s| s.record) {
            if let Some(category) = q.label.and_then(|l| l.as_invalid()).filter(|_| q.kept) {
                let key = (q.generated.dialogue_id.clone(), q.generated.turn_index);
                kept.entry(key).or_default().push(GeneratedInvalidQuestion { category, ..q.generated });
            }
        }
        let mut pairs = Vec::new();
        for d in &dialogues {
            for t in d.annotated_turns() {
                let Some(invalid) = kept.get(&(d.id().to_string(), t)) else {
                    continue;
                };
                let prompt = render_prompt_with(&d.problem, &d.turns[..t], &self.config.prompt);
                pairs.extend(build_preference_pairs(&prompt, &d.turns[t].ground_truth_questions, invalid));
            }
        }
        let records: Vec<_> = pairs.iter().map(|p| Stamped::new(&self.provenance, p)).collect();
        write_records(&self.output(PREFS), &records)?;
        eprintln!("build-prefs: {} preference pairs", pairs.len());
        Ok(())
    }

    fn vocab(&self, dialogues: &[Dialogue]) -> anyhow::Result<Vocab> {
        let mut texts: Vec<String> = Vec::new();
        for d in dialogues {
            for turn in &d.turns {
                texts.push(turn.utterance.clone());
                texts.extend(turn.ground_truth_questions.iter().cloned());
            }
        }
        let prefs = self.output(PREFS);
        if prefs.is_file() {
            for p in read_records::<Stamped<PreferencePair>>(&prefs, "build-prefs")? {
                texts.push(p.record.chosen);
                texts.push(p.record.rejected);
            }
        }
        Ok(Vocab::build(texts.iter().map(String::as_str)))
    }

    fn save_model(&self, name: &str, phase: &'static str, outcome: &TrainOutcome) -> anyhow::Result<()> {
        let meta = ModelMeta {
            provenance: &self.provenance,
            phase,
            steps: outcome.log.len(),
            final_loss: outcome.final_loss,
        };
        let json = outcome.params.to_model_json(Some(serde_json::to_value(meta)?));
        write_bytes(&self.output(name), json.as_bytes())
    }

    fn save_log(&self, name: &str, log: &[LossReport]) -> anyhow::Result<()> {
        let records: Vec<_> = log.iter().map(|r| Stamped::new(&self.provenance, r)).collect();
        write_records(&self.output(name), &records)
    }

    pub fn train_sft(&self) -> anyhow::Result<TrainOutcome> {
        let dialogues = self.corpus()?;
        let examples: Vec<_> = dialogues.iter().flat_map(|d| split_turns_with(d, &self.config.prompt)).collect();
        let vocab = self.vocab(&dialogues)?;
        let outcome = train_sft_with(&examples, vocab, self.config.model.bucket_count, &self.config.sft, |_| {})?;
        self.save_model(MODEL_SFT, "sft", &outcome)?;
        self.save_log(SFT_LOSS, &outcome.log)?;
        eprintln!(
            "train-sft: {} examples, loss {:.4} -> {:.4}",
            examples.len(),
            outcome.log.first().map_or(f64::NAN, |r| r.loss),
            outcome.final_loss
        );
        Ok(outcome)
    }

    pub fn train_dpo(&self) -> anyhow::Result<TrainOutcome> {
        let reference = read_model(&self.output(MODEL_SFT), "train-sft")?;
        let pairs: Vec<PreferencePair> = read_records::<Stamped<PreferencePair>>(&self.output(PREFS), "build-prefs")?
            .into_iter()
            .map(|s| s.record)
            .collect();
        if pairs.is_empty() {
            return Err(ArtifactError {
                path: self.output(PREFS),
                problem: "holds no preference pairs".into(),
                producer: "build-prefs",
            }
            .into());
        }
        let outcome = train_dpo_with(&pairs, &reference, &self.config.dpo, |_| {})?;
        self.save_model(MODEL_DPO, "dpo", &outcome)?;
        self.save_log(DPO_LOSS, &outcome.log)?;
        eprintln!(
            "train-dpo: {} pairs, loss {:.4} -> {:.4}, margin {:.4}",
            pairs.len(),
            outcome.log.first().map_or(f64::NAN, |r| r.loss),
            outcome.final_loss,
            outcome.log.last().and_then(|r| r.margin_mean).unwrap_or(f64::NAN)
        );
        Ok(outcome)
    }

    fn sample_seed(&self, dialogue_id: &str, turn_index: usize, method: &str) -> u64 {
        let key = format!("{}\0{dialogue_id}\0{turn_index}\0{method}", self.config.decode.seed);
        let digest = Sha256::digest(key.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    pub fn generate(&self) -> anyhow::Result<()> {
        let dialogues = self.corpus()?;
        let sft = read_model(&self.output(MODEL_SFT), "train-sft")?;
        let dpo = read_model(&self.output(MODEL_DPO), "train-dpo")?;
        let decode = &self.config.decode;
        let sampling = decode.sampling();
        let models: [(&str, &PolicyParams); 2] = [("SFT", &sft), ("DPO", &dpo)];

        let mut records = Vec::new();
        for d in &dialogues {
            for t in d.annotated_turns() {
                let prompt = render_prompt_with(&d.problem, &d.turns[..t], &self.config.prompt);
                let mut push = |method: String, questions: Vec<String>| {
                    records.push(Stamped::new(
                        &self.provenance,
                        Generation {
                            dialogue_id: d.id().to_string(),
                            turn_index: t,
                            method,
                            questions,
                        },
                    ))
                };
                for mode in [DecodeMode::Greedy, DecodeMode::Sample] {
                    if !decode.modes.contains(&mode) {
                        continue;
                    }
                    for (name, params) in models {
                        let vocab = params.vocab();
                        match mode {
                            DecodeMode::Greedy => {
                                let ids = greedy_decode(params, &prompt, decode.max_len);
                                push(format!("{name}-Greedy"), vec![vocab.decode(&ids)]);
                            }
                            DecodeMode::Sample => {
                                let method = format!("{name}-Sample-{}", decode.k_return);
                                let seed = self.sample_seed(d.id(), t, &method);
                                let samples = nucleus_sample(params, &prompt, &sampling, seed)?;
                                push(method, samples.iter().map(|ids| vocab.decode(ids)).collect());
                            }
                        }
                    }
                }
            }
        }
        write_records(&self.output(GENERATIONS), &records)?;
        eprintln!("generate: {} records", records.len());
        Ok(())
    }

    pub fn evaluate(&self) -> anyhow::Result<EvalReport> {
        let dialogues = self.corpus()?;
        let path = self.output(GENERATIONS);
        let records: Vec<Stamped<Generation>> = read_records(&path, "generate")?;
        let hashes: BTreeSet<&str> = records.iter().map(|r| r.provenance.config_hash.as_str()).collect();
        if hashes.len() > 1 && !self.options.force {
            return Err(ArtifactError {
                path,
                problem: format!(
                    "records come from {} different configurations ({}); pass --force to score them together",
                    hashes.len(),
                    hashes.into_iter().collect::<Vec<_>>().join(", ")
                ),
                producer: "generate",
            }
            .into());
        }

        let truth: BTreeMap<(&str, usize), &[String]> = dialogues
            .iter()
            .flat_map(|d| d.annotated_turns().map(move |t| ((d.id(), t), &d.turns[t].ground_truth_questions[..])))
            .collect();
        let weight = RougeL { component: self.config.eval.weight };
        let mut by_method: BTreeMap<String, Vec<TurnScore>> = BTreeMap::new();
        for r in &records {
            let g = &r.record;
            let Some(gt) = truth.get(&(g.dialogue_id.as_str(), g.turn_index)) else {
                bail!(ArtifactError {
                    path: path.clone(),
                    problem: format!("{}#{} is not an annotated turn of the corpus", g.dialogue_id, g.turn_index),
                    producer: "generate",
                });
            };
            let report = turn_metrics(&g.questions, gt, &weight)?;
            by_method.entry(g.method.clone()).or_default().push(TurnScore {
                dialogue_id: g.dialogue_id.clone(),
                turn_index: g.turn_index,
                report,
            });
        }

        let order = method_order(self.config.decode.k_return);
        let rank = |m: &str| order.iter().position(|o| o == m).unwrap_or(order.len());
        let mut methods: Vec<MethodScores> = by_method
            .into_iter()
            .map(|(method, turns)| {
                let reports: Vec<MetricReport> = turns.iter().map(|t| t.report.clone()).collect();
                let mut micro = aggregate(&reports);
                micro.matched_pairs.clear();
                MethodScores {
                    method,
                    micro,
                    macro_: macro_average(&reports),
                    turns,
                }
            })
            .collect();
        methods.sort_by(|a, b| rank(&a.method).cmp(&rank(&b.method)).then(a.method.cmp(&b.method)));

        let table = methods
            .iter()
            .map(|m| TableRow {
                method: m.method.clone(),
                rouge_l: match self.config.eval.aggregate {
                    AggregateMode::Micro => PrfTriple {
                        p: m.micro.precision,
                        r: m.micro.recall,
                        f1: m.micro.f1,
                    },
                    AggregateMode::Macro => PrfTriple {
                        p: m.macro_.precision,
                        r: m.macro_.recall,
                        f1: m.macro_.f1,
                    },
                },
            })
            .collect();
        let report = EvalReport {
            provenance: self.provenance.clone(),
            weight: self.config.eval.weight,
            aggregate: self.config.eval.aggregate,
            table,
            methods,
        };
        write_json(&self.output(REPORT), &report)?;
        println!("{:<16} {:>9} {:>9} {:>9}", "method", "P", "R", "F1");
        for row in &report.table {
            println!(
                "{:<16} {:>9.4} {:>9.4} {:>9.4}",
                row.method, row.rouge_l.p, row.rouge_l.r, row.rouge_l.f1
            );
        }
        Ok(report)
    }

    /// The full chain; ingestion runs only when `transcripts_dir` is set.
    pub fn all(&self) -> anyhow::Result<()> {
        if self.config.transcripts_dir.is_some() {
            self.ingest()?;
        }
        self.augment()?;
        self.build_prefs()?;
        self.train_sft()?;
        self.train_dpo()?;
        self.generate()?;
        self.evaluate()?;
        Ok(())
    }
}

/// Process exit status for an error: 2 configuration, 3 upstream artifact,
/// 4 provider, 1 anything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return 2;
        }
        if cause.is::<ArtifactError>() {
            return 3;
        }
        let gateway = cause.downcast_ref::<GatewayError>().or_else(|| {
            match cause.downcast_ref::<socratic_core::augment::AugmentError>() {
                Some(socratic_core::augment::AugmentError::Gateway(g)) => Some(g),
                _ => None,
            }
        });
        match gateway {
            Some(GatewayError::Config(_)) => return 2,
            Some(_) => return 4,
            None => {}
        }
    }
    1
}
