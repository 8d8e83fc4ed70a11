//! Staged training and evaluation over an output directory.
//!
//! ```text
//! processed/       prepare      cleaned dataset with keywords and split
//! reasons.tsv      synth        oracle reasoning traces (+ reasons.stamp)
//! collab.trkc      collab       MF user/item factors
//! tokenizer.txt    global       vocabulary
//! global.trkc      global       base LM + global adapter
//! cluster.trkc     cluster      user groups and expert representations
//! experts.trkc     experts      one adapter per group
//! projector.trkc   projector    collaborative-embedding projector
//! ```
//!
//! Every checkpoint records its stage fingerprint and the SHA-256 of each
//! file it was built from; loading re-checks both.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::checkpoint::{file_hash, parse_meta, Checkpoint};
use crate::collab::{train_mf, CollabModel};
use crate::config::{ExpertMode, PipelineConfig, Stage};
use crate::dataset::{
    build_windows, filter_sparse, ingest_raw, load_item_metadata, load_processed, render_rec_prompt,
    save_processed, HistoryWindow, IngestOptions, KeywordExtractor, ProcessedDataset, PromptInstance,
    TemporalSplit,
};
use crate::error::{Error, Result};
use crate::fusion::{
    cluster_users, decision_log_tsv, expert_representation, gate, participation, select_for_user, ExpertSet,
    FusionDecision, Selection, UserGroups,
};
use crate::linalg::Mat;
use crate::lm::{generate, AdapterMix, LmParams, LoraAdapter, Tokenizer};
use crate::metrics::{MetricReport, Scored};
use crate::projector::Projector;
use crate::reason::{build_reason_corpus, synth_reason, thinking_instance, KeywordVoteOracle, ReasonCorpus, SynthOutcome};
use crate::trainer::{
    make_instance, prompt_only, score_instances, train_lm, train_projector, FeatureSource, MixConfig, NoFeatures,
    ProjectedFeatures, TrainScope, TrainingInstance,
};

pub const REASONS: &str = "reasons.tsv";
pub const REASONS_STAMP: &str = "reasons.stamp";
pub const COLLAB: &str = "collab.trkc";
pub const TOKENIZER: &str = "tokenizer.txt";
pub const GLOBAL: &str = "global.trkc";
pub const CLUSTER: &str = "cluster.trkc";
pub const EXPERTS: &str = "experts.trkc";
pub const PROJECTOR: &str = "projector.trkc";

fn checkpoint_file(stage: Stage) -> &'static str {
    match stage {
        Stage::Collab => COLLAB,
        Stage::Global => GLOBAL,
        Stage::Cluster => CLUSTER,
        Stage::Experts => EXPERTS,
        Stage::Projector => PROJECTOR,
        Stage::Prepare | Stage::Synth => unreachable!("not a checkpoint stage"),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn mismatch(artifact: &Path, expected: String, found: String) -> Error {
    Error::HashMismatch { artifact: artifact.display().to_string(), expected, found }
}

fn new_checkpoint(cfg: &PipelineConfig, stage: Stage, inputs: &[&str]) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(stage.name());
    ck.set_meta("config_hash", cfg.fingerprint(stage));
    for name in inputs {
        ck.set_meta(&format!("input.{name}"), file_hash(&cfg.artifact(name))?);
    }
    Ok(ck)
}

/// Loads a stage checkpoint, checking its fingerprint against `cfg` and the
/// hashes of the files it was built from.
pub fn open_checkpoint(cfg: &PipelineConfig, stage: Stage) -> Result<Checkpoint> {
    let path = cfg.artifact(checkpoint_file(stage));
    if !path.exists() {
        return Err(Error::Prerequisite(format!(
            "{} checkpoint {} not found; run the `{}` stage first",
            stage.name(),
            path.display(),
            stage_command(stage)
        )));
    }
    let ck = Checkpoint::load(&path)?;
    let expected = cfg.fingerprint(stage);
    let found = ck.meta("config_hash")?;
    if found != expected {
        return Err(mismatch(&path, expected, found.to_string()));
    }
    for (key, recorded) in &ck.meta {
        if let Some(name) = key.strip_prefix("input.") {
            let current = file_hash(&cfg.artifact(name))?;
            if &current != recorded {
                return Err(mismatch(&cfg.artifact(name), recorded.clone(), current));
            }
        }
    }
    Ok(ck)
}

pub fn stage_command(stage: Stage) -> &'static str {
    match stage {
        Stage::Prepare => "prepare",
        Stage::Synth => "synth",
        Stage::Collab => "train-collab",
        Stage::Global => "train-global",
        Stage::Cluster => "cluster",
        Stage::Experts => "train-experts",
        Stage::Projector => "train-projector",
    }
}

/// Boundaries at the given fractions of the sorted timestamps, nudged apart
/// when they coincide.
pub fn quantile_boundaries(timestamps: &[i64], train_fraction: f64, valid_fraction: f64) -> (i64, i64) {
    let mut ts = timestamps.to_vec();
    ts.sort_unstable();
    let at = |f: f64| {
        let idx = ((f * ts.len() as f64).ceil() as usize).clamp(1, ts.len()) - 1;
        ts[idx]
    };
    let train_end = at(train_fraction);
    let valid_end = at(train_fraction + valid_fraction).max(train_end + 1);
    (train_end, valid_end)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrepareReport {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

pub fn stage_prepare(cfg: &PipelineConfig) -> Result<PrepareReport> {
    let d = &cfg.data;
    if !d.ratings.exists() {
        return Err(Error::Prerequisite(format!("ratings file {} not found", d.ratings.display())));
    }
    let options = IngestOptions { delimiter: d.delimiter.clone(), threshold: d.threshold };
    let (mut raw, ingest) = ingest_raw(&d.ratings, &options)?;
    let mut manifest = BTreeMap::new();
    manifest.insert("config_hash".to_string(), cfg.fingerprint(Stage::Prepare));
    manifest.insert("ratings_sha256".into(), file_hash(&d.ratings)?);
    manifest.insert("raw_rows".into(), ingest.rows.to_string());
    manifest.insert("raw_malformed".into(), ingest.malformed.to_string());
    manifest.insert("raw_duplicates".into(), ingest.duplicates.to_string());
    if let Some(items) = &d.items {
        if !items.exists() {
            return Err(Error::Prerequisite(format!("item metadata {} not found", items.display())));
        }
        let n = load_item_metadata(&mut raw, items, &d.item_delimiter)?;
        manifest.insert("items_sha256".into(), file_hash(items)?);
        manifest.insert("items_with_metadata".into(), n.to_string());
    }
    let mut dataset = filter_sparse(&raw, d.min_interactions)?;
    let extractor = KeywordExtractor::fit(dataset.items.values().map(|i| i.description.as_str()));
    for item in dataset.items.values_mut() {
        item.keywords = extractor.extract(&item.description, d.keywords);
    }
    let (train_end, valid_end) = match (d.train_end, d.valid_end) {
        (Some(t), Some(v)) => (t, v),
        _ => {
            let ts: Vec<i64> = dataset.interactions.iter().map(|i| i.timestamp).collect();
            quantile_boundaries(&ts, d.train_fraction, d.valid_fraction)
        }
    };
    let processed = ProcessedDataset { dataset, train_end, valid_end, manifest };
    save_processed(&cfg.processed_dir(), &processed)?;
    write_file(&cfg.artifact("config.toml"), &cfg.to_toml())?;
    let split = processed.split()?;
    Ok(PrepareReport {
        users: processed.dataset.user_count(),
        items: processed.dataset.item_count(),
        interactions: processed.dataset.len(),
        train: split.train.len(),
        valid: split.valid.len(),
        test: split.test.len(),
    })
}

pub fn load_prepared(cfg: &PipelineConfig) -> Result<ProcessedDataset> {
    let dir = cfg.processed_dir();
    if !dir.join("manifest.tsv").exists() {
        return Err(Error::Prerequisite(format!(
            "processed dataset {} not found; run `prepare` first",
            dir.display()
        )));
    }
    let processed = load_processed(&dir)?;
    let expected = cfg.fingerprint(Stage::Prepare);
    let found = processed.manifest.get("config_hash").cloned().unwrap_or_default();
    if found != expected {
        return Err(mismatch(&dir, expected, found));
    }
    Ok(processed)
}

/// Everything the LM stages derive from the processed data.
pub struct Workspace {
    pub processed: ProcessedDataset,
    pub split: TemporalSplit,
    pub train_windows: Vec<HistoryWindow>,
    pub test_windows: Vec<HistoryWindow>,
}

impl Workspace {
    pub fn load(cfg: &PipelineConfig) -> Result<Self> {
        let processed = load_prepared(cfg)?;
        let split = processed.split()?;
        let h = cfg.data.max_history;
        let train_windows = build_windows(&processed.dataset, &split.train.interactions, h)?;
        let test_windows = build_windows(&processed.dataset, &split.test.interactions, h)?;
        Ok(Self { processed, split, train_windows, test_windows })
    }
}

pub fn stage_synth(cfg: &PipelineConfig) -> Result<ReasonCorpus> {
    let ws = Workspace::load(cfg)?;
    let n = if cfg.reasons.sample_n == 0 {
        ws.train_windows.len()
    } else {
        cfg.reasons.sample_n.min(ws.train_windows.len())
    };
    let corpus = build_reason_corpus(
        &ws.train_windows,
        n,
        cfg.reasons.seed,
        &KeywordVoteOracle,
        cfg.reasons.max_attempts,
        &cfg.data.style(),
    )?;
    corpus.save(&cfg.artifact(REASONS))?;
    write_file(&cfg.artifact(REASONS_STAMP), &format!("config_hash\t{}\n", cfg.fingerprint(Stage::Synth)))?;
    Ok(corpus)
}

pub fn load_reasons(cfg: &PipelineConfig) -> Result<ReasonCorpus> {
    let stamp_path = cfg.artifact(REASONS_STAMP);
    let corpus = ReasonCorpus::load(&cfg.artifact(REASONS))?;
    let stamp = fs::read_to_string(&stamp_path)
        .map_err(|_| Error::Prerequisite(format!("{} not found; run `synth` first", stamp_path.display())))?;
    let found = stamp.trim().strip_prefix("config_hash\t").unwrap_or("").to_string();
    let expected = cfg.fingerprint(Stage::Synth);
    if found != expected {
        return Err(mismatch(&cfg.artifact(REASONS), expected, found));
    }
    Ok(corpus)
}

pub fn stage_collab(cfg: &PipelineConfig) -> Result<Vec<f64>> {
    let processed = load_prepared(cfg)?;
    let split = processed.split()?;
    let (model, report) = train_mf(&split.train, &cfg.collab)?;
    let mut ck = new_checkpoint(cfg, Stage::Collab, &["processed/interactions.tsv"])?;
    ck.set_meta("seed", cfg.collab.seed);
    ck.put_collab(&model)?;
    ck.save(&cfg.artifact(COLLAB))?;
    Ok(report.epoch_loss)
}

pub fn load_collab(cfg: &PipelineConfig) -> Result<CollabModel> {
    open_checkpoint(cfg, Stage::Collab)?.get_collab()
}

/// Tokenized instances, dropping (and counting) any that overflow the context.
fn tokenize_all(prompts: &[PromptInstance], tok: &Tokenizer, context_len: usize) -> Result<Vec<TrainingInstance>> {
    let mut out = Vec::with_capacity(prompts.len());
    let mut dropped = 0;
    for p in prompts {
        match make_instance(p, tok, context_len) {
            Ok(i) => out.push(i),
            Err(Error::ContextOverflow { .. }) => dropped += 1,
            Err(e) => return Err(e),
        }
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} of {} prompts longer than the context window", prompts.len());
    }
    Ok(out)
}

/// Recommendation and thinking prompts for the training split.
fn training_prompts(
    cfg: &PipelineConfig,
    ws: &Workspace,
    corpus: &ReasonCorpus,
    with_features: bool,
) -> Result<(Vec<PromptInstance>, Vec<PromptInstance>)> {
    let style = cfg.data.style();
    let rec = ws.train_windows.iter().map(|w| render_rec_prompt(w, &style, with_features)).collect();
    let think = corpus.instances(&ws.train_windows, &style, with_features)?;
    Ok((rec, think))
}

pub struct GlobalModel {
    pub tokenizer: Tokenizer,
    pub params: LmParams,
    pub adapter: LoraAdapter,
}

pub fn stage_global(cfg: &PipelineConfig) -> Result<String> {
    let ws = Workspace::load(cfg)?;
    let corpus = load_reasons(cfg)?;
    let (rec, think) = training_prompts(cfg, &ws, &corpus, false)?;
    let (rec_slotted, _) = training_prompts(cfg, &ws, &corpus, true)?;
    let texts = rec_slotted
        .iter()
        .chain(&think)
        .flat_map(|p| [p.question_text.as_str(), p.answer_text.as_str()])
        .chain(ws.processed.dataset.items.values().map(|i| i.title.as_str()));
    let tokenizer = Tokenizer::build(texts, cfg.tokenizer.max_vocab, cfg.tokenizer.min_count);
    let mut lm_cfg = cfg.lm.clone();
    if lm_cfg.vocab_size != 0 && lm_cfg.vocab_size != tokenizer.vocab_size() {
        return Err(Error::Config(format!(
            "lm.vocab_size {} differs from the tokenizer's {}",
            lm_cfg.vocab_size,
            tokenizer.vocab_size()
        )));
    }
    lm_cfg.vocab_size = tokenizer.vocab_size();
    let ctx = lm_cfg.context_len;
    let rec = tokenize_all(&rec, &tokenizer, ctx)?;
    let think = if cfg.mix.think_rate > 0.0 { tokenize_all(&think, &tokenizer, ctx)? } else { Vec::new() };

    // The base stays at its seeded init; only the global adapter learns.
    let mut params = LmParams::init(&lm_cfg)?;
    let mut adapter = LoraAdapter::init(&lm_cfg, cfg.lora, cfg.mix.seed.wrapping_add(1))?;
    let log = train_lm(
        &mut params,
        &mut adapter,
        &rec,
        &think,
        &cfg.mix,
        &cfg.loss,
        &TrainScope::last_layers(lm_cfg.n_layers, lm_cfg.n_layers),
        &NoFeatures,
    )?;
    tokenizer.save(&cfg.artifact(TOKENIZER))?;
    write_file(&cfg.artifact("global_log.tsv"), &log.to_tsv())?;
    let mut ck = new_checkpoint(cfg, Stage::Global, &["processed/interactions.tsv", REASONS, TOKENIZER])?;
    ck.set_meta("seed", cfg.mix.seed);
    ck.put_lm("base.", &params)?;
    ck.put_adapter("global.", &adapter)?;
    ck.save(&cfg.artifact(GLOBAL))
}

pub fn load_global(cfg: &PipelineConfig) -> Result<GlobalModel> {
    let ck = open_checkpoint(cfg, Stage::Global)?;
    Ok(GlobalModel {
        tokenizer: Tokenizer::load(&cfg.artifact(TOKENIZER))?,
        params: ck.get_lm("base.")?,
        adapter: ck.get_adapter("global.")?,
    })
}

pub struct Clusters {
    pub groups: UserGroups,
    pub representations: Vec<Vec<f64>>,
}

pub fn stage_cluster(cfg: &PipelineConfig) -> Result<Clusters> {
    let collab = load_collab(cfg)?;
    let groups = cluster_users(&collab.user_vectors, cfg.experts.n_groups, cfg.experts.cluster_seed)?;
    let representations = expert_representation(&groups, &collab)?;
    let mut ck = new_checkpoint(cfg, Stage::Cluster, &[COLLAB])?;
    ck.set_meta("seed", cfg.experts.cluster_seed);
    ck.put("centroids", &groups.centroids)?;
    let assignment: Vec<f64> = groups.assignment.iter().map(|&a| a as f64).collect();
    ck.put("assignment", &Mat::from_vec(1, assignment.len(), assignment))?;
    let d = collab.dim();
    let reps: Vec<f64> = representations.iter().flatten().copied().collect();
    ck.put("representations", &Mat::from_vec(representations.len(), d, reps))?;
    ck.save(&cfg.artifact(CLUSTER))?;
    let mut tsv = String::from("user\traw_user\tgroup\n");
    let processed = load_prepared(cfg)?;
    for (u, g) in groups.assignment.iter().enumerate() {
        let raw = processed.dataset.user_raw.get(u).copied().unwrap_or_default();
        let _ = writeln!(tsv, "{u}\t{raw}\t{g}");
    }
    write_file(&cfg.artifact("groups.tsv"), &tsv)?;
    Ok(Clusters { groups, representations })
}

pub fn load_clusters(cfg: &PipelineConfig) -> Result<Clusters> {
    let ck = open_checkpoint(cfg, Stage::Cluster)?;
    let centroids = ck.get("centroids")?.clone();
    let assignment = ck.get("assignment")?.data.iter().map(|&a| a as usize).collect();
    let reps = ck.get("representations")?;
    let representations = (0..reps.rows).map(|r| reps.row(r).to_vec()).collect();
    Ok(Clusters { groups: UserGroups { assignment, centroids }, representations })
}

fn expert_mix(cfg: &PipelineConfig, g: usize) -> MixConfig {
    MixConfig {
        steps: cfg.experts.steps,
        learning_rate: cfg.experts.learning_rate,
        seed: cfg.experts.seed.wrapping_add(g as u64),
        ..cfg.mix.clone()
    }
}

pub fn stage_experts(cfg: &PipelineConfig) -> Result<usize> {
    let ws = Workspace::load(cfg)?;
    let corpus = load_reasons(cfg)?;
    let global = load_global(cfg)?;
    let clusters = load_clusters(cfg)?;
    let (rec, think) = training_prompts(cfg, &ws, &corpus, false)?;
    let ctx = global.params.config.context_len;
    let rec = tokenize_all(&rec, &global.tokenizer, ctx)?;
    let think = tokenize_all(&think, &global.tokenizer, ctx)?;
    let n_layers = global.params.config.n_layers;
    let scope = TrainScope::last_layers(n_layers, cfg.trainable_layers());

    let mut ck = new_checkpoint(cfg, Stage::Experts, &[GLOBAL, CLUSTER, REASONS])?;
    ck.set_meta("experts", cfg.experts.n_groups);
    ck.set_meta("trainable_layers", cfg.trainable_layers());
    for g in 0..cfg.experts.n_groups {
        let in_group = |i: &&TrainingInstance| clusters.groups.assignment.get(i.user_id) == Some(&g);
        let g_rec: Vec<TrainingInstance> = rec.iter().filter(in_group).cloned().collect();
        let g_think: Vec<TrainingInstance> = think.iter().filter(in_group).cloned().collect();
        let mut mix = expert_mix(cfg, g);
        if g_think.is_empty() && mix.think_rate > 0.0 {
            log::warn!("group {g} has no reasoning traces; training its expert on recommendation prompts only");
            mix.think_rate = 0.0;
            mix.rec_rate = 1.0;
        }
        let mut adapter = global.adapter.clone();
        if g_rec.is_empty() && g_think.is_empty() {
            log::warn!("group {g} has no training prompts; its expert keeps the global weights");
        } else {
            let mut params = global.params.clone();
            let log = train_lm(&mut params, &mut adapter, &g_rec, &g_think, &mix, &cfg.loss, &scope, &NoFeatures)?;
            write_file(&cfg.artifact(&format!("expert{g}_log.tsv")), &log.to_tsv())?;
        }
        ck.put_adapter(&format!("expert.{g}."), &adapter)?;
    }
    ck.save(&cfg.artifact(EXPERTS))?;
    Ok(cfg.experts.n_groups)
}

pub fn load_experts(cfg: &PipelineConfig, global: &GlobalModel) -> Result<ExpertSet> {
    let ck = open_checkpoint(cfg, Stage::Experts)?;
    let clusters = load_clusters(cfg)?;
    let n: usize = parse_meta(ck.meta("experts")?)?;
    let experts = (0..n).map(|g| ck.get_adapter(&format!("expert.{g}."))).collect::<Result<Vec<_>>>()?;
    let set = ExpertSet { global: global.adapter.clone(), experts, representations: clusters.representations };
    set.validate()?;
    Ok(set)
}

pub fn stage_projector(cfg: &PipelineConfig) -> Result<String> {
    let ws = Workspace::load(cfg)?;
    let corpus = load_reasons(cfg)?;
    let global = load_global(cfg)?;
    let collab = load_collab(cfg)?;
    let (rec, think) = training_prompts(cfg, &ws, &corpus, true)?;
    let ctx = global.params.config.context_len;
    let rec = tokenize_all(&rec, &global.tokenizer, ctx)?;
    let think = if cfg.mix.think_rate > 0.0 { tokenize_all(&think, &global.tokenizer, ctx)? } else { Vec::new() };
    let mut projector = Projector::init(collab.dim(), global.params.config.d_model, cfg.projector.seed);
    let mix = MixConfig {
        steps: cfg.projector.steps,
        learning_rate: cfg.projector.learning_rate,
        seed: cfg.projector.seed,
        ..cfg.mix.clone()
    };
    let log = train_projector(&global.params, &global.adapter, &collab, &mut projector, &rec, &think, &mix, &cfg.loss)?;
    write_file(&cfg.artifact("projector_log.tsv"), &log.to_tsv())?;
    let mut ck = new_checkpoint(cfg, Stage::Projector, &[GLOBAL, COLLAB])?;
    ck.set_meta("seed", cfg.projector.seed);
    ck.put_projector("projector.", &projector)?;
    ck.save(&cfg.artifact(PROJECTOR))
}

pub fn load_projector(cfg: &PipelineConfig) -> Result<Projector> {
    open_checkpoint(cfg, Stage::Projector)?.get_projector("projector.")
}

/// Runs every training stage in order.
pub fn run_all(cfg: &PipelineConfig) -> Result<()> {
    stage_prepare(cfg)?;
    stage_synth(cfg)?;
    stage_collab(cfg)?;
    stage_global(cfg)?;
    stage_cluster(cfg)?;
    stage_experts(cfg)?;
    stage_projector(cfg)?;
    Ok(())
}

/// Loaded models for scoring and generation.
pub struct Engine {
    pub global: GlobalModel,
    pub experts: Option<ExpertSet>,
    pub collab: Option<CollabModel>,
    pub projector: Option<Projector>,
}

impl Engine {
    pub fn load(cfg: &PipelineConfig, mode: ExpertMode, use_features: bool) -> Result<Self> {
        let global = load_global(cfg)?;
        let experts = match mode {
            ExpertMode::Global => None,
            _ => Some(load_experts(cfg, &global)?),
        };
        let needs_collab = experts.is_some() || use_features;
        Ok(Self {
            experts,
            collab: if needs_collab { Some(load_collab(cfg)?) } else { None },
            projector: if use_features { Some(load_projector(cfg)?) } else { None },
            global,
        })
    }

    fn features(&self) -> Box<dyn FeatureSource + '_> {
        match (&self.projector, &self.collab) {
            (Some(p), Some(c)) => Box::new(ProjectedFeatures { collab: c, projector: p }),
            _ => Box::new(NoFeatures),
        }
    }

    /// Routing decision for one user under `mode`.
    pub fn select(&self, user_id: usize, mode: ExpertMode, cfg: &PipelineConfig) -> Result<Selection> {
        let (Some(set), Some(collab)) = (&self.experts, &self.collab) else {
            return Ok(Selection { user_id, decision: FusionDecision::Global, weights: vec![], entropy: f64::NAN, cold_start: false });
        };
        let mut s = select_for_user(user_id, set, collab, &cfg.gate)?;
        if s.cold_start {
            return Ok(s);
        }
        s.decision = match mode {
            ExpertMode::Global => FusionDecision::Global,
            ExpertMode::Auto => gate(&s.weights, &cfg.gate),
            ExpertMode::Single => {
                let best = (0..s.weights.len()).fold(0, |b, i| if s.weights[i] > s.weights[b] { i } else { b });
                FusionDecision::Single(best)
            }
            ExpertMode::Fused => FusionDecision::Fused(s.weights.clone()),
        };
        Ok(s)
    }

    pub fn score(&self, inst: &TrainingInstance, decision: &FusionDecision, cfg: &PipelineConfig) -> Result<f64> {
        let features = self.features();
        let p = &self.global.params;
        let rule = cfg.loss.score_rule;
        let one = std::slice::from_ref(inst);
        let scores = match &self.experts {
            Some(set) => {
                let served = set.serve(decision, cfg.gate.fusion)?;
                score_instances(p, Some(&served.mix()), one, features.as_ref(), rule)?
            }
            None => score_instances(p, Some(&AdapterMix::single(&self.global.adapter)), one, features.as_ref(), rule)?,
        };
        Ok(scores[0])
    }

    /// Greedy answer text for a prompt-only instance.
    pub fn generate_text(&self, inst: &TrainingInstance, decision: &FusionDecision, cfg: &PipelineConfig, max_new: usize) -> Result<String> {
        let features = self.features();
        let p = &self.global.params;
        let seq = inst.splice(p, features.as_ref())?;
        let ids = match &self.experts {
            Some(set) => generate(p, Some(&set.serve(decision, cfg.gate.fusion)?.mix()), &seq, max_new)?,
            None => generate(p, Some(&AdapterMix::single(&self.global.adapter)), &seq, max_new)?,
        };
        Ok(self.global.tokenizer.decode(&ids))
    }
}

/// Drops a leading `Yes.`/`No.` so METEOR compares reasons only.
pub fn strip_label(text: &str) -> &str {
    let t = text.trim_start();
    for w in ["Yes", "No"] {
        if let Some(rest) = t.strip_prefix(w) {
            return rest.trim_start_matches([' ', '.', ',']).trim_start();
        }
    }
    t
}

pub struct EvalOutcome {
    pub report: MetricReport,
    pub selections: Vec<Selection>,
    pub reason_pairs: Vec<(String, String)>,
}

pub fn evaluate(cfg: &PipelineConfig, mode: ExpertMode) -> Result<EvalOutcome> {
    let ws = Workspace::load(cfg)?;
    let engine = Engine::load(cfg, mode, cfg.eval.use_features)?;
    let style = cfg.data.style();
    let tok = &engine.global.tokenizer;
    let ctx = engine.global.params.config.context_len;

    let mut selections: BTreeMap<usize, Selection> = BTreeMap::new();
    let mut scored = Vec::with_capacity(ws.test_windows.len());
    for w in &ws.test_windows {
        let prompt = render_rec_prompt(w, &style, cfg.eval.use_features);
        let inst = match make_instance(&prompt, tok, ctx) {
            Ok(i) => prompt_only(&i),
            Err(Error::ContextOverflow { .. }) => continue,
            Err(e) => return Err(e),
        };
        if !selections.contains_key(&w.user_id) {
            selections.insert(w.user_id, engine.select(w.user_id, mode, cfg)?);
        }
        let decision = &selections[&w.user_id].decision;
        let score = engine.score(&inst, decision, cfg)?;
        scored.push(Scored { user_id: w.user_id, item_id: w.target.item_id, score, label: w.target_label });
    }
    let report = MetricReport::from_scores(&scored, cfg.eval.k)?;

    let mut reason_pairs = Vec::new();
    for w in &ws.test_windows {
        if reason_pairs.len() >= cfg.eval.reason_samples {
            break;
        }
        let SynthOutcome::Success(record) = synth_reason(w, &KeywordVoteOracle, cfg.reasons.max_attempts, &style)? else {
            continue;
        };
        let prompt = thinking_instance(w, &record, &style, cfg.eval.use_features);
        let Ok(inst) = make_instance(&prompt, tok, ctx) else {
            continue;
        };
        let decision = selections.get(&w.user_id).map(|s| s.decision.clone()).unwrap_or(FusionDecision::Global);
        let text = engine.generate_text(&prompt_only(&inst), &decision, cfg, cfg.eval.max_new_tokens)?;
        reason_pairs.push((strip_label(&text).to_string(), record.reason));
    }
    let report = report.with_meteor(&reason_pairs);
    Ok(EvalOutcome { report, selections: selections.into_values().collect(), reason_pairs })
}

/// Writes `report-<mode>.txt`, `.tsv` and the routing log.
pub fn write_evaluation(cfg: &PipelineConfig, mode: ExpertMode, out: &EvalOutcome) -> Result<()> {
    let name = format!("{mode:?}").to_lowercase();
    write_file(&cfg.artifact(&format!("report-{name}.txt")), &out.report.to_table())?;
    write_file(
        &cfg.artifact(&format!("report-{name}.tsv")),
        &format!("{}\n{}\n", out.report.tsv_header(), out.report.tsv_row()),
    )?;
    write_file(&cfg.artifact(&format!("decisions-{name}.tsv")), &decision_log_tsv(&out.selections))?;
    let mut reasons = String::from("generated\treference\n");
    for (c, r) in &out.reason_pairs {
        let _ = writeln!(reasons, "{}\t{}", c.replace('\t', " "), r.replace('\t', " "));
    }
    write_file(&cfg.artifact(&format!("reasons-{name}.tsv")), &reasons)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub name: &'static str,
    pub report: MetricReport,
}

pub fn format_ablation(rows: &[AblationRow]) -> String {
    let k = rows.first().map_or(5, |r| r.report.k);
    let mut out = format!("{:<14}{:>9}{:>9}{:>9}{:>9}\n", "config", "AUC", "UAUC", format!("NDCG@{k}"), format!("MAP@{k}"));
    for r in rows {
        let m = &r.report;
        let _ = writeln!(out, "{:<14}{:>9.4}{:>9.4}{:>9.4}{:>9.4}", r.name, m.auc, m.uauc, m.ndcg_at_k, m.map_at_k);
    }
    out
}

/// The configuration trained without thinking data or thinking loss, in a
/// sibling directory that reuses the shared upstream artifacts.
pub fn no_think_config(cfg: &PipelineConfig) -> PipelineConfig {
    let mut c = cfg.clone();
    c.output_dir = cfg.output_dir.join("no-think");
    c.mix.think_rate = 0.0;
    c.mix.rec_rate = 1.0;
    c.loss.weights.beta = 0.0;
    c.loss.weights.gamma = 0.0;
    c
}

fn copy_tree(from: &Path, to: &Path) -> Result<()> {
    fs::create_dir_all(to).map_err(|e| Error::io(to, e))?;
    for entry in fs::read_dir(from).map_err(|e| Error::io(from, e))? {
        let entry = entry.map_err(|e| Error::io(from, e))?;
        let target = to.join(entry.file_name());
        if entry.path().is_dir() {
            copy_tree(&entry.path(), &target)?;
        } else {
            fs::copy(entry.path(), &target).map_err(|e| Error::io(&target, e))?;
        }
    }
    Ok(())
}

/// Full, no-think, no-experts and neither, on the same seeds. The main
/// configuration must already be trained; the no-think variant is trained
/// here from the shared prepared data, reasons, collab and cluster artifacts.
pub fn ablate(cfg: &PipelineConfig) -> Result<Vec<AblationRow>> {
    let alt = no_think_config(cfg);
    for stage in [Stage::Collab, Stage::Cluster] {
        open_checkpoint(cfg, stage)?;
    }
    load_reasons(cfg)?;
    copy_tree(&cfg.processed_dir(), &alt.processed_dir())?;
    for f in [REASONS, REASONS_STAMP, COLLAB, CLUSTER, "groups.tsv"] {
        fs::copy(cfg.artifact(f), alt.artifact(f)).map_err(|e| Error::io(alt.artifact(f), e))?;
    }
    stage_global(&alt)?;
    stage_experts(&alt)?;
    stage_projector(&alt)?;

    let mut rows = Vec::new();
    for (name, c, mode) in [
        ("full", cfg, ExpertMode::Auto),
        ("w/o think", &alt, ExpertMode::Auto),
        ("w/o experts", cfg, ExpertMode::Global),
        ("w/o both", &alt, ExpertMode::Global),
    ] {
        let out = evaluate(c, mode)?;
        rows.push(AblationRow { name, report: out.report });
    }
    write_file(&cfg.artifact("ablation.txt"), &format_ablation(&rows))?;
    Ok(rows)
}

/// Score and explanation for one raw user/item pair, using the user's full
/// history.
pub struct Inference {
    pub score: f64,
    pub decision: FusionDecision,
    pub answer: String,
}

pub fn infer(cfg: &PipelineConfig, raw_user: u64, raw_item: u64, mode: ExpertMode) -> Result<Inference> {
    let processed = load_prepared(cfg)?;
    let ds = &processed.dataset;
    let index = |raw: &[u64], id: u64, kind: &'static str| {
        raw.iter().position(|&r| r == id).ok_or(Error::UnknownId { kind, id: id as usize })
    };
    let user = index(&ds.user_raw, raw_user, "user")?;
    let item = index(&ds.item_raw, raw_item, "item")?;
    let target = crate::dataset::Interaction { user_id: user, item_id: item, rating: 0.0, label: 0, timestamp: i64::MAX };
    let window = build_windows(ds, &[target], cfg.data.max_history)?
        .pop()
        .ok_or_else(|| Error::Invalid(format!("user {raw_user} has no history")))?;
    let engine = Engine::load(cfg, mode, cfg.eval.use_features)?;
    let prompt = render_rec_prompt(&window, &cfg.data.style(), cfg.eval.use_features);
    let inst = prompt_only(&make_instance(&prompt, &engine.global.tokenizer, engine.global.params.config.context_len)?);
    let selection = engine.select(user, mode, cfg)?;
    let score = engine.score(&inst, &selection.decision, cfg)?;
    let answer = engine.generate_text(&inst, &selection.decision, cfg, cfg.eval.max_new_tokens)?;
    Ok(Inference { score, decision: selection.decision, answer })
}

/// Participation weights for every user, for inspection.
pub fn participation_table(cfg: &PipelineConfig) -> Result<HashMap<usize, Vec<f64>>> {
    let collab = load_collab(cfg)?;
    let clusters = load_clusters(cfg)?;
    (0..collab.user_vectors.rows)
        .map(|u| Ok((u, participation(collab.user_vectors.row(u), &clusters.representations, cfg.gate.tau)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_boundaries_split_in_order() {
        let ts: Vec<i64> = (1..=100).collect();
        assert_eq!(quantile_boundaries(&ts, 0.8, 0.1), (80, 90));
        assert_eq!(quantile_boundaries(&[5, 5, 5], 0.8, 0.1), (5, 6));
    }

    #[test]
    fn label_prefix_is_stripped() {
        assert_eq!(strip_label("Yes. the user likes it"), "the user likes it");
        assert_eq!(strip_label("No, never"), "never");
        assert_eq!(strip_label("maybe"), "maybe");
    }

    #[test]
    fn stages_out_of_order_name_the_missing_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = PipelineConfig::default();
        cfg.output_dir = dir.path().to_path_buf();
        let err = stage_global(&cfg).err().unwrap();
        assert!(matches!(&err, Error::Prerequisite(m) if m.contains("processed")), "{err}");
        let err = stage_cluster(&cfg).err().unwrap();
        assert!(matches!(&err, Error::Prerequisite(m) if m.contains("collab.trkc")), "{err}");
        assert_eq!(err.exit_code(), 3);
    }
}
