//! Reasoning-trace synthesis: a query, check and reflect loop around a
//! pluggable oracle, plus a deterministic keyword-vote oracle.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::HistoryWindow;
use crate::dataset::{render_history, render_rec_prompt, PromptInstance, PromptKind, PromptStyle};
use crate::error::{Error, Result};

pub const DEFAULT_MAX_ATTEMPTS: usize = 4;

const CORPUS_HEADER: &str = "# thinkrec-reasons v1";

/// One oracle call. `turn` is 0 for the first query and `1..=3` for the
/// reflect variant used on a retry.
#[derive(Debug, Clone, Copy)]
pub struct OracleQuery<'a> {
    pub prompt: &'a str,
    pub history: &'a HistoryWindow,
    pub turn: usize,
}

pub trait ReasonOracle {
    /// Predicted label and a nonempty explanation.
    fn answer(&self, query: &OracleQuery<'_>) -> (u8, String);
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReasonRecord {
    pub user_id: usize,
    pub item_id: usize,
    /// Target event time, identifying the history window.
    pub timestamp: i64,
    pub label: u8,
    pub reason: String,
    pub attempts: usize,
    /// Reflect variants used, in order (1-based).
    pub prompts_used: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SynthOutcome {
    Success(ReasonRecord),
    Skipped {
        user_id: usize,
        item_id: usize,
        diagnostic: String,
    },
}

/// `A user has given high ratings to the following books: ...`
pub fn first_turn_prompt(history: &HistoryWindow, style: &PromptStyle) -> String {
    format!(
        "A user has given high ratings to the following {}: {}. Using all available information, \
         make a prediction about whether the user would enjoy the {} titled {}?",
        style.item_plural,
        render_history(history, false),
        style.item_singular,
        history.target.title
    )
}

/// Reflect turn `variant` (1..=3) after a wrong prediction.
pub fn reflect_prompt(
    variant: usize,
    answer: &str,
    history: &HistoryWindow,
    style: &PromptStyle,
) -> String {
    let (one, title) = (&style.item_singular, &history.target.title);
    match variant {
        1 => format!(
            "The correct response is {answer}. Reflect on multiple aspects based on historical information \
             and explain the reason for the oversight based on the previous analysis. Reanalyze to make a \
             prediction about whether the user would enjoy the {one} titled {title}?"
        ),
        2 => format!(
            "The accurate answer is {answer}. Delve into various aspects considering historical data, \
             elucidate the cause of the oversight according to the preceding analysis. Conduct a reanalysis \
             to forecast whether the user will take pleasure in the {one} named {title}?"
        ),
        _ => format!(
            "The right response is {answer}. Reflect on a variety of aspects with reference to historical \
             information, and account for the oversight based on the earlier analysis. Reanalyze to \
             determine whether the user would appreciate the {one} titled {title}?"
        ),
    }
}

/// Queries `oracle` with the first-turn prompt, then rotates through the three
/// reflect variants until the prediction matches `history.target_label`.
pub fn synth_reason(
    history: &HistoryWindow,
    oracle: &dyn ReasonOracle,
    max_attempts: usize,
    style: &PromptStyle,
) -> Result<SynthOutcome> {
    if max_attempts == 0 {
        return Err(Error::Invalid("max_attempts must be at least 1".into()));
    }
    let label = history.target_label;
    let answer = if label == 1 { "Yes" } else { "No" };
    let mut prompts_used = Vec::new();
    let mut prompt = first_turn_prompt(history, style);
    for attempt in 1..=max_attempts {
        let turn = prompts_used.last().copied().unwrap_or(0);
        let (predicted, reason) = oracle.answer(&OracleQuery {
            prompt: &prompt,
            history,
            turn,
        });
        if predicted == label && !reason.trim().is_empty() {
            return Ok(SynthOutcome::Success(ReasonRecord {
                user_id: history.user_id,
                item_id: history.target.item_id,
                timestamp: history.timestamp,
                label,
                reason: reason.trim().to_string(),
                attempts: attempt,
                prompts_used,
            }));
        }
        let variant = prompts_used.len() % 3 + 1;
        prompts_used.push(variant);
        prompt = reflect_prompt(variant, answer, history, style);
    }
    Ok(SynthOutcome::Skipped {
        user_id: history.user_id,
        item_id: history.target.item_id,
        diagnostic: format!("no correct prediction within {max_attempts} attempts"),
    })
}

fn join_words(words: &[String]) -> String {
    match words {
        [] => String::new(),
        [one] => one.clone(),
        [rest @ .., last] => format!("{} and {last}", rest.join(", ")),
    }
}

/// Deterministic stand-in for a reasoning model. Each turn looks at the
/// history from a different angle:
///
/// * first turn: target keywords shared with liked vs. disliked items;
/// * reflect 1: number of liked vs. disliked items sharing any keyword;
/// * reflect 2: keyword overlap weighted by recency;
/// * reflect 3: the first-turn vote with ties resolved to yes.
///
/// Other ties resolve to no.
#[derive(Debug, Clone, Copy, Default)]
pub struct KeywordVoteOracle;

struct Overlap {
    liked: Vec<String>,
    disliked: Vec<String>,
}

fn keyword_overlap(history: &HistoryWindow) -> Overlap {
    let target: BTreeSet<&str> = history.target.keywords.iter().map(String::as_str).collect();
    let mut liked = BTreeSet::new();
    let mut disliked = BTreeSet::new();
    for (item, label) in &history.entries {
        for k in item.keywords.iter().filter(|k| target.contains(k.as_str())) {
            if *label == 1 {
                liked.insert(k.clone());
            } else {
                disliked.insert(k.clone());
            }
        }
    }
    Overlap {
        liked: liked.into_iter().collect(),
        disliked: disliked.into_iter().collect(),
    }
}

impl KeywordVoteOracle {
    fn overlap_vote(history: &HistoryWindow, tie_label: u8) -> (u8, String) {
        let title = &history.target.title;
        let Overlap { liked, disliked } = keyword_overlap(history);
        let tie_word = if tie_label == 1 { "yes" } else { "no" };
        if liked.is_empty() && disliked.is_empty() {
            return (
                tie_label,
                format!(
                    "{title} shares no keywords with the history, so there is no evidence either way and the answer defaults to {tie_word}."
                ),
            );
        }
        match liked.len().cmp(&disliked.len()) {
            std::cmp::Ordering::Greater => (
                1,
                format!(
                    "the user liked items about {} and {title} shares these themes, which outweighs its overlap with disliked items, so the user would enjoy it.",
                    join_words(&liked)
                ),
            ),
            std::cmp::Ordering::Less => (
                0,
                format!(
                    "the user disliked items about {} and {title} shares these themes, which outweighs its overlap with liked items, so the user would not enjoy it.",
                    join_words(&disliked)
                ),
            ),
            std::cmp::Ordering::Equal => (
                tie_label,
                format!(
                    "the evidence is ambiguous: {title} shares {} with liked items and {} with disliked items, so the answer defaults to {tie_word}.",
                    join_words(&liked),
                    join_words(&disliked)
                ),
            ),
        }
    }

    fn item_vote(history: &HistoryWindow) -> (u8, String) {
        let target: BTreeSet<&str> = history.target.keywords.iter().map(String::as_str).collect();
        let (mut liked, mut disliked) = (Vec::new(), Vec::new());
        for (item, label) in &history.entries {
            if item.keywords.iter().any(|k| target.contains(k.as_str())) {
                if *label == 1 {
                    liked.push(item.title.clone());
                } else {
                    disliked.push(item.title.clone());
                }
            }
        }
        let title = &history.target.title;
        if liked.len() > disliked.len() {
            (
                1,
                format!(
                    "looking at whole items, {} liked items resemble {title}, among them {}, against {} disliked ones, so the user would enjoy it.",
                    liked.len(),
                    join_words(&liked),
                    disliked.len()
                ),
            )
        } else {
            (
                0,
                format!(
                    "looking at whole items, only {} liked items resemble {title} against {} disliked ones, so the user would not enjoy it.",
                    liked.len(),
                    disliked.len()
                ),
            )
        }
    }

    fn recency_vote(history: &HistoryWindow) -> (u8, String) {
        let target: BTreeSet<&str> = history.target.keywords.iter().map(String::as_str).collect();
        let n = history.entries.len() as f64;
        let mut score = 0.0;
        for (j, (item, label)) in history.entries.iter().enumerate() {
            let hits = item
                .keywords
                .iter()
                .filter(|k| target.contains(k.as_str()))
                .count() as f64;
            let sign = if *label == 1 { 1.0 } else { -1.0 };
            score += sign * hits * (j + 1) as f64 / n;
        }
        let title = &history.target.title;
        let recent = history
            .entries
            .last()
            .map(|(i, _)| i.title.as_str())
            .unwrap_or("");
        if score > 0.0 {
            (
                1,
                format!("the most recent ratings, ending with {recent}, lean towards the themes of {title}, so the user would enjoy it."),
            )
        } else {
            (
                0,
                format!("the most recent ratings, ending with {recent}, do not lean towards the themes of {title}, so the user would not enjoy it."),
            )
        }
    }
}

impl ReasonOracle for KeywordVoteOracle {
    fn answer(&self, query: &OracleQuery<'_>) -> (u8, String) {
        match query.turn {
            0 => Self::overlap_vote(query.history, 0),
            1 => Self::item_vote(query.history),
            2 => Self::recency_vote(query.history),
            _ => Self::overlap_vote(query.history, 1),
        }
    }
}

/// First-turn keyword-overlap vote, ties to 0.
pub fn default_oracle(history: &HistoryWindow) -> (u8, String) {
    KeywordVoteOracle::overlap_vote(history, 0)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReasonCorpus {
    pub records: Vec<ReasonRecord>,
    pub skipped: Vec<String>,
}

/// Runs [`synth_reason`] on a seeded uniform sample of `sample_n` windows.
/// Records keep the order of the sampled window indices.
pub fn build_reason_corpus(
    windows: &[HistoryWindow],
    sample_n: usize,
    seed: u64,
    oracle: &dyn ReasonOracle,
    max_attempts: usize,
    style: &PromptStyle,
) -> Result<ReasonCorpus> {
    if sample_n > windows.len() {
        return Err(Error::Invalid(format!(
            "sample_n {sample_n} exceeds {} windows",
            windows.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, windows.len(), sample_n).into_vec();
    picked.sort_unstable();
    let mut corpus = ReasonCorpus::default();
    for i in picked {
        match synth_reason(&windows[i], oracle, max_attempts, style)? {
            SynthOutcome::Success(r) => corpus.records.push(r),
            SynthOutcome::Skipped {
                user_id,
                item_id,
                diagnostic,
            } => {
                log::debug!("reason synthesis skipped user {user_id} item {item_id}: {diagnostic}");
                corpus
                    .skipped
                    .push(format!("user {user_id} item {item_id}: {diagnostic}"));
            }
        }
    }
    Ok(corpus)
}

/// The thinking instance for a record: the recommendation question with an
/// answer of `Yes. <reason>` or `No. <reason>`.
pub fn thinking_instance(
    window: &HistoryWindow,
    record: &ReasonRecord,
    style: &PromptStyle,
    with_features: bool,
) -> PromptInstance {
    let mut inst = render_rec_prompt(window, style, with_features);
    inst.kind = PromptKind::Thinking;
    inst.answer_text = format!(
        "{}. {}",
        if record.label == 1 { "Yes" } else { "No" },
        record.reason
    );
    inst
}

impl ReasonCorpus {
    /// Pairs each record with its window (matched on user and target time).
    pub fn instances(
        &self,
        windows: &[HistoryWindow],
        style: &PromptStyle,
        with_features: bool,
    ) -> Result<Vec<PromptInstance>> {
        let index: HashMap<(usize, i64), &HistoryWindow> = windows
            .iter()
            .map(|w| ((w.user_id, w.timestamp), w))
            .collect();
        self.records
            .iter()
            .map(|r| {
                let w = index.get(&(r.user_id, r.timestamp)).ok_or_else(|| {
                    Error::Invalid(format!(
                        "no history window for user {} at {}",
                        r.user_id, r.timestamp
                    ))
                })?;
                Ok(thinking_instance(w, r, style, with_features))
            })
            .collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!(
            "{CORPUS_HEADER}\nuser\titem\ttimestamp\tlabel\tattempts\tprompts_used\treason\n"
        );
        for r in &self.records {
            let used: Vec<String> = r.prompts_used.iter().map(usize::to_string).collect();
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.user_id,
                r.item_id,
                r.timestamp,
                r.label,
                r.attempts,
                used.join(","),
                r.reason.replace(['\t', '\n', '\r'], " ")
            );
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(CORPUS_HEADER) {
            return Err(Error::Format(
                "reason corpus: unsupported version header".into(),
            ));
        }
        lines.next();
        let mut records = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.splitn(7, '\t').collect();
            if f.len() != 7 {
                return Err(Error::Format(format!("reason corpus: bad row {line:?}")));
            }
            let bad = || Error::Format(format!("reason corpus: bad row {line:?}"));
            let num = |s: &str| s.parse::<i64>().map_err(|_| bad());
            records.push(ReasonRecord {
                user_id: num(f[0])? as usize,
                item_id: num(f[1])? as usize,
                timestamp: num(f[2])?,
                label: f[3].parse().map_err(|_| bad())?,
                attempts: num(f[4])? as usize,
                prompts_used: f[5]
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse().map_err(|_| bad()))
                    .collect::<Result<_>>()?,
                reason: f[6].to_string(),
            });
        }
        Ok(Self {
            records,
            skipped: Vec::new(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|_| {
            Error::Prerequisite(format!("reason corpus {} is missing", path.display()))
        })?;
        Self::from_tsv(&text)
    }
}
