//! Prompt text rendering. Everything here is a pure function of its inputs.

use std::fmt;

use super::{HistoryWindow, Item};

pub const FEATURE_OPEN: char = '\u{3008}';
pub const FEATURE_CLOSE: char = '\u{3009}';

/// A feature slot inside prompt text: `〈USER:id〉` or `〈FEAT:id〉`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Slot {
    User(usize),
    Item(usize),
}

impl Slot {
    /// Parses the text between the angle brackets, e.g. `FEAT:12`.
    pub fn parse_inner(inner: &str) -> Option<Slot> {
        let (tag, id) = inner.split_once(':')?;
        if id.is_empty() || !id.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        let id = id.parse().ok()?;
        match tag {
            "USER" => Some(Slot::User(id)),
            "FEAT" => Some(Slot::Item(id)),
            _ => None,
        }
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Slot::User(id) => write!(f, "{FEATURE_OPEN}USER:{id}{FEATURE_CLOSE}"),
            Slot::Item(id) => write!(f, "{FEATURE_OPEN}FEAT:{id}{FEATURE_CLOSE}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PromptKind {
    Thinking,
    Recommend,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptInstance {
    pub kind: PromptKind,
    pub question_text: String,
    pub answer_text: String,
    pub label: u8,
    pub user_id: usize,
    pub item_id: usize,
}

/// Domain nouns used in the templates ("books", "movies", ...).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptStyle {
    pub item_singular: String,
    pub item_plural: String,
}

impl Default for PromptStyle {
    fn default() -> Self {
        Self {
            item_singular: "book".into(),
            item_plural: "books".into(),
        }
    }
}

/// Strips the slot brackets so free text can never forge a placeholder.
fn sanitize(text: &str) -> String {
    text.chars()
        .map(|c| match c {
            FEATURE_OPEN => '(',
            FEATURE_CLOSE => ')',
            '\n' | '\t' | '\r' => ' ',
            c => c,
        })
        .collect()
}

pub fn label_word(label: u8) -> &'static str {
    if label == 1 {
        "yes"
    } else {
        "no"
    }
}

/// `<title> with feature 〈FEAT:id〉 (label: yes|no) with description: k1, k2`
pub fn render_item_line(item: &Item, label: u8, with_feature_slot: bool) -> String {
    let mut out = sanitize(&item.title);
    if with_feature_slot {
        out.push_str(" with feature ");
        out.push_str(&Slot::Item(item.item_id).to_string());
    }
    out.push_str(" (label: ");
    out.push_str(label_word(label));
    out.push_str(") with description:");
    if !item.keywords.is_empty() {
        out.push(' ');
        out.push_str(&sanitize(&item.keywords.join(", ")));
    }
    out
}

/// History lines joined into the `<HisItemList>` fragment.
pub fn render_history(history: &HistoryWindow, with_feature_slot: bool) -> String {
    history
        .entries
        .iter()
        .map(|(item, label)| render_item_line(item, *label, with_feature_slot))
        .collect::<Vec<_>>()
        .join("; ")
}

/// Recommendation question with a `Yes`/`No` answer. With `with_features`
/// the user and target item get feature slots and every history line carries
/// its item slot; without, the slot phrases are dropped entirely.
pub fn render_rec_prompt(
    history: &HistoryWindow,
    style: &PromptStyle,
    with_features: bool,
) -> PromptInstance {
    let PromptStyle {
        item_singular: one,
        item_plural: many,
    } = style;
    let mut q = format!(
        "#Question: A user has given ratings to the following {many}: {}.",
        render_history(history, with_features)
    );
    if with_features {
        q.push_str(&format!(
            " Additionally, we have information about the user's preferences encoded in the feature {}.",
            Slot::User(history.user_id)
        ));
    }
    q.push_str(&format!(
        " Based on the descriptions and the user's enjoyment of each {one} in the historical sequence, \
         construct a persona of the user's preferences and reevaluate whether the user would enjoy \
         the {one} titled {}",
        sanitize(&history.target.title)
    ));
    if with_features {
        q.push_str(&format!(
            " with the feature {}",
            Slot::Item(history.target.item_id)
        ));
    }
    q.push_str(". Please begin your analysis with \"Yes\" or \"No\".\n#Answer:");
    PromptInstance {
        kind: PromptKind::Recommend,
        question_text: q,
        answer_text: if history.target_label == 1 {
            "Yes"
        } else {
            "No"
        }
        .to_string(),
        label: history.target_label,
        user_id: history.user_id,
        item_id: history.target.item_id,
    }
}
