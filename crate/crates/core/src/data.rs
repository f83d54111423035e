//! Data preparation: ingestion (MovieLens format or synthetic), leave-last-out
//! splitting, pair construction for phase 1, prompt rendering for phase 2,
//! and the word-level vocabulary with atomic item/user id tokens.

pub mod artifacts;
pub mod movielens;
pub mod synth;
pub mod templates;

use crate::error::{IlmError, Result};
use std::collections::{BTreeSet, HashMap};

/// Special token ids (fixed positions at the front of every vocabulary).
pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const CLS: u32 = 3;
/// Placeholder marker reserved for debug renderings of embedding slots.
pub const EMB: u32 = 4;
const SPECIALS: [&str; 5] = ["[pad]", "[bos]", "[eos]", "[cls]", "[emb]"];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ItemMeta {
    pub title: String,
    pub tags: Vec<String>,
}

impl ItemMeta {
    pub fn is_empty(&self) -> bool {
        self.title.trim().is_empty() && self.tags.iter().all(|t| t.trim().is_empty())
    }

    /// Pair text: title and tags joined by fixed separators.
    pub fn pair_text(&self) -> String {
        let tags = self.tags.join(", ");
        if tags.is_empty() {
            self.title.clone()
        } else if self.title.trim().is_empty() {
            tags
        } else {
            format!("{} | {}", self.title, tags)
        }
    }
}

/// Item metadata table plus the user universe; ids are dense in [0, count).
#[derive(Debug, Clone)]
pub struct Catalog {
    pub items: Vec<ItemMeta>,
    pub n_users: usize,
}

impl Catalog {
    pub fn n_items(&self) -> usize {
        self.items.len()
    }
}

/// One interaction event in a user sequence; weight is the rating for rated
/// data and 1 for implicit data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeqEvent {
    pub item: u32,
    pub weight: f64,
}

/// Chronologically ordered interaction sequence of one user.
#[derive(Debug, Clone)]
pub struct UserSequence {
    pub user: u32,
    pub events: Vec<SeqEvent>,
}

impl UserSequence {
    pub fn items(&self) -> Vec<u32> {
        self.events.iter().map(|e| e.item).collect()
    }
}

/// Per-user leave-last-out assignment. Users shorter than 3 interactions
/// keep their events for factorization but get no dev/test targets.
#[derive(Debug, Clone)]
pub enum UserSplit {
    Full { train: Vec<SeqEvent>, dev: SeqEvent, test: SeqEvent },
    Short { events: Vec<SeqEvent> },
}

#[derive(Debug, Clone)]
pub struct Split {
    pub users: Vec<(u32, UserSplit)>,
}

impl Split {
    pub fn full_users(&self) -> impl Iterator<Item = (u32, &Vec<SeqEvent>, SeqEvent, SeqEvent)> {
        self.users.iter().filter_map(|(u, s)| match s {
            UserSplit::Full { train, dev, test } => Some((*u, train, *dev, *test)),
            UserSplit::Short { .. } => None,
        })
    }

    /// Events usable for training signals (train region of full users, whole
    /// sequence of short users).
    pub fn train_events(&self) -> impl Iterator<Item = (u32, &[SeqEvent])> {
        self.users.iter().map(|(u, s)| match s {
            UserSplit::Full { train, .. } => (*u, train.as_slice()),
            UserSplit::Short { events } => (*u, events.as_slice()),
        })
    }
}

/// Leave-last-out: per user, the last item is the test target with the full
/// preceding history as context, the second-from-last is the dev target with
/// the history before it; everything earlier is train.
pub fn split_leave_last(sequences: &[UserSequence]) -> Split {
    let mut users = Vec::with_capacity(sequences.len());
    for seq in sequences {
        if seq.events.len() < 3 {
            log::warn!(
                "user {} has {} interactions (< 3); excluded from dev/test splits",
                seq.user,
                seq.events.len()
            );
            users.push((seq.user, UserSplit::Short { events: seq.events.clone() }));
            continue;
        }
        let n = seq.events.len();
        users.push((
            seq.user,
            UserSplit::Full {
                train: seq.events[..n - 2].to_vec(),
                dev: seq.events[n - 2],
                test: seq.events[n - 1],
            },
        ));
    }
    Split { users }
}

// ── Tokenizer and vocabulary ─────────────────────────────────────────

/// Word-level tokenizer: lowercase, split on whitespace, keep
/// alphanumeric/underscore runs as words and other characters as
/// single-character tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars().flat_map(|c| c.to_lowercase()) {
        if ch.is_alphanumeric() || ch == '_' {
            word.push(ch);
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Token table: specials, then one atomic token per item and user id, then
/// the sorted text words. The mapping is a bijection.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    lookup: HashMap<String, u32>,
    n_items: usize,
    n_users: usize,
}

impl Vocabulary {
    pub fn build(n_items: usize, n_users: usize, texts: &[String]) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for k in 0..n_items {
            tokens.push(format!("item_{k}"));
        }
        for k in 0..n_users {
            tokens.push(format!("user_{k}"));
        }
        let mut words = BTreeSet::new();
        for text in texts {
            for w in tokenize(text) {
                words.insert(w);
            }
        }
        for w in words {
            // id-shaped words are already present as atomic tokens
            if !tokens.contains(&w) {
                tokens.push(w);
            }
        }
        Self::from_tokens(tokens, n_items, n_users).expect("constructed vocabulary is valid")
    }

    pub fn from_tokens(tokens: Vec<String>, n_items: usize, n_users: usize) -> Result<Self> {
        let mut lookup = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if lookup.insert(t.clone(), i as u32).is_some() {
                return Err(IlmError::Vocabulary(format!("duplicate token `{t}`")));
            }
        }
        Ok(Vocabulary { tokens, lookup, n_items, n_users })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn item_token(&self, item: u32) -> u32 {
        debug_assert!((item as usize) < self.n_items);
        SPECIALS.len() as u32 + item
    }

    pub fn user_token(&self, user: u32) -> u32 {
        debug_assert!((user as usize) < self.n_users);
        SPECIALS.len() as u32 + self.n_items as u32 + user
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.lookup.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Encode text; words outside the vocabulary are an error (the
    /// vocabulary is built from the full dataset, so this indicates a bug).
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        tokenize(text)
            .into_iter()
            .map(|w| {
                self.id(&w)
                    .ok_or_else(|| IlmError::Vocabulary(format!("word `{w}` not in vocabulary")))
            })
            .collect()
    }

    /// Decode generated ids into a display string, skipping structural
    /// specials.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut parts = Vec::new();
        for &id in ids {
            if id == PAD || id == BOS || id == EOS || id == CLS {
                continue;
            }
            parts.push(self.token(id));
        }
        parts.join(" ")
    }
}

// ── Pair construction ────────────────────────────────────────────────

/// Entity fed to the item encoder: items and users share the machinery, the
/// user is treated as a special item with its own CF embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Entity {
    Item(u32),
    User(u32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItemTextPair {
    pub item: u32,
    pub tokens: Vec<u32>,
    /// Held out for the phase-1 eval loss when true.
    pub holdout: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EntityPair {
    pub left: Entity,
    pub right: Entity,
}

/// One (item, text) pair per item with nonempty metadata.
pub fn build_item_text_raw(catalog: &Catalog) -> Vec<(u32, String)> {
    catalog
        .items
        .iter()
        .enumerate()
        .filter(|(_, m)| !m.is_empty())
        .map(|(i, m)| (i as u32, m.pair_text()))
        .collect()
}

/// Ordered consecutive item pairs from train regions, deduplicated on the
/// ordered pair.
pub fn build_item_item_pairs(split: &Split) -> Vec<EntityPair> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (_, events) in split.train_events() {
        for w in events.windows(2) {
            let key = (w[0].item, w[1].item);
            if seen.insert(key) {
                out.push(EntityPair {
                    left: Entity::Item(key.0),
                    right: Entity::Item(key.1),
                });
            }
        }
    }
    out
}

/// (user, item) for every train interaction, deduplicated.
pub fn build_user_item_pairs(split: &Split) -> Vec<EntityPair> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (user, events) in split.train_events() {
        for e in events {
            if seen.insert((user, e.item)) {
                out.push(EntityPair {
                    left: Entity::User(user),
                    right: Entity::Item(e.item),
                });
            }
        }
    }
    out
}

/// Interactions for factorization, over train regions only. `implicit`
/// counts one per occurrence; otherwise the event weight (rating) is used.
pub fn train_interactions(split: &Split, implicit: bool) -> Vec<(u32, u32, f64)> {
    let mut out = Vec::new();
    for (user, events) in split.train_events() {
        for e in events {
            out.push((user, e.item, if implicit { 1.0 } else { e.weight }));
        }
    }
    out
}

// ── Phase-2 prompts ──────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    Sequential,
    Straightforward,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::Sequential, Task::Straightforward];

    pub fn name(&self) -> &'static str {
        match self {
            Task::Sequential => "sequential",
            Task::Straightforward => "straightforward",
        }
    }

    pub fn parse(s: &str) -> Result<Task> {
        match s {
            "sequential" => Ok(Task::Sequential),
            "straightforward" => Ok(Task::Straightforward),
            other => Err(IlmError::Parse { line: 0, msg: format!("unknown task `{other}`") }),
        }
    }
}

/// Prompt element: a vocabulary token or an embedding slot carrying the
/// entity whose encoded representation is interleaved at that position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Piece {
    Token(u32),
    Slot(Entity),
}

/// Rendered training example: prompt pieces plus the target item.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceExample {
    pub task: Task,
    pub user: u32,
    pub template: usize,
    pub pieces: Vec<Piece>,
    pub target_item: u32,
}

impl SequenceExample {
    /// Token-only view (embedding slots stripped) for the text-format
    /// backbone path.
    pub fn tokens_only(&self) -> Vec<u32> {
        self.pieces
            .iter()
            .filter_map(|p| match p {
                Piece::Token(t) => Some(*t),
                Piece::Slot(_) => None,
            })
            .collect()
    }
}

/// Evaluation case: context and single held-out target, rendered against a
/// template at evaluation time.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalExample {
    pub task: Task,
    pub user: u32,
    pub history: Vec<u32>,
    pub target_item: u32,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(user: u32, items: &[u32]) -> UserSequence {
        UserSequence {
            user,
            events: items.iter().map(|&i| SeqEvent { item: i, weight: 1.0 }).collect(),
        }
    }

    #[test]
    fn leave_last_out_four_items() {
        // [a,b,c,d] -> train {a,b}, dev c, test d
        let split = split_leave_last(&[seq(0, &[10, 11, 12, 13])]);
        match &split.users[0].1 {
            UserSplit::Full { train, dev, test } => {
                assert_eq!(train.iter().map(|e| e.item).collect::<Vec<_>>(), vec![10, 11]);
                assert_eq!(dev.item, 12);
                assert_eq!(test.item, 13);
            }
            _ => panic!("expected full split"),
        }
    }

    #[test]
    fn leave_last_out_minimal_and_short() {
        let split = split_leave_last(&[seq(0, &[1, 2, 3]), seq(1, &[4, 5])]);
        match &split.users[0].1 {
            UserSplit::Full { train, dev, test } => {
                assert_eq!(train.len(), 1);
                assert_eq!(train[0].item, 1);
                assert_eq!(dev.item, 2);
                assert_eq!(test.item, 3);
            }
            _ => panic!("expected full split"),
        }
        assert!(matches!(&split.users[1].1, UserSplit::Short { events } if events.len() == 2));
    }

    #[test]
    fn item_item_pairs_consecutive_dedup() {
        // [a,b,c] -> {(a,b),(b,c)}; repeated across users collapses
        let split = split_leave_last(&[seq(0, &[1, 2, 3, 90, 91]), seq(1, &[1, 2, 3, 92, 93])]);
        let pairs = build_item_item_pairs(&split);
        assert_eq!(
            pairs,
            vec![
                EntityPair { left: Entity::Item(1), right: Entity::Item(2) },
                EntityPair { left: Entity::Item(2), right: Entity::Item(3) },
            ]
        );
    }

    #[test]
    fn single_item_sequence_has_no_pairs() {
        let split = split_leave_last(&[seq(0, &[7])]);
        assert!(build_item_item_pairs(&split).is_empty());
    }

    #[test]
    fn user_item_pairs_enumerate_and_dedup() {
        let split = split_leave_last(&[seq(3, &[5, 6, 5, 80, 81])]);
        let pairs = build_user_item_pairs(&split);
        assert_eq!(
            pairs,
            vec![
                EntityPair { left: Entity::User(3), right: Entity::Item(5) },
                EntityPair { left: Entity::User(3), right: Entity::Item(6) },
            ]
        );
    }

    #[test]
    fn item_text_pairs_exclude_empty() {
        let catalog = Catalog {
            items: vec![
                ItemMeta { title: "Toy Story".into(), tags: vec!["Animation".into(), "Comedy".into()] },
                ItemMeta::default(),
            ],
            n_users: 1,
        };
        let raw = build_item_text_raw(&catalog);
        assert_eq!(raw.len(), 1);
        assert_eq!(raw[0], (0, "Toy Story | Animation, Comedy".to_string()));
        assert!(raw.len() <= catalog.n_items());
    }

    #[test]
    fn tokenizer_and_vocab_roundtrip() {
        let toks = tokenize("Toy Story | Animation, Comedy");
        assert_eq!(toks, vec!["toy", "story", "|", "animation", ",", "comedy"]);
        let vocab = Vocabulary::build(3, 2, &["Toy Story | Animation, Comedy".to_string()]);
        // bijection
        for (i, t) in vocab.tokens().iter().enumerate() {
            assert_eq!(vocab.id(t), Some(i as u32));
        }
        assert_eq!(vocab.token(vocab.item_token(2)), "item_2");
        assert_eq!(vocab.token(vocab.user_token(0)), "user_0");
        let ids = vocab.encode("toy story").unwrap();
        assert_eq!(vocab.decode(&ids), "toy story");
    }

    #[test]
    fn train_interactions_weighting_modes() {
        let split = split_leave_last(&[UserSequence {
            user: 0,
            events: vec![
                SeqEvent { item: 1, weight: 5.0 },
                SeqEvent { item: 2, weight: 3.0 },
                SeqEvent { item: 3, weight: 4.0 },
                SeqEvent { item: 4, weight: 2.0 },
            ],
        }]);
        let implicit = train_interactions(&split, true);
        assert_eq!(implicit, vec![(0, 1, 1.0), (0, 2, 1.0)]);
        let rated = train_interactions(&split, false);
        assert_eq!(rated, vec![(0, 1, 5.0), (0, 2, 3.0)]);
    }
}
