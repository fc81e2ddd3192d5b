//! Log ingestion: parsing, vocabulary construction, sequence encoding,
//! train/validation splitting and minibatch iteration.
//!
//! The log format is line-delimited JSON, one session per line:
//!
//! ```text
//! {"user_id":"u1","events":[{"item":"a"},{"item":"b","recs":["c","d"]}]}
//! ```
//!
//! `recs` is the slate shown by the production recommender at that event and
//! may be absent (≡ empty). Preprocessing mirrors the usual interaction-log
//! hygiene: ids with fewer than `min_count` total occurrences collapse to a
//! single rare id, sessions keep only their latest `max_len` events, slates
//! are capped to their first `max_recs` entries.

use std::collections::HashMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::Rng;

pub const DEFAULT_MIN_COUNT: usize = 10;
pub const DEFAULT_MAX_LEN: usize = 40;
pub const DEFAULT_MAX_RECS: usize = 5;
pub const DEFAULT_BATCH_SIZE: usize = 64;

/// Token that all filtered/unknown ids map to; always index 0.
pub const RARE_TOKEN: &str = "<RARE>";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawEvent {
    pub item: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub recs: Vec<String>,
}

/// One user session, events in ascending timestamp order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawSession {
    pub user_id: String,
    pub events: Vec<RawEvent>,
}

/// Result of parsing a log stream. Records with an empty event list are
/// dropped and counted rather than failing the whole file.
#[derive(Debug)]
pub struct ParsedLog {
    pub sessions: Vec<RawSession>,
    pub rejected_empty: usize,
}

/// Parse a line-delimited log. Malformed lines fail with their 1-based line
/// number; blank lines are skipped.
pub fn parse_log<R: BufRead>(reader: R) -> Result<ParsedLog> {
    let mut sessions = Vec::new();
    let mut rejected_empty = 0usize;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let session: RawSession = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        if session.events.is_empty() {
            rejected_empty += 1;
            continue;
        }
        sessions.push(session);
    }
    Ok(ParsedLog { sessions, rejected_empty })
}

/// Bidirectional map raw item id ↔ dense index. Index 0 is reserved for the
/// rare id; every id below `min_count` occurrences resolves to it.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    index_of: HashMap<String, usize>,
    id_of: Vec<String>,
}

impl Vocabulary {
    pub const RARE_INDEX: usize = 0;

    /// Vocabulary size V_x, rare index included.
    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> usize {
        self.id_of.len()
    }

    /// Dense index for a raw id; unknown ids map to the rare index.
    pub fn index_of(&self, raw: &str) -> usize {
        self.index_of.get(raw).copied().unwrap_or(Self::RARE_INDEX)
    }

    pub fn id_of(&self, index: usize) -> &str {
        &self.id_of[index]
    }

    /// Serialize as `index<TAB>raw_id` lines, line 0 being the rare token.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, id) in self.id_of.iter().enumerate() {
            out.push_str(&format!("{i}\t{id}\n"));
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Vocabulary> {
        let mut id_of = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let (idx, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::Parse { line: i + 1, msg: "expected index<TAB>id".into() })?;
            let idx: usize = idx
                .parse()
                .map_err(|_| Error::Parse { line: i + 1, msg: format!("bad index {idx:?}") })?;
            if idx != i {
                return Err(Error::Parse { line: i + 1, msg: format!("non-contiguous index {idx}") });
            }
            id_of.push(id.to_string());
        }
        if id_of.is_empty() || id_of[0] != RARE_TOKEN {
            return Err(Error::Data(format!("vocabulary must start with {RARE_TOKEN}")));
        }
        if id_of.len() < 2 {
            return Err(Error::Data("vocabulary holds no real ids".into()));
        }
        let index_of = id_of.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        Ok(Vocabulary { index_of, id_of })
    }
}

/// Count occurrences (as visited item and as recommended item) and assign
/// dense indices to every id seen at least `min_count` times. Index order is
/// descending count, ties by ascending id, so builds are deterministic.
pub fn build_vocab(sessions: &[RawSession], min_count: usize) -> Result<Vocabulary> {
    assert!(!sessions.is_empty(), "build_vocab on empty corpus");
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for s in sessions {
        for e in &s.events {
            *counts.entry(e.item.as_str()).or_insert(0) += 1;
            for r in &e.recs {
                *counts.entry(r.as_str()).or_insert(0) += 1;
            }
        }
    }
    let mut surviving: Vec<(&str, usize)> =
        counts.into_iter().filter(|&(_, c)| c >= min_count).collect();
    if surviving.is_empty() {
        return Err(Error::Data(format!(
            "degenerate corpus: no id reaches min_count {min_count}"
        )));
    }
    surviving.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

    let mut id_of = Vec::with_capacity(surviving.len() + 1);
    id_of.push(RARE_TOKEN.to_string());
    id_of.extend(surviving.iter().map(|(id, _)| id.to_string()));
    let index_of = id_of.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
    Ok(Vocabulary { index_of, id_of })
}

/// Integer-encoded session ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSequence {
    /// Dense item indices, length T.
    pub items: Vec<usize>,
    /// Per-step slates (dense indices), length T; each capped at `max_recs`.
    pub recs: Vec<Vec<usize>>,
    /// `click_target[t]` ⇔ recs[t] is non-empty and items[t+1] ∈ recs[t];
    /// length T−1.
    pub click_target: Vec<bool>,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Number of prediction steps (T−1).
    pub fn steps(&self) -> usize {
        self.items.len().saturating_sub(1)
    }

    /// Recompute click flags from items and recs. Kept as the single source
    /// of truth so the field can never go stale.
    pub fn derive_click_targets(items: &[usize], recs: &[Vec<usize>]) -> Vec<bool> {
        (0..items.len().saturating_sub(1))
            .map(|t| !recs[t].is_empty() && recs[t].contains(&items[t + 1]))
            .collect()
    }
}

/// Encode one session: keep the last `max_len` events, cap each slate to its
/// first `max_recs` entries (display order), map ids through the vocabulary.
pub fn encode(
    session: &RawSession,
    vocab: &Vocabulary,
    max_len: usize,
    max_recs: usize,
) -> EncodedSequence {
    assert!(!session.events.is_empty(), "encode on empty session");
    let start = session.events.len().saturating_sub(max_len);
    let kept = &session.events[start..];
    let items: Vec<usize> = kept.iter().map(|e| vocab.index_of(&e.item)).collect();
    let recs: Vec<Vec<usize>> = kept
        .iter()
        .map(|e| e.recs.iter().take(max_recs).map(|r| vocab.index_of(r)).collect())
        .collect();
    let click_target = EncodedSequence::derive_click_targets(&items, &recs);
    EncodedSequence { items, recs, click_target }
}

/// Encode a whole corpus, dropping sessions with fewer than two events
/// (they carry no prediction step).
pub fn encode_corpus(
    sessions: &[RawSession],
    vocab: &Vocabulary,
    max_len: usize,
    max_recs: usize,
) -> Vec<EncodedSequence> {
    sessions
        .iter()
        .map(|s| encode(s, vocab, max_len, max_recs))
        .filter(|e| e.len() >= 2)
        .collect()
}

/// Session-level random split. Validation takes floor(n·valid_fraction)
/// sessions; both halves keep their original relative order.
pub fn split<T>(items: Vec<T>, valid_fraction: f64, rng: &mut Rng) -> (Vec<T>, Vec<T>) {
    assert!(
        valid_fraction > 0.0 && valid_fraction < 1.0,
        "valid_fraction must lie in (0, 1), got {valid_fraction}"
    );
    let n = items.len();
    let n_valid = (n as f64 * valid_fraction).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut is_valid = vec![false; n];
    for &i in order.iter().take(n_valid) {
        is_valid[i] = true;
    }
    let mut train = Vec::with_capacity(n - n_valid);
    let mut valid = Vec::with_capacity(n_valid);
    for (i, item) in items.into_iter().enumerate() {
        if is_valid[i] {
            valid.push(item);
        } else {
            train.push(item);
        }
    }
    (train, valid)
}

/// Which prediction steps contribute to the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    /// Every prediction step.
    All,
    /// Only steps whose target is a clicked recommendation.
    ClicksOnly,
}

impl MaskMode {
    pub fn mask_for(&self, seq: &EncodedSequence) -> Vec<bool> {
        match self {
            MaskMode::All => vec![true; seq.steps()],
            MaskMode::ClicksOnly => seq.click_target.clone(),
        }
    }
}

/// One minibatch: borrowed sequences plus per-sequence per-step loss masks.
#[derive(Debug)]
pub struct Batch<'a> {
    pub sequences: Vec<&'a EncodedSequence>,
    pub loss_mask: Vec<Vec<bool>>,
}

impl Batch<'_> {
    pub fn unmasked_steps(&self) -> usize {
        self.loss_mask.iter().map(|m| m.iter().filter(|&&b| b).count()).sum()
    }
}

/// One epoch of minibatches in freshly shuffled order. Batches whose masks
/// are entirely false are skipped (nothing to learn from them).
pub fn batch_iter<'a>(
    sequences: &'a [EncodedSequence],
    batch_size: usize,
    rng: &mut Rng,
    mask_mode: MaskMode,
) -> BatchIter<'a> {
    assert!(!sequences.is_empty(), "batch_iter on empty corpus");
    assert!(batch_size >= 1);
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    rng.shuffle(&mut order);
    BatchIter { sequences, order, pos: 0, batch_size, mask_mode }
}

pub struct BatchIter<'a> {
    sequences: &'a [EncodedSequence],
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    mask_mode: MaskMode,
}

impl<'a> Iterator for BatchIter<'a> {
    type Item = Batch<'a>;

    fn next(&mut self) -> Option<Batch<'a>> {
        while self.pos < self.order.len() {
            let end = (self.pos + self.batch_size).min(self.order.len());
            let idx = &self.order[self.pos..end];
            self.pos = end;
            let sequences: Vec<&EncodedSequence> =
                idx.iter().map(|&i| &self.sequences[i]).collect();
            let loss_mask: Vec<Vec<bool>> =
                sequences.iter().map(|s| self.mask_mode.mask_for(s)).collect();
            let batch = Batch { sequences, loss_mask };
            if batch.unmasked_steps() > 0 {
                return Some(batch);
            }
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Cursor;
    // proptest's prelude re-exports rand's Rng trait; pin ours.
    use crate::numkernel::Rng;

    fn session(user: &str, events: &[(&str, &[&str])]) -> RawSession {
        RawSession {
            user_id: user.into(),
            events: events
                .iter()
                .map(|(item, recs)| RawEvent {
                    item: item.to_string(),
                    recs: recs.iter().map(|r| r.to_string()).collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn parse_basic_line() {
        let log = r#"{"user_id":"u1","events":[{"item":"x"},{"item":"y","recs":["a","b"]},{"item":"z"}]}"#;
        let parsed = parse_log(Cursor::new(log)).unwrap();
        assert_eq!(parsed.sessions.len(), 1);
        let s = &parsed.sessions[0];
        let ks: Vec<usize> = s.events.iter().map(|e| e.recs.len()).collect();
        assert_eq!(ks, vec![0, 2, 0]);
    }

    #[test]
    fn parse_empty_file() {
        let parsed = parse_log(Cursor::new("")).unwrap();
        assert!(parsed.sessions.is_empty());
        assert_eq!(parsed.rejected_empty, 0);
    }

    #[test]
    fn parse_missing_items_field_names_line() {
        let log = "{\"user_id\":\"u1\",\"events\":[{\"item\":\"x\"}]}\n{\"user_id\":\"u2\"}\n";
        let err = parse_log(Cursor::new(log)).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn parse_rejects_empty_event_list() {
        let log = "{\"user_id\":\"u1\",\"events\":[]}\n";
        let parsed = parse_log(Cursor::new(log)).unwrap();
        assert!(parsed.sessions.is_empty());
        assert_eq!(parsed.rejected_empty, 1);
    }

    #[test]
    fn vocab_min_count_boundary() {
        // "p1" appears 9 times, "p2" exactly 10 times, "bulk" far more.
        let mut sessions = Vec::new();
        for _ in 0..9 {
            sessions.push(session("u", &[("p1", &[]), ("bulk", &[])]));
        }
        for _ in 0..10 {
            sessions.push(session("u", &[("p2", &[]), ("bulk", &[])]));
        }
        let v = build_vocab(&sessions, 10).unwrap();
        assert_eq!(v.index_of("p1"), Vocabulary::RARE_INDEX);
        assert_ne!(v.index_of("p2"), Vocabulary::RARE_INDEX);
        assert_eq!(v.id_of(v.index_of("p2")), "p2");
    }

    #[test]
    fn vocab_counts_rec_occurrences() {
        // "r" never visited but recommended 10 times → still gets an index.
        let sessions: Vec<RawSession> =
            (0..10).map(|_| session("u", &[("a", &["r"]), ("a", &[])])).collect();
        let v = build_vocab(&sessions, 10).unwrap();
        assert_ne!(v.index_of("r"), Vocabulary::RARE_INDEX);
    }

    #[test]
    fn vocab_single_id_corpus() {
        let events = vec![("only", &[] as &[&str]); 100];
        let sessions = vec![session("u", &events)];
        let v = build_vocab(&sessions, 10).unwrap();
        assert_eq!(v.len(), 2);
        assert_eq!(v.id_of(0), RARE_TOKEN);
        assert_eq!(v.id_of(1), "only");
    }

    #[test]
    fn vocab_degenerate_corpus_errors() {
        let sessions = vec![session("u", &[("once", &[])])];
        assert!(matches!(build_vocab(&sessions, 10), Err(Error::Data(_))));
    }

    #[test]
    fn vocab_tsv_round_trip() {
        let sessions: Vec<RawSession> =
            (0..12).map(|_| session("u", &[("a", &[]), ("b", &[])])).collect();
        let v = build_vocab(&sessions, 10).unwrap();
        let restored = Vocabulary::from_tsv(&v.to_tsv()).unwrap();
        assert_eq!(restored.len(), v.len());
        assert_eq!(restored.index_of("a"), v.index_of("a"));
        assert_eq!(restored.index_of("b"), v.index_of("b"));
    }

    fn counting_vocab(ids: &[&str]) -> Vocabulary {
        // Helper: a vocabulary where each listed id occurs often enough.
        let events: Vec<(&str, &[&str])> = ids.iter().map(|&i| (i, &[] as &[&str])).collect();
        let sessions: Vec<RawSession> = (0..10).map(|_| session("u", &events)).collect();
        build_vocab(&sessions, 10).unwrap()
    }

    #[test]
    fn encode_keeps_latest_events() {
        let ids: Vec<String> = (0..50).map(|i| format!("e{i}")).collect();
        let id_refs: Vec<&str> = ids.iter().map(|s| s.as_str()).collect();
        let vocab = counting_vocab(&id_refs);
        let events: Vec<(&str, &[&str])> = id_refs.iter().map(|&i| (i, &[] as &[&str])).collect();
        let s = session("u", &events);
        let enc = encode(&s, &vocab, 40, 5);
        assert_eq!(enc.len(), 40);
        assert_eq!(enc.items[0], vocab.index_of("e10"));
        assert_eq!(enc.items[39], vocab.index_of("e49"));
    }

    #[test]
    fn encode_caps_recs_to_first_five() {
        let vocab = counting_vocab(&["x", "y", "r1", "r2", "r3", "r4", "r5", "r6", "r7"]);
        let s = session("u", &[("x", &["r1", "r2", "r3", "r4", "r5", "r6", "r7"]), ("y", &[])]);
        let enc = encode(&s, &vocab, 40, 5);
        let expect: Vec<usize> =
            ["r1", "r2", "r3", "r4", "r5"].iter().map(|r| vocab.index_of(r)).collect();
        assert_eq!(enc.recs[0], expect);
    }

    #[test]
    fn encode_click_flag_definition() {
        let vocab = counting_vocab(&["x", "a", "b", "z"]);
        let s = session("u", &[("x", &["a", "b"]), ("b", &[]), ("z", &[])]);
        let enc = encode(&s, &vocab, 40, 5);
        assert_eq!(enc.click_target, vec![true, false]);

        let s2 = session("u", &[("x", &["a", "b"]), ("z", &[])]);
        let enc2 = encode(&s2, &vocab, 40, 5);
        assert_eq!(enc2.click_target, vec![false]);
    }

    #[test]
    fn encode_unknown_ids_map_to_rare() {
        let vocab = counting_vocab(&["x", "y"]);
        let s = session("u", &[("never-seen", &["also-unknown"]), ("y", &[])]);
        let enc = encode(&s, &vocab, 40, 5);
        assert_eq!(enc.items[0], Vocabulary::RARE_INDEX);
        assert_eq!(enc.recs[0], vec![Vocabulary::RARE_INDEX]);
    }

    #[test]
    fn encode_corpus_drops_single_event_sessions() {
        let vocab = counting_vocab(&["x", "y"]);
        let sessions =
            vec![session("u1", &[("x", &[])]), session("u2", &[("x", &[]), ("y", &[])])];
        let out = encode_corpus(&sessions, &vocab, 40, 5);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].len(), 2);
    }

    #[test]
    fn encode_is_idempotent() {
        let vocab = counting_vocab(&["x", "y", "z", "a", "b"]);
        let s = session("u", &[("x", &["a", "b"]), ("y", &["b"]), ("z", &[])]);
        let enc = encode(&s, &vocab, 40, 5);
        // Reconstruct a raw session from the encoding and encode again.
        let rebuilt = RawSession {
            user_id: "u".into(),
            events: enc
                .items
                .iter()
                .zip(&enc.recs)
                .map(|(&it, rs)| RawEvent {
                    item: vocab.id_of(it).to_string(),
                    recs: rs.iter().map(|&r| vocab.id_of(r).to_string()).collect(),
                })
                .collect(),
        };
        assert_eq!(encode(&rebuilt, &vocab, 40, 5), enc);
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let items: Vec<usize> = (0..100).collect();
        let (train, valid) = split(items, 0.2, &mut Rng::new(3));
        assert_eq!(train.len(), 80);
        assert_eq!(valid.len(), 20);
        let mut all: Vec<usize> = train.iter().chain(valid.iter()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn split_deterministic_and_floor_rule() {
        let a = split((0..1000).collect::<Vec<_>>(), 0.273, &mut Rng::new(9));
        let b = split((0..1000).collect::<Vec<_>>(), 0.273, &mut Rng::new(9));
        assert_eq!(a.1.len(), 273);
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    #[should_panic(expected = "valid_fraction")]
    fn split_rejects_out_of_range_fraction() {
        split(vec![1, 2, 3], 1.5, &mut Rng::new(0));
    }

    fn seq(items: &[usize], rec_at: &[(usize, &[usize])]) -> EncodedSequence {
        let mut recs = vec![Vec::new(); items.len()];
        for (t, rs) in rec_at {
            recs[*t] = rs.to_vec();
        }
        let click_target = EncodedSequence::derive_click_targets(items, &recs);
        EncodedSequence { items: items.to_vec(), recs, click_target }
    }

    #[test]
    fn batch_sizes_cover_the_corpus() {
        let seqs: Vec<EncodedSequence> =
            (0..130).map(|i| seq(&[i % 7, (i + 1) % 7], &[])).collect();
        let sizes: Vec<usize> = batch_iter(&seqs, 64, &mut Rng::new(1), MaskMode::All)
            .map(|b| b.sequences.len())
            .collect();
        assert_eq!(sizes, vec![64, 64, 2]);
    }

    #[test]
    fn clicks_only_mask_skips_rec_free_sequences() {
        // one sequence with a click, one without any recs
        let with_click = seq(&[1, 2, 3], &[(0, &[2usize] as &[usize])]);
        let without = seq(&[4, 5, 6], &[]);
        let seqs = vec![without.clone(), with_click.clone()];
        let batches: Vec<_> =
            batch_iter(&seqs, 2, &mut Rng::new(0), MaskMode::ClicksOnly).collect();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].unmasked_steps(), 1);

        // a corpus with zero click steps yields no batches at all
        let rec_free = [without];
        let empty: Vec<_> =
            batch_iter(&rec_free, 2, &mut Rng::new(0), MaskMode::ClicksOnly).collect();
        assert!(empty.is_empty());
    }

    #[test]
    fn all_mode_unmasked_totals_match_step_count() {
        let mut rng = Rng::new(5);
        let seqs: Vec<EncodedSequence> = (0..37)
            .map(|_| {
                let t = 2 + rng.below(9);
                let items: Vec<usize> = (0..t).map(|_| rng.below(11)).collect();
                seq(&items, &[])
            })
            .collect();
        let expect: usize = seqs.iter().map(|s| s.steps()).sum();
        let got: usize = batch_iter(&seqs, 8, &mut Rng::new(42), MaskMode::All)
            .map(|b| b.unmasked_steps())
            .sum();
        assert_eq!(got, expect);
    }

    proptest! {
        #[test]
        fn click_targets_match_definition(
            items in proptest::collection::vec(0usize..10, 2..12),
            recs in proptest::collection::vec(proptest::collection::vec(0usize..10, 0..5), 12),
        ) {
            let recs: Vec<Vec<usize>> = recs.into_iter().take(items.len()).collect();
            let flags = EncodedSequence::derive_click_targets(&items, &recs);
            prop_assert_eq!(flags.len(), items.len() - 1);
            for (t, &f) in flags.iter().enumerate() {
                let expect = !recs[t].is_empty() && recs[t].contains(&items[t + 1]);
                prop_assert_eq!(f, expect);
            }
        }

        #[test]
        fn split_partition_property(n in 2usize..200, frac in 0.01f64..0.99, s in 0u64..1000) {
            let (train, valid) = split((0..n).collect::<Vec<_>>(), frac, &mut Rng::new(s));
            prop_assert_eq!(valid.len(), (n as f64 * frac).floor() as usize);
            let mut all: Vec<usize> = train.iter().chain(valid.iter()).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
}
