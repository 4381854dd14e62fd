//! Conversation corpora: ingestion, score propagation, binarization,
//! splitting and annotation aggregation.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scores at or below this value are "not engaging".
pub const ENGAGEMENT_THRESHOLD: f64 = 2.0;
pub const MAX_ENGAGEMENT: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    Human,
    Bot,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub text: String,
    pub speaker: Speaker,
    pub turn_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConversationSource {
    HumanHuman,
    HumanBot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub utterances: Vec<Utterance>,
    pub engagement_score: Option<f64>,
    pub source: ConversationSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResponsePair {
    pub pair_id: String,
    pub query: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin_conversation: Option<String>,
}

impl QueryResponsePair {
    pub fn new(pair_id: impl Into<String>, query: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            pair_id: pair_id.into(),
            query: query.into(),
            response: response.into(),
            raw_score: None,
            label: None,
            origin_conversation: None,
        }
    }

    pub fn with_label(mut self, label: u8) -> Self {
        self.label = Some(label);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub pair_id: String,
    pub annotator_id: String,
    pub rating: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<QueryResponsePair>,
    pub valid: Vec<QueryResponsePair>,
    pub test: Vec<QueryResponsePair>,
    pub seed: u64,
}

fn check_engagement(score: f64, record: &str) -> Result<f64> {
    if score.is_finite() && (0.0..=MAX_ENGAGEMENT).contains(&score) {
        Ok(score)
    } else {
        Err(Error::Validation(format!(
            "engagement score {score} of record {record} is outside [0, 5]"
        )))
    }
}

// ConvAI dump shape.
#[derive(Deserialize)]
struct RawDialogue {
    #[serde(alias = "dialogId")]
    id: serde_json::Value,
    #[serde(default)]
    users: Vec<RawUser>,
    #[serde(default)]
    thread: Vec<RawTurn>,
    #[serde(default)]
    evaluation: Vec<RawEvaluation>,
}

#[derive(Deserialize)]
struct RawUser {
    id: String,
    #[serde(default, rename = "userType")]
    user_type: Option<String>,
}

#[derive(Deserialize)]
struct RawTurn {
    text: String,
    #[serde(rename = "userId")]
    user_id: String,
}

#[derive(Deserialize)]
struct RawEvaluation {
    #[serde(rename = "userId")]
    user_id: String,
    engagement: Option<f64>,
}

fn id_string(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn speaker_of(user_type: Option<&str>) -> Speaker {
    match user_type.map(str::to_ascii_lowercase) {
        Some(t) if t.contains("bot") => Speaker::Bot,
        Some(t) if t.contains("human") || t.contains("user") => Speaker::Human,
        _ => Speaker::Unknown,
    }
}

fn conversation_from_value(value: serde_json::Value, fallback_id: &str) -> Result<Conversation> {
    let record = value
        .get("id")
        .or_else(|| value.get("dialogId"))
        .map(id_string)
        .unwrap_or_else(|| fallback_id.to_string());
    let raw: RawDialogue = serde_json::from_value(value).map_err(|e| Error::Parse {
        record: record.clone(),
        message: e.to_string(),
    })?;
    let id = id_string(&raw.id);

    let speakers: BTreeMap<&str, Speaker> = raw
        .users
        .iter()
        .map(|u| (u.id.as_str(), speaker_of(u.user_type.as_deref())))
        .collect();
    let source = if speakers.values().any(|s| *s == Speaker::Bot) {
        ConversationSource::HumanBot
    } else {
        ConversationSource::HumanHuman
    };

    let utterances = raw
        .thread
        .iter()
        .enumerate()
        .map(|(turn_index, t)| Utterance {
            text: t.text.clone(),
            speaker: speakers.get(t.user_id.as_str()).copied().unwrap_or(Speaker::Unknown),
            turn_index,
        })
        .collect();

    // Bots do not rate; human-human dialogues average both participants.
    let mut ratings = Vec::new();
    for ev in &raw.evaluation {
        if speakers.get(ev.user_id.as_str()) == Some(&Speaker::Bot) {
            continue;
        }
        if let Some(e) = ev.engagement {
            ratings.push(check_engagement(e, &id)?);
        }
    }
    let engagement_score = if ratings.is_empty() {
        None
    } else {
        Some(ratings.iter().sum::<f64>() / ratings.len() as f64)
    };

    Ok(Conversation { id, utterances, engagement_score, source })
}

/// Parses ConvAI-shaped dialogues from a string holding either one JSON
/// object per line or a single JSON array of objects.
pub fn parse_convai_str(content: &str) -> Result<Vec<Conversation>> {
    let trimmed = content.trim_start();
    if trimmed.is_empty() {
        return Ok(Vec::new());
    }
    if trimmed.starts_with('[') {
        let values: Vec<serde_json::Value> = serde_json::from_str(trimmed).map_err(|e| Error::Parse {
            record: "<array>".into(),
            message: e.to_string(),
        })?;
        return values
            .into_iter()
            .enumerate()
            .map(|(i, v)| conversation_from_value(v, &format!("#{i}")))
            .collect();
    }
    let mut out = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fallback = format!("line {}", lineno + 1);
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Parse {
            record: fallback.clone(),
            message: e.to_string(),
        })?;
        out.push(conversation_from_value(value, &fallback)?);
    }
    Ok(out)
}

pub fn parse_convai(path: impl AsRef<Path>) -> Result<Vec<Conversation>> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_convai_str(&content)
}

/// Sliding window over consecutive non-blank turns: `(u[i], u[i+1])`.
pub fn pair_adjacent_turns(conv: &Conversation) -> Vec<QueryResponsePair> {
    let turns: Vec<&Utterance> = conv
        .utterances
        .iter()
        .filter(|u| !u.text.trim().is_empty())
        .collect();
    turns
        .windows(2)
        .enumerate()
        .map(|(i, w)| QueryResponsePair {
            pair_id: format!("{}-{}", conv.id, i),
            query: w[0].text.trim().to_string(),
            response: w[1].text.trim().to_string(),
            raw_score: conv.engagement_score,
            label: None,
            origin_conversation: Some(conv.id.clone()),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Propagated {
    pub pairs: Vec<QueryResponsePair>,
    /// Conversations dropped for lacking an engagement score.
    pub skipped: usize,
}

/// Assigns every conversation's engagement score to each of its adjacent
/// turn pairs. Scoreless conversations are skipped and counted.
pub fn propagate_scores(convs: &[Conversation]) -> Propagated {
    let mut pairs = Vec::new();
    let mut skipped = 0;
    for conv in convs {
        if conv.engagement_score.is_none() {
            log::warn!("conversation {} has no engagement score; skipped", conv.id);
            skipped += 1;
            continue;
        }
        pairs.extend(pair_adjacent_turns(conv));
    }
    Propagated { pairs, skipped }
}

/// 0 for `score <= 2`, 1 above.
pub fn binarize(raw_score: f64) -> Result<u8> {
    if !(0.0..=MAX_ENGAGEMENT).contains(&raw_score) {
        return Err(Error::Validation(format!("score {raw_score} is outside [0, 5]")));
    }
    Ok(u8::from(raw_score > ENGAGEMENT_THRESHOLD))
}

/// Sets `label = binarize(raw_score)` on every pair carrying a raw score.
pub fn label_pairs(pairs: &mut [QueryResponsePair]) -> Result<()> {
    for p in pairs.iter_mut() {
        if let Some(s) = p.raw_score {
            p.label = Some(binarize(s)?);
        }
    }
    Ok(())
}

/// Counts scores per integer bucket 0..=5 (half-up rounding for averaged
/// human-human scores).
pub fn score_histogram<I: IntoIterator<Item = f64>>(scores: I) -> [usize; 6] {
    let mut hist = [0usize; 6];
    for s in scores {
        let bucket = (s + 0.5).floor().clamp(0.0, 5.0) as usize;
        hist[bucket] += 1;
    }
    hist
}

/// Random pair-level split. Sizes are `round(ratio * N)` for train and
/// valid; test takes the remainder.
pub fn make_splits(pairs: &[QueryResponsePair], ratios: (f64, f64, f64), seed: u64) -> Result<DatasetSplit> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !r.is_finite() || *r < 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!(
            "split ratios ({a}, {b}, {c}) must be non-negative and sum to 1"
        )));
    }
    let n = pairs.len();
    if n < 3 {
        return Err(Error::Empty(format!("{n} pairs cannot fill 3 splits")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);

    let n_train = ((a * n as f64).round() as usize).min(n);
    let n_valid = ((b * n as f64).round() as usize).min(n - n_train);
    let take = |range: std::ops::Range<usize>| -> Vec<QueryResponsePair> {
        idx[range].iter().map(|&i| pairs[i].clone()).collect()
    };
    Ok(DatasetSplit {
        train: take(0..n_train),
        valid: take(n_train..n_train + n_valid),
        test: take(n_train + n_valid..n),
        seed,
    })
}

/// Per-pair arithmetic mean of annotator ratings.
pub fn aggregate_annotations(records: &[AnnotationRecord]) -> Result<BTreeMap<String, f64>> {
    if records.is_empty() {
        return Err(Error::Empty("no annotation records".into()));
    }
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in records {
        validate_rating(r)?;
        let e = acc.entry(r.pair_id.clone()).or_insert((0.0, 0));
        e.0 += f64::from(r.rating);
        e.1 += 1;
    }
    Ok(acc.into_iter().map(|(k, (sum, n))| (k, sum / n as f64)).collect())
}

/// Mean ratings for exactly the requested pairs; a pair without records is
/// an error.
pub fn aggregate_for(records: &[AnnotationRecord], pair_ids: &[String]) -> Result<Vec<f64>> {
    let all = aggregate_annotations(records)?;
    pair_ids
        .iter()
        .map(|id| {
            all.get(id)
                .copied()
                .ok_or_else(|| Error::Empty(format!("no annotation records for pair {id}")))
        })
        .collect()
}

fn validate_rating(r: &AnnotationRecord) -> Result<()> {
    if (1..=5).contains(&r.rating) {
        Ok(())
    } else {
        Err(Error::Validation(format!(
            "rating {} by {} on {} is outside 1..=5",
            r.rating, r.annotator_id, r.pair_id
        )))
    }
}

/// Min-max maps `r` from `[lo, hi]` onto `[0, 1]`.
pub fn normalize_rating(r: f64, lo: f64, hi: f64) -> Result<f64> {
    if !(lo < hi) {
        return Err(Error::Validation(format!("empty rating range [{lo}, {hi}]")));
    }
    if !(lo..=hi).contains(&r) {
        return Err(Error::Validation(format!("rating {r} is outside [{lo}, {hi}]")));
    }
    Ok((r - lo) / (hi - lo))
}

/// Daily Dialog text. Two layouts are accepted: the released
/// `utt __eou__ utt __eou__` one-dialogue-per-line form, and turn-per-line
/// with blank lines between dialogues. Adjacent turns become unlabeled pairs.
pub fn parse_dailydialog_str(content: &str) -> Vec<QueryResponsePair> {
    let mut dialogues: Vec<Vec<String>> = Vec::new();
    let mut current: Vec<String> = Vec::new();
    for line in content.lines() {
        let line = line.trim();
        if line.contains("__eou__") {
            if !current.is_empty() {
                dialogues.push(std::mem::take(&mut current));
            }
            dialogues.push(
                line.split("__eou__")
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect(),
            );
        } else if line.is_empty() {
            if !current.is_empty() {
                dialogues.push(std::mem::take(&mut current));
            }
        } else {
            current.push(line.to_string());
        }
    }
    if !current.is_empty() {
        dialogues.push(current);
    }

    let mut out = Vec::new();
    for (d, turns) in dialogues.iter().enumerate() {
        for (t, w) in turns.windows(2).enumerate() {
            let mut p = QueryResponsePair::new(format!("dd-{d}-{t}"), w[0].clone(), w[1].clone());
            p.origin_conversation = Some(format!("dd-{d}"));
            out.push(p);
        }
    }
    out
}

pub fn parse_dailydialog(path: impl AsRef<Path>) -> Result<Vec<QueryResponsePair>> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_dailydialog_str(&content))
}

pub fn read_pairs_jsonl(path: impl AsRef<Path>) -> Result<Vec<QueryResponsePair>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: QueryResponsePair = serde_json::from_str(&line).map_err(|e| Error::Parse {
            record: format!("{}:{}", path.display(), lineno + 1),
            message: e.to_string(),
        })?;
        if let (Some(score), Some(label)) = (pair.raw_score, pair.label) {
            if binarize(score)? != label {
                return Err(Error::Validation(format!(
                    "pair {} has label {label} inconsistent with raw score {score}",
                    pair.pair_id
                )));
            }
        }
        out.push(pair);
    }
    Ok(out)
}

pub fn write_pairs_jsonl(path: impl AsRef<Path>, pairs: &[QueryResponsePair]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for p in pairs {
        serde_json::to_writer(&mut buf, p)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Reads `pair_id,annotator_id,rating` CSV.
pub fn read_annotations_csv(path: impl AsRef<Path>) -> Result<Vec<AnnotationRecord>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let rec: AnnotationRecord = row?;
        validate_rating(&rec)?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(id: &str, turns: usize, score: Option<f64>) -> Conversation {
        Conversation {
            id: id.into(),
            utterances: (0..turns)
                .map(|i| Utterance { text: format!("turn {i}"), speaker: Speaker::Unknown, turn_index: i })
                .collect(),
            engagement_score: score,
            source: ConversationSource::HumanBot,
        }
    }

    const THREE_TURN: &str = r#"{"id":"d1","users":[{"id":"u","userType":"Human"},{"id":"b","userType":"Bot"}],"thread":[{"text":"hi","userId":"u"},{"text":"hello","userId":"b"},{"text":"how are you","userId":"u"}],"evaluation":[{"userId":"u","engagement":4},{"userId":"b","engagement":1}]}"#;

    #[test]
    fn convai_single_dialogue() {
        let convs = parse_convai_str(THREE_TURN).unwrap();
        assert_eq!(convs.len(), 1);
        let c = &convs[0];
        assert_eq!(c.utterances.len(), 3);
        assert_eq!(c.engagement_score, Some(4.0));
        assert_eq!(c.source, ConversationSource::HumanBot);
        assert_eq!(c.utterances[1].speaker, Speaker::Bot);
        assert_eq!(c.utterances[2].text, "how are you");
    }

    #[test]
    fn convai_human_human_averages() {
        let line = r#"{"dialogId":7,"users":[{"id":"a","userType":"Human"},{"id":"b","userType":"Human"}],"thread":[],"evaluation":[{"userId":"a","engagement":3},{"userId":"b","engagement":4}]}"#;
        let c = &parse_convai_str(line).unwrap()[0];
        assert_eq!(c.id, "7");
        assert_eq!(c.source, ConversationSource::HumanHuman);
        assert_eq!(c.engagement_score, Some(3.5));
    }

    #[test]
    fn convai_errors() {
        assert!(parse_convai_str("").unwrap().is_empty());
        let bad = r#"{"id":"x9","thread":"oops"}"#;
        match parse_convai_str(bad) {
            Err(Error::Parse { record, .. }) => assert_eq!(record, "x9"),
            other => panic!("{other:?}"),
        }
        let out_of_range = r#"{"id":"x","users":[],"thread":[],"evaluation":[{"userId":"u","engagement":6}]}"#;
        assert!(matches!(parse_convai_str(out_of_range), Err(Error::Validation(_))));
        assert!(matches!(parse_convai_str("{not json"), Err(Error::Parse { .. })));
    }

    #[test]
    fn convai_array_form() {
        let arr = format!("[{THREE_TURN},{THREE_TURN}]");
        assert_eq!(parse_convai_str(&arr).unwrap().len(), 2);
    }

    #[test]
    fn window_pairing() {
        assert!(pair_adjacent_turns(&conv("a", 1, Some(3.0))).is_empty());
        let pairs = pair_adjacent_turns(&conv("a", 4, Some(3.0)));
        assert_eq!(pairs.len(), 3);
        assert!(pairs.iter().all(|p| p.raw_score == Some(3.0)));
        assert_eq!(pairs[2].query, "turn 2");
        assert_eq!(pairs[2].response, "turn 3");
    }

    #[test]
    fn whitespace_turns_dropped() {
        let mut c = conv("a", 3, Some(1.0));
        c.utterances[1].text = "   ".into();
        let pairs = pair_adjacent_turns(&c);
        assert_eq!(pairs.len(), 1);
        assert_eq!((pairs[0].query.as_str(), pairs[0].response.as_str()), ("turn 0", "turn 2"));
    }

    #[test]
    fn propagation_counts() {
        let out = propagate_scores(&[conv("a", 3, Some(2.0)), conv("b", 5, Some(4.0))]);
        assert_eq!(out.pairs.len(), 6);
        assert_eq!(out.skipped, 0);

        let one = propagate_scores(&[conv("a", 2, Some(5.0))]);
        assert_eq!(one.pairs.len(), 1);
        assert_eq!(one.pairs[0].raw_score, Some(5.0));

        let none = propagate_scores(&[conv("a", 3, None), conv("b", 4, None)]);
        assert!(none.pairs.is_empty());
        assert_eq!(none.skipped, 2);
    }

    #[test]
    fn binarize_threshold() {
        assert_eq!(binarize(2.0).unwrap(), 0);
        assert_eq!(binarize(3.0).unwrap(), 1);
        assert_eq!(binarize(0.0).unwrap(), 0);
        assert_eq!(binarize(2.0001).unwrap(), 1);
        assert!(binarize(5.5).is_err());
        assert!(binarize(-0.1).is_err());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let pairs: Vec<_> = (0..10).map(|i| QueryResponsePair::new(i.to_string(), "q", "r")).collect();
        let s = make_splits(&pairs, (0.6, 0.2, 0.2), 1).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (6, 2, 2));
        assert_eq!(s, make_splits(&pairs, (0.6, 0.2, 0.2), 1).unwrap());
        assert!(make_splits(&pairs[..2], (0.6, 0.2, 0.2), 1).is_err());
        assert!(make_splits(&pairs, (0.6, 0.2, 0.3), 1).is_err());
    }

    #[test]
    fn annotation_means() {
        let recs = |pid: &str, rs: &[u8]| -> Vec<AnnotationRecord> {
            rs.iter()
                .enumerate()
                .map(|(i, &r)| AnnotationRecord { pair_id: pid.into(), annotator_id: format!("w{i}"), rating: r })
                .collect()
        };
        let mut all = recs("a", &[3, 3, 3, 3, 3]);
        all.extend(recs("b", &[1, 2, 3, 4, 5]));
        let m = aggregate_annotations(&all).unwrap();
        assert_eq!(m["a"], 3.0);
        assert_eq!(m["b"], 3.0);
        assert!(aggregate_for(&all, &["c".to_string()]).is_err());
        assert!(aggregate_annotations(&[]).is_err());
        assert!(aggregate_annotations(&recs("x", &[6])).is_err());
    }

    #[test]
    fn rating_normalization() {
        assert_eq!(normalize_rating(1.0, 1.0, 5.0).unwrap(), 0.0);
        assert_eq!(normalize_rating(5.0, 1.0, 5.0).unwrap(), 1.0);
        assert!((normalize_rating(4.67, 1.0, 5.0).unwrap() - 0.9175).abs() < 1e-12);
        assert!(normalize_rating(0.5, 1.0, 5.0).is_err());
        assert!(normalize_rating(1.0, 5.0, 5.0).is_err());
    }

    #[test]
    fn dailydialog_layouts() {
        let turn_per_line = "a\nb\nc\n\nd\ne\nf\ng\n";
        assert_eq!(parse_dailydialog_str(turn_per_line).len(), 5);
        let eou = "Hi . __eou__ Hello ! __eou__ Bye . __eou__\n";
        let pairs = parse_dailydialog_str(eou);
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[1].query, "Hello !");
        assert!(matches!(parse_dailydialog("/nonexistent/dd.txt"), Err(Error::NotFound(_))));
    }

    #[test]
    fn histogram_buckets() {
        assert_eq!(score_histogram([0.0, 0.0, 2.0, 3.5, 5.0]), [2, 0, 1, 0, 1, 1]);
    }
}
