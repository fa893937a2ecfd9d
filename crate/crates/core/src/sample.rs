//! The (question, reasoning, answer) sample, its tagged text form, and
//! exact-match deduplication.
//!
//! A well-formed emission carries exactly one `<question>`, `<reasoning>`
//! and `<answer>` region. Regions may appear in any order and text outside
//! them is ignored. Tags are matched case-sensitively and carry no
//! attributes.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where a sample came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Seed,
    Generated,
    Selected,
}

/// One (question, reasoning, answer) triplet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub question: String,
    pub reasoning: String,
    pub answer: String,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewards: Option<BTreeMap<String, f64>>,
}

impl Sample {
    pub fn new(
        id: impl Into<String>,
        question: impl Into<String>,
        reasoning: impl Into<String>,
        answer: impl Into<String>,
        source: Source,
    ) -> Self {
        Sample {
            id: id.into(),
            question: question.into(),
            reasoning: reasoning.into(),
            answer: answer.into(),
            source,
            rewards: None,
        }
    }
}

/// Why a raw emission failed to parse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseFailure {
    MissingTag,
    DuplicateTag,
    BadNesting,
    EmptyField,
}

impl fmt::Display for ParseFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ParseFailure::MissingTag => "missing_tag",
            ParseFailure::DuplicateTag => "duplicate_tag",
            ParseFailure::BadNesting => "bad_nesting",
            ParseFailure::EmptyField => "empty_field",
        };
        f.write_str(s)
    }
}

/// The three trimmed fields of a successfully parsed emission.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Triplet {
    pub question: String,
    pub reasoning: String,
    pub answer: String,
}

impl Triplet {
    pub fn into_sample(self, id: impl Into<String>, source: Source) -> Sample {
        Sample::new(id, self.question, self.reasoning, self.answer, source)
    }
}

pub type ParseOutcome = std::result::Result<Triplet, ParseFailure>;

const FIELDS: [&str; 3] = ["question", "reasoning", "answer"];

fn find_all(haystack: &str, needle: &str) -> Vec<usize> {
    haystack.match_indices(needle).map(|(i, _)| i).collect()
}

/// Parses a raw emission into its three fields.
pub fn parse_tagged(raw: &str) -> ParseOutcome {
    let mut tags: Vec<(usize, usize)> = Vec::with_capacity(3);
    let mut missing = false;
    for name in FIELDS {
        let open = format!("<{name}>");
        let close = format!("</{name}>");
        let opens = find_all(raw, &open);
        let closes = find_all(raw, &close);
        if opens.len() > 1 || closes.len() > 1 {
            return Err(ParseFailure::DuplicateTag);
        }
        match (opens.first(), closes.first()) {
            (Some(&o), Some(&c)) => tags.push((o, c)),
            _ => missing = true,
        }
    }
    if missing {
        return Err(ParseFailure::MissingTag);
    }

    // Each region spans [open start, close end); regions must be ordered
    // and pairwise disjoint.
    let mut regions: Vec<(usize, usize, usize)> = Vec::with_capacity(3);
    for (field, (open, close)) in tags.iter().enumerate() {
        let open_len = FIELDS[field].len() + 2;
        if *close < open + open_len {
            return Err(ParseFailure::BadNesting);
        }
        regions.push((*open, close + open_len + 1, field));
    }
    let mut sorted = regions.clone();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[1].0 < w[0].1) {
        return Err(ParseFailure::BadNesting);
    }

    let mut fields: [String; 3] = Default::default();
    for (field, (open, close)) in tags.iter().enumerate() {
        let inner = raw[open + FIELDS[field].len() + 2..*close].trim();
        if inner.is_empty() {
            return Err(ParseFailure::EmptyField);
        }
        fields[field] = inner.to_string();
    }
    let [question, reasoning, answer] = fields;
    Ok(Triplet {
        question,
        reasoning,
        answer,
    })
}

/// Renders the three fields in question/reasoning/answer order, one per line.
pub fn render_tagged(sample: &Sample) -> String {
    render_fields(&sample.question, &sample.reasoning, &sample.answer)
}

pub fn render_fields(question: &str, reasoning: &str, answer: &str) -> String {
    format!(
        "<question>{question}</question>\n<reasoning>{reasoning}</reasoning>\n<answer>{answer}</answer>"
    )
}

/// Returns the trimmed inner text of the first complete `<answer>` region.
pub fn extract_answer(text: &str) -> Option<String> {
    let start = text.find("<answer>")? + "<answer>".len();
    let end = text[start..].find("</answer>")? + start;
    let inner = text[start..end].trim();
    (!inner.is_empty()).then(|| inner.to_string())
}

/// Result of [`dedup_exact`].
#[derive(Debug, Clone, PartialEq)]
pub struct Dedup {
    pub kept: Vec<Sample>,
    pub discarded: usize,
}

impl Dedup {
    /// Fraction of the input that was discarded.
    pub fn discard_rate(&self) -> f64 {
        let total = self.kept.len() + self.discarded;
        if total == 0 {
            0.0
        } else {
            self.discarded as f64 / total as f64
        }
    }
}

/// Keeps the first occurrence of each question, compared after trimming
/// leading and trailing whitespace.
pub fn dedup_exact(samples: impl IntoIterator<Item = Sample>) -> Dedup {
    let mut seen = HashSet::new();
    let mut kept = Vec::new();
    let mut discarded = 0;
    for sample in samples {
        if seen.insert(sample.question.trim().to_string()) {
            kept.push(sample);
        } else {
            discarded += 1;
        }
    }
    Dedup { kept, discarded }
}

/// Reads a JSON Lines dataset, checking non-empty questions and unique ids.
pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut ids = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Dataset {
            path: path.display().to_string(),
            line: i + 1,
            message,
        };
        let sample: Sample = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        if sample.question.trim().is_empty() {
            return Err(err("empty question".into()));
        }
        if !ids.insert(sample.id.clone()) {
            return Err(err(format!("duplicate id {:?}", sample.id)));
        }
        out.push(sample);
    }
    Ok(out)
}

pub fn write_jsonl(path: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(q: &str) -> Sample {
        Sample::new(q, q, "r", "a", Source::Generated)
    }

    #[test]
    fn minimal_well_formed() {
        let t = parse_tagged("<question>Q</question><reasoning>R</reasoning><answer>A</answer>")
            .unwrap();
        assert_eq!((t.question.as_str(), t.reasoning.as_str(), t.answer.as_str()), ("Q", "R", "A"));
    }

    #[test]
    fn any_order_and_surrounding_text() {
        let t = parse_tagged("junk <answer> 7 </answer>x<question>Q?</question>\n<reasoning>3+4=7</reasoning> tail")
            .unwrap();
        assert_eq!(t.answer, "7");
        assert_eq!(t.question, "Q?");
    }

    #[test]
    fn failure_reasons() {
        assert_eq!(
            parse_tagged("<question>Q</question><answer>A</answer>"),
            Err(ParseFailure::MissingTag)
        );
        assert_eq!(
            parse_tagged("<question>Q<answer>A</answer></question><reasoning>R</reasoning>"),
            Err(ParseFailure::BadNesting)
        );
        assert_eq!(
            parse_tagged("<question>Q</question><reasoning>R</reasoning><answer>A</answer><answer>B</answer>"),
            Err(ParseFailure::DuplicateTag)
        );
        assert_eq!(
            parse_tagged("<question>Q</question><reasoning> </reasoning><answer>A</answer>"),
            Err(ParseFailure::EmptyField)
        );
        // close before open
        assert_eq!(
            parse_tagged("</question>Q<question><reasoning>R</reasoning><answer>A</answer>"),
            Err(ParseFailure::BadNesting)
        );
        // crossing regions
        assert_eq!(
            parse_tagged("<question>Q<reasoning>R</question></reasoning><answer>A</answer>"),
            Err(ParseFailure::BadNesting)
        );
        assert_eq!(parse_tagged(""), Err(ParseFailure::MissingTag));
        assert_eq!(
            parse_tagged("<Question>Q</Question><reasoning>R</reasoning><answer>A</answer>"),
            Err(ParseFailure::MissingTag)
        );
    }

    #[test]
    fn render_then_parse() {
        let sample = Sample::new("x", "Q", "line one\nline two", "A", Source::Seed);
        let text = render_tagged(&sample);
        for name in FIELDS {
            assert_eq!(text.matches(&format!("<{name}>")).count(), 1);
            assert_eq!(text.matches(&format!("</{name}>")).count(), 1);
        }
        let t = parse_tagged(&text).unwrap();
        assert_eq!(t.reasoning.as_bytes(), sample.reasoning.as_bytes());
        assert_eq!(t.question, sample.question);
        assert_eq!(t.answer, sample.answer);
    }

    #[test]
    fn answer_extraction() {
        assert_eq!(extract_answer("<reasoning>x</reasoning>\n<answer> 12 </answer>"), Some("12".into()));
        assert_eq!(extract_answer("<answer>12"), None);
        assert_eq!(extract_answer("<answer> </answer>"), None);
    }

    #[test]
    fn dedup_examples() {
        let d = dedup_exact(vec![s("q1"), s("q2"), s("q1")]);
        assert_eq!(d.kept.iter().map(|x| x.question.as_str()).collect::<Vec<_>>(), ["q1", "q2"]);
        assert_eq!(d.discarded, 1);

        let d = dedup_exact(vec![s("a"), s("b"), s("c")]);
        assert_eq!(d.discarded, 0);

        let mut pool: Vec<Sample> = (0..90).map(|i| s(&format!("q{i}"))).collect();
        for i in 0..10 {
            let mut dup = pool[i * 7].clone();
            dup.id = format!("dup{i}");
            dup.question = format!("  {}\n", dup.question);
            pool.insert(i * 9 + 3, dup);
        }
        assert_eq!(pool.len(), 100);
        let d = dedup_exact(pool);
        assert_eq!(d.discarded, 10);
        assert_eq!(d.discard_rate(), 0.1);
    }

    #[test]
    fn jsonl_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let mut a = s("q1");
        a.rewards = Some(BTreeMap::from([("confidence".to_string(), 2.5)]));
        write_jsonl(&path, &[a.clone(), s("q2")]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.ends_with('\n') && !text.contains('\r'));
        assert!(text.lines().next().unwrap().contains("\"source\":\"generated\""));
        assert_eq!(read_jsonl(&path).unwrap()[0], a);

        write_jsonl(&path, &[s("q1"), s("q1")]).unwrap();
        assert!(matches!(read_jsonl(&path), Err(Error::Dataset { line: 2, .. })));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn field() -> impl Strategy<Value = String> {
            "[a-zA-Z0-9+*=?;. \n-]{1,30}".prop_filter_map("trimmed non-empty", |s| {
                let t = s.trim().to_string();
                (!t.is_empty()).then_some(t)
            })
        }

        proptest! {
            #[test]
            fn parse_inverts_render(q in field(), r in field(), a in field()) {
                let sample = Sample::new("id", q, r, a, Source::Generated);
                let t = parse_tagged(&render_tagged(&sample)).unwrap();
                prop_assert_eq!(t.into_sample("id", Source::Generated), sample);
            }

            #[test]
            fn dedup_idempotent(qs in proptest::collection::vec("[ab ]{0,3}", 0..40)) {
                let pool: Vec<Sample> = qs.iter().enumerate()
                    .map(|(i, q)| Sample::new(i.to_string(), q.clone(), "r", "a", Source::Generated))
                    .collect();
                let once = dedup_exact(pool.clone());
                prop_assert_eq!(once.kept.len() + once.discarded, pool.len());
                let twice = dedup_exact(once.kept.clone());
                prop_assert_eq!(twice.discarded, 0);
                prop_assert_eq!(twice.kept, once.kept);
            }
        }
    }
}
