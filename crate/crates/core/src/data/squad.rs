//! SQuAD v1.1 JSON ingestion and answer alignment.

use std::path::Path;
use std::sync::Arc;

use serde::Deserialize;

use super::tokenize::{char_slice, tokenize, Token};
use crate::error::{QaError, Result};

#[derive(Deserialize)]
struct SquadFile {
    data: Vec<Article>,
}

#[derive(Deserialize)]
struct Article {
    paragraphs: Vec<Paragraph>,
}

#[derive(Deserialize)]
struct Paragraph {
    context: String,
    qas: Vec<RawQa>,
}

#[derive(Deserialize)]
struct RawQa {
    id: String,
    question: String,
    answers: Vec<RawAnswer>,
}

#[derive(Deserialize)]
struct RawAnswer {
    text: String,
    answer_start: usize,
}

/// A paragraph and its tokens, shared by every question asked about it.
#[derive(Debug)]
pub struct Context {
    pub text: String,
    pub tokens: Vec<Token>,
    char_len: usize,
}

impl Context {
    pub fn new(text: String) -> Self {
        let tokens = tokenize(&text);
        let char_len = text.chars().count();
        Self {
            text,
            tokens,
            char_len,
        }
    }

    pub fn char_len(&self) -> usize {
        self.char_len
    }

    /// Original-case text under the inclusive token range `start..=end`.
    pub fn span_text(&self, start: usize, end: usize) -> &str {
        char_slice(&self.text, self.tokens[start].start, self.tokens[end].end)
    }
}

#[derive(Debug, Clone)]
pub struct QAExample {
    pub qid: String,
    pub question: String,
    pub context: Arc<Context>,
    pub question_tokens: Vec<Token>,
    pub answer_texts: Vec<String>,
    pub answer_starts: Vec<usize>,
    /// Inclusive token span of the first answer, when it could be aligned.
    pub gold_span: Option<(usize, usize)>,
}

impl QAExample {
    pub fn context_tokens(&self) -> &[Token] {
        &self.context.tokens
    }
}

#[derive(Debug, Default)]
pub struct SquadData {
    pub examples: Vec<QAExample>,
    /// Examples whose first answer could not be mapped onto context tokens.
    pub alignment_failures: usize,
}

impl SquadData {
    pub fn aligned(&self) -> impl Iterator<Item = &QAExample> {
        self.examples.iter().filter(|e| e.gold_span.is_some())
    }
}

/// Smallest inclusive token range covering the answer's character span.
pub fn align_answer(context: &Context, answer_text: &str, answer_start: usize) -> Result<(usize, usize)> {
    let len = answer_text.chars().count();
    let end = answer_start + len;
    if len == 0 {
        return Err(QaError::Alignment("empty answer text".into()));
    }
    if end > context.char_len() {
        return Err(QaError::Alignment(format!(
            "answer span {answer_start}..{end} exceeds context length {}",
            context.char_len()
        )));
    }
    let tokens = &context.tokens;
    let first = tokens.iter().position(|t| t.end > answer_start);
    let last = tokens.iter().rposition(|t| t.start < end);
    match (first, last) {
        (Some(s), Some(e)) if s <= e => Ok((s, e)),
        _ => Err(QaError::Alignment(format!(
            "no token covers characters {answer_start}..{end}"
        ))),
    }
}

fn schema_or_parse(path: &Path, err: serde_json::Error) -> QaError {
    let msg = err.to_string();
    if let Some(rest) = msg.strip_prefix("missing field `") {
        if let Some(field) = rest.split('`').next() {
            return QaError::Schema {
                path: path.to_path_buf(),
                field: field.to_string(),
            };
        }
    }
    QaError::Parse {
        path: path.to_path_buf(),
        source: err,
    }
}

pub fn load_squad(path: impl AsRef<Path>) -> Result<SquadData> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| QaError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    parse_squad(&bytes, path)
}

pub fn parse_squad(bytes: &[u8], path: &Path) -> Result<SquadData> {
    let file: SquadFile = serde_json::from_slice(bytes).map_err(|e| schema_or_parse(path, e))?;
    let mut out = SquadData::default();
    for article in file.data {
        for paragraph in article.paragraphs {
            let context = Arc::new(Context::new(paragraph.context));
            for qa in paragraph.qas {
                if qa.answers.is_empty() {
                    return Err(QaError::Schema {
                        path: path.to_path_buf(),
                        field: format!("answers (question {})", qa.id),
                    });
                }
                let first = &qa.answers[0];
                let gold_span = align_answer(&context, &first.text, first.answer_start).ok();
                if gold_span.is_none() {
                    out.alignment_failures += 1;
                }
                out.examples.push(QAExample {
                    question_tokens: tokenize(&qa.question),
                    qid: qa.id,
                    question: qa.question,
                    context: Arc::clone(&context),
                    answer_texts: qa.answers.iter().map(|a| a.text.clone()).collect(),
                    answer_starts: qa.answers.iter().map(|a| a.answer_start).collect(),
                    gold_span,
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(json: &str) -> Result<SquadData> {
        parse_squad(json.as_bytes(), Path::new("fixture.json"))
    }

    #[test]
    fn empty_data_array() {
        assert!(parse(r#"{"data": []}"#).unwrap().examples.is_empty());
    }

    #[test]
    fn one_paragraph_two_questions() {
        let json = r#"{"data": [{"title": "t", "paragraphs": [{
            "context": "Stewart ran for 12 yards.",
            "qas": [
              {"id": "q1", "question": "Who ran?", "answers": [{"text": "Stewart", "answer_start": 0}]},
              {"id": "q2", "question": "How far?", "answers": [{"text": "12 yards", "answer_start": 16},
                                                             {"text": "12", "answer_start": 16}]}
            ]}]}]}"#;
        let data = parse(json).unwrap();
        assert_eq!(data.examples.len(), 2);
        assert_eq!(data.examples[0].gold_span, Some((0, 0)));
        assert_eq!(data.examples[1].gold_span, Some((3, 4)));
        assert_eq!(data.examples[1].answer_texts.len(), 2);
        assert!(Arc::ptr_eq(&data.examples[0].context, &data.examples[1].context));
    }

    #[test]
    fn missing_field_is_named() {
        let json = r#"{"data": [{"paragraphs": [{"context": "x"}]}]}"#;
        match parse(json) {
            Err(QaError::Schema { field, .. }) => assert_eq!(field, "qas"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_json_is_parse_error() {
        assert!(matches!(parse("{\"data\": ["), Err(QaError::Parse { .. })));
    }

    #[test]
    fn align_numbers_and_names() {
        let ctx = Context::new(
            "while Jonathan Stewart finished the drive with a 1-yard touchdown run, cutting the score to 10-7 with 11:28 left in the second quarter."
                .into(),
        );
        let start = ctx.text.find("11:28").unwrap();
        let (s, e) = align_answer(&ctx, "11:28", start).unwrap();
        assert_eq!(s, e);
        assert_eq!(ctx.tokens[s].text, "11:28");

        let ctx = Context::new(
            "A 16-yard reception by Devin Funchess and a 12-yard run by Stewart then set up Gano's 39-yard field goal"
                .into(),
        );
        let start = ctx.text.find("Stewart").unwrap();
        let (s, e) = align_answer(&ctx, "Stewart", start).unwrap();
        assert_eq!((s, ctx.tokens[s].text.as_str()), (e, "stewart"));
    }

    #[test]
    fn align_whole_context_and_errors() {
        let ctx = Context::new("The Late Show".into());
        assert_eq!(align_answer(&ctx, "The Late Show", 0).unwrap(), (0, 2));
        assert_eq!(ctx.span_text(1, 2), "Late Show");
        assert!(align_answer(&ctx, "Show", 40).is_err());
        assert!(align_answer(&ctx, "", 0).is_err());
        let ctx = Context::new("a  b".into());
        assert!(align_answer(&ctx, " ", 2).is_err());
    }
}
