//! Event-driven parser for MedQuAD-schema XML documents.
//!
//! Schema: a root `Document` element with `id` and `url` attributes, a `Focus`
//! child, and a `QAPairs` child containing `QAPair` elements; each `QAPair`
//! holds a `Question` (attributes `qid`, `qtype`) and an optional, possibly
//! empty `Answer`. Unknown elements are ignored so that real-corpus extras
//! (annotations, synonyms, UMLS links) do not break parsing.

use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;

use super::{normalize_question_type, CorpusError, QARecord};

/// A QAPair that was skipped because of a pair-level schema violation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedPair {
    pub document_id: String,
    /// The pair's `qid` when the violation left it readable.
    pub question_id: Option<String>,
    /// Approximate byte offset of the offending pair in the input.
    pub byte_offset: usize,
    pub reason: String,
}

/// The outcome of parsing one document: records in document order plus a
/// report of skipped pairs. A pair-level violation never aborts the document.
#[derive(Debug, Clone, Default)]
pub struct ParsedDocument {
    pub records: Vec<QARecord>,
    pub skipped: Vec<SkippedPair>,
}

#[derive(Debug, Default)]
struct PendingPair {
    question_id: Option<String>,
    question_type: Option<String>,
    question_text: String,
    saw_question: bool,
    answer_text: String,
    byte_offset: usize,
}

impl PendingPair {
    fn violation(&self) -> Option<&'static str> {
        if !self.saw_question {
            Some("missing Question element")
        } else if self.question_id.is_none() {
            Some("missing qid attribute on Question")
        } else if self.question_type.is_none() {
            Some("missing qtype attribute on Question")
        } else if self.question_text.trim().is_empty() {
            Some("empty question text")
        } else {
            None
        }
    }
}

fn attr_value(start: &BytesStart<'_>, name: &str) -> Result<Option<String>, quick_xml::Error> {
    match start.try_get_attribute(name)? {
        Some(attr) => Ok(Some(attr.unescape_value()?.into_owned())),
        None => Ok(None),
    }
}

fn malformed(offset: usize, err: impl std::fmt::Display) -> CorpusError {
    CorpusError::MalformedXml {
        offset,
        message: err.to_string(),
    }
}

/// Parses one MedQuAD XML document.
///
/// Returns one record per well-formed QAPair in document order; a missing or
/// empty `Answer` yields `answer_text == ""` (such records are kept at this
/// stage and removed later by `filter_answered`). Errors are reserved for
/// malformed XML and document-level schema violations; pair-level violations
/// skip the pair and are reported in [`ParsedDocument::skipped`].
pub fn parse_document(xml_bytes: &[u8]) -> Result<ParsedDocument, CorpusError> {
    let mut reader = Reader::from_reader(xml_bytes);
    let mut out = ParsedDocument::default();
    let mut buf = Vec::new();

    let mut document_id: Option<String> = None;
    let mut source_url = String::new();
    let mut focus = String::new();

    // Element names from the root down to the current position.
    let mut path: Vec<String> = Vec::new();
    let mut pending: Option<PendingPair> = None;

    loop {
        let offset = reader.buffer_position() as usize;
        let event = reader
            .read_event_into(&mut buf)
            .map_err(|e| malformed(reader.buffer_position() as usize, e))?;
        match event {
            Event::Start(ref start) => {
                let name = String::from_utf8_lossy(start.name().as_ref()).into_owned();
                open_element(
                    &name,
                    start,
                    offset,
                    path.is_empty(),
                    &mut document_id,
                    &mut source_url,
                    &mut pending,
                )?;
                path.push(name);
            }
            Event::Empty(ref start) => {
                // A self-closing element opens and closes in one event.
                let name = String::from_utf8_lossy(start.name().as_ref()).into_owned();
                open_element(
                    &name,
                    start,
                    offset,
                    path.is_empty(),
                    &mut document_id,
                    &mut source_url,
                    &mut pending,
                )?;
                close_element(&name, &mut pending, &mut out, &document_id, &source_url, &focus);
            }
            Event::End(end) => {
                let name = String::from_utf8_lossy(end.name().as_ref()).into_owned();
                path.pop();
                close_element(&name, &mut pending, &mut out, &document_id, &source_url, &focus);
            }
            Event::Text(text) => {
                let decoded = text
                    .unescape()
                    .map_err(|e| malformed(reader.buffer_position() as usize, e))?;
                record_text(&path, &decoded, &mut focus, &mut pending);
            }
            Event::CData(cdata) => {
                let decoded = String::from_utf8_lossy(cdata.as_ref()).into_owned();
                record_text(&path, &decoded, &mut focus, &mut pending);
            }
            Event::Eof => {
                // quick-xml tolerates unclosed tags at EOF; treat them as
                // malformed input so truncated files fail loudly.
                if !path.is_empty() {
                    return Err(malformed(
                        reader.buffer_position() as usize,
                        format!("unexpected end of file: <{}> is never closed", path[path.len() - 1]),
                    ));
                }
                break;
            }
            _ => {}
        }
        buf.clear();
    }

    if document_id.is_none() {
        return Err(CorpusError::SchemaViolation {
            document_id: String::new(),
            offset: 0,
            message: "no root Document element".to_string(),
        });
    }
    Ok(out)
}

fn open_element(
    name: &str,
    start: &BytesStart<'_>,
    offset: usize,
    at_root: bool,
    document_id: &mut Option<String>,
    source_url: &mut String,
    pending: &mut Option<PendingPair>,
) -> Result<(), CorpusError> {
    match name {
        "Document" if at_root => {
            let id = attr_value(start, "id").map_err(|e| malformed(offset, e))?;
            match id {
                Some(id) if !id.trim().is_empty() => *document_id = Some(id),
                _ => {
                    return Err(CorpusError::SchemaViolation {
                        document_id: String::new(),
                        offset,
                        message: "Document element is missing its id attribute".to_string(),
                    })
                }
            }
            *source_url = attr_value(start, "url")
                .map_err(|e| malformed(offset, e))?
                .unwrap_or_default();
        }
        "QAPair" => {
            *pending = Some(PendingPair {
                byte_offset: offset,
                ..PendingPair::default()
            });
        }
        "Question" => {
            if let Some(pair) = pending.as_mut() {
                pair.saw_question = true;
                pair.question_id = attr_value(start, "qid").map_err(|e| malformed(offset, e))?;
                pair.question_type = attr_value(start, "qtype").map_err(|e| malformed(offset, e))?;
            }
        }
        _ => {}
    }
    Ok(())
}

fn close_element(
    name: &str,
    pending: &mut Option<PendingPair>,
    out: &mut ParsedDocument,
    document_id: &Option<String>,
    source_url: &str,
    focus: &str,
) {
    if name != "QAPair" {
        return;
    }
    let Some(pair) = pending.take() else { return };
    let doc_id = document_id.clone().unwrap_or_default();
    if let Some(reason) = pair.violation() {
        out.skipped.push(SkippedPair {
            document_id: doc_id,
            question_id: pair.question_id,
            byte_offset: pair.byte_offset,
            reason: reason.to_string(),
        });
        return;
    }
    out.records.push(QARecord {
        question_id: pair.question_id.expect("checked by violation()"),
        question_text: pair.question_text.trim().to_string(),
        answer_text: pair.answer_text.trim().to_string(),
        question_type: normalize_question_type(&pair.question_type.expect("checked by violation()")),
        document_id: doc_id,
        source_url: source_url.to_string(),
        focus: focus.to_string(),
    });
}

fn record_text(
    path: &[String],
    decoded: &str,
    focus: &mut String,
    pending: &mut Option<PendingPair>,
) {
    let in_scope = |tag: &str| path.iter().any(|p| p == tag);
    if let Some(pair) = pending.as_mut() {
        // Text anywhere under Answer (including nested markup) belongs to the
        // answer; likewise for Question.
        if in_scope("Answer") {
            pair.answer_text.push_str(decoded);
        } else if in_scope("Question") {
            pair.question_text.push_str(decoded);
        }
    } else if path.last().map(String::as_str) == Some("Focus") {
        focus.push_str(decoded);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = r#"<?xml version="1.0" encoding="UTF-8"?>
<Document id="0000042" url="https://www.nei.nih.gov/glaucoma" source="NIHSeniorHealth">
  <Focus>Glaucoma</Focus>
  <QAPairs>
    <QAPair pid="1">
      <Question qid="0000042-1" qtype="information">What is (are) Glaucoma ?</Question>
      <Answer>Glaucoma is a group of diseases that damage the optic nerve.</Answer>
    </QAPair>
    <QAPair pid="2">
      <Question qid="0000042-2" qtype=" Side   Effects ">What are the side effects of Glaucoma medicines ?</Question>
      <Answer></Answer>
    </QAPair>
    <QAPair pid="3">
      <Question qid="0000042-3" qtype="treatment">What are the treatments for Glaucoma ?</Question>
      <Answer>Treatments include eye drops &amp; surgery.</Answer>
    </QAPair>
  </QAPairs>
</Document>
"#;

    #[test]
    fn parses_fixture_with_one_empty_answer() {
        let doc = parse_document(FIXTURE.as_bytes()).unwrap();
        assert!(doc.skipped.is_empty());
        assert_eq!(doc.records.len(), 3);
        let empties: Vec<_> = doc.records.iter().filter(|r| r.answer_text.is_empty()).collect();
        assert_eq!(empties.len(), 1);
        assert_eq!(empties[0].question_id, "0000042-2");

        let first = &doc.records[0];
        assert_eq!(first.document_id, "0000042");
        assert_eq!(first.source_url, "https://www.nei.nih.gov/glaucoma");
        assert_eq!(first.focus, "Glaucoma");
        assert_eq!(first.question_text, "What is (are) Glaucoma ?");
        assert_eq!(
            first.answer_text,
            "Glaucoma is a group of diseases that damage the optic nerve."
        );
        assert_eq!(first.question_type, "information");

        // Document order, qtype normalization, entity unescaping.
        assert_eq!(doc.records[1].question_type, "side effects");
        assert_eq!(doc.records[2].question_id, "0000042-3");
        assert_eq!(doc.records[2].answer_text, "Treatments include eye drops & surgery.");
    }

    #[test]
    fn empty_qapairs_yields_empty_list() {
        let xml = r#"<Document id="7" url="u"><Focus>F</Focus><QAPairs></QAPairs></Document>"#;
        let doc = parse_document(xml.as_bytes()).unwrap();
        assert!(doc.records.is_empty());
        assert!(doc.skipped.is_empty());
    }

    #[test]
    fn self_closing_answer_is_empty() {
        let xml = r#"<Document id="7" url="u"><QAPairs><QAPair>
            <Question qid="q1" qtype="information">Q ?</Question><Answer/>
        </QAPair></QAPairs></Document>"#;
        let doc = parse_document(xml.as_bytes()).unwrap();
        assert_eq!(doc.records.len(), 1);
        assert_eq!(doc.records[0].answer_text, "");
    }

    #[test]
    fn pair_missing_qid_is_skipped_not_fatal() {
        let xml = r#"<Document id="9" url="u"><QAPairs>
            <QAPair><Question qtype="information">No qid here ?</Question><Answer>A.</Answer></QAPair>
            <QAPair><Question qid="9-2" qtype="information">Good ?</Question><Answer>B.</Answer></QAPair>
        </QAPairs></Document>"#;
        let doc = parse_document(xml.as_bytes()).unwrap();
        assert_eq!(doc.records.len(), 1);
        assert_eq!(doc.records[0].question_id, "9-2");
        assert_eq!(doc.skipped.len(), 1);
        assert!(doc.skipped[0].reason.contains("qid"));
        assert_eq!(doc.skipped[0].document_id, "9");
        assert!(doc.skipped[0].byte_offset > 0);
    }

    #[test]
    fn pair_missing_question_is_skipped() {
        let xml = r#"<Document id="9" url="u"><QAPairs>
            <QAPair><Answer>Orphan answer.</Answer></QAPair>
        </QAPairs></Document>"#;
        let doc = parse_document(xml.as_bytes()).unwrap();
        assert!(doc.records.is_empty());
        assert_eq!(doc.skipped.len(), 1);
        assert!(doc.skipped[0].reason.contains("Question"));
        assert_eq!(doc.skipped[0].question_id, None);
    }

    #[test]
    fn missing_document_id_is_schema_violation() {
        let xml = r#"<Document url="u"><QAPairs></QAPairs></Document>"#;
        let err = parse_document(xml.as_bytes()).unwrap_err();
        assert!(matches!(err, CorpusError::SchemaViolation { .. }), "got {err:?}");
    }

    #[test]
    fn non_document_root_is_schema_violation() {
        let xml = r#"<Records><QAPairs></QAPairs></Records>"#;
        let err = parse_document(xml.as_bytes()).unwrap_err();
        assert!(matches!(err, CorpusError::SchemaViolation { .. }), "got {err:?}");
    }

    #[test]
    fn malformed_xml_is_reported_with_offset() {
        let xml = r#"<Document id="1" url="u"><QAPairs><QAPair></QAPairs></Document>"#;
        let err = parse_document(xml.as_bytes()).unwrap_err();
        match err {
            CorpusError::MalformedXml { offset, .. } => assert!(offset > 0),
            other => panic!("expected MalformedXml, got {other:?}"),
        }
    }

    #[test]
    fn cdata_and_nested_markup_contribute_to_answer() {
        let xml = r#"<Document id="3" url="u"><QAPairs><QAPair>
            <Question qid="3-1" qtype="information">Q ?</Question>
            <Answer>Part one <b>bold part</b><![CDATA[ and cdata part]]></Answer>
        </QAPair></QAPairs></Document>"#;
        let doc = parse_document(xml.as_bytes()).unwrap();
        assert_eq!(doc.records[0].answer_text, "Part one bold part and cdata part");
    }
}
