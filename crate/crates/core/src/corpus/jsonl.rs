//! JSONL serialization of [`QARecord`] lists.
//!
//! One JSON object per line with keys in exactly the declaration order of
//! `QARecord` (`question_id`, `question_text`, `answer_text`, `question_type`,
//! `document_id`, `source_url`, `focus`), UTF-8, and a trailing newline after
//! every record. `load_jsonl` is the exact inverse.

use std::io::{BufRead, BufReader, Read, Write};

use super::{CorpusError, QARecord};

/// Writes records as JSONL. Returns the number of records fully written;
/// on an I/O error the count reflects complete lines only.
pub fn export_jsonl<W: Write>(records: &[QARecord], mut sink: W) -> Result<usize, CorpusError> {
    let mut written = 0usize;
    for record in records {
        let line = serde_json::to_string(record)
            .map_err(|e| CorpusError::Io(std::io::Error::other(e)))?;
        sink.write_all(line.as_bytes())?;
        sink.write_all(b"\n")?;
        written += 1;
    }
    sink.flush()?;
    Ok(written)
}

/// Reads records from a JSONL stream, skipping blank lines. Any line that
/// fails to decode yields [`CorpusError::MalformedRecord`] with its 1-based
/// line number.
pub fn load_jsonl<R: Read>(source: R) -> Result<Vec<QARecord>, CorpusError> {
    let reader = BufReader::new(source);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: QARecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::MalformedRecord {
                line: idx + 1,
                message: e.to_string(),
            })?;
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::super::sample_record;
    use super::*;

    #[test]
    fn empty_list_writes_zero_lines() {
        let mut buf = Vec::new();
        assert_eq!(export_jsonl(&[], &mut buf).unwrap(), 0);
        assert!(buf.is_empty());
    }

    #[test]
    fn round_trip_is_identity() {
        let records = vec![
            sample_record("q1", "information", "First answer."),
            sample_record("q2", "treatment", "Line one.\nLine two with \"quotes\"."),
        ];
        let mut buf = Vec::new();
        assert_eq!(export_jsonl(&records, &mut buf).unwrap(), 2);
        let text = String::from_utf8(buf.clone()).unwrap();
        // Exactly one line per record, each terminated by a newline; the
        // embedded newline is JSON-escaped rather than literal.
        assert_eq!(text.lines().count(), 2);
        assert!(text.ends_with('\n'));
        assert!(text.contains("Line one.\\nLine two"));
        assert_eq!(load_jsonl(buf.as_slice()).unwrap(), records);
    }

    #[test]
    fn key_order_is_fixed() {
        let mut buf = Vec::new();
        export_jsonl(&[sample_record("q1", "information", "A.")], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let positions: Vec<usize> = [
            "\"question_id\"",
            "\"question_text\"",
            "\"answer_text\"",
            "\"question_type\"",
            "\"document_id\"",
            "\"source_url\"",
            "\"focus\"",
        ]
        .iter()
        .map(|k| text.find(k).unwrap_or_else(|| panic!("missing key {k}")))
        .collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]), "keys out of order: {text}");
    }

    #[test]
    fn empty_stream_loads_empty_and_blank_lines_are_skipped() {
        assert!(load_jsonl(&b""[..]).unwrap().is_empty());
        let records = vec![sample_record("q1", "information", "A.")];
        let mut buf = Vec::new();
        export_jsonl(&records, &mut buf).unwrap();
        let padded = format!("\n{}\n\n", String::from_utf8(buf).unwrap());
        assert_eq!(load_jsonl(padded.as_bytes()).unwrap(), records);
    }

    #[test]
    fn missing_key_reports_line_number() {
        let good = {
            let mut buf = Vec::new();
            export_jsonl(&[sample_record("q1", "information", "A.")], &mut buf).unwrap();
            String::from_utf8(buf).unwrap()
        };
        let bad = r#"{"question_id":"x","question_text":"Q ?"}"#;
        let input = format!("{good}{bad}\n");
        let err = load_jsonl(input.as_bytes()).unwrap_err();
        match err {
            CorpusError::MalformedRecord { line, message } => {
                assert_eq!(line, 2);
                assert!(message.contains("answer_text"), "unexpected message: {message}");
            }
            other => panic!("expected MalformedRecord, got {other:?}"),
        }
    }

    #[test]
    fn partial_write_counts_complete_lines() {
        struct Limited {
            remaining: usize,
        }
        impl Write for Limited {
            fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
                if buf.len() > self.remaining {
                    return Err(std::io::Error::other("sink full"));
                }
                self.remaining -= buf.len();
                Ok(buf.len())
            }
            fn flush(&mut self) -> std::io::Result<()> {
                Ok(())
            }
        }
        let records = vec![
            sample_record("q1", "information", "A."),
            sample_record("q2", "treatment", "B."),
        ];
        let one_line = {
            let mut buf = Vec::new();
            export_jsonl(&records[..1], &mut buf).unwrap();
            buf.len()
        };
        // Room for the first record plus its newline, but not the second.
        let err = export_jsonl(&records, Limited { remaining: one_line }).unwrap_err();
        assert!(matches!(err, CorpusError::Io(_)));
    }
}
