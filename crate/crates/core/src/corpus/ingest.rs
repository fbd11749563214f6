//! Recursive corpus ingestion: discover `.xml` files under a root directory,
//! parse them in parallel, and merge results in lexicographic path order so
//! the output is identical for any worker count.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use walkdir::WalkDir;

use super::parse::{parse_document, SkippedPair};
use super::{CorpusError, QARecord};

/// The merged outcome of ingesting a directory tree.
#[derive(Debug, Default)]
pub struct IngestReport {
    /// Records from all successfully parsed files, in lexicographic file-path
    /// order and document order within each file.
    pub records: Vec<QARecord>,
    /// Number of `.xml` files that parsed successfully.
    pub files_parsed: usize,
    /// Files that failed wholesale (malformed XML or document-level schema
    /// violation), with the rendered error. These do not abort the ingest.
    pub failed_files: Vec<(PathBuf, String)>,
    /// Pairs skipped for pair-level schema violations, tagged with their file.
    pub skipped_pairs: Vec<(PathBuf, SkippedPair)>,
}

impl IngestReport {
    /// Plain-text log of everything that was dropped, one line per item;
    /// empty string when the ingest was clean.
    pub fn skip_log(&self) -> String {
        let mut out = String::new();
        for (path, err) in &self.failed_files {
            out.push_str(&format!("SKIPPED FILE {}: {}\n", path.display(), err));
        }
        for (path, pair) in &self.skipped_pairs {
            out.push_str(&format!(
                "SKIPPED PAIR {} (document {}, qid {}, byte {}): {}\n",
                path.display(),
                pair.document_id,
                pair.question_id.as_deref().unwrap_or("?"),
                pair.byte_offset,
                pair.reason
            ));
        }
        out
    }
}

fn is_xml(path: &Path) -> bool {
    path.extension()
        .map(|ext| ext.eq_ignore_ascii_case("xml"))
        .unwrap_or(false)
}

/// Ingests every `.xml` file under `root` (recursively).
///
/// Files are parsed concurrently, one worker per file, and merged in
/// lexicographic path order, so the record list is deterministic. A file that
/// fails to parse is recorded in the report rather than aborting the ingest;
/// only filesystem traversal errors are fatal.
pub fn ingest_dir(root: &Path) -> Result<IngestReport, CorpusError> {
    let mut paths: Vec<PathBuf> = Vec::new();
    for entry in WalkDir::new(root) {
        let entry = entry.map_err(|e| CorpusError::Io(e.into()))?;
        if entry.file_type().is_file() && is_xml(entry.path()) {
            paths.push(entry.into_path());
        }
    }
    paths.sort();

    let parsed: Vec<(PathBuf, Result<super::ParsedDocument, CorpusError>)> = paths
        .into_par_iter()
        .map(|path| {
            let result = std::fs::read(&path)
                .map_err(CorpusError::from)
                .and_then(|bytes| parse_document(&bytes));
            (path, result)
        })
        .collect();

    let mut report = IngestReport::default();
    for (path, result) in parsed {
        match result {
            Ok(doc) => {
                report.files_parsed += 1;
                report.records.extend(doc.records);
                report
                    .skipped_pairs
                    .extend(doc.skipped.into_iter().map(|s| (path.clone(), s)));
            }
            Err(err) => report.failed_files.push((path, err.to_string())),
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write_doc(dir: &Path, rel: &str, id: &str, n_pairs: usize) {
        let mut pairs = String::new();
        for i in 1..=n_pairs {
            pairs.push_str(&format!(
                r#"<QAPair><Question qid="{id}-{i}" qtype="information">Question {i} about {id} ?</Question><Answer>Answer {i}.</Answer></QAPair>"#
            ));
        }
        let xml = format!(
            r#"<Document id="{id}" url="https://example.nih.gov/{id}"><Focus>F{id}</Focus><QAPairs>{pairs}</QAPairs></Document>"#
        );
        let path = dir.join(rel);
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(path, xml).unwrap();
    }

    #[test]
    fn merges_in_lexicographic_path_order() {
        let dir = tempfile::tempdir().unwrap();
        // Written out of order on purpose; note "b_site" sorts before "z.xml".
        write_doc(dir.path(), "z.xml", "300", 1);
        write_doc(dir.path(), "b_site/doc2.xml", "200", 2);
        write_doc(dir.path(), "b_site/doc1.xml", "100", 1);
        fs::write(dir.path().join("notes.txt"), "not xml").unwrap();

        let report = ingest_dir(dir.path()).unwrap();
        assert_eq!(report.files_parsed, 3);
        assert!(report.failed_files.is_empty());
        let ids: Vec<&str> = report.records.iter().map(|r| r.question_id.as_str()).collect();
        assert_eq!(ids, ["100-1", "200-1", "200-2", "300-1"]);
    }

    #[test]
    fn repeated_ingest_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..6 {
            write_doc(dir.path(), &format!("doc{i}.xml"), &format!("{i:07}"), 3);
        }
        let a = ingest_dir(dir.path()).unwrap();
        let b = ingest_dir(dir.path()).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.records.len(), 18);
    }

    #[test]
    fn bad_file_is_reported_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        write_doc(dir.path(), "good.xml", "1", 1);
        fs::write(dir.path().join("broken.xml"), "<Document id=\"2\"><QAPairs>").unwrap();
        fs::write(dir.path().join("noid.xml"), "<Document><QAPairs></QAPairs></Document>").unwrap();

        let report = ingest_dir(dir.path()).unwrap();
        assert_eq!(report.files_parsed, 1);
        assert_eq!(report.records.len(), 1);
        assert_eq!(report.failed_files.len(), 2);
        let log = report.skip_log();
        assert!(log.contains("broken.xml"));
        assert!(log.contains("noid.xml"));
    }

    #[test]
    fn pair_level_skips_surface_in_report() {
        let dir = tempfile::tempdir().unwrap();
        let xml = r#"<Document id="5" url="u"><QAPairs>
            <QAPair><Question qtype="information">No qid ?</Question><Answer>A.</Answer></QAPair>
            <QAPair><Question qid="5-2" qtype="information">Fine ?</Question><Answer>B.</Answer></QAPair>
        </QAPairs></Document>"#;
        fs::write(dir.path().join("doc.xml"), xml).unwrap();
        let report = ingest_dir(dir.path()).unwrap();
        assert_eq!(report.records.len(), 1);
        assert_eq!(report.skipped_pairs.len(), 1);
        assert!(report.skip_log().contains("missing qid"));
    }

    #[test]
    fn missing_root_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("does-not-exist");
        let err = ingest_dir(&missing).unwrap_err();
        assert!(matches!(err, CorpusError::Io(_)));
    }
}
