//! `peftlab ingest`: XML directory → filtered JSONL corpus.

use std::fs::File;
use std::io::BufWriter;

use peftlab::corpus::{compute_stats, export_jsonl, filter_answered, ingest_dir};

use crate::output::render_stats;
use crate::{classify_io, emit, internal, CliError, CliResult, IngestArgs};

pub fn run(args: &IngestArgs) -> CliResult<()> {
    if !args.xml_dir.exists() {
        return Err(CliError::MissingInput(format!(
            "{}: no such file or directory",
            args.xml_dir.display()
        )));
    }
    let report = ingest_dir(&args.xml_dir).map_err(|e| match e {
        peftlab::corpus::CorpusError::Io(io) => classify_io(io, &args.xml_dir),
        other => internal(other),
    })?;

    let stats = compute_stats(&report.records);
    let answered = filter_answered(&report.records);

    let file = File::create(&args.out).map_err(|e| classify_io(e, &args.out))?;
    let written = export_jsonl(&answered, BufWriter::new(file)).map_err(internal)?;

    emit(&render_stats(&stats))?;
    eprintln!("{} records written to {}", written, args.out.display());

    let violations = report.failed_files.len() + report.skipped_pairs.len();
    if let Some(path) = &args.report {
        std::fs::write(path, report.skip_log()).map_err(|e| classify_io(e, path))?;
        eprintln!("skip report written to {}", path.display());
    }
    if violations > 0 {
        eprintln!(
            "warning: {} schema violation(s) skipped ({} file(s), {} pair(s))",
            violations,
            report.failed_files.len(),
            report.skipped_pairs.len()
        );
        if args.strict {
            return Err(CliError::StrictViolations(violations));
        }
    }
    Ok(())
}
