//! `peftlab stats`: corpus statistics for an existing JSONL file.

use std::fs::File;
use std::io::BufReader;

use peftlab::corpus::{compute_stats, load_jsonl};

use crate::output::render_stats;
use crate::{classify_io, emit, internal, CliResult, StatsArgs};

pub fn run(args: &StatsArgs) -> CliResult<()> {
    let file = File::open(&args.data).map_err(|e| classify_io(e, &args.data))?;
    let records = load_jsonl(BufReader::new(file)).map_err(internal)?;
    let stats = compute_stats(&records);
    if args.json {
        let mut text = serde_json::to_string_pretty(&stats).map_err(internal)?;
        text.push('\n');
        emit(&text)
    } else {
        emit(&render_stats(&stats))
    }
}
