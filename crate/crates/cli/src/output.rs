//! Human-readable rendering shared by `ingest` and `stats`.

use peftlab::corpus::CorpusStats;

/// Aligned text block; one line per summary figure, then per-type counts.
pub fn render_stats(stats: &CorpusStats) -> String {
    let mut out = String::new();
    out.push_str(&format!("total pairs              {}\n", stats.total_pairs));
    out.push_str(&format!("answered pairs           {}\n", stats.answered_pairs));
    out.push_str(&format!(
        "distinct question types  {}\n",
        stats.distinct_question_types
    ));
    out.push_str(&format!("documents                {}\n", stats.documents));
    out.push_str("pairs per type:\n");
    for (qtype, count) in &stats.pairs_per_type {
        out.push_str(&format!("  {qtype:<24} {count}\n"));
    }
    out
}
