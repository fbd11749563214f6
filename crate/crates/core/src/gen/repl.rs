//! Terminal question-answering loop.
//!
//! Prompts and diagnostics go to the error stream; answers (each prefixed by
//! the mandatory medical disclaimer) go to the output stream, so transcripts
//! can be captured cleanly by redirecting stdout.

use std::io::{BufRead, Write};

use super::{generate, DecodeConfig, GenError};
use crate::model::ModelHandle;
use crate::tokenizer::{self, BOS};
use crate::train::DEFAULT_TEMPLATE_ID;

/// Mandatory safety line printed before every generated answer. Not
/// configurable: the model is a research toy and must never read as a
/// clinician.
pub const DISCLAIMER: &str =
    "DISCLAIMER: Research prototype, not medical advice. Consult a qualified clinician.";

/// Formats `question` with the training template's prompt prefix (question
/// type defaults to `information`; the REPL has no type input), generates a
/// continuation, and decodes the generated tokens back to text.
pub fn answer_question(
    model: &ModelHandle,
    template_id: &str,
    question: &str,
    cfg: &DecodeConfig,
) -> Result<String, GenError> {
    if template_id != DEFAULT_TEMPLATE_ID {
        return Err(GenError::InvalidConfig(format!(
            "unknown template id '{template_id}'"
        )));
    }
    let prefix = format!("Question: {question}\nType: information\nAnswer: ");
    let mut prompt = vec![BOS];
    prompt.extend(tokenizer::encode(&prefix, false));
    let full = generate(model, &prompt, cfg)?;
    Ok(tokenizer::decode(&full[prompt.len()..])?)
}

/// Runs the interactive session: one question per line, `/quit` (or EOF)
/// ends it, blank lines re-prompt without touching the model, and a failed
/// turn reports to the error stream and keeps the session alive.
pub fn repl<R: BufRead, W: Write, E: Write>(
    model: &ModelHandle,
    template_id: &str,
    cfg: &DecodeConfig,
    mut input: R,
    mut out: W,
    mut errs: E,
) -> std::io::Result<()> {
    writeln!(
        errs,
        "peftlab chat — ask one medical question per line; /quit exits."
    )?;
    loop {
        write!(errs, "> ")?;
        errs.flush()?;
        let mut line = String::new();
        if input.read_line(&mut line)? == 0 {
            break;
        }
        let question = line.trim();
        if question.is_empty() {
            continue;
        }
        if question == "/quit" {
            break;
        }
        match answer_question(model, template_id, question, cfg) {
            Ok(answer) => {
                writeln!(out, "{DISCLAIMER}")?;
                writeln!(out, "{answer}")?;
                out.flush()?;
            }
            Err(e) => writeln!(errs, "error: {e}")?,
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_weights, ModelConfig};

    fn tiny_model() -> ModelHandle {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 32,
            n_query_heads: 2,
            n_kv_heads: 1,
            d_ff: 64,
            max_seq_len: 96,
            ..ModelConfig::default()
        };
        init_weights(&cfg, 7).unwrap()
    }

    fn run(input: &str, cfg: &DecodeConfig) -> (String, String) {
        let model = tiny_model();
        let mut out = Vec::new();
        let mut errs = Vec::new();
        repl(
            &model,
            DEFAULT_TEMPLATE_ID,
            cfg,
            input.as_bytes(),
            &mut out,
            &mut errs,
        )
        .unwrap();
        (
            String::from_utf8(out).unwrap(),
            String::from_utf8(errs).unwrap(),
        )
    }

    fn short_cfg() -> DecodeConfig {
        DecodeConfig {
            max_new_tokens: 6,
            ..DecodeConfig::default()
        }
    }

    #[test]
    fn quit_immediately_produces_no_output() {
        let (out, errs) = run("/quit\n", &short_cfg());
        assert!(out.is_empty());
        assert_eq!(errs.matches("> ").count(), 1);
    }

    #[test]
    fn eof_ends_session_cleanly() {
        let (out, _) = run("", &short_cfg());
        assert!(out.is_empty());
    }

    #[test]
    fn blank_lines_reprompt_without_answering() {
        let (out, errs) = run("\n   \n/quit\n", &short_cfg());
        assert!(out.is_empty(), "blank lines must not trigger generation");
        assert_eq!(errs.matches("> ").count(), 3);
    }

    #[test]
    fn answers_carry_disclaimer_and_are_reproducible() {
        let input = "What is (are) Gout ?\nHow to prevent Gout ?\n/quit\n";
        let (out1, _) = run(input, &short_cfg());
        let (out2, _) = run(input, &short_cfg());
        assert_eq!(out1, out2);
        let lines: Vec<&str> = out1.lines().collect();
        assert_eq!(lines.len(), 4, "two answers, each two lines: {out1:?}");
        assert_eq!(lines[0], DISCLAIMER);
        assert_eq!(lines[2], DISCLAIMER);
    }

    #[test]
    fn failed_turn_keeps_session_alive() {
        // 200-byte question overflows the 96-token window → PromptTooLong on
        // turn one; turn two must still run.
        let long = "q".repeat(200);
        let input = format!("{long}\nWhat is (are) Gout ?\n/quit\n");
        let (out, errs) = run(&input, &short_cfg());
        assert!(errs.contains("error:"), "missing error report: {errs}");
        assert_eq!(out.matches(DISCLAIMER).count(), 1, "second turn answered");
    }

    #[test]
    fn unknown_template_is_reported_per_turn() {
        let model = tiny_model();
        let err = answer_question(&model, "qa-v9", "Why ?", &short_cfg()).unwrap_err();
        assert!(matches!(err, GenError::InvalidConfig(_)));
    }
}
