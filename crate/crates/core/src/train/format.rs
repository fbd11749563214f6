//! Prompt templating: renders a QA record into a token sequence and a loss
//! mask that supervises only the answer and the terminal EOS.

use super::TrainError;
use crate::corpus::QARecord;
use crate::tokenizer::{self, BOS, EOS};

/// The only template this build ships.
pub const DEFAULT_TEMPLATE_ID: &str = "qa-v1";

/// A tokenized training example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FormattedExample {
    pub tokens: Vec<u32>,
    /// `true` exactly on supervised positions (answer tokens and final EOS).
    pub loss_mask: Vec<bool>,
}

/// Renders `"Question: {q}\nType: {t}\nAnswer: {a}"` as
/// `[BOS] prompt-tokens answer-tokens [EOS]` with the mask set only over the
/// answer and EOS.
///
/// When the sequence exceeds `max_seq_len` the answer's tail is truncated
/// (the terminal EOS is kept); the question is never cut. If the prompt alone
/// fills every position — leaving no room for even one supervised token —
/// the example is rejected with [`TrainError::QuestionTooLong`].
pub fn format_example(
    record: &QARecord,
    template_id: &str,
    max_seq_len: usize,
) -> Result<FormattedExample, TrainError> {
    if template_id != DEFAULT_TEMPLATE_ID {
        return Err(TrainError::UnknownTemplate(template_id.to_string()));
    }
    let prompt = format!(
        "Question: {}\nType: {}\nAnswer: ",
        record.question_text, record.question_type
    );
    let mut tokens = vec![BOS];
    tokens.extend(tokenizer::encode(&prompt, false));
    let prompt_len = tokens.len();
    if prompt_len >= max_seq_len {
        return Err(TrainError::QuestionTooLong {
            prompt_len,
            max_seq_len,
        });
    }

    let mut answer = tokenizer::encode(&record.answer_text, false);
    answer.push(EOS);
    let available = max_seq_len - prompt_len;
    if answer.len() > available {
        answer.truncate(available - 1);
        answer.push(EOS);
    }

    let mut loss_mask = vec![false; prompt_len];
    loss_mask.extend(std::iter::repeat(true).take(answer.len()));
    tokens.extend(answer);
    Ok(FormattedExample { tokens, loss_mask })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(question: &str, qtype: &str, answer: &str) -> QARecord {
        QARecord {
            question_id: "0000001-1".to_string(),
            question_text: question.to_string(),
            answer_text: answer.to_string(),
            question_type: qtype.to_string(),
            document_id: "0000001".to_string(),
            source_url: "https://example.nih.gov".to_string(),
            focus: "Glaucoma".to_string(),
        }
    }

    /// Golden encoding of the committed fixture record, hand-derived from the
    /// byte tokenizer (id = byte + 4): 62 prompt positions (BOS + 61 prompt
    /// bytes) followed by 38 answer bytes and EOS.
    #[test]
    fn golden_fixture_tokens() {
        let rec = record(
            "What is (are) Glaucoma ?",
            "information",
            "It is a long term disease of the body.",
        );
        let got = format_example(&rec, DEFAULT_TEMPLATE_ID, 512).unwrap();
        let expected: Vec<u32> = vec![
            1, 85, 121, 105, 119, 120, 109, 115, 114, 62, 36, 91, 108, 101, 120, 36, 109, 119,
            36, 44, 101, 118, 105, 45, 36, 75, 112, 101, 121, 103, 115, 113, 101, 36, 67, 14, 88,
            125, 116, 105, 62, 36, 109, 114, 106, 115, 118, 113, 101, 120, 109, 115, 114, 14, 69,
            114, 119, 123, 105, 118, 62, 36, 77, 120, 36, 109, 119, 36, 101, 36, 112, 115, 114,
            107, 36, 120, 105, 118, 113, 36, 104, 109, 119, 105, 101, 119, 105, 36, 115, 106, 36,
            120, 108, 105, 36, 102, 115, 104, 125, 50, 2,
        ];
        assert_eq!(got.tokens, expected);
        assert_eq!(got.tokens.len(), 101);
        let mut expected_mask = vec![false; 62];
        expected_mask.extend(std::iter::repeat(true).take(39));
        assert_eq!(got.loss_mask, expected_mask);
    }

    #[test]
    fn mask_covers_exactly_answer_and_eos() {
        let rec = record("Why ?", "information", "Because.");
        let got = format_example(&rec, DEFAULT_TEMPLATE_ID, 128).unwrap();
        assert_eq!(got.tokens.len(), got.loss_mask.len());
        assert_eq!(got.tokens[0], BOS);
        assert_eq!(*got.tokens.last().unwrap(), EOS);
        // Prompt = BOS + "Question: Why ?\nType: information\nAnswer: " (43 bytes).
        let prompt_len = 1 + "Question: Why ?\nType: information\nAnswer: ".len();
        assert!(got.loss_mask[..prompt_len].iter().all(|&m| !m));
        assert!(got.loss_mask[prompt_len..].iter().all(|&m| m));
        // Supervised region = answer bytes + EOS.
        assert_eq!(got.loss_mask.iter().filter(|&&m| m).count(), "Because.".len() + 1);
    }

    #[test]
    fn truncation_cuts_answer_tail_keeps_eos() {
        let rec = record("Why ?", "information", &"x".repeat(500));
        let prompt_len = 1 + "Question: Why ?\nType: information\nAnswer: ".len();
        let max = prompt_len + 10;
        let got = format_example(&rec, DEFAULT_TEMPLATE_ID, max).unwrap();
        assert_eq!(got.tokens.len(), max);
        assert_eq!(*got.tokens.last().unwrap(), EOS);
        // 9 answer bytes survive, all 'x'.
        let body = &got.tokens[prompt_len..max - 1];
        assert_eq!(body.len(), 9);
        assert!(body.iter().all(|&t| t == 'x' as u32 + 4));
        assert!(got.loss_mask[prompt_len..].iter().all(|&m| m));
        // The untruncated version really is longer.
        let full = format_example(&rec, DEFAULT_TEMPLATE_ID, 1024).unwrap();
        assert!(full.tokens.len() > max);
    }

    #[test]
    fn exact_fit_is_not_truncated() {
        let rec = record("Why ?", "information", "abc");
        let full = format_example(&rec, DEFAULT_TEMPLATE_ID, 1024).unwrap();
        let exact = format_example(&rec, DEFAULT_TEMPLATE_ID, full.tokens.len()).unwrap();
        assert_eq!(exact, full);
    }

    #[test]
    fn question_too_long_when_prompt_fills_window() {
        let rec = record(&"q".repeat(100), "information", "a");
        let err = format_example(&rec, DEFAULT_TEMPLATE_ID, 64).unwrap_err();
        match err {
            TrainError::QuestionTooLong { prompt_len, max_seq_len } => {
                assert!(prompt_len >= max_seq_len);
                assert_eq!(max_seq_len, 64);
            }
            other => panic!("expected QuestionTooLong, got {other:?}"),
        }
        // Boundary: prompt_len == max_seq_len must also be rejected, otherwise
        // no supervised position would remain.
        let rec2 = record("Why ?", "information", "abc");
        let prompt_len = 1 + "Question: Why ?\nType: information\nAnswer: ".len();
        assert!(matches!(
            format_example(&rec2, DEFAULT_TEMPLATE_ID, prompt_len),
            Err(TrainError::QuestionTooLong { .. })
        ));
        // One extra position is enough: the single slot carries EOS.
        let tight = format_example(&rec2, DEFAULT_TEMPLATE_ID, prompt_len + 1).unwrap();
        assert_eq!(tight.tokens.len(), prompt_len + 1);
        assert_eq!(*tight.tokens.last().unwrap(), EOS);
        assert_eq!(tight.loss_mask.iter().filter(|&&m| m).count(), 1);
    }

    #[test]
    fn unknown_template_is_rejected() {
        let rec = record("Why ?", "information", "Because.");
        assert!(matches!(
            format_example(&rec, "qa-v2", 128),
            Err(TrainError::UnknownTemplate(_))
        ));
    }
}
