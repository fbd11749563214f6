//! `peftlab generate`: one question in, disclaimer plus answer out.

use peftlab::gen::{answer_question, DISCLAIMER};
use peftlab::train::DEFAULT_TEMPLATE_ID;

use crate::cmd::{decode_config, load_model};
use crate::{emit, internal, CliResult, GenerateArgs};

pub fn run(args: &GenerateArgs) -> CliResult<()> {
    let cfg = decode_config(&args.decode)?;
    let loaded = load_model(&args.ckpt, args.base.as_deref())?;
    let template = loaded
        .train
        .as_ref()
        .map(|t| t.template_id.clone())
        .unwrap_or_else(|| DEFAULT_TEMPLATE_ID.to_string());
    let answer =
        answer_question(&loaded.model, &template, &args.question, &cfg).map_err(internal)?;
    emit(&format!("{DISCLAIMER}\n{answer}\n"))
}
