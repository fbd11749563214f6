//! `peftlab chat`: interactive REPL over stdin/stdout.

use peftlab::gen::repl;
use peftlab::train::DEFAULT_TEMPLATE_ID;

use crate::cmd::{decode_config, load_model};
use crate::{internal, CliResult, ChatArgs};

pub fn run(args: &ChatArgs) -> CliResult<()> {
    let cfg = decode_config(&args.decode)?;
    let loaded = load_model(&args.ckpt, args.base.as_deref())?;
    let template = loaded
        .train
        .as_ref()
        .map(|t| t.template_id.clone())
        .unwrap_or_else(|| DEFAULT_TEMPLATE_ID.to_string());
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    match repl(
        &loaded.model,
        &template,
        &cfg,
        stdin.lock(),
        stdout.lock(),
        stderr.lock(),
    ) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        Err(e) => Err(internal(e)),
    }
}
