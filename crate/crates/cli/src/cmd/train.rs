//! `peftlab train`: corpus + config → trained adapter checkpoint.

use std::fs::File;
use std::io::BufReader;
use std::time::Instant;

use peftlab::corpus::{filter_answered, load_jsonl};
use peftlab::lora;
use peftlab::model::init_weights;
use peftlab::train::{save_checkpoint, train, write_loss_csv};

use crate::config::parse_config;
use crate::{classify_io, internal, CliError, CliResult, TrainArgs};

pub fn run(args: &TrainArgs) -> CliResult<()> {
    let config_text =
        std::fs::read_to_string(&args.config).map_err(|e| classify_io(e, &args.config))?;
    let cfg = parse_config(&config_text).map_err(CliError::Usage)?;
    cfg.validate().map_err(CliError::Usage)?;

    let file = File::open(&args.data).map_err(|e| classify_io(e, &args.data))?;
    let records = load_jsonl(BufReader::new(file)).map_err(internal)?;
    let corpus = filter_answered(&records);
    eprintln!(
        "{} training examples ({} records before filtering)",
        corpus.len(),
        records.len()
    );

    let mut model = init_weights(&cfg.model, cfg.init_seed).map_err(internal)?;
    model.freeze_base();
    if let Some(spec) = cfg.quant {
        model.quantize_base(spec).map_err(internal)?;
        eprintln!(
            "base quantized: block size {}, double quantization {}",
            spec.block_size,
            if spec.double_quant { "on" } else { "off" }
        );
    }
    let model = lora::inject(
        model,
        &cfg.lora.targets,
        cfg.lora.rank,
        cfg.lora.alpha,
        cfg.lora.dropout,
        cfg.lora.seed,
    )
    .map_err(|e| CliError::Usage(e.to_string()))?;
    let peft = lora::report(&model);
    eprintln!(
        "trainable parameters: {} of {} ({})",
        peft.trainable_parameters,
        peft.total_parameters,
        peft.fraction_display()
    );

    let started = Instant::now();
    let (trained, history) = train(model, &corpus, &cfg.train).map_err(internal)?;
    let first = history.first().copied().unwrap_or(f32::NAN);
    let last = history.last().copied().unwrap_or(f32::NAN);
    eprintln!(
        "trained {} steps in {:.1?}: loss {:.4} -> {:.4}",
        history.len(),
        started.elapsed(),
        first,
        last
    );

    save_checkpoint(&trained, Some(&cfg.train), &args.out, args.adapters_only)
        .map_err(internal)?;
    eprintln!(
        "checkpoint written to {}{}",
        args.out.display(),
        if args.adapters_only {
            " (adapters only)"
        } else {
            ""
        }
    );

    let csv_path = args.loss_csv.clone().unwrap_or_else(|| {
        let mut os = args.out.as_os_str().to_os_string();
        os.push(".loss.csv");
        std::path::PathBuf::from(os)
    });
    let csv = File::create(&csv_path).map_err(|e| classify_io(e, &csv_path))?;
    write_loss_csv(&history, csv).map_err(internal)?;
    eprintln!("loss history written to {}", csv_path.display());
    Ok(())
}
