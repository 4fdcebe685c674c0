mod args;

use std::fs;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::Parser;
use fabnet_core::faces::{gen_dataset, load_dataset, DatasetSpec, Frame, Split};
use fabnet_core::model::{load_model, FabNet};
use fabnet_core::probe::{embed_frames, evaluate_probe, fit_probe};
use fabnet_core::retrieval::{gallery_frames, retrieval_report, Gallery};
use fabnet_core::train::Trainer;
use fabnet_core::verify;

use args::{Cli, Command, GenDataArgs, ProbeArgs, RetrieveArgs, TrainArgs, VerifyArgs};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
        {
            eprintln!("error: could not size the thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Probe(a) => probe(a),
        Command::Retrieve(a) => retrieve(a),
        Command::Verify(a) => run_verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let spec = DatasetSpec::new(a.identities, a.tracks, a.frames, a.size, a.seed);
    let ds = gen_dataset(&spec, &a.out)
        .with_context(|| format!("generating dataset in {}", a.out.display()))?;
    let m = &ds.manifest;
    let count = |s| m.identities_in(s).count();
    println!(
        "wrote {} frames to {} (identities: {} train, {} val, {} test)",
        ds.frame_count(),
        a.out.display(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test)
    );
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let data =
        load_dataset(&a.data).with_context(|| format!("loading dataset {}", a.data.display()))?;
    let trainer = match &a.resume {
        Some(ckpt) => Trainer::resume(ckpt, &data, Some(a.max_steps))
            .with_context(|| format!("resuming from {}", ckpt.display()))?,
        None => {
            let model = FabNet::new(a.model_config())?;
            Trainer::new(model, &data, a.train_config()?)?
        }
    };
    let mut trainer = trainer.with_output(&a.out)?;
    println!(
        "training {} parameters: {} steps max, batch {}, lr {}, {}{}",
        trainer.model.parameter_count(),
        trainer.config.max_steps,
        trainer.config.batch_size,
        trainer.config.lr,
        trainer.config.optimizer.name(),
        if trainer.config.use_curriculum {
            ", curriculum"
        } else {
            ""
        }
    );
    let report = trainer.run()?;
    println!(
        "done after {} steps: val L1 {:.5} -> {:.5}, final lr {}",
        report.steps_run, report.initial_val_loss, report.final_val_loss, report.final_lr
    );
    for e in &report.events {
        println!("  {} at step {} (stage {})", e.name, e.step, e.stage);
    }
    println!("log and checkpoints in {}", a.out.display());
    Ok(())
}

fn split_frames(data: &fabnet_core::faces::Dataset, split: Split) -> Vec<&Frame> {
    data.tracks_in(split)
        .flat_map(|t| t.frames.iter())
        .collect()
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn probe(a: &ProbeArgs) -> Result<()> {
    let task = a.task()?;
    let data =
        load_dataset(&a.data).with_context(|| format!("loading dataset {}", a.data.display()))?;
    let model: FabNet<f32> = load_model(&a.checkpoint, None)
        .with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let train = embed_frames(&model, &split_frames(&data, Split::Train))?;
    let val = embed_frames(&model, &split_frames(&data, Split::Val))?;
    let test = embed_frames(&model, &split_frames(&data, Split::Test))?;
    if train.is_empty() || test.is_empty() {
        bail!("dataset needs frames in both the train and test splits");
    }
    let val = (!val.is_empty()).then_some(&val);
    let fit = fit_probe(&train, val, task, &a.config())?;
    let report = evaluate_probe(&fit.head, &test)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let stem = format!("probe_{}", task.name());
    write(&a.out.join(format!("{stem}.csv")), &report.to_csv())?;
    write(&a.out.join(format!("{stem}.txt")), &report.to_text())?;
    print!("{}", report.to_text());
    println!("probe trained for {} epochs", fit.epochs_run);
    Ok(())
}

fn retrieve(a: &RetrieveArgs) -> Result<()> {
    let data =
        load_dataset(&a.data).with_context(|| format!("loading dataset {}", a.data.display()))?;
    let model: FabNet<f32> = load_model(&a.checkpoint, None)
        .with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let frames = gallery_frames(&data, a.split()?, a.gallery_size, a.seed)?;
    let gallery = Gallery::embed(&model, &frames)?;
    let report = retrieval_report(&gallery, a.queries.min(gallery.len()), a.k, a.seed)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write(&a.out.join("retrieval.csv"), &report.to_csv())?;
    write(&a.out.join("retrieval_summary.txt"), &report.summary())?;
    print!("{}", report.summary());
    Ok(())
}

fn run_verify(a: &VerifyArgs) -> Result<()> {
    let report = verify::run_all(a.seed)?;
    print!("{}", report.to_table());
    if !report.all_passed() {
        bail!("{} verification checks failed", report.failures());
    }
    Ok(())
}
