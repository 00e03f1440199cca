use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use flowtts::align::durations_from_path;
use flowtts::bench::{format_summary, run_bench, summarize, to_csv, BenchConfig};
use flowtts::data::{
    load_corpus, load_entry, read_manifest, synth_corpus, write_corpus, write_tensor_file, Vocab,
};
use flowtts::net::{count_params, Model};
use flowtts::train::{
    align_frames, load_checkpoint, parse_config, save_checkpoint, synthesize, Losses, RunConfig,
    TrainState, Trainer, DEFAULT_TEMPERATURE,
};
use flowtts::verify::{run_suite, Suite};
use flowtts::{Error, Result};

#[derive(Parser)]
#[command(
    name = "flowtts",
    version,
    about = "Flow-matching acoustic model: train, synthesize, align, benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a manifest or a generated corpus.
    Train(TrainArgs),
    /// Text to frames with a fixed number of Euler steps.
    Synth(SynthArgs),
    /// Dump monotonic alignments of a manifest under a checkpoint.
    Align(AlignArgs),
    /// Time synthesis over prompt lengths and step counts.
    Bench(BenchArgs),
    /// Run an oracle suite.
    Verify(VerifyArgs),
    /// Write a synthetic corpus with ground-truth durations.
    SynthCorpus(SynthCorpusArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSONL manifest.
    #[arg(
        long,
        conflicts_with = "synthetic",
        required_unless_present = "synthetic"
    )]
    data: Option<PathBuf>,
    #[arg(long)]
    synthetic: bool,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the training and data seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `train.max_updates`.
    #[arg(long)]
    max_updates: Option<u64>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    text: String,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    steps: u64,
    #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
    temperature: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AlignArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Debug)]
struct List(Vec<usize>);

fn positive_list(s: &str) -> std::result::Result<List, String> {
    let items: Vec<usize> = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    if items.is_empty() {
        return Err("list is empty".into());
    }
    if items.contains(&0) {
        return Err("entries must be positive".into());
    }
    Ok(List(items))
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Comma-separated token lengths.
    #[arg(long, value_parser = positive_list)]
    lengths: List,
    /// Comma-separated Euler step counts.
    #[arg(long, value_parser = positive_list)]
    steps_list: List,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    repeats: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, value_parser = ["grad", "mas", "flow", "rope", "all"])]
    suite: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SynthCorpusArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 256)]
    utts: usize,
    #[arg(long, default_value_t = 20)]
    n_mel: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Align(a) => cmd_align(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Verify(a) => cmd_verify(a),
        Command::SynthCorpus(a) => cmd_synth_corpus(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn load_model(path: &Path) -> Result<Model<f32>> {
    let model = load_checkpoint(path)?.model()?;
    let vocab = Vocab::default();
    if model.config.n_vocab != vocab.len() {
        return Err(Error::ConfigMismatch {
            key: "n_vocab".into(),
            expected: vocab.len().to_string(),
            found: model.config.n_vocab.to_string(),
        });
    }
    Ok(model)
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    let mut run = match &a.config {
        Some(p) => parse_config(&fs::read_to_string(p).map_err(|e| io_err(p, e))?)?,
        None => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        run.train.seed = s;
        run.data.seed = s;
    }
    if let Some(n) = a.max_updates {
        run.train.max_updates = n;
    }
    create_dir(&a.out)?;
    let vocab = Vocab::default();
    run.model.n_vocab = vocab.len();

    let corpus = if a.synthetic {
        let c = synth_corpus(
            run.data.synthetic_utts,
            vocab.len(),
            run.model.n_mel,
            run.data.seed,
        )?
        .utterances;
        write_corpus(a.out.join("corpus"), &c)?;
        c
    } else {
        load_corpus(a.data.as_ref().expect("clap requires --data"), &vocab)?
    };

    let state = TrainState::from_model_config(run.model.clone(), run.train.seed)?;
    let mut trainer = Trainer::resume(run.train.clone(), corpus, state)?;
    println!(
        "params={} utterances={} updates={}",
        count_params(&trainer.state.model.params),
        trainer.corpus().len(),
        run.train.max_updates
    );

    let csv_path = a.out.join("loss.csv");
    let mut csv = fs::File::create(&csv_path).map_err(|e| io_err(&csv_path, e))?;
    writeln!(csv, "{}", Losses::CSV_HEADER).map_err(|e| io_err(&csv_path, e))?;
    let start = Instant::now();
    let every = run.train.checkpoint_every;
    while trainer.state.update < run.train.max_updates {
        let update = trainer.state.update;
        let l = trainer.step()?;
        writeln!(csv, "{}", l.csv_row(update)).map_err(|e| io_err(&csv_path, e))?;
        let done = trainer.state.update;
        if every > 0 && done % every == 0 {
            save_checkpoint(
                a.out.join(format!("ckpt_{done:06}.ckpt")),
                &trainer.checkpoint(),
            )?;
        }
        if done % 100 == 0 || done == run.train.max_updates {
            println!(
                "update={done} total={:.4} elapsed_s={:.1}",
                l.total,
                start.elapsed().as_secs_f64()
            );
        }
    }
    csv.flush().map_err(|e| io_err(&csv_path, e))?;
    let last = a.out.join("last.ckpt");
    save_checkpoint(&last, &trainer.checkpoint())?;
    println!("checkpoint={}", last.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_synth(a: SynthArgs) -> Result<ExitCode> {
    let model = load_model(&a.ckpt)?;
    let s = synthesize(
        &model,
        &Vocab::default(),
        &a.text,
        a.steps as usize,
        a.temperature,
        a.seed,
    )?;
    write_tensor_file(&a.out, s.frames())?;
    println!(
        "frames={} nfe={} wall_s={:.6}",
        s.frames().dim(1),
        s.report.nfe,
        s.report.wall_time
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_align(a: AlignArgs) -> Result<ExitCode> {
    let model = load_model(&a.ckpt)?;
    let vocab = Vocab::default();
    let entries = read_manifest(&a.manifest)?;
    create_dir(&a.out)?;
    let mut durations = String::from("id,token_index,token,duration,true_duration\n");
    let mut errors = String::new();
    let (mut failed, mut agree, mut total) = (0usize, 0usize, 0usize);
    for entry in &entries {
        let result = load_entry(&a.manifest, entry, &vocab)
            .and_then(|u| align_frames(&model, &u.tokens, &u.frames).map(|p| (u, p)));
        let (utt, path) = match result {
            Ok(v) => v,
            Err(e) => {
                failed += 1;
                eprintln!("warning[{}]: {}: {e}", e.kind(), entry.id);
                errors.push_str(&format!(
                    "{},{},{}\n",
                    entry.id,
                    e.kind(),
                    e.to_string().replace(',', ";")
                ));
                continue;
            }
        };
        write_file(&a.out.join(format!("{}.align", utt.id)), &path.to_dump())?;
        let d = durations_from_path(&path);
        for (i, (&tok, &di)) in utt.tokens.iter().zip(d.as_slice()).enumerate() {
            let truth = utt.true_durations.as_ref().map(|t| t.as_slice()[i]);
            if let Some(t) = truth {
                total += 1;
                agree += (t == di) as usize;
            }
            let truth = truth.map(|t| t.to_string()).unwrap_or_default();
            durations.push_str(&format!("{},{i},{tok},{di},{truth}\n", utt.id));
        }
    }
    write_file(&a.out.join("durations.csv"), &durations)?;
    if failed > 0 {
        write_file(
            &a.out.join("errors.csv"),
            &format!("id,kind,message\n{errors}"),
        )?;
    }
    print!("aligned={} failed={failed}", entries.len() - failed);
    if total > 0 {
        print!(" duration_agreement={:.4}", agree as f64 / total as f64);
    }
    println!();
    Ok(ExitCode::SUCCESS)
}

fn cmd_bench(a: BenchArgs) -> Result<ExitCode> {
    let model = load_model(&a.ckpt)?;
    let mut cfg = BenchConfig::new(a.lengths.0, a.steps_list.0, a.repeats as usize);
    cfg.seed = a.seed;
    let records = run_bench(&model, &cfg)?;
    write_file(&a.out, &to_csv(&records))?;
    print!("{}", format_summary(&summarize(&records)));
    println!(
        "records={} rtf_proxy assumes 80 frames per second and excludes vocoding",
        records.len()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(a: VerifyArgs) -> Result<ExitCode> {
    let suites: Vec<Suite> = match a.suite.as_str() {
        "all" => Suite::ALL.to_vec(),
        s => vec![s.parse().map_err(|m: String| Error::InvalidArgument {
            op: "verify",
            msg: m,
        })?],
    };
    let mut ok = true;
    for s in suites {
        let start = Instant::now();
        let report = run_suite(s, a.seed)?;
        for c in &report.cases {
            println!(
                "{} {}: {} ({})",
                if c.passed { "PASS" } else { "FAIL" },
                s.name(),
                c.name,
                c.detail
            );
        }
        println!(
            "suite {} {} in {:.2}s",
            s.name(),
            if report.passed() { "passed" } else { "FAILED" },
            start.elapsed().as_secs_f64()
        );
        let failure = report
            .failures()
            .next()
            .map(|c| format!("{}: {} ({})", s.name(), c.name, c.detail));
        if let Some(f) = failure {
            eprintln!("error[verify]: {f}");
            ok = false;
        }
    }
    Ok(if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn cmd_synth_corpus(a: SynthCorpusArgs) -> Result<ExitCode> {
    let vocab = Vocab::default();
    let c = synth_corpus(a.utts, vocab.len(), a.n_mel, a.seed)?;
    let manifest = write_corpus(&a.out, &c.utterances)?;
    println!(
        "manifest={} utterances={}",
        manifest.display(),
        c.utterances.len()
    );
    Ok(ExitCode::SUCCESS)
}
