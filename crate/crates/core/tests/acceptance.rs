//! Acceptance criteria. One PASS/FAIL line per criterion; exits nonzero if any
//! blocking criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use flowtts::align::durations_from_path;
use flowtts::bench::{run_bench, summarize, BenchConfig};
use flowtts::data::{
    decode_tensor, encode_tensor, read_tensor_file, synth_corpus, write_tensor_file, SynthCorpus,
    Vocab,
};
use flowtts::exec::Exec;
use flowtts::net::{Model, ModelConfig, Preset};
use flowtts::numerics::Tensor;
use flowtts::rng::{normals, stream, Purpose};
use flowtts::sampler::euler_solve;
use flowtts::train::{
    align_frames, load_checkpoint, save_checkpoint, synthesize_tokens, Checkpoint, Losses,
    TrainConfig, Trainer, DEFAULT_TEMPERATURE,
};
use flowtts::verify::{
    cfm_fixed_point_cases, flow_identity_cases, grad_cases, mas_cases, rope_cases, Case, GRAD_TOL,
};

const PAPER_PARAMS: f64 = 18.2e6;

struct Outcome {
    pass: bool,
    detail: String,
}

struct Suite {
    failed: Vec<String>,
}

impl Suite {
    fn report(&mut self, id: u32, name: &str, blocking: bool, start: Instant, o: Outcome) {
        let secs = start.elapsed().as_secs_f64();
        let tag = match (o.pass, blocking) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "INFO",
        };
        println!("{tag} [{id}] {name}: {} ({secs:.2}s)", o.detail);
        if blocking && !o.pass {
            self.failed.push(format!("{id}"));
        }
    }
}

fn summarize_cases(cases: &[Case]) -> Outcome {
    let pass = cases.iter().all(|c| c.passed);
    let detail = cases
        .iter()
        .map(|c| {
            format!(
                "{}{}: {}",
                if c.passed { "" } else { "FAILED " },
                c.name,
                c.detail
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    Outcome { pass, detail }
}

fn with_budget(mut o: Outcome, start: Instant, budget_s: f64) -> Outcome {
    let secs = start.elapsed().as_secs_f64();
    if secs >= budget_s {
        o.pass = false;
        o.detail.push_str(&format!("; over the {budget_s}s budget"));
    }
    o
}

fn err(e: flowtts::Error) -> Outcome {
    Outcome {
        pass: false,
        detail: format!("error[{}]: {e}", e.kind()),
    }
}

fn euler_order() -> flowtts::Result<Outcome> {
    let one = Tensor::<f64>::full([1], 1.0);
    let e = std::f64::consts::E;
    let mut errors = Vec::new();
    let mut nfe_ok = true;
    for n in [10, 100, 1000] {
        let r = euler_solve(one.clone(), n, &one, |x, _, _| Ok(x.clone()))?;
        nfe_ok &= r.nfe == n;
        errors.push((r.output.item() - e).abs());
    }
    let orders: Vec<f64> = errors.windows(2).map(|w| (w[0] / w[1]).log10()).collect();
    let c = Tensor::<f64>::from_f64([3], &[0.5, -2.0, 1.25])?;
    let x0 = Tensor::<f64>::from_f64([3], &[1.0, 0.0, -3.0])?;
    let r1 = euler_solve(x0.clone(), 1, &c, |_, _, cond| Ok(cond.clone()))?;
    let want: Vec<f64> = x0.data().iter().zip(c.data()).map(|(a, b)| a + b).collect();
    let exact = r1.output.data() == &want[..] && r1.nfe == 1;
    Ok(Outcome {
        pass: orders.iter().all(|&p| p >= 0.9) && exact && nfe_ok,
        detail: format!(
            "errors {:.3e}/{:.3e}/{:.3e}, observed orders {:.4}, {:.4}; constant field exact at n=1: {exact}; nfe == n: {nfe_ok}",
            errors[0], errors[1], errors[2], orders[0], orders[1]
        ),
    })
}

/// Mean over tokens of `‖mean of the token's generated frames − signature‖₂`.
fn signature_distance(
    model: &Model<f32>,
    corpus: &SynthCorpus,
    prompts: &[Vec<usize>],
) -> flowtts::Result<f64> {
    let (mut total, mut count) = (0.0f64, 0usize);
    for (k, tokens) in prompts.iter().enumerate() {
        let s = synthesize_tokens(model, tokens, 10, DEFAULT_TEMPERATURE, 1000 + k as u64)?;
        let frames = s.frames();
        let (m, t) = (frames.dim(0), frames.dim(1));
        let mut j0 = 0;
        for (&tok, &d) in tokens.iter().zip(s.durations.as_slice()) {
            let sig = corpus.signature(tok);
            let mut dist = 0.0f64;
            for (c, &target) in sig.iter().enumerate().take(m) {
                let mean: f64 = (j0..j0 + d)
                    .map(|j| frames.data()[c * t + j] as f64)
                    .sum::<f64>()
                    / d as f64;
                dist += (mean - target as f64).powi(2);
            }
            total += dist.sqrt();
            count += 1;
            j0 += d;
        }
    }
    Ok(total / count as f64)
}

struct Trained {
    model: Model<f32>,
    detail: Vec<String>,
    pass: bool,
}

fn end_to_end() -> flowtts::Result<Trained> {
    let vocab = Vocab::default();
    let config = TrainConfig::default();
    let mc = ModelConfig::preset(config.preset, vocab.len());
    let corpus = synth_corpus(256, vocab.len(), mc.n_mel, 0)?;
    let mut trainer = Trainer::new(config.clone(), corpus.utterances.clone(), vocab.len())?;
    let start = Instant::now();
    let mut losses: Vec<Losses> = Vec::with_capacity(config.max_updates as usize);
    for _ in 0..config.max_updates {
        losses.push(trainer.step()?);
    }
    let wall = start.elapsed().as_secs_f64();
    let at10 = losses[9].total;
    let last = losses.last().expect("updates").total;
    let time_ok = wall < 15.0 * 60.0;
    let loss_ok = last < 0.5 * at10;

    let model = trainer.state.model.clone();
    let (mut agree, mut tokens) = (0usize, 0usize);
    for u in &corpus.utterances {
        let d = durations_from_path(&align_frames(&model, &u.tokens, &u.frames)?);
        let truth = u.true_durations.as_ref().expect("synthetic durations");
        agree += d
            .as_slice()
            .iter()
            .zip(truth.as_slice())
            .filter(|(a, b)| a == b)
            .count();
        tokens += truth.len();
    }
    let agreement = agree as f64 / tokens as f64;

    let mut rng = stream(7, Purpose::Prompt, 0);
    let prompts: Vec<Vec<usize>> = (0..32)
        .map(|_| {
            use rand::Rng;
            let n = rng.random_range(2..=8);
            let mut p: Vec<usize> = Vec::with_capacity(n);
            while p.len() < n {
                let t = rng.random_range(1..vocab.len());
                if p.last() != Some(&t) {
                    p.push(t);
                }
            }
            p
        })
        .collect();
    let trained = signature_distance(&model, &corpus, &prompts)?;
    let baseline = signature_distance(&Model::new(mc, 12345)?, &corpus, &prompts)?;
    let ratio = baseline / trained;

    Ok(Trained {
        model,
        pass: time_ok && loss_ok && agreement >= 0.95 && ratio >= 5.0,
        detail: vec![
            format!("{} updates in {wall:.1}s (budget 900s)", config.max_updates),
            format!("total loss {last:.4} at the last update vs {at10:.4} at update 10 (need < {:.4})", 0.5 * at10),
            format!("MAS duration agreement {:.2}% over {tokens} tokens (need >= 95%)", 100.0 * agreement),
            format!("signature distance trained {trained:.4} vs random-params {baseline:.4}, ratio {ratio:.2} (need >= 5)"),
        ],
    })
}

fn bench_monotonicity(model: &Model<f32>) -> flowtts::Result<Outcome> {
    let cfg = BenchConfig::new(vec![10, 50, 200], vec![2, 4, 10], 3);
    let records = run_bench(model, &cfg)?;
    let summary = summarize(&records);
    let mut ok = records.len() == 27;
    let mut parts = Vec::new();
    for s in &summary {
        let w: Vec<f64> = s.medians.iter().map(|m| m.2).collect();
        ok &= w.windows(2).all(|p| p[1] > p[0]);
        let slope = s.fit.as_ref().map(|f| f.slope).unwrap_or(f64::NAN);
        ok &= slope > 0.0;
        parts.push(format!(
            "steps={}: medians {} s, slope {slope:.3e} s/frame",
            s.steps,
            w.iter()
                .map(|v| format!("{v:.4}"))
                .collect::<Vec<_>>()
                .join("<")
        ));
    }
    for (i, _) in cfg.lengths.iter().enumerate() {
        let w: Vec<f64> = summary.iter().map(|s| s.medians[i].2).collect();
        ok &= w.windows(2).all(|p| p[1] > p[0]);
    }
    Ok(Outcome {
        pass: ok,
        detail: format!("{} records; {}", records.len(), parts.join("; ")),
    })
}

fn param_count() -> flowtts::Result<Outcome> {
    let model = Model::<f32>::new(
        ModelConfig::preset(Preset::Paper, Vocab::default().len()),
        0,
    )?;
    let n = model.count_params() as f64;
    let rel = (n - PAPER_PARAMS) / PAPER_PARAMS;
    let pass = rel.abs() <= 0.2;
    let mut detail = format!(
        "paper preset {:.2}M parameters vs reference 18.2M ({:+.1}%)",
        n / 1e6,
        100.0 * rel
    );
    if !pass {
        detail.push_str("; encoder and duration-predictor widths are not pinned down, so this gap is expected to move with them");
    }
    Ok(Outcome { pass, detail })
}

fn serialization() -> flowtts::Result<Outcome> {
    let dir = tempfile::tempdir().map_err(|e| flowtts::Error::Io {
        path: "tempdir".into(),
        source: e,
    })?;
    let mut rng = stream(11, Purpose::Test, 0);
    let mut data = normals::<f32>(&mut rng, 5 * 7 * 3);
    data[0] = f32::NAN;
    data[1] = -0.0;
    data[2] = f32::INFINITY;
    data[3] = f32::from_bits(1);
    let t = Tensor::new([5, 7, 3], data)?;
    let path = dir.path().join("t.mtf");
    write_tensor_file(&path, &t)?;
    let back = read_tensor_file(&path)?;
    let (mem, _) = decode_tensor(&encode_tensor(&t))?;
    let bits = |x: &Tensor<f32>| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let mtf_ok = back.shape() == t.shape() && bits(&back) == bits(&t) && bits(&mem) == bits(&t);

    let vocab = Vocab::default();
    let corpus = synth_corpus(24, vocab.len(), 20, 4)?.utterances;
    let config = TrainConfig {
        batch_size: 8,
        seed: 9,
        exec: Exec::default(),
        ..TrainConfig::default()
    };
    let mut a = Trainer::new(config.clone(), corpus.clone(), vocab.len())?;
    for _ in 0..7 {
        a.step()?;
    }
    let ckpt = a.checkpoint();
    let bytes = ckpt.to_bytes()?;
    let decoded = Checkpoint::from_bytes(&bytes)?;
    let ckpt_ok = decoded.to_bytes()? == bytes
        && decoded.tensors.len() == ckpt.tensors.len()
        && decoded
            .tensors
            .iter()
            .zip(&ckpt.tensors)
            .all(|(x, y)| x.0 == y.0 && bits(&x.1) == bits(&y.1));
    let cpath = dir.path().join("run.ckpt");
    save_checkpoint(&cpath, &ckpt)?;

    let uninterrupted: Vec<Losses> = (0..10).map(|_| a.step()).collect::<flowtts::Result<_>>()?;
    let mut b = Trainer::resume(config, corpus, load_checkpoint(&cpath)?.restore()?)?;
    let resumed: Vec<Losses> = (0..10).map(|_| b.step()).collect::<flowtts::Result<_>>()?;
    let resume_ok = uninterrupted == resumed;
    let params_ok = a
        .state
        .model
        .params
        .tensors()
        .zip(b.state.model.params.tensors())
        .all(|(x, y)| bits(x) == bits(y));
    Ok(Outcome {
        pass: mtf_ok && ckpt_ok && resume_ok && params_ok,
        detail: format!(
            "MTF bit-exact: {mtf_ok}; checkpoint bit-exact: {ckpt_ok} ({} bytes); resumed 10-update losses identical: {resume_ok}; final parameters identical: {params_ok}",
            bytes.len()
        ),
    })
}

fn main() -> ExitCode {
    let mut suite = Suite { failed: Vec::new() };
    let t = Instant::now();
    let o = flow_identity_cases(0)
        .map(|c| with_budget(summarize_cases(&c), t, 1.0))
        .unwrap_or_else(err);
    suite.report(1, "flow identities", true, t, o);

    let t = Instant::now();
    let o = cfm_fixed_point_cases(0)
        .map(|c| with_budget(summarize_cases(&c), t, 1.0))
        .unwrap_or_else(err);
    suite.report(2, "zero-loss fixed point", true, t, o);

    let t = Instant::now();
    let o = mas_cases(100, 0)
        .map(|c| with_budget(summarize_cases(&c), t, 10.0))
        .unwrap_or_else(err);
    suite.report(3, "MAS oracle equivalence", true, t, o);

    let t = Instant::now();
    let o = grad_cases(0, GRAD_TOL)
        .map(|c| with_budget(summarize_cases(&c), t, 120.0))
        .unwrap_or_else(err);
    suite.report(4, "gradient suite", true, t, o);

    let t = Instant::now();
    suite.report(
        5,
        "Euler solver order",
        true,
        t,
        euler_order().unwrap_or_else(err),
    );

    let t = Instant::now();
    let o = rope_cases(100, 0)
        .map(|c| summarize_cases(&c))
        .unwrap_or_else(err);
    suite.report(6, "RoPE relative-offset property", true, t, o);

    let t = Instant::now();
    let trained = end_to_end();
    let model = match trained {
        Ok(tr) => {
            let o = Outcome {
                pass: tr.pass,
                detail: tr.detail.join("; "),
            };
            suite.report(7, "desk-scale end-to-end", true, t, o);
            Some(tr.model)
        }
        Err(e) => {
            suite.report(7, "desk-scale end-to-end", true, t, err(e));
            None
        }
    };

    let t = Instant::now();
    let o = match &model {
        Some(m) => bench_monotonicity(m).unwrap_or_else(err),
        None => Outcome {
            pass: false,
            detail: "no trained model".into(),
        },
    };
    suite.report(8, "NFE/speed monotonicity", true, t, o);

    let t = Instant::now();
    suite.report(
        9,
        "parameter count (informational)",
        false,
        t,
        param_count().unwrap_or_else(err),
    );

    let t = Instant::now();
    suite.report(
        10,
        "serialization and resume",
        true,
        t,
        serialization().unwrap_or_else(err),
    );

    if suite.failed.is_empty() {
        println!("acceptance: all blocking criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {}", suite.failed.join(", "));
        ExitCode::FAILURE
    }
}
