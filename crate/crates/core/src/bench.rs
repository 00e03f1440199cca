//! Synthesis timing over prompt lengths and step counts.

use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng;

use crate::error::{Error, Result};
use crate::net::Model;
use crate::rng::{derive_seed, stream, Purpose};
use crate::train::{synthesize_tokens, DEFAULT_TEMPERATURE};

/// Frames per second of audio assumed by the real-time-factor proxy.
pub const FRAMES_PER_SECOND: f64 = 80.0;

pub const CSV_HEADER: &str = "id,tokens,frames,steps,wall_s,nfe,rtf_proxy";

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub id: String,
    pub tokens: usize,
    pub frames: usize,
    pub steps: usize,
    pub wall_s: f64,
    pub nfe: usize,
    /// Wall seconds per second of generated frames at 80 frames/s. Excludes
    /// any vocoder, so it is not a true real-time factor.
    pub rtf_proxy: f64,
}

impl BenchRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{},{:.6}",
            self.id, self.tokens, self.frames, self.steps, self.wall_s, self.nfe, self.rtf_proxy
        )
    }
}

pub fn rtf_proxy(wall_s: f64, frames: usize) -> f64 {
    wall_s / (frames as f64 / FRAMES_PER_SECOND)
}

/// Random prompt of `len` non-UNK token ids.
pub fn prompt_tokens(len: usize, n_vocab: usize, seed: u64) -> Vec<usize> {
    let mut rng = stream(seed, Purpose::Prompt, len as u64);
    (0..len).map(|_| rng.random_range(1..n_vocab)).collect()
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub steps: Vec<usize>,
    pub repeats: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl BenchConfig {
    pub fn new(lengths: Vec<usize>, steps: Vec<usize>, repeats: usize) -> Self {
        Self {
            lengths,
            steps,
            repeats,
            temperature: DEFAULT_TEMPERATURE,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid("bench", m));
        if self.lengths.is_empty() || self.lengths.contains(&0) {
            return bad("lengths must be a non-empty list of positive integers");
        }
        if self.steps.is_empty() || self.steps.contains(&0) {
            return bad("steps must be a non-empty list of positive integers");
        }
        if self.repeats == 0 {
            return bad("repeats must be >= 1");
        }
        Ok(())
    }
}

/// One record per (length, steps, repeat), timed sequentially around the full
/// text-to-frames synthesis.
pub fn run_bench(model: &Model<f32>, cfg: &BenchConfig) -> Result<Vec<BenchRecord>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.lengths.len() * cfg.steps.len() * cfg.repeats);
    for &len in &cfg.lengths {
        let tokens = prompt_tokens(len, model.config.n_vocab, cfg.seed);
        for &steps in &cfg.steps {
            for r in 0..cfg.repeats {
                let start = Instant::now();
                let s = synthesize_tokens(
                    model,
                    &tokens,
                    steps,
                    cfg.temperature,
                    derive_seed(cfg.seed, r as u64),
                )?;
                let wall_s = start.elapsed().as_secs_f64();
                let frames = s.frames().dim(1);
                out.push(BenchRecord {
                    id: format!("len{len}_steps{steps}_r{r}"),
                    tokens: len,
                    frames,
                    steps,
                    wall_s,
                    nfe: s.report.nfe,
                    rtf_proxy: rtf_proxy(wall_s, frames),
                });
            }
        }
    }
    Ok(out)
}

pub fn to_csv(records: &[BenchRecord]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Ordinary least squares `y = intercept + slope·x`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn least_squares(xs: &[f64], ys: &[f64]) -> Result<LineFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::invalid(
            "least_squares",
            "need at least two paired points",
        ));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("least_squares", "x values are all equal"));
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 {
        1.0
    } else {
        sxy * sxy / (sxx * syy)
    };
    Ok(LineFit {
        slope,
        intercept: my - slope * mx,
        r2,
    })
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

#[derive(Debug)]
pub struct StepsSummary {
    pub steps: usize,
    pub fit: Result<LineFit>,
    /// `(tokens, median frames, median wall seconds)` per length.
    pub medians: Vec<(usize, f64, f64)>,
}

/// Per steps setting: wall time regressed on frame length, and medians over repeats.
pub fn summarize(records: &[BenchRecord]) -> Vec<StepsSummary> {
    let mut steps: Vec<usize> = records.iter().map(|r| r.steps).collect();
    steps.sort_unstable();
    steps.dedup();
    steps
        .into_iter()
        .map(|s| {
            let rows: Vec<&BenchRecord> = records.iter().filter(|r| r.steps == s).collect();
            let xs: Vec<f64> = rows.iter().map(|r| r.frames as f64).collect();
            let ys: Vec<f64> = rows.iter().map(|r| r.wall_s).collect();
            let mut lens: Vec<usize> = rows.iter().map(|r| r.tokens).collect();
            lens.sort_unstable();
            lens.dedup();
            let medians = lens
                .into_iter()
                .map(|l| {
                    let mut f: Vec<f64> = rows
                        .iter()
                        .filter(|r| r.tokens == l)
                        .map(|r| r.frames as f64)
                        .collect();
                    let mut w: Vec<f64> = rows
                        .iter()
                        .filter(|r| r.tokens == l)
                        .map(|r| r.wall_s)
                        .collect();
                    (l, median(&mut f), median(&mut w))
                })
                .collect();
            StepsSummary {
                steps: s,
                fit: least_squares(&xs, &ys),
                medians,
            }
        })
        .collect()
}

pub fn format_summary(summary: &[StepsSummary]) -> String {
    let mut s = String::new();
    for row in summary {
        match &row.fit {
            Ok(f) => writeln!(
                s,
                "steps={}: wall_s = {:.4e} + {:.4e} * frames (r2 {:.3})",
                row.steps, f.intercept, f.slope, f.r2
            ),
            Err(e) => writeln!(s, "steps={}: no fit ({e})", row.steps),
        }
        .expect("string write");
        for (l, f, w) in &row.medians {
            writeln!(s, "  tokens={l} frames={f} median_wall_s={w:.6}").expect("string write");
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{ModelConfig, Preset};

    #[test]
    fn least_squares_recovers_a_line() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x| 0.5 + 0.25 * x).collect();
        let f = least_squares(&xs, &ys).unwrap();
        assert!((f.slope - 0.25).abs() < 1e-12 && (f.intercept - 0.5).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);
        assert!(least_squares(&[1.0, 1.0], &[0.0, 2.0]).is_err());
        assert!(least_squares(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn medians() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn rtf_proxy_counts_eighty_frames_per_second() {
        assert_eq!(rtf_proxy(0.5, 160), 0.25);
    }

    #[test]
    fn prompts_avoid_unk_and_are_fixed() {
        let p = prompt_tokens(50, 36, 1);
        assert_eq!(p.len(), 50);
        assert!(p.iter().all(|&t| (1..36).contains(&t)));
        assert_eq!(p, prompt_tokens(50, 36, 1));
    }

    #[test]
    fn one_record_per_cell() {
        let model = Model::<f32>::new(ModelConfig::preset(Preset::Toy, 36), 0).unwrap();
        let records = run_bench(&model, &BenchConfig::new(vec![3, 6], vec![1, 2], 2)).unwrap();
        assert_eq!(records.len(), 8);
        assert!(records
            .iter()
            .all(|r| r.nfe == r.steps && r.frames >= r.tokens));
        let csv = to_csv(&records);
        assert_eq!(csv.lines().next(), Some(CSV_HEADER));
        assert_eq!(csv.lines().count(), 9);
        assert_eq!(summarize(&records).len(), 2);
        assert!(run_bench(&model, &BenchConfig::new(vec![3], vec![0], 1)).is_err());
    }
}
