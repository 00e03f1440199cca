//! Oracle suites behind the `verify` command: finite-difference gradients,
//! brute-force alignment search, flow identities and the RoPE shift property.

use rand::Rng;

use crate::align::{duration_loss, durations_from_path, mas, prior_loss, AlignmentPath, Durations};
use crate::cfm::{
    cfm_loss, crop_item, ot_flow_point, ot_target_field, sample_path, FlowTime, OtCfmConfig,
};
use crate::error::{Error, Result};
use crate::net::{
    attention_logits, decoder_forward, encoder_forward, rope_rotate, snake_beta, Bound, Builder,
    Model, ModelConfig, MultiHeadAttention, ParamStore, Preset, ResBlock,
};
use crate::numerics::{grad_check_with, GradCheckOptions, Graph, Tensor, Var};
use crate::rng::{normals, stream, Purpose};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Grad,
    Mas,
    Flow,
    Rope,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Grad, Suite::Mas, Suite::Flow, Suite::Rope];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Grad => "grad",
            Suite::Mas => "mas",
            Suite::Flow => "flow",
            Suite::Rope => "rope",
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| format!("unknown suite `{s}` (expected grad, mas, flow or rope)"))
    }
}

#[derive(Clone, Debug)]
pub struct Case {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Case {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub suite: Suite,
    pub cases: Vec<Case>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Case> {
        self.cases.iter().filter(|c| !c.passed)
    }
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<SuiteReport> {
    let cases = match suite {
        Suite::Grad => grad_cases(seed, GRAD_TOL)?,
        Suite::Mas => mas_cases(100, seed)?,
        Suite::Flow => {
            let mut c = flow_identity_cases(seed)?;
            c.extend(cfm_fixed_point_cases(seed)?);
            c
        }
        Suite::Rope => rope_cases(100, seed)?,
    };
    Ok(SuiteReport { suite, cases })
}

// ---------------------------------------------------------------- mas

/// Best score over every monotonic surjective path, and the number of paths.
pub fn brute_force_mas(log_lik: &Tensor<f64>) -> (f64, usize) {
    fn walk(ll: &Tensor<f64>, path: &mut Vec<usize>, best: &mut f64, count: &mut usize) {
        let (n, t) = (ll.dim(0), ll.dim(1));
        let j = path.len();
        if j == t {
            if path[t - 1] == n - 1 {
                *count += 1;
                let s = AlignmentPath::new(path.clone(), n)
                    .expect("enumerated path")
                    .score(ll);
                *best = best.max(s);
            }
            return;
        }
        let last = path[j - 1];
        for next in [last, last + 1] {
            // Every remaining frame can advance at most one token.
            if next < n && n - 1 - next <= t - 1 - j {
                path.push(next);
                walk(ll, path, best, count);
                path.pop();
            }
        }
    }
    let mut best = f64::NEG_INFINITY;
    let mut count = 0;
    walk(log_lik, &mut vec![0], &mut best, &mut count);
    (best, count)
}

fn random_matrix(rng: &mut impl Rng, n: usize, t: usize, scale: f64) -> Tensor<f64> {
    let data: Vec<f64> = (0..n * t)
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    Tensor::new([n, t], data).expect("shape")
}

/// DP optimum against enumeration on random instances with `N ≤ 5`, `T ≤ 8`.
pub fn mas_cases(instances: usize, seed: u64) -> Result<Vec<Case>> {
    let mut rng = stream(seed, Purpose::Test, 1);
    let mut agree = 0;
    let mut valid = 0;
    let mut shift = 0;
    let mut worst = String::new();
    for k in 0..instances {
        let n = rng.random_range(1..=5);
        let t = rng.random_range(n..=8);
        let ll = random_matrix(&mut rng, n, t, 5.0);
        let path = mas(&ll)?;
        let (best, _) = brute_force_mas(&ll);
        let ok_value = (path.score(&ll) - best).abs() <= 1e-9 * best.abs().max(1.0);
        agree += ok_value as usize;
        if !ok_value && worst.is_empty() {
            worst = format!(
                "instance {k} ({n}x{t}): dp {} vs brute force {best}",
                path.score(&ll)
            );
        }
        let d = durations_from_path(&path);
        valid += (AlignmentPath::new(path.frames().to_vec(), n).is_ok()
            && d.total() == t
            && d.as_slice().iter().all(|&x| x >= 1)) as usize;
        let shifted = ll.map(|v| v + 7.25);
        shift += (mas(&shifted)? == path) as usize;
    }
    Ok(vec![
        Case::new(
            "dp optimum equals brute force",
            agree == instances,
            if worst.is_empty() {
                format!("{agree}/{instances}")
            } else {
                worst
            },
        ),
        Case::new(
            "paths are monotonic and surjective",
            valid == instances,
            format!("{valid}/{instances}"),
        ),
        Case::new(
            "invariant to a constant shift",
            shift == instances,
            format!("{shift}/{instances}"),
        ),
        Case::new(
            "T < N is rejected",
            mas(&Tensor::<f64>::zeros([3, 2])).is_err(),
            "3 tokens over 2 frames",
        ),
    ])
}

// ---------------------------------------------------------------- flow

fn random_vec(rng: &mut impl Rng, n: usize) -> Tensor<f64> {
    Tensor::new([n], (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).expect("shape")
}

/// Endpoint identities and `dφ/dt = u` by central differences.
pub fn flow_identity_cases(seed: u64) -> Result<Vec<Case>> {
    let mut rng = stream(seed, Purpose::Test, 2);
    let cfg = OtCfmConfig::default();
    let s = cfg.sigma_min;
    let mut cases = Vec::new();

    let (mut start, mut end) = (true, true);
    for _ in 0..20 {
        let x0 = random_vec(&mut rng, 16);
        let x1 = random_vec(&mut rng, 16);
        start &= ot_flow_point(&x0, &x1, FlowTime::new(0.0)?, cfg)? == x0;
        let want = x0.zip_map(&x1, "expected", |a, b| s * a + b)?;
        end &= ot_flow_point(&x0, &x1, FlowTime::new(1.0)?, cfg)? == want;
    }
    cases.push(Case::new("phi_0 == x0 exactly", start, "20 random pairs"));
    cases.push(Case::new(
        "phi_1 == sigma_min*x0 + x1 exactly",
        end,
        "20 random pairs",
    ));

    let mut worst = 0.0f64;
    let h = 1e-6;
    for &t in &[0.1, 0.25, 0.5, 0.75, 0.9] {
        let x0 = random_vec(&mut rng, 16);
        let x1 = random_vec(&mut rng, 16);
        let u = ot_target_field(&x0, &x1, cfg)?;
        let p = ot_flow_point(&x0, &x1, FlowTime::new(t + h)?, cfg)?;
        let m = ot_flow_point(&x0, &x1, FlowTime::new(t - h)?, cfg)?;
        for i in 0..16 {
            let fd = (p.data()[i] - m.data()[i]) / (2.0 * h);
            let rel = (fd - u.data()[i]).abs() / u.data()[i].abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    cases.push(Case::new(
        "d phi/dt == u_t by central differences",
        worst < 1e-6,
        format!("max rel err {worst:.2e}"),
    ));
    Ok(cases)
}

/// CFM loss at the analytic target and at a constant offset from it.
pub fn cfm_fixed_point_cases(seed: u64) -> Result<Vec<Case>> {
    let mut rng = stream(seed, Purpose::Test, 5);
    let cfg = OtCfmConfig::default();
    let mut cases = Vec::new();
    let (b, m, t) = (3, 4, 6);
    let x1 = Tensor::new([b, m, t], normals::<f64>(&mut rng, b * m * t))?;
    let mut mask = Tensor::full([b, t], 1.0);
    mask.data_mut()[t - 2..t].fill(0.0);
    mask.data_mut()[2 * t - 1] = 0.0;
    let lens = [t - 2, t - 1, t];
    let target = |item: usize| -> Result<Tensor<f64>> {
        let x = crop_item(&x1, item, lens[item])?;
        Ok(sample_path(&x, 17, item, cfg)?.u_t)
    };
    let loss_with = |offset: f64| -> Result<f64> {
        let mut g = Graph::new();
        let mu = g.constant(Tensor::zeros([b, m, t]));
        let l = cfm_loss(&mut g, &x1, mu, &mask, cfg, 17, |g, a| {
            let u = target(a.item)?.map(|v| v + offset);
            Ok(g.constant(u))
        })?;
        Ok(g.value(l).item())
    };
    let zero = loss_with(0.0)?;
    cases.push(Case::new(
        "cfm loss at the target is 0",
        zero.abs() <= 1e-12,
        format!("{zero:e}"),
    ));
    for c in [0.5, -1.25, 3.0] {
        let l = loss_with(c)?;
        let rel = (l - c * c).abs() / (c * c);
        cases.push(Case::new(
            format!("cfm loss at target + {c} is c^2"),
            rel <= 1e-12,
            format!("{l} vs {} (rel {rel:.1e})", c * c),
        ));
    }
    Ok(cases)
}

// ---------------------------------------------------------------- rope

/// Position-0 identity, odd-width rejection, and logits invariant under a
/// joint shift of query and key positions.
pub fn rope_cases(triples: usize, seed: u64) -> Result<Vec<Case>> {
    let mut rng = stream(seed, Purpose::Test, 3);
    let x = Tensor::new([2, 3, 8], normals::<f64>(&mut rng, 48))?;
    let identity = rope_rotate(&x, &[0.0; 3])?.max_abs_diff(&x) == 0.0;
    let odd = rope_rotate(&Tensor::<f64>::zeros([1, 1, 5]), &[1.0]).is_err();
    let mut worst = 0.0f64;
    for _ in 0..triples {
        let d = 2 * rng.random_range(1..=16);
        let q = Tensor::new([1, d], normals::<f64>(&mut rng, d))?;
        let k = Tensor::new([1, d], normals::<f64>(&mut rng, d))?;
        let m = rng.random_range(0..64) as f64;
        let n = rng.random_range(0..64) as f64;
        let s = rng.random_range(1..512) as f64;
        let a = attention_logits(&q, &[m], &k, &[n])?.item();
        let b = attention_logits(&q, &[m + s], &k, &[n + s])?.item();
        worst = worst.max((a - b).abs());
    }
    Ok(vec![
        Case::new("position 0 is the identity", identity, "2 heads x 3 rows"),
        Case::new("odd head width is rejected", odd, "d = 5"),
        Case::new(
            "logits depend only on position offsets",
            worst < 1e-6,
            format!("{triples} triples, max abs diff {worst:.2e}"),
        ),
    ])
}

// ---------------------------------------------------------------- grad

pub const GRAD_TOL: f64 = 1e-4;
const GRAD_EPS: f64 = 1e-5;
const SAMPLED: usize = 8;

/// Small configuration for finite-difference checks of whole networks.
pub fn tiny_config() -> ModelConfig {
    let mut c = ModelConfig::preset(Preset::Toy, 8);
    c.n_mel = 3;
    c.encoder.channels = 8;
    c.encoder.layers = 1;
    c.encoder.ffn_channels = 8;
    c.encoder.dp_channels = 8;
    c.decoder.hidden = 8;
    c.decoder.attention_dim = 4;
    c.decoder.ffn_mult = 2;
    c.decoder.time_dim = 8;
    c.decoder.groups = 2;
    c
}

/// `Σ w ⊙ y` for fixed pseudo-random weights, so every output element matters.
fn weighted(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let n = shape.iter().product();
    let w = g.constant(Tensor::new(
        shape,
        normals(&mut stream(seed, Purpose::Test, 99), n),
    )?);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn uniform(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).expect("shape")
}

fn check<F>(
    name: &str,
    f: F,
    inputs: &[Tensor<f64>],
    tol: f64,
    sampled: Option<usize>,
) -> Result<Case>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Sync + Send,
{
    let mut opts = GradCheckOptions::new(GRAD_EPS, tol);
    if let Some(k) = sampled {
        opts = opts.sampled(k, 5);
    }
    let r = grad_check_with(f, inputs, opts)?;
    let worst = r
        .inputs
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err));
    let detail = match worst {
        Some(w) => format!(
            "max rel err {:.2e} (input {}, element {}), {} tensors",
            r.max_rel_err,
            w.input,
            w.worst_element,
            r.inputs.len()
        ),
        None => "no inputs".into(),
    };
    Ok(Case::new(name, r.passed(), detail))
}

/// Finite-difference gradient checks of every block and loss at 64-bit.
pub fn grad_cases(seed: u64, tol: f64) -> Result<Vec<Case>> {
    let mut rng = stream(seed, Purpose::Test, 4);
    let mut cases = Vec::new();

    let x = uniform(&mut rng, &[3, 5]);
    let la = uniform(&mut rng, &[3]).map(|v| 0.5 * v);
    let lb = uniform(&mut rng, &[3]).map(|v| 0.5 * v);
    cases.push(check(
        "snake_beta",
        |g, v| {
            let y = snake_beta(g, v[0], v[1], v[2], 0)?;
            weighted(g, y, 1)
        },
        &[x, la, lb],
        tol,
        None,
    )?);

    let mut store = ParamStore::<f64>::default();
    let attn =
        MultiHeadAttention::build(&mut Builder::new(&mut store, seed), "attn", 8, 2, 4, true);
    let mut inputs: Vec<Tensor<f64>> = store.tensors().cloned().collect();
    let np = inputs.len();
    inputs.push(uniform(&mut rng, &[5, 8]));
    cases.push(check(
        "rope attention",
        |g, v| {
            let p = Bound::from_vars(v[..np].to_vec());
            let y = attn.forward(g, &p, v[np])?;
            weighted(g, y, 2)
        },
        &inputs,
        tol,
        None,
    )?);

    let cfg = tiny_config();
    let mut store = ParamStore::<f64>::default();
    let block = ResBlock::build(&mut Builder::new(&mut store, seed), "res", 6, 8, &cfg);
    let mut inputs: Vec<Tensor<f64>> = store.tensors().cloned().collect();
    let np = inputs.len();
    inputs.push(uniform(&mut rng, &[6, 7]));
    inputs.push(uniform(&mut rng, &[1, cfg.decoder.time_dim]));
    cases.push(check(
        "conv residual block",
        |g, v| {
            let p = Bound::from_vars(v[..np].to_vec());
            let y = block.forward(g, &p, v[np], v[np + 1])?;
            weighted(g, y, 3)
        },
        &inputs,
        tol,
        Some(SAMPLED),
    )?);

    let model = Model::<f64>::new(cfg.clone(), seed)?;
    let params: Vec<Tensor<f64>> = model
        .params
        .tensors()
        .map(|t| {
            let noise = normals::<f64>(&mut rng, t.len());
            let data = t
                .data()
                .iter()
                .zip(noise)
                .map(|(v, z)| v + 0.1 * z)
                .collect();
            Tensor::new(t.shape(), data).expect("shape")
        })
        .collect();
    let np = params.len();
    let tokens = [1usize, 5, 3, 7, 2];
    cases.push(check(
        "encoder",
        |g, v| {
            let p = Bound::from_vars(v.to_vec());
            let out = encoder_forward(g, &model, &p, &tokens)?;
            weighted(g, out.mu, 4)
        },
        &params,
        tol,
        Some(SAMPLED),
    )?);

    // The predictor sees a detached encoder state, so only its own weights vary.
    let dp: Vec<usize> = (0..np)
        .filter(|&i| model.params.names()[i].starts_with("duration."))
        .collect();
    let dp_inputs: Vec<Tensor<f64>> = dp.iter().map(|&i| params[i].clone()).collect();
    cases.push(check(
        "duration predictor",
        |g, v| {
            let mut vars: Vec<Var> = params.iter().map(|t| g.constant(t.clone())).collect();
            for (&i, &x) in dp.iter().zip(v) {
                vars[i] = x;
            }
            let out = encoder_forward(g, &model, &Bound::from_vars(vars), &tokens)?;
            weighted(g, out.log_durations, 5)
        },
        &dp_inputs,
        tol,
        Some(SAMPLED),
    )?);

    let mut inputs = params.clone();
    inputs.push(Tensor::new([3, 7], normals(&mut rng, 21))?);
    inputs.push(Tensor::new([3, 7], normals(&mut rng, 21))?);
    cases.push(check(
        "decoder",
        |g, v| {
            let p = Bound::from_vars(v[..np].to_vec());
            let y = decoder_forward(g, &model, &p, v[np], v[np + 1], FlowTime::new(0.35)?)?;
            g.mean(y)
        },
        &inputs,
        tol,
        Some(SAMPLED),
    )?);

    let frames = uniform(&mut rng, &[3, 6]);
    let mut mask = Tensor::full([6], 1.0);
    mask.data_mut()[5] = 0.0;
    cases.push(check(
        "prior loss",
        |g, v| prior_loss(g, &frames, v[0], Some(&mask)),
        &[uniform(&mut rng, &[3, 6])],
        tol,
        None,
    )?);

    let d = Durations::new(vec![2, 5, 1, 3])?;
    let mut tmask = Tensor::full([4], 1.0);
    tmask.data_mut()[3] = 0.0;
    cases.push(check(
        "duration loss",
        |g, v| duration_loss(g, v[0], &d, Some(&tmask)),
        &[uniform(&mut rng, &[4])],
        tol,
        None,
    )?);

    let (b, m, t) = (2, 3, 5);
    let x1 = Tensor::new([b, m, t], normals::<f64>(&mut rng, b * m * t))?;
    let mut fmask = Tensor::full([b, t], 1.0);
    fmask.data_mut()[t - 2..t].fill(0.0);
    let ocfg = OtCfmConfig::default();
    cases.push(check(
        "cfm loss",
        |g, v| {
            cfm_loss(g, &x1, v[0], &fmask, ocfg, 3, |g, a| {
                let h = g.matmul(v[1], a.x_t)?;
                let h = g.add(h, a.mu)?;
                Ok(g.scale(h, a.t.get() + 0.5))
            })
        },
        &[uniform(&mut rng, &[b, m, t]), uniform(&mut rng, &[m, m])],
        tol,
        None,
    )?);

    Ok(cases)
}

/// Convenience for callers that only need pass/fail.
pub fn ensure(report: &SuiteReport) -> Result<()> {
    match report.failures().next() {
        None => Ok(()),
        Some(c) => Err(Error::invalid(
            "verify",
            format!("{}: {} ({})", report.suite.name(), c.name, c.detail),
        )),
    }
}
