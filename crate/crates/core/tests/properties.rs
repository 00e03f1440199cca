use proptest::prelude::*;

use flowtts::align::{
    durations_from_path, log_prior_matrix, mas, upsample_by_durations, AlignmentPath, Durations,
};
use flowtts::cfm::{ot_flow_point, ot_target_field, FlowTime, OtCfmConfig};
use flowtts::data::{decode_tensor, encode_tensor};
use flowtts::numerics::{grad_check, Graph, Tensor, Var};
use flowtts::verify::brute_force_mas;

fn vals(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

fn matrix(max_r: usize, max_c: usize) -> impl Strategy<Value = Tensor<f64>> {
    (1..=max_r, 1..=max_c)
        .prop_flat_map(|(r, c)| vals(r * c).prop_map(move |v| Tensor::new([r, c], v).unwrap()))
}

fn weighted(g: &mut Graph<f64>, y: Var) -> flowtts::Result<Var> {
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w = (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
    let w = g.constant(Tensor::new(shape, w)?);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn passes(
    f: impl Fn(&mut Graph<f64>, &[Var]) -> flowtts::Result<Var> + Sync + Send,
    inputs: &[Tensor<f64>],
) -> bool {
    grad_check(f, inputs, 1e-6, 1e-5).unwrap().passed()
}

fn lattice_path(n: usize, t: usize, steps: &[bool]) -> AlignmentPath {
    // Advance on `true` while enough frames remain; forced advance otherwise.
    let mut frames = vec![0usize];
    for j in 1..t {
        let cur = *frames.last().unwrap();
        let remaining = t - j;
        let must = n - 1 - cur >= remaining;
        let adv = cur + 1 < n && (must || steps[j % steps.len()]);
        frames.push(if adv { cur + 1 } else { cur });
    }
    AlignmentPath::new(frames, n).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn smooth_unary_gradients(x in matrix(3, 4)) {
        let ok = passes(|g, v| { let y = g.sin(v[0]); weighted(g, y) }, std::slice::from_ref(&x));
        prop_assert!(ok);
        let ok = passes(|g, v| { let y = g.exp(v[0]); weighted(g, y) }, std::slice::from_ref(&x));
        prop_assert!(ok);
        let ok = passes(|g, v| { let y = g.silu(v[0]); weighted(g, y) }, std::slice::from_ref(&x));
        prop_assert!(ok);
        let ok = passes(|g, v| { let y = g.square(v[0]); weighted(g, y) }, std::slice::from_ref(&x));
        prop_assert!(ok);
        let pos = x.map(|v| v.abs() + 0.5);
        let ok = passes(|g, v| { let y = g.log(v[0]); weighted(g, y) }, &[pos]);
        prop_assert!(ok);
    }

    #[test]
    fn softmax_and_layer_norm_gradients(x in matrix(3, 5)) {
        let ok = passes(|g, v| { let y = g.softmax(v[0])?; weighted(g, y) }, std::slice::from_ref(&x));
        prop_assert!(ok);
        if x.dim(1) > 2 {
            let ok = passes(|g, v| { let y = g.layer_norm(v[0], 1e-5)?; weighted(g, y) }, &[x]);
            prop_assert!(ok);
        }
    }

    #[test]
    fn matmul_gradients(a in vals(6), b in vals(8)) {
        let a = Tensor::new([3, 2], a).unwrap();
        let b = Tensor::new([2, 4], b).unwrap();
        let ok = passes(|g, v| { let y = g.matmul(v[0], v[1])?; weighted(g, y) }, &[a, b]);
        prop_assert!(ok);
    }

    #[test]
    fn conv1d_gradients(x in vals(2 * 7), w in vals(3 * 2 * 3), b in vals(3), stride in 1usize..=2) {
        let x = Tensor::new([2, 7], x).unwrap();
        let w = Tensor::new([3, 2, 3], w).unwrap();
        let b = Tensor::new([3], b).unwrap();
        let ok = passes(
            |g, v| { let y = g.conv1d(v[0], v[1], Some(v[2]), stride, 1)?; weighted(g, y) },
            &[x, w, b],
        );
        prop_assert!(ok);
    }

    #[test]
    fn snake_and_rope_gradients(x in vals(2 * 6), la in vals(2), lb in vals(2)) {
        let x = Tensor::new([2, 6], x).unwrap();
        let scale = |v: Vec<f64>| Tensor::new([2], v.into_iter().map(|z| 0.5 * z).collect()).unwrap();
        let ok = passes(
            |g, v| { let y = g.snake_beta(v[0], v[1], v[2], 0)?; weighted(g, y) },
            &[x.clone(), scale(la), scale(lb)],
        );
        prop_assert!(ok);
        let ok = passes(|g, v| { let y = g.rope(v[0], &[0.0, 3.0])?; weighted(g, y) }, &[x]);
        prop_assert!(ok);
    }

    #[test]
    fn mas_is_optimal_valid_and_shift_invariant(
        (n, t) in (1usize..=5).prop_flat_map(|n| (Just(n), n..=8)),
        seed in vals(40),
        c in -50.0f64..50.0,
    ) {
        let ll = Tensor::new([n, t], seed[..n * t].iter().map(|v| 3.0 * v).collect()).unwrap();
        let path = mas(&ll).unwrap();
        let (best, _) = brute_force_mas(&ll);
        prop_assert!((path.score(&ll) - best).abs() <= 1e-9 * best.abs().max(1.0));
        let d = durations_from_path(&path);
        prop_assert_eq!(d.total(), t);
        prop_assert!(d.as_slice().iter().all(|&x| x >= 1));
        prop_assert_eq!(mas(&ll.map(|v| v + c)).unwrap(), path);
    }

    #[test]
    fn mas_beats_any_other_path(n in 1usize..=6, extra in 0usize..10, steps in prop::collection::vec(any::<bool>(), 1..8), s in vals(96)) {
        let t = n + extra;
        let ll = Tensor::new([n, t], s[..n * t].to_vec()).unwrap();
        let other = lattice_path(n, t, &steps);
        prop_assert!(mas(&ll).unwrap().score(&ll) >= other.score(&ll) - 1e-12);
    }

    #[test]
    fn durations_sum_to_ceiled_predictions(d in prop::collection::vec(0.0f64..9.0, 1..20)) {
        let dur = Durations::from_real(&d).unwrap();
        let want: usize = d.iter().map(|v| (v.ceil() as usize).max(1)).sum();
        prop_assert_eq!(dur.total(), want);
        prop_assert!(dur.as_slice().iter().all(|&x| x >= 1));
    }

    #[test]
    fn upsampling_repeats_columns(d in prop::collection::vec(1usize..5, 1..8), m in 1usize..4) {
        let n = d.len();
        let mu = Tensor::new([m, n], (0..m * n).map(|i| i as f64).collect()).unwrap();
        let dur = Durations::new(d).unwrap();
        let up = upsample_by_durations(&mu, &dur).unwrap();
        prop_assert_eq!(up.shape(), &[m, dur.total()][..]);
        for (j, &i) in dur.frame_index().iter().enumerate() {
            for c in 0..m {
                prop_assert_eq!(up.data()[c * dur.total() + j], mu.data()[c * n + i]);
            }
        }
    }

    #[test]
    fn alignment_of_upsampled_means_recovers_durations(d in prop::collection::vec(1usize..6, 1..6)) {
        let n = d.len();
        let m = 4;
        let mu = Tensor::<f64>::new([m, n], (0..m * n).map(|i| 3.0 * ((i * 5 % 7) as f64) + (i / m) as f64 * 10.0).collect()).unwrap();
        let dur = Durations::new(d).unwrap();
        let frames = upsample_by_durations(&mu, &dur).unwrap();
        let path = mas(&log_prior_matrix(&frames, &mu).unwrap()).unwrap();
        prop_assert_eq!(durations_from_path(&path), dur);
    }

    #[test]
    fn alignment_dump_round_trips(n in 1usize..6, extra in 0usize..8, steps in prop::collection::vec(any::<bool>(), 1..6)) {
        let path = lattice_path(n, n + extra, &steps);
        prop_assert_eq!(AlignmentPath::from_dump(&path.to_dump()).unwrap(), path);
    }

    #[test]
    fn mtf_round_trip_is_bit_exact(shape in prop::collection::vec(0usize..4, 0..4), bits in prop::collection::vec(any::<u32>(), 64)) {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|i| f32::from_bits(bits[i % 64])).collect();
        let t = Tensor::new(shape.clone(), data).unwrap();
        let bytes = encode_tensor(&t);
        let (back, used) = decode_tensor(&bytes).unwrap();
        prop_assert_eq!(used, bytes.len());
        prop_assert_eq!(back.shape(), &shape[..]);
        prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn flow_derivative_matches_target(x0 in vals(8), x1 in vals(8), t in 0.01f64..0.99) {
        let cfg = OtCfmConfig::default();
        let x0 = Tensor::new([8], x0).unwrap();
        let x1 = Tensor::new([8], x1).unwrap();
        let u = ot_target_field(&x0, &x1, cfg).unwrap();
        let h = 1e-6;
        let p = ot_flow_point(&x0, &x1, FlowTime::new(t + h).unwrap(), cfg).unwrap();
        let m = ot_flow_point(&x0, &x1, FlowTime::new(t - h).unwrap(), cfg).unwrap();
        for i in 0..8 {
            let fd = (p.data()[i] - m.data()[i]) / (2.0 * h);
            prop_assert!((fd - u.data()[i]).abs() <= 1e-6 * u.data()[i].abs().max(1.0));
        }
    }
}
