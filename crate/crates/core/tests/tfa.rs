//! Temporal alignment block: shapes, fixed points, causality and gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rppg_core::diffcore::{grad_check, GradCheckOptions};
use rppg_core::flow::FlowField;
use rppg_core::params::ParamStore;
use rppg_core::tfa::{
    aggregate, direction_flows, init_tfa, interp_sequence, propagate, tfa_forward, AggVars, Direction,
    DirectionVars, TfaConfig, TfaMode,
};
use rppg_core::{Tape, Tensor, Var};

fn small_cfg() -> TfaConfig {
    TfaConfig { c: 4, h: 8, w: 8, num_resblocks: 2, ..TfaConfig::default() }
}

fn store(cfg: &TfaConfig, seed: u64) -> ParamStore {
    let mut s = ParamStore::new();
    init_tfa(&mut s, "tfa", cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    s
}

fn zero_biases(s: &mut ParamStore) {
    let names: Vec<String> = s.names().iter().filter(|n| n.ends_with(".b") || n.ends_with(".shift")).cloned().collect();
    for n in names {
        let t = s.get_mut(&n).unwrap();
        *t = Tensor::zeros(t.shape());
    }
}

fn frames(t: usize, sizes: &[usize], seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..t).map(|i| Tensor::rand_uniform(&[3, sizes[i % sizes.len()], sizes[i % sizes.len()]], 0.0, 1.0, &mut rng)).collect()
}

fn run_dir(
    s: &ParamStore,
    cfg: &TfaConfig,
    xs: &[Tensor],
    dir: Direction,
    flows: Option<Vec<Option<FlowField>>>,
) -> Vec<Tensor> {
    let mut tape = Tape::new();
    let b = s.bind_frozen(&mut tape);
    let vs: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
    let flows = flows.unwrap_or_else(|| direction_flows(xs, dir, &cfg.flow).unwrap());
    let p = DirectionVars::bind(&b, "tfa", dir, cfg.num_resblocks).unwrap();
    let hs = propagate(&mut tape, &vs, dir, &p, &flows, cfg, true).unwrap();
    hs.iter().map(|&h| tape.value(h).clone()).collect()
}

#[test]
fn interp_sequence_examples() {
    let mut tape = Tape::new();
    let fs = frames(4, &[128, 96, 64, 32], 1);
    let vs: Vec<Var> = fs.iter().map(|f| tape.constant(f.clone())).collect();
    let (_, stack) = interp_sequence(&mut tape, &vs, 64, 64).unwrap();
    assert_eq!(tape.shape(stack), &[4, 3, 64, 64]);

    let fs = frames(3, &[64], 2);
    let vs: Vec<Var> = fs.iter().map(|f| tape.constant(f.clone())).collect();
    let (_, stack) = interp_sequence(&mut tape, &vs, 64, 64).unwrap();
    let want: Vec<f64> = fs.iter().flat_map(|f| f.data().to_vec()).collect();
    assert_eq!(tape.value(stack).data(), want.as_slice());

    let c = tape.constant(Tensor::full(&[3, 40, 50], 0.3));
    let (_, stack) = interp_sequence(&mut tape, &[c, c], 64, 64).unwrap();
    assert!(tape.value(stack).data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
    assert!(interp_sequence(&mut tape, &[], 64, 64).is_err());
}

#[test]
fn single_frame_directions_agree_with_copied_params() {
    let cfg = small_cfg();
    let mut s = store(&cfg, 3);
    let names: Vec<String> = s.names().iter().filter(|n| n.starts_with("tfa.fwd.")).cloned().collect();
    for n in names {
        let v = s.get(&n).unwrap().clone();
        *s.get_mut(&n.replace("tfa.fwd.", "tfa.bwd.")).unwrap() = v;
    }
    let xs = frames(1, &[8], 4);
    let f = run_dir(&s, &cfg, &xs, Direction::Forward, None);
    let b = run_dir(&s, &cfg, &xs, Direction::Backward, None);
    assert_eq!(f, b);
    assert_eq!(f[0].shape(), &[4, 8, 8]);
}

#[test]
fn zeros_are_a_fixed_point() {
    let cfg = small_cfg();
    let mut s = store(&cfg, 5);
    zero_biases(&mut s);
    let xs = vec![Tensor::zeros(&[3, 8, 8]); 3];
    for dir in [Direction::Forward, Direction::Backward] {
        for h in run_dir(&s, &cfg, &xs, dir, None) {
            assert!(h.data().iter().all(|&v| v == 0.0));
        }
    }
    let mut tape = Tape::new();
    let b = s.bind_frozen(&mut tape);
    let vs: Vec<Var> = (0..3).map(|_| tape.constant(Tensor::zeros(&[3, 12, 12]))).collect();
    let y = tfa_forward(&mut tape, &vs, &b, "tfa", &cfg, true).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn static_clip_matches_forced_zero_flow() {
    let cfg = small_cfg();
    let s = store(&cfg, 6);
    let one = frames(1, &[8], 7).remove(0);
    let xs = vec![one; 4];
    for dir in [Direction::Forward, Direction::Backward] {
        let est = run_dir(&s, &cfg, &xs, dir, None);
        let zero: Vec<Option<FlowField>> = (0..4)
            .map(|i| {
                let first = if dir == Direction::Forward { 0 } else { 3 };
                (i != first).then(|| FlowField::zeros(8, 8))
            })
            .collect();
        let forced = run_dir(&s, &cfg, &xs, dir, Some(zero));
        for (a, b) in est.iter().zip(&forced) {
            assert!(a.max_abs_diff(b) < 1e-6);
        }
    }
}

fn agg_eval(
    hf: &[Tensor],
    hb: Option<&[Tensor]>,
    w: Tensor,
    bias: Tensor,
) -> Tensor {
    let mut tape = Tape::new();
    let f: Vec<Var> = hf.iter().map(|h| tape.constant(h.clone())).collect();
    let b: Option<Vec<Var>> = hb.map(|hb| hb.iter().map(|h| tape.constant(h.clone())).collect());
    let p = AggVars { w: tape.constant(w), b: tape.constant(bias) };
    let y = aggregate(&mut tape, &f, b.as_deref(), p).unwrap();
    tape.value(y).clone()
}

#[test]
fn aggregate_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let c = 3;
    let hf: Vec<Tensor> = (0..2).map(|_| Tensor::randn(&[c, 4, 5], 1.0, &mut rng)).collect();
    let hb: Vec<Tensor> = (0..2).map(|_| Tensor::randn(&[c, 4, 5], 1.0, &mut rng)).collect();

    let mut sel = vec![0.0; c * 2 * c];
    for i in 0..c {
        sel[i * 2 * c + i] = 1.0;
    }
    let y = agg_eval(&hf, Some(&hb), Tensor::new(&[c, 2 * c], sel).unwrap(), Tensor::zeros(&[c]));
    let want: Vec<f64> = hb.iter().flat_map(|h| h.data().to_vec()).collect();
    assert_eq!(y.data(), want.as_slice());

    let zeros = vec![Tensor::zeros(&[c, 4, 5]); 2];
    let bias = Tensor::from_vec(vec![0.5, -0.25, 2.0]);
    let w = Tensor::randn(&[c, 2 * c], 1.0, &mut rng);
    let y = agg_eval(&zeros, Some(&zeros), w.clone(), bias.clone());
    for t in 0..2 {
        for ch in 0..c {
            assert!(y.data()[(t * c + ch) * 20..][..20].iter().all(|&v| v == bias.data()[ch]));
        }
    }

    let y = agg_eval(&hf, Some(&hb), w.clone(), bias.clone());
    for t in 0..2 {
        for o in 0..c {
            for p in 0..20 {
                let mut acc = bias.data()[o];
                for i in 0..c {
                    acc += w.data()[o * 2 * c + i] * hb[t].data()[i * 20 + p];
                    acc += w.data()[o * 2 * c + c + i] * hf[t].data()[i * 20 + p];
                }
                assert!((y.data()[(t * c + o) * 20 + p] - acc).abs() < 1e-12);
            }
        }
    }

    let mut tape = Tape::new();
    let f = tape.constant(hf[0].clone());
    let p = AggVars { w: tape.constant(w), b: tape.constant(bias) };
    assert!(aggregate(&mut tape, &[f, f], Some(&[f]), p).is_err());
}

#[test]
fn forward_output_extents_for_mixed_resolutions() {
    let cfg = TfaConfig { c: 16, num_resblocks: 1, ..TfaConfig::default() };
    let s = store(&cfg, 9);
    let xs = frames(8, &[128, 96, 64, 48, 32, 20], 10);
    for mode in [TfaMode::Bidirectional, TfaMode::Single] {
        let cfg = TfaConfig { mode, ..cfg.clone() };
        let mut tape = Tape::new();
        let b = s.bind_frozen(&mut tape);
        let vs: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let y = tfa_forward(&mut tape, &vs, &b, "tfa", &cfg, true).unwrap();
        assert_eq!(tape.shape(y), &[8, 16, 64, 64]);
    }
}

#[test]
fn each_direction_is_causal() {
    let cfg = small_cfg();
    let s = store(&cfg, 11);
    let xs = frames(5, &[8], 12);
    let mut perturbed = xs.clone();
    perturbed[4] = perturbed[4].map(|v| 1.0 - v);
    let a = run_dir(&s, &cfg, &xs, Direction::Forward, None);
    let b = run_dir(&s, &cfg, &perturbed, Direction::Forward, None);
    assert_eq!(a[..4], b[..4]);
    assert_ne!(a[4], b[4]);

    let mut perturbed = xs.clone();
    perturbed[0] = perturbed[0].map(|v| 1.0 - v);
    let a = run_dir(&s, &cfg, &xs, Direction::Backward, None);
    let b = run_dir(&s, &cfg, &perturbed, Direction::Backward, None);
    assert_eq!(a[1..], b[1..]);
    assert_ne!(a[0], b[0]);
}

#[test]
fn single_mode_never_touches_backward_params() {
    let cfg = TfaConfig { mode: TfaMode::Single, ..small_cfg() };
    let s = store(&cfg, 13);
    let xs = frames(3, &[8, 12], 14);
    let mut tape = Tape::new();
    let b = s.bind(&mut tape);
    let vs: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
    let y = tfa_forward(&mut tape, &vs, &b, "tfa", &cfg, true).unwrap();
    let sq = tape.square(y);
    let l = tape.sum(sq);
    tape.backward(l).unwrap();
    for name in s.names() {
        let g = tape.grad(b.get(name).unwrap());
        if name.starts_with("tfa.bwd.") {
            assert!(g.is_none(), "{name} received a gradient");
        } else if name.ends_with(".w") {
            assert!(g.is_some_and(|g| g.norm() > 0.0), "{name} has no gradient");
        }
    }
}

#[test]
fn miniature_passes_gradient_check() {
    let cfg = TfaConfig { c: 3, h: 8, w: 8, num_resblocks: 2, ..TfaConfig::default() };
    let s = store(&cfg, 15);
    let xs = frames(3, &[8], 16);
    let fwd_flows = direction_flows(&xs, Direction::Forward, &cfg.flow).unwrap();
    let bwd_flows = direction_flows(&xs, Direction::Backward, &cfg.flow).unwrap();
    let names = s.names().to_vec();
    let mut inputs = s.tensors().to_vec();
    let np = names.len();
    inputs.extend(xs.iter().cloned());
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let weights = Tensor::randn(&[3, 3, 8, 8], 1.0, &mut rng);
    let f = move |tape: &mut Tape, v: &[Var]| {
        let lookup = |n: &str| v[names.iter().position(|m| m == n).unwrap()];
        let dir_vars = |dir: &str| {
            let mut out = vec![lookup(&format!("tfa.{dir}.entry.w")), lookup(&format!("tfa.{dir}.entry.b"))];
            for r in 0..2 {
                for p in ["conv1.w", "conv1.b", "norm.scale", "norm.shift", "conv2.w", "conv2.b"] {
                    out.push(lookup(&format!("tfa.{dir}.res{r}.{p}")));
                }
            }
            out
        };
        let frames = &v[np..];
        let hf = propagate(tape, frames, Direction::Forward, &DirectionVars::from_vars(dir_vars("fwd")), &fwd_flows, &cfg, true)?;
        let hb = propagate(tape, frames, Direction::Backward, &DirectionVars::from_vars(dir_vars("bwd")), &bwd_flows, &cfg, true)?;
        let agg = AggVars { w: lookup("tfa.agg.w"), b: lookup("tfa.agg.b") };
        let y = aggregate(tape, &hf, Some(&hb), agg)?;
        let w = tape.constant(weights.clone());
        let p = tape.mul(y, w)?;
        let sq = tape.square(p);
        Ok(tape.sum(sq))
    };
    let opts = GradCheckOptions { eps: 1e-5, max_probes: Some(100), seed: 18 };
    let rep = grad_check(f, &inputs, &opts).unwrap();
    assert!(rep.max_rel_error < 1e-5, "{rep:?}");
}
