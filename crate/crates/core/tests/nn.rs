use proptest::prelude::*;
use topoquant::grid::{Dims, LabelMask, LogitMap, ProbMap, Volume3D};
use topoquant::nn::{
    cross_entropy, cross_entropy_logits, decode_checkpoint, encode_checkpoint, evaluate_objective, train, ActScales,
    Net, NetConfig, ObjectiveWeights, QuantPlan, Scan, Tape, TrainConfig, WeightEncoding,
};
use topoquant::phantom::{generate_phantom, PhantomSpec};
use topoquant::quant::{QuantScheme, RangeCalibrator};
use topoquant::topo_loss::{TopoLossWeights, TopoTarget};

fn small_net(classes: u16, dims: Dims, quantize: bool) -> Net {
    let mut cfg = NetConfig::new(classes, dims);
    cfg.widths = vec![4, 4, classes as usize + 1];
    cfg.quantize = quantize;
    Net::new(cfg).unwrap()
}

fn ramp(dims: Dims) -> Volume3D {
    Volume3D::from_fn(dims, |z, y, x| ((z * 7 + y * 3 + x) % 11) as f64 / 5.0 - 1.0).unwrap()
}

fn two_tooth_scan(n: usize) -> Scan {
    let spec = PhantomSpec::fitted(2, Dims::cube(n), [4.0, 2.0, 2.0], 1.0, vec![], 9).unwrap();
    let p = generate_phantom(&spec).unwrap();
    Scan {
        id: "s".into(),
        volume: p.volume,
        mask: p.mask,
    }
}

#[test]
fn default_hyperparameters() {
    let t = TopoLossWeights::default();
    assert_eq!((t.lambda1, t.lambda2, t.lambda3), (0.1, 0.3, 0.05));
    let c = TrainConfig::default();
    assert_eq!((c.alpha, c.beta, c.lr, c.plateau_factor), (0.01, 0.1, 3e-4, 0.3));
    assert_eq!((c.batch_size, c.epochs, c.seed), (2, 1000, 42));
    assert_eq!(NetConfig::new(8, Dims::cube(8)).widths, vec![8, 16, 16, 9]);
}

#[test]
fn zeroed_output_layer_is_uniform() {
    let mut net = small_net(8, Dims::cube(4), true);
    let last = *net.layout().last().unwrap();
    net.params[last.weight].iter_mut().for_each(|w| *w = 0.0);
    net.params[last.bias].iter_mut().for_each(|b| *b = 0.0);
    let (probs, labels) = net.infer(&ramp(Dims::cube(4))).unwrap();
    assert!(probs.data().iter().all(|&p| (p - 1.0 / 9.0).abs() < 1e-15));
    assert!(labels.labels().iter().all(|&l| l == 0));
}

#[test]
fn fake_quant_gap_shrinks_with_the_grid() {
    let dims = Dims::cube(5);
    let net = small_net(2, dims, true);
    let x = ramp(dims);
    let float = {
        let mut tape = Tape::new();
        let f = net.forward(&mut tape, &x, None).unwrap();
        tape.value(f.logits).to_vec()
    };
    // Observe each activation range once; a single update debiases to the absmax.
    let mut cals: Vec<RangeCalibrator> = net.calibrators.clone();
    let weights: Vec<QuantScheme> = {
        let mut tape = Tape::new();
        let plan = QuantPlan {
            weights: None,
            acts: ActScales::Update(&mut cals),
            round: true,
        };
        net.forward(&mut tape, &x, Some(plan)).unwrap().weight_schemes
    };
    let mut gaps = Vec::new();
    for m in [1.0, 0.5, 0.25, 0.125] {
        // Widening the code range instead would clamp, so shrink the grid from
        // a coarse multiple of the calibrated scale towards it.
        let scale = |s: &QuantScheme, k: f64| QuantScheme {
            scales: s.scales.iter().map(|v| v * k).collect(),
            ..s.clone()
        };
        let k = 8.0 * m;
        let w: Vec<QuantScheme> = weights.iter().map(|s| scale(s, k)).collect();
        let a: Vec<QuantScheme> = cals.iter().map(|c| scale(&c.finalize(), k)).collect();
        let mut tape = Tape::new();
        let plan = QuantPlan {
            weights: Some(&w),
            acts: ActScales::Fixed(&a),
            round: true,
        };
        let f = net.forward(&mut tape, &x, Some(plan)).unwrap();
        let gap = tape.value(f.logits).iter().zip(&float).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        gaps.push(gap);
    }
    assert!(gaps.windows(2).all(|w| w[1] < w[0]), "{gaps:?}");
}

#[test]
fn cross_entropy_reference_values() {
    let dims = Dims::cube(2);
    let mask = LabelMask::new(dims, vec![0, 1, 2, 3, 4, 5, 6, 7], 8).unwrap();
    let uniform = LogitMap::new(dims, 9, vec![0.0; 9 * 8]).unwrap();
    assert!((cross_entropy(&uniform.softmax(), &mask) - 9f64.ln()).abs() < 1e-12);
    assert!(cross_entropy(&ProbMap::one_hot(&mask), &mask) < 1e-12);
}

#[test]
fn cross_entropy_gradient_matches_central_differences() {
    let dims = Dims::cube(4);
    let n = dims.len();
    let labels: Vec<u16> = (0..n).map(|i| (i % 3) as u16).collect();
    let mask = LabelMask::new(dims, labels, 2).unwrap();
    let data: Vec<f64> = (0..3 * n).map(|i| ((i * 37 % 17) as f64 - 8.0) / 4.0).collect();
    let logits = LogitMap::new(dims, 3, data.clone()).unwrap();
    let analytic = cross_entropy_logits(&logits, &mask).grad;
    let h = 1e-4;
    for i in (0..3 * n).step_by(7) {
        let eval = |d: f64| {
            let mut v = data.clone();
            v[i] += d;
            cross_entropy_logits(&LogitMap::new(dims, 3, v).unwrap(), &mask).value
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        let rel = (analytic[i] - fd).abs() / analytic[i].abs().max(fd.abs()).max(1e-6);
        assert!(rel < 1e-3, "index {i}: {} vs {fd}", analytic[i]);
    }
}

#[test]
fn zero_weights_reduce_the_objective_to_cross_entropy() {
    let scan = two_tooth_scan(16);
    let net = small_net(2, scan.mask.dims(), true);
    let topo = TopoLossWeights::default();
    let w = ObjectiveWeights {
        alpha: 0.0,
        beta: 0.0,
        topo: &topo,
    };
    let target = TopoTarget::new(&scan.mask);
    let e = evaluate_objective(&net, &scan.volume, &scan.mask, Some(&target), w, net.inference_plan(), None).unwrap();
    assert_eq!(e.losses.total, e.losses.ce);
    assert!(e.topo.is_none());
}

#[test]
fn inference_is_pure_and_ties_go_low() {
    let dims = Dims::cube(6);
    let net = small_net(2, dims, true);
    let x = ramp(dims);
    assert_eq!(net.infer(&x).unwrap(), net.infer(&x).unwrap());
    let tie = ProbMap::new(Dims::cube(1), 3, vec![0.4, 0.4, 0.2]).unwrap();
    assert_eq!(tie.argmax().labels(), &[0]);
    let mask = LabelMask::new(Dims::cube(2), vec![0, 1, 2, 1, 0, 2, 2, 1], 2).unwrap();
    assert_eq!(ProbMap::one_hot(&mask).argmax(), mask);
}

fn short_run(beta: f64) -> (Net, topoquant::nn::TrainOutcome) {
    let scan = two_tooth_scan(16);
    let mut net = small_net(2, scan.mask.dims(), true);
    let cfg = TrainConfig {
        beta,
        lr: 1e-2,
        batch_size: 1,
        epochs: 3,
        val_scans: 0,
        ..TrainConfig::default()
    };
    let out = train(&mut net, &[scan], &cfg).unwrap();
    (net, out)
}

#[test]
fn training_is_reproducible_and_logs_topology() {
    let (a, la) = short_run(0.1);
    let (b, lb) = short_run(0.1);
    assert_eq!(la.log, lb.log);
    assert_eq!(encode_checkpoint(&a, WeightEncoding::F64), encode_checkpoint(&b, WeightEncoding::F64));
    assert!(la.log[0].l_topo > 0.0);
    let (_, plain) = short_run(0.0);
    assert!(plain.log.iter().all(|r| r.l_topo == 0.0));
}

#[test]
fn checkpoints_round_trip_and_int8_is_smaller() {
    let (net, _) = short_run(0.0);
    let f64_bytes = encode_checkpoint(&net, WeightEncoding::F64);
    let int8_bytes = encode_checkpoint(&net, WeightEncoding::Int8);
    assert!(int8_bytes.len() < f64_bytes.len());
    assert_eq!(decode_checkpoint(&f64_bytes).unwrap(), net);
    let restored = decode_checkpoint(&int8_bytes).unwrap();
    let x = two_tooth_scan(16).volume;
    assert_eq!(restored.config, net.config);
    assert_eq!(restored.infer(&x).unwrap().1.dims(), x.dims());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn softmax_channels_sum_to_one(values in proptest::collection::vec(-50.0f64..50.0, 64)) {
        let dims = Dims::cube(4);
        let net = small_net(3, dims, true);
        let (probs, _) = net.infer(&Volume3D::new(dims, values).unwrap()).unwrap();
        let n = dims.len();
        for v in 0..n {
            let s: f64 = (0..4).map(|c| probs.data()[c * n + v]).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }
}
