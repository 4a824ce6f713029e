//! Finite-difference verification of every analytic gradient in the crate.
//!
//! Each suite draws a random point per seed, computes the analytic gradient
//! once, and compares every coordinate with a central difference. The losses
//! are only piecewise smooth (thresholded components, persistence pairings,
//! L1 kinks, quantiser clamps, LeakyReLU), so each suite also computes a
//! signature of the active piece; a coordinate whose perturbation changes the
//! signature is skipped rather than compared.
//!
//! The count term's value is a mean of exact counts and is piecewise constant.
//! Its reported gradient is that of the relaxed count, so the suite compares
//! against `sign(hard - target) * (relaxed - target)`, which agrees with the
//! loss in slope on every piece.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::grid::{softmax_vjp, Dims, LabelMask, LogitMap, ProbMap, Volume3D};
use crate::nn::{cross_entropy_logits, evaluate_objective, ActScales, Net, NetConfig, ObjectiveWeights, QuantPlan, Tape};
use crate::quant::{in_range, quantize, ste_backward, QuantScheme};
use crate::topo_loss::{
    adjacency_loss_faces, adjacency_signs, count_loss, hole_loss, hole_signature, ladder_peaks, relaxed_cc_count,
    sign0, soft_betti1_slice, soft_cc_count_slice, TopoLossWeights, TopoTarget,
};

pub const FD_STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Count,
    Adjacency,
    Hole,
    Quant,
    CrossEntropy,
    Total,
}

impl Term {
    pub const ALL: [Term; 6] = [
        Term::Count,
        Term::Adjacency,
        Term::Hole,
        Term::Quant,
        Term::CrossEntropy,
        Term::Total,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Term::Count => "count",
            Term::Adjacency => "adjacency",
            Term::Hole => "hole",
            Term::Quant => "quant",
            Term::CrossEntropy => "cross_entropy",
            Term::Total => "total",
        }
    }

    pub fn parse(s: &str) -> Option<Term> {
        Term::ALL.into_iter().find(|t| t.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    pub seeds: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Test hook: perturb this term's analytic gradient so its suite must fail.
    pub corrupt: Option<Term>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seeds: 20,
            step: FD_STEP,
            tolerance: TOLERANCE,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermReport {
    pub term: Term,
    pub seeds: u64,
    pub checked: usize,
    pub skipped: usize,
    pub worst_rel_err: f64,
    /// `(seed, coordinate)` of the worst comparison.
    pub worst_at: Option<(u64, usize)>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub terms: Vec<TermReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.terms.iter().all(|t| t.passed)
    }

    pub fn failed_terms(&self) -> Vec<Term> {
        self.terms.iter().filter(|t| !t.passed).map(|t| t.term).collect()
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<14}{:>7}{:>10}{:>9}{:>14}  {}\n",
            "term", "seeds", "checked", "skipped", "worst rel", "status"
        );
        for t in &self.terms {
            out.push_str(&format!(
                "{:<14}{:>7}{:>10}{:>9}{:>14.3e}  {}\n",
                t.term.name(),
                t.seeds,
                t.checked,
                t.skipped,
                t.worst_rel_err,
                if t.passed { "pass" } else { "FAIL" }
            ));
        }
        out
    }
}

/// `|a - f| / max(|a|, |f|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Debug, Default)]
struct Tally {
    checked: usize,
    skipped: usize,
    worst: f64,
    worst_at: Option<(u64, usize)>,
}

impl Tally {
    /// Compare `analytic` with central differences of `f` at every coordinate.
    fn compare<S: PartialEq>(
        &mut self,
        seed: u64,
        x: &[f64],
        analytic: &[f64],
        step: f64,
        mut f: impl FnMut(&[f64]) -> (f64, S),
    ) {
        let (_, base) = f(x);
        let mut probe = x.to_vec();
        for i in 0..x.len() {
            probe[i] = x[i] + step;
            let (fp, sp) = f(&probe);
            probe[i] = x[i] - step;
            let (fm, sm) = f(&probe);
            probe[i] = x[i];
            if sp != base || sm != base {
                self.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * step);
            let e = relative_error(analytic[i], numeric);
            self.checked += 1;
            if e > self.worst || self.worst_at.is_none() {
                self.worst = self.worst.max(e);
                self.worst_at = Some((seed, i));
            }
        }
    }

    fn report(self, term: Term, opts: &GradcheckOptions) -> TermReport {
        TermReport {
            term,
            seeds: opts.seeds,
            checked: self.checked,
            skipped: self.skipped,
            worst_rel_err: self.worst,
            worst_at: self.worst_at,
            passed: self.checked > 0 && self.worst < opts.tolerance,
        }
    }
}

fn corrupt(grad: &mut [f64], term: Term, opts: &GradcheckOptions) {
    if opts.corrupt == Some(term) {
        for g in grad {
            *g = 1.05 * *g + 1e-3;
        }
    }
}

const GRID: usize = 6;
const TEETH: u16 = 2;

/// Two box teeth along `x`, touching or one voxel apart; the first sometimes
/// has a tunnel along `x`.
pub fn random_two_tooth_mask(rng: &mut impl Rng) -> LabelMask {
    let dims = Dims::cube(GRID);
    let split = rng.gen_range(2..4usize);
    let gap = rng.gen_range(0..2usize);
    let tunnel = rng.gen_bool(0.5);
    let (z0, y0) = (rng.gen_range(0..2usize), rng.gen_range(0..2usize));
    let labels = (0..dims.len())
        .map(|v| {
            let (z, y, x) = dims.coords(v);
            let inside = (z0..z0 + 4).contains(&z) && (y0..y0 + 4).contains(&y);
            if !inside {
                0
            } else if x < split {
                let core = z == z0 + 1 || z == z0 + 2;
                let hole = tunnel && core && (y == y0 + 1 || y == y0 + 2);
                if hole {
                    0
                } else {
                    1
                }
            } else if x >= split + gap {
                2
            } else {
                0
            }
        })
        .collect();
    LabelMask::new(dims, labels, TEETH).expect("labels in range")
}

/// Random logits loosely biased towards `mask`.
fn random_logits(rng: &mut impl Rng, mask: &LabelMask) -> Vec<f64> {
    let dims = mask.dims();
    let n = dims.len();
    let c = mask.num_classes() as usize + 1;
    let mut z: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-2.0..2.0)).collect();
    for (v, &l) in mask.labels().iter().enumerate() {
        z[l as usize * n + v] += 1.5;
    }
    z
}

fn logit_map(dims: Dims, x: &[f64]) -> LogitMap {
    LogitMap::new(dims, TEETH as usize + 1, x.to_vec()).expect("finite logits")
}

type CountSig = (Vec<Vec<usize>>, i8);

/// Slope-equivalent surrogate of the count term and its piece signature.
fn count_surrogate(probs: &ProbMap, target_count: usize, tau: f64) -> (f64, CountSig) {
    let fg = probs.foreground();
    let hard = soft_cc_count_slice(fg.dims(), fg.data(), tau).value;
    let s = sign0(hard - target_count as f64);
    let relaxed = relaxed_cc_count(fg.dims(), fg.data(), tau);
    (s * (relaxed - target_count as f64), (ladder_peaks(fg.dims(), fg.data()), s as i8))
}

type HoleSig = Vec<(Vec<(usize, usize)>, i8)>;

fn hole_sig(probs: &ProbMap, target: &TopoTarget, tau: f64) -> HoleSig {
    (1..probs.channels())
        .map(|k| {
            let p = probs.channel(k);
            let sb = soft_betti1_slice(probs.dims(), p, tau).value;
            (hole_signature(probs.dims(), p), sign0(sb - target.tooth_b1()[k - 1] as f64) as i8)
        })
        .collect()
}

fn suite_count(opts: &GradcheckOptions) -> TermReport {
    let tau = TopoLossWeights::default().tau_t;
    let mut tally = Tally::default();
    for seed in 0..opts.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = random_two_tooth_mask(&mut rng);
        let target = TopoTarget::new(&mask);
        let x = random_logits(&mut rng, &mask);
        let probs = logit_map(mask.dims(), &x).softmax();
        let g = count_loss(&probs, &target, tau).expect("valid inputs").grad;
        let mut analytic = softmax_vjp(&probs, &g);
        corrupt(&mut analytic, Term::Count, opts);
        tally.compare(seed, &x, &analytic, opts.step, |z| {
            count_surrogate(&logit_map(mask.dims(), z).softmax(), target.component_count(), tau)
        });
    }
    tally.report(Term::Count, opts)
}

fn suite_adjacency(opts: &GradcheckOptions) -> TermReport {
    let kappa = TopoLossWeights::default().kappa;
    let mut tally = Tally::default();
    for seed in 0..opts.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(1_000 + seed);
        let mask = random_two_tooth_mask(&mut rng);
        let target = TopoTarget::new(&mask);
        let x = random_logits(&mut rng, &mask);
        let eval = |z: &[f64]| {
            let l = logit_map(mask.dims(), z);
            let r = adjacency_loss_faces(&l, &target.mask, &target.adjacency, &target.faces, kappa);
            let s = adjacency_signs(&l, &target.mask, &target.adjacency, &target.faces, kappa);
            (r, s)
        };
        let mut analytic = eval(&x).0.grad;
        corrupt(&mut analytic, Term::Adjacency, opts);
        tally.compare(seed, &x, &analytic, opts.step, |z| {
            let (r, s) = eval(z);
            (r.value, s)
        });
    }
    tally.report(Term::Adjacency, opts)
}

fn suite_hole(opts: &GradcheckOptions) -> TermReport {
    let tau = TopoLossWeights::default().tau_h;
    let mut tally = Tally::default();
    for seed in 0..opts.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(2_000 + seed);
        let mask = random_two_tooth_mask(&mut rng);
        let target = TopoTarget::new(&mask);
        let x = random_logits(&mut rng, &mask);
        let probs = logit_map(mask.dims(), &x).softmax();
        let g = hole_loss(&probs, &target, tau).expect("valid inputs").grad;
        let mut analytic = softmax_vjp(&probs, &g);
        corrupt(&mut analytic, Term::Hole, opts);
        tally.compare(seed, &x, &analytic, opts.step, |z| {
            let p = logit_map(mask.dims(), z).softmax();
            let v = hole_loss(&p, &target, tau).expect("valid inputs").value;
            (v, hole_sig(&p, &target, tau))
        });
    }
    tally.report(Term::Hole, opts)
}

/// Straight-through composition: `sum c * clamp(x) + ||x - Q||^2` with the
/// quantised copy held fixed, against the clipped straight-through backward
/// plus the regulariser gradient.
fn suite_quant(opts: &GradcheckOptions) -> TermReport {
    let mut tally = Tally::default();
    for seed in 0..opts.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(3_000 + seed);
        let channels = 4;
        let n = 64;
        let scheme = if seed % 2 == 0 {
            QuantScheme::per_channel((0..channels).map(|_| rng.gen_range(0.005..0.02)).collect())
        } else {
            QuantScheme::per_tensor(rng.gen_range(0.005..0.02))
        };
        let x: Vec<f64> = (0..n)
            .map(|i| {
                let s = scheme.scale_at(i, n);
                rng.gen_range(-1.3..1.3) * 127.0 * s
            })
            .collect();
        let c: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let frozen = quantize(&x, &scheme).expect("finite");
        let mut analytic = ste_backward(&c, &x, &scheme).expect("finite");
        for ((a, &xi), &q) in analytic.iter_mut().zip(&x).zip(&frozen) {
            *a += 2.0 * (xi - q);
        }
        corrupt(&mut analytic, Term::Quant, opts);
        tally.compare(seed, &x, &analytic, opts.step, |z| {
            let mut value = 0.0;
            let mut sig = Vec::with_capacity(n);
            for i in 0..n {
                let s = scheme.scale_at(i, n);
                value += c[i] * z[i].clamp(-127.0 * s, 127.0 * s) + (z[i] - frozen[i]).powi(2);
                sig.push(in_range(z[i], s));
            }
            (value, sig)
        });
    }
    tally.report(Term::Quant, opts)
}

fn suite_cross_entropy(opts: &GradcheckOptions) -> TermReport {
    let mut tally = Tally::default();
    for seed in 0..opts.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(4_000 + seed);
        let mask = random_two_tooth_mask(&mut rng);
        let x = random_logits(&mut rng, &mask);
        let mut analytic = cross_entropy_logits(&logit_map(mask.dims(), &x), &mask).grad;
        corrupt(&mut analytic, Term::CrossEntropy, opts);
        tally.compare(seed, &x, &analytic, opts.step, |z| {
            (cross_entropy_logits(&logit_map(mask.dims(), z), &mask).value, ())
        });
    }
    tally.report(Term::CrossEntropy, opts)
}

fn shrink(schemes: &[QuantScheme], factor: f64) -> Vec<QuantScheme> {
    schemes
        .iter()
        .map(|s| QuantScheme {
            scales: s.scales.iter().map(|v| v * factor).collect(),
            ..s.clone()
        })
        .collect()
}

#[derive(PartialEq)]
struct NetSig {
    count: CountSig,
    holes: HoleSig,
    adjacency: Vec<i8>,
    clamps: Vec<Vec<bool>>,
    relu: Vec<Vec<bool>>,
}

/// The full objective through a two-layer quantised network, with frozen
/// quantisation scales and targets and the rounding replaced by clamping so
/// the forward map is exactly the one the straight-through backward
/// differentiates.
fn suite_total(opts: &GradcheckOptions) -> TermReport {
    let topo = TopoLossWeights::default();
    let (alpha, beta) = (0.01, 0.1);
    let weights = ObjectiveWeights {
        alpha,
        beta,
        topo: &topo,
    };
    let mut tally = Tally::default();
    for seed in 0..opts.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(5_000 + seed);
        let mask = random_two_tooth_mask(&mut rng);
        let dims = mask.dims();
        let target = TopoTarget::new(&mask);
        let volume = Volume3D::new(
            dims,
            mask.labels()
                .iter()
                .map(|&l| (l > 0) as u8 as f64 + rng.gen_range(-0.5..0.5))
                .collect(),
        )
        .expect("finite");
        let mut cfg = NetConfig::new(TEETH, dims);
        cfg.widths = vec![3, TEETH as usize + 1];
        cfg.seed = rng.gen();
        let base = Net::new(cfg).expect("valid config");

        let mut cals = base.calibrators.clone();
        let warm = evaluate_objective(
            &base,
            &volume,
            &mask,
            None,
            weights,
            Some(QuantPlan {
                weights: None,
                acts: ActScales::Update(&mut cals),
                round: true,
            }),
            None,
        )
        .expect("valid shapes");
        // Slightly narrower ranges so some values clip, and none sits exactly
        // on the clamp edge.
        let w_schemes = shrink(&warm.weight_schemes, 0.9);
        let a_schemes = shrink(&warm.act_schemes, 0.9);
        let plan = || QuantPlan {
            weights: Some(&w_schemes),
            acts: ActScales::Fixed(&a_schemes),
            round: false,
        };
        let frozen = evaluate_objective(&base, &volume, &mask, None, weights, Some(plan()), None)
            .expect("valid shapes")
            .quant_targets;

        let shapes: Vec<usize> = base.params.iter().map(Vec::len).collect();
        let unflatten = |flat: &[f64]| {
            let mut net = base.clone();
            let mut at = 0;
            for (p, &n) in net.params.iter_mut().zip(&shapes) {
                p.copy_from_slice(&flat[at..at + n]);
                at += n;
            }
            net
        };
        let x: Vec<f64> = base.params.concat();
        let objective = |net: &Net| {
            let eval = evaluate_objective(net, &volume, &mask, Some(&target), weights, Some(plan()), Some(&frozen))
                .expect("valid shapes");
            let probs = eval.logits.softmax();
            let (surrogate, count) = count_surrogate(&probs, target.component_count(), topo.tau_t);
            let l_count = eval.topo.as_ref().map_or(0.0, |r| r.l_count);
            let value = eval.losses.total + beta * topo.lambda1 * (surrogate - l_count);
            let sig_net = signature(net, &volume, &w_schemes, &a_schemes);
            let sig = NetSig {
                count,
                holes: hole_sig(&probs, &target, topo.tau_h),
                adjacency: adjacency_signs(&eval.logits, &target.mask, &target.adjacency, &target.faces, topo.kappa),
                clamps: sig_net.0,
                relu: sig_net.1,
            };
            (value, sig, eval.grads)
        };
        let mut analytic: Vec<f64> = objective(&base).2.concat();
        corrupt(&mut analytic, Term::Total, opts);
        tally.compare(seed, &x, &analytic, opts.step, |z| {
            let (v, s, _) = objective(&unflatten(z));
            (v, s)
        });
    }
    tally.report(Term::Total, opts)
}

/// Clamp and LeakyReLU branch patterns of a frozen-scheme forward pass.
fn signature(net: &Net, x: &Volume3D, w: &[QuantScheme], a: &[QuantScheme]) -> (Vec<Vec<bool>>, Vec<Vec<bool>>) {
    let mut tape = Tape::new();
    let fwd = net
        .forward(
            &mut tape,
            x,
            Some(QuantPlan {
                weights: Some(w),
                acts: ActScales::Fixed(a),
                round: false,
            }),
        )
        .expect("valid shapes");
    let clamps = fwd
        .taps
        .iter()
        .enumerate()
        .map(|(t, tap)| {
            let scheme = if t % 2 == 0 { &w[t / 2] } else { &a[t / 2] };
            let v = tape.value(tap.var);
            v.iter()
                .enumerate()
                .map(|(i, &vi)| in_range(vi, scheme.scale_at(i, v.len())))
                .collect()
        })
        .collect();
    let relu = fwd
        .pre_activations
        .iter()
        .map(|&p| tape.value(p).iter().map(|&v| v > 0.0).collect())
        .collect();
    (clamps, relu)
}

/// Run the requested suites (all when `terms` is empty).
pub fn run_gradcheck(opts: &GradcheckOptions, terms: &[Term]) -> GradcheckReport {
    let selected: Vec<Term> = if terms.is_empty() {
        Term::ALL.to_vec()
    } else {
        terms.to_vec()
    };
    let terms = selected
        .into_iter()
        .map(|t| match t {
            Term::Count => suite_count(opts),
            Term::Adjacency => suite_adjacency(opts),
            Term::Hole => suite_hole(opts),
            Term::Quant => suite_quant(opts),
            Term::CrossEntropy => suite_cross_entropy(opts),
            Term::Total => suite_total(opts),
        })
        .collect();
    GradcheckReport {
        step: opts.step,
        tolerance: opts.tolerance,
        terms,
    }
}
