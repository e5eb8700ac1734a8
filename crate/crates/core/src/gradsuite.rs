//! Randomised finite-difference checks over every tape operation and every
//! loss. Inputs are drawn away from the points where a one-sided derivative
//! is used (ReLU and clamp kinks, the hinge boundary, zero distance).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::{analytic_gradient, max_relative_error, numeric_gradient, DEFAULT_STEP};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;
use crate::losses::{
    contrastive_sim_loss, pair_weights, view_confusion_loss, view_disc_loss, weighted_sim_loss, LossConfig,
};

pub const TOLERANCE: f64 = 1e-5;
pub const MIN_INSTANCES: usize = 20;

type LossFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub struct Instance {
    pub params: Vec<Tensor>,
    pub f: LossFn,
}

pub struct Target {
    pub name: &'static str,
    build: fn(&mut ChaCha8Rng) -> Instance,
}

impl Target {
    pub fn instance(&self, rng: &mut ChaCha8Rng) -> Instance {
        (self.build)(rng)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetResult {
    pub name: &'static str,
    pub instances: usize,
    /// Instances drawn, including the redrawn ill-conditioned ones.
    pub draws: usize,
    pub max_rel_error: f64,
}

impl TargetResult {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

/// Max relative error between tape and central-difference gradients. With
/// `corrupt` the tape gradient of the first parameter is perturbed first,
/// which a working check must flag.
pub fn check_instance(inst: &Instance, corrupt: bool) -> Result<f64> {
    let (_, mut analytic) = analytic_gradient(&inst.f, &inst.params)?;
    if corrupt {
        for v in analytic[0].data_mut() {
            *v = *v * 1.01 + 1e-3;
        }
    }
    let numeric = numeric_gradient(&inst.f, &inst.params, DEFAULT_STEP)?;
    Ok(max_relative_error(&analytic, &numeric))
}

/// Nonzero gradient coordinates smaller than this are within a few orders
/// of the central-difference roundoff (about `1e-16 / step`), where a
/// relative error says nothing about the tape. Instances containing one are
/// redrawn, like instances near a kink.
pub const MIN_GRADIENT: f64 = 1e-4;
const MAX_DRAWS: usize = 1000;

fn well_conditioned(inst: &Instance) -> Result<bool> {
    let (_, g) = analytic_gradient(&inst.f, &inst.params)?;
    Ok(g.iter()
        .flat_map(|t| t.data())
        .all(|v| *v == 0.0 || v.abs() >= MIN_GRADIENT))
}

pub fn run_target(target: &Target, instances: usize, seed: u64, corrupt: bool) -> Result<TargetResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut accepted = 0;
    let mut draws = 0;
    while accepted < instances && draws < MAX_DRAWS {
        draws += 1;
        let inst = target.instance(&mut rng);
        if well_conditioned(&inst)? {
            worst = worst.max(check_instance(&inst, corrupt)?);
            accepted += 1;
        }
    }
    if accepted < instances {
        return Err(crate::Error::Contract(format!(
            "{}: only {accepted} of {instances} instances usable after {MAX_DRAWS} draws",
            target.name
        )));
    }
    Ok(TargetResult {
        name: target.name,
        instances,
        draws,
        max_rel_error: worst,
    })
}

pub fn run_all(instances: usize, seed: u64, corrupt: bool) -> Result<Vec<TargetResult>> {
    targets()
        .iter()
        .enumerate()
        .map(|(i, t)| run_target(t, instances, seed.wrapping_add(i as u64), corrupt))
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("sized")
}

/// Values with magnitude in `[gap, 1]` and random sign, away from zero.
fn off_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>, gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(gap..1.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape, data).expect("sized")
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..=4), rng.random_range(1..=4))
}

/// `sum(y * c)` for a fixed random `c`, so every output coordinate carries
/// a distinct upstream gradient.
fn weighted_sum(t: &mut Tape, y: Var, c: &Tensor) -> Result<Var> {
    let c = t.constant(c.clone());
    let p = t.mul(y, c)?;
    Ok(t.sum(p))
}

fn probe_for(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    off_zero(rng, shape.to_vec(), 0.5)
}

macro_rules! unary {
    ($rng:ident, $x:expr, |$t:ident, $v:ident| $body:expr) => {{
        let x: Tensor = $x;
        let mut t0 = Tape::new();
        let vx = t0.constant(x.clone());
        let shape = (|| -> Result<Vec<usize>> {
            let $t = &mut t0;
            let $v = vx;
            let out: Var = $body;
            Ok($t.value(out).shape().to_vec())
        })()
        .expect("well-formed instance");
        let c = probe_for($rng, &shape);
        Instance {
            params: vec![x],
            f: Box::new(move |$t: &mut Tape, vs: &[Var]| {
                let $v = vs[0];
                let y = $body;
                weighted_sum($t, y, &c)
            }),
        }
    }};
}

macro_rules! binary {
    ($rng:ident, $a:expr, $b:expr, |$t:ident, $x:ident, $y:ident| $body:expr) => {{
        let a: Tensor = $a;
        let b: Tensor = $b;
        let mut t0 = Tape::new();
        let (va, vb) = (t0.constant(a.clone()), t0.constant(b.clone()));
        let shape = (|| -> Result<Vec<usize>> {
            let $t = &mut t0;
            let ($x, $y) = (va, vb);
            let out: Var = $body;
            Ok($t.value(out).shape().to_vec())
        })()
        .expect("well-formed instance");
        let c = probe_for($rng, &shape);
        Instance {
            params: vec![a, b],
            f: Box::new(move |$t: &mut Tape, vs: &[Var]| {
                let ($x, $y) = (vs[0], vs[1]);
                let out = $body;
                weighted_sum($t, out, &c)
            }),
        }
    }};
}

fn op_matmul(rng: &mut ChaCha8Rng) -> Instance {
    let (r, k) = dims(rng);
    let c = rng.random_range(1..=4);
    binary!(rng, uniform(rng, vec![r, k], -1.0, 1.0), uniform(rng, vec![k, c], -1.0, 1.0), |t, a, b| t.matmul(a, b)?)
}

fn op_add(rng: &mut ChaCha8Rng) -> Instance {
    let (r, c) = dims(rng);
    binary!(rng, uniform(rng, vec![r, c], -1.0, 1.0), uniform(rng, vec![r, c], -1.0, 1.0), |t, a, b| t.add(a, b)?)
}

fn op_sub(rng: &mut ChaCha8Rng) -> Instance {
    let (r, c) = dims(rng);
    binary!(rng, uniform(rng, vec![r, c], -1.0, 1.0), uniform(rng, vec![r, c], -1.0, 1.0), |t, a, b| t.sub(a, b)?)
}

fn op_mul(rng: &mut ChaCha8Rng) -> Instance {
    let (r, c) = dims(rng);
    binary!(rng, off_zero(rng, vec![r, c], 0.1), off_zero(rng, vec![r, c], 0.1), |t, a, b| t.mul(a, b)?)
}

fn op_add_bias(rng: &mut ChaCha8Rng) -> Instance {
    let (r, c) = dims(rng);
    binary!(rng, uniform(rng, vec![r, c], -1.0, 1.0), uniform(rng, vec![c], -1.0, 1.0), |t, a, b| t.add_bias(a, b)?)
}

fn op_scalar_mul(rng: &mut ChaCha8Rng) -> Instance {
    let (r, c) = dims(rng);
    let s = rng.random_range(-3.0..3.0);
    unary!(rng, uniform(rng, vec![r, c], -1.0, 1.0), |t, x| t.scalar_mul(x, s))
}

fn op_add_scalar(rng: &mut ChaCha8Rng) -> Instance {
    let (r, c) = dims(rng);
    let s = rng.random_range(-3.0..3.0);
    unary!(rng, uniform(rng, vec![r, c], -1.0, 1.0), |t, x| t.add_scalar(x, s))
}

fn op_neg(rng: &mut ChaCha8Rng) -> Instance {
    let (r, c) = dims(rng);
    unary!(rng, uniform(rng, vec![r, c], -1.0, 1.0), |t, x| t.neg(x))
}

fn op_square(rng: &mut ChaCha8Rng) -> Instance {
    let (r, c) = dims(rng);
    unary!(rng, off_zero(rng, vec![r, c], 0.1), |t, x| t.square(x))
}

fn op_sqrt(rng: &mut ChaCha8Rng) -> Instance {
    let (r, c) = dims(rng);
    unary!(rng, uniform(rng, vec![r, c], 0.2, 3.0), |t, x| t.sqrt(x)?)
}

fn op_log(rng: &mut ChaCha8Rng) -> Instance {
    let (r, c) = dims(rng);
    unary!(rng, uniform(rng, vec![r, c], 0.2, 3.0), |t, x| t.log(x)?)
}

fn op_relu(rng: &mut ChaCha8Rng) -> Instance {
    let (r, c) = dims(rng);
    unary!(rng, off_zero(rng, vec![r, c], 0.05), |t, x| t.relu(x))
}

fn op_logistic(rng: &mut ChaCha8Rng) -> Instance {
    let (r, c) = dims(rng);
    unary!(rng, uniform(rng, vec![r, c], -4.0, 4.0), |t, x| t.logistic(x))
}

fn op_clamp(rng: &mut ChaCha8Rng) -> Instance {
    let (r, c) = dims(rng);
    // bounds at +-0.5, inputs kept 0.05 away from both
    let mut x = uniform(rng, vec![r, c], -1.0, 1.0);
    for v in x.data_mut() {
        if (v.abs() - 0.5).abs() < 0.05 {
            *v += 0.1_f64.copysign(*v);
        }
    }
    unary!(rng, x, |t, x| t.clamp(x, -0.5, 0.5))
}

fn op_sum(rng: &mut ChaCha8Rng) -> Instance {
    let (r, c) = dims(rng);
    let x = uniform(rng, vec![r, c], -1.0, 1.0);
    let s = rng.random_range(0.5..2.0);
    Instance {
        params: vec![x],
        f: Box::new(move |t: &mut Tape, v: &[Var]| {
            let y = t.sum(v[0]);
            let y = t.square(y);
            Ok(t.scalar_mul(y, s))
        }),
    }
}

fn op_mean(rng: &mut ChaCha8Rng) -> Instance {
    let (r, c) = dims(rng);
    let x = uniform(rng, vec![r, c], -1.0, 1.0);
    Instance {
        params: vec![x],
        f: Box::new(|t: &mut Tape, v: &[Var]| {
            let y = t.mean(v[0]);
            let y = t.add_scalar(y, 1.5);
            Ok(t.square(y))
        }),
    }
}

fn op_concat(rng: &mut ChaCha8Rng) -> Instance {
    let r = rng.random_range(1..=3);
    let (ca, cb) = dims(rng);
    binary!(rng, uniform(rng, vec![r, ca], -1.0, 1.0), uniform(rng, vec![r, cb], -1.0, 1.0), |t, a, b| t.concat(&[a, b])?)
}

fn op_gather_rows(rng: &mut ChaCha8Rng) -> Instance {
    let (r, c) = dims(rng);
    let n = rng.random_range(1..=6);
    // repeats on purpose: gradients must accumulate
    let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..r)).collect();
    unary!(rng, uniform(rng, vec![r, c], -1.0, 1.0), |t, x| t.gather_rows(x, &rows)?)
}

fn op_euclidean_distance(rng: &mut ChaCha8Rng) -> Instance {
    let k = rng.random_range(1..=5);
    let u = uniform(rng, vec![k], -1.0, 1.0);
    let mut v = uniform(rng, vec![k], -1.0, 1.0);
    v.data_mut()[0] = u.data()[0] + 0.5;
    let s = rng.random_range(0.5..2.0);
    Instance {
        params: vec![u, v],
        f: Box::new(move |t: &mut Tape, p: &[Var]| {
            let d = t.euclidean_distance(p[0], p[1])?;
            Ok(t.scalar_mul(d, s))
        }),
    }
}

fn op_pairwise_distances(rng: &mut ChaCha8Rng) -> Instance {
    let (r, c) = dims(rng);
    let k = rng.random_range(1..=4);
    // distinct first coordinates keep every distance positive
    let mut a = uniform(rng, vec![r, k], -1.0, 1.0);
    let mut b = uniform(rng, vec![c, k], -1.0, 1.0);
    for i in 0..r {
        a.data_mut()[i * k] = i as f64;
    }
    for j in 0..c {
        b.data_mut()[j * k] = j as f64 + 0.5 + r as f64;
    }
    binary!(rng, a, b, |t, x, y| t.pairwise_distances(x, y)?)
}

/// Anchors `n x k`, candidates `n x k`, identity labels (pair `(i, i)` is
/// positive), with every negative kept off the hinge boundary.
fn embedding_batch(rng: &mut ChaCha8Rng, margin: f64) -> (Tensor, Tensor, Tensor) {
    loop {
        let n = rng.random_range(2..=4);
        let k = rng.random_range(2..=4);
        let a = uniform(rng, vec![n, k], -1.5, 1.5);
        let b = uniform(rng, vec![n, k], -1.5, 1.5);
        let labels = Tensor::identity(n);
        let mut t = Tape::new();
        let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
        let d = t.pairwise_distances(va, vb).expect("shapes");
        let ok = t.value(d).data().iter().all(|d| *d > 1e-2 && (margin - d).abs() > 1e-2);
        if ok {
            return (a, b, labels);
        }
    }
}

fn loss_view_disc(rng: &mut ChaCha8Rng) -> Instance {
    let (ns, nt) = dims(rng);
    Instance {
        params: vec![uniform(rng, vec![ns], -3.0, 3.0), uniform(rng, vec![nt], -3.0, 3.0)],
        f: Box::new(|t: &mut Tape, v: &[Var]| {
            let ps = t.logistic(v[0]);
            let pt = t.logistic(v[1]);
            view_disc_loss(t, ps, pt)
        }),
    }
}

fn loss_view_confusion(rng: &mut ChaCha8Rng) -> Instance {
    let (ns, nt) = dims(rng);
    Instance {
        params: vec![uniform(rng, vec![ns], -3.0, 3.0), uniform(rng, vec![nt], -3.0, 3.0)],
        f: Box::new(|t: &mut Tape, v: &[Var]| {
            let ps = t.logistic(v[0]);
            let pt = t.logistic(v[1]);
            view_confusion_loss(t, &[ps, pt])
        }),
    }
}

/// Similarity scores from a one-hidden-layer scorer over concatenated
/// pairs, so the check reaches the scorer weights as well.
fn pair_scores(t: &mut Tape, a: Var, b: Var, w1: Var, w2: Var, pairs: &[(usize, usize)]) -> Result<Var> {
    let ia: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let ib: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let ga = t.gather_rows(a, &ia)?;
    let gb = t.gather_rows(b, &ib)?;
    let x = t.concat(&[ga, gb])?;
    let h = t.matmul(x, w1)?;
    let h = t.relu(h);
    let o = t.matmul(h, w2)?;
    Ok(t.logistic(o))
}

fn scorer(rng: &mut ChaCha8Rng, a: &Tensor, b: &Tensor, pairs: &[(usize, usize)]) -> (Tensor, Tensor) {
    // resample until no hidden pre-activation sits near the ReLU kink
    let k = a.cols();
    loop {
        let w1 = uniform(rng, vec![2 * k, 4], -1.0, 1.0);
        let w2 = uniform(rng, vec![4, 1], -1.0, 1.0);
        let mut t = Tape::new();
        let (va, vb, v1) = (t.constant(a.clone()), t.constant(b.clone()), t.constant(w1.clone()));
        let ia: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let ib: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let ga = t.gather_rows(va, &ia).expect("rows");
        let gb = t.gather_rows(vb, &ib).expect("rows");
        let x = t.concat(&[ga, gb]).expect("rows");
        let h = t.matmul(x, v1).expect("shapes");
        if t.value(h).data().iter().all(|v| v.abs() > 1e-3) {
            return (w1, w2);
        }
    }
}

fn contrastive(rng: &mut ChaCha8Rng, full_bce: bool) -> Instance {
    let cfg = LossConfig {
        full_bce_sim: full_bce,
        gamma: rng.random_range(0.5..3.0),
        ..Default::default()
    };
    let (a, b, labels) = embedding_batch(rng, cfg.margin);
    let n = a.rows();
    let pos: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
    let neg: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).filter(move |j| *j != i).map(move |j| (i, j))).collect();
    let all: Vec<(usize, usize)> = pos.iter().chain(&neg).copied().collect();
    let (w1, w2) = scorer(rng, &a, &b, &all);
    Instance {
        params: vec![a, b, w1, w2],
        f: Box::new(move |t: &mut Tape, v: &[Var]| {
            let d = t.pairwise_distances(v[0], v[1])?;
            let ps = pair_scores(t, v[0], v[1], v[2], v[3], &pos)?;
            let ns = if full_bce {
                Some(pair_scores(t, v[0], v[1], v[2], v[3], &neg)?)
            } else {
                None
            };
            contrastive_sim_loss(t, d, &labels, ps, ns, &cfg)
        }),
    }
}

fn loss_contrastive(rng: &mut ChaCha8Rng) -> Instance {
    contrastive(rng, false)
}

fn loss_contrastive_full_bce(rng: &mut ChaCha8Rng) -> Instance {
    contrastive(rng, true)
}

fn weighted(rng: &mut ChaCha8Rng, literal: bool) -> Instance {
    let cfg = LossConfig {
        eq5_literal: literal,
        gamma: rng.random_range(0.5..3.0),
        ..Default::default()
    };
    let (a, b, labels) = loop {
        let (a, b, labels) = embedding_batch(rng, cfg.margin);
        if !literal {
            break (a, b, labels);
        }
        // the literal form hinges on m - w d; keep that off zero too
        let mut t = Tape::new();
        let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
        let d = t.pairwise_distances(va, vb).expect("shapes");
        let w = pair_weights(t.value(d), &labels, true).expect("positives");
        let n = a.rows();
        let dv = t.value(d).data().to_vec();
        let clear = (0..n * n).all(|i| labels.data()[i] > 0.5 || (cfg.margin - w.neg.data()[i] * dv[i]).abs() > 1e-2);
        if clear {
            break (a, b, labels);
        }
    };
    let n = a.rows();
    let pos: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
    let (w1, w2) = scorer(rng, &a, &b, &pos);
    let symmetric = rng.random_bool(0.5);
    // the weights are constants of the loss, fixed at the base point
    let mut t = Tape::new();
    let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
    let d = t.pairwise_distances(va, vb).expect("shapes");
    let rows = pair_weights(t.value(d), &labels, true).expect("positives");
    let cols = symmetric.then(|| pair_weights(t.value(d), &labels, false).expect("positives"));
    Instance {
        params: vec![a, b, w1, w2],
        f: Box::new(move |t: &mut Tape, v: &[Var]| {
            let d = t.pairwise_distances(v[0], v[1])?;
            let ps = pair_scores(t, v[0], v[1], v[2], v[3], &pos)?;
            weighted_sim_loss(t, d, &labels, ps, &rows, cols.as_ref(), &cfg)
        }),
    }
}

fn loss_weighted(rng: &mut ChaCha8Rng) -> Instance {
    weighted(rng, false)
}

fn loss_weighted_literal(rng: &mut ChaCha8Rng) -> Instance {
    weighted(rng, true)
}

pub fn targets() -> Vec<Target> {
    macro_rules! t {
        ($name:literal, $f:ident) => {
            Target { name: $name, build: $f }
        };
    }
    vec![
        t!("matmul", op_matmul),
        t!("add", op_add),
        t!("sub", op_sub),
        t!("mul", op_mul),
        t!("add_bias", op_add_bias),
        t!("scalar_mul", op_scalar_mul),
        t!("add_scalar", op_add_scalar),
        t!("neg", op_neg),
        t!("square", op_square),
        t!("sqrt", op_sqrt),
        t!("log", op_log),
        t!("relu", op_relu),
        t!("logistic", op_logistic),
        t!("clamp", op_clamp),
        t!("sum", op_sum),
        t!("mean", op_mean),
        t!("concat", op_concat),
        t!("gather_rows", op_gather_rows),
        t!("euclidean_distance", op_euclidean_distance),
        t!("pairwise_distances", op_pairwise_distances),
        t!("loss:view_disc", loss_view_disc),
        t!("loss:contrastive", loss_contrastive),
        t!("loss:contrastive_full_bce", loss_contrastive_full_bce),
        t!("loss:view_confusion", loss_view_confusion),
        t!("loss:adaptive_weighted", loss_weighted),
        t!("loss:adaptive_weighted_literal", loss_weighted_literal),
    ]
}
