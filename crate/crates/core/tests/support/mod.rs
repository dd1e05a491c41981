//! Scalar-loop oracles and seeded instance suites shared by the integration
//! and acceptance tests.
#![allow(dead_code)]

use hkd_core::contrastive::{self, BankOwner, BankSide, MemoryBank};
use hkd_core::distill::{vanilla_kd_loss, vanilla_kd_with_grad};
use hkd_core::encoder::{self, EncoderWeights, HolisticEmbedding};
use hkd_core::graph::{self, PredictionBatch};
use hkd_core::Matrix;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

pub fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> HolisticEmbedding {
    HolisticEmbedding::normalize(&gaussian(rng, rows, cols))
}

fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.outer_iter().map(|r| r.to_vec()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = dot(v, v).sqrt();
    v.iter().map(|x| x / n).collect()
}

fn softmax(z: &[f64], tau: f64) -> Vec<f64> {
    let mut m = f64::NEG_INFINITY;
    for &v in z {
        m = m.max(v / tau);
    }
    let e: Vec<f64> = z.iter().map(|v| (v / tau - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// `−(1/b) Σ_i [ s_ii/τ − ln((1/b) Σ_j e^{s_ij/τ}) ]`, one term at a time.
pub fn infonce_in_batch_oracle(t: &Matrix, s: &Matrix, tau: f64) -> f64 {
    let (t, s) = (to_rows(t), to_rows(s));
    let b = t.len();
    let mut total = 0.0;
    for i in 0..b {
        let mut denom = 0.0;
        for j in 0..b {
            denom += (dot(&t[i], &s[j]) / tau).exp();
        }
        total += dot(&t[i], &s[i]) / tau - (denom / b as f64).ln();
    }
    -total / b as f64
}

/// Symmetric bank objective with every other bank row as a negative. Bank rows
/// are mapped into the embedding space by `normalize(row · Θ_0)` of the bank
/// owner's projector.
pub fn infonce_bank_oracle(
    t: &Matrix,
    s: &Matrix,
    teacher_bank: &Matrix,
    student_bank: &Matrix,
    teacher_theta0: &Matrix,
    student_theta0: &Matrix,
    indices: &[usize],
    tau: f64,
) -> f64 {
    let project = |bank: &Matrix, theta: &Matrix| -> Vec<Vec<f64>> {
        let (n, d) = bank.dim();
        let g = theta.ncols();
        (0..n)
            .map(|r| {
                let mut out = vec![0.0; g];
                for c in 0..g {
                    for k in 0..d {
                        out[c] += bank[[r, k]] * theta[[k, c]];
                    }
                }
                normalized(&out)
            })
            .collect()
    };
    let tb = project(teacher_bank, teacher_theta0);
    let sb = project(student_bank, student_theta0);
    let (t, s) = (to_rows(t), to_rows(s));
    let b = t.len();
    let direction = |anchor: &[Vec<f64>], positive: &[Vec<f64>], negatives: &[Vec<f64>]| {
        let mut sum = 0.0;
        for i in 0..b {
            let pos = (dot(&anchor[i], &positive[i]) / tau).exp();
            let mut denom = pos;
            for (j, row) in negatives.iter().enumerate() {
                if j != indices[i] {
                    denom += (dot(&anchor[i], row) / tau).exp();
                }
            }
            sum += (pos / denom).ln();
        }
        -sum / b as f64
    };
    direction(&t, &s, &sb) + direction(&s, &t, &tb)
}

/// `τ² · (1/b) Σ_i Σ_c p^s_ic (ln p^s_ic − ln p^t_ic)`.
pub fn kd_oracle(student: &Matrix, teacher: &Matrix, tau: f64) -> f64 {
    let (zs, zt) = (to_rows(student), to_rows(teacher));
    let mut total = 0.0;
    for i in 0..zs.len() {
        let (p, q) = (softmax(&zs[i], tau), softmax(&zt[i], tau));
        for c in 0..p.len() {
            total += p[c] * (p[c].ln() - q[c].ln());
        }
    }
    tau * tau * total / zs.len() as f64
}

pub fn normalize_adjacency_oracle(a: &Matrix) -> Matrix {
    let b = a.nrows();
    let mut deg = vec![0.0; b];
    for i in 0..b {
        for j in 0..b {
            deg[i] += a[[i, j]];
        }
    }
    let mut out = Array2::zeros((b, b));
    for i in 0..b {
        for j in 0..b {
            if a[[i, j]] != 0.0 {
                out[[i, j]] = a[[i, j]] / deg[i].sqrt() / deg[j].sqrt();
            }
        }
    }
    out
}

/// Selection by repeated scanning: the most similar unpicked node, lowest
/// index on ties, `k` times per row; then OR-symmetrization.
pub fn knn_adjacency_oracle(p: &Matrix, k: usize) -> Matrix {
    let rows = to_rows(p);
    let b = rows.len();
    let mut a = Array2::zeros((b, b));
    for i in 0..b {
        let mut picked = vec![false; b];
        picked[i] = true;
        for _ in 0..k {
            let mut best: Option<(usize, f64)> = None;
            for j in 0..b {
                if picked[j] {
                    continue;
                }
                let c = dot(&rows[i], &rows[j]) / (dot(&rows[i], &rows[i]).sqrt() * dot(&rows[j], &rows[j]).sqrt());
                if best.is_none_or(|(_, bc)| c > bc) {
                    best = Some((j, c));
                }
            }
            let (j, _) = best.expect("k < b");
            picked[j] = true;
            a[[i, j]] = 1.0;
            a[[j, i]] = 1.0;
        }
    }
    a
}

fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Worst absolute deviation from the oracle per function, over `instances`
/// seeded draws with `b ≤ 8`.
pub fn oracle_suite(instances: u64) -> Vec<(&'static str, f64)> {
    let mut worst = [0.0f64; 5];
    for seed in 0..instances {
        let mut r = rng(1000 + seed);
        let b = r.random_range(2..=8);
        let g = r.random_range(2..=6);
        let tau = r.random_range(0.05..1.0);

        let t = unit_rows(&mut r, b, g);
        let s = unit_rows(&mut r, b, g);
        let got = contrastive::infonce_in_batch(&t, &s, tau).unwrap().loss;
        worst[0] = worst[0].max((got - infonce_in_batch_oracle(&t.vectors, &s.vectors, tau)).abs());

        let n = b + r.random_range(1..=6);
        let (dt, ds) = (r.random_range(2..=5), r.random_range(2..=5));
        let tb = MemoryBank::random(n, dt, 0.5, BankOwner::Teacher, &mut r).unwrap();
        let sb = MemoryBank::random(n, ds, 0.5, BankOwner::Student, &mut r).unwrap();
        let wt = EncoderWeights::random(dt, g, 0, &mut r);
        let ws = EncoderWeights::random(ds, g, 0, &mut r);
        let mut pool: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(pool.as_mut_slice(), &mut r);
        let indices = &pool[..b];
        let negatives = contrastive::sample_negatives(n, indices, n - 1, &mut r).unwrap();
        let got = contrastive::infonce_with_bank(
            &t,
            &s,
            BankSide { bank: &tb, projector: Some(&wt) },
            BankSide { bank: &sb, projector: Some(&ws) },
            indices,
            &negatives,
            tau,
        )
        .unwrap()
        .result
        .loss;
        let want = infonce_bank_oracle(&t.vectors, &s.vectors, tb.entries(), sb.entries(), &wt.hops[0], &ws.hops[0], indices, tau);
        worst[1] = worst[1].max((got - want).abs());

        let classes = r.random_range(2..=10);
        let kd_tau = r.random_range(0.5..8.0);
        let zs = gaussian(&mut r, b, classes) * 3.0;
        let zt = gaussian(&mut r, b, classes) * 3.0;
        let got = vanilla_kd_loss(
            &PredictionBatch::new(zs.clone(), kd_tau).unwrap(),
            &PredictionBatch::new(zt.clone(), kd_tau).unwrap(),
        )
        .unwrap();
        worst[2] = worst[2].max((got - kd_oracle(&zs, &zt, kd_tau)).abs());

        let mut a: Matrix = Array2::zeros((b, b));
        for i in 0..b {
            for j in i + 1..b {
                if r.random_bool(0.5) {
                    let w = r.random_range(0.1..2.0);
                    a[[i, j]] = w;
                    a[[j, i]] = w;
                }
            }
            let j = (i + 1) % b;
            if a[[i, j]] == 0.0 {
                a[[i, j]] = 1.0;
                a[[j, i]] = 1.0;
            }
        }
        let got = graph::normalize_adjacency(&a).unwrap();
        worst[3] = worst[3].max(max_abs_diff(&got, &normalize_adjacency_oracle(&a)));

        let k = r.random_range(1..b);
        let logits = gaussian(&mut r, b, classes) * 2.0;
        let p = graph::softmax_with_temperature(&logits.view(), 1.0).unwrap();
        let got = graph::build_knn_adjacency(&p.view(), k).unwrap();
        worst[4] = worst[4].max(max_abs_diff(&got, &knn_adjacency_oracle(&p, k)));
    }
    vec![
        ("infonce_in_batch", worst[0]),
        ("infonce_with_bank (all negatives)", worst[1]),
        ("vanilla_kd_loss", worst[2]),
        ("normalize_adjacency", worst[3]),
        ("build_knn_adjacency", worst[4]),
    ]
}

/// Worst deviation of the two reductions over `instances` draws with `b ≤ 16`:
/// `(L = 0 vs project_features, identity graph L = 1 vs normalize(F(Θ0+Θ1)))`.
pub fn reduction_suite(instances: u64) -> (f64, f64) {
    let (mut zero_hop, mut diag) = (0.0f64, 0.0f64);
    for seed in 0..instances {
        let mut r = rng(5000 + seed);
        let b = r.random_range(2..=16);
        let d = r.random_range(1..=12);
        let g = r.random_range(1..=12);
        let f = gaussian(&mut r, b, d);
        let w = EncoderWeights::random(d, g, 1, &mut r);
        let mut a: Matrix = Array2::zeros((b, b));
        for i in 0..b {
            for j in i + 1..b {
                if r.random_bool(0.4) {
                    a[[i, j]] = 1.0;
                    a[[j, i]] = 1.0;
                }
            }
            a[[i, i]] = 1.0;
        }
        let a_hat = graph::normalize_adjacency(&a).unwrap();
        let w0 = EncoderWeights::new(vec![w.hops[0].clone()]).unwrap();
        let h = encoder::tagcn_forward(&a_hat, &f, &w0, 0).unwrap();
        let p = encoder::project_features(&f, &w0).unwrap();
        zero_hop = zero_hop.max(max_abs_diff(&h.vectors, &p.vectors));

        let mut diag_a: Matrix = Array2::zeros((b, b));
        for i in 0..b {
            diag_a[[i, i]] = r.random_range(0.5..3.0);
        }
        let diag_hat = graph::normalize_adjacency(&diag_a).unwrap();
        let h = encoder::tagcn_forward(&diag_hat, &f, &w, 1).unwrap();
        let expected = HolisticEmbedding::normalize(&f.dot(&(&w.hops[0] + &w.hops[1])));
        diag = diag.max(max_abs_diff(&h.vectors, &expected.vectors));
    }
    (zero_hop, diag)
}

/// Both networks' embeddings, contrasted in batch or against projected bank
/// negatives, as a function of every differentiable input.
pub struct HolisticProblem {
    pub adjacency_t: Matrix,
    pub adjacency_s: Matrix,
    pub features_t: Matrix,
    pub features_s: Matrix,
    pub theta_t: EncoderWeights,
    pub theta_s: EncoderWeights,
    pub teacher_bank: MemoryBank,
    pub student_bank: MemoryBank,
    pub indices: Vec<usize>,
    pub negatives: Vec<Vec<usize>>,
    pub tau: f64,
    pub use_bank: bool,
}

pub struct HolisticGrads {
    pub theta_t: Vec<Matrix>,
    pub theta_s: Vec<Matrix>,
    pub features_t: Matrix,
    pub features_s: Matrix,
}

impl HolisticProblem {
    pub fn random(seed: u64, b: usize, g: usize, use_bank: bool) -> Self {
        let mut r = rng(seed);
        let (dt, ds, n) = (7, 5, 10);
        let classes = 4;
        let knn = |r: &mut ChaCha8Rng| {
            let p = graph::softmax_with_temperature(&gaussian(r, b, classes).view(), 1.0).unwrap();
            graph::normalize_adjacency(&graph::build_knn_adjacency(&p.view(), 2).unwrap()).unwrap()
        };
        let adjacency_t = knn(&mut r);
        let adjacency_s = knn(&mut r);
        let indices: Vec<usize> = (0..b).map(|i| 2 * i + 1).collect();
        let teacher_bank = MemoryBank::random(n, dt, 0.5, BankOwner::Teacher, &mut r).unwrap();
        let student_bank = MemoryBank::random(n, ds, 0.5, BankOwner::Student, &mut r).unwrap();
        let negatives = contrastive::sample_negatives(n, &indices, 5, &mut r).unwrap();
        Self {
            adjacency_t,
            adjacency_s,
            features_t: gaussian(&mut r, b, dt),
            features_s: gaussian(&mut r, b, ds),
            theta_t: EncoderWeights::random(dt, g, 1, &mut r),
            theta_s: EncoderWeights::random(ds, g, 1, &mut r),
            teacher_bank,
            student_bank,
            indices,
            negatives,
            tau: 0.5,
            use_bank,
        }
    }

    pub fn loss(&self) -> f64 {
        self.evaluate(false).0
    }

    pub fn grads(&self) -> HolisticGrads {
        self.evaluate(true).1.expect("requested")
    }

    fn evaluate(&self, with_grads: bool) -> (f64, Option<HolisticGrads>) {
        let ct = encoder::tagcn_forward_cached(&self.adjacency_t, &self.features_t, &self.theta_t, 1).unwrap();
        let cs = encoder::tagcn_forward_cached(&self.adjacency_s, &self.features_s, &self.theta_s, 1).unwrap();
        let (loss, pair, proj_t, proj_s) = if self.use_bank {
            let out = contrastive::infonce_with_bank(
                &ct.output,
                &cs.output,
                BankSide { bank: &self.teacher_bank, projector: Some(&self.theta_t) },
                BankSide { bank: &self.student_bank, projector: Some(&self.theta_s) },
                &self.indices,
                &self.negatives,
                self.tau,
            )
            .unwrap();
            (out.result.loss, out.grads, out.teacher_projector, out.student_projector)
        } else {
            let (res, g) = contrastive::infonce_in_batch_with_grad(&ct.output, &cs.output, self.tau).unwrap();
            (res.loss, g, None, None)
        };
        if !with_grads {
            return (loss, None);
        }
        let gt = ct.backward(&self.adjacency_t, &self.theta_t, &pair.teacher);
        let gs = cs.backward(&self.adjacency_s, &self.theta_s, &pair.student);
        let (mut theta_t, mut theta_s) = (gt.hops, gs.hops);
        if let Some(p) = proj_t {
            theta_t[0] += &p;
        }
        if let Some(p) = proj_s {
            theta_s[0] += &p;
        }
        (
            loss,
            Some(HolisticGrads {
                theta_t,
                theta_s,
                features_t: gt.features,
                features_s: gs.features,
            }),
        )
    }
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Largest relative error between analytic and central-difference gradients
/// for each input group `(Θ_0, Θ_1, embedding inputs)`.
pub fn gradient_check(problem: &HolisticProblem) -> (f64, f64, f64) {
    let h = 1e-6;
    let grads = problem.grads();
    let mut worst = [0.0f64; 3];
    let mut probe = |slot: usize, analytic: f64, perturb: &dyn Fn(&mut HolisticProblem, f64)| {
        let mut plus = clone_problem(problem);
        perturb(&mut plus, h);
        let mut minus = clone_problem(problem);
        perturb(&mut minus, -h);
        let numeric = (plus.loss() - minus.loss()) / (2.0 * h);
        worst[slot] = worst[slot].max(relative_error(analytic, numeric));
    };
    for hop in 0..2 {
        let (rows, cols) = problem.theta_t.hops[hop].dim();
        for i in 0..rows {
            for j in 0..cols {
                probe(hop, grads.theta_t[hop][[i, j]], &|p, e| p.theta_t.hops[hop][[i, j]] += e);
            }
        }
        let (rows, cols) = problem.theta_s.hops[hop].dim();
        for i in 0..rows {
            for j in 0..cols {
                probe(hop, grads.theta_s[hop][[i, j]], &|p, e| p.theta_s.hops[hop][[i, j]] += e);
            }
        }
    }
    for ((i, j), &g) in grads.features_t.indexed_iter() {
        probe(2, g, &|p, e| p.features_t[[i, j]] += e);
    }
    for ((i, j), &g) in grads.features_s.indexed_iter() {
        probe(2, g, &|p, e| p.features_s[[i, j]] += e);
    }
    (worst[0], worst[1], worst[2])
}

fn clone_problem(p: &HolisticProblem) -> HolisticProblem {
    HolisticProblem {
        adjacency_t: p.adjacency_t.clone(),
        adjacency_s: p.adjacency_s.clone(),
        features_t: p.features_t.clone(),
        features_s: p.features_s.clone(),
        theta_t: p.theta_t.clone(),
        theta_s: p.theta_s.clone(),
        teacher_bank: p.teacher_bank.clone(),
        student_bank: p.student_bank.clone(),
        indices: p.indices.clone(),
        negatives: p.negatives.clone(),
        tau: p.tau,
        use_bank: p.use_bank,
    }
}

/// `(max over anchors and batches of bound − ln b, max |‖row‖ − 1| after the updates)`.
pub fn bound_and_bank_suite(batches: u64, updates: u64) -> (f64, f64) {
    let mut excess = f64::NEG_INFINITY;
    for seed in 0..batches {
        let mut r = rng(9000 + seed);
        let b = r.random_range(1..=32);
        let g = r.random_range(2..=16);
        let tau = r.random_range(0.02..2.0);
        let t = unit_rows(&mut r, b, g);
        let s = unit_rows(&mut r, b, g);
        let res = contrastive::infonce_in_batch(&t, &s, tau).unwrap();
        let ln_b = (b as f64).ln();
        for &v in &res.per_anchor_bounds {
            excess = excess.max(v - ln_b);
        }
    }

    let mut drift = 0.0f64;
    for (i, m) in [0.5, 0.9].into_iter().enumerate() {
        let mut r = rng(77 + i as u64);
        let (n, dim) = (64, 8);
        let mut bank = MemoryBank::random(n, dim, m, BankOwner::Student, &mut r).unwrap();
        for _ in 0..updates {
            let count = r.random_range(1..=8);
            let idx = rand::seq::index::sample(&mut r, n, count).into_vec();
            let scale = 10f64.powf(r.random_range(-6.0..6.0));
            let feats = gaussian(&mut r, count, dim) * scale;
            bank.update(&idx, &feats).unwrap();
        }
        for row in bank.entries().outer_iter() {
            drift = drift.max((row.dot(&row).sqrt() - 1.0).abs());
        }
    }
    (excess, drift)
}

/// Analytic KD gradient against central differences, for completeness of the
/// gradient suite.
pub fn kd_gradient_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let zs = gaussian(&mut r, 4, 5);
    let zt = gaussian(&mut r, 4, 5);
    let tau = 4.0;
    let (_, g) = vanilla_kd_with_grad(
        &PredictionBatch::new(zs.clone(), tau).unwrap(),
        &PredictionBatch::new(zt.clone(), tau).unwrap(),
    )
    .unwrap();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for ((i, j), &a) in g.indexed_iter() {
        let mut p = zs.clone();
        p[[i, j]] += h;
        let mut m = zs.clone();
        m[[i, j]] -= h;
        let numeric = (kd_oracle(&p, &zt, tau) - kd_oracle(&m, &zt, tau)) / (2.0 * h);
        worst = worst.max(relative_error(a, numeric));
    }
    worst
}
