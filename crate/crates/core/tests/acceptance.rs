//! Acceptance criteria, one pass/fail line each.
//!
//! Runs as a plain binary (no libtest harness) so the report is always
//! printed. Set `ACCEPTANCE_ONLY=1,5,9` to run a subset.

use std::error::Error;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use canet::graphio::{build_attention_structure, build_norm_adj, Dataset, Graph};
use canet::metrics::{accuracy, macro_f1, roc_auc};
use canet::model::{
    forward, gumbel_sample, init_params, moe_gat_layer, moe_gcn_layer, BranchVars, ForwardRng, GumbelMode, Method,
    ModelConfig, ModelInput,
};
use canet::numcore::{DenseMatrix, Rng, Stream, Tape};
use canet::shiftgen::{gen_planted_dataset, PlantedConfig};
use canet::trainer::{gradcheck, kl_exact, mc_term, total_loss, train, GradcheckConfig, TrainConfig};

type Res<T> = Result<T, Box<dyn Error>>;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Res<Outcome> {
    Ok(Outcome { passed, detail })
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [(usize, &str, fn() -> Res<Outcome>); 10] = [
        (1, "gradient fidelity", c1_gradcheck),
        (2, "KL consistency", c2_kl),
        (3, "Gumbel-max property", c3_gumbel_max),
        (4, "reduction equivalence", c4_reduction),
        (5, "brute-force layer oracles", c5_layers),
        (6, "directional OOD gain over ERM", c6_ood),
        (7, "regularizer ablation direction", c7_ablation),
        (8, "complexity scaling", c8_scaling),
        (9, "metric oracles", c9_metrics),
        (10, "determinism", c10_determinism),
    ];
    let mut failed = 0;
    for (n, name, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let (status, detail) = match check() {
            Ok(o) if o.passed => ("PASS", o.detail),
            Ok(o) => ("FAIL", o.detail),
            Err(e) => ("FAIL", format!("error: {e}")),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!(
            "criterion {n:>2} [{status}] {name}: {detail} ({:.1}s)",
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- 1

fn c1_gradcheck() -> Res<Outcome> {
    let start = Instant::now();
    let mut worst = Vec::new();
    let mut passed = true;
    for backbone in [canet::model::Backbone::Gcn, canet::model::Backbone::Gat] {
        let report = gradcheck(&GradcheckConfig {
            backbone,
            ..Default::default()
        })?;
        let expected_groups = if backbone == canet::model::Backbone::Gat { 7 } else { 5 };
        passed &= report.passed && report.groups.len() == expected_groups;
        worst.push(format!("{backbone:?} max rel err {:.2e}", report.max_rel_error));
    }
    let secs = start.elapsed().as_secs_f64();
    passed &= secs < 30.0;
    outcome(passed, format!("{} (tol 1e-4), {secs:.2}s < 30s", worst.join(", ")))
}

// ---------------------------------------------------------------- 2

fn random_distribution(rng: &mut Rng, k: usize) -> Vec<f64> {
    // Spread of logits from near-uniform to near-degenerate.
    let scale = 10f64.powf(rng.uniform() * 3.0 - 1.0);
    let logits: Vec<f64> = (0..k).map(|_| scale * rng.normal()).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// `n` Gumbel-Softmax draws in log-probability mode for one distribution.
fn gumbel_draws(pi: &[f64], n: usize, tau: f64, rng: &mut Rng) -> Res<DenseMatrix> {
    gumbel_rows(&DenseMatrix::from_fn(n, pi.len(), |_, j| pi[j]), tau, rng)
}

/// One log-probability-mode Gumbel-Softmax draw per row of `p`.
fn gumbel_rows(p: &DenseMatrix, tau: f64, rng: &mut Rng) -> Res<DenseMatrix> {
    let mut tape = Tape::new();
    let pv = tape.constant(p.clone())?;
    let lv = tape.constant(p.map(f64::ln))?;
    let (e, _) = gumbel_sample(&mut tape, pv, lv, tau, Some(rng), GumbelMode::LogProb)?;
    Ok(tape.value(e).clone())
}

fn c2_kl() -> Res<Outcome> {
    let mut rng = Rng::new(2);
    let mut min_kl = f64::INFINITY;
    for _ in 0..10_000 {
        let k = 2 + rng.below(9);
        let pi = random_distribution(&mut rng, k);
        min_kl = min_kl.min(kl_exact(&DenseMatrix::from_vec(1, k, pi)?));
    }

    // The regularizer is a mean over nodes; fix π for 64 nodes and redraw
    // the Gumbel noise.
    let nodes = 64;
    let pis: Vec<Vec<f64>> = (0..nodes).map(|_| random_distribution(&mut rng, 4)).collect();
    let pim = DenseMatrix::from_fn(nodes, 4, |i, j| pis[i][j]);
    let mut noise = rng.fork(Stream::Gumbel);
    let values = (0..10_000)
        .map(|_| Ok(mc_term(&gumbel_rows(&pim, 1.0, &mut noise)?, &pim)))
        .collect::<Res<Vec<f64>>>()?;
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    let stable = se < 0.01 * mean.abs() || se < 1e-3;
    let exact = kl_exact(&pim);

    let uniform = [0.25; 4];
    let um = DenseMatrix::from_vec(1, 4, uniform.to_vec())?;
    let udraws = gumbel_draws(&uniform, 10_000, 1.0, &mut rng.fork(Stream::Gumbel).fork_salt(1))?;
    let mc_uniform = mc_term(&udraws, &um);
    let exact_uniform = kl_exact(&um);

    outcome(
        min_kl >= -1e-9 && stable && mc_uniform.abs() <= 1e-9 && exact_uniform.abs() <= 1e-9,
        format!(
            "min KL {min_kl:.2e} >= -1e-9; MC mean over 10^4 redraws {mean:.5} se {se:.2e} (exact KL {exact:.5}); \
             uniform MC {mc_uniform:.1e} exact {exact_uniform:.1e}"
        ),
    )
}

// ---------------------------------------------------------------- 3

fn c3_gumbel_max() -> Res<Outcome> {
    let pi = [0.45, 0.3, 0.15, 0.07, 0.03];
    let n = 100_000;
    let draws = gumbel_draws(&pi, n, 0.05, &mut Rng::new(3).fork(Stream::Gumbel))?;
    let mut gumbel = [0.0; 5];
    for k in draws.argmax_rows() {
        gumbel[k] += 1.0 / n as f64;
    }
    // Direct inverse-CDF sampling from an independent stream.
    let mut rng = Rng::new(33);
    let mut direct = [0.0; 5];
    for _ in 0..n {
        let u = rng.uniform();
        let mut acc = 0.0;
        let k = pi
            .iter()
            .position(|p| {
                acc += p;
                u < acc
            })
            .unwrap_or(pi.len() - 1);
        direct[k] += 1.0 / n as f64;
    }
    let tv = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / 2.0;
    let (tv_oracle, tv_pi) = (tv(&gumbel, &direct), tv(&gumbel, &pi));
    outcome(
        tv_oracle <= 0.02 && tv_pi <= 0.02,
        format!("TV vs categorical oracle {tv_oracle:.4}, vs pi {tv_pi:.4} (tol 0.02)"),
    )
}

// ---------------------------------------------------------------- 4

/// Row-major dense matrix with just what the reference model needs.
#[derive(Clone)]
struct Mat {
    r: usize,
    c: usize,
    v: Vec<f64>,
}

impl Mat {
    fn zeros(r: usize, c: usize) -> Self {
        Mat { r, c, v: vec![0.0; r * c] }
    }
    fn of(m: &DenseMatrix) -> Self {
        Mat {
            r: m.rows(),
            c: m.cols(),
            v: m.values().to_vec(),
        }
    }
    fn at(&self, i: usize, j: usize) -> f64 {
        self.v[i * self.c + j]
    }
    /// `self · otherᵀ`
    fn mul_t(&self, o: &Mat) -> Mat {
        let mut out = Mat::zeros(self.r, o.r);
        for i in 0..self.r {
            for j in 0..o.r {
                out.v[i * o.r + j] = (0..self.c).map(|k| self.at(i, k) * o.at(j, k)).sum();
            }
        }
        out
    }
    /// `selfᵀ · other`
    fn t_mul(&self, o: &Mat) -> Mat {
        let mut out = Mat::zeros(self.c, o.c);
        for i in 0..self.c {
            for j in 0..o.c {
                out.v[i * o.c + j] = (0..self.r).map(|k| self.at(k, i) * o.at(k, j)).sum();
            }
        }
        out
    }
    /// `self · other`
    fn mul(&self, o: &Mat) -> Mat {
        let mut out = Mat::zeros(self.r, o.c);
        for i in 0..self.r {
            for j in 0..o.c {
                out.v[i * o.c + j] = (0..self.c).map(|k| self.at(i, k) * o.at(k, j)).sum();
            }
        }
        out
    }
    fn zip(&self, o: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        Mat {
            r: self.r,
            c: self.c,
            v: self.v.iter().zip(&o.v).map(|(&a, &b)| f(a, b)).collect(),
        }
    }
}

/// Single-branch residual GCN trained with Adam + decoupled decay, coded
/// directly with hand-derived gradients. Returns the loss of every epoch.
fn reference_losses(
    g: &Graph,
    train_rows: &[usize],
    init: &[(String, DenseMatrix)],
    layers: usize,
    cfg: &TrainConfig,
) -> Vec<f64> {
    let n = g.n();
    let deg = g.degrees();
    let mut a_hat = Mat::zeros(n, n);
    for &(u, v) in g.edges() {
        let w = 1.0 / ((deg[u] * deg[v]) as f64).sqrt();
        a_hat.v[u * n + v] = w;
        a_hat.v[v * n + u] = w;
    }
    let x = Mat::of(g.features());
    let get = |name: &str| Mat::of(&init.iter().find(|(k, _)| k == name).expect("param").1);
    let mut params: Vec<Mat> = vec![get("phi_in"), get("phi_out")];
    for l in 0..layers {
        params.push(get(&format!("layer{l}.branch0.w_d")));
        params.push(get(&format!("layer{l}.branch0.w_self")));
    }
    let mut m: Vec<Mat> = params.iter().map(|p| Mat::zeros(p.r, p.c)).collect();
    let mut v = m.clone();
    let labels = g.labels();
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut losses = Vec::new();
    for t in 1..=cfg.epochs {
        // Forward.
        let mut zs = vec![x.mul_t(&params[0])];
        let mut pres = Vec::new();
        for l in 0..layers {
            let z = &zs[l];
            let pre = a_hat.mul(z).mul_t(&params[2 + 2 * l]).zip(&z.mul_t(&params[3 + 2 * l]), |a, b| a + b);
            let next = z.zip(&pre, |z, p| z + p.max(0.0));
            pres.push(pre);
            zs.push(next);
        }
        let logits = zs[layers].mul_t(&params[1]);
        let c = logits.c;
        let mut dlogits = Mat::zeros(n, c);
        let mut loss = 0.0;
        for &i in train_rows {
            let row = &logits.v[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[labels[i]];
            for j in 0..c {
                let p = (row[j] - lse).exp();
                dlogits.v[i * c + j] = (p - if j == labels[i] { 1.0 } else { 0.0 }) / train_rows.len() as f64;
            }
        }
        losses.push(loss / train_rows.len() as f64);

        // Backward.
        let mut grads: Vec<Mat> = params.iter().map(|p| Mat::zeros(p.r, p.c)).collect();
        grads[1] = dlogits.t_mul(&zs[layers]);
        let mut dz = dlogits.mul(&params[1]);
        for l in (0..layers).rev() {
            let z = &zs[l];
            let da = dz.zip(&pres[l], |d, p| if p > 0.0 { d } else { 0.0 });
            let az = a_hat.mul(z);
            grads[2 + 2 * l] = da.t_mul(&az);
            grads[3 + 2 * l] = da.t_mul(z);
            let through_adj = a_hat.mul(&da.mul(&params[2 + 2 * l]));
            let through_self = da.mul(&params[3 + 2 * l]);
            dz = dz.zip(&through_adj, |a, b| a + b).zip(&through_self, |a, b| a + b);
        }
        grads[0] = dz.t_mul(&x);

        // Adam with decoupled weight decay.
        let (bc1, bc2) = (1.0 - b1.powi(t as i32), 1.0 - b2.powi(t as i32));
        for ((p, g), (m, v)) in params.iter_mut().zip(&grads).zip(m.iter_mut().zip(v.iter_mut())) {
            for i in 0..p.v.len() {
                p.v[i] -= cfg.lr * cfg.weight_decay * p.v[i];
                m.v[i] = b1 * m.v[i] + (1.0 - b1) * g.v[i];
                v.v[i] = b2 * v.v[i] + (1.0 - b2) * g.v[i] * g.v[i];
                p.v[i] -= cfg.lr * (m.v[i] / bc1) / ((v.v[i] / bc2).sqrt() + eps);
            }
        }
    }
    losses
}

fn c4_reduction() -> Res<Outcome> {
    let ds = gen_planted_dataset(&PlantedConfig {
        nodes_per_env: 40,
        p_intra: 0.15,
        p_inter: 0.02,
        seed: 4,
        ..Default::default()
    })?;
    let cfg = TrainConfig {
        model: ModelConfig {
            branches: 1,
            hidden: 8,
            layers: 2,
            ..Default::default()
        },
        lambda: 0.0,
        epochs: 50,
        seed: 4,
        ..Default::default()
    };
    let result = train(&ds, &cfg)?;
    let init = init_params(&cfg.model, ds.feature_dim(), ds.num_classes(), &Rng::new(cfg.seed))?;
    let union = ds.id_union()?;
    let reference = reference_losses(&union, &ds.split.train, &init.named_values(), cfg.model.layers, &cfg);
    let max_diff = result
        .history
        .iter()
        .zip(&reference)
        .map(|(h, r)| (h.loss - r).abs())
        .fold(0.0, f64::max);
    outcome(
        result.history.len() == 50 && max_diff <= 1e-9,
        format!(
            "50 epochs, max |loss diff| {max_diff:.2e} (tol 1e-9), loss {:.4} -> {:.4}",
            reference[0], reference[49]
        ),
    )
}

// ---------------------------------------------------------------- 5

struct LayerCase {
    graph: Graph,
    z: DenseMatrix,
    e: DenseMatrix,
    w_d: Vec<DenseMatrix>,
    w_self: Vec<DenseMatrix>,
    w_a: Vec<DenseMatrix>,
    b: Vec<DenseMatrix>,
    self_loops: bool,
}

fn layer_case(rng: &mut Rng) -> Res<LayerCase> {
    let n = 1 + rng.below(16);
    let h = 1 + rng.below(5);
    let k = 1 + rng.below(4);
    let density = rng.uniform();
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.bernoulli(density) {
                edges.push((u, v));
            }
        }
    }
    let graph = Graph::new(DenseMatrix::zeros(n, 1), vec![0; n], 1, edges)?;
    let e = DenseMatrix::from_vec(n, k, (0..n).flat_map(|_| random_distribution(rng, k)).collect())?;
    let mats = |rng: &mut Rng, r: usize, c: usize| -> Vec<DenseMatrix> { (0..k).map(|_| rng.gaussian_matrix(r, c, 1.0)).collect() };
    Ok(LayerCase {
        z: rng.gaussian_matrix(n, h, 1.0),
        w_d: mats(rng, h, h),
        w_self: mats(rng, h, h),
        w_a: mats(rng, h, h),
        b: mats(rng, 2 * h, 1),
        self_loops: rng.bernoulli(0.5),
        graph,
        e,
    })
}

fn matvec(w: &DenseMatrix, x: &[f64]) -> Vec<f64> {
    (0..w.rows()).map(|i| (0..w.cols()).map(|j| w.get(i, j) * x[j]).sum()).collect()
}

/// Neighbor lists straight from the edge list.
fn neighbors(g: &Graph) -> Vec<Vec<usize>> {
    let mut nb = vec![Vec::new(); g.n()];
    for &(u, v) in g.edges() {
        nb[u].push(v);
        nb[v].push(u);
    }
    nb
}

fn naive_gcn(c: &LayerCase) -> Vec<Vec<f64>> {
    let n = c.graph.n();
    let mut nb = neighbors(&c.graph);
    if c.self_loops {
        for (u, list) in nb.iter_mut().enumerate() {
            list.push(u);
        }
    }
    let deg: Vec<f64> = nb.iter().map(|l| l.len() as f64).collect();
    (0..n)
        .map(|u| {
            let zu = c.z.row(u);
            let mut pre = vec![0.0; zu.len()];
            for k in 0..c.w_d.len() {
                let mut msg = matvec(&c.w_self[k], zu);
                for &v in &nb[u] {
                    let coef = 1.0 / (deg[u] * deg[v]).sqrt();
                    for (m, x) in msg.iter_mut().zip(matvec(&c.w_d[k], c.z.row(v))) {
                        *m += coef * x;
                    }
                }
                for (p, m) in pre.iter_mut().zip(msg) {
                    *p += c.e.get(u, k) * m;
                }
            }
            zu.iter().zip(pre).map(|(z, p)| z + p.max(0.0)).collect()
        })
        .collect()
}

fn naive_gat(c: &LayerCase, slope: f64) -> Vec<Vec<f64>> {
    let n = c.graph.n();
    let mut nb = neighbors(&c.graph);
    for (u, list) in nb.iter_mut().enumerate() {
        list.push(u);
    }
    let h = c.z.cols();
    (0..n)
        .map(|u| {
            let zu = c.z.row(u);
            let mut pre = vec![0.0; h];
            for k in 0..c.w_d.len() {
                let b = c.b[k].values();
                let proj = |v: usize| matvec(&c.w_a[k], c.z.row(v));
                let f_u: f64 = proj(u).iter().zip(&b[..h]).map(|(p, b)| p * b).sum();
                let scores: Vec<f64> = nb[u]
                    .iter()
                    .map(|&v| {
                        let s = f_u + proj(v).iter().zip(&b[h..]).map(|(p, b)| p * b).sum::<f64>();
                        if s > 0.0 { s } else { slope * s }
                    })
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = scores.iter().map(|s| (s - max).exp()).sum();
                let mut msg = matvec(&c.w_self[k], zu);
                for (&v, s) in nb[u].iter().zip(&scores) {
                    let alpha = (s - max).exp() / denom;
                    for (m, x) in msg.iter_mut().zip(matvec(&c.w_d[k], c.z.row(v))) {
                        *m += alpha * x;
                    }
                }
                for (p, m) in pre.iter_mut().zip(msg) {
                    *p += c.e.get(u, k) * m;
                }
            }
            zu.iter().zip(pre).map(|(z, p)| z + p.max(0.0)).collect()
        })
        .collect()
}

fn tape_layer(c: &LayerCase, gat: bool, slope: f64) -> Res<DenseMatrix> {
    let mut tape = Tape::new();
    let z = tape.constant(c.z.clone())?;
    let e = tape.constant(c.e.clone())?;
    let mut branches = Vec::new();
    for k in 0..c.w_d.len() {
        let attn = if gat {
            Some((tape.constant(c.w_a[k].clone())?, tape.constant(c.b[k].clone())?))
        } else {
            None
        };
        branches.push(BranchVars {
            w_d: tape.constant(c.w_d[k].clone())?,
            w_self: tape.constant(c.w_self[k].clone())?,
            attn,
        });
    }
    let mut rng = Rng::new(0);
    let out = if gat {
        let s = Arc::new(build_attention_structure(&c.graph));
        moe_gat_layer(&mut tape, z, &s, e, &branches, slope, 0.0, &mut rng, false)?
    } else {
        let adj = Arc::new(build_norm_adj(&c.graph, c.self_loops));
        moe_gcn_layer(&mut tape, z, &adj, e, &branches, 0.0, &mut rng, false)?
    };
    Ok(tape.value(out).clone())
}

fn max_abs_diff(m: &DenseMatrix, rows: &[Vec<f64>]) -> f64 {
    rows.iter()
        .enumerate()
        .flat_map(|(i, r)| r.iter().enumerate().map(move |(j, &x)| (i, j, x)))
        .map(|(i, j, x)| (m.get(i, j) - x).abs())
        .fold(0.0, f64::max)
}

fn c5_layers() -> Res<Outcome> {
    let mut rng = Rng::new(5);
    let (mut gcn, mut gat) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let case = layer_case(&mut rng)?;
        gcn = gcn.max(max_abs_diff(&tape_layer(&case, false, 0.2)?, &naive_gcn(&case)));
        gat = gat.max(max_abs_diff(&tape_layer(&case, true, 0.2)?, &naive_gat(&case, 0.2)));
    }
    outcome(
        gcn <= 1e-10 && gat <= 1e-10,
        format!("1000 instances, max diff GCN {gcn:.2e}, GAT {gat:.2e} (tol 1e-10)"),
    )
}

// ---------------------------------------------------------------- 6, 7

const SEEDS: u64 = 5;

/// Shared training settings for the planted comparison; the dataset is
/// the generator default (1000 nodes per environment, 3 + 3 environments,
/// 3 classes, cyclic class-permutation flip of the spurious block).
fn planted_setup() -> Res<(Dataset, TrainConfig)> {
    let ds = gen_planted_dataset(&PlantedConfig::default())?;
    let cfg = TrainConfig {
        lambda: 0.5,
        lr: 0.005,
        epochs: 150,
        ..Default::default()
    };
    Ok((ds, cfg))
}

thread_local! {
    /// Criteria 6 and 7 share runs; keyed by the serialized config.
    static SCORES: std::cell::RefCell<std::collections::HashMap<String, (f64, f64)>> = Default::default();
}

/// Mean (test ID, OOD) over the seeds.
fn mean_scores(ds: &Dataset, cfg: &TrainConfig) -> Res<(f64, f64)> {
    let key = serde_json::to_string(cfg)?;
    if let Some(hit) = SCORES.with(|s| s.borrow().get(&key).copied()) {
        return Ok(hit);
    }
    let (mut id, mut ood) = (0.0, 0.0);
    for seed in 0..SEEDS {
        let r = train(ds, &TrainConfig { seed, ..cfg.clone() })?;
        id += r.metrics.test_id.value;
        ood += r.metrics.ood_mean.ok_or("planted data has OOD groups")?;
    }
    let means = (id / SEEDS as f64, ood / SEEDS as f64);
    SCORES.with(|s| s.borrow_mut().insert(key, means));
    Ok(means)
}

fn erm(cfg: &TrainConfig) -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            method: Method::Erm,
            ..cfg.model.clone()
        },
        ..cfg.clone()
    }
}

fn c6_ood() -> Res<Outcome> {
    let start = Instant::now();
    let (ds, cfg) = planted_setup()?;
    let (c_id, c_ood) = mean_scores(&ds, &cfg)?;
    let (e_id, e_ood) = mean_scores(&ds, &erm(&cfg))?;
    let secs = start.elapsed().as_secs_f64();
    let gain = 100.0 * (c_ood - e_ood);
    let id_gap = 100.0 * (c_id - e_id).abs();
    outcome(
        gain >= 5.0 && id_gap < 5.0 && secs < 600.0,
        format!(
            "CaNet OOD {c_ood:.4} vs ERM {e_ood:.4} (+{gain:.1} pts, need >= 5); \
             ID {c_id:.4} vs {e_id:.4} (gap {id_gap:.1} pts, need < 5); {secs:.0}s < 600s"
        ),
    )
}

fn c7_ablation() -> Res<Outcome> {
    let (ds, cfg) = planted_setup()?;
    let (_, with_reg) = mean_scores(&ds, &cfg)?;
    let (_, no_reg) = mean_scores(
        &ds,
        &TrainConfig {
            no_reg_loss: true,
            ..cfg.clone()
        },
    )?;
    let diff = 100.0 * (with_reg - no_reg);
    let passed = if diff >= 0.0 {
        true
    } else {
        // A shortfall within one point is tolerated only when both variants
        // already clear the ERM margin of criterion 6.
        let (_, erm_ood) = mean_scores(&ds, &erm(&cfg))?;
        diff > -1.0 && with_reg - erm_ood >= 0.05 && no_reg - erm_ood >= 0.05
    };
    outcome(
        passed,
        format!("OOD with regularizer {with_reg:.4} vs without {no_reg:.4} ({diff:+.1} pts)"),
    )
}

// ---------------------------------------------------------------- 8

fn scaling_graph(n: usize, avg_degree: usize, seed: u64) -> Res<Graph> {
    let mut rng = Rng::new(seed);
    let target = n * avg_degree / 2;
    let mut seen = std::collections::HashSet::with_capacity(target);
    while seen.len() < target {
        let (u, v) = (rng.below(n), rng.below(n));
        if u != v {
            seen.insert((u.min(v), u.max(v)));
        }
    }
    let mut edges: Vec<_> = seen.into_iter().collect();
    edges.sort_unstable();
    let labels = (0..n).map(|_| rng.below(3)).collect();
    Ok(Graph::new(rng.gaussian_matrix(n, 8, 1.0), labels, 3, edges)?)
}

/// Median forward+backward seconds and the forward edge touches.
fn epoch_cost(g: &Graph, branches: usize) -> Res<(f64, u64, usize)> {
    let cfg = TrainConfig {
        model: ModelConfig {
            branches,
            hidden: 8,
            layers: 2,
            ..Default::default()
        },
        ..Default::default()
    };
    let input = ModelInput::new(g, &cfg.model);
    let nnz = input.adj.as_ref().ok_or("GCN input has an adjacency")?.nnz();
    let params = init_params(&cfg.model, g.feature_dim(), g.num_classes(), &Rng::new(0))?;
    let labels: Arc<[usize]> = g.labels().into();
    let rows: Arc<[usize]> = (0..g.n()).collect();
    let run_rng = Rng::new(0);
    let mut times = Vec::new();
    let mut touches = 0;
    for rep in 0..15 {
        let start = Instant::now();
        let mut tape = Tape::new();
        let out = forward(&mut tape, &params, &input, &cfg.model, &mut ForwardRng::training(&run_rng, rep), true)?;
        touches = tape.edge_touches();
        let terms = total_loss(&mut tape, &out, &labels, &rows, &cfg)?;
        tape.backward(terms.total, &params.store)?;
        if rep > 0 {
            times.push(start.elapsed().as_secs_f64());
        }
    }
    times.sort_by(f64::total_cmp);
    Ok((times[times.len() / 2], touches, nnz))
}

fn c8_scaling() -> Res<Outcome> {
    let layers = 2u64;
    let sparse = scaling_graph(1000, 200, 8)?;
    let dense = scaling_graph(1000, 400, 8)?;
    let (t_k4, touch_k4, nnz) = epoch_cost(&sparse, 4)?;
    let (t_k8, touch_k8, _) = epoch_cost(&sparse, 8)?;
    let (t_e2, touch_e2, nnz2) = epoch_cost(&dense, 4)?;
    let (rk, re) = (t_k8 / t_k4, t_e2 / t_k4);
    let in_range = |r: f64| (1.5..=2.8).contains(&r);
    let counts = touch_k4 == layers * 4 * nnz as u64
        && touch_k8 == layers * 8 * nnz as u64
        && touch_e2 == layers * 4 * nnz2 as u64;
    outcome(
        in_range(rk) && in_range(re) && counts,
        format!(
            "time ratio 2K {rk:.2}, 2|E| {re:.2} (need [1.5, 2.8]); touches {touch_k4}/{touch_k8}/{touch_e2} \
             = L*K*nnz with nnz {nnz}/{nnz2}: {counts}"
        ),
    )
}

// ---------------------------------------------------------------- 9

fn oracle_macro_f1(pred: &[usize], truth: &[usize], classes: usize) -> f64 {
    let f1s = (0..classes).map(|c| {
        let tp = pred.iter().zip(truth).filter(|&(&p, &t)| p == c && t == c).count() as f64;
        let predicted = pred.iter().filter(|&&p| p == c).count() as f64;
        let actual = truth.iter().filter(|&&t| t == c).count() as f64;
        if tp == 0.0 {
            return 0.0;
        }
        let (precision, recall) = (tp / predicted, tp / actual);
        2.0 * precision * recall / (precision + recall)
    });
    f1s.sum::<f64>() / classes as f64
}

fn oracle_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut credit, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                credit += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    credit / pairs
}

fn c9_metrics() -> Res<Outcome> {
    let mut rng = Rng::new(9);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = 1 + rng.below(50);
        let c = 2 + rng.below(4);
        let truth: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
        let hits = (0..n).filter(|&i| pred[i] == truth[i]).count() as f64;
        worst = worst.max((accuracy(&pred, &truth)? - hits / n as f64).abs());
        worst = worst.max((macro_f1(&pred, &truth, c)? - oracle_macro_f1(&pred, &truth, c)).abs());
        let n = 2 + rng.below(49);
        // Coarse scores so ties occur.
        let scores: Vec<f64> = (0..n).map(|_| rng.below(8) as f64 / 8.0).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        worst = worst.max((roc_auc(&scores, &labels)? - oracle_auc(&scores, &labels)).abs());
    }
    let acc_fixture = accuracy(&[0, 1, 0, 0], &[0, 1, 1, 0])?;
    let f1_fixture = macro_f1(&[0, 1, 1, 1], &[0, 0, 1, 1], 2)?;
    let auc_fixture = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true])?;
    let fixtures = (acc_fixture - 0.75).abs() <= 1e-12
        && (f1_fixture - 11.0 / 15.0).abs() <= 1e-12
        && (auc_fixture - 0.75).abs() <= 1e-12;
    outcome(
        worst <= 1e-12 && fixtures,
        format!(
            "1000 instances, max diff {worst:.1e} (tol 1e-12); fixtures acc {acc_fixture}, \
             macro-F1 {f1_fixture:.5}, AUC {auc_fixture}"
        ),
    )
}

// ---------------------------------------------------------------- 10

fn canet(args: &[&str]) -> Res<(String, String)> {
    let out = Command::new(env!("CARGO_BIN_EXE_canet")).args(args).output()?;
    if !out.status.success() {
        return Err(format!("canet {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)).into());
    }
    Ok((String::from_utf8(out.stdout)?, String::from_utf8(out.stderr)?))
}

fn json_field(path: &Path, keys: &[&str]) -> Res<String> {
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path)?)?;
    let picked: Vec<String> = keys.iter().map(|k| v[*k].to_string()).collect();
    Ok(picked.join("\n"))
}

/// Everything a command wrote, minus the manifest (which holds timestamps).
fn tree_bytes(dir: &Path) -> Res<Vec<(String, Vec<u8>)>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name() != Some("manifest.json".as_ref()) && p.file_name() != Some("run.json".as_ref()) {
                out.push((p.strip_prefix(dir)?.display().to_string(), fs::read(&p)?));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn c10_determinism() -> Res<Outcome> {
    let tmp = tempfile::tempdir()?;
    let p = |name: &str| tmp.path().join(name).display().to_string();
    let mut identical = Vec::new();
    for run in ["a", "b"] {
        let data = p(&format!("data_{run}"));
        let out = |cmd: &str| p(&format!("{cmd}_{run}"));
        canet(&["gen-data", "--kind", "planted", "--nodes", "60", "--seed", "7", "--out", &data])?;
        canet(&["train", "--data", &data, "--out", &out("train"), "--epochs", "15", "--seed", "3", "--dropout", "0.2"])?;
        let ckpt = format!("{}/checkpoint.json", out("train"));
        canet(&["eval", "--data", &data, "--checkpoint", &ckpt, "--out", &out("eval")])?;
        canet(&["export-weights", "--checkpoint", &ckpt, "--layer", "1", "--out", &out("weights")])?;
        let grid = p(&format!("grid_{run}.json"));
        fs::write(&grid, r#"{"tau": [1.0, 3.0], "epochs": [5]}"#)?;
        canet(&["sweep", "--data", &data, "--grid", &grid, "--seeds", "0,1", "--jobs", "2", "--out", &out("sweep")])?;
        let (gc_stdout, _) = canet(&["gradcheck", "--backbone", "gat", "--seed", "2"])?;
        identical.push((data, out("train"), out("eval"), out("weights"), out("sweep"), gc_stdout));
    }
    let (a, b) = (&identical[0], &identical[1]);
    let run_fields = ["config", "seed", "selected_epoch", "best_valid", "metrics", "history"];
    let checks = [
        ("dataset", tree_bytes(Path::new(&a.0))? == tree_bytes(Path::new(&b.0))?),
        (
            "run.json",
            json_field(&Path::new(&a.1).join("run.json"), &run_fields)?
                == json_field(&Path::new(&b.1).join("run.json"), &run_fields)?,
        ),
        ("checkpoint", tree_bytes(Path::new(&a.1))? == tree_bytes(Path::new(&b.1))?),
        ("eval", tree_bytes(Path::new(&a.2))? == tree_bytes(Path::new(&b.2))?),
        ("weights", tree_bytes(Path::new(&a.3))? == tree_bytes(Path::new(&b.3))?),
        ("sweep", tree_bytes(Path::new(&a.4))? == tree_bytes(Path::new(&b.4))?),
        ("gradcheck", a.5 == b.5),
    ];
    let differing: Vec<&str> = checks.iter().filter(|(_, same)| !same).map(|(n, _)| *n).collect();
    outcome(
        differing.is_empty(),
        if differing.is_empty() {
            "gen-data, train, eval, export-weights, sweep and gradcheck outputs reproduce byte for byte".into()
        } else {
            format!("outputs differ for {}", differing.join(", "))
        },
    )
}
