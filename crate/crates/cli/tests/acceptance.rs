//! Acceptance gate. Runs each criterion in isolation and prints one
//! PASS/FAIL line per criterion; exits non-zero if any failed.
//!
//! `cargo test -p hyperdiv-cli --test acceptance -- 1 4 9` runs a subset.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use hyperdiv::diversity::hyperspherical_energy;
use hyperdiv::encoder::Tap;
use hyperdiv::experiments::{early_stop, EarlyStop, RecordSet};
use hyperdiv::ssl::{kmeans, nt_xent, rotnet_loss};
use hyperdiv::tensor::gradcheck::gradcheck;
use hyperdiv::tensor::{BatchNormMode, Graph, RunningStats, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (usize, &'static str, Box<dyn Fn() -> Outcome>);

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_rows(r: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect()
}

fn tensor(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn energy(rows: &[Vec<f64>], s: f64) -> f64 {
    hyperspherical_energy(&Tensor::from_rows(rows).unwrap(), s)
        .unwrap()
        .raw_energy
}

/// Double loop over ordered pairs, straight from the definition.
fn energy_oracle(rows: &[Vec<f64>], s: f64) -> f64 {
    let unit: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / n).collect()
        })
        .collect();
    let mut total = 0.0;
    for i in 0..unit.len() {
        for j in 0..unit.len() {
            if i != j {
                let d = unit[i]
                    .iter()
                    .zip(&unit[j])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt()
                    .max(1e-12);
                total += if s == 0.0 { -d.ln() } else { d.powf(-s) };
            }
        }
    }
    total
}

fn nt_xent_value(rows: &[Vec<f64>], tau: f64) -> f64 {
    let mut g = Graph::new();
    let z = g.constant(Tensor::from_rows(rows).unwrap());
    let l = nt_xent(&mut g, z, tau).unwrap();
    g.value(l).data()[0]
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: f64, what: &str) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit, || {
        format!("{what} took {:.1}s, limit {limit}s", elapsed.as_secs_f64())
    })
}

fn energy_oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let mut worst = 0.0f64;
    for set in 0..100 {
        let n = r.random_range(2..=64);
        let d = r.random_range(2..=16);
        let rows = random_rows(&mut r, n, d);
        for s in [0.0, 1.0, 2.0] {
            let (got, want) = (energy(&rows, s), energy_oracle(&rows, s));
            let rel = (got - want).abs() / want.abs().max(f64::MIN_POSITIVE);
            worst = worst.max(rel);
            ensure(rel <= 1e-10, || {
                format!("set {set} (N={n}, D={d}, s={s}): {got} vs oracle {want}")
            })?;
        }
    }
    within(start.elapsed(), 5.0, "300 comparisons")?;
    Ok(format!("300 comparisons, max relative error {worst:.1e}"))
}

fn analytic_energy_cases() -> Outcome {
    let e1 = energy(&[vec![1.0, 0.0], vec![-1.0, 0.0]], 1.0);
    let e0 = energy(&[vec![1.0, 0.0], vec![0.0, 1.0]], 0.0);
    let ln2 = std::f64::consts::LN_2;
    ensure((e1 - 1.0).abs() <= 1e-12, || format!("antipodal E_1 = {e1}"))?;
    ensure((e0 + ln2).abs() <= 1e-9, || format!("orthogonal E_0 = {e0}"))?;
    Ok(format!("E_1 = {e1}, E_0 = {e0}"))
}

fn energy_invariances() -> Outcome {
    let mut r = rng(3);
    for trial in 0..200 {
        let n = r.random_range(2..=64);
        let d = r.random_range(2..=16);
        let s = [0.0, 1.0, 2.0][trial % 3];
        let rows = random_rows(&mut r, n, d);
        let base = energy(&rows, s);

        let mut shuffled = rows.clone();
        shuffled.shuffle(&mut r);
        let perm = energy(&shuffled, s);
        ensure(perm.to_bits() == base.to_bits(), || {
            format!("trial {trial}: permuted {perm} vs {base}")
        })?;

        // a positive scale per row keeps every direction
        let scaled: Vec<Vec<f64>> = rows
            .iter()
            .map(|row| {
                let c = r.random_range(0.01..100.0);
                row.iter().map(|v| v * c).collect()
            })
            .collect();
        let sc = energy(&scaled, s);
        ensure((sc - base).abs() <= 1e-12 * base.abs().max(1.0), || {
            format!("trial {trial}: scaled {sc} vs {base}")
        })?;

        let mut dup = rows.clone();
        dup.push(rows[r.random_range(0..n)].clone());
        let more = energy(&dup, s);
        ensure(more > base, || {
            format!("trial {trial} (N={n}, s={s}): duplicated {more} vs {base}")
        })?;
    }
    Ok("600 checks, zero violations".into())
}

fn nt_xent_correctness() -> Outcome {
    let same = nt_xent_value(&vec![vec![0.3, -1.2, 0.5]; 4], 0.5);
    let ln3 = 3f64.ln();
    ensure((same - ln3).abs() <= 1e-9, || {
        format!("identical batch gave {same}, want {ln3}")
    })?;

    let mut r = rng(4);
    let mut worst = 0.0f64;
    for case in 0..20 {
        let pairs = r.random_range(2..5);
        let d = r.random_range(2..8);
        let tau = r.random_range(0.1..1.0);
        let z = tensor(&[2 * pairs, d], &mut r);
        let f = |g: &mut Graph, v: &[Var]| nt_xent(g, v[0], tau);
        let rep = gradcheck(&[z], &[1.0], 1e-5, 1e-5, f).map_err(|e| e.to_string())?;
        worst = worst.max(rep.max_rel_error);
        ensure(rep.max_rel_error <= 1e-4, || {
            format!("gradient case {case}: relative error {}", rep.max_rel_error)
        })?;
    }

    let hand = nt_xent_value(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]], 0.5);
    let closed = (1.0 + 2.0 * (-2f64).exp()).ln();
    ensure((hand - 0.239717).abs() <= 1e-6, || {
        format!(
            "τ=0.5 case gave {hand}, stated 0.239717; ln(1+2e⁻²) = {closed}, \
             gradients ok (max relative error {worst:.1e})"
        )
    })?;
    Ok(format!(
        "ln 3 case {same}, τ=0.5 case {hand}, 20 gradchecks max relative error {worst:.1e}"
    ))
}

struct Checker {
    worst: f64,
    checks: usize,
    seed: u64,
}

impl Checker {
    fn check<F>(&mut self, op: &str, inputs: &[Tensor], f: F) -> Result<(), String>
    where
        F: Fn(&mut Graph, &[Var]) -> hyperdiv::Result<Var>,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
        let out = f(&mut g, &vars).map_err(|e| format!("{op}: {e}"))?;
        let n = g.value(out).numel();
        self.seed += 1;
        let mut r = rng(self.seed);
        let weights: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let rep = gradcheck(inputs, &weights, 1e-5, 1e-5, &f).map_err(|e| format!("{op}: {e}"))?;
        self.worst = self.worst.max(rep.max_rel_error);
        self.checks += 1;
        ensure(rep.max_rel_error <= 1e-4, || {
            let shapes: Vec<_> = inputs.iter().map(|t| t.shape().to_vec()).collect();
            format!("{op} {shapes:?}: relative error {}", rep.max_rel_error)
        })
    }
}

fn autodiff_suite() -> Outcome {
    let start = Instant::now();
    let mut c = Checker {
        worst: 0.0,
        checks: 0,
        seed: 5000,
    };
    let mut r = rng(5);
    for case in 0..20 {
        let b = r.random_range(2..4);
        let ch = r.random_range(1..4);
        let f = r.random_range(1..4);
        let (k, stride, pad) = [(3, 1, 1), (2, 2, 0), (4, 2, 1), (1, 1, 0)][case % 4];
        let side = if stride == 2 {
            2 * r.random_range(1..4)
        } else {
            r.random_range(2..6)
        };
        let x = tensor(&[b, ch, side, side], &mut r);
        let w = tensor(&[f, ch, k, k], &mut r);
        c.check("conv2d", &[x.clone(), w], |g, v| g.conv2d(v[0], v[1], stride, pad))?;
        let gamma = tensor(&[ch], &mut r);
        let beta = tensor(&[ch], &mut r);
        c.check("batch_norm/train", &[x.clone(), gamma.clone(), beta.clone()], |g, v| {
            let mut rs = RunningStats::new(ch);
            g.batch_norm(v[0], v[1], v[2], 1e-5, BatchNormMode::Train(&mut rs))
        })?;
        let rs = RunningStats {
            mean: (0..ch).map(|_| r.random_range(-1.0..1.0)).collect(),
            var: (0..ch).map(|_| r.random_range(0.5..2.0)).collect(),
        };
        c.check("batch_norm/eval", &[x.clone(), gamma.clone(), beta.clone()], |g, v| {
            g.batch_norm(v[0], v[1], v[2], 1e-5, BatchNormMode::Eval(&rs))
        })?;
        c.check("layer_norm", &[x.clone(), gamma, beta], |g, v| {
            g.layer_norm(v[0], v[1], v[2], 1e-5)
        })?;
        c.check("global_avg_pool", &[x], |g, v| g.global_avg_pool(v[0]))?;

        let (m, k, n) = (r.random_range(1..6), r.random_range(1..6), r.random_range(1..6));
        let a = tensor(&[m, k], &mut r);
        let bm = tensor(&[k, n], &mut r);
        let other = tensor(&[m, k], &mut r);
        let bias = tensor(&[k], &mut r);
        let labels: Vec<usize> = (0..m).map(|_| r.random_range(0..k)).collect();
        c.check("matmul", &[a.clone(), bm], |g, v| g.matmul(v[0], v[1]))?;
        c.check("add", &[a.clone(), other.clone()], |g, v| g.add(v[0], v[1]))?;
        c.check("mul", &[a.clone(), other], |g, v| g.mul(v[0], v[1]))?;
        c.check("add_bias", &[a.clone(), bias], |g, v| g.add_bias(v[0], v[1]))?;
        c.check("mul_scalar", std::slice::from_ref(&a), |g, v| g.mul_scalar(v[0], -1.7))?;
        c.check("relu", std::slice::from_ref(&a), |g, v| g.relu(v[0]))?;
        c.check("sum", std::slice::from_ref(&a), |g, v| g.sum(v[0]))?;
        c.check("log_softmax", std::slice::from_ref(&a), |g, v| g.log_softmax(v[0]))?;
        c.check("cross_entropy", std::slice::from_ref(&a), |g, v| {
            let lp = g.log_softmax(v[0])?;
            g.cross_entropy(lp, &labels)
        })?;
        c.check("l2_normalize", &[a], |g, v| g.l2_normalize(v[0], 1e-12))?;

        let logits = tensor(&[m, 4], &mut r);
        let rot: Vec<usize> = (0..m).map(|_| r.random_range(0..4)).collect();
        c.check("rotnet_loss", &[logits], |g, v| rotnet_loss(g, v[0], &rot))?;
        let z = tensor(&[2 * r.random_range(2..5), r.random_range(2..8)], &mut r);
        let tau = r.random_range(0.1..1.0);
        c.check("nt_xent", &[z], |g, v| nt_xent(g, v[0], tau))?;
    }
    within(start.elapsed(), 60.0, "autodiff suite")?;
    Ok(format!(
        "{} checks over 17 ops, max relative error {:.1e}",
        c.checks, c.worst
    ))
}

// Protocol criteria drive the shipped binary.

const PROTOCOL: &str = r#"
[data]
source = "synthetic"
classes = 4
per_class = 100
side = 32
seed = 7

[ssl]
algorithm = "simclr"
epochs = 30

[sweep]
depths = ["d1"]
widths = [1]
seeds = [0]
"#;

fn hyperdiv(dir: &Path, args: &[&str]) -> Result<Output, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_hyperdiv"))
        .args(args)
        .env_remove("HYPERDIV_OUT")
        .env_remove("RUST_LOG")
        .current_dir(dir)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(out)
    } else {
        Err(format!(
            "hyperdiv {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn read(p: &Path) -> Result<Vec<u8>, String> {
    fs::read(p).map_err(|e| format!("{}: {e}", p.display()))
}

fn records(p: &Path) -> Result<RecordSet, String> {
    RecordSet::load(p).map_err(|e| e.to_string())
}

fn losses(stats: &Path) -> Result<Vec<f64>, String> {
    let text = String::from_utf8(read(stats)?).map_err(|e| e.to_string())?;
    text.lines()
        .skip(1)
        .map(|l| {
            l.split(',')
                .nth(1)
                .unwrap_or("")
                .parse::<f64>()
                .map_err(|e| e.to_string())
        })
        .collect()
}

fn protocol_reproduction(lab: &Path) -> Outcome {
    let start = Instant::now();
    fs::write(lab.join("protocol.toml"), PROTOCOL).map_err(|e| e.to_string())?;
    hyperdiv(lab, &["sweep", "-c", "protocol.toml", "-o", "protocol"])?;
    hyperdiv(lab, &["plot", "-o", "protocol"])?;
    let elapsed = start.elapsed();

    let set = records(&lab.join("protocol/records.csv"))?;
    let last = set.records().iter().max_by_key(|r| r.epoch).ok_or("no records")?;
    let loss = losses(&lab.join("protocol/stats").join(format!("{}.csv", last.fingerprint)))?;
    ensure(loss.len() == 30, || format!("{} epochs of stats", loss.len()))?;
    let ratio = loss[loss.len() - 1] / loss[0];
    for f in ["epoch_curves_w1.svg", "size_scan.svg", "algo_scatter.svg"] {
        ensure(lab.join("protocol/plots").join(f).exists(), || {
            format!("missing plot {f}")
        })?;
    }
    let summary = format!(
        "loss ratio {ratio:.3}, probe error {:.3} at epoch {}, pipeline {:.0}s",
        last.test_error,
        last.epoch,
        elapsed.as_secs_f64()
    );
    ensure(ratio <= 0.6 && last.test_error <= 0.5 && last.epoch == 30, || {
        summary.clone()
    })?;
    within(elapsed, 900.0, "pipeline")?;
    Ok(summary)
}

fn width_sanity(lab: &Path) -> Outcome {
    if !lab.join("protocol.toml").exists() {
        fs::write(lab.join("protocol.toml"), PROTOCOL).map_err(|e| e.to_string())?;
    }
    hyperdiv(
        lab,
        &[
            "sweep",
            "-c",
            "protocol.toml",
            "-o",
            "protocol",
            "--resume",
            "--set",
            "sweep.widths=[1, 2]",
            "--set",
            "sweep.seeds=[0, 1, 2, 3, 4]",
        ],
    )?;
    let set = records(&lab.join("protocol/records.csv"))?;
    let s = set.s()[0];
    let head = |width: usize, seed: u64| {
        set.records()
            .iter()
            .filter(|r| r.width == width && r.seed == seed)
            .max_by_key(|r| r.epoch)
            .and_then(|r| set.diversity(r, Tap::Head, s))
    };
    let mut wins = 0;
    let mut detail = Vec::new();
    for seed in 0..5 {
        let (w1, w2) = (
            head(1, seed).ok_or("missing width 1")?,
            head(2, seed).ok_or("missing width 2")?,
        );
        if w2 >= w1 {
            wins += 1;
        }
        detail.push(format!("seed {seed}: {w1:.2} vs {w2:.2}"));
    }
    let summary = format!("width 2 ≥ width 1 in {wins}/5 (s={s}; {})", detail.join(", "));
    ensure(wins >= 3, || summary.clone())?;
    Ok(summary)
}

fn kmeans_behaviour() -> Outcome {
    let mut r = rng(8);
    for inst in 0..100 {
        let n = r.random_range(4..60);
        let d = r.random_range(1..6);
        let k = r.random_range(1..=4.min(n));
        let x = tensor(&[n, d], &mut r);
        let km = kmeans(&x, k, 50, inst).map_err(|e| e.to_string())?;
        for w in km.objective.windows(2) {
            ensure(w[1] <= w[0], || {
                format!("instance {inst}: objective rose {} → {}", w[0], w[1])
            })?;
        }
    }
    let mut recovered = 0;
    for trial in 0..50u64 {
        let d = r.random_range(2..9);
        let spread = 1.0;
        let mut rows = Vec::new();
        let mut truth = Vec::new();
        for i in 0..50 {
            let c = i % 2;
            rows.push(
                (0..d)
                    .map(|j| normal(&mut r) * spread + if j == 0 && c == 1 { 10.0 * spread } else { 0.0 })
                    .collect(),
            );
            truth.push(c);
        }
        let km = kmeans(&Tensor::from_rows(&rows).unwrap(), 2, 100, trial).map_err(|e| e.to_string())?;
        let a = &km.assignments;
        if truth.iter().zip(a).all(|(t, x)| (*t == *x) == (truth[0] == a[0])) {
            recovered += 1;
        }
    }
    ensure(recovered == 50, || {
        format!("planted partition recovered in {recovered}/50 trials")
    })?;
    Ok("100 monotone objectives, 50/50 planted partitions".into())
}

/// Standard normal draw by Box-Muller.
fn normal(r: &mut ChaCha8Rng) -> f64 {
    let u: f64 = 1.0 - r.random::<f64>();
    let v: f64 = r.random();
    (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
}

const TINY: &str = r#"
[data]
classes = 3
per_class = 10
side = 16

[probe]
epochs = 10

[ssl]
epochs = 2

[sweep]
widths = [1, 2]
seeds = [0, 1]
"#;

fn same_files(a: &Path, b: &Path) -> Result<(), String> {
    let list = |d: &Path| -> Result<Vec<PathBuf>, String> {
        let mut v: Vec<PathBuf> = fs::read_dir(d)
            .map_err(|e| format!("{}: {e}", d.display()))?
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        v.sort();
        Ok(v)
    };
    let (la, lb) = (list(a)?, list(b)?);
    ensure(!la.is_empty(), || format!("no CSV files in {}", a.display()))?;
    ensure(
        la.iter().map(|p| p.file_name()).eq(lb.iter().map(|p| p.file_name())),
        || format!("{} and {} hold different files", a.display(), b.display()),
    )?;
    for (x, y) in la.iter().zip(&lb) {
        ensure(read(x)? == read(y)?, || {
            format!("{} differs from {}", x.display(), y.display())
        })?;
    }
    Ok(())
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let lab = tmp.path();
    fs::write(lab.join("tiny.toml"), TINY).map_err(|e| e.to_string())?;
    let mut compared = 0;
    for run in ["a", "b"] {
        hyperdiv(lab, &["train", "-c", "tiny.toml", "-o", &format!("train_{run}")])?;
        let ckpt = format!("train_{run}/encoder.hdv");
        hyperdiv(
            lab,
            &[
                "diversity",
                "-c",
                "tiny.toml",
                "--checkpoint",
                &ckpt,
                "--s",
                "0",
                "--s",
                "1",
                "--s",
                "2",
                "-o",
                &format!("div_{run}"),
            ],
        )?;
        hyperdiv(
            lab,
            &[
                "probe",
                "-c",
                "tiny.toml",
                "--checkpoint",
                &ckpt,
                "-o",
                &format!("probe_{run}"),
            ],
        )?;
    }
    for dir in ["train", "div", "probe"] {
        same_files(&lab.join(format!("{dir}_a")), &lab.join(format!("{dir}_b")))?;
        compared += 1;
    }
    ensure(
        read(&lab.join("train_a/encoder.hdv"))? == read(&lab.join("train_b/encoder.hdv"))?,
        || "checkpoints differ".into(),
    )?;
    for (out, jobs) in [("sweep_1", "1"), ("sweep_4", "4"), ("sweep_4b", "4")] {
        hyperdiv(lab, &["sweep", "-c", "tiny.toml", "-o", out, "--jobs", jobs])?;
    }
    for other in ["sweep_4", "sweep_4b"] {
        same_files(&lab.join("sweep_1"), &lab.join(other))?;
        same_files(&lab.join("sweep_1/stats"), &lab.join(other).join("stats"))?;
        compared += 2;
    }
    Ok(format!(
        "{compared} output directories byte-identical across reruns and --jobs 1/4"
    ))
}

fn early_stop_traces() -> Outcome {
    let cases: [(&[f64], usize, f64, EarlyStop); 3] = [
        (
            &[0.9, 0.8, 0.7, 0.6, 0.5],
            3,
            0.002,
            EarlyStop { stop_at: None, best: 4 },
        ),
        (
            &[0.5, 0.5, 0.5],
            2,
            0.001,
            EarlyStop {
                stop_at: Some(2),
                best: 0,
            },
        ),
        (
            &[0.5, 0.4, 0.45, 0.41, 0.42],
            3,
            0.002,
            EarlyStop {
                stop_at: Some(4),
                best: 1,
            },
        ),
    ];
    for (history, patience, min_delta, want) in cases {
        let got = early_stop(history, patience, min_delta).map_err(|e| e.to_string())?;
        ensure(got == want, || {
            format!("{history:?} P={patience}: got {got:?}, want {want:?}")
        })?;
    }
    Ok("decreasing: no stop, best last; flat: stop after 3rd, best 1st; bumpy: stop at 5th, best 2nd".into())
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let lab = tempfile::tempdir().expect("temp dir");
    let lab_path = lab.path().to_path_buf();
    let criteria: Vec<Criterion> = vec![
        (1, "energy oracle equivalence", Box::new(energy_oracle_equivalence)),
        (2, "analytic energy cases", Box::new(analytic_energy_cases)),
        (3, "energy invariances", Box::new(energy_invariances)),
        (4, "nt-xent correctness", Box::new(nt_xent_correctness)),
        (5, "autodiff suite", Box::new(autodiff_suite)),
        (
            6,
            "desk-scale protocol",
            Box::new({
                let p = lab_path.clone();
                move || protocol_reproduction(&p)
            }),
        ),
        (
            7,
            "width axis sanity",
            Box::new({
                let p = lab_path.clone();
                move || width_sanity(&p)
            }),
        ),
        (8, "kmeans", Box::new(kmeans_behaviour)),
        (9, "determinism", Box::new(determinism)),
        (10, "early-stop rule", Box::new(early_stop_traces)),
    ];

    panic::set_hook(Box::new(|_| {}));
    let mut failed = Vec::new();
    let mut ran = 0;
    for (n, name, run) in &criteria {
        if !wanted.is_empty() && !wanted.contains(n) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n} [{name}]: PASS ({detail}, {secs:.1}s)"),
            Err(detail) => {
                println!("criterion {n} [{name}]: FAIL ({detail}, {secs:.1}s)");
                failed.push(*n);
            }
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed.len());
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
