//! Acceptance suite. Every criterion is one test that writes a single
//! `acceptance NN PASS|FAIL <title>: <detail>` line to stderr (bypassing
//! output capture) and then asserts.
//!
//! Trained models are shared through a cache, and tests take a global lock
//! so wall-clock budgets are measured without competing threads.

use std::collections::HashMap;
use std::io::Write;
use std::panic::{catch_unwind, resume_unwind, AssertUnwindSafe};
use std::sync::{Arc, Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semalign_core::analysis::{cka_grid, compare_grids, trace_dataset, CkaGrid};
use semalign_core::attribution::{interpolation_weights, locate_student_partner, pair_layers, PairingPlan};
use semalign_core::baselines::{
    laten_inject, laten_transfer, seeking_lora_init, seeking_transfer, ExtractedBlock, NeuronDelta, NeuronSlices,
    SCORED_TENSORS,
};
use semalign_core::harness::{
    apply_method, attribute_and_pair, evaluate_accuracy, generate_dataset, run_pipeline, train_model, Dataset,
    ExperimentConfig, Method, TaskKind, TaskSpec,
};
use semalign_core::linalg::{default_rcond, linear_cka, orthonormalize_columns, pseudoinverse};
use semalign_core::model::backward;
use semalign_core::semantics::{
    compute_bases, input_bases, random_bases, validate_resolution, BasisSide, SemanticBasisSet,
};
use semalign_core::transfer::{
    build_targets, cosine_layer_loss, cosine_output_loss, run_transfer, semalign_total_loss, ConstructionRecord,
    SemAlignObjective, SupervisoryTarget, TransferConfig, TransferObjective, TransferResult,
};
use semalign_core::{LmConfig, LmParams, Matrix, TokenBatch};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn emit(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "\n{line}");
}

/// Runs `body`, prints the verdict line and fails the test on FAIL.
fn criterion(id: u32, title: &str, body: impl FnOnce() -> (bool, String)) {
    let _guard = serial();
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok((pass, detail)) => {
            emit(&format!(
                "acceptance {id:02} {} {title}: {detail}",
                if pass { "PASS" } else { "FAIL" }
            ));
            assert!(pass, "criterion {id} ({title}) failed: {detail}");
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            emit(&format!("acceptance {id:02} FAIL {title}: panicked: {msg}"));
            resume_unwind(panic);
        }
    }
}

fn within(start: Instant, limit_s: f64) -> (bool, f64) {
    let t = start.elapsed().as_secs_f64();
    (t < limit_s, t)
}

// ---------------------------------------------------------------------------
// Shared trained pairs

struct Trained {
    cfg: ExperimentConfig,
    data: Dataset,
    teacher: LmParams,
    student: LmParams,
    tb: SemanticBasisSet,
    sb: SemanticBasisSet,
    plan: PairingPlan,
    build_secs: f64,
}

type Key = (TaskKind, u64);
/// Transferred student, its result and the transfer runtime in seconds.
type Transferred = (LmParams, TransferResult, f64);
type Cache<K, V> = OnceLock<Mutex<HashMap<K, Arc<V>>>>;

fn trained_cache() -> &'static Mutex<HashMap<Key, Arc<Trained>>> {
    static CACHE: Cache<Key, Trained> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

fn transferred_cache() -> &'static Mutex<HashMap<(TaskKind, u64, Method), Arc<Transferred>>> {
    static CACHE: Cache<(TaskKind, u64, Method), Transferred> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

/// Default 8×128 → 4×64 pair trained on `task`, as the pipeline builds it.
fn trained(task: TaskKind, seed: u64) -> Arc<Trained> {
    let mut cache = trained_cache().lock().unwrap_or_else(|e| e.into_inner());
    cache
        .entry((task, seed))
        .or_insert_with(|| {
            let start = Instant::now();
            let cfg = ExperimentConfig::default_for(task, seed);
            let data = generate_dataset(&cfg.task).unwrap();
            let (teacher, _) = train_model(&cfg.teacher, &data.train, &cfg.teacher_training).unwrap();
            let pool = &data.train[..cfg.transfer.train_size.min(data.train.len())];
            let (student, _) = train_model(&cfg.student, pool, &cfg.student_training).unwrap();
            let tb = compute_bases(&teacher, BasisSide::Output, cfg.rcond).unwrap();
            let sb = compute_bases(&student, BasisSide::Output, cfg.rcond).unwrap();
            let attr = &data.train[..cfg.attribution_size];
            let (_, plan) = attribute_and_pair(&teacher, attr, cfg.student.n_layers, cfg.top_n).unwrap();
            Arc::new(Trained {
                cfg,
                data,
                teacher,
                student,
                tb,
                sb,
                plan,
                build_secs: start.elapsed().as_secs_f64(),
            })
        })
        .clone()
}

/// `method` applied to the cached pair.
fn transferred(task: TaskKind, seed: u64, method: Method) -> Arc<Transferred> {
    let t = trained(task, seed);
    let mut cache = transferred_cache().lock().unwrap_or_else(|e| e.into_inner());
    cache
        .entry((task, seed, method))
        .or_insert_with(|| {
            let start = Instant::now();
            let cfg = ExperimentConfig {
                method,
                ..t.cfg.clone()
            };
            let (m, r) = apply_method(&cfg, &t.teacher, &t.student, &t.plan, (&t.tb, &t.sb), &t.data.train).unwrap();
            Arc::new((m, r.expect("method produces a result"), start.elapsed().as_secs_f64()))
        })
        .clone()
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s[s.len() / 2]
}

fn tensor_prefix(k: usize) -> String {
    format!("blocks.{}.", k - 1)
}

// ---------------------------------------------------------------------------

#[test]
fn c01_pseudoinverse_moore_penrose() {
    criterion(1, "pseudoinverse Moore-Penrose conditions", || {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(0xa11ce);
        let mut worst = 0.0f64;
        let mut deficient = 0;
        for i in 0..100 {
            let (mut r, mut c) = (rng.random_range(1..=64), rng.random_range(1..=256));
            if i % 2 == 1 {
                std::mem::swap(&mut r, &mut c);
            }
            let a = if i % 4 == 0 && r.min(c) > 2 {
                deficient += 1;
                let k = rng.random_range(1..r.min(c));
                Matrix::random_normal(&mut rng, r, k, 1.0).matmul(&Matrix::random_normal(&mut rng, k, c, 1.0))
            } else {
                Matrix::random_normal(&mut rng, r, c, 1.0)
            };
            let p = pseudoinverse(&a, default_rcond(r, c)).unwrap();
            let ap = a.matmul(&p);
            let pa = p.matmul(&a);
            let errs = [
                ap.matmul(&a).sub(&a).frobenius_norm(),
                pa.matmul(&p).sub(&p).frobenius_norm(),
                ap.transpose().sub(&ap).frobenius_norm(),
                pa.transpose().sub(&pa).frobenius_norm(),
            ];
            worst = errs.iter().copied().fold(worst, f64::max);
        }
        let (fast, secs) = within(start, 5.0);
        (
            worst <= 1e-6 && fast,
            format!("100 matrices ({deficient} rank-deficient), worst Frobenius residual {worst:.2e}, {secs:.2}s"),
        )
    });
}

#[test]
fn c02_output_side_resolution() {
    criterion(2, "output-side recomposition cosine on the trained teacher", || {
        let t = trained(TaskKind::Copy, 0);
        let start = Instant::now();
        let out = compute_bases(&t.teacher, BasisSide::Output, t.cfg.rcond).unwrap();
        let inp = input_bases(&t.teacher.tok_emb, "teacher").unwrap();
        let rnd = random_bases(
            t.teacher.config.hidden_dim,
            t.teacher.config.vocab_size,
            t.teacher.config.seed ^ 0x5eed_ba5e,
            "teacher",
        )
        .unwrap();
        let val = &t.data.eval[..t.cfg.validation_size];
        let curve = validate_resolution(&t.teacher, val, &t.data.id(), &[&out, &inp, &rnd]).unwrap();
        let fmt = |side| {
            curve
                .side(side)
                .unwrap()
                .iter()
                .map(|v| format!("{v:.3}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let min = curve
            .side(BasisSide::Output)
            .unwrap()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        let (fast, secs) = within(start, 120.0);
        (
            min >= 0.8 && fast,
            format!(
                "output [{}] min {min:.3}; input [{}]; random [{}]; {secs:.1}s (+{:.1}s training)",
                fmt(BasisSide::Output),
                fmt(BasisSide::Input),
                fmt(BasisSide::Random),
                t.build_secs
            ),
        )
    });
}

/// Exact rational re-evaluation of `(lo, hi, λ)` as `(lo, hi, λ_num, den)`.
fn interpolation_oracle(k: usize, l_t: usize, l_s: usize) -> (usize, usize, usize, usize) {
    let num = l_t * k;
    let lo = (num / l_s).min(l_t - 1).max(1);
    let frac = (num as i64 - (lo * l_s) as i64).clamp(0, l_s as i64) as usize;
    (lo, lo + 1, frac, l_s)
}

#[test]
fn c03_pairing_formulas() {
    criterion(3, "pairing formulas", || {
        let start = Instant::now();
        let mut failures = Vec::new();
        // Hand-evaluated 20 → 10.
        let map = pair_layers(20, 10);
        if map != [2, 4, 6, 8, 10, 12, 14, 16, 18, 20] {
            failures.push(format!("20/10 mapping {map:?}"));
        }
        let partners: Vec<usize> = (1..=20).map(|c| locate_student_partner(c, &map)).collect();
        if partners != [1, 1, 2, 2, 3, 3, 4, 4, 5, 5, 6, 6, 7, 7, 8, 8, 9, 9, 10, 10] {
            failures.push(format!("20/10 partners {partners:?}"));
        }
        let hand: [(usize, usize, f64); 10] = [
            (2, 3, 0.0),
            (4, 5, 0.0),
            (6, 7, 0.0),
            (8, 9, 0.0),
            (10, 11, 0.0),
            (12, 13, 0.0),
            (14, 15, 0.0),
            (16, 17, 0.0),
            (18, 19, 0.0),
            (19, 20, 1.0),
        ];
        for (k, want) in (1..=10).zip(hand) {
            if interpolation_weights(k, 20, 10) != want {
                failures.push(format!("20/10 k={k}: {:?}", interpolation_weights(k, 20, 10)));
            }
        }
        if interpolation_weights(2, 7, 3) != (4, 5, 2.0 / 3.0) {
            failures.push(format!("7/3 k=2: {:?}", interpolation_weights(2, 7, 3)));
        }
        // Exhaustive sweep.
        let mut checked = 0usize;
        for l_t in 1..=32usize {
            for l_s in 1..=l_t {
                let map = pair_layers(l_t, l_s);
                for k in 1..=l_s {
                    let direct = ((l_t * k) / l_s).max(1);
                    if map[k - 1] != direct {
                        failures.push(format!("ℓ({l_t},{l_s},{k}) = {} vs {direct}", map[k - 1]));
                    }
                    if l_t >= 2 {
                        let (lo, hi, num, den) = interpolation_oracle(k, l_t, l_s);
                        let want = (lo, hi, num as f64 / den as f64);
                        if interpolation_weights(k, l_t, l_s) != want {
                            failures.push(format!("interp({k},{l_t},{l_s})"));
                        }
                    }
                    checked += 1;
                }
                for c in 1..=l_t {
                    let want = (1..=l_s).find(|&k| ((l_t * k) / l_s).max(1) >= c).unwrap_or(l_s);
                    if locate_student_partner(c, &map) != want {
                        failures.push(format!("partner({c},{l_t},{l_s})"));
                    }
                    checked += 1;
                }
            }
        }
        let (fast, secs) = within(start, 5.0);
        failures.truncate(5);
        (
            failures.is_empty() && fast,
            format!("20/10 and 7/3 by hand, {checked} sweep cases, {secs:.3}s; mismatches {failures:?}"),
        )
    });
}

#[test]
fn c04_composite_gradient() {
    criterion(4, "composite objective gradient vs central differences", || {
        let start = Instant::now();
        let spec = TaskSpec {
            train_size: 4,
            eval_size: 0,
            alphabet: 8,
            ..TaskSpec::new(TaskKind::Copy, 16, 3, 4)
        };
        let data = generate_dataset(&spec).unwrap();
        let batch = TokenBatch::from_examples(&data.train).unwrap();
        let teacher = LmParams::init(&LmConfig::new(3, 16, 2, 16, 8, 11)).unwrap();
        let mut student = LmParams::init(&LmConfig::new(2, 8, 2, 16, 8, 12)).unwrap();
        for b in &mut student.blocks {
            b.w2.scale(4.0);
        }
        let tb = compute_bases(&teacher, BasisSide::Output, None).unwrap();
        let sb = compute_bases(&student, BasisSide::Output, None).unwrap();
        let plan = PairingPlan::new(3, 2).unwrap();
        let mut worst = 0.0f64;
        let mut count = 0usize;
        for k in 1..=2 {
            let target = build_targets(&teacher, &tb, &sb, plan.entry(k).unwrap(), &batch).unwrap();
            let obj = SemAlignObjective {
                targets: vec![&target],
                label_smoothing: 0.0,
            };
            let g = backward(&student, &batch, &obj).unwrap();
            let h = 1e-5;
            for name in student.tensor_names() {
                let len = student.tensor(&name).unwrap().len();
                for idx in 0..len {
                    let mut plus = student.clone();
                    plus.tensor_mut(&name).unwrap().as_mut_slice()[idx] += h;
                    let mut minus = student.clone();
                    minus.tensor_mut(&name).unwrap().as_mut_slice()[idx] -= h;
                    let fd = (semalign_total_loss(&plus, &batch, &target).unwrap().total
                        - semalign_total_loss(&minus, &batch, &target).unwrap().total)
                        / (2.0 * h);
                    let an = g.params.tensor(&name).unwrap().as_slice()[idx];
                    let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                    worst = worst.max(rel);
                    count += 1;
                }
            }
        }
        let (fast, secs) = within(start, 30.0);
        (
            worst <= 1e-4 && fast,
            format!("{count} coordinates (every student parameter, k = 1, 2), worst rel. err {worst:.2e}, {secs:.1}s"),
        )
    });
}

/// Tensors changed between `a` and `b` that lie outside block `k`.
fn outside_block(a: &LmParams, b: &LmParams, k: usize) -> Vec<String> {
    let prefix = tensor_prefix(k);
    a.diff_census(b)
        .into_iter()
        .map(|(n, _)| n)
        .filter(|n| !n.starts_with(&prefix))
        .collect()
}

#[test]
fn c05_layer_restriction() {
    criterion(5, "transfer updates only block k", || {
        let mut runs = 0;
        let mut bad = Vec::new();
        // Default pair, both objectives.
        for method in [Method::Semalign, Method::OutputOnly] {
            let t = trained(TaskKind::Copy, 0);
            let run = transferred(TaskKind::Copy, 0, method);
            let k = run.1.student_layers[0];
            let out = outside_block(&t.student, &run.0, k);
            if !out.is_empty() || t.student.diff_census(&run.0).is_empty() || run.1.student_layers.len() != 1 {
                bad.push(format!("{method}: k={k} outside {out:?}"));
            }
            runs += 1;
        }
        // 7/3 pairing, every critical layer, direct and adapter updates.
        let spec = TaskSpec {
            train_size: 32,
            eval_size: 0,
            alphabet: 8,
            ..TaskSpec::new(TaskKind::Copy, 16, 3, 5)
        };
        let data = generate_dataset(&spec).unwrap();
        let teacher = LmParams::init(&LmConfig::new(7, 16, 2, 16, 8, 21)).unwrap();
        let student = LmParams::init(&LmConfig::new(3, 8, 2, 16, 8, 22)).unwrap();
        let tb = compute_bases(&teacher, BasisSide::Output, None).unwrap();
        let sb = compute_bases(&student, BasisSide::Output, None).unwrap();
        for critical in 1..=7 {
            let plan = PairingPlan::from_critical(7, 3, &[critical]).unwrap();
            let k = plan.pairs[0].student_k;
            for adapter_rank in [None, Some(2)] {
                let cfg = TransferConfig {
                    steps: 3,
                    align_size: 16,
                    train_size: 32,
                    batch_size: 8,
                    adapter_rank,
                    ..TransferConfig::default()
                };
                let (after, result) = run_transfer(
                    &teacher,
                    &student,
                    &plan,
                    (&tb, &sb),
                    &data.train,
                    &cfg,
                    TransferObjective::SemAlign,
                )
                .unwrap();
                let out = outside_block(&student, &after, k);
                if !out.is_empty() || result.student_layers != [k] || student.diff_census(&after).is_empty() {
                    bad.push(format!("7/3 critical {critical} rank {adapter_rank:?}: {out:?}"));
                }
                runs += 1;
            }
        }
        (
            bad.is_empty(),
            format!("{runs} transfer runs, bitwise census; violations {bad:?}"),
        )
    });
}

fn target_rows(y: Matrix) -> SupervisoryTarget {
    SupervisoryTarget {
        student_layer_k: 1,
        rows: (0..y.rows()).collect(),
        targets: y,
        excluded_rows: Vec::new(),
        record: ConstructionRecord {
            teacher_lo: 1,
            teacher_hi: 2,
            lambda: 0.0,
            teacher_bases_checksum: String::new(),
            student_bases_checksum: String::new(),
        },
    }
}

#[test]
fn c06_loss_surrogate_invariances() {
    criterion(6, "loss surrogate invariances", || {
        let mut rng = ChaCha8Rng::seed_from_u64(0x1055);
        let mut worst_scale = 0.0f64;
        let mut range = (f64::INFINITY, f64::NEG_INFINITY);
        for _ in 0..1000 {
            let n = rng.random_range(1..=12);
            let v = rng.random_range(2..=40);
            let d = rng.random_range(1..=16);
            let mag = 10f64.powf(rng.random_range(-4.0..4.0));
            let z = Matrix::random_normal(&mut rng, n, v, mag);
            let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..v)).collect();
            let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
            mask[rng.random_range(0..n)] = true;
            let batch = TokenBatch::new(1, n, vec![0; n], targets, mask).unwrap();
            let out = cosine_output_loss(&z, &batch).unwrap();
            let c = 10f64.powf(rng.random_range(-3.0..3.0));
            worst_scale = worst_scale.max((cosine_output_loss(&z.scaled(c), &batch).unwrap() - out).abs());
            let h = Matrix::random_normal(&mut rng, n, d, mag);
            let y = if rng.random_bool(0.1) {
                h.scaled(-2.0)
            } else {
                Matrix::random_normal(&mut rng, n, d, 1.0)
            };
            let layer = cosine_layer_loss(&h, &target_rows(y)).unwrap();
            for l in [out, layer] {
                range = (range.0.min(l), range.1.max(l));
            }
        }
        let in_range = range.0 >= 0.0 && range.1 <= 2.0;
        (
            worst_scale <= 1e-9 && in_range,
            format!(
                "1000 random inputs: max |ℒ_out(cz) − ℒ_out(z)| {worst_scale:.2e}; losses within [{:.4}, {:.4}]",
                range.0, range.1
            ),
        )
    });
}

#[test]
fn c07_cka_suite() {
    criterion(7, "CKA identities, invariances and teacher-student diagonal", || {
        let t = trained(TaskKind::Copy, 0);
        let start = Instant::now();
        let data = &t.data.eval[..t.cfg.cka_size];
        let tt = trace_dataset(&t.teacher, data, 64).unwrap();
        let st = trace_dataset(&t.student, data, 64).unwrap();
        let mut diag_err = 0.0f64;
        for (tr, label) in [(&tt, "teacher"), (&st, "student")] {
            let g = cka_grid(tr, tr, (label, label), "self").unwrap();
            for i in 0..g.shape().0 {
                diag_err = diag_err.max((g.values[(i, i)] - 1.0).abs());
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0xc4a);
        let mut inv_err = 0.0f64;
        for _ in 0..20 {
            let n = rng.random_range(8..=96);
            let (dx, dy) = (rng.random_range(2..=32), rng.random_range(2..=32));
            let x = Matrix::random_normal(&mut rng, n, dx, 1.0);
            let y = Matrix::random_normal(&mut rng, n, dy, 1.0)
                .add(&x.select_cols(&[0]).matmul(&Matrix::filled(1, dy, 1.0)));
            let q = orthonormalize_columns(&Matrix::random_normal(&mut rng, dx, dx, 1.0));
            let base = linear_cka(&x, &y).unwrap();
            let c = 10f64.powf(rng.random_range(-3.0..3.0));
            for v in [
                linear_cka(&x.matmul(&q), &y).unwrap(),
                linear_cka(&x.scaled(c), &y).unwrap(),
            ] {
                inv_err = inv_err.max((v - base).abs());
            }
        }
        let cross = cka_grid(&tt, &st, ("teacher", "student"), "before").unwrap();
        let mono = cross.monotone_fraction();
        let (fast, secs) = within(start, 120.0);
        (
            diag_err <= 1e-9 && inv_err <= 1e-6 && mono >= 0.8 && fast,
            format!(
                "self diagonal err {diag_err:.2e}; orthogonal/scale err {inv_err:.2e}; teacher-student argmax {:?} \
                 monotone {mono:.3}; {secs:.1}s",
                cross.row_argmax()
            ),
        )
    });
}

#[test]
fn c08_alignment_stability() {
    criterion(8, "teacher-student CKA pattern survives alignment", || {
        let t = trained(TaskKind::Copy, 0);
        let after = transferred(TaskKind::Copy, 0, Method::Semalign);
        let start = Instant::now();
        let data = &t.data.eval[..t.cfg.cka_size];
        let tt = trace_dataset(&t.teacher, data, 64).unwrap();
        let grid = |m: &LmParams, cond: &str| -> CkaGrid {
            cka_grid(&tt, &trace_dataset(m, data, 64).unwrap(), ("teacher", "student"), cond).unwrap()
        };
        let before = grid(&t.student, "before");
        let aft = grid(&after.0, "after");
        let delta = compare_grids(&before, &aft).unwrap();
        let mono = aft.monotone_fraction();
        let (fast, secs) = within(start, 120.0);
        (
            mono >= 0.8 && fast,
            format!(
                "Frobenius ‖after − before‖ {:.4} (max |Δ| {:.4}); after argmax {:?} monotone {mono:.3} \
                 (before {:.3}); {secs:.1}s",
                delta.frobenius,
                delta.max_abs,
                aft.row_argmax(),
                before.monotone_fraction()
            ),
        )
    });
}

#[test]
fn c09_directional_transfer() {
    criterion(9, "SemAlign vs output-only student at equal budget", || {
        let mut secs = 0.0;
        let mut pass = true;
        let mut parts = Vec::new();
        for task in [TaskKind::Copy, TaskKind::ModularSum] {
            let (mut teacher, mut base, mut sem, mut out) = (vec![], vec![], vec![], vec![]);
            for seed in 0..3 {
                let t = trained(task, seed);
                let s = transferred(task, seed, Method::Semalign);
                let o = transferred(task, seed, Method::OutputOnly);
                let start = Instant::now();
                teacher.push(evaluate_accuracy(&t.teacher, &t.data.eval).unwrap());
                base.push(evaluate_accuracy(&t.student, &t.data.eval).unwrap());
                sem.push(evaluate_accuracy(&s.0, &t.data.eval).unwrap());
                out.push(evaluate_accuracy(&o.0, &t.data.eval).unwrap());
                secs += t.build_secs + s.2 + o.2 + start.elapsed().as_secs_f64();
                assert_eq!(s.1.loss_curve.len(), o.1.loss_curve.len(), "equal step budgets");
            }
            let (mt, ms, mo) = (median(&teacher), median(&sem), median(&out));
            let ok = ms >= mo && mt >= ms && mt >= mo;
            pass &= ok;
            parts.push(format!(
                "{task}: teacher {mt:.3} semalign {ms:.3} output-only {mo:.3} (base {:.3}) per-seed sem {sem:.3?} out {out:.3?}",
                median(&base)
            ));
        }
        let fast = secs < 900.0;
        (pass && fast, format!("{}; {secs:.0}s", parts.join("; ")))
    });
}

#[test]
fn c10_baseline_fidelity() {
    criterion(10, "Seeking and LaTen fidelity", || {
        let start = Instant::now();
        let mut notes = Vec::new();
        let mut pass = true;

        // Eckart–Young on blocks with known spectra.
        let mut rng = ChaCha8Rng::seed_from_u64(0xec7);
        let mut ey = 0.0f64;
        for (n, m) in [(24, 16), (16, 24), (32, 32)] {
            let p = n.min(m);
            let u = orthonormalize_columns(&Matrix::random_normal(&mut rng, n, p, 1.0));
            let v = orthonormalize_columns(&Matrix::random_normal(&mut rng, m, p, 1.0));
            let s: Vec<f64> = (0..p).map(|i| 3.0 * 0.8f64.powi(i as i32)).collect();
            let w = u.matmul(&Matrix::from_diag(&s)).matmul(&v.transpose());
            let block = ExtractedBlock {
                source_layer: 1,
                row_indices: (0..n).collect(),
                col_indices: (0..m).collect(),
                block: w.clone(),
                cumulative_score: 0.0,
            };
            for r in 1..=p {
                let pair = seeking_lora_init(&block, r).unwrap();
                let err = w.sub(&pair.product()).frobenius_norm();
                let optimal = s[r..].iter().map(|x| x * x).sum::<f64>().sqrt();
                ey = ey.max((err - optimal).abs());
            }
        }
        pass &= ey <= 1e-8;
        notes.push(format!("Eckart-Young gap {ey:.2e}"));

        let t = trained(TaskKind::Copy, 0);
        // Seeking: untouched tensors stay bitwise, adapted ones equal base + BA.
        let seek = seeking_transfer(&t.teacher, &t.student, &t.data.train, &t.cfg.seeking).unwrap();
        let merged = seek.adapters.merged(&t.student).unwrap();
        let stray: Vec<String> = t
            .student
            .diff_census(&seek.model)
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| {
                !SCORED_TENSORS
                    .iter()
                    .any(|s| n.starts_with("blocks.") && n.ends_with(&format!(".{s}")))
            })
            .collect();
        let seek_ok = stray.is_empty() && merged.diff_census(&seek.model).is_empty();
        pass &= seek_ok;
        notes.push(format!(
            "Seeking stray tensors {stray:?}, merge exact {}",
            merged.diff_census(&seek.model).is_empty()
        ));

        // LaTen injection touches only the chosen neuron slices.
        let mut rng = ChaCha8Rng::seed_from_u64(0x1a7e);
        let small = LmParams::init(&LmConfig::new(3, 8, 2, 16, 8, 31)).unwrap();
        let f = small.config.ffn_dim();
        let deltas = NeuronDelta {
            hidden_dim: 8,
            layers: vec![NeuronSlices {
                layer_index: 2,
                neurons: vec![1, 5, 9],
                values: Matrix::random_normal(&mut rng, 3, 16, 1.0),
            }],
        };
        let injected = laten_inject(&small, &deltas).unwrap();
        let local = injection_is_local(&small, &injected, &[(2, vec![1, 5, 9])], f);
        pass &= local;

        // LaTen on the copy pair: locality of the real run and loss decrease.
        let (model, report, result) = laten_transfer(&t.teacher, &t.student, &t.data.train, &t.cfg.laten).unwrap();
        let slots: Vec<(usize, Vec<usize>)> =
            serde_json::from_value::<Vec<Vec<usize>>>(result.extra["student_neurons"].clone())
                .unwrap()
                .into_iter()
                .enumerate()
                .map(|(l, n)| (l + 1, n))
                .collect();
        let real_local = injection_is_local(&t.student, &model, &slots, t.student.config.ffn_dim());
        let first = report.losses[0];
        let best = report.losses[report.best_step];
        let decreased = best < first;
        pass &= real_local && decreased;
        notes.push(format!(
            "LaTen injection local (synthetic {local}, copy run {real_local}); align loss first {first:.6} best {best:.6} at step {}",
            report.best_step
        ));

        let (fast, secs) = within(start, 600.0);
        (pass && fast, format!("{}; {secs:.1}s", notes.join("; ")))
    });
}

/// Every element outside W1 columns / W2 rows of `slots` is bitwise equal.
fn injection_is_local(before: &LmParams, after: &LmParams, slots: &[(usize, Vec<usize>)], f: usize) -> bool {
    for (name, a) in before.tensors() {
        let b = after.tensor(&name).unwrap();
        for (idx, (x, y)) in a.as_slice().iter().zip(b.as_slice()).enumerate() {
            if x.to_bits() == y.to_bits() {
                continue;
            }
            let allowed = slots.iter().any(|(layer, neurons)| {
                let p = tensor_prefix(*layer);
                if name == format!("{p}w1") {
                    neurons.contains(&(idx % f))
                } else if name == format!("{p}w2") {
                    neurons.contains(&(idx / a.cols()))
                } else {
                    false
                }
            });
            if !allowed {
                return false;
            }
        }
    }
    true
}

#[test]
fn c11_pipeline_determinism() {
    criterion(11, "pipeline reruns reproduce manifest checksums", || {
        let mut notes = Vec::new();
        let mut pass = true;
        for method in [Method::Semalign, Method::Seeking, Method::Laten, Method::None] {
            let mut cfg = ExperimentConfig::default_for(TaskKind::ModularSum, 17);
            cfg.teacher = LmConfig::new(4, 32, 2, 32, 10, 0);
            cfg.student = LmConfig::new(2, 16, 2, 32, 10, 0);
            cfg.task.vocab_size = 32;
            cfg.task.train_size = 256;
            cfg.task.eval_size = 64;
            cfg.teacher_training.steps = 40;
            cfg.student_training.steps = 20;
            cfg.transfer.steps = 20;
            cfg.transfer.align_size = 64;
            cfg.transfer.train_size = 256;
            cfg.seeking.steps = 20;
            cfg.laten.steps = 10;
            cfg.method = method;
            cfg.set_seed(17);
            let runs: Vec<_> = (0..2)
                .map(|_| {
                    let dir = tempfile::tempdir().unwrap();
                    cfg.output_dir = Some(dir.path().to_path_buf());
                    let m = run_pipeline(&cfg).unwrap();
                    (m, dir)
                })
                .collect();
            let (a, b) = (&runs[0].0, &runs[1].0);
            let same = a.failed.is_none()
                && a.checksum == a.compute_checksum()
                && a.checksum == b.checksum
                && a.artifacts
                    .iter()
                    .map(|x| &x.sha256)
                    .eq(b.artifacts.iter().map(|x| &x.sha256));
            pass &= same;
            notes.push(format!(
                "{method} {} ({} artifacts)",
                &a.checksum[..12],
                a.artifacts.len()
            ));
        }
        (pass, notes.join(", "))
    });
}
