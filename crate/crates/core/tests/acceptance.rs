//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits with
//! a non-zero status if any criterion fails. Pass criterion numbers as
//! arguments to run a subset: `cargo test --test acceptance -- 1 9`.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use polartensor::autodiff::{Matrix, Tape};
use polartensor::data::{make_splits, synthetic_dataset, DatasetRecord, Split, Teacher};
use polartensor::eval::{equiv_test, metrics, residual};
use polartensor::graph::Molecule;
use polartensor::model::{param_count, GraphBatch, Model, ModelConfig, Readout};
use polartensor::rng::{stream_rng, Stream};
use polartensor::runconfig::RunConfig;
use polartensor::tensor::{asymmetry, conjugate, decompose, frob_norm, sample_rotation, Mat3, Vec3};
use polartensor::train::{TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn molecules(n: usize, seed: u64, teacher: &Teacher) -> Vec<Molecule> {
    synthetic_dataset(n, seed, teacher).into_iter().map(|r| r.molecule).collect()
}

fn random_sym(rng: &mut ChaCha8Rng) -> Mat3 {
    let a = Mat3::from_fn(|_, _| rng.random_range(-5.0..5.0));
    (a + a.transpose()) * 0.5
}

fn c1_equivariance() -> Outcome {
    let start = Instant::now();
    let mols = molecules(50, 11, &Teacher::default());
    let base = Model::<f64>::init(ModelConfig::toy(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let e64 = equiv_test(&base, &mols, 64, 0).unwrap().eps_equiv;
    let e32 = equiv_test(&base.cast::<f32>(), &mols, 64, 0).unwrap().eps_equiv;
    let secs = start.elapsed().as_secs_f64();
    outcome(
        e32 < 1e-4 && e64 < 1e-9 && secs < 60.0,
        format!("f32 eps={e32:.3e} (<1e-4), f64 eps={e64:.3e} (<1e-9), {secs:.1}s (<60s)"),
    )
}

fn c2_decomposition() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let tensors: Vec<Mat3> = (0..1000).map(|_| random_sym(&mut rng)).collect();
    let rots: Vec<_> = (0..100).map(|_| sample_rotation(&mut rng)).collect();
    let mut recon = 0.0f64;
    let (mut inv, mut cov) = (0.0f64, 0.0f64);
    for (k, a) in tensors.iter().enumerate() {
        let d = decompose(a).unwrap();
        recon = recon.max(frob_norm(&(d.reconstruct() - a)));
        if k < 100 {
            for r in &rots {
                let dr = decompose(&conjugate(r, a)).unwrap();
                inv = inv.max((dr.iso - d.iso).abs());
                cov = cov.max(frob_norm(&(dr.aniso - conjugate(r, &d.aniso))));
            }
        }
    }
    outcome(
        recon < 1e-12 && inv < 1e-10 && cov < 1e-10,
        format!("reconstruct max={recon:.2e} (<1e-12), l=0 invariance max={inv:.2e}, l=2 covariance max={cov:.2e} (<1e-10)"),
    )
}

fn c3_pythagoras() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let s = residual(&random_sym(&mut rng), &random_sym(&mut rng));
        worst = worst.max((s.frob.powi(2) - 3.0 * s.iso.powi(2) - s.aniso_frob.powi(2)).abs());
    }
    outcome(worst < 1e-10, format!("max |lhs - rhs|={worst:.2e} over 1000 pairs (<1e-10)"))
}

fn c4_gradients() -> Outcome {
    let start = Instant::now();
    let mols = molecules(2, 4, &Teacher::default());
    let refs: Vec<&Molecule> = mols.iter().collect();
    let base = Model::<f64>::init(ModelConfig::toy(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let batch = GraphBatch::new(&refs, base.config.cutoff, base.config.num_rbf).unwrap();
    let weights: Vec<f64> = (0..18).map(|i| (i as f64 * 0.61).cos()).collect();
    let objective = |m: &Model<f64>, grads: bool| {
        let mut tape = Tape::new();
        let p = m.bind(&mut tape, grads);
        let y = m.forward(&mut tape, &p, &batch, None).unwrap();
        let w = tape.constant(Matrix::from_vec(18, 1, weights.clone()).unwrap());
        let prod = tape.mul(y, w).unwrap();
        let loss = tape.sum_all(prod);
        let value = tape.value(loss).get(0, 0);
        let g = grads.then(|| {
            let g = tape.backward(loss).unwrap();
            p.vars()
                .iter()
                .map(|(name, v)| (name.clone(), g.get(*v).cloned()))
                .collect::<Vec<_>>()
        });
        (value, g)
    };
    let grads = objective(&base, true).1.unwrap();
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let analytic = |name: &str, idx: usize| {
        grads
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, g)| g.as_ref().map(|g| g.data()[idx]))
            .unwrap_or(0.0)
    };
    // parameters whose gradient is below the finite-difference resolution
    // are redrawn
    let (mut worst, mut checked, mut skipped) = (0.0f64, 0, 0);
    while checked < 100 {
        let flat = rng.random_range(0..base.params.numel());
        let (name, idx) = base.params.locate(flat).unwrap();
        let name = name.to_string();
        let a = analytic(&name, idx);
        if a.abs() < 1e-8 {
            skipped += 1;
            continue;
        }
        let mut plus = base.clone();
        plus.params.get_mut(&name).unwrap().data_mut()[idx] += h;
        let mut minus = base.clone();
        minus.params.get_mut(&name).unwrap().data_mut()[idx] -= h;
        let numeric = (objective(&plus, false).0 - objective(&minus, false).0) / (2.0 * h);
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()));
        checked += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-4 && secs < 300.0,
        format!("max rel err={worst:.2e} (<1e-4) over {checked} params ({skipped} redrawn with |grad| < 1e-8), {secs:.1}s (<300s)"),
    )
}

fn c5_overfit() -> Outcome {
    let start = Instant::now();
    let mols = molecules(64, 7, &Teacher::with_environment());
    let mut config = ModelConfig::toy();
    config.fit_output_stats(&mols).unwrap();
    let model = Model::<f32>::init(config, &mut stream_rng(0, Stream::Init)).unwrap();
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 8,
        lr: 3e-3,
        warmup_steps: 50,
        ema_decay: 0.99,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(model, cfg).unwrap();
    let mut losses = Vec::new();
    for _ in 0..200 {
        losses.push(t.train_epoch(&mols).unwrap().0);
    }
    let best = losses.iter().cloned().fold(f64::INFINITY, f64::min);
    let ratio = best / losses[0];
    let secs = start.elapsed().as_secs_f64();
    outcome(
        ratio < 0.05 && secs < 900.0,
        format!(
            "epoch-1 loss={:.4}, best loss={best:.4}, ratio={ratio:.4} (<0.05), {secs:.1}s (<900s)",
            losses[0]
        ),
    )
}

const SEEDS: [u64; 5] = [0, 21, 42, 63, 84];

#[derive(Clone, Copy, PartialEq)]
enum Variant {
    Vv,
    RrOnly,
    Painn,
}

fn variant_config(v: Variant) -> ModelConfig {
    let mut c = ModelConfig::toy();
    match v {
        Variant::Vv => {}
        Variant::RrOnly => {
            c.vv = false;
            c.rr = true;
        }
        Variant::Painn => {
            c.tensor_channels = 0;
            c.vv = false;
            c.use_sym = false;
            c.use_tl = false;
            c.use_lora = false;
            c.readout = Readout::PainnReadout;
            // hidden width closest to the tensor-channel parameter count
            let target = param_count(&ModelConfig::toy()) as i64;
            c.hidden = (8..=128)
                .min_by_key(|&h| {
                    let mut t = c.clone();
                    t.hidden = h;
                    (param_count(&t) as i64 - target).abs()
                })
                .unwrap();
        }
    }
    c
}

struct AblationRun {
    seed: u64,
    vv: f64,
    rr: f64,
    painn: f64,
}

/// Test aniso_frob_mae of the final moving-average weights.
fn train_and_score(v: Variant, records: &[DatasetRecord], seed: u64) -> f64 {
    let manifest = make_splits(records, seed, [0.8, 0.1, 0.1]).unwrap();
    let pick = |s| -> Vec<Molecule> { manifest.select(records, s).into_iter().map(|r| r.molecule.clone()).collect() };
    let (train, val, test) = (pick(Split::Train), pick(Split::Val), pick(Split::Test));
    let mut config = variant_config(v);
    config.fit_output_stats(&train).unwrap();
    let model = Model::<f32>::init(config, &mut stream_rng(seed, Stream::Init)).unwrap();
    let cfg = TrainConfig {
        epochs: 20,
        batch_size: 16,
        lr: 2e-3,
        warmup_steps: 100,
        ema_decay: 0.99,
        seed,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(model, cfg).unwrap();
    t.run(&train, &val, None, None).unwrap();
    let preds = t.ema_model().predict_many(&test, 64).unwrap();
    let targets: Vec<Mat3> = test.iter().map(|m| m.target_alpha.unwrap()).collect();
    metrics(&preds, &targets).unwrap().aniso_frob_mae
}

fn ablation_runs() -> &'static [AblationRun] {
    static RUNS: std::sync::OnceLock<Vec<AblationRun>> = std::sync::OnceLock::new();
    RUNS.get_or_init(|| {
        let records = synthetic_dataset(2000, 2024, &Teacher::with_environment());
        SEEDS
            .iter()
            .map(|&seed| {
                let run = AblationRun {
                    seed,
                    vv: train_and_score(Variant::Vv, &records, seed),
                    rr: train_and_score(Variant::RrOnly, &records, seed),
                    painn: train_and_score(Variant::Painn, &records, seed),
                };
                println!(
                    "       seed {:>2}: aniso_frob_mae vv={:.4} rr_only={:.4} painn={:.4}",
                    run.seed, run.vv, run.rr, run.painn
                );
                run
            })
            .collect()
    })
}

fn matched(a: &ModelConfig, b: &ModelConfig) -> (bool, usize, usize) {
    let (pa, pb) = (param_count(a), param_count(b));
    ((pb as f64 / pa as f64 - 1.0).abs() <= 0.05, pa, pb)
}

fn c6_vv_beats_rr() -> Outcome {
    let (ok, pv, pr) = matched(&variant_config(Variant::Vv), &variant_config(Variant::RrOnly));
    let wins = ablation_runs().iter().filter(|r| r.vv < r.rr).count();
    outcome(
        ok && wins >= 4,
        format!("vv < rr_only on {wins}/5 seeds (>=4), params {pv} vs {pr} (+-5%)"),
    )
}

fn c7_tensor_readout_vs_painn() -> Outcome {
    let (ok, pv, pp) = matched(&variant_config(Variant::Vv), &variant_config(Variant::Painn));
    let wins = ablation_runs().iter().filter(|r| r.vv <= r.painn).count();
    outcome(
        ok && wins >= 4,
        format!("tensor-channel <= painn on {wins}/5 seeds (>=4), params {pv} vs {pp} (+-5%)"),
    )
}

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn c8_param_parity() -> Outcome {
    let target = 5.42e6;
    let count = |f: &str| param_count(&RunConfig::load(configs_dir().join(f), &[]).unwrap().model);
    let (full, painn) = (count("full.cfg"), count("painn_baseline.cfg"));
    let within = |n: usize| (n as f64 / target - 1.0).abs() <= 0.05;
    outcome(
        within(full) && within(painn),
        format!(
            "full.cfg={full} ({:+.2}%), painn_baseline.cfg={painn} ({:+.2}%) vs 5.42e6 (+-5%)",
            100.0 * (full as f64 / target - 1.0),
            100.0 * (painn as f64 / target - 1.0)
        ),
    )
}

fn c9_structural_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut geo_rng = ChaCha8Rng::seed_from_u64(90);
    let mols: Vec<Molecule> = (0..10)
        .map(|k| {
            let n = geo_rng.random_range(2..12);
            let (z, pos) = polartensor::data::random_geometry(&mut geo_rng, n);
            Molecule::new(format!("r{k}"), z, pos, None).unwrap()
        })
        .collect();
    let (mut trace, mut asym, mut out_asym) = (0.0f64, 0.0f64, 0.0f64);
    let mut tl_off = ModelConfig::toy();
    tl_off.use_tl = false;
    for config in [ModelConfig::toy(), tl_off] {
        let model = Model::<f32>::init(config.clone(), &mut rng).unwrap();
        for mol in &mols {
            for st in model.atom_states(mol).unwrap() {
                for atom in 0..mol.len() {
                    for c in 0..config.tensor_channels {
                        let t = st.tensor(atom, c).unwrap();
                        asym = asym.max(frob_norm(&(t - t.transpose())));
                        if config.use_tl {
                            trace = trace.max(t.trace().abs());
                        }
                    }
                }
            }
            out_asym = out_asym.max(asymmetry(&model.predict(mol).unwrap()));
        }
    }
    let shifted = mols[0].translated(&Vec3::new(0.3, -0.2, 0.1));
    let mut raw = ModelConfig::toy();
    raw.use_sym = false;
    raw.use_tl = false;
    let a = Model::<f32>::init(raw, &mut rng).unwrap().predict(&shifted).unwrap();
    out_asym = out_asym.max(asymmetry(&a));
    outcome(
        trace < 1e-6 && asym < 1e-6 && out_asym < 1e-6,
        format!("max |tr t|={trace:.2e}, max |t - t^T|_F={asym:.2e}, max output asymmetry={out_asym:.2e} (<1e-6)"),
    )
}

fn c10_split_determinism() -> Outcome {
    #[derive(serde::Deserialize)]
    struct Frozen {
        train: Vec<String>,
        val: Vec<String>,
        test: Vec<String>,
    }
    let frozen: Frozen = serde_json::from_str(include_str!("fixtures/split_seed42_100.json")).unwrap();
    let records: Vec<DatasetRecord> = (0..100)
        .map(|k| {
            let id = format!("mol-{k:03}");
            DatasetRecord {
                mol_id: id.clone(),
                conformer_id: "0".into(),
                molecule: Molecule::new(id, vec![1], vec![Vec3::zeros()], None).unwrap(),
            }
        })
        .collect();
    let a = make_splits(&records, 42, [0.8, 0.1, 0.1]).unwrap();
    let b = make_splits(&records, 42, [0.8, 0.1, 0.1]).unwrap();
    let same_bytes = a.to_json() == b.to_json();
    let oracle = a.train == frozen.train && a.val == frozen.val && a.test == frozen.test;
    let ids = |s| a.ids(s).iter().collect::<std::collections::HashSet<_>>();
    let (tr, va, te) = (ids(Split::Train), ids(Split::Val), ids(Split::Test));
    let disjoint = tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te) && tr.len() + va.len() + te.len() == 100;
    outcome(
        same_bytes && oracle && disjoint,
        format!("byte-identical={same_bytes}, matches reference split={oracle}, disjoint={disjoint}"),
    )
}

type Criterion = (usize, &'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        (1, "equivariance certification", c1_equivariance),
        (2, "decomposition algebra", c2_decomposition),
        (3, "pythagorean metric identity", c3_pythagoras),
        (4, "gradient correctness", c4_gradients),
        (5, "overfit sanity", c5_overfit),
        (6, "vv beats rr-only at matched params", c6_vv_beats_rr),
        (7, "tensor-channel readout vs painn readout", c7_tensor_readout_vs_painn),
        (8, "parameter-count parity", c8_param_parity),
        (9, "tl/sym structural invariants", c9_structural_invariants),
        (10, "split determinism", c10_split_determinism),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, run) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let o = run();
        println!("{} C{id:<2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
