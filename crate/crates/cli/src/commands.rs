use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use polartensor::data::{
    make_splits, parse_dataset, parse_xyz, synthetic_dataset, write_jsonl, write_xyz, Split, SplitManifest, Teacher,
};
use polartensor::eval::{equiv_test_with, metrics, relative_deviatoric_report, rotations};
use polartensor::graph::Molecule;
use polartensor::model::{Checkpoint, Model};
use polartensor::rng::{stream_rng, Stream};
use polartensor::runconfig::RunConfig;
use polartensor::tensor::{decompose, Mat3, Rotation};
use polartensor::train::Trainer;
use polartensor::{Error, Result};

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn load_split(data: &Path, manifest: &Path, split: Split) -> Result<Vec<Molecule>> {
    let records = parse_dataset(data)?;
    let manifest = SplitManifest::from_json(&fs::read_to_string(manifest)?)?;
    let mols: Vec<Molecule> = manifest.select(&records, split).into_iter().map(|r| r.molecule.clone()).collect();
    if mols.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(mols)
}

fn load_model(path: &Path) -> Result<Model<f32>> {
    let ckpt = Checkpoint::load(path)?;
    Model::new(ckpt.config.clone(), ckpt.inference_params().clone())
}

pub fn split(dataset: &Path, seed: u64, fractions: &[f64], out: &Path) -> Result<()> {
    let fractions: [f64; 3] = fractions
        .try_into()
        .map_err(|_| Error::InvalidConfig("--fractions needs three values".into()))?;
    let records = parse_dataset(dataset)?;
    let manifest = make_splits(&records, seed, fractions)?;
    fs::write(out, manifest.to_json())?;
    println!(
        "split {} molecules: train {}, val {}, test {} -> {}",
        manifest.train.len() + manifest.val.len() + manifest.test.len(),
        manifest.train.len(),
        manifest.val.len(),
        manifest.test.len(),
        out.display()
    );
    Ok(())
}

pub fn synth(n: usize, seed: u64, environment: bool, out: &Path) -> Result<()> {
    let teacher = if environment { Teacher::with_environment() } else { Teacher::default() };
    let records = synthetic_dataset(n, seed, &teacher);
    let text = if out.extension().is_some_and(|e| e == "jsonl") {
        write_jsonl(&records)
    } else {
        write_xyz(&records)
    };
    fs::write(out, text)?;
    println!("wrote {n} molecules -> {}", out.display());
    Ok(())
}

pub struct TrainArgs<'a> {
    pub config: &'a Path,
    pub overrides: &'a [String],
    pub data: &'a Path,
    pub manifest: &'a Path,
    pub out: &'a Path,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub resume: Option<&'a Path>,
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(args.config, args.overrides)?;
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(w) = args.workers {
        cfg.train.workers = w;
    }
    cfg.train.validate()?;
    let train = load_split(args.data, args.manifest, Split::Train)?;
    let val = load_split(args.data, args.manifest, Split::Val)?;
    fs::create_dir_all(args.out)?;

    let mut trainer = match args.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            log::info!("resuming from {}", path.display());
            cfg.model = ckpt.config.clone();
            Trainer::resume(ckpt, cfg.train.clone())?
        }
        None => {
            if cfg.model.atom_ref.is_empty() {
                cfg.model.fit_output_stats(&train)?;
            }
            let model = Model::init(cfg.model.clone(), &mut stream_rng(cfg.train.seed, Stream::Init))?;
            Trainer::new(model, cfg.train.clone())?
        }
    };
    fs::write(args.out.join("config.cfg"), cfg.to_toml()?)?;
    let mut log = OpenOptions::new()
        .create(true)
        .append(args.resume.is_some())
        .write(true)
        .truncate(args.resume.is_none())
        .open(args.out.join("train_log.jsonl"))?;
    let started = trainer.epoch;
    trainer.run(&train, &val, Some(args.out), Some(&mut log))?;
    let last = trainer.history.last();
    let best = trainer
        .best_epoch()
        .and_then(|e| trainer.history.iter().find(|h| h.epoch == e));
    println!(
        "trained epochs {}..{}: final train loss {:.6}, best val frob_mae {:.6} at epoch {} -> {}",
        started + 1,
        trainer.epoch,
        last.map_or(f64::NAN, |h| h.train_loss),
        best.map_or(f64::NAN, |h| h.val_frob_mae),
        best.map_or(0, |h| h.epoch),
        args.out.display()
    );
    Ok(())
}

pub fn eval(checkpoint: &Path, data: &Path, manifest: &Path, split: Split, out: &Path) -> Result<()> {
    let model = load_model(checkpoint)?;
    let mols = load_split(data, manifest, split)?;
    let targets = mols
        .iter()
        .map(|m| {
            m.target_alpha
                .ok_or_else(|| Error::InvalidConfig(format!("molecule {} has no target tensor", m.mol_id)))
        })
        .collect::<Result<Vec<Mat3>>>()?;
    let preds = model.predict_many(&mols, 64)?;
    let mut report = metrics(&preds, &targets)?;
    report.residuals = None;
    let heavy: Vec<usize> = mols.iter().map(Molecule::heavy_atom_count).collect();
    let binned = relative_deviatoric_report(&preds, &targets, &heavy, 1e-8)?;
    fs::create_dir_all(out)?;
    write_json(&out.join("metrics.json"), &report)?;
    write_json(&out.join("deviatoric_by_size.json"), &binned)?;
    fs::write(out.join("deviatoric_by_size.csv"), binned.to_csv())?;
    println!(
        "{} molecules: frob_mae {:.6}, iso_mae {:.6}, aniso_frob_mae {:.6}",
        report.n_samples, report.frob_mae, report.iso_mae, report.aniso_frob_mae
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn equivcheck(
    checkpoint: &Path,
    data: &Path,
    manifest: &Path,
    split: Split,
    n_rot: usize,
    seed: u64,
    identity: bool,
    out: &Path,
) -> Result<()> {
    if n_rot == 0 {
        return Err(Error::InvalidConfig("--rotations must be >= 1".into()));
    }
    let model = load_model(checkpoint)?;
    let mols = load_split(data, manifest, split)?;
    let rots = if identity { vec![Rotation::identity(); n_rot] } else { rotations(n_rot, seed) };
    let report = equiv_test_with(&model, &mols, &rots)?;
    fs::create_dir_all(out)?;
    write_json(&out.join("equiv.json"), &report)?;
    println!(
        "eps_equiv {:.3e} (max {:.3e}) over {} molecules x {} rotations",
        report.eps_equiv, report.max_equiv, report.n_samples, report.n_rotations
    );
    Ok(())
}

fn print_matrix(w: &mut impl Write, m: &Mat3) -> std::io::Result<()> {
    for r in 0..3 {
        writeln!(w, "  {:>14.6} {:>14.6} {:>14.6}", m[(r, 0)], m[(r, 1)], m[(r, 2)])?;
    }
    Ok(())
}

pub fn predict(checkpoint: &Path, xyz: &Path) -> Result<()> {
    let model = load_model(checkpoint)?;
    let records = parse_xyz(&fs::read_to_string(xyz)?)?;
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let out = std::io::stdout();
    let mut w = out.lock();
    for r in &records {
        let alpha = model.predict(&r.molecule)?;
        let d = decompose(&alpha)?;
        writeln!(w, "{} ({} atoms)", r.mol_id, r.molecule.len())?;
        writeln!(w, "alpha [Bohr^3]:")?;
        print_matrix(&mut w, &alpha)?;
        writeln!(w, "iso: {:.6}", d.iso)?;
        writeln!(w, "aniso:")?;
        print_matrix(&mut w, &d.aniso)?;
    }
    Ok(())
}
