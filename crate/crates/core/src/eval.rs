//! Error metrics, the rotational equivariance harness and the relative
//! deviatoric error binned by heavy-atom count.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::data::Teacher;
use crate::error::{Error, Result};
use crate::graph::Molecule;
use crate::model::Model;
use crate::rng::{stream_rng, Stream};
use crate::tensor::{conjugate, deviatoric, frob_norm, sample_rotation, Mat3, Rotation};

/// Residual of one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleResidual {
    pub frob: f64,
    pub iso: f64,
    pub aniso_frob: f64,
}

/// Mean absolute errors in Bohr^3.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub frob_mae: f64,
    pub iso_mae: f64,
    pub aniso_frob_mae: f64,
    pub n_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residuals: Option<Vec<SampleResidual>>,
}

pub fn residual(pred: &Mat3, target: &Mat3) -> SampleResidual {
    let d = pred - target;
    SampleResidual {
        frob: frob_norm(&d),
        iso: (d.trace() / 3.0).abs(),
        aniso_frob: frob_norm(&deviatoric(&d)),
    }
}

/// Per-sample means of `|d|_F`, `|tr(d)| / 3` and `|dev(d)|_F` with
/// `d = pred - target`.
pub fn metrics(preds: &[Mat3], targets: &[Mat3]) -> Result<MetricReport> {
    if preds.len() != targets.len() {
        return Err(Error::LengthMismatch(preds.len(), targets.len()));
    }
    if preds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let residuals: Vec<SampleResidual> = preds.iter().zip(targets).map(|(p, t)| residual(p, t)).collect();
    let n = residuals.len() as f64;
    Ok(MetricReport {
        frob_mae: residuals.iter().map(|r| r.frob).sum::<f64>() / n,
        iso_mae: residuals.iter().map(|r| r.iso).sum::<f64>() / n,
        aniso_frob_mae: residuals.iter().map(|r| r.aniso_frob).sum::<f64>() / n,
        n_samples: residuals.len(),
        residuals: Some(residuals),
    })
}

/// Anything that maps a molecule to a polarizability tensor.
pub trait Predictor {
    fn predict_all(&self, mols: &[Molecule]) -> Result<Vec<Mat3>>;
}

impl<T: Real> Predictor for Model<T> {
    fn predict_all(&self, mols: &[Molecule]) -> Result<Vec<Mat3>> {
        self.predict_many(mols, 64)
    }
}

impl Predictor for Teacher {
    fn predict_all(&self, mols: &[Molecule]) -> Result<Vec<Mat3>> {
        Ok(mols.iter().map(|m| self.alpha(m)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivReport {
    /// Mean of `|f(Rx) - R f(x) R^T|_F`.
    pub eps_equiv: f64,
    /// Mean of `|f(Rx) - R alpha(x) R^T|_F`; absent when a target is missing.
    pub eps_target: Option<f64>,
    pub max_equiv: f64,
    pub n_rotations: usize,
    pub n_samples: usize,
}

/// `n_rot` rotations drawn from the rotation stream of `seed`.
pub fn rotations(n_rot: usize, seed: u64) -> Vec<Rotation> {
    let mut rng = stream_rng(seed, Stream::Rotations);
    (0..n_rot).map(|_| sample_rotation(&mut rng)).collect()
}

/// Averages over the molecule x rotation grid; the same rotations are used
/// for every molecule.
pub fn equiv_test_with(p: &dyn Predictor, mols: &[Molecule], rots: &[Rotation]) -> Result<EquivReport> {
    if mols.is_empty() || rots.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let base = p.predict_all(mols)?;
    let with_targets = mols.iter().all(|m| m.target_alpha.is_some());
    let (mut sum_e, mut sum_t, mut max_e) = (0.0, 0.0, 0.0f64);
    for r in rots {
        let rotated: Vec<Molecule> = mols.iter().map(|m| m.rotated(r)).collect();
        let preds = p.predict_all(&rotated)?;
        for ((pr, b), m) in preds.iter().zip(&base).zip(mols) {
            let e = frob_norm(&(pr - conjugate(r, b)));
            sum_e += e;
            max_e = max_e.max(e);
            if let Some(t) = m.target_alpha {
                sum_t += frob_norm(&(pr - conjugate(r, &t)));
            }
        }
    }
    let n = (mols.len() * rots.len()) as f64;
    Ok(EquivReport {
        eps_equiv: sum_e / n,
        eps_target: with_targets.then_some(sum_t / n),
        max_equiv: max_e,
        n_rotations: rots.len(),
        n_samples: mols.len(),
    })
}

pub fn equiv_test(p: &dyn Predictor, mols: &[Molecule], n_rot: usize, seed: u64) -> Result<EquivReport> {
    equiv_test_with(p, mols, &rotations(n_rot, seed))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeBin {
    pub heavy_atoms: usize,
    pub median: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeBinnedReport {
    pub eps: f64,
    pub bins: Vec<SizeBin>,
    pub n_samples: usize,
}

impl SizeBinnedReport {
    /// `heavy_atoms,median,count` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("heavy_atoms,median,count\n");
        for b in &self.bins {
            out.push_str(&format!("{},{},{}\n", b.heavy_atoms, b.median, b.count));
        }
        out
    }
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// `|dev(pred) - dev(target)|_F / (|dev(target)|_F + eps)` per sample, median
/// per heavy-atom count.
pub fn relative_deviatoric_report(
    preds: &[Mat3],
    targets: &[Mat3],
    heavy_atoms: &[usize],
    eps: f64,
) -> Result<SizeBinnedReport> {
    if preds.len() != targets.len() {
        return Err(Error::LengthMismatch(preds.len(), targets.len()));
    }
    if preds.len() != heavy_atoms.len() {
        return Err(Error::LengthMismatch(preds.len(), heavy_atoms.len()));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidConfig("eps must be positive".into()));
    }
    let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for ((p, t), &h) in preds.iter().zip(targets).zip(heavy_atoms) {
        let dt = deviatoric(t);
        let ratio = frob_norm(&(deviatoric(p) - dt)) / (frob_norm(&dt) + eps);
        groups.entry(h).or_default().push(ratio);
    }
    let bins = groups
        .into_iter()
        .map(|(h, mut v)| SizeBin {
            heavy_atoms: h,
            count: v.len(),
            median: median(&mut v).expect("nonempty group"),
        })
        .collect();
    Ok(SizeBinnedReport {
        eps,
        bins,
        n_samples: preds.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_dataset;
    use crate::tensor::Vec3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sym(rng: &mut ChaCha8Rng) -> Mat3 {
        let a = Mat3::from_fn(|_, _| rng.random_range(-5.0..5.0));
        (a + a.transpose()) * 0.5
    }

    /// Scalar-loop reference for the three metrics.
    fn naive(preds: &[Mat3], targets: &[Mat3]) -> (f64, f64, f64) {
        let (mut f, mut i, mut a) = (0.0, 0.0, 0.0);
        for k in 0..preds.len() {
            let mut d = [[0.0; 3]; 3];
            for r in 0..3 {
                for c in 0..3 {
                    d[r][c] = preds[k][(r, c)] - targets[k][(r, c)];
                }
            }
            let tr = d[0][0] + d[1][1] + d[2][2];
            let (mut ss, mut dev) = (0.0, 0.0);
            for (r, row) in d.iter().enumerate() {
                for (c, &x) in row.iter().enumerate() {
                    ss += x * x;
                    let y = if r == c { x - tr / 3.0 } else { x };
                    dev += y * y;
                }
            }
            f += ss.sqrt();
            i += (tr / 3.0).abs();
            a += dev.sqrt();
        }
        let n = preds.len() as f64;
        (f / n, i / n, a / n)
    }

    #[test]
    fn simple_residuals() {
        let t = Mat3::identity() * 10.0;
        let r = metrics(&[t], &[t]).unwrap();
        assert_eq!((r.frob_mae, r.iso_mae, r.aniso_frob_mae), (0.0, 0.0, 0.0));
        let r = metrics(&[t + Mat3::identity()], &[t]).unwrap();
        assert!((r.frob_mae - 3f64.sqrt()).abs() < 1e-15);
        assert!((r.iso_mae - 1.0).abs() < 1e-15);
        assert!(r.aniso_frob_mae < 1e-15);
        let d = Mat3::from_diagonal(&Vec3::new(-1.0, 0.0, 1.0));
        let r = metrics(&[t + d], &[t]).unwrap();
        assert!((r.frob_mae - 2f64.sqrt()).abs() < 1e-15);
        assert!(r.iso_mae < 1e-15);
        assert!((r.aniso_frob_mae - 2f64.sqrt()).abs() < 1e-15);
        assert!(matches!(metrics(&[t], &[]), Err(Error::LengthMismatch(1, 0))));
    }

    #[test]
    fn agrees_with_scalar_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p: Vec<Mat3> = (0..100).map(|_| random_sym(&mut rng)).collect();
        let t: Vec<Mat3> = (0..100).map(|_| random_sym(&mut rng)).collect();
        let r = metrics(&p, &t).unwrap();
        let (f, i, a) = naive(&p, &t);
        assert!((r.frob_mae - f).abs() < 1e-12);
        assert!((r.iso_mae - i).abs() < 1e-12);
        assert!((r.aniso_frob_mae - a).abs() < 1e-12);
    }

    #[test]
    fn pythagorean_split_and_rotation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let (p, t) = (random_sym(&mut rng), random_sym(&mut rng));
            let s = residual(&p, &t);
            assert!((s.frob.powi(2) - 3.0 * s.iso.powi(2) - s.aniso_frob.powi(2)).abs() < 1e-10);
            let r = sample_rotation(&mut rng);
            let s2 = residual(&conjugate(&r, &p), &conjugate(&r, &t));
            assert!((s.frob - s2.frob).abs() < 1e-10);
            assert!((s.iso - s2.iso).abs() < 1e-10);
            assert!((s.aniso_frob - s2.aniso_frob).abs() < 1e-10);
        }
    }

    #[test]
    fn teacher_is_exactly_equivariant() {
        let teacher = Teacher::with_environment();
        let mols: Vec<Molecule> = synthetic_dataset(10, 2, &teacher).into_iter().map(|r| r.molecule).collect();
        let rep = equiv_test(&teacher, &mols, 16, 0).unwrap();
        assert!(rep.eps_equiv < 1e-12);
        assert!(rep.eps_target.unwrap() < 1e-12);
        assert_eq!((rep.n_rotations, rep.n_samples), (16, 10));
        let again = equiv_test(&teacher, &mols, 16, 0).unwrap();
        assert_eq!(rep, again);
    }

    #[test]
    fn identity_rotation_gives_zero() {
        let mols: Vec<Molecule> = synthetic_dataset(3, 2, &Teacher::default()).into_iter().map(|r| r.molecule).collect();
        let model = Model::<f32>::init(crate::model::ModelConfig::toy(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let rep = equiv_test_with(&model, &mols, &[Rotation::identity()]).unwrap();
        assert_eq!(rep.eps_equiv, 0.0);
    }

    #[test]
    fn binned_report() {
        let t = Mat3::from_diagonal(&Vec3::new(1.0, 2.0, 3.0));
        let rep = relative_deviatoric_report(&[t, t], &[t, t], &[3, 4], 1e-8).unwrap();
        assert!(rep.bins.iter().all(|b| b.median == 0.0));
        assert_eq!(rep.bins.iter().map(|b| b.count).sum::<usize>(), rep.n_samples);

        let iso = Mat3::identity() * 5.0;
        let d = Mat3::from_diagonal(&Vec3::new(-1.0, 0.0, 1.0)) / 2f64.sqrt();
        let rep = relative_deviatoric_report(&[iso + d], &[iso], &[2], 1e-8).unwrap();
        assert!((rep.bins[0].median - 1e8).abs() < 1e-3);

        assert_eq!(median(&mut [0.1, 0.3, 0.2]), Some(0.2));
        assert_eq!(median(&mut [4.0, 1.0]), Some(2.5));
        assert!(relative_deviatoric_report(&[t], &[t], &[], 1e-8).is_err());
        let csv = rep.to_csv();
        assert!(csv.starts_with("heavy_atoms,median,count\n2,"));
    }

    #[test]
    fn reports_round_trip_as_json() {
        let t = Mat3::identity();
        let r = metrics(&[t * 2.0], &[t]).unwrap();
        let back: MetricReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
