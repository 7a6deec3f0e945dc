//! Molecules and their directed radius graphs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, Mat3, Rotation, Vec3};

/// Elements of the QM7-X chemical space: H, C, N, O, S, Cl.
pub const SUPPORTED_ELEMENTS: [u32; 6] = [1, 6, 7, 8, 16, 17];

/// Atoms closer than this (Angstrom) are treated as coincident.
pub const MIN_SEPARATION: f64 = 1e-6;

pub fn element_symbol(z: u32) -> Option<&'static str> {
    Some(match z {
        1 => "H",
        6 => "C",
        7 => "N",
        8 => "O",
        16 => "S",
        17 => "Cl",
        _ => return None,
    })
}

pub fn atomic_number(symbol: &str) -> Option<u32> {
    Some(match symbol {
        "H" => 1,
        "C" => 6,
        "N" => 7,
        "O" => 8,
        "S" => 16,
        "Cl" | "CL" => 17,
        other => {
            let z: u32 = other.parse().ok()?;
            return SUPPORTED_ELEMENTS.contains(&z).then_some(z);
        }
    })
}

/// A molecular geometry in Angstrom with an optional polarizability target in
/// Bohr^3.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Molecule {
    pub mol_id: String,
    pub atomic_numbers: Vec<u32>,
    pub positions: Vec<Vec3>,
    pub target_alpha: Option<Mat3>,
}

impl Molecule {
    /// Validates element support, finiteness and target symmetry. Targets with
    /// asymmetry below [`tensor::SYMMETRY_TOLERANCE`] are symmetrized.
    pub fn new(
        mol_id: impl Into<String>,
        atomic_numbers: Vec<u32>,
        positions: Vec<Vec3>,
        target_alpha: Option<Mat3>,
    ) -> Result<Self> {
        if atomic_numbers.is_empty() {
            return Err(Error::InvalidConfig("molecule has no atoms".into()));
        }
        if atomic_numbers.len() != positions.len() {
            return Err(Error::LengthMismatch(atomic_numbers.len(), positions.len()));
        }
        if let Some(&z) = atomic_numbers.iter().find(|z| !SUPPORTED_ELEMENTS.contains(z)) {
            return Err(Error::UnknownElement(z));
        }
        if positions.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidConfig("non-finite atomic position".into()));
        }
        let target_alpha = match target_alpha {
            Some(a) => {
                if !a.iter().all(|x| x.is_finite()) {
                    return Err(Error::InvalidConfig("non-finite target tensor".into()));
                }
                let asym = tensor::asymmetry(&a);
                if asym > tensor::SYMMETRY_TOLERANCE {
                    return Err(Error::NonSymmetricInput {
                        asymmetry: asym,
                        tolerance: tensor::SYMMETRY_TOLERANCE,
                    });
                }
                Some(tensor::sym(&a))
            }
            None => None,
        };
        Ok(Self {
            mol_id: mol_id.into(),
            atomic_numbers,
            positions,
            target_alpha,
        })
    }

    pub fn len(&self) -> usize {
        self.atomic_numbers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atomic_numbers.is_empty()
    }

    /// Number of non-hydrogen atoms.
    pub fn heavy_atom_count(&self) -> usize {
        self.atomic_numbers.iter().filter(|&&z| z > 1).count()
    }

    pub fn centroid(&self) -> Vec3 {
        self.positions.iter().sum::<Vec3>() / self.len() as f64
    }

    /// Rotates positions about the origin and conjugates the target.
    pub fn rotated(&self, r: &Rotation) -> Self {
        Self {
            mol_id: self.mol_id.clone(),
            atomic_numbers: self.atomic_numbers.clone(),
            positions: self.positions.iter().map(|p| r.apply(p)).collect(),
            target_alpha: self.target_alpha.map(|a| tensor::conjugate(r, &a)),
        }
    }

    pub fn translated(&self, shift: &Vec3) -> Self {
        let mut out = self.clone();
        for p in &mut out.positions {
            *p += shift;
        }
        out
    }
}

/// Geometric features of the directed edge `src -> dst` (`j -> i`).
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeFeatures {
    pub src: usize,
    pub dst: usize,
    /// `x_src - x_dst`.
    pub r: Vec3,
    pub d: f64,
    pub rhat: Vec3,
    pub rbf: Vec<f64>,
    pub envelope: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RadiusGraph {
    pub n_atoms: usize,
    pub edges: Vec<EdgeFeatures>,
}

/// Bessel radial basis `sqrt(2/c) sin(n pi d / c) / d` for `n = 1..=k`.
pub fn bessel_rbf(d: f64, cutoff: f64, k: usize) -> Result<Vec<f64>> {
    if !(d > 0.0 && d < cutoff) {
        return Err(Error::OutOfRange {
            value: d,
            lo: 0.0,
            hi: cutoff,
        });
    }
    if k == 0 {
        return Err(Error::InvalidConfig("radial basis size must be >= 1".into()));
    }
    let pref = (2.0 / cutoff).sqrt();
    Ok((1..=k)
        .map(|n| pref * (n as f64 * std::f64::consts::PI * d / cutoff).sin() / d)
        .collect())
}

/// Smooth cutoff `(cos(pi d / c) + 1) / 2`.
pub fn cosine_envelope(d: f64, cutoff: f64) -> Result<f64> {
    if !(d > 0.0 && d < cutoff) {
        return Err(Error::OutOfRange {
            value: d,
            lo: 0.0,
            hi: cutoff,
        });
    }
    Ok(0.5 * ((std::f64::consts::PI * d / cutoff).cos() + 1.0))
}

/// All-pairs radius graph. Both directions of every pair closer than `cutoff`
/// are emitted, ordered by destination then source.
pub fn build_graph(mol: &Molecule, cutoff: f64, num_rbf: usize) -> Result<RadiusGraph> {
    if !(cutoff > 0.0) || !cutoff.is_finite() {
        return Err(Error::InvalidConfig(format!("cutoff must be positive, got {cutoff}")));
    }
    let n = mol.len();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let r = mol.positions[j] - mol.positions[i];
            let d = r.norm();
            if d < MIN_SEPARATION {
                return Err(Error::DegenerateGeometry {
                    a: i.min(j),
                    b: i.max(j),
                    distance: d,
                });
            }
            if d >= cutoff {
                continue;
            }
            edges.push(EdgeFeatures {
                src: j,
                dst: i,
                r,
                d,
                rhat: r / d,
                rbf: bessel_rbf(d, cutoff, num_rbf)?,
                envelope: cosine_envelope(d, cutoff)?,
            });
        }
    }
    Ok(RadiusGraph { n_atoms: n, edges })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::sample_rotation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mol(z: Vec<u32>, pos: Vec<[f64; 3]>) -> Molecule {
        Molecule::new("m", z, pos.into_iter().map(Vec3::from).collect(), None).unwrap()
    }

    fn water() -> Molecule {
        mol(
            vec![8, 1, 1],
            vec![[0.0, 0.0, 0.1173], [0.0, 0.7572, -0.4692], [0.0, -0.7572, -0.4692]],
        )
    }

    #[test]
    fn edge_counts() {
        let near = mol(vec![1, 1], vec![[0.0; 3], [3.0, 0.0, 0.0]]);
        assert_eq!(build_graph(&near, 10.0, 8).unwrap().edges.len(), 2);
        let far = mol(vec![1, 1], vec![[0.0; 3], [12.0, 0.0, 0.0]]);
        assert_eq!(build_graph(&far, 10.0, 8).unwrap().edges.len(), 0);
        let g = build_graph(&water(), 10.0, 8).unwrap();
        assert_eq!(g.edges.len(), 6);
        assert!(g.edges.iter().all(|e| e.src != e.dst));
    }

    #[test]
    fn coincident_atoms_are_rejected() {
        let m = mol(vec![1, 1], vec![[0.0; 3], [1e-7, 0.0, 0.0]]);
        assert!(matches!(build_graph(&m, 10.0, 8), Err(Error::DegenerateGeometry { .. })));
        assert!(build_graph(&water(), 0.0, 8).is_err());
    }

    #[test]
    fn rbf_values() {
        let v = bessel_rbf(5.0, 10.0, 3).unwrap();
        assert!(v[1].abs() < 1e-15);
        let v = bessel_rbf(10.0 - 1e-9, 10.0, 8).unwrap();
        assert!(v.iter().all(|x| x.abs() < 1e-8));
        // independent scalar evaluation at d = 1, c = 10
        let v = bessel_rbf(1.0, 10.0, 8).unwrap();
        let pref = 0.2f64.sqrt();
        for (n, &x) in v.iter().enumerate() {
            let expected = pref * ((n + 1) as f64 * std::f64::consts::PI / 10.0).sin();
            assert!((x - expected).abs() < 1e-15);
        }
        assert!(bessel_rbf(0.0, 10.0, 8).is_err());
        assert!(bessel_rbf(10.0, 10.0, 8).is_err());
    }

    #[test]
    fn envelope_values() {
        assert!((cosine_envelope(5.0, 10.0).unwrap() - 0.5).abs() < 1e-15);
        assert!((cosine_envelope(1e-9, 10.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_envelope(7.5, 10.0).unwrap() - 0.146_446_609_406_726_2).abs() < 1e-15);
        let mut last = 1.0;
        for i in 1..100 {
            let e = cosine_envelope(i as f64 * 0.1, 10.0).unwrap();
            assert!(e < last);
            last = e;
        }
        assert!(cosine_envelope(11.0, 10.0).is_err());
    }

    #[test]
    fn features_are_translation_invariant_and_rotation_covariant() {
        let m = water();
        let base = build_graph(&m, 10.0, 8).unwrap();
        let shifted = build_graph(&m.translated(&Vec3::new(3.0, -7.5, 1.25)), 10.0, 8).unwrap();
        let r = sample_rotation(&mut ChaCha8Rng::seed_from_u64(9));
        let rotated = build_graph(&m.rotated(&r), 10.0, 8).unwrap();
        for ((a, b), c) in base.edges.iter().zip(&shifted.edges).zip(&rotated.edges) {
            assert_eq!((a.src, a.dst), (b.src, b.dst));
            assert!((a.r - b.r).amax() < 1e-12);
            assert!((a.d - b.d).abs() < 1e-12 && (a.envelope - b.envelope).abs() < 1e-12);
            assert!((r.apply(&a.r) - c.r).amax() < 1e-12);
            assert!((r.apply(&a.rhat) - c.rhat).amax() < 1e-12);
            assert!((a.d - c.d).abs() < 1e-12);
            assert!((a.envelope - c.envelope).abs() < 1e-12);
            for (x, y) in a.rbf.iter().zip(&c.rbf) {
                assert!((x - y).abs() < 1e-12);
            }
            assert!((a.rhat.norm() - 1.0).abs() < 1e-12);
            assert!((a.r.norm() - a.d).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_preserves_distance_multiset() {
        let m = water();
        let perm = mol(
            vec![1, 8, 1],
            vec![m.positions[1].into(), m.positions[0].into(), m.positions[2].into()],
        );
        let key = |g: &RadiusGraph| {
            let mut v: Vec<Vec<u64>> = g
                .edges
                .iter()
                .map(|e| {
                    std::iter::once(e.d)
                        .chain(e.rbf.iter().copied())
                        .map(|x| (x * 1e9).round() as u64)
                        .collect()
                })
                .collect();
            v.sort();
            v
        };
        assert_eq!(
            key(&build_graph(&m, 10.0, 4).unwrap()),
            key(&build_graph(&perm, 10.0, 4).unwrap())
        );
    }

    #[test]
    fn molecule_validation() {
        assert!(matches!(
            Molecule::new("x", vec![2], vec![Vec3::zeros()], None),
            Err(Error::UnknownElement(2))
        ));
        assert!(Molecule::new("x", vec![], vec![], None).is_err());
        let mut a = Mat3::identity();
        a[(0, 2)] = 0.1;
        assert!(Molecule::new("x", vec![1], vec![Vec3::zeros()], Some(a)).is_err());
        assert_eq!(water().heavy_atom_count(), 1);
        assert_eq!(atomic_number("Cl"), Some(17));
        assert_eq!(atomic_number("8"), Some(8));
        assert_eq!(atomic_number("Fe"), None);
    }
}
