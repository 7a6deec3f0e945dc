//! Dataset records, file formats, molecule-level splits and the synthetic
//! teacher used for desk-scale experiments.
//!
//! # Extended XYZ
//!
//! One frame per molecule:
//!
//! ```text
//! 3
//! mol_id=water conformer_id=0 alpha="8.1 9.3 7.7 0.0 0.1 0.0" Properties=species:S:1:pos:R:3
//! O 0.000000 0.000000 0.117300
//! H 0.000000 0.757200 -0.469200
//! H 0.000000 -0.757200 -0.469200
//! ```
//!
//! `alpha` lists `xx yy zz xy xz yz` in Bohr^3, or nine row-major
//! components. It may be omitted for inference inputs. Positions are in
//! Angstrom; species are element symbols or atomic numbers.
//!
//! # JSON lines
//!
//! One object per line with `mol_id`, optional `conformer_id`, `Z`, `pos`
//! (list of `[x, y, z]`) and optional `alpha` (six components).

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{atomic_number, element_symbol, Molecule};
use crate::tensor::{self, Mat3, Vec3};

/// One conformer of a molecule.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub mol_id: String,
    pub conformer_id: String,
    pub molecule: Molecule,
}

impl DatasetRecord {
    /// Target as `xx yy zz xy xz yz`.
    pub fn alpha6(&self) -> Option<[f64; 6]> {
        self.molecule.target_alpha.as_ref().map(tensor::to_voigt6)
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

/// Splits an extended-XYZ comment line into `key=value` pairs; values may be
/// double-quoted.
fn comment_fields(line: &str, lineno: usize) -> Result<HashMap<String, String>> {
    let mut out = HashMap::new();
    let mut chars = line.trim().chars().peekable();
    loop {
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        if chars.peek().is_none() {
            return Ok(out);
        }
        let mut key = String::new();
        while let Some(&c) = chars.peek() {
            if c == '=' || c.is_whitespace() {
                break;
            }
            key.push(c);
            chars.next();
        }
        if chars.next() != Some('=') {
            return Err(parse_err(lineno, format!("expected key=value, found {key:?}")));
        }
        let mut value = String::new();
        if chars.peek() == Some(&'"') {
            chars.next();
            loop {
                match chars.next() {
                    Some('"') => break,
                    Some(c) => value.push(c),
                    None => return Err(parse_err(lineno, "unterminated quote")),
                }
            }
        } else {
            while let Some(&c) = chars.peek() {
                if c.is_whitespace() {
                    break;
                }
                value.push(c);
                chars.next();
            }
        }
        out.insert(key, value);
    }
}

fn alpha_from_components(values: &[f64], line: usize) -> Result<Mat3> {
    let bad = |m: String| Error::InvalidTensor { line, message: m };
    if values.iter().any(|x| !x.is_finite()) {
        return Err(bad("non-finite component".into()));
    }
    match values.len() {
        6 => Ok(tensor::from_voigt6(&[
            values[0], values[1], values[2], values[3], values[4], values[5],
        ])),
        9 => {
            let a = Mat3::from_row_slice(values);
            let asym = tensor::asymmetry(&a);
            if asym > tensor::SYMMETRY_TOLERANCE {
                return Err(bad(format!("asymmetry {asym:.3e} exceeds {:e}", tensor::SYMMETRY_TOLERANCE)));
            }
            Ok(tensor::sym(&a))
        }
        n => Err(bad(format!("expected 6 or 9 components, found {n}"))),
    }
}

fn species(token: &str, line: usize) -> Result<u32> {
    if let Ok(z) = token.parse::<u32>() {
        return Ok(z);
    }
    atomic_number(token).ok_or_else(|| parse_err(line, format!("unknown element {token:?}")))
}

fn build_record(
    mol_id: String,
    conformer_id: String,
    z: Vec<u32>,
    pos: Vec<Vec3>,
    alpha: Option<Mat3>,
    line: usize,
) -> Result<DatasetRecord> {
    let molecule = Molecule::new(mol_id.clone(), z, pos, alpha).map_err(|e| match e {
        Error::UnknownElement(z) => parse_err(line, format!("unsupported element Z={z}")),
        Error::NonSymmetricInput { asymmetry, .. } => Error::InvalidTensor {
            line,
            message: format!("asymmetry {asymmetry:.3e}"),
        },
        other => parse_err(line, other.to_string()),
    })?;
    Ok(DatasetRecord {
        mol_id,
        conformer_id,
        molecule,
    })
}

/// Parses extended-XYZ text. Line numbers in errors are 1-based.
pub fn parse_xyz(text: &str) -> Result<Vec<DatasetRecord>> {
    let lines: Vec<&str> = text.lines().collect();
    let mut records = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        if lines[i].trim().is_empty() {
            i += 1;
            continue;
        }
        let header_line = i + 1;
        let n: usize = lines[i]
            .trim()
            .parse()
            .map_err(|_| parse_err(header_line, format!("expected atom count, found {:?}", lines[i])))?;
        if n == 0 {
            return Err(parse_err(header_line, "frame with zero atoms"));
        }
        let comment = lines
            .get(i + 1)
            .ok_or_else(|| parse_err(header_line + 1, "missing comment line"))?;
        let fields = comment_fields(comment, header_line + 1)?;
        let mol_id = fields
            .get("mol_id")
            .cloned()
            .ok_or_else(|| parse_err(header_line + 1, "missing mol_id"))?;
        let conformer_id = fields.get("conformer_id").cloned().unwrap_or_else(|| "0".into());
        if let Some(p) = fields.get("Properties") {
            if !p.starts_with("species:S:1:pos:R:3") {
                return Err(parse_err(header_line + 1, format!("unsupported Properties {p:?}")));
            }
        }
        let alpha = match fields.get("alpha") {
            Some(a) => {
                let values = a
                    .split_whitespace()
                    .map(f64::from_str)
                    .collect::<std::result::Result<Vec<f64>, _>>()
                    .map_err(|_| Error::InvalidTensor {
                        line: header_line + 1,
                        message: format!("unparsable component in {a:?}"),
                    })?;
                Some(alpha_from_components(&values, header_line + 1)?)
            }
            None => None,
        };
        let mut z = Vec::with_capacity(n);
        let mut pos = Vec::with_capacity(n);
        for k in 0..n {
            let lineno = header_line + 2 + k;
            let line = lines
                .get(i + 2 + k)
                .ok_or_else(|| parse_err(lineno, format!("frame declares {n} atoms, file ended")))?;
            let tok: Vec<&str> = line.split_whitespace().collect();
            if tok.len() < 4 {
                return Err(parse_err(lineno, format!("expected species and 3 coordinates, found {line:?}")));
            }
            z.push(species(tok[0], lineno)?);
            let mut p = [0.0; 3];
            for (c, t) in p.iter_mut().zip(&tok[1..4]) {
                *c = t
                    .parse()
                    .map_err(|_| parse_err(lineno, format!("bad coordinate {t:?}")))?;
            }
            pos.push(Vec3::from(p));
        }
        records.push(build_record(mol_id, conformer_id, z, pos, alpha, header_line)?);
        i += 2 + n;
    }
    Ok(records)
}

#[derive(Serialize, Deserialize)]
struct JsonRecord {
    mol_id: String,
    #[serde(default = "default_conformer", skip_serializing_if = "Option::is_none")]
    conformer_id: Option<String>,
    #[serde(rename = "Z")]
    z: Vec<u32>,
    pos: Vec<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alpha: Option<Vec<f64>>,
}

fn default_conformer() -> Option<String> {
    None
}

/// Parses line-delimited JSON records.
pub fn parse_jsonl(text: &str) -> Result<Vec<DatasetRecord>> {
    let mut records = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let lineno = k + 1;
        if line.trim().is_empty() {
            continue;
        }
        let r: JsonRecord = serde_json::from_str(line).map_err(|e| parse_err(lineno, e.to_string()))?;
        let alpha = match &r.alpha {
            Some(a) if a.len() == 6 => Some(alpha_from_components(a, lineno)?),
            Some(a) => {
                return Err(Error::InvalidTensor {
                    line: lineno,
                    message: format!("expected 6 components, found {}", a.len()),
                })
            }
            None => None,
        };
        let pos = r.pos.iter().map(|p| Vec3::from(*p)).collect();
        records.push(build_record(
            r.mol_id,
            r.conformer_id.unwrap_or_else(|| "0".into()),
            r.z,
            pos,
            alpha,
            lineno,
        )?);
    }
    Ok(records)
}

/// Drops repeated `(mol_id, conformer_id, geometry)` records, keeping the
/// first. Returns the kept records and the number dropped.
pub fn dedup(records: Vec<DatasetRecord>) -> (Vec<DatasetRecord>, usize) {
    let mut seen = HashSet::new();
    let mut kept = Vec::with_capacity(records.len());
    let mut dropped = 0;
    for r in records {
        let geometry: Vec<u64> = r
            .molecule
            .positions
            .iter()
            .flat_map(|p| p.iter().map(|x| x.to_bits()).collect::<Vec<_>>())
            .chain(r.molecule.atomic_numbers.iter().map(|&z| z as u64))
            .collect();
        if seen.insert((r.mol_id.clone(), r.conformer_id.clone(), geometry)) {
            kept.push(r);
        } else {
            log::warn!("dropping duplicate record {} / {}", r.mol_id, r.conformer_id);
            dropped += 1;
        }
    }
    (kept, dropped)
}

/// Reads a dataset file (`.jsonl` as JSON lines, anything else as extended
/// XYZ) and removes duplicates.
pub fn parse_dataset(path: impl AsRef<Path>) -> Result<Vec<DatasetRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let records = match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl") => parse_jsonl(&text)?,
        _ => parse_xyz(&text)?,
    };
    Ok(dedup(records).0)
}

/// Serializes records as extended XYZ with round-trip float formatting.
pub fn write_xyz(records: &[DatasetRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let m = &r.molecule;
        let _ = writeln!(out, "{}", m.len());
        let _ = write!(out, "mol_id={} conformer_id={}", r.mol_id, r.conformer_id);
        if let Some(a) = r.alpha6() {
            let parts: Vec<String> = a.iter().map(|x| format!("{x:?}")).collect();
            let _ = write!(out, " alpha=\"{}\"", parts.join(" "));
        }
        let _ = writeln!(out, " Properties=species:S:1:pos:R:3");
        for (z, p) in m.atomic_numbers.iter().zip(&m.positions) {
            let sym = element_symbol(*z).unwrap_or("X");
            let _ = writeln!(out, "{sym} {:?} {:?} {:?}", p.x, p.y, p.z);
        }
    }
    out
}

pub fn write_jsonl(records: &[DatasetRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let j = JsonRecord {
            mol_id: r.mol_id.clone(),
            conformer_id: Some(r.conformer_id.clone()),
            z: r.molecule.atomic_numbers.clone(),
            pos: r.molecule.positions.iter().map(|p| [p.x, p.y, p.z]).collect(),
            alpha: r.alpha6().map(|a| a.to_vec()),
        };
        out.push_str(&serde_json::to_string(&j).expect("plain data"));
        out.push('\n');
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(Error::InvalidConfig(format!("unknown split {other:?}"))),
        }
    }
}

/// Molecule-level partition of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    /// `(train, val, test)`
    pub fractions: [f64; 3],
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Records whose `mol_id` belongs to `split`, in input order.
    pub fn select<'a>(&self, records: &'a [DatasetRecord], split: Split) -> Vec<&'a DatasetRecord> {
        let ids: HashSet<&str> = self.ids(split).iter().map(String::as_str).collect();
        records.iter().filter(|r| ids.contains(r.mol_id.as_str())).collect()
    }

    /// Panics if a `mol_id` is listed in more than one partition.
    pub fn assert_disjoint(&self) {
        let mut seen = HashSet::new();
        for id in self.train.iter().chain(&self.val).chain(&self.test) {
            assert!(seen.insert(id), "mol_id {id} appears in two partitions");
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plain data");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        let mut seen = HashSet::new();
        for id in m.train.iter().chain(&m.val).chain(&m.test) {
            if !seen.insert(id) {
                return Err(Error::InvalidConfig(format!("mol_id {id} appears in two partitions")));
            }
        }
        Ok(m)
    }
}

/// Shuffles the sorted unique `mol_id`s with Fisher-Yates driven by
/// SplitMix64 seeded with `seed` (swap index `next_u64() % (i + 1)` for `i`
/// from `n - 1` down to 1), then takes `floor(f * n)` ids each for
/// validation and test (after the training block); the remainder is training.
pub fn make_splits(records: &[DatasetRecord], seed: u64, fractions: [f64; 3]) -> Result<SplitManifest> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!("split fractions {fractions:?} must be in [0, 1] and sum to 1")));
    }
    let unique: BTreeSet<&str> = records.iter().map(|r| r.mol_id.as_str()).collect();
    if unique.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut ids: Vec<String> = unique.into_iter().map(String::from).collect();
    let mut rng = SplitMix64::seed_from_u64(seed);
    for i in (1..ids.len()).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        ids.swap(i, j);
    }
    let n = ids.len();
    let n_val = (fractions[1] * n as f64 + 1e-9).floor() as usize;
    let n_test = (fractions[2] * n as f64 + 1e-9).floor() as usize;
    let n_train = n - n_val - n_test;
    let test = ids.split_off(n_train + n_val);
    let val = ids.split_off(n_train);
    let manifest = SplitManifest {
        seed,
        fractions,
        train: ids,
        val,
        test,
    };
    manifest.assert_disjoint();
    Ok(manifest)
}

/// Analytic equivariant teacher for synthetic targets.
///
/// `alpha = sum_i a(Z_i) I + sum_{i<j} b_ij TL(rhat_ij x rhat_ij)
///        + gamma sum_i c(Z_i) TL(p_i x p_i)` with `b_ij = sqrt(k_i k_j) f(d_ij)`,
/// `p_i = sum_j f(d_ij) rhat_ij` and `f(d) = (cos(pi d / r_c) + 1) / 2` for
/// `d < r_c`, zero beyond.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Teacher {
    /// Bond range `r_c` in Angstrom.
    pub range: f64,
    /// Weight of the environment term; zero keeps only pairwise terms.
    pub gamma: f64,
}

/// `(Z, a(Z) in Bohr^3, bond strength k(Z), environment weight c(Z))`.
pub const TEACHER_TABLE: [(u32, f64, f64, f64); 6] = [
    (1, 4.5, 0.6, 0.3),
    (6, 11.3, 2.0, 1.0),
    (7, 7.4, 1.6, 0.8),
    (8, 5.3, 1.2, 0.6),
    (16, 19.4, 3.0, 1.5),
    (17, 14.7, 2.4, 1.2),
];

fn teacher_row(z: u32) -> (f64, f64, f64) {
    TEACHER_TABLE
        .iter()
        .find(|r| r.0 == z)
        .map(|r| (r.1, r.2, r.3))
        .expect("molecule elements are validated")
}

impl Default for Teacher {
    fn default() -> Self {
        Self {
            range: 4.0,
            gamma: 0.0,
        }
    }
}

impl Teacher {
    /// Pairwise bond anisotropy plus the three-body environment term.
    pub fn with_environment() -> Self {
        Self {
            range: 4.0,
            gamma: 2.0,
        }
    }

    fn smooth(&self, d: f64) -> f64 {
        if d < self.range {
            0.5 * ((std::f64::consts::PI * d / self.range).cos() + 1.0)
        } else {
            0.0
        }
    }

    pub fn alpha(&self, mol: &Molecule) -> Mat3 {
        let n = mol.len();
        let mut alpha = Mat3::zeros();
        let mut env = vec![Vec3::zeros(); n];
        for i in 0..n {
            let (a_i, k_i, _) = teacher_row(mol.atomic_numbers[i]);
            alpha += Mat3::identity() * a_i;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let r = mol.positions[j] - mol.positions[i];
                let d = r.norm();
                let f = self.smooth(d);
                if f == 0.0 {
                    continue;
                }
                let rhat = r / d;
                env[i] += rhat * f;
                if i < j {
                    let (_, k_j, _) = teacher_row(mol.atomic_numbers[j]);
                    alpha += tensor::traceless(&tensor::dyadic(&rhat, &rhat)) * ((k_i * k_j).sqrt() * f);
                }
            }
        }
        if self.gamma != 0.0 {
            for i in 0..n {
                let (_, _, c_i) = teacher_row(mol.atomic_numbers[i]);
                alpha += tensor::traceless(&tensor::dyadic(&env[i], &env[i])) * (self.gamma * c_i);
            }
        }
        alpha
    }
}

/// Element draw weights of the generator: H, C, N, O, S, Cl.
const ELEMENT_WEIGHTS: [(u32, f64); 6] = [(1, 0.40), (6, 0.30), (7, 0.10), (8, 0.12), (16, 0.04), (17, 0.04)];

fn draw_element<R: Rng>(rng: &mut R) -> u32 {
    let mut u: f64 = rng.random();
    for &(z, w) in &ELEMENT_WEIGHTS {
        if u < w {
            return z;
        }
        u -= w;
    }
    ELEMENT_WEIGHTS[ELEMENT_WEIGHTS.len() - 1].0
}

fn random_direction<R: Rng>(rng: &mut R) -> Vec3 {
    loop {
        let v = Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Random molecule of `n_atoms` atoms grown by attaching each new atom to a
/// random existing one at 1.0 to 1.6 Angstrom, keeping all pairs at least
/// 0.9 Angstrom apart.
pub fn random_geometry<R: Rng>(rng: &mut R, n_atoms: usize) -> (Vec<u32>, Vec<Vec3>) {
    let mut z = vec![draw_element(rng)];
    let mut pos = vec![Vec3::zeros()];
    while pos.len() < n_atoms {
        let parent = pos[rng.random_range(0..pos.len())];
        let p = parent + random_direction(rng) * rng.random_range(1.0..1.6);
        if pos.iter().all(|q| (p - q).norm() >= 0.9) {
            pos.push(p);
            z.push(draw_element(rng));
        }
    }
    (z, pos)
}

/// `n` molecules with 3 to 10 atoms labelled by `teacher`; ids are
/// `syn-00000`, `syn-00001`, ...
pub fn synthetic_dataset(n: usize, seed: u64, teacher: &Teacher) -> Vec<DatasetRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|k| {
            let n_atoms = rng.random_range(3..=10);
            let (z, pos) = random_geometry(&mut rng, n_atoms);
            let id = format!("syn-{k:05}");
            let mut mol = Molecule::new(id.clone(), z, pos, None).expect("generated geometry is valid");
            mol.target_alpha = Some(teacher.alpha(&mol));
            DatasetRecord {
                mol_id: id,
                conformer_id: "0".into(),
                molecule: mol,
            }
        })
        .collect()
}
