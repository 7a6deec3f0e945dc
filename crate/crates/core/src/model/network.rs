use std::collections::HashMap;
use std::rc::Rc;

use super::config::{ModelConfig, Readout};
use super::params::{ParamSet, MAX_Z};
use crate::autodiff::{Matrix, Real, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{build_graph, Molecule};
use crate::tensor::Mat3;

/// Several molecules featurized as one disconnected graph.
///
/// Atoms, edges and molecules are concatenated; every per-edge geometric
/// quantity is precomputed in `f64` and stored in block layout.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    pub n_atoms: usize,
    pub n_mols: usize,
    pub n_edges: usize,
    /// Embedding row per atom.
    pub species: Rc<[usize]>,
    pub atom_mol: Rc<[usize]>,
    pub src: Rc<[usize]>,
    pub dst: Rc<[usize]>,
    /// `E x K` radial basis.
    pub rbf: Vec<f64>,
    /// `E` envelope values.
    pub envelope: Vec<f64>,
    /// `3E` unit vectors `x_src - x_dst` normalized.
    pub rhat: Vec<f64>,
    /// `3N` positions relative to their molecule's centroid.
    pub centered: Vec<f64>,
    /// `9M` targets when every molecule carries one.
    pub targets: Option<Vec<f64>>,
    pub num_rbf: usize,
}

impl GraphBatch {
    pub fn new(mols: &[&Molecule], cutoff: f64, num_rbf: usize) -> Result<Self> {
        let mut species = Vec::new();
        let mut atom_mol = Vec::new();
        let (mut src, mut dst) = (Vec::new(), Vec::new());
        let (mut rbf, mut envelope, mut rhat) = (Vec::new(), Vec::new(), Vec::new());
        let mut centered = Vec::new();
        let mut targets = Some(Vec::with_capacity(9 * mols.len()));
        let mut offset = 0;
        for (m, mol) in mols.iter().enumerate() {
            for &z in &mol.atomic_numbers {
                if z == 0 || z as usize > MAX_Z {
                    return Err(Error::UnknownElement(z));
                }
                species.push(z as usize - 1);
                atom_mol.push(m);
            }
            let c = mol.centroid();
            for p in &mol.positions {
                centered.extend((p - c).iter());
            }
            let graph = build_graph(mol, cutoff, num_rbf)?;
            for e in &graph.edges {
                src.push(offset + e.src);
                dst.push(offset + e.dst);
                rbf.extend_from_slice(&e.rbf);
                envelope.push(e.envelope);
                rhat.extend(e.rhat.iter());
            }
            offset += mol.len();
            targets = match (targets, mol.target_alpha) {
                (Some(mut t), Some(a)) => {
                    // row-major 3x3 block
                    t.extend(a.transpose().iter());
                    Some(t)
                }
                _ => None,
            };
        }
        Ok(Self {
            n_atoms: offset,
            n_mols: mols.len(),
            n_edges: src.len(),
            species: species.into(),
            atom_mol: atom_mol.into(),
            src: src.into(),
            dst: dst.into(),
            rbf,
            envelope,
            rhat,
            centered,
            targets,
            num_rbf,
        })
    }
}

/// Per-atom hidden state in block layout: `s` is `N x C_s`, `v` is
/// `3N x C_v`, `t` is `9N x C_t`.
#[derive(Clone, Debug)]
pub struct AtomState<T> {
    pub s: Matrix<T>,
    pub v: Matrix<T>,
    pub t: Option<Matrix<T>>,
}

impl<T: Real> AtomState<T> {
    /// Tensor of atom `atom`, channel `c` as an `f64` matrix.
    pub fn tensor(&self, atom: usize, c: usize) -> Option<Mat3> {
        let t = self.t.as_ref()?;
        Some(Mat3::from_fn(|a, b| {
            t.get(9 * atom + 3 * a + b, c).to_f64().unwrap_or(f64::NAN)
        }))
    }

    pub fn vector(&self, atom: usize, c: usize) -> nalgebra::Vector3<f64> {
        nalgebra::Vector3::from_fn(|a, _| self.v.get(3 * atom + a, c).to_f64().unwrap_or(f64::NAN))
    }
}

/// Parameter leaves bound to one tape.
pub struct Bound {
    vars: HashMap<String, Var>,
    order: Vec<(String, Var)>,
}

impl Bound {
    fn get(&self, name: &str) -> Var {
        self.vars[name]
    }

    /// Tape variable of every parameter tensor, in declaration order.
    pub fn vars(&self) -> &[(String, Var)] {
        &self.order
    }
}

/// The tensor-channel network together with its parameters.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
}

struct Consts {
    rbf: Var,
    env: Var,
    rhat: Var,
}

fn mat<T: Real>(rows: usize, cols: usize, data: &[f64]) -> Matrix<T> {
    Matrix::from_vec(rows, cols, data.iter().map(|&x| T::c(x)).collect()).expect("sized")
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let params = ParamSet::from_tensors(&config, params.into_map())?;
        Ok(Self { config, params })
    }

    pub fn init<R: rand::Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = ParamSet::init(&config, rng);
        Ok(Self { config, params })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Loads the parameters onto `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let mut vars = HashMap::with_capacity(self.params.len());
        let mut order = Vec::with_capacity(self.params.len());
        for (name, m) in self.params.iter() {
            let v = if trainable {
                tape.leaf(m.clone())
            } else {
                tape.constant(m.clone())
            };
            vars.insert(name.clone(), v);
            order.push((name.clone(), v));
        }
        Bound { vars, order }
    }

    fn linear(&self, tape: &mut Tape<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.get(&format!("{prefix}.weight")))?;
        tape.add_bias(y, p.get(&format!("{prefix}.bias")))
    }

    fn mlp(&self, tape: &mut Tape<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
        let h = self.linear(tape, p, &format!("{prefix}.0"), x)?;
        let h = tape.silu(h);
        self.linear(tape, p, &format!("{prefix}.1"), h)
    }

    /// Symmetric traceless, symmetric, or raw basis depending on the config.
    fn project(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        if self.config.use_tl {
            tape.traceless(x)
        } else if self.config.use_sym {
            tape.sym(x)
        } else {
            Ok(x)
        }
    }

    /// Runs all interaction blocks and the readout. Returns the `9M x 1`
    /// molecular tensors; when `states` is given, the atom states after the
    /// embedding and after every block are appended to it.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        batch: &GraphBatch,
        mut states: Option<&mut Vec<AtomState<T>>>,
    ) -> Result<Var> {
        let cfg = &self.config;
        if batch.num_rbf != cfg.num_rbf {
            return Err(Error::InvalidConfig(format!(
                "batch built with {} radial functions, model expects {}",
                batch.num_rbf, cfg.num_rbf
            )));
        }
        let n = batch.n_atoms;
        let e = batch.n_edges;
        let (cv, ct) = (cfg.vector_channels, cfg.tensor_channels);
        let tensor_path = cfg.has_tensor_path();
        let norm = T::c(1.0 / cfg.avg_neighbors);

        let consts = Consts {
            rbf: tape.constant(mat(e, cfg.num_rbf, &batch.rbf)),
            env: tape.constant(mat(e, 1, &batch.envelope)),
            rhat: tape.constant(mat(3 * e, 1, &batch.rhat)),
        };
        let rr_basis = if tensor_path && cfg.rr {
            let d = tape.dyadic(consts.rhat, consts.rhat)?;
            Some(self.project(tape, d)?)
        } else {
            None
        };
        let rhat_wide = if tensor_path && cfg.rv {
            let wide: Vec<f64> = batch
                .rhat
                .iter()
                .flat_map(|&x| std::iter::repeat_n(x, ct))
                .collect();
            Some(tape.constant(mat(3 * e, ct, &wide)))
        } else {
            None
        };

        let mut s = tape.gather(p.get("embedding"), &batch.species, 1)?;
        let mut v = tape.constant(Matrix::zeros(3 * n, cv));
        let mut t = tensor_path.then(|| tape.constant(Matrix::zeros(9 * n, ct)));
        let record = |tape: &Tape<T>, states: &mut Option<&mut Vec<AtomState<T>>>, s, v, t: Option<Var>| {
            if let Some(out) = states.as_deref_mut() {
                out.push(AtomState {
                    s: tape.value(s).clone(),
                    v: tape.value(v).clone(),
                    t: t.map(|t| tape.value(t).clone()),
                });
            }
        };
        record(tape, &mut states, s, v, t);

        for l in 0..cfg.layers {
            let pre = format!("layers.{l}");

            // scalar channel
            let s_i = tape.gather(s, &batch.dst, 1)?;
            let s_j = tape.gather(s, &batch.src, 1)?;
            let mut node_inv = vec![tape.block_norm(v, 3)?];
            if let Some(t) = t {
                node_inv.push(tape.block_norm(t, 9)?);
                node_inv.push(tape.block_trace(t)?);
            }
            let node_inv = tape.concat(&node_inv)?;
            let inv_i = tape.gather(node_inv, &batch.dst, 1)?;
            let inv_j = tape.gather(node_inv, &batch.src, 1)?;
            let v_i = tape.gather(v, &batch.dst, 3)?;
            let v_j = tape.gather(v, &batch.src, 3)?;
            let vdot = tape.block_dot(v_i, v_j, 3)?;
            let msg_in = tape.concat(&[s_i, s_j, consts.rbf, inv_i, inv_j, vdot])?;
            let m_s = self.mlp(tape, p, &format!("{pre}.scalar_message"), msg_in)?;
            let m_s = tape.mul_col(m_s, consts.env)?;
            let agg_s = tape.scatter_add(m_s, &batch.dst, 1, n)?;
            let agg_s = tape.scale(agg_s, norm);
            let upd_in = tape.concat(&[s, agg_s])?;
            let ds = self.mlp(tape, p, &format!("{pre}.scalar_update"), upd_in)?;
            s = tape.add(s, ds)?;

            // vector channel
            let s_i = tape.gather(s, &batch.dst, 1)?;
            let s_j = tape.gather(s, &batch.src, 1)?;
            let edge_in = tape.concat(&[s_i, s_j, consts.rbf])?;
            let h = self.mlp(tape, p, &format!("{pre}.vector_edge"), edge_in)?;
            let a = tape.slice(h, 0, cv)?;
            let coef = tape.slice(h, cv, 2 * cv)?;
            let logits = tape.slice(h, 2 * cv, 3 * cv)?;
            let gate = tape.sigmoid(logits);
            let gate = tape.mul_col(gate, consts.env)?;
            let dir = tape.scale_blocks(consts.rhat, a, 3)?;
            let mixed = tape.matmul(v_j, p.get(&format!("{pre}.vector_mix")))?;
            let mixed = tape.scale_blocks(mixed, coef, 3)?;
            let m_v = tape.add(dir, mixed)?;
            let m_v = tape.scale_blocks(m_v, gate, 3)?;
            let agg_v = tape.scatter_add(m_v, &batch.dst, 3, n)?;
            let agg_v = tape.scale(agg_v, norm);
            let v_gate = self.linear(tape, p, &format!("{pre}.vector_gate"), s)?;
            let v_gate = tape.sigmoid(v_gate);
            let dv = tape.scale_blocks(agg_v, v_gate, 3)?;
            v = tape.add(v, dv)?;

            // tensor channel
            if let Some(t_prev) = t {
                let v_j = tape.gather(v, &batch.src, 3)?;
                let u = if cfg.rv || cfg.vv {
                    Some(tape.matmul(v_j, p.get(&format!("{pre}.tensor_u")))?)
                } else {
                    None
                };
                let mut coef_in = edge_in;
                if cfg.trace_feedback {
                    let fb = tape.block_dot(rhat_wide.expect("rv"), u.expect("rv"), 3)?;
                    coef_in = tape.concat(&[edge_in, fb])?;
                }
                let coefs = self.mlp(tape, p, &format!("{pre}.tensor_edge"), coef_in)?;
                let coefs = tape.mul_col(coefs, consts.env)?;
                let mut branch = 0;
                let mut msg: Option<Var> = None;
                let mut accumulate = |tape: &mut Tape<T>, basis: Var| -> Result<()> {
                    let c = tape.slice(coefs, branch * ct, (branch + 1) * ct)?;
                    branch += 1;
                    let m = tape.scale_blocks(basis, c, 9)?;
                    msg = Some(match msg {
                        Some(acc) => tape.add(acc, m)?,
                        None => m,
                    });
                    Ok(())
                };
                if let Some(rr) = rr_basis {
                    accumulate(tape, rr)?;
                }
                if cfg.rv {
                    let d = tape.dyadic(rhat_wide.expect("rv"), u.expect("rv"))?;
                    let basis = self.project(tape, d)?;
                    accumulate(tape, basis)?;
                }
                if cfg.vv {
                    let w = tape.matmul(v_j, p.get(&format!("{pre}.tensor_w")))?;
                    let d = tape.dyadic(u.expect("vv"), w)?;
                    let basis = self.project(tape, d)?;
                    accumulate(tape, basis)?;
                }
                let msg = msg.expect("at least one branch");
                let agg_t = tape.scatter_add(msg, &batch.dst, 9, n)?;
                let mut agg_t = tape.scale(agg_t, norm);
                if cfg.use_lora {
                    let low = tape.matmul(agg_t, p.get(&format!("{pre}.lora_a")))?;
                    let mixed = tape.matmul(low, p.get(&format!("{pre}.lora_b")))?;
                    agg_t = tape.add(agg_t, mixed)?;
                }
                let t_gate = self.linear(tape, p, &format!("{pre}.tensor_gate"), s)?;
                let t_gate = tape.sigmoid(t_gate);
                let dt = tape.scale_blocks(agg_t, t_gate, 9)?;
                t = Some(tape.add(t_prev, dt)?);
            }
            record(tape, &mut states, s, v, t);
        }

        let atom_alpha = match cfg.readout {
            Readout::TensorChannel => {
                let h = self.mlp(tape, p, "readout", s)?;
                let iso = tape.slice(h, 0, 1)?;
                let gates = tape.slice(h, 1, 1 + ct)?;
                let t = t.expect("validated: tensor readout has a tensor path");
                let gated = tape.scale_blocks(t, gates, 9)?;
                let summed = tape.sum_cols(gated);
                let aniso = tape.sym(summed)?;
                let iso = tape.expand_identity(iso);
                tape.add(iso, aniso)?
            }
            Readout::PainnReadout => {
                let iso = self.mlp(tape, p, "readout", s)?;
                let nu = tape.matmul(v, p.get("readout_nu"))?;
                let r = tape.constant(mat(3 * n, 1, &batch.centered));
                let d = tape.dyadic(nu, r)?;
                let aniso = tape.sym(d)?;
                let iso = tape.expand_identity(iso);
                tape.add(iso, aniso)?
            }
        };
        let mut atom_alpha = tape.scale(atom_alpha, T::c(cfg.output_scale));
        if !cfg.atom_ref.is_empty() {
            let refs: Vec<f64> = batch.species.iter().map(|&z| cfg.atom_ref[z]).collect();
            let refs = tape.constant(mat(n, 1, &refs));
            let refs = tape.expand_identity(refs);
            atom_alpha = tape.add(atom_alpha, refs)?;
        }
        tape.scatter_add(atom_alpha, &batch.atom_mol, 9, batch.n_mols)
    }

    /// Predicted molecular tensors (`f64`) for a list of molecules,
    /// evaluated in batches of `batch_size`.
    pub fn predict_many(&self, mols: &[Molecule], batch_size: usize) -> Result<Vec<Mat3>> {
        let mut out = Vec::with_capacity(mols.len());
        for chunk in mols.chunks(batch_size.max(1)) {
            let refs: Vec<&Molecule> = chunk.iter().collect();
            let batch = GraphBatch::new(&refs, self.config.cutoff, self.config.num_rbf)?;
            let mut tape = Tape::new();
            let p = self.bind(&mut tape, false);
            let y = self.forward(&mut tape, &p, &batch, None)?;
            out.extend(blocks_to_mat3(tape.value(y)));
        }
        Ok(out)
    }

    pub fn predict(&self, mol: &Molecule) -> Result<Mat3> {
        Ok(self.predict_many(std::slice::from_ref(mol), 1)?[0])
    }

    /// Atom states after the embedding and after each interaction block.
    pub fn atom_states(&self, mol: &Molecule) -> Result<Vec<AtomState<T>>> {
        let batch = GraphBatch::new(&[mol], self.config.cutoff, self.config.num_rbf)?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let mut states = Vec::new();
        self.forward(&mut tape, &p, &batch, Some(&mut states))?;
        Ok(states)
    }
}

/// Splits a `9M x 1` block column into `M` tensors.
pub fn blocks_to_mat3<T: Real>(m: &Matrix<T>) -> Vec<Mat3> {
    m.data()
        .chunks(9)
        .map(|c| Mat3::from_fn(|a, b| c[3 * a + b].to_f64().unwrap_or(f64::NAN)))
        .collect()
}
