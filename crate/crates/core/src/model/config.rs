use serde::{Deserialize, Serialize};

use super::params::MAX_Z;
use crate::error::{Error, Result};
use crate::graph::Molecule;

/// Output head of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Gated superposition of the propagated tensor channels plus an
    /// isotropic scalar term.
    TensorChannel,
    /// `alpha_i = alpha_0(s_i) I + sym(nu_i x r_i)` built only at the output.
    PainnReadout,
}

/// Which tensor message bases are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Branches {
    /// `rhat x rhat`
    pub rr: bool,
    /// `sym(rhat x u_j)`
    pub rv: bool,
    /// `sym(u_j x w_j)`
    pub vv: bool,
}

impl Branches {
    pub const VV_ONLY: Self = Self {
        rr: false,
        rv: false,
        vv: true,
    };
    pub const RR_ONLY: Self = Self {
        rr: true,
        rv: false,
        vv: false,
    };
    pub const ALL: Self = Self {
        rr: true,
        rv: true,
        vv: true,
    };

    pub fn count(&self) -> usize {
        [self.rr, self.rv, self.vv].iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.count() > 0
    }
}

fn default_cutoff() -> f64 {
    10.0
}

fn default_num_rbf() -> usize {
    20
}

fn default_avg_neighbors() -> f64 {
    1.0
}

fn default_output_scale() -> f64 {
    1.0
}

fn default_lora_rank() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(rename = "c_s")]
    pub scalar_channels: usize,
    #[serde(rename = "c_v")]
    pub vector_channels: usize,
    #[serde(rename = "c_t", default)]
    pub tensor_channels: usize,
    pub layers: usize,
    /// Hidden width of every two-layer MLP.
    pub hidden: usize,
    #[serde(default = "default_cutoff")]
    pub cutoff: f64,
    #[serde(default = "default_num_rbf")]
    pub num_rbf: usize,
    #[serde(default)]
    pub rr: bool,
    #[serde(default)]
    pub rv: bool,
    #[serde(default)]
    pub vv: bool,
    #[serde(rename = "sym", default)]
    pub use_sym: bool,
    #[serde(rename = "tl", default)]
    pub use_tl: bool,
    #[serde(rename = "lora", default)]
    pub use_lora: bool,
    /// Every neighbor sum is divided by this constant.
    #[serde(default = "default_avg_neighbors")]
    pub avg_neighbors: f64,
    #[serde(default = "default_lora_rank")]
    pub lora_rank: usize,
    /// Fixed isotropic contribution per element, indexed `Z - 1`; empty
    /// means zero.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub atom_ref: Vec<f64>,
    /// Fixed factor applied to the learned per-atom tensors.
    #[serde(default = "default_output_scale")]
    pub output_scale: f64,
    /// Feed `tr(sym(rhat x u_j))` into the tensor edge MLP (RV branch only).
    #[serde(default)]
    pub trace_feedback: bool,
    pub readout: Readout,
}

impl ModelConfig {
    /// Desk-scale tensor-channel model: VV branch with SYM, TL and LoRA.
    pub fn toy() -> Self {
        Self {
            scalar_channels: 32,
            vector_channels: 8,
            tensor_channels: 8,
            layers: 3,
            hidden: 32,
            cutoff: 5.0,
            num_rbf: 8,
            rr: false,
            rv: false,
            vv: true,
            use_sym: true,
            use_tl: true,
            use_lora: true,
            lora_rank: 4,
            avg_neighbors: 4.0,
            atom_ref: Vec::new(),
            output_scale: 1.0,
            trace_feedback: false,
            readout: Readout::TensorChannel,
        }
    }

    /// The full-size VV tensor-channel configuration (148/37/37, 8 layers).
    pub fn full() -> Self {
        Self {
            scalar_channels: 148,
            vector_channels: 37,
            tensor_channels: 37,
            layers: 8,
            hidden: 336,
            cutoff: 10.0,
            num_rbf: 20,
            lora_rank: 8,
            avg_neighbors: 12.0,
            ..Self::toy()
        }
    }

    /// Readout-only baseline reusing the scalar and vector layers (156/64).
    pub fn painn_baseline() -> Self {
        Self {
            scalar_channels: 156,
            vector_channels: 64,
            tensor_channels: 0,
            layers: 8,
            hidden: 392,
            cutoff: 10.0,
            num_rbf: 20,
            rr: false,
            rv: false,
            vv: false,
            use_sym: false,
            use_tl: false,
            use_lora: false,
            lora_rank: 8,
            avg_neighbors: 12.0,
            atom_ref: Vec::new(),
            output_scale: 1.0,
            trace_feedback: false,
            readout: Readout::PainnReadout,
        }
    }

    pub fn branches(&self) -> Branches {
        Branches {
            rr: self.rr,
            rv: self.rv,
            vv: self.vv,
        }
    }

    pub fn set_branches(&mut self, b: Branches) {
        self.rr = b.rr;
        self.rv = b.rv;
        self.vv = b.vv;
    }

    /// Whether tensor channels are propagated through message passing.
    pub fn has_tensor_path(&self) -> bool {
        self.tensor_channels > 0 && self.branches().any()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.scalar_channels == 0 || self.vector_channels == 0 {
            return fail("c_s and c_v must be >= 1");
        }
        if self.hidden == 0 {
            return fail("hidden width must be >= 1");
        }
        if self.num_rbf == 0 {
            return fail("num_rbf must be >= 1");
        }
        if !(self.avg_neighbors > 0.0 && self.avg_neighbors.is_finite()) {
            return fail("avg_neighbors must be positive");
        }
        if !(self.output_scale > 0.0 && self.output_scale.is_finite()) {
            return fail("output_scale must be positive");
        }
        if !(self.atom_ref.is_empty() || self.atom_ref.len() == MAX_Z) || self.atom_ref.iter().any(|x| !x.is_finite()) {
            return fail("atom_ref must be empty or hold one finite value per element up to Z = 17");
        }
        if !(self.cutoff > 0.0 && self.cutoff.is_finite()) {
            return fail("cutoff must be positive");
        }
        if self.readout == Readout::TensorChannel {
            if self.tensor_channels == 0 {
                return fail("tensor_channel readout needs c_t >= 1");
            }
            if !self.branches().any() {
                return fail("tensor_channel readout needs at least one of rr/rv/vv");
            }
        }
        if self.use_lora && self.lora_rank == 0 && self.has_tensor_path() {
            return fail("lora_rank must be >= 1 when lora is enabled");
        }
        if self.trace_feedback && !self.rv {
            return fail("trace_feedback requires the rv branch");
        }
        Ok(())
    }

    /// Fits `atom_ref` by least squares of `tr(alpha) / 3` on element counts
    /// and sets `output_scale` to the root-mean-square per-atom residual
    /// component left after the reference. Elements absent from `mols` get 0.
    pub fn fit_output_stats(&mut self, mols: &[Molecule]) -> Result<()> {
        let labelled: Vec<(&Molecule, crate::tensor::Mat3)> =
            mols.iter().filter_map(|m| m.target_alpha.map(|a| (m, a))).collect();
        if labelled.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let present: Vec<usize> = (1..=MAX_Z as u32)
            .filter(|z| labelled.iter().any(|(m, _)| m.atomic_numbers.contains(z)))
            .map(|z| z as usize)
            .collect();
        let counts = nalgebra::DMatrix::from_fn(labelled.len(), present.len(), |r, c| {
            labelled[r].0.atomic_numbers.iter().filter(|&&z| z as usize == present[c]).count() as f64
        });
        let iso = nalgebra::DVector::from_fn(labelled.len(), |r, _| labelled[r].1.trace() / 3.0);
        let coef = counts
            .svd(true, true)
            .solve(&iso, 1e-10)
            .map_err(|e| Error::InvalidConfig(format!("reference fit failed: {e}")))?;
        let mut atom_ref = vec![0.0; MAX_Z];
        for (c, &z) in present.iter().enumerate() {
            atom_ref[z - 1] = coef[c];
        }
        let mut sq = 0.0;
        let mut atoms = 0usize;
        for (m, a) in &labelled {
            let shift: f64 = m.atomic_numbers.iter().map(|&z| atom_ref[z as usize - 1]).sum();
            let resid = a - crate::tensor::Mat3::identity() * shift;
            sq += resid.norm_squared();
            atoms += m.len();
        }
        self.atom_ref = atom_ref;
        self.output_scale = (sq / (9.0 * atoms as f64)).sqrt().max(1e-6);
        Ok(())
    }

    /// Width of the invariant summary vector fed to the scalar message MLP:
    /// per endpoint `|v|` per vector channel and, with tensors, `|t|_F` and
    /// `tr t` per tensor channel; plus `<v_i, v_j>` per vector channel.
    pub fn invariant_width(&self) -> usize {
        let per_node = self.vector_channels
            + if self.has_tensor_path() {
                2 * self.tensor_channels
            } else {
                0
            };
        2 * per_node + self.vector_channels
    }
}
