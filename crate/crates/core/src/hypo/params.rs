use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HypoError, NnError};
use crate::matcher::DEFAULT_BIN_SCORE;
use crate::tinynn::{Activation::Identity as Id, Activation::Relu as R, Checkpoint, Mlp, MlpSpec};

/// Channel widths of every network. [`Architecture::full`] is the published
/// layout; [`Architecture::compact`] keeps the same layer structure at
/// widths that train in minutes on one core.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub embedding: usize,
    pub aim_hidden: usize,
    pub aim_layers: usize,
    pub corr_width: usize,
    pub rot_hidden: usize,
    pub trans_wide: usize,
    pub trans_hidden: usize,
    pub one_plane_hidden: usize,
    pub score_hidden: usize,
    pub max_correspondences: usize,
}

impl Architecture {
    pub fn full() -> Self {
        Self {
            embedding: 256,
            aim_hidden: 256,
            aim_layers: 6,
            corr_width: 1024,
            rot_hidden: 512,
            trans_wide: 1024,
            trans_hidden: 512,
            one_plane_hidden: 512,
            score_hidden: 64,
            max_correspondences: 32,
        }
    }

    pub fn compact() -> Self {
        Self {
            embedding: 64,
            aim_hidden: 128,
            aim_layers: 6,
            corr_width: 128,
            rot_hidden: 64,
            trans_wide: 128,
            trans_hidden: 64,
            one_plane_hidden: 128,
            score_hidden: 64,
            max_correspondences: 32,
        }
    }

    /// Smallest widths with the full layer structure, for gradient checks.
    pub fn tiny() -> Self {
        Self {
            embedding: 6,
            aim_hidden: 7,
            aim_layers: 6,
            corr_width: 9,
            rot_hidden: 5,
            trans_wide: 8,
            trans_hidden: 5,
            one_plane_hidden: 7,
            score_hidden: 6,
            max_correspondences: 6,
        }
    }

    pub fn validate(&self) -> Result<(), HypoError> {
        let widths = [
            self.embedding,
            self.aim_hidden,
            self.corr_width,
            self.rot_hidden,
            self.trans_wide,
            self.trans_hidden,
            self.one_plane_hidden,
            self.score_hidden,
            self.max_correspondences,
        ];
        if widths.contains(&0) {
            return Err(HypoError::Config("all widths must be positive".into()));
        }
        if self.aim_layers < 2 {
            return Err(HypoError::Config("pose encoders need at least 2 layers".into()));
        }
        Ok(())
    }

    fn encoder(&self, input: usize) -> MlpSpec {
        MlpSpec::chain(input)
            .layer(self.aim_hidden, R)
            .repeat(self.aim_layers - 2, self.aim_hidden, R)
            .layer(self.embedding, R)
            .build()
    }

    pub fn rot_enc(&self) -> MlpSpec {
        self.encoder(4)
    }

    pub fn trans_enc(&self) -> MlpSpec {
        self.encoder(3)
    }

    pub fn linear_rot(&self) -> MlpSpec {
        MlpSpec::chain(self.embedding).layer(4, Id).build()
    }

    pub fn linear_trans(&self) -> MlpSpec {
        MlpSpec::chain(self.embedding).layer(3, Id).build()
    }

    pub fn g(&self) -> MlpSpec {
        let w = self.corr_width;
        MlpSpec::chain(8).layer(w, R).repeat(4, w, R).layer(w, Id).repeat(2, w, R).layer(w, Id).build()
    }

    pub fn e_r(&self) -> MlpSpec {
        let h = self.rot_hidden;
        MlpSpec::chain(self.corr_width).layer(h, R).repeat(4, h, R).layer(self.embedding, Id).build()
    }

    pub fn e_t(&self) -> MlpSpec {
        let (w, h) = (self.trans_wide, self.trans_hidden);
        MlpSpec::chain(self.corr_width + self.embedding)
            .layer(w, R)
            .layer(w, R)
            .layer(w, Id)
            .layer(h, R)
            .repeat(4, h, R)
            .layer(self.embedding, Id)
            .build()
    }

    pub fn d(&self) -> MlpSpec {
        let h = self.one_plane_hidden;
        MlpSpec::chain(2 * self.embedding).layer(h, R).layer(h, R).layer(self.embedding, R).build()
    }

    pub fn score(&self) -> MlpSpec {
        let h = self.score_hidden;
        MlpSpec::chain(2 * self.max_correspondences).repeat(3, h, R).layer(1, Id).build()
    }

    const FIELDS: [&'static str; 10] = [
        "embedding",
        "aim_hidden",
        "aim_layers",
        "corr_width",
        "rot_hidden",
        "trans_wide",
        "trans_hidden",
        "one_plane_hidden",
        "score_hidden",
        "max_correspondences",
    ];

    fn values(&self) -> [usize; 10] {
        [
            self.embedding,
            self.aim_hidden,
            self.aim_layers,
            self.corr_width,
            self.rot_hidden,
            self.trans_wide,
            self.trans_hidden,
            self.one_plane_hidden,
            self.score_hidden,
            self.max_correspondences,
        ]
    }

    fn from_values(v: [usize; 10]) -> Self {
        Self {
            embedding: v[0],
            aim_hidden: v[1],
            aim_layers: v[2],
            corr_width: v[3],
            rot_hidden: v[4],
            trans_wide: v[5],
            trans_hidden: v[6],
            one_plane_hidden: v[7],
            score_hidden: v[8],
            max_correspondences: v[9],
        }
    }
}

/// Which networks an optimizer step touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Pose encoders and the shared decoding heads.
    Aim,
    /// Correspondence, feature, one-plane and scoring networks.
    Refiner,
    All,
}

/// All learnable parameters. The same type accumulates gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct NopeSacParams {
    pub arch: Architecture,
    pub rot_enc: Mlp,
    pub trans_enc: Mlp,
    pub linear_rot: Mlp,
    pub linear_trans: Mlp,
    pub g: Mlp,
    pub e_r: Mlp,
    pub e_t: Mlp,
    pub d_r: Mlp,
    pub d_t: Mlp,
    pub score_r: Mlp,
    pub score_t: Mlp,
    pub bin_score: f64,
}

pub const MLP_NAMES: [&str; 11] =
    ["rot_enc", "trans_enc", "linear_rot", "linear_trans", "g", "e_r", "e_t", "d_r", "d_t", "score_r", "score_t"];

impl NopeSacParams {
    pub fn init(arch: Architecture, rng: &mut impl Rng) -> Result<Self, HypoError> {
        arch.validate()?;
        Ok(Self {
            arch,
            rot_enc: Mlp::init(&arch.rot_enc(), rng)?,
            trans_enc: Mlp::init(&arch.trans_enc(), rng)?,
            linear_rot: Mlp::init(&arch.linear_rot(), rng)?,
            linear_trans: Mlp::init(&arch.linear_trans(), rng)?,
            g: Mlp::init(&arch.g(), rng)?,
            e_r: Mlp::init(&arch.e_r(), rng)?,
            e_t: Mlp::init(&arch.e_t(), rng)?,
            d_r: Mlp::init(&arch.d(), rng)?,
            d_t: Mlp::init(&arch.d(), rng)?,
            score_r: Mlp::init(&arch.score(), rng)?,
            score_t: Mlp::init(&arch.score(), rng)?,
            bin_score: DEFAULT_BIN_SCORE,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for m in z.mlps_mut() {
            m.fill(0.0);
        }
        z.bin_score = 0.0;
        z
    }

    pub fn mlps(&self) -> [&Mlp; 11] {
        [
            &self.rot_enc,
            &self.trans_enc,
            &self.linear_rot,
            &self.linear_trans,
            &self.g,
            &self.e_r,
            &self.e_t,
            &self.d_r,
            &self.d_t,
            &self.score_r,
            &self.score_t,
        ]
    }

    pub fn mlps_mut(&mut self) -> [&mut Mlp; 11] {
        [
            &mut self.rot_enc,
            &mut self.trans_enc,
            &mut self.linear_rot,
            &mut self.linear_trans,
            &mut self.g,
            &mut self.e_r,
            &mut self.e_t,
            &mut self.d_r,
            &mut self.d_t,
            &mut self.score_r,
            &mut self.score_t,
        ]
    }

    fn group_mask(group: ParamGroup) -> [bool; 11] {
        let aim = [true, true, true, true, false, false, false, false, false, false, false];
        match group {
            ParamGroup::Aim => aim,
            ParamGroup::Refiner => aim.map(|a| !a),
            ParamGroup::All => [true; 11],
        }
    }

    pub fn group_params(&self, group: ParamGroup) -> Vec<&[f64]> {
        let mask = Self::group_mask(group);
        self.mlps().into_iter().zip(mask).filter(|(_, k)| *k).flat_map(|(m, _)| m.params()).collect()
    }

    pub fn group_params_mut(&mut self, group: ParamGroup) -> Vec<&mut [f64]> {
        let mask = Self::group_mask(group);
        self.mlps_mut().into_iter().zip(mask).filter(|(_, k)| *k).flat_map(|(m, _)| m.params_mut()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.mlps().iter().map(|m| m.spec().parameter_count()).sum::<usize>() + 1
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.mlps_mut().into_iter().zip(other.mlps()) {
            a.add_assign(b);
        }
        self.bin_score += other.bin_score;
    }

    pub fn scale(&mut self, s: f64) {
        for m in self.mlps_mut() {
            m.scale(s);
        }
        self.bin_score *= s;
    }

    pub fn is_finite(&self) -> bool {
        self.mlps().iter().all(|m| m.is_finite()) && self.bin_score.is_finite()
    }

    /// Adds parameters (and `arch.*`, `bin_score` scalars) to a checkpoint.
    pub fn write_into(&self, ck: &mut Checkpoint) {
        for (name, v) in Architecture::FIELDS.iter().zip(self.arch.values()) {
            ck.scalars.push((format!("arch.{name}"), v as f64));
        }
        ck.scalars.push(("bin_score".into(), self.bin_score));
        for (name, m) in MLP_NAMES.iter().zip(self.mlps()) {
            ck.mlps.push((name.to_string(), m.clone()));
        }
    }

    pub fn read_from(ck: &Checkpoint) -> Result<Self, HypoError> {
        let missing = |what: &str| HypoError::Nn(NnError::Checkpoint(format!("missing {what}")));
        let mut values = [0usize; 10];
        for (v, name) in values.iter_mut().zip(Architecture::FIELDS) {
            *v = ck.scalar(&format!("arch.{name}")).ok_or_else(|| missing(name))? as usize;
        }
        let arch = Architecture::from_values(values);
        arch.validate()?;
        let get = |name: &str, spec: MlpSpec| -> Result<Mlp, HypoError> {
            let m = ck.mlp(name).ok_or_else(|| missing(name))?;
            if m.spec() != spec {
                return Err(HypoError::Nn(NnError::Checkpoint(format!("{name} does not match the stored architecture"))));
            }
            Ok(m.clone())
        };
        Ok(Self {
            arch,
            rot_enc: get("rot_enc", arch.rot_enc())?,
            trans_enc: get("trans_enc", arch.trans_enc())?,
            linear_rot: get("linear_rot", arch.linear_rot())?,
            linear_trans: get("linear_trans", arch.linear_trans())?,
            g: get("g", arch.g())?,
            e_r: get("e_r", arch.e_r())?,
            e_t: get("e_t", arch.e_t())?,
            d_r: get("d_r", arch.d())?,
            d_t: get("d_t", arch.d())?,
            score_r: get("score_r", arch.score())?,
            score_t: get("score_t", arch.score())?,
            bin_score: ck.scalar("bin_score").ok_or_else(|| missing("bin_score"))?,
        })
    }
}
