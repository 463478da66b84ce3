//! Classifier heads. The multi-branch head projects `in -> 16`, feeds four
//! parallel `16 -> 8` branches, concatenates them to 32 and maps to the
//! class logits. Every stage is affine; there is no activation in between.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{Bound, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

pub const NUM_CLASSES: usize = 2;
pub const HIDDEN: usize = 16;
pub const BRANCHES: usize = 4;
pub const BRANCH_WIDTH: usize = 8;
pub const CONCAT_WIDTH: usize = BRANCHES * BRANCH_WIDTH;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Four parallel branches.
    Mc,
    /// `in -> 16 -> num_class` with no branches.
    NoMc,
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HeadKind::Mc => "mc",
            HeadKind::NoMc => "no-mc",
        })
    }
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mc" => Ok(HeadKind::Mc),
            "no-mc" | "nomc" | "no_mc" => Ok(HeadKind::NoMc),
            other => Err(Error::Config(format!("unknown head '{other}', expected mc or no-mc"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Affine<P = ParamId> {
    pub weight: P,
    pub bias: P,
}

impl Affine {
    fn init<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        Affine {
            weight: store.fan_in(&format!("{prefix}.weight"), &[fan_in, fan_out], rng),
            bias: store.zeros(&format!("{prefix}.bias"), &[fan_out]),
        }
    }

    fn resolve(&self, b: &Bound) -> Affine<Var> {
        Affine {
            weight: b.var(self.weight),
            bias: b.var(self.bias),
        }
    }
}

impl Affine<Var> {
    fn apply<S: Scalar>(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        g.linear(x, self.weight, Some(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct McParams<P = ParamId> {
    pub fc1: Affine<P>,
    pub branches: Vec<Affine<P>>,
    pub fc_out: Affine<P>,
}

#[derive(Clone, Debug)]
pub struct NoMcParams<P = ParamId> {
    pub fc1: Affine<P>,
    pub fc_out: Affine<P>,
}

#[derive(Clone, Debug)]
pub enum HeadParams<P = ParamId> {
    Mc(McParams<P>),
    NoMc(NoMcParams<P>),
}

impl HeadParams {
    pub fn init<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        kind: HeadKind,
        in_dim: usize,
        rng: &mut R,
    ) -> Self {
        let fc1 = Affine::init(store, "head.fc1", in_dim, HIDDEN, rng);
        match kind {
            HeadKind::Mc => {
                let branches = (0..BRANCHES)
                    .map(|i| Affine::init(store, &format!("head.branch{i}"), HIDDEN, BRANCH_WIDTH, rng))
                    .collect();
                let fc_out = Affine::init(store, "head.out", CONCAT_WIDTH, NUM_CLASSES, rng);
                HeadParams::Mc(McParams { fc1, branches, fc_out })
            }
            HeadKind::NoMc => {
                let fc_out = Affine::init(store, "head.out", HIDDEN, NUM_CLASSES, rng);
                HeadParams::NoMc(NoMcParams { fc1, fc_out })
            }
        }
    }

    pub fn resolve(&self, b: &Bound) -> HeadParams<Var> {
        match self {
            HeadParams::Mc(p) => HeadParams::Mc(McParams {
                fc1: p.fc1.resolve(b),
                branches: p.branches.iter().map(|a| a.resolve(b)).collect(),
                fc_out: p.fc_out.resolve(b),
            }),
            HeadParams::NoMc(p) => HeadParams::NoMc(NoMcParams {
                fc1: p.fc1.resolve(b),
                fc_out: p.fc_out.resolve(b),
            }),
        }
    }
}

/// Logits and the per-sample embedding that feeds the correlation loss.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// `[num_class]`
    pub logits: Var,
    /// `[32]` branch concatenation for the multi-branch head, `[16]` otherwise.
    pub embedding: Var,
}

fn check_feature<S: Scalar>(g: &Graph<S>, op: &'static str, feature: Var, fc1: &Affine<Var>) -> Result<()> {
    let fs = g.shape(feature);
    let ws = g.shape(fc1.weight);
    if fs.len() != 1 || fs[0] != ws[0] {
        return Err(Error::shape(op, format!("feature {fs:?} for weight {ws:?}")));
    }
    Ok(())
}

pub fn mc_forward<S: Scalar>(g: &mut Graph<S>, feature: Var, p: &McParams<Var>) -> Result<HeadOutput> {
    check_feature(g, "mc_forward", feature, &p.fc1)?;
    if p.branches.len() != BRANCHES {
        return Err(Error::shape(
            "mc_forward",
            format!("{} branches, expected {BRANCHES}", p.branches.len()),
        ));
    }
    let x1 = p.fc1.apply(g, feature)?;
    let outs = p
        .branches
        .iter()
        .map(|b| b.apply(g, x1))
        .collect::<Result<Vec<_>>>()?;
    let embedding = g.concat(&outs, 0)?;
    let logits = p.fc_out.apply(g, embedding)?;
    Ok(HeadOutput { logits, embedding })
}

pub fn mc_ablated_forward<S: Scalar>(g: &mut Graph<S>, feature: Var, p: &NoMcParams<Var>) -> Result<HeadOutput> {
    check_feature(g, "mc_ablated_forward", feature, &p.fc1)?;
    let embedding = p.fc1.apply(g, feature)?;
    let logits = p.fc_out.apply(g, embedding)?;
    Ok(HeadOutput { logits, embedding })
}

pub fn head_forward<S: Scalar>(g: &mut Graph<S>, feature: Var, p: &HeadParams<Var>) -> Result<HeadOutput> {
    match p {
        HeadParams::Mc(p) => mc_forward(g, feature, p),
        HeadParams::NoMc(p) => mc_ablated_forward(g, feature, p),
    }
}
