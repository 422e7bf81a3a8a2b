use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::Error;

/// Residual integration rule of one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BlockVariant {
    /// `y + F(y)`: the plain residual connection.
    Euler,
    /// `y + F1/2 + F2/2`, `F2 = F(y + F1)`.
    Rk2,
    /// `y + F1 + F2`.
    Rk2GammaOne,
    /// `y + g1*F1 + g2*F2` with free scalars initialised to 1.
    Rk2LearnableScalar,
    /// `y + s1*F1 + s2*F2` with two independent sigmoid gates.
    Rk2GatedSigmoid,
    /// `y + g*F1 + (1 - g)*F2`, `g = sigmoid([F1, F2] W + b)`.
    Rk2GatedSigmoidPair,
    /// `y + t1*F1 + t2*F2` with two independent tanh gates.
    Rk2Tanh,
    /// Classical fourth order, weights 1/6, 2/6, 2/6, 1/6.
    Rk4,
    /// `y_prev + 2F(y)`.
    Leapfrog,
    /// `k*y + (1 - k)*y_prev + F(y)`.
    Multistep,
    /// `y_0 + sum_l W_l F(y_l)` over all earlier blocks.
    Dlcl,
    /// `y + F(y) + F(F(y))`.
    PolyNet,
}

/// One learnable coefficient tensor owned by a block.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSpec {
    /// Name relative to the block's `coef` scope.
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub init: f64,
}

impl BlockVariant {
    pub const ALL: [BlockVariant; 12] = [
        BlockVariant::Euler,
        BlockVariant::Rk2,
        BlockVariant::Rk2GammaOne,
        BlockVariant::Rk2LearnableScalar,
        BlockVariant::Rk2GatedSigmoid,
        BlockVariant::Rk2GatedSigmoidPair,
        BlockVariant::Rk2Tanh,
        BlockVariant::Rk4,
        BlockVariant::Leapfrog,
        BlockVariant::Multistep,
        BlockVariant::Dlcl,
        BlockVariant::PolyNet,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            BlockVariant::Euler => "Euler",
            BlockVariant::Rk2 => "RK2",
            BlockVariant::Rk2GammaOne => "RK2GammaOne",
            BlockVariant::Rk2LearnableScalar => "RK2LearnableScalar",
            BlockVariant::Rk2GatedSigmoid => "RK2GatedSigmoid",
            BlockVariant::Rk2GatedSigmoidPair => "RK2GatedSigmoidPair",
            BlockVariant::Rk2Tanh => "RK2Tanh",
            BlockVariant::Rk4 => "RK4",
            BlockVariant::Leapfrog => "Leapfrog",
            BlockVariant::Multistep => "Multistep",
            BlockVariant::Dlcl => "DLCL",
            BlockVariant::PolyNet => "PolyNet",
        }
    }

    /// Evaluations of `F` per block.
    pub fn stage_count(self) -> usize {
        match self {
            BlockVariant::Euler | BlockVariant::Leapfrog | BlockVariant::Multistep | BlockVariant::Dlcl => 1,
            BlockVariant::Rk4 => 4,
            _ => 2,
        }
    }

    /// Whether the block reads earlier block states.
    pub fn uses_history(self) -> bool {
        matches!(self, BlockVariant::Leapfrog | BlockVariant::Multistep | BlockVariant::Dlcl)
    }

    /// Coefficient tensors of the block at position `chain_index` in its
    /// stack (only DLCL depends on the position).
    pub fn coefficients(self, d_model: usize, chain_index: usize) -> Vec<CoefficientSpec> {
        let spec = |name, shape: &[usize], init| CoefficientSpec { name, shape: shape.to_vec(), init };
        match self {
            BlockVariant::Rk2LearnableScalar => vec![spec("gamma1", &[1], 1.0), spec("gamma2", &[1], 1.0)],
            BlockVariant::Rk2GatedSigmoidPair => {
                vec![spec("gate.w", &[2 * d_model, 1], 0.0), spec("gate.b", &[1], 0.0)]
            }
            BlockVariant::Rk2GatedSigmoid | BlockVariant::Rk2Tanh => {
                // tanh gates start at tanh(atanh(1/2)) = 1/2 like the sigmoid ones.
                let b0 = if self == BlockVariant::Rk2Tanh { libm::atanh(0.5) } else { 0.0 };
                vec![
                    spec("gate1.w", &[2 * d_model, 1], 0.0),
                    spec("gate1.b", &[1], b0),
                    spec("gate2.w", &[2 * d_model, 1], 0.0),
                    spec("gate2.b", &[1], b0),
                ]
            }
            BlockVariant::Multistep => vec![spec("k", &[1], 0.5)],
            BlockVariant::Dlcl => vec![spec("dlcl", &[chain_index + 1], 1.0 / (chain_index + 1) as f64)],
            _ => Vec::new(),
        }
    }

    /// Scalar count of [`BlockVariant::coefficients`].
    pub fn coefficient_count(self, d_model: usize, chain_index: usize) -> usize {
        self.coefficients(d_model, chain_index).iter().map(|c| c.shape.iter().product::<usize>()).sum()
    }
}

impl fmt::Display for BlockVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for BlockVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let wanted = s.trim();
        BlockVariant::ALL
            .into_iter()
            .find(|v| v.tag().eq_ignore_ascii_case(wanted))
            .ok_or_else(|| Error::Parse { kind: "block variant", value: s.to_string() })
    }
}

/// Which sublayers are wrapped by the ODE rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum OdeGranularity {
    /// Attention and feed-forward are separate ODE blocks.
    SublayerWise,
    /// Only attention uses the variant; feed-forward is Euler.
    SanOnly,
    /// Only feed-forward uses the variant; attention is Euler.
    FfnOnly,
    /// Attention followed by feed-forward forms a single `F`.
    #[default]
    Fused,
}

impl OdeGranularity {
    pub const ALL: [OdeGranularity; 4] =
        [OdeGranularity::SublayerWise, OdeGranularity::SanOnly, OdeGranularity::FfnOnly, OdeGranularity::Fused];

    pub fn tag(self) -> &'static str {
        match self {
            OdeGranularity::SublayerWise => "SublayerWise",
            OdeGranularity::SanOnly => "SanOnly",
            OdeGranularity::FfnOnly => "FfnOnly",
            OdeGranularity::Fused => "Fused",
        }
    }
}

impl fmt::Display for OdeGranularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for OdeGranularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let wanted = s.trim();
        OdeGranularity::ALL
            .into_iter()
            .find(|g| g.tag().eq_ignore_ascii_case(wanted))
            .ok_or_else(|| Error::Parse { kind: "ODE granularity", value: s.to_string() })
    }
}
