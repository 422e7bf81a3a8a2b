//! Linear-probe stacks, where every block Jacobian is a closed-form scalar.

use alloc::format;
use alloc::vec;

use super::block::{block_forward, BlockState, Coefficients};
use super::variant::BlockVariant;
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tape, Tensor};

/// `dy_L/dy_t` through `L - t` blocks of `variant` with `F(y) = c y`.
///
/// Defined for the single-step variants whose per-block factor is a
/// polynomial in `c`: Euler, RK2, RK2GammaOne, RK4 and PolyNet.
pub fn analytic_depth_gradient(variant: BlockVariant, c: f64, depth: usize, t: usize) -> Result<f64> {
    if t >= depth {
        return Err(Error::invalid(format!("block index {t} must be below depth {depth}")));
    }
    let factor = match variant {
        BlockVariant::Euler => 1.0 + c,
        // (1 + (1 + c)^2) / 2
        BlockVariant::Rk2 => 1.0 + c + c * c / 2.0,
        BlockVariant::Rk2GammaOne => (1.0 + c) * (1.0 + c),
        BlockVariant::Rk4 => 1.0 + c + c * c / 2.0 + c * c * c / 6.0 + c * c * c * c / 24.0,
        BlockVariant::PolyNet => 1.0 + c + c * c,
        other => {
            return Err(Error::invalid(format!("no closed-form probe gradient for {other}")));
        }
    };
    Ok(libm::pow(factor, (depth - t) as f64))
}

/// Same quantity as [`analytic_depth_gradient`], obtained by running
/// reverse-mode autodiff through an actual stack of `depth - t` blocks.
///
/// Learnable coefficients sit at their initial values. History variants
/// start their chain at `y_t`.
pub fn probe_stack_gradient(variant: BlockVariant, c: f64, depth: usize, t: usize) -> Result<f64> {
    if t >= depth {
        return Err(Error::invalid(format!("block index {t} must be below depth {depth}")));
    }
    let mut store = ParamStore::<f64>::new();
    for i in 0..depth - t {
        for spec in variant.coefficients(1, i) {
            let n: usize = spec.shape.iter().product();
            store.insert(format!("probe.block{i}.{}", spec.name), Tensor::new(&spec.shape, vec![spec.init; n])?)?;
        }
    }
    let mut tape = Tape::new();
    let bound = store.bind_frozen(&mut tape);
    let y_t = tape.param(Tensor::from_f64(&[1, 1], &[1.0])?);
    let mut f = |tape: &mut Tape<f64>, y| tape.scalar_mul(y, c);
    let mut state = BlockState::new();
    let mut y = y_t;
    for i in 0..depth - t {
        let coeffs = Coefficients::bind(variant, &bound, &format!("probe.block{i}"))?;
        y = block_forward(&mut tape, variant, &coeffs, &mut f, y, &mut state)?;
    }
    let loss = tape.sum(y)?;
    tape.backward(loss)?;
    Ok(tape.grad(y_t)?.map_or(0.0, |g| g[0]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_examples() {
        let g = analytic_depth_gradient(BlockVariant::Rk2, 0.1, 5, 4).unwrap();
        assert!((g - 1.105).abs() < 1e-15);
        let g = analytic_depth_gradient(BlockVariant::Rk2GammaOne, 0.1, 5, 4).unwrap();
        assert!((g - 1.21).abs() < 1e-15);
        let g = analytic_depth_gradient(BlockVariant::Rk2, 0.1, 8, 0).unwrap();
        assert!((g - 1.105f64.powi(8)).abs() < 1e-13 && (g - 2.22279).abs() < 1e-5, "{g}");
        let g = analytic_depth_gradient(BlockVariant::Rk2GammaOne, 0.1, 8, 0).unwrap();
        assert!((g - 4.5950).abs() < 1e-4, "{g}");
        for v in [BlockVariant::Rk2, BlockVariant::Rk2GammaOne] {
            assert_eq!(analytic_depth_gradient(v, 0.0, 7, 2).unwrap(), 1.0);
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(analytic_depth_gradient(BlockVariant::Rk2, 0.1, 3, 3).is_err());
        assert!(analytic_depth_gradient(BlockVariant::Dlcl, 0.1, 3, 0).is_err());
        assert!(probe_stack_gradient(BlockVariant::Rk2, 0.1, 2, 5).is_err());
    }

    #[test]
    fn autodiff_matches_closed_form() {
        let variants = [
            BlockVariant::Euler,
            BlockVariant::Rk2,
            BlockVariant::Rk2GammaOne,
            BlockVariant::Rk4,
            BlockVariant::PolyNet,
        ];
        for v in variants {
            for c in [0.01, 0.1, 0.5] {
                for span in 1..=8 {
                    let want = analytic_depth_gradient(v, c, 10, 10 - span).unwrap();
                    let got = probe_stack_gradient(v, c, 10, 10 - span).unwrap();
                    assert!(((got - want) / want).abs() < 1e-10, "{v} c={c} span={span}: {got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn gated_and_learnable_variants_start_at_their_fixed_counterparts() {
        for (learned, fixed) in [
            (BlockVariant::Rk2GatedSigmoidPair, BlockVariant::Rk2),
            (BlockVariant::Rk2GatedSigmoid, BlockVariant::Rk2),
            (BlockVariant::Rk2LearnableScalar, BlockVariant::Rk2GammaOne),
        ] {
            let a = probe_stack_gradient(learned, 0.1, 6, 0).unwrap();
            let b = analytic_depth_gradient(fixed, 0.1, 6, 0).unwrap();
            assert!(((a - b) / b).abs() < 1e-12, "{learned}");
        }
    }
}
