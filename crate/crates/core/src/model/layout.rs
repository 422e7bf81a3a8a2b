use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, Position};
use crate::blocks::{BlockVariant, Init, OdeGranularity, SublayerSpec};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tensor};

/// One named parameter tensor of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn push_sublayer(out: &mut Vec<ParamSlot>, scope: &str, spec: &SublayerSpec) {
    for (name, shape, init) in spec.param_shapes() {
        out.push(ParamSlot { name: format!("{scope}.{name}"), shape, init });
    }
}

fn push_coefficients(out: &mut Vec<ParamSlot>, scope: &str, variant: BlockVariant, d: usize, chain: usize) {
    for c in variant.coefficients(d, chain) {
        out.push(ParamSlot { name: format!("{scope}.coef.{}", c.name), shape: c.shape, init: Init::Constant(c.init) });
    }
}

fn push_embeddings(out: &mut Vec<ParamSlot>, cfg: &ModelConfig, stack: &str, with_output: bool) {
    let (v, d) = (cfg.vocab_size, cfg.d_model);
    // unit-variance rows after the sqrt(d) scaling
    let bound = libm::sqrt(3.0 / d as f64);
    out.push(ParamSlot { name: format!("{stack}.embed"), shape: vec![v, d], init: Init::Uniform(bound) });
    if cfg.position == Position::LearnedAbsolute {
        out.push(ParamSlot { name: format!("{stack}.pos"), shape: vec![cfg.max_len, d], init: Init::Uniform(bound) });
    }
    if with_output && !cfg.tie_embeddings {
        out.push(ParamSlot {
            name: format!("{stack}.out"),
            shape: vec![d, v],
            init: Init::Xavier { fan_in: d, fan_out: v },
        });
    }
}

fn push_final_norm(out: &mut Vec<ParamSlot>, stack: &str, d: usize) {
    out.push(ParamSlot { name: format!("{stack}.ln.gain"), shape: vec![d], init: Init::Ones });
    out.push(ParamSlot { name: format!("{stack}.ln.bias"), shape: vec![d], init: Init::Zeros });
}

/// The block stack carrying the ODE variant (`enc` or `lm`).
fn push_ode_stack(out: &mut Vec<ParamSlot>, cfg: &ModelConfig, stack: &str) {
    let (san, ffn) = (cfg.san_spec(), cfg.ffn_spec());
    let d = cfg.d_model;
    for i in 0..cfg.enc_depth {
        let block = format!("{stack}.block{i}");
        push_sublayer(out, &format!("{block}.san"), &san);
        push_sublayer(out, &format!("{block}.ffn"), &ffn);
        match cfg.granularity {
            OdeGranularity::Fused => push_coefficients(out, &block, cfg.variant, d, i),
            OdeGranularity::SublayerWise => {
                push_coefficients(out, &format!("{block}.san"), cfg.variant, d, 2 * i);
                push_coefficients(out, &format!("{block}.ffn"), cfg.variant, d, 2 * i + 1);
            }
            OdeGranularity::SanOnly => push_coefficients(out, &format!("{block}.san"), cfg.variant, d, i),
            OdeGranularity::FfnOnly => push_coefficients(out, &format!("{block}.ffn"), cfg.variant, d, i),
        }
    }
    push_final_norm(out, stack, d);
}

/// Every parameter of the model described by `cfg`, in declaration order.
pub fn param_layout(cfg: &ModelConfig) -> Vec<ParamSlot> {
    let mut out = Vec::new();
    if cfg.is_lm() {
        push_embeddings(&mut out, cfg, "lm", true);
        push_ode_stack(&mut out, cfg, "lm");
        return out;
    }
    push_embeddings(&mut out, cfg, "enc", false);
    push_ode_stack(&mut out, cfg, "enc");
    push_embeddings(&mut out, cfg, "dec", true);
    let san = cfg.san_spec();
    for i in 0..cfg.dec_depth {
        let block = format!("dec.block{i}");
        push_sublayer(&mut out, &format!("{block}.self"), &san);
        push_sublayer(&mut out, &format!("{block}.cross"), &san);
        push_sublayer(&mut out, &format!("{block}.ffn"), &cfg.ffn_spec());
    }
    push_final_norm(&mut out, "dec", cfg.d_model);
    out
}

fn sample(init: Init, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let uniform = |bound: f64, rng: &mut ChaCha8Rng| (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    match init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Constant(c) => vec![c; n],
        Init::Uniform(bound) => uniform(bound, rng),
        Init::Xavier { fan_in, fan_out } => uniform(libm::sqrt(6.0 / (fan_in + fan_out) as f64), rng),
    }
}

/// Draws initial parameters. Values are sampled in `f64` in declaration
/// order and then cast, so `f32` and `f64` stores from one seed agree up to
/// rounding.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for slot in param_layout(cfg) {
        let n = slot.shape.iter().product();
        let data = sample(slot.init, n, &mut rng);
        store.insert(slot.name, Tensor::from_f64(&slot.shape, &data)?)?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_parity_across_variants() {
        let base = ModelConfig::encoder_decoder(32, 16, 4, 1);
        let euler = base.param_count();
        for v in BlockVariant::ALL {
            let cfg = base.clone().with_variant(v);
            let declared: usize = (0..4).map(|i| v.coefficient_count(16, i)).sum();
            assert_eq!(cfg.param_count(), euler + declared, "{v}");
        }
        assert_eq!(base.clone().with_variant(BlockVariant::Rk2GatedSigmoidPair).param_count(), euler + 4 * 33);
    }

    #[test]
    fn names_are_unique_and_init_is_seeded() {
        let cfg = ModelConfig::encoder_decoder(12, 8, 2, 2).with_variant(BlockVariant::Rk2LearnableScalar);
        let a = init_params::<f64>(&cfg, 7).unwrap();
        let b = init_params::<f64>(&cfg, 7).unwrap();
        let c = init_params::<f64>(&cfg, 8).unwrap();
        assert!(a.same_values(&b));
        assert!(!a.same_values(&c));
        assert_eq!(a.len(), param_layout(&cfg).len());
        assert_eq!(a.get("enc.block1.coef.gamma2").unwrap().data(), &[1.0]);
        assert!(a.contains("dec.block1.cross.wq"));
        assert!(!a.contains("dec.out"));
    }

    #[test]
    fn granularity_moves_coefficients() {
        let mut cfg = ModelConfig::language_model(10, 8, 2).with_variant(BlockVariant::Dlcl);
        cfg.granularity = OdeGranularity::SublayerWise;
        let names: Vec<String> = param_layout(&cfg).into_iter().map(|s| s.name).collect();
        assert!(names.iter().any(|n| n == "lm.block1.ffn.coef.dlcl"));
        let store = init_params::<f64>(&cfg, 1).unwrap();
        assert_eq!(store.get("lm.block1.ffn.coef.dlcl").unwrap().numel(), 4);
    }
}
