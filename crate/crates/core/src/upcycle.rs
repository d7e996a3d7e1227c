//! Dense → MoE conversion by weight reuse, and the freeze mask for
//! continued training.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::model::{block_prefix, expert_prefix, router_name, Model, ModelError, Params, FFN_PARTS};
use crate::moe::MoeConfig;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum UpcycleError {
    #[error("cannot upcycle: {0}")]
    Transform(String),
    #[error("freeze mask requires an MoE model")]
    NotMoe,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Names of the parameters that receive updates.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FreezeMask {
    names: BTreeSet<String>,
}

impl FreezeMask {
    pub fn from_names<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            names: names.into_iter().map(Into::into).collect(),
        }
    }

    /// Every parameter of `model` is trainable.
    pub fn all(model: &Model) -> Self {
        Self::from_names(model.params.names())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.contains(name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    /// Scalar parameters covered by the mask.
    pub fn trainable_numel(&self, params: &Params) -> usize {
        params
            .iter()
            .filter(|(n, _)| self.contains(n))
            .map(|(_, t)| t.numel())
            .sum()
    }
}

/// Builds an MoE model whose every expert is an exact copy of the dense
/// block's FFN. All other parameters are copied verbatim. Routers start at
/// zero plus seeded Gaussian noise of std `moe.router_noise_std`.
pub fn upcycle(dense: &Model, moe: MoeConfig, seed: u64) -> Result<Model, UpcycleError> {
    if dense.is_moe() {
        return Err(UpcycleError::Transform("input model is already MoE".into()));
    }
    moe.validate()
        .map_err(|e| UpcycleError::Transform(e.to_string()))?;
    dense.validate()?;
    let cfg = &dense.config;
    let noise = Normal::new(0.0f32, moe.router_noise_std)
        .map_err(|e| UpcycleError::Transform(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut params = Params::new();
    for (name, t) in dense.params.iter() {
        let Some((block, part)) = split_ffn_name(name) else {
            params.insert(name, t.clone())?;
            continue;
        };
        // The router precedes the experts; emit it alongside the first FFN tensor.
        if part == FFN_PARTS[0] {
            let n = cfg.d_model * moe.n_experts;
            let data = if moe.router_noise_std > 0.0 {
                (0..n).map(|_| noise.sample(&mut rng)).collect()
            } else {
                vec![0.0; n]
            };
            params.insert(router_name(block), Tensor::new([cfg.d_model, moe.n_experts], data)
                .map_err(ModelError::from)?)?;
            for e in 0..moe.n_experts {
                for p in FFN_PARTS {
                    let src = dense.params.get(&format!("{}.ffn.{p}", block_prefix(block)))?;
                    params.insert(format!("{}.{p}", expert_prefix(block, e)), src.clone())?;
                }
            }
        }
    }
    let model = Model {
        config: cfg.clone(),
        moe: Some(moe),
        params,
    };
    model.validate()?;
    Ok(model)
}

fn split_ffn_name(name: &str) -> Option<(usize, &str)> {
    let rest = name.strip_prefix("blocks.")?;
    let (idx, tail) = rest.split_once('.')?;
    let part = tail.strip_prefix("ffn.")?;
    Some((idx.parse().ok()?, part))
}

/// Expert FFNs and routers only; everything else stays frozen.
pub fn build_freeze_mask(model: &Model) -> Result<FreezeMask, UpcycleError> {
    if !model.is_moe() {
        return Err(UpcycleError::NotMoe);
    }
    Ok(FreezeMask::from_names(
        model
            .params
            .names()
            .filter(|n| n.contains(".moe.experts.") || n.ends_with(".moe.router")),
    ))
}
