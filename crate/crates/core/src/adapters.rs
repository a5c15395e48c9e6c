//! The four adaptation mechanisms compared by the lab: prefix tuning,
//! prompt tuning, LoRA, and full fine-tuning.
//!
//! An `AdaptedModel` owns the frozen backbone, the adapter state, and one
//! flat `ParamSet` holding every matrix with its trainable flag. The same
//! struct builds the training tape and the pure evaluation path, so the two
//! cannot drift apart. Removing an adapter restores base behavior exactly:
//! prefix and prompt state never touches the weights, and LoRA composes its
//! update lazily per forward instead of mutating `W`.

use crate::linalg::Matrix;
use crate::model::{
    tape_attention_stack, MaskKind, Model, ModelError, PrefixBlock, TapeForwardOpts,
    TapeLayerWeights, TapeWeights,
};
use crate::tape::{ParamId, ParamSet, Tape, TapeError, VarId};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("prefix length m must be >= 1")]
    EmptyPrefix,
    #[error("LoRA rank must be >= 1")]
    ZeroRank,
    #[error("demo rows required for cache/text initialization")]
    MissingDemos,
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("tape error: {0}")]
    Tape(#[from] TapeError),
}

/// Which projection matrices a LoRA adapter touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LoraTargets {
    QK,
    QKV,
}

impl LoraTargets {
    pub fn count(self) -> usize {
        match self {
            LoraTargets::QK => 2,
            LoraTargets::QKV => 3,
        }
    }

    /// Rank of the induced value update: zero for QK-only adapters.
    pub fn value_rank(self, r: usize) -> usize {
        match self {
            LoraTargets::QK => 0,
            LoraTargets::QKV => r,
        }
    }
}

/// How a prefix adapter is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PrefixInitMode {
    Random,
    FromTextDemos,
    FromDemoCache,
}

/// Declarative adapter description, used by configs and the harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AdapterSpec {
    /// The unadapted frozen model.
    Base,
    Prefix {
        m: usize,
        init: PrefixInitMode,
        #[serde(default)]
        reparam: bool,
    },
    Prompt {
        m: usize,
    },
    Lora {
        rank: usize,
        targets: LoraTargets,
    },
    FullFt,
}

/// Identifiers of the reparameterization MLP parameters: a fixed learnable
/// input row, a tanh hidden layer of width 4d, and a linear head emitting
/// all 2*L*m*d prefix coordinates.
#[derive(Debug, Clone)]
struct ReparamIds {
    z: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
struct LoraPair {
    a: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct LoraLayerIds {
    q: Option<LoraPair>,
    k: Option<LoraPair>,
    v: Option<LoraPair>,
}

#[derive(Debug, Clone)]
enum AdapterIds {
    Base,
    Prefix { kv: Vec<(ParamId, ParamId)>, m: usize, init: PrefixInitMode },
    PrefixReparam { mlp: ReparamIds, m: usize },
    Prompt { e: ParamId },
    Lora { layers: Vec<LoraLayerIds>, rank: usize, targets: LoraTargets },
    FullFt,
}

#[derive(Debug, Clone)]
struct LayerIds {
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    w_o: Option<ParamId>,
    ffn: Option<(ParamId, ParamId)>,
}

/// Input to a tape forward build.
pub enum TapeInput<'a> {
    /// Raw embedding rows (no vocabulary involved).
    Rows(&'a Matrix),
    /// Token ids looked up in the embedding table at the given absolute
    /// position offset.
    Tokens(&'a [usize], usize),
}

/// Handles into the tape produced by `build_tape`.
pub struct BuiltForward {
    pub binds: Vec<VarId>,
    pub hidden: VarId,
    pub logits: Option<VarId>,
    /// Number of leading rows in `hidden` that belong to prepended prompt
    /// embeddings rather than to the input itself.
    pub input_row_offset: usize,
}

/// A frozen backbone plus adapter state, sharing one parameter set.
pub struct AdaptedModel {
    model: Model,
    params: ParamSet,
    layers: Vec<LayerIds>,
    embed: Option<ParamId>,
    unembed: Option<ParamId>,
    adapter: AdapterIds,
}

impl AdaptedModel {
    /// Attach an adapter to a frozen model. `demos` supplies the rows for
    /// cache/text prefix initialization and may be `None` otherwise.
    pub fn apply<R: Rng + ?Sized>(
        model: Model,
        spec: &AdapterSpec,
        demos: Option<&Matrix>,
        rng: &mut R,
    ) -> Result<Self, AdapterError> {
        let trainable_backbone = matches!(spec, AdapterSpec::FullFt);
        let mut params = ParamSet::new();
        let layers: Vec<LayerIds> = model
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| LayerIds {
                w_q: params.add(format!("layer{i}.w_q"), l.w_q.clone(), trainable_backbone),
                w_k: params.add(format!("layer{i}.w_k"), l.w_k.clone(), trainable_backbone),
                w_v: params.add(format!("layer{i}.w_v"), l.w_v.clone(), trainable_backbone),
                w_o: model
                    .config
                    .use_wo
                    .then(|| params.add(format!("layer{i}.w_o"), l.w_o.clone(), trainable_backbone)),
                ffn: l.ffn.as_ref().map(|(w1, w2)| {
                    (
                        params.add(format!("layer{i}.ffn_in"), w1.clone(), trainable_backbone),
                        params.add(format!("layer{i}.ffn_out"), w2.clone(), trainable_backbone),
                    )
                }),
            })
            .collect();
        let embed = model.embed.as_ref().map(|e| params.add("embed", e.clone(), trainable_backbone));
        let unembed =
            model.unembed.as_ref().map(|u| params.add("unembed", u.clone(), trainable_backbone));

        let d = model.config.d;
        let num_layers = model.config.layers;
        let adapter = match spec {
            AdapterSpec::Base => AdapterIds::Base,
            AdapterSpec::FullFt => AdapterIds::FullFt,
            AdapterSpec::Prompt { m } => {
                if *m == 0 {
                    return Err(AdapterError::EmptyPrefix);
                }
                let e = params.add("prompt.e", Matrix::gaussian(*m, d, 0.02, rng), true);
                AdapterIds::Prompt { e }
            }
            AdapterSpec::Lora { rank, targets } => {
                if *rank == 0 {
                    return Err(AdapterError::ZeroRank);
                }
                let mut lora_layers = Vec::with_capacity(num_layers);
                for i in 0..num_layers {
                    let mut pair = |tag: &str| LoraPair {
                        a: params.add(format!("lora{i}.{tag}.a"), Matrix::gaussian(d, *rank, 0.02, rng), true),
                        b: params.add(format!("lora{i}.{tag}.b"), Matrix::zeros(*rank, d), true),
                    };
                    lora_layers.push(LoraLayerIds {
                        q: Some(pair("q")),
                        k: Some(pair("k")),
                        v: matches!(targets, LoraTargets::QKV).then(|| pair("v")),
                    });
                }
                AdapterIds::Lora { layers: lora_layers, rank: *rank, targets: *targets }
            }
            AdapterSpec::Prefix { m, init, reparam } => {
                if *m == 0 {
                    return Err(AdapterError::EmptyPrefix);
                }
                if *reparam {
                    let h = 4 * d;
                    let out = 2 * num_layers * m * d;
                    let mlp = ReparamIds {
                        z: params.add("reparam.z", Matrix::gaussian(1, d, 1.0, rng), true),
                        w1: params.add("reparam.w1", Matrix::gaussian(d, h, 1.0 / (d as f64).sqrt(), rng), true),
                        b1: params.add("reparam.b1", Matrix::zeros(1, h), true),
                        w2: params.add(
                            "reparam.w2",
                            Matrix::gaussian(h, out, 0.02 / (h as f64).sqrt(), rng),
                            true,
                        ),
                        b2: params.add("reparam.b2", Matrix::zeros(1, out), true),
                    };
                    AdapterIds::PrefixReparam { mlp, m: *m }
                } else {
                    let block = init_prefix_block(&model, *init, demos, *m, rng)?;
                    let kv = block
                        .layers
                        .into_iter()
                        .enumerate()
                        .map(|(i, (pk, pv))| {
                            (
                                params.add(format!("prefix{i}.k"), pk, true),
                                params.add(format!("prefix{i}.v"), pv, true),
                            )
                        })
                        .collect();
                    AdapterIds::Prefix { kv, m: *m, init: *init }
                }
            }
        };

        Ok(Self { model, params, layers, embed, unembed, adapter })
    }

    pub fn base_model(&self) -> &Model {
        &self.model
    }

    /// Initialization mode of a prefix adapter, for run metadata.
    pub fn prefix_init_mode(&self) -> Option<PrefixInitMode> {
        match &self.adapter {
            AdapterIds::Prefix { init, .. } => Some(*init),
            AdapterIds::PrefixReparam { .. } => Some(PrefixInitMode::Random),
            _ => None,
        }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Parameters that must ship at inference: the reparameterization MLP is
    /// excluded because it is discarded after materialization.
    pub fn deployed_param_count(&self) -> usize {
        let cfg = &self.model.config;
        let d = cfg.d;
        match &self.adapter {
            AdapterIds::Base => 0,
            AdapterIds::Prefix { m, .. } | AdapterIds::PrefixReparam { m, .. } => 2 * cfg.layers * m * d,
            AdapterIds::Prompt { e } => {
                let m = self.params.get(*e).value.rows();
                m * d
            }
            AdapterIds::Lora { rank, targets, .. } => cfg.layers * targets.count() * rank * 2 * d,
            AdapterIds::FullFt => self
                .params
                .iter()
                .map(|p| p.value.rows() * p.value.cols())
                .sum(),
        }
    }

    /// Current prefix block: direct slots, or the MLP output for
    /// reparameterized adapters. `None` when the adapter has no prefix.
    pub fn current_prefix(&self) -> Option<PrefixBlock> {
        match &self.adapter {
            AdapterIds::Prefix { kv, .. } => Some(PrefixBlock {
                layers: kv
                    .iter()
                    .map(|(pk, pv)| (self.params.get(*pk).value.clone(), self.params.get(*pv).value.clone()))
                    .collect(),
            }),
            AdapterIds::PrefixReparam { mlp, m } => Some(self.reparam_block(mlp, *m)),
            _ => None,
        }
    }

    /// Evaluate the reparameterization MLP with plain matrix ops (the same
    /// ops the tape path uses, so results agree bitwise).
    fn reparam_block(&self, mlp: &ReparamIds, m: usize) -> PrefixBlock {
        let z = &self.params.get(mlp.z).value;
        let w1 = &self.params.get(mlp.w1).value;
        let b1 = &self.params.get(mlp.b1).value;
        let w2 = &self.params.get(mlp.w2).value;
        let b2 = &self.params.get(mlp.b2).value;
        let h = z.matmul(w1).add(b1).map(f64::tanh);
        let out = h.matmul(w2).add(b2);
        let d = self.model.config.d;
        let stacked = Matrix::new(2 * self.model.config.layers * m, d, out.data().to_vec());
        let layers = (0..self.model.config.layers)
            .map(|l| {
                let base = l * 2 * m;
                let pk_rows: Vec<usize> = (base..base + m).collect();
                let pv_rows: Vec<usize> = (base + m..base + 2 * m).collect();
                (stacked.select_rows(&pk_rows), stacked.select_rows(&pv_rows))
            })
            .collect();
        PrefixBlock { layers }
    }

    /// Drop the reparameterization network, freezing the generated prefix
    /// into plain slots. Forward behavior is bit-identical.
    pub fn materialize(self) -> Self {
        let AdapterIds::PrefixReparam { ref mlp, m } = self.adapter else {
            return self;
        };
        let block = self.reparam_block(mlp, m);
        let mut out = Self::rebind(self.model.clone(), AdapterIds::Base);
        let kv = block
            .layers
            .into_iter()
            .enumerate()
            .map(|(i, (pk, pv))| {
                (
                    out.params.add(format!("prefix{i}.k"), pk, true),
                    out.params.add(format!("prefix{i}.v"), pv, true),
                )
            })
            .collect();
        out.adapter = AdapterIds::Prefix { kv, m, init: PrefixInitMode::Random };
        out
    }

    fn rebind(model: Model, adapter: AdapterIds) -> Self {
        let mut params = ParamSet::new();
        let layers = model
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| LayerIds {
                w_q: params.add(format!("layer{i}.w_q"), l.w_q.clone(), false),
                w_k: params.add(format!("layer{i}.w_k"), l.w_k.clone(), false),
                w_v: params.add(format!("layer{i}.w_v"), l.w_v.clone(), false),
                w_o: model.config.use_wo.then(|| params.add(format!("layer{i}.w_o"), l.w_o.clone(), false)),
                ffn: l.ffn.as_ref().map(|(w1, w2)| {
                    (
                        params.add(format!("layer{i}.ffn_in"), w1.clone(), false),
                        params.add(format!("layer{i}.ffn_out"), w2.clone(), false),
                    )
                }),
            })
            .collect();
        let embed = model.embed.as_ref().map(|e| params.add("embed", e.clone(), false));
        let unembed = model.unembed.as_ref().map(|u| params.add("unembed", u.clone(), false));
        Self { model, params, layers, embed, unembed, adapter }
    }

    /// Reconstruct the backbone weights currently stored in the param set.
    /// For everything except full fine-tuning this is the frozen checkpoint.
    pub fn backbone_from_params(&self) -> Model {
        let mut model = self.model.clone();
        for (ids, layer) in self.layers.iter().zip(model.layers.iter_mut()) {
            layer.w_q = self.params.get(ids.w_q).value.clone();
            layer.w_k = self.params.get(ids.w_k).value.clone();
            layer.w_v = self.params.get(ids.w_v).value.clone();
            if let Some(wo) = ids.w_o {
                layer.w_o = self.params.get(wo).value.clone();
            }
            if let (Some((a, b)), Some(ffn)) = (ids.ffn, layer.ffn.as_mut()) {
                ffn.0 = self.params.get(a).value.clone();
                ffn.1 = self.params.get(b).value.clone();
            }
        }
        if let Some(e) = self.embed {
            model.embed = Some(self.params.get(e).value.clone());
        }
        if let Some(u) = self.unembed {
            model.unembed = Some(self.params.get(u).value.clone());
        }
        model
    }

    /// Effective `(model, prefix)` pair for pure evaluation and decoding.
    ///
    /// LoRA materializes `W + A*B` into a throwaway copy, leaving the frozen
    /// weights untouched. Prompt embeddings become the per-layer KV-cache
    /// the frozen model produces on them, which is exactly equivalent to
    /// prepending the rows.
    pub fn effective(&self) -> Result<(Model, Option<PrefixBlock>), AdapterError> {
        match &self.adapter {
            AdapterIds::Base => Ok((self.model.clone(), None)),
            AdapterIds::FullFt => Ok((self.backbone_from_params(), None)),
            AdapterIds::Prefix { .. } | AdapterIds::PrefixReparam { .. } => {
                Ok((self.model.clone(), self.current_prefix()))
            }
            AdapterIds::Prompt { e } => {
                let rows = &self.params.get(*e).value;
                let cache = self.model.build_demo_cache(rows)?;
                Ok((self.model.clone(), Some(cache.into_prefix())))
            }
            AdapterIds::Lora { layers, .. } => {
                let mut model = self.model.clone();
                for (ids, layer) in layers.iter().zip(model.layers.iter_mut()) {
                    let apply = |pair: &Option<LoraPair>, w: &mut Matrix| {
                        if let Some(p) = pair {
                            let delta =
                                self.params.get(p.a).value.matmul(&self.params.get(p.b).value);
                            *w = w.add(&delta);
                        }
                    };
                    apply(&ids.q, &mut layer.w_q);
                    apply(&ids.k, &mut layer.w_k);
                    apply(&ids.v, &mut layer.w_v);
                }
                Ok((model, None))
            }
        }
    }

    /// Remove the adapter, recovering the stored frozen checkpoint.
    pub fn remove(self) -> Model {
        self.model
    }

    /// Effective value update `A * B` per layer, for rank assertions.
    pub fn lora_value_deltas(&self) -> Vec<Matrix> {
        match &self.adapter {
            AdapterIds::Lora { layers, .. } => layers
                .iter()
                .filter_map(|l| l.v.as_ref())
                .map(|p| self.params.get(p.a).value.matmul(&self.params.get(p.b).value))
                .collect(),
            _ => Vec::new(),
        }
    }

    /// Build the adapted forward on a tape: leaf-bind every param, compose
    /// adapter expressions, and return the hidden/logits handles.
    pub fn build_tape(
        &self,
        tape: &mut Tape,
        input: &TapeInput,
        mask: MaskKind,
        detach_kv_inputs: bool,
    ) -> Result<BuiltForward, AdapterError> {
        let binds = self.params.bind(tape);
        let cfg = &self.model.config;

        // Input rows.
        let mut h0 = match input {
            TapeInput::Rows(m) => tape.leaf((*m).clone()),
            TapeInput::Tokens(ids, offset) => {
                let table = self.embed.map(|id| binds[id.0]).ok_or(ModelError::NoVocab)?;
                let mut h = tape.embed_lookup(table, ids)?;
                if cfg.positions {
                    let pe = crate::model::sinusoidal_positions(ids.len(), cfg.d, *offset);
                    let pe_leaf = tape.leaf(pe);
                    h = tape.add(h, pe_leaf)?;
                }
                h
            }
        };

        let mut input_row_offset = 0;
        if let AdapterIds::Prompt { e } = &self.adapter {
            input_row_offset = self.params.get(*e).value.rows();
            h0 = tape.concat_rows(binds[e.0], h0)?;
        }

        // Layer weights, with LoRA deltas composed on top of frozen leaves.
        let lora = match &self.adapter {
            AdapterIds::Lora { layers, .. } => Some(layers),
            _ => None,
        };
        let mut weight_layers = Vec::with_capacity(cfg.layers);
        for (li, ids) in self.layers.iter().enumerate() {
            let mut wire = |base: ParamId, pair: Option<&LoraPair>| -> Result<VarId, TapeError> {
                let w = binds[base.0];
                match pair {
                    Some(p) => {
                        let delta = tape.matmul(binds[p.a.0], binds[p.b.0])?;
                        tape.add(w, delta)
                    }
                    None => Ok(w),
                }
            };
            let l = lora.map(|ls| &ls[li]);
            weight_layers.push(TapeLayerWeights {
                w_q: wire(ids.w_q, l.and_then(|x| x.q.as_ref()))?,
                w_k: wire(ids.w_k, l.and_then(|x| x.k.as_ref()))?,
                w_v: wire(ids.w_v, l.and_then(|x| x.v.as_ref()))?,
                w_o: ids.w_o.map(|id| binds[id.0]),
                ffn: ids.ffn.map(|(a, b)| (binds[a.0], binds[b.0])),
            });
        }
        let weights = TapeWeights { layers: weight_layers };

        // Prefix nodes.
        let prefix_ids: Option<Vec<(VarId, VarId)>> = match &self.adapter {
            AdapterIds::Prefix { kv, .. } => {
                Some(kv.iter().map(|(pk, pv)| (binds[pk.0], binds[pv.0])).collect())
            }
            AdapterIds::PrefixReparam { mlp, m } => {
                let z = binds[mlp.z.0];
                let zw = tape.matmul(z, binds[mlp.w1.0])?;
                let zb = tape.add(zw, binds[mlp.b1.0])?;
                let h = tape.tanh(zb);
                let hw = tape.matmul(h, binds[mlp.w2.0])?;
                let out = tape.add(hw, binds[mlp.b2.0])?;
                let d = cfg.d;
                let stacked = tape.reshape(out, 2 * cfg.layers * m, d)?;
                let mut kv = Vec::with_capacity(cfg.layers);
                for l in 0..cfg.layers {
                    let base = l * 2 * m;
                    let pk_rows: Vec<usize> = (base..base + m).collect();
                    let pv_rows: Vec<usize> = (base + m..base + 2 * m).collect();
                    kv.push((tape.select_rows(stacked, &pk_rows)?, tape.select_rows(stacked, &pv_rows)?));
                }
                Some(kv)
            }
            _ => None,
        };

        let opts = TapeForwardOpts { mask, detach_kv_inputs };
        let hidden = tape_attention_stack(tape, cfg, &weights, h0, prefix_ids.as_deref(), &opts)?;
        let logits = match self.unembed {
            Some(u) => Some(tape.matmul(hidden, binds[u.0])?),
            None => None,
        };
        Ok(BuiltForward { binds, hidden, logits, input_row_offset })
    }
}

/// Build an initial prefix block per the chosen mode.
///
/// Cache and text modes run the demo rows through the frozen model and keep
/// each layer's keys/values, truncating from the tail to `m` rows or
/// zero-padding up to `m`.
pub fn init_prefix_block<R: Rng + ?Sized>(
    model: &Model,
    mode: PrefixInitMode,
    demos: Option<&Matrix>,
    m: usize,
    rng: &mut R,
) -> Result<PrefixBlock, AdapterError> {
    if m == 0 {
        return Err(AdapterError::EmptyPrefix);
    }
    let d = model.config.d;
    match mode {
        PrefixInitMode::Random => Ok(PrefixBlock {
            layers: (0..model.config.layers)
                .map(|_| (Matrix::gaussian(m, d, 0.02, rng), Matrix::gaussian(m, d, 0.02, rng)))
                .collect(),
        }),
        PrefixInitMode::FromDemoCache | PrefixInitMode::FromTextDemos => {
            let demo = demos.ok_or(AdapterError::MissingDemos)?;
            let cache = model.build_demo_cache(demo)?;
            let layers = cache
                .layers
                .into_iter()
                .map(|(k, v)| (fit_rows(&k, m), fit_rows(&v, m)))
                .collect();
            Ok(PrefixBlock { layers })
        }
    }
}

/// Truncate to the first `m` rows or zero-pad at the end up to `m`.
fn fit_rows(x: &Matrix, m: usize) -> Matrix {
    if x.rows() >= m {
        let idx: Vec<usize> = (0..m).collect();
        x.select_rows(&idx)
    } else {
        x.concat_rows(&Matrix::zeros(m - x.rows(), x.cols()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{icl_equivalence_check, StackConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_model(seed: u64, d: usize, layers: usize) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Model::random(StackConfig::attention_only(d, layers), 1.0 / (d as f64).sqrt(), &mut rng)
    }

    #[test]
    fn deployed_param_counts_match_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = toy_model(1, 8, 2);

        let prefix = AdaptedModel::apply(
            model.clone(),
            &AdapterSpec::Prefix { m: 4, init: PrefixInitMode::Random, reparam: false },
            None,
            &mut rng,
        )
        .unwrap();
        assert_eq!(prefix.deployed_param_count(), 128); // 2 * 2 * 4 * 8

        let lora = AdaptedModel::apply(
            model.clone(),
            &AdapterSpec::Lora { rank: 2, targets: LoraTargets::QKV },
            None,
            &mut rng,
        )
        .unwrap();
        assert_eq!(lora.deployed_param_count(), 192); // 2 layers * 3 targets * 2*(8+8)

        let prompt =
            AdaptedModel::apply(model.clone(), &AdapterSpec::Prompt { m: 4 }, None, &mut rng).unwrap();
        assert_eq!(prompt.deployed_param_count(), 32); // 4 * 8

        let full = AdaptedModel::apply(model, &AdapterSpec::FullFt, None, &mut rng).unwrap();
        assert_eq!(full.deployed_param_count(), 2 * 3 * 64); // three d x d mats per layer
    }

    #[test]
    fn demo_cache_init_with_exact_length_matches_icl() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = toy_model(3, 8, 3);
        let demo = Matrix::gaussian(4, 8, 1.0, &mut rng);
        let query = Matrix::gaussian(3, 8, 1.0, &mut rng);

        let block =
            init_prefix_block(&model, PrefixInitMode::FromDemoCache, Some(&demo), 4, &mut rng).unwrap();
        // Prefix equals the cache exactly.
        let cache = model.build_demo_cache(&demo).unwrap();
        for ((pk, pv), (k, v)) in block.layers.iter().zip(&cache.layers) {
            assert_eq!(pk, k);
            assert_eq!(pv, v);
        }
        // And the prefixed forward reproduces the in-context forward.
        let diff = icl_equivalence_check(&model, &demo, &query).unwrap();
        assert!(diff <= 1e-10);
    }

    #[test]
    fn demo_cache_init_pads_tail_with_zeros() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = toy_model(5, 8, 2);
        let demo = Matrix::gaussian(3, 8, 1.0, &mut rng);
        let block =
            init_prefix_block(&model, PrefixInitMode::FromDemoCache, Some(&demo), 5, &mut rng).unwrap();
        for (pk, pv) in &block.layers {
            assert_eq!(pk.rows(), 5);
            for r in 3..5 {
                assert!(pk.row(r).iter().all(|&x| x == 0.0));
                assert!(pv.row(r).iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn random_init_is_seed_reproducible() {
        let model = toy_model(6, 8, 2);
        let mut rng1 = ChaCha8Rng::seed_from_u64(77);
        let mut rng2 = ChaCha8Rng::seed_from_u64(77);
        let b1 = init_prefix_block(&model, PrefixInitMode::Random, None, 3, &mut rng1).unwrap();
        let b2 = init_prefix_block(&model, PrefixInitMode::Random, None, 3, &mut rng2).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn zero_m_is_rejected() {
        let model = toy_model(7, 8, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        assert!(matches!(
            init_prefix_block(&model, PrefixInitMode::Random, None, 0, &mut rng),
            Err(AdapterError::EmptyPrefix)
        ));
    }

    #[test]
    fn removing_prefix_restores_base_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = toy_model(10, 8, 2);
        let fingerprint = model.weights_fingerprint();
        let h0 = Matrix::gaussian(4, 8, 1.0, &mut rng);
        let base_out = model.forward(&h0, None, MaskKind::None).unwrap().final_hidden;

        let adapted = AdaptedModel::apply(
            model,
            &AdapterSpec::Prefix { m: 3, init: PrefixInitMode::Random, reparam: false },
            None,
            &mut rng,
        )
        .unwrap();
        let restored = adapted.remove();
        assert_eq!(restored.weights_fingerprint(), fingerprint);
        let out = restored.forward(&h0, None, MaskKind::None).unwrap().final_hidden;
        assert_eq!(out, base_out);
    }

    #[test]
    fn lora_with_zero_factors_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = toy_model(12, 8, 2);
        let h0 = Matrix::gaussian(4, 8, 1.0, &mut rng);
        let base_out = model.forward(&h0, None, MaskKind::None).unwrap().final_hidden;

        // B starts at zero, so a freshly applied adapter is a no-op.
        let adapted = AdaptedModel::apply(
            model,
            &AdapterSpec::Lora { rank: 2, targets: LoraTargets::QKV },
            None,
            &mut rng,
        )
        .unwrap();
        let (eff, prefix) = adapted.effective().unwrap();
        assert!(prefix.is_none());
        let out = eff.forward(&h0, None, MaskKind::None).unwrap().final_hidden;
        assert_eq!(out, base_out);
    }

    #[test]
    fn qk_lora_changes_attention_but_not_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let model = toy_model(14, 8, 2);
        let h0 = Matrix::gaussian(4, 8, 1.0, &mut rng);
        let base = model.forward(&h0, None, MaskKind::None).unwrap();

        let mut adapted = AdaptedModel::apply(
            model,
            &AdapterSpec::Lora { rank: 2, targets: LoraTargets::QK },
            None,
            &mut rng,
        )
        .unwrap();
        // Push the B factors away from zero to make the update visible.
        for p in adapted.params_mut().iter_mut() {
            if p.name.contains(".b") && p.trainable {
                p.value = Matrix::gaussian(p.value.rows(), p.value.cols(), 0.5, &mut rng);
            }
        }
        let (eff, _) = adapted.effective().unwrap();
        let out = eff.forward(&h0, None, MaskKind::None).unwrap();
        // First-layer value matrices are bit-identical; attention weights moved.
        assert_eq!(out.layers[0].v, base.layers[0].v);
        assert!(out.layers[0].attn[0].max_abs_diff(&base.layers[0].attn[0]) > 1e-6);
    }

    #[test]
    fn reparam_materialization_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let model = toy_model(16, 8, 2);
        let h0 = Matrix::gaussian(4, 8, 1.0, &mut rng);

        let adapted = AdaptedModel::apply(
            model,
            &AdapterSpec::Prefix { m: 3, init: PrefixInitMode::Random, reparam: true },
            None,
            &mut rng,
        )
        .unwrap();
        let (eff, prefix) = adapted.effective().unwrap();
        let out_reparam =
            eff.forward(&h0, prefix.as_ref(), MaskKind::None).unwrap().final_hidden;

        let materialized = adapted.materialize();
        let (eff2, prefix2) = materialized.effective().unwrap();
        let out_direct =
            eff2.forward(&h0, prefix2.as_ref(), MaskKind::None).unwrap().final_hidden;
        assert_eq!(out_reparam, out_direct);
    }

    #[test]
    fn reparam_zero_head_gives_zero_prefix() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let model = toy_model(18, 8, 2);
        let mut adapted = AdaptedModel::apply(
            model,
            &AdapterSpec::Prefix { m: 2, init: PrefixInitMode::Random, reparam: true },
            None,
            &mut rng,
        )
        .unwrap();
        for p in adapted.params_mut().iter_mut() {
            if p.name == "reparam.w2" || p.name == "reparam.b2" {
                p.value = Matrix::zeros(p.value.rows(), p.value.cols());
            }
        }
        let prefix = adapted.current_prefix().unwrap();
        for (pk, pv) in &prefix.layers {
            assert!(pk.max_abs() == 0.0 && pv.max_abs() == 0.0);
        }
    }

    #[test]
    fn prompt_adapter_prepends_rows_on_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let model = toy_model(20, 8, 2);
        let adapted =
            AdaptedModel::apply(model, &AdapterSpec::Prompt { m: 3 }, None, &mut rng).unwrap();
        let x = Matrix::gaussian(4, 8, 1.0, &mut rng);
        let mut tape = Tape::new();
        let built = adapted
            .build_tape(&mut tape, &TapeInput::Rows(&x), MaskKind::Causal, false)
            .unwrap();
        assert_eq!(built.input_row_offset, 3);
        assert_eq!(tape.value(built.hidden).rows(), 7);
    }
}
