//! Factorized baseline: three independent 1D flows over the reduced
//! association deltas `[|Δp|, |Δwh|, Δd]`, the cost being the sum of the
//! marginal negative log-likelihoods. This is the independence assumption
//! the joint flow is measured against.

use super::{train, EpochStats, FlowConfig, FlowModel, TrainSample, CHECKPOINT_VERSION};
use crate::context::{encode_context, TrackWindow};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Three marginal 1D flows, trained without any conditioning.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactorizedBaseline {
    pub version: u32,
    pub flows: Vec<FlowModel>,
}

impl FactorizedBaseline {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)
            .map_err(|e| Error::CheckpointFormat(format!("serialize: {e}")))?;
        crate::sim::write_atomic(path, json.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        let model: FactorizedBaseline = serde_json::from_str(&raw)
            .map_err(|e| Error::CheckpointFormat(format!("{}: {e}", path.display())))?;
        if model.version != CHECKPOINT_VERSION || model.flows.len() != 3 {
            return Err(Error::CheckpointFormat(
                "unsupported factorized checkpoint".into(),
            ));
        }
        Ok(model)
    }
}

fn marginal_config(base: &FlowConfig, seed_offset: u64) -> FlowConfig {
    FlowConfig {
        input_dim: 1,
        scene_conditioning: false,
        seed: base.seed.wrapping_add(seed_offset),
        ..base.clone()
    }
}

/// Trains the three marginals on the reduced delta columns. Returns the
/// baseline plus one per-epoch NLL trace per marginal.
pub fn factorized_train(
    reduced: &[[f64; 3]],
    config: &FlowConfig,
) -> Result<(FactorizedBaseline, Vec<Vec<EpochStats>>)> {
    let mut flows = Vec::with_capacity(3);
    let mut traces = Vec::with_capacity(3);
    for dim in 0..3 {
        let samples: Vec<TrainSample> = reduced
            .iter()
            .map(|v| TrainSample {
                x: vec![v[dim]],
                window: TrackWindow::empty(),
                scene: None,
            })
            .collect();
        let cfg = marginal_config(config, dim as u64 + 1);
        let result = train(&samples, &cfg)?;
        flows.push(result.model);
        traces.push(result.trace);
    }
    Ok((
        FactorizedBaseline {
            version: CHECKPOINT_VERSION,
            flows,
        },
        traces,
    ))
}

/// Joint log-probability under the independence assumption: the sum of the
/// three marginal log-densities.
pub fn factorized_log_prob(model: &FactorizedBaseline, reduced: &[f64; 3]) -> Result<f64> {
    let mut total = 0.0;
    for (dim, flow) in model.flows.iter().enumerate() {
        let ctx = encode_context(&TrackWindow::empty(), None, &flow.context);
        total += super::log_prob(&[reduced[dim]], ctx.as_slice().unwrap(), flow)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::LN_2PI;
    use approx::assert_relative_eq;

    #[test]
    fn identity_marginals_at_origin_give_three_standard_normals() {
        let config = FlowConfig {
            input_dim: 1,
            blocks: 2,
            hidden: 4,
            ctx_dim: 3,
            encoder_hidden: 4,
            emb_dim: 2,
            clusters: 2,
            ..FlowConfig::default()
        };
        let model = FactorizedBaseline {
            version: CHECKPOINT_VERSION,
            flows: (0..3).map(|_| FlowModel::identity(&config)).collect(),
        };
        let lp = factorized_log_prob(&model, &[0.0, 0.0, 0.0]).unwrap();
        assert_relative_eq!(lp, 3.0 * (-0.5 * LN_2PI), epsilon = 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let config = FlowConfig {
            input_dim: 1,
            blocks: 2,
            hidden: 4,
            ctx_dim: 3,
            encoder_hidden: 4,
            emb_dim: 2,
            clusters: 2,
            ..FlowConfig::default()
        };
        let model = FactorizedBaseline {
            version: CHECKPOINT_VERSION,
            flows: (0..3).map(|i| FlowModel::init(&config, i)).collect(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("factorized.json");
        model.save(&path).unwrap();
        let loaded = FactorizedBaseline::load(&path).unwrap();
        let a = factorized_log_prob(&model, &[0.4, 0.2, -0.7]).unwrap();
        let b = factorized_log_prob(&loaded, &[0.4, 0.2, -0.7]).unwrap();
        assert_eq!(a, b);
    }
}
