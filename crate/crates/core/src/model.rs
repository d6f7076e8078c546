//! The complete learnable model: both encoders, the update operator and the
//! decoder sharing one parameter store.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, DecoderNet};
use crate::encoding::{ConvEncoder, CorrelationPlan, EncoderHandle, HypothesisSet};
use crate::geometry::{CameraIntrinsics, DepthMap, RigidPose};
use crate::integrator::{init_depth, LearnedOperator, OperatorConfig, UpdateOperator};
use crate::nn::{Graph, Initializer, NodeId, ParamStore, Tensor};
use crate::raster::ColorImage;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub geometry: [usize; 3],
    pub mono: [usize; 3],
    pub operator: OperatorConfig,
    /// Feature channels emitted by the 1/8 and 1/4 decoder stages.
    pub decoder_feats: [usize; 2],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { geometry: [32, 48, 64], mono: [64, 64, 128], operator: OperatorConfig::default(), decoder_feats: [64, 32] }
    }
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self { geometry: [8, 12, 16], mono: [6, 8, 8], operator: OperatorConfig::toy(), decoder_feats: [8, 4] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DodModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub geometry: ConvEncoder,
    pub mono: ConvEncoder,
    pub operator: LearnedOperator,
    pub decoder: DecoderNet,
}

/// Inference handles sharing one frozen copy of the parameters.
#[derive(Debug, Clone)]
pub struct ModelHandles {
    pub geometry: EncoderHandle,
    pub mono: EncoderHandle,
    pub operator: UpdateOperator,
    pub decoder: Decoder,
}

/// Inputs of one training forward pass.
#[derive(Debug, Clone)]
pub struct TrainInput {
    pub target: ColorImage,
    pub source: ColorImage,
    /// Reprojected sparse depth rasterised at 1/8.
    pub sparse8: DepthMap,
    pub k8: CameraIntrinsics,
    pub target_to_source: RigidPose,
    pub hypotheses: HypothesisSet,
    pub fallback: f64,
}

/// Nodes of a training forward pass.
#[derive(Debug, Clone)]
pub struct ForwardNodes {
    /// Full-resolution prediction after each iteration.
    pub preds: Vec<NodeId>,
    /// 1/8 depth after each iteration.
    pub depths8: Vec<NodeId>,
}

impl DodModel {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut params = ParamStore::new();
        let mut init = Initializer::new(seed);
        let geometry = ConvEncoder::new(&mut params, "geometry", config.geometry, true, &mut init);
        let mono = ConvEncoder::new(&mut params, "mono", config.mono, false, &mut init);
        let hyp = HypothesisSet::default();
        let operator = LearnedOperator::new(&mut params, "operator", config.operator, hyp.channels(), config.mono[2], &mut init);
        let decoder = DecoderNet::new(&mut params, "decoder", config.operator.hidden, config.mono, config.decoder_feats, &mut init.with_gain(0.1));
        Self { config, params, geometry, mono, operator, decoder }
    }

    pub fn handles(&self) -> ModelHandles {
        let params = Arc::new(self.params.clone());
        ModelHandles {
            geometry: EncoderHandle::Learned { params: params.clone(), net: self.geometry.clone() },
            mono: EncoderHandle::Learned { params: params.clone(), net: self.mono.clone() },
            operator: UpdateOperator::Learned { params: params.clone(), net: self.operator.clone() },
            decoder: Decoder::Learned { params, net: self.decoder.clone() },
        }
    }

    /// Runs `iterations` refinement steps and decodes every iterate. The
    /// correlation sample locations follow the current depth value but are
    /// not differentiated.
    pub fn forward(&self, g: &mut Graph, input: &TrainInput, iterations: usize) -> ForwardNodes {
        let t_img = g.input(input.target.to_tensor());
        let s_img = g.input(input.source.to_tensor());
        let ft = self.geometry.forward(g, t_img)[2];
        let fs = self.geometry.forward(g, s_img)[2];
        let mono = self.mono.forward(g, t_img);
        let mut hidden = self.operator.init_hidden_graph(g, mono[2]);
        let (w, h) = (input.sparse8.width(), input.sparse8.height());
        let init = init_depth(&input.sparse8, input.fallback);
        let mut depth = g.input(Tensor::new(vec![1, h, w], init.into_values()));
        let sparse = Arc::new(input.sparse8.values().to_vec());
        let mut out = ForwardNodes { preds: Vec::new(), depths8: Vec::new() };
        for _ in 0..iterations {
            let current = DepthMap::from_values(w, h, g.value(depth).data().to_vec()).expect("1/8 shape");
            let plan = CorrelationPlan::new(&current, &input.k8, &input.target_to_source, &input.hypotheses);
            let corr = g.correlation(ft, fs, Arc::new(plan));
            let step = self.operator.step_graph(g, hidden, corr, depth, mono[2], sparse.clone());
            hidden = step.hidden;
            depth = step.depth;
            out.depths8.push(depth);
            out.preds.push(self.decoder.forward(g, depth, hidden, mono));
        }
        out
    }
}
