//! End-to-end network assembly: decorated pillars through the attention
//! stack, scatter to the pseudo-image, the fused backbone, and the detection
//! head, plus timed inference with score filtering and rotated NMS.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::eval::{rotated_nms, Detection};
use crate::geom::Box3D;
use crate::head::{
    assign_targets, decode_detections, total_loss, AnchorGrid, DetectionHead, HeadConfig,
    LossBreakdown,
};
use crate::paa::{PaaConfig, PaaStack};
use crate::pillar::{crop_to_range, pillarize, PillarConfig, PillarTensor, PointCloud, DECORATION_CHANNELS};
use crate::tensor::{NodeId, ParamStore, Scalar, Tape, TapeBinding};

/// Complete architecture + post-processing configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub pillars: PillarConfig,
    pub paa: PaaConfig,
    pub paa_depth: usize,
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub score_floor: f64,
    pub nms_iou: f64,
    pub nms_top_k: usize,
    /// Seed for parameter initialization.
    pub init_seed: u64,
}

impl NetworkConfig {
    /// Small grid, narrow backbone: trains on a CPU in minutes.
    pub fn toy() -> Self {
        NetworkConfig {
            pillars: PillarConfig::toy(),
            paa: PaaConfig::default(),
            paa_depth: 2,
            backbone: BackboneConfig {
                width: 32,
                block_depths: [2, 2, 2],
                ..Default::default()
            },
            head: HeadConfig {
                anchor_z: -0.75,
                ..Default::default()
            },
            score_floor: 0.1,
            nms_iou: 0.5,
            nms_top_k: 300,
            init_seed: 0,
        }
    }

    /// Full-scale preset over the pedestrian detection range.
    pub fn kitti_ped() -> Self {
        NetworkConfig {
            pillars: PillarConfig::kitti_ped(),
            paa: PaaConfig::default(),
            paa_depth: 2,
            backbone: BackboneConfig::default(),
            head: HeadConfig::default(),
            score_floor: 0.1,
            nms_iou: 0.5,
            nms_top_k: 300,
            init_seed: 0,
        }
    }

    /// The four module-ablation topologies: attention stack and gated fusion
    /// independently enabled.
    pub fn with_ablation(mut self, paa_on: bool, bifpn_on: bool) -> Self {
        if !paa_on {
            self.paa.point_attention = false;
            self.paa.channel_attention = false;
            self.paa.task_aware = false;
        }
        self.backbone.bifpn = bifpn_on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (nx, ny) = self.pillars.grid_dims()?;
        if nx % 4 != 0 || ny % 4 != 0 {
            return Err(Error::Config(format!(
                "grid {nx}x{ny} must be divisible by 4 for the three-level backbone"
            )));
        }
        if self.paa_depth == 0 {
            return Err(Error::Config("paa_depth must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.score_floor) && self.score_floor <= 1.5 {
            return Err(Error::Config("score_floor must be sane".into()));
        }
        if self.head.neg_iou > self.head.pos_iou {
            return Err(Error::Config("neg_iou must not exceed pos_iou".into()));
        }
        Ok(())
    }
}

/// Wall-clock stage breakdown of one inference pass, in milliseconds.
#[derive(Debug, Clone, Copy, Default)]
pub struct StageTimes {
    pub preprocessing: f64,
    pub paa: f64,
    pub scatter: f64,
    pub mini_bifpn: f64,
    pub postprocessing: f64,
}

impl StageTimes {
    pub fn sum(&self) -> f64 {
        self.preprocessing + self.paa + self.scatter + self.mini_bifpn + self.postprocessing
    }
}

/// One fully assembled network with its parameter store.
pub struct Network<S> {
    pub cfg: NetworkConfig,
    pub store: ParamStore<S>,
    pub paa: PaaStack,
    pub backbone: Backbone,
    pub head: DetectionHead,
    pub grid: AnchorGrid,
}

/// A live forward pass: the tape plus the head output nodes.
pub struct ForwardPass<S> {
    pub tape: Tape<S>,
    pub bind: TapeBinding,
    pub cls: NodeId,
    pub reg: NodeId,
}

impl<S: Scalar> Network<S> {
    pub fn new(cfg: NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let paa = PaaStack::init(
            &mut store,
            &mut rng,
            cfg.pillars.max_points_per_pillar,
            DECORATION_CHANNELS,
            cfg.paa_depth,
            cfg.paa,
        );
        let backbone = Backbone::init(&mut store, &mut rng, PaaStack::OUT_CHANNELS, cfg.backbone.clone());
        let head = DetectionHead::init(&mut store, &mut rng, backbone.out_channels(), cfg.head.clone());
        let grid = AnchorGrid::new(&cfg.pillars, &cfg.head)?;
        Ok(Network { cfg, store, paa, backbone, head, grid })
    }

    /// Pillarize a raw cloud under this network's grid.
    pub fn prepare(&self, cloud: &PointCloud, seed: u64) -> Result<PillarTensor<S>> {
        let cropped = crop_to_range(cloud, &self.cfg.pillars);
        pillarize(&cropped, &self.cfg.pillars, seed)
    }

    /// Forward through attention stack, scatter, backbone and head.
    pub fn forward(&mut self, pillars: &PillarTensor<S>, train: bool) -> Result<ForwardPass<S>> {
        let (pass, _) = self.forward_timed(pillars, train)?;
        Ok(pass)
    }

    /// Forward with per-stage wall times (preprocessing excluded; see
    /// [`Network::infer_timed`] for the full breakdown).
    pub fn forward_timed(
        &mut self,
        pillars: &PillarTensor<S>,
        train: bool,
    ) -> Result<(ForwardPass<S>, StageTimes)> {
        let mut times = StageTimes::default();
        let mut tape = Tape::new();
        let mut bind = TapeBinding::new(&self.store, train);

        let t0 = Instant::now();
        let g = tape.constant(pillars.features.clone());
        let feats = self
            .paa
            .forward(&mut tape, &mut bind, &self.store, g, &pillars.counts)?;
        times.paa = ms_since(t0);

        let t0 = Instant::now();
        let img = tape.scatter2d(feats, &pillars.coords, pillars.grid_ny, pillars.grid_nx)?;
        times.scatter = ms_since(t0);

        let t0 = Instant::now();
        let fused = self
            .backbone
            .forward(&mut tape, &mut bind, &mut self.store, img, train)?;
        let (cls, reg) = self.head.forward(&mut tape, &mut bind, &self.store, fused)?;
        times.mini_bifpn = ms_since(t0);

        Ok((ForwardPass { tape, bind, cls, reg }, times))
    }

    /// Forward + loss against a scene's ground truth.
    pub fn loss_forward(
        &mut self,
        pillars: &PillarTensor<S>,
        gts: &[Box3D],
        train: bool,
    ) -> Result<(ForwardPass<S>, NodeId, LossBreakdown)> {
        let assignment = assign_targets(&self.grid, gts, &self.cfg.head)?;
        let classes = vec![0u32; gts.len()];
        let mut pass = self.forward(pillars, train)?;
        let (loss, breakdown) = total_loss(
            &mut pass.tape,
            pass.cls,
            pass.reg,
            &assignment,
            &classes,
            &self.cfg.head,
        )?;
        Ok((pass, loss, breakdown))
    }

    /// Full inference: forward, sigmoid + score floor, rotated NMS, top-k.
    pub fn infer(&mut self, cloud: &PointCloud, seed: u64) -> Result<Vec<Detection>> {
        Ok(self.infer_timed(cloud, seed)?.0)
    }

    pub fn infer_timed(&mut self, cloud: &PointCloud, seed: u64) -> Result<(Vec<Detection>, StageTimes)> {
        let t0 = Instant::now();
        let pillars = self.prepare(cloud, seed)?;
        let pre = ms_since(t0);
        if pillars.counts.iter().all(|&c| c == 0) {
            let mut times = StageTimes::default();
            times.preprocessing = pre;
            return Ok((Vec::new(), times));
        }
        let (pass, mut times) = self.forward_timed(&pillars, false)?;
        times.preprocessing = pre;

        let t0 = Instant::now();
        let dets = decode_detections(
            pass.tape.value(pass.cls),
            pass.tape.value(pass.reg),
            &self.grid,
            self.cfg.head.num_classes,
            self.cfg.score_floor,
        )?;
        let kept = rotated_nms(&dets, self.cfg.nms_iou, self.cfg.nms_top_k)?;
        times.postprocessing = ms_since(t0);
        Ok((kept, times))
    }
}

fn ms_since(t0: Instant) -> f64 {
    t0.elapsed().as_secs_f64() * 1e3
}
