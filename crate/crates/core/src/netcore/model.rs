use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::blocks::{Stage, Unit};
use super::{
    check_patch_dims, softmax, softmax_backward, ArchConfig, EncoderFeatures, ModelSpec, ProbabilityMap, Role,
    SkipConfig, NUM_LEVELS,
};
use crate::error::{Error, Result};
use crate::nn::{join, Conv3d, Module, Param};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::volume::Volume;

/// Convolutions per encoder level (the decoder mirrors levels 4..1).
const STAGE_DEPTH: [usize; NUM_LEVELS] = [1, 2, 3, 3, 3];

fn init_rng(seed: u64, role_slot: usize, part: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * role_slot as u64 + part);
    rng
}

#[derive(Clone, Debug)]
pub struct Encoder<F> {
    stages: Vec<Stage<F>>,
    downs: Vec<Unit<F>>,
    channels: Vec<usize>,
}

impl<F: Real> Encoder<F> {
    fn new(spec: &ModelSpec, seed: u64, role_slot: usize) -> Self {
        let mut rng = init_rng(seed, role_slot, 0);
        let mut stages = Vec::with_capacity(NUM_LEVELS);
        let mut downs = Vec::with_capacity(NUM_LEVELS - 1);
        let channels: Vec<usize> = (1..=NUM_LEVELS).map(|l| spec.channels(l)).collect();
        for level in 1..=NUM_LEVELS {
            let cin = if level == 1 { 1 } else { channels[level - 1] };
            let c = channels[level - 1];
            stages.push(Stage::new(cin, c, STAGE_DEPTH[level - 1], spec.norm, &mut rng));
            if level < NUM_LEVELS {
                downs.push(Unit::conv(c, channels[level], 2, 2, spec.norm, &mut rng));
            }
        }
        Self { stages, downs, channels }
    }

    fn check_input(&self, x: &Tensor<F>) -> Result<()> {
        if x.channels() != 1 {
            return Err(Error::Shape(format!(
                "encoder expects 1 input channel, got {}",
                x.channels()
            )));
        }
        check_patch_dims(x.dims())
    }

    pub fn encode(&self, x: &Tensor<F>) -> Result<EncoderFeatures<F>> {
        self.check_input(x)?;
        let mut levels = Vec::with_capacity(NUM_LEVELS);
        let mut h = self.stages[0].forward(x)?;
        for l in 1..NUM_LEVELS {
            let down = self.downs[l - 1].forward(&h)?;
            levels.push(h);
            h = self.stages[l].forward(&down)?;
        }
        levels.push(h);
        EncoderFeatures::new(levels)
    }

    pub(crate) fn encode_train(&mut self, x: &Tensor<F>) -> Result<EncoderFeatures<F>> {
        self.check_input(x)?;
        let mut levels = Vec::with_capacity(NUM_LEVELS);
        let mut h = self.stages[0].forward_train(x)?;
        for l in 1..NUM_LEVELS {
            let down = self.downs[l - 1].forward_train(&h)?;
            levels.push(h);
            h = self.stages[l].forward_train(&down)?;
        }
        levels.push(h);
        EncoderFeatures::new(levels)
    }

    /// Backpropagates feature gradients (indexed by level − 1).
    pub(crate) fn backward(&mut self, mut grads: Vec<Option<Tensor<F>>>) {
        let mut g = grads[NUM_LEVELS - 1].take().expect("bottleneck gradient");
        for l in (1..NUM_LEVELS).rev() {
            let d_down = self.stages[l].backward(&g);
            let mut d_prev = self.downs[l - 1].backward(&d_down);
            if let Some(extra) = &grads[l - 1] {
                d_prev.add_assign(extra);
            }
            g = d_prev;
        }
        let _ = self.stages[0].backward(&g);
    }

    pub fn level_channels(&self) -> &[usize] {
        &self.channels
    }
}

impl<F: Real> Module<F> for Encoder<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&join(prefix, &format!("stage{}", i + 1)), f);
        }
        for (i, d) in self.downs.iter().enumerate() {
            d.visit(&join(prefix, &format!("down{}", i + 1)), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("stage{}", i + 1)), f);
        }
        for (i, d) in self.downs.iter_mut().enumerate() {
            d.visit_mut(&join(prefix, &format!("down{}", i + 1)), f);
        }
    }
}

/// Decoder whose layer `j` optionally concatenates `a_{5-j}`.
#[derive(Clone, Debug)]
pub struct Decoder<F> {
    skip: SkipConfig,
    ups: Vec<Unit<F>>,
    stages: Vec<Stage<F>>,
    head: Conv3d<F>,
    channels: Vec<usize>,
    cached_probs: Option<Tensor<F>>,
}

impl<F: Real> Decoder<F> {
    fn new(spec: &ModelSpec, seed: u64, role_slot: usize) -> Self {
        let mut rng = init_rng(seed, role_slot, 1);
        let channels: Vec<usize> = (1..=NUM_LEVELS).map(|l| spec.channels(l)).collect();
        let mut ups = Vec::with_capacity(4);
        let mut stages = Vec::with_capacity(4);
        for layer in 1..=4 {
            let level = SkipConfig::source_level(layer);
            let c = channels[level - 1];
            ups.push(Unit::up(channels[level], c, spec.norm, &mut rng));
            let cin = if spec.skip_config.uses(layer) { 2 * c } else { c };
            stages.push(Stage::new(cin, c, STAGE_DEPTH[level - 1], spec.norm, &mut rng));
        }
        let head = Conv3d::new(channels[0], spec.out_classes, 1, 1, 0, true, &mut rng);
        Self {
            skip: spec.skip_config,
            ups,
            stages,
            head,
            channels,
            cached_probs: None,
        }
    }

    pub fn skip_config(&self) -> SkipConfig {
        self.skip
    }

    /// Input channels of decoder layer `layer`'s first convolution.
    pub fn layer_input_channels(&self, layer: usize) -> usize {
        let c = self.channels[SkipConfig::source_level(layer) - 1];
        if self.skip.uses(layer) {
            2 * c
        } else {
            c
        }
    }

    fn check_features(&self, feats: &EncoderFeatures<F>) -> Result<()> {
        let base = feats.level(1).dims();
        for level in 1..=NUM_LEVELS {
            let t = feats.level(level);
            let expect_dims = base.map(|d| d >> (level - 1));
            if t.channels() != self.channels[level - 1] || t.dims() != expect_dims {
                return Err(Error::Shape(format!(
                    "feature a_{level} is [{}, {:?}], decoder expects [{}, {:?}]",
                    t.channels(),
                    t.dims(),
                    self.channels[level - 1],
                    expect_dims
                )));
            }
        }
        Ok(())
    }

    fn layer_input(&self, layer: usize, up: Tensor<F>, feats: &EncoderFeatures<F>) -> Result<Tensor<F>> {
        if self.skip.uses(layer) {
            Tensor::cat_channels(&up, feats.level(SkipConfig::source_level(layer)))
        } else {
            Ok(up)
        }
    }

    pub fn decode(&self, feats: &EncoderFeatures<F>) -> Result<ProbabilityMap<F>> {
        self.check_features(feats)?;
        let mut h = feats.level(NUM_LEVELS).clone();
        for layer in 1..=4 {
            let up = self.ups[layer - 1].forward(&h)?;
            let z = self.layer_input(layer, up, feats)?;
            h = self.stages[layer - 1].forward(&z)?;
        }
        let logits = self.head.forward(&h)?;
        ProbabilityMap::from_tensor(softmax(&logits))
    }

    pub(crate) fn decode_train(&mut self, feats: &EncoderFeatures<F>) -> Result<ProbabilityMap<F>> {
        self.check_features(feats)?;
        let mut h = feats.level(NUM_LEVELS).clone();
        for layer in 1..=4 {
            let up = self.ups[layer - 1].forward_train(&h)?;
            let z = self.layer_input(layer, up, feats)?;
            h = self.stages[layer - 1].forward_train(&z)?;
        }
        let logits = self.head.forward_train(&h)?;
        let probs = softmax(&logits);
        self.cached_probs = Some(probs.clone());
        ProbabilityMap::from_tensor(probs)
    }

    /// Returns gradients w.r.t. the consumed encoder features (indexed by level − 1).
    pub(crate) fn backward(&mut self, dprobs: &Tensor<F>) -> Vec<Option<Tensor<F>>> {
        let probs = self.cached_probs.take().expect("Decoder::backward without decode_train");
        let dlogits = softmax_backward(&probs, dprobs);
        let mut dh = self.head.backward(&dlogits);
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; NUM_LEVELS];
        for layer in (1..=4).rev() {
            let dz = self.stages[layer - 1].backward(&dh);
            let level = SkipConfig::source_level(layer);
            let dup = if self.skip.uses(layer) {
                let (dup, dskip) = dz.split_channels(self.channels[level - 1]);
                grads[level - 1] = Some(dskip);
                dup
            } else {
                dz
            };
            dh = self.ups[layer - 1].backward(&dup);
        }
        grads[NUM_LEVELS - 1] = Some(dh);
        grads
    }
}

impl<F: Real> Module<F> for Decoder<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        for (i, (u, s)) in self.ups.iter().zip(&self.stages).enumerate() {
            u.visit(&join(prefix, &format!("layer{}.up", i + 1)), f);
            s.visit(&join(prefix, &format!("layer{}.stage", i + 1)), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        for (i, (u, s)) in self.ups.iter_mut().zip(&mut self.stages).enumerate() {
            u.visit_mut(&join(prefix, &format!("layer{}.up", i + 1)), f);
            s.visit_mut(&join(prefix, &format!("layer{}.stage", i + 1)), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Borrowed encoder/decoder pair acting as one segmentation network.
#[derive(Clone, Copy, Debug)]
pub struct ModelView<'a, F> {
    pub spec: &'a ModelSpec,
    pub encoder: &'a Encoder<F>,
    pub decoder: &'a Decoder<F>,
}

impl<'a, F: Real> ModelView<'a, F> {
    pub fn role(&self) -> Role {
        self.spec.role
    }

    pub fn encode(&self, x: &Tensor<F>) -> Result<EncoderFeatures<F>> {
        self.encoder.encode(x)
    }

    pub fn decode(&self, feats: &EncoderFeatures<F>) -> Result<ProbabilityMap<F>> {
        self.decoder.decode(feats)
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<ProbabilityMap<F>> {
        self.decode(&self.encode(x)?)
    }

    pub fn forward_volume(&self, volume: &Volume) -> Result<ProbabilityMap<F>> {
        volume.check_network_input()?;
        self.forward(&Tensor::from_grids([volume.grid()])?)
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.decoder.param_count()
    }
}

/// A single standalone network.
#[derive(Clone, Debug)]
pub struct Model<F> {
    pub spec: ModelSpec,
    pub encoder: Encoder<F>,
    pub decoder: Decoder<F>,
}

/// Builds one network with parameters drawn from `seed`.
pub fn build_model<F: Real>(spec: &ModelSpec, seed: u64) -> Result<Model<F>> {
    spec.validate()?;
    let slot = spec.role.index();
    Ok(Model {
        spec: spec.clone(),
        encoder: Encoder::new(spec, seed, slot),
        decoder: Decoder::new(spec, seed, slot),
    })
}

impl<F: Real> Model<F> {
    pub fn view(&self) -> ModelView<'_, F> {
        ModelView {
            spec: &self.spec,
            encoder: &self.encoder,
            decoder: &self.decoder,
        }
    }

    pub fn encode(&self, x: &Tensor<F>) -> Result<EncoderFeatures<F>> {
        self.encoder.encode(x)
    }

    pub fn decode(&self, feats: &EncoderFeatures<F>) -> Result<ProbabilityMap<F>> {
        self.decoder.decode(feats)
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<ProbabilityMap<F>> {
        self.view().forward(x)
    }

    pub fn param_count(&self) -> usize {
        self.view().param_count()
    }
}

impl<F: Real> Module<F> for Model<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
    }
}

/// The main model and two complementary auxiliary models.
#[derive(Clone, Debug)]
pub struct CcNet<F> {
    arch: ArchConfig,
    specs: [ModelSpec; 3],
    /// One entry when the encoder is shared, otherwise one per role.
    encoders: Vec<Encoder<F>>,
    decoders: Vec<Decoder<F>>,
}

impl<F: Real> CcNet<F> {
    pub fn new(arch: &ArchConfig, seed: u64) -> Result<Self> {
        let specs = Role::ALL.map(|r| ModelSpec::new(r, arch));
        for s in &specs {
            s.validate()?;
        }
        debug_assert!(specs[1].skip_config.is_complementary(&specs[2].skip_config));
        let slot = |r: Role| if arch.identical_init { 0 } else { r.index() };
        let encoders = if arch.shared_encoder {
            vec![Encoder::new(&specs[0], seed, 0)]
        } else {
            specs.iter().map(|s| Encoder::new(s, seed, slot(s.role))).collect()
        };
        let decoders = specs.iter().map(|s| Decoder::new(s, seed, slot(s.role))).collect();
        Ok(Self {
            arch: arch.clone(),
            specs,
            encoders,
            decoders,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn spec(&self, role: Role) -> &ModelSpec {
        &self.specs[role.index()]
    }

    pub fn shared_encoder(&self) -> bool {
        self.encoders.len() == 1
    }

    fn encoder_index(&self, role: Role) -> usize {
        if self.shared_encoder() {
            0
        } else {
            role.index()
        }
    }

    pub fn model(&self, role: Role) -> ModelView<'_, F> {
        ModelView {
            spec: &self.specs[role.index()],
            encoder: &self.encoders[self.encoder_index(role)],
            decoder: &self.decoders[role.index()],
        }
    }

    pub fn main(&self) -> ModelView<'_, F> {
        self.model(Role::Main)
    }

    /// Trainable scalars in one encoder.
    pub fn encoder_param_count(&self) -> usize {
        self.encoders[0].param_count()
    }

    /// Trainable scalars across all distinct encoders.
    pub fn distinct_encoder_param_count(&self) -> usize {
        self.encoders.iter().map(|e| e.param_count()).sum()
    }

    /// Runs the listed models in training mode on `x`.
    pub fn forward_train(&mut self, x: &Tensor<F>, roles: &[Role]) -> Result<Vec<ProbabilityMap<F>>> {
        let mut out = Vec::with_capacity(roles.len());
        if self.shared_encoder() {
            let feats = self.encoders[0].encode_train(x)?;
            for &r in roles {
                out.push(self.decoders[r.index()].decode_train(&feats)?);
            }
        } else {
            for &r in roles {
                let feats = self.encoders[r.index()].encode_train(x)?;
                out.push(self.decoders[r.index()].decode_train(&feats)?);
            }
        }
        Ok(out)
    }

    /// Backpropagates probability-map gradients for the roles of the
    /// preceding [`CcNet::forward_train`] call, accumulating into `grad`.
    pub fn backward(&mut self, grads: &[(Role, Tensor<F>)]) {
        if self.shared_encoder() {
            let mut total: Vec<Option<Tensor<F>>> = vec![None; NUM_LEVELS];
            for (r, g) in grads {
                let fg = self.decoders[r.index()].backward(g);
                for (acc, part) in total.iter_mut().zip(fg) {
                    match (acc.as_mut(), part) {
                        (Some(a), Some(p)) => a.add_assign(&p),
                        (None, Some(p)) => *acc = Some(p),
                        _ => {}
                    }
                }
            }
            if !grads.is_empty() {
                self.encoders[0].backward(total);
            }
        } else {
            for (r, g) in grads {
                let fg = self.decoders[r.index()].backward(g);
                self.encoders[r.index()].backward(fg);
            }
        }
    }

    /// Parameter prefix for a role's encoder in checkpoints.
    pub fn encoder_prefix(&self, role: Role) -> String {
        if self.shared_encoder() {
            "shared/encoder".to_string()
        } else {
            format!("{role}/encoder")
        }
    }

    /// Visits one role's parameters only (encoder + decoder).
    pub fn visit_role_mut(&mut self, role: Role, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        let prefix = self.encoder_prefix(role);
        let ei = self.encoder_index(role);
        self.encoders[ei].visit_mut(&prefix, f);
        self.decoders[role.index()].visit_mut(&format!("{role}/decoder"), f);
    }

    pub fn visit_role(&self, role: Role, f: &mut dyn FnMut(&str, &Param<F>)) {
        let prefix = self.encoder_prefix(role);
        self.encoders[self.encoder_index(role)].visit(&prefix, f);
        self.decoders[role.index()].visit(&format!("{role}/decoder"), f);
    }
}

impl<F: Real> Module<F> for CcNet<F> {
    fn visit(&self, _prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        if self.shared_encoder() {
            self.encoders[0].visit("shared/encoder", f);
        } else {
            for r in Role::ALL {
                self.encoders[r.index()].visit(&format!("{r}/encoder"), f);
            }
        }
        for r in Role::ALL {
            self.decoders[r.index()].visit(&format!("{r}/decoder"), f);
        }
    }

    fn visit_mut(&mut self, _prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        if self.shared_encoder() {
            self.encoders[0].visit_mut("shared/encoder", f);
        } else {
            for r in Role::ALL {
                self.encoders[r.index()].visit_mut(&format!("{r}/encoder"), f);
            }
        }
        for r in Role::ALL {
            self.decoders[r.index()].visit_mut(&format!("{r}/decoder"), f);
        }
    }
}
