//! Network builders, backbones and the `LFWT` weights format.

use std::fmt;
use std::path::{Path, PathBuf};

use crate::data::{LesionRecord, Sex};
use crate::nn::{
    init_params, Activation, BlockSpec, InputSpec, LayerSpec, NetworkSpec, OptimizerSpec, ParamStore, Rng,
    Tensor,
};
use crate::train::{train, Sample, TrainConfig};
use crate::{Error, Result};

/// The four training regimes, in results-table row order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelKind {
    Scratch,
    FeatureExtractor,
    FineTune,
    Hybrid,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::Scratch,
        ModelKind::FeatureExtractor,
        ModelKind::FineTune,
        ModelKind::Hybrid,
    ];

    /// Command-line identifier.
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Scratch => "scratch",
            ModelKind::FeatureExtractor => "feature-extractor",
            ModelKind::FineTune => "finetune",
            ModelKind::Hybrid => "hybrid",
        }
    }

    /// Row label in the results table.
    pub fn display_name(self) -> &'static str {
        match self {
            ModelKind::Scratch => "Scratch",
            ModelKind::FeatureExtractor => "Feature Extractor",
            ModelKind::FineTune => "FineTune",
            ModelKind::Hybrid => "Hybrid",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "scratch" => Ok(ModelKind::Scratch),
            "feature-extractor" | "feature_extractor" | "featureextractor" => Ok(ModelKind::FeatureExtractor),
            "finetune" | "fine-tune" => Ok(ModelKind::FineTune),
            "hybrid" => Ok(ModelKind::Hybrid),
            other => Err(Error::InvalidArgument(format!("unknown model `{other}`"))),
        }
    }
}

/// Width of the first head layer.
pub const HEAD_UNITS: usize = 1024;
pub const HEAD_BLOCK: &str = "head";

/// Parameters of GAP → Dense(1024) → Dense(1) over `channels` features.
pub fn head_param_count(channels: usize) -> usize {
    HEAD_UNITS * channels + 2 * HEAD_UNITS + 1
}

/// Scratch CNN: four conv/pool stages (32, 64, 128, 128 filters), then
/// Flatten, Dense(256), Dropout(0.5), Dense(1, sigmoid).
pub fn build_scratch(input_size: usize) -> Result<NetworkSpec> {
    if input_size < 16 {
        return Err(Error::InvalidArgument(format!(
            "scratch input {input_size} too small for four pooling stages"
        )));
    }
    let stage = |name: &str, filters| {
        BlockSpec::new(
            name,
            vec![LayerSpec::conv3x3(filters, Activation::Relu), LayerSpec::max_pool(2)],
        )
    };
    NetworkSpec::new(
        vec![InputSpec::new("image", &[input_size, input_size, 1])],
        vec![
            stage("conv1", 32),
            stage("conv2", 64),
            stage("conv3", 128),
            stage("conv4", 128),
            BlockSpec::new(
                "classifier",
                vec![
                    LayerSpec::Flatten,
                    LayerSpec::dense(256, Activation::Relu),
                    LayerSpec::Dropout { rate: 0.5 },
                    LayerSpec::dense(1, Activation::Sigmoid),
                ],
            ),
        ],
    )
}

#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Random { seed: u64 },
    PretextPretrained { seed: u64, holdout_accuracy: f64 },
    WeightsFile(PathBuf),
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Random { seed } => write!(f, "random(seed={seed})"),
            Provenance::PretextPretrained {
                seed,
                holdout_accuracy,
            } => write!(f, "pretext_pretrained(seed={seed}, holdout_acc={holdout_accuracy:.4})"),
            Provenance::WeightsFile(p) => write!(f, "weights_file({})", p.display()),
        }
    }
}

/// Ordered named convolutional blocks ending in a spatial feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneSpec {
    input_shape: Vec<usize>,
    blocks: Vec<BlockSpec>,
    channels: usize,
}

impl BackboneSpec {
    pub fn new(input_shape: &[usize], blocks: Vec<BlockSpec>) -> Result<Self> {
        if blocks.len() < 3 {
            return Err(Error::InvalidArgument(format!(
                "backbone needs at least 3 blocks, got {}",
                blocks.len()
            )));
        }
        if blocks.iter().any(|b| b.name == HEAD_BLOCK) {
            return Err(Error::InvalidArgument(format!("`{HEAD_BLOCK}` is reserved")));
        }
        let blocks: Vec<BlockSpec> = blocks
            .into_iter()
            .map(|mut b| {
                b.trainable = true;
                b
            })
            .collect();
        let net = NetworkSpec::new(vec![InputSpec::new("image", input_shape)], blocks.clone())?;
        let out = net.output_shape();
        if out.len() != 3 {
            return Err(Error::Shape(format!("backbone must end in a feature map, got {out:?}")));
        }
        Ok(BackboneSpec {
            input_shape: input_shape.to_vec(),
            channels: out[2],
            blocks,
        })
    }

    /// Five blocks: Conv(8)-pool, Conv(16)-pool, Conv(16), Conv(32)-pool,
    /// Conv(32); all 3×3 same-padded ReLU. C = 32.
    pub fn tiny_conv(input_size: usize) -> Result<Self> {
        let conv = |f| LayerSpec::conv3x3(f, Activation::Relu);
        BackboneSpec::new(
            &[input_size, input_size, 3],
            vec![
                BlockSpec::new("block1", vec![conv(8), LayerSpec::max_pool(2)]),
                BlockSpec::new("block2", vec![conv(16), LayerSpec::max_pool(2)]),
                BlockSpec::new("block3", vec![conv(16)]),
                BlockSpec::new("block4", vec![conv(32), LayerSpec::max_pool(2)]),
                BlockSpec::new("block5", vec![conv(32)]),
            ],
        )
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn blocks(&self) -> &[BlockSpec] {
        &self.blocks
    }

    pub fn block_names(&self) -> Vec<&str> {
        self.blocks.iter().map(|b| b.name.as_str()).collect()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// The backbone alone, all blocks trainable.
    pub fn network(&self) -> NetworkSpec {
        NetworkSpec::new(vec![InputSpec::new("image", &self.input_shape)], self.blocks.clone())
            .expect("validated backbone")
    }

    fn frozen_blocks(&self) -> Vec<BlockSpec> {
        self.blocks.iter().cloned().map(BlockSpec::frozen).collect()
    }

    /// Names of every backbone parameter.
    pub fn param_names(&self) -> Vec<String> {
        self.network().param_shapes().into_iter().map(|(n, _)| n).collect()
    }
}

/// A backbone with weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub spec: BackboneSpec,
    pub params: ParamStore,
    pub provenance: Provenance,
}

impl Backbone {
    pub fn random(spec: BackboneSpec, seed: u64) -> Self {
        let params = init_params(&spec.network(), &mut Rng::new(seed));
        Backbone {
            spec,
            params,
            provenance: Provenance::Random { seed },
        }
    }

    /// Loads the backbone entries of an `LFWT` file; other entries are ignored.
    pub fn from_weights_file(spec: BackboneSpec, path: &Path) -> Result<Self> {
        let mut all = load_params(path)?;
        let params: ParamStore = spec
            .param_names()
            .into_iter()
            .filter_map(|n| all.remove(&n).map(|t| (n, t)))
            .collect();
        spec.network().check_params(&params)?;
        Ok(Backbone {
            spec,
            params,
            provenance: Provenance::WeightsFile(path.to_path_buf()),
        })
    }

    /// Copies the backbone weights over freshly initialised parameters of a
    /// network built on this backbone.
    pub fn initial_params(&self, net: &NetworkSpec, seed: u64) -> Result<ParamStore> {
        let mut params: ParamStore = init_params(net, &mut Rng::new(seed));
        for (name, t) in self.params.iter() {
            match params.get_mut(name) {
                Some(slot) if slot.shape() == t.shape() => *slot = t.clone(),
                Some(slot) => {
                    return Err(Error::Shape(format!(
                        "parameter `{name}`: network {:?}, backbone {:?}",
                        slot.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Missing(format!("network has no parameter `{name}`"))),
            }
        }
        Ok(params)
    }
}

fn head_block() -> BlockSpec {
    BlockSpec::new(
        HEAD_BLOCK,
        vec![
            LayerSpec::GlobalAvgPool2D,
            LayerSpec::dense(HEAD_UNITS, Activation::Relu),
            LayerSpec::dense(1, Activation::Sigmoid),
        ],
    )
}

/// Frozen backbone followed by the trainable head.
pub fn build_feature_extractor(backbone: &BackboneSpec) -> Result<NetworkSpec> {
    let mut blocks = backbone.frozen_blocks();
    blocks.push(head_block());
    NetworkSpec::new(vec![InputSpec::new("image", backbone.input_shape())], blocks)
}

/// Unfreezes the last two backbone blocks of a feature-extractor network.
/// Parameters pass through untouched; `None` (no stage-1 checkpoint) is an error.
pub fn build_finetune(net: &NetworkSpec, best: Option<ParamStore>) -> Result<(NetworkSpec, ParamStore)> {
    let params = best.ok_or_else(|| Error::Missing("stage-1 best checkpoint".into()))?;
    let blocks = net.blocks();
    let n = blocks.len();
    if n < 4 || blocks[n - 1].name != HEAD_BLOCK {
        return Err(Error::InvalidArgument(
            "fine-tuning needs a feature-extractor network (backbone + head)".into(),
        ));
    }
    net.check_params(&params)?;
    let mut out = net.clone();
    for b in &blocks[n - 3..] {
        out.set_trainable(&b.name, true)?;
    }
    Ok((out, params))
}

pub const METADATA_WIDTH: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct HybridSpec {
    pub hidden: [usize; 3],
}

impl Default for HybridSpec {
    fn default() -> Self {
        HybridSpec { hidden: [16, 16, 16] }
    }
}

/// `[age/100 or 0, is_male, is_female, is_unknown_sex]`.
pub fn encode_metadata(record: &LesionRecord) -> Tensor {
    let age = record.age_years.map_or(0.0, |a| (a / 100.0) as f32);
    let sex = match record.sex {
        Sex::Male => [1.0, 0.0, 0.0],
        Sex::Female => [0.0, 1.0, 0.0],
        Sex::Unknown => [0.0, 0.0, 1.0],
    };
    Tensor::vector(vec![age, sex[0], sex[1], sex[2]])
}

/// Image branch (backbone + head without its final Dense), metadata MLP,
/// and a sigmoid Dense over their concatenation. The last two backbone
/// blocks, the head, the metadata branch and the fusion block train.
pub fn build_hybrid(backbone: &BackboneSpec, spec: &HybridSpec) -> Result<NetworkSpec> {
    let mut blocks = backbone.frozen_blocks();
    let n = blocks.len();
    for b in &mut blocks[n - 2..] {
        b.trainable = true;
    }
    let last = blocks[n - 1].name.clone();
    blocks.push(
        BlockSpec::new(
            HEAD_BLOCK,
            vec![LayerSpec::GlobalAvgPool2D, LayerSpec::dense(HEAD_UNITS, Activation::Relu)],
        )
        .with_sources([last]),
    );
    blocks.push(
        BlockSpec::new(
            "meta",
            spec.hidden.iter().map(|&h| LayerSpec::dense(h, Activation::Relu)).collect(),
        )
        .with_sources(["metadata"]),
    );
    blocks.push(
        BlockSpec::new(
            "fusion",
            vec![LayerSpec::Concat, LayerSpec::dense(1, Activation::Sigmoid)],
        )
        .with_sources([HEAD_BLOCK, "meta"]),
    );
    NetworkSpec::new(
        vec![
            InputSpec::new("image", backbone.input_shape()),
            InputSpec::new("metadata", &[METADATA_WIDTH]),
        ],
        blocks,
    )
}

/// Builds the untrained network for `kind`. Scratch ignores the backbone.
pub fn build_model(kind: ModelKind, backbone: &BackboneSpec, scratch_size: usize) -> Result<NetworkSpec> {
    match kind {
        ModelKind::Scratch => build_scratch(scratch_size),
        ModelKind::FeatureExtractor | ModelKind::FineTune => build_feature_extractor(backbone),
        ModelKind::Hybrid => build_hybrid(backbone, &HybridSpec::default()),
    }
}

const MAGIC: &[u8; 4] = b"LFWT";
const VERSION: u16 = 1;

/// `LFWT` v1, little-endian: per entry name length (u16), UTF-8 name,
/// rank (u8), dims (u32 each), f32 payload; entries sorted by name.
pub fn encode_params(store: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(6 + store.scalar_count() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in store.iter() {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("parameter name too long: `{name}`")))?;
        let rank = u8::try_from(t.shape().len())
            .map_err(|_| Error::Format(format!("rank of `{name}` exceeds 255")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension of `{name}` too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated weights file while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_params(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected LFWT")));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported LFWT version {version}")));
    }
    let mut store = ParamStore::new();
    while r.pos < bytes.len() {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("shape of `{name}` overflows")))?;
        let payload = r.take(
            count.checked_mul(4).ok_or_else(|| Error::Format(format!("`{name}` too large")))?,
            "payload",
        )?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if store.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::Format(format!("duplicate parameter `{name}`")));
        }
    }
    Ok(store)
}

pub fn save_params(store: &ParamStore, path: &Path) -> Result<()> {
    std::fs::write(path, encode_params(store)?).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: &Path) -> Result<ParamStore> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_params(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Loads and checks every declared parameter of `net` is present with the
/// right shape.
pub fn load_params_for(net: &NetworkSpec, path: &Path) -> Result<ParamStore> {
    let params = load_params(path)?;
    net.check_params(&params)?;
    Ok(params)
}

pub const PRETEXT_HEAD: &str = "pretext_head";

#[derive(Debug, Clone, PartialEq)]
pub struct PretextConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerSpec,
    pub seed: u64,
}

impl Default for PretextConfig {
    fn default() -> Self {
        PretextConfig {
            epochs: 10,
            batch_size: 32,
            optimizer: OptimizerSpec::RMSPROP_DEFAULT,
            seed: 0,
        }
    }
}

/// Trains the backbone under a temporary GAP → Dense(k, sigmoid) head on a
/// k-class one-hot task, keeps the best-holdout weights and drops the head.
pub fn pretext_pretrain(
    backbone: &Backbone,
    train_set: &[Sample],
    holdout: &[Sample],
    config: &PretextConfig,
) -> Result<Backbone> {
    let classes = train_set.first().map_or(0, |s| s.target.len());
    if classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "pretext task needs at least 2 classes, got {classes}"
        )));
    }
    let mut blocks = backbone.spec.blocks().to_vec();
    blocks.push(BlockSpec::new(
        PRETEXT_HEAD,
        vec![LayerSpec::GlobalAvgPool2D, LayerSpec::dense(classes, Activation::Sigmoid)],
    ));
    let net = NetworkSpec::new(vec![InputSpec::new("image", backbone.spec.input_shape())], blocks)?;
    let params = backbone.initial_params(&net, config.seed)?;
    let train_config = TrainConfig {
        batch_size: config.batch_size,
        ..TrainConfig::new(config.optimizer, config.epochs, config.seed)
    };
    let outcome = train(&net, params, train_set, holdout, &train_config)?;
    let holdout_accuracy = outcome.history.best_val_acc().unwrap_or(0.0);
    let params: ParamStore = outcome
        .best_params
        .iter()
        .filter(|(n, _)| !n.starts_with(&format!("{PRETEXT_HEAD}/")))
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    Ok(Backbone {
        spec: backbone.spec.clone(),
        params,
        provenance: Provenance::PretextPretrained {
            seed: config.seed,
            holdout_accuracy,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Diagnosis;
    use crate::nn::Mode;

    fn tiny() -> BackboneSpec {
        BackboneSpec::tiny_conv(16).unwrap()
    }

    #[test]
    fn scratch_shapes() {
        let net = build_scratch(128).unwrap();
        assert_eq!(net.block_output_shape("conv4"), Some(&[8, 8, 128][..]));
        assert_eq!(net.output_shape(), &[1]);
        assert_eq!(net.trainable_blocks().len(), net.blocks().len());
        let small = build_scratch(32).unwrap();
        let params = init_params(&small, &mut Rng::new(1));
        let x = Tensor::full(&[32, 32, 1], 0.3f32);
        let y = small.predict(&params, &[x]).unwrap();
        assert!(y.data()[0] > 0.0 && y.data()[0] < 1.0);
        assert!(build_scratch(8).is_err());
    }

    #[test]
    fn head_parameter_count_closed_form() {
        assert_eq!(head_param_count(8), 10_241);
        assert_eq!(head_param_count(2048), 2_099_201);
        for c in [3usize, 8, 32] {
            let conv = |f| LayerSpec::conv3x3(f, Activation::Relu);
            let spec = BackboneSpec::new(
                &[8, 8, 3],
                vec![
                    BlockSpec::new("a", vec![conv(4)]),
                    BlockSpec::new("b", vec![conv(4)]),
                    BlockSpec::new("c", vec![conv(c)]),
                ],
            )
            .unwrap();
            let net = build_feature_extractor(&spec).unwrap();
            let params = init_params::<f32>(&net, &mut Rng::new(0));
            assert_eq!(params.scalar_count_in(HEAD_BLOCK), head_param_count(c));
        }
    }

    #[test]
    fn feature_extractor_freezes_backbone() {
        let net = build_feature_extractor(&tiny()).unwrap();
        assert_eq!(net.trainable_blocks(), vec![HEAD_BLOCK]);
        let two = BackboneSpec::new(
            &[8, 8, 3],
            vec![
                BlockSpec::new("a", vec![LayerSpec::conv3x3(2, Activation::Relu)]),
                BlockSpec::new("b", vec![LayerSpec::conv3x3(2, Activation::Relu)]),
            ],
        );
        assert!(two.is_err());
    }

    #[test]
    fn finetune_unfreezes_last_two_blocks() {
        let net = build_feature_extractor(&tiny()).unwrap();
        let params = init_params::<f32>(&net, &mut Rng::new(4));
        let (ft, p2) = build_finetune(&net, Some(params.clone())).unwrap();
        assert_eq!(ft.trainable_blocks(), vec!["block4", "block5", HEAD_BLOCK]);
        assert_eq!(p2, params);
        assert!(build_finetune(&net, None).is_err());

        let conv = |f| LayerSpec::conv3x3(f, Activation::Relu);
        let three = BackboneSpec::new(
            &[8, 8, 3],
            vec![
                BlockSpec::new("block1", vec![conv(2)]),
                BlockSpec::new("block2", vec![conv(2)]),
                BlockSpec::new("block3", vec![conv(2)]),
            ],
        )
        .unwrap();
        let net3 = build_feature_extractor(&three).unwrap();
        let p3 = init_params::<f32>(&net3, &mut Rng::new(4));
        let (ft3, _) = build_finetune(&net3, Some(p3)).unwrap();
        assert_eq!(ft3.trainable_blocks(), vec!["block2", "block3", HEAD_BLOCK]);
    }

    #[test]
    fn metadata_encoding() {
        let mut r = LesionRecord::new("x", Diagnosis::Nevus);
        assert_eq!(encode_metadata(&r).data(), &[0.0, 0.0, 0.0, 1.0]);
        r.age_years = Some(55.0);
        r.sex = Sex::Male;
        assert_eq!(encode_metadata(&r).data(), &[0.55, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn hybrid_structure_and_zero_fusion() {
        let spec = tiny();
        let net = build_hybrid(&spec, &HybridSpec::default()).unwrap();
        assert_eq!(net.inputs().len(), 2);
        assert_eq!(net.block_output_shape(HEAD_BLOCK), Some(&[HEAD_UNITS][..]));
        assert_eq!(
            net.trainable_blocks(),
            vec!["block4", "block5", HEAD_BLOCK, "meta", "fusion"]
        );
        let mut params = init_params::<f32>(&net, &mut Rng::new(2));
        assert_eq!(params.require("fusion/1/kernel").unwrap().shape(), &[1040, 1]);
        for v in params.get_mut("fusion/1/kernel").unwrap().data_mut() {
            *v = 0.0;
        }
        let mut rng = Rng::new(9);
        for _ in 0..3 {
            let img: Vec<f32> = (0..16 * 16 * 3).map(|_| rng.next_f64() as f32).collect();
            let x = Tensor::new(vec![16, 16, 3], img).unwrap();
            let m = Tensor::vector(vec![rng.next_f64() as f32, 0.0, 1.0, 0.0]);
            assert_eq!(net.predict(&params, &[x, m]).unwrap().data(), &[0.5]);
        }
    }

    #[test]
    fn hybrid_reduces_to_image_only_when_metadata_weights_are_zero() {
        let spec = tiny();
        let backbone = Backbone::random(spec.clone(), 5);
        let fe = build_feature_extractor(&spec).unwrap();
        let fe_params = backbone.initial_params(&fe, 6).unwrap();
        let hy = build_hybrid(&spec, &HybridSpec::default()).unwrap();
        let mut hy_params = backbone.initial_params(&hy, 7).unwrap();
        for name in ["head/1/kernel", "head/1/bias"] {
            hy_params.insert(name, fe_params.require(name).unwrap().clone());
        }
        let mut fusion = vec![0.0f32; 1040];
        fusion[..1024].copy_from_slice(fe_params.require("head/2/kernel").unwrap().data());
        hy_params.insert("fusion/1/kernel", Tensor::new(vec![1040, 1], fusion).unwrap());
        hy_params.insert("fusion/1/bias", fe_params.require("head/2/bias").unwrap().clone());
        let mut rng = Rng::new(1);
        let img: Vec<f32> = (0..16 * 16 * 3).map(|_| rng.next_f64() as f32).collect();
        let x = Tensor::new(vec![16, 16, 3], img).unwrap();
        let m = Tensor::vector(vec![0.4, 0.0, 1.0, 0.0]);
        let a = fe.predict(&fe_params, &[x.clone()]).unwrap();
        let b = hy.predict(&hy_params, &[x, m]).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn weights_round_trip_and_errors() {
        let net = build_feature_extractor(&tiny()).unwrap();
        let params = init_params::<f32>(&net, &mut Rng::new(8));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.lfwt");
        save_params(&params, &path).unwrap();
        let back = load_params_for(&net, &path).unwrap();
        assert_eq!(back, params);
        for ((_, a), (_, b)) in back.iter().zip(params.iter()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }

        let bytes = encode_params(&params).unwrap();
        assert_eq!(&bytes[..6], b"LFWT\x01\x00");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_params(&bad), Err(Error::Format(_))));
        let mut badv = bytes.clone();
        badv[4] = 2;
        assert!(matches!(decode_params(&badv), Err(Error::Format(_))));
        for cut in [bytes.len() - 1, bytes.len() - 3, 7, 9] {
            assert!(matches!(decode_params(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }

        let mut missing = params.clone();
        missing.remove("head/2/bias");
        save_params(&missing, &path).unwrap();
        let err = load_params_for(&net, &path).unwrap_err();
        assert!(err.to_string().contains("head/2/bias"));

        let other = build_feature_extractor(&BackboneSpec::tiny_conv(8).unwrap()).unwrap();
        let mut wrong = init_params::<f32>(&other, &mut Rng::new(0));
        wrong.insert("block1/0/kernel", Tensor::zeros(&[3, 3, 3, 4]));
        save_params(&wrong, &path).unwrap();
        let err = load_params_for(&net, &path).unwrap_err();
        assert!(matches!(err, Error::Shape(ref m) if m.contains("block1/0/kernel")));
    }

    #[test]
    fn weights_file_backbone_import() {
        let spec = tiny();
        let src = Backbone::random(spec.clone(), 3);
        let fe = build_feature_extractor(&spec).unwrap();
        let full = src.initial_params(&fe, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("full.lfwt");
        save_params(&full, &path).unwrap();
        let imported = Backbone::from_weights_file(spec, &path).unwrap();
        assert_eq!(imported.params, src.params);
        assert!(matches!(imported.provenance, Provenance::WeightsFile(_)));
    }

    #[test]
    fn one_step_respects_freeze() {
        use crate::nn::{bce_vector, Optimizer};
        let spec = tiny();
        let net = build_feature_extractor(&spec).unwrap();
        let params = init_params::<f32>(&net, &mut Rng::new(8));
        let mut rng = Rng::new(2);
        let img: Vec<f32> = (0..16 * 16 * 3).map(|_| rng.next_f64() as f32).collect();
        let x = Tensor::new(vec![16, 16, 3], img).unwrap();
        for (net, trainable) in [
            (net.clone(), vec![HEAD_BLOCK]),
            (build_finetune(&net, Some(params.clone())).unwrap().0, vec!["block4", "block5", HEAD_BLOCK]),
        ] {
            let (out, cache) = net.forward(&params, &[x.clone()], Mode::Train, &mut rng).unwrap();
            let (_, g) = bce_vector(&out, &[1.0]).unwrap();
            let mut grads = net.zero_grads();
            net.backward(&params, &cache, &g, &mut grads).unwrap();
            let mut p = params.clone();
            Optimizer::new(OptimizerSpec::RMSPROP_DEFAULT).unwrap().step(&mut p, &grads).unwrap();
            for block in net.blocks() {
                let names = net.block_param_names(&block.name);
                let changed = names.iter().any(|n| p.get(n) != params.get(n));
                if trainable.contains(&block.name.as_str()) {
                    assert!(changed, "{} should train", block.name);
                } else {
                    assert!(!changed, "{} should be frozen", block.name);
                }
            }
        }
    }

    #[test]
    fn model_kind_names() {
        for k in ModelKind::ALL {
            assert_eq!(k.as_str().parse::<ModelKind>().unwrap(), k);
        }
        assert!("inception".parse::<ModelKind>().is_err());
    }
}
