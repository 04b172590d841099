use candle_core::{DType, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, CheckpointMeta};
use super::layers::{ClassConditionalNorm, Conv2d, Linear, UpConv};
use super::params::ParamStore;
use crate::data::ImageShape;
use crate::error::{Error, Result};

/// Anything with a parameter store and a serializable architecture.
pub trait Module {
    fn params(&self) -> &ParamStore;
    fn backbone(&self) -> serde_json::Value;

    fn to_checkpoint(&self, epoch: u64, seed: u64, config_hash: &str) -> Result<Checkpoint> {
        Ok(Checkpoint {
            meta: CheckpointMeta {
                backbone: self.backbone(),
                epoch,
                seed,
                config_hash: config_hash.to_string(),
            },
            blocks: self.params().to_blocks()?,
        })
    }
}

/// Shared trunk with a latent-target head and a 4-way rotation head.
pub trait DualHeadEncoder: Module {
    /// `(B, C, H, W)` images to (`(B, K)` embeddings, `(B, 4)` rotation logits).
    fn heads(&self, x: &Tensor) -> Result<(Tensor, Tensor)>;
    fn latent_dim(&self) -> usize;
}

pub trait Generator: Module {
    /// `(B, K + d)` codes to `(B, C, H, W)` unclipped images.
    fn generate(&self, z: &Tensor) -> Result<Tensor>;
    fn class_dim(&self) -> usize;
    fn noise_dim(&self) -> usize;
    fn image_shape(&self) -> ImageShape;

    fn code_dim(&self) -> usize {
        self.class_dim() + self.noise_dim()
    }
}

pub trait Classifier: Module {
    /// Penultimate activations.
    fn features(&self, x: &Tensor) -> Result<Tensor>;
    fn head(&self, features: &Tensor) -> Result<Tensor>;
    fn classes(&self) -> usize;
    fn feature_dim(&self) -> usize;

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.head(&self.features(x)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TrunkArch {
    /// Two fully connected ReLU layers over flattened pixels.
    Mlp { hidden: usize },
    /// Three 3×3 convolutions (two strided), global average pooling, one
    /// fully connected ReLU layer.
    Conv { width: usize, hidden: usize },
}

impl Default for TrunkArch {
    fn default() -> Self {
        TrunkArch::Mlp { hidden: 256 }
    }
}

impl TrunkArch {
    fn validate(&self, shape: ImageShape) -> Result<()> {
        let ok = match *self {
            TrunkArch::Mlp { hidden } => hidden > 0,
            TrunkArch::Conv { width, hidden } => width > 0 && hidden > 0 && shape.height >= 4 && shape.width >= 4,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("trunk {self:?} is invalid for {shape} images")))
        }
    }

    fn output_dim(&self) -> usize {
        match *self {
            TrunkArch::Mlp { hidden } | TrunkArch::Conv { hidden, .. } => hidden,
        }
    }
}

enum Trunk {
    Mlp(Linear, Linear),
    Conv([Conv2d; 3], Linear),
}

impl Trunk {
    fn new(ps: &mut ParamStore, arch: &TrunkArch, shape: ImageShape, rng: &mut ChaCha8Rng) -> Result<Self> {
        arch.validate(shape)?;
        Ok(match *arch {
            TrunkArch::Mlp { hidden } => Trunk::Mlp(
                Linear::new(ps, "trunk.fc1", shape.numel(), hidden, true, rng)?,
                Linear::new(ps, "trunk.fc2", hidden, hidden, true, rng)?,
            ),
            TrunkArch::Conv { width, hidden } => Trunk::Conv(
                [
                    Conv2d::new(ps, "trunk.conv1", shape.channels, width, 3, 1, 1, rng)?,
                    Conv2d::new(ps, "trunk.conv2", width, 2 * width, 3, 2, 1, rng)?,
                    Conv2d::new(ps, "trunk.conv3", 2 * width, 2 * width, 3, 2, 1, rng)?,
                ],
                Linear::new(ps, "trunk.fc", 2 * width, hidden, true, rng)?,
            ),
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Trunk::Mlp(a, b) => {
                let h = a.forward(&x.flatten_from(1)?)?.relu()?;
                b.forward(&h)?.relu()
            }
            Trunk::Conv(convs, fc) => {
                let mut h = x.clone();
                for c in convs {
                    h = c.forward(&h)?.relu()?;
                }
                let pooled = h.mean(D::Minus1)?.mean(D::Minus1)?;
                fc.forward(&pooled)?.relu()
            }
        }
        .map_err(Into::into)
    }
}

fn init_rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ salt)
}

fn rebuild<S, M>(ckpt: &Checkpoint, dtype: DType, what: &str, build: impl FnOnce(&S, DType) -> Result<M>) -> Result<M>
where
    S: for<'de> Deserialize<'de>,
    M: Module,
{
    let spec: S = serde_json::from_value(ckpt.meta.backbone.clone())
        .map_err(|e| Error::Checkpoint(format!("checkpoint does not describe a {what}: {e}")))?;
    let model = build(&spec, dtype)?;
    model.params().load_blocks(&ckpt.blocks)?;
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub arch: TrunkArch,
    pub shape: ImageShape,
    pub latent_dim: usize,
}

pub struct Encoder {
    spec: EncoderSpec,
    params: ParamStore,
    trunk: Trunk,
    head1: Linear,
    head2: Linear,
}

impl Encoder {
    pub fn new(spec: &EncoderSpec, seed: u64, dtype: DType) -> Result<Self> {
        if spec.latent_dim == 0 {
            return Err(Error::Config("encoder latent dimension must be >= 1".into()));
        }
        let mut ps = ParamStore::new(dtype);
        let mut rng = init_rng(seed, 0xe9c0);
        let trunk = Trunk::new(&mut ps, &spec.arch, spec.shape, &mut rng)?;
        let f = spec.arch.output_dim();
        let head1 = Linear::new(&mut ps, "head1", f, spec.latent_dim, false, &mut rng)?;
        let head2 = Linear::new(&mut ps, "head2", f, 4, false, &mut rng)?;
        Ok(Self {
            spec: spec.clone(),
            params: ps,
            trunk,
            head1,
            head2,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, dtype: DType) -> Result<Self> {
        rebuild(ckpt, dtype, "encoder", |s, d| Self::new(s, 0, d))
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }
}

impl Module for Encoder {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn backbone(&self) -> serde_json::Value {
        serde_json::to_value(&self.spec).expect("spec serializes")
    }
}

impl DualHeadEncoder for Encoder {
    fn heads(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = self.trunk.forward(x)?;
        Ok((self.head1.forward(&h)?, self.head2.forward(&h)?))
    }

    fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GeneratorArch {
    /// `z → h1 → h2 → C·H·W`, ReLU hidden layers and a linear output.
    Mlp {
        hidden: [usize; 2],
        #[serde(default)]
        cond_norm: bool,
    },
    /// Linear projection to a `(2b, H/4, W/4)` map, then two stride-2
    /// transposed convolutions.
    Conv {
        base_channels: usize,
        #[serde(default)]
        cond_norm: bool,
    },
}

impl Default for GeneratorArch {
    fn default() -> Self {
        GeneratorArch::Mlp {
            hidden: [256, 512],
            cond_norm: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub arch: GeneratorArch,
    pub shape: ImageShape,
    pub class_dim: usize,
    pub noise_dim: usize,
}

enum GenNet {
    Mlp([Linear; 3]),
    Conv(Linear, UpConv, UpConv, usize),
}

pub struct ImageGenerator {
    spec: GeneratorSpec,
    params: ParamStore,
    net: GenNet,
    norm: Option<ClassConditionalNorm>,
}

impl ImageGenerator {
    pub fn new(spec: &GeneratorSpec, seed: u64, dtype: DType) -> Result<Self> {
        let (k, shape) = (spec.class_dim, spec.shape);
        if k == 0 {
            return Err(Error::Config("generator class dimension must be >= 1".into()));
        }
        let input = k + spec.noise_dim;
        let mut ps = ParamStore::new(dtype);
        let mut rng = init_rng(seed, 0x6e40);
        let (net, norm) = match spec.arch {
            GeneratorArch::Mlp { hidden, cond_norm } => {
                if hidden.contains(&0) {
                    return Err(Error::Config("generator hidden widths must be >= 1".into()));
                }
                let net = GenNet::Mlp([
                    Linear::new(&mut ps, "gen.fc1", input, hidden[0], true, &mut rng)?,
                    Linear::new(&mut ps, "gen.fc2", hidden[0], hidden[1], true, &mut rng)?,
                    Linear::new(&mut ps, "gen.out", hidden[1], shape.numel(), false, &mut rng)?,
                ]);
                let norm = cond_norm
                    .then(|| ClassConditionalNorm::new(&mut ps, "gen.norm", k, hidden[0]))
                    .transpose()?;
                (net, norm)
            }
            GeneratorArch::Conv {
                base_channels: b,
                cond_norm,
            } => {
                if b == 0 || shape.height % 4 != 0 || shape.width % 4 != 0 {
                    return Err(Error::Config(format!(
                        "conv generator needs base_channels >= 1 and H, W divisible by 4, got {b} and {shape}"
                    )));
                }
                let cells = 2 * b * (shape.height / 4) * (shape.width / 4);
                let net = GenNet::Conv(
                    Linear::new(&mut ps, "gen.fc", input, cells, true, &mut rng)?,
                    UpConv::new(&mut ps, "gen.up1", 2 * b, b, true, &mut rng)?,
                    UpConv::new(&mut ps, "gen.up2", b, shape.channels, false, &mut rng)?,
                    2 * b,
                );
                let norm = cond_norm
                    .then(|| ClassConditionalNorm::new(&mut ps, "gen.norm", k, cells))
                    .transpose()?;
                (net, norm)
            }
        };
        Ok(Self {
            spec: spec.clone(),
            params: ps,
            net,
            norm,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, dtype: DType) -> Result<Self> {
        rebuild(ckpt, dtype, "generator", |s, d| Self::new(s, 0, d))
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    fn condition(&self, h: Tensor, z: &Tensor) -> Result<Tensor> {
        let Some(norm) = &self.norm else { return Ok(h) };
        let k = self.spec.class_dim;
        let classes = z.narrow(1, 0, k)?.argmax(D::Minus1)?.to_vec1::<u32>()?;
        let mut one_hot = vec![0f32; classes.len() * k];
        for (row, &c) in classes.iter().enumerate() {
            one_hot[row * k + c as usize] = 1.0;
        }
        let one_hot = Tensor::from_vec(one_hot, (classes.len(), k), z.device())?.to_dtype(z.dtype())?;
        norm.forward(&h, &one_hot)
    }
}

impl Module for ImageGenerator {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn backbone(&self) -> serde_json::Value {
        serde_json::to_value(&self.spec).expect("spec serializes")
    }
}

impl Generator for ImageGenerator {
    fn generate(&self, z: &Tensor) -> Result<Tensor> {
        let (b, width) = z.dims2()?;
        if width != self.code_dim() {
            return Err(Error::Shape(format!(
                "generator expects codes of width {}, got {width}",
                self.code_dim()
            )));
        }
        let s = self.spec.shape;
        match &self.net {
            GenNet::Mlp([a, m, out]) => {
                let h = self.condition(a.forward(z)?, z)?.relu()?;
                let h = m.forward(&h)?.relu()?;
                Ok(out.forward(&h)?.reshape((b, s.channels, s.height, s.width))?)
            }
            GenNet::Conv(fc, up1, up2, c) => {
                let h = self.condition(fc.forward(z)?, z)?.relu()?;
                let h = h.reshape((b, *c, s.height / 4, s.width / 4))?;
                let h = up1.forward(&h)?.relu()?;
                up2.forward(&h)
            }
        }
    }

    fn class_dim(&self) -> usize {
        self.spec.class_dim
    }

    fn noise_dim(&self) -> usize {
        self.spec.noise_dim
    }

    fn image_shape(&self) -> ImageShape {
        self.spec.shape
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub arch: TrunkArch,
    pub shape: ImageShape,
    pub classes: usize,
}

pub struct ImageClassifier {
    spec: ClassifierSpec,
    params: ParamStore,
    trunk: Trunk,
    head: Linear,
}

impl ImageClassifier {
    pub fn new(spec: &ClassifierSpec, seed: u64, dtype: DType) -> Result<Self> {
        if spec.classes < 2 {
            return Err(Error::Config("a classifier needs at least 2 classes".into()));
        }
        let mut ps = ParamStore::new(dtype);
        let mut rng = init_rng(seed, 0xc1a5);
        let trunk = Trunk::new(&mut ps, &spec.arch, spec.shape, &mut rng)?;
        let head = Linear::new(&mut ps, "head", spec.arch.output_dim(), spec.classes, false, &mut rng)?;
        Ok(Self {
            spec: spec.clone(),
            params: ps,
            trunk,
            head,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, dtype: DType) -> Result<Self> {
        rebuild(ckpt, dtype, "classifier", |s, d| Self::new(s, 0, d))
    }

    pub fn spec(&self) -> &ClassifierSpec {
        &self.spec
    }
}

impl Module for ImageClassifier {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn backbone(&self) -> serde_json::Value {
        serde_json::to_value(&self.spec).expect("spec serializes")
    }
}

impl Classifier for ImageClassifier {
    fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.trunk.forward(x)
    }

    fn head(&self, features: &Tensor) -> Result<Tensor> {
        self.head.forward(features)
    }

    fn classes(&self) -> usize {
        self.spec.classes
    }

    fn feature_dim(&self) -> usize {
        self.spec.arch.output_dim()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    const SHAPE: ImageShape = ImageShape::new(3, 8, 8);

    fn images(b: usize) -> Tensor {
        Tensor::rand(0f32, 1.0, (b, 3, 8, 8), &Device::Cpu).unwrap()
    }

    #[test]
    fn encoder_heads_have_contract_shapes() {
        for arch in [TrunkArch::Mlp { hidden: 16 }, TrunkArch::Conv { width: 4, hidden: 8 }] {
            let spec = EncoderSpec {
                arch,
                shape: SHAPE,
                latent_dim: 5,
            };
            let enc = Encoder::new(&spec, 1, DType::F32).unwrap();
            let (h1, h2) = enc.heads(&images(3)).unwrap();
            assert_eq!(h1.dims(), &[3, 5]);
            assert_eq!(h2.dims(), &[3, 4]);
        }
    }

    #[test]
    fn trunk_update_moves_both_heads() {
        let spec = EncoderSpec {
            arch: TrunkArch::Mlp { hidden: 8 },
            shape: SHAPE,
            latent_dim: 3,
        };
        let enc = Encoder::new(&spec, 2, DType::F32).unwrap();
        let x = images(2);
        let (a1, a2) = enc.heads(&x).unwrap();
        let w = enc.params().get("trunk.fc2.weight").unwrap();
        w.set(&(w.as_tensor() * 1.5).unwrap()).unwrap();
        let (b1, b2) = enc.heads(&x).unwrap();
        let moved = |a: &Tensor, b: &Tensor| (a - b).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap() > 0.0;
        assert!(moved(&a1, &b1) && moved(&a2, &b2));
    }

    #[test]
    fn generators_emit_dataset_shape() {
        for arch in [
            GeneratorArch::Mlp {
                hidden: [8, 16],
                cond_norm: true,
            },
            GeneratorArch::Conv {
                base_channels: 4,
                cond_norm: true,
            },
            GeneratorArch::default(),
        ] {
            let spec = GeneratorSpec {
                arch,
                shape: SHAPE,
                class_dim: 3,
                noise_dim: 4,
            };
            let g = ImageGenerator::new(&spec, 3, DType::F32).unwrap();
            let z = Tensor::rand(-1f32, 1.0, (2, 7), &Device::Cpu).unwrap();
            assert_eq!(g.generate(&z).unwrap().dims(), &[2, 3, 8, 8]);
            let bad = Tensor::zeros((2, 6), DType::F32, &Device::Cpu).unwrap();
            assert!(g.generate(&bad).is_err());
        }
    }

    #[test]
    fn checkpoint_rebuilds_identical_model() {
        let spec = ClassifierSpec {
            arch: TrunkArch::Conv { width: 2, hidden: 4 },
            shape: SHAPE,
            classes: 3,
        };
        let clf = ImageClassifier::new(&spec, 9, DType::F32).unwrap();
        let ckpt = clf.to_checkpoint(4, 9, "abc").unwrap();
        let back = ImageClassifier::from_checkpoint(&Checkpoint::decode(&ckpt.encode().unwrap()).unwrap(), DType::F32).unwrap();
        let x = images(2);
        let a = clf.logits(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = back.logits(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
        assert!(Encoder::from_checkpoint(&ckpt, DType::F32).is_err());
    }

    #[test]
    fn same_seed_same_init() {
        let spec = GeneratorSpec {
            arch: GeneratorArch::default(),
            shape: SHAPE,
            class_dim: 2,
            noise_dim: 2,
        };
        let a = ImageGenerator::new(&spec, 5, DType::F32).unwrap();
        let b = ImageGenerator::new(&spec, 5, DType::F32).unwrap();
        let c = ImageGenerator::new(&spec, 6, DType::F32).unwrap();
        assert_eq!(a.params().flat_values().unwrap(), b.params().flat_values().unwrap());
        assert_ne!(a.params().flat_values().unwrap(), c.params().flat_values().unwrap());
    }
}
