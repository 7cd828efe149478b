use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Result, SiameseError};
use crate::data::{FaceImage, FACE_SIZE};
use crate::nn::{
    read_layers, write_layers, BatchNorm2d, Conv2d, Layer, Linear, NnError, ReflectionPad, Sequential, Tensor,
    TrainMode,
};

pub const EMBEDDING_DIM: usize = 5;
/// Width of the flattened feature map: 8 channels × 100 × 100.
pub const FLATTEN_WIDTH: usize = 8 * FACE_SIZE * FACE_SIZE;

const EMBED_CHUNK: usize = 32;

/// A 5-dimensional face feature vector. Not normalised.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct Embedding([f32; EMBEDDING_DIM]);

impl Embedding {
    pub fn new(values: [f32; EMBEDDING_DIM]) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SiameseError::InvalidArgument(format!(
                "embedding has non-finite entries: {values:?}"
            )));
        }
        Ok(Self(values))
    }

    pub fn from_slice(values: &[f32]) -> Result<Self> {
        let arr: [f32; EMBEDDING_DIM] = values.try_into().map_err(|_| {
            SiameseError::InvalidArgument(format!(
                "embedding needs {EMBEDDING_DIM} values, got {}",
                values.len()
            ))
        })?;
        Self::new(arr)
    }

    pub fn values(&self) -> &[f32; EMBEDDING_DIM] {
        &self.0
    }
}

impl TryFrom<Vec<f32>> for Embedding {
    type Error = SiameseError;

    fn try_from(v: Vec<f32>) -> Result<Self> {
        Self::from_slice(&v)
    }
}

impl From<Embedding> for Vec<f32> {
    fn from(e: Embedding) -> Self {
        e.0.to_vec()
    }
}

/// Layer listing of the embedding network.
pub fn golden_descriptor() -> Vec<String> {
    let bn = |c| format!("BatchNorm2d({c}, eps=1e-05, momentum=0.1, affine=True, track_running_stats=True)");
    let pad = "ReflectionPad2d((1, 1, 1, 1))".to_string();
    let relu = "ReLU(inplace)".to_string();
    vec![
        pad.clone(),
        "Conv2d(1, 4, kernel_size=(3, 3), stride=(1, 1))".into(),
        relu.clone(),
        bn(4),
        pad.clone(),
        "Conv2d(4, 8, kernel_size=(3, 3), stride=(1, 1))".into(),
        relu.clone(),
        bn(8),
        pad,
        "Conv2d(8, 8, kernel_size=(3, 3), stride=(1, 1))".into(),
        relu.clone(),
        bn(8),
        "Flatten".into(),
        "Linear(in_features=80000, out_features=500, bias=True)".into(),
        relu.clone(),
        "Linear(in_features=500, out_features=500, bias=True)".into(),
        relu,
        "Linear(in_features=500, out_features=5, bias=True)".into(),
    ]
}

/// Stacks face images into an `N×1×100×100` tensor.
pub fn images_to_tensor(images: &[&FaceImage]) -> Result<Tensor<f32>> {
    if images.is_empty() {
        return Err(SiameseError::InvalidArgument("no images to stack".into()));
    }
    let mut data = Vec::with_capacity(images.len() * FACE_SIZE * FACE_SIZE);
    for img in images {
        if img.pixels.len() != FACE_SIZE * FACE_SIZE {
            return Err(SiameseError::InvalidArgument(format!(
                "face image must be {FACE_SIZE}×{FACE_SIZE}, got {} pixels",
                img.pixels.len()
            )));
        }
        data.extend_from_slice(&img.pixels);
    }
    Ok(Tensor::new(vec![images.len(), 1, FACE_SIZE, FACE_SIZE], data)?)
}

/// Twin-branch embedding network. Both branches of a pair run through the
/// one parameter set held here.
#[derive(Debug, Clone)]
pub struct SiameseNetwork {
    net: Sequential<f32>,
    mode: TrainMode,
}

impl SiameseNetwork {
    /// Builds the network with seeded fan-in uniform initialisation.
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pad = || Layer::ReflectionPad(ReflectionPad { pad: 1 });
        let layers = vec![
            pad(),
            Layer::Conv(Conv2d::new(1, 4, 3, &mut rng)),
            Layer::Relu,
            Layer::BatchNorm(BatchNorm2d::new(4)),
            pad(),
            Layer::Conv(Conv2d::new(4, 8, 3, &mut rng)),
            Layer::Relu,
            Layer::BatchNorm(BatchNorm2d::new(8)),
            pad(),
            Layer::Conv(Conv2d::new(8, 8, 3, &mut rng)),
            Layer::Relu,
            Layer::BatchNorm(BatchNorm2d::new(8)),
            Layer::Flatten,
            Layer::Linear(Linear::new(FLATTEN_WIDTH, 500, &mut rng)),
            Layer::Relu,
            Layer::Linear(Linear::new(500, 500, &mut rng)),
            Layer::Relu,
            Layer::Linear(Linear::new(500, EMBEDDING_DIM, &mut rng)),
        ];
        Self {
            net: Sequential::new(layers),
            mode: TrainMode::Evaluation,
        }
    }

    fn from_layers(layers: Vec<Layer<f32>>) -> Result<Self> {
        let net = Self {
            net: Sequential::new(layers),
            mode: TrainMode::Evaluation,
        };
        if net.descriptor() != golden_descriptor() {
            return Err(NnError::Format(format!(
                "checkpoint layers do not form the face network: {:?}",
                net.descriptor()
            ))
            .into());
        }
        Ok(net)
    }

    pub fn descriptor(&self) -> Vec<String> {
        self.net.layers().iter().map(|l| l.to_string()).collect()
    }

    pub fn mode(&self) -> TrainMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: TrainMode) {
        self.mode = mode;
        self.net.clear_trace();
    }

    pub fn layers(&self) -> &Sequential<f32> {
        &self.net
    }

    pub fn layers_mut(&mut self) -> &mut Sequential<f32> {
        &mut self.net
    }

    pub fn parameter_count(&self) -> usize {
        self.net.parameter_count()
    }

    /// Embeds one face. Requires evaluation mode and never mutates the network.
    pub fn embed(&self, img: &FaceImage) -> Result<Embedding> {
        Ok(self.embed_batch(&[img])?.remove(0))
    }

    pub fn embed_batch(&self, images: &[&FaceImage]) -> Result<Vec<Embedding>> {
        if self.mode != TrainMode::Evaluation {
            return Err(SiameseError::State("embedding requires evaluation mode".into()));
        }
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(EMBED_CHUNK) {
            let x = images_to_tensor(chunk)?;
            let y = self.net.infer(&x)?;
            for row in y.data().chunks(EMBEDDING_DIM) {
                out.push(Embedding::from_slice(row)?);
            }
        }
        Ok(out)
    }

    /// Traced forward pass in the current mode; output is `N×5`.
    pub fn forward(&mut self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.net.forward(x, self.mode)?)
    }

    /// Back-propagates ∂loss/∂output through the last [`forward`](Self::forward).
    pub fn backward(&mut self, grad_output: &Tensor<f32>) -> Result<()> {
        self.net.backward(grad_output)?;
        Ok(())
    }

    pub fn write_checkpoint(&self, w: &mut impl Write) -> Result<()> {
        write_layers(w, self.net.layers())?;
        Ok(())
    }

    pub fn read_checkpoint(r: &mut impl Read) -> Result<Self> {
        Self::from_layers(read_layers(r)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io_err = |source| SiameseError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
        self.write_checkpoint(&mut w)?;
        w.flush().map_err(io_err)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|source| SiameseError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::read_checkpoint(&mut BufReader::new(f))
    }
}
