//! Complete B-cos networks: stacks of B-cos conv stages with MaxOut,
//! optional dense-style skip concatenation, global average pooling, and a
//! 1x1 B-cos classifier head. No batch norm, no ReLU, no bias anywhere, so
//! the whole network stays a composition of dynamic-linear pieces.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bcos::BcosConvLayer;
use crate::error::{HxError, Result};
use crate::tensor::{concat, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HXB1";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Real,
    Ph(usize),
    Quaternion,
}

impl Variant {
    /// Hypercomplex domain size; 1 for real weights.
    pub fn n(&self) -> usize {
        match self {
            Variant::Real => 1,
            Variant::Ph(n) => *n,
            Variant::Quaternion => 4,
        }
    }

    /// Channels the encoded 6-channel image is zero-padded to so every
    /// stage input divides by n.
    pub fn input_channels(&self) -> usize {
        match self {
            Variant::Real => 6,
            Variant::Quaternion => 8,
            Variant::Ph(n) => 6usize.div_ceil(*n) * n,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Real => write!(f, "real"),
            Variant::Ph(n) => write!(f, "ph({n})"),
            Variant::Quaternion => write!(f, "quaternion"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub b_exp: f32,
    pub maxout_units: usize,
    /// Post-maxout channel width of each conv stage.
    pub stage_widths: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub dense_connectivity: bool,
    pub input_channels: usize,
    pub num_classes: usize,
    pub image_size: usize,
}

impl ModelConfig {
    /// Desk-scale default: six 3x3 stages, two of them stride 2, widths
    /// divisible by every supported n, B = 2, MaxOut 2.
    pub fn desk(variant: Variant, num_classes: usize) -> ModelConfig {
        ModelConfig {
            variant,
            b_exp: 2.0,
            maxout_units: 2,
            stage_widths: vec![24, 24, 48, 48, 48, 48],
            stage_strides: vec![2, 1, 2, 1, 1, 1],
            dense_connectivity: false,
            input_channels: variant.input_channels(),
            num_classes,
            image_size: 64,
        }
    }

    /// Paper-scale preset: 224x224 inputs. The backbone stays the desk
    /// stack; depth at DenseNet121 scale is out of scope here.
    pub fn paper(variant: Variant, num_classes: usize) -> ModelConfig {
        ModelConfig {
            image_size: 224,
            ..ModelConfig::desk(variant, num_classes)
        }
    }

    /// Conv output channels of stage `i` (before maxout grouping).
    fn conv_out(&self, i: usize) -> usize {
        self.stage_widths[i] * self.maxout_units
    }

    /// Input channel count of every stage plus the classifier head,
    /// following the dense-connectivity concatenation rule.
    pub fn stage_in_channels(&self) -> Vec<usize> {
        let mut chain = Vec::with_capacity(self.stage_widths.len() + 1);
        let mut cin = self.input_channels;
        for (i, (&wd, &stride)) in self.stage_widths.iter().zip(&self.stage_strides).enumerate() {
            chain.push(cin);
            let _ = i;
            cin = if self.dense_connectivity && stride == 1 {
                cin + wd
            } else {
                wd
            };
        }
        chain.push(cin);
        chain
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.is_empty() {
            return Err(HxError::InvalidArgument("no conv stages".into()));
        }
        if self.stage_widths.len() != self.stage_strides.len() {
            return Err(HxError::InvalidArgument(format!(
                "{} stage widths but {} strides",
                self.stage_widths.len(),
                self.stage_strides.len()
            )));
        }
        if self.b_exp < 1.0 {
            return Err(HxError::InvalidArgument(format!(
                "B exponent must be >= 1, got {}",
                self.b_exp
            )));
        }
        if self.num_classes < 2 {
            return Err(HxError::InvalidArgument("need at least 2 classes".into()));
        }
        let n = self.variant.n();
        if self.input_channels % n != 0 {
            return Err(HxError::Divisibility {
                channels: self.input_channels,
                n,
                context: "model input channels".into(),
            });
        }
        let chain = self.stage_in_channels();
        for (i, &wd) in self.stage_widths.iter().enumerate() {
            if self.conv_out(i) % n != 0 || chain[i] % n != 0 {
                return Err(HxError::Divisibility {
                    channels: if chain[i] % n != 0 { chain[i] } else { self.conv_out(i) },
                    n,
                    context: format!("stage {i}"),
                });
            }
            if wd == 0 {
                return Err(HxError::InvalidArgument(format!("stage {i} width is 0")));
            }
        }
        for (i, &s) in self.stage_strides.iter().enumerate() {
            if s == 0 || s > 2 {
                return Err(HxError::InvalidArgument(format!(
                    "stage {i} stride {s} not in {{1, 2}}"
                )));
            }
        }
        Ok(())
    }

    fn widths_str(v: &[usize]) -> String {
        v.iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }

    /// Canonical key=value text stored in checkpoints. Key order is fixed
    /// so identical configs serialize to identical bytes.
    pub fn to_kv(&self) -> String {
        let (variant, n) = match self.variant {
            Variant::Real => ("real", 1),
            Variant::Ph(n) => ("ph", n),
            Variant::Quaternion => ("quaternion", 4),
        };
        format!(
            "variant={variant}\nn={n}\nb_exp={}\nmaxout_units={}\nstage_widths={}\nstage_strides={}\ndense_connectivity={}\ninput_channels={}\nnum_classes={}\nimage_size={}\n",
            self.b_exp,
            self.maxout_units,
            Self::widths_str(&self.stage_widths),
            Self::widths_str(&self.stage_strides),
            self.dense_connectivity,
            self.input_channels,
            self.num_classes,
            self.image_size,
        )
    }

    pub fn from_kv(text: &str) -> Result<ModelConfig> {
        let mut map = std::collections::HashMap::new();
        for line in text.lines() {
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                HxError::Checkpoint(format!("malformed config line {line:?}"))
            })?;
            map.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| -> Result<String> {
            map.get(k)
                .cloned()
                .ok_or_else(|| HxError::Checkpoint(format!("missing config key {k}")))
        };
        let parse_usize = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| HxError::Checkpoint(format!("bad integer for {k}")))
        };
        let parse_list = |k: &str| -> Result<Vec<usize>> {
            get(k)?
                .split(',')
                .map(|s| {
                    s.parse()
                        .map_err(|_| HxError::Checkpoint(format!("bad list for {k}")))
                })
                .collect()
        };
        let n = parse_usize("n")?;
        let variant = match get("variant")?.as_str() {
            "real" => Variant::Real,
            "ph" => Variant::Ph(n),
            "quaternion" => Variant::Quaternion,
            other => {
                return Err(HxError::Checkpoint(format!("unknown variant {other}")));
            }
        };
        Ok(ModelConfig {
            variant,
            b_exp: get("b_exp")?
                .parse()
                .map_err(|_| HxError::Checkpoint("bad b_exp".into()))?,
            maxout_units: parse_usize("maxout_units")?,
            stage_widths: parse_list("stage_widths")?,
            stage_strides: parse_list("stage_strides")?,
            dense_connectivity: get("dense_connectivity")? == "true",
            input_channels: parse_usize("input_channels")?,
            num_classes: parse_usize("num_classes")?,
            image_size: parse_usize("image_size")?,
        })
    }
}

/// Learnable scalar counts split by role.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelParamCount {
    /// Filter entries across the conv stages (the PH-substitutable part).
    pub stage_filters: usize,
    /// Learnable algebra entries across the conv stages.
    pub stage_algebra: usize,
    /// Classifier head entries (dense in every variant).
    pub head: usize,
}

impl ModelParamCount {
    pub fn total(&self) -> usize {
        self.stage_filters + self.stage_algebra + self.head
    }
}

pub struct Model {
    stages: Vec<BcosConvLayer>,
    head: BcosConvLayer,
    config: ModelConfig,
}

/// Intermediate activations kept alive for explanation and Grad-CAM.
pub struct ForwardTrace {
    /// Post-maxout output of every conv stage (after dense concatenation,
    /// when enabled), in stage order.
    pub stage_outputs: Vec<Tensor>,
    /// Globally averaged features feeding the classifier.
    pub pooled: Tensor,
    /// [N, num_classes]
    pub logits: Tensor,
}

impl Model {
    /// Deterministic build: same config and seed give bitwise-identical
    /// initial parameters.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chain = config.stage_in_channels();
        let n = config.variant.n();
        let mut stages = Vec::with_capacity(config.stage_widths.len());
        for (i, (&wd, &stride)) in config
            .stage_widths
            .iter()
            .zip(&config.stage_strides)
            .enumerate()
        {
            let cout = wd * config.maxout_units;
            let cin = chain[i];
            let layer = match config.variant {
                Variant::Real => BcosConvLayer::dense(
                    cout,
                    cin,
                    3,
                    3,
                    config.b_exp,
                    stride,
                    1,
                    config.maxout_units,
                    &mut rng,
                ),
                Variant::Ph(_) => BcosConvLayer::ph(
                    n,
                    cout,
                    cin,
                    3,
                    3,
                    config.b_exp,
                    stride,
                    1,
                    config.maxout_units,
                    &mut rng,
                ),
                Variant::Quaternion => BcosConvLayer::quaternion(
                    cout,
                    cin,
                    3,
                    3,
                    config.b_exp,
                    stride,
                    1,
                    config.maxout_units,
                    &mut rng,
                ),
            }?;
            stages.push(layer);
        }
        // Classifier head: dense 1x1 B-cos in every variant, so arbitrary
        // class counts stay compatible with any n.
        let head = BcosConvLayer::dense(
            config.num_classes,
            *chain.last().expect("nonempty chain"),
            1,
            1,
            config.b_exp,
            1,
            0,
            1,
            &mut rng,
        )?;
        Ok(Model {
            stages,
            head,
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn stage(&self, i: usize) -> &BcosConvLayer {
        &self.stages[i]
    }

    pub fn head(&self) -> &BcosConvLayer {
        &self.head
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 4 {
            return Err(HxError::Geometry(format!(
                "expected [N,C,H,W] input, got {:?}",
                x.shape()
            )));
        }
        if x.shape()[1] != self.config.input_channels {
            return Err(HxError::ShapeMismatch {
                left: x.shape().to_vec(),
                right: vec![
                    x.shape()[0],
                    self.config.input_channels,
                    self.config.image_size,
                    self.config.image_size,
                ],
                context: "model input channels".into(),
            });
        }
        Ok(())
    }

    /// Forward pass keeping each stage activation. Spatial size may differ
    /// from the training resolution (the network is fully convolutional);
    /// channel count must match the config.
    pub fn forward_trace(&self, x: &Tensor, frozen: bool) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let mut h = x.clone();
        let mut stage_outputs = Vec::with_capacity(self.stages.len());
        for (layer, &stride) in self.stages.iter().zip(&self.config.stage_strides) {
            let y = if frozen {
                layer.forward_frozen(&h)?
            } else {
                layer.forward(&h)?
            };
            h = if self.config.dense_connectivity && stride == 1 {
                concat(&[h, y], 1)?
            } else {
                y
            };
            stage_outputs.push(h.clone());
        }
        let pooled = h.mean_axes(&[2, 3], true)?;
        let logits4 = if frozen {
            self.head.forward_frozen(&pooled)?
        } else {
            self.head.forward(&pooled)?
        };
        let n = x.shape()[0];
        let logits = logits4.reshape(&[n, self.config.num_classes])?;
        Ok(ForwardTrace {
            stage_outputs,
            pooled,
            logits,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_trace(x, false)?.logits)
    }

    /// Forward with every |cos|^(B-1) factor detached at its value.
    pub fn forward_frozen(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_trace(x, true)?.logits)
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        use crate::bcos::LayerWeight;
        let mut out = Vec::new();
        for (i, layer) in self.stages.iter().enumerate() {
            match layer.weight() {
                LayerWeight::Dense(w) => out.push((format!("stage{i}.weight"), w.clone())),
                LayerWeight::Ph(spec) => {
                    for (j, f) in spec.filters().iter().enumerate() {
                        out.push((format!("stage{i}.filter{j}"), f.clone()));
                    }
                    if spec.mode() == crate::hypercomplex::AlgebraMode::LearnableAlgebra {
                        for (j, a) in spec.algebra().iter().enumerate() {
                            out.push((format!("stage{i}.algebra{j}"), a.clone()));
                        }
                    }
                }
            }
        }
        match self.head.weight() {
            LayerWeight::Dense(w) => out.push(("head.weight".into(), w.clone())),
            LayerWeight::Ph(_) => unreachable!("head is always dense"),
        }
        out
    }

    pub fn zero_grad(&self) {
        for p in self.params() {
            p.zero_grad();
        }
    }

    pub fn param_count(&self) -> ModelParamCount {
        let mut stage_filters = 0;
        let mut stage_algebra = 0;
        for layer in &self.stages {
            let pc = layer.param_count();
            stage_filters += pc.filters;
            stage_algebra += pc.algebra;
        }
        ModelParamCount {
            stage_filters,
            stage_algebra,
            head: self.head.param_count().filters,
        }
    }

    /// Binary checkpoint: magic "HXB1", version u16 LE, length-prefixed
    /// config text, then per-parameter records (name, rank, extents as u32
    /// LE, raw f32 LE values). Round-trips bit-exactly.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let kv = self.config.to_kv();
        out.write_all(&(kv.len() as u32).to_le_bytes())?;
        out.write_all(kv.as_bytes())?;
        for (name, t) in self.named_params() {
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            out.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                out.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in t.to_vec() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model> {
        let mut rd = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        rd.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(HxError::Checkpoint(format!(
                "bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
            )));
        }
        let mut v2 = [0u8; 2];
        rd.read_exact(&mut v2)?;
        let version = u16::from_le_bytes(v2);
        if version != CHECKPOINT_VERSION {
            return Err(HxError::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mut len4 = [0u8; 4];
        rd.read_exact(&mut len4)?;
        let kv_len = u32::from_le_bytes(len4) as usize;
        let mut kv = vec![0u8; kv_len];
        rd.read_exact(&mut kv)?;
        let config = ModelConfig::from_kv(
            std::str::from_utf8(&kv)
                .map_err(|_| HxError::Checkpoint("config text is not UTF-8".into()))?,
        )?;

        let model = Model::build(config, 0)?;
        let mut remaining: std::collections::HashMap<String, Tensor> =
            model.named_params().into_iter().collect();
        loop {
            let mut name_len = [0u8; 4];
            match rd.read_exact(&mut name_len) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e.into()),
            }
            let mut name = vec![0u8; u32::from_le_bytes(name_len) as usize];
            rd.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| HxError::Checkpoint("parameter name is not UTF-8".into()))?;
            rd.read_exact(&mut len4)?;
            let rank = u32::from_le_bytes(len4) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                rd.read_exact(&mut len4)?;
                shape.push(u32::from_le_bytes(len4) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut raw = vec![0u8; numel * 4];
            rd.read_exact(&mut raw)?;
            let values: Vec<f32> = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();

            let target = remaining.remove(&name).ok_or_else(|| {
                HxError::Checkpoint(format!("unexpected parameter {name}"))
            })?;
            if target.shape() != shape {
                return Err(HxError::Checkpoint(format!(
                    "parameter {name}: shape {shape:?} does not match model {:?}",
                    target.shape()
                )));
            }
            target.update_data(|d| d.copy_from_slice(&values));
        }
        if !remaining.is_empty() {
            let mut names: Vec<&String> = remaining.keys().collect();
            names.sort();
            return Err(HxError::Checkpoint(format!(
                "checkpoint missing parameters: {names:?}"
            )));
        }
        Ok(model)
    }
}
