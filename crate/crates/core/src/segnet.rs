//! U-Net for single-channel short-axis slices with a 4-class softmax head.
//!
//! Encoder level `i` runs a conv block at `input_size / 2^i` with
//! `min(base · 2^i, cap)` channels and then max-pools; the bottleneck block
//! runs at `input_size / 2^depth`. Each decoder level upsamples bilinearly,
//! concatenates the encoder skip of the same resolution and runs a conv
//! block. A 1×1 convolution produces the class logits.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Class, Grid, LabelMask};
use crate::nn::{
    concat_channels, softmax_channels, split_channels, BatchNorm2d, Buffer, Conv2d, MaxPool2, Mode, Param, Relu,
    Tensor, UpsampleBilinear2,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub input_size: usize,
    /// Encoder levels (pooling steps).
    pub depth: usize,
    pub base_channels: usize,
    pub channel_cap: usize,
    pub num_classes: usize,
    /// Seed for weight initialization.
    pub init_seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            input_size: 512,
            depth: 7,
            base_channels: 16,
            channel_cap: 512,
            num_classes: Class::COUNT,
            init_seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 || self.channel_cap == 0 {
            return Err(Error::Config(
                "depth, base_channels and channel_cap must be positive".into(),
            ));
        }
        if self.num_classes != Class::COUNT {
            return Err(Error::Config(format!(
                "num_classes must be {}, got {}",
                Class::COUNT,
                self.num_classes
            )));
        }
        let stride = 1usize
            .checked_shl(self.depth as u32)
            .ok_or_else(|| Error::Config(format!("depth {} is too large", self.depth)))?;
        if self.input_size == 0 || !self.input_size.is_multiple_of(stride) {
            return Err(Error::Config(format!(
                "input size {} is not divisible by 2^{} = {stride}",
                self.input_size, self.depth
            )));
        }
        Ok(())
    }

    /// Channels of encoder level `level` (level == depth is the bottleneck).
    pub fn channels_at(&self, level: usize) -> usize {
        let doubled = self
            .base_channels
            .checked_shl(level as u32)
            .unwrap_or(usize::MAX);
        doubled.min(self.channel_cap)
    }

    /// Spatial side length at each level, input first, bottleneck last.
    pub fn resolutions(&self) -> Vec<usize> {
        (0..=self.depth).map(|l| self.input_size >> l).collect()
    }
}

/// Two [conv 3×3 → batch norm → ReLU] stages.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    relu1: Relu,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    relu2: Relu,
}

impl ConvBlock {
    fn new(name: &str, in_ch: usize, out_ch: usize, rng: &mut ChaCha8Rng) -> ConvBlock {
        // Batch norm supplies the shift, so the convolutions carry no bias.
        ConvBlock {
            conv1: Conv2d::new(&format!("{name}.conv1"), in_ch, out_ch, 3, false, rng),
            bn1: BatchNorm2d::new(&format!("{name}.bn1"), out_ch),
            relu1: Relu::default(),
            conv2: Conv2d::new(&format!("{name}.conv2"), out_ch, out_ch, 3, false, rng),
            bn2: BatchNorm2d::new(&format!("{name}.bn2"), out_ch),
            relu2: Relu::default(),
        }
    }

    fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let y = self.conv1.forward(x, mode);
        let y = self.bn1.forward(&y, mode);
        let y = self.relu1.forward(y, mode);
        let y = self.conv2.forward(&y, mode);
        let y = self.bn2.forward(&y, mode);
        self.relu2.forward(y, mode)
    }

    fn backward(&mut self, dy: Tensor) -> Tensor {
        let g = self.relu2.backward(dy);
        let g = self.bn2.backward(&g);
        let g = self.conv2.backward(&g);
        let g = self.relu1.backward(g);
        let g = self.bn1.backward(&g);
        self.conv1.backward(&g)
    }

    fn out_channels(&self) -> usize {
        self.conv2.out_ch
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.conv1.weight,
            &mut self.bn1.gamma,
            &mut self.bn1.beta,
            &mut self.conv2.weight,
            &mut self.bn2.gamma,
            &mut self.bn2.beta,
        ]
    }

    fn params(&self) -> Vec<&Param> {
        vec![
            &self.conv1.weight,
            &self.bn1.gamma,
            &self.bn1.beta,
            &self.conv2.weight,
            &self.bn2.gamma,
            &self.bn2.beta,
        ]
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer> {
        vec![
            &mut self.bn1.running_mean,
            &mut self.bn1.running_var,
            &mut self.bn2.running_mean,
            &mut self.bn2.running_var,
        ]
    }

    fn buffers(&self) -> Vec<&Buffer> {
        vec![
            &self.bn1.running_mean,
            &self.bn1.running_var,
            &self.bn2.running_mean,
            &self.bn2.running_var,
        ]
    }
}

#[derive(Debug, Clone)]
pub struct UNet {
    config: NetConfig,
    encoders: Vec<ConvBlock>,
    pools: Vec<MaxPool2>,
    bottleneck: ConvBlock,
    upsamples: Vec<UpsampleBilinear2>,
    /// Indexed by level, like `encoders`.
    decoders: Vec<ConvBlock>,
    head: Conv2d,
}

/// Network outputs for one batch.
#[derive(Debug, Clone)]
pub struct SegmentationOutput {
    /// Softmax probabilities, `num_classes` channels.
    pub probabilities: Tensor,
    /// Per-image argmax masks.
    pub masks: Vec<LabelMask>,
}

pub fn build_network(config: NetConfig) -> Result<UNet> {
    UNet::new(config)
}

impl UNet {
    pub fn new(config: NetConfig) -> Result<UNet> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut encoders = Vec::with_capacity(config.depth);
        let mut in_ch = 1;
        for level in 0..config.depth {
            let out = config.channels_at(level);
            encoders.push(ConvBlock::new(&format!("enc{level}"), in_ch, out, &mut rng));
            in_ch = out;
        }
        let bottleneck = ConvBlock::new("bottleneck", in_ch, config.channels_at(config.depth), &mut rng);
        let mut decoders: Vec<Option<ConvBlock>> = (0..config.depth).map(|_| None).collect();
        let mut below = config.channels_at(config.depth);
        for level in (0..config.depth).rev() {
            let skip = config.channels_at(level);
            decoders[level] = Some(ConvBlock::new(&format!("dec{level}"), skip + below, skip, &mut rng));
            below = skip;
        }
        let head = Conv2d::new("head", config.channels_at(0), config.num_classes, 1, true, &mut rng);
        Ok(UNet {
            config,
            encoders,
            pools: vec![MaxPool2::default(); config.depth],
            bottleneck,
            upsamples: vec![UpsampleBilinear2::default(); config.depth],
            decoders: decoders.into_iter().flatten().collect(),
            head,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    /// Number of decoder levels that consume an encoder skip connection.
    pub fn skip_connections(&self) -> usize {
        self.decoders.len()
    }

    /// Logits for a batch of `[n, 1, s, s]` images.
    pub fn forward_logits(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let s = self.config.input_size;
        if x.c != 1 || x.h != s || x.w != s || x.n == 0 {
            return Err(Error::Argument(format!(
                "network expects [n>=1, 1, {s}, {s}] input, got {:?}",
                x.shape()
            )));
        }
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut h = x.clone();
        for (enc, pool) in self.encoders.iter_mut().zip(&mut self.pools) {
            let y = enc.forward(&h, mode);
            h = pool.forward(&y, mode);
            skips.push(y);
        }
        h = self.bottleneck.forward(&h, mode);
        for level in (0..self.config.depth).rev() {
            let up = self.upsamples[level].forward(&h, mode);
            let cat = concat_channels(&skips[level], &up);
            h = self.decoders[level].forward(&cat, mode);
        }
        Ok(self.head.forward(&h, mode))
    }

    /// Backpropagates logit gradients from the last training-mode forward,
    /// accumulating into parameter gradients.
    pub fn backward(&mut self, dlogits: &Tensor) {
        let mut g = self.head.backward(dlogits);
        let mut skip_grads: Vec<Option<Tensor>> = (0..self.config.depth).map(|_| None).collect();
        for level in 0..self.config.depth {
            let dcat = self.decoders[level].backward(g);
            let skip_ch = self.encoders[level].out_channels();
            let (dskip, dup) = split_channels(&dcat, skip_ch);
            skip_grads[level] = Some(dskip);
            g = self.upsamples[level].backward(&dup);
        }
        g = self.bottleneck.backward(g);
        for level in (0..self.config.depth).rev() {
            let mut dy = self.pools[level].backward(&g);
            let dskip = skip_grads[level].take().expect("skip gradient");
            for (a, b) in dy.data.iter_mut().zip(&dskip.data) {
                *a += b;
            }
            g = self.encoders[level].backward(dy);
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<SegmentationOutput> {
        let logits = self.forward_logits(x, Mode::Eval)?;
        let probabilities = softmax_channels(&logits);
        let masks = argmax_masks(&probabilities);
        Ok(SegmentationOutput {
            probabilities,
            masks,
        })
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for b in &mut self.encoders {
            out.extend(b.params_mut());
        }
        out.extend(self.bottleneck.params_mut());
        for b in &mut self.decoders {
            out.extend(b.params_mut());
        }
        out.push(&mut self.head.weight);
        if let Some(bias) = &mut self.head.bias {
            out.push(bias);
        }
        out
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for b in &self.encoders {
            out.extend(b.params());
        }
        out.extend(self.bottleneck.params());
        for b in &self.decoders {
            out.extend(b.params());
        }
        out.push(&self.head.weight);
        if let Some(bias) = &self.head.bias {
            out.push(bias);
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Buffer> {
        let mut out = Vec::new();
        for b in &mut self.encoders {
            out.extend(b.buffers_mut());
        }
        out.extend(self.bottleneck.buffers_mut());
        for b in &mut self.decoders {
            out.extend(b.buffers_mut());
        }
        out
    }

    pub fn buffers(&self) -> Vec<&Buffer> {
        let mut out = Vec::new();
        for b in &self.encoders {
            out.extend(b.buffers());
        }
        out.extend(self.bottleneck.buffers());
        for b in &self.decoders {
            out.extend(b.buffers());
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        write_checkpoint(&mut w, self).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Loads weights into this network; the stored configuration must match.
    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        let ckpt = read_checkpoint(path)?;
        if ckpt.header.config != self.config {
            return Err(Error::Checkpoint(format!(
                "{} holds a network for {:?}, expected {:?}",
                path.display(),
                ckpt.header.config,
                self.config
            )));
        }
        ckpt.apply(self, path)
    }

    /// Rebuilds a network from the configuration stored in the checkpoint.
    pub fn from_checkpoint(path: &Path) -> Result<UNet> {
        let ckpt = read_checkpoint(path)?;
        let mut net = UNet::new(ckpt.header.config)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        ckpt.apply(&mut net, path)?;
        Ok(net)
    }
}

pub fn argmax_masks(probabilities: &Tensor) -> Vec<LabelMask> {
    let hw = probabilities.plane();
    (0..probabilities.n)
        .map(|i| {
            let img = probabilities.image(i);
            let labels: Vec<u8> = (0..hw)
                .map(|p| {
                    let mut best = 0;
                    for k in 1..probabilities.c {
                        if img[k * hw + p] > img[best * hw + p] {
                            best = k;
                        }
                    }
                    best as u8
                })
                .collect();
            LabelMask::new(
                Grid::from_vec(probabilities.w, probabilities.h, labels).expect("mask dimensions"),
            )
            .expect("argmax over 4 classes")
        })
        .collect()
}

const MAGIC: &[u8; 8] = b"LVTQNET\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    config: NetConfig,
    tensors: Vec<TensorEntry>,
}

struct Checkpoint {
    header: CheckpointHeader,
    data: Vec<Vec<f32>>,
}

impl Checkpoint {
    fn apply(self, net: &mut UNet, path: &Path) -> Result<()> {
        let mismatch = |what: &str| Error::Checkpoint(format!("{}: {what}", path.display()));
        let n_params = net.params().len();
        let expected = n_params + net.buffers().len();
        if self.header.tensors.len() != expected {
            return Err(mismatch("tensor count does not match the network"));
        }
        let mut entries = self.header.tensors.iter().zip(self.data);
        for p in net.params_mut() {
            let (entry, values) = entries.next().expect("counted above");
            if entry.name != p.name || values.len() != p.value.len() {
                return Err(mismatch(&format!("unexpected tensor {}", entry.name)));
            }
            p.value = values;
        }
        for b in net.buffers_mut() {
            let (entry, values) = entries.next().expect("counted above");
            if entry.name != b.name || values.len() != b.value.len() {
                return Err(mismatch(&format!("unexpected tensor {}", entry.name)));
            }
            b.value = values;
        }
        Ok(())
    }
}

fn write_checkpoint<W: Write>(w: &mut W, net: &UNet) -> std::io::Result<()> {
    let params = net.params();
    let buffers = net.buffers();
    let mut tensors: Vec<TensorEntry> = params
        .iter()
        .map(|p| TensorEntry {
            name: p.name.clone(),
            shape: p.shape.clone(),
            len: p.value.len(),
        })
        .collect();
    tensors.extend(buffers.iter().map(|b| TensorEntry {
        name: b.name.clone(),
        shape: vec![b.value.len()],
        len: b.value.len(),
    }));
    let header = serde_json::to_vec(&CheckpointHeader {
        config: net.config,
        tensors,
    })
    .map_err(std::io::Error::other)?;
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    let values = params
        .iter()
        .map(|p| &p.value)
        .chain(buffers.iter().map(|b| &b.value));
    for v in values {
        for x in v.iter() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let corrupt = |what: &str| Error::Checkpoint(format!("{}: {what}", path.display()));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| corrupt("truncated header"))?;
    if &magic != MAGIC {
        return Err(corrupt("not a network checkpoint"));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(|_| corrupt("truncated header"))?;
    let version = u32::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(corrupt(&format!("unsupported format version {version}")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|_| corrupt("truncated header"))?;
    let header_len = u64::from_le_bytes(len) as usize;
    if header_len > 64 << 20 {
        return Err(corrupt("header too large"));
    }
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes).map_err(|_| corrupt("truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&header_bytes).map_err(|e| corrupt(&format!("bad header: {e}")))?;
    let mut data = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let mut bytes = vec![0u8; t.len * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| corrupt(&format!("truncated tensor {}", t.name)))?;
        data.push(
            bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
        );
    }
    Ok(Checkpoint { header, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(input_size: usize, depth: usize, base: usize) -> NetConfig {
        NetConfig {
            input_size,
            depth,
            base_channels: base,
            channel_cap: 512,
            ..NetConfig::default()
        }
    }

    #[test]
    fn resolution_chain() {
        let c = NetConfig::default();
        assert_eq!(c.resolutions(), vec![512, 256, 128, 64, 32, 16, 8, 4]);
        assert_eq!(*small(128, 5, 16).resolutions().last().unwrap(), 4);
    }

    #[test]
    fn channels_double_until_cap() {
        let c = NetConfig::default();
        let ch: Vec<usize> = (0..=7).map(|l| c.channels_at(l)).collect();
        assert_eq!(ch, vec![16, 32, 64, 128, 256, 512, 512, 512]);
    }

    #[test]
    fn indivisible_input_is_config_error() {
        assert!(matches!(UNet::new(small(100, 3, 4)), Err(Error::Config(_))));
        let bad = NetConfig {
            num_classes: 3,
            ..small(64, 3, 4)
        };
        assert!(matches!(UNet::new(bad), Err(Error::Config(_))));
    }

    #[test]
    fn wrong_input_shape_is_argument_error() {
        let mut net = UNet::new(small(32, 2, 2)).unwrap();
        let x = Tensor::zeros(1, 1, 16, 16);
        assert!(matches!(net.forward(&x), Err(Error::Argument(_))));
    }

    #[test]
    fn checkpoint_with_other_depth_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bin");
        UNet::new(small(32, 2, 2)).unwrap().save_weights(&path).unwrap();
        let mut other = UNet::new(small(32, 3, 2)).unwrap();
        assert!(matches!(other.load_weights(&path), Err(Error::Checkpoint(_))));
        std::fs::write(&path, b"garbage").unwrap();
        assert!(matches!(UNet::from_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}
