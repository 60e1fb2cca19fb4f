//! Toy U-structure segmentation networks with attachable cross-modal
//! attention.
//!
//! Two architectures share the machinery:
//!
//! - `unet`: conv+relu x2 per encoder level with 2x2 max pooling, a
//!   bottleneck block, and a decoder of nearest-neighbour upsampling,
//!   skip concatenation, and conv+relu x2, closed by a 1x1 sigmoid head.
//! - `mini-u2`: the same outer skeleton, but every stage is a small nested
//!   U-block (conv, pool, conv at half resolution, upsample, concat, conv),
//!   which gives "inner" attachment points inside the nested blocks and
//!   "outer" ones on the stage outputs. Decoder stages below the top also
//!   emit side outputs.
//!
//! Attachment levels count from the bottom: level 1 is the bottleneck
//! (inside its nested block for `in:`, on its output for `out:`), level i
//! is the decoder stage i-1 above it. Inserted blocks compute
//! `V' = V + attention(V)` and feed `V'` onward.
//!
//! Every parameter is initialized from its own derived stream
//! (`seed XOR fnv1a64(key)`), so the shared trunk of two configurations
//! gets identical initial weights under the same seed regardless of which
//! attachments exist.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{ecmsa_forward, EcmsaConfig, EcmsaParams};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{read_tensor, write_tensor, Tensor};
use crate::text::TextEmbedding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    #[default]
    Unet,
    MiniU2,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arch::Unet => write!(f, "unet"),
            Arch::MiniU2 => write!(f, "mini-u2"),
        }
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Arch> {
        match s {
            "unet" => Ok(Arch::Unet),
            "mini-u2" => Ok(Arch::MiniU2),
            other => Err(Error::Parse(format!("unknown architecture {:?}", other))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub arch: Arch,
    pub depth: usize,
    pub base_channels: usize,
    pub input_size: usize,
    pub d_text: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            arch: Arch::Unet,
            depth: 3,
            base_channels: 16,
            input_size: 64,
            d_text: 32,
        }
    }
}

impl NetConfig {
    /// Spatial divisibility the forward pass requires. The nested blocks of
    /// mini-u2 pool once more than the outer levels.
    pub fn spatial_factor(&self) -> usize {
        match self.arch {
            Arch::Unet => 1 << self.depth,
            Arch::MiniU2 => 1 << (self.depth + 1),
        }
    }

    /// Side length of the bottleneck feature map for the configured input.
    pub fn bottleneck_spatial(&self) -> usize {
        self.input_size >> self.depth
    }

    /// Channel count at an inner/outer attachment level.
    pub fn channels_at_level(&self, level: usize) -> usize {
        if level == 1 {
            self.base_channels << self.depth
        } else {
            self.base_channels << (self.depth - level + 1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 || self.d_text == 0 {
            return Err(Error::Validation(
                "depth, base_channels and d_text must be positive".into(),
            ));
        }
        if self.input_size == 0 || self.input_size % self.spatial_factor() != 0 {
            return Err(Error::Validation(format!(
                "input size {} is not divisible by the pooling factor {}",
                self.input_size,
                self.spatial_factor()
            )));
        }
        Ok(())
    }
}

/// Which attachment points carry an attention block.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AttachmentSpec {
    pub inner: std::collections::BTreeSet<usize>,
    pub outer: std::collections::BTreeSet<usize>,
}

impl AttachmentSpec {
    pub fn is_empty(&self) -> bool {
        self.inner.is_empty() && self.outer.is_empty()
    }
}

impl fmt::Display for AttachmentSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        for (name, set) in [("in", &self.inner), ("out", &self.outer)] {
            if set.is_empty() {
                continue;
            }
            let lo = *set.iter().next().unwrap();
            let hi = *set.iter().last().unwrap();
            debug_assert_eq!(set.len(), hi - lo + 1, "attachment sets are contiguous");
            if lo == hi {
                parts.push(format!("{}:{}", name, lo));
            } else {
                parts.push(format!("{}:{}-{}", name, lo, hi));
            }
        }
        write!(f, "{}", parts.join("|"))
    }
}

fn parse_range(spec: &str) -> Result<std::collections::BTreeSet<usize>> {
    let bad = || Error::Parse(format!("bad attachment range {:?}", spec));
    let (lo, hi) = match spec.split_once('-') {
        Some((a, b)) => (
            a.parse::<usize>().map_err(|_| bad())?,
            b.parse::<usize>().map_err(|_| bad())?,
        ),
        None => {
            let v = spec.parse::<usize>().map_err(|_| bad())?;
            (v, v)
        }
    };
    if lo == 0 || hi < lo {
        return Err(Error::Parse(format!(
            "attachment levels are 1-based ascending, got {:?}",
            spec
        )));
    }
    Ok((lo..=hi).collect())
}

/// Parse `[in:<i|i-j>][|out:<i|i-j>]`; the empty string is the text-free
/// baseline. Level bounds against the network depth are checked at build
/// time.
pub fn parse_attachment(s: &str) -> Result<AttachmentSpec> {
    let mut spec = AttachmentSpec::default();
    if s.trim().is_empty() {
        return Ok(spec);
    }
    for segment in s.split('|') {
        let (side, range) = segment
            .split_once(':')
            .ok_or_else(|| Error::Parse(format!("bad attachment segment {:?}", segment)))?;
        let target = match side {
            "in" => &mut spec.inner,
            "out" => &mut spec.outer,
            other => {
                return Err(Error::Parse(format!(
                    "unknown attachment side {:?} (expected in/out)",
                    other
                )))
            }
        };
        if !target.is_empty() {
            return Err(Error::Parse(format!(
                "attachment side {:?} given twice in {:?}",
                side, s
            )));
        }
        *target = parse_range(range)?;
    }
    Ok(spec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Side {
    In,
    Out,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Side::In => write!(f, "in"),
            Side::Out => write!(f, "out"),
        }
    }
}

/// One inserted attention block.
#[derive(Debug, Clone)]
pub struct EcmsaBlock {
    pub key: String,
    pub params: EcmsaParams,
    pub cfg: EcmsaConfig,
}

impl EcmsaBlock {
    fn apply(&self, x: &Tensor, f2: &TextEmbedding) -> Result<Tensor> {
        let (out, _) = ecmsa_forward(x, f2, &self.params, &self.cfg)?;
        Ok(out)
    }
}

#[derive(Debug, Clone)]
struct ConvLayer {
    key: String,
    w: Tensor,
    b: Tensor,
    padding: usize,
}

impl ConvLayer {
    fn init(key: String, c_in: usize, c_out: usize, k: usize, seed: u64) -> ConvLayer {
        let fan_in = c_in * k * k;
        let fan_out = c_out * k * k;
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut rng = Rng::derive(seed, &format!("{}/w", key));
        ConvLayer {
            w: Tensor::param_uniform(&[c_out, c_in, k, k], -a, a, &mut rng),
            b: Tensor::param_zeros(&[c_out]),
            padding: (k - 1) / 2,
            key,
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv2d(&self.w, &self.b, self.padding)
    }

    fn collect(&self, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{}/w", self.key), self.w.clone()));
        out.push((format!("{}/b", self.key), self.b.clone()));
    }
}

/// conv3x3 + relu, twice.
#[derive(Debug, Clone)]
struct ConvBlock {
    c1: ConvLayer,
    c2: ConvLayer,
}

impl ConvBlock {
    fn init(key: &str, c_in: usize, c_out: usize, seed: u64) -> ConvBlock {
        ConvBlock {
            c1: ConvLayer::init(format!("{}/c1", key), c_in, c_out, 3, seed),
            c2: ConvLayer::init(format!("{}/c2", key), c_out, c_out, 3, seed),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.c2.forward(&self.c1.forward(x)?.relu()?)?.relu()
    }

    fn collect(&self, out: &mut Vec<(String, Tensor)>) {
        self.c1.collect(out);
        self.c2.collect(out);
    }
}

/// The nested block of mini-u2: conv at full stage resolution, a pooled
/// conv (the block's inner bottom, where `in:` attention attaches), then
/// upsample, concatenate and fuse.
#[derive(Debug, Clone)]
struct UBlock {
    pre: ConvLayer,
    down: ConvLayer,
    post: ConvLayer,
}

impl UBlock {
    fn init(key: &str, c_in: usize, c_out: usize, seed: u64) -> UBlock {
        UBlock {
            pre: ConvLayer::init(format!("{}/pre", key), c_in, c_out, 3, seed),
            down: ConvLayer::init(format!("{}/down", key), c_out, c_out, 3, seed),
            post: ConvLayer::init(format!("{}/post", key), 2 * c_out, c_out, 3, seed),
        }
    }

    fn forward(&self, x: &Tensor, attach: Option<(&EcmsaBlock, &TextEmbedding)>) -> Result<Tensor> {
        let a = self.pre.forward(x)?.relu()?;
        let mut m = self.down.forward(&a.max_pool_2x2()?)?.relu()?;
        if let Some((block, f2)) = attach {
            m = block.apply(&m, f2)?;
        }
        let u = m.upsample_nearest_2x()?;
        self.post
            .forward(&Tensor::concat_channels(&[a, u])?)?
            .relu()
    }

    fn collect(&self, out: &mut Vec<(String, Tensor)>) {
        self.pre.collect(out);
        self.down.collect(out);
        self.post.collect(out);
    }
}

#[derive(Debug, Clone)]
enum Body {
    Unet {
        enc: Vec<ConvBlock>,
        bottleneck: ConvBlock,
        dec: Vec<ConvBlock>,
    },
    MiniU2 {
        enc: Vec<UBlock>,
        bottleneck: UBlock,
        dec: Vec<UBlock>,
        aux_heads: Vec<ConvLayer>,
    },
}

/// Network output: the full-resolution mask plus any side outputs
/// (mini-u2 decoder stages below the top).
#[derive(Debug, Clone)]
pub struct SaliencyOutput {
    pub mask: Tensor,
    pub aux_masks: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Network {
    cfg: NetConfig,
    attach: AttachmentSpec,
    body: Body,
    head: ConvLayer,
    ecmsa: BTreeMap<(Side, usize), EcmsaBlock>,
}

/// Build a network with freshly initialized parameters.
pub fn build(
    cfg: &NetConfig,
    attach: &AttachmentSpec,
    ecmsa_cfg: &EcmsaConfig,
    seed: u64,
) -> Result<Network> {
    cfg.validate()?;
    for level in attach.inner.iter().chain(attach.outer.iter()) {
        if *level < 1 || *level > cfg.depth {
            return Err(Error::Validation(format!(
                "attachment level {} is outside 1..={}",
                level, cfg.depth
            )));
        }
    }
    if cfg.arch == Arch::Unet && !attach.outer.is_empty() {
        return Err(Error::Validation(
            "outer attachments require the mini-u2 architecture".into(),
        ));
    }

    let b = cfg.base_channels;
    let depth = cfg.depth;
    let enc_io = |level: usize| {
        let c_in = if level == 1 { 3 } else { b << (level - 2) };
        (c_in, b << (level - 1))
    };
    let dec_io = |stage: usize| {
        let below = b << (depth - stage + 1);
        let skip = b << (depth - stage);
        (below + skip, b << (depth - stage))
    };

    let body = match cfg.arch {
        Arch::Unet => {
            let enc = (1..=depth)
                .map(|l| {
                    let (ci, co) = enc_io(l);
                    ConvBlock::init(&format!("enc{}", l), ci, co, seed)
                })
                .collect();
            let bottleneck =
                ConvBlock::init("bottleneck", b << (depth - 1), b << depth, seed);
            let dec = (1..=depth)
                .map(|s| {
                    let (ci, co) = dec_io(s);
                    ConvBlock::init(&format!("dec{}", s), ci, co, seed)
                })
                .collect();
            Body::Unet {
                enc,
                bottleneck,
                dec,
            }
        }
        Arch::MiniU2 => {
            let enc = (1..=depth)
                .map(|l| {
                    let (ci, co) = enc_io(l);
                    UBlock::init(&format!("enc{}", l), ci, co, seed)
                })
                .collect();
            let bottleneck = UBlock::init("bottleneck", b << (depth - 1), b << depth, seed);
            let dec: Vec<UBlock> = (1..=depth)
                .map(|s| {
                    let (ci, co) = dec_io(s);
                    UBlock::init(&format!("dec{}", s), ci, co, seed)
                })
                .collect();
            let aux_heads = (1..depth)
                .map(|s| ConvLayer::init(format!("aux{}", s), b << (depth - s), 1, 1, seed))
                .collect();
            Body::MiniU2 {
                enc,
                bottleneck,
                dec,
                aux_heads,
            }
        }
    };
    let head = ConvLayer::init("head".to_owned(), b, 1, 1, seed);

    let mut ecmsa = BTreeMap::new();
    for (side, levels) in [(Side::In, &attach.inner), (Side::Out, &attach.outer)] {
        for &level in levels {
            let key = format!("{}:{}", side, level);
            let c = cfg.channels_at_level(level);
            let mut rng = Rng::derive(seed, &format!("ecmsa/{}", key));
            ecmsa.insert(
                (side, level),
                EcmsaBlock {
                    key,
                    params: EcmsaParams::init(c, cfg.d_text, &mut rng),
                    cfg: *ecmsa_cfg,
                },
            );
        }
    }

    Ok(Network {
        cfg: cfg.clone(),
        attach: attach.clone(),
        body,
        head,
        ecmsa,
    })
}

impl Network {
    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn attachment(&self) -> &AttachmentSpec {
        &self.attach
    }

    /// The inserted attention blocks, keyed "in:1", "out:2", ...
    pub fn ecmsa_blocks(&self) -> impl Iterator<Item = &EcmsaBlock> {
        self.ecmsa.values()
    }

    pub fn ecmsa_block(&self, key: &str) -> Option<&EcmsaBlock> {
        self.ecmsa.values().find(|b| b.key == key)
    }

    /// All parameter tensors with stable keys, in a fixed order.
    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        match &self.body {
            Body::Unet {
                enc,
                bottleneck,
                dec,
            } => {
                for block in enc {
                    block.collect(&mut out);
                }
                bottleneck.collect(&mut out);
                for block in dec {
                    block.collect(&mut out);
                }
            }
            Body::MiniU2 {
                enc,
                bottleneck,
                dec,
                aux_heads,
            } => {
                for block in enc {
                    block.collect(&mut out);
                }
                bottleneck.collect(&mut out);
                for block in dec {
                    block.collect(&mut out);
                }
                for head in aux_heads {
                    head.collect(&mut out);
                }
            }
        }
        self.head.collect(&mut out);
        for block in self.ecmsa.values() {
            for (rel, t) in block.params.params() {
                out.push((format!("ecmsa/{}/{}", block.key, rel), t));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    fn apply_attach(
        &self,
        side: Side,
        level: usize,
        x: Tensor,
        f2: Option<&TextEmbedding>,
    ) -> Result<Tensor> {
        match self.ecmsa.get(&(side, level)) {
            Some(block) => {
                let f2 = f2.expect("forward validated the embedding presence");
                block.apply(&x, f2)
            }
            None => Ok(x),
        }
    }

    /// Run the network. `f2` must be present exactly when attachments exist
    /// (a text-free baseline ignores any embedding passed to it).
    pub fn forward(&self, image: &Tensor, f2: Option<&TextEmbedding>) -> Result<SaliencyOutput> {
        if image.rank() != 3 || image.shape()[0] != 3 {
            return Err(Error::Shape {
                op: "net_forward",
                detail: format!("expected a [3,H,W] image, got {:?}", image.shape()),
            });
        }
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let factor = self.cfg.spatial_factor();
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::Shape {
                op: "net_forward",
                detail: format!("{}x{} input is not divisible by {}", h, w, factor),
            });
        }
        if !self.attach.is_empty() && f2.is_none() {
            return Err(Error::Usage(
                "this network has attention attachments and needs a text embedding".into(),
            ));
        }
        if let Some(f2) = f2 {
            if !self.attach.is_empty() && f2.dim != self.cfg.d_text {
                return Err(Error::Shape {
                    op: "net_forward",
                    detail: format!(
                        "embedding dim {} but the network expects {}",
                        f2.dim, self.cfg.d_text
                    ),
                });
            }
        }

        let depth = self.cfg.depth;
        match &self.body {
            Body::Unet {
                enc,
                bottleneck,
                dec,
            } => {
                let mut skips = Vec::with_capacity(depth);
                let mut x = image.clone();
                for block in enc {
                    let features = block.forward(&x)?;
                    x = features.max_pool_2x2()?;
                    skips.push(features);
                }
                x = bottleneck.forward(&x)?;
                x = self.apply_attach(Side::In, 1, x, f2)?;
                for (idx, block) in dec.iter().enumerate() {
                    let up = x.upsample_nearest_2x()?;
                    let cat = Tensor::concat_channels(&[skips[depth - 1 - idx].clone(), up])?;
                    x = block.forward(&cat)?;
                    let level = idx + 2;
                    if level <= depth {
                        x = self.apply_attach(Side::In, level, x, f2)?;
                    }
                }
                let mask = self.head.forward(&x)?.sigmoid()?;
                Ok(SaliencyOutput {
                    mask,
                    aux_masks: Vec::new(),
                })
            }
            Body::MiniU2 {
                enc,
                bottleneck,
                dec,
                aux_heads,
            } => {
                let inner = |level: usize| -> Option<(&EcmsaBlock, &TextEmbedding)> {
                    match (self.ecmsa.get(&(Side::In, level)), f2) {
                        (Some(block), Some(f2)) => Some((block, f2)),
                        _ => None,
                    }
                };
                let mut skips = Vec::with_capacity(depth);
                let mut x = image.clone();
                for block in enc {
                    let features = block.forward(&x, None)?;
                    x = features.max_pool_2x2()?;
                    skips.push(features);
                }
                x = bottleneck.forward(&x, inner(1))?;
                x = self.apply_attach(Side::Out, 1, x, f2)?;
                let mut aux_masks = Vec::new();
                for (idx, block) in dec.iter().enumerate() {
                    let up = x.upsample_nearest_2x()?;
                    let cat = Tensor::concat_channels(&[skips[depth - 1 - idx].clone(), up])?;
                    let level = idx + 2;
                    x = block.forward(&cat, if level <= depth { inner(level) } else { None })?;
                    if level <= depth {
                        x = self.apply_attach(Side::Out, level, x, f2)?;
                    }
                    let stage = idx + 1;
                    if stage < depth {
                        let mut side = aux_heads[stage - 1].forward(&x)?;
                        for _ in 0..(depth - stage) {
                            side = side.upsample_nearest_2x()?;
                        }
                        aux_masks.push(side.sigmoid()?);
                    }
                }
                let mask = self.head.forward(&x)?.sigmoid()?;
                Ok(SaliencyOutput { mask, aux_masks })
            }
        }
    }

    /// Serialize the configuration and all parameters.
    ///
    /// Layout: magic `SALCKPT1`, u64 header length, JSON header (config,
    /// attachment, attention switches, key manifest), then each tensor in
    /// the flat binary format, in key order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let params = self.params();
        let header = CheckpointHeader {
            version: 1,
            net: self.cfg.clone(),
            attachment: self.attach.to_string(),
            ecmsa: self.ecmsa_cfg(),
            keys: params.iter().map(|(k, _)| k.clone()).collect(),
        };
        let header_bytes = serde_json::to_vec(&header)?;
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(b"SALCKPT1")?;
        out.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        out.write_all(&header_bytes)?;
        for (_, t) in &params {
            write_tensor(&mut out, t)?;
        }
        out.flush()?;
        Ok(())
    }

    fn ecmsa_cfg(&self) -> EcmsaConfig {
        self.ecmsa
            .values()
            .next()
            .map(|b| b.cfg)
            .unwrap_or_default()
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    net: NetConfig,
    attachment: String,
    ecmsa: EcmsaConfig,
    keys: Vec<String>,
}

/// Load a checkpoint written by [`Network::save`].
pub fn load(path: &Path) -> Result<Network> {
    let file = std::fs::File::open(path)?;
    let mut reader = std::io::BufReader::new(file);
    let mut magic = [0u8; 8];
    reader.read_exact(&mut magic)?;
    if &magic != b"SALCKPT1" {
        return Err(Error::Parse("not a checkpoint file".into()));
    }
    let mut len = [0u8; 8];
    reader.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut header_bytes = vec![0u8; len];
    reader.read_exact(&mut header_bytes)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;
    if header.version != 1 {
        return Err(Error::Parse(format!(
            "unsupported checkpoint version {}",
            header.version
        )));
    }
    let attach = parse_attachment(&header.attachment)?;
    let net = build(&header.net, &attach, &header.ecmsa, 0)?;
    let params = net.params();
    if header.keys != params.iter().map(|(k, _)| k.clone()).collect::<Vec<_>>() {
        return Err(Error::Parse(
            "checkpoint key manifest does not match the configuration".into(),
        ));
    }
    for (key, t) in &params {
        let stored = read_tensor(&mut reader)?;
        if stored.shape() != t.shape() {
            return Err(Error::Parse(format!(
                "checkpoint tensor {:?} has shape {:?}, expected {:?}",
                key,
                stored.shape(),
                t.shape()
            )));
        }
        t.data_mut().copy_from_slice(&stored.data());
    }
    Ok(net)
}
