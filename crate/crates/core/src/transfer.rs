//! Bit-exact checkpoint serialization, conv-stack transplantation with
//! freezing, and the end-to-end source-train / transfer / baseline
//! protocol.
//!
//! # Checkpoint format (version 1)
//!
//! ```text
//! magic                  b"SNET"
//! version                u16 LE = 1          -+
//! num_classes            u32 LE               |
//! layer_count            u32 LE               |
//! per layer:                                  |
//!   record_len           u32 LE               | CRC-32 covers
//!   kind                 u8 (1 conv, 2 maxpool2, 3 relu, 4 flatten,
//!                            5 dense)         | this region
//!   conv:  oc,ic,k,stride,padding u32 LE x5, frozen u8, rho f64 LE,
//!          mask_seed u64 LE                   |
//!   dense: out,in u32 LE x2, frozen u8, rho f64 LE, mask_seed u64 LE
//! per masked layer (stack order):             |
//!   mask bits packed LSB-first, row-major, padded to a byte boundary
//!   weights f64 LE row-major                  |
//!   biases  f64 LE                           -+
//! crc32                  u32 LE (IEEE, over the region above)
//! ```

use crate::connectivity::ConnectivityMask;
use crate::data::{DataError, Dataset};
use crate::network::{
    build_paper_architecture, Layer, Network, NetworkError, SparseConvLayer, SparseDenseLayer,
};
use crate::tensor::{Shape, Tensor};
use crate::training::{train, SgdConfig, TrainError, TrainingLog};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;
use thiserror::Error;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SNET";
pub const CHECKPOINT_VERSION: u16 = 1;

const KIND_CONV: u8 = 1;
const KIND_MAXPOOL2: u8 = 2;
const KIND_RELU: u8 = 3;
const KIND_FLATTEN: u8 = 4;
const KIND_DENSE: u8 = 5;

#[derive(Debug, Error)]
pub enum TransferError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("file too short to be a checkpoint")]
    Truncated,
    #[error("bad magic bytes (not a checkpoint file)")]
    BadMagic,
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("unsupported checkpoint version {0}")]
    VersionMismatch(u16),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("conv stack mismatch at conv layer {index}: {detail}")]
    ConvStackMismatch { index: usize, detail: String },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
}

// ---------------------------------------------------------------------------
// CRC-32 (IEEE, reflected)

const fn crc32_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        let mut crc = i as u32;
        let mut bit = 0;
        while bit < 8 {
            crc = if crc & 1 != 0 { (crc >> 1) ^ 0xEDB8_8320 } else { crc >> 1 };
            bit += 1;
        }
        table[i] = crc;
        i += 1;
    }
    table
}

static CRC_TABLE: [u32; 256] = crc32_table();

pub fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc = (crc >> 8) ^ CRC_TABLE[((crc ^ b as u32) & 0xFF) as usize];
    }
    !crc
}

// ---------------------------------------------------------------------------
// Bit packing

fn pack_bits(bits: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b != 0 {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

fn unpack_bits(bytes: &[u8], n: usize) -> Vec<u8> {
    (0..n).map(|i| (bytes[i / 8] >> (i % 8)) & 1).collect()
}

// ---------------------------------------------------------------------------
// Serialization

fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Mask bits, weights, and biases of one masked layer, exactly as stored
/// in the checkpoint payload.
fn layer_payload(mask: &ConnectivityMask, weights: &Tensor, bias: &Tensor) -> Vec<u8> {
    let mut out = pack_bits(mask.bits());
    push_f64s(&mut out, weights.data());
    push_f64s(&mut out, bias.data());
    out
}

/// Serialize a network to checkpoint bytes.
pub fn to_bytes(net: &Network) -> Vec<u8> {
    let mut body = Vec::new();
    body.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    body.extend_from_slice(&(net.num_classes() as u32).to_le_bytes());
    body.extend_from_slice(&(net.layers().len() as u32).to_le_bytes());

    for layer in net.layers() {
        let mut rec = Vec::new();
        match layer {
            Layer::Conv(l) => {
                rec.push(KIND_CONV);
                for dim in [
                    l.out_channels(),
                    l.in_channels(),
                    l.kernel_size(),
                    l.stride(),
                    l.padding(),
                ] {
                    rec.extend_from_slice(&(dim as u32).to_le_bytes());
                }
                rec.push(u8::from(l.frozen()));
                rec.extend_from_slice(&l.rho().to_le_bytes());
                rec.extend_from_slice(&l.mask().seed().to_le_bytes());
            }
            Layer::MaxPool2 => rec.push(KIND_MAXPOOL2),
            Layer::Relu => rec.push(KIND_RELU),
            Layer::Flatten => rec.push(KIND_FLATTEN),
            Layer::Dense(l) => {
                rec.push(KIND_DENSE);
                for dim in [l.out_dim(), l.in_dim()] {
                    rec.extend_from_slice(&(dim as u32).to_le_bytes());
                }
                rec.push(u8::from(l.frozen()));
                rec.extend_from_slice(&l.rho().to_le_bytes());
                rec.extend_from_slice(&l.mask().seed().to_le_bytes());
            }
        }
        body.extend_from_slice(&(rec.len() as u32).to_le_bytes());
        body.extend_from_slice(&rec);
    }

    for layer in net.layers() {
        match layer {
            Layer::Conv(l) => body.extend(layer_payload(l.mask(), l.weights(), l.bias())),
            Layer::Dense(l) => body.extend(layer_payload(l.mask(), l.weights(), l.bias())),
            _ => {}
        }
    }

    let mut out = Vec::with_capacity(4 + body.len() + 4);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&body);
    out.extend_from_slice(&crc32(&body).to_le_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TransferError> {
        if self.pos + n > self.bytes.len() {
            return Err(TransferError::Malformed(format!(
                "record overruns buffer at offset {}",
                self.pos
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8, TransferError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, TransferError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, TransferError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, TransferError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, TransferError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, TransferError> {
        let raw = self.take(n * 8)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

enum LayerRecord {
    Conv { oc: usize, ic: usize, k: usize, stride: usize, padding: usize, frozen: bool, rho: f64, seed: u64 },
    MaxPool2,
    Relu,
    Flatten,
    Dense { out: usize, din: usize, frozen: bool, rho: f64, seed: u64 },
}

/// Deserialize checkpoint bytes back into a network, validating the
/// checksum, version, descriptor arithmetic, and the masked-weights-zero
/// invariant.
pub fn from_bytes(bytes: &[u8]) -> Result<Network, TransferError> {
    // magic + version + num_classes + layer_count + crc
    if bytes.len() < 4 + 2 + 4 + 4 + 4 {
        return Err(TransferError::Truncated);
    }
    if bytes[..4] != CHECKPOINT_MAGIC {
        return Err(TransferError::BadMagic);
    }
    let body = &bytes[4..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32(body);
    if stored != computed {
        return Err(TransferError::ChecksumMismatch { stored, computed });
    }

    let mut cur = Cursor { bytes: body, pos: 0 };
    let version = cur.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(TransferError::VersionMismatch(version));
    }
    let num_classes = cur.u32()? as usize;
    let layer_count = cur.u32()? as usize;

    let mut records = Vec::with_capacity(layer_count);
    for i in 0..layer_count {
        let rec_len = cur.u32()? as usize;
        let start = cur.pos;
        let kind = cur.u8()?;
        let record = match kind {
            KIND_CONV => {
                let oc = cur.u32()? as usize;
                let ic = cur.u32()? as usize;
                let k = cur.u32()? as usize;
                let stride = cur.u32()? as usize;
                let padding = cur.u32()? as usize;
                let frozen = cur.u8()? != 0;
                let rho = cur.f64()?;
                let seed = cur.u64()?;
                LayerRecord::Conv { oc, ic, k, stride, padding, frozen, rho, seed }
            }
            KIND_MAXPOOL2 => LayerRecord::MaxPool2,
            KIND_RELU => LayerRecord::Relu,
            KIND_FLATTEN => LayerRecord::Flatten,
            KIND_DENSE => {
                let out = cur.u32()? as usize;
                let din = cur.u32()? as usize;
                let frozen = cur.u8()? != 0;
                let rho = cur.f64()?;
                let seed = cur.u64()?;
                LayerRecord::Dense { out, din, frozen, rho, seed }
            }
            other => {
                return Err(TransferError::Malformed(format!(
                    "layer {i}: unknown kind tag {other}"
                )))
            }
        };
        if cur.pos - start != rec_len {
            return Err(TransferError::Malformed(format!(
                "layer {i}: record length {rec_len} does not match content"
            )));
        }
        records.push(record);
    }

    // Conv channel chain and adjacent dense dims must line up.
    let mut prev_conv_oc: Option<usize> = None;
    let mut prev_dense_out: Option<usize> = None;
    for (i, rec) in records.iter().enumerate() {
        match rec {
            LayerRecord::Conv { oc, ic, .. } => {
                if let Some(prev) = prev_conv_oc {
                    if *ic != prev {
                        return Err(TransferError::Malformed(format!(
                            "layer {i}: conv expects {ic} input channels after {prev}"
                        )));
                    }
                }
                prev_conv_oc = Some(*oc);
            }
            LayerRecord::Dense { out, din, .. } => {
                if let Some(prev) = prev_dense_out {
                    if *din != prev {
                        return Err(TransferError::Malformed(format!(
                            "layer {i}: dense expects {din} inputs after {prev}"
                        )));
                    }
                }
                prev_dense_out = Some(*out);
            }
            _ => {}
        }
    }

    let mut layers = Vec::with_capacity(layer_count);
    for (i, rec) in records.iter().enumerate() {
        let layer = match *rec {
            LayerRecord::MaxPool2 => Layer::MaxPool2,
            LayerRecord::Relu => Layer::Relu,
            LayerRecord::Flatten => Layer::Flatten,
            LayerRecord::Conv { oc, ic, k, stride, padding, frozen, rho, seed } => {
                let dims = [oc, ic, k, k];
                let (mask, weights, bias) =
                    read_payload(&mut cur, &dims, oc, seed, i)?;
                let mut l = SparseConvLayer::new(weights, bias, mask, stride, padding, rho)?;
                l.set_frozen(frozen);
                Layer::Conv(l)
            }
            LayerRecord::Dense { out, din, frozen, rho, seed } => {
                let dims = [out, din];
                let (mask, weights, bias) = read_payload(&mut cur, &dims, out, seed, i)?;
                let mut l = SparseDenseLayer::new(weights, bias, mask, rho)?;
                l.set_frozen(frozen);
                Layer::Dense(l)
            }
        };
        layers.push(layer);
    }
    if cur.pos != body.len() {
        return Err(TransferError::Malformed(format!(
            "{} trailing bytes after payload",
            body.len() - cur.pos
        )));
    }

    Ok(Network::new(layers, num_classes)?)
}

fn read_payload(
    cur: &mut Cursor<'_>,
    weight_dims: &[usize],
    bias_len: usize,
    seed: u64,
    layer_index: usize,
) -> Result<(ConnectivityMask, Tensor, Tensor), TransferError> {
    let shape = Shape::new(weight_dims)
        .map_err(|e| TransferError::Malformed(format!("layer {layer_index}: {e}")))?;
    let numel = shape.numel();
    let packed = cur.take(numel.div_ceil(8))?;
    let bits = unpack_bits(packed, numel);
    let mask = ConnectivityMask::from_bits(shape.clone(), bits, seed)
        .map_err(|e| TransferError::Malformed(format!("layer {layer_index}: {e}")))?;
    let weights = cur.f64s(numel)?;
    for (j, (&w, &b)) in weights.iter().zip(mask.bits()).enumerate() {
        if b == 0 && w != 0.0 {
            return Err(TransferError::Malformed(format!(
                "layer {layer_index}: masked-out weight {j} is {w}, expected 0"
            )));
        }
    }
    let bias = cur.f64s(bias_len)?;
    let weights = Tensor::from_vec(shape, weights)
        .map_err(|e| TransferError::Malformed(format!("layer {layer_index}: {e}")))?;
    let bias = Tensor::from_vec(
        Shape::new(&[bias_len]).expect("bias shape"),
        bias,
    )
    .map_err(|e| TransferError::Malformed(format!("layer {layer_index}: {e}")))?;
    Ok((mask, weights, bias))
}

pub fn save(net: &Network, path: &Path) -> Result<(), TransferError> {
    fs::write(path, to_bytes(net))
        .map_err(|source| TransferError::Io { path: path.display().to_string(), source })
}

pub fn load(path: &Path) -> Result<Network, TransferError> {
    let bytes = fs::read(path)
        .map_err(|source| TransferError::Io { path: path.display().to_string(), source })?;
    from_bytes(&bytes)
}

// ---------------------------------------------------------------------------
// Conv transfer

/// Transplant every conv layer of `source` into `target`: weights, biases,
/// AND masks travel together (the mask defines which parameters exist),
/// and the transplanted layers are frozen. Dense layers keep the target's
/// fresh masks and initialization. The conv stacks must be congruent.
pub fn transfer_conv(source: &Network, target: &mut Network) -> Result<(), TransferError> {
    let src: Vec<&SparseConvLayer> = source
        .layers()
        .iter()
        .filter_map(|l| match l {
            Layer::Conv(c) => Some(c),
            _ => None,
        })
        .collect();
    let tgt_indices: Vec<usize> = target
        .layers()
        .iter()
        .enumerate()
        .filter_map(|(i, l)| matches!(l, Layer::Conv(_)).then_some(i))
        .collect();
    if src.len() != tgt_indices.len() {
        return Err(TransferError::ConvStackMismatch {
            index: src.len().min(tgt_indices.len()),
            detail: format!("source has {} conv layers, target {}", src.len(), tgt_indices.len()),
        });
    }
    // Validate the whole stack before mutating anything.
    for (pos, (&s, &ti)) in src.iter().zip(&tgt_indices).enumerate() {
        let Layer::Conv(t) = &target.layers()[ti] else { unreachable!() };
        let s_dims = (s.out_channels(), s.in_channels(), s.kernel_size(), s.stride(), s.padding());
        let t_dims = (t.out_channels(), t.in_channels(), t.kernel_size(), t.stride(), t.padding());
        if s_dims != t_dims {
            return Err(TransferError::ConvStackMismatch {
                index: pos,
                detail: format!(
                    "source (oc, ic, k, stride, pad) = {s_dims:?} vs target {t_dims:?}"
                ),
            });
        }
    }
    for (&s, &ti) in src.iter().zip(&tgt_indices) {
        let mut transplanted = s.clone();
        transplanted.set_frozen(true);
        *target.layer_mut(ti) = Layer::Conv(transplanted);
    }
    Ok(())
}

/// SHA-256 of each conv layer's serialized payload (mask bits, weights,
/// biases), in stack order. Used to prove conv immutability across head
/// training.
pub fn conv_payload_digests(net: &Network) -> Vec<[u8; 32]> {
    net.layers()
        .iter()
        .filter_map(|l| match l {
            Layer::Conv(c) => {
                let payload = layer_payload(c.mask(), c.weights(), c.bias());
                Some(Sha256::digest(&payload).into())
            }
            _ => None,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Protocol

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProtocolSeeds {
    pub source_net: u64,
    pub target_net: u64,
    pub subsample: u64,
}

#[derive(Debug, Clone)]
pub struct ProtocolOutcome {
    pub source_net: Network,
    pub source_log: TrainingLog,
    pub transfer_net: Network,
    pub transfer_log: TrainingLog,
    pub baseline_net: Network,
    pub baseline_log: TrainingLog,
    /// The stratified subsample both target runs trained on.
    pub head_train_set: Dataset,
}

/// The three-step procedure: (1) train a source network on the source
/// domain; (2) build a target network, transplant and freeze the source's
/// conv stack, and train its head on a stratified fraction of the target
/// training set; (3) train an identically-seeded baseline from scratch on
/// the same subsample. The baseline shares the target-net seed, so dense
/// initializations and masks are identical and the comparison isolates the
/// transferred conv features.
#[allow(clippy::too_many_arguments)]
pub fn run_paper_protocol(
    source_train: &Dataset,
    source_test: &Dataset,
    target_train_fraction: f64,
    target_train: &Dataset,
    target_test: &Dataset,
    cfg_source: &SgdConfig,
    cfg_target: &SgdConfig,
    rho: f64,
    seeds: ProtocolSeeds,
) -> Result<ProtocolOutcome, TransferError> {
    let (sc, sh, sw) = source_train.image_dims();
    let (tc, th, tw) = target_train.image_dims();
    if sh != sw || th != tw {
        return Err(TransferError::Malformed(format!(
            "protocol requires square images, got {sh}x{sw} and {th}x{tw}"
        )));
    }
    if sc != tc {
        return Err(TransferError::ConvStackMismatch {
            index: 0,
            detail: format!("source has {sc} input channels, target {tc}"),
        });
    }

    let mut source_net =
        build_paper_architecture(sc, sh, source_train.num_classes(), rho, seeds.source_net)?;
    let source_log = train(&mut source_net, source_train, source_test, cfg_source)?;

    let head_train_set = target_train.subsample_stratified(target_train_fraction, seeds.subsample)?;

    let mut transfer_net =
        build_paper_architecture(tc, th, target_train.num_classes(), rho, seeds.target_net)?;
    transfer_conv(&source_net, &mut transfer_net)?;
    let transfer_log = train(&mut transfer_net, &head_train_set, target_test, cfg_target)?;

    let mut baseline_net =
        build_paper_architecture(tc, th, target_train.num_classes(), rho, seeds.target_net)?;
    let baseline_log = train(&mut baseline_net, &head_train_set, target_test, cfg_target)?;

    Ok(ProtocolOutcome {
        source_net,
        source_log,
        transfer_net,
        transfer_log,
        baseline_net,
        baseline_log,
        head_train_set,
    })
}
