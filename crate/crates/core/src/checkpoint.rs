//! `KVPA` agent checkpoints: one per (layer, kv_head).
//!
//! ```text
//! magic      "KVPA"
//! version    u16
//! layer      u16
//! kv_head    u16
//! activation u16
//! in_dim     u32
//! hidden     u32
//! stats_len  u32          = 2 * head_dim
//! mean, std  f32[stats_len] each
//! w1         f32[hidden * in_dim]
//! b1         f32[hidden]
//! w2         f32[hidden]
//! b2         f32[1]
//! ```

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{KvpError, Result};
use crate::nn::{Activation, MlpParams};
use crate::policy::{featurize, input_dim, FeatureStats, N_POS_FEATURES};
use crate::trace::HeadTraceView;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"KVPA";
pub const CHECKPOINT_VERSION: u16 = 1;
const HEADER_BYTES: usize = 24;

#[derive(Debug, Clone, PartialEq)]
pub struct AgentCheckpoint {
    pub layer: usize,
    pub kv_head: usize,
    pub stats: FeatureStats,
    pub params: MlpParams,
}

impl AgentCheckpoint {
    /// Packages trained state; values are rounded to their stored f32 form so
    /// an in-memory checkpoint behaves exactly like a reloaded one.
    pub fn new(layer: usize, kv_head: usize, stats: FeatureStats, mut params: MlpParams) -> Result<Self> {
        if params.in_dim != input_dim(stats.head_dim()) {
            return Err(KvpError::Shape(format!(
                "in_dim {} does not match stats for head_dim {}",
                params.in_dim,
                stats.head_dim()
            )));
        }
        params.round_to_f32();
        let round = |v: Vec<f64>| v.into_iter().map(|x| x as f32 as f64).collect();
        let stats = FeatureStats::new(round(stats.mean), round(stats.std))?;
        Ok(AgentCheckpoint { layer, kv_head, stats, params })
    }

    pub fn head_dim(&self) -> usize {
        self.stats.head_dim()
    }

    /// Scores for the first `n` tokens of `view`.
    pub fn scores(&self, view: &HeadTraceView<'_>, n: usize) -> Result<Vec<f64>> {
        if (view.layer, view.kv_head) != (self.layer, self.kv_head) {
            return Err(KvpError::Identity(format!(
                "checkpoint is for layer {} head {}, view is layer {} head {}",
                self.layer, self.kv_head, view.layer, view.kv_head
            )));
        }
        let feats = featurize(view, n, &self.stats)?;
        self.params.score(&feats.x)
    }

    pub fn write<W: Write>(&self, sink: &mut W) -> Result<u64> {
        let p = &self.params;
        let narrow = |v: usize, what: &str| {
            u16::try_from(v).map_err(|_| KvpError::Validation(format!("{what} = {v} does not fit u16")))
        };
        let mut buf = Vec::with_capacity(HEADER_BYTES + 4 * (2 * self.stats.mean.len() + p.param_count()));
        buf.extend_from_slice(&CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&narrow(self.layer, "layer")?.to_le_bytes());
        buf.extend_from_slice(&narrow(self.kv_head, "kv_head")?.to_le_bytes());
        buf.extend_from_slice(&p.activation.id().to_le_bytes());
        buf.extend_from_slice(&(p.in_dim as u32).to_le_bytes());
        buf.extend_from_slice(&(p.hidden as u32).to_le_bytes());
        buf.extend_from_slice(&(self.stats.mean.len() as u32).to_le_bytes());
        let tensors: [&[f64]; 6] = [&self.stats.mean, &self.stats.std, &p.w1, &p.b1, &p.w2, &p.b2];
        for t in tensors {
            for &x in t {
                buf.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        sink.write_all(&buf)?;
        Ok(buf.len() as u64)
    }

    pub fn read<R: Read>(source: &mut R) -> Result<Self> {
        let mut bytes = Vec::new();
        source.read_to_end(&mut bytes)?;
        if bytes.len() < HEADER_BYTES {
            return Err(KvpError::Length { expected: HEADER_BYTES as u64, actual: bytes.len() as u64 });
        }
        if bytes[0..4] != CHECKPOINT_MAGIC {
            return Err(KvpError::Format("bad checkpoint magic, expected \"KVPA\"".into()));
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize;
        let version = u16_at(4);
        if version != CHECKPOINT_VERSION {
            return Err(KvpError::Format(format!("unsupported checkpoint version {version}")));
        }
        let (layer, kv_head) = (u16_at(6) as usize, u16_at(8) as usize);
        let activation = Activation::from_id(u16_at(10))?;
        let (in_dim, hidden, stats_len) = (u32_at(12), u32_at(16), u32_at(20));
        if stats_len % 2 != 0 || in_dim != stats_len + N_POS_FEATURES || hidden == 0 {
            return Err(KvpError::Validation(format!(
                "inconsistent checkpoint dims in_dim={in_dim} hidden={hidden} stats_len={stats_len}"
            )));
        }
        let floats = 2 * stats_len + hidden * in_dim + 2 * hidden + 1;
        let expected = (HEADER_BYTES + 4 * floats) as u64;
        if bytes.len() as u64 != expected {
            return Err(KvpError::Length { expected, actual: bytes.len() as u64 });
        }
        let mut vals =
            bytes[HEADER_BYTES..].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
        let mut take = |len: usize| -> Vec<f64> { vals.by_ref().take(len).collect() };
        let mean = take(stats_len);
        let std = take(stats_len);
        let mut params = MlpParams::zeros(in_dim, hidden, activation);
        params.w1 = take(hidden * in_dim);
        params.b1 = take(hidden);
        params.w2 = take(hidden);
        params.b2 = take(1);
        if !params.is_finite() || mean.iter().chain(&std).any(|x| !x.is_finite()) {
            return Err(KvpError::Validation("checkpoint holds non-finite values".into()));
        }
        Ok(AgentCheckpoint { layer, kv_head, stats: FeatureStats::new(mean, std)?, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = File::open(path)?;
        Self::read(&mut f)
    }
}

/// `<root>/layer_{L}/head_{H}.kvpa`
pub fn checkpoint_path(root: &Path, layer: usize, kv_head: usize) -> PathBuf {
    root.join(format!("layer_{layer}")).join(format!("head_{kv_head}.kvpa"))
}
