//! Synthetic traces with planted attention structure.
//!
//! Every head starts from i.i.d. Gaussian Q/K/V (`noise_std`) and then gets
//! an archetype-specific signal whose logit contribution is roughly
//! `signal_strength`:
//!
//! * `sink`: the first four keys and every query share a direction.
//! * `recency`: rotary-style phases with Cauchy-distributed frequencies, so
//!   the expected query-key alignment decays as `exp(-rate * distance)`.
//! * `content`: a random `important_fraction` of tokens get keys along a
//!   topic direction that all queries carry; their values carry an
//!   independent marker direction.
//! * `mixed`: all three at one third of the strength each.
//!
//! The latent structure of a head (sink direction, rotary frequencies, topic
//! and marker) is drawn from `spec.seed`, so every trace of a set shares it
//! the way a real head's projections are shared across inputs. Noise and the
//! planted positions come from the per-trace seed.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Cauchy, Distribution, StandardNormal};

use crate::error::{KvpError, Result};
use crate::par::Exec;
use crate::rng::{self, StreamRng};
use crate::trace::{save_trace, write_manifest, Trace, TraceHeader, MANIFEST_NAME};

pub const SINK_TOKENS: usize = 4;
/// Decay rate of the recency archetype's expected alignment per token.
pub const RECENCY_RATE: f64 = 0.05;
pub const CONFIG_NAME: &str = "synth.cfg";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Archetype {
    Sink,
    Recency,
    Content,
    Mixed,
}

impl Archetype {
    pub fn name(self) -> &'static str {
        match self {
            Archetype::Sink => "sink",
            Archetype::Recency => "recency",
            Archetype::Content => "content",
            Archetype::Mixed => "mixed",
        }
    }
}

impl FromStr for Archetype {
    type Err = KvpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sink" => Ok(Archetype::Sink),
            "recency" => Ok(Archetype::Recency),
            "content" => Ok(Archetype::Content),
            "mixed" => Ok(Archetype::Mixed),
            other => Err(KvpError::Usage(format!("unknown archetype {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub archetype: Archetype,
    pub seq_len: usize,
    pub head_dim: usize,
    pub n_layers: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub signal_strength: f64,
    pub important_fraction: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            archetype: Archetype::Content,
            seq_len: 256,
            head_dim: 32,
            n_layers: 1,
            n_q_heads: 2,
            n_kv_heads: 1,
            signal_strength: 4.0,
            important_fraction: 0.1,
            noise_std: 1.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        TraceHeader::new(self.n_layers, self.n_q_heads, self.n_kv_heads, self.head_dim, self.seq_len)?;
        if !(self.important_fraction > 0.0 && self.important_fraction < 1.0) {
            return Err(KvpError::Validation(format!("important_fraction {} outside (0, 1)", self.important_fraction)));
        }
        // zero strength is allowed as the no-signal control
        if !(self.signal_strength >= 0.0 && self.signal_strength.is_finite()) {
            return Err(KvpError::Validation(format!("signal_strength {} must be >= 0", self.signal_strength)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(KvpError::Validation(format!("noise_std {} must be >= 0", self.noise_std)));
        }
        Ok(())
    }

    /// Plain `key=value` lines, one per field.
    pub fn to_config(&self) -> String {
        self.to_string()
    }

    pub fn from_config(text: &str) -> Result<Self> {
        let mut spec = SynthSpec::default();
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| KvpError::Validation(format!("config line {line:?} is not key=value")))?;
            spec.set(k.trim(), v.trim())?;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn set(&mut self, key: &str, val: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, val: &str) -> Result<T> {
            val.parse().map_err(|_| KvpError::Validation(format!("bad value {val:?} for {key}")))
        }
        match key {
            "archetype" => self.archetype = val.parse()?,
            "seq_len" => self.seq_len = parse(key, val)?,
            "head_dim" => self.head_dim = parse(key, val)?,
            "n_layers" => self.n_layers = parse(key, val)?,
            "n_q_heads" => self.n_q_heads = parse(key, val)?,
            "n_kv_heads" => self.n_kv_heads = parse(key, val)?,
            "signal_strength" => self.signal_strength = parse(key, val)?,
            "important_fraction" => self.important_fraction = parse(key, val)?,
            "noise_std" => self.noise_std = parse(key, val)?,
            "seed" => self.seed = parse(key, val)?,
            other => return Err(KvpError::Validation(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn planted_count(&self) -> usize {
        ((self.important_fraction * self.seq_len as f64).round() as usize).clamp(1, self.seq_len)
    }
}

impl fmt::Display for SynthSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "archetype={}", self.archetype.name())?;
        writeln!(f, "seq_len={}", self.seq_len)?;
        writeln!(f, "head_dim={}", self.head_dim)?;
        writeln!(f, "n_layers={}", self.n_layers)?;
        writeln!(f, "n_q_heads={}", self.n_q_heads)?;
        writeln!(f, "n_kv_heads={}", self.n_kv_heads)?;
        writeln!(f, "signal_strength={}", self.signal_strength)?;
        writeln!(f, "important_fraction={}", self.important_fraction)?;
        writeln!(f, "noise_std={}", self.noise_std)?;
        writeln!(f, "seed={}", self.seed)
    }
}

/// A generated trace plus the planted token sets, indexed
/// `layer * n_kv_heads + kv_head` (empty for archetypes without planting).
#[derive(Debug, Clone)]
pub struct SynthTrace {
    pub trace: Trace,
    pub planted: Vec<Vec<usize>>,
}

fn gaussian(r: &mut StreamRng, std: f64) -> f64 {
    let z: f64 = StandardNormal.sample(r);
    z * std
}

fn unit_vector(r: &mut StreamRng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| gaussian(r, 1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn add_scaled(dst: &mut [f32], dir: &[f64], scale: f64) {
    for (x, u) in dst.iter_mut().zip(dir) {
        *x += (scale * u) as f32;
    }
}

/// Latent-stream tag, distinct from the per-trace `[layer, head]` streams.
const LATENT_TAG: u64 = 0x1A7E;

pub fn gen_trace(spec: &SynthSpec, trace_seed: u64) -> Result<SynthTrace> {
    spec.validate()?;
    let (t, d, g) = (spec.seq_len, spec.head_dim, spec.n_q_heads / spec.n_kv_heads);
    let header = TraceHeader::new(spec.n_layers, spec.n_q_heads, spec.n_kv_heads, d, t)?;
    let mut q = vec![0f32; header.q_len()];
    let mut k = vec![0f32; header.kv_len()];
    let mut v = vec![0f32; header.kv_len()];
    let mut planted_all = Vec::new();

    let (w_sink, w_recency, w_content) = match spec.archetype {
        Archetype::Sink => (1.0, 0.0, 0.0),
        Archetype::Recency => (0.0, 1.0, 0.0),
        Archetype::Content => (0.0, 0.0, 1.0),
        Archetype::Mixed => (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0),
    };
    let root_d = (d as f64).sqrt();

    for layer in 0..spec.n_layers {
        for kvh in 0..spec.n_kv_heads {
            let mut latent = rng::stream(spec.seed, &[layer as u64, kvh as u64, LATENT_TAG]);
            let mut r = rng::stream(trace_seed, &[layer as u64, kvh as u64]);
            let block = t * d;
            let kv_off = (layer * spec.n_kv_heads + kvh) * block;
            let q_off = (layer * spec.n_q_heads + kvh * g) * block;
            let ks = &mut k[kv_off..kv_off + block];
            let vs = &mut v[kv_off..kv_off + block];
            let qs = &mut q[q_off..q_off + g * block];
            for x in ks.iter_mut().chain(vs.iter_mut()).chain(qs.iter_mut()) {
                *x = gaussian(&mut r, spec.noise_std) as f32;
            }

            // q.k / sqrt(d) ~ strength when both carry amplitude sqrt(strength * sqrt(d))
            let amp = |w: f64| (w * spec.signal_strength * root_d).sqrt();

            if w_sink > 0.0 {
                let dir = unit_vector(&mut latent, d);
                let a = amp(w_sink);
                for i in 0..SINK_TOKENS.min(t) {
                    add_scaled(&mut ks[i * d..(i + 1) * d], &dir, a);
                }
                for row in qs.chunks_exact_mut(d) {
                    add_scaled(row, &dir, a);
                }
            }

            if w_recency > 0.0 && d >= 2 {
                let pairs = d / 2;
                let cauchy = Cauchy::new(0.0, RECENCY_RATE).expect("positive scale");
                let freqs: Vec<f64> = (0..pairs).map(|_| cauchy.sample(&mut latent)).collect();
                // sum over pairs of a^2 cos(theta * dist) / sqrt(d) ~ strength at dist 0
                let a = (w_recency * spec.signal_strength * root_d / pairs as f64).sqrt();
                let phase = |pos: usize, row: &mut [f32]| {
                    for (m, th) in freqs.iter().enumerate() {
                        let (s, c) = (th * pos as f64).sin_cos();
                        row[2 * m] += (a * c) as f32;
                        row[2 * m + 1] += (a * s) as f32;
                    }
                };
                for i in 0..t {
                    phase(i, &mut ks[i * d..(i + 1) * d]);
                }
                for gi in 0..g {
                    for j in 0..t {
                        let off = (gi * t + j) * d;
                        phase(j, &mut qs[off..off + d]);
                    }
                }
            }

            let mut planted = Vec::new();
            if w_content > 0.0 {
                let topic = unit_vector(&mut latent, d);
                let marker = unit_vector(&mut latent, d);
                let a = amp(w_content);
                planted = index::sample(&mut r, t, spec.planted_count()).into_vec();
                planted.sort_unstable();
                for &i in &planted {
                    add_scaled(&mut ks[i * d..(i + 1) * d], &topic, a);
                    add_scaled(&mut vs[i * d..(i + 1) * d], &marker, a);
                }
                for row in qs.chunks_exact_mut(d) {
                    add_scaled(row, &topic, a);
                }
            }
            planted_all.push(planted);
        }
    }
    Ok(SynthTrace { trace: Trace::new(header, q, k, v, None)?, planted: planted_all })
}

/// Writes `count` traces with per-trace seeds and a manifest whose last 20%
/// (rounded down) is the test split. Returns the manifest path.
pub fn gen_traceset(spec: &SynthSpec, count: usize, out_dir: &Path, exec: Exec) -> Result<PathBuf> {
    spec.validate()?;
    fs::create_dir_all(out_dir)?;
    let names: Vec<String> = (0..count).map(|i| format!("trace_{i:04}.kvtr")).collect();
    let jobs: Vec<usize> = (0..count).collect();
    let results = exec.map(&jobs, |&i| -> Result<()> {
        let st = gen_trace(spec, trace_seed(spec, i))?;
        save_trace(&st.trace, &out_dir.join(&names[i]))?;
        Ok(())
    });
    results.into_iter().collect::<Result<Vec<_>>>()?;
    let n_test = count / 5;
    let (train, test) = names.split_at(count - n_test);
    let manifest = out_dir.join(MANIFEST_NAME);
    write_manifest(&manifest, train, test)?;
    fs::write(out_dir.join(CONFIG_NAME), spec.to_config())?;
    Ok(manifest)
}

/// Planted set of one head, as generated.
pub fn planted_of(st: &SynthTrace, layer: usize, kv_head: usize) -> &[usize] {
    &st.planted[layer * st.trace.n_kv_heads() + kv_head]
}

/// Seed of the `index`-th trace written by [`gen_traceset`].
pub fn trace_seed(spec: &SynthSpec, index: usize) -> u64 {
    rng::derive_seed(spec.seed, &[index as u64])
}

/// Copy of `spec` with another seed.
pub fn with_seed(spec: &SynthSpec, seed: u64) -> SynthSpec {
    SynthSpec { seed, ..spec.clone() }
}

/// Random K/V/Q buffers for a single head, for latency measurement.
pub fn random_head(seq_len: usize, head_dim: usize, group: usize, seed: u64) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut r = rng::stream(seed, &[0xBE7C]);
    let mut fill = |len: usize| (0..len).map(|_| r.random_range(-1.0f32..1.0)).collect::<Vec<_>>();
    let k = fill(seq_len * head_dim);
    let v = fill(seq_len * head_dim);
    let q = fill(group * seq_len * head_dim);
    (k, v, q)
}
