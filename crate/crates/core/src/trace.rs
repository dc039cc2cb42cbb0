//! The `KVTR` trace format: per-sequence post-positional-encoding Q/K/V
//! tensors for every layer and head.
//!
//! Layout (all little-endian):
//!
//! ```text
//! magic     4 bytes  "KVTR"
//! version   u16
//! n_layers  u16
//! n_q_heads u16
//! n_kv_heads u16
//! head_dim  u16
//! seq_len   u32
//! flags     u32      bit 0: token ids present
//! Q         f32 [n_layers, n_q_heads, seq_len, head_dim]
//! K         f32 [n_layers, n_kv_heads, seq_len, head_dim]
//! V         f32 [n_layers, n_kv_heads, seq_len, head_dim]
//! token_ids u32 [seq_len]   (iff flag bit 0)
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{KvpError, Result};

pub const TRACE_MAGIC: [u8; 4] = *b"KVTR";
pub const TRACE_VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 22;
pub const FLAG_TOKEN_IDS: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.txt";
/// Manifest line separating training paths (above) from test paths (below).
pub const TEST_MARKER: &str = "#test";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceHeader {
    pub version: u16,
    pub n_layers: u16,
    pub n_q_heads: u16,
    pub n_kv_heads: u16,
    pub head_dim: u16,
    pub seq_len: u32,
    pub flags: u32,
}

impl TraceHeader {
    pub fn new(n_layers: usize, n_q_heads: usize, n_kv_heads: usize, head_dim: usize, seq_len: usize) -> Result<Self> {
        let narrow = |v: usize, what: &str| {
            u16::try_from(v).map_err(|_| KvpError::Validation(format!("{what} = {v} does not fit u16")))
        };
        let header = TraceHeader {
            version: TRACE_VERSION,
            n_layers: narrow(n_layers, "n_layers")?,
            n_q_heads: narrow(n_q_heads, "n_q_heads")?,
            n_kv_heads: narrow(n_kv_heads, "n_kv_heads")?,
            head_dim: narrow(head_dim, "head_dim")?,
            seq_len: u32::try_from(seq_len)
                .map_err(|_| KvpError::Validation(format!("seq_len = {seq_len} does not fit u32")))?,
            flags: 0,
        };
        header.validate()?;
        Ok(header)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(KvpError::Validation("n_layers must be >= 1".into()));
        }
        if self.head_dim == 0 {
            return Err(KvpError::Validation("head_dim must be >= 1".into()));
        }
        if self.n_kv_heads == 0 || self.n_q_heads == 0 {
            return Err(KvpError::Validation("head counts must be >= 1".into()));
        }
        if !self.n_q_heads.is_multiple_of(self.n_kv_heads) {
            return Err(KvpError::Validation(format!(
                "n_q_heads ({}) is not a multiple of n_kv_heads ({})",
                self.n_q_heads, self.n_kv_heads
            )));
        }
        if self.seq_len < 2 {
            return Err(KvpError::Validation(format!("seq_len = {} < 2", self.seq_len)));
        }
        Ok(())
    }

    pub fn group_size(&self) -> usize {
        (self.n_q_heads / self.n_kv_heads) as usize
    }

    pub fn has_token_ids(&self) -> bool {
        self.flags & FLAG_TOKEN_IDS != 0
    }

    pub fn q_len(&self) -> usize {
        self.n_layers as usize * self.n_q_heads as usize * self.seq_len as usize * self.head_dim as usize
    }

    pub fn kv_len(&self) -> usize {
        self.n_layers as usize * self.n_kv_heads as usize * self.seq_len as usize * self.head_dim as usize
    }

    /// Serialized size of a whole trace with this header.
    pub fn file_bytes(&self) -> u64 {
        let floats = (self.q_len() + 2 * self.kv_len()) as u64;
        let ids = if self.has_token_ids() { self.seq_len as u64 } else { 0 };
        HEADER_BYTES as u64 + 4 * floats + 4 * ids
    }

    fn to_bytes(self) -> [u8; HEADER_BYTES] {
        let mut out = [0u8; HEADER_BYTES];
        out[0..4].copy_from_slice(&TRACE_MAGIC);
        out[4..6].copy_from_slice(&self.version.to_le_bytes());
        out[6..8].copy_from_slice(&self.n_layers.to_le_bytes());
        out[8..10].copy_from_slice(&self.n_q_heads.to_le_bytes());
        out[10..12].copy_from_slice(&self.n_kv_heads.to_le_bytes());
        out[12..14].copy_from_slice(&self.head_dim.to_le_bytes());
        out[14..18].copy_from_slice(&self.seq_len.to_le_bytes());
        out[18..22].copy_from_slice(&self.flags.to_le_bytes());
        out
    }

    fn from_bytes(b: &[u8; HEADER_BYTES]) -> Result<Self> {
        if b[0..4] != TRACE_MAGIC {
            return Err(KvpError::Format(format!(
                "bad magic {:?}, expected \"KVTR\"",
                String::from_utf8_lossy(&b[0..4])
            )));
        }
        let u16_at = |o: usize| u16::from_le_bytes([b[o], b[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes([b[o], b[o + 1], b[o + 2], b[o + 3]]);
        let header = TraceHeader {
            version: u16_at(4),
            n_layers: u16_at(6),
            n_q_heads: u16_at(8),
            n_kv_heads: u16_at(10),
            head_dim: u16_at(12),
            seq_len: u32_at(14),
            flags: u32_at(18),
        };
        if header.version != TRACE_VERSION {
            return Err(KvpError::Format(format!("unsupported version {}, expected {TRACE_VERSION}", header.version)));
        }
        header.validate()?;
        Ok(header)
    }
}

/// One sequence's stored activations. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    header: TraceHeader,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    token_ids: Option<Vec<u32>>,
}

impl Trace {
    /// Builds a trace, checking extents and finiteness.
    pub fn new(
        mut header: TraceHeader,
        q: Vec<f32>,
        k: Vec<f32>,
        v: Vec<f32>,
        token_ids: Option<Vec<u32>>,
    ) -> Result<Self> {
        if token_ids.is_some() {
            header.flags |= FLAG_TOKEN_IDS;
        } else {
            header.flags &= !FLAG_TOKEN_IDS;
        }
        let trace = Self::new_unchecked(header, q, k, v, token_ids);
        trace.validate()?;
        Ok(trace)
    }

    /// Builds a trace without validation. Intended for fault-injection in
    /// tests; everything else should go through [`Trace::new`].
    #[doc(hidden)]
    pub fn new_unchecked(
        header: TraceHeader,
        q: Vec<f32>,
        k: Vec<f32>,
        v: Vec<f32>,
        token_ids: Option<Vec<u32>>,
    ) -> Self {
        Trace { header, q, k, v, token_ids }
    }

    pub fn validate(&self) -> Result<()> {
        let h = &self.header;
        h.validate()?;
        let check = |name: &str, got: usize, want: usize| {
            if got != want {
                Err(KvpError::Validation(format!("{name} has {got} entries, header implies {want}")))
            } else {
                Ok(())
            }
        };
        check("Q", self.q.len(), h.q_len())?;
        check("K", self.k.len(), h.kv_len())?;
        check("V", self.v.len(), h.kv_len())?;
        if let Some(ids) = &self.token_ids {
            check("token_ids", ids.len(), h.seq_len as usize)?;
        }
        if h.has_token_ids() != self.token_ids.is_some() {
            return Err(KvpError::Validation("token id flag disagrees with payload".into()));
        }
        for (name, t) in [("Q", &self.q), ("K", &self.k), ("V", &self.v)] {
            if let Some(pos) = t.iter().position(|x| !x.is_finite()) {
                return Err(KvpError::Validation(format!("{name}[{pos}] is not finite")));
            }
        }
        Ok(())
    }

    pub fn header(&self) -> &TraceHeader {
        &self.header
    }

    pub fn seq_len(&self) -> usize {
        self.header.seq_len as usize
    }

    pub fn n_layers(&self) -> usize {
        self.header.n_layers as usize
    }

    pub fn n_kv_heads(&self) -> usize {
        self.header.n_kv_heads as usize
    }

    pub fn head_dim(&self) -> usize {
        self.header.head_dim as usize
    }

    pub fn q(&self) -> &[f32] {
        &self.q
    }

    pub fn k(&self) -> &[f32] {
        &self.k
    }

    pub fn v(&self) -> &[f32] {
        &self.v
    }

    pub fn token_ids(&self) -> Option<&[u32]> {
        self.token_ids.as_deref()
    }

    /// Mutable Q access, for query-independence mutation tests.
    pub fn q_mut(&mut self) -> &mut [f32] {
        &mut self.q
    }

    /// Slices out one KV head and its query group without copying.
    pub fn head_view(&self, layer: usize, kv_head: usize) -> Result<HeadTraceView<'_>> {
        let h = &self.header;
        if layer >= h.n_layers as usize {
            return Err(KvpError::Bounds { what: "layer", index: layer, limit: h.n_layers as usize });
        }
        if kv_head >= h.n_kv_heads as usize {
            return Err(KvpError::Bounds { what: "kv_head", index: kv_head, limit: h.n_kv_heads as usize });
        }
        let (t, d, g) = (self.seq_len(), self.head_dim(), h.group_size());
        let head_block = t * d;
        let kv_off = (layer * h.n_kv_heads as usize + kv_head) * head_block;
        let q_off = (layer * h.n_q_heads as usize + kv_head * g) * head_block;
        Ok(HeadTraceView {
            layer,
            kv_head,
            seq_len: t,
            head_dim: d,
            group: g,
            k: &self.k[kv_off..kv_off + head_block],
            v: &self.v[kv_off..kv_off + head_block],
            q: &self.q[q_off..q_off + g * head_block],
        })
    }
}

/// Borrowed slices of one (layer, kv_head): `k`/`v` are `[seq_len, head_dim]`,
/// `q` is `[group, seq_len, head_dim]`.
#[derive(Debug, Clone, Copy)]
pub struct HeadTraceView<'a> {
    pub layer: usize,
    pub kv_head: usize,
    pub seq_len: usize,
    pub head_dim: usize,
    pub group: usize,
    pub k: &'a [f32],
    pub v: &'a [f32],
    pub q: &'a [f32],
}

impl<'a> HeadTraceView<'a> {
    /// Wraps raw buffers (e.g. synthetic K/V for latency benchmarks).
    #[allow(clippy::too_many_arguments)]
    pub fn from_slices(
        layer: usize,
        kv_head: usize,
        seq_len: usize,
        head_dim: usize,
        group: usize,
        k: &'a [f32],
        v: &'a [f32],
        q: &'a [f32],
    ) -> Result<Self> {
        let block = seq_len * head_dim;
        if head_dim == 0 || group == 0 || k.len() != block || v.len() != block || q.len() != group * block {
            return Err(KvpError::Shape(format!(
                "view buffers k={} v={} q={} do not match seq_len={seq_len} head_dim={head_dim} group={group}",
                k.len(),
                v.len(),
                q.len()
            )));
        }
        Ok(HeadTraceView { layer, kv_head, seq_len, head_dim, group, k, v, q })
    }

    pub fn key(&self, i: usize) -> &'a [f32] {
        &self.k[i * self.head_dim..(i + 1) * self.head_dim]
    }

    pub fn value(&self, i: usize) -> &'a [f32] {
        &self.v[i * self.head_dim..(i + 1) * self.head_dim]
    }

    pub fn query(&self, g: usize, j: usize) -> &'a [f32] {
        let off = (g * self.seq_len + j) * self.head_dim;
        &self.q[off..off + self.head_dim]
    }
}

/// Serializes `trace`, returning the number of bytes written.
pub fn write_trace<W: Write>(trace: &Trace, sink: &mut W) -> Result<u64> {
    trace.validate()?;
    let mut written = 0u64;
    sink.write_all(&trace.header.to_bytes())?;
    written += HEADER_BYTES as u64;

    let mut buf = Vec::with_capacity(1 << 16);
    for tensor in [&trace.q, &trace.k, &trace.v] {
        for chunk in tensor.chunks(1 << 14) {
            buf.clear();
            for x in chunk {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            sink.write_all(&buf)?;
            written += buf.len() as u64;
        }
    }
    if let Some(ids) = &trace.token_ids {
        buf.clear();
        for id in ids {
            buf.extend_from_slice(&id.to_le_bytes());
        }
        sink.write_all(&buf)?;
        written += buf.len() as u64;
    }
    Ok(written)
}

pub fn read_trace<R: Read>(source: &mut R) -> Result<Trace> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    decode_trace(&bytes)
}

fn decode_trace(bytes: &[u8]) -> Result<Trace> {
    if bytes.len() < HEADER_BYTES {
        if bytes.len() >= 4 && bytes[0..4] != TRACE_MAGIC {
            return Err(KvpError::Format("bad magic".into()));
        }
        return Err(KvpError::Length { expected: HEADER_BYTES as u64, actual: bytes.len() as u64 });
    }
    let header = TraceHeader::from_bytes(bytes[..HEADER_BYTES].try_into().expect("header slice"))?;
    let expected = header.file_bytes();
    if (bytes.len() as u64) < expected {
        return Err(KvpError::Length { expected, actual: bytes.len() as u64 });
    }
    if (bytes.len() as u64) > expected {
        return Err(KvpError::Format(format!(
            "{} trailing bytes after a {expected}-byte trace",
            bytes.len() as u64 - expected
        )));
    }

    let mut cursor = &bytes[HEADER_BYTES..];
    let mut take_f32 = |len: usize| -> Vec<f32> {
        let (head, rest) = cursor.split_at(4 * len);
        cursor = rest;
        head.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
    };
    let q = take_f32(header.q_len());
    let k = take_f32(header.kv_len());
    let v = take_f32(header.kv_len());
    let token_ids = header
        .has_token_ids()
        .then(|| cursor.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect());
    let trace = Trace::new_unchecked(header, q, k, v, token_ids);
    trace.validate()?;
    Ok(trace)
}

pub fn save_trace(trace: &Trace, path: &Path) -> Result<u64> {
    let mut w = BufWriter::new(File::create(path)?);
    let n = write_trace(trace, &mut w)?;
    w.flush()?;
    Ok(n)
}

pub fn load_trace(path: &Path) -> Result<Trace> {
    let mut r = BufReader::new(File::open(path)?);
    read_trace(&mut r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitFilter {
    Train,
    Test,
    All,
}

impl SplitFilter {
    fn admits(self, split: Split) -> bool {
        match self {
            SplitFilter::All => true,
            SplitFilter::Train => split == Split::Train,
            SplitFilter::Test => split == Split::Test,
        }
    }
}

impl std::str::FromStr for SplitFilter {
    type Err = KvpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitFilter::Train),
            "test" => Ok(SplitFilter::Test),
            "all" => Ok(SplitFilter::All),
            other => Err(KvpError::Usage(format!("unknown split {other:?} (train|test|all)"))),
        }
    }
}

/// Parsed manifest: trace paths (resolved against the manifest directory)
/// with their split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<(PathBuf, Split)>,
}

impl Manifest {
    /// Accepts either a manifest file or a directory holding `manifest.txt`.
    pub fn resolve_path(path: &Path) -> PathBuf {
        if path.is_dir() {
            path.join(MANIFEST_NAME)
        } else {
            path.to_path_buf()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let path = Self::resolve_path(path);
        let text = fs::read_to_string(&path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self::parse(&text, &base))
    }

    pub fn parse(text: &str, base: &Path) -> Self {
        let mut split = Split::Train;
        let mut entries = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line == TEST_MARKER {
                split = Split::Test;
                continue;
            }
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let p = Path::new(line);
            let p = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
            entries.push((p, split));
        }
        Manifest { entries }
    }
}

/// Writes a manifest with `train` paths, the test marker, then `test` paths.
pub fn write_manifest(path: &Path, train: &[String], test: &[String]) -> Result<()> {
    let mut text = String::from("# kvtr manifest\n");
    for p in train {
        text.push_str(p);
        text.push('\n');
    }
    if !test.is_empty() {
        text.push_str(TEST_MARKER);
        text.push('\n');
        for p in test {
            text.push_str(p);
            text.push('\n');
        }
    }
    fs::write(path, text)?;
    Ok(())
}

/// An in-memory collection of traces sharing one model geometry.
#[derive(Debug, Clone, Default)]
pub struct TraceSet {
    pub traces: Vec<Trace>,
    pub names: Vec<String>,
}

impl TraceSet {
    pub fn new(traces: Vec<Trace>) -> Result<Self> {
        let names = (0..traces.len()).map(|i| format!("trace_{i}")).collect();
        let set = TraceSet { traces, names };
        set.check_geometry()?;
        Ok(set)
    }

    pub fn load(path: &Path, filter: SplitFilter) -> Result<Self> {
        let manifest = Manifest::load(path)?;
        let mut traces = Vec::new();
        let mut names = Vec::new();
        for (p, split) in manifest.entries {
            if !filter.admits(split) {
                continue;
            }
            let trace = load_trace(&p).map_err(|e| match e {
                KvpError::Io(io) => KvpError::Io(std::io::Error::new(io.kind(), format!("{}: {io}", p.display()))),
                other => KvpError::Data(format!("{}: {other}", p.display())),
            })?;
            traces.push(trace);
            names.push(p.display().to_string());
        }
        let set = TraceSet { traces, names };
        set.check_geometry()?;
        Ok(set)
    }

    fn check_geometry(&self) -> Result<()> {
        if let Some(first) = self.traces.first() {
            let g = first.header();
            for (t, name) in self.traces.iter().zip(&self.names).skip(1) {
                let h = t.header();
                if (h.n_layers, h.n_q_heads, h.n_kv_heads, h.head_dim)
                    != (g.n_layers, g.n_q_heads, g.n_kv_heads, g.head_dim)
                {
                    return Err(KvpError::Data(format!("{name}: geometry differs from the first trace")));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    /// `(n_layers, n_kv_heads, head_dim)` of the set, if non-empty.
    pub fn geometry(&self) -> Option<(usize, usize, usize)> {
        self.traces.first().map(|t| (t.n_layers(), t.n_kv_heads(), t.head_dim()))
    }
}
