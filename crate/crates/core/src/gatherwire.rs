//! Framing for the batched client <-> gathering-proxy protocol.
//!
//! Every frame is `u32 BE payload length || u8 type || payload`. Control
//! frames (REQUEST, MANIFEST, END, ERROR) carry canonical JSON: sorted keys,
//! no insignificant whitespace. RESOURCE frames are binary:
//!
//! ```text
//! u16 url_len || url || u16 status || u16 seq || u32 fetch_ms
//!     || u32 header_len || header_block || body
//! ```
//!
//! `seq` numbers the chunks of one resource; its high bit marks the final
//! chunk. All integers are big-endian.

use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};

/// Maximum payload length of a single frame.
pub const MAX_PAYLOAD: usize = 16 * 1024 * 1024;

const HEADER_LEN: usize = 5;
const FINAL_CHUNK: u16 = 0x8000;
/// Fixed part of a RESOURCE payload: url_len, status, seq, fetch_ms, header_len.
const RESOURCE_FIXED: usize = 2 + 2 + 2 + 4 + 4;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("frame payload of {0} bytes exceeds the {MAX_PAYLOAD} byte cap")]
    FrameTooLarge(usize),
    #[error("unknown frame type 0x{0:02x}")]
    UnknownType(u8),
    #[error("stream ended inside a frame ({0} bytes pending)")]
    Truncated(usize),
    #[error("malformed {kind} payload: {msg}")]
    Malformed { kind: &'static str, msg: String },
    #[error("invalid frame: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum FrameType {
    Request = 0x01,
    Manifest = 0x02,
    Resource = 0x03,
    End = 0x04,
    Error = 0x05,
}

impl TryFrom<u8> for FrameType {
    type Error = WireError;
    fn try_from(b: u8) -> Result<Self, WireError> {
        Ok(match b {
            0x01 => FrameType::Request,
            0x02 => FrameType::Manifest,
            0x03 => FrameType::Resource,
            0x04 => FrameType::End,
            0x05 => FrameType::Error,
            other => return Err(WireError::UnknownType(other)),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResourceKind {
    Html,
    Css,
    Js,
    Img,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestPayload {
    pub url: String,
    /// Client-persisted congestion window hint; 0 means none.
    pub cwnd_hint_bytes: u64,
    pub want_compression: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub url: String,
    pub kind: ResourceKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestPayload {
    pub resources: Vec<ManifestItem>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResourcePayload {
    pub url: String,
    /// HTTP status, or 0 when the proxy could not fetch the resource.
    pub status: u16,
    /// Chunk index within this url (15 bits).
    pub seq: u16,
    pub last: bool,
    pub fetch_ms: u32,
    pub header_block: Vec<u8>,
    pub body: Vec<u8>,
}

impl ResourcePayload {
    /// A complete, single-chunk resource.
    pub fn whole(url: impl Into<String>, status: u16, header_block: Vec<u8>, body: Vec<u8>, fetch_ms: u32) -> Self {
        ResourcePayload {
            url: url.into(),
            status,
            seq: 0,
            last: true,
            fetch_ms,
            header_block,
            body,
        }
    }

    fn encoded_len(&self) -> usize {
        RESOURCE_FIXED + self.url.len() + self.header_block.len() + self.body.len()
    }

    /// Splits a resource so that every chunk fits in one frame. The header
    /// block travels with the first chunk only.
    pub fn into_chunks(self) -> Result<Vec<ResourcePayload>, WireError> {
        if self.encoded_len() <= MAX_PAYLOAD {
            return Ok(vec![self]);
        }
        let first_room = MAX_PAYLOAD
            .checked_sub(RESOURCE_FIXED + self.url.len() + self.header_block.len())
            .filter(|&r| r > 0)
            .ok_or(WireError::FrameTooLarge(self.encoded_len()))?;
        let room = MAX_PAYLOAD - RESOURCE_FIXED - self.url.len();
        let mut chunks = Vec::new();
        let mut rest = &self.body[..];
        let mut seq: u16 = 0;
        let mut header = Some(self.header_block);
        loop {
            let cap = if seq == 0 { first_room } else { room };
            let take = cap.min(rest.len());
            let (head, tail) = rest.split_at(take);
            if seq >= FINAL_CHUNK {
                return Err(WireError::FrameTooLarge(self.body.len()));
            }
            chunks.push(ResourcePayload {
                url: self.url.clone(),
                status: self.status,
                seq,
                last: tail.is_empty(),
                fetch_ms: self.fetch_ms,
                header_block: header.take().unwrap_or_default(),
                body: head.to_vec(),
            });
            rest = tail;
            seq += 1;
            if rest.is_empty() {
                return Ok(chunks);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndPayload {
    pub resource_count: u64,
    pub total_body_bytes: u64,
    /// Proxy service time for the page, milliseconds.
    pub gather_ms: u64,
    /// Set when discovery stopped at a resource or byte limit.
    pub truncated: bool,
    /// Echo of the hint the proxy used for this session.
    pub cwnd_hint_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorPayload {
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GatherFrame {
    Request(RequestPayload),
    Manifest(ManifestPayload),
    Resource(ResourcePayload),
    End(EndPayload),
    Error(ErrorPayload),
}

impl GatherFrame {
    pub fn frame_type(&self) -> FrameType {
        match self {
            GatherFrame::Request(_) => FrameType::Request,
            GatherFrame::Manifest(_) => FrameType::Manifest,
            GatherFrame::Resource(_) => FrameType::Resource,
            GatherFrame::End(_) => FrameType::End,
            GatherFrame::Error(_) => FrameType::Error,
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, GatherFrame::End(_) | GatherFrame::Error(_))
    }

    fn validate(&self) -> Result<(), WireError> {
        match self {
            GatherFrame::Request(r) => {
                if !r.url.starts_with("http://") {
                    return Err(WireError::Invalid(format!("request url must be http: {}", r.url)));
                }
            }
            GatherFrame::Resource(r) => {
                if !(r.status == 0 || (100..=599).contains(&r.status)) {
                    return Err(WireError::Invalid(format!("status {}", r.status)));
                }
                if r.seq >= FINAL_CHUNK {
                    return Err(WireError::Invalid(format!("seq {} out of range", r.seq)));
                }
                if r.url.len() > u16::MAX as usize {
                    return Err(WireError::Invalid("url longer than 65535 bytes".into()));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Canonical JSON: `serde_json::Value` objects are ordered maps, so
/// round-tripping through `Value` sorts keys.
fn canonical_json<T: Serialize>(v: &T) -> Vec<u8> {
    let value = serde_json::to_value(v).expect("payload types serialize");
    serde_json::to_vec(&value).expect("value serializes")
}

fn encode_resource(r: &ResourcePayload, out: &mut Vec<u8>) {
    out.extend_from_slice(&(r.url.len() as u16).to_be_bytes());
    out.extend_from_slice(r.url.as_bytes());
    out.extend_from_slice(&r.status.to_be_bytes());
    let seq = r.seq | if r.last { FINAL_CHUNK } else { 0 };
    out.extend_from_slice(&seq.to_be_bytes());
    out.extend_from_slice(&r.fetch_ms.to_be_bytes());
    out.extend_from_slice(&(r.header_block.len() as u32).to_be_bytes());
    out.extend_from_slice(&r.header_block);
    out.extend_from_slice(&r.body);
}

/// Encodes one frame. Oversized payloads are rejected, not split; use
/// [`ResourcePayload::into_chunks`] first.
pub fn encode(frame: &GatherFrame) -> Result<Vec<u8>, WireError> {
    frame.validate()?;
    let payload = match frame {
        GatherFrame::Request(p) => canonical_json(p),
        GatherFrame::Manifest(p) => canonical_json(p),
        GatherFrame::End(p) => canonical_json(p),
        GatherFrame::Error(p) => canonical_json(p),
        GatherFrame::Resource(r) => {
            let mut v = Vec::with_capacity(r.encoded_len());
            encode_resource(r, &mut v);
            v
        }
    };
    if payload.len() > MAX_PAYLOAD {
        return Err(WireError::FrameTooLarge(payload.len()));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.push(frame.frame_type() as u8);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn malformed(kind: &'static str, msg: impl Into<String>) -> WireError {
    WireError::Malformed {
        kind,
        msg: msg.into(),
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() < n {
            return Err(malformed("resource", "payload shorter than its fields"));
        }
        let (h, t) = self.buf.split_at(n);
        self.buf = t;
        Ok(h)
    }
    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn decode_resource(payload: &[u8]) -> Result<ResourcePayload, WireError> {
    let mut c = Cursor { buf: payload };
    let url_len = c.u16()? as usize;
    let url = std::str::from_utf8(c.take(url_len)?)
        .map_err(|_| malformed("resource", "url is not utf-8"))?
        .to_string();
    let status = c.u16()?;
    let seq = c.u16()?;
    let fetch_ms = c.u32()?;
    let header_len = c.u32()? as usize;
    let header_block = c.take(header_len)?.to_vec();
    let body = c.buf.to_vec();
    Ok(ResourcePayload {
        url,
        status,
        seq: seq & !FINAL_CHUNK,
        last: seq & FINAL_CHUNK != 0,
        fetch_ms,
        header_block,
        body,
    })
}

fn decode_json<T: for<'de> Deserialize<'de>>(kind: &'static str, payload: &[u8]) -> Result<T, WireError> {
    serde_json::from_slice(payload).map_err(|e| malformed(kind, e.to_string()))
}

fn decode_payload(ty: FrameType, payload: &[u8]) -> Result<GatherFrame, WireError> {
    let frame = match ty {
        FrameType::Request => GatherFrame::Request(decode_json("request", payload)?),
        FrameType::Manifest => GatherFrame::Manifest(decode_json("manifest", payload)?),
        FrameType::End => GatherFrame::End(decode_json("end", payload)?),
        FrameType::Error => GatherFrame::Error(decode_json("error", payload)?),
        FrameType::Resource => GatherFrame::Resource(decode_resource(payload)?),
    };
    frame.validate()?;
    Ok(frame)
}

/// Incremental frame decoder for one session. Bytes may arrive in any split.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
    pos: usize,
    terminated: bool,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn feed(&mut self, bytes: &[u8]) {
        if self.pos > 0 && self.pos == self.buf.len() {
            self.buf.clear();
            self.pos = 0;
        } else if self.pos > (1 << 20) {
            self.buf.drain(..self.pos);
            self.pos = 0;
        }
        self.buf.extend_from_slice(bytes);
    }

    fn pending(&self) -> &[u8] {
        &self.buf[self.pos..]
    }

    /// Next complete frame, or `None` when more bytes are needed or a
    /// terminal frame has already been delivered.
    pub fn next_frame(&mut self) -> Result<Option<GatherFrame>, WireError> {
        if self.terminated {
            return Ok(None);
        }
        let pending = self.pending();
        if pending.len() < 4 {
            return Ok(None);
        }
        let len = u32::from_be_bytes(pending[..4].try_into().unwrap()) as usize;
        if len > MAX_PAYLOAD {
            return Err(WireError::FrameTooLarge(len));
        }
        if pending.len() < HEADER_LEN {
            return Ok(None);
        }
        let ty = FrameType::try_from(pending[4])?;
        if pending.len() < HEADER_LEN + len {
            return Ok(None);
        }
        let frame = decode_payload(ty, &pending[HEADER_LEN..HEADER_LEN + len])?;
        self.pos += HEADER_LEN + len;
        if frame.is_terminal() {
            self.terminated = true;
        }
        Ok(Some(frame))
    }

    /// True once END or ERROR has been decoded.
    pub fn is_terminated(&self) -> bool {
        self.terminated
    }

    /// Clears the terminal state so the next page on a reused connection can
    /// be decoded. Buffered bytes are kept.
    pub fn reset_session(&mut self) {
        self.terminated = false;
    }

    /// Call at end of input: bytes left inside an incomplete frame are a
    /// truncation error.
    pub fn finish(&self) -> Result<(), WireError> {
        let left = self.pending().len();
        if left > 0 && !self.terminated {
            return Err(WireError::Truncated(left));
        }
        Ok(())
    }
}

/// Decodes a complete byte stream. Yields frames in order, stops after END
/// or ERROR, and ends with an error item on malformed or truncated input.
pub fn decode_stream(bytes: &[u8]) -> impl Iterator<Item = Result<GatherFrame, WireError>> + '_ {
    let mut dec = FrameDecoder::new();
    dec.feed(bytes);
    let mut done = false;
    std::iter::from_fn(move || {
        if done {
            return None;
        }
        match dec.next_frame() {
            Ok(Some(f)) => Some(Ok(f)),
            Ok(None) => {
                done = true;
                dec.finish().err().map(Err)
            }
            Err(e) => {
                done = true;
                Some(Err(e))
            }
        }
    })
}

/// Writes one frame, chunking oversized resources.
pub async fn write_frame<W: AsyncWrite + Unpin>(w: &mut W, frame: &GatherFrame) -> Result<usize, WireError> {
    let mut written = 0;
    match frame {
        GatherFrame::Resource(r) if r.encoded_len() > MAX_PAYLOAD => {
            for chunk in r.clone().into_chunks()? {
                let bytes = encode(&GatherFrame::Resource(chunk))?;
                w.write_all(&bytes).await?;
                written += bytes.len();
            }
        }
        _ => {
            let bytes = encode(frame)?;
            w.write_all(&bytes).await?;
            written += bytes.len();
        }
    }
    Ok(written)
}

/// Reads the next frame from an async reader. `Ok(None)` on clean EOF
/// between frames (or after a terminal frame).
pub async fn read_frame<R: AsyncRead + Unpin>(
    r: &mut R,
    dec: &mut FrameDecoder,
) -> Result<Option<GatherFrame>, WireError> {
    let mut buf = vec![0u8; 64 * 1024];
    loop {
        if let Some(f) = dec.next_frame()? {
            return Ok(Some(f));
        }
        if dec.is_terminated() {
            return Ok(None);
        }
        let n = r.read(&mut buf).await?;
        if n == 0 {
            dec.finish()?;
            return Ok(None);
        }
        dec.feed(&buf[..n]);
    }
}

/// Reassembles chunked RESOURCE frames.
#[derive(Debug, Default)]
pub struct ResourceAssembler {
    partial: std::collections::HashMap<String, ResourcePayload>,
}

impl ResourceAssembler {
    /// Feeds a chunk; returns the whole resource once its final chunk arrives.
    pub fn push(&mut self, chunk: ResourcePayload) -> Result<Option<ResourcePayload>, WireError> {
        match self.partial.remove(&chunk.url) {
            None => {
                if chunk.seq != 0 {
                    return Err(WireError::Invalid(format!("chunk {} of {} without a start", chunk.seq, chunk.url)));
                }
                if chunk.last {
                    return Ok(Some(chunk));
                }
                self.partial.insert(chunk.url.clone(), chunk);
                Ok(None)
            }
            Some(mut acc) => {
                if chunk.seq != acc.seq + 1 {
                    return Err(WireError::Invalid(format!("out of order chunk for {}", chunk.url)));
                }
                acc.seq = chunk.seq;
                acc.body.extend_from_slice(&chunk.body);
                if chunk.last {
                    acc.seq = 0;
                    acc.last = true;
                    Ok(Some(acc))
                } else {
                    self.partial.insert(acc.url.clone(), acc);
                    Ok(None)
                }
            }
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TranscriptError {
    #[error("RESOURCE for {0} before any MANIFEST")]
    ResourceBeforeManifest(String),
    #[error("frame after the terminal frame")]
    AfterTerminal,
    #[error("transcript has no terminal END or ERROR")]
    NoTerminal,
    #[error("duplicate RESOURCE for {0}")]
    DuplicateResource(String),
    #[error("RESOURCE for {0} not listed in any MANIFEST")]
    Unlisted(String),
    #[error("manifest url {0} never delivered and END is not truncated")]
    Undelivered(String),
    #[error("END reports {reported} {what}, transcript has {actual}")]
    Totals {
        what: &'static str,
        reported: u64,
        actual: u64,
    },
    #[error("unexpected {0:?} frame in a proxy transcript")]
    Unexpected(FrameType),
}

/// What a well-formed proxy-side transcript delivered.
#[derive(Debug, Clone, PartialEq)]
pub struct TranscriptSummary {
    pub manifest_urls: Vec<String>,
    /// Completed resources in arrival order.
    pub delivered: Vec<String>,
    pub end: Option<EndPayload>,
    pub error: Option<ErrorPayload>,
}

/// Checks the proxy -> client frame sequence of one page session.
pub fn check_transcript(frames: &[GatherFrame]) -> Result<TranscriptSummary, TranscriptError> {
    let mut manifest: Vec<String> = Vec::new();
    let mut listed = std::collections::HashSet::new();
    let mut delivered = Vec::new();
    let mut done = std::collections::HashSet::new();
    let mut bytes: u64 = 0;
    let mut summary = TranscriptSummary {
        manifest_urls: Vec::new(),
        delivered: Vec::new(),
        end: None,
        error: None,
    };
    let mut terminal = false;
    for f in frames {
        if terminal {
            return Err(TranscriptError::AfterTerminal);
        }
        match f {
            GatherFrame::Manifest(m) => {
                for item in &m.resources {
                    if listed.insert(item.url.clone()) {
                        manifest.push(item.url.clone());
                    }
                }
            }
            GatherFrame::Resource(r) => {
                if manifest.is_empty() {
                    return Err(TranscriptError::ResourceBeforeManifest(r.url.clone()));
                }
                if !listed.contains(&r.url) {
                    return Err(TranscriptError::Unlisted(r.url.clone()));
                }
                bytes += r.body.len() as u64;
                if r.last {
                    if !done.insert(r.url.clone()) {
                        return Err(TranscriptError::DuplicateResource(r.url.clone()));
                    }
                    delivered.push(r.url.clone());
                }
            }
            GatherFrame::End(e) => {
                terminal = true;
                if e.resource_count != delivered.len() as u64 {
                    return Err(TranscriptError::Totals {
                        what: "resources",
                        reported: e.resource_count,
                        actual: delivered.len() as u64,
                    });
                }
                if e.total_body_bytes != bytes {
                    return Err(TranscriptError::Totals {
                        what: "body bytes",
                        reported: e.total_body_bytes,
                        actual: bytes,
                    });
                }
                if !e.truncated {
                    if let Some(u) = manifest.iter().find(|u| !done.contains(*u)) {
                        return Err(TranscriptError::Undelivered(u.clone()));
                    }
                }
                summary.end = Some(e.clone());
            }
            GatherFrame::Error(e) => {
                terminal = true;
                summary.error = Some(e.clone());
            }
            GatherFrame::Request(_) => return Err(TranscriptError::Unexpected(FrameType::Request)),
        }
    }
    if !terminal {
        return Err(TranscriptError::NoTerminal);
    }
    summary.manifest_urls = manifest;
    summary.delivered = delivered;
    Ok(summary)
}
