//! Binary framing.
//!
//! ```text
//! +----------------+-----+----------------------+
//! | len: u32 LE    | tag | payload (len bytes)  |
//! +----------------+-----+----------------------+
//! ```
//!
//! Integers are little-endian fixed width, booleans one byte (0 or 1), real
//! vectors a `u32` count followed by IEEE-754 `f64` little-endian values.

use std::io::Read;

use crate::error::{Error, Result};
use crate::types::{ActionDistribution, Layout, Observation, ParameterSet, Transition};

use super::Message;

pub const HEADER_LEN: usize = 5;
/// Largest accepted payload, in bytes.
pub const MAX_FRAME: usize = 16 * 1024 * 1024;

pub const TAG_HELLO: u8 = 1;
pub const TAG_RESET: u8 = 2;
pub const TAG_TRANSITION: u8 = 3;
pub const TAG_ACK: u8 = 4;
pub const TAG_WEIGHT_REQUEST: u8 = 5;
pub const TAG_WEIGHT_RESPONSE: u8 = 6;
pub const TAG_SHUTDOWN: u8 = 7;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bool(&mut self, v: bool) {
        self.u8(u8::from(v));
    }
    fn reals(&mut self, vs: &[f64]) -> Result<()> {
        let n = u32::try_from(vs.len())
            .map_err(|_| Error::Encode(format!("vector of {} reals too long", vs.len())))?;
        self.u32(n);
        for v in vs {
            self.f64(*v);
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| {
                Error::Framing(format!(
                    "payload truncated: needed {n} bytes at offset {}, have {}",
                    self.pos,
                    self.buf.len() - self.pos
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::Protocol(format!("invalid boolean byte {b:#04x}"))),
        }
    }
    fn reals(&mut self) -> Result<Vec<f64>> {
        let n = self.u32()? as usize;
        // bound the allocation by what is actually left in the buffer
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| Error::Framing("vector length overflow".into()))?;
        let raw = self.take(bytes)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Framing(format!(
                "{} trailing payload bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn tag_of(msg: &Message) -> u8 {
    match msg {
        Message::Hello { .. } => TAG_HELLO,
        Message::Reset => TAG_RESET,
        Message::Transition(_) => TAG_TRANSITION,
        Message::Ack { .. } => TAG_ACK,
        Message::WeightRequest => TAG_WEIGHT_REQUEST,
        Message::WeightResponse(_) => TAG_WEIGHT_RESPONSE,
        Message::Shutdown => TAG_SHUTDOWN,
    }
}

pub fn encode_message(msg: &Message) -> Result<Vec<u8>> {
    let mut w = Writer(vec![0; HEADER_LEN]);
    match msg {
        Message::Hello {
            worker_id,
            env_count,
        } => {
            w.u32(*worker_id);
            w.u32(*env_count);
        }
        Message::Reset | Message::WeightRequest | Message::Shutdown => {}
        Message::Transition(t) => {
            w.u32(t.worker_id);
            w.u32(t.env_index);
            w.reals(t.obs.as_slice())?;
            w.u32(t.action);
            w.f64(t.reward);
            w.bool(t.terminated);
            w.bool(t.truncated);
            w.reals(t.behavior_dist.probs())?;
            w.u64(t.behavior_version);
        }
        Message::Ack {
            stale,
            learner_version,
        } => {
            w.bool(*stale);
            w.u64(*learner_version);
        }
        Message::WeightResponse(p) => {
            let dim = |v: usize| {
                u32::try_from(v)
                    .map_err(|_| Error::Encode(format!("layout dimension {v} too large")))
            };
            w.u64(p.version);
            w.u32(dim(p.layout.obs_dim)?);
            w.u32(dim(p.layout.action_count)?);
            w.reals(&p.policy_weights)?;
            w.reals(&p.value_weights)?;
        }
    }
    let mut bytes = w.0;
    let len = bytes.len() - HEADER_LEN;
    if len > MAX_FRAME {
        return Err(Error::Encode(format!(
            "payload of {len} bytes exceeds the {MAX_FRAME}-byte frame limit"
        )));
    }
    bytes[..4].copy_from_slice(&(len as u32).to_le_bytes());
    bytes[4] = tag_of(msg);
    Ok(bytes)
}

/// Declared payload length of a frame header, validated against the limit.
pub fn payload_len(header: &[u8; HEADER_LEN]) -> Result<usize> {
    let len = u32::from_le_bytes(header[..4].try_into().unwrap()) as usize;
    if len > MAX_FRAME {
        return Err(Error::Framing(format!(
            "declared payload of {len} bytes exceeds the {MAX_FRAME}-byte limit"
        )));
    }
    Ok(len)
}

/// Decodes exactly one complete frame.
pub fn decode_message(bytes: &[u8]) -> Result<Message> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Framing(format!(
            "frame of {} bytes is shorter than the header",
            bytes.len()
        )));
    }
    let header: [u8; HEADER_LEN] = bytes[..HEADER_LEN].try_into().unwrap();
    let len = payload_len(&header)?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != len {
        return Err(Error::Framing(format!(
            "declared payload length {len} but {} bytes present",
            payload.len()
        )));
    }
    decode_payload(header[4], payload)
}

pub fn decode_payload(tag: u8, payload: &[u8]) -> Result<Message> {
    let mut r = Reader {
        buf: payload,
        pos: 0,
    };
    let msg = match tag {
        TAG_HELLO => Message::Hello {
            worker_id: r.u32()?,
            env_count: r.u32()?,
        },
        TAG_RESET => Message::Reset,
        TAG_TRANSITION => {
            let worker_id = r.u32()?;
            let env_index = r.u32()?;
            let obs = Observation::new(r.reals()?).map_err(|e| Error::Protocol(e.to_string()))?;
            let action = r.u32()?;
            let reward = r.f64()?;
            let terminated = r.bool()?;
            let truncated = r.bool()?;
            let behavior_dist =
                ActionDistribution::new(r.reals()?).map_err(|e| Error::Protocol(e.to_string()))?;
            let behavior_version = r.u64()?;
            if action as usize >= behavior_dist.len() {
                return Err(Error::Protocol(format!(
                    "action {action} outside a distribution of {} actions",
                    behavior_dist.len()
                )));
            }
            if !reward.is_finite() {
                return Err(Error::Protocol(format!("non-finite reward {reward}")));
            }
            Message::Transition(Transition {
                worker_id,
                env_index,
                obs,
                action,
                reward,
                terminated,
                truncated,
                behavior_dist,
                behavior_version,
            })
        }
        TAG_ACK => Message::Ack {
            stale: r.bool()?,
            learner_version: r.u64()?,
        },
        TAG_WEIGHT_REQUEST => Message::WeightRequest,
        TAG_WEIGHT_RESPONSE => {
            let version = r.u64()?;
            let layout = Layout::new(r.u32()? as usize, r.u32()? as usize);
            let policy = r.reals()?;
            let value = r.reals()?;
            let params = ParameterSet::new(version, layout, policy, value)
                .map_err(|e| Error::Protocol(e.to_string()))?;
            Message::WeightResponse(params)
        }
        TAG_SHUTDOWN => Message::Shutdown,
        other => return Err(Error::Protocol(format!("unknown message tag {other:#04x}"))),
    };
    r.finish()?;
    Ok(msg)
}

/// Reads one frame from a byte stream. `Ok(None)` means the stream ended
/// cleanly on a frame boundary.
pub fn read_frame(reader: &mut impl Read) -> Result<Option<Vec<u8>>> {
    let mut header = [0u8; HEADER_LEN];
    let mut filled = 0;
    while filled < HEADER_LEN {
        match reader.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(Error::Framing("stream ended inside a frame header".into())),
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::Transport(e.to_string())),
        }
    }
    let len = payload_len(&header)?;
    let mut frame = Vec::with_capacity(HEADER_LEN + len);
    frame.extend_from_slice(&header);
    frame.resize(HEADER_LEN + len, 0);
    reader.read_exact(&mut frame[HEADER_LEN..]).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Framing("stream ended inside a frame payload".into())
        } else {
            Error::Transport(e.to_string())
        }
    })?;
    Ok(Some(frame))
}

/// Size of an encoded `WeightResponse` for a layout.
pub fn weight_response_size(layout: Layout) -> usize {
    HEADER_LEN + 8 + 4 + 4 + (4 + 8 * layout.policy_len()) + (4 + 8 * layout.value_len())
}
