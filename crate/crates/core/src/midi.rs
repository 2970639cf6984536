//! Standard MIDI File reading and writing (formats 0 and 1).
//!
//! Reading accepts running status and unknown chunks. Writing is canonical:
//! explicit status bytes on every event, minimal delta-time encodings and
//! exact chunk lengths, so `write(parse(write(f))) == write(f)`.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MidiError {
    #[error("empty byte stream")]
    EmptyStream,
    #[error("variable-length quantity not terminated within 4 bytes")]
    UnterminatedVlq,
    #[error("value {0} does not fit in a 28-bit variable-length quantity")]
    ValueOutOfRange(u32),
    #[error("bad header: {0}")]
    BadHeader(String),
    #[error("truncated chunk: {0}")]
    TruncatedChunk(String),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("bad event in track {track} at byte {offset}: {reason}")]
    BadEvent { track: usize, offset: usize, reason: String },
    #[error("invalid MIDI file: {0}")]
    InvariantViolation(String),
}

pub const VLQ_MAX: u32 = (1 << 28) - 1;
pub const DEFAULT_TEMPO: u32 = 500_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    /// Format 0: one track.
    Single,
    /// Format 1: simultaneous tracks sharing one timeline.
    MultiTrack,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventKind {
    NoteOn { channel: u8, key: u8, velocity: u8 },
    NoteOff { channel: u8, key: u8, velocity: u8 },
    /// Set Tempo meta event, microseconds per quarter note.
    Tempo(u32),
    EndOfTrack,
    /// Any other event, stored as its status byte followed by the bytes
    /// that follow it on disk. For meta events (`0xFF`) the payload starts
    /// with the meta type and length; for SysEx (`0xF0`/`0xF7`) with the length.
    Opaque { status: u8, payload: Vec<u8> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MidiEvent {
    /// Ticks since the previous event in the same track.
    pub delta: u32,
    pub kind: EventKind,
}

impl MidiEvent {
    pub fn new(delta: u32, kind: EventKind) -> Self {
        MidiEvent { delta, kind }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Track {
    pub events: Vec<MidiEvent>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MidiFile {
    pub format: Format,
    /// Ticks per quarter note.
    pub division: u16,
    pub tracks: Vec<Track>,
}

/// Decodes one big-endian base-128 quantity from the front of `bytes`.
pub fn decode_vlq(bytes: &[u8]) -> Result<(u32, usize), MidiError> {
    if bytes.is_empty() {
        return Err(MidiError::EmptyStream);
    }
    let mut value: u32 = 0;
    for (i, &b) in bytes.iter().take(4).enumerate() {
        value = (value << 7) | u32::from(b & 0x7F);
        if b & 0x80 == 0 {
            return Ok((value, i + 1));
        }
    }
    Err(MidiError::UnterminatedVlq)
}

pub fn encode_vlq(value: u32) -> Result<Vec<u8>, MidiError> {
    let mut out = Vec::with_capacity(4);
    push_vlq(&mut out, value)?;
    Ok(out)
}

fn push_vlq(out: &mut Vec<u8>, value: u32) -> Result<(), MidiError> {
    if value > VLQ_MAX {
        return Err(MidiError::ValueOutOfRange(value));
    }
    for shift in [21u32, 14, 7] {
        if value >> shift != 0 {
            out.push(((value >> shift) & 0x7F) as u8 | 0x80);
        }
    }
    out.push((value & 0x7F) as u8);
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.remaining() < n {
            return None;
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Some(s)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|s| s[0])
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|s| u32::from_be_bytes([s[0], s[1], s[2], s[3]]))
    }

    fn vlq(&mut self) -> Result<u32, MidiError> {
        let (v, n) = decode_vlq(&self.bytes[self.pos..])?;
        self.pos += n;
        Ok(v)
    }
}

/// Parses a Standard MIDI File.
pub fn parse_midi(bytes: &[u8]) -> Result<MidiFile, MidiError> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4) != Some(b"MThd".as_slice()) {
        return Err(MidiError::BadHeader("missing MThd tag".into()));
    }
    let header_len = cur.u32().ok_or_else(|| MidiError::BadHeader("missing header length".into()))?;
    if header_len < 6 {
        return Err(MidiError::BadHeader(format!("header length {header_len} < 6")));
    }
    let header = cur
        .take(header_len as usize)
        .ok_or_else(|| MidiError::TruncatedChunk("header chunk".into()))?;
    let format = u16::from_be_bytes([header[0], header[1]]);
    let ntracks = u16::from_be_bytes([header[2], header[3]]);
    let division = u16::from_be_bytes([header[4], header[5]]);
    let format = match format {
        0 => Format::Single,
        1 => Format::MultiTrack,
        2 => return Err(MidiError::UnsupportedFormat("SMF format 2".into())),
        other => return Err(MidiError::BadHeader(format!("unknown format {other}"))),
    };
    if division & 0x8000 != 0 {
        return Err(MidiError::UnsupportedFormat("SMPTE time division".into()));
    }
    if division == 0 {
        return Err(MidiError::BadHeader("division of zero ticks".into()));
    }
    if format == Format::Single && ntracks != 1 {
        return Err(MidiError::BadHeader(format!("format 0 with {ntracks} tracks")));
    }
    if ntracks == 0 {
        return Err(MidiError::BadHeader("no tracks".into()));
    }

    let mut tracks = Vec::with_capacity(ntracks as usize);
    while tracks.len() < ntracks as usize {
        let index = tracks.len();
        let tag = cur
            .take(4)
            .ok_or_else(|| MidiError::TruncatedChunk(format!("expected {ntracks} tracks, found {index}")))?;
        let len = cur
            .u32()
            .ok_or_else(|| MidiError::TruncatedChunk("chunk length".into()))? as usize;
        let start = cur.pos;
        let body = cur
            .take(len)
            .ok_or_else(|| MidiError::TruncatedChunk(format!("chunk declares {len} bytes")))?;
        if tag != b"MTrk" {
            continue; // unknown chunk type
        }
        tracks.push(parse_track(body, index, start)?);
    }
    Ok(MidiFile { format, division, tracks })
}

fn parse_track(body: &[u8], track: usize, base: usize) -> Result<Track, MidiError> {
    let mut cur = Cursor { bytes: body, pos: 0 };
    let mut events = Vec::new();
    let mut running: Option<u8> = None;
    let bad = |pos: usize, reason: &str| MidiError::BadEvent {
        track,
        offset: base + pos,
        reason: reason.to_string(),
    };
    while cur.remaining() > 0 {
        let at = cur.pos;
        let delta = cur.vlq().map_err(|e| bad(at, &e.to_string()))?;
        let at = cur.pos;
        let first = cur.u8().ok_or_else(|| bad(at, "missing status byte"))?;
        let (status, first_data) = if first & 0x80 != 0 {
            (first, None)
        } else {
            match running {
                Some(s) => (s, Some(first)),
                None => return Err(bad(at, "data byte without running status")),
            }
        };
        let kind = match status {
            0x80..=0xEF => {
                running = Some(status);
                let nbytes = if matches!(status & 0xF0, 0xC0 | 0xD0) { 1 } else { 2 };
                let mut data = [0u8; 2];
                for (i, slot) in data.iter_mut().take(nbytes).enumerate() {
                    let b = match (i, first_data) {
                        (0, Some(b)) => b,
                        _ => cur.u8().ok_or_else(|| bad(cur.pos, "truncated channel message"))?,
                    };
                    if b & 0x80 != 0 {
                        return Err(bad(cur.pos, "status byte where data byte expected"));
                    }
                    *slot = b;
                }
                let channel = status & 0x0F;
                match status & 0xF0 {
                    0x90 => EventKind::NoteOn { channel, key: data[0], velocity: data[1] },
                    0x80 => EventKind::NoteOff { channel, key: data[0], velocity: data[1] },
                    _ => EventKind::Opaque { status, payload: data[..nbytes].to_vec() },
                }
            }
            0xFF => {
                running = None;
                let meta_type = cur.u8().ok_or_else(|| bad(cur.pos, "truncated meta event"))?;
                if meta_type & 0x80 != 0 {
                    return Err(bad(at, "meta type above 0x7F"));
                }
                let len_at = cur.pos;
                let len = cur.vlq().map_err(|e| bad(len_at, &e.to_string()))? as usize;
                let len_bytes = &body[len_at..cur.pos];
                let data = cur.take(len).ok_or_else(|| bad(cur.pos, "truncated meta payload"))?;
                match meta_type {
                    0x2F => {
                        if len != 0 {
                            return Err(bad(at, "end-of-track with payload"));
                        }
                        events.push(MidiEvent::new(delta, EventKind::EndOfTrack));
                        return Ok(Track { events });
                    }
                    0x51 => {
                        if len != 3 {
                            return Err(bad(at, "tempo event length must be 3"));
                        }
                        let tempo = u32::from_be_bytes([0, data[0], data[1], data[2]]);
                        if tempo == 0 {
                            return Err(bad(at, "zero tempo"));
                        }
                        EventKind::Tempo(tempo)
                    }
                    _ => {
                        let mut payload = vec![meta_type];
                        payload.extend_from_slice(len_bytes);
                        payload.extend_from_slice(data);
                        EventKind::Opaque { status, payload }
                    }
                }
            }
            0xF0 | 0xF7 => {
                running = None;
                let len_at = cur.pos;
                let len = cur.vlq().map_err(|e| bad(len_at, &e.to_string()))? as usize;
                let len_bytes = &body[len_at..cur.pos];
                let data = cur.take(len).ok_or_else(|| bad(cur.pos, "truncated sysex payload"))?;
                let mut payload = len_bytes.to_vec();
                payload.extend_from_slice(data);
                EventKind::Opaque { status, payload }
            }
            _ => return Err(bad(at, &format!("status 0x{status:02X} not allowed in a file"))),
        };
        events.push(MidiEvent::new(delta, kind));
    }
    // Track chunk ended without an end-of-track meta event.
    events.push(MidiEvent::new(0, EventKind::EndOfTrack));
    Ok(Track { events })
}

/// Checks the structural invariants `write_midi` relies on.
pub fn validate(file: &MidiFile) -> Result<(), MidiError> {
    let fail = |msg: String| Err(MidiError::InvariantViolation(msg));
    if file.tracks.is_empty() {
        return fail("file has no tracks".into());
    }
    if file.tracks.len() > u16::MAX as usize {
        return fail("too many tracks".into());
    }
    if file.format == Format::Single && file.tracks.len() != 1 {
        return fail(format!("format 0 requires one track, found {}", file.tracks.len()));
    }
    if file.division == 0 || file.division > 0x7FFF {
        return fail(format!("division {} outside 1..=32767", file.division));
    }
    for (ti, track) in file.tracks.iter().enumerate() {
        match track.events.last() {
            Some(MidiEvent { kind: EventKind::EndOfTrack, .. }) => {}
            _ => return fail(format!("track {ti} does not end with end-of-track")),
        }
        let last = track.events.len() - 1;
        for (ei, ev) in track.events.iter().enumerate() {
            let at = |msg: &str| fail(format!("track {ti} event {ei}: {msg}"));
            if ev.delta > VLQ_MAX {
                return at("delta exceeds 28 bits");
            }
            match &ev.kind {
                EventKind::NoteOn { channel, key, velocity } | EventKind::NoteOff { channel, key, velocity } => {
                    if *channel > 15 || *key > 127 || *velocity > 127 {
                        return at("channel, key or velocity out of range");
                    }
                }
                EventKind::Tempo(t) => {
                    if *t == 0 || *t > 0xFF_FFFF {
                        return at("tempo outside 1..=0xFFFFFF");
                    }
                }
                EventKind::EndOfTrack => {
                    if ei != last {
                        return at("end-of-track before the last event");
                    }
                }
                EventKind::Opaque { status, payload } => {
                    if let Err(msg) = check_opaque(*status, payload) {
                        return at(&msg);
                    }
                }
            }
        }
    }
    Ok(())
}

fn check_opaque(status: u8, payload: &[u8]) -> Result<(), String> {
    match status {
        0xA0..=0xEF if !matches!(status & 0xF0, 0x80 | 0x90) => {
            let want = if matches!(status & 0xF0, 0xC0 | 0xD0) { 1 } else { 2 };
            if payload.len() != want || payload.iter().any(|b| b & 0x80 != 0) {
                return Err(format!("malformed channel message 0x{status:02X}"));
            }
            Ok(())
        }
        0xF0 | 0xF7 => check_length_prefixed(payload),
        0xFF => {
            let Some((&meta_type, rest)) = payload.split_first() else {
                return Err("empty meta payload".into());
            };
            if meta_type == 0x2F || meta_type == 0x51 || meta_type & 0x80 != 0 {
                return Err(format!("meta type 0x{meta_type:02X} cannot be opaque"));
            }
            check_length_prefixed(rest)
        }
        _ => Err(format!("status 0x{status:02X} cannot be opaque")),
    }
}

fn check_length_prefixed(payload: &[u8]) -> Result<(), String> {
    let (len, used) = decode_vlq(payload).map_err(|e| e.to_string())?;
    if payload.len() - used != len as usize {
        return Err("length prefix does not match payload".into());
    }
    Ok(())
}

/// Serializes `file` in canonical form.
pub fn write_midi(file: &MidiFile) -> Result<Vec<u8>, MidiError> {
    validate(file)?;
    let mut out = Vec::new();
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    let format: u16 = match file.format {
        Format::Single => 0,
        Format::MultiTrack => 1,
    };
    out.extend_from_slice(&format.to_be_bytes());
    out.extend_from_slice(&(file.tracks.len() as u16).to_be_bytes());
    out.extend_from_slice(&file.division.to_be_bytes());

    for track in &file.tracks {
        let mut body = Vec::new();
        for ev in &track.events {
            push_vlq(&mut body, ev.delta)?;
            match &ev.kind {
                EventKind::NoteOn { channel, key, velocity } => body.extend_from_slice(&[0x90 | channel, *key, *velocity]),
                EventKind::NoteOff { channel, key, velocity } => body.extend_from_slice(&[0x80 | channel, *key, *velocity]),
                EventKind::Tempo(t) => {
                    body.extend_from_slice(&[0xFF, 0x51, 0x03]);
                    body.extend_from_slice(&t.to_be_bytes()[1..]);
                }
                EventKind::EndOfTrack => body.extend_from_slice(&[0xFF, 0x2F, 0x00]),
                EventKind::Opaque { status, payload } => {
                    body.push(*status);
                    body.extend_from_slice(payload);
                }
            }
        }
        out.extend_from_slice(b"MTrk");
        let len = u32::try_from(body.len())
            .map_err(|_| MidiError::InvariantViolation("track longer than 4 GiB".into()))?;
        out.extend_from_slice(&len.to_be_bytes());
        out.extend_from_slice(&body);
    }
    Ok(out)
}
