//! Note-level view of a MIDI file: a flat, onset-ordered list of pitch sets
//! (chords, single notes, or rests) with durations on a fixed grid.

use std::collections::{HashMap, VecDeque};

use thiserror::Error;

use crate::midi::{EventKind, Format, MidiEvent, MidiFile, Track, DEFAULT_TEMPO};

/// Grid divisions per quarter note.
pub const DEFAULT_GRID: u32 = 12;

/// Emitted files use this many ticks per grid unit.
pub const TICKS_PER_UNIT: u32 = 4;

pub const EMIT_VELOCITY: u8 = 64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScoreError {
    #[error("file contains no notes")]
    NoNotes,
    #[error("grid must be between 1 and {max}, got {grid}")]
    BadGrid { grid: u32, max: u32 },
    #[error("invalid piece: {0}")]
    InvariantViolation(String),
}

/// A chord, single note, or rest (empty `pitches`), in grid units.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoteEvent {
    pub onset: u64,
    pub duration: u32,
    pub pitches: Vec<u8>,
}

impl NoteEvent {
    pub fn new(onset: u64, duration: u32, pitches: Vec<u8>) -> Self {
        NoteEvent { onset, duration, pitches }
    }

    pub fn rest(onset: u64, duration: u32) -> Self {
        NoteEvent { onset, duration, pitches: Vec::new() }
    }

    pub fn is_rest(&self) -> bool {
        self.pitches.is_empty()
    }

    pub fn end(&self) -> u64 {
        self.onset + u64::from(self.duration)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Piece {
    pub grid: u32,
    pub events: Vec<NoteEvent>,
    /// Microseconds per quarter note.
    pub tempo: u32,
}

impl Piece {
    pub fn new(grid: u32) -> Self {
        Piece { grid, events: Vec::new(), tempo: DEFAULT_TEMPO }
    }

    pub fn validate(&self) -> Result<(), ScoreError> {
        let fail = |msg: String| Err(ScoreError::InvariantViolation(msg));
        if self.grid == 0 {
            return fail("grid must be positive".into());
        }
        if self.tempo == 0 || self.tempo > 0xFF_FFFF {
            return fail(format!("tempo {} outside 1..=0xFFFFFF", self.tempo));
        }
        let mut prev_onset = 0;
        for (i, ev) in self.events.iter().enumerate() {
            if ev.onset < prev_onset {
                return fail(format!("event {i} starts before its predecessor"));
            }
            prev_onset = ev.onset;
            if ev.duration == 0 {
                return fail(format!("event {i} has zero duration"));
            }
            if ev.pitches.windows(2).any(|w| w[0] >= w[1]) {
                return fail(format!("event {i} pitches not strictly ascending"));
            }
            if ev.pitches.iter().any(|&p| p > 127) {
                return fail(format!("event {i} has a key above 127"));
            }
        }
        Ok(())
    }

    /// End of the last sounding event or rest, in grid units.
    pub fn span(&self) -> u64 {
        self.events.iter().map(NoteEvent::end).max().unwrap_or(0)
    }
}

/// Result of note extraction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Extraction {
    pub piece: Piece,
    /// Notes still sounding at their track's end, cut off there.
    pub dangling_notes: usize,
}

/// Nearest grid unit to `ticks`, with exact halves rounded down.
fn quantize(ticks: u64, grid: u32, division: u16) -> u64 {
    let num = u128::from(ticks) * u128::from(grid);
    let den = u128::from(division);
    let q = num / den;
    let r = num % den;
    (if 2 * r > den { q + 1 } else { q }) as u64
}

struct RawNote {
    start: u64,
    end: u64,
    key: u8,
}

/// Extracts the note-level piece from a parsed file.
///
/// Note-ons are matched to releases first-in first-out per channel and key.
/// Onsets falling on the same grid unit become one chord that lasts as long
/// as its longest member. Silence of one grid unit or more, including before
/// the first note and before the end of the longest track, becomes a rest.
pub fn events_to_piece(file: &MidiFile, grid: u32) -> Result<Extraction, ScoreError> {
    let max_grid = u32::from(u16::MAX) / TICKS_PER_UNIT;
    if grid == 0 || grid > max_grid {
        return Err(ScoreError::BadGrid { grid, max: max_grid });
    }
    let mut notes = Vec::new();
    let mut dangling = 0;
    let mut tempo: Option<(u64, u32)> = None;
    let mut file_end = 0u64;

    for track in &file.tracks {
        let mut now = 0u64;
        let mut sounding: HashMap<(u8, u8), VecDeque<u64>> = HashMap::new();
        for ev in &track.events {
            now += u64::from(ev.delta);
            match ev.kind {
                EventKind::NoteOn { channel, key, velocity } if velocity > 0 => {
                    sounding.entry((channel, key)).or_default().push_back(now);
                }
                EventKind::NoteOn { channel, key, .. } | EventKind::NoteOff { channel, key, .. } => {
                    if let Some(start) = sounding.get_mut(&(channel, key)).and_then(VecDeque::pop_front) {
                        notes.push(RawNote { start, end: now, key });
                    }
                }
                EventKind::Tempo(t) => {
                    if tempo.is_none_or(|(at, _)| now < at) {
                        tempo = Some((now, t));
                    }
                }
                EventKind::EndOfTrack | EventKind::Opaque { .. } => {}
            }
        }
        // HashMap iteration order is irrelevant here: notes are sorted below.
        for (&(_, key), starts) in &sounding {
            for &start in starts {
                notes.push(RawNote { start, end: now, key });
                dangling += 1;
            }
        }
        file_end = file_end.max(now);
    }
    if notes.is_empty() {
        return Err(ScoreError::NoNotes);
    }

    let q = |t: u64| quantize(t, grid, file.division);
    let mut quantized: Vec<(u64, u32, u8)> = notes
        .iter()
        .map(|n| {
            let on = q(n.start);
            let len = q(n.end).saturating_sub(on).max(1);
            (on, u32::try_from(len).unwrap_or(u32::MAX), n.key)
        })
        .collect();
    quantized.sort_unstable();

    let mut events = Vec::new();
    let mut covered = 0u64;
    let mut i = 0;
    while i < quantized.len() {
        let onset = quantized[i].0;
        let mut pitches = Vec::new();
        let mut duration = 0;
        while i < quantized.len() && quantized[i].0 == onset {
            duration = duration.max(quantized[i].1);
            pitches.push(quantized[i].2);
            i += 1;
        }
        pitches.sort_unstable();
        pitches.dedup();
        if onset > covered {
            events.push(NoteEvent::rest(covered, gap_units(onset - covered)));
        }
        let ev = NoteEvent::new(onset, duration, pitches);
        covered = covered.max(ev.end());
        events.push(ev);
    }
    let end = q(file_end);
    if end > covered {
        events.push(NoteEvent::rest(covered, gap_units(end - covered)));
    }

    let piece = Piece {
        grid,
        events,
        tempo: tempo.map_or(DEFAULT_TEMPO, |(_, t)| t),
    };
    debug_assert!(piece.validate().is_ok());
    Ok(Extraction { piece, dangling_notes: dangling })
}

fn gap_units(units: u64) -> u32 {
    u32::try_from(units).unwrap_or(u32::MAX)
}

/// Renders a piece as a format-0 file at `4 * grid` ticks per quarter.
///
/// Every pitch gets a velocity-64 note-on and a note-off on channel 0. Rests
/// produce no events, only elapsed time. At equal ticks releases precede
/// attacks so repeated keys re-pair correctly.
pub fn piece_to_midi(piece: &Piece) -> Result<MidiFile, ScoreError> {
    piece.validate()?;
    let division = piece
        .grid
        .checked_mul(TICKS_PER_UNIT)
        .filter(|&d| d <= 0x7FFF)
        .ok_or_else(|| ScoreError::InvariantViolation(format!("grid {} too fine to emit", piece.grid)))?;

    // (tick, releases first, sequence) orders the merged stream.
    let mut timed: Vec<(u64, u8, usize, EventKind)> = Vec::new();
    for ev in piece.events.iter().filter(|e| !e.is_rest()) {
        let on = ev.onset * u64::from(TICKS_PER_UNIT);
        let off = ev.end() * u64::from(TICKS_PER_UNIT);
        for &key in &ev.pitches {
            let seq = timed.len();
            timed.push((on, 1, seq, EventKind::NoteOn { channel: 0, key, velocity: EMIT_VELOCITY }));
            timed.push((off, 0, seq, EventKind::NoteOff { channel: 0, key, velocity: 0 }));
        }
    }
    timed.sort_by_key(|&(tick, phase, seq, _)| (tick, phase, seq));

    let mut events = vec![MidiEvent::new(0, EventKind::Tempo(piece.tempo))];
    let mut now = 0u64;
    let to_delta = |ticks: u64| {
        u32::try_from(ticks)
            .ok()
            .filter(|&d| d <= crate::midi::VLQ_MAX)
            .ok_or_else(|| ScoreError::InvariantViolation("gap too long for one delta time".into()))
    };
    for (tick, _, _, kind) in timed {
        events.push(MidiEvent::new(to_delta(tick - now)?, kind));
        now = tick;
    }
    let end = piece.span() * u64::from(TICKS_PER_UNIT);
    events.push(MidiEvent::new(to_delta(end.saturating_sub(now))?, EventKind::EndOfTrack));

    Ok(MidiFile {
        format: Format::Single,
        division: division as u16,
        tracks: vec![Track { events }],
    })
}
