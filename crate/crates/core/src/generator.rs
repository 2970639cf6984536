//! Autoregressive generation from a seed window.

use std::str::FromStr;

use thiserror::Error;

use crate::corpus::{Dataset, DurationToken, DurationVocab, NoteToken, NoteVocab, Song};
use crate::lstm::{model_forward, Mode, ModelError, ModelParams};
use crate::numerics::Rng;
use crate::midi::write_midi;
use crate::score::{piece_to_midi, NoteEvent, Piece};

pub const DEFAULT_LENGTH: usize = 500;
pub const DEFAULT_REPEAT_CAP: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GenError {
    #[error("no song has enough tokens for a seed window of {0}")]
    CorpusTooShort(usize),
    #[error("seed token {0:?} is not in the model vocabulary")]
    OovSeedToken(String),
    #[error("seed window has {got} tokens, model expects {expected}")]
    SeedLength { got: usize, expected: usize },
    #[error("bad seed position: {0}")]
    BadSeed(String),
    #[error("bad token {0:?}")]
    BadToken(String),
    #[error("invalid generation config: {0}")]
    InvalidConfig(String),
    #[error("cannot write output: {0}")]
    Output(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// Highest logit, lowest id on ties.
    Argmax,
    /// Draw from the tempered softmax.
    Sample,
}

impl SampleMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SampleMode::Argmax => "argmax",
            SampleMode::Sample => "sample",
        }
    }
}

impl FromStr for SampleMode {
    type Err = GenError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "argmax" => Ok(SampleMode::Argmax),
            "sample" => Ok(SampleMode::Sample),
            _ => Err(GenError::InvalidConfig(format!("unknown mode {s:?}"))),
        }
    }
}

/// Where the seed window comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SeedSource {
    /// Uniform over every `(song, offset)` with a full window.
    RandomWindow,
    Offset { song: usize, offset: usize },
    Tokens(Song),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub length: usize,
    pub seed_source: SeedSource,
    pub temperature: f64,
    pub mode: SampleMode,
    /// Longest allowed run of one note id; 0 disables the guard.
    pub repeat_cap: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            length: DEFAULT_LENGTH,
            seed_source: SeedSource::RandomWindow,
            temperature: 1.0,
            mode: SampleMode::Sample,
            repeat_cap: DEFAULT_REPEAT_CAP,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        if self.length == 0 {
            return Err(GenError::InvalidConfig("length must be at least 1".into()));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(GenError::InvalidConfig("temperature must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedWindow {
    /// Corpus position, when the seed came from the corpus.
    pub song: Option<usize>,
    pub offset: Option<usize>,
    pub tokens: Song,
}

fn window_tokens(dataset: &Dataset, song: usize, offset: usize) -> Song {
    let ids = &dataset.songs[song];
    let range = offset..offset + dataset.window_len;
    Song {
        notes: ids.notes[range.clone()].iter().map(|&i| dataset.note_vocab.token(i).unwrap().clone()).collect(),
        durations: ids.durations[range].iter().map(|&i| *dataset.dur_vocab.token(i).unwrap()).collect(),
    }
}

/// Picks a uniformly random window of `dataset.window_len` tokens.
///
/// Unlike training windows, a seed needs no following target, so a song of
/// exactly `window_len` tokens offers one seed.
pub fn pick_seed(dataset: &Dataset, rng: &mut Rng) -> Result<SeedWindow, GenError> {
    let l = dataset.window_len;
    let counts: Vec<usize> = dataset.songs.iter().map(|s| (s.len() + 1).saturating_sub(l)).collect();
    let total: usize = counts.iter().sum();
    if total == 0 || l == 0 {
        return Err(GenError::CorpusTooShort(l));
    }
    let mut k = rng.below(total as u64) as usize;
    for (song, &n) in counts.iter().enumerate() {
        if k < n {
            return Ok(SeedWindow { song: Some(song), offset: Some(k), tokens: window_tokens(dataset, song, k) });
        }
        k -= n;
    }
    unreachable!("k < total")
}

/// Resolves `source` into concrete seed tokens. Corpus-based sources need a
/// dataset.
pub fn resolve_seed(dataset: Option<&Dataset>, source: &SeedSource, rng: &mut Rng) -> Result<SeedWindow, GenError> {
    let need = || GenError::BadSeed("a corpus is required for this seed source".into());
    match source {
        SeedSource::RandomWindow => pick_seed(dataset.ok_or_else(need)?, rng),
        &SeedSource::Offset { song, offset } => {
            let ds = dataset.ok_or_else(need)?;
            let fits = ds.songs.get(song).is_some_and(|s| offset + ds.window_len <= s.len());
            if !fits {
                return Err(GenError::BadSeed(format!("song {song} offset {offset} has no full window")));
            }
            Ok(SeedWindow { song: Some(song), offset: Some(offset), tokens: window_tokens(ds, song, offset) })
        }
        SeedSource::Tokens(song) => Ok(SeedWindow { song: None, offset: None, tokens: song.clone() }),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: Song,
    pub note_ids: Vec<usize>,
    pub dur_ids: Vec<usize>,
    /// Picks replaced by the repetition guard.
    pub guard_interventions: usize,
    /// Times the guard fired but no other note id existed.
    pub guard_saturations: usize,
}

/// Selects an id from `logits`, skipping `exclude`.
fn select(logits: &[f64], temperature: f64, mode: SampleMode, rng: &mut Rng, exclude: Option<usize>) -> usize {
    let allowed = |i: &usize| Some(*i) != exclude;
    match mode {
        SampleMode::Argmax => {
            let mut best: Option<usize> = None;
            for i in (0..logits.len()).filter(allowed) {
                if best.is_none_or(|b| logits[i] > logits[b]) {
                    best = Some(i);
                }
            }
            best.expect("at least one candidate")
        }
        SampleMode::Sample => {
            let scaled: Vec<(usize, f64)> = (0..logits.len()).filter(allowed).map(|i| (i, logits[i] / temperature)).collect();
            let max = scaled.iter().map(|&(_, v)| v).fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<(usize, f64)> = scaled.iter().map(|&(i, v)| (i, (v - max).exp())).collect();
            let total: f64 = weights.iter().map(|&(_, w)| w).sum();
            let u = rng.next_f64() * total;
            let mut cum = 0.0;
            for &(i, w) in &weights {
                cum += w;
                if u < cum {
                    return i;
                }
            }
            weights.iter().rev().find(|&&(_, w)| w > 0.0).map_or(weights[0].0, |&(i, _)| i)
        }
    }
}

/// Extends `seed` by `config.length` note/duration pairs.
///
/// Each step runs the current window in infer mode, divides both heads'
/// logits by the temperature and selects a note and a duration independently,
/// then slides the window by one. With `repeat_cap = R > 0`, a note pick that
/// would extend a run of R identical generated notes is redrawn with that id
/// excluded.
pub fn generate(
    params: &ModelParams,
    note_vocab: &NoteVocab,
    dur_vocab: &DurationVocab,
    seed: &SeedWindow,
    config: &GenConfig,
) -> Result<Generation, GenError> {
    config.validate()?;
    let l = params.config().window_len;
    if seed.tokens.len() != l || seed.tokens.durations.len() != l {
        return Err(GenError::SeedLength { got: seed.tokens.len(), expected: l });
    }
    let mut notes = seed
        .tokens
        .notes
        .iter()
        .map(|t| note_vocab.id(t).ok_or_else(|| GenError::OovSeedToken(t.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let mut durs = seed
        .tokens
        .durations
        .iter()
        .map(|t| dur_vocab.id(t).ok_or_else(|| GenError::OovSeedToken(t.to_string())))
        .collect::<Result<Vec<_>, _>>()?;

    let mut rng = Rng::new(config.seed);
    let mut scratch = Rng::new(0);
    let mut out = Generation {
        tokens: Song::default(),
        note_ids: Vec::with_capacity(config.length),
        dur_ids: Vec::with_capacity(config.length),
        guard_interventions: 0,
        guard_saturations: 0,
    };
    let mut run = 0usize;
    for _ in 0..config.length {
        let start = notes.len() - l;
        let fwd = model_forward(params, &notes[start..], &durs[start..], Mode::Infer, &mut scratch)?;
        let note_logits = fwd.note_logits.as_slice();
        let mut note = select(note_logits, config.temperature, config.mode, &mut rng, None);
        let last = out.note_ids.last().copied();
        if config.repeat_cap > 0 && run >= config.repeat_cap && last == Some(note) {
            if note_logits.len() > 1 {
                note = select(note_logits, config.temperature, config.mode, &mut rng, Some(note));
                out.guard_interventions += 1;
            } else {
                out.guard_saturations += 1;
            }
        }
        let dur = select(fwd.dur_logits.as_slice(), config.temperature, config.mode, &mut rng, None);
        run = if last == Some(note) { run + 1 } else { 1 };

        notes.push(note);
        durs.push(dur);
        out.note_ids.push(note);
        out.dur_ids.push(dur);
        out.tokens.notes.push(note_vocab.token(note).expect("id from head").clone());
        out.tokens.durations.push(*dur_vocab.token(dur).expect("id from head"));
    }
    Ok(out)
}

/// Lays `(note token, duration units)` pairs end to end from onset 0.
pub fn emit<S: AsRef<str>>(tokens: &[(S, u32)], grid: u32, tempo: u32) -> Result<Piece, GenError> {
    let mut piece = Piece::new(grid);
    piece.tempo = tempo;
    let mut onset = 0u64;
    for (text, units) in tokens {
        let text = text.as_ref();
        let note: NoteToken = text.parse().map_err(|_| GenError::BadToken(text.to_string()))?;
        let dur = DurationToken::new(*units).map_err(|_| GenError::BadToken(format!("{text}:{units}")))?;
        piece.events.push(NoteEvent::new(onset, dur.units(), note.pitches()));
        onset += u64::from(dur.units());
    }
    Ok(piece)
}

/// [`emit`] for an already-validated token sequence.
pub fn emit_song(song: &Song, grid: u32, tempo: u32) -> Piece {
    crate::corpus::sequential_piece(song, grid, tempo)
}

/// Standard MIDI bytes for a generated song.
pub fn song_to_midi_bytes(song: &Song, grid: u32, tempo: u32) -> Result<Vec<u8>, GenError> {
    let file = piece_to_midi(&emit_song(song, grid, tempo)).map_err(|e| GenError::Output(e.to_string()))?;
    write_midi(&file).map_err(|e| GenError::Output(e.to_string()))
}
