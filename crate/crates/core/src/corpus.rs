//! Token streams, vocabularies, one-hot vectors and training windows.
//!
//! A song becomes two index-aligned streams: note tokens (`"R"` for a rest,
//! otherwise ascending keys joined by dots, so `"60.64.67"` is a C major
//! triad) and duration tokens in grid units. Chords are atomic tokens.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hash;
use std::str::FromStr;

use thiserror::Error;

use crate::numerics::Matrix;
use crate::score::{NoteEvent, Piece};

pub const REST: &str = "R";
pub const DEFAULT_MAX_DUR: u32 = 48;
pub const DEFAULT_WINDOW_LEN: usize = 50;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CorpusError {
    #[error("corpus contains no tokens")]
    EmptyCorpus,
    #[error("index {index} out of range for size {size}")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("malformed token {0:?}")]
    BadToken(String),
    #[error("token {0} is not in the vocabulary")]
    OutOfVocabulary(String),
    #[error("corpus line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("vocabulary listing is not sorted and unique")]
    UnsortedVocabulary,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NoteToken(String);

impl NoteToken {
    pub fn rest() -> Self {
        NoteToken(REST.to_string())
    }

    /// Token for a pitch set; empty means rest. Keys must be strictly ascending.
    pub fn from_pitches(pitches: &[u8]) -> Result<Self, CorpusError> {
        if pitches.is_empty() {
            return Ok(Self::rest());
        }
        let text = pitches.iter().map(u8::to_string).collect::<Vec<_>>().join(".");
        if pitches.windows(2).any(|w| w[0] >= w[1]) || pitches.iter().any(|&p| p > 127) {
            return Err(CorpusError::BadToken(text));
        }
        Ok(NoteToken(text))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_rest(&self) -> bool {
        self.0 == REST
    }

    pub fn pitches(&self) -> Vec<u8> {
        if self.is_rest() {
            return Vec::new();
        }
        self.0.split('.').map(|k| k.parse().expect("validated on construction")).collect()
    }
}

impl FromStr for NoteToken {
    type Err = CorpusError;

    /// Accepts only the canonical spelling: `R`, or ascending keys 0-127
    /// without leading zeros.
    fn from_str(s: &str) -> Result<Self, CorpusError> {
        if s == REST {
            return Ok(Self::rest());
        }
        let bad = || CorpusError::BadToken(s.to_string());
        let keys = s
            .split('.')
            .map(|k| {
                let canonical = !k.is_empty() && k.bytes().all(|b| b.is_ascii_digit()) && (k == "0" || !k.starts_with('0'));
                if !canonical {
                    return Err(bad());
                }
                k.parse::<u8>().map_err(|_| bad())
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_pitches(&keys).map_err(|_| bad())
    }
}

impl fmt::Display for NoteToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Duration in grid units, at least one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DurationToken(u32);

impl DurationToken {
    pub fn new(units: u32) -> Result<Self, CorpusError> {
        if units == 0 {
            return Err(CorpusError::BadToken("0".into()));
        }
        Ok(DurationToken(units))
    }

    /// Clamps `units` into `[1, max_dur]`.
    pub fn clamped(units: u32, max_dur: u32) -> Self {
        DurationToken(units.clamp(1, max_dur.max(1)))
    }

    pub fn units(self) -> u32 {
        self.0
    }
}

impl fmt::Display for DurationToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Sorted, deduplicated token list with its inverse map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary<T: Eq + Hash> {
    tokens: Vec<T>,
    index: HashMap<T, usize>,
}

pub type NoteVocab = Vocabulary<NoteToken>;
pub type DurationVocab = Vocabulary<DurationToken>;

impl<T: Ord + Hash + Clone> Vocabulary<T> {
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a T>) -> Result<Self, CorpusError>
    where
        T: 'a,
    {
        let mut all: Vec<T> = tokens.into_iter().cloned().collect();
        if all.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        all.sort_unstable();
        all.dedup();
        Ok(Self::from_unique_sorted(all))
    }

    /// Rebuilds a vocabulary from a stored listing, which must already be
    /// strictly ascending.
    pub fn from_listing(tokens: Vec<T>) -> Result<Self, CorpusError> {
        if tokens.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        if tokens.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CorpusError::UnsortedVocabulary);
        }
        Ok(Self::from_unique_sorted(tokens))
    }

    fn from_unique_sorted(tokens: Vec<T>) -> Self {
        let index = tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &T) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&T> {
        self.tokens.get(id)
    }

    pub fn tokens(&self) -> &[T] {
        &self.tokens
    }
}

/// One song as two aligned token streams.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Song {
    pub notes: Vec<NoteToken>,
    pub durations: Vec<DurationToken>,
}

impl Song {
    pub fn len(&self) -> usize {
        self.notes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.notes.is_empty()
    }
}

pub fn tokenize(piece: &Piece, max_dur: u32) -> Song {
    let mut song = Song::default();
    for ev in &piece.events {
        song.notes.push(NoteToken::from_pitches(&ev.pitches).expect("piece invariants hold"));
        song.durations.push(DurationToken::clamped(ev.duration, max_dur));
    }
    song
}

/// A seeded pseudo-random monophonic song: pitches from `60..60 + pitches`,
/// durations from 3, 6, 12 and 24 units. Handy for demos and tests.
pub fn synthetic_song(len: usize, pitches: u8, seed: u64) -> Song {
    assert!(pitches >= 1 && 60 + u32::from(pitches) <= 128, "pitch range must fit in 60..128");
    let mut rng = crate::numerics::Rng::new(seed);
    let mut song = Song::default();
    for _ in 0..len {
        let key = 60 + rng.below(u64::from(pitches)) as u8;
        song.notes.push(NoteToken::from_pitches(&[key]).expect("valid key"));
        song.durations.push(DurationToken([3, 6, 12, 24][rng.below(4) as usize]));
    }
    song
}

/// `1 x size` row with a single 1.0 at `index`.
pub fn one_hot(index: usize, size: usize) -> Result<Matrix, CorpusError> {
    if index >= size {
        return Err(CorpusError::IndexOutOfRange { index, size });
    }
    let mut m = Matrix::zeros(1, size);
    m[(0, index)] = 1.0;
    Ok(m)
}

/// Turns a token sequence back into a monophonic timeline: each event starts
/// where the previous one ends.
pub fn sequential_piece(song: &Song, grid: u32, tempo: u32) -> Piece {
    let mut piece = Piece::new(grid);
    piece.tempo = tempo;
    let mut onset = 0u64;
    for (note, dur) in song.notes.iter().zip(&song.durations) {
        piece.events.push(NoteEvent::new(onset, dur.units(), note.pitches()));
        onset += u64::from(dur.units());
    }
    piece
}

/// The on-disk corpus: a header line then one song per line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusFile {
    pub grid: u32,
    pub window_len: usize,
    pub max_dur: u32,
    pub songs: Vec<Song>,
}

impl CorpusFile {
    pub fn to_text(&self) -> String {
        let mut out = format!("#grid={} L={} max_dur={}\n", self.grid, self.window_len, self.max_dur);
        for song in &self.songs {
            out.push_str(&song_to_line(song));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, CorpusError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(CorpusError::Format { line: 1, message: "missing header".into() })?;
        let header_err = |message: String| CorpusError::Format { line: 1, message };
        let body = header.strip_prefix('#').ok_or_else(|| header_err("header must start with '#'".into()))?;
        let (mut grid, mut window_len, mut max_dur) = (None, None, None);
        for field in body.split_whitespace() {
            let (key, value) = field.split_once('=').ok_or_else(|| header_err(format!("bad field {field:?}")))?;
            let num: u64 = value.parse().map_err(|_| header_err(format!("bad number in {field:?}")))?;
            match key {
                "grid" => grid = Some(num),
                "L" => window_len = Some(num),
                "max_dur" => max_dur = Some(num),
                _ => return Err(header_err(format!("unknown header key {key:?}"))),
            }
        }
        let positive = |v: Option<u64>, name: &str| match v {
            Some(n) if n > 0 && n <= u64::from(u32::MAX) => Ok(n),
            _ => Err(header_err(format!("header needs a positive {name}"))),
        };
        let grid = positive(grid, "grid")? as u32;
        let window_len = positive(window_len, "L")? as usize;
        let max_dur = positive(max_dur, "max_dur")? as u32;

        let mut songs = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            songs.push(song_from_line(line, max_dur).map_err(|message| CorpusError::Format { line: i + 1, message })?);
        }
        Ok(CorpusFile { grid, window_len, max_dur, songs })
    }
}

pub fn song_to_line(song: &Song) -> String {
    song.notes
        .iter()
        .zip(&song.durations)
        .map(|(n, d)| format!("{n}:{d}"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn song_from_line(line: &str, max_dur: u32) -> Result<Song, String> {
    let mut song = Song::default();
    for field in line.split_whitespace() {
        let (note, dur) = field.split_once(':').ok_or_else(|| format!("field {field:?} is not NOTE:DUR"))?;
        let note: NoteToken = note.parse().map_err(|e: CorpusError| e.to_string())?;
        let units: u32 = dur.parse().map_err(|_| format!("bad duration in {field:?}"))?;
        if units == 0 || units > max_dur {
            return Err(format!("duration {units} outside 1..={max_dur}"));
        }
        song.notes.push(note);
        song.durations.push(DurationToken(units));
    }
    Ok(song)
}

/// A song as vocabulary indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SongIds {
    pub notes: Vec<usize>,
    pub durations: Vec<usize>,
}

impl SongIds {
    pub fn len(&self) -> usize {
        self.notes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.notes.is_empty()
    }
}

/// Position of one training window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowRef {
    pub song: usize,
    pub offset: usize,
}

/// `window_len` inputs from both streams and the pair that follows them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window<'a> {
    pub notes: &'a [usize],
    pub durations: &'a [usize],
    pub target_note: usize,
    pub target_duration: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowSet {
    pub windows: Vec<WindowRef>,
    /// Songs too short to yield a window.
    pub skipped_songs: usize,
}

/// Every stride-1 window of length `window_len` that has a following target,
/// never crossing a song boundary.
pub fn make_windows(songs: &[SongIds], window_len: usize) -> WindowSet {
    assert!(window_len >= 1, "window length must be positive");
    let mut windows = Vec::new();
    let mut skipped_songs = 0;
    for (song, ids) in songs.iter().enumerate() {
        let count = ids.len().saturating_sub(window_len);
        if count == 0 {
            skipped_songs += 1;
        }
        windows.extend((0..count).map(|offset| WindowRef { song, offset }));
    }
    WindowSet { windows, skipped_songs }
}

/// Corpus-wide vocabularies plus every song mapped to indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub window_len: usize,
    pub note_vocab: NoteVocab,
    pub dur_vocab: DurationVocab,
    pub songs: Vec<SongIds>,
}

impl Dataset {
    /// Builds both vocabularies from every song in `corpus`.
    pub fn from_corpus(corpus: &CorpusFile) -> Result<Self, CorpusError> {
        Self::from_songs(&corpus.songs, corpus.window_len)
    }

    pub fn from_songs(songs: &[Song], window_len: usize) -> Result<Self, CorpusError> {
        let note_vocab = Vocabulary::build(songs.iter().flat_map(|s| &s.notes))?;
        let dur_vocab = Vocabulary::build(songs.iter().flat_map(|s| &s.durations))?;
        Self::with_vocab(songs, window_len, note_vocab, dur_vocab)
    }

    /// Maps `songs` through existing vocabularies; unknown tokens are an error.
    pub fn with_vocab(
        songs: &[Song],
        window_len: usize,
        note_vocab: NoteVocab,
        dur_vocab: DurationVocab,
    ) -> Result<Self, CorpusError> {
        let songs = songs
            .iter()
            .map(|s| {
                let notes = s
                    .notes
                    .iter()
                    .map(|t| note_vocab.id(t).ok_or_else(|| CorpusError::OutOfVocabulary(t.to_string())))
                    .collect::<Result<_, _>>()?;
                let durations = s
                    .durations
                    .iter()
                    .map(|t| dur_vocab.id(t).ok_or_else(|| CorpusError::OutOfVocabulary(t.to_string())))
                    .collect::<Result<_, _>>()?;
                Ok(SongIds { notes, durations })
            })
            .collect::<Result<_, CorpusError>>()?;
        Ok(Dataset { window_len, note_vocab, dur_vocab, songs })
    }

    pub fn windows(&self) -> WindowSet {
        make_windows(&self.songs, self.window_len)
    }

    pub fn window(&self, r: WindowRef) -> Window<'_> {
        let song = &self.songs[r.song];
        let end = r.offset + self.window_len;
        Window {
            notes: &song.notes[r.offset..end],
            durations: &song.durations[r.offset..end],
            target_note: song.notes[end],
            target_duration: song.durations[end],
        }
    }

    pub fn token_count(&self) -> usize {
        self.songs.iter().map(SongIds::len).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn nt(s: &str) -> NoteToken {
        s.parse().unwrap()
    }

    #[test]
    fn tokenize_names_chords_and_rests() {
        let mut p = Piece::new(12);
        p.events.push(NoteEvent::new(0, 6, vec![60, 64]));
        p.events.push(NoteEvent::rest(6, 12));
        let song = tokenize(&p, 48);
        assert_eq!(song.notes, vec![nt("60.64"), nt("R")]);
        assert_eq!(song.durations.iter().map(|d| d.units()).collect::<Vec<_>>(), vec![6, 12]);
    }

    #[test]
    fn tokenize_clamps_long_durations() {
        let mut p = Piece::new(12);
        p.events.push(NoteEvent::new(0, 60, vec![60]));
        assert_eq!(tokenize(&p, 48).durations, vec![DurationToken::new(48).unwrap()]);
        assert_eq!(tokenize(&Piece::new(12), 48), Song::default());
    }

    #[test]
    fn token_parsing_is_canonical() {
        assert_eq!(nt("60.64.67").pitches(), vec![60, 64, 67]);
        assert!(nt("R").is_rest());
        for bad in ["64.60", "60.60", "", "060", "128", "60.", "r", "6a"] {
            assert!(bad.parse::<NoteToken>().is_err(), "{bad:?} accepted");
        }
    }

    #[test]
    fn vocab_is_sorted_and_dense() {
        let toks: Vec<NoteToken> = ["R", "60", "R", "62"].iter().map(|s| nt(s)).collect();
        let v = Vocabulary::build(&toks).unwrap();
        assert_eq!(v.id(&nt("60")), Some(0));
        assert_eq!(v.id(&nt("62")), Some(1));
        assert_eq!(v.id(&nt("R")), Some(2));
        assert_eq!(v.len(), 3);

        let durs: Vec<DurationToken> = [12, 6, 6].iter().map(|&u| DurationToken::new(u).unwrap()).collect();
        let d = Vocabulary::build(&durs).unwrap();
        assert_eq!(d.tokens(), &[DurationToken::new(6).unwrap(), DurationToken::new(12).unwrap()]);

        let none: Vec<NoteToken> = Vec::new();
        assert_eq!(Vocabulary::build(&none), Err(CorpusError::EmptyCorpus));
        assert_eq!(
            Vocabulary::from_listing(vec![nt("62"), nt("60")]),
            Err(CorpusError::UnsortedVocabulary)
        );
    }

    #[test]
    fn one_hot_examples() {
        assert_eq!(one_hot(2, 4).unwrap().as_slice(), &[0.0, 0.0, 1.0, 0.0]);
        assert_eq!(one_hot(0, 1).unwrap().as_slice(), &[1.0]);
        assert_eq!(one_hot(4, 4), Err(CorpusError::IndexOutOfRange { index: 4, size: 4 }));
    }

    fn ids(n: usize) -> SongIds {
        SongIds { notes: (0..n).collect(), durations: (0..n).map(|i| i % 3).collect() }
    }

    #[test]
    fn window_counts() {
        let w = make_windows(&[ids(55)], 50);
        assert_eq!(w.windows.len(), 5);
        let w = make_windows(&[ids(50)], 50);
        assert_eq!((w.windows.len(), w.skipped_songs), (0, 1));

        let ds = Dataset {
            window_len: 50,
            note_vocab: Vocabulary::build(&[nt("60")]).unwrap(),
            dur_vocab: Vocabulary::build(&[DurationToken::new(1).unwrap()]).unwrap(),
            songs: vec![ids(52)],
        };
        let set = ds.windows();
        assert_eq!(set.windows, vec![WindowRef { song: 0, offset: 0 }, WindowRef { song: 0, offset: 1 }]);
        let w = ds.window(set.windows[1]);
        assert_eq!(w.notes, &(1..51).collect::<Vec<_>>()[..]);
        assert_eq!(w.target_note, 51);
        assert_eq!(w.target_duration, 51 % 3);
        assert_eq!(w.durations.len(), 50);

        let set = make_windows(&[ids(55), ids(10), ids(60)], 50);
        let targets: Vec<usize> = set.windows.iter().filter(|r| r.song == 0).map(|r| r.offset + 50).collect();
        assert_eq!(targets, vec![50, 51, 52, 53, 54]);
        assert_eq!((set.windows.len(), set.skipped_songs), (15, 1));
    }

    #[test]
    fn corpus_text_round_trip_and_errors() {
        let text = "#grid=12 L=50 max_dur=48\n60.64.67:6 R:12\n\n62:3\n";
        let c = CorpusFile::parse(text).unwrap();
        assert_eq!(c.songs.len(), 2);
        assert_eq!(c.songs[0].notes, vec![nt("60.64.67"), nt("R")]);
        assert_eq!(c.to_text(), "#grid=12 L=50 max_dur=48\n60.64.67:6 R:12\n62:3\n");
        assert!(matches!(CorpusFile::parse(""), Err(CorpusError::Format { line: 1, .. })));
        assert!(matches!(CorpusFile::parse("#grid=12 L=50\n"), Err(CorpusError::Format { line: 1, .. })));
        assert!(matches!(
            CorpusFile::parse("#grid=12 L=50 max_dur=48\n60:49\n"),
            Err(CorpusError::Format { line: 2, .. })
        ));
        assert!(matches!(
            CorpusFile::parse("#grid=12 L=50 max_dur=48\n64.60:4\n"),
            Err(CorpusError::Format { line: 2, .. })
        ));
    }

    #[test]
    fn out_of_vocabulary_is_an_error() {
        let songs = vec![Song { notes: vec![nt("60")], durations: vec![DurationToken::new(3).unwrap()] }];
        let ds = Dataset::from_songs(&songs, 1).unwrap();
        let other = vec![Song { notes: vec![nt("61")], durations: vec![DurationToken::new(3).unwrap()] }];
        assert_eq!(
            Dataset::with_vocab(&other, 1, ds.note_vocab.clone(), ds.dur_vocab.clone()),
            Err(CorpusError::OutOfVocabulary("61".into()))
        );
    }

    fn arb_song() -> impl Strategy<Value = Song> {
        let tok = prop_oneof![
            Just(NoteToken::rest()),
            prop::collection::btree_set(50u8..80, 1..4)
                .prop_map(|s| NoteToken::from_pitches(&s.into_iter().collect::<Vec<_>>()).unwrap()),
        ];
        prop::collection::vec((tok, 1u32..=48), 0..40).prop_map(|pairs| Song {
            notes: pairs.iter().map(|p| p.0.clone()).collect(),
            durations: pairs.iter().map(|p| DurationToken(p.1)).collect(),
        })
    }

    proptest! {
        #[test]
        fn vocab_ignores_corpus_order(mut songs in prop::collection::vec(arb_song(), 1..6), seed in any::<u64>()) {
            prop_assume!(songs.iter().any(|s| !s.is_empty()));
            let a = Dataset::from_songs(&songs, 3).unwrap();
            crate::numerics::Rng::new(seed).shuffle(&mut songs);
            let b = Dataset::from_songs(&songs, 3).unwrap();
            prop_assert_eq!(&a.note_vocab, &b.note_vocab);
            prop_assert_eq!(&a.dur_vocab, &b.dur_vocab);
            for (id, tok) in a.note_vocab.tokens().iter().enumerate() {
                prop_assert_eq!(a.note_vocab.id(tok), Some(id));
                let oh = one_hot(id, a.note_vocab.len()).unwrap();
                prop_assert_eq!(oh.as_slice().iter().sum::<f64>(), 1.0);
                prop_assert_eq!(oh.as_slice().iter().filter(|&&v| v != 0.0).count(), 1);
            }
        }

        #[test]
        fn windows_stay_aligned(songs in prop::collection::vec(arb_song(), 1..6), window_len in 1usize..12) {
            prop_assume!(songs.iter().any(|s| !s.is_empty()));
            let ds = Dataset::from_songs(&songs, window_len).unwrap();
            let set = ds.windows();
            let expected: usize = songs.iter().map(|s| s.len().saturating_sub(window_len)).sum();
            prop_assert_eq!(set.windows.len(), expected);
            for r in set.windows {
                let w = ds.window(r);
                let song = &songs[r.song];
                prop_assert_eq!(ds.note_vocab.token(w.target_note), Some(&song.notes[r.offset + window_len]));
                prop_assert_eq!(ds.dur_vocab.token(w.target_duration), Some(&song.durations[r.offset + window_len]));
                prop_assert_eq!(w.notes.len(), w.durations.len());
            }
        }

        #[test]
        fn corpus_text_round_trips(songs in prop::collection::vec(arb_song(), 0..5)) {
            let songs: Vec<Song> = songs.into_iter().filter(|s| !s.is_empty()).collect();
            let c = CorpusFile { grid: 12, window_len: 50, max_dur: 48, songs };
            prop_assert_eq!(CorpusFile::parse(&c.to_text()).unwrap(), c);
        }
    }
}
