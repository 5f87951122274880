//! Seam segment sets and their quantized token sequences.
//!
//! Coordinates live in the canonical cube `[-0.5, 0.5]^3` and are quantized
//! into 1024 bins per axis. Ordering keys compare quantized `(y, z, x)`
//! triples, so canonical order is reproducible bit-for-bit.

use std::cmp::Ordering;
use std::fmt::Write as _;

use thiserror::Error;

use crate::mesh::Vec3;

pub const BINS: u16 = 1024;
pub const BOS: u16 = 1024;
pub const EOS: u16 = 1025;
pub const PAD: u16 = 1026;
pub const VOCAB_SIZE: usize = 1027;
pub const TOKENS_PER_SEGMENT: usize = 6;

/// Coordinates this far outside the cube are clamped instead of rejected.
pub const CLAMP_TOLERANCE: f64 = 1e-9;

/// Half of one bin width, the worst-case quantization error.
pub const HALF_BIN: f64 = 0.5 / BINS as f64;

#[derive(Debug, Error, PartialEq)]
pub enum TokenError {
    #[error("coordinate {0} lies outside the canonical cube")]
    OutOfRange(f64),
    #[error("malformed token sequence at position {position}: {reason}")]
    Malformed { position: usize, reason: String },
    #[error("seam set is not in canonical order (segment {0})")]
    NotCanonical(usize),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

pub fn quantize(coord: f64) -> Result<u16, TokenError> {
    if !coord.is_finite() || coord < -0.5 - CLAMP_TOLERANCE || coord > 0.5 + CLAMP_TOLERANCE {
        return Err(TokenError::OutOfRange(coord));
    }
    let bin = ((coord + 0.5) * BINS as f64).floor();
    Ok(bin.clamp(0.0, (BINS - 1) as f64) as u16)
}

/// Center of a bin.
pub fn dequantize(bin: u16) -> f64 {
    (bin as f64 + 0.5) / BINS as f64 - 0.5
}

/// Quantized endpoint stored in `(y, z, x)` order, so derived `Ord` is the
/// yzx lexicographic key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct QuantizedPoint(pub [u16; 3]);

impl QuantizedPoint {
    pub fn from_point(p: &Vec3) -> Result<Self, TokenError> {
        Ok(Self([quantize(p.y)?, quantize(p.z)?, quantize(p.x)?]))
    }

    pub fn to_point(self) -> Vec3 {
        let [y, z, x] = self.0;
        Vec3::new(dequantize(x), dequantize(y), dequantize(z))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub a: Vec3,
    pub b: Vec3,
}

impl Segment {
    pub fn new(a: Vec3, b: Vec3) -> Self {
        Self { a, b }
    }

    fn keys(&self) -> Result<(QuantizedPoint, QuantizedPoint), TokenError> {
        Ok((
            QuantizedPoint::from_point(&self.a)?,
            QuantizedPoint::from_point(&self.b)?,
        ))
    }

    fn flipped(self) -> Self {
        Self {
            a: self.b,
            b: self.a,
        }
    }
}

/// Ordered list of seam segments.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SeamSet {
    pub segments: Vec<Segment>,
}

fn float_order(a: &Segment, b: &Segment) -> Ordering {
    let flat = |s: &Segment| [s.a.x, s.a.y, s.a.z, s.b.x, s.b.y, s.b.z];
    flat(a)
        .iter()
        .zip(flat(b).iter())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

impl SeamSet {
    pub fn new(segments: Vec<Segment>) -> Self {
        Self { segments }
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Canonical form: endpoints ordered by quantized yzx key, segments sorted
    /// by (first, second) key, zero-length and duplicate segments (after
    /// quantization) removed. Among quantized duplicates the segment with the
    /// smallest float coordinates is kept, which makes the result independent
    /// of input order.
    pub fn canonicalize(&self) -> Result<SeamSet, TokenError> {
        let mut keyed = Vec::with_capacity(self.segments.len());
        for seg in &self.segments {
            let (ka, kb) = seg.keys()?;
            match ka.cmp(&kb) {
                Ordering::Less => keyed.push(((ka, kb), *seg)),
                Ordering::Greater => keyed.push(((kb, ka), seg.flipped())),
                Ordering::Equal => {}
            }
        }
        keyed.sort_by(|(ka, sa), (kb, sb)| ka.cmp(kb).then_with(|| float_order(sa, sb)));
        keyed.dedup_by(|later, earlier| later.0 == earlier.0);
        Ok(SeamSet::new(keyed.into_iter().map(|(_, s)| s).collect()))
    }

    /// Index of the first segment violating canonical form, if any.
    pub fn first_non_canonical(&self) -> Option<usize> {
        let mut previous: Option<(QuantizedPoint, QuantizedPoint)> = None;
        for (i, seg) in self.segments.iter().enumerate() {
            let Ok(key) = seg.keys() else {
                return Some(i);
            };
            if key.0 >= key.1 || previous.is_some_and(|p| p >= key) {
                return Some(i);
            }
            previous = Some(key);
        }
        None
    }

    pub fn is_canonical(&self) -> bool {
        self.first_non_canonical().is_none()
    }

    /// Parses the seam text format: six floats `x1 y1 z1 x2 y2 z2` per line,
    /// `#` starts a comment.
    pub fn parse_text(text: &str) -> Result<SeamSet, TokenError> {
        let mut segments = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let values: Vec<f64> = body
                .split_whitespace()
                .map(|f| f.parse::<f64>().ok().filter(|x| x.is_finite()))
                .collect::<Option<_>>()
                .ok_or_else(|| TokenError::Parse {
                    line: i + 1,
                    message: format!("invalid number in '{body}'"),
                })?;
            if values.len() != 6 {
                return Err(TokenError::Parse {
                    line: i + 1,
                    message: format!("expected 6 values, found {}", values.len()),
                });
            }
            segments.push(Segment::new(
                Vec3::new(values[0], values[1], values[2]),
                Vec3::new(values[3], values[4], values[5]),
            ));
        }
        Ok(SeamSet::new(segments))
    }

    /// Writes the seam text format with full round-trip precision.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.segments {
            let _ = writeln!(
                out,
                "{:?} {:?} {:?} {:?} {:?} {:?}",
                s.a.x, s.a.y, s.a.z, s.b.x, s.b.y, s.b.z
            );
        }
        out
    }
}

/// `BOS`, six coordinate tokens per segment, `EOS`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub tokens: Vec<u16>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn segment_count(&self) -> usize {
        self.tokens.len().saturating_sub(2) / TOKENS_PER_SEGMENT
    }

    /// One integer per line.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.tokens.len() * 5);
        for t in &self.tokens {
            let _ = writeln!(out, "{t}");
        }
        out
    }

    pub fn parse_text(text: &str) -> Result<TokenSequence, TokenError> {
        let tokens = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                l.trim()
                    .parse::<u16>()
                    .ok()
                    .filter(|&t| (t as usize) < VOCAB_SIZE)
                    .ok_or_else(|| TokenError::Parse {
                        line: i + 1,
                        message: format!("invalid token '{}'", l.trim()),
                    })
            })
            .collect::<Result<_, _>>()?;
        Ok(TokenSequence { tokens })
    }
}

pub fn encode(seams: &SeamSet) -> Result<TokenSequence, TokenError> {
    if let Some(i) = seams.first_non_canonical() {
        return Err(TokenError::NotCanonical(i));
    }
    let mut tokens = Vec::with_capacity(2 + TOKENS_PER_SEGMENT * seams.len());
    tokens.push(BOS);
    for seg in &seams.segments {
        let (a, b) = seg.keys()?;
        tokens.extend_from_slice(&a.0);
        tokens.extend_from_slice(&b.0);
    }
    tokens.push(EOS);
    Ok(TokenSequence { tokens })
}

/// Canonicalizes then encodes.
pub fn tokenize(seams: &SeamSet) -> Result<TokenSequence, TokenError> {
    encode(&seams.canonicalize()?)
}

/// Inverse of [`encode`]. Trailing `PAD` tokens after `EOS` are accepted.
/// Endpoints are placed at bin centers and the result is canonicalized.
pub fn decode(seq: &TokenSequence) -> Result<SeamSet, TokenError> {
    let tokens = &seq.tokens;
    let malformed = |position: usize, reason: &str| TokenError::Malformed {
        position,
        reason: reason.to_string(),
    };
    match tokens.first() {
        Some(&BOS) => {}
        Some(_) => return Err(malformed(0, "expected BOS")),
        None => return Err(malformed(0, "empty sequence")),
    }
    let mut segments = Vec::new();
    let mut block = [0u16; TOKENS_PER_SEGMENT];
    let mut filled = 0;
    let mut position = 1;
    loop {
        let Some(&t) = tokens.get(position) else {
            return Err(malformed(position, "missing EOS"));
        };
        match t {
            EOS if filled == 0 => break,
            EOS => return Err(malformed(position, "EOS inside a segment")),
            t if t < BINS => {
                block[filled] = t;
                filled += 1;
                if filled == TOKENS_PER_SEGMENT {
                    let a = QuantizedPoint([block[0], block[1], block[2]]);
                    let b = QuantizedPoint([block[3], block[4], block[5]]);
                    segments.push(Segment::new(a.to_point(), b.to_point()));
                    filled = 0;
                }
            }
            _ => return Err(malformed(position, "expected a coordinate token")),
        }
        position += 1;
    }
    if let Some(offset) = tokens[position + 1..].iter().position(|&t| t != PAD) {
        return Err(malformed(position + 1 + offset, "tokens after EOS"));
    }
    SeamSet::new(segments).canonicalize()
}

/// Truncates a possibly malformed sampled sequence to its last complete
/// segment and terminates it. Returns the repaired sequence and whether a
/// repair was needed.
pub fn repair(tokens: &[u16]) -> (TokenSequence, bool) {
    let body_start = usize::from(tokens.first() == Some(&BOS));
    let mut body: Vec<u16> = tokens[body_start..]
        .iter()
        .copied()
        .take_while(|&t| t < BINS)
        .collect();
    let terminated = tokens.get(body_start + body.len()) == Some(&EOS);
    let complete = body.len() - body.len() % TOKENS_PER_SEGMENT;
    let needed_repair = body_start == 0 || !terminated || complete != body.len()
        || tokens.len() != body_start + body.len() + 1;
    body.truncate(complete);
    let mut out = Vec::with_capacity(body.len() + 2);
    out.push(BOS);
    out.extend(body);
    out.push(EOS);
    (TokenSequence { tokens: out }, needed_repair)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn p(x: f64, y: f64, z: f64) -> Vec3 {
        Vec3::new(x, y, z)
    }

    #[test]
    fn quantize_boundaries() {
        assert_eq!(quantize(-0.5), Ok(0));
        assert_eq!(quantize(0.5), Ok(1023));
        assert_eq!(quantize(0.0), Ok(512));
        assert_eq!(quantize(0.5 + 5e-10), Ok(1023));
        assert_eq!(quantize(-0.5 - 5e-10), Ok(0));
        assert!(quantize(0.51).is_err());
        assert!(quantize(f64::NAN).is_err());
        // Bin 512 spans [0, 1/1024); its center is 1/2048.
        assert_eq!(dequantize(512), 0.00048828125);
        assert!((dequantize(512) - 0.0).abs() <= HALF_BIN);
    }

    #[test]
    fn endpoints_swapped_into_order() {
        let s = SeamSet::new(vec![Segment::new(p(0.0, 0.3, 0.0), p(0.0, -0.3, 0.0))]);
        let c = s.canonicalize().unwrap();
        assert_eq!(c.segments[0].a.y, -0.3);
        assert_eq!(c.segments[0].b.y, 0.3);
        assert!(!s.is_canonical());
        assert!(c.is_canonical());
    }

    #[test]
    fn yzx_priority() {
        // Same y: z decides before x.
        let low = p(0.4, 0.1, -0.2);
        let high = p(-0.4, 0.1, 0.2);
        let s = SeamSet::new(vec![Segment::new(high, low)]);
        let c = s.canonicalize().unwrap();
        assert_eq!(c.segments[0].a, low);
    }

    #[test]
    fn canonical_set_unchanged() {
        let s = SeamSet::new(vec![
            Segment::new(p(0.0, -0.2, 0.0), p(0.1, 0.2, 0.0)),
            Segment::new(p(0.0, -0.1, 0.0), p(0.0, 0.0, 0.0)),
            Segment::new(p(0.0, -0.1, 0.0), p(0.0, 0.3, 0.0)),
        ]);
        assert!(s.is_canonical());
        assert_eq!(s.canonicalize().unwrap(), s);
    }

    #[test]
    fn duplicates_and_zero_length_dropped() {
        let s = SeamSet::new(vec![
            Segment::new(p(0.0, 0.1, 0.0), p(0.0, 0.2, 0.0)),
            Segment::new(p(0.0, 0.2, 0.0), p(0.0, 0.1, 0.0)),
            Segment::new(p(0.0, 0.2, 0.0), p(0.0, 0.20001, 0.0)),
        ]);
        let c = s.canonicalize().unwrap();
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn encode_shapes() {
        assert_eq!(encode(&SeamSet::default()).unwrap().tokens, vec![BOS, EOS]);
        let s = SeamSet::new(vec![Segment::new(p(0.0, -0.5, 0.1), p(0.2, 0.5, 0.0))]);
        let t = encode(&s).unwrap();
        assert_eq!(t.len(), 8);
        assert_eq!(t.tokens[1..7], [0, quantize(0.1).unwrap(), 512, 1023, 512, quantize(0.2).unwrap()]);
        let flipped = SeamSet::new(vec![Segment::new(s.segments[0].b, s.segments[0].a)]);
        assert_eq!(encode(&flipped), Err(TokenError::NotCanonical(0)));
    }

    #[test]
    fn decode_errors() {
        assert_eq!(decode(&TokenSequence { tokens: vec![BOS, EOS] }).unwrap(), SeamSet::default());
        let err = decode(&TokenSequence { tokens: vec![BOS, 1, 2, 3, 4, 5, EOS] }).unwrap_err();
        assert!(matches!(err, TokenError::Malformed { position: 6, .. }), "{err}");
        let err = decode(&TokenSequence { tokens: vec![1, EOS] }).unwrap_err();
        assert!(matches!(err, TokenError::Malformed { position: 0, .. }));
        let err = decode(&TokenSequence { tokens: vec![BOS, 1, 2, 3] }).unwrap_err();
        assert!(matches!(err, TokenError::Malformed { position: 4, .. }));
        let err = decode(&TokenSequence { tokens: vec![BOS, 1, 2, PAD, 4, 5, 6, EOS] }).unwrap_err();
        assert!(matches!(err, TokenError::Malformed { position: 3, .. }));
        let err = decode(&TokenSequence { tokens: vec![BOS, EOS, PAD, 7] }).unwrap_err();
        assert!(matches!(err, TokenError::Malformed { position: 3, .. }));
        assert!(decode(&TokenSequence { tokens: vec![BOS, EOS, PAD, PAD] }).is_ok());
    }

    #[test]
    fn repair_truncates_to_complete_segments() {
        let (t, fixed) = repair(&[BOS, 1, 2, 3, 4, 5, 6, 7, 8, EOS]);
        assert!(fixed);
        assert_eq!(t.tokens, vec![BOS, 1, 2, 3, 4, 5, 6, EOS]);
        let (t, fixed) = repair(&[BOS, 1, 2, 3, 4, 5, 6, EOS]);
        assert!(!fixed);
        assert_eq!(t.len(), 8);
        let (t, fixed) = repair(&[BOS, 1, 2, 3]);
        assert!(fixed);
        assert_eq!(t.tokens, vec![BOS, EOS]);
    }

    #[test]
    fn seam_text_round_trip() {
        let text = "# seams\n0.1 0.2 0.3 -0.1 -0.2 -0.3\n\n0 0 0 0.5 0.5 0.5 # tail\n";
        let s = SeamSet::parse_text(text).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(SeamSet::parse_text(&s.to_text()).unwrap(), s);
        assert!(matches!(
            SeamSet::parse_text("0 0 0 1 1\n"),
            Err(TokenError::Parse { line: 1, .. })
        ));
        assert!(SeamSet::parse_text("").unwrap().is_empty());
    }

    #[test]
    fn token_text_round_trip() {
        let t = TokenSequence { tokens: vec![BOS, 3, 1023, 0, 9, 9, 9, EOS] };
        assert_eq!(TokenSequence::parse_text(&t.to_text()).unwrap(), t);
        assert!(TokenSequence::parse_text("1024\n2000\n").is_err());
    }

    pub(crate) fn random_seams(rng: &mut ChaCha8Rng, max: usize) -> SeamSet {
        let n = rng.random_range(0..=max);
        let mut coord = || rng.random_range(-0.5..=0.5);
        SeamSet::new(
            (0..n)
                .map(|_| Segment::new(p(coord(), coord(), coord()), p(coord(), coord(), coord())))
                .collect(),
        )
    }

    /// Independent oracle: insertion-style comparison sort over explicit
    /// `(y, z, x)` integer tuples.
    fn oracle_canonical_keys(s: &SeamSet) -> Vec<[u16; 6]> {
        let q = |v: f64| ((v + 0.5) * 1024.0).floor().clamp(0.0, 1023.0) as u16;
        let mut keys: Vec<[u16; 6]> = Vec::new();
        for seg in &s.segments {
            let ka = [q(seg.a.y), q(seg.a.z), q(seg.a.x)];
            let kb = [q(seg.b.y), q(seg.b.z), q(seg.b.x)];
            if ka == kb {
                continue;
            }
            let (lo, hi) = if ka < kb { (ka, kb) } else { (kb, ka) };
            let key = [lo[0], lo[1], lo[2], hi[0], hi[1], hi[2]];
            if !keys.contains(&key) {
                let at = keys.iter().position(|k| *k > key).unwrap_or(keys.len());
                keys.insert(at, key);
            }
        }
        keys
    }

    #[test]
    fn shuffled_sets_share_canonical_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let base = random_seams(&mut rng, 50);
        let expected = base.canonicalize().unwrap();
        let keys: Vec<[u16; 6]> = encode(&expected).unwrap().tokens[1..]
            .chunks_exact(6)
            .map(|c| c.try_into().unwrap())
            .collect();
        assert_eq!(keys, oracle_canonical_keys(&base));
        for _ in 0..20 {
            let mut segs = base.segments.clone();
            segs.shuffle(&mut rng);
            for s in &mut segs {
                if rng.random_bool(0.5) {
                    *s = s.flipped();
                }
            }
            assert_eq!(SeamSet::new(segs).canonicalize().unwrap(), expected);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn geometric_round_trip(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_seams(&mut rng, 30).canonicalize().unwrap();
            let back = decode(&encode(&s).unwrap()).unwrap();
            prop_assert_eq!(back.len(), s.len());
            for (x, y) in s.segments.iter().zip(&back.segments) {
                for (u, v) in [(x.a, y.a), (x.b, y.b)] {
                    prop_assert!((u - v).abs().max() <= HALF_BIN);
                }
            }
        }

        #[test]
        fn token_round_trip(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tokens = tokenize(&random_seams(&mut rng, 30)).unwrap();
            prop_assert_eq!(encode(&decode(&tokens).unwrap()).unwrap(), tokens);
        }

        #[test]
        fn canonicalize_is_idempotent(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let once = random_seams(&mut rng, 30).canonicalize().unwrap();
            prop_assert_eq!(once.canonicalize().unwrap(), once.clone());
            prop_assert!(once.is_canonical());
        }
    }
}
