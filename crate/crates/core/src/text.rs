//! Byte-fallback tokenizer and the turn-based dialogue formatter.
//!
//! Ids `0..262` are reserved: six control tokens followed by the 256 byte
//! tokens. Learned pieces follow from id 262. Encoding is greedy
//! longest-match over pieces with three guarantees:
//!
//! * every decimal digit becomes its own token,
//! * whitespace is kept verbatim,
//! * characters no piece covers fall back to their UTF-8 byte tokens.
//!
//! Control ids are never produced from raw text; only the dialogue encoder
//! emits them.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub const PAD: TokenId = TokenId(0);
    pub const BOS: TokenId = TokenId(1);
    pub const EOS: TokenId = TokenId(2);
    pub const UNK: TokenId = TokenId(3);
    pub const START_OF_TURN: TokenId = TokenId(4);
    pub const END_OF_TURN: TokenId = TokenId(5);

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn is_control(self) -> bool {
        self.0 < FIRST_BYTE_ID
    }

    pub fn byte(b: u8) -> TokenId {
        TokenId(FIRST_BYTE_ID + b as u32)
    }

    pub fn as_byte(self) -> Option<u8> {
        (FIRST_BYTE_ID..FIRST_PIECE_ID)
            .contains(&self.0)
            .then(|| (self.0 - FIRST_BYTE_ID) as u8)
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub const CONTROL_NAMES: [&str; 6] = [
    "<pad>",
    "<bos>",
    "<eos>",
    "<unk>",
    "<start_of_turn>",
    "<end_of_turn>",
];
const FIRST_BYTE_ID: u32 = CONTROL_NAMES.len() as u32;
/// First id available to learned pieces.
pub const FIRST_PIECE_ID: u32 = FIRST_BYTE_ID + 256;

pub const VOCAB_HEADER: &str = "#gemma-vocab v1";

#[derive(Debug, Error)]
pub enum TextError {
    #[error("token id {id} is outside the vocabulary of {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("dialogue has no turns")]
    EmptyDialogue,
    #[error("vocab file: missing `{VOCAB_HEADER}` header")]
    MissingHeader,
    #[error("vocab line {line}: {reason}")]
    BadLine { line: usize, reason: String },
    #[error("reserved id {id} must be `{expected}`")]
    ReservedMismatch { id: u32, expected: String },
    #[error("duplicate piece {0:?}")]
    DuplicatePiece(String),
    #[error("piece {0:?} is empty or spans digits")]
    InvalidPiece(String),
    #[error("malformed dialogue token stream: {0}")]
    MalformedDialogue(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn reserved_name(id: u32) -> String {
    match id {
        i if i < FIRST_BYTE_ID => CONTROL_NAMES[i as usize].to_string(),
        i => format!("<0x{:02X}>", i - FIRST_BYTE_ID),
    }
}

#[derive(Debug, Clone)]
pub struct Vocab {
    /// Learned pieces, indexed by `id - FIRST_PIECE_ID`.
    pieces: Vec<String>,
    lookup: HashMap<String, TokenId>,
    max_piece_chars: usize,
}

impl Vocab {
    /// Reserved entries only; every string encodes as bytes (and single digits).
    pub fn bytes_only() -> Self {
        Self { pieces: Vec::new(), lookup: HashMap::new(), max_piece_chars: 0 }
    }

    /// Appends learned pieces after the reserved block in the given order.
    pub fn with_pieces<I, S>(pieces: I) -> Result<Self, TextError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Self::bytes_only();
        for p in pieces {
            vocab.push_piece(p.into())?;
        }
        Ok(vocab)
    }

    fn push_piece(&mut self, piece: String) -> Result<(), TextError> {
        let digits = piece.chars().filter(|c| c.is_ascii_digit()).count();
        if piece.is_empty() || (digits > 0 && piece.chars().count() > 1) {
            return Err(TextError::InvalidPiece(piece));
        }
        if self.lookup.contains_key(&piece) {
            return Err(TextError::DuplicatePiece(piece));
        }
        let id = TokenId(FIRST_PIECE_ID + self.pieces.len() as u32);
        self.max_piece_chars = self.max_piece_chars.max(piece.chars().count());
        self.lookup.insert(piece.clone(), id);
        self.pieces.push(piece);
        Ok(())
    }

    /// A small English-oriented vocabulary: single digits, printable ASCII,
    /// and frequent words with and without a leading space.
    pub fn default_english() -> Self {
        let mut pieces: Vec<String> = (b' '..=b'~').map(|b| (b as char).to_string()).collect();
        pieces.push("\n".into());
        for w in COMMON_WORDS {
            pieces.push(w.to_string());
            pieces.push(format!(" {w}"));
        }
        for w in ["user", "model", "Who", "there", "Knock", "knock"] {
            pieces.push(w.to_string());
            pieces.push(format!(" {w}"));
        }
        pieces.push("  ".into());
        pieces.push("    ".into());
        let mut seen = std::collections::HashSet::new();
        pieces.retain(|p| seen.insert(p.clone()));
        Self::with_pieces(pieces).expect("built-in pieces are valid")
    }

    /// Total number of ids, reserved entries included.
    pub fn len(&self) -> usize {
        FIRST_PIECE_ID as usize + self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Display text of an id: control names, `<0xHH>` for bytes, or the piece.
    pub fn token_text(&self, id: TokenId) -> Option<String> {
        if id.0 < FIRST_PIECE_ID {
            Some(reserved_name(id.0))
        } else {
            self.pieces.get((id.0 - FIRST_PIECE_ID) as usize).cloned()
        }
    }

    pub fn piece_id(&self, piece: &str) -> Option<TokenId> {
        self.lookup.get(piece).copied()
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(text.len());
        let mut rest = text;
        while let Some(first) = rest.chars().next() {
            let consumed = if first.is_ascii_digit() {
                self.emit_exact(&rest[..1], &mut out);
                1
            } else {
                match self.longest_match(rest) {
                    Some((len, id)) => {
                        out.push(id);
                        len
                    }
                    None => {
                        let len = first.len_utf8();
                        out.extend(rest[..len].bytes().map(TokenId::byte));
                        len
                    }
                }
            };
            rest = &rest[consumed..];
        }
        out
    }

    fn emit_exact(&self, s: &str, out: &mut Vec<TokenId>) {
        match self.lookup.get(s) {
            Some(&id) => out.push(id),
            None => out.extend(s.bytes().map(TokenId::byte)),
        }
    }

    // Longest piece prefix of `s` that stops before any digit.
    fn longest_match(&self, s: &str) -> Option<(usize, TokenId)> {
        let mut ends: Vec<usize> = Vec::with_capacity(self.max_piece_chars);
        for (i, c) in s.char_indices().take(self.max_piece_chars) {
            if c.is_ascii_digit() {
                break;
            }
            ends.push(i + c.len_utf8());
        }
        ends.into_iter()
            .rev()
            .find_map(|end| self.lookup.get(&s[..end]).map(|&id| (end, id)))
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String, TextError> {
        let mut out = String::new();
        let mut pending: Vec<u8> = Vec::new();
        for &id in ids {
            if let Some(b) = id.as_byte() {
                pending.push(b);
                continue;
            }
            flush_bytes(&mut pending, &mut out);
            let text = self
                .token_text(id)
                .ok_or(TextError::IdOutOfRange { id: id.0, size: self.len() })?;
            out.push_str(&text);
        }
        flush_bytes(&mut pending, &mut out);
        Ok(out)
    }

    /// Like [`Vocab::decode`], rendering ids past the end of the vocabulary
    /// as `<unk>`. Model embeddings may have more rows than the tokenizer has
    /// entries, so generated ids are decoded this way.
    pub fn decode_lossy(&self, ids: &[TokenId]) -> String {
        let len = self.len() as u32;
        let mapped: Vec<TokenId> =
            ids.iter().map(|&id| if id.0 < len { id } else { TokenId::UNK }).collect();
        self.decode(&mapped).expect("every id is in range")
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{VOCAB_HEADER}")?;
        for id in 0..self.len() as u32 {
            let text = self.token_text(TokenId(id)).expect("dense ids");
            writeln!(w, "{id}\t{}", escape(&text))?;
        }
        Ok(())
    }

    /// Parses `id<TAB>piece` lines after the header; reserved ids come first
    /// and must carry their fixed names.
    pub fn read_from<R: BufRead>(r: R) -> Result<Self, TextError> {
        let mut lines = r.lines().enumerate();
        let header = lines.next().map(|(_, l)| l).transpose()?;
        if header.as_deref().map(|h| h.trim_end_matches('\r')) != Some(VOCAB_HEADER) {
            return Err(TextError::MissingHeader);
        }
        let mut vocab = Self::bytes_only();
        let mut expected_id = 0u32;
        for (n, line) in lines {
            let line = line?;
            let lineno = n + 1;
            if line.is_empty() {
                continue;
            }
            let bad = |reason: &str| TextError::BadLine { line: lineno, reason: reason.into() };
            let (id, piece) = line.split_once('\t').ok_or_else(|| bad("expected id<TAB>piece"))?;
            let id: u32 = id.parse().map_err(|_| bad("id is not an integer"))?;
            if id != expected_id {
                return Err(bad(&format!("expected id {expected_id}, found {id}")));
            }
            let piece = unescape(piece).map_err(|e| bad(&e))?;
            if id < FIRST_PIECE_ID {
                let expected = reserved_name(id);
                if piece != expected {
                    return Err(TextError::ReservedMismatch { id, expected });
                }
            } else {
                vocab.push_piece(piece)?;
            }
            expected_id += 1;
        }
        if expected_id < FIRST_PIECE_ID {
            return Err(TextError::ReservedMismatch {
                id: expected_id,
                expected: reserved_name(expected_id),
            });
        }
        Ok(vocab)
    }
}

fn flush_bytes(pending: &mut Vec<u8>, out: &mut String) {
    if !pending.is_empty() {
        out.push_str(&String::from_utf8_lossy(pending));
        pending.clear();
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Result<String, String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            other => return Err(format!("bad escape \\{}", other.map(String::from).unwrap_or_default())),
        }
    }
    Ok(out)
}

const COMMON_WORDS: [&str; 48] = [
    "the", "of", "and", "to", "in", "is", "that", "for", "it", "as", "was", "with", "be", "by",
    "on", "not", "he", "this", "are", "or", "his", "from", "at", "which", "but", "have", "an",
    "had", "they", "you", "were", "their", "one", "all", "we", "can", "her", "has", "there",
    "been", "if", "more", "when", "will", "would", "who", "so", "no",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Model,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::User => "user",
            Role::Model => "model",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub content: String,
}

impl Turn {
    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn model(content: impl Into<String>) -> Self {
        Self { role: Role::Model, content: content.into() }
    }
}

/// Renders `<start_of_turn>{role}\n{content}<end_of_turn>\n` per turn,
/// optionally followed by an open `<start_of_turn>model\n` cue.
pub fn format_dialogue(turns: &[Turn], open_model_turn: bool) -> Result<String, TextError> {
    if turns.is_empty() {
        return Err(TextError::EmptyDialogue);
    }
    let (sot, eot) = (CONTROL_NAMES[4], CONTROL_NAMES[5]);
    let mut out = String::new();
    for t in turns {
        out.push_str(&format!("{sot}{}\n{}{eot}\n", t.role.as_str(), t.content));
    }
    if open_model_turn {
        out.push_str(&format!("{sot}model\n"));
    }
    Ok(out)
}

/// Token form of [`format_dialogue`]: control ids for the turn markers,
/// ordinary encoding for role words, content and newlines.
pub fn encode_dialogue(
    vocab: &Vocab,
    turns: &[Turn],
    open_model_turn: bool,
) -> Result<Vec<TokenId>, TextError> {
    if turns.is_empty() {
        return Err(TextError::EmptyDialogue);
    }
    let mut out = Vec::new();
    for t in turns {
        out.push(TokenId::START_OF_TURN);
        out.extend(vocab.encode(&format!("{}\n", t.role.as_str())));
        out.extend(vocab.encode(&t.content));
        out.push(TokenId::END_OF_TURN);
        out.extend(vocab.encode("\n"));
    }
    if open_model_turn {
        out.push(TokenId::START_OF_TURN);
        out.extend(vocab.encode("model\n"));
    }
    Ok(out)
}

/// Inverse of [`encode_dialogue`] for closed dialogues; splits on control ids.
pub fn parse_dialogue(vocab: &Vocab, ids: &[TokenId]) -> Result<Vec<Turn>, TextError> {
    let malformed = |m: &str| TextError::MalformedDialogue(m.to_string());
    let mut turns = Vec::new();
    let mut rest = ids;
    while !rest.is_empty() {
        if rest[0] != TokenId::START_OF_TURN {
            return Err(malformed("expected <start_of_turn>"));
        }
        let end = rest
            .iter()
            .position(|&t| t == TokenId::END_OF_TURN)
            .ok_or_else(|| malformed("missing <end_of_turn>"))?;
        let body = vocab.decode(&rest[1..end])?;
        let (role, content) = body.split_once('\n').ok_or_else(|| malformed("missing role line"))?;
        let role = match role {
            "user" => Role::User,
            "model" => Role::Model,
            other => return Err(malformed(&format!("unknown role {other:?}"))),
        };
        turns.push(Turn { role, content: content.to_string() });
        rest = &rest[end + 1..];
        let nl = vocab.encode("\n");
        if !rest.starts_with(&nl) {
            return Err(malformed("expected newline after <end_of_turn>"));
        }
        rest = &rest[nl.len()..];
    }
    Ok(turns)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_layout() {
        let v = Vocab::bytes_only();
        assert_eq!(v.len(), 262);
        assert_eq!(v.token_text(TokenId::START_OF_TURN).unwrap(), "<start_of_turn>");
        assert_eq!(v.token_text(TokenId::END_OF_TURN).unwrap(), "<end_of_turn>");
        assert_eq!(TokenId::byte(0).0, 6);
        assert_eq!(TokenId::byte(0xFF).0, 261);
        assert_eq!(v.token_text(TokenId::byte(0xAB)).unwrap(), "<0xAB>");
    }

    #[test]
    fn digits_split() {
        let v = Vocab::with_pieces(["2", "0", "4"]).unwrap();
        let ids = v.encode("2024");
        assert_eq!(ids.len(), 4);
        assert_eq!(v.decode(&ids).unwrap(), "2024");
        assert_eq!(Vocab::bytes_only().encode("2024").len(), 4);
        assert!(matches!(Vocab::with_pieces(["20"]), Err(TextError::InvalidPiece(_))));
        assert!(matches!(Vocab::with_pieces(["a1"]), Err(TextError::InvalidPiece(_))));
    }

    #[test]
    fn pieces_stop_at_digits() {
        let v = Vocab::with_pieces(["ab", "abc", "c"]).unwrap();
        let ids = v.encode("abc1abc");
        let texts: Vec<_> = ids.iter().map(|&i| v.token_text(i).unwrap()).collect();
        assert_eq!(texts, vec!["abc", "<0x31>", "abc"]);
    }

    #[test]
    fn whitespace_kept() {
        let v = Vocab::default_english();
        for s in ["a  b", "  lead", "trail   ", "tab\there", "line\n\nbreak"] {
            assert_eq!(v.decode(&v.encode(s)).unwrap(), s);
        }
    }

    #[test]
    fn unknown_chars_use_bytes() {
        let v = Vocab::default_english();
        let ids = v.encode("🦀");
        assert_eq!(ids, "🦀".bytes().map(TokenId::byte).collect::<Vec<_>>());
        assert_eq!(v.decode(&ids).unwrap(), "🦀");
    }

    #[test]
    fn decode_edge_cases() {
        let v = Vocab::default_english();
        assert_eq!(v.decode(&[]).unwrap(), "");
        assert_eq!(v.decode(&[TokenId::byte(0xF0)]).unwrap(), "\u{FFFD}");
        assert_eq!(v.decode(&[TokenId::BOS]).unwrap(), "<bos>");
        assert!(matches!(
            v.decode(&[TokenId(v.len() as u32)]),
            Err(TextError::IdOutOfRange { .. })
        ));
    }

    #[test]
    fn control_strings_in_text_are_plain() {
        let v = Vocab::default_english();
        let ids = v.encode("<start_of_turn>user\nhi<end_of_turn>");
        assert!(ids.iter().all(|id| !id.is_control()));
    }

    #[test]
    fn single_turn_template() {
        let s = format_dialogue(&[Turn::user("Hi")], true).unwrap();
        assert_eq!(s, "<start_of_turn>user\nHi<end_of_turn>\n<start_of_turn>model\n");
        assert!(matches!(format_dialogue(&[], false), Err(TextError::EmptyDialogue)));
    }

    #[test]
    fn dialogue_tokens_render_like_the_string_form() {
        let v = Vocab::default_english();
        let turns = vec![Turn::user("Knock knock."), Turn::model("Who's there?")];
        let ids = encode_dialogue(&v, &turns, true).unwrap();
        assert_eq!(v.decode(&ids).unwrap(), format_dialogue(&turns, true).unwrap());
        let closed = encode_dialogue(&v, &turns, false).unwrap();
        assert_eq!(parse_dialogue(&v, &closed).unwrap(), turns);
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = Vocab::with_pieces(["a\tb", "back\\slash", "new\nline", "x"]).unwrap();
        let mut buf = Vec::new();
        v.write_to(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("#gemma-vocab v1\n0\t<pad>\n"));
        assert!(text.contains("262\ta\\tb\n"));
        let back = Vocab::read_from(buf.as_slice()).unwrap();
        assert_eq!(back.len(), v.len());
        for id in 0..v.len() as u32 {
            assert_eq!(back.token_text(TokenId(id)), v.token_text(TokenId(id)));
        }
    }

    #[test]
    fn vocab_file_rejections() {
        assert!(matches!(
            Vocab::read_from("0\t<pad>\n".as_bytes()),
            Err(TextError::MissingHeader)
        ));
        assert!(matches!(
            Vocab::read_from("#gemma-vocab v1\n0\t<bos>\n".as_bytes()),
            Err(TextError::ReservedMismatch { id: 0, .. })
        ));
        assert!(matches!(
            Vocab::read_from("#gemma-vocab v1\n0\t<pad>\n".as_bytes()),
            Err(TextError::ReservedMismatch { id: 1, .. })
        ));
        assert!(matches!(
            Vocab::read_from("#gemma-vocab v1\n5\t<pad>\n".as_bytes()),
            Err(TextError::BadLine { line: 2, .. })
        ));
    }
}
