use std::collections::HashMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::CorpusError;

/// Token id.
pub type TokenId = u32;

/// Number of reserved ids at the top of every vocabulary.
pub const SPECIAL_COUNT: usize = 5;

const BYTE_COUNT: usize = 256;
const FORMAT_VERSION: u32 = 1;

/// The reserved special-token block. Ids are the top five of the vocabulary
/// in this order: pad, blank, delimiter 1–3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub pad: TokenId,
    pub blank: TokenId,
    pub delimiter: [TokenId; 3],
}

impl SpecialTokens {
    pub fn for_vocab(vocab_size: usize) -> Self {
        let base = (vocab_size - SPECIAL_COUNT) as TokenId;
        Self { pad: base, blank: base + 1, delimiter: [base + 2, base + 3, base + 4] }
    }

    pub fn contains(&self, id: TokenId) -> bool {
        id == self.pad || id == self.blank || self.delimiter.contains(&id)
    }
}

/// Byte-level BPE tokenizer.
///
/// Ids `0..256` are raw bytes, followed by one id per learned merge, followed
/// by the special block. Any byte string can be encoded, so encoding never
/// fails and `decode(encode(s)) == s`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    vocab: Vec<Vec<u8>>,
    merges: Vec<(TokenId, TokenId)>,
    specials: SpecialTokens,
    ranks: HashMap<(TokenId, TokenId), u32>,
}

/// Splits text into pre-tokenization pieces: a new piece starts at each
/// whitespace byte that follows a non-whitespace byte. Merges never cross
/// piece boundaries.
fn pieces(text: &[u8]) -> impl Iterator<Item = &[u8]> {
    let mut start = 0;
    std::iter::from_fn(move || {
        if start >= text.len() {
            return None;
        }
        let mut i = start + 1;
        while i < text.len() && !(text[i].is_ascii_whitespace() && !text[i - 1].is_ascii_whitespace()) {
            i += 1;
        }
        let piece = &text[start..i];
        start = i;
        Some(piece)
    })
}

fn merge_pair(symbols: &mut Vec<TokenId>, pair: (TokenId, TokenId), new_id: TokenId) {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && (symbols[i], symbols[i + 1]) == pair {
            out.push(new_id);
            i += 2;
        } else {
            out.push(symbols[i]);
            i += 1;
        }
    }
    *symbols = out;
}

impl Tokenizer {
    /// Learns merges over `documents` until the vocabulary (including the
    /// special block) reaches `vocab_size` or no adjacent pair remains. Ties
    /// between equally frequent pairs go to the smaller pair ids.
    pub fn train<S: AsRef<str>>(documents: &[S], vocab_size: usize) -> Result<Self, CorpusError> {
        if vocab_size <= BYTE_COUNT + SPECIAL_COUNT {
            return Err(CorpusError::VocabTooSmall { requested: vocab_size, minimum: BYTE_COUNT + SPECIAL_COUNT + 1 });
        }
        let mut counts: HashMap<&[u8], u64> = HashMap::new();
        for doc in documents {
            for piece in pieces(doc.as_ref().as_bytes()) {
                *counts.entry(piece).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(CorpusError::Empty);
        }
        let mut words: Vec<(Vec<TokenId>, u64)> =
            counts.into_iter().map(|(p, c)| (p.iter().map(|&b| b as TokenId).collect(), c)).collect();
        words.sort_unstable();

        let mut vocab: Vec<Vec<u8>> = (0..BYTE_COUNT).map(|b| vec![b as u8]).collect();
        let mut merges = Vec::new();
        let target = vocab_size - SPECIAL_COUNT;
        while vocab.len() < target {
            let mut pair_counts: HashMap<(TokenId, TokenId), u64> = HashMap::new();
            for (symbols, count) in &words {
                for w in symbols.windows(2) {
                    *pair_counts.entry((w[0], w[1])).or_default() += count;
                }
            }
            let Some((&best, _)) = pair_counts
                .iter()
                .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
            else {
                break;
            };
            let new_id = vocab.len() as TokenId;
            let mut bytes = vocab[best.0 as usize].clone();
            bytes.extend_from_slice(&vocab[best.1 as usize]);
            vocab.push(bytes);
            merges.push(best);
            for (symbols, _) in &mut words {
                if symbols.len() > 1 {
                    merge_pair(symbols, best, new_id);
                }
            }
        }
        if vocab.len() < target {
            log::warn!("tokenizer training ran out of pairs at {} merges; vocabulary is {}", merges.len(), vocab.len() + SPECIAL_COUNT);
        }
        Ok(Self::assemble(vocab, merges))
    }

    fn assemble(mut vocab: Vec<Vec<u8>>, merges: Vec<(TokenId, TokenId)>) -> Self {
        let specials = SpecialTokens::for_vocab(vocab.len() + SPECIAL_COUNT);
        vocab.extend(std::iter::repeat(Vec::new()).take(SPECIAL_COUNT));
        let ranks = merges.iter().enumerate().map(|(r, &p)| (p, r as u32)).collect();
        Self { vocab, merges, specials, ranks }
    }

    /// Size of the id space `|t|`, specials included.
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn specials(&self) -> SpecialTokens {
        self.specials
    }

    pub fn pad(&self) -> TokenId {
        self.specials.pad
    }

    /// Number of ids that ordinary text can produce (`|t| − 5`).
    pub fn text_vocab_size(&self) -> usize {
        self.vocab.len() - SPECIAL_COUNT
    }

    pub fn merges(&self) -> &[(TokenId, TokenId)] {
        &self.merges
    }

    /// Bytes of a non-special id.
    pub fn token_bytes(&self, id: TokenId) -> Option<&[u8]> {
        if (id as usize) < self.text_vocab_size() {
            Some(&self.vocab[id as usize])
        } else {
            None
        }
    }

    fn encode_piece(&self, piece: &[u8], out: &mut Vec<TokenId>) {
        let mut symbols: Vec<TokenId> = piece.iter().map(|&b| b as TokenId).collect();
        while symbols.len() > 1 {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&r| (r, (w[0], w[1]))))
                .min();
            let Some((rank, pair)) = best else { break };
            merge_pair(&mut symbols, pair, (BYTE_COUNT + rank as usize) as TokenId);
        }
        out.extend_from_slice(&symbols);
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut cache = HashMap::new();
        let mut out = Vec::with_capacity(text.len() / 3);
        self.encode_cached(text, &mut cache, &mut out);
        out
    }

    /// Encodes many documents, memoizing repeated pieces across them.
    pub fn encode_all<S: AsRef<str>>(&self, documents: &[S]) -> Vec<Vec<TokenId>> {
        let mut cache = HashMap::new();
        documents
            .iter()
            .map(|d| {
                let mut out = Vec::new();
                self.encode_cached(d.as_ref(), &mut cache, &mut out);
                out
            })
            .collect()
    }

    fn encode_cached<'t>(&self, text: &'t str, cache: &mut HashMap<&'t [u8], Vec<TokenId>>, out: &mut Vec<TokenId>) {
        for piece in pieces(text.as_bytes()) {
            let ids = cache.entry(piece).or_insert_with(|| {
                let mut ids = Vec::new();
                self.encode_piece(piece, &mut ids);
                ids
            });
            out.extend_from_slice(ids);
        }
    }

    /// Concatenated bytes of `ids`; special ids contribute nothing.
    pub fn decode_bytes(&self, ids: &[TokenId]) -> Vec<u8> {
        ids.iter().filter_map(|&id| self.token_bytes(id)).flatten().copied().collect()
    }

    /// Decodes to text, replacing invalid UTF-8 (possible for arbitrary id
    /// sequences, never for the output of [`encode`](Self::encode)).
    pub fn decode(&self, ids: &[TokenId]) -> String {
        String::from_utf8_lossy(&self.decode_bytes(ids)).into_owned()
    }

    pub fn to_json(&self) -> String {
        let file = TokenizerFile {
            version: FORMAT_VERSION,
            vocab_size: self.vocab.len(),
            vocab: self.vocab[..self.text_vocab_size()].iter().map(|b| STANDARD.encode(b)).collect(),
            merges: self.merges.clone(),
            specials: self.specials,
        };
        serde_json::to_string_pretty(&file).expect("tokenizer serializes")
    }

    pub fn from_json(json: &str) -> Result<Self, CorpusError> {
        let file: TokenizerFile = serde_json::from_str(json).map_err(|e| CorpusError::Format(e.to_string()))?;
        if file.version != FORMAT_VERSION {
            return Err(CorpusError::Format(format!("unsupported tokenizer version {}", file.version)));
        }
        let vocab = file
            .vocab
            .iter()
            .map(|s| STANDARD.decode(s))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CorpusError::Format(e.to_string()))?;
        let rebuilt = Self::assemble(vocab, file.merges);
        let consistent = rebuilt.vocab.len() == file.vocab_size
            && rebuilt.specials == file.specials
            && rebuilt.vocab[..BYTE_COUNT].iter().enumerate().all(|(b, v)| v == &[b as u8])
            && rebuilt.merges.iter().enumerate().all(|(r, &(a, b))| {
                let id = BYTE_COUNT + r;
                (a as usize) < id && (b as usize) < id && {
                    let mut joined = rebuilt.vocab[a as usize].clone();
                    joined.extend_from_slice(&rebuilt.vocab[b as usize]);
                    joined == rebuilt.vocab[id]
                }
            });
        if !consistent {
            return Err(CorpusError::Format("vocabulary, merges and special block disagree".into()));
        }
        Ok(rebuilt)
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        std::fs::write(path, self.to_json()).map_err(|e| CorpusError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let json = std::fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
        Self::from_json(&json)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TokenizerFile {
    version: u32,
    vocab_size: usize,
    /// Base64 bytes of every non-special id, in id order.
    vocab: Vec<String>,
    merges: Vec<(TokenId, TokenId)>,
    specials: SpecialTokens,
}
