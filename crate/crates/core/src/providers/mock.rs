use std::collections::{HashMap, VecDeque};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{ChatProvider, ChatRequest, EmbeddingProvider, MockMode, ProviderConfig, ProviderError};
use crate::text::tokenize;

const PAYLOAD_BASE: u32 = 0x1F300;
const KEY_BASE: u32 = 0x1F400;

/// Seeded bijective token-to-glyph codebook.
///
/// Every UTF-8 byte of a token maps to one pictograph in U+1F300..U+1F3FF
/// through a seeded permutation, so the image of a token is a glyph word and
/// the map inverts exactly. Draws with `sample > 0` use a different
/// permutation and are prefixed with a key glyph from U+1F401..U+1F4FF that
/// tells the decoder which permutation applies.
#[derive(Clone, Debug)]
pub struct MockCodebook {
    seed: u64,
}

impl MockCodebook {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn permutation(&self, key: u8) -> [u8; 256] {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (u64::from(key) << 56));
        let mut perm: Vec<u8> = (0..=255u8).collect();
        perm.shuffle(&mut rng);
        let mut out = [0u8; 256];
        out.copy_from_slice(&perm);
        out
    }

    /// Encodes the token sequence of `text`.
    pub fn encode(&self, text: &str, sample: u32) -> String {
        let key = (sample % 256) as u8;
        let perm = self.permutation(key);
        let mut words: Vec<String> = Vec::new();
        if key != 0 {
            words.push(char::from_u32(KEY_BASE + u32::from(key)).unwrap().to_string());
        }
        for token in tokenize(text).tokens {
            words.push(
                token
                    .bytes()
                    .map(|b| char::from_u32(PAYLOAD_BASE + u32::from(perm[b as usize])).unwrap())
                    .collect(),
            );
        }
        words.join(" ")
    }

    /// Inverts [`encode`](Self::encode). Words that are not codebook glyphs
    /// are kept verbatim.
    pub fn decode(&self, glyphs: &str) -> String {
        let mut words = glyphs.split_whitespace().peekable();
        let mut key = 0u8;
        if let Some(first) = words.peek() {
            let mut chars = first.chars();
            if let (Some(c), None) = (chars.next(), chars.next()) {
                let code = c as u32;
                if code > KEY_BASE && code < KEY_BASE + 256 {
                    key = (code - KEY_BASE) as u8;
                    words.next();
                }
            }
        }
        let perm = self.permutation(key);
        let mut inverse = [0u8; 256];
        for (byte, &glyph) in perm.iter().enumerate() {
            inverse[glyph as usize] = byte as u8;
        }
        words
            .map(|word| {
                let bytes: Option<Vec<u8>> = word
                    .chars()
                    .map(|c| {
                        let code = c as u32;
                        (PAYLOAD_BASE..PAYLOAD_BASE + 256)
                            .contains(&code)
                            .then(|| inverse[(code - PAYLOAD_BASE) as usize])
                    })
                    .collect();
                bytes
                    .and_then(|b| String::from_utf8(b).ok())
                    .unwrap_or_else(|| word.to_string())
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

type Responder = Box<dyn Fn(&ChatRequest) -> Result<String, ProviderError> + Send + Sync>;

enum Behavior {
    Codebook(MockCodebook),
    Inverse(MockCodebook),
    Constant(String),
    Echo,
    Scripted(Mutex<VecDeque<Result<String, ProviderError>>>),
    Func(Responder),
}

/// Deterministic chat provider that records every request it receives.
pub struct MockChat {
    behavior: Behavior,
    log: Mutex<Vec<ChatRequest>>,
}

impl MockChat {
    fn with(behavior: Behavior) -> Self {
        Self { behavior, log: Mutex::new(Vec::new()) }
    }

    pub fn codebook(seed: u64) -> Self {
        Self::with(Behavior::Codebook(MockCodebook::new(seed)))
    }

    pub fn inverse(seed: u64) -> Self {
        Self::with(Behavior::Inverse(MockCodebook::new(seed)))
    }

    pub fn constant(reply: impl Into<String>) -> Self {
        Self::with(Behavior::Constant(reply.into()))
    }

    pub fn echo() -> Self {
        Self::with(Behavior::Echo)
    }

    /// Replies with the scripted results in order; errors once exhausted.
    pub fn scripted<I>(replies: I) -> Self
    where
        I: IntoIterator<Item = Result<String, ProviderError>>,
    {
        Self::with(Behavior::Scripted(Mutex::new(replies.into_iter().collect())))
    }

    pub fn from_fn<F>(f: F) -> Self
    where
        F: Fn(&ChatRequest) -> Result<String, ProviderError> + Send + Sync + 'static,
    {
        Self::with(Behavior::Func(Box::new(f)))
    }

    pub fn from_config(cfg: &ProviderConfig) -> Self {
        match cfg.mock_mode {
            MockMode::Codebook => Self::codebook(cfg.mock_seed),
            MockMode::Inverse => Self::inverse(cfg.mock_seed),
            MockMode::Constant => Self::constant(cfg.mock_constant.clone()),
            MockMode::Echo => Self::echo(),
        }
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.log.lock().unwrap().clone()
    }

    pub fn request_count(&self) -> usize {
        self.log.lock().unwrap().len()
    }
}

impl ChatProvider for MockChat {
    fn chat(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        self.log.lock().unwrap().push(request.clone());
        match &self.behavior {
            Behavior::Codebook(book) => Ok(book.encode(&request.user, request.sample)),
            Behavior::Inverse(book) => Ok(book.decode(&request.user)),
            Behavior::Constant(reply) => Ok(reply.clone()),
            Behavior::Echo => Ok(request.user.clone()),
            Behavior::Scripted(queue) => queue
                .lock()
                .unwrap()
                .pop_front()
                .unwrap_or_else(|| Err(ProviderError::Malformed("mock script exhausted".into()))),
            Behavior::Func(f) => f(request),
        }
    }
}

/// Seeded hash-derived unit vectors. Texts with the same token sequence get
/// the same vector.
pub struct MockEmbedder {
    seed: u64,
    overrides: HashMap<String, Vec<f64>>,
    forced_len: Option<usize>,
}

impl MockEmbedder {
    pub fn new(seed: u64) -> Self {
        Self { seed, overrides: HashMap::new(), forced_len: None }
    }

    /// Pins the vector returned for `text`.
    pub fn with_vector(mut self, text: impl Into<String>, vector: Vec<f64>) -> Self {
        self.overrides.insert(text.into(), vector);
        self
    }

    /// Returns vectors of `len` components regardless of the requested size.
    pub fn with_forced_len(mut self, len: usize) -> Self {
        self.forced_len = Some(len);
        self
    }
}

impl EmbeddingProvider for MockEmbedder {
    fn embed_raw(&self, text: &str, dim: usize) -> Result<Vec<f64>, ProviderError> {
        if let Some(v) = self.overrides.get(text) {
            return Ok(v.clone());
        }
        let len = self.forced_len.unwrap_or(dim);
        let normalized = tokenize(text).tokens.join(" ");
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(normalized.as_bytes());
        let digest: [u8; 32] = hasher.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(digest);
        let mut v: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(v)
    }
}
