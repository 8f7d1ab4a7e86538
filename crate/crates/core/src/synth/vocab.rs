use std::collections::HashMap;

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const MASK: u32 = 3;
pub const UNK: u32 = 4;
pub const SPECIALS: [&str; 5] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"];

pub const CATEGORIES: [&str; 12] = [
    "shirt", "shoe", "bag", "lamp", "mug", "watch", "chair", "toy", "hat", "sofa", "clock", "vase",
];
pub const COLORS: [&str; 8] = ["red", "green", "blue", "yellow", "purple", "orange", "cyan", "black"];
pub const COLOR_RGB: [[u8; 3]; 8] = [
    [204, 32, 32],
    [32, 160, 64],
    [40, 64, 208],
    [224, 200, 32],
    [136, 48, 176],
    [240, 128, 24],
    [32, 184, 200],
    [24, 24, 24],
];
pub const SHAPES: [&str; 6] = ["circle", "square", "triangle", "diamond", "cross", "ring"];
pub const SIZES: [&str; 3] = ["small", "medium", "large"];
pub const MATERIALS: [&str; 6] = ["cotton", "leather", "metal", "wood", "plastic", "glass"];
pub const BRANDS: [&str; 16] = [
    "aurora", "boreal", "cobalt", "dune", "ember", "fjord", "granite", "harbor", "indigo", "juniper", "kestrel",
    "lumen", "meadow", "nimbus", "onyx", "prairie",
];
pub const FILLERS: [&str; 24] = [
    "new", "sale", "classic", "premium", "style", "gift", "deluxe", "basic", "modern", "vintage", "light", "soft",
    "daily", "home", "travel", "mini", "pro", "plus", "smart", "eco", "fresh", "bold", "cozy", "urban",
];

/// Word-level vocabulary: specials first, then every attribute word list in
/// a fixed order.
#[derive(Clone, Debug)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Vocab {
    fn default() -> Self {
        let words = SPECIALS
            .iter()
            .chain(&CATEGORIES)
            .chain(&COLORS)
            .chain(&SHAPES)
            .chain(&SIZES)
            .chain(&MATERIALS)
            .chain(&BRANDS)
            .chain(&FILLERS)
            .map(|w| w.to_string())
            .collect();
        Self::from_words(words)
    }
}

impl Vocab {
    pub fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        Vocab { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> &str {
        self.words.get(id as usize).map_or("[UNK]", String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Lowercased whitespace tokenization; unknown words map to `[UNK]`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| self.id(&w.to_lowercase()).unwrap_or(UNK))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter().map(|i| self.word(*i)).collect::<Vec<_>>().join(" ")
    }

    /// First id of the ordinary (non-special) words.
    pub fn first_word(&self) -> u32 {
        SPECIALS.len() as u32
    }

    pub fn category(&self, i: usize) -> u32 {
        self.id(CATEGORIES[i]).expect("category word")
    }

    pub fn color(&self, i: usize) -> u32 {
        self.id(COLORS[i]).expect("color word")
    }

    pub fn shape(&self, i: usize) -> u32 {
        self.id(SHAPES[i]).expect("shape word")
    }

    pub fn size(&self, i: usize) -> u32 {
        self.id(SIZES[i]).expect("size word")
    }

    pub fn material(&self, i: usize) -> u32 {
        self.id(MATERIALS[i]).expect("material word")
    }

    pub fn brand(&self, i: usize) -> u32 {
        self.id(BRANDS[i]).expect("brand word")
    }

    pub fn filler(&self, i: usize) -> u32 {
        self.id(FILLERS[i]).expect("filler word")
    }
}
