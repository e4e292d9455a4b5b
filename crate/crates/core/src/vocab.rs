//! Closed task vocabulary. Ids 0..3 are the latent markers.

pub type TokenId = usize;

pub const LATENT_START: TokenId = 0;
pub const LATENT_END: TokenId = 1;
pub const LATENT_PAD: TokenId = 2;
pub const EOS: TokenId = 3;
pub const ANS: TokenId = 4;
pub const NAV: TokenId = 5;
pub const TO: TokenId = 6;
pub const COUNT: TokenId = 7;
pub const MARK: TokenId = 8;
pub const UP: TokenId = 9;
pub const DOWN: TokenId = 10;
pub const LEFT: TokenId = 11;
pub const RIGHT: TokenId = 12;
const ROW_BASE: TokenId = 13;
const COL_BASE: TokenId = ROW_BASE + MAX_GRID;
const NUM_BASE: TokenId = COL_BASE + MAX_GRID;

/// Largest grid side the vocabulary can address.
pub const MAX_GRID: usize = 8;
/// Largest number token (`n0..=n16`).
pub const MAX_NUMBER: usize = 16;

pub const VOCAB_SIZE: usize = NUM_BASE + MAX_NUMBER + 1;

pub const SPECIAL_TOKENS: [TokenId; 3] = [LATENT_START, LATENT_END, LATENT_PAD];

pub fn row(r: usize) -> TokenId {
    assert!(r < MAX_GRID, "row {r} out of vocabulary range");
    ROW_BASE + r
}

pub fn col(c: usize) -> TokenId {
    assert!(c < MAX_GRID, "col {c} out of vocabulary range");
    COL_BASE + c
}

pub fn number(n: usize) -> TokenId {
    assert!(n <= MAX_NUMBER, "number {n} out of vocabulary range");
    NUM_BASE + n
}

pub fn as_number(t: TokenId) -> Option<usize> {
    (NUM_BASE..VOCAB_SIZE).contains(&t).then(|| t - NUM_BASE)
}

pub fn as_row(t: TokenId) -> Option<usize> {
    (ROW_BASE..COL_BASE).contains(&t).then(|| t - ROW_BASE)
}

pub fn as_col(t: TokenId) -> Option<usize> {
    (COL_BASE..NUM_BASE).contains(&t).then(|| t - COL_BASE)
}

pub fn is_special(t: TokenId) -> bool {
    SPECIAL_TOKENS.contains(&t)
}

pub fn name(t: TokenId) -> String {
    match t {
        LATENT_START => "<|latent_start|>".into(),
        LATENT_END => "<|latent_end|>".into(),
        LATENT_PAD => "<|latent_pad|>".into(),
        EOS => "<eos>".into(),
        ANS => "answer".into(),
        NAV => "navigate".into(),
        TO => "to".into(),
        COUNT => "count".into(),
        MARK => "mark".into(),
        UP => "up".into(),
        DOWN => "down".into(),
        LEFT => "left".into(),
        RIGHT => "right".into(),
        _ => {
            if let Some(r) = as_row(t) {
                format!("r{r}")
            } else if let Some(c) = as_col(t) {
                format!("c{c}")
            } else if let Some(n) = as_number(t) {
                n.to_string()
            } else {
                format!("<unk:{t}>")
            }
        }
    }
}

pub fn render(tokens: &[TokenId]) -> String {
    tokens.iter().map(|&t| name(t)).collect::<Vec<_>>().join(" ")
}
