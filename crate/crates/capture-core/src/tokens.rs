//! Reserved vocabulary ids shared by the corpus and the model.

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const MASK: u32 = 3;
pub const IMG: u32 = 4;

/// Number of reserved ids at the bottom of every vocabulary.
pub const RESERVED: u32 = 5;

pub fn reserved_name(id: u32) -> Option<&'static str> {
    match id {
        PAD => Some("[PAD]"),
        CLS => Some("[CLS]"),
        SEP => Some("[SEP]"),
        MASK => Some("[MASK]"),
        IMG => Some("[IMG]"),
        _ => None,
    }
}
