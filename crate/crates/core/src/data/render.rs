//! A tiny deterministic glyph renderer for synthetic crops.
//!
//! Each character maps to a fixed 4x6 bit pattern derived from a hash of its
//! code point, drawn with 1x2 pixel cells so glyphs are distinct but
//! illegible.

use super::Crop;

/// Horizontal advance per character, in pixels.
pub const GLYPH_W: usize = 8;
/// Line height, in pixels.
pub const GLYPH_H: usize = 16;
const MARGIN: usize = 2;

fn pattern(c: char) -> u32 {
    // splitmix64 finalizer
    let mut z = (c as u64).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z as u32) & 0x00FF_FFFF
}

/// Width in pixels of the crop for `n` characters.
pub fn text_width(n: usize) -> usize {
    GLYPH_W * n + 2 * MARGIN
}

/// Renders `text` in `color` on a white background.
pub fn render_text(text: &str, color: [u8; 3]) -> Crop {
    let chars: Vec<char> = text.chars().collect();
    let (h, w) = (GLYPH_H, text_width(chars.len()));
    let mut crop = Crop::uniform(h, w, 1.0);
    let ink = color.map(|c| c as f64 / 255.0);
    for (k, &c) in chars.iter().enumerate() {
        if c.is_whitespace() {
            continue;
        }
        let bits = pattern(c);
        let x0 = MARGIN + k * GLYPH_W + 2;
        for row in 0..6 {
            for col in 0..4 {
                if bits >> (row * 4 + col) & 1 == 0 {
                    continue;
                }
                for dy in 0..2 {
                    let (y, x) = (2 + 2 * row + dy, x0 + col);
                    let o = (y * w + x) * 3;
                    crop.data[o..o + 3].copy_from_slice(&ink);
                }
            }
        }
    }
    crop
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_follows_length() {
        let c = render_text("abc", [0, 0, 0]);
        assert_eq!((c.height, c.width), (GLYPH_H, 3 * GLYPH_W + 4));
    }

    #[test]
    fn deterministic_and_distinct() {
        assert_eq!(render_text("ab", [0, 0, 0]), render_text("ab", [0, 0, 0]));
        assert_ne!(render_text("ab", [0, 0, 0]), render_text("ba", [0, 0, 0]));
        assert_ne!(render_text("ab", [0, 0, 0]), render_text("ab", [200, 0, 0]));
    }

    #[test]
    fn whitespace_leaves_background() {
        let c = render_text(" ", [0, 0, 0]);
        assert!(c.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn ink_uses_the_color() {
        let c = render_text("W", [255, 0, 0]);
        let red = (0..c.height)
            .flat_map(|y| (0..c.width).map(move |x| (y, x)))
            .filter(|&(y, x)| c.pixel(y, x) == [1.0, 0.0, 0.0])
            .count();
        assert!(red > 0);
    }
}
