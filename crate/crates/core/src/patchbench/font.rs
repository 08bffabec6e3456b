//! 3×5 bitmap font for digits and ASCII letters.

pub const GLYPH_W: usize = 3;
pub const GLYPH_H: usize = 5;

const GLYPHS: &[(char, [&str; GLYPH_H])] = &[
    ('0', ["###", "#.#", "#.#", "#.#", "###"]),
    ('1', [".#.", "##.", ".#.", ".#.", "###"]),
    ('2', ["###", "..#", "###", "#..", "###"]),
    ('3', ["###", "..#", ".##", "..#", "###"]),
    ('4', ["#.#", "#.#", "###", "..#", "..#"]),
    ('5', ["###", "#..", "###", "..#", "###"]),
    ('6', ["###", "#..", "###", "#.#", "###"]),
    ('7', ["###", "..#", "..#", ".#.", ".#."]),
    ('8', ["###", "#.#", "###", "#.#", "###"]),
    ('9', ["###", "#.#", "###", "..#", "###"]),
    ('A', [".#.", "#.#", "###", "#.#", "#.#"]),
    ('B', ["##.", "#.#", "##.", "#.#", "##."]),
    ('C', [".##", "#..", "#..", "#..", ".##"]),
    ('D', ["##.", "#.#", "#.#", "#.#", "##."]),
    ('E', ["###", "#..", "##.", "#..", "###"]),
    ('F', ["###", "#..", "##.", "#..", "#.."]),
    ('G', [".##", "#..", "#.#", "#.#", ".##"]),
    ('H', ["#.#", "#.#", "###", "#.#", "#.#"]),
    ('I', ["###", ".#.", ".#.", ".#.", "###"]),
    ('J', ["..#", "..#", "..#", "#.#", ".#."]),
    ('K', ["#.#", "#.#", "##.", "#.#", "#.#"]),
    ('L', ["#..", "#..", "#..", "#..", "###"]),
    ('M', ["#.#", "###", "###", "#.#", "#.#"]),
    ('N', ["##.", "#.#", "#.#", "#.#", "#.#"]),
    ('O', [".#.", "#.#", "#.#", "#.#", ".#."]),
    ('P', ["##.", "#.#", "##.", "#..", "#.."]),
    ('Q', [".#.", "#.#", "#.#", "##.", ".##"]),
    ('R', ["##.", "#.#", "##.", "#.#", "#.#"]),
    ('S', [".##", "#..", ".#.", "..#", "##."]),
    ('T', ["###", ".#.", ".#.", ".#.", ".#."]),
    ('U', ["#.#", "#.#", "#.#", "#.#", "###"]),
    ('V', ["#.#", "#.#", "#.#", "#.#", ".#."]),
    ('W', ["#.#", "#.#", "###", "###", "#.#"]),
    ('X', ["#.#", "#.#", ".#.", "#.#", "#.#"]),
    ('Y', ["#.#", "#.#", ".#.", ".#.", ".#."]),
    ('Z', ["###", "..#", ".#.", "#..", "###"]),
    ('a', ["...", ".##", "#.#", "#.#", ".##"]),
    ('b', ["#..", "#..", "##.", "#.#", "##."]),
    ('c', ["...", ".##", "#..", "#..", ".##"]),
    ('d', ["..#", "..#", ".##", "#.#", ".##"]),
    ('e', ["...", ".#.", "###", "#..", ".##"]),
    ('f', ["..#", ".#.", "###", ".#.", ".#."]),
    ('g', [".##", "#.#", ".##", "..#", "##."]),
    ('h', ["#..", "#..", "##.", "#.#", "#.#"]),
    ('i', [".#.", "...", "##.", ".#.", "###"]),
    ('j', ["..#", "...", "..#", "#.#", ".#."]),
    ('k', ["#..", "#.#", "##.", "##.", "#.#"]),
    ('l', ["##.", ".#.", ".#.", ".#.", "###"]),
    ('m', ["...", "###", "###", "#.#", "#.#"]),
    ('n', ["...", "##.", "#.#", "#.#", "#.#"]),
    ('o', ["...", ".#.", "#.#", "#.#", ".#."]),
    ('p', ["...", "##.", "#.#", "##.", "#.."]),
    ('q', ["...", ".##", "#.#", ".##", "..#"]),
    ('r', ["...", ".##", "#..", "#..", "#.."]),
    ('s', ["...", ".##", "##.", "..#", "##."]),
    ('t', [".#.", "###", ".#.", ".#.", "..#"]),
    ('u', ["...", "#.#", "#.#", "#.#", ".##"]),
    ('v', ["...", "#.#", "#.#", "#.#", ".#."]),
    ('w', ["...", "#.#", "#.#", "###", "###"]),
    ('x', ["...", "#.#", ".#.", ".#.", "#.#"]),
    ('y', ["#.#", "#.#", ".##", "..#", "##."]),
    ('z', ["...", "###", ".##", "##.", "###"]),
];

pub fn glyph(c: char) -> Option<&'static [&'static str; GLYPH_H]> {
    GLYPHS.iter().find(|(g, _)| *g == c).map(|(_, rows)| rows)
}

pub fn supports(text: &str) -> bool {
    !text.is_empty() && text.chars().all(|c| glyph(c).is_some())
}

/// Ink mask of `lines` at integer `scale`, one pixel of spacing between glyphs and lines.
/// Returns `(width, height, mask)` with the mask row-major.
pub fn rasterize(lines: &[&str], scale: usize) -> Option<(usize, usize, Vec<bool>)> {
    let cols = lines.iter().map(|l| l.chars().count()).max()?;
    if cols == 0 || scale == 0 {
        return None;
    }
    let w = (cols * (GLYPH_W + 1) - 1) * scale;
    let h = (lines.len() * (GLYPH_H + 1) - 1) * scale;
    let mut mask = vec![false; w * h];
    for (li, line) in lines.iter().enumerate() {
        for (ci, c) in line.chars().enumerate() {
            let rows = glyph(c)?;
            for (gy, row) in rows.iter().enumerate() {
                for (gx, px) in row.bytes().enumerate() {
                    if px != b'#' {
                        continue;
                    }
                    let x0 = (ci * (GLYPH_W + 1) + gx) * scale;
                    let y0 = (li * (GLYPH_H + 1) + gy) * scale;
                    for dy in 0..scale {
                        for dx in 0..scale {
                            mask[(y0 + dy) * w + x0 + dx] = true;
                        }
                    }
                }
            }
        }
    }
    Some((w, h, mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_is_well_formed() {
        let mut seen = std::collections::BTreeSet::new();
        for (c, rows) in GLYPHS {
            assert!(seen.insert(*c), "duplicate glyph {c}");
            assert!(rows.iter().all(|r| r.len() == GLYPH_W), "{c}");
            assert!(rows.iter().any(|r| r.contains('#')), "{c} has no ink");
        }
        assert_eq!(seen.len(), 62);
    }

    #[test]
    fn glyphs_are_distinct() {
        for (i, (a, ra)) in GLYPHS.iter().enumerate() {
            for (b, rb) in &GLYPHS[i + 1..] {
                assert_ne!(ra, rb, "{a} and {b} share a bitmap");
            }
        }
    }

    #[test]
    fn raster_dimensions() {
        let (w, h, m) = rasterize(&["Fu"], 1).unwrap();
        assert_eq!((w, h), (7, 5));
        assert_eq!(m.len(), 35);
        let (w, h, _) = rasterize(&["Ja", "ck"], 2).unwrap();
        assert_eq!((w, h), (14, 22));
        assert!(rasterize(&["é"], 1).is_none());
        assert!(supports("Jack") && !supports("") && !supports("a b"));
    }
}
