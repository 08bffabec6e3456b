//! Single-patch diagnostic benchmark.
//!
//! Every item places `N` identical targets (a shape or a short string) on a
//! white canvas, each confined to its own patch cell, and asks three questions:
//! what the target is, its color, and how many there are. [`audit_item`] checks
//! the containment property pixel by pixel.

mod font;
mod render;
mod score;

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufReader, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use font::{rasterize, supports as font_supports};
pub use render::{Canvas, NamedColor, Rgb, Shape};
pub use score::{
    normalize_answer, read_answers, score_answers, AnswerNorm, AnswerRecord, CellScore,
    ScoreReport, Verdict,
};

pub const QUESTIONS_FILE: &str = "questions.jsonl";
pub const ANSWERS_FILE: &str = "answers.jsonl";
pub const ITEMS_FILE: &str = "items.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const IMAGES_DIR: &str = "images";

/// Strings used by the two OCR groups: single glyphs, short words that
/// tokenize as one piece, and mixed-case pairs that do not.
pub const OCR_STRINGS: &[&str] = &[
    "A", "K", "R", "7", "9", "Fu", "Ty", "Jo", "Hi", "ok", "42", "tT", "gb", "Zq", "xP", "Jack",
    "Bob", "dog", "cat", "sun",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchGroup {
    Object,
    Ocr,
    OcrBg,
}

impl BenchGroup {
    pub const ALL: [BenchGroup; 3] = [BenchGroup::Object, BenchGroup::Ocr, BenchGroup::OcrBg];

    pub fn as_str(&self) -> &'static str {
        match self {
            BenchGroup::Object => "object",
            BenchGroup::Ocr => "ocr",
            BenchGroup::OcrBg => "ocr_bg",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionType {
    Object,
    Color,
    Count,
}

impl QuestionType {
    pub const ALL: [QuestionType; 3] = [
        QuestionType::Object,
        QuestionType::Color,
        QuestionType::Count,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            QuestionType::Object => "object",
            QuestionType::Color => "color",
            QuestionType::Count => "count",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSizes {
    pub object: usize,
    pub ocr: usize,
    pub ocr_bg: usize,
}

impl GroupSizes {
    pub fn get(&self, g: BenchGroup) -> usize {
        match g {
            BenchGroup::Object => self.object,
            BenchGroup::Ocr => self.ocr,
            BenchGroup::OcrBg => self.ocr_bg,
        }
    }

    pub fn total(&self) -> usize {
        self.object + self.ocr + self.ocr_bg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub canvas_size: usize,
    pub patch_size: usize,
    pub seed: u64,
    pub palette: Vec<NamedColor>,
    pub padding: NamedColor,
    pub counts: Vec<usize>,
    pub group_sizes: GroupSizes,
    /// Blank pixels kept between a target and its cell border.
    pub margin: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            canvas_size: 336,
            patch_size: 14,
            seed: 0,
            palette: vec![
                NamedColor::new("red", [220, 20, 20]),
                NamedColor::new("green", [20, 160, 40]),
                NamedColor::new("blue", [30, 60, 220]),
                NamedColor::new("yellow", [240, 210, 0]),
                NamedColor::new("orange", [245, 130, 0]),
                NamedColor::new("purple", [130, 40, 180]),
                NamedColor::new("black", [0, 0, 0]),
                NamedColor::new("brown", [120, 70, 20]),
            ],
            padding: NamedColor::new("white", [255, 255, 255]),
            counts: vec![1, 2, 3, 4],
            group_sizes: GroupSizes {
                object: 30,
                ocr: 20,
                ocr_bg: 20,
            },
            margin: 1,
        }
    }
}

impl BenchConfig {
    pub fn grid(&self) -> usize {
        self.canvas_size / self.patch_size
    }

    /// Side of the square inside a cell available for ink.
    pub fn usable(&self) -> usize {
        self.patch_size.saturating_sub(2 * self.margin)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.patch_size == 0 || self.canvas_size == 0 || self.canvas_size % self.patch_size != 0
        {
            return bad(format!(
                "canvas size {} is not a positive multiple of patch size {}",
                self.canvas_size, self.patch_size
            ));
        }
        if [
            self.group_sizes.object,
            self.group_sizes.ocr,
            self.group_sizes.ocr_bg,
        ]
        .contains(&0)
        {
            return bad("group sizes must be positive".into());
        }
        if self.palette.len() < 2 {
            return bad("palette needs at least two colors".into());
        }
        let mut names = BTreeSet::new();
        let mut rgbs = BTreeSet::new();
        for c in &self.palette {
            if !names.insert(c.name.as_str()) || !rgbs.insert(c.rgb) {
                return bad(format!("palette color `{}` is duplicated", c.name));
            }
            if c.name == self.padding.name || c.rgb == self.padding.rgb {
                return bad(format!(
                    "palette color `{}` equals the padding color",
                    c.name
                ));
            }
        }
        let grid = self.grid();
        let max_count = grid.div_ceil(2).pow(2);
        if self.counts.is_empty() || self.counts.iter().any(|&n| n == 0 || n > max_count) {
            return bad(format!("counts must lie in 1..={max_count}"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum Target {
    Shape(Shape),
    Text(String),
}

impl Target {
    pub fn answer(&self) -> String {
        match self {
            Target::Shape(s) => s.name().to_string(),
            Target::Text(t) => t.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub target: Target,
    pub fill: String,
    /// Color behind the target inside its cell; the padding color unless the group is `ocr_bg`.
    pub background: String,
    pub count: usize,
    /// Occupied cells as `[row, col]`, one per instance.
    pub cells: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub item_id: String,
    pub q_type: QuestionType,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchItem {
    pub item_id: String,
    pub group: BenchGroup,
    pub canvas: Canvas,
    pub target: TargetSpec,
    pub questions: Vec<Question>,
    pub answers: Vec<AnswerRecord>,
}

/// The persisted part of an item (everything except pixels and prompts).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: String,
    pub group: BenchGroup,
    pub target: TargetSpec,
}

/// Ink layouts of a string that fit the usable cell area, largest scale first.
fn text_layouts(text: &str, usable: usize) -> Vec<(usize, usize, Vec<bool>)> {
    let chars: Vec<char> = text.chars().collect();
    let split = chars.len().div_ceil(2);
    let first: String = chars[..split].iter().collect();
    let second: String = chars[split..].iter().collect();
    let mut out = Vec::new();
    for scale in (1..=4).rev() {
        let mut candidates = vec![rasterize(&[text], scale)];
        if chars.len() > 1 {
            candidates.push(rasterize(&[&first, &second], scale));
        }
        for (w, h, m) in candidates.into_iter().flatten() {
            if w <= usable && h <= usable {
                out.push((w, h, m));
            }
        }
    }
    out
}

/// Picks `n` cells with no two in the same 8-neighbourhood.
fn pick_cells(rng: &mut ChaCha8Rng, grid: usize, n: usize) -> Vec<[usize; 2]> {
    let mut all: Vec<[usize; 2]> = (0..grid * grid).map(|i| [i / grid, i % grid]).collect();
    all.shuffle(rng);
    let mut chosen: Vec<[usize; 2]> = Vec::with_capacity(n);
    for c in all {
        if chosen
            .iter()
            .all(|o| o[0].abs_diff(c[0]) > 1 || o[1].abs_diff(c[1]) > 1)
        {
            chosen.push(c);
            if chosen.len() == n {
                break;
            }
        }
    }
    chosen.sort_unstable();
    chosen
}

fn questions_for(item_id: &str, target: &Target) -> Vec<Question> {
    let prompts = match target {
        Target::Shape(s) => [
            "What object is shown in the image? Answer with a single word.".to_string(),
            format!(
                "What color is the {} in the image? Answer with a single word.",
                s.name()
            ),
            format!(
                "How many {} are in the image? Answer with a number.",
                s.plural()
            ),
        ],
        Target::Text(_) => [
            "What text is written in the image? Answer with the text only.".to_string(),
            "What color is the text in the image? Answer with a single word.".to_string(),
            "How many times does the text appear in the image? Answer with a number.".to_string(),
        ],
    };
    QuestionType::ALL
        .iter()
        .zip(&prompts)
        .map(|(&q_type, prompt)| Question {
            item_id: item_id.to_string(),
            q_type,
            prompt: prompt.clone(),
        })
        .collect()
}

fn render_item(
    cfg: &BenchConfig,
    group: BenchGroup,
    index: usize,
    global: usize,
) -> Result<BenchItem> {
    let item_id = format!("{}_{index:03}", group.as_str());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(global as u64);

    let count = *cfg.counts.choose(&mut rng).expect("validated non-empty");
    let fill = cfg
        .palette
        .choose(&mut rng)
        .expect("validated non-empty")
        .clone();
    let background = if group == BenchGroup::OcrBg {
        let others: Vec<&NamedColor> = cfg.palette.iter().filter(|c| c.name != fill.name).collect();
        (*others.choose(&mut rng).expect("palette has two colors")).clone()
    } else {
        cfg.padding.clone()
    };
    let usable = cfg.usable();
    let (target, w, h, mask) = match group {
        BenchGroup::Object => {
            let shape = *Shape::ALL.choose(&mut rng).expect("non-empty");
            let min = (usable * 3).div_ceil(5).max(1);
            if usable < 6 {
                return Err(Error::RenderFailure(format!(
                    "{item_id}: a {usable}px cell interior is too small for shapes"
                )));
            }
            let size = rng.random_range(min..=usable);
            (Target::Shape(shape), size, size, shape.mask(size))
        }
        BenchGroup::Ocr | BenchGroup::OcrBg => {
            let text = *OCR_STRINGS.choose(&mut rng).expect("non-empty");
            let layouts = text_layouts(text, usable);
            let Some((w, h, m)) = layouts.choose(&mut rng).cloned() else {
                return Err(Error::RenderFailure(format!(
                    "{item_id}: `{text}` does not fit a {usable}px cell interior at any scale"
                )));
            };
            (Target::Text(text.to_string()), w, h, m)
        }
    };
    let ox = cfg.margin + rng.random_range(0..=usable - w);
    let oy = cfg.margin + rng.random_range(0..=usable - h);
    let cells = pick_cells(&mut rng, cfg.grid(), count);
    if cells.len() != count {
        return Err(Error::RenderFailure(format!(
            "{item_id}: cannot place {count} separated targets"
        )));
    }

    let mut canvas = Canvas::filled(cfg.canvas_size, cfg.canvas_size, cfg.padding.rgb);
    for &[r, c] in &cells {
        let (x0, y0) = (c * cfg.patch_size, r * cfg.patch_size);
        if group == BenchGroup::OcrBg {
            canvas.fill_rect(x0, y0, cfg.patch_size, cfg.patch_size, background.rgb);
        }
        canvas.stamp(x0 + ox, y0 + oy, w, h, &mask, fill.rgb);
    }

    let questions = questions_for(&item_id, &target);
    let truths = [target.answer(), fill.name.clone(), count.to_string()];
    let answers = QuestionType::ALL
        .iter()
        .zip(truths)
        .map(|(&q_type, answer)| AnswerRecord {
            item_id: item_id.clone(),
            q_type,
            answer,
        })
        .collect();
    let item = BenchItem {
        item_id: item_id.clone(),
        group,
        canvas,
        target: TargetSpec {
            target,
            fill: fill.name,
            background: background.name,
            count,
            cells,
        },
        questions,
        answers,
    };
    let audit = audit_item(&item, cfg);
    if !audit.pass {
        return Err(Error::RenderFailure(format!(
            "{item_id}: {}",
            audit.message
        )));
    }
    Ok(item)
}

/// Renders every item in memory. Items are ordered object, ocr, ocr_bg.
pub fn build_items(cfg: &BenchConfig) -> Result<Vec<BenchItem>> {
    cfg.validate()?;
    let mut jobs = Vec::new();
    for g in BenchGroup::ALL {
        for i in 0..cfg.group_sizes.get(g) {
            jobs.push((g, i, jobs.len()));
        }
    }
    jobs.into_par_iter()
        .map(|(g, i, global)| render_item(cfg, g, i, global))
        .collect()
}

/// Renders the benchmark and writes it under `out_dir`:
/// `images/<item_id>.png`, `questions.jsonl`, `answers.jsonl`, `items.jsonl` and `config.json`.
pub fn generate_benchmark(cfg: &BenchConfig, out_dir: &Path) -> Result<Vec<BenchItem>> {
    let items = build_items(cfg)?;
    let images = out_dir.join(IMAGES_DIR);
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    for item in &items {
        let path = images.join(format!("{}.png", item.item_id));
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        item.canvas.write_png(file)?;
    }
    write_jsonl(
        &out_dir.join(QUESTIONS_FILE),
        items.iter().flat_map(|i| &i.questions),
    )?;
    write_jsonl(
        &out_dir.join(ANSWERS_FILE),
        items.iter().flat_map(|i| &i.answers),
    )?;
    write_jsonl(
        &out_dir.join(ITEMS_FILE),
        items.iter().map(|i| ItemRecord {
            item_id: i.item_id.clone(),
            group: i.group,
            target: i.target.clone(),
        }),
    )?;
    let cfg_path = out_dir.join(CONFIG_FILE);
    fs::write(&cfg_path, serde_json::to_string_pretty(cfg)? + "\n")
        .map_err(|e| Error::io(&cfg_path, e))?;
    Ok(items)
}

pub(crate) fn write_jsonl<T: Serialize>(
    path: &Path,
    rows: impl IntoIterator<Item = T>,
) -> Result<()> {
    let mut buf = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut buf, &row)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                column: e.column(),
                message: format!("{}: {e}", path.display()),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditResult {
    pub item_id: String,
    pub pass: bool,
    /// Declared cells that contain ink.
    pub instances_found: usize,
    /// Ink pixels `[x, y]` outside every declared cell.
    pub offending: Vec<[usize; 2]>,
    pub message: String,
}

/// Checks that all ink (non-padding pixels) lies inside the declared cells and
/// that exactly `count` cells carry ink.
pub fn audit_item(item: &BenchItem, cfg: &BenchConfig) -> AuditResult {
    audit_canvas(&item.item_id, &item.canvas, &item.target, cfg)
}

pub fn audit_canvas(
    item_id: &str,
    canvas: &Canvas,
    target: &TargetSpec,
    cfg: &BenchConfig,
) -> AuditResult {
    let p = cfg.patch_size;
    let mut problems = Vec::new();
    if canvas.width() != cfg.canvas_size || canvas.height() != cfg.canvas_size {
        problems.push(format!(
            "canvas is {}x{}, expected {}²",
            canvas.width(),
            canvas.height(),
            cfg.canvas_size
        ));
    }
    let declared: BTreeSet<[usize; 2]> = target.cells.iter().copied().collect();
    if declared.len() != target.cells.len() {
        problems.push("duplicate cells".into());
    }
    if target.count != target.cells.len() {
        problems.push(format!(
            "count {} but {} cells",
            target.count,
            target.cells.len()
        ));
    }
    let mut inked = BTreeSet::new();
    let mut offending = Vec::new();
    for y in 0..canvas.height() {
        for x in 0..canvas.width() {
            if canvas.get(x, y) == cfg.padding.rgb {
                continue;
            }
            let cell = [y / p, x / p];
            if declared.contains(&cell) {
                inked.insert(cell);
            } else {
                offending.push([x, y]);
            }
        }
    }
    if !offending.is_empty() {
        problems.push(format!(
            "{} ink pixels outside the declared cells",
            offending.len()
        ));
    }
    if inked.len() != target.count {
        problems.push(format!(
            "{} inked cells, declared count {}",
            inked.len(),
            target.count
        ));
    }
    AuditResult {
        item_id: item_id.to_string(),
        pass: problems.is_empty(),
        instances_found: inked.len(),
        offending,
        message: problems.join("; "),
    }
}

/// Audits a generated benchmark directory.
pub fn audit_dir(dir: &Path) -> Result<Vec<AuditResult>> {
    let cfg_path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let cfg: BenchConfig = serde_json::from_str(&text)?;
    let records: Vec<ItemRecord> = read_jsonl(&dir.join(ITEMS_FILE))?;
    records
        .par_iter()
        .map(|r| {
            let path = dir.join(IMAGES_DIR).join(format!("{}.png", r.item_id));
            let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
            let canvas = Canvas::read_png(BufReader::new(file))?;
            Ok(audit_canvas(&r.item_id, &canvas, &r.target, &cfg))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        let cfg = BenchConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.grid(), 24);
        assert_eq!(cfg.group_sizes.total(), 70);
    }

    #[test]
    fn invalid_configs() {
        let cfg = BenchConfig {
            canvas_size: 335,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let mut cfg = BenchConfig::default();
        cfg.palette.push(NamedColor::new("white", [255, 255, 255]));
        assert!(cfg.validate().is_err());
        let mut cfg = BenchConfig::default();
        cfg.group_sizes.ocr_bg = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn every_ocr_string_fits_default_cells() {
        for s in OCR_STRINGS {
            assert!(font_supports(s), "{s}");
            assert!(
                !text_layouts(s, BenchConfig::default().usable()).is_empty(),
                "{s}"
            );
        }
    }

    #[test]
    fn separated_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cells = pick_cells(&mut rng, 24, 4);
        assert_eq!(cells.len(), 4);
        for (i, a) in cells.iter().enumerate() {
            for b in &cells[i + 1..] {
                assert!(a[0].abs_diff(b[0]) > 1 || a[1].abs_diff(b[1]) > 1);
            }
        }
    }

    #[test]
    fn tiny_cells_fail_to_render() {
        let cfg = BenchConfig {
            canvas_size: 48,
            patch_size: 4,
            counts: vec![1],
            ..Default::default()
        };
        assert!(matches!(build_items(&cfg), Err(Error::RenderFailure(_))));
    }
}
