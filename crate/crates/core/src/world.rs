//! Synthetic glyph-grid images with templated questions.
//!
//! A [`ToyImage`] is a grid of cells, each blank or holding one glyph drawn
//! at some intensity, rendered to a raster of `cell_size`-pixel squares. Every
//! glyph has a fixed 4x4 bitmap; bitmaps are pairwise distinct and non-empty,
//! so the renderer is injective on cell grids.
//!
//! Ground-truth answers exist only for evaluation. The label-free view of a
//! corpus, [`UnlabeledEpisode`], has no truth field at all.

use std::collections::HashSet;

use rand::seq::index::sample;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rng::child_rng;
use crate::tokenizer::{TokenId, TokenSequence, Tokenizer, TokenizerError, MAX_GLYPHS};

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("glyph alphabet must hold 1..={MAX_GLYPHS} glyphs, got {0}")]
    GlyphAlphabet(usize),
    #[error("invalid world config: {0}")]
    Config(String),
    #[error("{what} {index} out of bounds (limit {limit})")]
    OutOfBounds {
        what: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("requested {requested} questions per episode but episode {episode} has {available}")]
    NotEnoughQuestions {
        requested: usize,
        episode: usize,
        available: usize,
    },
    #[error("corpus line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, WorldError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    ReadRow,
    ReadCol,
    CountGlyph,
    GlyphAt,
    ExistsGlyph,
}

impl Template {
    pub const ALL: [Template; 5] = [
        Template::ReadRow,
        Template::ReadCol,
        Template::CountGlyph,
        Template::GlyphAt,
        Template::ExistsGlyph,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Template::ReadRow => "read_row",
            Template::ReadCol => "read_col",
            Template::CountGlyph => "count_glyph",
            Template::GlyphAt => "glyph_at",
            Template::ExistsGlyph => "exists_glyph",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub width: usize,
    pub height: usize,
    pub glyphs: usize,
    /// Probability that a cell holds a glyph.
    pub density: f64,
    /// Raster pixels per cell side; at least 4 so glyph bitmaps survive.
    pub cell_size: usize,
    /// Glyph intensities are drawn uniformly from this closed range.
    pub intensity: (f64, f64),
    pub questions_per_episode: usize,
    /// Relative sampling weight of each template, in [`Template::ALL`] order.
    pub template_weights: [f64; 5],
    /// Ask `exists_glyph` about a present or an absent glyph with equal odds
    /// instead of a uniformly drawn glyph, so `yes` and `no` are balanced at
    /// any density.
    #[serde(default)]
    pub balanced_exists: bool,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            width: 8,
            height: 8,
            glyphs: 12,
            density: 0.15,
            cell_size: 4,
            intensity: (0.35, 1.0),
            questions_per_episode: 3,
            template_weights: [1.0; 5],
            balanced_exists: false,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.glyphs == 0 || self.glyphs > MAX_GLYPHS {
            return Err(WorldError::GlyphAlphabet(self.glyphs));
        }
        if self.width == 0 || self.height == 0 || self.width > 10 || self.height > 10 {
            return Err(WorldError::Config("grid sides must be in 1..=10".into()));
        }
        if self.cell_size < 4 {
            return Err(WorldError::Config("cell_size must be at least 4".into()));
        }
        if !(0.0..=1.0).contains(&self.density) {
            return Err(WorldError::Config("density must lie in [0, 1]".into()));
        }
        let (lo, hi) = self.intensity;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(WorldError::Config(
                "intensity range must satisfy 0 < lo <= hi <= 1".into(),
            ));
        }
        if self.questions_per_episode < 2 {
            return Err(WorldError::Config("episodes need at least 2 questions".into()));
        }
        if self.template_weights.iter().any(|w| *w < 0.0 || !w.is_finite())
            || self.template_weights.iter().sum::<f64>() <= 0.0
        {
            return Err(WorldError::Config(
                "template weights must be non-negative with a positive sum".into(),
            ));
        }
        Ok(())
    }

    pub fn tokenizer(&self) -> Result<Tokenizer> {
        Ok(Tokenizer::new(self.glyphs)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    /// 0 is blank, `1..=G` index the glyph alphabet.
    pub glyph: u8,
    pub intensity: f64,
}

impl Cell {
    pub const BLANK: Cell = Cell {
        glyph: 0,
        intensity: 0.0,
    };
}

/// 4x4 bitmap of every glyph, bit `4 * y + x` set when pixel `(x, y)` is on.
fn glyph_bitmaps() -> &'static [u16; MAX_GLYPHS] {
    static BITMAPS: std::sync::OnceLock<[u16; MAX_GLYPHS]> = std::sync::OnceLock::new();
    BITMAPS.get_or_init(|| {
        let mut out = [0u16; MAX_GLYPHS];
        let mut seen = HashSet::new();
        let mut state: u64 = 0x5EED_6A1F;
        let mut filled = 0;
        while filled < MAX_GLYPHS {
            state = crate::rng::derive_seed(state, filled as u64);
            let pattern = (state & 0xFFFF) as u16;
            let ones = pattern.count_ones();
            let mirrored = mirror_bitmap(pattern);
            // 6..=10 lit pixels, and no glyph equal to another glyph's mirror image.
            if (6..=10).contains(&ones) && mirrored != pattern && !seen.contains(&pattern) && !seen.contains(&mirrored)
            {
                seen.insert(pattern);
                seen.insert(mirrored);
                out[filled] = pattern;
                filled += 1;
            }
        }
        out
    })
}

fn mirror_bitmap(pattern: u16) -> u16 {
    let mut out = 0;
    for y in 0..4 {
        for x in 0..4 {
            if pattern >> (4 * y + x) & 1 == 1 {
                out |= 1 << (4 * y + (3 - x));
            }
        }
    }
    out
}

/// A rendered glyph grid.
///
/// Augmentations replace `pixels` and keep `cells` as provenance, so for an
/// augmented image the raster is no longer the rendering of its cells.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyImage {
    width: usize,
    height: usize,
    cell_size: usize,
    cells: Vec<Cell>,
    pixels: Vec<f64>,
    pixel_range: Option<(f64, f64)>,
}

impl ToyImage {
    pub fn from_cells(width: usize, height: usize, cell_size: usize, cells: Vec<Cell>) -> Result<Self> {
        if cells.len() != width * height {
            return Err(WorldError::Config(format!(
                "expected {} cells, got {}",
                width * height,
                cells.len()
            )));
        }
        if let Some(c) = cells.iter().find(|c| c.glyph as usize > MAX_GLYPHS) {
            return Err(WorldError::GlyphAlphabet(c.glyph as usize));
        }
        let pixels = render(width, height, cell_size, &cells);
        Ok(Self {
            width,
            height,
            cell_size,
            cells,
            pixels,
            pixel_range: None,
        })
    }

    /// Same cells, new raster (used by augmentations).
    pub fn with_pixels(&self, pixels: Vec<f64>, pixel_range: Option<(f64, f64)>) -> Self {
        assert_eq!(pixels.len(), self.pixels.len(), "raster size must not change");
        Self {
            width: self.width,
            height: self.height,
            cell_size: self.cell_size,
            cells: self.cells.clone(),
            pixels,
            pixel_range,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn cell_size(&self) -> usize {
        self.cell_size
    }

    pub fn raster_width(&self) -> usize {
        self.width * self.cell_size
    }

    pub fn raster_height(&self) -> usize {
        self.height * self.cell_size
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn cell(&self, row: usize, col: usize) -> Cell {
        self.cells[row * self.width + col]
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    /// `(min, max)` of an unclamped raster, recorded by diffusion noise.
    pub fn pixel_range(&self) -> Option<(f64, f64)> {
        self.pixel_range
    }

    /// Hex SHA-256 prefix of the raster bytes.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.width as u64).to_le_bytes());
        hasher.update((self.height as u64).to_le_bytes());
        for p in &self.pixels {
            hasher.update(p.to_bits().to_le_bytes());
        }
        hex::encode(&hasher.finalize()[..8])
    }

    /// One line per cell row: glyph letters, `.` for blank.
    pub fn ascii(&self) -> String {
        let mut s = String::new();
        for r in 0..self.height {
            for c in 0..self.width {
                let g = self.cell(r, c).glyph;
                s.push(if g == 0 { '.' } else { char::from(b'A' + g - 1) });
            }
            s.push('\n');
        }
        s
    }
}

fn render(width: usize, height: usize, cell_size: usize, cells: &[Cell]) -> Vec<f64> {
    let bitmaps = glyph_bitmaps();
    let rw = width * cell_size;
    let mut pixels = vec![0.0; rw * height * cell_size];
    for (idx, cell) in cells.iter().enumerate() {
        if cell.glyph == 0 {
            continue;
        }
        let bits = bitmaps[cell.glyph as usize - 1];
        let (r, c) = (idx / width, idx % width);
        for py in 0..cell_size {
            for px in 0..cell_size {
                let (by, bx) = (py * 4 / cell_size, px * 4 / cell_size);
                if bits >> (4 * by + bx) & 1 == 1 {
                    pixels[(r * cell_size + py) * rw + c * cell_size + px] = cell.intensity;
                }
            }
        }
    }
    pixels
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "template", rename_all = "snake_case")]
pub enum QuestionKind {
    ReadRow { row: usize },
    ReadCol { col: usize },
    CountGlyph { glyph: u8 },
    GlyphAt { row: usize, col: usize },
    ExistsGlyph { glyph: u8 },
}

impl QuestionKind {
    pub fn template(&self) -> Template {
        match self {
            QuestionKind::ReadRow { .. } => Template::ReadRow,
            QuestionKind::ReadCol { .. } => Template::ReadCol,
            QuestionKind::CountGlyph { .. } => Template::CountGlyph,
            QuestionKind::GlyphAt { .. } => Template::GlyphAt,
            QuestionKind::ExistsGlyph { .. } => Template::ExistsGlyph,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Question {
    pub kind: QuestionKind,
    pub text_tokens: Vec<TokenId>,
}

impl Question {
    pub fn new(kind: QuestionKind, tokenizer: &Tokenizer) -> Result<Self> {
        let w = |s: &str| tokenizer.word(s);
        let glyph = |g: u8| {
            tokenizer.glyph(g).ok_or(WorldError::OutOfBounds {
                what: "glyph",
                index: g as usize,
                limit: tokenizer.glyph_count(),
            })
        };
        let digit = |n: usize| {
            if n < 10 {
                Ok(tokenizer.digit(n))
            } else {
                Err(WorldError::OutOfBounds {
                    what: "index",
                    index: n,
                    limit: 9,
                })
            }
        };
        let text_tokens = match kind {
            QuestionKind::ReadRow { row } => vec![w("read")?, w("row")?, digit(row)?],
            QuestionKind::ReadCol { col } => vec![w("read")?, w("col")?, digit(col)?],
            QuestionKind::CountGlyph { glyph: g } => vec![w("count")?, glyph(g)?],
            QuestionKind::GlyphAt { row, col } => vec![w("glyph")?, w("at")?, digit(row)?, digit(col)?],
            QuestionKind::ExistsGlyph { glyph: g } => vec![w("exists")?, glyph(g)?],
        };
        Ok(Self { kind, text_tokens })
    }

    pub fn template(&self) -> Template {
        self.kind.template()
    }
}

/// An image with a multi-turn question list and its exact answers.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub image: ToyImage,
    pub questions: Vec<Question>,
    pub truth: Vec<TokenSequence>,
}

/// An episode as seen by the label-free pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledEpisode {
    pub image: ToyImage,
    pub questions: Vec<Question>,
}

impl Episode {
    pub fn strip_truth(&self) -> UnlabeledEpisode {
        UnlabeledEpisode {
            image: self.image.clone(),
            questions: self.questions.clone(),
        }
    }
}

pub fn strip_truth(corpus: &[Episode]) -> Vec<UnlabeledEpisode> {
    corpus.iter().map(Episode::strip_truth).collect()
}

/// Exact answer to `question` about `image`, EOS-terminated.
///
/// Canonical forms: `read_row`/`read_col` list glyph letters in reading order
/// skipping blank cells (`blank` when none), `count_glyph` spells the count
/// in digits, `glyph_at` gives the letter or `blank`, `exists_glyph` gives
/// `yes` or `no`.
pub fn ground_truth(image: &ToyImage, question: &Question, tokenizer: &Tokenizer) -> Result<TokenSequence> {
    let bound = |what, index, limit| {
        if index < limit {
            Ok(())
        } else {
            Err(WorldError::OutOfBounds { what, index, limit })
        }
    };
    let glyph_check = |g: u8| {
        if (1..=tokenizer.glyph_count()).contains(&(g as usize)) {
            Ok(())
        } else {
            Err(WorldError::OutOfBounds {
                what: "glyph",
                index: g as usize,
                limit: tokenizer.glyph_count(),
            })
        }
    };
    let letters = |cells: Vec<Cell>| -> Vec<TokenId> {
        let toks: Vec<TokenId> = cells.iter().filter_map(|c| tokenizer.glyph(c.glyph)).collect();
        if toks.is_empty() {
            vec![tokenizer.word("blank").expect("blank is in the vocabulary")]
        } else {
            toks
        }
    };
    let content = match question.kind {
        QuestionKind::ReadRow { row } => {
            bound("row", row, image.height())?;
            letters((0..image.width()).map(|c| image.cell(row, c)).collect())
        }
        QuestionKind::ReadCol { col } => {
            bound("col", col, image.width())?;
            letters((0..image.height()).map(|r| image.cell(r, col)).collect())
        }
        QuestionKind::CountGlyph { glyph } => {
            glyph_check(glyph)?;
            tokenizer.number(image.cells().iter().filter(|c| c.glyph == glyph).count())
        }
        QuestionKind::GlyphAt { row, col } => {
            bound("row", row, image.height())?;
            bound("col", col, image.width())?;
            letters(vec![image.cell(row, col)])
        }
        QuestionKind::ExistsGlyph { glyph } => {
            glyph_check(glyph)?;
            let found = image.cells().iter().any(|c| c.glyph == glyph);
            vec![tokenizer.word(if found { "yes" } else { "no" })?]
        }
    };
    Ok(TokenSequence::from_content(&content))
}

fn sample_question(
    cfg: &WorldConfig,
    cells: &[Cell],
    rng: &mut crate::rng::Rng,
    tokenizer: &Tokenizer,
) -> Result<Question> {
    let total: f64 = cfg.template_weights.iter().sum();
    let mut pick = rng.random::<f64>() * total;
    let mut template = Template::ExistsGlyph;
    for (t, w) in Template::ALL.iter().zip(cfg.template_weights) {
        if pick < w {
            template = *t;
            break;
        }
        pick -= w;
    }
    let glyph = rng.random_range(1..=cfg.glyphs as u8);
    let row = rng.random_range(0..cfg.height);
    let col = rng.random_range(0..cfg.width);
    let kind = match template {
        Template::ReadRow => QuestionKind::ReadRow { row },
        Template::ReadCol => QuestionKind::ReadCol { col },
        Template::CountGlyph => QuestionKind::CountGlyph { glyph },
        Template::GlyphAt => QuestionKind::GlyphAt { row, col },
        Template::ExistsGlyph if !cfg.balanced_exists => QuestionKind::ExistsGlyph { glyph },
        Template::ExistsGlyph => {
            // Falls back to whichever kind exists when one pool is empty.
            let want_present = rng.random::<bool>();
            let (present, absent): (Vec<u8>, Vec<u8>) =
                (1..=cfg.glyphs as u8).partition(|g| cells.iter().any(|c| c.glyph == *g));
            let pool = match (want_present, present.is_empty(), absent.is_empty()) {
                (true, false, _) | (false, _, true) => present,
                _ => absent,
            };
            let glyph = pool[rng.random_range(0..pool.len())];
            QuestionKind::ExistsGlyph { glyph }
        }
    };
    Question::new(kind, tokenizer)
}

fn generate_episode(cfg: &WorldConfig, seed: u64, index: usize, tokenizer: &Tokenizer) -> Result<Episode> {
    let mut rng = child_rng(seed, index as u64);
    let cells = (0..cfg.width * cfg.height)
        .map(|_| {
            if rng.random::<f64>() < cfg.density {
                let glyph = rng.random_range(1..=cfg.glyphs as u8);
                let (lo, hi) = cfg.intensity;
                let intensity = if hi > lo { rng.random_range(lo..=hi) } else { lo };
                Cell { glyph, intensity }
            } else {
                Cell::BLANK
            }
        })
        .collect();
    let image = ToyImage::from_cells(cfg.width, cfg.height, cfg.cell_size, cells)?;
    let mut questions: Vec<Question> = Vec::with_capacity(cfg.questions_per_episode);
    // Distinct questions per episode; bounded retries keep tiny configs total.
    let mut attempts = 0;
    while questions.len() < cfg.questions_per_episode {
        let q = sample_question(cfg, image.cells(), &mut rng, tokenizer)?;
        attempts += 1;
        if attempts > 1000 || !questions.contains(&q) {
            questions.push(q);
        }
    }
    let truth = questions
        .iter()
        .map(|q| ground_truth(&image, q, tokenizer))
        .collect::<Result<Vec<_>>>()?;
    Ok(Episode {
        image,
        questions,
        truth,
    })
}

/// Deterministic corpus of `n_episodes` episodes. Episode `i` depends only
/// on `(seed, i, config)`, so generation runs in parallel.
pub fn generate_corpus(seed: u64, n_episodes: usize, config: &WorldConfig) -> Result<Vec<Episode>> {
    config.validate()?;
    if n_episodes == 0 {
        return Err(WorldError::Config("n_episodes must be at least 1".into()));
    }
    let tokenizer = config.tokenizer()?;
    (0..n_episodes)
        .into_par_iter()
        .map(|i| generate_episode(config, seed, i, &tokenizer))
        .collect()
}

/// One image-question instance drawn from a corpus.
#[derive(Debug, Clone, Copy)]
pub struct SampledPair<'a> {
    pub episode: usize,
    pub question_index: usize,
    pub image: &'a ToyImage,
    pub question: &'a Question,
}

/// Draws `k_per_episode` distinct questions from every episode and pairs
/// each with its image; `2 * |corpus|` instances for `k = 2`.
pub fn sample_pairs(corpus: &[UnlabeledEpisode], k_per_episode: usize, seed: u64) -> Result<Vec<SampledPair<'_>>> {
    let mut out = Vec::with_capacity(corpus.len() * k_per_episode);
    for (ei, ep) in corpus.iter().enumerate() {
        if k_per_episode > ep.questions.len() {
            return Err(WorldError::NotEnoughQuestions {
                requested: k_per_episode,
                episode: ei,
                available: ep.questions.len(),
            });
        }
        let mut rng = child_rng(seed, ei as u64);
        let mut picks = sample(&mut rng, ep.questions.len(), k_per_episode).into_vec();
        picks.sort_unstable();
        out.extend(picks.into_iter().map(|qi| SampledPair {
            episode: ei,
            question_index: qi,
            image: &ep.image,
            question: &ep.questions[qi],
        }));
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct ImageRecord {
    w: usize,
    h: usize,
    #[serde(default = "default_cell_size")]
    s: usize,
    cells: Vec<(u8, f64)>,
}

fn default_cell_size() -> usize {
    4
}

#[derive(Debug, Serialize, Deserialize)]
struct EpisodeRecord {
    image: ImageRecord,
    questions: Vec<Question>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    truth: Option<Vec<TokenSequence>>,
}

fn image_record(image: &ToyImage) -> ImageRecord {
    ImageRecord {
        w: image.width(),
        h: image.height(),
        s: image.cell_size(),
        cells: image.cells().iter().map(|c| (c.glyph, c.intensity)).collect(),
    }
}

fn image_from_record(rec: ImageRecord) -> Result<ToyImage> {
    let cells = rec
        .cells
        .into_iter()
        .map(|(glyph, intensity)| Cell { glyph, intensity })
        .collect();
    ToyImage::from_cells(rec.w, rec.h, rec.s, cells)
}

/// One JSON object per line, truth included.
pub fn write_corpus_jsonl<W: std::io::Write>(corpus: &[Episode], mut out: W) -> Result<()> {
    for ep in corpus {
        let rec = EpisodeRecord {
            image: image_record(&ep.image),
            questions: ep.questions.clone(),
            truth: Some(ep.truth.clone()),
        };
        serde_json::to_writer(&mut out, &rec).map_err(|e| WorldError::Parse { line: 0, source: e })?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Training export: same schema without the `truth` field.
pub fn write_unlabeled_jsonl<W: std::io::Write>(corpus: &[UnlabeledEpisode], mut out: W) -> Result<()> {
    for ep in corpus {
        let rec = EpisodeRecord {
            image: image_record(&ep.image),
            questions: ep.questions.clone(),
            truth: None,
        };
        serde_json::to_writer(&mut out, &rec).map_err(|e| WorldError::Parse { line: 0, source: e })?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

fn read_records<R: std::io::BufRead>(input: R) -> Result<Vec<EpisodeRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| WorldError::Parse { line: i + 1, source })?);
    }
    Ok(out)
}

/// Reads a labeled corpus; every line must carry `truth`.
pub fn read_corpus_jsonl<R: std::io::BufRead>(input: R) -> Result<Vec<Episode>> {
    read_records(input)?
        .into_iter()
        .enumerate()
        .map(|(i, rec)| {
            let truth = rec
                .truth
                .ok_or_else(|| WorldError::Config(format!("episode {} has no truth field", i + 1)))?;
            if truth.len() != rec.questions.len() {
                return Err(WorldError::Config(format!(
                    "episode {}: truth/question count mismatch",
                    i + 1
                )));
            }
            Ok(Episode {
                image: image_from_record(rec.image)?,
                questions: rec.questions,
                truth,
            })
        })
        .collect()
}

/// Reads either export, discarding any truth present.
pub fn read_unlabeled_jsonl<R: std::io::BufRead>(input: R) -> Result<Vec<UnlabeledEpisode>> {
    read_records(input)?
        .into_iter()
        .map(|rec| {
            Ok(UnlabeledEpisode {
                image: image_from_record(rec.image)?,
                questions: rec.questions,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok() -> Tokenizer {
        Tokenizer::new(12).unwrap()
    }

    fn image_with_row0(glyphs: &[(usize, u8)]) -> ToyImage {
        let mut cells = vec![Cell::BLANK; 64];
        for &(col, g) in glyphs {
            cells[col] = Cell {
                glyph: g,
                intensity: 1.0,
            };
        }
        ToyImage::from_cells(8, 8, 4, cells).unwrap()
    }

    #[test]
    fn bitmaps_are_distinct_and_lit() {
        let bm = glyph_bitmaps();
        let set: HashSet<u16> = bm.iter().copied().collect();
        assert_eq!(set.len(), MAX_GLYPHS);
        assert!(bm.iter().all(|b| b.count_ones() >= 6));
    }

    #[test]
    fn read_row_lists_glyphs_in_order() {
        let t = tok();
        let img = image_with_row0(&[(1, 1), (5, 2)]);
        let q = Question::new(QuestionKind::ReadRow { row: 0 }, &t).unwrap();
        let ans = ground_truth(&img, &q, &t).unwrap();
        assert_eq!(ans.content(), t.encode("A B").unwrap().as_slice());
        assert_eq!(*ans.tokens().last().unwrap(), crate::tokenizer::EOS);
    }

    #[test]
    fn count_of_absent_glyph_is_zero() {
        let t = tok();
        let img = image_with_row0(&[(1, 1)]);
        let q = Question::new(QuestionKind::CountGlyph { glyph: 12 }, &t).unwrap();
        assert_eq!(
            ground_truth(&img, &q, &t).unwrap().content(),
            t.encode("0").unwrap().as_slice()
        );
    }

    #[test]
    fn blank_row_answers_blank() {
        let t = tok();
        let img = image_with_row0(&[]);
        let q = Question::new(QuestionKind::ReadRow { row: 3 }, &t).unwrap();
        assert_eq!(
            ground_truth(&img, &q, &t).unwrap().content(),
            t.encode("blank").unwrap().as_slice()
        );
    }

    #[test]
    fn out_of_bounds_arguments_error() {
        let t = tok();
        let img = image_with_row0(&[]);
        let q = Question {
            kind: QuestionKind::ReadRow { row: 8 },
            text_tokens: vec![],
        };
        assert!(matches!(
            ground_truth(&img, &q, &t),
            Err(WorldError::OutOfBounds {
                what: "row",
                index: 8,
                ..
            })
        ));
        let q = Question {
            kind: QuestionKind::ExistsGlyph { glyph: 0 },
            text_tokens: vec![],
        };
        assert!(ground_truth(&img, &q, &t).is_err());
        let q = Question {
            kind: QuestionKind::CountGlyph { glyph: 13 },
            text_tokens: vec![],
        };
        assert!(ground_truth(&img, &q, &t).is_err());
    }

    #[test]
    fn zero_alphabet_rejected() {
        let cfg = WorldConfig {
            glyphs: 0,
            ..WorldConfig::default()
        };
        assert!(matches!(generate_corpus(1, 3, &cfg), Err(WorldError::GlyphAlphabet(0))));
    }

    #[test]
    fn zero_density_gives_blank_images() {
        let cfg = WorldConfig {
            density: 0.0,
            template_weights: [1.0, 0.0, 0.0, 0.0, 0.0],
            ..WorldConfig::default()
        };
        let corpus = generate_corpus(3, 5, &cfg).unwrap();
        let blank = tok().encode("blank").unwrap();
        for ep in &corpus {
            assert!(ep.image.pixels().iter().all(|&p| p == 0.0));
            for truth in &ep.truth {
                assert_eq!(truth.content(), blank.as_slice());
            }
        }
    }

    #[test]
    fn sample_pairs_counts_and_errors() {
        let corpus = strip_truth(&generate_corpus(5, 100, &WorldConfig::default()).unwrap());
        assert_eq!(sample_pairs(&corpus, 2, 9).unwrap().len(), 200);
        assert!(matches!(
            sample_pairs(&corpus, 4, 9),
            Err(WorldError::NotEnoughQuestions { requested: 4, .. })
        ));
        let a: Vec<_> = sample_pairs(&corpus, 1, 3)
            .unwrap()
            .iter()
            .map(|p| (p.episode, p.question_index))
            .collect();
        let b: Vec<_> = sample_pairs(&corpus, 1, 3)
            .unwrap()
            .iter()
            .map(|p| (p.episode, p.question_index))
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn jsonl_roundtrip_and_strip() {
        let corpus = generate_corpus(11, 4, &WorldConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_corpus_jsonl(&corpus, &mut buf).unwrap();
        let back = read_corpus_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, corpus);

        let mut buf = Vec::new();
        write_unlabeled_jsonl(&strip_truth(&corpus), &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(!text.contains("truth"));
        assert!(read_corpus_jsonl(buf.as_slice()).is_err());
        assert_eq!(read_unlabeled_jsonl(buf.as_slice()).unwrap(), strip_truth(&corpus));
    }

    #[test]
    fn corrupt_line_reports_line_number() {
        let input = b"\n{not json}\n";
        match read_unlabeled_jsonl(&input[..]) {
            Err(WorldError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
