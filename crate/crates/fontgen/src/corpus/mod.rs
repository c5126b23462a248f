//! Glyph corpora: procedural synthesis, on-disk layout, train/eval splits,
//! and training-batch sampling.
//!
//! Layout on disk: `manifest.json` plus `glyphs/<style_id>/<content_id>.png`.

mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use synth::StyleParams;

use crate::error::{Error, Result};
use crate::raster::Raster;

/// Content inputs always come from this style: the corpus's neutral font.
pub const REFERENCE_STYLE: u32 = 0;

pub const MANIFEST_VERSION: u32 = 1;

/// One glyph image with its character and font labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Glyph {
    pub content_id: u32,
    pub style_id: u32,
    pub image: Raster,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub num_styles: u32,
    pub num_chars: u32,
    pub image_size: u32,
    pub seed: u64,
    pub style_params: Vec<StyleParams>,
}

/// Immutable in-memory corpus: the full style x character grid.
#[derive(Debug, Clone)]
pub struct Corpus {
    manifest: CorpusManifest,
    glyphs: Vec<Arc<Glyph>>,
    by_key: BTreeMap<(u32, u32), usize>,
}

fn validate_dims(num_styles: u32, num_chars: u32, image_size: u32) -> Result<()> {
    if num_styles < 2 || num_chars < 2 {
        return Err(Error::config(format!(
            "corpus needs at least 2 styles and 2 characters, got {num_styles}x{num_chars}"
        )));
    }
    if image_size != 32 && image_size != 64 {
        return Err(Error::config(format!("image size must be 32 or 64, got {image_size}")));
    }
    Ok(())
}

impl Corpus {
    /// Renders the full grid in memory. Pure function of its arguments;
    /// pixel data is pre-quantized to the 8-bit grid PNG storage uses, so a
    /// write/load round trip is exact.
    pub fn synthesize(num_styles: u32, num_chars: u32, image_size: u32, seed: u64) -> Result<Self> {
        validate_dims(num_styles, num_chars, image_size)?;
        let mut styles = Vec::with_capacity(num_styles as usize);
        for sid in 0..num_styles {
            let s = synth::style_params(seed, sid, &styles);
            styles.push(s);
        }
        let mut taken = BTreeSet::new();
        let strokes: Vec<_> =
            (0..num_chars).map(|cid| synth::char_strokes(seed, cid, &mut taken)).collect();

        let mut glyphs = Vec::with_capacity((num_styles * num_chars) as usize);
        let mut by_key = BTreeMap::new();
        for (sid, style) in styles.iter().enumerate() {
            for (cid, st) in strokes.iter().enumerate() {
                let data = synth::render(st, style, image_size as usize);
                let mut image = Raster::from_vec(image_size as usize, data)?;
                image.quantize();
                by_key.insert((sid as u32, cid as u32), glyphs.len());
                glyphs.push(Arc::new(Glyph {
                    content_id: cid as u32,
                    style_id: sid as u32,
                    image,
                }));
            }
        }
        let manifest = CorpusManifest {
            format_version: MANIFEST_VERSION,
            num_styles,
            num_chars,
            image_size,
            seed,
            style_params: styles,
        };
        Ok(Corpus { manifest, glyphs, by_key })
    }

    /// Writes `manifest.json` and one PNG per glyph under `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest_path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&self.manifest)
            .expect("manifest serialization cannot fail");
        std::fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
        for g in &self.glyphs {
            let style_dir = dir.join("glyphs").join(g.style_id.to_string());
            std::fs::create_dir_all(&style_dir).map_err(|e| Error::io(&style_dir, e))?;
            g.image.save_png(&style_dir.join(format!("{}.png", g.content_id)))?;
        }
        Ok(())
    }

    /// Loads and validates a corpus directory: every (style, char) pair must
    /// be present, square, and match the manifest's image size.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let json =
            std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: CorpusManifest = serde_json::from_str(&json)
            .map_err(|e| Error::integrity(format!("{}: {e}", manifest_path.display())))?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(Error::integrity(format!(
                "manifest format version {} unsupported (expected {MANIFEST_VERSION})",
                manifest.format_version
            )));
        }
        validate_dims(manifest.num_styles, manifest.num_chars, manifest.image_size)
            .map_err(|e| Error::integrity(format!("manifest invalid: {e}")))?;
        if manifest.style_params.len() != manifest.num_styles as usize {
            return Err(Error::integrity(format!(
                "manifest lists {} style records for {} styles",
                manifest.style_params.len(),
                manifest.num_styles
            )));
        }

        let mut glyphs = Vec::with_capacity((manifest.num_styles * manifest.num_chars) as usize);
        let mut by_key = BTreeMap::new();
        for sid in 0..manifest.num_styles {
            for cid in 0..manifest.num_chars {
                let path = dir.join("glyphs").join(sid.to_string()).join(format!("{cid}.png"));
                if !path.is_file() {
                    return Err(Error::integrity(format!(
                        "glyph missing for (style {sid}, char {cid}): {}",
                        path.display()
                    )));
                }
                let image = Raster::load_png(&path)?;
                if image.size() != manifest.image_size as usize {
                    return Err(Error::integrity(format!(
                        "glyph (style {sid}, char {cid}) is {}px, manifest says {}px",
                        image.size(),
                        manifest.image_size
                    )));
                }
                by_key.insert((sid, cid), glyphs.len());
                glyphs.push(Arc::new(Glyph { content_id: cid, style_id: sid, image }));
            }
        }
        Ok(Corpus { manifest, glyphs, by_key })
    }

    pub fn manifest(&self) -> &CorpusManifest {
        &self.manifest
    }

    pub fn glyphs(&self) -> &[Arc<Glyph>] {
        &self.glyphs
    }

    pub fn image_size(&self) -> usize {
        self.manifest.image_size as usize
    }

    pub fn num_styles(&self) -> u32 {
        self.manifest.num_styles
    }

    pub fn num_chars(&self) -> u32 {
        self.manifest.num_chars
    }

    pub fn get(&self, content_id: u32, style_id: u32) -> Result<&Arc<Glyph>> {
        self.by_key
            .get(&(style_id, content_id))
            .map(|i| &self.glyphs[*i])
            .ok_or_else(|| {
                Error::config(format!("no glyph for (style {style_id}, char {content_id})"))
            })
    }
}

/// Synthesizes a corpus and writes it to `out`.
pub fn synth_corpus(
    num_styles: u32,
    num_chars: u32,
    image_size: u32,
    seed: u64,
    out: &Path,
) -> Result<Corpus> {
    let corpus = Corpus::synthesize(num_styles, num_chars, image_size, seed)?;
    corpus.write_to(out)?;
    Ok(corpus)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub held_out_chars: BTreeSet<u32>,
    pub held_out_styles: BTreeSet<u32>,
}

/// One side of a split: target (char, style) pairs plus the axis values that
/// occur in them, sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct GlyphSet {
    /// (content_id, style_id) pairs.
    pub pairs: Vec<(u32, u32)>,
    pub chars: Vec<u32>,
    pub styles: Vec<u32>,
}

impl GlyphSet {
    fn from_axes(chars: Vec<u32>, styles: Vec<u32>) -> Self {
        let mut pairs = Vec::with_capacity(chars.len() * styles.len());
        for &c in &chars {
            for &s in &styles {
                pairs.push((c, s));
            }
        }
        GlyphSet { pairs, chars, styles }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn contains(&self, content_id: u32, style_id: u32) -> bool {
        self.pairs.contains(&(content_id, style_id))
    }

    /// Dense index of a content id within this set's sorted char axis.
    pub fn char_index(&self, content_id: u32) -> Result<usize> {
        self.chars
            .binary_search(&content_id)
            .map_err(|_| Error::config(format!("char {content_id} not in this split")))
    }

    /// Dense index of a style id within this set's sorted style axis.
    pub fn style_index(&self, style_id: u32) -> Result<usize> {
        self.styles
            .binary_search(&style_id)
            .map_err(|_| Error::config(format!("style {style_id} not in this split")))
    }
}

/// The three evaluation regimes: training pairs, unseen characters rendered
/// in seen styles, and seen characters rendered in unseen styles. Pairs that
/// are unseen on both axes belong to none of them.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: GlyphSet,
    pub unseen_chars: GlyphSet,
    pub unseen_styles: GlyphSet,
}

pub fn split(corpus: &Corpus, spec: &SplitSpec) -> Result<Split> {
    if spec.held_out_chars.is_empty() || spec.held_out_styles.is_empty() {
        return Err(Error::config("held-out character and style sets must be nonempty"));
    }
    for &c in &spec.held_out_chars {
        if c >= corpus.num_chars() {
            return Err(Error::config(format!("held-out char {c} outside corpus")));
        }
    }
    for &s in &spec.held_out_styles {
        if s >= corpus.num_styles() {
            return Err(Error::config(format!("held-out style {s} outside corpus")));
        }
    }
    if spec.held_out_chars.len() >= corpus.num_chars() as usize {
        return Err(Error::config("held-out chars exhaust the character axis"));
    }
    if spec.held_out_styles.len() >= corpus.num_styles() as usize {
        return Err(Error::config("held-out styles exhaust the style axis"));
    }

    let seen_chars: Vec<u32> =
        (0..corpus.num_chars()).filter(|c| !spec.held_out_chars.contains(c)).collect();
    let seen_styles: Vec<u32> =
        (0..corpus.num_styles()).filter(|s| !spec.held_out_styles.contains(s)).collect();
    let held_chars: Vec<u32> = spec.held_out_chars.iter().copied().collect();
    let held_styles: Vec<u32> = spec.held_out_styles.iter().copied().collect();

    Ok(Split {
        train: GlyphSet::from_axes(seen_chars.clone(), seen_styles.clone()),
        unseen_chars: GlyphSet::from_axes(held_chars, seen_styles),
        unseen_styles: GlyphSet::from_axes(seen_chars, held_styles),
    })
}

/// One supervised example: render `content_image`'s character in the style
/// shown by `style_images`.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    /// The target character drawn in the reference style.
    pub content_image: Arc<Glyph>,
    /// k glyphs sharing style `y_s`, none of them the target character.
    pub style_images: Vec<Arc<Glyph>>,
    pub ground_truth: Arc<Glyph>,
    pub y_c: u32,
    pub y_s: u32,
}

/// Draws `batch_size` training samples. Style and character are uniform over
/// the train axes; the k style exemplars are drawn without replacement from
/// the target style, excluding the target character.
pub fn sample_batch(
    corpus: &Corpus,
    train: &GlyphSet,
    batch_size: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<Vec<TrainingSample>> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    if k == 0 || k > train.chars.len().saturating_sub(1) {
        return Err(Error::config(format!(
            "k={k} style images not drawable from {} train characters (need 1 <= k <= chars-1)",
            train.chars.len()
        )));
    }
    if train.styles.binary_search(&REFERENCE_STYLE).is_err() {
        return Err(Error::config(
            "the reference style (style 0) must stay in the training split; content inputs come from it",
        ));
    }

    let mut batch = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let y_s = train.styles[rng.random_range(0..train.styles.len())];
        let y_c = train.chars[rng.random_range(0..train.chars.len())];
        let candidates: Vec<u32> = train.chars.iter().copied().filter(|c| *c != y_c).collect();
        let picks = rand::seq::index::sample(rng, candidates.len(), k);
        let style_images = picks
            .iter()
            .map(|i| corpus.get(candidates[i], y_s).cloned())
            .collect::<Result<Vec<_>>>()?;
        batch.push(TrainingSample {
            content_image: corpus.get(y_c, REFERENCE_STYLE)?.clone(),
            style_images,
            ground_truth: corpus.get(y_c, y_s)?.clone(),
            y_c,
            y_s,
        });
    }
    Ok(batch)
}
