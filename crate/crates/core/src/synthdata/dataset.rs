//! Corpus assembly, hash-ranked splits and the on-disk layout:
//! `manifest.jsonl`, `attributes.txt`, `vocab.txt`, `voxels/<shape_id>.vox`.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::shapes::{generate_shape, BackStyle, Color, HeightTier, ShapeClass, ShapeSpec};
use super::text::{attribute_lexicon, generate_caption, Tokenizer, NUM_TEMPLATES};
use super::voxel::VoxelGrid;
use crate::error::{format_err, io_err, CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug)]
pub struct ShapeRecord {
    pub id: String,
    pub spec: ShapeSpec,
    pub split: Split,
    pub grid: VoxelGrid,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaptionRecord {
    pub shape_id: String,
    /// Index into [`Corpus::shapes`].
    pub shape: usize,
    pub text: String,
    pub tokens: Vec<usize>,
    pub attributes: Vec<String>,
    pub split: Split,
    pub template: usize,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub shapes: Vec<ShapeRecord>,
    pub captions: Vec<CaptionRecord>,
    /// Attribute phrases used by at least one caption, in lexicon order.
    pub attributes: Vec<String>,
    pub tokenizer: Tokenizer,
}

/// One manifest line per caption.
#[derive(Serialize, Deserialize)]
struct ManifestLine {
    shape_id: String,
    voxel_path: String,
    class: ShapeClass,
    caption: String,
    attributes: Vec<String>,
    split: Split,
    template: usize,
    spec: ShapeSpec,
}

pub fn shape_id(i: usize) -> String {
    format!("s{i:05}")
}

fn id_hash(id: &str) -> [u8; 32] {
    Sha256::digest(id.as_bytes()).into()
}

/// Ranks ids by SHA-256 and cuts 80/10/10 (rounded), so membership depends only
/// on the id set, never on generation order.
pub fn assign_splits(ids: &[String]) -> Vec<Split> {
    let n = ids.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (id_hash(&ids[i]), i));
    let n_train = (8 * n + 5) / 10;
    let n_val = (n + 5) / 10;
    let mut out = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    out
}

pub fn sample_spec<R: Rng + ?Sized>(rng: &mut R, seed: u64) -> ShapeSpec {
    let class = ShapeClass::ALL[rng.random_range(0..ShapeClass::ALL.len())];
    let leg_count = rng.random_range(2..=6u8);
    let height = HeightTier::ALL[rng.random_range(0..3)];
    let back = if class.has_back() {
        BackStyle::ALL[rng.random_range(0..3)]
    } else {
        BackStyle::None
    };
    let primary = Color::ALL[rng.random_range(0..Color::ALL.len())];
    let mut secondary = Color::ALL[rng.random_range(0..Color::ALL.len() - 1)];
    if secondary >= primary {
        secondary = Color::ALL[secondary as usize + 1];
    }
    ShapeSpec {
        class,
        leg_count,
        height,
        back,
        primary,
        secondary,
        seed,
    }
}

impl Corpus {
    /// Generates `n_shapes` shapes with `captions_per_shape` captions each,
    /// using distinct templates per shape.
    pub fn generate(n_shapes: usize, captions_per_shape: usize, seed: u64) -> Result<Self> {
        if n_shapes < 10 {
            return Err(CoreError::Invalid(format!("need at least 10 shapes, got {n_shapes}")));
        }
        if captions_per_shape == 0 || captions_per_shape > NUM_TEMPLATES {
            return Err(CoreError::Invalid(format!(
                "captions per shape must be in 1..={NUM_TEMPLATES}, got {captions_per_shape}"
            )));
        }
        let ids: Vec<String> = (0..n_shapes).map(shape_id).collect();
        let splits = assign_splits(&ids);
        let tokenizer = Tokenizer::default();
        let mut shapes = Vec::with_capacity(n_shapes);
        let mut captions = Vec::with_capacity(n_shapes * captions_per_shape);
        for (i, (id, split)) in ids.into_iter().zip(splits).enumerate() {
            let mut stream = ChaCha8Rng::seed_from_u64(seed);
            stream.set_stream(i as u64);
            let shape_seed = stream.next_u64();
            let mut rng = ChaCha8Rng::seed_from_u64(shape_seed);
            let spec = sample_spec(&mut rng, shape_seed);
            let grid = generate_shape(&spec)?;
            let mut templates: Vec<u64> = (0..NUM_TEMPLATES as u64).collect();
            templates.shuffle(&mut rng);
            for &v in &templates[..captions_per_shape] {
                let c = generate_caption(&spec, v);
                captions.push(CaptionRecord {
                    shape_id: id.clone(),
                    shape: i,
                    tokens: tokenizer.encode(&c.text),
                    text: c.text,
                    attributes: c.attributes,
                    split,
                    template: c.template,
                });
            }
            shapes.push(ShapeRecord { id, spec, split, grid });
        }
        let attributes = used_attributes(&captions);
        Ok(Self {
            shapes,
            captions,
            attributes,
            tokenizer,
        })
    }

    pub fn shape_index(&self) -> HashMap<&str, usize> {
        self.shapes
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.as_str(), i))
            .collect()
    }

    pub fn shapes_in(&self, split: Split) -> Vec<usize> {
        (0..self.shapes.len())
            .filter(|&i| self.shapes[i].split == split)
            .collect()
    }

    pub fn captions_in(&self, split: Split) -> Vec<usize> {
        (0..self.captions.len())
            .filter(|&i| self.captions[i].split == split)
            .collect()
    }

    pub fn captions_of(&self, shape: usize) -> Vec<usize> {
        (0..self.captions.len())
            .filter(|&i| self.captions[i].shape == shape)
            .collect()
    }

    fn manifest_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for c in &self.captions {
            let s = &self.shapes[c.shape];
            let line = ManifestLine {
                shape_id: c.shape_id.clone(),
                voxel_path: format!("voxels/{}.vox", s.id),
                class: s.spec.class,
                caption: c.text.clone(),
                attributes: c.attributes.clone(),
                split: c.split,
                template: c.template,
                spec: s.spec,
            };
            serde_json::to_writer(&mut out, &line).map_err(|e| format_err("manifest", e.to_string()))?;
            out.push(b'\n');
        }
        Ok(out)
    }

    /// Writes the corpus under `dir`, creating it if needed.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let vox_dir = dir.join("voxels");
        std::fs::create_dir_all(&vox_dir).map_err(io_err(&vox_dir))?;
        for s in &self.shapes {
            s.grid.write(&vox_dir.join(format!("{}.vox", s.id)))?;
        }
        let write = |name: &str, bytes: &[u8]| {
            let p = dir.join(name);
            std::fs::File::create(&p)
                .and_then(|mut f| f.write_all(bytes))
                .map_err(io_err(p))
        };
        write("manifest.jsonl", &self.manifest_bytes()?)?;
        write("attributes.txt", lines(&self.attributes).as_bytes())?;
        write("vocab.txt", lines(self.tokenizer.words()).as_bytes())?;
        Ok(())
    }

    /// Reads a corpus written by [`Corpus::write`]; shapes appear in first-mention order.
    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let p = dir.join(name);
            std::fs::read_to_string(&p).map_err(io_err(p))
        };
        let tokenizer = Tokenizer::from_words(read("vocab.txt")?.lines().map(str::to_string).collect());
        let attributes: Vec<String> = read("attributes.txt")?.lines().map(str::to_string).collect();
        let mut shapes: Vec<ShapeRecord> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut captions = Vec::new();
        for (ln, line) in read("manifest.jsonl")?.lines().enumerate() {
            let m: ManifestLine =
                serde_json::from_str(line).map_err(|e| format_err("manifest", format!("line {}: {e}", ln + 1)))?;
            let shape = match index.get(&m.shape_id) {
                Some(&i) => i,
                None => {
                    let grid = VoxelGrid::read(&dir.join(&m.voxel_path))?;
                    shapes.push(ShapeRecord {
                        id: m.shape_id.clone(),
                        spec: m.spec,
                        split: m.split,
                        grid,
                    });
                    index.insert(m.shape_id.clone(), shapes.len() - 1);
                    shapes.len() - 1
                }
            };
            captions.push(CaptionRecord {
                tokens: tokenizer.encode(&m.caption),
                shape_id: m.shape_id,
                shape,
                text: m.caption,
                attributes: m.attributes,
                split: m.split,
                template: m.template,
            });
        }
        if shapes.is_empty() {
            return Err(CoreError::Invalid(format!("empty corpus at {}", dir.display())));
        }
        Ok(Self {
            shapes,
            captions,
            attributes,
            tokenizer,
        })
    }
}

fn lines<S: AsRef<str>>(items: &[S]) -> String {
    items.iter().map(|s| format!("{}\n", s.as_ref())).collect()
}

fn used_attributes(captions: &[CaptionRecord]) -> Vec<String> {
    attribute_lexicon()
        .into_iter()
        .filter(|a| captions.iter().any(|c| c.attributes.contains(a)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hundred_shapes_three_captions() {
        let c = Corpus::generate(100, 3, 7).unwrap();
        assert_eq!(c.shapes.len(), 100);
        assert_eq!(c.captions.len(), 300);
        assert_eq!(c.shapes_in(Split::Train).len(), 80);
        assert_eq!(c.shapes_in(Split::Val).len(), 10);
        assert_eq!(c.shapes_in(Split::Test).len(), 10);
        for s in 0..100 {
            let caps = c.captions_of(s);
            let mut t: Vec<usize> = caps.iter().map(|&i| c.captions[i].template).collect();
            t.dedup();
            assert_eq!(t.len(), 3);
        }
    }

    #[test]
    fn splits_depend_only_on_ids() {
        let ids: Vec<String> = (0..50).map(shape_id).collect();
        let mut rev = ids.clone();
        rev.reverse();
        let a = assign_splits(&ids);
        let mut b = assign_splits(&rev);
        b.reverse();
        assert_eq!(a, b);
    }

    #[test]
    fn too_small_or_too_many_captions_is_an_error() {
        assert!(Corpus::generate(9, 3, 0).is_err());
        assert!(Corpus::generate(10, 8, 0).is_err());
    }

    #[test]
    fn secondary_colour_never_equals_primary() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let s = sample_spec(&mut rng, 0);
            s.validate().unwrap();
        }
    }
}
