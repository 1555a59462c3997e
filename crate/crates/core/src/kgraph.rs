//! Text–shape knowledge graph: shape, text and attribute entities with
//! descriptor vectors, typed edges, prior retrieval and a binary file format.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::error::{format_err, io_err, CoreError, Result};
use crate::repnet::RepNet;
use crate::synthdata::{Corpus, PhraseMatcher, Split};

pub const GRAPH_MAGIC: &[u8; 8] = b"T2TDKG01";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EntityKind {
    Shape = 0,
    Text = 1,
    Attribute = 2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EdgeKind {
    SS = 0,
    TS = 1,
    TA = 2,
    SA = 3,
}

impl EdgeKind {
    fn endpoints(self) -> (EntityKind, EntityKind) {
        match self {
            Self::SS => (EntityKind::Shape, EntityKind::Shape),
            Self::TS => (EntityKind::Text, EntityKind::Shape),
            Self::TA => (EntityKind::Text, EntityKind::Attribute),
            Self::SA => (EntityKind::Shape, EntityKind::Attribute),
        }
    }

    fn from_u8(b: u8) -> Option<Self> {
        [Self::SS, Self::TS, Self::TA, Self::SA].get(b as usize).copied()
    }
}

/// Descriptors hold values exactly representable as `f32`, so the file round
/// trip is lossless.
#[derive(Clone, Debug, PartialEq)]
pub struct Entity {
    pub kind: EntityKind,
    pub payload: String,
    pub descriptor: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub kind: EdgeKind,
    pub from: usize,
    pub to: usize,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PriorShape {
    pub entity: usize,
    pub shape_id: String,
    pub score: f64,
    pub descriptor: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PriorAttribute {
    pub entity: usize,
    pub phrase: String,
    pub descriptor: Vec<f64>,
}

/// Retrieved priors for one query. `shapes` is sorted by descending score.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorBundle {
    pub shapes: Vec<PriorShape>,
    pub attributes: Vec<PriorAttribute>,
    /// Set when no attribute matched and shapes were ranked by descriptor cosine alone.
    pub fallback: bool,
}

/// Everything needed to add one shape: its descriptor and its captions.
pub struct ShapeInput<'a> {
    pub shape_id: &'a str,
    pub descriptor: Vec<f64>,
    pub captions: Vec<(&'a str, Vec<f64>)>,
}

#[derive(Clone, Debug)]
pub struct KnowledgeGraph {
    dim: usize,
    k: usize,
    entities: Vec<Entity>,
    edges: Vec<Edge>,
    attr_phrases: Vec<String>,
    attr_entities: Vec<usize>,
    matcher: PhraseMatcher,
    shape_by_id: HashMap<String, usize>,
    shape_attrs: HashMap<usize, Vec<usize>>,
    ss_out: HashMap<usize, Vec<(usize, f64)>>,
}

fn round32(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x as f32)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let n = (dot(a, a) * dot(b, b)).sqrt();
    if n == 0.0 {
        0.0
    } else {
        dot(a, b) / n
    }
}

/// Descending score, ascending id.
fn rank(a: &(usize, f64), b: &(usize, f64)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

impl KnowledgeGraph {
    /// Empty graph with the attribute vocabulary. Attributes are added lazily,
    /// on first occurrence in a caption.
    pub fn new(dim: usize, k: usize) -> Self {
        Self {
            dim,
            k,
            entities: Vec::new(),
            edges: Vec::new(),
            attr_phrases: Vec::new(),
            attr_entities: Vec::new(),
            matcher: PhraseMatcher::new::<String>(&[]),
            shape_by_id: HashMap::new(),
            shape_attrs: HashMap::new(),
            ss_out: HashMap::new(),
        }
    }

    /// Builds the graph over the train split. Attribute phrases with no
    /// occurrence are left out.
    pub fn build(corpus: &Corpus, net: &RepNet, k: usize) -> Result<Self> {
        let shapes = corpus.shapes_in(Split::Train);
        if shapes.is_empty() {
            return Err(CoreError::Invalid("cannot build a graph from an empty corpus".into()));
        }
        let mut phrase_desc = Vec::with_capacity(corpus.attributes.len());
        for a in &corpus.attributes {
            phrase_desc.push((a.clone(), net.encode_text(&corpus.tokenizer.encode(a))?));
        }
        let mut inputs = Vec::with_capacity(shapes.len());
        for &s in &shapes {
            let mut caps = Vec::new();
            for c in corpus.captions_of(s) {
                let cap = &corpus.captions[c];
                caps.push((cap.text.as_str(), net.encode_text(&cap.tokens)?));
            }
            inputs.push(ShapeInput {
                shape_id: &corpus.shapes[s].id,
                descriptor: net.encode_voxels(&corpus.shapes[s].grid)?,
                captions: caps,
            });
        }
        Self::from_inputs(net.cfg.d, k, &phrase_desc, inputs)
    }

    /// Builds from precomputed descriptors; all shapes are entered before any
    /// shape–shape edge is computed.
    pub fn from_inputs(
        dim: usize,
        k: usize,
        phrases: &[(String, Vec<f64>)],
        shapes: Vec<ShapeInput<'_>>,
    ) -> Result<Self> {
        if shapes.is_empty() {
            return Err(CoreError::Invalid("cannot build a graph from an empty corpus".into()));
        }
        let mut g = Self::new(dim, k);
        let matcher = PhraseMatcher::new(&phrases.iter().map(|p| p.0.clone()).collect::<Vec<_>>());
        let mut used = vec![false; phrases.len()];
        for s in &shapes {
            for (text, _) in &s.captions {
                for i in matcher.find(text) {
                    used[i] = true;
                }
            }
        }
        for ((phrase, desc), u) in phrases.iter().zip(&used) {
            if *u {
                g.add_attribute(phrase, desc)?;
            } else {
                log::warn!("attribute `{phrase}` never occurs; no entity created");
            }
        }
        let mut new_shapes = Vec::with_capacity(shapes.len());
        for s in &shapes {
            new_shapes.push(g.insert_shape(s)?);
        }
        for s in new_shapes {
            g.link_neighbours(s, &shapes_captions(&g, s))?;
        }
        g.finish();
        Ok(g)
    }

    fn add_attribute(&mut self, phrase: &str, desc: &[f64]) -> Result<usize> {
        self.check_dim(desc)?;
        let id = self.push_entity(EntityKind::Attribute, phrase, desc);
        self.attr_phrases.push(phrase.to_string());
        self.attr_entities.push(id);
        self.matcher = PhraseMatcher::new(&self.attr_phrases);
        Ok(id)
    }

    fn check_dim(&self, desc: &[f64]) -> Result<()> {
        if desc.len() != self.dim || desc.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Invalid(format!(
                "descriptor of length {} (finite: {}) for a graph of width {}",
                desc.len(),
                desc.iter().all(|v| v.is_finite()),
                self.dim
            )));
        }
        Ok(())
    }

    fn push_entity(&mut self, kind: EntityKind, payload: &str, desc: &[f64]) -> usize {
        self.entities.push(Entity {
            kind,
            payload: payload.to_string(),
            descriptor: round32(desc),
        });
        self.entities.len() - 1
    }

    /// Adds the shape, its texts, and TS/TA/SA edges. No SS edges yet.
    fn insert_shape(&mut self, s: &ShapeInput<'_>) -> Result<usize> {
        if self.shape_by_id.contains_key(s.shape_id) {
            return Err(CoreError::Invalid(format!(
                "shape `{}` already in the graph",
                s.shape_id
            )));
        }
        self.check_dim(&s.descriptor)?;
        let shape = self.push_entity(EntityKind::Shape, s.shape_id, &s.descriptor);
        self.shape_by_id.insert(s.shape_id.to_string(), shape);
        let mut attrs: Vec<usize> = Vec::new();
        for (text, desc) in &s.captions {
            self.check_dim(desc)?;
            let t = self.push_entity(EntityKind::Text, text, desc);
            self.edges.push(Edge {
                kind: EdgeKind::TS,
                from: t,
                to: shape,
                weight: 1.0,
            });
            for i in self.matcher.find(text) {
                let a = self.attr_entities[i];
                self.edges.push(Edge {
                    kind: EdgeKind::TA,
                    from: t,
                    to: a,
                    weight: 1.0,
                });
                if !attrs.contains(&a) {
                    attrs.push(a);
                }
            }
        }
        for &a in &attrs {
            self.edges.push(Edge {
                kind: EdgeKind::SA,
                from: shape,
                to: a,
                weight: 1.0,
            });
        }
        self.shape_attrs.insert(shape, attrs);
        Ok(shape)
    }

    /// Top-`k` candidates of one cosine retrieval over the shape gallery, self excluded.
    fn retrieve_shapes(&self, query: &[f64], exclude: usize) -> Vec<(usize, f64)> {
        let mut c: Vec<(usize, f64)> = self
            .shape_entities()
            .filter(|&s| s != exclude)
            .map(|s| (s, cosine(query, &self.entities[s].descriptor)))
            .collect();
        c.sort_by(rank);
        c.truncate(self.k);
        c
    }

    /// Shape–shape edges for `shape`: one retrieval per caption plus one from the
    /// shape descriptor; each candidate scores `frequency × mean cosine`, with
    /// frequency relative to the number of retrievals so weights stay in `[0, 1]`.
    fn link_neighbours(&mut self, shape: usize, captions: &[usize]) -> Result<()> {
        let mut stats: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
        let mut queries: Vec<&[f64]> = captions
            .iter()
            .map(|&t| self.entities[t].descriptor.as_slice())
            .collect();
        queries.push(&self.entities[shape].descriptor);
        let runs = queries.len() as f64;
        let mut hits = Vec::new();
        for q in queries {
            hits.extend(self.retrieve_shapes(q, shape));
        }
        for (s, c) in hits {
            let e = stats.entry(s).or_insert((0, 0.0));
            e.0 += 1;
            e.1 += c;
        }
        let mut scored: Vec<(usize, f64)> = stats
            .into_iter()
            .map(|(s, (f, sum))| (s, (f as f64 / runs * (sum / f as f64)).max(0.0)))
            .collect();
        scored.sort_by(rank);
        scored.truncate(self.k);
        for (s, w) in scored {
            self.edges.push(Edge {
                kind: EdgeKind::SS,
                from: shape,
                to: s,
                weight: f64::from(w as f32),
            });
        }
        Ok(())
    }

    /// Appends a shape with its captions. Existing entities and edges are untouched;
    /// only the new shape gets outgoing shape–shape edges.
    pub fn add_shape(&mut self, input: ShapeInput<'_>) -> Result<usize> {
        let s = self.insert_shape(&input)?;
        let caps = shapes_captions(self, s);
        self.link_neighbours(s, &caps)?;
        self.finish();
        Ok(s)
    }

    /// Rebuilds lookup tables from the entity and edge lists.
    fn finish(&mut self) {
        self.edges
            .sort_by_key(|a| (a.kind, a.from, a.to));
        self.shape_by_id.clear();
        self.attr_phrases.clear();
        self.attr_entities.clear();
        for (i, e) in self.entities.iter().enumerate() {
            match e.kind {
                EntityKind::Shape => {
                    self.shape_by_id.insert(e.payload.clone(), i);
                }
                EntityKind::Attribute => {
                    self.attr_phrases.push(e.payload.clone());
                    self.attr_entities.push(i);
                }
                EntityKind::Text => {}
            }
        }
        self.matcher = PhraseMatcher::new(&self.attr_phrases);
        self.shape_attrs.clear();
        self.ss_out.clear();
        for e in &self.edges {
            match e.kind {
                EdgeKind::SA => self.shape_attrs.entry(e.from).or_default().push(e.to),
                EdgeKind::SS => self.ss_out.entry(e.from).or_default().push((e.to, e.weight)),
                _ => {}
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn shape_entities(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.entities.len()).filter(|&i| self.entities[i].kind == EntityKind::Shape)
    }

    pub fn shape_entity(&self, shape_id: &str) -> Option<usize> {
        self.shape_by_id.get(shape_id).copied()
    }

    pub fn attribute_phrases(&self) -> &[String] {
        &self.attr_phrases
    }

    pub fn attribute_entity(&self, phrase: &str) -> Option<usize> {
        self.attr_phrases
            .iter()
            .position(|p| p == phrase)
            .map(|i| self.attr_entities[i])
    }

    /// Attribute entities linked to a shape.
    pub fn shape_attributes(&self, shape: usize) -> &[usize] {
        self.shape_attrs.get(&shape).map_or(&[], Vec::as_slice)
    }

    /// Outgoing shape–shape edges `(neighbour, weight)`.
    pub fn neighbours(&self, shape: usize) -> &[(usize, f64)] {
        self.ss_out.get(&shape).map_or(&[], Vec::as_slice)
    }

    /// Attribute entities whose phrase occurs in `text`, in order of occurrence.
    pub fn match_attributes(&self, text: &str) -> Vec<usize> {
        self.matcher
            .find(text)
            .into_iter()
            .map(|i| self.attr_entities[i])
            .collect()
    }

    /// Prior retrieval for a query text with descriptor `query`:
    /// 1. attributes occurring in the text;
    /// 2. shapes linked to any of them, scored `#matched + cos(query, shape)`;
    /// 3. shape–shape neighbours of those, scored `source score × edge weight`;
    /// 4. union ranked by the larger of its scores, top `m`.
    ///
    /// `exclude` drops one shape both as a candidate and as a step-3 source.
    pub fn retrieve(&self, text: &str, query: &[f64], m: usize, exclude: Option<usize>) -> PriorBundle {
        let attrs = self.match_attributes(text);
        let attributes = attrs
            .iter()
            .map(|&a| PriorAttribute {
                entity: a,
                phrase: self.entities[a].payload.clone(),
                descriptor: self.entities[a].descriptor.clone(),
            })
            .collect();
        let mut direct: BTreeMap<usize, f64> = BTreeMap::new();
        for s in self.shape_entities() {
            if Some(s) == exclude {
                continue;
            }
            let matched = self.shape_attributes(s).iter().filter(|a| attrs.contains(a)).count();
            if matched > 0 {
                direct.insert(s, matched as f64 + cosine(query, &self.entities[s].descriptor));
            }
        }
        let mut scores = direct.clone();
        for (&src, &sc) in &direct {
            for &(n, w) in self.neighbours(src) {
                if Some(n) == exclude {
                    continue;
                }
                let v = sc * w;
                let e = scores.entry(n).or_insert(v);
                if v > *e {
                    *e = v;
                }
            }
        }
        let fallback = scores.is_empty();
        let mut ranked: Vec<(usize, f64)> = if fallback {
            log::debug!("no attribute prior for `{text}`; ranking shapes by cosine");
            self.shape_entities()
                .filter(|&s| Some(s) != exclude)
                .map(|s| (s, cosine(query, &self.entities[s].descriptor)))
                .collect()
        } else {
            scores.into_iter().collect()
        };
        ranked.sort_by(rank);
        ranked.truncate(m);
        PriorBundle {
            shapes: ranked
                .into_iter()
                .map(|(s, score)| PriorShape {
                    entity: s,
                    shape_id: self.entities[s].payload.clone(),
                    score,
                    descriptor: self.entities[s].descriptor.clone(),
                })
                .collect(),
            attributes,
            fallback,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(GRAPH_MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        for kind in [EntityKind::Shape, EntityKind::Text, EntityKind::Attribute] {
            let ids: Vec<usize> = (0..self.entities.len())
                .filter(|&i| self.entities[i].kind == kind)
                .collect();
            out.extend_from_slice(&(ids.len() as u32).to_le_bytes());
            for i in ids {
                let e = &self.entities[i];
                out.extend_from_slice(&(i as u32).to_le_bytes());
                out.extend_from_slice(&(e.payload.len() as u32).to_le_bytes());
                out.extend_from_slice(e.payload.as_bytes());
                for &v in &e.descriptor {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
        out.extend_from_slice(&(self.edges.len() as u32).to_le_bytes());
        for e in &self.edges {
            out.push(e.kind as u8);
            out.extend_from_slice(&(e.from as u32).to_le_bytes());
            out.extend_from_slice(&(e.to as u32).to_le_bytes());
            out.extend_from_slice(&(e.weight as f32).to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != GRAPH_MAGIC {
            return Err(format_err("graph file", "bad magic or version"));
        }
        let dim = r.u32()? as usize;
        let k = r.u32()? as usize;
        let mut slots: Vec<Option<Entity>> = Vec::new();
        for kind in [EntityKind::Shape, EntityKind::Text, EntityKind::Attribute] {
            for _ in 0..r.u32()? {
                let id = r.u32()? as usize;
                let len = r.u32()? as usize;
                let payload = String::from_utf8(r.take(len)?.to_vec())
                    .map_err(|_| format_err("graph file", "payload is not UTF-8"))?;
                let mut descriptor = Vec::with_capacity(dim);
                for _ in 0..dim {
                    descriptor.push(f64::from(r.f32()?));
                }
                if slots.len() <= id {
                    slots.resize(id + 1, None);
                }
                if slots[id].is_some() {
                    return Err(format_err("graph file", format!("duplicate entity id {id}")));
                }
                slots[id] = Some(Entity {
                    kind,
                    payload,
                    descriptor,
                });
            }
        }
        let entities: Vec<Entity> = slots
            .into_iter()
            .enumerate()
            .map(|(i, e)| e.ok_or_else(|| format_err("graph file", format!("missing entity id {i}"))))
            .collect::<Result<_>>()?;
        let n_edges = r.u32()? as usize;
        let mut edges = Vec::with_capacity(n_edges);
        for _ in 0..n_edges {
            let kind = EdgeKind::from_u8(r.take(1)?[0]).ok_or_else(|| format_err("graph file", "unknown edge kind"))?;
            let from = r.u32()? as usize;
            let to = r.u32()? as usize;
            let weight = f64::from(r.f32()?);
            let (ka, kb) = kind.endpoints();
            let ok = entities.get(from).is_some_and(|e| e.kind == ka) && entities.get(to).is_some_and(|e| e.kind == kb);
            if !ok {
                return Err(format_err(
                    "graph file",
                    format!("edge {kind:?} {from}->{to} has wrong endpoints"),
                ));
            }
            edges.push(Edge { kind, from, to, weight });
        }
        if r.pos != bytes.len() {
            return Err(format_err("graph file", "trailing bytes"));
        }
        let mut g = Self::new(dim, k);
        g.entities = entities;
        g.edges = edges;
        g.finish();
        Ok(g)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(t2td_numcore::checkpoint::write_atomic(path, &self.encode())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path).map_err(io_err(path))?)
    }
}

/// Text entities attached to `shape` by TS edges.
fn shapes_captions(g: &KnowledgeGraph, shape: usize) -> Vec<usize> {
    g.edges
        .iter()
        .filter(|e| e.kind == EdgeKind::TS && e.to == shape)
        .map(|e| e.from)
        .collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(format_err("graph file", "truncated"));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
