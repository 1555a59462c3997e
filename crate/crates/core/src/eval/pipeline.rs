//! Stage-by-stage orchestration. Every artifact lives in the cache under a name
//! derived from the configuration sections it depends on, so a stage is built
//! once and reused by every later run with the same inputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use t2td_numcore::checkpoint::{load_into, save_store, write_atomic};
use t2td_numcore::ParamStore;

use super::metrics::{dominant_color, iou, ranks_within, NearestCentroid};
use super::report::{ItemMetrics, MetricReport};
use crate::causal::{train_heads, SelectorExample, SelectorHeads};
use crate::config::{RunConfig, Stage};
use crate::diversity::{train_imle, ImleItem, LatentGenerator};
use crate::error::{format_err, io_err, CoreError, Result};
use crate::genfuse::{generate, train_generator, training_examples, Generator, PriorSource};
use crate::kgraph::KnowledgeGraph;
use crate::repnet::{pretrain_ae, pretrain_joint, LossCurve, RepNet};
use crate::synthdata::{Corpus, Split, VoxelGrid};

pub const CACHE_ENV: &str = "T2TD_CACHE";

/// Selection heads with their own parameter store.
pub type Selector = (SelectorHeads, ParamStore);

/// Per-step losses written next to each trained artifact.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub curves: BTreeMap<String, Vec<f64>>,
}

impl TrainingLog {
    pub fn single(name: &str, curve: Vec<f64>) -> Self {
        Self {
            curves: BTreeMap::from([(name.to_string(), curve)]),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_vec(self).map_err(|e| format_err("training log", e.to_string()))?;
        Ok(write_atomic(path, &body)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        serde_json::from_slice(&bytes).map_err(|e| format_err("training log", e.to_string()))
    }
}

pub struct Pipeline {
    pub cfg: RunConfig,
    pub cache: PathBuf,
    /// When false, a missing artifact is an error instead of being built.
    pub build: bool,
}

impl Pipeline {
    pub fn new(cfg: RunConfig, cache: impl Into<PathBuf>, build: bool) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            cache: cache.into(),
            build,
        })
    }

    /// `$T2TD_CACHE`, or `t2td-cache` in the working directory.
    pub fn default_cache() -> PathBuf {
        std::env::var_os(CACHE_ENV).map_or_else(|| PathBuf::from("t2td-cache"), PathBuf::from)
    }

    pub fn path(&self, stage: Stage) -> PathBuf {
        let key = self.cfg.stage_key(stage);
        let name = match stage {
            Stage::Corpus => format!("corpus-{}", &key[..16]),
            Stage::Graph => format!("graph-{}.kg", &key[..16]),
            s => format!("{}-{}.ckpt", s.name(), &key[..16]),
        };
        self.cache.join(name)
    }

    pub fn log_path(&self, stage: Stage) -> PathBuf {
        let mut p = self.path(stage).into_os_string();
        p.push(".log.json");
        PathBuf::from(p)
    }

    /// Whether `stage` must be built; errors if it must but building is off.
    fn needs_build(&self, stage: Stage, marker: &Path) -> Result<bool> {
        if marker.exists() {
            return Ok(false);
        }
        if !self.build {
            return Err(CoreError::Missing(format!(
                "stage `{}` has no artifact at {} and building is disabled",
                stage.name(),
                marker.display()
            )));
        }
        std::fs::create_dir_all(&self.cache).map_err(io_err(&self.cache))?;
        log::info!("building stage `{}`", stage.name());
        Ok(true)
    }

    fn write_log(&self, stage: Stage, log: &TrainingLog) -> Result<()> {
        log.write(&self.log_path(stage))
    }

    pub fn training_log(&self, stage: Stage) -> Result<TrainingLog> {
        TrainingLog::read(&self.log_path(stage))
    }

    pub fn corpus(&self) -> Result<Corpus> {
        let dir = self.path(Stage::Corpus);
        if self.needs_build(Stage::Corpus, &dir.join("manifest.jsonl"))? {
            let d = &self.cfg.data;
            let corpus = Corpus::generate(d.n_shapes, d.captions_per_shape, d.seed)?;
            let tmp = self.cache.join(format!(".tmp-{}", std::process::id()));
            corpus.write(&tmp)?;
            std::fs::rename(&tmp, &dir).map_err(io_err(&dir))?;
        }
        Corpus::load(&dir)
    }

    pub fn repnet(&self, corpus: &Corpus) -> Result<RepNet> {
        let path = self.path(Stage::RepNet);
        let vocab = corpus.tokenizer.vocab_size();
        if self.needs_build(Stage::RepNet, &path)? {
            let p = &self.cfg.pretrain;
            let mut net = RepNet::new(&self.cfg.model, vocab)?;
            let ae = pretrain_ae(&mut net, corpus, p, p.ae_epochs)?;
            let joint = pretrain_joint(&mut net, corpus, p, p.joint_epochs)?;
            let log = TrainingLog {
                curves: BTreeMap::from([("ae".to_string(), ae.steps), ("joint".to_string(), joint.steps)]),
            };
            self.write_log(Stage::RepNet, &log)?;
            net.save(&path)?;
        }
        RepNet::load(&path, &self.cfg.model, vocab)
    }

    pub fn graph(&self, corpus: &Corpus, net: &RepNet) -> Result<KnowledgeGraph> {
        let path = self.path(Stage::Graph);
        if self.needs_build(Stage::Graph, &path)? {
            KnowledgeGraph::build(corpus, net, self.cfg.kgraph.k)?.save(&path)?;
        }
        KnowledgeGraph::load(&path)
    }

    pub fn selector(&self, corpus: &Corpus, net: &RepNet, graph: &KnowledgeGraph) -> Result<Selector> {
        let path = self.path(Stage::Selector);
        if self.needs_build(Stage::Selector, &path)? {
            let (sel, curve) = train_selector(&self.cfg, corpus, net, graph)?;
            self.write_log(Stage::Selector, &TrainingLog::single("selector", curve))?;
            save_store(&sel.1, &path)?;
        }
        load_selector(&self.cfg, &path)
    }

    /// Selection heads when the ablation settings use them.
    pub fn selector_if_needed(
        &self,
        corpus: &Corpus,
        net: &RepNet,
        graph: &KnowledgeGraph,
    ) -> Result<Option<Selector>> {
        let a = &self.cfg.ablation;
        if a.shape_prior && a.causal {
            Ok(Some(self.selector(corpus, net, graph)?))
        } else {
            Ok(None)
        }
    }

    pub fn source<'a>(&self, graph: &'a KnowledgeGraph, selector: Option<&'a Selector>) -> PriorSource<'a> {
        prior_source(&self.cfg, graph, selector)
    }

    pub fn generator(
        &self,
        corpus: &Corpus,
        net: &RepNet,
        graph: &KnowledgeGraph,
        selector: Option<&Selector>,
    ) -> Result<Generator> {
        let path = self.path(Stage::Generator);
        if self.needs_build(Stage::Generator, &path)? {
            let (gen, curve) = train_fused_generator(&self.cfg, corpus, net, graph, selector)?;
            self.write_log(Stage::Generator, &TrainingLog::single("generator", curve.steps))?;
            gen.save(&path)?;
        }
        Generator::load(&path, &self.cfg.model, &self.cfg.fuse, corpus.tokenizer.vocab_size())
    }

    pub fn latent(&self, corpus: &Corpus, gen: &Generator, graph: &KnowledgeGraph) -> Result<LatentGenerator> {
        let path = self.path(Stage::Latent);
        let d = self.cfg.model.d;
        if self.needs_build(Stage::Latent, &path)? {
            let (latent, curve) = train_latent(&self.cfg, corpus, gen, graph)?;
            self.write_log(Stage::Latent, &TrainingLog::single("latent", curve.steps))?;
            latent.save(&path)?;
        }
        LatentGenerator::load(&path, d, &self.cfg.diversity)
    }

    /// Scores the test split; checkpoint names come from the cache layout.
    pub fn evaluate(
        &self,
        label: &str,
        corpus: &Corpus,
        net: &RepNet,
        gen: &Generator,
        source: &PriorSource<'_>,
    ) -> Result<MetricReport> {
        let mut stages = vec![Stage::RepNet, Stage::Graph, Stage::Generator];
        if source.heads.is_some() {
            stages.push(Stage::Selector);
        }
        let checkpoints = stages
            .into_iter()
            .map(|st| (st.name().to_string(), file_name(&self.path(st))))
            .collect();
        evaluate(&self.cfg, label, corpus, net, gen, source, checkpoints)
    }

    /// Builds or loads every stage the configuration needs, evaluates, and
    /// writes the report under `<cache>/reports`.
    pub fn run(&self, label: &str) -> Result<MetricReport> {
        let corpus = self.corpus()?;
        let net = self.repnet(&corpus)?;
        let graph = self.graph(&corpus, &net)?;
        let selector = self.selector_if_needed(&corpus, &net, &graph)?;
        let gen = self.generator(&corpus, &net, &graph, selector.as_ref())?;
        let report = self.evaluate(label, &corpus, &net, &gen, &self.source(&graph, selector.as_ref()))?;
        report.write(&self.cache.join("reports"))?;
        Ok(report)
    }
}

/// Generates every test-split caption (up to `eval.max_queries`) and scores it.
pub fn evaluate(
    cfg: &RunConfig,
    label: &str,
    corpus: &Corpus,
    net: &RepNet,
    gen: &Generator,
    source: &PriorSource<'_>,
    checkpoints: BTreeMap<String, String>,
) -> Result<MetricReport> {
    let start = Instant::now();
    let classifier = NearestCentroid::fit(
        corpus
            .shapes_in(Split::Train)
            .into_iter()
            .map(|s| (&corpus.shapes[s].grid, corpus.shapes[s].spec.class)),
    )?;
    let test = corpus.captions_in(Split::Test);
    let gallery = test
        .iter()
        .map(|&c| net.encode_text(&corpus.captions[c].tokens))
        .collect::<Result<Vec<_>>>()?;
    let top = cfg.eval.r_precision_top;
    if gallery.len() < top {
        return Err(CoreError::Invalid(format!(
            "test split has {} captions, fewer than the r-precision cut-off {top}",
            gallery.len()
        )));
    }
    let limit = match cfg.eval.max_queries {
        0 => test.len(),
        n => n.min(test.len()),
    };
    let mut items = Vec::with_capacity(limit);
    for (qi, &ci) in test.iter().enumerate().take(limit) {
        let cap = &corpus.captions[ci];
        let truth = &corpus.shapes[cap.shape];
        let (grid, empty) = match generate(&cap.text, &corpus.tokenizer, gen, source, cfg.fuse.threshold) {
            Ok(g) => (g, false),
            Err(CoreError::EmptyGeneration { .. }) => (VoxelGrid::empty(truth.grid.resolution()), true),
            Err(e) => return Err(e),
        };
        let hit = |b: bool| if b { 100.0 } else { 0.0 };
        let r_hit = !empty && ranks_within(&net.encode_voxels(&grid)?, &gallery, qi, top);
        let class_hit = !empty && classifier.classify(&grid)? == truth.spec.class;
        let color_hit = !empty && dominant_color(&grid) == dominant_color(&truth.grid);
        items.push(ItemMetrics {
            caption: cap.text.clone(),
            shape_id: truth.id.clone(),
            iou: iou(&grid, &truth.grid)?,
            r_precision: hit(r_hit),
            class_acc: hit(class_hit),
            color_acc: hit(color_hit),
            empty,
        });
    }
    Ok(MetricReport::new(
        label,
        &cfg.stage_key(Stage::Corpus)[..16],
        checkpoints,
        &cfg.hash(),
        start.elapsed().as_secs_f64(),
        items,
    ))
}

/// Text-to-shape retrieval on held-out captions: the gallery holds every
/// held-out shape (in corpus order) topped up with training shapes to
/// `gallery` entries, and a query hits when its shape ranks within `top`.
/// Returns a percentage.
pub fn retrieval_accuracy(corpus: &Corpus, net: &RepNet, gallery: usize, top: usize) -> Result<f64> {
    let held_out = |s: usize| corpus.shapes[s].split != Split::Train;
    let mut members: Vec<usize> = (0..corpus.shapes.len()).filter(|&s| held_out(s)).collect();
    members.extend((0..corpus.shapes.len()).filter(|&s| !held_out(s)));
    if members.len() < gallery {
        return Err(CoreError::Invalid(format!(
            "corpus has {} shapes, fewer than the gallery size {gallery}",
            members.len()
        )));
    }
    members.truncate(gallery);
    let features = members
        .iter()
        .map(|&s| net.encode_voxels(&corpus.shapes[s].grid))
        .collect::<Result<Vec<_>>>()?;
    let mut hits = 0usize;
    let mut queries = 0usize;
    for c in corpus.captions.iter().filter(|c| held_out(c.shape)) {
        let Some(pos) = members.iter().position(|&s| s == c.shape) else {
            continue;
        };
        queries += 1;
        if ranks_within(&net.encode_text(&c.tokens)?, &features, pos, top) {
            hits += 1;
        }
    }
    if queries == 0 {
        return Err(CoreError::Invalid(
            "no held-out caption has its shape in the gallery".into(),
        ));
    }
    Ok(100.0 * hits as f64 / queries as f64)
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map_or_else(String::new, |n| n.to_string_lossy().into_owned())
}

pub fn prior_source<'a>(cfg: &RunConfig, graph: &'a KnowledgeGraph, selector: Option<&'a Selector>) -> PriorSource<'a> {
    PriorSource {
        graph,
        heads: selector.map(|(h, s)| (h, s)),
        ablation: cfg.ablation.clone(),
        m: cfg.kgraph.m,
    }
}

/// Freshly initialized selection heads.
pub fn new_selector(cfg: &RunConfig) -> Result<Selector> {
    let mut store = ParamStore::new();
    let c = &cfg.causal;
    let heads = SelectorHeads::new(&mut store, c.n, cfg.model.d, c.t, c.seed)?;
    Ok((heads, store))
}

pub fn load_selector(cfg: &RunConfig, path: &Path) -> Result<Selector> {
    let (heads, mut store) = new_selector(cfg)?;
    load_into(&mut store, path)?;
    Ok((heads, store))
}

/// Trains selection heads on train-split captions; returns them with the per-step losses.
pub fn train_selector(
    cfg: &RunConfig,
    corpus: &Corpus,
    net: &RepNet,
    graph: &KnowledgeGraph,
) -> Result<(Selector, Vec<f64>)> {
    let (heads, mut store) = new_selector(cfg)?;
    let examples = selector_examples(corpus, net, graph, cfg.kgraph.m)?;
    let curve = train_heads(&heads, &mut store, &examples, &cfg.causal)?;
    Ok(((heads, store), curve))
}

/// Starts from the pretrained network and trains the fused generator with
/// priors selected according to the ablation flags.
pub fn train_fused_generator(
    cfg: &RunConfig,
    corpus: &Corpus,
    net: &RepNet,
    graph: &KnowledgeGraph,
    selector: Option<&Selector>,
) -> Result<(Generator, LossCurve)> {
    let mut gen = Generator::from_pretrained(net, &cfg.fuse)?;
    let examples = training_examples(corpus, &gen, &prior_source(cfg, graph, selector))?;
    let curve = train_generator(&mut gen, corpus, &examples, &cfg.fuse)?;
    Ok((gen, curve))
}

pub fn train_latent(
    cfg: &RunConfig,
    corpus: &Corpus,
    gen: &Generator,
    graph: &KnowledgeGraph,
) -> Result<(LatentGenerator, LossCurve)> {
    let items = imle_items(corpus, gen, graph, cfg.kgraph.m)?;
    let mut latent = LatentGenerator::new(cfg.model.d, &cfg.diversity)?;
    let curve = train_imle(&mut latent, &items, &cfg.diversity)?;
    Ok((latent, curve))
}

/// Train-split captions with their retrieved shape priors (own shape excluded)
/// and the shape's own descriptor as target.
pub fn selector_examples(
    corpus: &Corpus,
    net: &RepNet,
    graph: &KnowledgeGraph,
    m: usize,
) -> Result<Vec<SelectorExample>> {
    let mut out = Vec::new();
    for ci in corpus.captions_in(Split::Train) {
        let c = &corpus.captions[ci];
        let Some(own) = graph.shape_entity(&c.shape_id) else {
            continue;
        };
        let bundle = graph.retrieve(&c.text, &net.encode_text(&c.tokens)?, m, Some(own));
        if bundle.shapes.is_empty() {
            continue;
        }
        out.push(SelectorExample {
            priors: bundle.shapes.into_iter().map(|s| s.descriptor).collect(),
            target: graph.entities()[own].descriptor.clone(),
        });
    }
    Ok(out)
}

/// Train-split captions as generator text features with raw shape priors.
pub fn imle_items(corpus: &Corpus, gen: &Generator, graph: &KnowledgeGraph, m: usize) -> Result<Vec<ImleItem>> {
    corpus
        .captions_in(Split::Train)
        .into_iter()
        .map(|ci| {
            let c = &corpus.captions[ci];
            let f_t = gen.encode_text(&c.tokens)?;
            let own = graph.shape_entity(&c.shape_id);
            let priors = graph
                .retrieve(&c.text, &f_t, m, own)
                .shapes
                .into_iter()
                .map(|s| s.descriptor)
                .collect();
            Ok(ImleItem { f_t, priors })
        })
        .collect()
}

/// Ablation rows: no priors, shape priors only, both priors, both with selection.
pub fn ablation_configs(base: &RunConfig) -> Vec<(&'static str, RunConfig)> {
    let rows = [
        ("no_prior", false, false, false),
        ("shape_prior", true, false, false),
        ("both_prior", true, true, false),
        ("both_prior_causal", true, true, true),
    ];
    rows.iter()
        .map(|&(label, shape, attr, causal)| {
            let mut cfg = base.clone();
            cfg.ablation.shape_prior = shape;
            cfg.ablation.attr_prior = attr;
            cfg.ablation.causal = causal;
            (label, cfg)
        })
        .collect()
}

/// One report per ablation row; shared stages are built once through the cache.
pub fn run_ablation(base: &RunConfig, cache: &Path, build: bool) -> Result<Vec<MetricReport>> {
    ablation_configs(base)
        .into_iter()
        .map(|(label, cfg)| Pipeline::new(cfg, cache, build)?.run(label))
        .collect()
}
