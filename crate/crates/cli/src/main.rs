//! `t2td`: command-line front end over the core library.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use t2td_core::config::RunConfig;
use t2td_core::diversity::{diversify, LatentGenerator};
use t2td_core::eval::{
    evaluate, load_selector, prior_source, run_ablation, train_fused_generator, train_latent, train_selector, Pipeline,
    Selector, TrainingLog,
};
use t2td_core::genfuse::{generate, Generator};
use t2td_core::kgraph::KnowledgeGraph;
use t2td_core::repnet::{pretrain_ae, pretrain_joint, RepNet};
use t2td_core::synthdata::{Corpus, Tokenizer, VoxelGrid};
use t2td_numcore::checkpoint::save_store;

/// File names inside a checkpoint directory.
const REPNET_CKPT: &str = "repnet.ckpt";
const SELECTOR_CKPT: &str = "selector.ckpt";
const GENERATOR_CKPT: &str = "generator.ckpt";
const LATENT_CKPT: &str = "latent.ckpt";

#[derive(Parser)]
#[command(
    name = "t2td",
    version,
    about = "Text-to-voxel generation guided by a text-shape knowledge graph"
)]
struct Cli {
    /// Configuration file: TOML with sectioned keys such as `causal.t = 0.05`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// `section.key=value` override applied after the file; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Copy)]
struct AblationFlags {
    /// Train and generate without retrieved shape priors.
    #[arg(long)]
    no_shape_prior: bool,
    /// Train and generate without attribute priors.
    #[arg(long)]
    no_attr_prior: bool,
    /// Use raw retrieved shape features instead of the selection heads.
    #[arg(long)]
    no_causal: bool,
}

impl AblationFlags {
    fn apply(self, cfg: &mut RunConfig) {
        cfg.ablation.shape_prior &= !self.no_shape_prior;
        cfg.ablation.attr_prior &= !self.no_attr_prior;
        cfg.ablation.causal &= !self.no_causal;
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PretrainStage {
    Ae,
    Joint,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic shape-caption corpus.
    GenData {
        /// Defaults to `data.n_shapes`.
        #[arg(long)]
        n_shapes: Option<usize>,
        /// Defaults to `data.captions_per_shape`.
        #[arg(long)]
        captions_per_shape: Option<usize>,
        /// Defaults to `data.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Corpus directory to create.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain encoders and decoders; `joint` continues from an existing `ae` checkpoint.
    Pretrain {
        /// Corpus directory written by `gen-data`.
        #[arg(long)]
        corpus: PathBuf,
        /// Checkpoint directory; receives repnet.ckpt and loss logs.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        stage: PretrainStage,
    },
    /// Build the knowledge graph from a corpus and pretrained checkpoints.
    BuildKg {
        /// Corpus directory written by `gen-data`.
        #[arg(long)]
        corpus: PathBuf,
        /// Directory holding the pretrained network.
        #[arg(long)]
        ckpt: PathBuf,
        /// Shape-shape neighbours per shape; defaults to `kgraph.k`.
        #[arg(long)]
        k: Option<usize>,
        /// Graph file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the priors retrieved for a query text.
    QueryKg {
        /// Graph file written by `build-kg`.
        #[arg(long)]
        graph: PathBuf,
        /// Directory holding the pretrained text encoder.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        text: String,
        /// Shape priors to return; defaults to `kgraph.m`.
        #[arg(long)]
        m: Option<usize>,
    },
    /// Train selection heads, the fused generator and the latent generator.
    Train {
        /// Corpus directory written by `gen-data`.
        #[arg(long)]
        corpus: PathBuf,
        /// Graph file written by `build-kg`.
        #[arg(long)]
        graph: PathBuf,
        /// Directory holding the pretrained network.
        #[arg(long)]
        ckpt: PathBuf,
        /// Model directory to write.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        ablation: AblationFlags,
    },
    /// Generate one voxel grid from text.
    Generate {
        #[arg(long)]
        text: String,
        /// Directory written by `train`.
        #[arg(long)]
        model: PathBuf,
        /// Graph file written by `build-kg`.
        #[arg(long)]
        graph: PathBuf,
        /// Voxel file to write.
        #[arg(long)]
        out: PathBuf,
        /// Also write a Wavefront OBJ mesh (with a sibling .mtl).
        #[arg(long)]
        obj: Option<PathBuf>,
        #[command(flatten)]
        ablation: AblationFlags,
    },
    /// Generate several variations of one text.
    Diversify {
        #[arg(long)]
        text: String,
        /// Number of variations.
        #[arg(long, default_value_t = 5)]
        count: usize,
        /// Noise seed.
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Directory written by `train`.
        #[arg(long)]
        model: PathBuf,
        /// Graph file written by `build-kg`.
        #[arg(long)]
        graph: PathBuf,
        /// Directory receiving `<i>.vox` and `<i>.obj`.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        ablation: AblationFlags,
    },
    /// Build (or reuse) every cached stage and evaluate on the test split.
    Eval {
        /// Cache root; defaults to $T2TD_CACHE or ./t2td-cache.
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Fail instead of building a missing stage.
        #[arg(long)]
        no_build: bool,
        /// Report label.
        #[arg(long, default_value = "eval")]
        label: String,
        #[command(flatten)]
        ablation: AblationFlags,
    },
    /// Evaluate every ablation row and print a comparison table.
    Ablate {
        /// Cache root; defaults to $T2TD_CACHE or ./t2td-cache.
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Fail instead of building a missing stage.
        #[arg(long)]
        no_build: bool,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut cfg = base.with_overrides(&cli.overrides)?;
    match cli.command {
        Command::GenData {
            n_shapes,
            captions_per_shape,
            seed,
            out,
        } => {
            cfg.data.n_shapes = n_shapes.unwrap_or(cfg.data.n_shapes);
            cfg.data.captions_per_shape = captions_per_shape.unwrap_or(cfg.data.captions_per_shape);
            cfg.data.seed = seed.unwrap_or(cfg.data.seed);
            cfg.validate()?;
            let corpus = Corpus::generate(cfg.data.n_shapes, cfg.data.captions_per_shape, cfg.data.seed)?;
            corpus.write(&out)?;
            println!(
                "wrote {} shapes and {} captions to {}",
                corpus.shapes.len(),
                corpus.captions.len(),
                out.display()
            );
        }
        Command::Pretrain { corpus, out, stage } => pretrain(&cfg, &corpus, &out, stage)?,
        Command::BuildKg { corpus, ckpt, k, out } => {
            cfg.kgraph.k = k.unwrap_or(cfg.kgraph.k);
            cfg.validate()?;
            let corpus = Corpus::load(&corpus)?;
            let net = load_repnet(&cfg, &ckpt)?;
            let graph = KnowledgeGraph::build(&corpus, &net, cfg.kgraph.k)?;
            graph.save(&out)?;
            println!(
                "wrote {} entities and {} edges to {}",
                graph.entities().len(),
                graph.edges().len(),
                out.display()
            );
        }
        Command::QueryKg { graph, ckpt, text, m } => {
            let graph = KnowledgeGraph::load(&graph)?;
            let net = load_repnet(&cfg, &ckpt)?;
            let query = net.encode_text(&Tokenizer::default().encode(&text))?;
            let bundle = graph.retrieve(&text, &query, m.unwrap_or(cfg.kgraph.m), None);
            for a in &bundle.attributes {
                println!("attribute: {}", a.phrase);
            }
            for s in &bundle.shapes {
                println!("shape: {} score: {:.6}", s.shape_id, s.score);
            }
            if bundle.fallback {
                println!("note: no attribute matched; shapes ranked by descriptor cosine");
            }
        }
        Command::Train {
            corpus,
            graph,
            ckpt,
            out,
            ablation,
        } => {
            ablation.apply(&mut cfg);
            train(&cfg, &corpus, &graph, &ckpt, &out)?;
        }
        Command::Generate {
            text,
            model,
            graph,
            out,
            obj,
            ablation,
        } => {
            ablation.apply(&mut cfg);
            let graph = KnowledgeGraph::load(&graph)?;
            let selector = load_selector_if_needed(&cfg, &model)?;
            let gen = load_generator(&cfg, &model)?;
            let source = prior_source(&cfg, &graph, selector.as_ref());
            let grid = generate(&text, &Tokenizer::default(), &gen, &source, cfg.fuse.threshold)?;
            write_grid(&grid, &out, obj.as_deref())?;
            println!("wrote {} occupied voxels to {}", grid.occupied_count(), out.display());
        }
        Command::Diversify {
            text,
            count,
            seed,
            model,
            graph,
            out,
            ablation,
        } => {
            ablation.apply(&mut cfg);
            let graph = KnowledgeGraph::load(&graph)?;
            let selector = load_selector_if_needed(&cfg, &model)?;
            let gen = load_generator(&cfg, &model)?;
            let latent = LatentGenerator::load(&model.join(LATENT_CKPT), cfg.model.d, &cfg.diversity)?;
            let source = prior_source(&cfg, &graph, selector.as_ref());
            let grids = diversify(
                &text,
                count,
                seed,
                cfg.diversity.noise_std,
                &Tokenizer::default(),
                &gen,
                &latent,
                &source,
                cfg.fuse.threshold,
            )?;
            std::fs::create_dir_all(&out).with_context(|| out.display().to_string())?;
            for (i, g) in grids.iter().enumerate() {
                write_grid(g, &out.join(format!("{i}.vox")), Some(&out.join(format!("{i}.obj"))))?;
            }
            println!("wrote {} variations to {}", grids.len(), out.display());
        }
        Command::Eval {
            cache,
            no_build,
            label,
            ablation,
        } => {
            ablation.apply(&mut cfg);
            let pipeline = Pipeline::new(cfg, cache.unwrap_or_else(Pipeline::default_cache), !no_build)?;
            let report = pipeline.run(&label)?;
            print!("{}", report.to_text());
        }
        Command::Ablate { cache, no_build } => {
            let cache = cache.unwrap_or_else(Pipeline::default_cache);
            let reports = run_ablation(&cfg, &cache, !no_build)?;
            println!(
                "{:<20} {:>8} {:>8} {:>10} {:>10}",
                "row", "iou", "r_prec", "class_acc", "color_acc"
            );
            for r in &reports {
                println!(
                    "{:<20} {:>8.4} {:>8.2} {:>10.2} {:>10.2}",
                    r.label,
                    r.aggregate("iou"),
                    r.aggregate("r_precision"),
                    r.aggregate("class_acc"),
                    r.aggregate("color_acc")
                );
            }
        }
    }
    Ok(())
}

fn load_repnet(cfg: &RunConfig, dir: &Path) -> Result<RepNet> {
    let path = dir.join(REPNET_CKPT);
    RepNet::load(&path, &cfg.model, Tokenizer::default().vocab_size()).with_context(|| path.display().to_string())
}

fn load_generator(cfg: &RunConfig, dir: &Path) -> Result<Generator> {
    let path = dir.join(GENERATOR_CKPT);
    Generator::load(&path, &cfg.model, &cfg.fuse, Tokenizer::default().vocab_size())
        .with_context(|| path.display().to_string())
}

fn load_selector_if_needed(cfg: &RunConfig, dir: &Path) -> Result<Option<Selector>> {
    if !(cfg.ablation.shape_prior && cfg.ablation.causal) {
        return Ok(None);
    }
    let path = dir.join(SELECTOR_CKPT);
    Ok(Some(
        load_selector(cfg, &path).with_context(|| path.display().to_string())?,
    ))
}

fn pretrain(cfg: &RunConfig, corpus: &Path, out: &Path, stage: PretrainStage) -> Result<()> {
    let corpus = Corpus::load(corpus)?;
    std::fs::create_dir_all(out).with_context(|| out.display().to_string())?;
    let p = &cfg.pretrain;
    let mut net = match stage {
        PretrainStage::Joint => load_repnet(cfg, out)?,
        _ => RepNet::new(&cfg.model, corpus.tokenizer.vocab_size())?,
    };
    let mut curves = Vec::new();
    if matches!(stage, PretrainStage::Ae | PretrainStage::All) {
        curves.push(("ae", pretrain_ae(&mut net, &corpus, p, p.ae_epochs)?.steps));
    }
    if matches!(stage, PretrainStage::Joint | PretrainStage::All) {
        curves.push(("joint", pretrain_joint(&mut net, &corpus, p, p.joint_epochs)?.steps));
    }
    for (name, curve) in curves {
        println!(
            "{name}: {} steps, final loss {:.6}",
            curve.len(),
            curve.last().copied().unwrap_or(f64::NAN)
        );
        TrainingLog::single(name, curve).write(&out.join(format!("{name}.log.json")))?;
    }
    net.save(&out.join(REPNET_CKPT))?;
    Ok(())
}

fn train(cfg: &RunConfig, corpus: &Path, graph: &Path, ckpt: &Path, out: &Path) -> Result<()> {
    let corpus = Corpus::load(corpus)?;
    let graph = KnowledgeGraph::load(graph)?;
    let net = load_repnet(cfg, ckpt)?;
    std::fs::create_dir_all(out).with_context(|| out.display().to_string())?;
    let selector = if cfg.ablation.shape_prior && cfg.ablation.causal {
        let (sel, curve) = train_selector(cfg, &corpus, &net, &graph)?;
        TrainingLog::single("selector", curve).write(&out.join("selector.log.json"))?;
        save_store(&sel.1, &out.join(SELECTOR_CKPT))?;
        Some(sel)
    } else {
        None
    };
    let (gen, curve) = train_fused_generator(cfg, &corpus, &net, &graph, selector.as_ref())?;
    TrainingLog::single("generator", curve.steps).write(&out.join("generator.log.json"))?;
    gen.save(&out.join(GENERATOR_CKPT))?;
    let (latent, curve) = train_latent(cfg, &corpus, &gen, &graph)?;
    TrainingLog::single("latent", curve.steps).write(&out.join("latent.log.json"))?;
    latent.save(&out.join(LATENT_CKPT))?;
    let source = prior_source(cfg, &graph, selector.as_ref());
    let report = evaluate(cfg, "train", &corpus, &net, &gen, &source, Default::default())?;
    print!("{}", report.to_text());
    Ok(())
}

fn write_grid(grid: &VoxelGrid, vox: &Path, obj: Option<&Path>) -> Result<()> {
    grid.write(vox)?;
    if let Some(obj) = obj {
        let mtl = obj.with_extension("mtl");
        let mtl_name = mtl.file_name().and_then(|n| n.to_str()).unwrap_or("materials.mtl");
        let (obj_text, mtl_text) = grid.to_obj(mtl_name);
        std::fs::write(obj, obj_text).with_context(|| obj.display().to_string())?;
        std::fs::write(&mtl, mtl_text).with_context(|| mtl.display().to_string())?;
    }
    Ok(())
}
