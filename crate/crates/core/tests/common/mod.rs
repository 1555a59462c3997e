//! Independent oracles shared by the integration tests and the acceptance
//! suite. Each check returns a description of the first disagreement.
#![allow(dead_code)]

pub mod losses;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use t2td_core::causal::index_sets;
use t2td_core::diversity::{sample_references, select_target};
use t2td_core::kgraph::{EdgeKind, EntityKind, KnowledgeGraph, ShapeInput};
use t2td_core::synthdata::Corpus;

pub type Check = Result<(), String>;

pub fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa * bb).sqrt()
    }
}

/// A graph over every shape of a generated corpus with random unit descriptors.
pub fn random_graph(n_shapes: usize, d: usize, k: usize, seed: u64) -> (Corpus, KnowledgeGraph) {
    let corpus = Corpus::generate(n_shapes, 3, seed).expect("corpus");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phrases: Vec<(String, Vec<f64>)> = corpus
        .attributes
        .iter()
        .map(|a| (a.clone(), unit(&mut rng, d)))
        .collect();
    let inputs: Vec<ShapeInput<'_>> = (0..corpus.shapes.len())
        .map(|s| ShapeInput {
            shape_id: &corpus.shapes[s].id,
            descriptor: unit(&mut rng, d),
            captions: corpus
                .captions_of(s)
                .into_iter()
                .map(|c| (corpus.captions[c].text.as_str(), unit(&mut rng, d)))
                .collect(),
        })
        .collect();
    let graph = KnowledgeGraph::from_inputs(d, k, &phrases, inputs).expect("graph");
    (corpus, graph)
}

/// Exhaustive scorer from the public edge list: every shape gets the best of its
/// direct attribute score and every incoming shape-shape propagation.
pub fn retrieval_oracle(
    g: &KnowledgeGraph,
    text: &str,
    q: &[f64],
    m: usize,
    exclude: Option<usize>,
) -> Vec<(usize, f64)> {
    let attrs = g.match_attributes(text);
    let ents = g.entities();
    let shapes: Vec<usize> = (0..ents.len())
        .filter(|&i| ents[i].kind == EntityKind::Shape && Some(i) != exclude)
        .collect();
    let direct = |s: usize| -> Option<f64> {
        let matched = attrs
            .iter()
            .filter(|&&a| {
                g.edges()
                    .iter()
                    .any(|e| e.kind == EdgeKind::SA && e.from == s && e.to == a)
            })
            .count();
        (matched > 0).then(|| matched as f64 + cos(q, &ents[s].descriptor))
    };
    let mut scored: Vec<(usize, f64)> = Vec::new();
    for &s in &shapes {
        let mut best = direct(s);
        for e in g
            .edges()
            .iter()
            .filter(|e| e.kind == EdgeKind::SS && e.to == s && Some(e.from) != exclude)
        {
            if let Some(src) = direct(e.from) {
                let v = src * e.weight;
                best = Some(best.map_or(v, |b: f64| b.max(v)));
            }
        }
        if let Some(b) = best {
            scored.push((s, b));
        }
    }
    if scored.is_empty() {
        scored = shapes.iter().map(|&s| (s, cos(q, &ents[s].descriptor))).collect();
    }
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.truncate(m);
    scored
}

/// `queries` random queries over a `n_shapes` graph: corpus captions, some with
/// self-exclusion, plus attribute-free texts that exercise the fallback.
pub fn check_retrieval(n_shapes: usize, queries: usize, seed: u64) -> Check {
    let (corpus, g) = random_graph(n_shapes, 16, 5, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for qi in 0..queries {
        let c = &corpus.captions[rng.random_range(0..corpus.captions.len())];
        let text = if qi % 10 == 9 {
            "an object of some kind"
        } else {
            c.text.as_str()
        };
        let q = unit(&mut rng, 16);
        let exclude = (qi % 2 == 0).then(|| g.shape_entity(&c.shape_id).expect("shape in graph"));
        let got: Vec<(usize, f64)> = g
            .retrieve(text, &q, 5, exclude)
            .shapes
            .iter()
            .map(|s| (s.entity, s.score))
            .collect();
        let want = retrieval_oracle(&g, text, &q, 5, exclude);
        let ids = |v: &[(usize, f64)]| v.iter().map(|p| p.0).collect::<Vec<_>>();
        if ids(&got) != ids(&want) {
            return Err(format!(
                "query {qi} `{text}`: got {:?}, oracle {:?}",
                ids(&got),
                ids(&want)
            ));
        }
        if let Some((a, b)) = got.iter().zip(&want).find(|(a, b)| (a.1 - b.1).abs() > 1e-12) {
            return Err(format!("query {qi}: score {} vs oracle {}", a.1, b.1));
        }
    }
    Ok(())
}

/// Direct definition: position `j` of mask `i` is kept iff `i·d ≤ j < (i+1)·d`
/// and `|x_j| > t`.
pub fn mask_oracle(x: &[f64], n: usize, d: usize, t: f64) -> Vec<Vec<bool>> {
    let mut out = vec![vec![false; n * d]; n];
    for (i, mask) in out.iter_mut().enumerate() {
        for j in i * d..(i + 1) * d {
            mask[j] = x[j] > t || x[j] < -t;
        }
    }
    out
}

/// Random vectors with a quarter of entries placed exactly on or one ulp around `±t`.
pub fn check_masks(vectors: usize, seed: u64) -> Check {
    let t = (-3.0f64).exp();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut boundary_seen = 0usize;
    for v in 0..vectors {
        let n = rng.random_range(1..=6);
        let d = rng.random_range(1..=12);
        let x: Vec<f64> = (0..n * d)
            .map(|_| {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                match rng.random_range(0..8) {
                    0 => sign * t,
                    1 => sign * f64::from_bits(t.to_bits() + 1),
                    2 => sign * f64::from_bits(t.to_bits() - 1),
                    _ => rng.random_range(-0.2..0.2),
                }
            })
            .collect();
        boundary_seen += x.iter().filter(|v| v.abs() == t).count();
        let got = index_sets(&x, n, d, t).map_err(|e| e.to_string())?;
        if got != mask_oracle(&x, n, d, t) {
            return Err(format!("vector {v} (n={n}, d={d}) disagrees with the oracle"));
        }
    }
    if boundary_seen == 0 {
        return Err("no value landed exactly on the threshold".into());
    }
    Ok(())
}

/// Reference interpolation against `(1 − η/σ)·f_t + (η/σ)·f_p`, and target
/// selection against a scan over every (reference, output) pair.
pub fn check_closed_forms(instances: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for inst in 0..instances {
        let d = rng.random_range(2..10);
        let f_t: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let priors: Vec<Vec<f64>> = (0..rng.random_range(1..6))
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let sigma = rng.random_range(0.5..8.0);
        let etas: Vec<f64> = (0..rng.random_range(1..5))
            .map(|_| rng.random_range(0.0..4.0))
            .collect();
        let refs = sample_references(&f_t, &priors, sigma, &etas).map_err(|e| e.to_string())?;
        for (pi, p) in priors.iter().enumerate() {
            for (si, eta) in etas.iter().enumerate() {
                let r = &refs.features[pi * etas.len() + si];
                let w = eta / sigma;
                for j in 0..d {
                    let want = (1.0 - w) * f_t[j] + w * p[j];
                    if (r[j] - want).abs() > 1e-12 {
                        return Err(format!(
                            "instance {inst}: reference ({pi},{si})[{j}] {} vs {want}",
                            r[j]
                        ));
                    }
                }
                if refs.provenance[pi * etas.len() + si] != (pi, si) {
                    return Err(format!("instance {inst}: provenance out of order"));
                }
            }
        }
        let outputs: Vec<Vec<f64>> = (0..rng.random_range(1..6))
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mut candidates = refs.features.clone();
        if inst % 3 == 0 {
            // Duplicates force ties, which must resolve to the lowest index.
            candidates.push(candidates[0].clone());
            candidates.insert(0, candidates[candidates.len() - 1].clone());
        }
        let mut best = (f64::INFINITY, usize::MAX);
        for (ri, r) in candidates.iter().enumerate() {
            for o in &outputs {
                let dist = 1.0 - cos(o, r);
                if dist < best.0 || (dist == best.0 && ri < best.1) {
                    best = (dist, ri);
                }
            }
        }
        let got = select_target(&outputs, &candidates).map_err(|e| e.to_string())?;
        if got != best.1 {
            return Err(format!("instance {inst}: selected {got}, scan gives {}", best.1));
        }
    }
    Ok(())
}
