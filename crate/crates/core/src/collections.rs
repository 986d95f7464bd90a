//! Layer-wise modality collections from frozen forward passes, and their
//! refinement into prototypes.

use std::path::Path;

use aoept_tensor::{io as tio, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backbone::Backbone;
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::seed;

/// Pooled representations of one modality at one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCollection {
    pub modality: usize,
    pub layer: usize,
    /// `[N×d]`, one row per modality-available sample.
    pub vectors: Tensor,
    pub source_ids: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineMethod {
    Kmeans,
    Pooling,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefinedCollection {
    pub modality: usize,
    pub layer: usize,
    /// `[N'×d]`
    pub prototypes: Tensor,
    pub method: RefineMethod,
    /// Final within-cluster sum of squares (k-means only).
    pub objective: Option<f64>,
    /// Objective after every assignment step (k-means only).
    pub history: Vec<f64>,
    /// Cluster index of every member (k-means only).
    pub assignment: Vec<usize>,
}

/// Pools modality `m` at layers `0..L` (embedding output, then the output of
/// encoder layers `1..L-1`) for every sample that observes `m`.
pub fn build_collections(
    backbone: &Backbone,
    train: &[Sample],
    modality: usize,
) -> Result<Vec<LayerCollection>> {
    let cfg = backbone.config();
    if modality >= cfg.modalities.len() {
        return Err(Error::Input(format!("modality {modality} out of range")));
    }
    let available: Vec<&Sample> = train.iter().filter(|s| s.pattern.observes(modality)).collect();
    if available.is_empty() {
        return Err(Error::Input(format!(
            "no training sample observes modality {}",
            cfg.modalities[modality].name
        )));
    }
    let d = cfg.d;
    let layers = cfg.layers;
    let mut data = vec![Vec::with_capacity(available.len() * d); layers];
    for chunk in available.chunks(64) {
        let states = backbone.hidden_states(chunk)?;
        let groups = backbone.modality_rows(chunk.len(), 0, modality);
        for (l, h) in states.iter().take(layers).enumerate() {
            for rows in &groups {
                let mut mean = vec![0.0; d];
                for &r in rows {
                    mean.iter_mut().zip(h.row(r)).for_each(|(a, v)| *a += v);
                }
                mean.iter_mut().for_each(|a| *a /= rows.len() as f64);
                data[l].extend(mean);
            }
        }
    }
    let ids: Vec<u64> = available.iter().map(|s| s.id).collect();
    data.into_iter()
        .enumerate()
        .map(|(layer, v)| {
            Ok(LayerCollection {
                modality,
                layer,
                vectors: Tensor::new(vec![ids.len(), d], v)?,
                source_ids: ids.clone(),
            })
        })
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    centroids
        .iter()
        .enumerate()
        .map(|(i, c)| (i, sq_dist(x, c)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

fn kmeans_pp<R: Rng>(points: &[&[f64]], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, points[first])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        } else {
            // Every point coincides with a centroid; take an unused one.
            (0..n).find(|&i| !chosen[i]).unwrap_or(0)
        };
        chosen[pick] = true;
        centroids.push(points[pick].to_vec());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, points[pick]));
        }
    }
    centroids
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Stops early once assignments stop changing. A cluster that loses all its
/// members is re-seeded at the point farthest from its own centroid.
pub fn refine_kmeans(
    coll: &LayerCollection,
    n_proto: usize,
    iters: usize,
    seed: u64,
) -> Result<RefinedCollection> {
    let n = coll.vectors.rows();
    if n_proto == 0 || n_proto > n {
        return Err(Error::Input(format!(
            "cannot form {n_proto} prototypes from {n} vectors"
        )));
    }
    if iters == 0 {
        return Err(Error::Input("k-means needs at least one iteration".into()));
    }
    let d = coll.vectors.cols();
    let points: Vec<&[f64]> = (0..n).map(|i| coll.vectors.row(i)).collect();
    let mut rng = seed::rng(seed, &format!("kmeans-{}-{}", coll.modality, coll.layer));
    let mut centroids = kmeans_pp(&points, n_proto, &mut rng);

    let assign = |centroids: &[Vec<f64>]| -> (Vec<usize>, Vec<f64>) {
        points.iter().map(|p| nearest(p, centroids)).unzip()
    };
    let (mut assignment, mut dists) = assign(&centroids);
    let mut history = vec![dists.iter().sum::<f64>()];
    for _ in 0..iters {
        let mut sums = vec![vec![0.0; d]; n_proto];
        let mut counts = vec![0usize; n_proto];
        for (p, &a) in points.iter().zip(&assignment) {
            sums[a].iter_mut().zip(*p).for_each(|(s, v)| *s += v);
            counts[a] += 1;
        }
        let mut reseeded = false;
        for c in 0..n_proto {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                let far = (0..n)
                    .max_by(|&i, &j| dists[i].total_cmp(&dists[j]).then(j.cmp(&i)))
                    .expect("nonempty");
                centroids[c] = points[far].to_vec();
                dists[far] = 0.0;
                reseeded = true;
            }
        }
        let (next, next_d) = assign(&centroids);
        history.push(next_d.iter().sum());
        let fixed = next == assignment && !reseeded;
        assignment = next;
        dists = next_d;
        if fixed {
            break;
        }
    }
    // Prototypes are the member means of the final assignment.
    let mut sums = vec![vec![0.0; d]; n_proto];
    let mut counts = vec![0usize; n_proto];
    for (p, &a) in points.iter().zip(&assignment) {
        sums[a].iter_mut().zip(*p).for_each(|(s, v)| *s += v);
        counts[a] += 1;
    }
    for c in 0..n_proto {
        if counts[c] > 0 {
            centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
        }
    }
    let objective = points
        .iter()
        .zip(&assignment)
        .map(|(p, &a)| sq_dist(p, &centroids[a]))
        .sum();
    Ok(RefinedCollection {
        modality: coll.modality,
        layer: coll.layer,
        prototypes: Tensor::new(vec![n_proto, d], centroids.concat())?,
        method: RefineMethod::Kmeans,
        objective: Some(objective),
        history,
        assignment,
    })
}

/// Averages non-overlapping windows of `window` vectors in source order; a
/// trailing partial window becomes one extra prototype.
pub fn refine_pooling(coll: &LayerCollection, window: usize) -> Result<RefinedCollection> {
    if window == 0 {
        return Err(Error::Input("pooling window must be at least 1".into()));
    }
    let n = coll.vectors.rows();
    let d = coll.vectors.cols();
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + window).min(n);
        let mut mean = vec![0.0; d];
        for i in start..end {
            mean.iter_mut().zip(coll.vectors.row(i)).for_each(|(a, v)| *a += v);
        }
        mean.iter_mut().for_each(|a| *a /= (end - start) as f64);
        out.extend(mean);
        start = end;
    }
    Ok(RefinedCollection {
        modality: coll.modality,
        layer: coll.layer,
        prototypes: Tensor::new(vec![out.len() / d, d], out)?,
        method: RefineMethod::Pooling,
        objective: None,
        history: Vec::new(),
        assignment: Vec::new(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub method: RefineMethod,
    /// Target prototype count for k-means; clamped to the collection size.
    pub n_proto: usize,
    pub iters: usize,
    /// Window for pooling.
    pub window: usize,
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            method: RefineMethod::Kmeans,
            n_proto: 64,
            iters: 300,
            window: 4,
            seed: 5,
        }
    }
}

/// Prototypes for every modality and layer `0..L`.
#[derive(Clone, Debug, PartialEq)]
pub struct CollectionSet {
    pub config: RefineConfig,
    /// `[modality][layer]`
    pub refined: Vec<Vec<RefinedCollection>>,
    /// Sample ids behind each modality's collection.
    pub source_ids: Vec<Vec<u64>>,
}

impl CollectionSet {
    pub fn build(backbone: &Backbone, train: &[Sample], config: &RefineConfig) -> Result<Self> {
        let k = backbone.config().modalities.len();
        let mut refined = Vec::with_capacity(k);
        let mut source_ids = Vec::with_capacity(k);
        for m in 0..k {
            let colls = build_collections(backbone, train, m)?;
            let layers = colls
                .iter()
                .map(|c| match config.method {
                    RefineMethod::Kmeans => {
                        refine_kmeans(c, config.n_proto.min(c.vectors.rows()), config.iters, config.seed)
                    }
                    RefineMethod::Pooling => refine_pooling(c, config.window),
                })
                .collect::<Result<Vec<_>>>()?;
            source_ids.push(colls[0].source_ids.clone());
            refined.push(layers);
        }
        Ok(CollectionSet {
            config: config.clone(),
            refined,
            source_ids,
        })
    }

    /// Prototypes of modality `m` at layer `layer`.
    pub fn prototypes(&self, m: usize, layer: usize) -> &Tensor {
        &self.refined[m][layer].prototypes
    }

    pub fn layers(&self) -> usize {
        self.refined.first().map_or(0, Vec::len)
    }

    pub fn save(&self, dir: &Path, names: &[String]) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut objectives = Vec::new();
        for (m, layers) in self.refined.iter().enumerate() {
            for r in layers {
                tio::save(dir.join(format!("{}.l{}.aotn", names[m], r.layer)), &r.prototypes)?;
                objectives.push(json!({
                    "modality": names[m], "layer": r.layer, "objective": r.objective,
                }));
            }
        }
        let manifest = json!({
            "config": self.config,
            "modalities": names,
            "layers": self.layers(),
            "source_ids": self.source_ids,
            "objectives": objectives,
        });
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest).expect("json"))
            .map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let v: serde_json::Value = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.clone(),
            source,
        })?;
        let parse = |key: &str| Error::Format(format!("{}: bad {key}", path.display()));
        let config: RefineConfig =
            serde_json::from_value(v["config"].clone()).map_err(|_| parse("config"))?;
        let names: Vec<String> =
            serde_json::from_value(v["modalities"].clone()).map_err(|_| parse("modalities"))?;
        let source_ids: Vec<Vec<u64>> =
            serde_json::from_value(v["source_ids"].clone()).map_err(|_| parse("source_ids"))?;
        let layers = v["layers"].as_u64().ok_or_else(|| parse("layers"))? as usize;
        let objectives = v["objectives"].as_array().ok_or_else(|| parse("objectives"))?;
        let mut refined = Vec::new();
        for (m, name) in names.iter().enumerate() {
            let mut per = Vec::new();
            for l in 0..layers {
                let prototypes = tio::load(dir.join(format!("{name}.l{l}.aotn")))?;
                let objective = objectives
                    .get(m * layers + l)
                    .and_then(|o| o["objective"].as_f64());
                per.push(RefinedCollection {
                    modality: m,
                    layer: l,
                    prototypes,
                    method: config.method,
                    objective,
                    history: Vec::new(),
                    assignment: Vec::new(),
                });
            }
            refined.push(per);
        }
        Ok(CollectionSet {
            config,
            refined,
            source_ids,
        })
    }
}
