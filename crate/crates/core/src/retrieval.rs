//! Nearest-neighbour retrieval by cosine similarity, scored against the
//! frame labels of the neighbours.

use std::cmp::Ordering;
use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::faces::{Dataset, Frame, FrameLabel, Split};
use crate::model::FabNet;
use crate::probe::embed_frames;
use crate::rng;

/// RNG stream used for query selection and the random-pick baseline.
pub const RETRIEVAL_STREAM: u64 = 0x7265_7472;

pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim(
            "cosine_similarity",
            "dim",
            format!("{} vs {}", a.len(), b.len()),
        ));
    }
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::arg("cosine similarity of a zero vector"));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Debug, Clone)]
pub struct Gallery {
    pub dim: usize,
    pub ids: Vec<String>,
    /// Row-major `[len, dim]`.
    pub embeddings: Vec<f32>,
    pub labels: Vec<FrameLabel>,
    norms: Vec<f64>,
}

impl Gallery {
    pub fn new(
        dim: usize,
        ids: Vec<String>,
        embeddings: Vec<f32>,
        labels: Vec<FrameLabel>,
    ) -> Result<Self> {
        let n = labels.len();
        if n == 0 {
            return Err(Error::arg("gallery is empty"));
        }
        if dim == 0 || embeddings.len() != n * dim || ids.len() != n {
            return Err(Error::dim(
                "gallery",
                "dim",
                format!(
                    "{} ids, {n} labels, {} values for dim {dim}",
                    ids.len(),
                    embeddings.len()
                ),
            ));
        }
        let norms: Vec<f64> = embeddings.chunks(dim).map(norm).collect();
        if let Some(i) = norms.iter().position(|&v| v == 0.0) {
            return Err(Error::arg(format!(
                "gallery entry {} has a zero embedding",
                ids[i]
            )));
        }
        Ok(Gallery {
            dim,
            ids,
            embeddings,
            labels,
            norms,
        })
    }

    /// Embeds the given frames with a frozen encoder.
    pub fn embed(model: &FabNet<f32>, frames: &[(String, &Frame)]) -> Result<Self> {
        let refs: Vec<&Frame> = frames.iter().map(|(_, f)| *f).collect();
        let set = embed_frames(model, &refs)?;
        Gallery::new(
            set.dim,
            frames.iter().map(|(id, _)| id.clone()).collect(),
            set.features,
            set.labels,
        )
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }
}

/// Picks up to `size` frames of one split, in a seeded random order. Ids
/// look like `id0003/track01/frame_7`.
pub fn gallery_frames(
    dataset: &Dataset,
    split: Split,
    size: usize,
    seed: u64,
) -> Result<Vec<(String, &Frame)>> {
    let all: Vec<(String, &Frame)> = dataset
        .tracks_in(split)
        .flat_map(|t| {
            t.frames
                .iter()
                .enumerate()
                .map(move |(k, f)| (format!("{}/{}/frame_{k}", t.identity_id, t.track_id), f))
        })
        .collect();
    if all.is_empty() {
        return Err(Error::arg(format!(
            "split {} has no frames",
            split.as_str()
        )));
    }
    let take = size.min(all.len());
    let mut r = rng::stream(seed, RETRIEVAL_STREAM + 1);
    let mut idx = rand::seq::index::sample(&mut r, all.len(), take).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| all[i].clone()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ranked {
    pub index: usize,
    pub similarity: f64,
}

/// Descending similarity, then ascending gallery index.
fn rank_order(a: &Ranked, b: &Ranked) -> Ordering {
    b.similarity
        .total_cmp(&a.similarity)
        .then(a.index.cmp(&b.index))
}

/// Top `k` gallery entries by cosine similarity to `query`. `exclude` names
/// the query's own gallery index, if it has one.
pub fn rank_gallery(
    query: &[f32],
    gallery: &Gallery,
    k: usize,
    exclude: Option<usize>,
) -> Result<Vec<Ranked>> {
    if query.len() != gallery.dim {
        return Err(Error::dim(
            "rank_gallery",
            "dim",
            format!("query has {}, gallery {}", query.len(), gallery.dim),
        ));
    }
    let candidates = gallery.len() - usize::from(exclude.is_some_and(|i| i < gallery.len()));
    if k == 0 || k > candidates {
        return Err(Error::arg(format!(
            "k = {k} but the gallery offers {candidates} candidates"
        )));
    }
    let qn = norm(query);
    if qn == 0.0 {
        return Err(Error::arg("query embedding is zero"));
    }
    let mut scored: Vec<Ranked> = (0..gallery.len())
        .into_par_iter()
        .filter(|&i| Some(i) != exclude)
        .map(|i| Ranked {
            index: i,
            similarity: (dot(query, gallery.row(i)) / (qn * gallery.norms[i])).clamp(-1.0, 1.0),
        })
        .collect();
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, rank_order);
        scored.truncate(k);
    }
    scored.sort_by(rank_order);
    Ok(scored)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AttributeGaps {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    /// Mean fraction of the four expression flags that agree.
    pub flag_agreement: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalRow {
    pub query: usize,
    pub rank: usize,
    pub gallery: usize,
    pub similarity: f64,
    pub yaw_gap: f64,
    pub flag_agreement: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    pub seed: u64,
    pub gallery_size: usize,
    pub n_queries: usize,
    pub k: usize,
    pub top1: AttributeGaps,
    pub top1_yaw_se: f64,
    /// Flag agreement averaged over all `k` neighbours.
    pub topk_flag_agreement: f64,
    pub baseline: AttributeGaps,
    pub baseline_yaw_se: f64,
    pub rows: Vec<RetrievalRow>,
    /// Gallery ids, so rows can be rendered.
    pub ids: Vec<String>,
}

fn flag_agreement(a: &FrameLabel, b: &FrameLabel) -> f64 {
    let (fa, fb) = (a.expression.flags(), b.expression.flags());
    fa.iter().zip(&fb).filter(|(x, y)| x == y).count() as f64 / fa.len() as f64
}

fn gaps(a: &FrameLabel, b: &FrameLabel) -> [f64; 4] {
    [
        (a.pose.yaw - b.pose.yaw).abs(),
        (a.pose.pitch - b.pose.pitch).abs(),
        (a.pose.roll - b.pose.roll).abs(),
        flag_agreement(a, b),
    ]
}

/// Mean and standard error of the mean.
fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

fn average(rows: &[[f64; 4]]) -> AttributeGaps {
    let n = rows.len() as f64;
    let col = |j: usize| rows.iter().map(|r| r[j]).sum::<f64>() / n;
    AttributeGaps {
        yaw: col(0),
        pitch: col(1),
        roll: col(2),
        flag_agreement: col(3),
    }
}

/// Draws `n_queries` distinct gallery entries as queries, retrieves their
/// top `k` (excluding themselves), and compares the top-1 neighbour with a
/// uniformly random other entry. Both draws come from
/// `rng::stream(seed, RETRIEVAL_STREAM)`: first the query set, then one
/// baseline pick per query in query order.
pub fn retrieval_report(
    gallery: &Gallery,
    n_queries: usize,
    k: usize,
    seed: u64,
) -> Result<RetrievalReport> {
    let n = gallery.len();
    if n < 2 {
        return Err(Error::arg("retrieval needs at least two gallery entries"));
    }
    if n_queries == 0 || n_queries > n {
        return Err(Error::arg(format!(
            "{n_queries} queries requested from a gallery of {n}"
        )));
    }
    let mut r = rng::stream(seed, RETRIEVAL_STREAM);
    let queries = rand::seq::index::sample(&mut r, n, n_queries).into_vec();
    let picks: Vec<usize> = queries
        .iter()
        .map(|&q| {
            let p = r.gen_range(0..n - 1);
            if p >= q {
                p + 1
            } else {
                p
            }
        })
        .collect();

    let mut rows = Vec::with_capacity(n_queries * k);
    let mut top1 = Vec::with_capacity(n_queries);
    let mut base = Vec::with_capacity(n_queries);
    let mut topk_agree = 0.0;
    for (&q, &p) in queries.iter().zip(&picks) {
        let ranked = rank_gallery(gallery.row(q), gallery, k, Some(q))?;
        let ql = &gallery.labels[q];
        for (rank, hit) in ranked.iter().enumerate() {
            let g = gaps(ql, &gallery.labels[hit.index]);
            topk_agree += g[3];
            if rank == 0 {
                top1.push(g);
            }
            rows.push(RetrievalRow {
                query: q,
                rank: rank + 1,
                gallery: hit.index,
                similarity: hit.similarity,
                yaw_gap: g[0],
                flag_agreement: g[3],
            });
        }
        base.push(gaps(ql, &gallery.labels[p]));
    }
    let yaw = |v: &[[f64; 4]]| mean_se(&v.iter().map(|g| g[0]).collect::<Vec<_>>()).1;
    Ok(RetrievalReport {
        seed,
        gallery_size: n,
        n_queries,
        k,
        top1: average(&top1),
        top1_yaw_se: yaw(&top1),
        topk_flag_agreement: topk_agree / (n_queries * k) as f64,
        baseline: average(&base),
        baseline_yaw_se: yaw(&base),
        rows,
        ids: gallery.ids.clone(),
    })
}

impl RetrievalReport {
    /// Top-1 mean yaw gap over the random-pick mean yaw gap.
    pub fn yaw_gap_ratio(&self) -> f64 {
        self.top1.yaw / self.baseline.yaw
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("query_id,rank,gallery_id,similarity,yaw_gap,flag_agreement\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                self.ids[r.query],
                r.rank,
                self.ids[r.gallery],
                r.similarity,
                r.yaw_gap,
                r.flag_agreement
            );
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# rng: chacha8 seed={} stream={:#x}; queries drawn first, then one baseline pick per query",
            self.seed, RETRIEVAL_STREAM
        );
        let _ = writeln!(s, "gallery_size {}", self.gallery_size);
        let _ = writeln!(s, "queries {}", self.n_queries);
        let _ = writeln!(s, "k {}", self.k);
        let line = |s: &mut String, name: &str, g: &AttributeGaps| {
            let _ = writeln!(
                s,
                "{name:<9} yaw_gap {:.3}  pitch_gap {:.3}  roll_gap {:.3}  flag_agreement {:.4}",
                g.yaw, g.pitch, g.roll, g.flag_agreement
            );
        };
        line(&mut s, "top1", &self.top1);
        line(&mut s, "random", &self.baseline);
        let _ = writeln!(
            s,
            "top{}_flag_agreement {:.4}",
            self.k, self.topk_flag_agreement
        );
        let _ = writeln!(
            s,
            "yaw_gap_ratio {:.4} (top1 se {:.3}, random se {:.3})",
            self.yaw_gap_ratio(),
            self.top1_yaw_se,
            self.baseline_yaw_se
        );
        s
    }
}
