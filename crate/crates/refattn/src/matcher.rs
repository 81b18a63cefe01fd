//! Correspondence matching between LR and Ref features.
//!
//! Both feature maps are unfolded into odd-sized patches, L2-normalized per
//! patch, and compared by inner product; each query keeps its top-K key
//! positions. `match_features` is the blocked, parallel implementation;
//! `brute_force_match` is the literal double-loop oracle with the same
//! tie-breaking contract (lowest flat index wins), and the two must agree
//! exactly — both accumulate every dot product in index order, so the
//! results are bitwise identical, not just close.
//!
//! The search itself is not differentiable; positions are integer indices
//! and similarities are reported as plain values.

use std::sync::OnceLock;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::num::{kernels, NdArray};

/// Top-K matched reference positions and cosine similarities per query
/// position, in query-grid row-major order.
#[derive(Clone, Debug)]
pub struct CorrespondenceMap {
    pub k: usize,
    pub patch: usize,
    pub query_h: usize,
    pub query_w: usize,
    pub key_h: usize,
    pub key_w: usize,
    /// `[query_h*query_w, k]` flat indices into the key grid, best first.
    pub positions: Vec<u32>,
    /// `[query_h*query_w, k]` normalized inner products, non-increasing per row.
    pub similarities: Vec<f64>,
}

impl CorrespondenceMap {
    pub fn queries(&self) -> usize {
        self.query_h * self.query_w
    }

    pub fn position(&self, query: usize, rank: usize) -> usize {
        self.positions[query * self.k + rank] as usize
    }

    pub fn similarity(&self, query: usize, rank: usize) -> f64 {
        self.similarities[query * self.k + rank]
    }

    /// Top-1 similarity per query, reshaped to the query grid.
    pub fn similarity_map(&self) -> NdArray {
        let data = (0..self.queries()).map(|i| self.similarity(i, 0)).collect();
        NdArray::new_unchecked(&[self.query_h, self.query_w], data)
    }

    /// Transfers the matches one scale finer: every coarse cell becomes a
    /// 2x2 block whose sub-position is preserved on the key side, so a
    /// self-match stays the identity after upscaling.
    pub fn upscale(&self) -> CorrespondenceMap {
        let (qh, qw) = (self.query_h * 2, self.query_w * 2);
        let (kh, kw) = (self.key_h * 2, self.key_w * 2);
        let mut positions = Vec::with_capacity(qh * qw * self.k);
        let mut similarities = Vec::with_capacity(qh * qw * self.k);
        for y in 0..qh {
            for x in 0..qw {
                let coarse = (y / 2) * self.query_w + x / 2;
                for rank in 0..self.k {
                    let p = self.position(coarse, rank);
                    let (py, px) = (p / self.key_w, p % self.key_w);
                    let fine = (2 * py + y % 2) * kw + (2 * px + x % 2);
                    positions.push(fine as u32);
                    similarities.push(self.similarity(coarse, rank));
                }
            }
        }
        CorrespondenceMap {
            k: self.k,
            patch: self.patch,
            query_h: qh,
            query_w: qw,
            key_h: kh,
            key_w: kw,
            positions,
            similarities,
        }
    }

    /// Writes `<base>.positions.ndar`, `<base>.similarities.ndar` and a
    /// `<base>.json` sidecar describing the match.
    pub fn save(&self, base: &std::path::Path) -> Result<()> {
        let n = self.queries();
        let pos = NdArray::new_unchecked(
            &[n, self.k],
            self.positions.iter().map(|&p| p as f64).collect(),
        );
        let sim = NdArray::new_unchecked(&[n, self.k], self.similarities.clone());
        pos.save_ndar(&with_suffix(base, ".positions.ndar"))?;
        sim.save_ndar(&with_suffix(base, ".similarities.ndar"))?;
        let sidecar = serde_json::json!({
            "k": self.k,
            "patch": self.patch,
            "query_shape": [self.query_h, self.query_w],
            "key_shape": [self.key_h, self.key_w],
        });
        std::fs::write(
            with_suffix(base, ".json"),
            serde_json::to_string_pretty(&sidecar)?,
        )?;
        Ok(())
    }
}

fn with_suffix(base: &std::path::Path, suffix: &str) -> std::path::PathBuf {
    let mut s = base.as_os_str().to_os_string();
    s.push(suffix);
    s.into()
}

fn validate(q: &NdArray, key: &NdArray, k: usize, patch: usize) -> Result<()> {
    if q.shape().len() != 3 || key.shape().len() != 3 || q.shape()[0] != key.shape()[0] {
        return Err(Error::shape(
            "match",
            format!("query {:?} vs key {:?}", q.shape(), key.shape()),
        ));
    }
    if patch.is_multiple_of(2) {
        return Err(Error::Argument(format!("patch size must be odd, got {patch}")));
    }
    let key_positions = key.shape()[1] * key.shape()[2];
    if k < 1 || k > key_positions {
        return Err(Error::Argument(format!(
            "k must be in 1..={key_positions}, got {k}"
        )));
    }
    Ok(())
}

/// Unfolds to `[positions, c*patch*patch]` rows and L2-normalizes each row.
fn normalized_patch_rows(feat: &NdArray, patch: usize) -> Vec<f64> {
    let (c, h, w) = (feat.shape()[0], feat.shape()[1], feat.shape()[2]);
    let pad = (patch - 1) / 2;
    let cols = kernels::unfold_fwd(feat.data(), c, h, w, patch, pad);
    let d = c * patch * patch;
    let rows = kernels::transpose(&cols, d, h * w);
    let (normalized, _) = kernels::l2_normalize_rows(&rows, h * w, d);
    normalized
}

/// Total order used for selection: higher similarity first, then lower index.
fn rank_order(a: &(f64, u32), b: &(f64, u32)) -> std::cmp::Ordering {
    b.0.partial_cmp(&a.0)
        .expect("similarities are finite")
        .then(a.1.cmp(&b.1))
}

fn worker_pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = std::env::var("REFATTN_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n > 0)
        {
            builder = builder.num_threads(n);
        }
        builder.build().expect("matcher thread pool")
    })
}

/// Top-K correspondence search. Blocked over query rows for cache locality
/// and parallelized over disjoint row ranges; the output is identical for
/// any worker count.
pub fn match_features(q: &NdArray, key: &NdArray, k: usize, patch: usize) -> Result<CorrespondenceMap> {
    validate(q, key, k, patch)?;
    let (qh, qw) = (q.shape()[1], q.shape()[2]);
    let (kh, kw) = (key.shape()[1], key.shape()[2]);
    let nq = qh * qw;
    let nk = kh * kw;
    let d = q.shape()[0] * patch * patch;
    let q_rows = normalized_patch_rows(q, patch);
    let k_rows = normalized_patch_rows(key, patch);

    let mut positions = vec![0u32; nq * k];
    let mut similarities = vec![0.0; nq * k];
    const BLOCK: usize = 64;
    worker_pool().install(|| {
        positions
            .par_chunks_mut(BLOCK * k)
            .zip(similarities.par_chunks_mut(BLOCK * k))
            .enumerate()
            .for_each(|(block, (pos_out, sim_out))| {
                let start = block * BLOCK;
                let end = (start + BLOCK).min(nq);
                let mut scored: Vec<(f64, u32)> = Vec::with_capacity(nk);
                for i in start..end {
                    let qi = &q_rows[i * d..(i + 1) * d];
                    scored.clear();
                    for j in 0..nk {
                        let kj = &k_rows[j * d..(j + 1) * d];
                        let mut dot = 0.0;
                        for t in 0..d {
                            dot += qi[t] * kj[t];
                        }
                        scored.push((dot.clamp(-1.0, 1.0), j as u32));
                    }
                    scored.sort_unstable_by(rank_order);
                    let o = (i - start) * k;
                    for (rank, &(sim, idx)) in scored.iter().take(k).enumerate() {
                        pos_out[o + rank] = idx;
                        sim_out[o + rank] = sim;
                    }
                }
            });
    });

    Ok(CorrespondenceMap {
        k,
        patch,
        query_h: qh,
        query_w: qw,
        key_h: kh,
        key_w: kw,
        positions,
        similarities,
    })
}

/// Literal double-loop oracle: extracts and normalizes every patch with its
/// own index arithmetic, scores all query/key pairs, full-sorts. Intended
/// for feature maps up to a few thousand positions.
pub fn brute_force_match(
    q: &NdArray,
    key: &NdArray,
    k: usize,
    patch: usize,
) -> Result<CorrespondenceMap> {
    validate(q, key, k, patch)?;
    let (qh, qw) = (q.shape()[1], q.shape()[2]);
    let (kh, kw) = (key.shape()[1], key.shape()[2]);

    let extract = |feat: &NdArray, y: usize, x: usize| -> Vec<f64> {
        let (c, h, w) = (feat.shape()[0], feat.shape()[1], feat.shape()[2]);
        let half = (patch as isize - 1) / 2;
        let mut v = Vec::with_capacity(c * patch * patch);
        for ch in 0..c {
            for dy in -half..=half {
                for dx in -half..=half {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    if yy < 0 || yy >= h as isize || xx < 0 || xx >= w as isize {
                        v.push(0.0);
                    } else {
                        v.push(feat.data()[(ch * h + yy as usize) * w + xx as usize]);
                    }
                }
            }
        }
        let mut sq = 0.0;
        for &e in &v {
            sq += e * e;
        }
        let norm = sq.sqrt().max(kernels::NORM_EPS);
        for e in &mut v {
            *e /= norm;
        }
        v
    };

    let key_patches: Vec<Vec<f64>> = (0..kh * kw)
        .map(|j| extract(key, j / kw, j % kw))
        .collect();

    let mut positions = Vec::with_capacity(qh * qw * k);
    let mut similarities = Vec::with_capacity(qh * qw * k);
    for i in 0..qh * qw {
        let qp = extract(q, i / qw, i % qw);
        let mut scored: Vec<(f64, u32)> = key_patches
            .iter()
            .enumerate()
            .map(|(j, kp)| {
                let mut dot = 0.0;
                for t in 0..qp.len() {
                    dot += qp[t] * kp[t];
                }
                (dot.clamp(-1.0, 1.0), j as u32)
            })
            .collect();
        scored.sort_by(rank_order);
        for &(sim, idx) in scored.iter().take(k) {
            positions.push(idx);
            similarities.push(sim);
        }
    }

    Ok(CorrespondenceMap {
        k,
        patch,
        query_h: qh,
        query_w: qw,
        key_h: kh,
        key_w: kw,
        positions,
        similarities,
    })
}
