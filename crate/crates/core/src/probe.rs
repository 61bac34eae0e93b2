//! Attention-mass analysis over cached K-frames.
//!
//! For each (layer, chunk, step, sequence) record: post-softmax mass per
//! visible K-frame averaged over heads and a uniformly spaced query
//! subsample; off-diagonal renormalization treating the whole current
//! chunk as self-attention; aggregation into cache-depth buckets with
//! noise-0 rerun records excluded by default; and the rank of the anchor
//! position among cached frames.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use adastate_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::model::AttentionCapture;
use crate::{CoreError, Result};

/// One attention summary: per-frame masses over the visible K-frames.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub layer: usize,
    pub chunk: usize,
    pub step: usize,
    pub seq: usize,
    /// Noise level of the pass; 0.0 marks the cache rerun with clean inputs.
    pub t: f64,
    pub masses: Vec<f64>,
}

/// Cache-depth aggregate of renormalized off-diagonal shares.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DepthBucket {
    pub depth: usize,
    /// Mean share per cached frame position, length `depth`, sums to 1.
    pub shares: Vec<f64>,
    pub records: usize,
}

/// Uniformly spaced query subsample: `floor(j * rows / q)` for `j in 0..q`.
pub fn query_subsample(rows: usize, cap: usize) -> Vec<usize> {
    let q = cap.min(rows);
    (0..q).map(|j| j * rows / q).collect()
}

/// Per-frame attention mass, averaged over heads and the query subsample.
///
/// `head_weights` are post-softmax `[queries, keys]` matrices, one per
/// head; key count must divide into whole frames.
pub fn frame_mass(
    head_weights: &[Tensor],
    query_cap: usize,
    tokens_per_frame: usize,
) -> Result<Vec<f64>> {
    let first = head_weights
        .first()
        .ok_or_else(|| CoreError::Probe("no attention heads captured".into()))?;
    let rows = first.shape()[0];
    let keys = first.shape()[1];
    if keys % tokens_per_frame != 0 {
        return Err(CoreError::Probe(format!(
            "{keys} key tokens do not divide into frames of {tokens_per_frame}"
        )));
    }
    let frames = keys / tokens_per_frame;
    let queries = query_subsample(rows, query_cap);
    let mut masses = vec![0.0; frames];
    for head in head_weights {
        debug_assert_eq!(head.shape(), [rows, keys]);
        for &q in &queries {
            let row = &head.data()[q * keys..(q + 1) * keys];
            for (f, m) in masses.iter_mut().enumerate() {
                *m += row[f * tokens_per_frame..(f + 1) * tokens_per_frame]
                    .iter()
                    .sum::<f64>();
            }
        }
    }
    let norm = (queries.len() * head_weights.len()) as f64;
    for m in &mut masses {
        *m /= norm;
    }
    Ok(masses)
}

/// Renormalized share over the cached past: the last `n_self` frames count
/// as self-attention and are dropped; the rest is rescaled to sum to 1.
pub fn offdiag_share(masses: &[f64], n_self: usize) -> Result<Vec<f64>> {
    let frames = masses.len();
    if frames <= n_self {
        return Err(CoreError::Probe(format!(
            "no cached past: {frames} visible frames with n_self={n_self}"
        )));
    }
    let off = frames - n_self;
    let total: f64 = masses[..off].iter().sum();
    if total <= 0.0 {
        return Err(CoreError::Probe(
            "degenerate record: zero off-diagonal mass".into(),
        ));
    }
    Ok(masses[..off].iter().map(|m| m / total).collect())
}

pub struct AggregateReport {
    pub buckets: Vec<DepthBucket>,
    pub warnings: Vec<String>,
}

/// Buckets records by cache depth (`visible frames - n_self`) and averages
/// the off-diagonal shares per frame position. Records at `t = 0` (the
/// cache rerun with clean inputs) are excluded when `exclude_t0` is set.
pub fn aggregate_depth(
    records: &[AttentionRecord],
    depths: &[usize],
    n_self: usize,
    exclude_t0: bool,
) -> AggregateReport {
    let mut buckets = Vec::new();
    let mut warnings = Vec::new();
    for &depth in depths {
        let mut acc = vec![0.0; depth];
        let mut count = 0usize;
        for rec in records {
            if rec.masses.len() < n_self || rec.masses.len() - n_self != depth {
                continue;
            }
            if exclude_t0 && rec.t == 0.0 {
                continue;
            }
            match offdiag_share(&rec.masses, n_self) {
                Ok(shares) => {
                    for (a, s) in acc.iter_mut().zip(&shares) {
                        *a += s;
                    }
                    count += 1;
                }
                Err(e) => warnings.push(format!(
                    "skipping degenerate record (layer {}, chunk {}, step {}): {e}",
                    rec.layer, rec.chunk, rec.step
                )),
            }
        }
        if count == 0 {
            warnings.push(format!("depth {depth}: no records, bucket omitted"));
            continue;
        }
        for a in &mut acc {
            *a /= count as f64;
        }
        buckets.push(DepthBucket {
            depth,
            shares: acc,
            records: count,
        });
    }
    AggregateReport { buckets, warnings }
}

/// 1-based descending rank of the position-0 share; ties resolve toward
/// the lower (better) rank.
pub fn anchor_rank(bucket: &DepthBucket) -> usize {
    let s0 = bucket.shares[0];
    1 + bucket.shares[1..].iter().filter(|s| **s > s0).count()
}

// ── Collection from live forwards ───────────────────────────────────

/// Accumulates attention records emitted by model forwards.
pub struct ProbeCollector {
    pub records: Vec<AttentionRecord>,
    pub query_cap: usize,
    pub seq: usize,
}

impl ProbeCollector {
    pub fn new(seq: usize, query_cap: usize) -> Self {
        Self {
            records: Vec::new(),
            query_cap,
            seq,
        }
    }

    pub fn absorb(
        &mut self,
        captures: &[AttentionCapture],
        chunk: usize,
        step: usize,
        t: f64,
        tokens_per_frame: usize,
    ) -> Result<()> {
        for cap in captures {
            let masses = frame_mass(&cap.heads, self.query_cap, tokens_per_frame)?;
            self.records.push(AttentionRecord {
                layer: cap.layer,
                chunk,
                step,
                seq: self.seq,
                t,
                masses,
            });
        }
        Ok(())
    }
}

// ── Trace files ─────────────────────────────────────────────────────

/// One record per line as JSON.
pub fn write_records(path: &Path, records: &[AttentionRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<AttentionRecord>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AttentionRecord = serde_json::from_str(&line)
            .map_err(|e| CoreError::Probe(format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// `depth,frame_position,mean_share,records` rows for plotting.
pub fn write_bucket_csv(path: &Path, buckets: &[DepthBucket]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "depth,frame_position,mean_share,records")?;
    for b in buckets {
        for (f, s) in b.shares.iter().enumerate() {
            writeln!(w, "{},{},{},{}", b.depth, f, s, b.records)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_row_weights(rows: usize, keys: usize) -> Tensor {
        Tensor::full(vec![rows, keys], 1.0 / keys as f64)
    }

    #[test]
    fn uniform_attention_gives_equal_masses() {
        let w = uniform_row_weights(5, 8);
        let masses = frame_mass(&[w], 32, 2).unwrap();
        assert_eq!(masses.len(), 4);
        for m in &masses {
            assert!((m - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn masses_sum_to_one_for_softmax_rows() {
        use adastate_tensor::{SeededRng, Tape};
        let mut rng = SeededRng::with_stream(21, 0);
        let logits = rng.normal_tensor(vec![6, 12]);
        let tape = Tape::new();
        let w = tape.constant(&logits).softmax_rows().unwrap().value();
        let masses = frame_mass(&[w], 4, 3).unwrap();
        let sum: f64 = masses.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn frame_mass_matches_exhaustive_sum() {
        // 2 frames x 2 tokens, 3 queries, 2 heads, hand-built weights.
        let h0 = Tensor::new(
            vec![3, 4],
            vec![
                0.1, 0.2, 0.3, 0.4, //
                0.25, 0.25, 0.25, 0.25, //
                0.4, 0.3, 0.2, 0.1,
            ],
        )
        .unwrap();
        let h1 = Tensor::new(
            vec![3, 4],
            vec![
                0.7, 0.1, 0.1, 0.1, //
                0.0, 0.5, 0.5, 0.0, //
                0.2, 0.2, 0.3, 0.3,
            ],
        )
        .unwrap();
        // full query set: cap >= rows
        let masses = frame_mass(&[h0.clone(), h1.clone()], 100, 2).unwrap();
        // exhaustive token-level double sum
        let mut want = vec![0.0; 2];
        for head in [&h0, &h1] {
            for q in 0..3 {
                for k in 0..4 {
                    want[k / 2] += head.data()[q * 4 + k];
                }
            }
        }
        for w in &mut want {
            *w /= 3.0 * 2.0;
        }
        for (m, w) in masses.iter().zip(&want) {
            assert!((m - w).abs() < 1e-12);
        }
    }

    #[test]
    fn frame_mass_rejects_ragged_frames() {
        let w = uniform_row_weights(2, 5);
        assert!(frame_mass(&[w], 32, 2).is_err());
    }

    #[test]
    fn offdiag_share_renormalizes() {
        let shares = offdiag_share(&[0.2, 0.2, 0.6], 1).unwrap();
        assert_eq!(shares.len(), 2);
        assert!((shares[0] - 0.5).abs() < 1e-12);
        assert!((shares[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn offdiag_share_errors_without_cached_past() {
        assert!(offdiag_share(&[0.4, 0.6], 2).is_err());
        assert!(offdiag_share(&[1.0], 3).is_err());
    }

    #[test]
    fn shares_always_sum_to_one() {
        let shares = offdiag_share(&[0.11, 0.07, 0.3, 0.52], 2).unwrap();
        let sum: f64 = shares.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn aggregation_single_record_equals_that_record() {
        let rec = AttentionRecord {
            layer: 0,
            chunk: 1,
            step: 0,
            seq: 0,
            t: 0.5,
            masses: vec![0.3, 0.3, 0.4],
        };
        let report = aggregate_depth(&[rec.clone()], &[2], 1, true);
        assert_eq!(report.buckets.len(), 1);
        let want = offdiag_share(&rec.masses, 1).unwrap();
        assert_eq!(report.buckets[0].shares, want);
        assert_eq!(report.buckets[0].records, 1);
    }

    #[test]
    fn t0_exclusion_changes_counts_exactly() {
        let mk = |t: f64, step: usize| AttentionRecord {
            layer: 0,
            chunk: 1,
            step,
            seq: 0,
            t,
            masses: vec![0.5, 0.5],
        };
        let records = vec![mk(0.75, 0), mk(0.5, 1), mk(0.0, 2), mk(0.0, 3)];
        let with = aggregate_depth(&records, &[1], 1, false);
        let without = aggregate_depth(&records, &[1], 1, true);
        assert_eq!(with.buckets[0].records, 4);
        assert_eq!(without.buckets[0].records, 2);
    }

    #[test]
    fn empty_bucket_is_omitted_with_warning() {
        let report = aggregate_depth(&[], &[3, 6], 1, true);
        assert!(report.buckets.is_empty());
        assert_eq!(report.warnings.len(), 2);
    }

    #[test]
    fn anchor_rank_examples() {
        let b = |shares: Vec<f64>| DepthBucket {
            depth: shares.len(),
            shares,
            records: 1,
        };
        assert_eq!(anchor_rank(&b(vec![0.4, 0.3, 0.3])), 1);
        assert_eq!(anchor_rank(&b(vec![0.2, 0.5, 0.3])), 3);
        // tie resolves toward the lower rank
        assert_eq!(anchor_rank(&b(vec![0.4, 0.4, 0.2])), 1);
    }

    #[test]
    fn bimodal_trace_ranks_anchor_second() {
        // anchor strong, freshest cached frame stronger, rest uniform
        let depth = 6;
        let mut masses = vec![0.04; depth + 3];
        masses[0] = 0.25; // anchor
        masses[depth - 1] = 0.35; // freshest cached
        let total: f64 = masses.iter().sum();
        for m in &mut masses {
            *m /= total;
        }
        let rec = AttentionRecord {
            layer: 0,
            chunk: 2,
            step: 1,
            seq: 0,
            t: 0.5,
            masses,
        };
        let report = aggregate_depth(&[rec], &[depth], 3, true);
        assert_eq!(anchor_rank(&report.buckets[0]), 2);
    }

    #[test]
    fn records_roundtrip_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        let records = vec![
            AttentionRecord { layer: 0, chunk: 1, step: 0, seq: 3, t: 0.75, masses: vec![0.5, 0.5] },
            AttentionRecord { layer: 1, chunk: 2, step: 4, seq: 3, t: 0.0, masses: vec![0.25; 4] },
        ];
        write_records(&path, &records).unwrap();
        let back = read_records(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].masses, records[1].masses);
        assert_eq!(back[0].t, 0.75);
    }
}
