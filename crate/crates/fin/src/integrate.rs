//! Integrate Network: align the four sub-sequences to a common shape, build
//! the integrated sequence from element-wise cross interactions, build the
//! integrated query, and attend.

use rand::Rng;

use crate::error::{FinError, Result};
use crate::fragment::{encode_keys, encode_query, AttentionParams, EmbeddingSet, BASE_SIDE_CHANNELS};
use crate::numeric::{DenseMatrix, NodeId, ParamStore, Tape};
use crate::store::{BehaviorEvent, SubSequenceBundle};

pub const CHANNELS: usize = 4; // geohash, meal-time, short-term, long-term
pub const CHANNEL_PAIRS: [(usize, usize); 6] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];
/// 4 originals + 6 pairs x {mul, add, sub}.
pub const BLOCK_COUNT: usize = CHANNELS + CHANNEL_PAIRS.len() * 3;

/// One channel truncated to the newest L rows, embedded, projected to
/// d_model, zero-padded, with a validity mask.
pub struct AlignedSubSequence {
    pub node: NodeId,
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct IntegrateParams {
    /// Key projection per channel, d_model x key_dim.
    pub proj: [usize; CHANNELS],
    /// Query projection per channel, d_model x query_dim.
    pub qproj: [usize; CHANNELS],
    /// Final query projection, d_model x (BLOCK_COUNT * d_model).
    pub qout: usize,
    pub mha: AttentionParams,
    pub align_len: usize,
    pub d_model: usize,
    /// Ablation flag: average each channel to a single row before crossing.
    pub avg_len1: bool,
}

impl IntegrateParams {
    pub fn build<R: Rng>(
        store: &mut ParamStore,
        emb_dim: usize,
        d_model: usize,
        heads: usize,
        align_len: usize,
        avg_len1: bool,
        rng: &mut R,
    ) -> Self {
        let base_dim = BASE_SIDE_CHANNELS * emb_dim;
        let long_dim = (BASE_SIDE_CHANNELS + 2) * emb_dim;
        let names = ["geo", "meal", "short", "long"];
        let key_dims = [base_dim, base_dim, base_dim, long_dim];
        let mut proj = [0; CHANNELS];
        let mut qproj = [0; CHANNELS];
        for c in 0..CHANNELS {
            proj[c] = store.add_weight(&format!("int.{}.proj", names[c]), d_model, key_dims[c], rng);
            qproj[c] = store.add_weight(&format!("int.{}.qproj", names[c]), d_model, base_dim, rng);
        }
        let qout = store.add_weight("int.qout", d_model, BLOCK_COUNT * d_model, rng);
        let mha = AttentionParams::build(store, "int.mha", d_model, d_model, d_model, heads, rng);
        IntegrateParams {
            proj,
            qproj,
            qout,
            mha,
            align_len,
            d_model,
            avg_len1,
        }
    }
}

/// Truncate a channel to its newest `align_len` events, embed, project to
/// d_model, and zero-pad to a fixed row count.
pub fn align(
    tape: &mut Tape,
    store: &ParamStore,
    emb: &EmbeddingSet,
    params: &IntegrateParams,
    channel: usize,
    events: &[BehaviorEvent],
) -> Result<AlignedSubSequence> {
    let rows = if params.avg_len1 { 1 } else { params.align_len };
    let trunc = &events[..events.len().min(params.align_len)];
    let with_dedup = channel == 3;
    let keys = encode_keys(tape, store, emb, trunc, with_dedup)?;
    let (node, valid) = match keys {
        None => (tape.constant(DenseMatrix::zeros(rows, params.d_model)), 0),
        Some(k) => {
            let w = tape.param(store, params.proj[channel]);
            let wt = tape.transpose(w);
            let projected = tape.matmul(k, wt)?; // v x d_model
            if params.avg_len1 {
                (tape.mean_rows(projected)?, 1)
            } else {
                (tape.pad_rows(projected, rows)?, trunc.len())
            }
        }
    };
    let mask = (0..rows).map(|r| r < valid).collect();
    Ok(AlignedSubSequence { node, mask })
}

fn mask_matrix(mask: &[bool], cols: usize) -> DenseMatrix {
    let mut m = DenseMatrix::zeros(mask.len(), cols);
    for (r, &v) in mask.iter().enumerate() {
        if v {
            for c in 0..cols {
                m.set(r, c, 1.0);
            }
        }
    }
    m
}

/// Cross interactions between recency-aligned rows of the four channels:
/// for each unordered channel pair, elementwise mul, add, and sub blocks,
/// stacked after the four originals. A derived row is valid (and nonzero)
/// only when both source rows are valid.
pub fn cross(
    tape: &mut Tape,
    seqs: &[AlignedSubSequence; CHANNELS],
) -> Result<(NodeId, Vec<bool>)> {
    let rows = tape.value(seqs[0].node).rows;
    let cols = tape.value(seqs[0].node).cols;
    for s in seqs.iter() {
        let v = tape.value(s.node);
        if v.rows != rows || v.cols != cols {
            return Err(FinError::Dimension("cross requires identically aligned channels".into()));
        }
    }
    let mut blocks = Vec::with_capacity(BLOCK_COUNT);
    let mut mask = Vec::with_capacity(BLOCK_COUNT * rows);
    for s in seqs.iter() {
        blocks.push(s.node);
        mask.extend_from_slice(&s.mask);
    }
    for &(a, b) in CHANNEL_PAIRS.iter() {
        let pair_mask: Vec<bool> = seqs[a]
            .mask
            .iter()
            .zip(&seqs[b].mask)
            .map(|(&x, &y)| x && y)
            .collect();
        let mm = tape.constant(mask_matrix(&pair_mask, cols));
        let (na, nb) = (seqs[a].node, seqs[b].node);
        let mul = tape.mul(na, nb)?;
        let add_raw = tape.add(na, nb)?;
        let add = tape.mul(add_raw, mm)?;
        let sub_raw = tape.sub(na, nb)?;
        let sub = tape.mul(sub_raw, mm)?;
        for block in [mul, add, sub] {
            blocks.push(block);
            mask.extend_from_slice(&pair_mask);
        }
    }
    let stacked = tape.concat_rows(&blocks)?;
    Ok((stacked, mask))
}

/// Per-channel projected query vectors (1 x d_model each).
pub fn channel_queries(
    tape: &mut Tape,
    store: &ParamStore,
    emb: &EmbeddingSet,
    params: &IntegrateParams,
    query_item: &BehaviorEvent,
) -> Result<[NodeId; CHANNELS]> {
    let q = encode_query(tape, store, emb, query_item)?;
    let mut out = [q; CHANNELS];
    for c in 0..CHANNELS {
        let w = tape.param(store, params.qproj[c]);
        let wt = tape.transpose(w);
        out[c] = tape.matmul(q, wt)?;
    }
    Ok(out)
}

/// Integrated query: the same cross set applied to the channel query
/// vectors, concatenated along features and projected back to d_model.
pub fn integrate_query(
    tape: &mut Tape,
    store: &ParamStore,
    params: &IntegrateParams,
    queries: &[NodeId; CHANNELS],
) -> Result<NodeId> {
    let mut parts = Vec::with_capacity(BLOCK_COUNT);
    parts.extend_from_slice(queries);
    for &(a, b) in CHANNEL_PAIRS.iter() {
        parts.push(tape.mul(queries[a], queries[b])?);
        parts.push(tape.add(queries[a], queries[b])?);
        parts.push(tape.sub(queries[a], queries[b])?);
    }
    let cat = tape.concat_cols(&parts)?;
    let w = tape.param(store, params.qout);
    let wt = tape.transpose(w);
    tape.matmul(cat, wt)
}

/// Full Integrate Network forward: align, cross, gather valid rows, and run
/// multi-head target attention with the integrated query. All-masked input
/// yields a zero vector.
pub fn integrate_forward(
    tape: &mut Tape,
    store: &ParamStore,
    emb: &EmbeddingSet,
    params: &IntegrateParams,
    bundle: &SubSequenceBundle,
    query_item: &BehaviorEvent,
) -> Result<NodeId> {
    let aligned = [
        align(tape, store, emb, params, 0, &bundle.geohash_block)?,
        align(tape, store, emb, params, 1, &bundle.meal_time)?,
        align(tape, store, emb, params, 2, &bundle.short_term)?,
        align(tape, store, emb, params, 3, &bundle.long_term_dedup)?,
    ];
    let (stacked, mask) = cross(tape, &aligned)?;
    let valid: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter_map(|(i, &v)| if v { Some(i) } else { None })
        .collect();
    if valid.is_empty() {
        return Ok(tape.constant(DenseMatrix::zeros(1, params.mha.output_dim())));
    }
    let keys = tape.rows(stacked, &valid)?;
    let queries = channel_queries(tape, store, emb, params, query_item)?;
    let q = integrate_query(tape, store, params, &queries)?;
    crate::fragment::multihead_target_attention(tape, store, &params.mha, Some(keys), q)
}
