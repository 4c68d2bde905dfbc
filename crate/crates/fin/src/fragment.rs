//! Fragment Network: per-channel simplified attention over long
//! sub-sequences and multi-head target attention over truncated ones.

use rand::Rng;

use crate::error::Result;
use crate::numeric::{DenseMatrix, NodeId, ParamStore, Tape};
use crate::store::{click_count_bucket, BehaviorEvent, SubSequenceBundle};

pub const COUNT_BUCKETS: usize = 16;
pub const TIME_BUCKETS: usize = 16;

/// Side-info channels shared by every sub-sequence.
pub const BASE_SIDE_CHANNELS: usize = 4; // item, category, geohash, period

/// Parameter indices of all embedding tables.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    pub item: usize,
    pub category: usize,
    pub geohash: usize,
    pub period: usize,
    pub count_bucket: usize,
    pub time_bucket: usize,
    pub user: usize,
    pub dim: usize,
}

/// Vocabulary sizes needed to size the embedding tables.
#[derive(Debug, Clone)]
pub struct VocabSizes {
    pub items: usize,
    pub categories: usize,
    pub geohashes: usize,
    pub periods: usize,
    pub users: usize,
}

impl EmbeddingSet {
    pub fn build<R: Rng>(store: &mut ParamStore, vocabs: &VocabSizes, dim: usize, rng: &mut R) -> Self {
        EmbeddingSet {
            item: store.add_embedding("emb.item", vocabs.items.max(1), dim, rng),
            category: store.add_embedding("emb.category", vocabs.categories.max(1), dim, rng),
            geohash: store.add_embedding("emb.geohash", vocabs.geohashes.max(1), dim, rng),
            period: store.add_embedding("emb.period", vocabs.periods.max(1), dim, rng),
            count_bucket: store.add_embedding("emb.count_bucket", COUNT_BUCKETS, dim, rng),
            time_bucket: store.add_embedding("emb.time_bucket", TIME_BUCKETS, dim, rng),
            user: store.add_embedding("emb.user", vocabs.users.max(1), dim, rng),
            dim,
        }
    }
}

/// One attention head: key/query/value projections.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub wk: usize,
    pub wq: usize,
    pub wv: usize,
}

/// Multi-head target attention parameters for one channel.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub heads: Vec<HeadParams>,
    pub head_dim: usize,
}

impl AttentionParams {
    pub fn build<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        key_dim: usize,
        query_dim: usize,
        d_model: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(d_model % heads == 0, "d_model must be divisible by heads");
        let head_dim = d_model / heads;
        let heads = (0..heads)
            .map(|m| HeadParams {
                wk: store.add_weight(&format!("{prefix}.h{m}.wk"), head_dim, key_dim, rng),
                wq: store.add_weight(&format!("{prefix}.h{m}.wq"), head_dim, query_dim, rng),
                wv: store.add_weight(&format!("{prefix}.h{m}.wv"), head_dim, key_dim, rng),
            })
            .collect();
        AttentionParams { heads, head_dim }
    }

    pub fn output_dim(&self) -> usize {
        self.heads.len() * self.head_dim
    }
}

/// Side-info id sequences of a sub-sequence, one row per behavior.
fn side_ids(events: &[BehaviorEvent]) -> [Vec<usize>; BASE_SIDE_CHANNELS] {
    [
        events.iter().map(|e| e.item_id as usize).collect(),
        events.iter().map(|e| e.category_id as usize).collect(),
        events.iter().map(|e| e.geohash_id as usize).collect(),
        events.iter().map(|e| e.period_id as usize).collect(),
    ]
}

fn query_side_ids(q: &BehaviorEvent) -> [usize; BASE_SIDE_CHANNELS] {
    [
        q.item_id as usize,
        q.category_id as usize,
        q.geohash_id as usize,
        q.period_id as usize,
    ]
}

fn side_tables(emb: &EmbeddingSet) -> [usize; BASE_SIDE_CHANNELS] {
    [emb.item, emb.category, emb.geohash, emb.period]
}

/// Key matrix for multi-head attention: per-behavior concat of side-info
/// embeddings, n x (K * dim). `with_dedup_channels` appends the click-count
/// and time-interval bucket channels.
pub fn encode_keys(
    tape: &mut Tape,
    store: &ParamStore,
    emb: &EmbeddingSet,
    events: &[BehaviorEvent],
    with_dedup_channels: bool,
) -> Result<Option<NodeId>> {
    if events.is_empty() {
        return Ok(None);
    }
    let tables = side_tables(emb);
    let ids = side_ids(events);
    let mut parts = Vec::new();
    for (table, ids) in tables.iter().zip(ids.iter()) {
        let t = tape.param(store, *table);
        parts.push(tape.rows(t, ids)?);
    }
    if with_dedup_channels {
        let count_ids: Vec<usize> = events
            .iter()
            .map(|e| click_count_bucket(e.click_count) as usize)
            .collect();
        let time_ids: Vec<usize> = events
            .iter()
            .map(|e| *e.extra.get("time_interval").unwrap_or(&0) as usize)
            .collect();
        let tc = tape.param(store, emb.count_bucket);
        parts.push(tape.rows(tc, &count_ids)?);
        let tt = tape.param(store, emb.time_bucket);
        parts.push(tape.rows(tt, &time_ids)?);
    }
    Ok(Some(tape.concat_cols(&parts)?))
}

/// Query embedding: concat of the query item's side-info embeddings,
/// 1 x (4 * dim).
pub fn encode_query(
    tape: &mut Tape,
    store: &ParamStore,
    emb: &EmbeddingSet,
    query_item: &BehaviorEvent,
) -> Result<NodeId> {
    let tables = side_tables(emb);
    let qids = query_side_ids(query_item);
    let mut parts = Vec::new();
    for (table, id) in tables.iter().zip(qids.iter()) {
        let t = tape.param(store, *table);
        parts.push(tape.rows(t, &[*id])?);
    }
    tape.concat_cols(&parts)
}

/// Binary relevance of each behavior's side info against the query's:
/// 1 where equal, 0 otherwise.
pub fn relevance_scores(behavior_ids: &[usize], query_id: usize) -> Vec<f64> {
    behavior_ids
        .iter()
        .map(|&b| if b == query_id { 1.0 } else { 0.0 })
        .collect()
}

/// Click-weighted match fraction: sum(r_j * c_j) / sum(c_j), 0 when empty.
pub fn z_score(relevance: &[f64], clicks: &[u32]) -> f64 {
    let total: f64 = clicks.iter().map(|&c| c as f64).sum();
    if total == 0.0 {
        return 0.0;
    }
    let matched: f64 = relevance
        .iter()
        .zip(clicks)
        .map(|(&r, &c)| r * c as f64)
        .sum();
    matched / total
}

/// Simplified attention over a long sub-sequence: per side channel i,
/// U_i = z_i * mean_j(e_j^i), concatenated over channels (1 x 4*dim).
/// With `per_behavior_weighting`, U_i = sum_j (r_j c_j / sum c) * e_j^i.
pub fn simplified_attention(
    tape: &mut Tape,
    store: &ParamStore,
    emb: &EmbeddingSet,
    events: &[BehaviorEvent],
    query_item: &BehaviorEvent,
    per_behavior_weighting: bool,
) -> Result<NodeId> {
    let out_dim = BASE_SIDE_CHANNELS * emb.dim;
    if events.is_empty() {
        return Ok(tape.constant(DenseMatrix::zeros(1, out_dim)));
    }
    let tables = side_tables(emb);
    let ids = side_ids(events);
    let qids = query_side_ids(query_item);
    let clicks: Vec<u32> = events.iter().map(|e| e.click_count).collect();
    let mut parts = Vec::new();
    for c in 0..BASE_SIDE_CHANNELS {
        let r = relevance_scores(&ids[c], qids[c]);
        let table = tape.param(store, tables[c]);
        let rows = tape.rows(table, &ids[c])?;
        let u = if per_behavior_weighting {
            let total: f64 = clicks.iter().map(|&x| x as f64).sum();
            let weights: Vec<f64> = r
                .iter()
                .zip(&clicks)
                .map(|(&rj, &cj)| rj * cj as f64 / total)
                .collect();
            let w = tape.constant(DenseMatrix::from_vec(1, weights.len(), weights)?);
            tape.matmul(w, rows)?
        } else {
            let z = z_score(&r, &clicks);
            let mean = tape.mean_rows(rows)?;
            tape.scale(mean, z)
        };
        parts.push(u);
    }
    tape.concat_cols(&parts)
}

/// Multi-head target attention: per head, scaled dot-product of projected
/// keys against the projected query, softmax over key positions, weighted
/// sum of projected values; heads concatenated. Zero keys -> zero output.
pub fn multihead_target_attention(
    tape: &mut Tape,
    store: &ParamStore,
    params: &AttentionParams,
    keys: Option<NodeId>,
    query_vec: NodeId,
) -> Result<NodeId> {
    let keys = match keys {
        Some(k) => k,
        None => return Ok(tape.constant(DenseMatrix::zeros(1, params.output_dim()))),
    };
    let scale = 1.0 / (params.head_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(params.heads.len());
    for h in &params.heads {
        let wk = tape.param(store, h.wk);
        let wq = tape.param(store, h.wq);
        let wv = tape.param(store, h.wv);
        let wk_t = tape.transpose(wk);
        let kk = tape.matmul(keys, wk_t)?; // n x head_dim
        let wq_t = tape.transpose(wq);
        let qh = tape.matmul(query_vec, wq_t)?; // 1 x head_dim
        let qh_t = tape.transpose(qh); // head_dim x 1
        let logits_col = tape.matmul(kk, qh_t)?; // n x 1
        let logits = tape.transpose(logits_col); // 1 x n
        let scaled = tape.scale(logits, scale);
        let att = tape.softmax(scaled)?;
        let wv_t = tape.transpose(wv);
        let vk = tape.matmul(keys, wv_t)?; // n x head_dim
        heads.push(tape.matmul(att, vk)?); // 1 x head_dim
    }
    tape.concat_cols(&heads)
}

/// Attention weights of the first head for inspection/tests.
pub fn attention_weights(
    tape: &mut Tape,
    store: &ParamStore,
    params: &AttentionParams,
    keys: NodeId,
    query_vec: NodeId,
) -> Result<Vec<f64>> {
    let h = &params.heads[0];
    let wk = tape.param(store, h.wk);
    let wq = tape.param(store, h.wq);
    let wk_t = tape.transpose(wk);
    let kk = tape.matmul(keys, wk_t)?;
    let wq_t = tape.transpose(wq);
    let qh = tape.matmul(query_vec, wq_t)?;
    let qh_t = tape.transpose(qh);
    let logits_col = tape.matmul(kk, qh_t)?;
    let logits = tape.transpose(logits_col);
    let scaled = tape.scale(logits, 1.0 / (params.head_dim as f64).sqrt());
    let att = tape.softmax(scaled)?;
    Ok(tape.value(att).data.clone())
}

/// All attention parameters of the Fragment Network.
#[derive(Debug, Clone)]
pub struct FragmentParams {
    pub geohash: AttentionParams,
    pub meal_time: AttentionParams,
    pub short_term: AttentionParams,
    pub long_term: AttentionParams,
    pub mha_trunc: usize,
}

impl FragmentParams {
    pub fn build<R: Rng>(
        store: &mut ParamStore,
        emb_dim: usize,
        d_model: usize,
        heads: usize,
        mha_trunc: usize,
        rng: &mut R,
    ) -> Self {
        let key_dim = BASE_SIDE_CHANNELS * emb_dim;
        let long_key_dim = (BASE_SIDE_CHANNELS + 2) * emb_dim;
        let query_dim = BASE_SIDE_CHANNELS * emb_dim;
        FragmentParams {
            geohash: AttentionParams::build(store, "mha.geo", key_dim, query_dim, d_model, heads, rng),
            meal_time: AttentionParams::build(store, "mha.meal", key_dim, query_dim, d_model, heads, rng),
            short_term: AttentionParams::build(store, "mha.short", key_dim, query_dim, d_model, heads, rng),
            long_term: AttentionParams::build(store, "mha.long", long_key_dim, query_dim, d_model, heads, rng),
            mha_trunc,
        }
    }
}

/// Full Fragment Network forward: Geohash-block and Meal-time channels emit
/// concat(U*, U_c*), Short-term and Long-term-dedup emit U_c* only.
pub fn fragment_forward(
    tape: &mut Tape,
    store: &ParamStore,
    emb: &EmbeddingSet,
    params: &FragmentParams,
    bundle: &SubSequenceBundle,
    query_item: &BehaviorEvent,
    per_behavior_weighting: bool,
) -> Result<NodeId> {
    let q = encode_query(tape, store, emb, query_item)?;
    let mut parts = Vec::new();
    for (events, att) in [
        (&bundle.geohash_block, &params.geohash),
        (&bundle.meal_time, &params.meal_time),
    ] {
        let u_star = simplified_attention(tape, store, emb, events, query_item, per_behavior_weighting)?;
        let trunc = &events[..events.len().min(params.mha_trunc)];
        let keys = encode_keys(tape, store, emb, trunc, false)?;
        let u_c = multihead_target_attention(tape, store, att, keys, q)?;
        parts.push(u_star);
        parts.push(u_c);
    }
    let keys = encode_keys(tape, store, emb, &bundle.short_term, false)?;
    parts.push(multihead_target_attention(tape, store, &params.short_term, keys, q)?);
    let keys = encode_keys(tape, store, emb, &bundle.long_term_dedup, true)?;
    parts.push(multihead_target_attention(tape, store, &params.long_term, keys, q)?);
    tape.concat_cols(&parts)
}

/// Output width of [`fragment_forward`].
pub fn fragment_output_dim(emb_dim: usize, d_model: usize) -> usize {
    2 * (BASE_SIDE_CHANNELS * emb_dim + d_model) + 2 * d_model
}
