//! Full model assembly: fragment + integrate outputs + query/context
//! features feeding an MLP head, cross-entropy training with Adam, and
//! rank-based AUC evaluation.

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::error::{FinError, Result};
use crate::fragment::{
    encode_keys, encode_query, multihead_target_attention, simplified_attention, AttentionParams,
    EmbeddingSet, VocabSizes, BASE_SIDE_CHANNELS,
};
use crate::integrate::{integrate_forward, IntegrateParams};
use crate::numeric::{AdamConfig, DenseMatrix, NodeId, ParamStore, Tape};
use crate::store::{build_bundle, ExtractionCaps, LifelongSequence, QueryContext};

/// Model variants for the structure ablation ladder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Short-term attention plus average-pooled long-term behavior.
    AvgPoolLong,
    /// Short-term attention plus simplified attention on geohash/meal-time.
    SimplifiedOnly,
    /// Short-term attention plus one hard-searched channel modeled with MHA.
    SimStyle,
    /// Geohash + meal-time channels, each simplified + MHA; no dedup, no IN.
    StenStyle,
    /// The full Fragment Network: all four channels.
    FnOnly,
    /// Fragment Network + Integrate Network.
    FullFin,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::AvgPoolLong,
        Variant::SimplifiedOnly,
        Variant::SimStyle,
        Variant::StenStyle,
        Variant::FnOnly,
        Variant::FullFin,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::AvgPoolLong => "avg_pool_long",
            Variant::SimplifiedOnly => "simplified_only",
            Variant::SimStyle => "sim_style",
            Variant::StenStyle => "sten_style",
            Variant::FnOnly => "fn_only",
            Variant::FullFin => "full_fin",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| FinError::Config(format!("unknown variant '{s}'")))
    }

    fn uses_avg_pool(self) -> bool {
        self == Variant::AvgPoolLong
    }

    fn uses_simplified(self) -> bool {
        matches!(
            self,
            Variant::SimplifiedOnly | Variant::StenStyle | Variant::FnOnly | Variant::FullFin
        )
    }

    fn uses_geo_mha(self) -> bool {
        matches!(
            self,
            Variant::SimStyle | Variant::StenStyle | Variant::FnOnly | Variant::FullFin
        )
    }

    fn uses_meal_mha(self) -> bool {
        matches!(self, Variant::StenStyle | Variant::FnOnly | Variant::FullFin)
    }

    fn uses_long_mha(self) -> bool {
        matches!(self, Variant::FnOnly | Variant::FullFin)
    }

    fn uses_integrate(self) -> bool {
        self == Variant::FullFin
    }

    /// Hard-search retrieval channels consumed by the variant.
    pub fn retrieval_channels(self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.uses_geo_mha() || self.uses_simplified() {
            out.push("geohash_block");
        }
        if self.uses_meal_mha() || self.uses_simplified() {
            out.push("meal_time");
        }
        if self.uses_long_mha() || self.uses_avg_pool() {
            out.push("long_term_dedup");
        }
        out
    }
}

/// Model hyperparameters.
#[derive(Debug, Clone)]
pub struct FinConfig {
    pub emb_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub align_len: usize,
    pub caps: ExtractionCaps,
    pub mha_trunc: usize,
    pub mlp_hidden: (usize, usize),
    pub per_behavior_weighting: bool,
    pub integrate_avg_len1: bool,
    pub variant: Variant,
    /// Activation of the MLP head; fixed so runs are comparable.
    pub activation: &'static str,
    pub init_seed: u64,
}

impl Default for FinConfig {
    fn default() -> Self {
        FinConfig {
            emb_dim: 4,
            d_model: 16,
            heads: 4,
            align_len: 16,
            caps: ExtractionCaps::default(),
            mha_trunc: 20,
            mlp_hidden: (200, 80),
            per_behavior_weighting: false,
            integrate_avg_len1: false,
            variant: Variant::FullFin,
            activation: "silu",
            init_seed: 1,
        }
    }
}

/// One training/evaluation record.
#[derive(Debug, Clone)]
pub struct Sample {
    pub user_vid: u32,
    pub seq_idx: usize,
    pub query: QueryContext,
    pub label: u8,
}

/// The assembled network: embeddings, per-channel attention parameters, the
/// optional integrate block, and the MLP head, all living in one ParamStore.
#[derive(Clone)]
pub struct FinModel {
    pub cfg: FinConfig,
    pub store: ParamStore,
    pub emb: EmbeddingSet,
    geo_att: Option<AttentionParams>,
    meal_att: Option<AttentionParams>,
    short_att: AttentionParams,
    long_att: Option<AttentionParams>,
    integrate: Option<IntegrateParams>,
    mlp: Vec<(usize, usize)>,
}

impl FinModel {
    pub fn new(cfg: FinConfig, vocabs: &VocabSizes) -> Result<FinModel> {
        if cfg.d_model % cfg.heads != 0 {
            return Err(FinError::Config("d_model must be divisible by heads".into()));
        }
        let mut rng = StdRng::seed_from_u64(cfg.init_seed);
        let mut store = ParamStore::new();
        let emb = EmbeddingSet::build(&mut store, vocabs, cfg.emb_dim, &mut rng);
        let key_dim = BASE_SIDE_CHANNELS * cfg.emb_dim;
        let long_key_dim = (BASE_SIDE_CHANNELS + 2) * cfg.emb_dim;
        let v = cfg.variant;
        let att = |store: &mut ParamStore, rng: &mut StdRng, name: &str, kd: usize| {
            AttentionParams::build(store, name, kd, key_dim, cfg.d_model, cfg.heads, rng)
        };
        let geo_att = v
            .uses_geo_mha()
            .then(|| att(&mut store, &mut rng, "mha.geo", key_dim));
        let meal_att = v
            .uses_meal_mha()
            .then(|| att(&mut store, &mut rng, "mha.meal", key_dim));
        let short_att = att(&mut store, &mut rng, "mha.short", key_dim);
        let long_att = v
            .uses_long_mha()
            .then(|| att(&mut store, &mut rng, "mha.long", long_key_dim));
        let integrate = v.uses_integrate().then(|| {
            IntegrateParams::build(
                &mut store,
                cfg.emb_dim,
                cfg.d_model,
                cfg.heads,
                cfg.align_len,
                cfg.integrate_avg_len1,
                &mut rng,
            )
        });

        let mut in_dim = key_dim + cfg.emb_dim + cfg.d_model; // query emb + user emb + short U_c*
        if v.uses_avg_pool() {
            in_dim += key_dim;
        }
        if v.uses_simplified() {
            in_dim += 2 * key_dim;
        }
        if v.uses_geo_mha() {
            in_dim += cfg.d_model;
        }
        if v.uses_meal_mha() {
            in_dim += cfg.d_model;
        }
        if v.uses_long_mha() {
            in_dim += cfg.d_model;
        }
        if v.uses_integrate() {
            in_dim += cfg.d_model;
        }
        let widths = [in_dim, cfg.mlp_hidden.0, cfg.mlp_hidden.1, 2];
        let mut mlp = Vec::new();
        for i in 0..3 {
            let w = store.add_weight(&format!("mlp.{i}.w"), widths[i], widths[i + 1], &mut rng);
            let b = store.add_param(&format!("mlp.{i}.b"), DenseMatrix::zeros(1, widths[i + 1]));
            mlp.push((w, b));
        }
        Ok(FinModel {
            cfg,
            store,
            emb,
            geo_att,
            meal_att,
            short_att,
            long_att,
            integrate,
            mlp,
        })
    }

    /// Attach a checkpointed store. Shapes must match the architecture.
    pub fn restore(&mut self, store: ParamStore) -> Result<()> {
        if store.len() != self.store.len() {
            return Err(FinError::Format(format!(
                "checkpoint has {} parameters, model expects {}",
                store.len(),
                self.store.len()
            )));
        }
        for i in 0..store.len() {
            if store.name(i) != self.store.name(i)
                || !store.value(i).same_shape(self.store.value(i))
            {
                return Err(FinError::Format(format!(
                    "checkpoint parameter {} does not match model",
                    store.name(i)
                )));
            }
        }
        self.store = store;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.store.total_scalars()
    }

    /// Forward to the 1x2 logits node for one sample.
    pub fn forward_logits(
        &self,
        tape: &mut Tape,
        seq: &LifelongSequence,
        sample: &Sample,
    ) -> Result<NodeId> {
        let cfg = &self.cfg;
        let store = &self.store;
        let bundle = build_bundle(seq, &sample.query, &cfg.caps);
        let query_item = &sample.query.query_item;
        let q = encode_query(tape, store, &self.emb, query_item)?;

        let mut parts: Vec<NodeId> = Vec::new();
        if cfg.variant.uses_simplified() {
            for events in [&bundle.geohash_block, &bundle.meal_time] {
                parts.push(simplified_attention(
                    tape,
                    store,
                    &self.emb,
                    events,
                    query_item,
                    cfg.per_behavior_weighting,
                )?);
            }
        }
        if let Some(att) = &self.geo_att {
            let trunc = &bundle.geohash_block[..bundle.geohash_block.len().min(cfg.mha_trunc)];
            let keys = encode_keys(tape, store, &self.emb, trunc, false)?;
            parts.push(multihead_target_attention(tape, store, att, keys, q)?);
        }
        if let Some(att) = &self.meal_att {
            let trunc = &bundle.meal_time[..bundle.meal_time.len().min(cfg.mha_trunc)];
            let keys = encode_keys(tape, store, &self.emb, trunc, false)?;
            parts.push(multihead_target_attention(tape, store, att, keys, q)?);
        }
        {
            let keys = encode_keys(tape, store, &self.emb, &bundle.short_term, false)?;
            parts.push(multihead_target_attention(tape, store, &self.short_att, keys, q)?);
        }
        if let Some(att) = &self.long_att {
            let keys = encode_keys(tape, store, &self.emb, &bundle.long_term_dedup, true)?;
            parts.push(multihead_target_attention(tape, store, att, keys, q)?);
        }
        if cfg.variant.uses_avg_pool() {
            let keys = encode_keys(tape, store, &self.emb, &bundle.long_term_dedup, false)?;
            let pooled = match keys {
                Some(k) => tape.mean_rows(k)?,
                None => tape.constant(DenseMatrix::zeros(1, BASE_SIDE_CHANNELS * cfg.emb_dim)),
            };
            parts.push(pooled);
        }
        if let Some(ip) = &self.integrate {
            parts.push(integrate_forward(tape, store, &self.emb, ip, &bundle, query_item)?);
        }
        parts.push(q);
        let user_table = tape.param(store, self.emb.user);
        parts.push(tape.rows(user_table, &[sample.user_vid as usize])?);

        let mut x = tape.concat_cols(&parts)?;
        for (i, &(w, b)) in self.mlp.iter().enumerate() {
            let wn = tape.param(store, w);
            let bn = tape.param(store, b);
            let lin = tape.matmul(x, wn)?;
            x = tape.add(lin, bn)?;
            if i + 1 < self.mlp.len() {
                x = tape.silu(x);
            }
            if !tape.value(x).is_finite() {
                return Err(FinError::Model(format!(
                    "non-finite activation in mlp layer {i}"
                )));
            }
        }
        Ok(x)
    }

    /// Click probability for one sample.
    pub fn predict(&self, seq: &LifelongSequence, sample: &Sample) -> Result<f64> {
        let mut tape = Tape::new();
        let logits = self.forward_logits(&mut tape, seq, sample)?;
        Ok(prob_of_logits(tape.value(logits)))
    }

    /// Forward + loss node for one sample.
    pub fn forward_loss(
        &self,
        tape: &mut Tape,
        seq: &LifelongSequence,
        sample: &Sample,
    ) -> Result<NodeId> {
        let logits = self.forward_logits(tape, seq, sample)?;
        tape.nll_two_way(logits, sample.label as usize)
    }
}

/// Click probability (second softmax component) of the 1x2 logits.
pub fn prob_of_logits(logits: &DenseMatrix) -> f64 {
    let w = crate::numeric::softmax_masked(&logits.data, &[true, true]).expect("2-way softmax");
    w[1]
}

/// Cross-entropy of a click probability against a binary label, with
/// probabilities clamped at 1e-12.
pub fn loss(prob: f64, label: u8) -> f64 {
    let p = if label == 1 { prob } else { 1.0 - prob };
    -(p.max(1e-12)).ln()
}

/// Training options. `epochs` counts full passes from step zero; a resumed
/// model continues from its stored step toward the same total.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Stop after this optimizer step (absolute, possibly mid-epoch); 0
    /// means no limit. Used to checkpoint and resume at arbitrary points.
    pub max_steps: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 2,
            batch_size: 128,
            seed: 7,
            adam: AdamConfig::default(),
            max_steps: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    pub final_auc: Option<f64>,
    pub wall_secs: f64,
    pub seed: u64,
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = StdRng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ epoch as u64);
    order.shuffle(&mut rng);
    order
}

/// Mini-batch training with per-epoch seeded shuffles. Deterministic given
/// the seed; resumes from the model's stored optimizer step.
pub fn train(
    model: &mut FinModel,
    sequences: &[LifelongSequence],
    samples: &[Sample],
    opts: &TrainOptions,
) -> Result<TrainReport> {
    if samples.is_empty() {
        return Err(FinError::Training("empty training set".into()));
    }
    let started = std::time::Instant::now();
    let n = samples.len();
    let bs = opts.batch_size.max(1);
    let steps_per_epoch = n.div_ceil(bs);
    let mut total_steps = (opts.epochs * steps_per_epoch) as u64;
    if opts.max_steps > 0 {
        total_steps = total_steps.min(opts.max_steps);
    }
    let mut step_losses = Vec::new();
    let mut epoch_sums: Vec<(f64, usize)> = vec![(0.0, 0); opts.epochs];

    while model.store.step < total_steps {
        let step = model.store.step as usize;
        let epoch = step / steps_per_epoch;
        let pos = step % steps_per_epoch;
        let order = epoch_order(n, opts.seed, epoch);
        let batch = &order[pos * bs..((pos + 1) * bs).min(n)];

        let mut tape = Tape::new();
        let mut losses = Vec::with_capacity(batch.len());
        for &i in batch {
            let s = &samples[i];
            losses.push(model.forward_loss(&mut tape, &sequences[s.seq_idx], s)?);
        }
        let total = tape.add_n(&losses)?;
        let mean = tape.scale(total, 1.0 / batch.len() as f64);
        let loss_val = tape.value(mean).data[0];
        if !loss_val.is_finite() {
            return Err(FinError::Training(format!(
                "non-finite loss at step {step}"
            )));
        }
        tape.backward_into(mean, &mut model.store)?;
        model.store.adam_step(&opts.adam)?;
        step_losses.push(loss_val);
        epoch_sums[epoch].0 += loss_val;
        epoch_sums[epoch].1 += 1;
    }

    let epoch_losses = epoch_sums
        .into_iter()
        .filter(|&(_, c)| c > 0)
        .map(|(s, c)| s / c as f64)
        .collect();
    Ok(TrainReport {
        step_losses,
        epoch_losses,
        final_auc: None,
        wall_secs: started.elapsed().as_secs_f64(),
        seed: opts.seed,
    })
}

/// Score every sample; returns (scores, labels).
pub fn score_all(
    model: &FinModel,
    sequences: &[LifelongSequence],
    samples: &[Sample],
) -> Result<(Vec<f64>, Vec<u8>)> {
    let mut scores = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        scores.push(model.predict(&sequences[s.seq_idx], s)?);
        labels.push(s.label);
    }
    Ok((scores, labels))
}

/// Rank-based AUC (Mann-Whitney) with average ranks for tied scores.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(FinError::Dimension("scores/labels length mismatch".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(FinError::UndefinedMetric(
            "AUC needs at least one positive and one negative".into(),
        ));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        // average 1-based rank over the tie group [i, j)
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &k in &idx[i..j] {
            if labels[k] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Per-variant ablation result.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub auc: f64,
    pub param_count: usize,
    pub train_secs: f64,
}

/// Train and evaluate one variant with a shared data/seed/budget.
pub fn run_variant(
    mut cfg: FinConfig,
    variant: Variant,
    vocabs: &VocabSizes,
    sequences: &[LifelongSequence],
    train_samples: &[Sample],
    test_samples: &[Sample],
    opts: &TrainOptions,
) -> Result<AblationRow> {
    cfg.variant = variant;
    cfg.init_seed = opts.seed;
    let mut model = FinModel::new(cfg, vocabs)?;
    let report = train(&mut model, sequences, train_samples, opts)?;
    let (scores, labels) = score_all(&model, sequences, test_samples)?;
    Ok(AblationRow {
        variant,
        seed: opts.seed,
        auc: auc(&scores, &labels)?,
        param_count: model.param_count(),
        train_secs: report.wall_secs,
    })
}
