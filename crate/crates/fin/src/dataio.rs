//! Dataset ingestion, vocabulary and binning preparation, synthetic
//! spatial-temporal data generation, and artifact persistence.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{FinError, Result};
use crate::fragment::VocabSizes;
use crate::model::Sample;
use crate::stkeys::{
    bin_of, equal_frequency_boundaries, geohash_encode, GeoPoint, MealTimeBinner, MinuteOfDay,
};
use crate::store::{BehaviorEvent, LifelongSequence, QueryContext, SECONDS_PER_DAY};

/// String-to-contiguous-id map with id 0 reserved for out-of-vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocabMap {
    map: HashMap<String, u32>,
    keys: Vec<String>,
    frozen: bool,
}

impl Default for VocabMap {
    fn default() -> Self {
        Self::new()
    }
}

impl VocabMap {
    pub fn new() -> Self {
        VocabMap {
            map: HashMap::new(),
            keys: vec!["<oov>".to_string()],
            frozen: false,
        }
    }

    /// Id of `key`, inserting it if the map is not frozen.
    pub fn intern(&mut self, key: &str) -> u32 {
        if let Some(&id) = self.map.get(key) {
            return id;
        }
        if self.frozen {
            return 0;
        }
        let id = self.keys.len() as u32;
        self.keys.push(key.to_string());
        self.map.insert(key.to_string(), id);
        id
    }

    pub fn get(&self, key: &str) -> Option<u32> {
        self.map.get(key).copied()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Total ids including the reserved OOV row.
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.len() <= 1
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (id, key) in self.keys.iter().enumerate().skip(1) {
            writeln!(w, "{key}\t{id}")?;
        }
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let mut vocab = VocabMap::new();
        for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (key, id) = line
                .split_once('\t')
                .ok_or_else(|| FinError::Format(format!("vocab line {}: missing tab", i + 1)))?;
            let id: u32 = id
                .parse()
                .map_err(|_| FinError::Format(format!("vocab line {}: bad id", i + 1)))?;
            if id as usize != vocab.keys.len() {
                return Err(FinError::Format(format!(
                    "vocab line {}: non-contiguous id {id}",
                    i + 1
                )));
            }
            vocab.keys.push(key.to_string());
            vocab.map.insert(key.to_string(), id);
        }
        vocab.freeze();
        Ok(vocab)
    }
}

/// Spatial side of a raw record: coordinates, or a price standing in for
/// them on review-style data without geography.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Spatial {
    Geo { lat: f64, lon: f64 },
    Price(f64),
}

#[derive(Debug, Clone)]
pub struct RawBehavior {
    pub item: String,
    pub category: String,
    pub spatial: Spatial,
    pub timestamp: i64,
}

#[derive(Debug, Clone)]
pub struct RawSample {
    pub user: String,
    pub item: String,
    pub category: String,
    pub spatial: Spatial,
    pub timestamp: i64,
    pub label: u8,
}

#[derive(Debug, Clone, Default)]
pub struct RawDataset {
    pub behaviors: Vec<(String, RawBehavior)>,
    pub samples: Vec<RawSample>,
}

/// Synthetic spatial-temporal dataset spec. Users have home/work cells and
/// a preferred food category per (cell, coarse meal period); clicks follow
/// those preferences with repeat-restaurant concentration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub users: usize,
    pub items: usize,
    pub categories: usize,
    pub geo_cells: usize,
    pub behaviors_per_user: usize,
    pub samples_per_user: usize,
    /// Probability a click follows the (cell, period) preferred category.
    pub pref_strength: f64,
    /// Probability a click repeats an item already clicked in this context.
    pub repeat_concentration: f64,
    /// Of the repeat draws, the share taken from the user's all-context
    /// history rather than the current (cell, period) context. Cross-context
    /// favorites are only observable in the long-term channel.
    pub global_repeat: f64,
    /// When false, a user's preferred category ignores the meal period
    /// (same category all day), removing the temporal signal.
    pub period_preference: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            users: 5000,
            items: 2000,
            categories: 40,
            geo_cells: 60,
            behaviors_per_user: 60,
            samples_per_user: 4,
            pref_strength: 0.6,
            repeat_concentration: 0.6,
            global_repeat: 0.35,
            period_preference: true,
            seed: 1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.users < 1
            || self.items < 1
            || self.categories < 1
            || self.geo_cells < 2
            || self.behaviors_per_user < 1
            || self.samples_per_user < 1
            || self.repeat_concentration <= 0.0
            || !(0.0..=1.0).contains(&self.pref_strength)
            || !(0.0..=1.0).contains(&self.global_repeat)
        {
            return Err(FinError::Config("invalid synthetic spec".into()));
        }
        Ok(())
    }
}

/// Coarse meal periods used only by the generator's preference model.
pub const COARSE_PERIODS: usize = 5;
const PERIOD_BOUNDS: [(u16, u16); COARSE_PERIODS] = [
    (0, 360),     // late night
    (360, 660),   // breakfast
    (660, 840),   // lunch
    (840, 1050),  // afternoon tea
    (1050, 1440), // dinner
];

pub fn coarse_period(minute: u16) -> usize {
    PERIOD_BOUNDS
        .iter()
        .position(|&(lo, hi)| minute >= lo && minute < hi)
        .unwrap_or(0)
}

fn cell_point(i: usize) -> GeoPoint {
    let lat = -60.0 + (i / 40) as f64 * 1.5;
    let lon = -120.0 + (i % 40) as f64 * 1.5;
    GeoPoint::new(lat, lon).expect("generated cell in range")
}

/// Synthetic dataset plus the generating model's own score per sample
/// (the probability it assigned to the sampled item), an upper bound on
/// the learnable signal.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub raw: RawDataset,
    pub oracle_scores: Vec<f64>,
}

struct UserState {
    home: usize,
    work: usize,
    // preferred category per (slot in {home=0, work=1}, coarse period)
    pref: [[usize; COARSE_PERIODS]; 2],
    // clicked item multiset per (slot, period)
    history: HashMap<(usize, usize), Vec<usize>>,
    // clicked item multiset across all contexts, in click order
    all: Vec<usize>,
    clicked: HashSet<usize>,
}

fn draw_context<R: Rng>(rng: &mut R, day_lo: i64, day_hi: i64) -> (i64, u16, usize, usize) {
    let day = rng.gen_range(day_lo..day_hi);
    let period = rng.gen_range(0..COARSE_PERIODS);
    let (lo, hi) = PERIOD_BOUNDS[period];
    let minute = rng.gen_range(lo..hi);
    // workplace during breakfast/lunch/tea, home otherwise, with noise
    let work_biased = (1..=3).contains(&period);
    let at_work = rng.gen_bool(if work_biased { 0.8 } else { 0.2 });
    let slot = usize::from(at_work);
    let ts = day * SECONDS_PER_DAY + minute as i64 * 60;
    (ts, minute, period, slot)
}

/// Probability the generator assigns to `item` in the given user context.
fn item_prob(spec: &SyntheticSpec, user: &UserState, slot: usize, period: usize, item: usize) -> f64 {
    let items_per_cat = (spec.items as f64 / spec.categories as f64).max(1.0);
    let g = if user.all.is_empty() {
        0.0
    } else {
        spec.global_repeat
    };
    let p_global = spec.repeat_concentration * g;
    let all_frac = if user.all.is_empty() {
        0.0
    } else {
        let count = user.all.iter().filter(|&&x| x == item).count() as f64;
        count / user.all.len() as f64
    };
    let hist = user.history.get(&(slot, period));
    let (p_ctx, hist_frac) = match hist {
        Some(h) if !h.is_empty() => {
            let count = h.iter().filter(|&&x| x == item).count() as f64;
            (spec.repeat_concentration * (1.0 - g), count / h.len() as f64)
        }
        _ => (0.0, 0.0),
    };
    let fresh = 1.0 - p_global - p_ctx;
    let pref_cat = user.pref[slot][period];
    let p_pref = if item % spec.categories == pref_cat {
        spec.pref_strength / items_per_cat
    } else {
        0.0
    };
    let p_uniform = (1.0 - spec.pref_strength) / spec.items as f64;
    p_global * all_frac + p_ctx * hist_frac + fresh * (p_pref + p_uniform)
}

fn draw_item<R: Rng>(
    spec: &SyntheticSpec,
    rng: &mut R,
    user: &UserState,
    slot: usize,
    period: usize,
) -> usize {
    if rng.gen_bool(spec.repeat_concentration) {
        if !user.all.is_empty() && rng.gen_bool(spec.global_repeat) {
            return user.all[rng.gen_range(0..user.all.len())];
        }
        if let Some(h) = user.history.get(&(slot, period)) {
            if !h.is_empty() {
                return h[rng.gen_range(0..h.len())];
            }
        }
    }
    if rng.gen_bool(spec.pref_strength) {
        let cat = user.pref[slot][period];
        // items of category c are {c, c+K, c+2K, ...}
        let n = (spec.items - cat).div_ceil(spec.categories);
        return cat + rng.gen_range(0..n) * spec.categories;
    }
    rng.gen_range(0..spec.items)
}

/// Generate a fully seeded synthetic dataset. Behaviors span days 0..360;
/// query samples span days 360..400, one uniform negative per positive
/// sharing the positive's context and timestamp.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = StdRng::seed_from_u64(spec.seed);
    let mut behaviors = Vec::new();
    let mut samples = Vec::new();
    let mut oracle_scores = Vec::new();

    for u in 0..spec.users {
        let home = rng.gen_range(0..spec.geo_cells);
        let mut work = rng.gen_range(0..spec.geo_cells);
        if work == home {
            work = (work + 1) % spec.geo_cells;
        }
        let mut pref = [[0usize; COARSE_PERIODS]; 2];
        for row in pref.iter_mut() {
            let all_day = rng.gen_range(0..spec.categories);
            for p in row.iter_mut() {
                *p = if spec.period_preference {
                    rng.gen_range(0..spec.categories)
                } else {
                    all_day
                };
            }
        }
        let mut user = UserState {
            home,
            work,
            pref,
            history: HashMap::new(),
            all: Vec::new(),
            clicked: HashSet::new(),
        };
        let uname = format!("u{u}");

        let mut events = Vec::with_capacity(spec.behaviors_per_user);
        for _ in 0..spec.behaviors_per_user {
            let (ts, _minute, period, slot) = draw_context(&mut rng, 1, 360);
            let item = draw_item(spec, &mut rng, &user, slot, period);
            user.history.entry((slot, period)).or_default().push(item);
            user.all.push(item);
            user.clicked.insert(item);
            let cell = if slot == 1 { user.work } else { user.home };
            let point = cell_point(cell);
            events.push((ts, item, point));
        }
        events.sort_by_key(|e| e.0);
        for (ts, item, point) in events {
            behaviors.push((
                uname.clone(),
                RawBehavior {
                    item: format!("i{item}"),
                    category: format!("c{}", item % spec.categories),
                    spatial: Spatial::Geo {
                        lat: point.lat,
                        lon: point.lon,
                    },
                    timestamp: ts,
                },
            ));
        }

        for _ in 0..spec.samples_per_user {
            let (ts, _minute, period, slot) = draw_context(&mut rng, 360, 400);
            let pos = draw_item(spec, &mut rng, &user, slot, period);
            let mut neg = rng.gen_range(0..spec.items);
            let mut guard = 0;
            while (user.clicked.contains(&neg) || neg == pos) && guard < 10_000 {
                neg = rng.gen_range(0..spec.items);
                guard += 1;
            }
            let cell = if slot == 1 { user.work } else { user.home };
            let point = cell_point(cell);
            for (item, label) in [(pos, 1u8), (neg, 0u8)] {
                samples.push(RawSample {
                    user: uname.clone(),
                    item: format!("i{item}"),
                    category: format!("c{}", item % spec.categories),
                    spatial: Spatial::Geo {
                        lat: point.lat,
                        lon: point.lon,
                    },
                    timestamp: ts,
                    label,
                });
                oracle_scores.push(item_prob(spec, &user, slot, period, item));
            }
        }
    }
    Ok(SyntheticData {
        raw: RawDataset { behaviors, samples },
        oracle_scores,
    })
}

/// Review-file schema for [`ingest_reviews`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReviewSchema {
    /// `user \t item \t category \t price \t timestamp` — price buckets
    /// stand in for the spatial key.
    PriceBased,
    /// `user \t item \t category \t lat \t lon \t timestamp`.
    GeoBased,
}

/// Ingest a review TSV: every review becomes a positive sample at its
/// timestamp with the user's earlier reviews as behaviors, plus one
/// uniformly sampled negative item outside the user's history.
pub fn ingest_reviews<P: AsRef<Path>>(
    path: P,
    schema: ReviewSchema,
    seed: u64,
    skip_malformed: bool,
) -> Result<RawDataset> {
    let f = std::fs::File::open(path)?;
    let mut rows: Vec<(String, RawBehavior)> = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_review_line(&line, i + 1, schema) {
            Ok(row) => rows.push(row),
            Err(e) if skip_malformed => {
                eprintln!("skipping: {e}");
            }
            Err(e) => return Err(e),
        }
    }
    let mut per_user: BTreeMap<String, Vec<RawBehavior>> = BTreeMap::new();
    for (user, b) in rows {
        per_user.entry(user).or_default().push(b);
    }
    let all_items: Vec<(String, String, Spatial)> = {
        let mut seen = HashSet::new();
        let mut v = Vec::new();
        for bs in per_user.values() {
            for b in bs {
                if seen.insert(b.item.clone()) {
                    v.push((b.item.clone(), b.category.clone(), b.spatial));
                }
            }
        }
        v
    };
    let mut rng = StdRng::seed_from_u64(seed);
    let mut behaviors = Vec::new();
    let mut samples = Vec::new();
    for (user, mut bs) in per_user {
        bs.sort_by_key(|b| b.timestamp);
        let user_items: HashSet<&str> = bs.iter().map(|b| b.item.as_str()).collect();
        for b in &bs {
            samples.push(RawSample {
                user: user.clone(),
                item: b.item.clone(),
                category: b.category.clone(),
                spatial: b.spatial,
                timestamp: b.timestamp,
                label: 1,
            });
            // negative drawn outside the user's history, same query time
            if all_items.len() > user_items.len() {
                let neg = loop {
                    let cand = &all_items[rng.gen_range(0..all_items.len())];
                    if !user_items.contains(cand.0.as_str()) {
                        break cand;
                    }
                };
                samples.push(RawSample {
                    user: user.clone(),
                    item: neg.0.clone(),
                    category: neg.1.clone(),
                    spatial: neg.2,
                    timestamp: b.timestamp,
                    label: 0,
                });
            }
        }
        for b in bs {
            behaviors.push((user.clone(), b));
        }
    }
    Ok(RawDataset { behaviors, samples })
}

fn parse_review_line(line: &str, line_no: usize, schema: ReviewSchema) -> Result<(String, RawBehavior)> {
    let fields: Vec<&str> = line.split('\t').collect();
    let bad = |what: &str| FinError::Data(format!("line {line_no}: bad {what}"));
    let expect = match schema {
        ReviewSchema::PriceBased => 5,
        ReviewSchema::GeoBased => 6,
    };
    if fields.len() != expect {
        return Err(FinError::Data(format!(
            "line {line_no}: expected {expect} fields, got {}",
            fields.len()
        )));
    }
    let spatial = match schema {
        ReviewSchema::PriceBased => Spatial::Price(fields[3].parse().map_err(|_| bad("price"))?),
        ReviewSchema::GeoBased => Spatial::Geo {
            lat: fields[3].parse().map_err(|_| bad("lat"))?,
            lon: fields[4].parse().map_err(|_| bad("lon"))?,
        },
    };
    let ts_field = expect - 1;
    let timestamp: i64 = fields[ts_field].parse().map_err(|_| bad("timestamp"))?;
    Ok((
        fields[0].to_string(),
        RawBehavior {
            item: fields[1].to_string(),
            category: fields[2].to_string(),
            spatial,
            timestamp,
        },
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrepareConfig {
    pub geohash_precision: usize,
    pub meal_periods: usize,
    pub price_bins: usize,
    pub train_frac: f64,
    pub seed: u64,
    pub short_term_window_days: u32,
    pub long_term_window_days: u32,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        PrepareConfig {
            geohash_precision: 6,
            meal_periods: crate::stkeys::DEFAULT_MEAL_PERIODS,
            price_bins: 48,
            train_frac: 0.8,
            seed: 1,
            short_term_window_days: 30,
            long_term_window_days: 365,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct OovReport {
    pub test_oov_items: usize,
    pub test_oov_categories: usize,
    pub test_oov_geokeys: usize,
    pub test_oov_users: usize,
}

pub struct PreparedDataset {
    pub sequences: Vec<LifelongSequence>,
    pub seq_users: Vec<String>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub train_raw_indices: Vec<usize>,
    pub test_raw_indices: Vec<usize>,
    pub user_vocab: VocabMap,
    pub item_vocab: VocabMap,
    pub category_vocab: VocabMap,
    pub geokey_vocab: VocabMap,
    pub binner: MealTimeBinner,
    pub price_boundaries: Option<Vec<f64>>,
    pub oov: OovReport,
    pub config: PrepareConfig,
}

impl PreparedDataset {
    pub fn vocab_sizes(&self) -> VocabSizes {
        VocabSizes {
            items: self.item_vocab.len(),
            categories: self.category_vocab.len(),
            geohashes: self.geokey_vocab.len(),
            periods: self.binner.period_count() + 1,
            users: self.user_vocab.len(),
        }
    }
}

fn minute_of_ts(ts: i64) -> MinuteOfDay {
    MinuteOfDay((ts.rem_euclid(SECONDS_PER_DAY) / 60) as u16)
}

fn spatial_key(
    spatial: &Spatial,
    precision: usize,
    price_boundaries: &Option<Vec<f64>>,
) -> Result<String> {
    match spatial {
        Spatial::Geo { lat, lon } => {
            let p = GeoPoint::new(*lat, *lon).map_err(|e| FinError::Data(e.to_string()))?;
            Ok(geohash_encode(p, precision)?.code)
        }
        Spatial::Price(v) => {
            let bounds = price_boundaries
                .as_ref()
                .ok_or_else(|| FinError::Data("price record but no fitted price bins".into()))?;
            Ok(format!("p{}", bin_of(bounds, *v)))
        }
    }
}

/// Split samples, fit binner/price-bins/vocabularies on the training side
/// only, and map everything to id space.
pub fn prepare(raw: &RawDataset, cfg: &PrepareConfig) -> Result<PreparedDataset> {
    if raw.samples.is_empty() {
        return Err(FinError::Data("no samples to prepare".into()));
    }
    if !(0.0..1.0).contains(&cfg.train_frac) {
        return Err(FinError::Config("train_frac must be in (0, 1)".into()));
    }
    // seeded 80/20 split by sample
    let mut order: Vec<usize> = (0..raw.samples.len()).collect();
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    order.shuffle(&mut rng);
    let n_train = ((raw.samples.len() as f64) * cfg.train_frac).round() as usize;
    let mut train_raw_indices = order[..n_train].to_vec();
    let mut test_raw_indices = order[n_train..].to_vec();
    train_raw_indices.sort_unstable();
    test_raw_indices.sort_unstable();

    // fit temporal and price binning on behaviors + train samples
    let mut minutes: Vec<MinuteOfDay> = raw
        .behaviors
        .iter()
        .map(|(_, b)| minute_of_ts(b.timestamp))
        .collect();
    minutes.extend(train_raw_indices.iter().map(|&i| minute_of_ts(raw.samples[i].timestamp)));
    let binner = MealTimeBinner::fit(&minutes, cfg.meal_periods)?;

    let mut prices: Vec<f64> = raw
        .behaviors
        .iter()
        .filter_map(|(_, b)| match b.spatial {
            Spatial::Price(v) => Some(v),
            _ => None,
        })
        .collect();
    prices.extend(train_raw_indices.iter().filter_map(|&i| match raw.samples[i].spatial {
        Spatial::Price(v) => Some(v),
        _ => None,
    }));
    let price_boundaries = if prices.is_empty() {
        None
    } else {
        Some(equal_frequency_boundaries(&prices, cfg.price_bins)?)
    };

    // vocabularies frozen on behaviors + training samples
    let mut user_vocab = VocabMap::new();
    let mut item_vocab = VocabMap::new();
    let mut category_vocab = VocabMap::new();
    let mut geokey_vocab = VocabMap::new();
    for (user, b) in &raw.behaviors {
        user_vocab.intern(user);
        item_vocab.intern(&b.item);
        category_vocab.intern(&b.category);
        geokey_vocab.intern(&spatial_key(&b.spatial, cfg.geohash_precision, &price_boundaries)?);
    }
    for &i in &train_raw_indices {
        let s = &raw.samples[i];
        user_vocab.intern(&s.user);
        item_vocab.intern(&s.item);
        category_vocab.intern(&s.category);
        geokey_vocab.intern(&spatial_key(&s.spatial, cfg.geohash_precision, &price_boundaries)?);
    }
    user_vocab.freeze();
    item_vocab.freeze();
    category_vocab.freeze();
    geokey_vocab.freeze();

    // sequences per user
    let mut per_user: BTreeMap<String, Vec<BehaviorEvent>> = BTreeMap::new();
    for (user, b) in &raw.behaviors {
        let geokey = spatial_key(&b.spatial, cfg.geohash_precision, &price_boundaries)?;
        let mut ev = BehaviorEvent::new(
            item_vocab.get(&b.item).unwrap_or(0),
            category_vocab.get(&b.category).unwrap_or(0),
            &geokey,
            binner.assign_period(minute_of_ts(b.timestamp)) as u16,
            b.timestamp,
        );
        ev.geohash_id = geokey_vocab.get(&geokey).unwrap_or(0);
        per_user.entry(user.clone()).or_default().push(ev);
    }
    let mut seq_users = Vec::new();
    let mut sequences = Vec::new();
    let mut seq_index: HashMap<String, usize> = HashMap::new();
    for (user, events) in per_user {
        seq_index.insert(user.clone(), sequences.len());
        sequences.push(LifelongSequence::new(sequences.len() as u32, events));
        seq_users.push(user);
    }

    let mut oov = OovReport::default();
    let mut map_sample = |i: usize, is_test: bool| -> Result<Sample> {
        let s = &raw.samples[i];
        let geokey = spatial_key(&s.spatial, cfg.geohash_precision, &price_boundaries)?;
        let item_vid = item_vocab.get(&s.item).unwrap_or(0);
        let cat_vid = category_vocab.get(&s.category).unwrap_or(0);
        let geo_vid = geokey_vocab.get(&geokey).unwrap_or(0);
        let user_vid = user_vocab.get(&s.user).unwrap_or(0);
        if is_test {
            oov.test_oov_items += usize::from(item_vid == 0);
            oov.test_oov_categories += usize::from(cat_vid == 0);
            oov.test_oov_geokeys += usize::from(geo_vid == 0);
            oov.test_oov_users += usize::from(user_vid == 0);
        }
        let mut query_item = BehaviorEvent::new(
            item_vid,
            cat_vid,
            &geokey,
            binner.assign_period(minute_of_ts(s.timestamp)) as u16,
            s.timestamp,
        );
        query_item.geohash_id = geo_vid;
        let seq_idx = seq_index.get(&s.user).copied().unwrap_or_else(|| {
            // user with no behaviors: an empty sequence at a shared slot
            usize::MAX
        });
        Ok(Sample {
            user_vid,
            seq_idx,
            query: QueryContext {
                query_item,
                request_time: s.timestamp,
                short_term_window_days: cfg.short_term_window_days,
                long_term_window_days: cfg.long_term_window_days,
            },
            label: s.label,
        })
    };
    let mut train = Vec::with_capacity(train_raw_indices.len());
    for &i in &train_raw_indices {
        train.push(map_sample(i, false)?);
    }
    let mut test = Vec::with_capacity(test_raw_indices.len());
    for &i in &test_raw_indices {
        test.push(map_sample(i, true)?);
    }
    // patch users without behaviors to one shared empty sequence
    let empty_idx = sequences.len();
    let mut used_empty = false;
    for s in train.iter_mut().chain(test.iter_mut()) {
        if s.seq_idx == usize::MAX {
            s.seq_idx = empty_idx;
            used_empty = true;
        }
    }
    if used_empty {
        sequences.push(LifelongSequence::default());
        seq_users.push(String::new());
    }

    Ok(PreparedDataset {
        sequences,
        seq_users,
        train,
        test,
        train_raw_indices,
        test_raw_indices,
        user_vocab,
        item_vocab,
        category_vocab,
        geokey_vocab,
        binner,
        price_boundaries,
        oov,
        config: cfg.clone(),
    })
}

// ---------------------------------------------------------------------------
// raw-file persistence (gen-data output / prepare input)

pub fn save_raw<P: AsRef<Path>>(raw: &RawDataset, dir: P) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join("behaviors.tsv"))?);
    for (user, b) in &raw.behaviors {
        writeln!(w, "{}", raw_behavior_line(user, b))?;
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join("samples.tsv"))?);
    for s in &raw.samples {
        let spatial = spatial_fields(&s.spatial);
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}",
            s.user, s.item, s.category, spatial, s.timestamp, s.label
        )?;
    }
    Ok(())
}

fn raw_behavior_line(user: &str, b: &RawBehavior) -> String {
    format!(
        "{}\t{}\t{}\t{}\t{}",
        user,
        b.item,
        b.category,
        spatial_fields(&b.spatial),
        b.timestamp
    )
}

fn spatial_fields(s: &Spatial) -> String {
    match s {
        Spatial::Geo { lat, lon } => format!("{lat}\t{lon}"),
        Spatial::Price(v) => format!("price\t{v}"),
    }
}

fn parse_spatial(a: &str, b: &str, line_no: usize) -> Result<Spatial> {
    if a == "price" {
        Ok(Spatial::Price(b.parse().map_err(|_| {
            FinError::Data(format!("line {line_no}: bad price"))
        })?))
    } else {
        Ok(Spatial::Geo {
            lat: a
                .parse()
                .map_err(|_| FinError::Data(format!("line {line_no}: bad lat")))?,
            lon: b
                .parse()
                .map_err(|_| FinError::Data(format!("line {line_no}: bad lon")))?,
        })
    }
}

pub fn load_raw<P: AsRef<Path>>(dir: P) -> Result<RawDataset> {
    let dir = dir.as_ref();
    let mut behaviors = Vec::new();
    let f = std::fs::File::open(dir.join("behaviors.tsv"))?;
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(FinError::Data(format!(
                "behaviors.tsv line {}: expected 6 fields",
                i + 1
            )));
        }
        behaviors.push((
            fields[0].to_string(),
            RawBehavior {
                item: fields[1].to_string(),
                category: fields[2].to_string(),
                spatial: parse_spatial(fields[3], fields[4], i + 1)?,
                timestamp: fields[5]
                    .parse()
                    .map_err(|_| FinError::Data(format!("behaviors.tsv line {}: bad timestamp", i + 1)))?,
            },
        ));
    }
    let mut samples = Vec::new();
    let f = std::fs::File::open(dir.join("samples.tsv"))?;
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 7 {
            return Err(FinError::Data(format!(
                "samples.tsv line {}: expected 7 fields",
                i + 1
            )));
        }
        samples.push(RawSample {
            user: fields[0].to_string(),
            item: fields[1].to_string(),
            category: fields[2].to_string(),
            spatial: parse_spatial(fields[3], fields[4], i + 1)?,
            timestamp: fields[5]
                .parse()
                .map_err(|_| FinError::Data(format!("samples.tsv line {}: bad timestamp", i + 1)))?,
            label: match fields[6] {
                "0" => 0,
                "1" => 1,
                _ => {
                    return Err(FinError::Data(format!(
                        "samples.tsv line {}: bad label",
                        i + 1
                    )))
                }
            },
        });
    }
    Ok(RawDataset { behaviors, samples })
}

// ---------------------------------------------------------------------------
// prepared-artifact persistence

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: PrepareConfig,
    sequences: usize,
    train_samples: usize,
    test_samples: usize,
    oov: OovReport,
    has_price_bins: bool,
}

pub fn save_prepared<P: AsRef<Path>>(data: &PreparedDataset, dir: P) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    data.user_vocab.save(dir.join("vocab.user.tsv"))?;
    data.item_vocab.save(dir.join("vocab.item.tsv"))?;
    data.category_vocab.save(dir.join("vocab.category.tsv"))?;
    data.geokey_vocab.save(dir.join("vocab.geokey.tsv"))?;
    data.binner.save(dir.join("binner.txt"))?;
    if let Some(bounds) = &data.price_boundaries {
        let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join("price_bins.txt"))?);
        for b in bounds {
            writeln!(w, "{}", hex_f64(*b))?;
        }
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join("sequences.tsv"))?);
    for (seq, user) in data.sequences.iter().zip(&data.seq_users) {
        for e in &seq.events {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                user,
                seq.user_id,
                e.item_id,
                e.category_id,
                e.geohash,
                e.geohash_id,
                e.period_id,
                e.timestamp,
                e.click_count,
            )?;
        }
        if seq.events.is_empty() {
            writeln!(w, "{}\t{}\t-\t-\t-\t-\t-\t-\t-", user, seq.user_id)?;
        }
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join("samples.prepared.tsv"))?);
    for (split, samples, raws) in [
        ("train", &data.train, &data.train_raw_indices),
        ("test", &data.test, &data.test_raw_indices),
    ] {
        for (s, &raw_i) in samples.iter().zip(raws.iter()) {
            let q = &s.query.query_item;
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                split,
                raw_i,
                s.user_vid,
                s.seq_idx,
                q.item_id,
                q.category_id,
                q.geohash,
                q.geohash_id,
                q.period_id,
                s.query.request_time,
                s.query.short_term_window_days,
                s.query.long_term_window_days,
                s.label,
            )?;
        }
    }
    let manifest = Manifest {
        config: data.config.clone(),
        sequences: data.sequences.len(),
        train_samples: data.train.len(),
        test_samples: data.test.len(),
        oov: data.oov.clone(),
        has_price_bins: data.price_boundaries.is_some(),
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).map_err(|e| FinError::Format(e.to_string()))?,
    )?;
    Ok(())
}

fn hex_f64(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn parse_hex_f64(s: &str) -> Result<f64> {
    u64::from_str_radix(s, 16)
        .map(f64::from_bits)
        .map_err(|_| FinError::Format(format!("bad hex float '{s}'")))
}

pub fn load_prepared<P: AsRef<Path>>(dir: P) -> Result<PreparedDataset> {
    let dir = dir.as_ref();
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)
        .map_err(|e| FinError::Format(format!("manifest.json: {e}")))?;
    let user_vocab = VocabMap::load(dir.join("vocab.user.tsv"))?;
    let item_vocab = VocabMap::load(dir.join("vocab.item.tsv"))?;
    let category_vocab = VocabMap::load(dir.join("vocab.category.tsv"))?;
    let geokey_vocab = VocabMap::load(dir.join("vocab.geokey.tsv"))?;
    let binner = MealTimeBinner::load(dir.join("binner.txt"))?;
    let price_boundaries = if manifest.has_price_bins {
        let text = std::fs::read_to_string(dir.join("price_bins.txt"))?;
        Some(
            text.lines()
                .filter(|l| !l.is_empty())
                .map(parse_hex_f64)
                .collect::<Result<Vec<f64>>>()?,
        )
    } else {
        None
    };

    let mut seq_events: Vec<(String, u32, Vec<BehaviorEvent>)> = Vec::new();
    let f = std::fs::File::open(dir.join("sequences.tsv"))?;
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 9 {
            return Err(FinError::Data(format!("sequences.tsv line {}: expected 9 fields", i + 1)));
        }
        let user = fields[0].to_string();
        let uid: u32 = fields[1]
            .parse()
            .map_err(|_| FinError::Data(format!("sequences.tsv line {}: bad user id", i + 1)))?;
        if seq_events.last().map(|(_, id, _)| *id) != Some(uid) {
            seq_events.push((user, uid, Vec::new()));
        }
        if fields[2] == "-" {
            continue;
        }
        let bad = |what: &str| FinError::Data(format!("sequences.tsv line {}: bad {what}", i + 1));
        let mut ev = BehaviorEvent::new(
            fields[2].parse().map_err(|_| bad("item"))?,
            fields[3].parse().map_err(|_| bad("category"))?,
            fields[4],
            fields[6].parse().map_err(|_| bad("period"))?,
            fields[7].parse().map_err(|_| bad("timestamp"))?,
        );
        ev.geohash_id = fields[5].parse().map_err(|_| bad("geohash id"))?;
        ev.click_count = fields[8].parse().map_err(|_| bad("click count"))?;
        seq_events.last_mut().unwrap().2.push(ev);
    }
    let mut sequences = Vec::with_capacity(seq_events.len());
    let mut seq_users = Vec::with_capacity(seq_events.len());
    for (user, uid, events) in seq_events {
        sequences.push(LifelongSequence {
            user_id: uid,
            events,
        });
        seq_users.push(user);
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut train_raw_indices = Vec::new();
    let mut test_raw_indices = Vec::new();
    let f = std::fs::File::open(dir.join("samples.prepared.tsv"))?;
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 13 {
            return Err(FinError::Data(format!(
                "samples.prepared.tsv line {}: expected 13 fields",
                i + 1
            )));
        }
        let bad = |what: &str| FinError::Data(format!("samples.prepared.tsv line {}: bad {what}", i + 1));
        let mut query_item = BehaviorEvent::new(
            fields[4].parse().map_err(|_| bad("item"))?,
            fields[5].parse().map_err(|_| bad("category"))?,
            fields[6],
            fields[8].parse().map_err(|_| bad("period"))?,
            fields[9].parse().map_err(|_| bad("request time"))?,
        );
        query_item.geohash_id = fields[7].parse().map_err(|_| bad("geohash id"))?;
        let sample = Sample {
            user_vid: fields[2].parse().map_err(|_| bad("user vid"))?,
            seq_idx: fields[3].parse().map_err(|_| bad("seq idx"))?,
            query: QueryContext {
                query_item,
                request_time: fields[9].parse().map_err(|_| bad("request time"))?,
                short_term_window_days: fields[10].parse().map_err(|_| bad("short window"))?,
                long_term_window_days: fields[11].parse().map_err(|_| bad("long window"))?,
            },
            label: match fields[12] {
                "0" => 0,
                "1" => 1,
                _ => return Err(bad("label")),
            },
        };
        let raw_i: usize = fields[1].parse().map_err(|_| bad("raw index"))?;
        match fields[0] {
            "train" => {
                train.push(sample);
                train_raw_indices.push(raw_i);
            }
            "test" => {
                test.push(sample);
                test_raw_indices.push(raw_i);
            }
            _ => return Err(bad("split")),
        }
    }

    Ok(PreparedDataset {
        sequences,
        seq_users,
        train,
        test,
        train_raw_indices,
        test_raw_indices,
        user_vocab,
        item_vocab,
        category_vocab,
        geokey_vocab,
        binner,
        price_boundaries,
        oov: manifest.oov,
        config: manifest.config,
    })
}
