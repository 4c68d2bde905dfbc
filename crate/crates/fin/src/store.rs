//! Lifelong behavior storage and hard-search extraction of the four
//! sub-sequences: Geohash-block, Meal-time, Short-term, and Long-term
//! de-duplicate.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use crate::error::{FinError, Result};
use crate::stkeys::{geohash_encode, GeoPoint, MealTimeBinner, MinuteOfDay};

pub const SECONDS_PER_DAY: i64 = 86_400;

/// One historical click with its spatial-temporal keys and side info.
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorEvent {
    pub item_id: u32,
    pub category_id: u32,
    pub geohash: String,
    pub geohash_id: u32,
    pub period_id: u16,
    pub timestamp: i64,
    pub click_count: u32,
    pub extra: BTreeMap<String, u32>,
}

impl BehaviorEvent {
    pub fn new(item_id: u32, category_id: u32, geohash: &str, period_id: u16, timestamp: i64) -> Self {
        BehaviorEvent {
            item_id,
            category_id,
            geohash: geohash.to_string(),
            geohash_id: 0,
            period_id,
            timestamp,
            click_count: 1,
            extra: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LifelongSequence {
    pub user_id: u32,
    /// Sorted by timestamp ascending.
    pub events: Vec<BehaviorEvent>,
}

impl LifelongSequence {
    pub fn new(user_id: u32, mut events: Vec<BehaviorEvent>) -> Self {
        events.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then(a.item_id.cmp(&b.item_id)));
        LifelongSequence { user_id, events }
    }
}

/// The candidate item plus request context used as retrieval query.
#[derive(Debug, Clone)]
pub struct QueryContext {
    pub query_item: BehaviorEvent,
    pub request_time: i64,
    pub short_term_window_days: u32,
    pub long_term_window_days: u32,
}

impl QueryContext {
    fn long_term_cutoff(&self) -> i64 {
        self.request_time - self.long_term_window_days as i64 * SECONDS_PER_DAY
    }

    fn short_term_cutoff(&self) -> i64 {
        self.request_time - self.short_term_window_days as i64 * SECONDS_PER_DAY
    }
}

/// Per-channel extraction caps.
#[derive(Debug, Clone)]
pub struct ExtractionCaps {
    pub geohash_block: usize,
    pub meal_time: usize,
    pub short_term: usize,
    pub long_term_dedup: usize,
}

impl Default for ExtractionCaps {
    fn default() -> Self {
        ExtractionCaps {
            geohash_block: 200,
            meal_time: 200,
            short_term: 20,
            long_term_dedup: 100,
        }
    }
}

/// The four extracted sub-sequences for one query, newest first.
#[derive(Debug, Clone, Default)]
pub struct SubSequenceBundle {
    pub geohash_block: Vec<BehaviorEvent>,
    pub meal_time: Vec<BehaviorEvent>,
    pub short_term: Vec<BehaviorEvent>,
    pub long_term_dedup: Vec<BehaviorEvent>,
}

fn window_filtered<'a, F>(
    seq: &'a LifelongSequence,
    q: &QueryContext,
    cutoff: i64,
    cap: usize,
    pred: F,
) -> Vec<BehaviorEvent>
where
    F: Fn(&BehaviorEvent) -> bool,
{
    // events sorted ascending: walk from the newest end
    let mut out = Vec::new();
    for e in seq.events.iter().rev() {
        if e.timestamp >= q.request_time {
            continue;
        }
        if e.timestamp < cutoff {
            break;
        }
        if pred(e) {
            out.push(e.clone());
            if out.len() == cap {
                break;
            }
        }
    }
    out
}

/// Window events whose geohash equals the query geohash, newest `cap`.
pub fn extract_geohash_block(
    seq: &LifelongSequence,
    q: &QueryContext,
    cap: usize,
) -> Vec<BehaviorEvent> {
    window_filtered(seq, q, q.long_term_cutoff(), cap, |e| {
        e.geohash == q.query_item.geohash
    })
}

/// Window events whose meal-time period equals the query period, newest `cap`.
pub fn extract_mealtime(seq: &LifelongSequence, q: &QueryContext, cap: usize) -> Vec<BehaviorEvent> {
    window_filtered(seq, q, q.long_term_cutoff(), cap, |e| {
        e.period_id == q.query_item.period_id
    })
}

/// Newest `cap` events inside the short-term window.
pub fn extract_short_term(seq: &LifelongSequence, q: &QueryContext, cap: usize) -> Vec<BehaviorEvent> {
    window_filtered(seq, q, q.short_term_cutoff(), cap, |_| true)
}

/// Elapsed-time bucket: log2 of elapsed days, capped at 15.
pub fn time_interval_bucket(request_time: i64, event_time: i64) -> u32 {
    let days = ((request_time - event_time).max(0) / SECONDS_PER_DAY) as u32;
    let mut b = 0u32;
    while (1u32 << (b + 1)) <= days + 1 && b < 15 {
        b += 1;
    }
    b.min(15)
}

/// Bucket for aggregated click counts, capped at 15.
pub fn click_count_bucket(count: u32) -> u32 {
    let mut b = 0u32;
    while (1u32 << (b + 1)) <= count && b < 15 {
        b += 1;
    }
    b
}

/// Group long-term window events by item, keep the latest occurrence of each
/// item with `click_count` = group size and a time-interval side channel,
/// order newest-last-occurrence first, truncate to `cap`.
pub fn dedup_long_term(seq: &LifelongSequence, q: &QueryContext, cap: usize) -> Vec<BehaviorEvent> {
    let cutoff = q.long_term_cutoff();
    let mut groups: BTreeMap<u32, (BehaviorEvent, u32)> = BTreeMap::new();
    for e in &seq.events {
        if e.timestamp >= q.request_time || e.timestamp < cutoff {
            continue;
        }
        match groups.get_mut(&e.item_id) {
            Some((latest, count)) => {
                *count += e.click_count;
                if e.timestamp >= latest.timestamp {
                    *latest = e.clone();
                }
            }
            None => {
                groups.insert(e.item_id, (e.clone(), e.click_count));
            }
        }
    }
    let mut out: Vec<BehaviorEvent> = groups
        .into_values()
        .map(|(mut e, count)| {
            e.click_count = count;
            e.extra.insert(
                "time_interval".to_string(),
                time_interval_bucket(q.request_time, e.timestamp),
            );
            e
        })
        .collect();
    // newest last-occurrence first, ties by item_id ascending
    out.sort_by(|a, b| b.timestamp.cmp(&a.timestamp).then(a.item_id.cmp(&b.item_id)));
    out.truncate(cap);
    out
}

/// Run all four extractions. Channels are independent of each other.
pub fn build_bundle(seq: &LifelongSequence, q: &QueryContext, caps: &ExtractionCaps) -> SubSequenceBundle {
    SubSequenceBundle {
        geohash_block: extract_geohash_block(seq, q, caps.geohash_block),
        meal_time: extract_mealtime(seq, q, caps.meal_time),
        short_term: extract_short_term(seq, q, caps.short_term),
        long_term_dedup: dedup_long_term(seq, q, caps.long_term_dedup),
    }
}

/// Parse one behavior-log line:
/// `user_id \t item_id \t category_id \t lat \t lon \t timestamp \t extra_json`.
/// Geohash and period id are derived at load time.
pub fn parse_behavior_line(
    line: &str,
    line_no: usize,
    geohash_precision: usize,
    binner: &MealTimeBinner,
) -> Result<(String, BehaviorEvent)> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 7 {
        return Err(FinError::Data(format!(
            "line {line_no}: expected 7 tab-separated fields, got {}",
            fields.len()
        )));
    }
    let bad = |what: &str| FinError::Data(format!("line {line_no}: bad {what}"));
    let user = fields[0].to_string();
    let item_id: u32 = fields[1].parse().map_err(|_| bad("item_id"))?;
    let category_id: u32 = fields[2].parse().map_err(|_| bad("category_id"))?;
    let lat: f64 = fields[3].parse().map_err(|_| bad("lat"))?;
    let lon: f64 = fields[4].parse().map_err(|_| bad("lon"))?;
    let timestamp: i64 = fields[5].parse().map_err(|_| bad("timestamp"))?;
    if timestamp <= 0 {
        return Err(bad("timestamp"));
    }
    let extra: BTreeMap<String, u32> = serde_json::from_str(fields[6])
        .map_err(|_| bad("extra_json"))?;
    let point = GeoPoint::new(lat, lon).map_err(|e| FinError::Data(format!("line {line_no}: {e}")))?;
    let geohash = geohash_encode(point, geohash_precision)?;
    let minute = MinuteOfDay(((timestamp / 60) % 1440) as u16);
    let mut ev = BehaviorEvent::new(item_id, category_id, &geohash.code, 0, timestamp);
    ev.period_id = binner.assign_period(minute) as u16;
    ev.extra = extra;
    Ok((user, ev))
}

/// Load a behavior log into per-user lifelong sequences.
pub fn load_behavior_log<P: AsRef<Path>>(
    path: P,
    geohash_precision: usize,
    binner: &MealTimeBinner,
) -> Result<Vec<(String, LifelongSequence)>> {
    let f = std::fs::File::open(path)?;
    let mut per_user: BTreeMap<String, Vec<BehaviorEvent>> = BTreeMap::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (user, ev) = parse_behavior_line(&line, i + 1, geohash_precision, binner)?;
        per_user.entry(user).or_default().push(ev);
    }
    Ok(per_user
        .into_iter()
        .enumerate()
        .map(|(uid, (name, events))| (name, LifelongSequence::new(uid as u32, events)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(item: u32, geohash: &str, period: u16, ts: i64) -> BehaviorEvent {
        BehaviorEvent::new(item, item % 7, geohash, period, ts)
    }

    fn query(geohash: &str, period: u16, t: i64) -> QueryContext {
        QueryContext {
            query_item: ev(9999, geohash, period, t),
            request_time: t,
            short_term_window_days: 30,
            long_term_window_days: 365,
        }
    }

    #[test]
    fn geohash_block_filters_and_orders() {
        let seq = LifelongSequence::new(
            1,
            vec![ev(1, "g1", 0, 100), ev(2, "g2", 0, 200), ev(3, "g1", 0, 300)],
        );
        let q = query("g1", 0, 1000);
        let out = extract_geohash_block(&seq, &q, 10);
        assert_eq!(out.iter().map(|e| e.item_id).collect::<Vec<_>>(), vec![3, 1]);

        assert!(extract_geohash_block(&seq, &query("zz", 0, 1000), 10).is_empty());
        let one = extract_geohash_block(&seq, &q, 1);
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].item_id, 3);
    }

    #[test]
    fn mealtime_filters_by_period() {
        let seq = LifelongSequence::new(
            1,
            vec![ev(1, "g", 3, 100), ev(2, "g", 5, 200), ev(3, "g", 3, 300)],
        );
        let out = extract_mealtime(&seq, &query("g", 3, 1000), 10);
        assert_eq!(out.iter().map(|e| e.item_id).collect::<Vec<_>>(), vec![3, 1]);
        assert!(extract_mealtime(&LifelongSequence::default(), &query("g", 3, 1000), 10).is_empty());
    }

    #[test]
    fn short_term_window() {
        let day = SECONDS_PER_DAY;
        let seq = LifelongSequence::new(
            1,
            (0..5).map(|i| ev(i, "g", 0, (i as i64 + 1) * 10 * day)).collect(),
        );
        let q = query("g", 0, 51 * day); // 30-day window covers days 21..51
        let out = extract_short_term(&seq, &q, 20);
        assert_eq!(out.iter().map(|e| e.item_id).collect::<Vec<_>>(), vec![4, 3, 2]);
        let capped = extract_short_term(&seq, &q, 2);
        assert_eq!(capped.len(), 2);
        assert_eq!(capped[0].item_id, 4);
        // everything older than the window
        let far = query("g", 0, 10_000 * day);
        assert!(extract_short_term(&seq, &far, 20).is_empty());
    }

    #[test]
    fn dedup_groups_counts_and_orders() {
        // items [A,B,A,C,A] -> A(3), C(1), B(1) ordered by last occurrence
        let (a, b, c) = (10, 11, 12);
        let seq = LifelongSequence::new(
            1,
            vec![
                ev(a, "g", 0, 100),
                ev(b, "g", 0, 200),
                ev(a, "g", 0, 300),
                ev(c, "g", 0, 400),
                ev(a, "g", 0, 500),
            ],
        );
        let out = dedup_long_term(&seq, &query("g", 0, 1000), 100);
        assert_eq!(
            out.iter().map(|e| (e.item_id, e.click_count)).collect::<Vec<_>>(),
            vec![(a, 3), (c, 1), (b, 1)]
        );
        assert!(out.iter().all(|e| e.extra.contains_key("time_interval")));
        let total: u32 = out.iter().map(|e| e.click_count).sum();
        assert_eq!(total, 5);
    }

    #[test]
    fn dedup_distinct_items_identity() {
        let seq = LifelongSequence::new(1, (0..4).map(|i| ev(i, "g", 0, 100 + i as i64)).collect());
        let out = dedup_long_term(&seq, &query("g", 0, 1000), 100);
        assert_eq!(out.len(), 4);
        assert!(out.iter().all(|e| e.click_count == 1));
    }

    #[test]
    fn bundle_composition_and_empty() {
        let empty = LifelongSequence::default();
        let q = query("g", 0, 1000);
        let caps = ExtractionCaps::default();
        let b = build_bundle(&empty, &q, &caps);
        assert!(b.geohash_block.is_empty() && b.meal_time.is_empty());
        assert!(b.short_term.is_empty() && b.long_term_dedup.is_empty());

        let seq = LifelongSequence::new(
            1,
            vec![ev(1, "g", 0, 100), ev(2, "h", 1, 200), ev(1, "g", 0, 300)],
        );
        let b = build_bundle(&seq, &q, &caps);
        assert_eq!(b.geohash_block, extract_geohash_block(&seq, &q, caps.geohash_block));
        assert_eq!(b.meal_time, extract_mealtime(&seq, &q, caps.meal_time));
        assert_eq!(b.short_term, extract_short_term(&seq, &q, caps.short_term));
        assert_eq!(b.long_term_dedup, dedup_long_term(&seq, &q, caps.long_term_dedup));
    }

    #[test]
    fn time_buckets_monotone() {
        assert_eq!(time_interval_bucket(1000, 1000), 0);
        let mut prev = 0;
        for days in [0i64, 1, 3, 7, 30, 90, 365, 4000, 1_000_000] {
            let b = time_interval_bucket(days * SECONDS_PER_DAY, 0);
            assert!(b >= prev);
            assert!(b <= 15);
            prev = b;
        }
        assert_eq!(click_count_bucket(1), 0);
        assert!(click_count_bucket(1000) <= 15);
    }

    // brute-force oracles kept independent of the walk-from-newest implementation
    fn brute_filter(
        seq: &LifelongSequence,
        q: &QueryContext,
        cutoff: i64,
        cap: usize,
        pred: impl Fn(&BehaviorEvent) -> bool,
    ) -> Vec<u32> {
        let mut matching: Vec<&BehaviorEvent> = seq
            .events
            .iter()
            .filter(|e| e.timestamp < q.request_time && e.timestamp >= cutoff && pred(e))
            .collect();
        // storage order is (ts, item) ascending; newest-first is its reverse
        matching.sort_by(|a, b| b.timestamp.cmp(&a.timestamp).then(b.item_id.cmp(&a.item_id)));
        matching.into_iter().take(cap).map(|e| e.item_id).collect()
    }

    proptest! {
        #[test]
        fn extraction_matches_brute_force(
            raw in proptest::collection::vec((0u32..8, 0u32..3, 0u16..3, 1i64..400), 0..50),
            cap in 1usize..10,
            qg in 0u32..3,
            qp in 0u16..3,
        ) {
            let events: Vec<BehaviorEvent> = raw
                .iter()
                .map(|&(item, g, p, ts)| ev(item, &format!("g{g}"), p, ts * SECONDS_PER_DAY))
                .collect();
            let seq = LifelongSequence::new(1, events);
            let q = QueryContext {
                query_item: ev(999, &format!("g{qg}"), qp, 500 * SECONDS_PER_DAY),
                request_time: 500 * SECONDS_PER_DAY,
                short_term_window_days: 300,
                long_term_window_days: 1000,
            };
            let got: Vec<u32> = extract_geohash_block(&seq, &q, cap).iter().map(|e| e.item_id).collect();
            let want = brute_filter(&seq, &q, q.long_term_cutoff(), cap, |e| e.geohash == q.query_item.geohash);
            prop_assert_eq!(got, want);

            let got: Vec<u32> = extract_mealtime(&seq, &q, cap).iter().map(|e| e.item_id).collect();
            let want = brute_filter(&seq, &q, q.long_term_cutoff(), cap, |e| e.period_id == qp);
            prop_assert_eq!(got, want);

            let got: Vec<u32> = extract_short_term(&seq, &q, cap).iter().map(|e| e.item_id).collect();
            let want = brute_filter(&seq, &q, q.short_term_cutoff(), cap, |_| true);
            prop_assert_eq!(got, want);

            // no future leakage and click-count conservation
            let dedup = dedup_long_term(&seq, &q, 1000);
            let window = seq.events.iter().filter(|e| e.timestamp < q.request_time && e.timestamp >= q.long_term_cutoff()).count();
            let total: u32 = dedup.iter().map(|e| e.click_count).sum();
            prop_assert_eq!(total as usize, window);
            for e in &dedup {
                prop_assert!(e.timestamp < q.request_time);
            }
            let mut ids: Vec<u32> = dedup.iter().map(|e| e.item_id).collect();
            ids.sort_unstable();
            ids.dedup();
            prop_assert_eq!(ids.len(), dedup.len());
        }
    }

    #[test]
    fn behavior_line_parses_and_rejects() {
        let minutes: Vec<MinuteOfDay> = (0..1440).map(MinuteOfDay).collect();
        let binner = MealTimeBinner::fit(&minutes, 4).unwrap();
        let line = "u1\t42\t7\t42.605\t-5.603\t100000\t{\"weekday\":3}";
        let (user, ev) = parse_behavior_line(line, 1, 5, &binner).unwrap();
        assert_eq!(user, "u1");
        assert_eq!(ev.item_id, 42);
        assert_eq!(ev.geohash, "ezs42");
        assert_eq!(ev.extra["weekday"], 3);

        assert!(parse_behavior_line("u1\tonly", 2, 5, &binner).is_err());
        let bad_lat = "u1\t42\t7\t99.0\t0.0\t100\t{}";
        assert!(parse_behavior_line(bad_lat, 3, 5, &binner).is_err());
    }
}
