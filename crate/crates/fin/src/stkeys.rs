//! Spatial and temporal retrieval keys: geohash codes for coordinates and
//! equal-frequency meal-time bins for minute-of-day.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{FinError, Result};

pub const GEOHASH_ALPHABET: &[u8] = b"0123456789bcdefghjkmnpqrstuvwxyz";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !lat.is_finite() || !lon.is_finite() || !(-90.0..=90.0).contains(&lat)
            || !(-180.0..=180.0).contains(&lon)
        {
            return Err(FinError::InputDomain(format!(
                "coordinates out of range: lat {lat}, lon {lon}"
            )));
        }
        Ok(GeoPoint { lat, lon })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GeohashCode {
    pub code: String,
}

impl GeohashCode {
    pub fn precision(&self) -> usize {
        self.code.len()
    }
}

/// Standard geohash: alternating lon/lat bisection starting with longitude,
/// 5 bits per base-32 character.
pub fn geohash_encode(p: GeoPoint, precision: usize) -> Result<GeohashCode> {
    if !(1..=12).contains(&precision) {
        return Err(FinError::InputDomain(format!(
            "geohash precision {precision} outside [1, 12]"
        )));
    }
    // revalidate so callers constructing GeoPoint literals are still checked
    let p = GeoPoint::new(p.lat, p.lon)?;
    let mut lat_lo = -90.0;
    let mut lat_hi = 90.0;
    let mut lon_lo = -180.0;
    let mut lon_hi = 180.0;
    let mut code = String::with_capacity(precision);
    let mut bits = 0usize;
    let mut acc = 0usize;
    let mut even = true; // even bit index -> longitude
    while code.len() < precision {
        if even {
            let mid = (lon_lo + lon_hi) / 2.0;
            if p.lon >= mid {
                acc = (acc << 1) | 1;
                lon_lo = mid;
            } else {
                acc <<= 1;
                lon_hi = mid;
            }
        } else {
            let mid = (lat_lo + lat_hi) / 2.0;
            if p.lat >= mid {
                acc = (acc << 1) | 1;
                lat_lo = mid;
            } else {
                acc <<= 1;
                lat_hi = mid;
            }
        }
        even = !even;
        bits += 1;
        if bits == 5 {
            code.push(GEOHASH_ALPHABET[acc] as char);
            bits = 0;
            acc = 0;
        }
    }
    Ok(GeohashCode { code })
}

/// Bounding box of a geohash cell: (lat_min, lat_max, lon_min, lon_max).
pub fn geohash_decode_bbox(g: &GeohashCode) -> Result<(f64, f64, f64, f64)> {
    if g.code.is_empty() || g.code.len() > 12 {
        return Err(FinError::Format(format!(
            "geohash length {} outside [1, 12]",
            g.code.len()
        )));
    }
    let mut lat_lo = -90.0;
    let mut lat_hi = 90.0;
    let mut lon_lo = -180.0;
    let mut lon_hi = 180.0;
    let mut even = true;
    for ch in g.code.bytes() {
        let idx = GEOHASH_ALPHABET
            .iter()
            .position(|&a| a == ch)
            .ok_or_else(|| FinError::Format(format!("invalid geohash character '{}'", ch as char)))?;
        for b in (0..5).rev() {
            let bit = (idx >> b) & 1;
            if even {
                let mid = (lon_lo + lon_hi) / 2.0;
                if bit == 1 {
                    lon_lo = mid;
                } else {
                    lon_hi = mid;
                }
            } else {
                let mid = (lat_lo + lat_hi) / 2.0;
                if bit == 1 {
                    lat_lo = mid;
                } else {
                    lat_hi = mid;
                }
            }
            even = !even;
        }
    }
    Ok((lat_lo, lat_hi, lon_lo, lon_hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct MinuteOfDay(pub u16);

pub fn minute_of_day(hh: u32, mm: u32) -> Result<MinuteOfDay> {
    if hh > 23 || mm > 59 {
        return Err(FinError::InputDomain(format!(
            "clock fields out of range: {hh:02}:{mm:02}"
        )));
    }
    Ok(MinuteOfDay((hh * 60 + mm) as u16))
}

/// Equal-frequency binning of minute-of-day into at most `period_count`
/// periods. Boundaries are the i/M empirical quantiles with duplicates
/// merged, so the effective bin count can be smaller than M.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MealTimeBinner {
    boundaries: Vec<u16>,
    period_count: usize,
}

/// Default M, matching a fine-grained industrial-style binning.
pub const DEFAULT_MEAL_PERIODS: usize = 95;

impl MealTimeBinner {
    pub fn fit(minutes: &[MinuteOfDay], period_count: usize) -> Result<Self> {
        if minutes.is_empty() {
            return Err(FinError::Data("cannot fit meal-time binner on empty input".into()));
        }
        if period_count < 1 {
            return Err(FinError::InputDomain("period_count must be >= 1".into()));
        }
        let mut sorted: Vec<u16> = minutes.iter().map(|m| m.0).collect();
        sorted.sort_unstable();
        let n = sorted.len();
        let mut boundaries = Vec::new();
        for i in 1..period_count {
            let rank = (i * n) / period_count;
            let b = sorted[rank.min(n - 1)];
            // a boundary at the minimum would create an always-empty lowest bin
            if b > sorted[0] && boundaries.last() != Some(&b) {
                boundaries.push(b);
            }
        }
        Ok(MealTimeBinner {
            boundaries,
            period_count,
        })
    }

    pub fn period_count(&self) -> usize {
        self.period_count
    }

    /// Number of distinct period ids this binner can emit.
    pub fn effective_bins(&self) -> usize {
        self.boundaries.len() + 1
    }

    pub fn boundaries(&self) -> &[u16] {
        &self.boundaries
    }

    /// Total, monotone non-decreasing mapping from minute to period id.
    pub fn assign_period(&self, t: MinuteOfDay) -> usize {
        self.boundaries.partition_point(|&b| b <= t.0)
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "M={}", self.period_count)?;
        for b in &self.boundaries {
            writeln!(w, "{b}")?;
        }
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let mut lines = std::io::BufReader::new(f).lines();
        let header = lines
            .next()
            .ok_or_else(|| FinError::Format("empty binner file".into()))??;
        let period_count = header
            .strip_prefix("M=")
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| FinError::Format(format!("bad binner header '{header}'")))?;
        let mut boundaries = Vec::new();
        for line in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let b: u16 = line
                .parse()
                .map_err(|_| FinError::Format(format!("bad boundary '{line}'")))?;
            if boundaries.last().map_or(false, |&p| p >= b) {
                return Err(FinError::Format("boundaries not strictly increasing".into()));
            }
            boundaries.push(b);
        }
        Ok(MealTimeBinner {
            boundaries,
            period_count,
        })
    }
}

/// Equal-frequency bin boundaries for arbitrary f64 data (price binning).
/// Returns strictly increasing boundaries; bin id = partition point.
pub fn equal_frequency_boundaries(values: &[f64], bins: usize) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(FinError::Data("cannot bin empty input".into()));
    }
    if bins < 1 {
        return Err(FinError::InputDomain("bins must be >= 1".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let mut boundaries: Vec<f64> = Vec::new();
    for i in 1..bins {
        let b = sorted[((i * n) / bins).min(n - 1)];
        if b > sorted[0] && boundaries.last().map_or(true, |&p| p < b) {
            boundaries.push(b);
        }
    }
    Ok(boundaries)
}

pub fn bin_of(boundaries: &[f64], v: f64) -> usize {
    boundaries.partition_point(|&b| b <= v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn encode_known_cell() {
        let p = GeoPoint::new(42.605, -5.603).unwrap();
        assert_eq!(geohash_encode(p, 5).unwrap().code, "ezs42");
    }

    #[test]
    fn encode_origin_precision_one() {
        // first 5 bits of (0,0): lon>=0 ->1, lat>=0 ->1, lon<90 ->0, lat<45 ->0, lon<45 ->0
        let p = GeoPoint::new(0.0, 0.0).unwrap();
        assert_eq!(geohash_encode(p, 1).unwrap().code, "s");
    }

    #[test]
    fn decode_s_cell() {
        let (lat_lo, lat_hi, lon_lo, lon_hi) =
            geohash_decode_bbox(&GeohashCode { code: "s".into() }).unwrap();
        assert_eq!((lat_lo, lat_hi, lon_lo, lon_hi), (0.0, 45.0, 0.0, 45.0));
    }

    #[test]
    fn out_of_range_inputs_rejected() {
        assert!(GeoPoint::new(91.0, 0.0).is_err());
        assert!(GeoPoint::new(0.0, -181.0).is_err());
        assert!(GeoPoint::new(f64::NAN, 0.0).is_err());
        let p = GeoPoint::new(1.0, 1.0).unwrap();
        assert!(geohash_encode(p, 0).is_err());
        assert!(geohash_encode(p, 13).is_err());
        assert!(geohash_decode_bbox(&GeohashCode { code: "ai".into() }).is_err());
    }

    #[test]
    fn minute_of_day_formula() {
        assert_eq!(minute_of_day(12, 30).unwrap().0, 750);
        assert_eq!(minute_of_day(0, 0).unwrap().0, 0);
        assert_eq!(minute_of_day(23, 59).unwrap().0, 1439);
        assert!(minute_of_day(24, 0).is_err());
        assert!(minute_of_day(3, 60).is_err());
    }

    #[test]
    fn binner_uniform_equal_frequency() {
        // brute-force count per fitted bin on uniform minutes
        let minutes: Vec<MinuteOfDay> = (0..1440).map(MinuteOfDay).collect();
        let b = MealTimeBinner::fit(&minutes, 4).unwrap();
        let mut counts = vec![0usize; b.effective_bins()];
        for m in &minutes {
            counts[b.assign_period(*m)] += 1;
        }
        let target = minutes.len() as i64 / 4;
        for &c in &counts {
            assert!((c as i64 - target).abs() <= 1, "counts {counts:?}");
        }
    }

    #[test]
    fn binner_degenerate_all_identical() {
        let minutes = vec![MinuteOfDay(600); 50];
        let b = MealTimeBinner::fit(&minutes, 95).unwrap();
        assert_eq!(b.effective_bins(), 1);
        assert_eq!(b.assign_period(MinuteOfDay(0)), 0);
        assert_eq!(b.assign_period(MinuteOfDay(1439)), 0);
    }

    #[test]
    fn binner_extremes() {
        let minutes: Vec<MinuteOfDay> = (100..200).map(MinuteOfDay).collect();
        let b = MealTimeBinner::fit(&minutes, 5).unwrap();
        assert_eq!(b.assign_period(MinuteOfDay(0)), 0);
        assert_eq!(b.assign_period(MinuteOfDay(1439)), b.effective_bins() - 1);
    }

    #[test]
    fn binner_rejects_empty() {
        assert!(MealTimeBinner::fit(&[], 4).is_err());
    }

    #[test]
    fn binner_file_roundtrip() {
        let minutes: Vec<MinuteOfDay> = (0..1440).step_by(7).map(MinuteOfDay).collect();
        let b = MealTimeBinner::fit(&minutes, 12).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("binner.txt");
        b.save(&path).unwrap();
        assert_eq!(MealTimeBinner::load(&path).unwrap(), b);
    }

    proptest! {
        #[test]
        fn roundtrip_containment(lat in -90.0f64..90.0, lon in -180.0f64..180.0, prec in 1usize..=12) {
            let p = GeoPoint::new(lat, lon).unwrap();
            let g = geohash_encode(p, prec).unwrap();
            let (lat_lo, lat_hi, lon_lo, lon_hi) = geohash_decode_bbox(&g).unwrap();
            prop_assert!(lat_lo <= lat && lat <= lat_hi);
            prop_assert!(lon_lo <= lon && lon <= lon_hi);
        }

        #[test]
        fn prefix_property(lat in -90.0f64..90.0, lon in -180.0f64..180.0, prec in 1usize..12) {
            let p = GeoPoint::new(lat, lon).unwrap();
            let short = geohash_encode(p, prec).unwrap();
            let long = geohash_encode(p, prec + 1).unwrap();
            prop_assert!(long.code.starts_with(&short.code));
            // nested bbox
            let a = geohash_decode_bbox(&short).unwrap();
            let b = geohash_decode_bbox(&long).unwrap();
            prop_assert!(a.0 <= b.0 && b.1 <= a.1 && a.2 <= b.2 && b.3 <= a.3);
        }

        #[test]
        fn period_monotone(mins in proptest::collection::vec(0u16..1440, 1..200), m in 1usize..20, t1 in 0u16..1440, t2 in 0u16..1440) {
            let minutes: Vec<MinuteOfDay> = mins.into_iter().map(MinuteOfDay).collect();
            let b = MealTimeBinner::fit(&minutes, m).unwrap();
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(b.assign_period(MinuteOfDay(lo)) <= b.assign_period(MinuteOfDay(hi)));
            prop_assert!(b.effective_bins() <= m);
        }

        #[test]
        fn distinct_values_equal_frequency(n in 2usize..300, m in 1usize..10) {
            // all-distinct minutes: bin counts differ by at most 1
            let minutes: Vec<MinuteOfDay> = (0..n.min(1440)).map(|i| MinuteOfDay(i as u16)).collect();
            let b = MealTimeBinner::fit(&minutes, m).unwrap();
            let mut counts = vec![0i64; b.effective_bins()];
            for mm in &minutes {
                counts[b.assign_period(*mm)] += 1;
            }
            let max = *counts.iter().max().unwrap();
            let min = *counts.iter().min().unwrap();
            prop_assert!(max - min <= 1, "counts {:?}", counts);
        }
    }
}
