//! Noisy date-label parsing and decade quantization.
//!
//! Free-text annotations ("90s", "1965", "1954-1957", "circa 1920s") are
//! scanned left to right by an ordered list of [`DateRule`]s. At each word
//! start every rule is tried and the longest match wins (earlier rules win
//! length ties). The first match that resolves inside the valid window is
//! returned; matches that fall fully outside are skipped, and only reported
//! as [`Error::OutOfWindow`] when nothing else matched.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inclusive span of calendar years.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct YearRange {
    start: i32,
    end: i32,
}

impl YearRange {
    /// Default valid window of the clothing datasets.
    pub const DEFAULT_WINDOW: YearRange = YearRange {
        start: 1900,
        end: 2009,
    };

    pub fn new(start: i32, end: i32) -> Result<Self> {
        if start > end {
            return Err(Error::InvalidConfig(format!(
                "year range start {start} is after end {end}"
            )));
        }
        Ok(YearRange { start, end })
    }

    pub fn single(year: i32) -> Self {
        YearRange {
            start: year,
            end: year,
        }
    }

    pub fn start(&self) -> i32 {
        self.start
    }

    pub fn end(&self) -> i32 {
        self.end
    }

    /// `floor((start + end) / 2)`.
    pub fn midpoint(&self) -> i32 {
        (self.start + self.end).div_euclid(2)
    }

    pub fn contains(&self, year: i32) -> bool {
        self.start <= year && year <= self.end
    }

    pub fn intersection(&self, other: &YearRange) -> Option<YearRange> {
        let start = self.start.max(other.start);
        let end = self.end.min(other.end);
        (start <= end).then_some(YearRange { start, end })
    }

    /// Number of years covered.
    pub fn len(&self) -> u32 {
        (self.end - self.start) as u32 + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl fmt::Display for YearRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.start == self.end {
            write!(f, "{}", self.start)
        } else {
            write!(f, "{}-{}", self.start, self.end)
        }
    }
}

/// Fixed-width temporal classes starting at `origin_year`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalBinning {
    origin_year: i32,
    bin_width_years: u32,
    n_bins: usize,
}

impl Default for TemporalBinning {
    /// Eleven decades, 1900 to 2009.
    fn default() -> Self {
        TemporalBinning {
            origin_year: 1900,
            bin_width_years: 10,
            n_bins: 11,
        }
    }
}

impl TemporalBinning {
    pub fn new(origin_year: i32, bin_width_years: u32, n_bins: usize) -> Result<Self> {
        if bin_width_years == 0 || n_bins == 0 {
            return Err(Error::InvalidConfig(
                "binning needs a positive width and at least one bin".into(),
            ));
        }
        let span = bin_width_years as i64 * n_bins as i64;
        if origin_year as i64 + span - 1 > i32::MAX as i64 {
            return Err(Error::InvalidConfig("binning window overflows".into()));
        }
        Ok(TemporalBinning {
            origin_year,
            bin_width_years,
            n_bins,
        })
    }

    /// Split `window` into `n_bins` equal bins; the window length must be a
    /// multiple of `n_bins`.
    pub fn from_window(window: YearRange, n_bins: usize) -> Result<Self> {
        let len = window.len() as usize;
        if n_bins == 0 || !len.is_multiple_of(n_bins) {
            return Err(Error::InvalidConfig(format!(
                "window {window} ({len} years) is not divisible into {n_bins} bins"
            )));
        }
        Self::new(window.start(), (len / n_bins) as u32, n_bins)
    }

    pub fn origin_year(&self) -> i32 {
        self.origin_year
    }

    pub fn bin_width_years(&self) -> u32 {
        self.bin_width_years
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    /// The window covered exactly by the bins.
    pub fn window(&self) -> YearRange {
        YearRange {
            start: self.origin_year,
            end: self.origin_year + (self.bin_width_years as usize * self.n_bins) as i32 - 1,
        }
    }

    pub fn check(&self, bin: BinIndex) -> Result<BinIndex> {
        if bin.0 < self.n_bins {
            Ok(bin)
        } else {
            Err(Error::InvalidConfig(format!(
                "bin {} out of range for {} bins",
                bin.0, self.n_bins
            )))
        }
    }

    pub fn span(&self, bin: BinIndex) -> YearRange {
        let start = self.origin_year + bin.0 as i32 * self.bin_width_years as i32;
        YearRange {
            start,
            end: start + self.bin_width_years as i32 - 1,
        }
    }

    pub fn bin_of_year(&self, year: i32) -> Result<BinIndex> {
        let window = self.window();
        if !window.contains(year) {
            return Err(Error::OutOfWindow {
                start: year,
                end: year,
                window_start: window.start,
                window_end: window.end,
            });
        }
        Ok(BinIndex(
            ((year - self.origin_year) / self.bin_width_years as i32) as usize,
        ))
    }

    /// Midpoint year of a bin: `origin + index*width + width/2`.
    pub fn representative_year(&self, bin: BinIndex) -> i32 {
        self.origin_year
            + bin.0 as i32 * self.bin_width_years as i32
            + (self.bin_width_years / 2) as i32
    }
}

/// Index of a temporal class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BinIndex(pub usize);

impl fmt::Display for BinIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Bin containing the midpoint of `range`.
pub fn quantize(range: YearRange, binning: &TemporalBinning) -> Result<BinIndex> {
    binning.bin_of_year(range.midpoint())
}

pub fn bin_representative_year(bin: BinIndex, binning: &TemporalBinning) -> i32 {
    binning.representative_year(bin)
}

/// Parse `text` with the default rule set.
pub fn parse_date_string(text: &str, window: YearRange) -> Result<YearRange> {
    DateParser::default().parse(text, window)
}

/// Parse the first field that yields a date; fields are given in priority
/// order (for photo metadata: title, description, tags).
pub fn parse_fields<S: AsRef<str>>(fields: &[S], window: YearRange) -> Result<YearRange> {
    DateParser::default().parse_fields(fields, window)
}

/// What a rule recognised before it is resolved against a window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Candidate {
    /// Fully specified years.
    Years { start: i32, end: i32 },
    /// A century-less decade such as "60s"; holds the decade offset (0, 10, .. 90).
    ShortDecade(i32),
}

/// One grammar rule. `at` is always a char boundary that starts a word.
pub trait DateRule: Send + Sync {
    fn name(&self) -> &'static str;

    /// Length in bytes of the match starting at `text[at..]`, if any.
    fn match_at(&self, text: &str, at: usize) -> Option<(usize, Candidate)>;
}

/// Ordered rule set.
pub struct DateParser {
    rules: Vec<Box<dyn DateRule>>,
}

impl Default for DateParser {
    fn default() -> Self {
        DateParser {
            rules: vec![
                Box::new(RangeRule),
                Box::new(DecadeRule),
                Box::new(ShortDecadeRule),
                Box::new(YearRule),
            ],
        }
    }
}

impl DateParser {
    pub fn empty() -> Self {
        DateParser { rules: Vec::new() }
    }

    /// Append a rule; it loses length ties against rules already present.
    pub fn with_rule(mut self, rule: Box<dyn DateRule>) -> Self {
        self.rules.push(rule);
        self
    }

    pub fn rule_names(&self) -> Vec<&'static str> {
        self.rules.iter().map(|r| r.name()).collect()
    }

    pub fn parse(&self, text: &str, window: YearRange) -> Result<YearRange> {
        let mut first_outside: Option<Error> = None;
        let mut prev: Option<char> = None;
        let mut skip_until = 0;
        for (at, ch) in text.char_indices() {
            let word_start = !prev.is_some_and(|p| p.is_alphanumeric());
            prev = Some(ch);
            if at < skip_until || !word_start {
                continue;
            }
            let mut best: Option<(usize, Candidate)> = None;
            for rule in &self.rules {
                if let Some((len, cand)) = rule.match_at(text, at) {
                    if best.is_none_or(|(l, _)| len > l) {
                        best = Some((len, cand));
                    }
                }
            }
            let Some((len, cand)) = best else { continue };
            match resolve(cand, window) {
                Ok(range) => return Ok(range),
                Err(e) => {
                    first_outside.get_or_insert(e);
                    skip_until = at + len;
                }
            }
        }
        Err(first_outside.unwrap_or_else(|| Error::NoDateFound(text.to_string())))
    }

    pub fn parse_fields<S: AsRef<str>>(
        &self,
        fields: &[S],
        window: YearRange,
    ) -> Result<YearRange> {
        let mut first_err: Option<Error> = None;
        for field in fields {
            match self.parse(field.as_ref(), window) {
                Ok(r) => return Ok(r),
                Err(e @ Error::OutOfWindow { .. }) => {
                    if !matches!(first_err, Some(Error::OutOfWindow { .. })) {
                        first_err = Some(e);
                    }
                }
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
        Err(first_err.unwrap_or_else(|| Error::NoDateFound(String::new())))
    }
}

fn resolve(cand: Candidate, window: YearRange) -> Result<YearRange> {
    match cand {
        Candidate::Years { start, end } => {
            let (start, end) = if start <= end {
                (start, end)
            } else {
                (end, start)
            };
            YearRange { start, end }
                .intersection(&window)
                .ok_or(Error::OutOfWindow {
                    start,
                    end,
                    window_start: window.start,
                    window_end: window.end,
                })
        }
        Candidate::ShortDecade(offset) => {
            // Enumerate every century that could host the decade and keep the
            // in-window ones; the 1900s win when several qualify.
            let first = window.start.div_euclid(100) * 100;
            let mut hits = Vec::new();
            let mut century = first;
            while century <= window.end {
                let span = YearRange {
                    start: century + offset,
                    end: century + offset + 9,
                };
                if let Some(r) = span.intersection(&window) {
                    hits.push((century, r));
                }
                century += 100;
            }
            hits.iter()
                .find(|(c, _)| *c == 1900)
                .or(hits.first())
                .map(|(_, r)| *r)
                .ok_or(Error::OutOfWindow {
                    start: 1900 + offset,
                    end: 1900 + offset + 9,
                    window_start: window.start,
                    window_end: window.end,
                })
        }
    }
}

fn is_apostrophe(c: char) -> bool {
    matches!(c, '\'' | '\u{2019}' | '\u{2018}')
}

fn is_dash(c: char) -> bool {
    matches!(c, '-' | '\u{2013}' | '\u{2014}' | '\u{2012}' | '\u{2212}')
}

fn char_at(text: &str, at: usize) -> Option<char> {
    text.get(at..).and_then(|s| s.chars().next())
}

/// Exactly `n` ASCII digits at `at`, not followed by another digit.
fn digits(text: &str, at: usize, n: usize) -> Option<i32> {
    let bytes = text.as_bytes();
    if at + n > bytes.len() || !bytes[at..at + n].iter().all(u8::is_ascii_digit) {
        return None;
    }
    if bytes.get(at + n).is_some_and(u8::is_ascii_digit) {
        return None;
    }
    Some(
        bytes[at..at + n]
            .iter()
            .fold(0, |acc, b| acc * 10 + (b - b'0') as i32),
    )
}

/// Optional apostrophe followed by `s`/`S`; returns consumed length.
fn plural_suffix(text: &str, at: usize) -> Option<usize> {
    let mut pos = at;
    if let Some(c) = char_at(text, pos).filter(|c| is_apostrophe(*c)) {
        pos += c.len_utf8();
    }
    match char_at(text, pos) {
        Some('s' | 'S') => Some(pos + 1 - at),
        _ => None,
    }
}

fn ends_word(text: &str, at: usize) -> bool {
    !char_at(text, at).is_some_and(|c| c.is_alphanumeric())
}

/// A four-digit year or decade ("1954", "1920s"): `(len, start, end)`.
fn full_endpoint(text: &str, at: usize) -> Option<(usize, i32, i32)> {
    let year = digits(text, at, 4)?;
    if year % 10 == 0 {
        if let Some(suffix) = plural_suffix(text, at + 4) {
            return Some((4 + suffix, year, year + 9));
        }
    }
    Some((4, year, year))
}

/// "1954-1957", "1954 - 57", "1920s-1930s", "1950s-60s", "1954 to 1957".
struct RangeRule;

impl DateRule for RangeRule {
    fn name(&self) -> &'static str {
        "range"
    }

    fn match_at(&self, text: &str, at: usize) -> Option<(usize, Candidate)> {
        let (len, start, first_end) = full_endpoint(text, at)?;
        let mut pos = at + len;
        let skip_ws = |mut p: usize| {
            while let Some(c) = char_at(text, p).filter(|c| c.is_whitespace()) {
                p += c.len_utf8();
            }
            p
        };
        let before_sep = skip_ws(pos);
        match char_at(text, before_sep) {
            Some(c) if is_dash(c) => pos = skip_ws(before_sep + c.len_utf8()),
            Some('t' | 'T') if before_sep > pos => {
                let word = text.get(before_sep..before_sep + 2)?;
                if !word.eq_ignore_ascii_case("to") {
                    return None;
                }
                let after = skip_ws(before_sep + 2);
                if after == before_sep + 2 {
                    return None;
                }
                pos = after;
            }
            _ => return None,
        }
        if let Some((len2, s2, e2)) = full_endpoint(text, pos) {
            let end = pos + len2;
            if !ends_word(text, end) {
                return None;
            }
            return Some((
                end - at,
                Candidate::Years {
                    start: start.min(s2),
                    end: e2.max(first_end),
                },
            ));
        }
        // Two-digit tail inherits the century of the start year.
        let tail = digits(text, pos, 2)?;
        let century = start.div_euclid(100) * 100;
        let (mut s2, mut len2) = (century + tail, 2);
        let mut e2 = s2;
        if tail % 10 == 0 {
            if let Some(suffix) = plural_suffix(text, pos + 2) {
                len2 += suffix;
                e2 = s2 + 9;
            }
        }
        if e2 < start {
            s2 += 100;
            e2 += 100;
        }
        let end = pos + len2;
        if !ends_word(text, end) {
            return None;
        }
        Some((
            end - at,
            Candidate::Years {
                start: start.min(s2),
                end: e2.max(first_end),
            },
        ))
    }
}

/// "1920s", "1920's".
struct DecadeRule;

impl DateRule for DecadeRule {
    fn name(&self) -> &'static str {
        "decade"
    }

    fn match_at(&self, text: &str, at: usize) -> Option<(usize, Candidate)> {
        let (len, start, end) = full_endpoint(text, at)?;
        (end != start && ends_word(text, at + len))
            .then_some((len, Candidate::Years { start, end }))
    }
}

/// "90s", "'90s", "90's".
struct ShortDecadeRule;

impl DateRule for ShortDecadeRule {
    fn name(&self) -> &'static str {
        "short-decade"
    }

    fn match_at(&self, text: &str, at: usize) -> Option<(usize, Candidate)> {
        let mut pos = at;
        if let Some(c) = char_at(text, pos).filter(|c| is_apostrophe(*c)) {
            pos += c.len_utf8();
        }
        let value = digits(text, pos, 2)?;
        if value % 10 != 0 {
            return None;
        }
        let suffix = plural_suffix(text, pos + 2)?;
        let end = pos + 2 + suffix;
        ends_word(text, end).then_some((end - at, Candidate::ShortDecade(value)))
    }
}

/// A bare four-digit year.
struct YearRule;

impl DateRule for YearRule {
    fn name(&self) -> &'static str {
        "year"
    }

    fn match_at(&self, text: &str, at: usize) -> Option<(usize, Candidate)> {
        let year = digits(text, at, 4)?;
        ends_word(text, at + 4).then_some((
            4,
            Candidate::Years {
                start: year,
                end: year,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const W: YearRange = YearRange::DEFAULT_WINDOW;

    fn yr(a: i32, b: i32) -> YearRange {
        YearRange::new(a, b).unwrap()
    }

    #[test]
    fn exemplar_forms() {
        assert_eq!(parse_date_string("1965", W).unwrap(), yr(1965, 1965));
        assert_eq!(parse_date_string("1954-1957", W).unwrap(), yr(1954, 1957));
        assert_eq!(parse_date_string("1920s", W).unwrap(), yr(1920, 1929));
        assert_eq!(parse_date_string("90s", W).unwrap(), yr(1990, 1999));
    }

    #[test]
    fn short_decade_matches_century_enumeration() {
        // Oracle: every century whose copy of the decade lies inside the
        // window; the 1900s are preferred when more than one survives.
        for tens in 0..10 {
            let text = format!("{}0s", tens);
            let inside: Vec<i32> = (1800..=2100)
                .step_by(100)
                .map(|c| c + tens * 10)
                .filter(|s| W.contains(*s) && W.contains(s + 9))
                .collect();
            let expected = if inside.contains(&(1900 + tens * 10)) {
                1900 + tens * 10
            } else {
                inside[0]
            };
            assert_eq!(
                parse_date_string(&text, W).unwrap(),
                yr(expected, expected + 9),
                "{text}"
            );
        }
    }

    #[test]
    fn no_digits_is_no_date() {
        assert!(matches!(
            parse_date_string("taken sometime, lovely dress", W),
            Err(Error::NoDateFound(_))
        ));
    }

    #[test]
    fn out_of_window_only_when_nothing_else_matches() {
        assert!(matches!(
            parse_date_string("made in 1850", W),
            Err(Error::OutOfWindow { start: 1850, .. })
        ));
        assert_eq!(
            parse_date_string("catalog 1850, worn 1965", W).unwrap(),
            yr(1965, 1965)
        );
    }

    #[test]
    fn longest_match_wins_at_same_position() {
        assert_eq!(
            parse_date_string("ca. 1950s-60s", W).unwrap(),
            yr(1950, 1969)
        );
        assert_eq!(parse_date_string("1954 - 57", W).unwrap(), yr(1954, 1957));
        assert_eq!(
            parse_date_string("1954 to 1957", W).unwrap(),
            yr(1954, 1957)
        );
    }

    #[test]
    fn partial_ranges_are_clamped() {
        assert_eq!(parse_date_string("1895-1905", W).unwrap(), yr(1900, 1905));
    }

    #[test]
    fn field_priority() {
        let fields = ["portrait", "dress from the 40s", "1965"];
        assert_eq!(parse_fields(&fields, W).unwrap(), yr(1940, 1949));
        let none = ["a", "b"];
        assert!(matches!(parse_fields(&none, W), Err(Error::NoDateFound(_))));
    }

    #[test]
    fn quantize_examples() {
        let b = TemporalBinning::default();
        assert_eq!(quantize(yr(1965, 1965), &b).unwrap(), BinIndex(6));
        assert_eq!(quantize(yr(1900, 1900), &b).unwrap(), BinIndex(0));
        assert_eq!(quantize(yr(1954, 1957), &b).unwrap(), BinIndex(5));
        assert!(matches!(
            quantize(yr(2010, 2012), &b),
            Err(Error::OutOfWindow { .. })
        ));
    }

    #[test]
    fn quantize_agrees_with_bin_scan() {
        let b = TemporalBinning::default();
        for y in 1900..=2009 {
            let scanned = (0..b.n_bins())
                .find(|&i| b.span(BinIndex(i)).contains(y))
                .unwrap();
            assert_eq!(
                quantize(YearRange::single(y), &b).unwrap(),
                BinIndex(scanned)
            );
        }
    }

    #[test]
    fn representative_years() {
        let b = TemporalBinning::default();
        assert_eq!(bin_representative_year(BinIndex(0), &b), 1905);
        assert_eq!(bin_representative_year(BinIndex(10), &b), 2005);
        let cars = TemporalBinning::new(1920, 10, 8).unwrap();
        assert_eq!(bin_representative_year(BinIndex(0), &cars), 1925);
        assert_eq!(cars.window(), yr(1920, 1999));
    }

    #[test]
    fn binning_from_window() {
        let b = TemporalBinning::from_window(W, 11).unwrap();
        assert_eq!(b, TemporalBinning::default());
        assert!(TemporalBinning::from_window(W, 12).is_err());
    }
}
