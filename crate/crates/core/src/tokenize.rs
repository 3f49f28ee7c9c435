//! Log text tokenization and failure-window extraction.
//!
//! Two token modes are supported. Word mode splits on any character that is
//! neither alphanumeric nor `_` and emits word n-grams joined by a single
//! space. Char mode collapses whitespace runs and emits every character
//! substring of the configured lengths, crossing line boundaries.

use std::collections::{BTreeSet, HashSet};
use std::sync::OnceLock;

use chrono::{DateTime, Datelike, NaiveDate, NaiveDateTime, TimeDelta, TimeZone, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TokenizeError {
    #[error("invalid tokenizer config: {0}")]
    InvalidConfig(String),
    #[error("no line carries a parseable timestamp")]
    NoParseableTimestamps,
    #[error("lookback must be positive")]
    NonPositiveLookback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenMode {
    Word,
    Char,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub mode: TokenMode,
    pub n_min: usize,
    pub n_max: usize,
    #[serde(default = "default_true")]
    pub lowercase: bool,
    #[serde(default)]
    pub stop_words: BTreeSet<String>,
}

fn default_true() -> bool {
    true
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self::words(1)
    }
}

impl TokenizerConfig {
    /// Word n-grams of a single length.
    pub fn words(n: usize) -> Self {
        Self {
            mode: TokenMode::Word,
            n_min: n,
            n_max: n,
            lowercase: true,
            stop_words: BTreeSet::new(),
        }
    }

    /// Character n-grams of a single length.
    pub fn chars(n: usize) -> Self {
        Self {
            mode: TokenMode::Char,
            ..Self::words(n)
        }
    }

    pub fn with_range(mut self, n_min: usize, n_max: usize) -> Self {
        self.n_min = n_min;
        self.n_max = n_max;
        self
    }

    pub fn with_stop_words<I, S>(mut self, words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.stop_words = words.into_iter().map(Into::into).collect();
        self
    }

    pub fn validate(&self) -> Result<(), TokenizeError> {
        if self.n_min == 0 {
            return Err(TokenizeError::InvalidConfig("n_min must be >= 1".into()));
        }
        if self.n_max < self.n_min {
            return Err(TokenizeError::InvalidConfig(format!(
                "n_max ({}) must be >= n_min ({})",
                self.n_max, self.n_min
            )));
        }
        Ok(())
    }

    /// Stop words in the case space the text is compared in.
    fn normalized_stop_words(&self) -> HashSet<String> {
        if self.lowercase {
            self.stop_words.iter().map(|s| s.to_lowercase()).collect()
        } else {
            self.stop_words.iter().cloned().collect()
        }
    }
}

/// A raw log payload as received by a service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogSnippet {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    pub received_at: DateTime<Utc>,
}

impl LogSnippet {
    pub fn new(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            source: None,
            received_at: now_millis(),
        }
    }

    /// Decodes bytes as UTF-8, replacing invalid sequences.
    pub fn from_bytes(bytes: &[u8]) -> Self {
        Self::new(String::from_utf8_lossy(bytes).into_owned())
    }
}

pub(crate) fn now_millis() -> DateTime<Utc> {
    let now = Utc::now();
    Utc.timestamp_millis_opt(now.timestamp_millis())
        .single()
        .unwrap_or(now)
}

/// Splits `text` into tokens according to `config`.
///
/// The config is assumed valid; an invalid range simply yields no n-grams
/// for the lengths it excludes.
pub fn tokenize(text: &str, config: &TokenizerConfig) -> Vec<String> {
    let lowered;
    let text = if config.lowercase {
        lowered = text.to_lowercase();
        lowered.as_str()
    } else {
        text
    };
    match config.mode {
        TokenMode::Word => word_ngrams(text, config),
        TokenMode::Char => char_ngrams(text, config.n_min.max(1), config.n_max),
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Maximal runs of word characters, with stop words dropped.
pub fn base_words<'a>(text: &'a str, stop_words: &HashSet<String>) -> Vec<&'a str> {
    text.split(|c: char| !is_word_char(c))
        .filter(|w| !w.is_empty() && !stop_words.contains(*w))
        .collect()
}

fn word_ngrams(text: &str, config: &TokenizerConfig) -> Vec<String> {
    let words = base_words(text, &config.normalized_stop_words());
    let mut out = Vec::new();
    for n in config.n_min.max(1)..=config.n_max {
        if n > words.len() {
            break;
        }
        out.extend(words.windows(n).map(|w| w.join(" ")));
    }
    out
}

fn collapse_whitespace(text: &str) -> Vec<char> {
    let mut out = Vec::with_capacity(text.len());
    let mut in_space = false;
    for c in text.chars() {
        if c.is_whitespace() {
            if !in_space {
                out.push(' ');
            }
            in_space = true;
        } else {
            out.push(c);
            in_space = false;
        }
    }
    out
}

fn char_ngrams(text: &str, n_min: usize, n_max: usize) -> Vec<String> {
    let chars = collapse_whitespace(text);
    let mut out = Vec::new();
    for n in n_min..=n_max {
        if n > chars.len() {
            break;
        }
        out.extend(chars.windows(n).map(|w| w.iter().collect::<String>()));
    }
    out
}

/// A recognizer for a timestamp at the start of a log line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestampFormat {
    /// `2024-03-01T12:00:00.123Z`, space separator and offsets accepted;
    /// no offset means UTC.
    Iso8601,
    /// `Mar  1 12:00:00`; the year is taken from the failure time.
    Syslog,
    /// A chrono format string matched against the line prefix, read as UTC.
    Strftime(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestampParser {
    pub formats: Vec<TimestampFormat>,
}

impl Default for TimestampParser {
    fn default() -> Self {
        Self {
            formats: vec![TimestampFormat::Iso8601, TimestampFormat::Syslog],
        }
    }
}

fn iso_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"^\s*(\d{4}-\d{2}-\d{2})[T ](\d{2}:\d{2}:\d{2}(?:[.,]\d{1,9})?)(Z|[+-]\d{2}:?\d{2})?",
        )
        .expect("static regex")
    })
}

fn syslog_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^\s*([A-Z][a-z]{2})\s+(\d{1,2}) (\d{2}):(\d{2}):(\d{2})")
            .expect("static regex")
    })
}

const MONTHS: [&str; 12] = [
    "Jan", "Feb", "Mar", "Apr", "May", "Jun", "Jul", "Aug", "Sep", "Oct", "Nov", "Dec",
];

impl TimestampParser {
    /// Parses the leading timestamp of `line`, if any format matches.
    /// `reference_year` fills in formats that carry no year.
    pub fn parse_prefix(&self, line: &str, reference_year: i32) -> Option<DateTime<Utc>> {
        self.formats
            .iter()
            .find_map(|f| parse_with(f, line, reference_year))
    }
}

fn parse_with(format: &TimestampFormat, line: &str, year: i32) -> Option<DateTime<Utc>> {
    match format {
        TimestampFormat::Iso8601 => {
            let caps = iso_regex().captures(line)?;
            let time = caps[2].replace(',', ".");
            let naive = NaiveDateTime::parse_from_str(
                &format!("{} {}", &caps[1], time),
                "%Y-%m-%d %H:%M:%S%.f",
            )
            .ok()?;
            match caps.get(3).map(|m| m.as_str()) {
                None | Some("Z") => Some(Utc.from_utc_datetime(&naive)),
                Some(off) => {
                    let off = off.replace(':', "");
                    let stamp = format!("{} {}", naive.format("%Y-%m-%d %H:%M:%S%.f"), off);
                    DateTime::parse_from_str(&stamp, "%Y-%m-%d %H:%M:%S%.f %z")
                        .ok()
                        .map(|d| d.with_timezone(&Utc))
                }
            }
        }
        TimestampFormat::Syslog => {
            let caps = syslog_regex().captures(line)?;
            let month = MONTHS.iter().position(|m| *m == &caps[1])? as u32 + 1;
            let day: u32 = caps[2].parse().ok()?;
            let (h, m, s): (u32, u32, u32) = (
                caps[3].parse().ok()?,
                caps[4].parse().ok()?,
                caps[5].parse().ok()?,
            );
            let naive = NaiveDate::from_ymd_opt(year, month, day)?.and_hms_opt(h, m, s)?;
            Some(Utc.from_utc_datetime(&naive))
        }
        TimestampFormat::Strftime(fmt) => {
            NaiveDateTime::parse_and_remainder(line.trim_start(), fmt)
                .ok()
                .map(|(naive, _)| Utc.from_utc_datetime(&naive))
        }
    }
}

/// Keeps the lines stamped within `[failure_time - lookback, failure_time]`.
///
/// Lines without a timestamp of their own inherit the last parsed timestamp
/// above them; lines before the first parseable timestamp are dropped. Line
/// terminators are kept as received.
pub fn extract_failure_window(
    log: &LogSnippet,
    failure_time: DateTime<Utc>,
    lookback: TimeDelta,
    parser: &TimestampParser,
) -> Result<LogSnippet, TokenizeError> {
    if lookback <= TimeDelta::zero() {
        return Err(TokenizeError::NonPositiveLookback);
    }
    let start = failure_time - lookback;
    let year = failure_time.year();
    let mut current: Option<DateTime<Utc>> = None;
    let mut seen_any = false;
    let mut kept = String::new();
    for line in log.text.split_inclusive('\n') {
        if let Some(ts) = parser.parse_prefix(line, year) {
            current = Some(ts);
            seen_any = true;
        }
        if let Some(ts) = current {
            if start <= ts && ts <= failure_time {
                kept.push_str(line);
            }
        }
    }
    if !seen_any {
        return Err(TokenizeError::NoParseableTimestamps);
    }
    Ok(LogSnippet {
        text: kept,
        source: log.source.clone(),
        received_at: log.received_at,
    })
}

/// Default lookback before a failure timestamp.
pub const DEFAULT_LOOKBACK: TimeDelta = TimeDelta::seconds(5);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn word_unigrams_lowercased() {
        let toks = tokenize("Kernel ERROR: oom", &TokenizerConfig::words(1));
        assert_eq!(toks, vec!["kernel", "error", "oom"]);
    }

    #[test]
    fn word_bigrams() {
        assert_eq!(
            tokenize("kernel error", &TokenizerConfig::words(2)),
            vec!["kernel error"]
        );
    }

    #[test]
    fn char_trigrams_contain_err() {
        assert_eq!(
            tokenize("error", &TokenizerConfig::chars(3)),
            vec!["err", "rro", "ror"]
        );
    }

    #[test]
    fn empty_text_is_empty() {
        assert!(tokenize("", &TokenizerConfig::words(1)).is_empty());
        assert!(tokenize("", &TokenizerConfig::chars(3)).is_empty());
        assert!(tokenize("  \n", &TokenizerConfig::words(1)).is_empty());
    }

    #[test]
    fn underscore_is_a_word_character() {
        assert_eq!(
            tokenize("mem_alloc failed!", &TokenizerConfig::words(1)),
            vec!["mem_alloc", "failed"]
        );
    }

    #[test]
    fn stop_words_never_appear_inside_ngrams() {
        let cfg = TokenizerConfig::words(1)
            .with_range(1, 2)
            .with_stop_words(["the"]);
        let toks = tokenize("restart the worker", &cfg);
        assert_eq!(toks, vec!["restart", "worker", "restart worker"]);
    }

    #[test]
    fn stop_words_match_case_insensitively_when_lowercasing() {
        let cfg = TokenizerConfig::words(1).with_stop_words(["INFO"]);
        assert_eq!(tokenize("INFO link down", &cfg), vec!["link", "down"]);
    }

    #[test]
    fn char_mode_collapses_whitespace_across_lines() {
        let toks = tokenize("a\n\n b", &TokenizerConfig::chars(3));
        assert_eq!(toks, vec!["a b"]);
    }

    #[test]
    fn unicode_is_word_aware() {
        assert_eq!(
            tokenize("Größe überschritten", &TokenizerConfig::words(1)),
            vec!["größe", "überschritten"]
        );
    }

    #[test]
    fn validation() {
        assert!(TokenizerConfig::words(0).validate().is_err());
        assert!(TokenizerConfig::words(2)
            .with_range(3, 2)
            .validate()
            .is_err());
        assert!(TokenizerConfig::words(1)
            .with_range(1, 3)
            .validate()
            .is_ok());
    }

    fn ts(secs: i64) -> DateTime<Utc> {
        Utc.timestamp_opt(1_700_000_000 + secs, 0).unwrap()
    }

    fn iso_line(secs: i64, msg: &str) -> String {
        format!("{} {}\n", ts(secs).format("%Y-%m-%dT%H:%M:%S%.3fZ"), msg)
    }

    #[test]
    fn window_keeps_last_five_seconds() {
        let text: String = (0..10).map(|i| iso_line(i, &format!("line {i}"))).collect();
        let log = LogSnippet::new(text);
        let out =
            extract_failure_window(&log, ts(9), DEFAULT_LOOKBACK, &TimestampParser::default())
                .unwrap();
        let expected: String = (4..10).map(|i| iso_line(i, &format!("line {i}"))).collect();
        assert_eq!(out.text, expected);
    }

    #[test]
    fn window_covering_everything_is_identity() {
        let text: String = (0..10).map(|i| iso_line(i, "x")).collect();
        let log = LogSnippet::new(text.clone());
        let out = extract_failure_window(
            &log,
            ts(9),
            TimeDelta::seconds(3600),
            &TimestampParser::default(),
        )
        .unwrap();
        assert_eq!(out.text, text);
    }

    #[test]
    fn continuation_lines_inherit_timestamp() {
        let mut text = iso_line(0, "early");
        text.push_str(&iso_line(7, "panic: header"));
        text.push_str("  at frame one\n  at frame two\n  at frame three\n");
        let log = LogSnippet::new(text);
        let out =
            extract_failure_window(&log, ts(9), DEFAULT_LOOKBACK, &TimestampParser::default())
                .unwrap();
        // Independent filter: keep everything from the header line on.
        let expected: String = log.text.lines().skip(1).map(|l| format!("{l}\n")).collect();
        assert_eq!(out.text, expected);
        assert_eq!(out.text.lines().count(), 4);
    }

    #[test]
    fn lines_before_first_timestamp_are_dropped() {
        let text = format!("banner\n{}", iso_line(8, "boot"));
        let out = extract_failure_window(
            &LogSnippet::new(text),
            ts(9),
            DEFAULT_LOOKBACK,
            &TimestampParser::default(),
        )
        .unwrap();
        assert_eq!(out.text, iso_line(8, "boot"));
    }

    #[test]
    fn no_timestamps_is_an_error() {
        let err = extract_failure_window(
            &LogSnippet::new("plain\ntext\n"),
            ts(9),
            DEFAULT_LOOKBACK,
            &TimestampParser::default(),
        )
        .unwrap_err();
        assert_eq!(err, TokenizeError::NoParseableTimestamps);
    }

    #[test]
    fn syslog_and_offset_prefixes() {
        let p = TimestampParser::default();
        let a = p
            .parse_prefix("Mar  1 12:00:05 host kernel: oom", 2024)
            .unwrap();
        assert_eq!(a, Utc.with_ymd_and_hms(2024, 3, 1, 12, 0, 5).unwrap());
        let b = p.parse_prefix("2024-03-01 14:00:05+02:00 x", 2000).unwrap();
        assert_eq!(b, Utc.with_ymd_and_hms(2024, 3, 1, 12, 0, 5).unwrap());
        let custom = TimestampParser {
            formats: vec![TimestampFormat::Strftime("%d/%m/%Y %H:%M:%S".into())],
        };
        let c = custom
            .parse_prefix("01/03/2024 12:00:05 boom", 2000)
            .unwrap();
        assert_eq!(c, Utc.with_ymd_and_hms(2024, 3, 1, 12, 0, 5).unwrap());
        assert!(p.parse_prefix("no stamp here", 2024).is_none());
    }
}
