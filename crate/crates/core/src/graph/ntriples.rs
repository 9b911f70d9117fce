//! Streaming reader for the IRI subset of N-Triples.
//!
//! Only `<subject> <predicate> <object> .` lines with an IRI object become
//! edges. Literal objects and malformed lines are counted and skipped so one
//! bad record never aborts a multi-gigabyte dump.

use std::io::BufRead;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParseStats {
    pub lines: usize,
    pub triples: usize,
    pub literals_skipped: usize,
    pub malformed_skipped: usize,
    pub comments: usize,
}

pub struct NTriplesReader<R> {
    input: R,
    buf: String,
    stats: ParseStats,
    done: bool,
}

pub fn parse_ntriples<R: BufRead>(input: R) -> NTriplesReader<R> {
    NTriplesReader {
        input,
        buf: String::new(),
        stats: ParseStats::default(),
        done: false,
    }
}

enum Line<'a> {
    Skip,
    Edge(&'a str, &'a str),
    Literal,
    Malformed,
}

impl<R: BufRead> NTriplesReader<R> {
    pub fn stats(&self) -> ParseStats {
        self.stats
    }
}

impl<R: BufRead> Iterator for NTriplesReader<R> {
    type Item = Result<(String, String)>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if self.done {
                return None;
            }
            self.buf.clear();
            let read = match self.input.read_line(&mut self.buf) {
                Ok(n) => n,
                Err(e) => {
                    self.done = true;
                    return Some(Err(e.into()));
                }
            };
            if read == 0 {
                self.done = true;
                return None;
            }
            self.stats.lines += 1;
            let at_eof_unterminated = !self.buf.ends_with('\n');
            match classify(&self.buf) {
                Line::Skip => self.stats.comments += 1,
                Line::Edge(s, o) => {
                    self.stats.triples += 1;
                    return Some(Ok((s.to_owned(), o.to_owned())));
                }
                Line::Literal => {
                    self.stats.triples += 1;
                    self.stats.literals_skipped += 1;
                }
                Line::Malformed if at_eof_unterminated => {
                    self.done = true;
                    return Some(Err(Error::Parse {
                        line: self.stats.lines,
                        message: "unterminated statement at end of input".into(),
                    }));
                }
                Line::Malformed => self.stats.malformed_skipped += 1,
            }
        }
    }
}

fn classify(raw: &str) -> Line<'_> {
    let line = raw.trim();
    if line.is_empty() || line.starts_with('#') {
        return Line::Skip;
    }
    let Some((subject, rest)) = take_iri(line) else {
        return Line::Malformed;
    };
    let Some((_predicate, rest)) = take_iri(rest.trim_start()) else {
        return Line::Malformed;
    };
    let rest = rest.trim_start();
    let (object, rest) = if rest.starts_with('<') {
        match take_iri(rest) {
            Some((o, r)) => (Some(o), r),
            None => return Line::Malformed,
        }
    } else if rest.starts_with('"') {
        match skip_literal(rest) {
            Some(r) => (None, r),
            None => return Line::Malformed,
        }
    } else {
        return Line::Malformed;
    };
    let rest = rest.trim_start();
    let Some(tail) = rest.strip_prefix('.') else {
        return Line::Malformed;
    };
    let tail = tail.trim_start();
    if !(tail.is_empty() || tail.starts_with('#')) {
        return Line::Malformed;
    }
    match object {
        Some(o) => Line::Edge(subject, o),
        None => Line::Literal,
    }
}

/// `<iri>` at the start of `s`; returns the IRI body and the remainder.
fn take_iri(s: &str) -> Option<(&str, &str)> {
    let body = s.strip_prefix('<')?;
    let end = body.find('>')?;
    let iri = &body[..end];
    if iri.is_empty() || iri.chars().any(|c| c.is_whitespace() || c == '<' || c == '"') {
        return None;
    }
    Some((iri, &body[end + 1..]))
}

/// Skip a quoted literal with optional `@lang` or `^^<datatype>` suffix.
fn skip_literal(s: &str) -> Option<&str> {
    let bytes = s.as_bytes();
    let mut i = 1;
    loop {
        match bytes.get(i)? {
            b'\\' => i += 2,
            b'"' => break,
            _ => i += 1,
        }
    }
    let rest = &s[i + 1..];
    if let Some(lang) = rest.strip_prefix('@') {
        let end = lang
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '-'))
            .unwrap_or(lang.len());
        if end == 0 {
            return None;
        }
        Some(&lang[end..])
    } else if let Some(dt) = rest.strip_prefix("^^") {
        take_iri(dt).map(|(_, r)| r)
    } else {
        Some(rest)
    }
}
