//! Tab- and whitespace-separated corpus files.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::{Qrels, RankedEntry, RankedRun};
use crate::gaze::FixationRecord;
use crate::ranker::TrainingTriple;

pub(crate) fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Non-empty lines with their 1-based numbers; a trailing `\r` is dropped.
fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)))
        .filter(|(_, l)| !l.trim().is_empty())
}

fn columns<'a>(line: &'a str, n: usize, source: &str, no: usize) -> Result<Vec<&'a str>> {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != n {
        return Err(Error::parse(
            source,
            no,
            format!("expected {n} tab-separated columns, found {}", cols.len()),
        ));
    }
    if let Some(i) = cols.iter().position(|c| c.trim().is_empty()) {
        return Err(Error::parse(source, no, format!("column {} is empty", i + 1)));
    }
    Ok(cols)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextRecord {
    pub id: String,
    pub text: String,
}

fn parse_id_text(text: &str, source: &str, what: &str) -> Result<Vec<TextRecord>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (no, line) in lines(text) {
        let c = columns(line, 2, source, no)?;
        if !seen.insert(c[0]) {
            return Err(Error::parse(source, no, format!("duplicate {what} id {:?}", c[0])));
        }
        out.push(TextRecord {
            id: c[0].to_string(),
            text: c[1].to_string(),
        });
    }
    Ok(out)
}

/// `qid \t text`
pub fn parse_queries(text: &str, source: &str) -> Result<Vec<TextRecord>> {
    parse_id_text(text, source, "query")
}

/// `docid \t text`
pub fn parse_collection(text: &str, source: &str) -> Result<Vec<TextRecord>> {
    parse_id_text(text, source, "document")
}

/// `query \t positive \t negative`
pub fn parse_triples(text: &str, source: &str) -> Result<Vec<TrainingTriple>> {
    lines(text)
        .map(|(no, line)| {
            let c = columns(line, 3, source, no)?;
            TrainingTriple::new(c[0], c[1], c[2]).map_err(|e| Error::parse(source, no, e.to_string()))
        })
        .collect()
}

/// Candidate lists per query, in the file's rank order.
pub type Candidates = BTreeMap<String, Vec<String>>;

/// `qid \t docid \t rank`
pub fn parse_candidates(text: &str, source: &str) -> Result<Candidates> {
    let mut ranked: BTreeMap<String, Vec<(usize, String, usize)>> = BTreeMap::new();
    for (no, line) in lines(text) {
        let c = columns(line, 3, source, no)?;
        let rank: usize = c[2]
            .trim()
            .parse()
            .map_err(|e| Error::parse(source, no, format!("bad rank {:?}: {e}", c[2])))?;
        ranked
            .entry(c[0].to_string())
            .or_default()
            .push((rank, c[1].to_string(), no));
    }
    let mut out = Candidates::new();
    for (qid, mut list) in ranked {
        list.sort_by_key(|(r, _, _)| *r);
        let mut docs = HashSet::new();
        for w in list.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::parse(
                    source,
                    w[1].2,
                    format!("rank {} repeated for query {qid}", w[1].0),
                ));
            }
        }
        for (_, d, no) in &list {
            if !docs.insert(d.clone()) {
                return Err(Error::parse(
                    source,
                    *no,
                    format!("document {d} listed twice for query {qid}"),
                ));
            }
        }
        out.insert(qid, list.into_iter().map(|(_, d, _)| d).collect());
    }
    Ok(out)
}

/// `qid 0 docid grade`, whitespace-separated.
pub fn parse_qrels(text: &str, source: &str) -> Result<Qrels> {
    let mut q = Qrels::new();
    for (no, line) in lines(text) {
        let c: Vec<&str> = line.split_whitespace().collect();
        if c.len() != 4 {
            return Err(Error::parse(
                source,
                no,
                format!("expected 4 fields, found {}", c.len()),
            ));
        }
        let grade: i64 = c[3]
            .parse()
            .map_err(|e| Error::parse(source, no, format!("bad grade {:?}: {e}", c[3])))?;
        q.insert(c[0], c[2], grade)
            .map_err(|e| Error::parse(source, no, e.to_string()))?;
    }
    Ok(q)
}

pub fn format_qrels(q: &Qrels) -> String {
    let mut s = String::new();
    for (qid, doc, g) in q.entries() {
        let _ = writeln!(s, "{qid} 0 {doc} {g}");
    }
    s
}

/// `qid Q0 docid rank score tag`, score to six decimals, ordered by
/// query id then rank.
pub fn format_run(run: &RankedRun, tag: &str) -> String {
    let mut s = String::new();
    for (qid, list) in run.iter() {
        for e in list {
            let _ = writeln!(s, "{qid} Q0 {} {} {:.6} {tag}", e.doc_id, e.rank, e.score);
        }
    }
    s
}

pub fn write_run_file(run: &RankedRun, tag: &str, path: &Path) -> Result<()> {
    if tag.is_empty() || tag.contains(char::is_whitespace) {
        return Err(Error::invalid(format!("run tag {tag:?} must be one non-empty word")));
    }
    write(path, format_run(run, tag).as_bytes())
}

/// Parses a run file; lines of one query may appear in any order.
pub fn parse_run(text: &str, source: &str) -> Result<RankedRun> {
    let mut lists: BTreeMap<String, Vec<RankedEntry>> = BTreeMap::new();
    for (no, line) in lines(text) {
        let c: Vec<&str> = line.split_whitespace().collect();
        if c.len() != 6 {
            return Err(Error::parse(
                source,
                no,
                format!("expected 6 fields, found {}", c.len()),
            ));
        }
        let rank: usize = c[3]
            .parse()
            .map_err(|e| Error::parse(source, no, format!("bad rank {:?}: {e}", c[3])))?;
        let score: f64 = c[4]
            .parse()
            .map_err(|e| Error::parse(source, no, format!("bad score {:?}: {e}", c[4])))?;
        lists.entry(c[0].to_string()).or_default().push(RankedEntry {
            doc_id: c[2].to_string(),
            score,
            rank,
        });
    }
    let mut run = RankedRun::new();
    for (qid, mut list) in lists {
        list.sort_by_key(|e| e.rank);
        run.insert(qid, list)
            .map_err(|e| Error::parse(source, 0, e.to_string()))?;
    }
    Ok(run)
}

pub const FIXATION_HEADER: [&str; 4] = ["dataset_id", "sentence_id", "token", "fixation_ms"];

/// Eye-tracking TSV with a header row.
pub fn parse_fixations(text: &str, source: &str) -> Result<Vec<FixationRecord>> {
    let mut it = lines(text);
    let (no, header) = it.next().ok_or_else(|| Error::parse(source, 1, "missing header"))?;
    if header.split('\t').map(str::trim).collect::<Vec<_>>() != FIXATION_HEADER {
        return Err(Error::parse(
            source,
            no,
            format!("header must be {}", FIXATION_HEADER.join("\\t")),
        ));
    }
    it.map(|(no, line)| {
        let c = columns(line, 4, source, no)?;
        let ms: f64 = c[3]
            .trim()
            .parse()
            .map_err(|e| Error::parse(source, no, format!("bad duration {:?}: {e}", c[3])))?;
        if !(ms >= 0.0 && ms.is_finite()) {
            return Err(Error::parse(
                source,
                no,
                format!("duration {ms} must be finite and >= 0"),
            ));
        }
        Ok(FixationRecord {
            dataset_id: c[0].to_string(),
            sentence_id: c[1].to_string(),
            token: c[2].to_string(),
            fixation_ms: ms,
        })
    })
    .collect()
}

pub fn format_fixations(records: &[FixationRecord]) -> String {
    let mut s = FIXATION_HEADER.join("\t");
    s.push('\n');
    for r in records {
        let _ = writeln!(s, "{}\t{}\t{}\t{}", r.dataset_id, r.sentence_id, r.token, r.fixation_ms);
    }
    s
}

pub fn format_records(records: &[TextRecord]) -> String {
    records.iter().map(|r| format!("{}\t{}\n", r.id, r.text)).collect()
}

pub fn format_triples(triples: &[TrainingTriple]) -> String {
    triples
        .iter()
        .map(|t| format!("{}\t{}\t{}\n", t.query, t.positive, t.negative))
        .collect()
}

pub fn format_candidates(c: &Candidates) -> String {
    let mut s = String::new();
    for (qid, docs) in c {
        for (i, d) in docs.iter().enumerate() {
            let _ = writeln!(s, "{qid}\t{d}\t{}", i + 1);
        }
    }
    s
}

pub fn load_queries(path: &Path) -> Result<Vec<TextRecord>> {
    parse_queries(&read(path)?, &path.display().to_string())
}

pub fn load_collection(path: &Path) -> Result<Vec<TextRecord>> {
    parse_collection(&read(path)?, &path.display().to_string())
}

pub fn load_triples(path: &Path) -> Result<Vec<TrainingTriple>> {
    parse_triples(&read(path)?, &path.display().to_string())
}

pub fn load_candidates(path: &Path) -> Result<Candidates> {
    parse_candidates(&read(path)?, &path.display().to_string())
}

pub fn load_qrels_file(path: &Path) -> Result<Qrels> {
    parse_qrels(&read(path)?, &path.display().to_string())
}

pub fn load_run_file(path: &Path) -> Result<RankedRun> {
    parse_run(&read(path)?, &path.display().to_string())
}

pub fn load_fixations(path: &Path) -> Result<Vec<FixationRecord>> {
    parse_fixations(&read(path)?, &path.display().to_string())
}
