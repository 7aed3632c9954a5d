//! Corpus-level BLEU, ROUGE-L, METEOR without synonymy, and CIDEr, all
//! against multiple references.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Stand-in precision for an n-gram order with no matches.
pub const BLEU_EPSILON: f64 = 1e-9;
pub const ROUGE_BETA: f64 = 1.2;
pub const METEOR_ALPHA: f64 = 0.9;
pub const CIDER_MAX_ORDER: usize = 4;
pub const CIDER_SCALE: f64 = 10.0;

/// One candidate with its references, already tokenized.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalItem {
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl EvalItem {
    pub fn new<S: AsRef<str>>(candidate: &[S], references: &[Vec<S>]) -> Self {
        let own = |ws: &[S]| ws.iter().map(|w| w.as_ref().to_string()).collect();
        Self {
            candidate: own(candidate),
            references: references.iter().map(|r| own(r)).collect(),
        }
    }
}

fn validate(corpus: &[EvalItem]) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::Empty("evaluation corpus has no items".into()));
    }
    if let Some(i) = corpus.iter().position(|it| it.references.is_empty()) {
        return Err(Error::Validation(format!("item {i} has no references")));
    }
    Ok(())
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU up to order `max_n`, with clipping against the largest
/// count in any reference and the closest-length brevity penalty.
pub fn bleu(corpus: &[EvalItem], max_n: usize) -> Result<f64> {
    validate(corpus)?;
    if !(1..=4).contains(&max_n) {
        return Err(Error::Config(format!("BLEU order {max_n} outside 1..=4")));
    }
    let mut clipped = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for item in corpus {
        let c = item.candidate.len();
        cand_len += c;
        ref_len += closest_length(c, &item.references);
        for n in 1..=max_n {
            let cand = ngram_counts(&item.candidate, n);
            let refs: Vec<_> = item.references.iter().map(|r| ngram_counts(r, n)).collect();
            for (g, &count) in &cand {
                let max_ref = refs
                    .iter()
                    .map(|r| r.get(g).copied().unwrap_or(0))
                    .max()
                    .unwrap_or(0);
                clipped[n - 1] += count.min(max_ref);
                totals[n - 1] += count;
            }
        }
    }
    if cand_len == 0 {
        return Ok(0.0);
    }
    let log_mean = (0..max_n)
        .map(|k| {
            let p = if clipped[k] == 0 {
                BLEU_EPSILON
            } else {
                clipped[k] as f64 / totals[k] as f64
            };
            p.ln()
        })
        .sum::<f64>()
        / max_n as f64;
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(bp * log_mean.exp())
}

/// Reference length closest to `c`, the shorter one on ties.
fn closest_length(c: usize, refs: &[Vec<String>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

pub fn lcs_length(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure with recall weighted by `ROUGE_BETA`.
pub fn rouge_l_pair(candidate: &[String], reference: &[String]) -> f64 {
    let l = lcs_length(candidate, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / candidate.len() as f64;
    let r = l as f64 / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Mean over items of the best ROUGE-L F against any reference.
pub fn rouge_l(corpus: &[EvalItem]) -> Result<f64> {
    validate(corpus)?;
    let total: f64 = corpus
        .iter()
        .map(|it| {
            it.references
                .iter()
                .map(|r| rouge_l_pair(&it.candidate, r))
                .fold(0.0, f64::max)
        })
        .sum();
    Ok(total / corpus.len() as f64)
}

fn undouble(stem: &str) -> String {
    let b = stem.as_bytes();
    let n = b.len();
    if n >= 2 && b[n - 1] == b[n - 2] && !b"aeiouylsz".contains(&b[n - 1]) {
        stem[..n - 1].to_string()
    } else {
        stem.to_string()
    }
}

/// Suffix-stripping stemmer for plural `-s`/`-es`, `-ed` and `-ing`.
/// Stems keep at least three characters.
pub fn stem(word: &str) -> String {
    let w = word.to_lowercase();
    if !w.is_ascii() {
        return w;
    }
    let n = w.len();
    if n >= 6 && w.ends_with("ing") {
        return undouble(&w[..n - 3]);
    }
    if n >= 5 && w.ends_with("ed") {
        return undouble(&w[..n - 2]);
    }
    if n >= 5 && w.ends_with("ies") {
        return format!("{}y", &w[..n - 3]);
    }
    if n >= 4 && w.ends_with("sses") {
        return w[..n - 2].to_string();
    }
    if n >= 5
        && ["xes", "zes", "ches", "shes", "sses"]
            .iter()
            .any(|s| w.ends_with(s))
    {
        return w[..n - 2].to_string();
    }
    if n >= 4 && w.ends_with('s') && !w.ends_with("ss") && !w.ends_with("us") && !w.ends_with("is")
    {
        return w[..n - 1].to_string();
    }
    w
}

/// Unigram alignment between a candidate and one reference.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alignment {
    pub matches: usize,
    pub chunks: usize,
}

/// Exact matches first, then stem matches among the leftovers; within
/// those counts, the pairing with the fewest chunks.
///
/// Per word type the exact-match count is `min(count in candidate, count in
/// reference)`; per stem the stem-match count is the same minimum over the
/// tokens the exact stage left. The search only chooses which tokens pair up.
pub fn align(candidate: &[String], reference: &[String]) -> Alignment {
    let cs: Vec<String> = candidate.iter().map(|w| stem(w)).collect();
    let rs: Vec<String> = reference.iter().map(|w| stem(w)).collect();

    let mut exact_budget: HashMap<&str, usize> = HashMap::new();
    {
        let mut cc: HashMap<&str, usize> = HashMap::new();
        let mut rc: HashMap<&str, usize> = HashMap::new();
        for w in candidate {
            *cc.entry(w).or_default() += 1;
        }
        for w in reference {
            *rc.entry(w).or_default() += 1;
        }
        for (w, &c) in &cc {
            if let Some(&r) = rc.get(w) {
                exact_budget.insert(w, c.min(r));
            }
        }
    }
    // Leftover tokens per stem after the exact stage.
    let mut stem_budget: HashMap<&str, usize> = HashMap::new();
    {
        let mut cl: HashMap<&str, usize> = HashMap::new();
        let mut rl: HashMap<&str, usize> = HashMap::new();
        let mut seen_c: HashMap<&str, usize> = HashMap::new();
        for (w, s) in candidate.iter().zip(&cs) {
            let used = seen_c.entry(w).or_default();
            *used += 1;
            if *used > exact_budget.get(w.as_str()).copied().unwrap_or(0) {
                *cl.entry(s).or_default() += 1;
            }
        }
        let mut seen_r: HashMap<&str, usize> = HashMap::new();
        for (w, s) in reference.iter().zip(&rs) {
            let used = seen_r.entry(w).or_default();
            *used += 1;
            if *used > exact_budget.get(w.as_str()).copied().unwrap_or(0) {
                *rl.entry(s).or_default() += 1;
            }
        }
        for (s, &c) in &cl {
            if let Some(&r) = rl.get(s) {
                stem_budget.insert(s, c.min(r));
            }
        }
    }
    let matches = exact_budget.values().sum::<usize>() + stem_budget.values().sum::<usize>();
    if matches == 0 {
        return Alignment {
            matches: 0,
            chunks: 0,
        };
    }
    let mut search = ChunkSearch {
        cand: candidate,
        refr: reference,
        cs: &cs,
        rs: &rs,
        exact_budget,
        stem_budget,
        used: vec![false; reference.len()],
        pairs: vec![None; candidate.len()],
        best_adjacent: 0,
        found: false,
        target: matches,
    };
    search.run(0, 0, 0);
    debug_assert!(search.found);
    Alignment {
        matches,
        chunks: matches - search.best_adjacent,
    }
}

/// Depth-first search over pairings that meet the exact and stem budgets,
/// maximizing the number of adjacent matched pairs (fewest chunks).
struct ChunkSearch<'a> {
    cand: &'a [String],
    refr: &'a [String],
    cs: &'a [String],
    rs: &'a [String],
    exact_budget: HashMap<&'a str, usize>,
    stem_budget: HashMap<&'a str, usize>,
    used: Vec<bool>,
    pairs: Vec<Option<usize>>,
    best_adjacent: usize,
    found: bool,
    target: usize,
}

impl ChunkSearch<'_> {
    fn run(&mut self, i: usize, matched: usize, adjacent: usize) {
        let remaining = self.cand.len() - i;
        if matched + remaining < self.target {
            return;
        }
        // Every further match can add at most one adjacency.
        let needed = self.target - matched;
        if self.found && adjacent + needed <= self.best_adjacent {
            return;
        }
        if i == self.cand.len() {
            if matched == self.target && (!self.found || adjacent > self.best_adjacent) {
                self.found = true;
                self.best_adjacent = adjacent;
            }
            return;
        }
        if matched < self.target {
            for j in 0..self.refr.len() {
                if self.used[j] {
                    continue;
                }
                let exact = self.cand[i] == self.refr[j];
                let key: &str = if exact { &self.cand[i] } else { &self.cs[i] };
                if !exact && self.cs[i] != self.rs[j] {
                    continue;
                }
                let budget = if exact {
                    self.exact_budget.get_mut(key)
                } else {
                    self.stem_budget.get_mut(key)
                };
                let Some(b) = budget else { continue };
                if *b == 0 {
                    continue;
                }
                *b -= 1;
                let adj = usize::from(i > 0 && j > 0 && self.pairs[i - 1] == Some(j - 1));
                self.used[j] = true;
                self.pairs[i] = Some(j);
                self.run(i + 1, matched + 1, adjacent + adj);
                self.pairs[i] = None;
                self.used[j] = false;
                let budget = if exact {
                    self.exact_budget.get_mut(key)
                } else {
                    self.stem_budget.get_mut(key)
                };
                *budget.expect("restored") += 1;
            }
        }
        self.run(i + 1, matched, adjacent);
    }
}

/// Harmonic-mean score with fragmentation penalty for one pair.
pub fn meteor_pair(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let a = align(candidate, reference);
    if a.matches == 0 {
        return 0.0;
    }
    let m = a.matches as f64;
    let p = m / candidate.len() as f64;
    let r = m / reference.len() as f64;
    let f = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let penalty = 0.5 * (a.chunks as f64 / m).powi(3);
    f * (1.0 - penalty)
}

pub fn meteor_lite(corpus: &[EvalItem]) -> Result<f64> {
    validate(corpus)?;
    let total: f64 = corpus
        .iter()
        .map(|it| {
            it.references
                .iter()
                .map(|r| meteor_pair(&it.candidate, r))
                .fold(0.0, f64::max)
        })
        .sum();
    Ok(total / corpus.len() as f64)
}

/// Plain CIDEr: tf-idf n-gram cosine against each reference, averaged over
/// references and orders 1..4, times 10, averaged over items. Document
/// frequency counts items whose references contain the n-gram.
pub fn cider_per_item(corpus: &[EvalItem]) -> Result<Vec<f64>> {
    validate(corpus)?;
    if corpus.len() < 2 {
        return Err(Error::IdfDegenerate(corpus.len()));
    }
    let n_docs = corpus.len() as f64;
    let mut scores = vec![0.0; corpus.len()];
    for n in 1..=CIDER_MAX_ORDER {
        let mut df: HashMap<&[String], usize> = HashMap::new();
        for it in corpus {
            let mut present: Vec<&[String]> = it
                .references
                .iter()
                .flat_map(|r| {
                    if r.len() >= n {
                        r.windows(n).collect()
                    } else {
                        Vec::new()
                    }
                })
                .collect();
            present.sort();
            present.dedup();
            for g in present {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        let idf = |g: &[String]| (n_docs / df.get(g).copied().unwrap_or(0).max(1) as f64).ln();
        fn weighted<'t>(
            tokens: &'t [String],
            n: usize,
            idf: &dyn Fn(&[String]) -> f64,
        ) -> HashMap<&'t [String], f64> {
            ngram_counts(tokens, n)
                .into_iter()
                .map(|(g, c)| (g, c as f64 * idf(g)))
                .collect()
        }
        let vector = |tokens| weighted(tokens, n, &idf);
        for (k, it) in corpus.iter().enumerate() {
            let cv = vector(&it.candidate);
            let cn = norm(&cv);
            let mut sum = 0.0;
            for r in &it.references {
                let rv = vector(r);
                let rn = norm(&rv);
                if cn > 0.0 && rn > 0.0 {
                    let dot: f64 = cv
                        .iter()
                        .map(|(g, v)| v * rv.get(g).copied().unwrap_or(0.0))
                        .sum();
                    sum += dot / (cn * rn);
                }
            }
            scores[k] += sum / it.references.len() as f64;
        }
    }
    Ok(scores
        .into_iter()
        .map(|s| CIDER_SCALE * s / CIDER_MAX_ORDER as f64)
        .collect())
}

fn norm(v: &HashMap<&[String], f64>) -> f64 {
    // Sorted so the result does not depend on hash order.
    let mut sq: Vec<f64> = v.values().map(|x| x * x).collect();
    sq.sort_by(f64::total_cmp);
    sq.iter().sum::<f64>().sqrt()
}

pub fn cider(corpus: &[EvalItem]) -> Result<f64> {
    let per = cider_per_item(corpus)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub meteor: f64,
    pub cider: f64,
    pub items: usize,
}

impl MetricReport {
    /// Flat `key=value` lines with six decimals, preceded by `extra` metadata.
    pub fn to_text(&self, extra: &[(String, String)]) -> String {
        let mut s = String::new();
        for (k, v) in extra {
            s.push_str(&format!("{k}={v}\n"));
        }
        s.push_str(&format!("items={}\n", self.items));
        s.push_str(&format!("bleu_smoothing=epsilon {BLEU_EPSILON:e}\n"));
        for (n, b) in self.bleu.iter().enumerate() {
            s.push_str(&format!("bleu_{}={b:.6}\n", n + 1));
        }
        s.push_str(&format!("rouge_l={:.6}\n", self.rouge_l));
        s.push_str(&format!("meteor={:.6}\n", self.meteor));
        s.push_str(&format!("cider={:.6}\n", self.cider));
        s
    }
}

pub fn evaluate_corpus(corpus: &[EvalItem]) -> Result<MetricReport> {
    Ok(MetricReport {
        bleu: [
            bleu(corpus, 1)?,
            bleu(corpus, 2)?,
            bleu(corpus, 3)?,
            bleu(corpus, 4)?,
        ],
        rouge_l: rouge_l(corpus)?,
        meteor: meteor_lite(corpus)?,
        cider: cider(corpus)?,
        items: corpus.len(),
    })
}
