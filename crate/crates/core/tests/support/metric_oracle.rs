//! Naive recount versions of the corpus metrics. Slow on purpose: n-grams are
//! space-joined strings, LCS is found by enumerating subsequences and the
//! unigram alignment by enumerating every partial matching.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Item = (Vec<String>, Vec<Vec<String>>);

fn grams(t: &[String], n: usize) -> Vec<String> {
    if t.len() < n {
        return Vec::new();
    }
    (0..=t.len() - n).map(|i| t[i..i + n].join(" ")).collect()
}

fn count(list: &[String], g: &str) -> usize {
    list.iter().filter(|x| *x == g).count()
}

pub fn bleu(corpus: &[Item], max_n: usize) -> f64 {
    let c: usize = corpus.iter().map(|(c, _)| c.len()).sum();
    if c == 0 {
        return 0.0;
    }
    let mut r = 0usize;
    for (cand, refs) in corpus {
        let mut lens: Vec<usize> = refs.iter().map(Vec::len).collect();
        lens.sort_by_key(|&l| ((l as i64 - cand.len() as i64).abs(), l));
        r += lens[0];
    }
    let mut product = 1.0;
    for n in 1..=max_n {
        let (mut hit, mut total) = (0usize, 0usize);
        for (cand, refs) in corpus {
            let cg = grams(cand, n);
            let distinct: BTreeSet<&String> = cg.iter().collect();
            for g in distinct {
                let in_cand = count(&cg, g);
                let best = refs.iter().map(|rf| count(&grams(rf, n), g)).max().unwrap();
                hit += in_cand.min(best);
            }
            total += cg.len();
        }
        let p = if hit == 0 {
            1e-9
        } else {
            hit as f64 / total as f64
        };
        product *= p.powf(1.0 / max_n as f64);
    }
    let bp = if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    bp * product
}

fn is_subsequence(sub: &[&String], of: &[String]) -> bool {
    let mut it = of.iter();
    sub.iter().all(|s| it.any(|x| x == *s))
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let sub: Vec<&String> = (0..a.len())
            .filter(|i| mask >> i & 1 == 1)
            .map(|i| &a[i])
            .collect();
        if sub.len() > best && is_subsequence(&sub, b) {
            best = sub.len();
        }
    }
    best
}

pub fn rouge_l(corpus: &[Item]) -> f64 {
    let mut total = 0.0;
    for (cand, refs) in corpus {
        let mut best: f64 = 0.0;
        for rf in refs {
            let l = lcs(cand, rf) as f64;
            if l > 0.0 {
                let (p, r) = (l / cand.len() as f64, l / rf.len() as f64);
                best = best.max(2.44 * p * r / (r + 1.44 * p));
            }
        }
        total += best;
    }
    total / corpus.len() as f64
}

/// Rule table: (suffix, minimum word length, replacement, undouble).
const RULES: [(&str, usize, &str, bool); 8] = [
    ("ing", 6, "", true),
    ("ed", 5, "", true),
    ("ies", 5, "y", false),
    ("sses", 4, "ss", false),
    ("xes", 5, "x", false),
    ("zes", 5, "z", false),
    ("ches", 5, "ch", false),
    ("shes", 5, "sh", false),
];

pub fn stem(w: &str) -> String {
    let w = w.to_lowercase();
    for (suffix, min, rep, undouble) in RULES {
        if w.len() >= min {
            if let Some(base) = w.strip_suffix(suffix) {
                let mut s = format!("{base}{rep}");
                let b: Vec<char> = s.chars().collect();
                let k = b.len();
                if undouble && k >= 2 && b[k - 1] == b[k - 2] && !"aeiouylsz".contains(b[k - 1]) {
                    s.pop();
                }
                return s;
            }
        }
    }
    let plural =
        w.len() >= 4 && w.ends_with('s') && !["ss", "us", "is"].iter().any(|e| w.ends_with(e));
    if plural {
        w[..w.len() - 1].to_string()
    } else {
        w
    }
}

/// Every partial matching, scored by (exact pairs, total pairs, -chunks).
fn best_alignment(cand: &[String], rf: &[String]) -> (usize, usize) {
    fn go(
        i: usize,
        cand: &[String],
        rf: &[String],
        used: &mut Vec<bool>,
        pairs: &mut Vec<(usize, usize)>,
        best: &mut (usize, usize, i64),
    ) {
        if i == cand.len() {
            let exact = pairs.iter().filter(|&&(a, b)| cand[a] == rf[b]).count();
            let mut chunks = 0i64;
            for (k, &(a, b)) in pairs.iter().enumerate() {
                if k == 0 || pairs[k - 1] != (a - 1, b.wrapping_sub(1)) {
                    chunks += 1;
                }
            }
            let key = (exact, pairs.len(), -chunks);
            if key > *best {
                *best = key;
            }
            return;
        }
        go(i + 1, cand, rf, used, pairs, best);
        for j in 0..rf.len() {
            if !used[j] && (cand[i] == rf[j] || stem(&cand[i]) == stem(&rf[j])) {
                used[j] = true;
                pairs.push((i, j));
                go(i + 1, cand, rf, used, pairs, best);
                pairs.pop();
                used[j] = false;
            }
        }
    }
    let mut best = (0, 0, 0);
    go(
        0,
        cand,
        rf,
        &mut vec![false; rf.len()],
        &mut Vec::new(),
        &mut best,
    );
    (best.1, (-best.2) as usize)
}

pub fn meteor(corpus: &[Item]) -> f64 {
    let mut total = 0.0;
    for (cand, refs) in corpus {
        let mut best: f64 = 0.0;
        for rf in refs {
            let (m, chunks) = best_alignment(cand, rf);
            if m > 0 {
                let m = m as f64;
                let (p, r) = (m / cand.len() as f64, m / rf.len() as f64);
                let f = 10.0 * p * r / (r + 9.0 * p);
                best = best.max(f * (1.0 - 0.5 * (chunks as f64 / m).powi(3)));
            }
        }
        total += best;
    }
    total / corpus.len() as f64
}

pub fn cider_items(corpus: &[Item]) -> Vec<f64> {
    let docs = corpus.len() as f64;
    let mut out = vec![0.0; corpus.len()];
    for n in 1..=4 {
        let mut df: BTreeMap<String, f64> = BTreeMap::new();
        for (_, refs) in corpus {
            let present: BTreeSet<String> = refs.iter().flat_map(|r| grams(r, n)).collect();
            for g in present {
                *df.entry(g).or_default() += 1.0;
            }
        }
        let vec_of = |t: &[String]| -> BTreeMap<String, f64> {
            let mut v = BTreeMap::new();
            for g in grams(t, n) {
                let idf = (docs / df.get(&g).copied().unwrap_or(1.0)).ln();
                *v.entry(g).or_insert(0.0) += idf;
            }
            v
        };
        for (k, (cand, refs)) in corpus.iter().enumerate() {
            let cv = vec_of(cand);
            let mut acc = 0.0;
            for rf in refs {
                let rv = vec_of(rf);
                let dot: f64 = cv.iter().map(|(g, x)| x * rv.get(g).unwrap_or(&0.0)).sum();
                let nc = cv.values().map(|x| x * x).sum::<f64>().sqrt();
                let nr = rv.values().map(|x| x * x).sum::<f64>().sqrt();
                if nc > 0.0 && nr > 0.0 {
                    acc += dot / (nc * nr);
                }
            }
            out[k] += acc / refs.len() as f64;
        }
    }
    out.iter().map(|s| s * 10.0 / 4.0).collect()
}

pub fn cider(corpus: &[Item]) -> f64 {
    let v = cider_items(corpus);
    v.iter().sum::<f64>() / v.len() as f64
}

const WORDS: [&str; 14] = [
    "the", "a", "cat", "cats", "run", "running", "runs", "red", "box", "boxes", "jumped", "jump",
    "what", "?",
];

fn sentence(rng: &mut ChaCha8Rng, min: usize, max: usize) -> Vec<String> {
    let len = rng.gen_range(min..=max);
    (0..len)
        .map(|_| WORDS.choose(rng).unwrap().to_string())
        .collect()
}

/// 2..=5 items, candidates of 0..=8 tokens, 1..=3 references of 1..=8 tokens.
pub fn random_corpus(seed: u64) -> Vec<Item> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = rng.gen_range(2..=5);
    (0..items)
        .map(|_| {
            let cand = sentence(&mut rng, 0, 8);
            let nrefs = rng.gen_range(1..=3);
            let refs = (0..nrefs).map(|_| sentence(&mut rng, 1, 8)).collect();
            (cand, refs)
        })
        .collect()
}
