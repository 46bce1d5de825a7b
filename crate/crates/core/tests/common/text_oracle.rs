//! Brute-force n-gram, subsequence and TF-IDF references for the phrase
//! metrics.

use report_grounding::text_metrics::{tokenize, Tokens};

pub const PAIRS: [(&str, &str); 20] = [
    ("small left pleural effusion", "small left pleural effusion"),
    ("pleural effusion", "left pleural effusion"),
    ("small effusion", "small left effusion"),
    ("mild cardiomegaly", "moderate cardiomegaly"),
    ("right upper opacity", "patchy right upper airspace opacity"),
    ("left left left", "left lower lobe"),
    ("large right pneumothorax", "small apical pneumothorax"),
    ("calcified nodule", "solitary pulmonary nodule"),
    ("no acute findings", "linear left lower atelectasis"),
    (
        "focal right mid airspace opacity",
        "focal right mid airspace opacity",
    ),
    ("effusion pleural small", "small pleural effusion"),
    (
        "subsegmental atelectasis",
        "subsegmental atelectasis left base",
    ),
    ("hazy opacity right lower", "hazy right lower opacity"),
    ("the the the the", "the cat sat on the mat"),
    ("severe cardiomegaly with effusion", "severe cardiomegaly"),
    ("apical pneumothorax", "apical pneumothorax"),
    ("left mid nodule", "right mid nodule"),
    (
        "plate atelectasis left lower",
        "plate atelectasis right lower",
    ),
    (
        "moderate left pleural effusion",
        "moderate right pleural effusion",
    ),
    ("opacity", "opacity opacity"),
];

pub fn corpus() -> (Vec<Tokens>, Vec<Tokens>) {
    PAIRS
        .iter()
        .map(|(c, r)| (tokenize(c), tokenize(r)))
        .unzip()
}

pub fn grams(t: &[String], n: usize) -> Vec<Vec<String>> {
    if t.len() < n {
        return Vec::new();
    }
    (0..=t.len() - n).map(|i| t[i..i + n].to_vec()).collect()
}

pub fn count(list: &[Vec<String>], g: &[String]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

pub fn unique(list: &[Vec<String>]) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = Vec::new();
    for g in list {
        if !out.contains(g) {
            out.push(g.clone());
        }
    }
    out
}

pub fn oracle_bleu(cands: &[Tokens], refs: &[Tokens], n: usize) -> f64 {
    let mut log_p = 0.0;
    for order in 1..=n {
        let (mut clipped, mut total) = (0usize, 0usize);
        for (c, r) in cands.iter().zip(refs) {
            let cg = grams(c, order);
            let rg = grams(r, order);
            for g in unique(&cg) {
                clipped += count(&cg, &g).min(count(&rg, &g));
            }
            total += cg.len();
        }
        let num = if clipped == 0 { 1e-9 } else { clipped as f64 };
        log_p += (num / total.max(1) as f64).ln() / n as f64;
    }
    let c: usize = cands.iter().map(|t| t.len()).sum();
    let r: usize = refs.iter().map(|t| t.len()).sum();
    let bp = if c >= r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    bp * log_p.exp()
}

/// Longest common subsequence by enumerating every subsequence of `a`.
pub fn oracle_lcs(a: &[String], b: &[String]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let sub: Vec<&String> = (0..a.len())
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| &a[i])
            .collect();
        let mut it = b.iter();
        if sub.iter().all(|s| it.any(|x| x == *s)) {
            best = best.max(sub.len());
        }
    }
    best
}

pub fn oracle_rouge(cands: &[Tokens], refs: &[Tokens]) -> f64 {
    let mut sum = 0.0;
    for (c, r) in cands.iter().zip(refs) {
        let l = oracle_lcs(c, r) as f64;
        if l > 0.0 {
            let (p, rec) = (l / c.len() as f64, l / r.len() as f64);
            sum += 2.0 * p * rec / (p + rec);
        }
    }
    sum / cands.len() as f64
}

pub fn oracle_cider(cands: &[Tokens], refs: &[Tokens]) -> f64 {
    let docs = refs.len() as f64;
    let idf = |g: &[String], n: usize| {
        let df = refs
            .iter()
            .filter(|r| count(&grams(r, n), g) > 0)
            .count()
            .max(1);
        (docs / df as f64).ln()
    };
    let mut total = 0.0;
    for (c, r) in cands.iter().zip(refs) {
        let mut per_pair = 0.0;
        for n in 1..=4 {
            let (cg, rg) = (grams(c, n), grams(r, n));
            let vocab = unique(&[cg.clone(), rg.clone()].concat());
            let vc: Vec<f64> = vocab
                .iter()
                .map(|g| count(&cg, g) as f64 * idf(g, n))
                .collect();
            let vr: Vec<f64> = vocab
                .iter()
                .map(|g| count(&rg, g) as f64 * idf(g, n))
                .collect();
            let dot: f64 = vc.iter().zip(&vr).map(|(a, b)| a * b).sum();
            let nc = vc.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nr = vr.iter().map(|a| a * a).sum::<f64>().sqrt();
            if nc > 0.0 && nr > 0.0 {
                per_pair += dot / (nc * nr);
            }
        }
        total += 10.0 * per_pair / 4.0;
    }
    total / cands.len() as f64
}
