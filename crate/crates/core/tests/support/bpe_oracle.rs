//! Slow reference merge learner: counts every adjacent pair of every word
//! occurrence from scratch before each merge.

const EOW: &str = "</w>";

fn split_chunk(chunk: &str) -> Vec<Vec<String>> {
    let mut words: Vec<Vec<String>> = Vec::new();
    let mut run: Vec<String> = Vec::new();
    for c in chunk.chars() {
        if c.is_alphanumeric() {
            run.push(c.to_string());
        } else {
            if !run.is_empty() {
                words.push(std::mem::take(&mut run));
            }
            words.push(vec![c.to_string()]);
        }
    }
    if !run.is_empty() {
        words.push(run);
    }
    if let Some(last) = words.last_mut() {
        last.last_mut().unwrap().push_str(EOW);
    }
    words
}

/// Merge list learned from `corpus` with a vocabulary budget of
/// `target_vocab` (four specials plus a plain and a word-final symbol per
/// character).
pub fn brute_force_merges(corpus: &[&str], target_vocab: usize) -> Vec<(String, String)> {
    let mut occurrences: Vec<Vec<String>> = corpus
        .iter()
        .flat_map(|s| s.split_whitespace())
        .flat_map(split_chunk)
        .collect();
    let mut chars: Vec<char> = corpus.iter().flat_map(|s| s.chars()).filter(|c| !c.is_whitespace()).collect();
    chars.sort();
    chars.dedup();
    let mut vocab: Vec<String> = Vec::new();
    for c in &chars {
        vocab.push(c.to_string());
        vocab.push(format!("{c}{EOW}"));
    }
    let mut size = 4 + vocab.len();
    let mut merges = Vec::new();
    while size < target_vocab {
        let mut best: Option<((String, String), usize)> = None;
        let mut seen: Vec<(String, String)> = Vec::new();
        for w in &occurrences {
            for i in 0..w.len().saturating_sub(1) {
                let pair = (w[i].clone(), w[i + 1].clone());
                if seen.contains(&pair) {
                    continue;
                }
                let mut count = 0;
                for v in &occurrences {
                    for k in 0..v.len().saturating_sub(1) {
                        if v[k] == pair.0 && v[k + 1] == pair.1 {
                            count += 1;
                        }
                    }
                }
                let better = match &best {
                    None => true,
                    Some((b, bc)) => count > *bc || (count == *bc && pair < *b),
                };
                if better {
                    best = Some((pair.clone(), count));
                }
                seen.push(pair);
            }
        }
        let Some(((l, r), count)) = best else { break };
        if count < 2 {
            break;
        }
        for w in occurrences.iter_mut() {
            let mut out = Vec::new();
            let mut i = 0;
            while i < w.len() {
                if i + 1 < w.len() && w[i] == l && w[i + 1] == r {
                    out.push(format!("{l}{r}"));
                    i += 2;
                } else {
                    out.push(w[i].clone());
                    i += 1;
                }
            }
            *w = out;
        }
        let joined = format!("{l}{r}");
        if !vocab.contains(&joined) {
            vocab.push(joined);
            size += 1;
        }
        merges.push((l, r));
    }
    merges
}

pub const TOY_CORPUS: [&str; 20] = [
    "the low lower lowest",
    "new newer newest",
    "wide wider widest, the end.",
    "low slow slower",
    "the newest widest road",
    "lower the lowest flag",
    "a road, a lane; a path",
    "slow lanes are the widest",
    "newer roads are lower",
    "the end of the lane",
    "flags fly low",
    "paths end here",
    "here the road bends",
    "bends are slower!",
    "the slowest bend",
    "roads and lanes and paths",
    "a newer flag flies",
    "fly lower, fly slower",
    "wider paths end",
    "the lowest newest lane",
];
