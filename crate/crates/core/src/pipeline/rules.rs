use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::PipelineError;
use crate::scoring::normalize;

/// Word swaps that keep a clinical question's meaning.
pub const SYNONYMS: &[(&str, &str)] = &[
    ("image", "picture"),
    ("picture", "image"),
    ("photo", "image"),
    ("show", "display"),
    ("shows", "displays"),
    ("display", "show"),
    ("displays", "shows"),
    ("depict", "show"),
    ("depicts", "shows"),
    ("demonstrate", "show"),
    ("demonstrates", "shows"),
    ("seen", "visible"),
    ("visible", "seen"),
    ("observed", "seen"),
    ("noted", "seen"),
    ("evident", "apparent"),
    ("apparent", "evident"),
    ("abnormality", "anomaly"),
    ("abnormalities", "anomalies"),
    ("anomaly", "abnormality"),
    ("anomalies", "abnormalities"),
    ("large", "big"),
    ("big", "large"),
    ("located", "situated"),
    ("situated", "located"),
    ("region", "area"),
    ("area", "region"),
    ("identify", "find"),
    ("find", "identify"),
];

/// Anatomy and modality terms that are never rewritten.
pub const PROTECTED: &[&str] = &[
    "abdomen", "adrenal", "aorta", "artery", "bladder", "bone", "bowel", "brain", "breast",
    "chest", "colon", "ct", "diaphragm", "esophagus", "femur", "gallbladder", "heart", "hip",
    "kidney", "kidneys", "knee", "liver", "lobe", "lung", "lungs", "mri", "pancreas", "pelvis",
    "pet", "rib", "ribs", "skull", "spine", "spleen", "stomach", "trachea", "ultrasound", "uterus",
    "vein", "ventricle", "vertebra", "x-ray", "xray", "radiograph", "mammogram", "t1", "t2",
    "flair", "contrast",
];

const POLITE_PREFIXES: &[&str] = &["please tell me", "can you tell me", "could you tell me"];

#[derive(Debug, Clone, PartialEq)]
enum Edit {
    Replace(usize, &'static str),
    Remove(usize),
    Insert(usize, &'static str),
    Prefix(&'static str),
}

impl Edit {
    /// 0 synonym swap, 1 article edit, 2 polite prefix; each kind is equally likely.
    fn kind(&self) -> usize {
        match self {
            Edit::Replace(_, to) if !matches!(*to, "a" | "an" | "any") => 0,
            Edit::Prefix(_) => 2,
            _ => 1,
        }
    }
}

struct Token<'a> {
    lead: &'a str,
    core: &'a str,
    trail: &'a str,
}

fn split_token(raw: &str) -> Token<'_> {
    let start = raw.find(|c: char| c.is_alphanumeric()).unwrap_or(raw.len());
    let end = raw
        .rfind(|c: char| c.is_alphanumeric())
        .map(|i| i + raw[i..].chars().next().map_or(1, char::len_utf8))
        .unwrap_or(start);
    Token {
        lead: &raw[..start],
        core: &raw[start..end.max(start)],
        trail: &raw[end.max(start)..],
    }
}

fn is_protected(word: &str) -> bool {
    PROTECTED.contains(&word)
}

fn candidate_edits(tokens: &[Token<'_>], lower: &[String]) -> Vec<Edit> {
    let mut edits = Vec::new();
    for (i, word) in lower.iter().enumerate() {
        if word.is_empty() || is_protected(word) {
            continue;
        }
        if let Some((_, to)) = SYNONYMS.iter().find(|(from, _)| from == word) {
            edits.push(Edit::Replace(i, to));
        }
        match word.as_str() {
            "a" | "an" => edits.push(Edit::Replace(i, "any")),
            "any" => {
                let next_vowel = lower
                    .get(i + 1)
                    .and_then(|w| w.chars().next())
                    .is_some_and(|c| "aeiou".contains(c));
                edits.push(Edit::Replace(i, if next_vowel { "an" } else { "a" }));
                if i > 0 && i + 1 < lower.len() && tokens[i].trail.is_empty() {
                    edits.push(Edit::Remove(i));
                }
            }
            "there" => {
                let next = lower.get(i + 1).map(String::as_str);
                let prev = i.checked_sub(1).map(|p| lower[p].as_str());
                if matches!(prev, Some("is" | "are"))
                    && next.is_some_and(|w| !matches!(w, "a" | "an" | "the" | "any" | "no"))
                    && tokens[i].trail.is_empty()
                {
                    edits.push(Edit::Insert(i + 1, "any"));
                }
            }
            _ => {}
        }
    }
    let already_polite = {
        let head = lower.iter().take(3).map(String::as_str).collect::<Vec<_>>().join(" ");
        head.starts_with("please") || head.starts_with("can you") || head.starts_with("could you")
    };
    if !already_polite {
        edits.extend(POLITE_PREFIXES.iter().map(|p| Edit::Prefix(p)));
    }
    edits
}

fn match_case(template: &str, word: &str) -> String {
    let mut chars = template.chars();
    match chars.next() {
        Some(c) if c.is_uppercase() && chars.all(|c| !c.is_uppercase()) => {
            let mut w = word.chars();
            w.next()
                .map(|f| f.to_uppercase().chain(w).collect())
                .unwrap_or_default()
        }
        _ => word.to_string(),
    }
}

fn apply(raw: &[&str], tokens: &[Token<'_>], edit: &Edit) -> String {
    let mut out: Vec<String> = Vec::with_capacity(raw.len() + 4);
    match edit {
        Edit::Prefix(p) => {
            let capitalized = raw[0].chars().next().is_some_and(char::is_uppercase);
            out.push(format!("{},", if capitalized { match_case("X", p) } else { p.to_string() }));
            for (i, r) in raw.iter().enumerate() {
                if i == 0 && capitalized && match_case(tokens[0].core, "x") == "X" {
                    out.push(format!("{}{}{}", tokens[0].lead, tokens[0].core.to_lowercase(), tokens[0].trail));
                } else {
                    out.push(r.to_string());
                }
            }
        }
        _ => {
            for (i, r) in raw.iter().enumerate() {
                match edit {
                    Edit::Replace(j, to) if *j == i => {
                        let t = &tokens[i];
                        out.push(format!("{}{}{}", t.lead, match_case(t.core, to), t.trail));
                    }
                    Edit::Remove(j) if *j == i => {
                        let t = &tokens[i];
                        if !t.lead.is_empty() {
                            out.push(t.lead.to_string());
                        }
                    }
                    Edit::Insert(j, word) if *j == i => {
                        out.push(word.to_string());
                        out.push(r.to_string());
                    }
                    _ => out.push(r.to_string()),
                }
            }
        }
    }
    out.join(" ")
}

/// Rule-based word-level rewording of `question`, deterministic in `seed`.
///
/// Applies one synonym swap, article edit or polite prefix. Protected terms are
/// never touched and the result always normalizes differently from the input.
pub fn rule_word_perturb(question: &str, seed: u64) -> Result<String, PipelineError> {
    let raw: Vec<&str> = question.split_whitespace().collect();
    if raw.len() < 2 {
        return Err(PipelineError::TooShort(question.to_string()));
    }
    let tokens: Vec<Token<'_>> = raw.iter().map(|r| split_token(r)).collect();
    let lower: Vec<String> = tokens.iter().map(|t| t.core.to_lowercase()).collect();
    let original = normalize(question).joined();
    let mut groups: [Vec<Edit>; 3] = Default::default();
    for edit in candidate_edits(&tokens, &lower) {
        groups[edit.kind()].push(edit);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let live: Vec<usize> = (0..groups.len()).filter(|&g| !groups[g].is_empty()).collect();
        if live.is_empty() {
            break;
        }
        let group = &mut groups[live[rng.random_range(0..live.len())]];
        let edit = group.remove(rng.random_range(0..group.len()));
        let out = apply(&raw, &tokens, &edit);
        if out != question && normalize(&out).joined() != original {
            return Ok(out);
        }
    }
    Err(PipelineError::NoTransformation(question.to_string()))
}

/// Per-item seed mixing the run seed with the item id.
pub fn item_seed(seed: u64, item_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(item_id.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}
