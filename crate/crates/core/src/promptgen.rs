//! Defect proposal: ask a vision-language model which defects can occur on a
//! product, then parse its free-form answer into [`DefectDescription`]s.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::{b64_encode, EndpointConfig, HttpJsonClient, RetryPolicy};
use crate::error::{BackendError, Error, Result};
use crate::image::{read_image, Image, ImageRef};

/// A named defect type with the sentence used to prompt generation and the
/// short keyword phrases used to condition grounding features.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DefectDescription {
    pub category: String,
    pub name: String,
    pub description: String,
    pub keywords: Vec<String>,
}

impl DefectDescription {
    pub fn new(category: &str, name: &str, description: &str) -> Result<Self> {
        let d = Self {
            category: category.to_string(),
            name: name.trim().to_string(),
            description: description.trim().to_string(),
            keywords: extract_keywords(name, description),
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::validation("defect name is empty"));
        }
        if self.description.is_empty() {
            return Err(Error::validation(format!("defect '{}' has no description", self.name)));
        }
        if self.keywords.is_empty() || self.keywords.len() > MAX_KEYWORDS {
            return Err(Error::validation(format!(
                "defect '{}' must have 1-{MAX_KEYWORDS} keywords",
                self.name
            )));
        }
        Ok(())
    }

    /// Keyword text fed to text-conditioned extractors, e.g. `"scratch, linear mark"`.
    pub fn grounding_text(&self) -> String {
        self.keywords.join(", ")
    }

    /// Filesystem-safe form of the name.
    pub fn slug(&self) -> String {
        slugify(&self.name)
    }
}

pub fn slugify(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.trim().chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('_') && !out.is_empty() {
            out.push('_');
        }
    }
    while out.ends_with('_') {
        out.pop();
    }
    if out.is_empty() {
        out.push_str("defect");
    }
    out
}

#[derive(Debug, Clone)]
pub struct ProposalRequest {
    pub category: String,
    pub reference_images: Vec<ImageRef>,
    pub count: usize,
}

impl ProposalRequest {
    pub fn validate(&self) -> Result<()> {
        if self.category.trim().is_empty() {
            return Err(Error::validation("category name is empty"));
        }
        if self.reference_images.is_empty() {
            return Err(Error::validation("at least one reference image is required"));
        }
        if self.count == 0 {
            return Err(Error::validation("requested defect count must be at least 1"));
        }
        Ok(())
    }
}

const MAX_KEYWORDS: usize = 4;
const MAX_NAME_WORDS: usize = 4;

fn count_word(n: usize) -> String {
    const WORDS: [&str; 11] = [
        "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
    ];
    WORDS.get(n).map_or_else(|| n.to_string(), |w| w.to_string())
}

pub fn build_proposal_prompt(req: &ProposalRequest) -> Result<String> {
    req.validate()?;
    let category = req.category.trim();
    let images = match req.reference_images.len() {
        1 => "Given the following image".to_string(),
        k => format!("Given the following {} images", count_word(k)),
    };
    Ok(format!(
        "You are an expert in manufacturing quality control. {images} of a normal, \
         defect-free {category}, please list {count} realistic defects that could plausibly \
         occur on this type of object. \nFor each defect, provide a short defect name followed \
         by a description that could be used as a text prompt for image generation. The \
         descriptions should be concise yet specific enough to guide the generation of \
         realistic defect images.",
        count = req.count,
    ))
}

/// Parses a proposer answer. Accepts `name: description` lines and table rows
/// separated by `&` or `|` (the last two cells are taken as name and
/// description), with optional numbering, bullets and markdown emphasis.
/// Returns at most `max_items` records.
pub fn parse_defect_list(raw: &str, category: &str, max_items: usize) -> Result<Vec<DefectDescription>> {
    if raw.trim().is_empty() {
        return Err(Error::Parse {
            message: "proposer response is empty".into(),
            raw: raw.to_string(),
        });
    }
    let mut out: Vec<DefectDescription> = Vec::new();
    for line in raw.lines() {
        if out.len() >= max_items {
            break;
        }
        if let Some((name, desc)) = split_item(line) {
            if out.iter().any(|d| d.name.eq_ignore_ascii_case(&name)) {
                continue;
            }
            if let Ok(d) = DefectDescription::new(category, &name, &desc) {
                out.push(d);
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Parse {
            message: "no 'name: description' items found in proposer response".into(),
            raw: raw.to_string(),
        });
    }
    Ok(out)
}

/// Serializes records in the line format `parse_defect_list` reads.
pub fn format_defect_list(defects: &[DefectDescription]) -> String {
    defects
        .iter()
        .enumerate()
        .map(|(i, d)| format!("{}. {}: {}\n", i + 1, d.name, d.description))
        .collect()
}

fn clean_cell(s: &str) -> String {
    let s = s.trim().trim_end_matches("\\\\").trim();
    let s = s.trim_matches(|c: char| c == '*' || c == '_' || c == '`' || c == '"');
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn strip_list_marker(line: &str) -> &str {
    let t = line.trim_start();
    let t = t.trim_start_matches(['-', '*', '•', '+']).trim_start();
    // "1." / "1)" / "(1)" / "10 -"
    let digits = t.trim_start_matches('(');
    let n = digits.chars().take_while(|c| c.is_ascii_digit()).count();
    if n > 0 {
        let rest = &digits[n..];
        if let Some(r) = rest.strip_prefix(['.', ')', ':']) {
            return r.trim_start();
        }
        if let Some(r) = rest.trim_start().strip_prefix('-') {
            return r.trim_start();
        }
    }
    t
}

fn plausible_name(name: &str) -> bool {
    let words = name.split_whitespace().count();
    if words == 0 || words > MAX_NAME_WORDS {
        return false;
    }
    if name.chars().all(|c| c == '-' || c == ':' || c.is_whitespace()) {
        return false;
    }
    let lower = name.to_ascii_lowercase();
    !matches!(
        lower.as_str(),
        "defect" | "defect type" | "name" | "defect name" | "description" | "class" | "[defect type]"
    )
}

fn split_item(line: &str) -> Option<(String, String)> {
    let body = strip_list_marker(line);
    if body.is_empty() {
        return None;
    }
    if let Some(idx) = body.find(':') {
        let (head, tail) = body.split_at(idx);
        if !head.contains('&') && !head.contains('|') {
            let name = clean_cell(head);
            let desc = clean_cell(&tail[1..]);
            if plausible_name(&name) && !desc.is_empty() {
                return Some((name, desc));
            }
        }
    }
    let sep = if body.contains('&') { '&' } else { '|' };
    let cells: Vec<String> = body
        .split(sep)
        .map(clean_cell)
        .filter(|c| !c.is_empty())
        .collect();
    if cells.len() >= 2 {
        let name = cells[cells.len() - 2].clone();
        let desc = cells[cells.len() - 1].clone();
        if plausible_name(&name) && desc.split_whitespace().count() > 1 {
            return Some((name, desc));
        }
    }
    None
}

const BREAK_WORDS: &[&str] = &[
    "a", "an", "the", "this", "that", "these", "those", "its", "their", "his", "her", "it",
    "and", "or", "but", "nor", "so", "as", "than", "then", "where", "which", "who", "while",
    "across", "on", "in", "of", "from", "with", "at", "to", "into", "onto", "through", "along",
    "beneath", "under", "over", "underneath", "near", "by", "for", "between", "around", "within",
    "without", "toward", "towards", "up", "down", "off", "out", "about", "against", "behind",
    "is", "are", "was", "were", "be", "been", "has", "have", "had", "may", "might", "can",
    "could", "should", "would", "will", "not", "no", "very", "more", "most", "even", "also",
    "appears", "appear", "looks", "look", "runs", "run", "cuts", "shows", "show", "becomes",
    "become", "leaving", "due", "potentially", "distinct", "visible",
];

/// Name first, then its head noun when the name has several words, then up to
/// two multi-word phrases from the description; lowercased, at most four.
pub fn extract_keywords(name: &str, description: &str) -> Vec<String> {
    let mut keywords: Vec<String> = Vec::new();
    let push = |k: String, kw: &mut Vec<String>| {
        if !k.is_empty() && !kw.contains(&k) && kw.len() < MAX_KEYWORDS {
            kw.push(k);
        }
    };
    let name_lc = name
        .to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ");
    push(name_lc.clone(), &mut keywords);
    let name_words: Vec<&str> = name_lc.split_whitespace().collect();
    if name_words.len() > 1 {
        let head = name_words[name_words.len() - 1]
            .trim_matches(|c: char| !c.is_alphanumeric())
            .to_string();
        push(head, &mut keywords);
    }

    let mut phrases = 0;
    for chunk in description_chunks(description) {
        if phrases == 2 {
            break;
        }
        if chunk.len() < 2 {
            continue;
        }
        let phrase = chunk[chunk.len() - 2..].join(" ");
        if phrase == name_lc {
            continue;
        }
        let before = keywords.len();
        push(phrase, &mut keywords);
        if keywords.len() > before {
            phrases += 1;
        }
    }
    keywords
}

fn description_chunks(description: &str) -> Vec<Vec<String>> {
    let lower = description.to_lowercase();
    let mut chunks = Vec::new();
    let mut current: Vec<String> = Vec::new();
    let flush = |cur: &mut Vec<String>, chunks: &mut Vec<Vec<String>>| {
        if !cur.is_empty() {
            chunks.push(std::mem::take(cur));
        }
    };
    for token in lower.split_inclusive(|c: char| c.is_whitespace() || ",;.()!?".contains(c)) {
        let ends_clause = token.ends_with(|c: char| ",;.()!?".contains(c));
        let word: String = token
            .trim_matches(|c: char| !c.is_alphanumeric() && c != '-')
            .to_string();
        if word.is_empty() {
            if ends_clause {
                flush(&mut current, &mut chunks);
            }
            continue;
        }
        let breaks = BREAK_WORDS.contains(&word.as_str())
            || word.ends_with("ly")
            || word.ends_with("ing")
            || word.chars().all(|c| c.is_ascii_digit());
        if breaks {
            flush(&mut current, &mut chunks);
        } else {
            current.push(word);
        }
        if ends_clause {
            flush(&mut current, &mut chunks);
        }
    }
    flush(&mut current, &mut chunks);
    chunks
}

/// A vision-language model that proposes defects: (prompt, images) -> text.
pub trait DefectProposer: Send + Sync {
    fn propose(&self, prompt: &str, images: &[Image]) -> std::result::Result<String, BackendError>;
}

/// Returns canned responses from `<dir>/<category>.txt`, falling back to
/// `<dir>/default.txt`. The category is recovered from the prompt.
pub struct MockProposer {
    dir: PathBuf,
}

impl MockProposer {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    fn category_from_prompt(prompt: &str) -> Option<&str> {
        let start = prompt.find("defect-free ")? + "defect-free ".len();
        let rest = &prompt[start..];
        let end = rest.find(", please list")?;
        Some(&rest[..end])
    }
}

impl DefectProposer for MockProposer {
    fn propose(&self, prompt: &str, _images: &[Image]) -> std::result::Result<String, BackendError> {
        let mut candidates = Vec::new();
        if let Some(cat) = Self::category_from_prompt(prompt) {
            candidates.push(self.dir.join(format!("{cat}.txt")));
        }
        candidates.push(self.dir.join("default.txt"));
        for path in &candidates {
            if let Ok(text) = std::fs::read_to_string(path) {
                return Ok(text);
            }
        }
        Err(BackendError::InvalidResponse(format!(
            "no canned response in {}",
            self.dir.display()
        )))
    }
}

#[derive(Serialize)]
struct ProposeRequestBody<'a> {
    prompt: &'a str,
    images: Vec<String>,
}

#[derive(Deserialize)]
struct ProposeResponseBody {
    text: String,
}

pub struct HttpProposer {
    client: HttpJsonClient,
}

impl HttpProposer {
    pub fn new(config: EndpointConfig) -> std::result::Result<Self, BackendError> {
        Ok(Self {
            client: HttpJsonClient::new(config)?,
        })
    }
}

impl DefectProposer for HttpProposer {
    fn propose(&self, prompt: &str, images: &[Image]) -> std::result::Result<String, BackendError> {
        let images = images
            .iter()
            .map(|img| {
                img.encode_png()
                    .map(|b| b64_encode(&b))
                    .map_err(|e| BackendError::InvalidResponse(e.to_string()))
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let resp: ProposeResponseBody = self.client.post(&ProposeRequestBody { prompt, images })?;
        Ok(resp.text)
    }
}

/// Builds the prompt, queries the proposer (with retries), and parses the
/// answer, keeping at most `req.count` defects.
pub fn propose_defects(
    req: &ProposalRequest,
    proposer: &dyn DefectProposer,
    retry: &RetryPolicy,
) -> Result<Vec<DefectDescription>> {
    let prompt = build_proposal_prompt(req)?;
    let images = req
        .reference_images
        .iter()
        .map(|r| read_image(&r.path))
        .collect::<Result<Vec<_>>>()?;
    let (text, _) = retry.run(|| proposer.propose(&prompt, &images));
    parse_defect_list(&text?, req.category.trim(), req.count)
}

pub fn write_defects_file(defects: &[DefectDescription], path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(defects)
        .map_err(|e| Error::Format(format!("cannot serialize defects: {e}")))?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_defects_file(path: &Path) -> Result<Vec<DefectDescription>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let defects: Vec<DefectDescription> = serde_json::from_str(&text).map_err(|e| Error::Parse {
        message: format!("{}: {e}", path.display()),
        raw: String::new(),
    })?;
    for d in &defects {
        d.validate()?;
    }
    Ok(defects)
}
