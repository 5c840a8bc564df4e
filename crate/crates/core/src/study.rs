//! Backend for a blinded pairwise realism study: trial sampling, an
//! append-only vote log, TrueSkill aggregation and an HTTP service.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::genclient::TimestampMode;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrueSkillParams {
    pub mu0: f64,
    pub sigma0: f64,
    pub beta: f64,
    pub tau: f64,
    pub draw_probability: f64,
}

impl Default for TrueSkillParams {
    fn default() -> Self {
        Self {
            mu0: 25.0,
            sigma0: 25.0 / 3.0,
            beta: 25.0 / 6.0,
            tau: 25.0 / 300.0,
            draw_probability: 0.10,
        }
    }
}

impl TrueSkillParams {
    /// Draw margin in performance units for two players.
    pub fn draw_margin(&self) -> f64 {
        std_normal().inverse_cdf((self.draw_probability + 1.0) / 2.0) * 2f64.sqrt() * self.beta
    }
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rating {
    pub method: String,
    pub mu: f64,
    pub sigma: f64,
    pub wins: u32,
    pub losses: u32,
    pub ties: u32,
    pub appearances: u32,
}

impl Rating {
    pub fn fresh(method: impl Into<String>, params: &TrueSkillParams) -> Self {
        Self {
            method: method.into(),
            mu: params.mu0,
            sigma: params.sigma0,
            wins: 0,
            losses: 0,
            ties: 0,
            appearances: 0,
        }
    }

    /// Wins over decisive comparisons; `None` when there were none.
    pub fn win_rate(&self) -> Option<f64> {
        let decisive = self.wins + self.losses;
        (decisive > 0).then(|| f64::from(self.wins) / f64::from(decisive))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Win,
    Tie,
}

/// Mean shift factor for a decisive result at normalized margin `t`.
fn v_win(t: f64, e: f64) -> f64 {
    let n = std_normal();
    let x = t - e;
    let denom = n.cdf(x);
    if denom < 1e-300 {
        -x
    } else {
        n.pdf(x) / denom
    }
}

fn w_win(t: f64, e: f64) -> f64 {
    let v = v_win(t, e);
    v * (v + t - e)
}

// Both draw terms are evaluated at |t| so the normal masses come from the
// lower tail; v is odd in t and w is even.
fn v_draw(t: f64, e: f64) -> f64 {
    let n = std_normal();
    let a = t.abs();
    let denom = n.cdf(e - a) - n.cdf(-e - a);
    let v = if denom < 1e-300 {
        -a + e
    } else {
        (n.pdf(-e - a) - n.pdf(e - a)) / denom
    };
    if t < 0.0 {
        -v
    } else {
        v
    }
}

fn w_draw(t: f64, e: f64) -> f64 {
    let n = std_normal();
    let a = t.abs();
    let denom = n.cdf(e - a) - n.cdf(-e - a);
    if denom < 1e-300 {
        return 1.0;
    }
    let v = v_draw(a, e);
    v * v + ((e - a) * n.pdf(e - a) + (e + a) * n.pdf(e + a)) / denom
}

/// Two-player TrueSkill update. For `Win` the first rating is the winner; for
/// `Tie` the order does not matter.
pub fn rate_update(first: &Rating, second: &Rating, outcome: Outcome, params: &TrueSkillParams) -> (Rating, Rating) {
    let s1 = first.sigma * first.sigma + params.tau * params.tau;
    let s2 = second.sigma * second.sigma + params.tau * params.tau;
    let c2 = 2.0 * params.beta * params.beta + s1 + s2;
    let c = c2.sqrt();
    let t = (first.mu - second.mu) / c;
    let e = params.draw_margin() / c;
    let (v, w) = match outcome {
        Outcome::Win => (v_win(t, e), w_win(t, e)),
        Outcome::Tie => (v_draw(t, e), w_draw(t, e)),
    };
    let mut a = first.clone();
    let mut b = second.clone();
    a.mu = first.mu + s1 / c * v;
    b.mu = second.mu - s2 / c * v;
    a.sigma = (s1 * (1.0 - s1 / c2 * w)).sqrt();
    b.sigma = (s2 * (1.0 - s2 / c2 * w)).sqrt();
    a.appearances += 1;
    b.appearances += 1;
    match outcome {
        Outcome::Win => {
            a.wins += 1;
            b.losses += 1;
        }
        Outcome::Tie => {
            a.ties += 1;
            b.ties += 1;
        }
    }
    (a, b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Choice {
    Left,
    Right,
    Tie,
}

/// One line of the vote log. Method ids live only in the server-side log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteLogEntry {
    pub trial_id: String,
    pub category: String,
    pub left_method: String,
    pub right_method: String,
    pub choice: Choice,
    pub participant: String,
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingRow {
    pub method: String,
    pub mu: f64,
    pub sigma: f64,
    pub win_rate: Option<f64>,
    pub wins: u32,
    pub losses: u32,
    pub ties: u32,
    pub appearances: u32,
}

/// Replays the log in timestamp order (file order among equal timestamps)
/// and sorts by mu, highest first.
pub fn rank_methods(log: &[VoteLogEntry], params: &TrueSkillParams) -> Vec<RankingRow> {
    let mut order: Vec<&VoteLogEntry> = log.iter().collect();
    order.sort_by_key(|e| e.timestamp_ms);
    let mut ratings: BTreeMap<String, Rating> = BTreeMap::new();
    for e in order {
        for m in [&e.left_method, &e.right_method] {
            ratings.entry(m.clone()).or_insert_with(|| Rating::fresh(m.clone(), params));
        }
        let l = ratings[&e.left_method].clone();
        let r = ratings[&e.right_method].clone();
        let (l, r) = match e.choice {
            Choice::Left => rate_update(&l, &r, Outcome::Win, params),
            Choice::Right => {
                let (r, l) = rate_update(&r, &l, Outcome::Win, params);
                (l, r)
            }
            Choice::Tie => rate_update(&l, &r, Outcome::Tie, params),
        };
        ratings.insert(l.method.clone(), l);
        ratings.insert(r.method.clone(), r);
    }
    let mut rows: Vec<RankingRow> = ratings
        .into_values()
        .map(|r| RankingRow {
            win_rate: r.win_rate(),
            method: r.method,
            mu: r.mu,
            sigma: r.sigma,
            wins: r.wins,
            losses: r.losses,
            ties: r.ties,
            appearances: r.appearances,
        })
        .collect();
    rows.sort_by(|a, b| b.mu.total_cmp(&a.mu).then_with(|| a.method.cmp(&b.method)));
    rows
}

pub fn read_vote_log(path: &Path) -> Result<Vec<VoteLogEntry>> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                message: format!("{} line {}: {e}", path.display(), i + 1),
                raw: l.to_string(),
            })
        })
        .collect()
}

/// Append-only JSONL vote log.
pub struct VoteStore {
    path: PathBuf,
    file: std::fs::File,
}

impl VoteStore {
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn append(&mut self, entry: &VoteLogEntry) -> Result<()> {
        let mut line = serde_json::to_string(entry).map_err(|e| Error::Format(e.to_string()))?;
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// method -> category -> images.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImagePool {
    pub methods: BTreeMap<String, BTreeMap<String, Vec<PathBuf>>>,
}

impl ImagePool {
    /// Reads a pool file; relative image paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut pool: ImagePool = serde_json::from_str(&text).map_err(|e| Error::Parse {
            message: format!("{}: {e}", path.display()),
            raw: text.clone(),
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        for cats in pool.methods.values_mut() {
            for imgs in cats.values_mut() {
                for p in imgs.iter_mut() {
                    if p.is_relative() {
                        *p = base.join(&*p);
                    }
                }
            }
        }
        Ok(pool)
    }

    fn categories(&self, method: &str) -> impl Iterator<Item = &String> {
        self.methods[method].iter().filter(|(_, v)| !v.is_empty()).map(|(k, _)| k)
    }

    /// Unordered method pairs with at least one shared non-empty category.
    pub fn eligible_pairs(&self) -> Vec<(String, String, Vec<String>)> {
        let names: Vec<&String> = self.methods.keys().collect();
        let mut out = Vec::new();
        for i in 0..names.len() {
            for j in i + 1..names.len() {
                let a: HashSet<&String> = self.categories(names[i]).collect();
                let shared: Vec<String> = self.categories(names[j]).filter(|c| a.contains(c)).cloned().collect();
                if !shared.is_empty() {
                    out.push((names[i].clone(), names[j].clone(), shared));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialPair {
    pub trial_id: String,
    pub category: String,
    pub left_method: String,
    pub right_method: String,
    pub left_image: PathBuf,
    pub right_image: PathBuf,
}

fn random_token(rng: &mut impl Rng) -> String {
    format!("{:016x}{:016x}", rng.random::<u64>(), rng.random::<u64>())
}

/// Uniform over eligible method pairs, then shared categories, then images;
/// left/right order is a fair coin.
pub fn sample_trial(pool: &ImagePool, rng: &mut impl Rng) -> Result<TrialPair> {
    let pairs = pool.eligible_pairs();
    let (a, b, cats) = pairs
        .choose(rng)
        .ok_or_else(|| Error::validation("no two methods share a category with images"))?;
    let cat = cats.choose(rng).expect("non-empty shared categories");
    let ia = pool.methods[a][cat].choose(rng).expect("non-empty").clone();
    let ib = pool.methods[b][cat].choose(rng).expect("non-empty").clone();
    let trial_id = random_token(rng);
    let (left, right) = if rng.random_bool(0.5) {
        ((a, ia), (b, ib))
    } else {
        ((b, ib), (a, ia))
    };
    Ok(TrialPair {
        trial_id,
        category: cat.clone(),
        left_method: left.0.clone(),
        right_method: right.0.clone(),
        left_image: left.1,
        right_image: right.1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteRequest {
    pub trial_id: String,
    pub choice: Choice,
    #[serde(default)]
    pub participant: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResponse {
    pub trial_id: String,
    pub left_url: String,
    pub right_url: String,
    pub category: String,
}

struct Registry {
    rng: ChaCha8Rng,
    trials: HashMap<String, TrialPair>,
    voted: HashSet<String>,
    images: HashMap<String, PathBuf>,
    log: Vec<VoteLogEntry>,
    store: VoteStore,
}

/// Shared service state; every mutation goes through one lock so trial
/// issuance and vote appends are serialized.
pub struct StudyService {
    pool: ImagePool,
    params: TrueSkillParams,
    timestamps: TimestampMode,
    registry: Mutex<Registry>,
}

impl StudyService {
    pub fn new(pool: ImagePool, votes: &Path, seed: u64, timestamps: TimestampMode) -> Result<Self> {
        if pool.eligible_pairs().is_empty() {
            return Err(Error::validation("no two methods share a category with images"));
        }
        let log = read_vote_log(votes)?;
        let voted = log.iter().map(|e| e.trial_id.clone()).collect();
        Ok(Self {
            pool,
            params: TrueSkillParams::default(),
            timestamps,
            registry: Mutex::new(Registry {
                rng: ChaCha8Rng::seed_from_u64(seed),
                trials: HashMap::new(),
                voted,
                images: HashMap::new(),
                log,
                store: VoteStore::open(votes)?,
            }),
        })
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Registry> {
        self.registry.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn issue_trial(&self) -> Result<TrialResponse> {
        let mut reg = self.lock();
        let trial = sample_trial(&self.pool, &mut reg.rng)?;
        let lt = random_token(&mut reg.rng);
        let rt = random_token(&mut reg.rng);
        reg.images.insert(lt.clone(), trial.left_image.clone());
        reg.images.insert(rt.clone(), trial.right_image.clone());
        let resp = TrialResponse {
            trial_id: trial.trial_id.clone(),
            left_url: format!("/img/{lt}"),
            right_url: format!("/img/{rt}"),
            category: trial.category.clone(),
        };
        reg.trials.insert(trial.trial_id.clone(), trial);
        Ok(resp)
    }

    /// Appends a vote; unknown trials are `NotFound`, repeated votes `Conflict`.
    pub fn record_vote(&self, vote: &VoteRequest) -> Result<VoteLogEntry> {
        let mut reg = self.lock();
        if reg.voted.contains(&vote.trial_id) {
            return Err(Error::Conflict(format!("trial {} already has a vote", vote.trial_id)));
        }
        let trial = reg
            .trials
            .get(&vote.trial_id)
            .ok_or_else(|| Error::NotFound(format!("unknown trial {}", vote.trial_id)))?;
        let entry = VoteLogEntry {
            trial_id: trial.trial_id.clone(),
            category: trial.category.clone(),
            left_method: trial.left_method.clone(),
            right_method: trial.right_method.clone(),
            choice: vote.choice,
            participant: vote.participant.clone(),
            timestamp_ms: self.timestamps.now_ms(),
        };
        reg.store.append(&entry)?;
        reg.voted.insert(entry.trial_id.clone());
        reg.trials.remove(&entry.trial_id);
        reg.log.push(entry.clone());
        Ok(entry)
    }

    pub fn ranking(&self) -> Vec<RankingRow> {
        let snapshot = self.lock().log.clone();
        rank_methods(&snapshot, &self.params)
    }

    pub fn image_path(&self, token: &str) -> Option<PathBuf> {
        self.lock().images.get(token).cloned()
    }
}

fn error_response(e: Error) -> Response {
    let status = match &e {
        Error::NotFound(_) => StatusCode::NOT_FOUND,
        Error::Conflict(_) => StatusCode::CONFLICT,
        Error::Validation(_) | Error::Parse { .. } => StatusCode::BAD_REQUEST,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    };
    (status, Json(serde_json::json!({ "error": e.to_string() }))).into_response()
}

async fn get_trial(State(s): State<Arc<StudyService>>) -> Response {
    match s.issue_trial() {
        Ok(t) => Json(t).into_response(),
        Err(e) => error_response(e),
    }
}

async fn post_vote(State(s): State<Arc<StudyService>>, Json(v): Json<VoteRequest>) -> Response {
    match s.record_vote(&v) {
        Ok(_) => Json(serde_json::json!({ "ok": true })).into_response(),
        Err(e) => error_response(e),
    }
}

#[derive(Serialize)]
struct PublicRankingRow {
    method: String,
    mu: f64,
    sigma: f64,
    win_rate: Option<f64>,
    appearances: u32,
}

async fn get_ranking(State(s): State<Arc<StudyService>>) -> Response {
    let rows: Vec<PublicRankingRow> = s
        .ranking()
        .into_iter()
        .map(|r| PublicRankingRow {
            method: r.method,
            mu: r.mu,
            sigma: r.sigma,
            win_rate: r.win_rate,
            appearances: r.appearances,
        })
        .collect();
    Json(rows).into_response()
}

async fn get_image(State(s): State<Arc<StudyService>>, UrlPath(token): UrlPath<String>) -> Response {
    let Some(path) = s.image_path(&token) else {
        return error_response(Error::NotFound("unknown image".into()));
    };
    match tokio::fs::read(&path).await {
        Ok(bytes) => {
            let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
                Some("jpg" | "jpeg") => "image/jpeg",
                _ => "image/png",
            };
            ([(header::CONTENT_TYPE, mime)], bytes).into_response()
        }
        Err(e) => error_response(Error::io(path, e)),
    }
}

pub fn router(service: Arc<StudyService>) -> Router {
    Router::new()
        .route("/api/trial", get(get_trial))
        .route("/api/vote", post(post_vote))
        .route("/api/ranking", get(get_ranking))
        .route("/img/{token}", get(get_image))
        .with_state(service)
}

/// Blocks serving the study API on `addr` until the process is stopped.
pub fn serve_study(service: StudyService, addr: std::net::SocketAddr) -> Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::io("<runtime>", e))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| Error::io(addr.to_string(), e))?;
        log::info!("study service listening on {addr}");
        axum::serve(listener, router(Arc::new(service)))
            .await
            .map_err(|e| Error::io(addr.to_string(), e))
    })
}
