//! Natural-language user profiles.
//!
//! A user's (training) history is serialized to one line per event, inserted
//! into a horizon-specific prompt and sent to a [`TextGenerator`]. The short
//! and long passes see the same serialized history; only the instruction
//! differs. Outputs are cached by digest of backend, model and rendered
//! prompt.

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use chrono::DateTime;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backend::{api_key_from_env, call_with_retry, BackendError, JsonClient, RemoteSettings, RetryPolicy};
use crate::cache::{BlobStore, CacheStats, Digest32};
use crate::datamodel::{Horizon, ItemCatalog, UserHistory};
use crate::error::{Result, TupError};

pub const LLM_KEY_ENV: &str = "TUP_LLM_API_KEY";
pub const HISTORY_PLACEHOLDER: &str = "{history}";
pub const DEFAULT_HISTORY_BUDGET: usize = 128;
pub const COLD_USER_TEXT: &str = "New user with no recorded history.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileText {
    pub user_id: String,
    pub horizon: Horizon,
    pub text: String,
    pub backend_id: String,
    pub prompt_hash: Digest32,
}

/// One serialized event as it appears in a prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedEvent {
    pub timestamp: i64,
    pub title: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedHistory {
    pub text: String,
    /// Events kept after budget elision, chronological.
    pub events: Vec<RenderedEvent>,
    pub elided: usize,
}

fn iso_date(ts: i64) -> String {
    DateTime::from_timestamp(ts, 0)
        .map(|d| d.format("%Y-%m-%d").to_string())
        .unwrap_or_else(|| ts.to_string())
}

/// One line per event, `<date> — <title>`, oldest first. Over budget, the
/// earliest ceil(b/2) and latest floor(b/2) events are kept around a single
/// elision line.
pub fn render_history_text(history: &UserHistory, catalog: &ItemCatalog, budget: usize) -> Result<RenderedHistory> {
    if history.is_empty() {
        return Err(TupError::invalid(format!("history of `{}` is empty", history.user_id)));
    }
    if budget == 0 {
        return Err(TupError::Config("history budget must be positive".into()));
    }
    let mut all = Vec::with_capacity(history.len());
    for e in &history.events {
        all.push(RenderedEvent {
            timestamp: e.timestamp,
            title: catalog.title(&e.item_id)?.to_owned(),
        });
    }
    let n = all.len();
    let (events, elided) = if n > budget {
        let head = budget.div_ceil(2);
        let tail = budget / 2;
        let mut kept: Vec<_> = all[..head].to_vec();
        kept.extend_from_slice(&all[n - tail..]);
        (kept, n - head - tail)
    } else {
        (all, 0)
    };
    let head_len = if elided > 0 { budget.div_ceil(2) } else { events.len() };
    let mut lines = Vec::with_capacity(events.len() + 1);
    for (i, e) in events.iter().enumerate() {
        if elided > 0 && i == head_len {
            lines.push(format!("[... {elided} interactions omitted ...]"));
        }
        lines.push(format!("{} — {}", iso_date(e.timestamp), e.title));
    }
    Ok(RenderedHistory {
        text: lines.join("\n"),
        events,
        elided,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplates {
    pub short: String,
    pub long: String,
    pub general: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates {
            short: "Given this chronological interaction history, describe the user's current, short-term interests, \
                    weighting the most recent items most heavily: {history}"
                .into(),
            long: "Given this chronological interaction history, describe the user's enduring, long-term preferences \
                   and persistent patterns: {history}"
                .into(),
            general: "Describe this user's overall preferences: {history}".into(),
        }
    }
}

impl PromptTemplates {
    pub fn for_horizon(&self, horizon: Horizon) -> &str {
        match horizon {
            Horizon::Short => &self.short,
            Horizon::Long => &self.long,
            Horizon::General => &self.general,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for h in Horizon::ALL {
            let count = self.for_horizon(h).matches(HISTORY_PLACEHOLDER).count();
            if count != 1 {
                return Err(TupError::Config(format!(
                    "{h} template must contain {HISTORY_PLACEHOLDER} exactly once (found {count})"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSpec {
    pub horizon: Horizon,
    pub template: String,
    pub rendered: String,
}

pub fn build_prompt(history_text: &str, horizon: Horizon, templates: &PromptTemplates) -> Result<PromptSpec> {
    let template = templates.for_horizon(horizon);
    if template.matches(HISTORY_PLACEHOLDER).count() != 1 {
        return Err(TupError::Config(format!(
            "{horizon} template must contain {HISTORY_PLACEHOLDER} exactly once"
        )));
    }
    Ok(PromptSpec {
        horizon,
        template: template.to_owned(),
        rendered: template.replacen(HISTORY_PLACEHOLDER, history_text, 1),
    })
}

pub struct GenerationRequest<'a> {
    pub horizon: Horizon,
    pub prompt: &'a str,
    pub events: &'a [RenderedEvent],
}

pub trait TextGenerator: Send + Sync {
    fn backend_id(&self) -> &str;
    fn model_id(&self) -> &str;
    fn generate(&self, request: &GenerationRequest<'_>) -> std::result::Result<String, BackendError>;
    /// Number of generation calls served so far.
    fn calls(&self) -> usize;
}

/// Deterministic offline stand-in for a language model.
pub fn template_text<'a>(titles: impl IntoIterator<Item = &'a str>, horizon: Horizon, window: usize) -> String {
    let titles: Vec<&str> = titles.into_iter().collect();
    let (prefix, chosen) = match horizon {
        Horizon::Short => ("Recently the user engaged with: ", &titles[titles.len().saturating_sub(window)..]),
        Horizon::Long => ("Over time the user has engaged with: ", &titles[..]),
        Horizon::General => ("The user has engaged with: ", &titles[..]),
    };
    format!("{prefix}{}", chosen.join("; "))
}

pub fn template_generate(history: &UserHistory, catalog: &ItemCatalog, horizon: Horizon, window: usize) -> Result<String> {
    if history.is_empty() {
        return Err(TupError::invalid(format!("history of `{}` is empty", history.user_id)));
    }
    let titles = history
        .events
        .iter()
        .map(|e| catalog.title(&e.item_id))
        .collect::<Result<Vec<_>>>()?;
    Ok(template_text(titles, horizon, window))
}

#[derive(Debug)]
pub struct TemplateGenerator {
    window: usize,
    model_id: String,
    calls: AtomicUsize,
}

impl TemplateGenerator {
    pub fn new(window: usize) -> Self {
        TemplateGenerator {
            window: window.max(1),
            model_id: format!("template-w{}", window.max(1)),
            calls: AtomicUsize::new(0),
        }
    }
}

impl TextGenerator for TemplateGenerator {
    fn backend_id(&self) -> &str {
        "template"
    }

    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn generate(&self, request: &GenerationRequest<'_>) -> std::result::Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        Ok(template_text(
            request.events.iter().map(|e| e.title.as_str()),
            request.horizon,
            self.window,
        ))
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteLlmSettings {
    #[serde(flatten)]
    pub remote: RemoteSettings,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for RemoteLlmSettings {
    fn default() -> Self {
        RemoteLlmSettings {
            remote: RemoteSettings {
                model: "gpt-4o-mini".into(),
                ..RemoteSettings::default()
            },
            temperature: 0.0,
            max_tokens: 256,
        }
    }
}

/// Chat-completions client for an OpenAI-compatible endpoint.
#[derive(Debug)]
pub struct RemoteGenerator {
    settings: RemoteLlmSettings,
    client: JsonClient,
    calls: AtomicUsize,
}

impl RemoteGenerator {
    pub fn new(settings: RemoteLlmSettings, api_key: String) -> Self {
        let client = JsonClient::new(api_key, Duration::from_secs(settings.remote.timeout_secs));
        RemoteGenerator {
            settings,
            client,
            calls: AtomicUsize::new(0),
        }
    }

    /// Reads the key from `TUP_LLM_API_KEY`; fails immediately when unset.
    pub fn from_env(settings: RemoteLlmSettings) -> Result<Self> {
        Ok(Self::new(settings, api_key_from_env(LLM_KEY_ENV)?))
    }
}

impl TextGenerator for RemoteGenerator {
    fn backend_id(&self) -> &str {
        "remote-llm"
    }

    fn model_id(&self) -> &str {
        &self.settings.remote.model
    }

    fn generate(&self, request: &GenerationRequest<'_>) -> std::result::Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let body = json!({
            "model": self.settings.remote.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": self.settings.temperature,
            "max_tokens": self.settings.max_tokens,
        });
        let url = format!("{}/chat/completions", self.settings.remote.base_url.trim_end_matches('/'));
        let resp = self.client.post(&url, &body)?;
        resp["choices"][0]["message"]["content"]
            .as_str()
            .map(|s| s.trim().to_owned())
            .ok_or_else(|| BackendError::Fatal("response has no choices[0].message.content".into()))
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProfilerConfig {
    pub templates: PromptTemplates,
    pub history_budget: usize,
    pub retry: RetryPolicy,
    /// Bounded number of concurrent generation requests.
    pub parallelism: usize,
    /// Emit a fixed text for users with no history instead of failing.
    pub cold_user_fallback: bool,
}

impl Default for ProfilerConfig {
    fn default() -> Self {
        ProfilerConfig {
            templates: PromptTemplates::default(),
            history_budget: DEFAULT_HISTORY_BUDGET,
            retry: RetryPolicy::default(),
            parallelism: 8,
            cold_user_fallback: false,
        }
    }
}

/// A prompt exactly as rendered for the backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub user_id: String,
    pub horizon: Horizon,
    pub prompt: String,
}

pub struct Profiler<'a> {
    backend: &'a dyn TextGenerator,
    cache: BlobStore,
    config: ProfilerConfig,
    prompt_log: Option<std::sync::Mutex<Vec<PromptRecord>>>,
}

const INDEX_HEADER: [&str; 5] = ["digest", "backend_id", "model_id", "user_id", "horizon"];

impl<'a> Profiler<'a> {
    pub fn new(backend: &'a dyn TextGenerator, cache_dir: Option<PathBuf>, config: ProfilerConfig) -> Result<Self> {
        config.templates.validate()?;
        let cache = match cache_dir {
            Some(dir) => BlobStore::on_disk(dir, "txt")?,
            None => BlobStore::in_memory("txt"),
        };
        Ok(Profiler {
            backend,
            cache,
            config,
            prompt_log: None,
        })
    }

    /// Keeps every rendered prompt, cache hits included.
    pub fn with_prompt_log(mut self) -> Self {
        self.prompt_log = Some(std::sync::Mutex::new(Vec::new()));
        self
    }

    /// Logged prompts sorted by (user, horizon); empty without a log.
    pub fn prompts(&self) -> Vec<PromptRecord> {
        let mut out = self
            .prompt_log
            .as_ref()
            .map(|l| l.lock().expect("prompt log poisoned").clone())
            .unwrap_or_default();
        out.sort_by(|a, b| (&a.user_id, a.horizon).cmp(&(&b.user_id, b.horizon)));
        out
    }

    pub fn cache_stats(&self) -> CacheStats {
        self.cache.stats()
    }

    pub fn prompt_digest(&self, rendered: &str) -> Digest32 {
        Digest32::of_parts(&[
            self.backend.backend_id().as_bytes(),
            self.backend.model_id().as_bytes(),
            rendered.as_bytes(),
        ])
    }

    /// Generates (or recalls) one profile. `history` must be the training
    /// part only.
    pub fn generate_profile(&self, history: &UserHistory, catalog: &ItemCatalog, horizon: Horizon) -> Result<ProfileText> {
        if history.is_empty() && self.config.cold_user_fallback {
            return Ok(ProfileText {
                user_id: history.user_id.clone(),
                horizon,
                text: COLD_USER_TEXT.to_owned(),
                backend_id: "fallback".into(),
                prompt_hash: Digest32::of_parts(&[b"fallback", history.user_id.as_bytes()]),
            });
        }
        let rendered = render_history_text(history, catalog, self.config.history_budget)?;
        let prompt = build_prompt(&rendered.text, horizon, &self.config.templates)?;
        let digest = self.prompt_digest(&prompt.rendered);
        if let Some(log) = &self.prompt_log {
            log.lock().expect("prompt log poisoned").push(PromptRecord {
                user_id: history.user_id.clone(),
                horizon,
                prompt: prompt.rendered.clone(),
            });
        }

        if let Some(bytes) = self.cache.get(&digest)? {
            let text = String::from_utf8(bytes).map_err(|e| TupError::Format(format!("cached profile {digest}: {e}")))?;
            return Ok(self.profile(history, horizon, text, digest));
        }

        let request = GenerationRequest {
            horizon,
            prompt: &prompt.rendered,
            events: &rendered.events,
        };
        let text = call_with_retry(self.backend.backend_id(), &self.config.retry, || self.backend.generate(&request))?;
        if text.trim().is_empty() {
            return Err(TupError::Backend {
                backend: self.backend.backend_id().to_owned(),
                attempts: 1,
                message: format!("empty {horizon} profile for user `{}`", history.user_id),
            });
        }
        if self.cache.put(&digest, text.as_bytes())? {
            let hex = digest.to_hex();
            self.cache.append_index(
                &INDEX_HEADER,
                &[&hex, self.backend.backend_id(), self.backend.model_id(), &history.user_id, horizon.as_str()],
            )?;
        }
        Ok(self.profile(history, horizon, text, digest))
    }

    fn profile(&self, history: &UserHistory, horizon: Horizon, text: String, digest: Digest32) -> ProfileText {
        ProfileText {
            user_id: history.user_id.clone(),
            horizon,
            text,
            backend_id: self.backend.backend_id().to_owned(),
            prompt_hash: digest,
        }
    }

    /// Profiles for every (user, horizon) pair, in input order, with bounded
    /// parallelism.
    pub fn generate_all(&self, histories: &[&UserHistory], catalog: &ItemCatalog, horizons: &[Horizon]) -> Result<Vec<ProfileText>> {
        let jobs: Vec<(&UserHistory, Horizon)> = histories
            .iter()
            .flat_map(|h| horizons.iter().map(move |&hz| (*h, hz)))
            .collect();
        let workers = self.config.parallelism.max(1);
        if workers == 1 || jobs.len() < 2 {
            return jobs.iter().map(|(h, hz)| self.generate_profile(h, catalog, *hz)).collect();
        }
        let mut results: Vec<Option<Result<ProfileText>>> = (0..jobs.len()).map(|_| None).collect();
        let next = AtomicUsize::new(0);
        let slots = std::sync::Mutex::new(&mut results);
        std::thread::scope(|scope| {
            for _ in 0..workers.min(jobs.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= jobs.len() {
                        break;
                    }
                    let (h, hz) = jobs[i];
                    let r = self.generate_profile(h, catalog, hz);
                    slots.lock().expect("result lock poisoned")[i] = Some(r);
                });
            }
        });
        results.into_iter().map(|r| r.expect("every job ran")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::testserver::Server;
    use crate::datamodel::{Interaction, ItemRecord};

    fn fixture(titles: &[&str]) -> (UserHistory, ItemCatalog) {
        let catalog: ItemCatalog = titles
            .iter()
            .enumerate()
            .map(|(i, t)| ItemRecord::new(format!("i{i}"), *t, ""))
            .collect();
        let events = (0..titles.len())
            .map(|i| Interaction::new("u", format!("i{i}"), (i as i64) * 86_400).unwrap())
            .collect();
        (UserHistory::new("u", events).unwrap(), catalog)
    }

    struct Scripted {
        outputs: std::sync::Mutex<Vec<std::result::Result<String, BackendError>>>,
        calls: AtomicUsize,
    }

    impl TextGenerator for Scripted {
        fn backend_id(&self) -> &str {
            "scripted"
        }
        fn model_id(&self) -> &str {
            "m"
        }
        fn generate(&self, _: &GenerationRequest<'_>) -> std::result::Result<String, BackendError> {
            self.calls.fetch_add(1, Ordering::Relaxed);
            self.outputs.lock().unwrap().remove(0)
        }
        fn calls(&self) -> usize {
            self.calls.load(Ordering::Relaxed)
        }
    }

    fn test_config() -> ProfilerConfig {
        ProfilerConfig {
            retry: RetryPolicy::no_delay(3),
            ..ProfilerConfig::default()
        }
    }

    #[test]
    fn renders_chronologically() {
        let (h, c) = fixture(&["A", "B"]);
        let r = render_history_text(&h, &c, 128).unwrap();
        assert_eq!(r.text, "1970-01-01 — A\n1970-01-02 — B");
    }

    #[test]
    fn budget_elision_keeps_both_ends() {
        let titles: Vec<String> = (0..100).map(|i| format!("T{i}")).collect();
        let refs: Vec<&str> = titles.iter().map(String::as_str).collect();
        let (h, c) = fixture(&refs);
        let r = render_history_text(&h, &c, 50).unwrap();
        let lines: Vec<&str> = r.text.lines().collect();
        assert_eq!(lines.len(), 51);
        assert!(lines[0].ends_with("T0"));
        assert!(lines[24].ends_with("T24"));
        assert!(lines[25].contains("50 interactions omitted"));
        assert!(lines[26].ends_with("T75"));
        assert!(lines[50].ends_with("T99"));

        let odd = render_history_text(&h, &c, 5).unwrap();
        let lines: Vec<&str> = odd.text.lines().collect();
        assert_eq!(lines.len(), 6);
        assert!(lines[2].ends_with("T2"));
        assert!(lines[4].ends_with("T98"));
    }

    #[test]
    fn unknown_item_and_empty_history_fail() {
        let (h, _) = fixture(&["A"]);
        assert!(render_history_text(&h, &ItemCatalog::new(), 10).is_err());
        assert!(render_history_text(&UserHistory::empty("u"), &ItemCatalog::new(), 10).is_err());
    }

    #[test]
    fn prompts_by_horizon() {
        let t = PromptTemplates::default();
        let short = build_prompt("HIST", Horizon::Short, &t).unwrap();
        assert!(short.rendered.contains("short-term interests"));
        assert_eq!(short.rendered.matches("HIST").count(), 1);
        assert_eq!(short, build_prompt("HIST", Horizon::Short, &t).unwrap());
        let general = build_prompt("HIST", Horizon::General, &t).unwrap();
        assert!(!general.rendered.contains("recent"));
        assert!("bogus".parse::<Horizon>().is_err());
    }

    #[test]
    fn template_rules() {
        let (h, c) = fixture(&["A", "B", "C", "D"]);
        assert_eq!(template_generate(&h, &c, Horizon::Short, 2).unwrap(), "Recently the user engaged with: C; D");
        let (h2, c2) = fixture(&["A", "B"]);
        assert_eq!(template_generate(&h2, &c2, Horizon::Long, 2).unwrap(), "Over time the user has engaged with: A; B");
        assert_eq!(
            template_generate(&h, &c, Horizon::General, 2).unwrap(),
            template_generate(&h, &c, Horizon::General, 2).unwrap()
        );
    }

    #[test]
    fn cache_skips_backend_on_hit() {
        let (h, c) = fixture(&["X", "Y", "Z"]);
        let backend = TemplateGenerator::new(3);
        let dir = tempfile::tempdir().unwrap();
        let first = {
            let p = Profiler::new(&backend, Some(dir.path().to_owned()), test_config()).unwrap();
            let out = p.generate_profile(&h, &c, Horizon::Short).unwrap();
            assert_eq!(backend.calls(), 1);
            out
        };
        assert!(["X", "Y", "Z"].iter().all(|t| first.text.contains(t)));
        let p = Profiler::new(&backend, Some(dir.path().to_owned()), test_config()).unwrap();
        let again = p.generate_profile(&h, &c, Horizon::Short).unwrap();
        assert_eq!(backend.calls(), 1);
        assert_eq!(again, first);
        let index = std::fs::read_to_string(dir.path().join("index.csv")).unwrap();
        assert_eq!(index.lines().count(), 2);
        assert!(index.starts_with("digest,backend_id,model_id,user_id,horizon"));
    }

    #[test]
    fn empty_output_is_an_error() {
        let (h, c) = fixture(&["A"]);
        let backend = Scripted {
            outputs: std::sync::Mutex::new(vec![Ok(String::new())]),
            calls: AtomicUsize::new(0),
        };
        let p = Profiler::new(&backend, None, test_config()).unwrap();
        assert!(p.generate_profile(&h, &c, Horizon::Long).is_err());
    }

    #[test]
    fn transient_failures_are_retried() {
        let (h, c) = fixture(&["A"]);
        let backend = Scripted {
            outputs: std::sync::Mutex::new(vec![
                Err(BackendError::Transient("timeout".into())),
                Ok("likes A".into()),
            ]),
            calls: AtomicUsize::new(0),
        };
        let p = Profiler::new(&backend, None, test_config()).unwrap();
        assert_eq!(p.generate_profile(&h, &c, Horizon::Long).unwrap().text, "likes A");
        assert_eq!(backend.calls(), 2);
    }

    #[test]
    fn cold_user_fallback_is_opt_in() {
        let empty = UserHistory::empty("u");
        let backend = TemplateGenerator::new(3);
        let strict = Profiler::new(&backend, None, test_config()).unwrap();
        assert!(strict.generate_profile(&empty, &ItemCatalog::new(), Horizon::Short).is_err());
        let lenient = Profiler::new(
            &backend,
            None,
            ProfilerConfig {
                cold_user_fallback: true,
                ..test_config()
            },
        )
        .unwrap();
        let p = lenient.generate_profile(&empty, &ItemCatalog::new(), Horizon::Short).unwrap();
        assert_eq!(p.text, COLD_USER_TEXT);
        assert_eq!(backend.calls(), 0);
    }

    #[test]
    fn parallel_generation_preserves_order() {
        let (h, c) = fixture(&["A", "B", "C"]);
        let backend = TemplateGenerator::new(1);
        let p = Profiler::new(&backend, None, test_config()).unwrap();
        let out = p.generate_all(&[&h, &h], &c, &[Horizon::Short, Horizon::Long]).unwrap();
        let horizons: Vec<Horizon> = out.iter().map(|p| p.horizon).collect();
        assert_eq!(horizons, vec![Horizon::Short, Horizon::Long, Horizon::Short, Horizon::Long]);
    }

    #[test]
    fn remote_generator_wire_format() {
        let server = Server::start(vec![
            (500, "{}".into()),
            (200, r#"{"choices":[{"message":{"content":" Enjoys sci-fi. "}}]}"#.into()),
        ]);
        let settings = RemoteLlmSettings {
            remote: RemoteSettings {
                base_url: server.url.clone(),
                model: "gpt-4o-mini".into(),
                timeout_secs: 5,
            },
            ..RemoteLlmSettings::default()
        };
        let backend = RemoteGenerator::new(settings, "secret".into());
        let (h, c) = fixture(&["Dune"]);
        let p = Profiler::new(&backend, None, test_config()).unwrap();
        let out = p.generate_profile(&h, &c, Horizon::Long).unwrap();
        assert_eq!(out.text, "Enjoys sci-fi.");
        let reqs = server.join();
        assert_eq!(reqs.len(), 2);
        assert!(reqs[1].starts_with("POST /chat/completions"));
        let body: serde_json::Value = serde_json::from_str(reqs[1].split("\n\n").last().unwrap()).unwrap();
        assert_eq!(body["model"], "gpt-4o-mini");
        assert_eq!(body["temperature"], 0.0);
        assert_eq!(body["max_tokens"], 256);
        assert!(body["messages"][0]["content"].as_str().unwrap().contains("Dune"));
    }

    #[test]
    fn remote_requires_key() {
        std::env::remove_var(LLM_KEY_ENV);
        let err = RemoteGenerator::from_env(RemoteLlmSettings::default()).unwrap_err();
        assert_eq!(err.category(), "config");
    }
}
