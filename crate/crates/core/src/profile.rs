//! File-based store of anonymous patient profiles and their sessions.
//!
//! Layout under the root:
//!
//! ```text
//! defaults.json                      optional clinic-edited defaults
//! {nickname}/profile.json
//! {nickname}/{compact ISO}.session.jsonl
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use chrono::{DateTime, NaiveDateTime, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::{compute_stats, DatedStats, SessionStats};
use crate::config::{ConfigError, ConfigOverrides};
use crate::recorder::{read_session, session_file_name, RecorderError, SESSION_SUFFIX};
use crate::{GameConfig, Mechanic};

pub const PROFILE_SCHEMA_VERSION: u32 = 1;
pub const DEFAULTS_SCHEMA_VERSION: u32 = 1;
pub const NICKNAME_PATTERN: &str = "^[a-z0-9_-]{2,24}$";

const SHIPPED_DEFAULTS: &str = include_str!("../assets/defaults.json");

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("nickname `{0}` is already taken")]
    DuplicateNickname(String),
    #[error("nickname `{0}` must match {NICKNAME_PATTERN}")]
    InvalidNickname(String),
    #[error("no profile `{0}`")]
    NotFound(String),
    #[error("no session `{0}`")]
    SessionNotFound(String),
    #[error("merged config is invalid: {0}")]
    InvalidMergedConfig(#[from] ConfigError),
    #[error("corrupt store file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("storage failure: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Recorder(#[from] RecorderError),
}

fn nickname_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(NICKNAME_PATTERN).expect("valid pattern"))
}

pub fn validate_nickname(nick: &str) -> Result<(), ProfileError> {
    if nickname_re().is_match(nick) {
        Ok(())
    } else {
        Err(ProfileError::InvalidNickname(nick.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemDefaults {
    pub schema_version: u32,
    pub games: BTreeMap<Mechanic, GameConfig>,
}

impl SystemDefaults {
    /// The defaults shipped with the software.
    pub fn shipped() -> Self {
        Self::parse(SHIPPED_DEFAULTS).expect("shipped defaults are valid")
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let d: SystemDefaults = serde_json::from_str(text).map_err(|e| e.to_string())?;
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.schema_version != DEFAULTS_SCHEMA_VERSION {
            return Err(format!("unsupported defaults schema_version {}", self.schema_version));
        }
        for m in Mechanic::ALL {
            let c = self.games.get(&m).ok_or_else(|| format!("missing defaults for {m:?}"))?;
            if c.mechanic != m {
                return Err(format!("defaults for {m:?} declare mechanic {:?}", c.mechanic));
            }
            c.validate().map_err(|e| e.to_string())?;
        }
        Ok(())
    }

    pub fn for_mechanic(&self, m: Mechanic) -> &GameConfig {
        &self.games[&m]
    }
}

/// Everything the system knows about a patient. There is deliberately no
/// field for a real name or any other personal data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientProfile {
    pub schema_version: u32,
    pub nickname: String,
    pub created_at: DateTime<Utc>,
    #[serde(default)]
    pub notes: String,
    #[serde(default)]
    pub overrides: BTreeMap<Mechanic, ConfigOverrides>,
    /// Session file names in this profile's directory.
    #[serde(default)]
    pub sessions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionEntry {
    pub id: String,
    pub file: String,
    pub started_at: DateTime<Utc>,
    pub footer_present: bool,
    pub skipped_lines: usize,
    pub stats: SessionStats,
}

/// Session id: `{nickname}.{compact ISO start}`.
pub fn session_id(nickname: &str, file_name: &str) -> String {
    format!("{nickname}.{}", file_name.trim_end_matches(SESSION_SUFFIX))
}

fn parse_stamp(stamp: &str) -> Option<DateTime<Utc>> {
    NaiveDateTime::parse_from_str(stamp, "%Y%m%dT%H%M%SZ").ok().map(|n| n.and_utc())
}

pub struct ProfileStore {
    root: PathBuf,
}

impl ProfileStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, ProfileError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn defaults_path(&self) -> PathBuf {
        self.root.join("defaults.json")
    }

    fn profile_dir(&self, nick: &str) -> PathBuf {
        self.root.join(nick)
    }

    fn profile_path(&self, nick: &str) -> PathBuf {
        self.profile_dir(nick).join("profile.json")
    }

    /// Clinic defaults if saved in the store, otherwise the shipped ones.
    pub fn defaults(&self) -> Result<SystemDefaults, ProfileError> {
        let path = self.defaults_path();
        match fs::read_to_string(&path) {
            Ok(text) => SystemDefaults::parse(&text).map_err(|reason| ProfileError::Corrupt { path, reason }),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(SystemDefaults::shipped()),
            Err(e) => Err(e.into()),
        }
    }

    pub fn save_defaults(&self, defaults: &SystemDefaults) -> Result<(), ProfileError> {
        defaults.validate().map_err(|e| ProfileError::InvalidMergedConfig(ConfigError(e)))?;
        write_atomic(&self.defaults_path(), &serde_json::to_vec_pretty(defaults).expect("defaults serialize"))
    }

    pub fn create_profile(&self, nickname: &str) -> Result<PatientProfile, ProfileError> {
        self.create_profile_at(nickname, Utc::now())
    }

    pub fn create_profile_at(&self, nickname: &str, created_at: DateTime<Utc>) -> Result<PatientProfile, ProfileError> {
        validate_nickname(nickname)?;
        let dir = self.profile_dir(nickname);
        match fs::create_dir(&dir) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                return Err(ProfileError::DuplicateNickname(nickname.to_string()))
            }
            Err(e) => return Err(e.into()),
        }
        let profile = PatientProfile {
            schema_version: PROFILE_SCHEMA_VERSION,
            nickname: nickname.to_string(),
            created_at: crate::recorder::truncate_to_seconds(created_at),
            notes: String::new(),
            overrides: BTreeMap::new(),
            sessions: Vec::new(),
        };
        self.save(&profile)?;
        Ok(profile)
    }

    pub fn save(&self, profile: &PatientProfile) -> Result<(), ProfileError> {
        validate_nickname(&profile.nickname)?;
        write_atomic(&self.profile_path(&profile.nickname), &serde_json::to_vec_pretty(profile).expect("profile serializes"))
    }

    pub fn load(&self, nickname: &str) -> Result<PatientProfile, ProfileError> {
        validate_nickname(nickname).map_err(|_| ProfileError::NotFound(nickname.to_string()))?;
        let path = self.profile_path(nickname);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(ProfileError::NotFound(nickname.to_string())),
            Err(e) => return Err(e.into()),
        };
        let p: PatientProfile = serde_json::from_str(&text).map_err(|e| ProfileError::Corrupt { path: path.clone(), reason: e.to_string() })?;
        if p.schema_version != PROFILE_SCHEMA_VERSION || p.nickname != nickname {
            return Err(ProfileError::Corrupt { path, reason: "schema version or nickname mismatch".into() });
        }
        Ok(p)
    }

    pub fn list_profiles(&self) -> Result<Vec<PatientProfile>, ProfileError> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.root)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if entry.file_type()?.is_dir() && nickname_re().is_match(&name) && self.profile_path(&name).exists() {
                out.push(self.load(&name)?);
            }
        }
        out.sort_by(|a, b| a.nickname.cmp(&b.nickname));
        Ok(out)
    }

    /// Replaces the overrides for one mechanic after validating the merge.
    pub fn set_overrides(&self, nickname: &str, mechanic: Mechanic, overrides: ConfigOverrides) -> Result<GameConfig, ProfileError> {
        let mut p = self.load(nickname)?;
        let merged = self.defaults()?.for_mechanic(mechanic).merged(&overrides)?;
        if overrides.is_empty() {
            p.overrides.remove(&mechanic);
        } else {
            p.overrides.insert(mechanic, overrides);
        }
        self.save(&p)?;
        Ok(merged)
    }

    pub fn set_notes(&self, nickname: &str, notes: &str) -> Result<PatientProfile, ProfileError> {
        let mut p = self.load(nickname)?;
        p.notes = notes.to_string();
        self.save(&p)?;
        Ok(p)
    }

    /// System defaults overlaid with the profile's overrides.
    pub fn effective_config(&self, profile: &PatientProfile, mechanic: Mechanic) -> Result<GameConfig, ProfileError> {
        let defaults = self.defaults()?;
        let base = defaults.for_mechanic(mechanic);
        match profile.overrides.get(&mechanic) {
            Some(o) => Ok(base.merged(o)?),
            None => Ok(base.clone()),
        }
    }

    /// Registers a new session and returns the path its log should be
    /// written to.
    pub fn new_session_path(&self, nickname: &str, started_at: DateTime<Utc>) -> Result<(String, PathBuf), ProfileError> {
        let mut p = self.load(nickname)?;
        let file = session_file_name(started_at);
        if !p.sessions.contains(&file) {
            p.sessions.push(file.clone());
            self.save(&p)?;
        }
        Ok((session_id(nickname, &file), self.profile_dir(nickname).join(file)))
    }

    pub fn session_path(&self, id: &str) -> Result<PathBuf, ProfileError> {
        let not_found = || ProfileError::SessionNotFound(id.to_string());
        let (nick, stamp) = id.split_once('.').ok_or_else(not_found)?;
        if !nickname_re().is_match(nick) || parse_stamp(stamp).is_none() {
            return Err(not_found());
        }
        let path = self.profile_dir(nick).join(format!("{stamp}{SESSION_SUFFIX}"));
        if path.is_file() {
            Ok(path)
        } else {
            Err(not_found())
        }
    }

    /// Sessions of a profile in chronological order. Stats come from the
    /// footer, or are recomputed when the footer is missing.
    pub fn list_sessions(&self, nickname: &str) -> Result<Vec<SessionEntry>, ProfileError> {
        let profile = self.load(nickname)?;
        let mut files = profile.sessions.clone();
        for entry in fs::read_dir(self.profile_dir(nickname))? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if name.ends_with(SESSION_SUFFIX) && !files.contains(&name) {
                files.push(name);
            }
        }
        let mut out = Vec::new();
        for file in files {
            let Some(started_at) = parse_stamp(file.trim_end_matches(SESSION_SUFFIX)) else { continue };
            let path = self.profile_dir(nickname).join(&file);
            if !path.is_file() {
                continue;
            }
            let (log, report) = read_session(&path)?;
            let stats = match &log.footer {
                Some(f) => f.summary.clone(),
                None => compute_stats(&log),
            };
            out.push(SessionEntry {
                id: session_id(nickname, &file),
                file,
                started_at,
                footer_present: report.footer_present,
                skipped_lines: report.skipped.len(),
                stats,
            });
        }
        out.sort_by_key(|e| e.started_at);
        Ok(out)
    }

    pub fn dated_stats(&self, nickname: &str) -> Result<Vec<DatedStats>, ProfileError> {
        Ok(self
            .list_sessions(nickname)?
            .into_iter()
            .map(|e| DatedStats { started_at: e.started_at, stats: e.stats })
            .collect())
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ProfileError> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
