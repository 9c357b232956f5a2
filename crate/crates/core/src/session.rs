//! Human-in-the-loop grasping episodes.
//!
//! A session walks one scene through
//! `DESCRIBED -> AWAITING_REVIEW -> GROUNDED -> PLANNED -> EXECUTED`.
//! While the self-explanation awaits review the operator may type a
//! correction, which sends the session back to `DESCRIBED` with a
//! human-sourced description; stepping from `AWAITING_REVIEW` accepts the
//! robot's description as is. A grounding failure parks the session in
//! `FAILED` until a new correction arrives.
//!
//! Every transition appends a [`SessionEvent`]. The log is enough to rebuild
//! the session: [`replay`] re-executes the recorded actions with the recorded
//! timestamps and checks each regenerated event against the log.

use std::collections::VecDeque;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::is_correct;
use crate::grounding::{ground_with, noisy_ground_rng, GroundedObject};
use crate::lang::{describe_target, parse, Description, Lexicon, ParseError, Source};
use crate::noise::{corrupt_description_rng, NoiseConfig};
use crate::planner::{Planner, PlannerConfig, ScoredGrasp};
use crate::scene::{Scene, ValidationIssue};
use crate::seeding::stream;

/// Grasps kept in a `Planned` event.
pub const LOGGED_GRASPS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Phase {
    Described,
    AwaitingReview,
    Grounded,
    Planned,
    Executed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub seed: u64,
    pub noise: NoiseConfig,
    pub planner: PlannerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventPayload {
    Created {
        session_id: String,
        scene: Scene,
        config: SessionConfig,
    },
    Described {
        description: Option<Description>,
    },
    ReviewRequested,
    Intervened {
        text: String,
        description: Description,
    },
    Grounded {
        description: Option<Description>,
        grounded: GroundedObject,
    },
    GroundingFailed {
        description: Option<Description>,
        reason: String,
    },
    Planned {
        total: usize,
        top: Vec<ScoredGrasp>,
    },
    PlanningFailed {
        reason: String,
    },
    Executed {
        grasp: ScoredGrasp,
        success: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub seq: u64,
    pub timestamp_ms: u64,
    pub phase: Phase,
    pub payload: EventPayload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub id: String,
    pub scene: Scene,
    pub config: SessionConfig,
    pub phase: Phase,
    pub description: Option<Description>,
    pub grounded: Option<GroundedObject>,
    pub ranked: Vec<ScoredGrasp>,
    pub success: Option<bool>,
    pub failure: Option<String>,
    pub history: Vec<SessionEvent>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SessionError {
    #[error("invalid scene: {0:?}")]
    InvalidScene(Vec<ValidationIssue>),
    #[error("action not allowed in phase {phase:?}")]
    Phase { phase: Phase },
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("configuration: {0}")]
    Config(String),
}

pub trait Clock {
    fn now_ms(&mut self) -> u64;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&mut self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

/// Deterministic clock ticking by one millisecond per reading.
#[derive(Debug, Clone, Default)]
pub struct TickClock(pub u64);

impl Clock for TickClock {
    fn now_ms(&mut self) -> u64 {
        self.0 += 1;
        self.0
    }
}

struct ReplayClock(VecDeque<u64>);

impl Clock for ReplayClock {
    fn now_ms(&mut self) -> u64 {
        self.0.pop_front().unwrap_or(0)
    }
}

/// Default vocabulary plus every class present in the scene.
pub fn lexicon_for(scene: &Scene) -> Lexicon {
    let mut lex = Lexicon::default();
    for o in &scene.objects {
        lex.add_class(&o.class_name);
    }
    lex
}

impl SessionState {
    fn push(&mut self, clock: &mut dyn Clock, phase: Phase, payload: EventPayload) {
        let seq = self.history.last().map_or(0, |e| e.seq + 1);
        self.phase = phase;
        self.history.push(SessionEvent {
            seq,
            timestamp_ms: clock.now_ms(),
            phase,
            payload,
        });
    }

    pub fn planner(&self) -> Planner {
        Planner::new(self.config.planner.clone(), self.config.noise)
    }

    /// Events with `seq >= from`.
    pub fn events_since(&self, from: u64) -> &[SessionEvent] {
        let idx = self.history.partition_point(|e| e.seq < from);
        &self.history[idx..]
    }
}

/// Opens a session: describes the scene (with configured corruption) and
/// waits for the operator's review.
pub fn start(id: &str, scene: Scene, config: SessionConfig, clock: &mut dyn Clock) -> Result<SessionState, SessionError> {
    scene.validate().map_err(SessionError::InvalidScene)?;
    config.noise.validate().map_err(|e| SessionError::Config(e.to_string()))?;
    config.planner.validate().map_err(|e| SessionError::Config(e.to_string()))?;
    let graph = scene.graph().map_err(|e| SessionError::Config(e.to_string()))?;
    let lex = lexicon_for(&scene);
    let mut rng = stream(config.seed, "describe", &scene.id);
    let template_seed = rand::Rng::random::<u64>(&mut rng);
    let description = match describe_target(&lex, &scene, &graph, template_seed)
        .map_err(|e| SessionError::Config(e.to_string()))?
    {
        Some(d) => Some(
            corrupt_description_rng(&lex, &d, &scene, config.noise.describe_error_rate, &mut rng)
                .map_err(|e| SessionError::Config(e.to_string()))?,
        ),
        None => None,
    };

    let mut state = SessionState {
        id: id.to_string(),
        scene: scene.clone(),
        config: config.clone(),
        phase: Phase::Described,
        description: None,
        grounded: None,
        ranked: Vec::new(),
        success: None,
        failure: None,
        history: Vec::new(),
    };
    state.push(
        clock,
        Phase::Described,
        EventPayload::Created {
            session_id: id.to_string(),
            scene,
            config,
        },
    );
    state.description = description.clone();
    state.push(clock, Phase::Described, EventPayload::Described { description });
    state.push(clock, Phase::AwaitingReview, EventPayload::ReviewRequested);
    Ok(state)
}

/// Replaces the current description with typed text.
pub fn intervene(state: &mut SessionState, text: &str, clock: &mut dyn Clock) -> Result<(), SessionError> {
    if !matches!(state.phase, Phase::AwaitingReview | Phase::Failed) {
        return Err(SessionError::Phase { phase: state.phase });
    }
    let lex = lexicon_for(&state.scene);
    let parsed = parse(&lex, text)?;
    let description = Description {
        triple: parsed.triple,
        text: text.to_string(),
        source: Source::Human,
        corrupted: false,
    };
    state.description = Some(description.clone());
    state.grounded = None;
    state.ranked.clear();
    state.success = None;
    state.failure = None;
    state.push(
        clock,
        Phase::Described,
        EventPayload::Intervened {
            text: text.to_string(),
            description,
        },
    );
    Ok(())
}

fn ground_current(state: &SessionState) -> Result<GroundedObject, String> {
    let scene = &state.scene;
    let graph = scene.graph().map_err(|e| e.to_string())?;
    match &state.description {
        Some(d) => {
            let mut rng = stream(
                state.config.seed,
                "ground",
                &format!("{}#{}", scene.id, state.history.len()),
            );
            let delta = state.config.noise.ground_error_rate;
            if delta > 0.0 {
                noisy_ground_rng(scene, &graph, &d.triple, delta, &mut rng)
            } else {
                ground_with(scene, &graph, &d.triple)
            }
            .map_err(|e| e.to_string())
        }
        None if scene.objects.len() == 1 => Ok(GroundedObject {
            object_id: scene.objects[0].id,
            region: scene.objects[0].bbox,
            confidence: 1.0,
            ambiguous: false,
        }),
        None => Err("no description available; type one".to_string()),
    }
}

/// Advances one pipeline stage.
pub fn step(state: &mut SessionState, clock: &mut dyn Clock) -> Result<(), SessionError> {
    match state.phase {
        Phase::Described | Phase::AwaitingReview => match ground_current(state) {
            Ok(grounded) => {
                state.grounded = Some(grounded.clone());
                let description = state.description.clone();
                state.push(clock, Phase::Grounded, EventPayload::Grounded { description, grounded });
            }
            Err(reason) => {
                state.failure = Some(reason.clone());
                let description = state.description.clone();
                state.push(
                    clock,
                    Phase::Failed,
                    EventPayload::GroundingFailed { description, reason },
                );
            }
        },
        Phase::Grounded => {
            let region = state.grounded.as_ref().expect("grounded phase has a region").region;
            let planner = state.planner();
            let seed = state.config.seed;
            let ranked = planner
                .gen_proposals(&state.scene, seed)
                .and_then(|pool| planner.plan(&state.scene, &pool, &region, seed));
            match ranked {
                Ok(r) if !r.is_empty() => {
                    let top = r.iter().take(LOGGED_GRASPS).cloned().collect();
                    let total = r.len();
                    state.ranked = r;
                    state.push(clock, Phase::Planned, EventPayload::Planned { total, top });
                }
                Ok(_) => {
                    let reason = "no grasp proposal on the grounded object".to_string();
                    state.failure = Some(reason.clone());
                    state.push(clock, Phase::Failed, EventPayload::PlanningFailed { reason });
                }
                Err(e) => {
                    let reason = e.to_string();
                    state.failure = Some(reason.clone());
                    state.push(clock, Phase::Failed, EventPayload::PlanningFailed { reason });
                }
            }
        }
        Phase::Planned => {
            let grasp = state.ranked[0].clone();
            let success = is_correct(&grasp, &state.scene, state.config.planner.jaccard);
            state.success = Some(success);
            state.push(clock, Phase::Executed, EventPayload::Executed { grasp, success });
        }
        Phase::Executed | Phase::Failed => return Err(SessionError::Phase { phase: state.phase }),
    }
    Ok(())
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("log is empty")]
    Empty,
    #[error("first event must be `created`")]
    MissingCreate,
    #[error("event {seq} could not be re-applied: {source}")]
    Action { seq: u64, source: SessionError },
    #[error("replay diverged at event {seq}")]
    Divergence { seq: u64 },
    #[error("event {seq} does not follow an action")]
    Unexpected { seq: u64 },
}

/// Rebuilds a session from its event log.
pub fn replay(events: &[SessionEvent]) -> Result<SessionState, ReplayError> {
    let first = events.first().ok_or(ReplayError::Empty)?;
    let EventPayload::Created {
        session_id,
        scene,
        config,
    } = &first.payload
    else {
        return Err(ReplayError::MissingCreate);
    };
    let mut clock = ReplayClock(events.iter().map(|e| e.timestamp_ms).collect());
    let mut state = start(session_id, scene.clone(), config.clone(), &mut clock).map_err(|source| {
        ReplayError::Action {
            seq: first.seq,
            source,
        }
    })?;
    let mut checked = 0;
    loop {
        // every regenerated event must match the log
        for (i, e) in state.history.iter().enumerate().skip(checked) {
            if events.get(i) != Some(e) {
                return Err(ReplayError::Divergence { seq: e.seq });
            }
        }
        checked = state.history.len();
        let Some(next) = events.get(checked) else {
            return Ok(state);
        };
        let result = match &next.payload {
            EventPayload::Intervened { text, .. } => intervene(&mut state, text, &mut clock),
            EventPayload::Grounded { .. }
            | EventPayload::GroundingFailed { .. }
            | EventPayload::Planned { .. }
            | EventPayload::PlanningFailed { .. }
            | EventPayload::Executed { .. } => step(&mut state, &mut clock),
            _ => return Err(ReplayError::Unexpected { seq: next.seq }),
        };
        result.map_err(|source| ReplayError::Action { seq: next.seq, source })?;
    }
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

/// Append-only JSON-lines event log, one event per line.
pub struct EventLog {
    path: PathBuf,
    file: File,
    durable: bool,
}

impl EventLog {
    pub fn open(path: impl AsRef<Path>, durable: bool) -> Result<Self, LogError> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|source| LogError::Io {
                path: path.clone(),
                source,
            })?;
        Ok(Self { path, file, durable })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, event: &SessionEvent) -> Result<(), LogError> {
        let mut line = serde_json::to_string(event).expect("events serialize");
        line.push('\n');
        let io = |source| LogError::Io {
            path: self.path.clone(),
            source,
        };
        // single write per line keeps appends whole
        self.file.write_all(line.as_bytes()).map_err(io)?;
        self.file.flush().map_err(io)?;
        if self.durable {
            self.file.sync_data().map_err(io)?;
        }
        Ok(())
    }
}

pub fn parse_log(body: &str, path: &Path) -> Result<Vec<SessionEvent>, LogError> {
    body.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| LogError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<SessionEvent>, LogError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| LogError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut body = String::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|source| LogError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        body.push_str(&line);
        body.push('\n');
    }
    parse_log(&body, path)
}
