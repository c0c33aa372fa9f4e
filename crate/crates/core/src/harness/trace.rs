//! Episode traces as JSONL (one turn per line) and their text rendering.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dialogue::{Action, Feedback, Outcome, TurnRecord};
use crate::error::{Error, Result};
use crate::simulator::{Episode, EpisodeKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceLine {
    pub episode: usize,
    pub user: usize,
    pub kind: EpisodeKind,
    pub target: usize,
    pub turn: usize,
    pub action: Action,
    pub feedback: Feedback,
    pub reward: f64,
    pub candidates: usize,
}

pub fn trace_lines(episodes: &[Episode]) -> Vec<TraceLine> {
    let mut out = Vec::new();
    for (i, ep) in episodes.iter().enumerate() {
        for t in &ep.turns {
            out.push(TraceLine {
                episode: i,
                user: ep.user,
                kind: ep.kind,
                target: ep.target,
                turn: t.turn,
                action: t.action.clone(),
                feedback: t.feedback,
                reward: t.reward,
                candidates: t.candidates,
            });
        }
    }
    out
}

pub fn write_trace<W: Write>(w: &mut W, episodes: &[Episode]) -> Result<()> {
    for line in trace_lines(episodes) {
        let text = serde_json::to_string(&line)?;
        writeln!(w, "{text}").map_err(|e| Error::io("<trace>", e))?;
    }
    Ok(())
}

pub fn save_trace(path: &Path, episodes: &[Episode]) -> Result<()> {
    let mut buf = Vec::new();
    write_trace(&mut buf, episodes)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Rebuilds episodes from trace lines. An episode succeeded iff its last
/// turn was accepted.
pub fn episodes_from_lines(lines: &[TraceLine]) -> Result<Vec<Episode>> {
    let mut out: Vec<(usize, Episode)> = Vec::new();
    for l in lines {
        let start = out.last().is_none_or(|(id, _)| *id != l.episode);
        if start {
            out.push((
                l.episode,
                Episode {
                    user: l.user,
                    kind: l.kind,
                    target: l.target,
                    turns: Vec::new(),
                    outcome: Outcome::Quit,
                },
            ));
        }
        let ep = &mut out.last_mut().expect("pushed above").1;
        if ep.turns.len() != l.turn {
            return Err(Error::Validation(format!(
                "episode {} jumps to turn {} after {} turns",
                l.episode,
                l.turn,
                ep.turns.len()
            )));
        }
        if ep.outcome != Outcome::Quit {
            return Err(Error::Validation(format!("episode {} continues after acceptance", l.episode)));
        }
        ep.turns.push(TurnRecord {
            turn: l.turn,
            action: l.action.clone(),
            feedback: l.feedback,
            reward: l.reward,
            candidates: l.candidates,
        });
        if l.feedback == Feedback::Accept {
            ep.outcome = Outcome::Success { turns: l.turn + 1 };
        }
    }
    Ok(out.into_iter().map(|(_, e)| e).collect())
}

pub fn load_trace(path: &Path) -> Result<Vec<Episode>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TraceLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        lines.push(parsed);
    }
    episodes_from_lines(&lines)
}

pub fn render_header(index: usize, user: usize, kind: EpisodeKind) -> String {
    let kind = match kind {
        EpisodeKind::Exploration => "exploration",
        EpisodeKind::Support => "support",
        EpisodeKind::Query => "query",
    };
    format!("== Conversation {index} (user {user}, {kind})")
}

pub fn render_action(turn: usize, action: &Action) -> String {
    match action {
        Action::Ask { attr } => format!("[{}] Agent: Would you like something with attribute #{attr}?", turn + 1),
        Action::Recommend { items } => {
            let list: Vec<String> = items.iter().map(|v| format!("#{v}")).collect();
            format!("[{}] Agent: You might like one of these items: {}", turn + 1, list.join(", "))
        }
    }
}

pub fn render_feedback(turn: usize, feedback: Feedback) -> String {
    format!("[{}] User: {}", turn + 1, feedback.as_str())
}

pub fn render_outcome(outcome: Outcome) -> String {
    match outcome {
        Outcome::Success { turns } => format!("== Accepted after {turns} turns"),
        _ => "== Ended without acceptance".to_string(),
    }
}

/// Text transcript of `episodes`, identical to what the chat REPL prints.
pub fn render_episodes(episodes: &[Episode]) -> String {
    let mut out = String::new();
    for (i, ep) in episodes.iter().enumerate() {
        let _ = writeln!(out, "{}", render_header(i, ep.user, ep.kind));
        for t in &ep.turns {
            let _ = writeln!(out, "{}", render_action(t.turn, &t.action));
            let _ = writeln!(out, "{}", render_feedback(t.turn, t.feedback));
        }
        let _ = writeln!(out, "{}", render_outcome(ep.outcome));
    }
    out
}
