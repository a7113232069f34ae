//! Training by example: record what a trainer clicks through, turn the
//! recording into a workflow, and let the administrator widen its parameter
//! rules.

pub mod xml;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{StateId, Transition, UserId, Workflow, WorkflowId};
use crate::page::{is_gateway_internal, PageId};
use crate::rule::{ParamRule, Params, RuleError};

pub type RecordingId = u64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub page: PageId,
    pub params: Params,
    pub captured_at: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordingState {
    Recording,
    Stopped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Recording {
    pub id: RecordingId,
    pub name: String,
    /// The user whose sessions are captured while this recording runs.
    pub trainer: UserId,
    pub steps: Vec<Step>,
    pub state: RecordingState,
    pub started_at: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TrainingError {
    #[error("trainer `{0}` already has an active recording")]
    RecordingAlreadyActive(UserId),
    #[error("unknown recording {0}")]
    UnknownRecording(RecordingId),
    #[error("recording {0} is not active")]
    RecordingNotActive(RecordingId),
    #[error("recording {0} is still running")]
    RecordingNotStopped(RecordingId),
    #[error("recording {0} has no steps")]
    EmptyRecording(RecordingId),
    #[error("workflow has no transition {0}")]
    UnknownTransition(u32),
    #[error(transparent)]
    Rule(#[from] RuleError),
}

/// All recordings known to one gateway.
#[derive(Debug, Clone, Default)]
pub struct RecordingBook {
    recordings: BTreeMap<RecordingId, Recording>,
    next_id: RecordingId,
}

impl RecordingBook {
    pub fn start(
        &mut self,
        name: &str,
        trainer: UserId,
        now: i64,
    ) -> Result<Recording, TrainingError> {
        if self.active_for(&trainer).is_some() {
            return Err(TrainingError::RecordingAlreadyActive(trainer));
        }
        self.next_id += 1;
        let rec = Recording {
            id: self.next_id,
            name: name.to_string(),
            trainer,
            steps: Vec::new(),
            state: RecordingState::Recording,
            started_at: now,
        };
        self.recordings.insert(rec.id, rec.clone());
        Ok(rec)
    }

    /// Stops a recording. Stopping a stopped recording is a no-op.
    pub fn stop(&mut self, id: RecordingId) -> Result<Recording, TrainingError> {
        let rec = self
            .recordings
            .get_mut(&id)
            .ok_or(TrainingError::UnknownRecording(id))?;
        rec.state = RecordingState::Stopped;
        Ok(rec.clone())
    }

    pub fn get(&self, id: RecordingId) -> Option<&Recording> {
        self.recordings.get(&id)
    }

    pub fn list(&self) -> impl Iterator<Item = &Recording> {
        self.recordings.values()
    }

    pub fn remove(&mut self, id: RecordingId) -> Option<Recording> {
        self.recordings.remove(&id)
    }

    pub fn active_for(&self, trainer: &UserId) -> Option<RecordingId> {
        self.recordings
            .values()
            .find(|r| &r.trainer == trainer && r.state == RecordingState::Recording)
            .map(|r| r.id)
    }

    /// Appends a step. Requests to gateway-internal paths are never
    /// captured; the return value says whether a step was added.
    pub fn capture_step(
        &mut self,
        id: RecordingId,
        page: PageId,
        params: Params,
        now: i64,
    ) -> Result<bool, TrainingError> {
        let rec = self
            .recordings
            .get_mut(&id)
            .ok_or(TrainingError::UnknownRecording(id))?;
        if rec.state != RecordingState::Recording {
            return Err(TrainingError::RecordingNotActive(id));
        }
        if is_gateway_internal(page.path()) {
            return Ok(false);
        }
        let floor = rec.steps.last().map_or(i64::MIN, |s| s.captured_at);
        rec.steps.push(Step {
            page,
            params,
            captured_at: now.max(floor),
        });
        Ok(true)
    }
}

/// A workflow built from a recording, not yet part of the policy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkflowDraft {
    pub workflow: Workflow,
    pub origin_recording: RecordingId,
}

impl WorkflowDraft {
    pub fn edit_rule(
        &mut self,
        transition_id: u32,
        param: &str,
        rule: ParamRule,
    ) -> Result<(), TrainingError> {
        edit_rule(&mut self.workflow, transition_id, param, rule)
    }

    pub fn rename(&mut self, name: &str) {
        self.workflow.name = name.to_string();
    }
}

/// Turns a stopped recording into a linear workflow `s0 -> s1 -> ... -> sN`.
/// Each observed parameter becomes a literal rule for exactly the values
/// seen, and runs of identical consecutive steps collapse to one transition.
pub fn build_workflow(
    recording: &Recording,
    workflow_id: WorkflowId,
) -> Result<WorkflowDraft, TrainingError> {
    if recording.state != RecordingState::Stopped {
        return Err(TrainingError::RecordingNotStopped(recording.id));
    }
    let mut steps: Vec<&Step> = Vec::with_capacity(recording.steps.len());
    for step in &recording.steps {
        let same = steps
            .last()
            .is_some_and(|prev| prev.page == step.page && prev.params == step.params);
        if !same {
            steps.push(step);
        }
    }
    let first = steps
        .first()
        .ok_or(TrainingError::EmptyRecording(recording.id))?;

    let state = |i: usize| StateId::new(format!("s{i}"));
    let transitions = steps
        .iter()
        .enumerate()
        .map(|(i, step)| Transition {
            id: (i + 1) as u32,
            from: state(i),
            to: state(i + 1),
            page: step.page.clone(),
            params: step
                .params
                .iter()
                .map(|(k, vs)| (k.clone(), ParamRule::literal_multiset(vs.iter().cloned())))
                .collect(),
        })
        .collect();
    let workflow = Workflow {
        id: workflow_id,
        name: recording.name.clone(),
        states: (0..=steps.len()).map(state).collect(),
        start_state: state(0),
        start_page: first.page.clone(),
        transitions,
    };
    Ok(WorkflowDraft {
        workflow,
        origin_recording: recording.id,
    })
}

/// Replaces (or adds) the rule guarding `param` on one transition.
pub fn edit_rule(
    workflow: &mut Workflow,
    transition_id: u32,
    param: &str,
    rule: ParamRule,
) -> Result<(), TrainingError> {
    rule.check()?;
    let t = workflow
        .transition_mut(transition_id)
        .ok_or(TrainingError::UnknownTransition(transition_id))?;
    t.params.insert(param.to_string(), rule);
    Ok(())
}

/// Removes the rule for `param`, making the parameter inadmissible again.
pub fn remove_rule(
    workflow: &mut Workflow,
    transition_id: u32,
    param: &str,
) -> Result<bool, TrainingError> {
    let t = workflow
        .transition_mut(transition_id)
        .ok_or(TrainingError::UnknownTransition(transition_id))?;
    Ok(t.params.remove(param).is_some())
}
