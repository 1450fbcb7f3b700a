//! Turns execution outcomes into rank scores and pairs each problem's best
//! teacher response with its best student response.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::datamodel::{
    CandidateResponse, ExecutionOutcome, ExecutionRecord, Extra, ProgrammingProblem, Record, Role,
    Situation, TrainingTriple,
};
use crate::trainer::format::{encode_response, training_prompt};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SituationScores {
    pub compile_error: f64,
    pub runtime_error: f64,
    pub partial_pass: f64,
    pub all_pass: f64,
}

impl Default for SituationScores {
    fn default() -> Self {
        Self {
            compile_error: 0.0,
            runtime_error: 1.0,
            partial_pass: 2.0,
            all_pass: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RankPolicy {
    pub situation_scores: SituationScores,
    pub teacher_tiebreak_bonus: f64,
}

impl Default for RankPolicy {
    fn default() -> Self {
        Self {
            situation_scores: SituationScores::default(),
            teacher_tiebreak_bonus: 0.5,
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("invalid rank policy: {0}")]
pub struct PolicyError(String);

impl RankPolicy {
    /// Scores must increase strictly from compile error to all pass, and the
    /// teacher bonus must be smaller than the narrowest gap so it can only
    /// break ties.
    pub fn validate(&self) -> Result<(), PolicyError> {
        let s = &self.situation_scores;
        let ladder = [s.compile_error, s.runtime_error, s.partial_pass, s.all_pass];
        if ladder.iter().any(|v| !v.is_finite()) {
            return Err(PolicyError("scores must be finite".into()));
        }
        let min_gap = ladder.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
        if min_gap <= 0.0 {
            return Err(PolicyError(format!("scores must be strictly increasing: {ladder:?}")));
        }
        let b = self.teacher_tiebreak_bonus;
        if !(b > 0.0 && b < min_gap) {
            return Err(PolicyError(format!("teacher bonus {b} must lie in (0, {min_gap})")));
        }
        Ok(())
    }

    pub fn situation_score(&self, situation: &Situation) -> f64 {
        let s = &self.situation_scores;
        match situation {
            Situation::CompileError => s.compile_error,
            Situation::RuntimeError => s.runtime_error,
            Situation::PartialPass { .. } => s.partial_pass,
            Situation::AllPass { .. } => s.all_pass,
        }
    }
}

/// Situation score plus the teacher bonus for teacher responses.
pub fn score(outcome: &ExecutionOutcome, role: Role, policy: &RankPolicy) -> f64 {
    let base = policy.situation_score(&outcome.situation);
    match role {
        Role::Teacher => base + policy.teacher_tiebreak_bonus,
        Role::Student => base,
    }
}

/// All executed candidates of one problem, in candidate-file order.
#[derive(Debug, Clone)]
pub struct ProblemGroup {
    pub problem_id: String,
    pub problem: Option<ProgrammingProblem>,
    pub entries: Vec<(CandidateResponse, ExecutionOutcome)>,
}

/// Why a problem produced no triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterLogEntry {
    pub problem_id: String,
    pub decision: FilterDecision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub student_score: Option<f64>,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterDecision {
    /// The best teacher response is in a worse situation than the best student one.
    Filtered,
    /// The group could not be ranked (a role is missing, or the problem is unknown).
    Skipped,
}

impl Record for FilterLogEntry {
    const KIND: &'static str = "filter_log";

    fn key(&self) -> Option<&str> {
        Some(&self.problem_id)
    }
}

/// Groups executed candidates by problem. Candidates without an outcome,
/// or whose execution errored, are left out. Groups are sorted by problem id.
pub fn group_candidates(
    problems: &[ProgrammingProblem],
    candidates: &[CandidateResponse],
    records: &[ExecutionRecord],
) -> Vec<ProblemGroup> {
    let by_id: HashMap<&str, &ProgrammingProblem> = problems.iter().map(|p| (p.id.as_str(), p)).collect();
    let outcomes: HashMap<&str, &ExecutionOutcome> = records
        .iter()
        .filter_map(|r| r.outcome.as_ref().map(|o| (r.candidate_id.as_str(), o)))
        .collect();
    let mut groups: BTreeMap<&str, ProblemGroup> = BTreeMap::new();
    for cand in candidates {
        let Some(outcome) = outcomes.get(cand.id.as_str()) else { continue };
        groups
            .entry(cand.problem_id.as_str())
            .or_insert_with(|| ProblemGroup {
                problem_id: cand.problem_id.clone(),
                problem: by_id.get(cand.problem_id.as_str()).map(|p| (*p).clone()),
                entries: Vec::new(),
            })
            .entries
            .push((cand.clone(), (*outcome).clone()));
    }
    groups.into_values().collect()
}

/// Highest-ranked entry for `role`; the earliest entry wins ties.
fn best<'a>(
    entries: &'a [(CandidateResponse, ExecutionOutcome)],
    role: Role,
    policy: &RankPolicy,
) -> Option<(&'a CandidateResponse, &'a ExecutionOutcome, f64)> {
    let mut best: Option<(&CandidateResponse, &ExecutionOutcome, f64)> = None;
    for (cand, outcome) in entries.iter().filter(|(c, _)| c.role() == role) {
        let r = score(outcome, role, policy);
        if best.is_none_or(|(_, _, b)| r > b) {
            best = Some((cand, outcome, r));
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub enum GroupResult {
    Triple(TrainingTriple),
    Log(FilterLogEntry),
}

/// Ranks one problem group.
pub fn rank_group(group: &ProblemGroup, policy: &RankPolicy) -> GroupResult {
    let skip = |reason: String| {
        GroupResult::Log(FilterLogEntry {
            problem_id: group.problem_id.clone(),
            decision: FilterDecision::Skipped,
            teacher_score: None,
            student_score: None,
            reason,
        })
    };
    let Some(problem) = &group.problem else {
        return skip("unknown problem id".into());
    };
    let teacher = best(&group.entries, Role::Teacher, policy);
    let student = best(&group.entries, Role::Student, policy);
    let (Some((tea, tea_out, r_tea)), Some((stu, stu_out, r_stu))) = (teacher, student) else {
        let missing = if teacher.is_none() { "teacher" } else { "student" };
        return skip(format!("no executed {missing} response"));
    };

    // Quality filter on raw situation scores; the bonus only orders ties.
    let tea_quality = policy.situation_score(&tea_out.situation);
    let stu_quality = policy.situation_score(&stu_out.situation);
    if tea_quality < stu_quality {
        return GroupResult::Log(FilterLogEntry {
            problem_id: group.problem_id.clone(),
            decision: FilterDecision::Filtered,
            teacher_score: Some(r_tea),
            student_score: Some(r_stu),
            reason: format!(
                "teacher {} below student {}",
                tea_out.situation, stu_out.situation
            ),
        });
    }
    debug_assert!(r_tea > r_stu);
    GroupResult::Triple(TrainingTriple {
        problem_id: group.problem_id.clone(),
        prompt: training_prompt(problem),
        y_tea: encode_response(&problem.signature, &tea.extracted_code),
        y_stu: encode_response(&problem.signature, &stu.extracted_code),
        r_tea,
        r_stu,
        extra: Extra::new(),
    })
}

/// One triple per group that passes the teacher-not-worse filter, plus a log
/// entry for every group that did not. Output is ordered by problem id.
pub fn build_training_triples(
    groups: &[ProblemGroup],
    policy: &RankPolicy,
) -> (Vec<TrainingTriple>, Vec<FilterLogEntry>) {
    let mut sorted: Vec<&ProblemGroup> = groups.iter().collect();
    sorted.sort_by(|a, b| a.problem_id.cmp(&b.problem_id));
    let mut triples = Vec::new();
    let mut log = Vec::new();
    for group in sorted {
        match rank_group(group, policy) {
            GroupResult::Triple(t) => triples.push(t),
            GroupResult::Log(entry) => log.push(entry),
        }
    }
    (triples, log)
}
