use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ProtocolError;
use crate::rollout::{CellKey, ConditionTag, Plan, PolicyRef, RolloutStore, ValidationReport};

const CODE_ALPHABET: &[u8] = b"BCDFGHJKLMNPQRSTVWXZ23456789";
const CODE_LEN: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IcSource {
    SimulationSampled,
    Manual,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitialCondition {
    pub ic_id: String,
    pub task_id: String,
    pub overlay_asset: String,
    pub source: IcSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl InitialCondition {
    fn check(&self) -> Result<(), ProtocolError> {
        let sampled = self.source == IcSource::SimulationSampled;
        if sampled != self.seed.is_some() {
            return Err(ProtocolError::InvalidInitialCondition(self.ic_id.clone()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotStatus {
    Pending,
    Running,
    Done,
    /// Aborted twice; no rollout will be recorded for this slot.
    Missing,
}

/// Transition requested for a slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotUpdate {
    Running,
    Done,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub blinding_code: String,
    pub status: SlotStatus,
    pub retries: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rollout_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluator_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bundle {
    pub bundle_id: String,
    pub ic: InitialCondition,
    pub slots: Vec<Slot>,
}

impl Bundle {
    pub fn ordering(&self) -> Vec<&str> {
        self.slots.iter().map(|s| s.blinding_code.as_str()).collect()
    }

    pub fn is_complete(&self) -> bool {
        self.slots
            .iter()
            .all(|s| matches!(s.status, SlotStatus::Done | SlotStatus::Missing))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub policies: Vec<PolicyRef>,
    pub tasks: Vec<String>,
    pub condition: ConditionTag,
    pub bundles: Vec<Bundle>,
    pub rng_seed: u64,
    #[serde(default)]
    pub evaluator_ids: Vec<String>,
    #[serde(default)]
    pub qa_reviewer_ids: Vec<String>,
}

/// Inputs to [`create_session`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionPlan {
    /// `(policy_id, display_name)` pairs.
    pub policies: Vec<(String, String)>,
    pub tasks: Vec<String>,
    pub condition: Option<ConditionTag>,
    pub n_bundles: usize,
    pub rng_seed: u64,
    /// Supplied initial conditions, one per bundle. When absent, each bundle
    /// references a sampled simulation seed, cycling through `tasks`.
    #[serde(default)]
    pub initial_conditions: Option<Vec<InitialCondition>>,
    #[serde(default)]
    pub evaluator_ids: Vec<String>,
    #[serde(default)]
    pub qa_reviewer_ids: Vec<String>,
}

fn draw_code(rng: &mut ChaCha8Rng) -> String {
    (0..CODE_LEN)
        .map(|_| CODE_ALPHABET[rng.random_range(0..CODE_ALPHABET.len())] as char)
        .collect()
}

pub fn create_session(plan: &SessionPlan) -> Result<Session, ProtocolError> {
    let k = plan.policies.len();
    if k < 2 {
        return Err(ProtocolError::TooFewPolicies(k));
    }
    if plan.n_bundles == 0 {
        return Err(ProtocolError::NoBundles);
    }
    if plan.tasks.is_empty() {
        return Err(ProtocolError::NoTasks);
    }
    let mut ids = BTreeSet::new();
    for (id, _) in &plan.policies {
        if !ids.insert(id.as_str()) {
            return Err(ProtocolError::DuplicatePolicy(id.clone()));
        }
    }
    if let Some(both) = plan.evaluator_ids.iter().find(|e| plan.qa_reviewer_ids.contains(e)) {
        return Err(ProtocolError::EvaluatorIsReviewer(both.clone()));
    }
    if let Some(ics) = &plan.initial_conditions {
        if ics.len() != plan.n_bundles {
            return Err(ProtocolError::InitialConditionCount {
                expected: plan.n_bundles,
                got: ics.len(),
            });
        }
        for ic in ics {
            ic.check()?;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(plan.rng_seed);
    let session_id = format!("s-{:016x}", rng.random::<u64>());

    let mut codes: Vec<String> = Vec::with_capacity(k);
    while codes.len() < k {
        let code = draw_code(&mut rng);
        let clashes = codes.contains(&code)
            || plan
                .policies
                .iter()
                .any(|(id, _)| code.contains(id.as_str()) || id.contains(code.as_str()));
        if !clashes {
            codes.push(code);
        }
    }
    let policies: Vec<PolicyRef> = plan
        .policies
        .iter()
        .zip(&codes)
        .map(|((id, name), code)| PolicyRef {
            policy_id: id.clone(),
            display_name: name.clone(),
            blinding_code: code.clone(),
        })
        .collect();

    let mut bundles = Vec::with_capacity(plan.n_bundles);
    for b in 0..plan.n_bundles {
        let mut order = codes.clone();
        order.shuffle(&mut rng);
        let ic = match &plan.initial_conditions {
            Some(ics) => ics[b].clone(),
            None => {
                let task = plan.tasks[b % plan.tasks.len()].clone();
                let ic_id = format!("ic-{b:05}");
                InitialCondition {
                    overlay_asset: format!("overlays/{task}/{ic_id}.png"),
                    ic_id,
                    task_id: task,
                    source: IcSource::SimulationSampled,
                    seed: Some(rng.random()),
                }
            }
        };
        bundles.push(Bundle {
            bundle_id: format!("b{b:05}"),
            ic,
            slots: order
                .into_iter()
                .map(|code| Slot {
                    blinding_code: code,
                    status: SlotStatus::Pending,
                    retries: 0,
                    rollout_id: None,
                    evaluator_id: None,
                })
                .collect(),
        });
    }

    Ok(Session {
        session_id,
        policies,
        tasks: plan.tasks.clone(),
        condition: plan.condition.clone().unwrap_or_else(ConditionTag::nominal),
        bundles,
        rng_seed: plan.rng_seed,
        evaluator_ids: plan.evaluator_ids.clone(),
        qa_reviewer_ids: plan.qa_reviewer_ids.clone(),
    })
}

/// What an evaluator sees for the next rollout: blinded identifiers only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub session_id: String,
    pub bundle_id: String,
    pub bundle_index: usize,
    pub slot: usize,
    pub slot_count: usize,
    pub blinding_code: String,
    pub ic: InitialCondition,
}

impl Session {
    pub fn is_complete(&self) -> bool {
        self.bundles.iter().all(Bundle::is_complete)
    }

    pub fn bundle(&self, bundle_id: &str) -> Option<&Bundle> {
        self.bundle_index(bundle_id).map(|i| &self.bundles[i])
    }

    fn bundle_index(&self, bundle_id: &str) -> Option<usize> {
        // generated ids encode their index; anything else falls back to a scan
        let hinted = bundle_id
            .strip_prefix('b')
            .and_then(|d| d.parse::<usize>().ok())
            .filter(|&i| self.bundles.get(i).is_some_and(|b| b.bundle_id == bundle_id));
        hinted.or_else(|| self.bundles.iter().position(|b| b.bundle_id == bundle_id))
    }

    /// Index of the first incomplete bundle. Slots only change inside this
    /// bundle, so completion is monotone over the bundle list.
    pub fn current_bundle(&self) -> Option<usize> {
        let i = self.bundles.partition_point(Bundle::is_complete);
        (i < self.bundles.len()).then_some(i)
    }

    pub fn policy_by_code(&self, code: &str) -> Option<&PolicyRef> {
        self.policies.iter().find(|p| p.blinding_code == code)
    }

    /// `(done, total)` slot counts; missing slots count as finished.
    pub fn progress(&self) -> (usize, usize) {
        let total = self.bundles.iter().map(|b| b.slots.len()).sum();
        let done = self
            .bundles
            .iter()
            .flat_map(|b| &b.slots)
            .filter(|s| matches!(s.status, SlotStatus::Done | SlotStatus::Missing))
            .count();
        (done, total)
    }

    /// Next pending slot of the lowest-index incomplete bundle.
    pub fn next_assignment(&self) -> Result<Assignment, ProtocolError> {
        let idx = self.current_bundle().ok_or(ProtocolError::SessionExhausted)?;
        let bundle = &self.bundles[idx];
        let slot = bundle
            .slots
            .iter()
            .position(|s| s.status == SlotStatus::Pending)
            .ok_or_else(|| ProtocolError::BundleInProgress(bundle.bundle_id.clone()))?;
        Ok(Assignment {
            session_id: self.session_id.clone(),
            bundle_id: bundle.bundle_id.clone(),
            bundle_index: idx,
            slot,
            slot_count: bundle.slots.len(),
            blinding_code: bundle.slots[slot].blinding_code.clone(),
            ic: bundle.ic.clone(),
        })
    }

    /// Checks a slot transition without applying it.
    pub fn check_slot_update(&self, bundle_id: &str, slot: usize, update: SlotUpdate) -> Result<SlotStatus, ProtocolError> {
        let idx = self
            .bundle_index(bundle_id)
            .ok_or_else(|| ProtocolError::UnknownBundle(bundle_id.to_string()))?;
        let bundle = &self.bundles[idx];
        let s = bundle.slots.get(slot).ok_or(ProtocolError::UnknownSlot {
            bundle_id: bundle_id.to_string(),
            slot,
        })?;
        let next = match (s.status, update) {
            (SlotStatus::Pending, SlotUpdate::Running) => SlotStatus::Running,
            (SlotStatus::Running, SlotUpdate::Done) => SlotStatus::Done,
            (SlotStatus::Pending | SlotStatus::Running, SlotUpdate::Aborted) => {
                if s.retries == 0 {
                    SlotStatus::Pending
                } else {
                    SlotStatus::Missing
                }
            }
            (from, to) => return Err(ProtocolError::IllegalTransition { from, to }),
        };
        match self.current_bundle() {
            Some(current) if current != idx => Err(ProtocolError::OutOfOrder {
                bundle_id: bundle_id.to_string(),
                current: self.bundles[current].bundle_id.clone(),
            }),
            _ => Ok(next),
        }
    }

    /// Applies a slot transition. An abort re-queues the slot once; a
    /// second abort marks it missing.
    pub fn record_slot(
        &mut self,
        bundle_id: &str,
        slot: usize,
        rollout_id: Option<&str>,
        update: SlotUpdate,
        evaluator_id: Option<&str>,
    ) -> Result<SlotStatus, ProtocolError> {
        let next = self.check_slot_update(bundle_id, slot, update)?;
        let idx = self.bundle_index(bundle_id).expect("checked above");
        let s = &mut self.bundles[idx].slots[slot];
        if update == SlotUpdate::Aborted {
            s.retries += 1;
        }
        s.status = next;
        if let Some(r) = rollout_id {
            s.rollout_id = Some(r.to_string());
        }
        if let Some(e) = evaluator_id {
            s.evaluator_id = Some(e.to_string());
        }
        Ok(next)
    }

    /// Slots that will never produce a rollout, as `bundle_id/slot`.
    pub fn missing_slots(&self) -> Vec<String> {
        self.bundles
            .iter()
            .flat_map(|b| {
                b.slots
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| s.status == SlotStatus::Missing)
                    .map(move |(i, _)| format!("{}/{}", b.bundle_id, i))
            })
            .collect()
    }

    /// Expected rollouts per (task, blinding code, condition).
    pub fn plan(&self) -> Plan {
        let mut cells: BTreeMap<CellKey, i64> = BTreeMap::new();
        for b in &self.bundles {
            for s in &b.slots {
                *cells
                    .entry(CellKey {
                        task: b.ic.task_id.clone(),
                        policy: s.blinding_code.clone(),
                        condition: self.condition.clone(),
                    })
                    .or_default() += 1;
            }
        }
        Plan { cells }
    }
}

pub fn validate_against_session(store: &RolloutStore, session: &Session) -> Result<ValidationReport, ProtocolError> {
    let mut report = crate::rollout::validate_store(store, &session.plan())?;
    report.missing_slots = session.missing_slots();
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Evaluator,
    QaReviewer,
    Analyst,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Authorization {
    pub actor_id: String,
    pub role: Role,
}

/// Returns the blinding code → policy id mapping. Only analysts may
/// unblind, and only once the session is complete unless `force` is set.
pub fn unblind(session: &Session, auth: &Authorization, force: bool) -> Result<BTreeMap<String, String>, ProtocolError> {
    if auth.role != Role::Analyst {
        return Err(ProtocolError::Unauthorized);
    }
    if !session.is_complete() && !force {
        return Err(ProtocolError::SessionIncomplete(session.session_id.clone()));
    }
    Ok(session
        .policies
        .iter()
        .map(|p| (p.blinding_code.clone(), p.policy_id.clone()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn plan(k: usize, n_bundles: usize, seed: u64) -> SessionPlan {
        SessionPlan {
            policies: (0..k).map(|i| (format!("policy-{i}"), format!("Policy {i}"))).collect(),
            tasks: vec!["PutKiwiInCenterOfTable".into()],
            condition: None,
            n_bundles,
            rng_seed: seed,
            initial_conditions: None,
            evaluator_ids: vec!["eval-1".into()],
            qa_reviewer_ids: vec!["qa-1".into()],
        }
    }

    #[test]
    fn three_policies_fifty_bundles() {
        let s = create_session(&plan(3, 50, 1)).unwrap();
        assert_eq!(s.bundles.len(), 50);
        assert_eq!(s.progress(), (0, 150));
        let codes: BTreeSet<_> = s.policies.iter().map(|p| p.blinding_code.as_str()).collect();
        assert_eq!(codes.len(), 3);
        for b in &s.bundles {
            let ord: BTreeSet<_> = b.ordering().into_iter().collect();
            assert_eq!(ord, codes);
        }
        for p in &s.policies {
            assert_ne!(p.blinding_code, p.policy_id);
        }
    }

    #[test]
    fn two_policies_one_bundle() {
        let s = create_session(&plan(2, 1, 9)).unwrap();
        let codes: Vec<_> = s.policies.iter().map(|p| p.blinding_code.clone()).collect();
        let ord = s.bundles[0].ordering();
        assert!(ord == [codes[0].as_str(), codes[1].as_str()] || ord == [codes[1].as_str(), codes[0].as_str()]);
    }

    #[test]
    fn seeded_determinism() {
        assert_eq!(create_session(&plan(3, 20, 5)).unwrap(), create_session(&plan(3, 20, 5)).unwrap());
        assert_ne!(create_session(&plan(3, 20, 5)).unwrap(), create_session(&plan(3, 20, 6)).unwrap());
    }

    #[test]
    fn creation_errors() {
        assert_eq!(create_session(&plan(1, 5, 0)), Err(ProtocolError::TooFewPolicies(1)));
        assert_eq!(create_session(&plan(2, 0, 0)), Err(ProtocolError::NoBundles));
        let mut p = plan(2, 3, 0);
        p.policies[1].0 = "policy-0".into();
        assert_eq!(create_session(&p), Err(ProtocolError::DuplicatePolicy("policy-0".into())));
        let mut p = plan(2, 3, 0);
        p.qa_reviewer_ids.push("eval-1".into());
        assert!(matches!(create_session(&p), Err(ProtocolError::EvaluatorIsReviewer(_))));
        let mut p = plan(2, 1, 0);
        p.initial_conditions = Some(vec![InitialCondition {
            ic_id: "ic".into(),
            task_id: "t".into(),
            overlay_asset: "x.png".into(),
            source: IcSource::Manual,
            seed: Some(3),
        }]);
        assert!(matches!(create_session(&p), Err(ProtocolError::InvalidInitialCondition(_))));
    }

    fn run(s: &mut Session, a: &Assignment) {
        s.record_slot(&a.bundle_id, a.slot, None, SlotUpdate::Running, None).unwrap();
        s.record_slot(&a.bundle_id, a.slot, Some("r"), SlotUpdate::Done, None).unwrap();
    }

    #[test]
    fn walk_through_bundles() {
        let mut s = create_session(&plan(3, 2, 4)).unwrap();
        let a = s.next_assignment().unwrap();
        assert_eq!((a.bundle_index, a.slot), (0, 0));
        run(&mut s, &a);
        let a = s.next_assignment().unwrap();
        run(&mut s, &a);
        let a = s.next_assignment().unwrap();
        assert_eq!((a.bundle_index, a.slot), (0, 2));
        assert_eq!(a.ic, s.bundles[0].ic);
        run(&mut s, &a);
        let a = s.next_assignment().unwrap();
        assert_eq!((a.bundle_index, a.slot), (1, 0));
        assert_ne!(a.ic.ic_id, s.bundles[0].ic.ic_id);
    }

    #[test]
    fn running_slot_blocks_next_bundle() {
        let mut s = create_session(&plan(2, 2, 4)).unwrap();
        for slot in 0..2 {
            s.record_slot("b00000", slot, None, SlotUpdate::Running, None).unwrap();
        }
        assert_eq!(s.next_assignment(), Err(ProtocolError::BundleInProgress("b00000".into())));
    }

    #[test]
    fn abort_retry_then_done() {
        let mut s = create_session(&plan(2, 1, 4)).unwrap();
        assert_eq!(s.record_slot("b00000", 0, None, SlotUpdate::Running, None), Ok(SlotStatus::Running));
        assert_eq!(s.record_slot("b00000", 0, None, SlotUpdate::Aborted, None), Ok(SlotStatus::Pending));
        assert_eq!(s.next_assignment().unwrap().slot, 0);
        s.record_slot("b00000", 0, None, SlotUpdate::Running, None).unwrap();
        assert_eq!(s.record_slot("b00000", 0, Some("r1"), SlotUpdate::Done, None), Ok(SlotStatus::Done));
        assert_eq!(s.bundles[0].slots[0].retries, 1);
    }

    #[test]
    fn second_abort_marks_missing() {
        let mut s = create_session(&plan(2, 1, 4)).unwrap();
        for _ in 0..2 {
            s.record_slot("b00000", 1, None, SlotUpdate::Running, None).unwrap();
            s.record_slot("b00000", 1, None, SlotUpdate::Aborted, None).unwrap();
        }
        assert_eq!(s.bundles[0].slots[1].status, SlotStatus::Missing);
        assert_eq!(s.missing_slots(), vec!["b00000/1".to_string()]);
        let report = validate_against_session(&RolloutStore::new(), &s).unwrap();
        assert_eq!(report.missing_slots, vec!["b00000/1".to_string()]);
    }

    #[test]
    fn illegal_transitions() {
        let mut s = create_session(&plan(2, 1, 4)).unwrap();
        assert_eq!(
            s.record_slot("b00000", 0, None, SlotUpdate::Done, None),
            Err(ProtocolError::IllegalTransition {
                from: SlotStatus::Pending,
                to: SlotUpdate::Done
            })
        );
        assert!(matches!(
            s.record_slot("b99999", 0, None, SlotUpdate::Running, None),
            Err(ProtocolError::UnknownBundle(_))
        ));
    }

    #[test]
    fn later_bundles_wait_for_the_current_one() {
        let mut s = create_session(&plan(2, 2, 4)).unwrap();
        assert_eq!(
            s.record_slot("b00001", 0, None, SlotUpdate::Running, None),
            Err(ProtocolError::OutOfOrder {
                bundle_id: "b00001".into(),
                current: "b00000".into()
            })
        );
        for slot in 0..2 {
            s.record_slot("b00000", slot, None, SlotUpdate::Running, None).unwrap();
            s.record_slot("b00000", slot, None, SlotUpdate::Done, None).unwrap();
        }
        assert_eq!(s.current_bundle(), Some(1));
        assert!(s.record_slot("b00001", 0, None, SlotUpdate::Running, None).is_ok());
    }

    #[test]
    fn exhaustion() {
        let mut s = create_session(&plan(2, 1, 4)).unwrap();
        for _ in 0..2 {
            let a = s.next_assignment().unwrap();
            run(&mut s, &a);
        }
        assert!(s.is_complete());
        assert_eq!(s.next_assignment(), Err(ProtocolError::SessionExhausted));
    }

    #[test]
    fn unblinding_rules() {
        let mut s = create_session(&plan(3, 1, 4)).unwrap();
        let analyst = Authorization {
            actor_id: "ana".into(),
            role: Role::Analyst,
        };
        let evaluator = Authorization {
            actor_id: "eval-1".into(),
            role: Role::Evaluator,
        };
        assert_eq!(unblind(&s, &evaluator, false), Err(ProtocolError::Unauthorized));
        assert!(matches!(unblind(&s, &analyst, false), Err(ProtocolError::SessionIncomplete(_))));
        for _ in 0..3 {
            let a = s.next_assignment().unwrap();
            run(&mut s, &a);
        }
        let map = unblind(&s, &analyst, false).unwrap();
        // blinding is a bijection
        let ids: BTreeSet<_> = map.values().cloned().collect();
        assert_eq!(ids, s.policies.iter().map(|p| p.policy_id.clone()).collect());
        for p in &s.policies {
            assert_eq!(map[&p.blinding_code], p.policy_id);
        }
    }

    #[test]
    fn assignments_never_carry_policy_ids() {
        let mut s = create_session(&plan(3, 10, 77)).unwrap();
        while let Ok(a) = s.next_assignment() {
            let json = serde_json::to_string(&a).unwrap();
            for p in &s.policies {
                assert!(!json.contains(&p.policy_id));
            }
            run(&mut s, &a);
        }
    }
}
