//! Synthetic evaluation campaigns written in the on-disk formats the
//! report consumes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{Duration, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::protocol::{create_session, SessionPlan};
use crate::report::{CampaignConfig, DangerousPolicy, CONFIG_VERSION};
use crate::rollout::{ConditionTag, RolloutRecord, TerminalReason, SCHEMA_VERSION};
use crate::scoring::RubricSpec;

#[derive(Debug, Clone, PartialEq)]
pub struct FixturePolicy {
    pub policy_id: String,
    pub display_name: String,
    pub success_p: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSpec {
    pub tasks: Vec<String>,
    pub policies: Vec<FixturePolicy>,
    pub bundles_per_task: usize,
    pub milestones: usize,
    /// Shared-difficulty coupling within a bundle, as in
    /// [`super::gen_paired_outcomes`].
    pub correlation: f64,
    pub seed: u64,
    pub condition: ConditionTag,
}

impl FixtureSpec {
    /// Three policies of increasing skill over three tasks.
    pub fn three_by_three(bundles_per_task: usize, seed: u64) -> Self {
        FixtureSpec {
            tasks: vec!["PutKiwiInCenterOfTable".into(), "TurnMugRightsideUp".into(), "StackBowls".into()],
            policies: vec![
                FixturePolicy {
                    policy_id: "from-scratch".into(),
                    display_name: "From scratch".into(),
                    success_p: 0.35,
                },
                FixturePolicy {
                    policy_id: "pretrained".into(),
                    display_name: "Pretrained".into(),
                    success_p: 0.55,
                },
                FixturePolicy {
                    policy_id: "finetuned".into(),
                    display_name: "Finetuned".into(),
                    success_p: 0.85,
                },
            ],
            bundles_per_task,
            milestones: 4,
            correlation: 0.5,
            seed,
            condition: ConditionTag::nominal(),
        }
    }
}

/// Generated campaign plus the files it was written to.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub config: CampaignConfig,
    pub config_path: PathBuf,
    pub records: Vec<RolloutRecord>,
    pub rubrics: Vec<RubricSpec>,
}

/// Rollout records for `spec`, in bundle then slot order. Each bundle
/// draws one difficulty; success and milestone progress both follow it.
pub fn fixture_records(spec: &FixtureSpec) -> (CampaignConfig, Vec<RolloutRecord>, Vec<RubricSpec>) {
    let session = create_session(&SessionPlan {
        policies: spec
            .policies
            .iter()
            .map(|p| (p.policy_id.clone(), p.display_name.clone()))
            .collect(),
        tasks: spec.tasks.clone(),
        condition: Some(spec.condition.clone()),
        n_bundles: spec.bundles_per_task * spec.tasks.len(),
        rng_seed: spec.seed,
        ..Default::default()
    })
    .expect("fixture session parameters are valid");
    let m = spec.milestones;
    let rubrics: Vec<RubricSpec> = spec
        .tasks
        .iter()
        .map(|t| {
            RubricSpec::new(
                t,
                (1..=m).map(|j| format!("{t}: milestone {j} reached?")).collect(),
                vec![format!("{t}: dangerous behavior observed?")],
            )
            .expect("distinct milestones")
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(super::derive_seed(spec.seed, 0xF1, 0));
    let base = Utc.with_ymd_and_hms(2025, 3, 3, 8, 0, 0).unwrap();
    let mut clock = 0i64;
    let mut records = Vec::new();
    for bundle in &session.bundles {
        let shared: f64 = rng.random();
        for (slot_idx, slot) in bundle.slots.iter().enumerate() {
            let policy = session.policy_by_code(&slot.blinding_code).expect("code from session");
            let p = spec
                .policies
                .iter()
                .find(|fp| fp.policy_id == policy.policy_id)
                .expect("policy from spec")
                .success_p;
            let latent = if rng.random::<f64>() < spec.correlation {
                shared
            } else {
                rng.random()
            };
            let success = latent < p;
            // progress is monotone in how far the latent sits above p
            let achieved = if success {
                m
            } else {
                let span = (1.0 - p).max(f64::EPSILON);
                let frac = 1.0 - (latent - p) / span;
                ((frac * m as f64).floor() as usize).min(m - 1)
            };
            let mut answers: Vec<bool> = (0..m).map(|j| j < achieved).collect();
            answers.push(false);
            let duration = 60 + (rng.random::<f64>() * 120.0) as i64;
            let started_at = base + Duration::seconds(clock);
            clock += duration + 30;
            records.push(RolloutRecord {
                schema_version: SCHEMA_VERSION,
                rollout_id: format!("{}-{}-s{}", bundle.ic.task_id, bundle.bundle_id, slot_idx),
                task: bundle.ic.task_id.clone(),
                policy: slot.blinding_code.clone(),
                condition: spec.condition.clone(),
                bundle_id: Some(bundle.bundle_id.clone()),
                station: format!("station-{}", slot_idx % 2 + 1),
                started_at,
                ended_at: started_at + Duration::seconds(duration),
                success,
                rubric_answers: answers,
                predicate_traces: None,
                terminal_reason: if success {
                    TerminalReason::Success
                } else {
                    TerminalReason::Timeout
                },
                evaluator_id: Some(format!("evaluator-{}", slot_idx % 2 + 1)),
                extra: BTreeMap::new(),
            });
        }
    }

    let config = CampaignConfig {
        version: CONFIG_VERSION,
        name: "synthetic fixture".into(),
        seed: spec.seed,
        alpha: 0.05,
        per_test_alpha: None,
        dirichlet_draws: 2000,
        credible_level: 0.95,
        dangerous: DangerousPolicy::CountAsFailure,
        policies: session.policies.clone(),
        tasks: spec.tasks.clone(),
        conditions: vec![spec.condition.clone()],
        logs: vec![PathBuf::from("rollouts.jsonl")],
        rubrics: Some(PathBuf::from("rubrics.json")),
        predicates: None,
        expected_per_cell: Some(spec.bundles_per_task as i64),
        base_dir: PathBuf::new(),
    };
    (config, records, rubrics)
}

/// Writes `campaign.toml`, `rollouts.jsonl` and `rubrics.json` into `dir`.
pub fn write_fixture_campaign(dir: &Path, spec: &FixtureSpec) -> std::io::Result<Fixture> {
    std::fs::create_dir_all(dir)?;
    let (mut config, records, rubrics) = fixture_records(spec);
    let mut log = String::new();
    for r in &records {
        log.push_str(&serde_json::to_string(r).expect("records serialize"));
        log.push('\n');
    }
    std::fs::write(dir.join("rollouts.jsonl"), log)?;
    std::fs::write(
        dir.join("rubrics.json"),
        serde_json::to_string_pretty(&rubrics).expect("rubrics serialize"),
    )?;
    let config_path = dir.join("campaign.toml");
    std::fs::write(&config_path, config.to_toml())?;
    config.base_dir = dir.to_path_buf();
    Ok(Fixture {
        config,
        config_path,
        records,
        rubrics,
    })
}
