//! Policies and environment transitions on the simulated world.

use std::collections::BTreeMap;

use num_rational::Ratio;
use proptest::prelude::*;
use teachenv::discovery::SkillDiscovery;
use teachenv::engine::Engine;
use teachenv::env::{EnvError, SkillSource};
use teachenv::model::{
    DataSpec, EnvVariant, EvaluatedPrediction, SkillBucket, SkillListState, State, TaskDomainId, TaskItem,
};
use teachenv::policy::{
    largest_remainder, NoStateMask, Policy, PolicyContext, RandomTreePolicy, SkillListPolicy,
};
use teachenv::provider::{LlmClient, MockConfig};
use teachenv::sim::SimWorld;
use teachenv::student::SimParams;
use teachenv::{Action, EnvConfig, Environment, ForestCaps, SimulatedStudent, SkillForest};

/// Largest remainder on exact rationals, ties to the earlier name.
fn oracle(weights: &[(String, u32)], total: u64) -> BTreeMap<String, u64> {
    let mut rows: Vec<(String, u64)> = weights.iter().map(|(k, w)| (k.clone(), *w as u64)).collect();
    rows.sort();
    let mut sum: u64 = rows.iter().map(|r| r.1).sum();
    if sum == 0 {
        rows.iter_mut().for_each(|r| r.1 = 1);
        sum = rows.len() as u64;
    }
    let q: Vec<Ratio<u64>> = rows.iter().map(|r| Ratio::new(r.1 * total, sum)).collect();
    let mut alloc: Vec<u64> = q.iter().map(|x| x.to_integer()).collect();
    let left = total - alloc.iter().sum::<u64>();
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| q[b].fract().cmp(&q[a].fract()).then(a.cmp(&b)));
    for &i in order.iter().take(left as usize) {
        alloc[i] += 1;
    }
    rows.into_iter().map(|r| r.0).zip(alloc).collect()
}

proptest! {
    #[test]
    fn largest_remainder_matches_exact(ws in prop::collection::vec(0u32..20, 1..8), total in 0u64..500) {
        let weights: Vec<(String, u32)> = ws.iter().enumerate().map(|(i, w)| (format!("s{i}"), *w)).collect();
        let as_f64: Vec<(String, f64)> = weights.iter().map(|(k, w)| (k.clone(), *w as f64)).collect();
        let got = largest_remainder(&as_f64, total);
        prop_assert_eq!(got.values().sum::<u64>(), total);
        prop_assert_eq!(got, oracle(&weights, total));
    }
}

#[test]
fn largest_remainder_examples() {
    let w = |v: &[(&str, f64)]| v.iter().map(|(k, x)| (k.to_string(), *x)).collect::<Vec<_>>();
    let a = largest_remainder(&w(&[("A", 0.2), ("B", 0.4), ("C", 0.6)]), 10);
    assert_eq!(
        a,
        BTreeMap::from([("A".into(), 2), ("B".into(), 3), ("C".into(), 5)])
    );
    let z = largest_remainder(&w(&[("A", 0.0), ("B", 0.0)]), 10);
    assert_eq!(z, BTreeMap::from([("A".into(), 5), ("B".into(), 5)]));
}

fn pred(id: &str, skill: &str, correct: bool) -> EvaluatedPrediction {
    EvaluatedPrediction {
        item_id: id.into(),
        predicted_answer: "x".into(),
        correct,
        assigned_skill: Some(skill.into()),
        iteration: 0,
    }
}

fn item(id: &str) -> TaskItem {
    TaskItem {
        item_id: id.into(),
        instruction: format!("question {id}"),
        media_ref: None,
        gold_answer: "0.5".into(),
        difficulty: Some(2),
        true_skill: None,
        true_subskill: None,
        latent_pass_threshold: Some(0.5),
    }
}

fn skill_list_state(acc_a: bool, acc_b: bool) -> State {
    State::SkillList(SkillListState {
        per_skill: BTreeMap::from([
            (
                "A".to_string(),
                SkillBucket::new(vec![pred("a1", "A", acc_a), pred("a2", "A", acc_a)]),
            ),
            (
                "B".to_string(),
                SkillBucket::new(vec![pred("b1", "B", acc_b), pred("b2", "B", acc_b)]),
            ),
        ]),
    })
}

fn items() -> BTreeMap<String, TaskItem> {
    ["a1", "a2", "b1", "b2", "t1", "t2", "t3", "t4"]
        .iter()
        .map(|i| (i.to_string(), item(i)))
        .collect()
}

#[test]
fn skill_list_budget_goes_to_the_weak_skill() {
    let items = items();
    let ctx = PolicyContext {
        budget: 10,
        domain: TaskDomainId::Simulated,
        caps: ForestCaps::default(),
        items: &items,
    };
    let mut p = SkillListPolicy::new(LlmClient::mock(MockConfig::default()));
    let Action::GenerateData { specs } = p.act(&skill_list_state(true, false), &ctx).unwrap() else {
        panic!("expected a plan")
    };
    assert_eq!(specs.len(), 10);
    assert!(specs.iter().all(|s| s.target_skill.as_deref() == Some("B")));

    // Both perfect: uniform split.
    let Action::GenerateData { specs } = p.act(&skill_list_state(true, true), &ctx).unwrap() else {
        panic!("expected a plan")
    };
    let on_a = specs
        .iter()
        .filter(|s| s.target_skill.as_deref() == Some("A"))
        .count();
    assert_eq!((on_a, specs.len() - on_a), (5, 5));
}

#[test]
fn no_state_mask_ignores_student_feedback() {
    let items = items();
    let ctx = PolicyContext {
        budget: 8,
        domain: TaskDomainId::Simulated,
        caps: ForestCaps::default(),
        items: &items,
    };
    let pool: Vec<String> = ["t1", "t2", "t3", "t4"].map(String::from).to_vec();
    let run = |state: State| {
        let inner = SkillListPolicy::new(LlmClient::mock(MockConfig::default()));
        let mut masked = NoStateMask::new(inner, pool.clone(), 4, 11);
        masked.act(&state, &ctx).unwrap()
    };
    assert_eq!(
        run(skill_list_state(true, false)),
        run(skill_list_state(false, true))
    );
    assert_eq!(
        run(skill_list_state(true, true)),
        run(skill_list_state(false, false))
    );
}

#[test]
fn random_tree_policy_explores_half_the_time() {
    let caps = ForestCaps {
        per_action_cap: 10,
        per_subskill_cap: 1000,
        max_subskills_per_tree: 50,
    };
    let forest = SkillForest::with_skills(&["A", "B", "C"], caps, 0).unwrap();
    let forest = ["A", "B", "C"]
        .iter()
        .fold(forest, |f, s| f.grow_tree(s, &["x"]).unwrap().0);
    let mut p = RandomTreePolicy::new(3, 2);
    let n = 10_000;
    let explores = (0..n)
        .filter(|_| matches!(p.next_action(&forest), Action::Explore { .. }))
        .count();
    let frac = explores as f64 / n as f64;
    assert!((frac - 0.5).abs() <= 0.02, "{frac}");
}

fn environment(variant: EnvVariant, source: SkillSource) -> Environment {
    let world = SimWorld::standard(0, 3);
    let validation = world.build_split("validation", 200).unwrap();
    let llm = LlmClient::mock(MockConfig {
        label_pool: world.skill_names(),
        ..MockConfig::default()
    });
    let student = SimulatedStudent::from_world(&world, &validation, SimParams::default());
    let mut config = EnvConfig::new(variant);
    config.skill_source = source;
    Environment::new(
        config,
        validation,
        SkillDiscovery::new(llm.clone(), "simulated"),
        Engine::new(TaskDomainId::Simulated, Some(llm)).unwrap(),
        Box::new(student),
    )
}

fn user_skills() -> SkillSource {
    SkillSource::UserSpecified {
        skills: SimWorld::standard(0, 3).skill_names(),
    }
}

#[test]
fn user_skills_start_as_empty_trees() {
    let mut env = environment(EnvVariant::SkillTree, user_skills());
    let State::SkillTree(s) = env.reset().unwrap() else {
        panic!("skill-tree state expected")
    };
    assert_eq!(s.forest.trees.len(), 4);
    assert!(s.forest.trees.iter().all(|t| t.subskills.is_empty()));
    assert_eq!(s.per_skill_accuracy.len(), 4);
}

#[test]
fn open_ended_state_lists_every_prediction() {
    let mut env = environment(EnvVariant::OpenEnded, SkillSource::default());
    let State::OpenEnded(s) = env.reset().unwrap() else {
        panic!("open-ended state expected")
    };
    assert_eq!(s.predictions.len(), 200);
    assert!(env.discovered().is_none());
}

#[test]
fn explore_grows_without_training() {
    let mut env = environment(EnvVariant::SkillTree, user_skills());
    env.reset().unwrap();
    let before = env.report().unwrap().overall_accuracy;
    let ckpt = env.checkpoint().unwrap().clone();
    let out = env
        .step(&Action::Explore {
            skill: "Algebra".into(),
            num_new_subskills: 2,
        })
        .unwrap();
    assert!(!out.info.trained);
    assert_eq!(out.reward, before);
    assert_eq!(out.info.delta, 0.0);
    assert_eq!(env.checkpoint().unwrap(), &ckpt);
    assert_eq!(env.forest().unwrap().tree("Algebra").unwrap().subskills.len(), 2);
    assert_eq!(env.iteration(), 0);
}

#[test]
fn exploit_generates_exactly_the_allocation() {
    let mut env = environment(EnvVariant::SkillTree, user_skills());
    env.reset().unwrap();
    env.step(&Action::Explore {
        skill: "Algebra".into(),
        num_new_subskills: 2,
    })
    .unwrap();
    let out = env
        .step(&Action::Exploit {
            skill: "Algebra".into(),
            deltas: BTreeMap::from([("Algebra::sub1".to_string(), 50)]),
        })
        .unwrap();
    assert!(out.info.trained);
    assert_eq!(out.datums.len(), 50);
    assert_eq!(out.info.manifest["Algebra"]["Algebra::sub1"], 50);
    assert_eq!(env.iteration(), 1);
    assert!(out.info.delta > 0.0);

    // Raising the allocation again only produces the difference.
    let out = env
        .step(&Action::Exploit {
            skill: "Algebra".into(),
            deltas: BTreeMap::from([("Algebra::sub1".to_string(), 20)]),
        })
        .unwrap();
    assert_eq!(out.datums.len(), 20);
}

#[test]
fn empty_plan_is_identity() {
    let mut env = environment(EnvVariant::SkillList, user_skills());
    let s0 = env.reset().unwrap();
    let out = env.step(&Action::GenerateData { specs: vec![] }).unwrap();
    assert!(!out.info.trained);
    assert_eq!(out.state.digest(), s0.digest());
    assert_eq!(out.reward, env.report().unwrap().overall_accuracy);
}

#[test]
fn budget_and_legality_are_enforced() {
    let mut env = environment(EnvVariant::SkillList, user_skills());
    env.reset().unwrap();
    let specs = vec![DataSpec::new(TaskDomainId::Simulated, "x"); 501];
    assert!(matches!(
        env.step(&Action::GenerateData { specs }),
        Err(EnvError::OverBudget {
            specs: 501,
            budget: 500
        })
    ));
    assert!(matches!(
        env.step(&Action::Explore {
            skill: "Algebra".into(),
            num_new_subskills: 1
        }),
        Err(EnvError::IllegalAction { .. })
    ));
}

#[test]
fn step_before_reset_fails() {
    let mut env = environment(EnvVariant::SkillList, user_skills());
    assert!(env.step(&Action::GenerateData { specs: vec![] }).is_err());
}
