//! Discovery and rendering against recorded provider transcripts, plus the
//! mock provider's confusion behaviour.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use teachenv::discovery::SkillDiscovery;
use teachenv::engine::Engine;
use teachenv::model::{DataSpec, Dataset, TaskDomain, TaskDomainId, TaskItem, UNCATEGORIZED};
use teachenv::provider::transcript::TranscriptBackend;
use teachenv::provider::{LlmClient, MockConfig, ProviderError};
use teachenv::sim::embed_tag;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn replayed(name: &str) -> LlmClient {
    LlmClient::new(Arc::new(TranscriptBackend::from_file(&fixture(name)).unwrap())).with_max_in_flight(1)
}

#[test]
fn algebra_subskills_from_transcript() {
    let d = SkillDiscovery::new(replayed("math_algebra_subskills.jsonl"), "math");
    let p = d.propose_subskills("Algebra", &[], 3).unwrap();
    assert!(p.names.iter().any(|n| n == "Solving Linear Equations"));
    assert_eq!(p.names.len(), 3);
    assert_eq!(p.shortfall, 0);

    // The second recorded reply repeats an existing name in another case;
    // it is dropped and the two fresh names are kept.
    let existing = p.names.clone();
    let more = d.propose_subskills("Algebra", &existing, 2).unwrap();
    assert_eq!(
        more.names,
        vec!["Systems of Two Equations", "Working with Exponents"]
    );
}

#[test]
fn unrecorded_request_is_a_transcript_miss() {
    let d = SkillDiscovery::new(replayed("math_algebra_subskills.jsonl"), "math");
    let err = d.propose_subskills("Geometry", &[], 3).unwrap_err();
    assert!(matches!(
        err,
        teachenv::discovery::DiscoveryError::Provider(ProviderError::TranscriptMiss { .. })
    ));
}

#[test]
fn math_datum_after_a_reask() {
    let engine = Engine::new(TaskDomainId::Math, Some(replayed("math_render.jsonl"))).unwrap();
    let spec = DataSpec::new(
        TaskDomainId::Math,
        "Write a word problem that reduces to one linear equation in one unknown.",
    )
    .targeting(Some("Algebra".into()), Some("Solving Linear Equations".into()));
    let out = engine.execute_plan(&[spec], 2).unwrap();
    assert!(out.dropped.is_empty());
    let d = &out.datums[0];
    assert!(d.instruction.starts_with("A taxi charges"));
    assert!(d.response.ends_with("Final answer: 7"));
    assert_eq!(d.provenance.iteration, 2);
    assert_eq!(d.provenance.subskill.as_deref(), Some("Solving Linear Equations"));
}

#[test]
fn vqa_boolean_question() {
    let engine = Engine::new(TaskDomainId::Vqa, Some(replayed("vqa_render.jsonl"))).unwrap();
    let spec = DataSpec::new(
        TaskDomainId::Vqa,
        "Ask whether an object in the scene is made of metal.",
    )
    .targeting(
        Some("Material Identification".into()),
        Some("Metal vs Plastic".into()),
    );
    let out = engine.execute_plan(&[spec], 1).unwrap();
    let d = &out.datums[0];
    assert_eq!(d.instruction, "Is the red cube made of metal?");
    assert_eq!(d.response, "yes");
    assert!(d.media_ref.is_some());
    assert_eq!(d.provenance.skill.as_deref(), Some("Material Identification"));
}

#[test]
fn code_problem_then_solution() {
    let engine = Engine::new(TaskDomainId::Code, Some(replayed("code_render.jsonl"))).unwrap();
    let spec = DataSpec::new(
        TaskDomainId::Code,
        "Write a short function problem about palindromes.",
    )
    .targeting(Some("String Manipulation".into()), Some("Palindromes".into()));
    let out = engine.execute_plan(&[spec], 1).unwrap();
    let d = &out.datums[0];
    assert!(d.instruction.contains("is_palindrome"));
    assert!(d.instruction.contains("Starter code:"));
    assert!(d.response.contains("t[::-1]"));
}

#[test]
fn missing_renders_are_dropped_then_degrade() {
    let engine = Engine::new(TaskDomainId::Code, Some(replayed("code_render.jsonl"))).unwrap();
    let good = DataSpec::new(
        TaskDomainId::Code,
        "Write a short function problem about palindromes.",
    )
    .targeting(Some("String Manipulation".into()), Some("Palindromes".into()));
    let bad = DataSpec::new(TaskDomainId::Code, "Something never recorded.");
    let out = engine.execute_plan(&[good.clone(), bad.clone()], 1).unwrap();
    assert_eq!(out.datums.len(), 1);
    assert_eq!(out.dropped.len(), 1);
    assert_eq!(out.dropped[0].index, 1);
    assert!(engine.execute_plan(&[good, bad.clone(), bad], 1).is_err());
}

#[test]
fn math_discovery_from_transcript() {
    let items: Vec<TaskItem> =
        serde_json::from_str(&std::fs::read_to_string(fixture("math_items.json")).unwrap()).unwrap();
    let ds = Dataset::new(TaskDomain::new(TaskDomainId::Math), items).unwrap();
    let found = SkillDiscovery::new(replayed("math_discovery.jsonl"), "math")
        .discover(&ds)
        .unwrap();
    assert_eq!(
        found.skills,
        vec!["Algebra", "Counting", "Geometry", UNCATEGORIZED]
    );
    let assigned = found.assignment.assigned();
    assert_eq!(assigned["m1"], "Algebra");
    assert_eq!(assigned["m2"], "Algebra");
    assert_eq!(assigned["m3"], "Geometry");
    assert_eq!(assigned["m5"], "Counting");
    assert_eq!(assigned["m6"], UNCATEGORIZED);
}

fn tagged_items(n: usize) -> Vec<TaskItem> {
    const SKILLS: [&str; 4] = ["Algebra", "Geometry", "Counting", "Probability"];
    (0..n)
        .map(|i| TaskItem {
            item_id: format!("i{i:04}"),
            instruction: format!("{} question {i}", embed_tag(SKILLS[i % 4], Some("core"))),
            media_ref: None,
            gold_answer: "0".into(),
            difficulty: None,
            true_skill: Some(SKILLS[i % 4].into()),
            true_subskill: None,
            latent_pass_threshold: None,
        })
        .collect()
}

fn pool() -> Vec<String> {
    ["Algebra", "Geometry", "Counting", "Probability"]
        .map(String::from)
        .to_vec()
}

#[test]
fn mock_confusion_rate() {
    let items = tagged_items(1000);
    let llm = LlmClient::mock(MockConfig {
        seed: 7,
        confusion_rate: 0.2,
        label_pool: pool(),
    });
    let labels = SkillDiscovery::new(llm, "simulated")
        .annotate_all(&items)
        .unwrap();
    let mut confused = 0;
    for item in &items {
        let got = &labels[&item.item_id];
        assert!(pool().contains(got));
        if Some(got) != item.true_skill.as_ref() {
            confused += 1;
        }
    }
    // Binomial(1000, 0.2): mean 200, sd about 12.6.
    assert!((150..=250).contains(&confused), "{confused}");
    // Frozen so that changes to the draw are noticed.
    assert_eq!(confused, 175);

    // Same seed, same labels.
    let again = SkillDiscovery::new(
        LlmClient::mock(MockConfig {
            seed: 7,
            confusion_rate: 0.2,
            label_pool: pool(),
        }),
        "simulated",
    )
    .annotate_all(&items)
    .unwrap();
    assert_eq!(labels, again);
}

#[test]
fn mock_without_confusion_recovers_tags() {
    let items = tagged_items(200);
    let labels = SkillDiscovery::new(LlmClient::mock(MockConfig::default()), "simulated")
        .annotate_all(&items)
        .unwrap();
    let mut want: BTreeMap<String, usize> = BTreeMap::new();
    let mut got: BTreeMap<String, usize> = BTreeMap::new();
    for i in &items {
        *want.entry(i.true_skill.clone().unwrap()).or_default() += 1;
        *got.entry(labels[&i.item_id].clone()).or_default() += 1;
    }
    assert_eq!(want, got);
}
