use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, Criterion};
use macfair_core::conversation::simulate_scripted_answers;
use macfair_core::metrics::{contrast_demo_vs_null_iden, count_transitions, shift_counts, Pooling, ShiftTable};
use macfair_core::{
    AgentProfile, AnswerKey, Benchmark, ConversationSpec, Instantiation, ParsedResponse, QuestionInstance, RevealCondition, Role, ScriptedPolicy,
    TranscriptRow,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn question(sub: &str) -> Arc<QuestionInstance> {
    Arc::new(QuestionInstance {
        id: format!("{sub}-q"),
        benchmark: Benchmark::Bbq,
        subcategory: sub.into(),
        context: String::new(),
        question: "Which?".into(),
        choices: vec!["a".into(), "b".into(), "c".into()],
        key: AnswerKey::default(),
    })
}

fn rows(rng: &mut ChaCha8Rng, conversations: usize) -> Vec<Vec<TranscriptRow>> {
    (0..conversations)
        .map(|c| {
            (0..3u32)
                .flat_map(|round| (0..2).map(move |agent| (round, agent)))
                .map(|(round, agent_index)| TranscriptRow {
                    conversation_id: format!("c{c}"),
                    round,
                    agent_index,
                    parsed: ParsedResponse { answer_index: rng.random_range(0..3), rationale: String::new(), raw: String::new(), attempts: 1 },
                    timestamp: chrono::DateTime::UNIX_EPOCH,
                })
                .collect()
        })
        .collect()
}

fn counting(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let convs = rows(&mut rng, 10_000);
    c.bench_function("shift_counts 10k conversations", |b| b.iter(|| shift_counts(black_box(&convs).iter().map(Vec::as_slice), Role::Iden).unwrap()));
    let matrix: Vec<Vec<usize>> = (0..3).map(|_| vec![rng.random_range(0..3), rng.random_range(0..3)]).collect();
    c.bench_function("count_transitions 3 rounds", |b| b.iter(|| count_transitions(black_box(&matrix), 0, 1)));
}

fn simulate_and_contrast(c: &mut Criterion) {
    let policy = ScriptedPolicy::constant(0.3, 5);
    let spec = ConversationSpec::pair(
        AgentProfile::identity(Some("Black"), Some("teacher"), Instantiation::Human),
        RevealCondition::Anonymous,
        question("s"),
        3,
        0,
        5,
    );
    c.bench_function("simulate_scripted_answers 3 rounds", |b| b.iter(|| simulate_scripted_answers(black_box(&spec), "m", &policy).unwrap()));

    let mut table = ShiftTable::new();
    for persona in ["teacher", "farmer", "physician", "software engineer", "machine operator"] {
        for sub in ["s1", "s2"] {
            for d in [Some("Black"), None] {
                let mut spec = ConversationSpec::pair(
                    AgentProfile::identity(d, Some(persona), Instantiation::Human),
                    RevealCondition::Anonymous,
                    question(sub),
                    3,
                    0,
                    5,
                );
                for run in 0..50 {
                    spec.run_index = run;
                    let key = spec.key("m");
                    table.add(&key, &simulate_scripted_answers(&spec, "m", &policy).unwrap());
                }
            }
        }
    }
    c.bench_function("contrast_demo_vs_null_iden 10 strata", |b| {
        b.iter(|| contrast_demo_vs_null_iden(black_box(&table), "Black", Instantiation::Human, "m", Benchmark::Bbq, Pooling::PersonaSubcategory).unwrap())
    });
}

criterion_group!(benches, counting, simulate_and_contrast);
criterion_main!(benches);
