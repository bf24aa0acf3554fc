use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use vlngen_core::frames::NoImages;
use vlngen_core::gateway::{Gateway, GatewayConfig};
use vlngen_core::pretext::{assemble, build_batch, PretextConfig, StubFeatures, WordTokenizer};
use vlngen_core::prompt::TemplateSet;
use vlngen_core::render::{render_instruction, steps_of};
use vlngen_core::sampler::{sample_many, SamplerConfig};
use vlngen_core::verify::{extract_rule_based, normalize, RuleSet, Verifier, VerifyConfig};
use vlngen_core::*;
use vlngen_bench::{annotated_video, trajectory};

fn text_stages(c: &mut Criterion) {
    let rules = RuleSet::builtin();
    let vocab = Vocabulary::builtin();
    let mut group = c.benchmark_group("text");
    for k in [2, 4, 7] {
        let fine = render_instruction(&steps_of(&trajectory("t", k)).unwrap(), Granularity::Fine { environment: true });
        let noisy = format!("### Response: {} @@## <|im_end|>", fine.replacen(' ', "  ", 3));
        group.bench_with_input(BenchmarkId::new("normalize", k), &noisy, |b, t| b.iter(|| normalize(black_box(t), &rules)));
        group.bench_with_input(BenchmarkId::new("extract_rule_based", k), &fine, |b, t| {
            b.iter(|| extract_rule_based(black_box(t), &vocab))
        });
    }
    group.finish();
}

fn sampling(c: &mut Criterion) {
    let video = annotated_video(40, 6);
    let cfg = SamplerConfig {
        trajectories_per_video: 32,
        ..SamplerConfig::default()
    };
    c.bench_function("sample_many/40_rooms_32_draws", |b| b.iter(|| sample_many(black_box(&video), &cfg)));
}

fn generation(c: &mut Criterion) {
    let vocab = Vocabulary::builtin();
    let templates = TemplateSet::builtin();
    let rules = RuleSet::builtin();
    let config = VerifyConfig::default();
    let cfg = GatewayConfig {
        retry_base_delay_ms: 0,
        ..GatewayConfig::mock_lossy(1, 0.3, 0.3)
    };
    let gateway = Gateway::new(&cfg, &vocab, Arc::new(NoImages)).unwrap();
    let v = Verifier {
        gateway: &gateway,
        templates: &templates,
        rules: &rules,
        vocab: &vocab,
        config: &config,
    };
    let traj = trajectory("t", 5);
    c.bench_function("generate_verified/k5_lossy", |b| {
        b.iter(|| v.generate_verified(black_box(&traj), Granularity::Coarse))
    });
}

fn verified_pair(id: &str, k: usize) -> PathInstructionPair {
    let t = trajectory(id, k);
    let truth = verify::ground_truth_pairs(&t).unwrap();
    let text = render_instruction(&steps_of(&t).unwrap(), Granularity::Coarse);
    let inst = Instruction::new(text, Granularity::Coarse, "mock-faithful", 1, Vec::new()).unwrap();
    let record = VerificationRecord {
        extracted: truth,
        verdict: Verdict::Pass,
        attempts_used: 1,
        extractor: ExtractorKind::RuleBased,
        template_version: String::new(),
    };
    PathInstructionPair::new(t, inst, record, PairStatus::Verified).unwrap()
}

fn pretext(c: &mut Criterion) {
    let feats = StubFeatures {
        regions: 36,
        dim: 2048,
        seed: 0,
    };
    let pair = verified_pair("t", 7);
    c.bench_function("assemble/k7_36x2048", |b| b.iter(|| assemble(black_box(&pair), &feats, &WordTokenizer)));

    let small = StubFeatures {
        regions: 8,
        dim: 64,
        seed: 0,
    };
    let pairs: Vec<_> = (0..64).map(|i| verified_pair(&format!("t{i}"), 2 + i % 6)).collect();
    let cfg = PretextConfig {
        regions: 8,
        dim: 64,
        ..PretextConfig::default()
    };
    c.bench_function("build_batch/64_pairs", |b| b.iter(|| build_batch(black_box(&pairs), &small, &WordTokenizer, &cfg)));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = text_stages, sampling, generation, pretext
}
criterion_main!(benches);
