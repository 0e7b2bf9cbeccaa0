//! Fault injection: broken programs fall back to one simple_query on the
//! original question, and nothing panics.

use std::sync::Arc;

use vpdistill::quesgen::{generate_qa, GenConfig};
use vpdistill::scene::{full_image, generate_many};
use vpdistill::{
    parse, run_with_fallback, CorruptedBackend, CorruptionProfile, Detector, Lexicon, ModuleKind, ModuleRegistry,
    TraceStatus, Value, WorldConfig,
};

#[test]
fn corrupted_programs_fall_back() {
    let cfg = WorldConfig::default();
    let lex = Arc::new(Lexicon::new(&cfg));
    let registry = ModuleRegistry::uniform(
        Arc::new(Detector::new(0.05, 0, lex.clone())),
        Arc::new(CorruptedBackend::new(CorruptionProfile::new(0, 0.3, &lex), lex.clone())),
    );
    let gen = GenConfig {
        fault_rate: 0.1,
        ..GenConfig::default()
    };
    let (mut programs, mut faulty) = (0usize, 0usize);
    for scene in generate_many(0, 1_000, &cfg).unwrap() {
        let root = full_image(&scene);
        for qa in generate_qa(&scene, &gen, 0, &lex) {
            for src in [&qa.program, &qa.coarse_program] {
                programs += 1;
                let t = run_with_fallback(src, &qa.question, &scene, &registry);
                if !qa.fault_injected {
                    assert!(parse(src).is_ok());
                    assert_ne!(t.status, TraceStatus::ParseErrorFallback);
                    continue;
                }
                faulty += 1;
                assert!(parse(src).is_err(), "fault left a parseable program:\n{src}");
                assert_eq!(t.status, TraceStatus::ParseErrorFallback);
                assert_eq!(t.steps.len(), 1);
                let step = &t.steps[0];
                assert_eq!(step.module_kind, ModuleKind::SimpleQuery);
                assert_eq!(step.receiver, Value::Patch(root.clone()));
                assert_eq!(step.args, vec![Value::Str(qa.question.clone())]);
                assert!(t.error.is_some());
            }
        }
    }
    assert!(programs >= 10_000, "{programs} programs");
    let rate = faulty as f64 / programs as f64;
    assert!((0.07..0.13).contains(&rate), "fault rate {rate}");
}
