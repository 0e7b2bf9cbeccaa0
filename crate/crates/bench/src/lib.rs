//! Shared fixture for the benchmarks: one world, its questions and the
//! traces a baseline registry produces on them.

use std::sync::Arc;

use vpdistill::eval::recipe::generate_questions;
use vpdistill::quesgen::{GenConfig, QAPair};
use vpdistill::scene::generate_many;
use vpdistill::{
    execute, harvest, parse, CorruptedBackend, CorruptionProfile, Detector, ExecutionTrace, Lexicon, ModuleRegistry,
    OracleBackend, SceneStore, Triple, WorldConfig,
};

pub struct Fixture {
    pub world: WorldConfig,
    pub lex: Arc<Lexicon>,
    pub profile: CorruptionProfile,
    pub scenes: SceneStore,
    pub questions: Vec<QAPair>,
    pub registry: ModuleRegistry,
    pub traces: Vec<ExecutionTrace>,
    pub triples: Vec<Triple>,
}

impl Fixture {
    pub fn new(scenes: usize) -> Self {
        let world = WorldConfig::default();
        let lex = Arc::new(Lexicon::new(&world));
        let profile = CorruptionProfile::new(0, 0.3, &lex);
        let registry = ModuleRegistry::uniform(
            Arc::new(Detector::new(0.05, 0, lex.clone())),
            Arc::new(CorruptedBackend::new(profile.clone(), lex.clone())),
        );
        let graphs = generate_many(0, scenes, &world).expect("default world is valid");
        let questions = generate_questions(&graphs, &GenConfig::default(), 0, &lex);
        let scenes: SceneStore = graphs.into_iter().collect();
        let traces: Vec<ExecutionTrace> = questions
            .iter()
            .map(|qa| {
                let scene = scenes.get(&qa.scene_id).expect("own scene");
                execute(&parse(&qa.program).expect("templates parse"), scene, &registry)
                    .with_ids(&qa.question_id, qa.question_type.as_str())
            })
            .collect();
        let triples = harvest(&traces, &scenes, &OracleBackend::new(lex.clone()), &lex).triples;
        Self {
            world,
            lex,
            profile,
            scenes,
            questions,
            registry,
            traces,
            triples,
        }
    }
}
