use diffaug::corpus::{gen_corpus, CorpusSizes, VocabSpec};
use diffaug::pipeline::{evaluate_dev, ModelState, TrainPlan};

fn main() {
    let spec = VocabSpec::default();
    let sizes = CorpusSizes::default();
    for seed in [1u64, 2, 3] {
        let corpus = gen_corpus(&spec, &sizes, seed).unwrap();
        let mut plan = TrainPlan::toy();
        plan.seed = seed;
        let state = ModelState::init(&plan, &corpus).unwrap();
        let dev = evaluate_dev(&state, &corpus.sts_dev, plan.inference).unwrap();
        let test = evaluate_dev(&state, &corpus.sts_test, plan.inference).unwrap();
        println!("seed {seed}: untrained dev {dev:?} test {test:?}");
    }
}
