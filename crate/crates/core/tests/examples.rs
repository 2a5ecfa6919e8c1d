#[path = "../examples/generate_pairs.rs"]
mod generate_pairs;

#[path = "../examples/corpus_filtering.rs"]
mod corpus_filtering;

#[path = "../examples/encoder_tour.rs"]
mod encoder_tour;

#[path = "../examples/bias_alignment.rs"]
mod bias_alignment;

#[path = "../examples/debias_toy.rs"]
mod debias_toy;

#[path = "../examples/bias_metrics.rs"]
mod bias_metrics;

#[path = "../examples/pipeline_demo.rs"]
mod pipeline_demo;

#[path = "../examples/chat_mock_server.rs"]
mod chat_mock_server;


#[test]
fn generate_pairs_runs() {
    generate_pairs::run_example().expect("generate_pairs");
}

#[test]
fn corpus_filtering_runs() {
    corpus_filtering::run_example().expect("corpus_filtering");
}

#[test]
fn encoder_tour_runs() {
    encoder_tour::run_example().expect("encoder_tour");
}

#[test]
fn bias_alignment_runs() {
    bias_alignment::run_example().expect("bias_alignment");
}

#[test]
fn debias_toy_runs() {
    debias_toy::run_example().expect("debias_toy");
}

#[test]
fn bias_metrics_runs() {
    bias_metrics::run_example().expect("bias_metrics");
}

#[test]
fn pipeline_demo_runs() {
    pipeline_demo::run_example().expect("pipeline_demo");
}

#[test]
fn chat_mock_server_runs() {
    chat_mock_server::run_example().expect("chat_mock_server");
}
