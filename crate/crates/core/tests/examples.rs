mod gradient_check {
    include!(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/examples/gradient_check.rs"
    ));
}

mod optimizer_schedule {
    include!(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/examples/optimizer_schedule.rs"
    ));
}

mod lora_adapter {
    include!(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/examples/lora_adapter.rs"
    ));
}

mod synthetic_corpus {
    include!(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/examples/synthetic_corpus.rs"
    ));
}

mod cer_report {
    include!(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/examples/cer_report.rs"
    ));
}

mod run_config {
    include!(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/examples/run_config.rs"
    ));
}

mod speech_llm_pipeline {
    include!(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/examples/speech_llm_pipeline.rs"
    ));
}

mod resume_training {
    include!(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/examples/resume_training.rs"
    ));
}

mod staged_training {
    include!(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/examples/staged_training.rs"
    ));
}

mod projector_experiment {
    include!(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/examples/projector_experiment.rs"
    ));
}

#[test]
fn gradient_check_example_runs() {
    gradient_check::run_example().expect("gradient check example should run");
}

#[test]
fn optimizer_schedule_example_runs() {
    optimizer_schedule::run_example().expect("optimizer schedule example should run");
}

#[test]
fn lora_adapter_example_runs() {
    lora_adapter::run_example().expect("lora adapter example should run");
}

#[test]
fn synthetic_corpus_example_runs() {
    synthetic_corpus::run_example().expect("synthetic corpus example should run");
}

#[test]
fn cer_report_example_runs() {
    cer_report::run_example().expect("cer report example should run");
}

#[test]
fn run_config_example_runs() {
    run_config::run_example().expect("run config example should run");
}

#[test]
fn speech_llm_pipeline_example_runs() {
    speech_llm_pipeline::run_example().expect("speech llm pipeline example should run");
}

#[test]
fn resume_training_example_runs() {
    resume_training::run_example().expect("resume training example should run");
}

#[test]
fn staged_training_example_runs() {
    staged_training::run_example().expect("staged training example should run");
}

#[test]
fn projector_experiment_example_runs() {
    projector_experiment::run_example().expect("projector experiment example should run");
}
