use std::time::Instant;

#[test]
#[ignore]
fn training_throughput() {
    let text = r#"
[space]
kind = "planar-so2"

[model]
hidden = [64, 64]
residual_output = true
radius_inputs = true
radius_bumps = 12

[train]
loss = "quotient"
epochs = 2000
batch_size = 512
lr = 0.01
seed = 1
schedule = "linear-one-sided"
"#;
    let dir = tempfile::tempdir().unwrap();
    let t0 = Instant::now();
    quotient_flow::experiments::traincmd::cmd_train(dir.path(), None, text).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "2000 steps b512: {:.1}s total, {:.2} ms/step",
        dt,
        1000.0 * dt / 2000.0
    );
}
