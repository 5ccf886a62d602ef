//! Per-op timing probes; `cargo test --release --test bench2 -- --ignored --nocapture`.

use std::time::Instant;

use snntnn::autodiff::Tape;
use snntnn::tensor::Tensor;
use snntnn::tnn::init_kaiming;

fn time<F: FnMut()>(label: &str, iters: usize, mut f: F) {
    let start = Instant::now();
    for _ in 0..iters {
        f();
    }
    println!("{:<34} {:>9.2} ms/iter", label, start.elapsed().as_secs_f64() * 1e3 / iters as f64);
}

#[test]
#[ignore]
fn op_timing() {
    // The dominant switcher convs on a 784x300 target with channels [2,4].
    let cases: [(&str, usize, usize, usize, usize); 4] = [
        ("conv 1->2 784x300", 1, 2, 784, 300),
        ("conv 2->4 784x150", 2, 4, 784, 150),
        ("conv 8->4 784x150", 8, 4, 784, 150),
        ("conv 8->4 784x300", 8, 4, 784, 300),
    ];
    for (label, ci, co, h, w) in cases {
        let x: Tensor<f32> = init_kaiming(vec![ci * h, w], 0).unwrap().reshaped(vec![ci, h, w]).unwrap();
        let k: Tensor<f32> = init_kaiming(vec![co, ci, 3, 3], 1).unwrap();
        time(&format!("{} fwd", label), 20, || {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let kv = tape.constant(k.clone());
            tape.conv2d(xv, kv, None, (1, 1)).unwrap();
        });
        time(&format!("{} fwd+bwd", label), 10, || {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone(), true);
            let kv = tape.leaf(k.clone(), true);
            let y = tape.conv2d(xv, kv, None, (1, 1)).unwrap();
            let s = tape.sum(y).unwrap();
            tape.backward(s).unwrap();
        });
    }

    let x: Tensor<f32> = init_kaiming(vec![4 * 784, 300], 2).unwrap().reshaped(vec![4, 784, 300]).unwrap();
    time("maxpool (1,2) 4x784x300", 50, || {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        tape.maxpool2d(xv, (1, 2)).unwrap();
    });
    time("relu 4x784x300", 50, || {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        tape.relu(xv).unwrap();
    });
    time("upsample 4x784x150", 50, || {
        let y: Tensor<f32> = init_kaiming(vec![4 * 784, 150], 3).unwrap().reshaped(vec![4, 784, 150]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(y.clone());
        tape.upsample_nearest(xv, 1, 2).unwrap();
    });
    time("clone 784x300 f32", 100, || {
        let _ = x.clone();
    });
}
