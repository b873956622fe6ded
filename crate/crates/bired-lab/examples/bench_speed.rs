use bired_lab::lm::*;
use bired_lab::tensor::Tensor;
use bired_lab::vocab::Vocab;
use std::time::Instant;

fn main() {
    // raw matmul_nt: [9,128] @ [512,128]^T
    let a = Tensor::matrix(9, 128, (0..9*128).map(|i| (i as f64).sin()).collect());
    let b = Tensor::matrix(512, 128, (0..512*128).map(|i| (i as f64).cos()).collect());
    let t0 = Instant::now();
    let n = 20000;
    let mut acc = 0.0;
    for _ in 0..n {
        let c = a.matmul_nt(&b).unwrap();
        acc += c.data()[0];
    }
    let dt = t0.elapsed().as_secs_f64();
    let gf = (2.0 * 9.0 * 128.0 * 512.0 * n as f64) / dt / 1e9;
    println!("matmul_nt 9x128x512: {:.2} GF/s ({acc})", gf);

    // big square: 128x128 @ 128x128
    let a = Tensor::matrix(128, 128, (0..128*128).map(|i| (i as f64).sin()).collect());
    let t0 = Instant::now();
    let n = 5000;
    for _ in 0..n {
        let c = a.matmul_nt(&a).unwrap();
        std::hint::black_box(&c);
    }
    let dt = t0.elapsed().as_secs_f64();
    println!("matmul_nt 128^3: {:.2} GF/s", 2.0 * 128f64.powi(3) * n as f64 / dt / 1e9);

    // forward-only profile
    let vocab = Vocab::new((0..300).map(|i| format!("w{i}")));
    let cfg = LMConfig::default();
    let model = TinyLm::new(cfg, vocab).unwrap();
    let tokens: Vec<usize> = (0..12).map(|i| i % 300).collect();
    let t0 = Instant::now();
    let n = 500;
    for _ in 0..n {
        std::hint::black_box(forward(&model, &tokens, &[]).unwrap());
    }
    let dt = t0.elapsed().as_secs_f64();
    let flops = 12.0 * 2.0 * 900_000.0;
    println!("forward 12 tok: {:.3} ms = {:.2} GF/s effective", dt / n as f64 * 1e3, flops * n as f64 / dt / 1e9);
}
