use std::sync::Arc;

use spinfer_core::graph::{build_encoder, encoder_forward_f32, optimize, Executor};
use spinfer_core::model_io::{generate_synthetic_model, random_input};
use spinfer_core::tensor::dequantize;
use spinfer_core::{Backend, Tensor};

fn run(g: &spinfer_core::Graph, x: &Tensor, threads: usize) -> Tensor {
    let mut e = Executor::new(Arc::new(g.clone()), threads, Backend::detect()).unwrap();
    e.run(&[x]).unwrap().remove(0)
}

#[test]
fn fused_graph_is_bit_exact_with_unfused() {
    let model = generate_synthetic_model(2, 64, 4, 256, 0.8, 11).unwrap();
    for seq in [16, 37] {
        let g = build_encoder(&model, 2, seq).unwrap();
        let f = optimize(&g).unwrap();
        assert!(f.nodes().len() < g.nodes().len());
        assert_eq!(f.count("Gelu"), 0);
        let x = random_input(2, seq, 64, 5);
        let want = run(&g, &x, 1);
        for threads in [1, 3] {
            assert_eq!(run(&f, &x, threads), want, "seq {seq} threads {threads}");
        }
    }
}

#[test]
fn quantized_encoder_tracks_float_reference() {
    let model = generate_synthetic_model(2, 64, 4, 256, 0.8, 3).unwrap();
    let x = random_input(1, 16, 64, 9);
    let g = optimize(&build_encoder(&model, 1, 16).unwrap()).unwrap();
    let y = dequantize(&run(&g, &x, 1), &model.output).unwrap();
    let r = encoder_forward_f32(&model, &x).unwrap().output;
    let (a, b) = (y.as_f32().unwrap(), r.as_f32().unwrap());
    let mae = a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum::<f32>() / a.len() as f32;
    let spread = b.iter().map(|v| v.abs()).sum::<f32>() / b.len() as f32;
    println!("mae {mae} mean|ref| {spread}");
    assert!(mae < 0.1 * spread, "mae {mae} vs mean magnitude {spread}");
}
