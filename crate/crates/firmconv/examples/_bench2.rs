use firmconv::algebra::{FilterBank, Geometry, Support};
use firmconv::network::{Activation, ActivationKind, Layer, Network};
use firmconv::rng::Rng;
use std::hint::black_box;
use std::time::Instant;

fn bench(name: &str, n: usize, mut f: impl FnMut()) {
    let t0 = Instant::now();
    for _ in 0..n {
        f();
    }
    println!("{name:24} {:9.2} us/call", t0.elapsed().as_secs_f64() / n as f64 * 1e6);
}

fn main() {
    let geometry = Geometry::OneD { m: 128 };
    let support = Support::Window { l: 5 };
    let mut rng = Rng::new(7);
    let mut layers = Vec::new();
    for _ in 0..3 {
        let mut bank = FilterBank::zeros(geometry, 8, 16, support).unwrap();
        rng.fill_normal(bank.taps_mut());
        let act = Activation::new(ActivationKind::Isru, 1.0).unwrap();
        layers.push(Layer::new(bank, vec![0.01; 8], act).unwrap());
    }
    let net = Network::new(layers, 1.99).unwrap();
    let bank = net.layers()[0].bank();

    let xin = vec![0.5; bank.input_len()];
    let hid = vec![0.3; bank.output_len()];
    let mut y = vec![0.0; bank.output_len()];
    let mut xadj = vec![0.0; bank.input_len()];
    let mut taps_g = vec![0.0; bank.taps().len()];

    bench("apply", 20000, || bank.apply(black_box(&xin), black_box(&mut y)));
    bench("apply_adjoint", 20000, || bank.apply_adjoint(black_box(&hid), black_box(&mut xadj)));
    bench("tap_correlation", 20000, || {
        bank.tap_correlation_accumulate(black_box(&hid), black_box(&xin), black_box(&mut taps_g))
    });

    let x: Vec<f64> = (0..128).map(|i| (i as f64 * 0.1).sin()).collect();
    let up = vec![1.0; 128];
    let (_, tape) = net.residual(&x).unwrap();
    bench("residual", 2000, || {
        black_box(net.residual(black_box(&x)).unwrap());
    });
    bench("residual_backward", 2000, || {
        black_box(net.residual_backward(black_box(&tape), black_box(&up)).unwrap());
    });
    bench("forward", 2000, || {
        black_box(net.forward(black_box(&net.lift(&x).unwrap())).unwrap());
    });
}
