use firmconv::algebra::{FilterBank, Geometry, Support};
use firmconv::data::{add_noise, gen_pwc};
use firmconv::network::{Activation, ActivationKind, Layer, Network};
use firmconv::rng::Rng;
use firmconv::training::{batch_gradient, loss_eval, project_filters, validation_psnr, PROJECT_MAX_ITERS};
use std::time::Instant;

fn main() {
    let geometry = Geometry::OneD { m: 128 };
    let support = Support::Window { l: 5 };
    let mut rng = Rng::new(7);
    let mut layers = Vec::new();
    for _ in 0..3 {
        let mut bank = FilterBank::zeros(geometry, 8, 16, support).unwrap();
        rng.fill_normal(bank.taps_mut());
        for t in bank.taps_mut() {
            *t *= 0.03;
        }
        let act = Activation::new(ActivationKind::Isru, 1.0).unwrap();
        layers.push(Layer::new(bank, vec![0.01; 8], act).unwrap());
    }
    let net = Network::new(layers, 1.99).unwrap();

    let clean = gen_pwc(5000, 128, 11).unwrap();
    let data = add_noise(&clean, 0.1, 12).unwrap();

    let batch: Vec<usize> = (0..32).collect();
    let t0 = Instant::now();
    for _ in 0..20 {
        let _ = batch_gradient(&net, &data, &batch).unwrap();
    }
    println!("batch_gradient(32): {:7.1} ms", t0.elapsed().as_secs_f64() / 20.0 * 1e3);

    let t0 = Instant::now();
    let _ = loss_eval(&net, &data).unwrap();
    println!("loss_eval(5000):    {:7.1} ms", t0.elapsed().as_secs_f64() * 1e3);

    let idx: Vec<usize> = (0..data.len()).collect();
    let t0 = Instant::now();
    let _ = validation_psnr(&net, &data, &idx).unwrap();
    println!("val_psnr(5000):     {:7.1} ms", t0.elapsed().as_secs_f64() * 1e3);

    let t0 = Instant::now();
    let out = project_filters(net.layers()[0].bank(), 1e4, PROJECT_MAX_ITERS).unwrap();
    println!(
        "project_filters:    {:7.1} ms  ({} iters, converged {})",
        t0.elapsed().as_secs_f64() * 1e3,
        out.iterations,
        out.converged
    );
}
