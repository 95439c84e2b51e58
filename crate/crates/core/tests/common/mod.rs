#![allow(dead_code)]

use std::sync::OnceLock;

use edgebid::env::{MdConfig, SystemConfig};
use edgebid::harness::ExperimentConfig;
use edgebid::surrogate::SurrogateParams;

/// The default two-device system after calibration, computed once.
pub fn default_system() -> &'static SystemConfig {
    static SYS: OnceLock<SystemConfig> = OnceLock::new();
    SYS.get_or_init(|| ExperimentConfig::default().resolve().expect("defaults resolve").0)
}

/// An uncalibrated device with explicit SNR, for fast structural tests.
pub fn device(dims: usize, ratios: &[f64], budget: f64, mean_snr: f64) -> MdConfig {
    MdConfig {
        feature_dims: dims,
        bits_per_dim: 8,
        ratios: ratios.to_vec(),
        max_bid: 1.0,
        initial_budget: budget,
        class_count: 10,
        mean_snr,
        weight_t1: 0.2,
        surrogate: SurrogateParams::default(),
    }
}

pub fn system(devices: Vec<MdConfig>, capacity: usize) -> SystemConfig {
    SystemConfig {
        server_capacity: capacity,
        horizon: 10,
        slot_duration: 0.1,
        bandwidth: 50_000.0,
        weight_t2: 0.8,
        devices,
    }
}

/// Two devices shaped like the defaults with moderate SNRs.
pub fn small_system() -> SystemConfig {
    system(
        vec![
            device(8192, &[1.0, 0.8, 0.6, 0.4], 5.0, 12_000.0),
            device(128, &[1.0, 0.75, 0.5, 0.25], 5.0, 0.25),
        ],
        1,
    )
}

/// `||a - b|| / max(||a|| + ||b||, floor)` over whole gradient vectors.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / (na + nb).max(1e-12)
}

/// Central differences of a scalar function at `x`.
pub fn central_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let base = probe[i];
            probe[i] = base + h;
            let up = f(&probe);
            probe[i] = base - h;
            let down = f(&probe);
            probe[i] = base;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Worst relative error of analytic parameter and input gradients of
/// `upstream . net(input)` against central differences, over `cases` random
/// networks, inputs and upstream vectors.
pub fn mlp_gradient_check(cases: usize, seed: u64) -> f64 {
    use edgebid::nn::{Head, Mlp};
    use edgebid::{stream_rng, Stream};
    use rand::Rng;

    let mut rng = stream_rng(seed, Stream::Init);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let head = match case % 3 {
            0 => Head::Identity,
            1 => Head::Bounded { scale: 1.5 },
            _ => Head::Softmax,
        };
        let sizes = [
            rng.random_range(1..6),
            rng.random_range(2..9),
            rng.random_range(2..9),
            rng.random_range(1..5),
        ];
        let net = Mlp::new(&sizes, head, &mut rng).expect("valid sizes");
        let input: Vec<f64> = (0..sizes[0]).map(|_| rng.random_range(-2.0..2.0)).collect();
        let upstream: Vec<f64> = (0..sizes[3]).map(|_| rng.random_range(-1.0..1.0)).collect();
        let objective =
            |net: &Mlp, x: &[f64]| -> f64 { net.forward(x).unwrap().iter().zip(&upstream).map(|(o, u)| o * u).sum() };
        let grads = net.backward(&input, &upstream).unwrap();
        let fd_params = central_difference(net.params(), 1e-6, |p| {
            let probe = Mlp::from_params(net.sizes(), net.head(), p.to_vec()).unwrap();
            objective(&probe, &input)
        });
        let fd_input = central_difference(&input, 1e-6, |x| objective(&net, x));
        worst = worst
            .max(relative_error(&grads.params, &fd_params))
            .max(relative_error(&grads.input, &fd_input));
    }
    worst
}
