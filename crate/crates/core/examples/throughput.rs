//! Times one optimizer step of the fused model at a few patch sizes.

use std::time::Instant;

use maml_core::backbone::BackboneConfig;
use maml_core::data::case_rng;
use maml_core::engine::{Adam, LossWeights, MamlModel, Network};
use maml_core::fusion::FusionConfig;
use maml_core::nn::{parameter_count, zeros_like};
use maml_core::{ModalityId, Tensor};

fn main() {
    let mods = [ModalityId::new("AP").unwrap(), ModalityId::new("VP").unwrap()];
    let cfg = BackboneConfig::default();
    let mut model = MamlModel::<f32>::new(&mods, &cfg, &FusionConfig::default(), &mut case_rng(0, 0)).unwrap();
    println!("parameters: {}", parameter_count(&model));
    let mut adam = Adam::new(parameter_count(&model));
    for n in [16usize, 32] {
        let inputs: Vec<Tensor<f32>> = (0..2).map(|_| Tensor::filled([1, n, n, n], 0.3)).collect();
        let gt: Vec<u8> = (0..n * n * n).map(|i| u8::from(i % 3 == 0)).collect();
        let reps = if n == 16 { 10 } else { 3 };
        let t = Instant::now();
        for _ in 0..reps {
            let mut g = zeros_like(&model);
            model.loss_and_grad(&inputs, &gt, LossWeights { lambda: 0.5, mimicry: 0.0 }, &mut g).unwrap();
            adam.update(&mut model, &g, 3e-4);
        }
        println!("{n}^3: {:.1} ms per sample step", t.elapsed().as_secs_f64() * 1e3 / reps as f64);
        let t = Instant::now();
        for _ in 0..reps {
            model.forward(&inputs).unwrap();
        }
        println!("{n}^3: {:.1} ms per forward", t.elapsed().as_secs_f64() * 1e3 / reps as f64);
    }
}
