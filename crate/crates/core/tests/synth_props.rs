use evfuse_core::synth::{generate_case, perturb, PerturbSpec, SynthParams};
use evfuse_core::tensor::Tensor;
use proptest::prelude::*;

fn distortion(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.numel() as f64
}

fn strictly_increasing(img: &Tensor, specs: &[PerturbSpec], seed: u64) -> bool {
    let d: Vec<f64> = specs.iter().map(|s| distortion(img, &perturb(img, s, seed).unwrap())).collect();
    d.windows(2).all(|w| w[1] > w[0])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn cases_are_a_function_of_the_seed(seed in any::<u64>()) {
        let p = SynthParams::default();
        prop_assert_eq!(generate_case(seed, 32, 40, &p).unwrap(), generate_case(seed, 32, 40, &p).unwrap());
    }

    #[test]
    fn distortion_grows_with_the_perturbation_level(case_seed in any::<u64>(), seed in any::<u64>()) {
        let c = generate_case(case_seed, 32, 32, &SynthParams::default()).unwrap();
        let noise = [0.0, 0.1, 0.2, 0.3].map(PerturbSpec::noise);
        let mask = [0.0, 0.04, 0.08].map(PerturbSpec::mask);
        for img in [&c.ct, &c.pet] {
            prop_assert!(strictly_increasing(img, &noise, seed));
            prop_assert!(strictly_increasing(img, &mask, seed));
        }
    }
}
