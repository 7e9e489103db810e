use fsf_core::fock::HilbertSpec;
use fsf_core::model::build_tensor_attenuation;
use fsf_core::tomography::*;
use num_complex::Complex64 as C64;

fn main() {
    let spec = HilbertSpec::new(6).unwrap();
    let truth = build_tensor_attenuation(0.5, spec).unwrap();
    let alphas: Vec<C64> = linspace(0.1, 1.5, 10).into_iter().map(|a| C64::new(a, 0.0)).collect();
    let cfg = ReconConfig::default();
    for (it, ll, f) in debug_noiseless_recon(&truth, &alphas, &cfg, 400, 50) {
        println!("iter {it:4}  ll {ll:.12}  fid {f:.6}");
    }
}
