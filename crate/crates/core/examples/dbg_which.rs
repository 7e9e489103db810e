use fsf_core::fock::HilbertSpec;
use fsf_core::model::build_tensor_attenuation;
use fsf_core::tomography::*;
use num_complex::Complex64 as C64;

fn main() {
    let spec = HilbertSpec::new(6).unwrap();
    let truth = build_tensor_attenuation(0.5, spec).unwrap();
    let alphas: Vec<C64> = linspace(0.1, 1.5, 10).into_iter().map(|a| C64::new(a, 0.0)).collect();
    let cfg = ReconConfig::default();
    let recon = debug_noiseless_recon_tensor(&truth, &alphas, &cfg, 400);
    let mut errs: Vec<(f64, (usize, usize, usize, usize))> = Vec::new();
    for j in 0..7 {
        for k in 0..7 {
            for m in 0..7 {
                for n in 0..7 {
                    let e = (recon.get(j, k, m, n) - truth.get(j, k, m, n)).norm();
                    errs.push((e, (j, k, m, n)));
                }
            }
        }
    }
    errs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    println!("worst entries (err, (j,k,m,n), recon, truth):");
    for (e, (j, k, m, n)) in errs.iter().take(15) {
        println!(
            "  {e:.4}  ({j},{k},{m},{n})  {:.4}+{:.4}i  vs {:.4}",
            recon.get(*j, *k, *m, *n).re,
            recon.get(*j, *k, *m, *n).im,
            truth.get(*j, *k, *m, *n).re
        );
    }
    println!("layer successes recon vs truth:");
    for n in 0..7 {
        println!("  n={n}: {:.4} vs {:.4}", recon.layer_success(n), truth.layer_success(n));
    }
}
