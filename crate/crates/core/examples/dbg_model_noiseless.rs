use fsf_core::fock::HilbertSpec;
use fsf_core::model::{compose_fsf_tensor, conditional_stats, herald_povm, FsfParams, PovmKind};
use fsf_core::tomography::*;
use num_complex::Complex64 as C64;

fn main() {
    let spec = HilbertSpec::new(6).unwrap();
    let params = FsfParams::new(0.5, 0.45, 0.73, 0.45, spec).unwrap();
    let povm = herald_povm(0.45, 7, PovmKind::Click).unwrap();
    let truth = compose_fsf_tensor(&params, &povm).unwrap();
    let alphas: Vec<C64> = linspace(0.1, 1.5, 20).into_iter().map(|a| C64::new(a, 0.0)).collect();
    let cfg = ReconConfig::default();
    for (it, ll, f) in debug_noiseless_recon(&truth, &alphas, &cfg, 1000, 100) {
        println!("iter {it:5}  ll {ll:.10}  fid {f:.6}");
    }
    let recon = debug_noiseless_recon_tensor(&truth, &alphas, &cfg, 1000);
    let stats = conditional_stats(&recon);
    println!("noiseless P(1|1) after 1000 iters: {:.4} (truth 0.1143)", stats.prob(1,1).unwrap());
    println!("s layers: {:?}", recon.success_layers().iter().map(|s| (s*1e4).round()/1e4).collect::<Vec<_>>());
    println!("truth s: {:?}", truth.success_layers().iter().map(|s| (s*1e4).round()/1e4).collect::<Vec<_>>());
    let ll_truth = debug_noiseless_ll_at_truth(&truth, &alphas, &cfg);
    println!("LL at truth on its own noiseless data (entropy bound): {ll_truth:.10}");
}
